//! Wire vocabulary shared by every link in the system.
//!
//! Three kinds of sockets exist: plugin↔proxy, proxy↔proxy and
//! proxy↔coordinator (plus the operator control connection to the
//! coordinator). All of them carry the same length-prefixed [`Frame`]
//! encoding and draw opcodes from one namespace; each link only accepts the
//! subset listed by [`LinkKind::accepts`].

mod codec;
mod link;
mod stream;

use std::fmt;

pub use codec::{decode_all, decode_frame, encode_frame, DecodeError, EncodeError, WireReader, WireWriter};
pub use link::LinkKind;
pub use stream::{read_frame, read_frame_on, write_frame, FrameIoError, MAX_FRAME_BODY};

/// Protocol version carried by every handshake frame.
pub const PROTOCOL_VERSION: u8 = 1;

/// Dense rank identifier, `0..world_size`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RankId(pub u32);

impl RankId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for RankId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Message tag. Sent tags are non-negative; [`Tag::ANY`] only appears in
/// receive/probe selectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub i32);

impl Tag {
    pub const ANY: Tag = Tag(-1);

    pub fn is_any(self) -> bool {
        self.0 == -1
    }

    pub fn is_concrete(self) -> bool {
        self.0 >= 0
    }

    pub fn matches(self, concrete: Tag) -> bool {
        self.is_any() || self == concrete
    }
}

/// Source half of a receive/probe selector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SourceSelector {
    Any,
    Rank(RankId),
}

impl SourceSelector {
    /// Sentinel used on the wire for [`SourceSelector::Any`].
    pub const ANY_SOURCE: i32 = -1;

    pub fn matches(self, source: RankId) -> bool {
        match self {
            SourceSelector::Any => true,
            SourceSelector::Rank(r) => r == source,
        }
    }

    pub fn to_wire(self) -> i32 {
        match self {
            SourceSelector::Any => Self::ANY_SOURCE,
            SourceSelector::Rank(r) => r.0 as i32,
        }
    }

    pub fn from_wire(v: i32) -> Option<Self> {
        match v {
            Self::ANY_SOURCE => Some(SourceSelector::Any),
            v if v >= 0 => Some(SourceSelector::Rank(RankId(v as u32))),
            _ => None,
        }
    }
}

impl From<RankId> for SourceSelector {
    fn from(r: RankId) -> Self {
        SourceSelector::Rank(r)
    }
}

/// Full matching key for receive, probe and iprobe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Selector {
    pub source: SourceSelector,
    pub tag: Tag,
}

impl Selector {
    pub fn new(source: SourceSelector, tag: Tag) -> Self {
        Selector { source, tag }
    }

    pub fn matches(&self, env: &MessageEnvelope) -> bool {
        self.source.matches(env.source) && self.tag.matches(env.tag)
    }
}

/// Element types with a fixed width table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Datatype {
    Byte = 0,
    Char = 1,
    Int32 = 2,
    Int64 = 3,
    Float64 = 4,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("unknown datatype code {0}")]
pub struct UnknownDatatype(pub u8);

impl Datatype {
    pub const ALL: [Datatype; 5] =
        [Datatype::Byte, Datatype::Char, Datatype::Int32, Datatype::Int64, Datatype::Float64];

    /// Bytes per element.
    pub const fn width(self) -> usize {
        match self {
            Datatype::Byte | Datatype::Char => 1,
            Datatype::Int32 => 4,
            Datatype::Int64 | Datatype::Float64 => 8,
        }
    }

    pub const fn code(self) -> u8 {
        self as u8
    }
}

impl TryFrom<u8> for Datatype {
    type Error = UnknownDatatype;

    fn try_from(code: u8) -> Result<Self, Self::Error> {
        Datatype::ALL.into_iter().find(|dt| dt.code() == code).ok_or(UnknownDatatype(code))
    }
}

/// One user message, either in flight, buffered at a proxy or cached at a
/// plugin.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MessageEnvelope {
    pub source: RankId,
    pub dest: RankId,
    pub tag: Tag,
    pub datatype: Datatype,
    pub count: u32,
    pub payload: Vec<u8>,
    /// Position on the `(source, dest)` channel, starting at 0.
    pub seq: u64,
}

impl MessageEnvelope {
    pub fn is_well_formed(&self) -> bool {
        self.tag.is_concrete() && self.payload.len() == self.count as usize * self.datatype.width()
    }

    pub fn status(&self) -> Status {
        Status { source: self.source, tag: self.tag, payload_bytes: self.payload.len() as u64, datatype: self.datatype }
    }
}

/// Metadata describing a matched message.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Status {
    pub source: RankId,
    pub tag: Tag,
    pub payload_bytes: u64,
    pub datatype: Datatype,
}

/// A send as the plugin hands it to its proxy; source and sequence number
/// are stamped by the proxy.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SendRequest {
    pub dest: RankId,
    pub tag: Tag,
    pub datatype: Datatype,
    pub count: u32,
    pub payload: Vec<u8>,
}

/// Per-rank sent/received totals reported during draining.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CounterReport {
    pub rank: RankId,
    pub sent: u64,
    pub received: u64,
}

/// Administrative configuration queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum CommQuery {
    Size = 0,
    Rank = 1,
}

impl TryFrom<u8> for CommQuery {
    type Error = u8;

    fn try_from(v: u8) -> Result<Self, u8> {
        match v {
            0 => Ok(CommQuery::Size),
            1 => Ok(CommQuery::Rank),
            other => Err(other),
        }
    }
}

/// Reasons a proxy refuses a plugin request.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum NackCode {
    InvalidRank = 1,
    InvalidTag = 2,
    SizeMismatch = 3,
    InvalidComm = 4,
    BadState = 5,
}

impl TryFrom<u8> for NackCode {
    type Error = u8;

    fn try_from(v: u8) -> Result<Self, u8> {
        Ok(match v {
            1 => NackCode::InvalidRank,
            2 => NackCode::InvalidTag,
            3 => NackCode::SizeMismatch,
            4 => NackCode::InvalidComm,
            5 => NackCode::BadState,
            other => return Err(other),
        })
    }
}

/// Coordinator lifecycle as seen through `STATUS`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum WorldState {
    Forming = 0,
    Running = 1,
    Draining = 2,
    Writing = 3,
    Restarting = 4,
    Done = 5,
}

impl TryFrom<u8> for WorldState {
    type Error = u8;

    fn try_from(v: u8) -> Result<Self, u8> {
        Ok(match v {
            0 => WorldState::Forming,
            1 => WorldState::Running,
            2 => WorldState::Draining,
            3 => WorldState::Writing,
            4 => WorldState::Restarting,
            5 => WorldState::Done,
            other => return Err(other),
        })
    }
}

/// Opcode byte of every frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u8)]
pub enum Opcode {
    Ping = 0x01,
    Pong = 0x02,

    Init = 0x10,
    InitOk = 0x11,
    Send = 0x12,
    SendAck = 0x13,
    Nack = 0x14,
    RecvReq = 0x15,
    Deliver = 0x16,
    ProbeReq = 0x17,
    ProbeResult = 0x18,
    IprobeReq = 0x19,
    IprobeResult = 0x1A,
    Finalize = 0x1B,
    FinalizeAck = 0x1C,
    CommQuery = 0x1D,
    CommQueryResult = 0x1E,
    RestoreCounters = 0x1F,
    RestoreOk = 0x20,
    CkptRequest = 0x21,
    CachePut = 0x22,
    Resumed = 0x23,

    CkptPrepare = 0x30,
    PrepareAck = 0x31,
    CounterReq = 0x32,
    CounterReport = 0x33,
    CkptWrite = 0x34,
    WriteAck = 0x35,
    WriteFail = 0x36,
    CkptCommit = 0x37,
    CkptResume = 0x38,
    CkptAbort = 0x39,
    CkptHalt = 0x3A,

    Register = 0x40,
    World = 0x41,
    Reject = 0x42,
    FinalizeEnter = 0x43,
    FinalizeRelease = 0x44,
    PluginLost = 0x45,

    PeerHello = 0x50,
    Envelope = 0x51,

    CkptNow = 0x60,
    CkptDone = 0x61,
    CkptAborted = 0x62,
    Status = 0x63,
    StatusReply = 0x64,
}

impl Opcode {
    pub const ALL: [Opcode; 46] = [
        Opcode::Ping,
        Opcode::Pong,
        Opcode::Init,
        Opcode::InitOk,
        Opcode::Send,
        Opcode::SendAck,
        Opcode::Nack,
        Opcode::RecvReq,
        Opcode::Deliver,
        Opcode::ProbeReq,
        Opcode::ProbeResult,
        Opcode::IprobeReq,
        Opcode::IprobeResult,
        Opcode::Finalize,
        Opcode::FinalizeAck,
        Opcode::CommQuery,
        Opcode::CommQueryResult,
        Opcode::RestoreCounters,
        Opcode::RestoreOk,
        Opcode::CkptRequest,
        Opcode::CachePut,
        Opcode::Resumed,
        Opcode::CkptPrepare,
        Opcode::PrepareAck,
        Opcode::CounterReq,
        Opcode::CounterReport,
        Opcode::CkptWrite,
        Opcode::WriteAck,
        Opcode::WriteFail,
        Opcode::CkptCommit,
        Opcode::CkptResume,
        Opcode::CkptAbort,
        Opcode::CkptHalt,
        Opcode::Register,
        Opcode::World,
        Opcode::Reject,
        Opcode::FinalizeEnter,
        Opcode::FinalizeRelease,
        Opcode::PluginLost,
        Opcode::PeerHello,
        Opcode::Envelope,
        Opcode::CkptNow,
        Opcode::CkptDone,
        Opcode::CkptAborted,
        Opcode::Status,
        Opcode::StatusReply,
    ];

    pub fn from_byte(b: u8) -> Option<Opcode> {
        Opcode::ALL.into_iter().find(|op| *op as u8 == b)
    }
}

/// Drain statistics attached to a successful checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct DrainSummary {
    pub rounds: u32,
    pub first_sent: u64,
    pub first_received: u64,
}

/// One wire unit. Every variant maps to exactly one [`Opcode`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Frame {
    Ping,
    Pong,

    // plugin <-> proxy
    Init { version: u8 },
    InitOk { rank: RankId, world_size: u32 },
    Send(SendRequest),
    SendAck { seq: u64 },
    Nack { code: NackCode, detail: String },
    RecvReq { selector: Selector, capacity: u64 },
    Deliver(MessageEnvelope),
    ProbeReq { selector: Selector },
    ProbeResult(Status),
    IprobeReq { selector: Selector },
    IprobeResult(Option<Status>),
    Finalize,
    FinalizeAck,
    CommQuery { query: CommQuery, comm: u32 },
    CommQueryResult { value: u32 },
    RestoreCounters { sent: u64, received: u64, next_seq: Vec<u64> },
    RestoreOk,
    CkptRequest,
    CachePut(MessageEnvelope),
    Resumed,

    // checkpoint control, relayed coordinator -> proxy -> plugin
    CkptPrepare { epoch: u64 },
    PrepareAck { epoch: u64, rank: RankId },
    CounterReq { round: u64 },
    CounterReport { round: u64, report: CounterReport },
    CkptWrite { epoch: u64, dir: String },
    WriteAck { epoch: u64, rank: RankId, path: String },
    WriteFail { epoch: u64, rank: RankId, reason: String },
    CkptCommit { epoch: u64 },
    CkptResume { epoch: u64 },
    CkptAbort { epoch: u64, reason: String },
    CkptHalt { epoch: u64 },

    // proxy <-> coordinator
    Register { version: u8, rank: RankId, endpoint: String },
    World { endpoints: Vec<String> },
    Reject { reason: String },
    FinalizeEnter { rank: RankId },
    FinalizeRelease,
    PluginLost { rank: RankId },

    // proxy <-> proxy
    PeerHello { version: u8, rank: RankId },
    Envelope(MessageEnvelope),

    // operator control <-> coordinator
    CkptNow,
    CkptDone { epoch: u64, drain: DrainSummary, manifest: String },
    CkptAborted { reason: String },
    Status,
    StatusReply { state: WorldState, world_size: u32, members: u32, epoch: u64 },
}

impl Frame {
    pub fn opcode(&self) -> Opcode {
        match self {
            Frame::Ping => Opcode::Ping,
            Frame::Pong => Opcode::Pong,
            Frame::Init { .. } => Opcode::Init,
            Frame::InitOk { .. } => Opcode::InitOk,
            Frame::Send(_) => Opcode::Send,
            Frame::SendAck { .. } => Opcode::SendAck,
            Frame::Nack { .. } => Opcode::Nack,
            Frame::RecvReq { .. } => Opcode::RecvReq,
            Frame::Deliver(_) => Opcode::Deliver,
            Frame::ProbeReq { .. } => Opcode::ProbeReq,
            Frame::ProbeResult(_) => Opcode::ProbeResult,
            Frame::IprobeReq { .. } => Opcode::IprobeReq,
            Frame::IprobeResult(_) => Opcode::IprobeResult,
            Frame::Finalize => Opcode::Finalize,
            Frame::FinalizeAck => Opcode::FinalizeAck,
            Frame::CommQuery { .. } => Opcode::CommQuery,
            Frame::CommQueryResult { .. } => Opcode::CommQueryResult,
            Frame::RestoreCounters { .. } => Opcode::RestoreCounters,
            Frame::RestoreOk => Opcode::RestoreOk,
            Frame::CkptRequest => Opcode::CkptRequest,
            Frame::CachePut(_) => Opcode::CachePut,
            Frame::Resumed => Opcode::Resumed,
            Frame::CkptPrepare { .. } => Opcode::CkptPrepare,
            Frame::PrepareAck { .. } => Opcode::PrepareAck,
            Frame::CounterReq { .. } => Opcode::CounterReq,
            Frame::CounterReport { .. } => Opcode::CounterReport,
            Frame::CkptWrite { .. } => Opcode::CkptWrite,
            Frame::WriteAck { .. } => Opcode::WriteAck,
            Frame::WriteFail { .. } => Opcode::WriteFail,
            Frame::CkptCommit { .. } => Opcode::CkptCommit,
            Frame::CkptResume { .. } => Opcode::CkptResume,
            Frame::CkptAbort { .. } => Opcode::CkptAbort,
            Frame::CkptHalt { .. } => Opcode::CkptHalt,
            Frame::Register { .. } => Opcode::Register,
            Frame::World { .. } => Opcode::World,
            Frame::Reject { .. } => Opcode::Reject,
            Frame::FinalizeEnter { .. } => Opcode::FinalizeEnter,
            Frame::FinalizeRelease => Opcode::FinalizeRelease,
            Frame::PluginLost { .. } => Opcode::PluginLost,
            Frame::PeerHello { .. } => Opcode::PeerHello,
            Frame::Envelope(_) => Opcode::Envelope,
            Frame::CkptNow => Opcode::CkptNow,
            Frame::CkptDone { .. } => Opcode::CkptDone,
            Frame::CkptAborted { .. } => Opcode::CkptAborted,
            Frame::Status => Opcode::Status,
            Frame::StatusReply { .. } => Opcode::StatusReply,
        }
    }
}
