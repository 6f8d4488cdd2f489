use super::*;

/// Failure to encode a frame.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum EncodeError {
    #[error("frame body of {0} bytes exceeds the 32-bit length prefix")]
    TooLarge(usize),
    #[error("malformed frame: {0}")]
    Malformed(&'static str),
}

/// Failure to decode a frame.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DecodeError {
    /// The input ends before the frame does; `n` more bytes are required
    /// to make progress.
    #[error("need {0} more bytes")]
    NeedMoreBytes(usize),
    #[error("protocol error: {0}")]
    Protocol(String),
}

fn protocol(msg: impl Into<String>) -> DecodeError {
    DecodeError::Protocol(msg.into())
}

/// Little-endian field writer shared by the frame codec and the image
/// format.
#[derive(Debug, Default)]
pub struct WireWriter {
    buf: Vec<u8>,
}

impl WireWriter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn into_inner(self) -> Vec<u8> {
        self.buf
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.buf
    }

    pub fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    pub fn u16(&mut self, v: u16) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn i32(&mut self, v: i32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    pub fn raw(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn bytes(&mut self, bytes: &[u8]) -> Result<(), EncodeError> {
        let len = u32::try_from(bytes.len()).map_err(|_| EncodeError::TooLarge(bytes.len()))?;
        self.u32(len);
        self.raw(bytes);
        Ok(())
    }

    pub fn string(&mut self, s: &str) -> Result<(), EncodeError> {
        self.bytes(s.as_bytes())
    }

    pub fn selector(&mut self, sel: &Selector) {
        self.i32(sel.source.to_wire());
        self.i32(sel.tag.0);
    }

    pub fn status(&mut self, st: &Status) {
        self.u32(st.source.0);
        self.i32(st.tag.0);
        self.u64(st.payload_bytes);
        self.u8(st.datatype.code());
    }

    pub fn envelope(&mut self, env: &MessageEnvelope) -> Result<(), EncodeError> {
        if !env.is_well_formed() {
            return Err(EncodeError::Malformed("envelope payload/count/tag mismatch"));
        }
        self.u32(env.source.0);
        self.u32(env.dest.0);
        self.i32(env.tag.0);
        self.u8(env.datatype.code());
        self.u32(env.count);
        self.u64(env.seq);
        self.bytes(&env.payload)
    }
}

/// Bounds-checked little-endian field reader. Every read that would run
/// past the end yields a protocol error: the reader always covers a region
/// whose length was already declared.
#[derive(Debug)]
pub struct WireReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        WireReader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        if self.remaining() < n {
            return Err(protocol(format!("field of {n} bytes overruns region ({} left)", self.remaining())));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N], DecodeError> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, DecodeError> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn i32(&mut self) -> Result<i32, DecodeError> {
        Ok(i32::from_le_bytes(self.array()?))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    pub fn bytes(&mut self) -> Result<Vec<u8>, DecodeError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn string(&mut self) -> Result<String, DecodeError> {
        String::from_utf8(self.bytes()?).map_err(|_| protocol("string field is not UTF-8"))
    }

    pub fn rank(&mut self) -> Result<RankId, DecodeError> {
        Ok(RankId(self.u32()?))
    }

    pub fn datatype(&mut self) -> Result<Datatype, DecodeError> {
        let code = self.u8()?;
        Datatype::try_from(code).map_err(|e| protocol(e.to_string()))
    }

    pub fn concrete_tag(&mut self) -> Result<Tag, DecodeError> {
        let tag = Tag(self.i32()?);
        if !tag.is_concrete() {
            return Err(protocol(format!("negative tag {} in a concrete position", tag.0)));
        }
        Ok(tag)
    }

    pub fn selector(&mut self) -> Result<Selector, DecodeError> {
        let src = self.i32()?;
        let source = SourceSelector::from_wire(src).ok_or_else(|| protocol(format!("bad source selector {src}")))?;
        let tag = Tag(self.i32()?);
        if tag.0 < -1 {
            return Err(protocol(format!("bad tag selector {}", tag.0)));
        }
        Ok(Selector { source, tag })
    }

    pub fn status(&mut self) -> Result<Status, DecodeError> {
        Ok(Status {
            source: self.rank()?,
            tag: self.concrete_tag()?,
            payload_bytes: self.u64()?,
            datatype: self.datatype()?,
        })
    }

    pub fn envelope(&mut self) -> Result<MessageEnvelope, DecodeError> {
        let env = MessageEnvelope {
            source: self.rank()?,
            dest: self.rank()?,
            tag: self.concrete_tag()?,
            datatype: self.datatype()?,
            count: self.u32()?,
            seq: self.u64()?,
            payload: self.bytes()?,
        };
        if !env.is_well_formed() {
            return Err(protocol(format!(
                "payload of {} bytes does not match count {} x width {}",
                env.payload.len(),
                env.count,
                env.datatype.width()
            )));
        }
        Ok(env)
    }

    pub fn finish(&self) -> Result<(), DecodeError> {
        if self.remaining() != 0 {
            return Err(protocol(format!("{} trailing bytes", self.remaining())));
        }
        Ok(())
    }
}

fn encode_body(f: &Frame, w: &mut WireWriter) -> Result<(), EncodeError> {
    w.u8(f.opcode() as u8);
    match f {
        Frame::Ping
        | Frame::Pong
        | Frame::Finalize
        | Frame::FinalizeAck
        | Frame::RestoreOk
        | Frame::CkptRequest
        | Frame::Resumed
        | Frame::FinalizeRelease
        | Frame::CkptNow
        | Frame::Status => {}
        Frame::Init { version } => w.u8(*version),
        Frame::InitOk { rank, world_size } => {
            w.u32(rank.0);
            w.u32(*world_size);
        }
        Frame::Send(req) => {
            if !req.tag.is_concrete() || req.payload.len() != req.count as usize * req.datatype.width() {
                return Err(EncodeError::Malformed("send payload/count/tag mismatch"));
            }
            w.u32(req.dest.0);
            w.i32(req.tag.0);
            w.u8(req.datatype.code());
            w.u32(req.count);
            w.bytes(&req.payload)?;
        }
        Frame::SendAck { seq } => w.u64(*seq),
        Frame::Nack { code, detail } => {
            w.u8(*code as u8);
            w.string(detail)?;
        }
        Frame::RecvReq { selector, capacity } => {
            w.selector(selector);
            w.u64(*capacity);
        }
        Frame::Deliver(env) | Frame::CachePut(env) | Frame::Envelope(env) => w.envelope(env)?,
        Frame::ProbeReq { selector } | Frame::IprobeReq { selector } => w.selector(selector),
        Frame::ProbeResult(st) => w.status(st),
        Frame::IprobeResult(st) => match st {
            None => w.u8(0),
            Some(st) => {
                w.u8(1);
                w.status(st);
            }
        },
        Frame::CommQuery { query, comm } => {
            w.u8(*query as u8);
            w.u32(*comm);
        }
        Frame::CommQueryResult { value } => w.u32(*value),
        Frame::RestoreCounters { sent, received, next_seq } => {
            w.u64(*sent);
            w.u64(*received);
            let n = u32::try_from(next_seq.len()).map_err(|_| EncodeError::TooLarge(next_seq.len()))?;
            w.u32(n);
            for s in next_seq {
                w.u64(*s);
            }
        }
        Frame::CkptPrepare { epoch }
        | Frame::CkptCommit { epoch }
        | Frame::CkptResume { epoch }
        | Frame::CkptHalt { epoch } => w.u64(*epoch),
        Frame::PrepareAck { epoch, rank } => {
            w.u64(*epoch);
            w.u32(rank.0);
        }
        Frame::CounterReq { round } => w.u64(*round),
        Frame::CounterReport { round, report } => {
            w.u64(*round);
            w.u32(report.rank.0);
            w.u64(report.sent);
            w.u64(report.received);
        }
        Frame::CkptWrite { epoch, dir } => {
            w.u64(*epoch);
            w.string(dir)?;
        }
        Frame::WriteAck { epoch, rank, path } => {
            w.u64(*epoch);
            w.u32(rank.0);
            w.string(path)?;
        }
        Frame::WriteFail { epoch, rank, reason } => {
            w.u64(*epoch);
            w.u32(rank.0);
            w.string(reason)?;
        }
        Frame::CkptAbort { epoch, reason } => {
            w.u64(*epoch);
            w.string(reason)?;
        }
        Frame::Register { version, rank, endpoint } => {
            w.u8(*version);
            w.u32(rank.0);
            w.string(endpoint)?;
        }
        Frame::World { endpoints } => {
            let n = u32::try_from(endpoints.len()).map_err(|_| EncodeError::TooLarge(endpoints.len()))?;
            w.u32(n);
            for e in endpoints {
                w.string(e)?;
            }
        }
        Frame::Reject { reason } | Frame::CkptAborted { reason } => w.string(reason)?,
        Frame::FinalizeEnter { rank } | Frame::PluginLost { rank } => w.u32(rank.0),
        Frame::PeerHello { version, rank } => {
            w.u8(*version);
            w.u32(rank.0);
        }
        Frame::CkptDone { epoch, drain, manifest } => {
            w.u64(*epoch);
            w.u32(drain.rounds);
            w.u64(drain.first_sent);
            w.u64(drain.first_received);
            w.string(manifest)?;
        }
        Frame::StatusReply { state, world_size, members, epoch } => {
            w.u8(*state as u8);
            w.u32(*world_size);
            w.u32(*members);
            w.u64(*epoch);
        }
    }
    Ok(())
}

/// Encodes `f` as a 32-bit little-endian length prefix followed by the
/// body (opcode byte, then fields).
pub fn encode_frame(f: &Frame) -> Result<Vec<u8>, EncodeError> {
    let mut body = WireWriter::new();
    body.raw(&[0; 4]);
    encode_body(f, &mut body)?;
    let mut out = body.into_inner();
    let len = out.len() - 4;
    let len32 = u32::try_from(len).map_err(|_| EncodeError::TooLarge(len))?;
    out[..4].copy_from_slice(&len32.to_le_bytes());
    Ok(out)
}

fn decode_body(body: &[u8]) -> Result<Frame, DecodeError> {
    let mut r = WireReader::new(body);
    let op_byte = r.u8()?;
    let op = Opcode::from_byte(op_byte).ok_or_else(|| protocol(format!("unknown opcode 0x{op_byte:02x}")))?;
    let frame = match op {
        Opcode::Ping => Frame::Ping,
        Opcode::Pong => Frame::Pong,
        Opcode::Init => Frame::Init { version: r.u8()? },
        Opcode::InitOk => Frame::InitOk { rank: r.rank()?, world_size: r.u32()? },
        Opcode::Send => {
            let req = SendRequest {
                dest: r.rank()?,
                tag: r.concrete_tag()?,
                datatype: r.datatype()?,
                count: r.u32()?,
                payload: r.bytes()?,
            };
            if req.payload.len() != req.count as usize * req.datatype.width() {
                return Err(protocol("send payload does not match count x width"));
            }
            Frame::Send(req)
        }
        Opcode::SendAck => Frame::SendAck { seq: r.u64()? },
        Opcode::Nack => {
            let raw = r.u8()?;
            let code = NackCode::try_from(raw).map_err(|c| protocol(format!("unknown nack code {c}")))?;
            Frame::Nack { code, detail: r.string()? }
        }
        Opcode::RecvReq => Frame::RecvReq { selector: r.selector()?, capacity: r.u64()? },
        Opcode::Deliver => Frame::Deliver(r.envelope()?),
        Opcode::CachePut => Frame::CachePut(r.envelope()?),
        Opcode::Envelope => Frame::Envelope(r.envelope()?),
        Opcode::ProbeReq => Frame::ProbeReq { selector: r.selector()? },
        Opcode::IprobeReq => Frame::IprobeReq { selector: r.selector()? },
        Opcode::ProbeResult => Frame::ProbeResult(r.status()?),
        Opcode::IprobeResult => match r.u8()? {
            0 => Frame::IprobeResult(None),
            1 => Frame::IprobeResult(Some(r.status()?)),
            f => return Err(protocol(format!("bad iprobe flag {f}"))),
        },
        Opcode::Finalize => Frame::Finalize,
        Opcode::FinalizeAck => Frame::FinalizeAck,
        Opcode::CommQuery => {
            let raw = r.u8()?;
            let query = CommQuery::try_from(raw).map_err(|q| protocol(format!("unknown comm query {q}")))?;
            Frame::CommQuery { query, comm: r.u32()? }
        }
        Opcode::CommQueryResult => Frame::CommQueryResult { value: r.u32()? },
        Opcode::RestoreCounters => {
            let sent = r.u64()?;
            let received = r.u64()?;
            let n = r.u32()? as usize;
            if n.saturating_mul(8) > r.remaining() {
                return Err(protocol("next_seq table overruns frame"));
            }
            let next_seq = (0..n).map(|_| r.u64()).collect::<Result<_, _>>()?;
            Frame::RestoreCounters { sent, received, next_seq }
        }
        Opcode::RestoreOk => Frame::RestoreOk,
        Opcode::CkptRequest => Frame::CkptRequest,
        Opcode::Resumed => Frame::Resumed,
        Opcode::CkptPrepare => Frame::CkptPrepare { epoch: r.u64()? },
        Opcode::PrepareAck => Frame::PrepareAck { epoch: r.u64()?, rank: r.rank()? },
        Opcode::CounterReq => Frame::CounterReq { round: r.u64()? },
        Opcode::CounterReport => Frame::CounterReport {
            round: r.u64()?,
            report: CounterReport { rank: r.rank()?, sent: r.u64()?, received: r.u64()? },
        },
        Opcode::CkptWrite => Frame::CkptWrite { epoch: r.u64()?, dir: r.string()? },
        Opcode::WriteAck => Frame::WriteAck { epoch: r.u64()?, rank: r.rank()?, path: r.string()? },
        Opcode::WriteFail => Frame::WriteFail { epoch: r.u64()?, rank: r.rank()?, reason: r.string()? },
        Opcode::CkptCommit => Frame::CkptCommit { epoch: r.u64()? },
        Opcode::CkptResume => Frame::CkptResume { epoch: r.u64()? },
        Opcode::CkptAbort => Frame::CkptAbort { epoch: r.u64()?, reason: r.string()? },
        Opcode::CkptHalt => Frame::CkptHalt { epoch: r.u64()? },
        Opcode::Register => Frame::Register { version: r.u8()?, rank: r.rank()?, endpoint: r.string()? },
        Opcode::World => {
            let n = r.u32()? as usize;
            if n.saturating_mul(4) > r.remaining() {
                return Err(protocol("endpoint table overruns frame"));
            }
            let endpoints = (0..n).map(|_| r.string()).collect::<Result<_, _>>()?;
            Frame::World { endpoints }
        }
        Opcode::Reject => Frame::Reject { reason: r.string()? },
        Opcode::FinalizeEnter => Frame::FinalizeEnter { rank: r.rank()? },
        Opcode::FinalizeRelease => Frame::FinalizeRelease,
        Opcode::PluginLost => Frame::PluginLost { rank: r.rank()? },
        Opcode::PeerHello => Frame::PeerHello { version: r.u8()?, rank: r.rank()? },
        Opcode::CkptNow => Frame::CkptNow,
        Opcode::CkptDone => Frame::CkptDone {
            epoch: r.u64()?,
            drain: DrainSummary { rounds: r.u32()?, first_sent: r.u64()?, first_received: r.u64()? },
            manifest: r.string()?,
        },
        Opcode::CkptAborted => Frame::CkptAborted { reason: r.string()? },
        Opcode::Status => Frame::Status,
        Opcode::StatusReply => {
            let raw = r.u8()?;
            let state = WorldState::try_from(raw).map_err(|s| protocol(format!("unknown world state {s}")))?;
            Frame::StatusReply { state, world_size: r.u32()?, members: r.u32()?, epoch: r.u64()? }
        }
    };
    r.finish()?;
    Ok(frame)
}

/// Decodes the frame at the start of `bytes`, returning it together with
/// the number of bytes it occupied. Never looks past the declared length.
pub fn decode_frame(bytes: &[u8]) -> Result<(Frame, usize), DecodeError> {
    if bytes.len() < 4 {
        return Err(DecodeError::NeedMoreBytes(4 - bytes.len()));
    }
    let len = u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]) as usize;
    let available = bytes.len() - 4;
    if available < len {
        return Err(DecodeError::NeedMoreBytes(len - available));
    }
    if len == 0 {
        return Err(protocol("empty frame body"));
    }
    let frame = decode_body(&bytes[4..4 + len])?;
    Ok((frame, 4 + len))
}

/// Decodes a buffer holding zero or more complete frames back to back.
pub fn decode_all(mut bytes: &[u8]) -> Result<Vec<Frame>, DecodeError> {
    let mut out = Vec::new();
    while !bytes.is_empty() {
        let (f, used) = decode_frame(bytes)?;
        out.push(f);
        bytes = &bytes[used..];
    }
    Ok(out)
}
