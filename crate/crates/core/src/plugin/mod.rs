//! Passive API facade linked into each rank.
//!
//! Every call is forwarded over one connection to the rank's proxy. The
//! facade owns the state that survives a checkpoint: the administrative
//! replay log, the cache of drained messages, the message counters and the
//! application's state blob.
//!
//! Control frames from the proxy are only acted upon on the application
//! thread, at the entry of an API call or while a call is blocked. A
//! checkpoint therefore always captures the rank just before some call; the
//! interrupted call is re-issued afterwards and consults the cache first.

mod cache;
mod env;
mod log;

use std::io;
use std::net::{Shutdown, TcpStream};
use std::path::PathBuf;
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread;
use std::time::Duration;

pub use cache::ReceiveCache;
pub use env::{EnvError, LaunchEnv, LaunchMode, ENV_CKPT_AFTER_CALL, ENV_IMAGE_PATH, ENV_MODE, ENV_PROXY_ENDPOINT};
pub use log::{ReplayKind, ReplayLog, ReplayLogEntry};

use crate::ckpt::{read_image, write_image, CheckpointImage, Counters, ImageError};
use crate::proto::{
    read_frame_on, write_frame, CommQuery, Datatype, Frame, FrameIoError, LinkKind, NackCode, RankId, Selector,
    SendRequest, SourceSelector, Status, Tag, UnknownDatatype, PROTOCOL_VERSION,
};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(10);

/// Plugin-assigned communicator handle. Only the world communicator
/// (`virtual_id == 0`) exists.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CommHandle {
    pub virtual_id: u32,
    pub size: u32,
}

/// Result of [`get_count`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Count {
    Exact(u64),
    Undefined,
}

#[derive(Debug, thiserror::Error)]
pub enum PluginError {
    #[error("init failed: {0}")]
    Init(String),
    #[error("restore diverged at log entry {entry}: {detail}")]
    Restore { entry: usize, detail: String },
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error("usage: {0}")]
    Usage(&'static str),
    #[error("invalid communicator {0}")]
    InvalidComm(u32),
    #[error("invalid rank {0}")]
    InvalidRank(String),
    #[error("invalid tag {0}")]
    InvalidTag(i32),
    #[error(transparent)]
    InvalidType(#[from] UnknownDatatype),
    #[error("payload of {actual} bytes, expected {expected}")]
    Size { expected: usize, actual: usize },
    #[error("message of {actual} bytes truncated to buffer of {capacity}")]
    Truncation { capacity: usize, actual: usize },
    /// The world stopped after a committed checkpoint; the process should
    /// exit and be restarted from the image.
    #[error("halted after checkpoint")]
    Halted,
    #[error("proxy link lost")]
    LinkLost,
    #[error("protocol: {0}")]
    Protocol(String),
}

impl From<FrameIoError> for PluginError {
    fn from(e: FrameIoError) -> Self {
        match e {
            FrameIoError::Io(_) => PluginError::LinkLost,
            other => PluginError::Protocol(other.to_string()),
        }
    }
}

impl From<io::Error> for PluginError {
    fn from(_: io::Error) -> Self {
        PluginError::LinkLost
    }
}

type SaveFn = Box<dyn FnMut() -> Vec<u8>>;
type RestoreFn = Box<dyn FnMut(&[u8]) -> Result<(), String>>;

/// Application state hooks: `save` is called when an image is written,
/// `restore` once during a restored `init`.
pub struct StateCallbacks {
    save: SaveFn,
    restore: RestoreFn,
}

impl StateCallbacks {
    pub fn new(
        save: impl FnMut() -> Vec<u8> + 'static,
        restore: impl FnMut(&[u8]) -> Result<(), String> + 'static,
    ) -> Self {
        StateCallbacks { save: Box::new(save), restore: Box::new(restore) }
    }
}

/// Link and checkpoint counters, for tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PluginStats {
    /// Frames written to the proxy.
    pub frames_sent: u64,
    /// Receive-family calls served from the cache.
    pub cache_hits: u64,
    /// Epochs for which this rank wrote an image.
    pub images_written: Vec<(u64, PathBuf)>,
    /// API calls entered since init.
    pub calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Fresh,
    Restored,
}

enum Wait {
    Reply(Frame),
    Interrupted,
}

pub struct Context {
    rank: RankId,
    world_size: u32,
    mode: Mode,
    link: TcpStream,
    inbound: Receiver<Frame>,
    cache: ReceiveCache,
    log: ReplayLog,
    counters: Counters,
    callbacks: Option<StateCallbacks>,
    ckpt_after_call: Option<u64>,
    hook_fired: bool,
    /// A checkpoint that reached this rank before it finished joining.
    deferred_prepare: Option<u64>,
    halted: bool,
    finalized: bool,
    stats: PluginStats,
}

pub fn type_size(dt: Datatype) -> usize {
    dt.width()
}

/// Width of a raw datatype code.
pub fn type_size_code(code: u8) -> Result<usize, PluginError> {
    Ok(Datatype::try_from(code)?.width())
}

pub fn get_count(status: &Status, dt: Datatype) -> Count {
    let w = dt.width() as u64;
    if status.payload_bytes % w == 0 {
        Count::Exact(status.payload_bytes / w)
    } else {
        Count::Undefined
    }
}

fn spawn_reader(stream: TcpStream, rank_hint: String) -> Receiver<Frame> {
    let (tx, rx) = mpsc::channel();
    let mut stream = stream;
    thread::spawn(move || loop {
        match read_frame_on(&mut stream, LinkKind::ProxyToPlugin) {
            Ok(Some(f)) => {
                if tx.send(f).is_err() {
                    return;
                }
            }
            Ok(None) => return,
            Err(e) => {
                ::log::debug!("plugin {rank_hint}: link read ended: {e}");
                return;
            }
        }
    });
    rx
}

impl Context {
    /// Connects to the proxy and joins the world, or rebuilds a rank from
    /// its image when the launch mode is `Restored`.
    pub fn init(env: &LaunchEnv, callbacks: Option<StateCallbacks>) -> Result<Context, PluginError> {
        let link = crate::proxy::connect_with_retry(env.proxy_endpoint, CONNECT_TIMEOUT)
            .map_err(|e| PluginError::Init(format!("proxy {} unreachable: {e}", env.proxy_endpoint)))?;
        let inbound = spawn_reader(link.try_clone()?, env.proxy_endpoint.to_string());
        if callbacks.is_none() {
            ::log::warn!("no state callbacks registered; checkpoints will carry an empty state blob");
        }
        let mut ctx = Context {
            rank: RankId(0),
            world_size: 0,
            mode: Mode::Fresh,
            link,
            inbound,
            cache: ReceiveCache::new(),
            log: ReplayLog::new(),
            counters: Counters::default(),
            callbacks,
            ckpt_after_call: env.ckpt_after_call,
            hook_fired: false,
            deferred_prepare: None,
            halted: false,
            finalized: false,
            stats: PluginStats::default(),
        };
        match &env.mode {
            LaunchMode::Fresh => ctx.init_fresh()?,
            LaunchMode::Restored { image_path } => ctx.init_restored(&read_image(image_path)?)?,
        }
        Ok(ctx)
    }

    fn init_fresh(&mut self) -> Result<(), PluginError> {
        self.write(&Frame::Init { version: PROTOCOL_VERSION })?;
        match self.init_reply()? {
            Frame::InitOk { rank, world_size } if world_size > 0 && rank.0 < world_size => {
                self.rank = rank;
                self.world_size = world_size;
                self.counters = Counters::new(world_size);
                self.log.push(ReplayLogEntry::Init { rank, world_size });
                Ok(())
            }
            other => Err(PluginError::Init(format!("unexpected answer to INIT: {:?}", other.opcode()))),
        }
    }

    fn init_restored(&mut self, img: &CheckpointImage) -> Result<(), PluginError> {
        self.mode = Mode::Restored;
        self.rank = img.rank;
        self.world_size = img.world_size;
        for (i, entry) in img.replay_log.iter().enumerate() {
            let diverged = |detail: String| PluginError::Restore { entry: i, detail };
            match *entry {
                ReplayLogEntry::Init { rank, world_size } => {
                    self.write(&Frame::Init { version: PROTOCOL_VERSION })?;
                    match self.init_reply()? {
                        Frame::InitOk { rank: r, world_size: ws } if r == rank && ws == world_size => {}
                        Frame::InitOk { rank: r, world_size: ws } => {
                            return Err(diverged(format!(
                                "INIT answered rank {r} of {ws}, recorded rank {rank} of {world_size}"
                            )))
                        }
                        other => return Err(diverged(format!("INIT answered {:?}", other.opcode()))),
                    }
                }
                ReplayLogEntry::CommQuery { query, comm, result } => {
                    self.write(&Frame::CommQuery { query, comm })?;
                    match self.init_reply()? {
                        Frame::CommQueryResult { value } if value == result => {}
                        Frame::CommQueryResult { value } => {
                            return Err(diverged(format!("{query:?} answered {value}, recorded {result}")))
                        }
                        other => return Err(diverged(format!("{query:?} answered {:?}", other.opcode()))),
                    }
                }
            }
        }
        if !matches!(img.replay_log.first(), Some(ReplayLogEntry::Init { .. })) {
            return Err(PluginError::Restore { entry: 0, detail: "log does not start with INIT".into() });
        }
        self.write(&Frame::RestoreCounters {
            sent: img.counters.sent,
            received: img.counters.received,
            next_seq: img.counters.per_dest_sent.clone(),
        })?;
        match self.init_reply()? {
            Frame::RestoreOk => {}
            Frame::Nack { detail, .. } => return Err(PluginError::Init(format!("counter restore refused: {detail}"))),
            other => return Err(PluginError::Init(format!("unexpected answer to RESTORE: {:?}", other.opcode()))),
        }
        self.log = ReplayLog::from_entries(img.replay_log.clone());
        self.cache = ReceiveCache::from_entries(img.cache.iter().cloned());
        self.counters = img.counters.clone();
        if let Some(cb) = self.callbacks.as_mut() {
            (cb.restore)(&img.app_blob).map_err(|e| PluginError::Init(format!("state restore failed: {e}")))?;
        }
        Ok(())
    }

    pub fn rank(&self) -> RankId {
        self.rank
    }

    pub fn world_size(&self) -> u32 {
        self.world_size
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn comm_world(&self) -> CommHandle {
        CommHandle { virtual_id: 0, size: self.world_size }
    }

    pub fn counters(&self) -> &Counters {
        &self.counters
    }

    pub fn cache(&self) -> &ReceiveCache {
        &self.cache
    }

    pub fn replay_log(&self) -> &ReplayLog {
        &self.log
    }

    pub fn stats(&self) -> &PluginStats {
        &self.stats
    }

    fn write(&mut self, f: &Frame) -> Result<(), PluginError> {
        write_frame(&mut self.link, f)?;
        self.stats.frames_sent += 1;
        Ok(())
    }

    fn next_frame(&mut self) -> Result<Frame, PluginError> {
        self.inbound.recv().map_err(|_| PluginError::LinkLost)
    }

    /// Next answer while joining or replaying. A checkpoint started by
    /// faster ranks meanwhile is kept for the first API call.
    fn init_reply(&mut self) -> Result<Frame, PluginError> {
        loop {
            match self.next_frame()? {
                Frame::CkptPrepare { epoch } => self.deferred_prepare = Some(epoch),
                Frame::CkptAbort { epoch, .. } if self.deferred_prepare == Some(epoch) => {
                    self.deferred_prepare = None;
                    self.write(&Frame::Resumed)?;
                }
                other => return Ok(other),
            }
        }
    }

    fn check_comm(&self, comm: CommHandle) -> Result<(), PluginError> {
        if comm.virtual_id != 0 {
            return Err(PluginError::InvalidComm(comm.virtual_id));
        }
        Ok(())
    }

    fn check_selector(&self, src: SourceSelector, tag: Tag) -> Result<Selector, PluginError> {
        if let SourceSelector::Rank(r) = src {
            if r.0 >= self.world_size {
                return Err(PluginError::InvalidRank(r.to_string()));
            }
        }
        if !tag.is_any() && !tag.is_concrete() {
            return Err(PluginError::InvalidTag(tag.0));
        }
        Ok(Selector::new(src, tag))
    }

    /// Common entry of every API call: refuses calls after shutdown, fires
    /// the scripted checkpoint hook, then handles queued control frames.
    fn enter(&mut self) -> Result<(), PluginError> {
        if self.halted {
            return Err(PluginError::Halted);
        }
        if self.finalized {
            return Err(PluginError::Usage("call after finalize"));
        }
        if let Some(epoch) = self.deferred_prepare.take() {
            self.checkpoint_session(epoch)?;
        }
        if self.rank.0 == 0 && !self.hook_fired && self.ckpt_after_call == Some(self.stats.calls) {
            self.hook_fired = true;
            self.request_checkpoint()?;
        }
        self.stats.calls += 1;
        self.pump()
    }

    /// Asks the coordinator for a checkpoint and waits until it has either
    /// happened or been refused, so the checkpoint lands before this call.
    fn request_checkpoint(&mut self) -> Result<(), PluginError> {
        self.write(&Frame::CkptRequest)?;
        loop {
            match self.next_frame()? {
                Frame::CkptPrepare { epoch } => return self.checkpoint_session(epoch),
                Frame::CkptAbort { reason, .. } => {
                    ::log::warn!("rank {}: checkpoint request refused: {reason}", self.rank);
                    return Ok(());
                }
                other => ::log::debug!("rank {}: ignoring {:?} while requesting", self.rank, other.opcode()),
            }
        }
    }

    /// Handles control frames that are already queued, without blocking.
    fn pump(&mut self) -> Result<(), PluginError> {
        loop {
            match self.inbound.try_recv() {
                Ok(Frame::CkptPrepare { epoch }) => self.checkpoint_session(epoch)?,
                Ok(other) => ::log::debug!("rank {}: dropping stray {:?}", self.rank, other.opcode()),
                Err(TryRecvError::Empty) => return Ok(()),
                Err(TryRecvError::Disconnected) => return Err(PluginError::LinkLost),
            }
        }
    }

    /// Blocks for the answer to the outstanding request. A checkpoint that
    /// starts meanwhile is served first and reported as `Interrupted`; the
    /// proxy discarded the request, so the caller re-issues it.
    fn wait_reply(&mut self) -> Result<Wait, PluginError> {
        loop {
            match self.next_frame()? {
                Frame::CkptPrepare { epoch } => {
                    self.checkpoint_session(epoch)?;
                    return Ok(Wait::Interrupted);
                }
                f @ (Frame::SendAck { .. }
                | Frame::Nack { .. }
                | Frame::Deliver(_)
                | Frame::ProbeResult(_)
                | Frame::IprobeResult(_)
                | Frame::CommQueryResult { .. }
                | Frame::FinalizeAck
                | Frame::Pong) => return Ok(Wait::Reply(f)),
                other => ::log::debug!("rank {}: dropping stray {:?}", self.rank, other.opcode()),
            }
        }
    }

    /// Runs one checkpoint from this rank's side: park, absorb drained
    /// envelopes, write the image, then wait for the outcome.
    fn checkpoint_session(&mut self, epoch: u64) -> Result<(), PluginError> {
        self.write(&Frame::PrepareAck { epoch, rank: self.rank })?;
        loop {
            match self.next_frame()? {
                Frame::CachePut(env) => {
                    self.cache.push(env);
                    self.counters.received += 1;
                }
                Frame::CkptWrite { epoch: e, dir } if e == epoch => {
                    let reply = match self.write_image_to(epoch, &dir) {
                        Ok(path) => {
                            self.stats.images_written.push((epoch, path.clone()));
                            Frame::WriteAck { epoch, rank: self.rank, path: path.display().to_string() }
                        }
                        Err(e) => Frame::WriteFail { epoch, rank: self.rank, reason: e.to_string() },
                    };
                    self.write(&reply)?;
                }
                Frame::CkptCommit { .. } => {}
                Frame::CkptResume { epoch: e } if e == epoch => {
                    self.write(&Frame::Resumed)?;
                    return Ok(());
                }
                Frame::CkptAbort { epoch: e, reason } if e == epoch => {
                    ::log::warn!("rank {}: checkpoint {epoch} aborted: {reason}", self.rank);
                    self.write(&Frame::Resumed)?;
                    return Ok(());
                }
                Frame::CkptHalt { .. } => {
                    self.halted = true;
                    let _ = self.link.shutdown(Shutdown::Both);
                    return Err(PluginError::Halted);
                }
                other => ::log::debug!("rank {}: ignoring {:?} in checkpoint", self.rank, other.opcode()),
            }
        }
    }

    /// Image of this rank as of the current call boundary.
    pub fn snapshot(&mut self) -> CheckpointImage {
        let app_blob = match self.callbacks.as_mut() {
            Some(cb) => (cb.save)(),
            None => Vec::new(),
        };
        CheckpointImage {
            rank: self.rank,
            world_size: self.world_size,
            counters: self.counters.clone(),
            replay_log: self.log.entries().to_vec(),
            cache: self.cache.to_vec(),
            app_blob,
        }
    }

    fn write_image_to(&mut self, epoch: u64, dir: &str) -> Result<PathBuf, ImageError> {
        let path = PathBuf::from(dir).join(format!("rank{}.e{epoch}.img", self.rank));
        let img = self.snapshot();
        write_image(&img, &path)?;
        Ok(path)
    }

    fn nack_error(code: NackCode, detail: String) -> PluginError {
        match code {
            NackCode::InvalidRank => PluginError::InvalidRank(detail),
            NackCode::InvalidComm => PluginError::InvalidComm(0),
            NackCode::InvalidTag => PluginError::InvalidTag(-1),
            NackCode::SizeMismatch | NackCode::BadState => PluginError::Protocol(detail),
        }
    }

    pub fn comm_size(&mut self, comm: CommHandle) -> Result<u32, PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        self.log.record_query(CommQuery::Size, comm.virtual_id, self.world_size);
        Ok(self.world_size)
    }

    pub fn comm_rank(&mut self, comm: CommHandle) -> Result<RankId, PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        self.log.record_query(CommQuery::Rank, comm.virtual_id, self.rank.0);
        Ok(self.rank)
    }

    /// Returns once the proxy owns the message.
    pub fn send(
        &mut self,
        payload: &[u8],
        count: u32,
        dt: Datatype,
        dest: RankId,
        tag: Tag,
        comm: CommHandle,
    ) -> Result<(), PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        if dest.0 >= self.world_size {
            return Err(PluginError::InvalidRank(dest.to_string()));
        }
        if !tag.is_concrete() {
            return Err(PluginError::InvalidTag(tag.0));
        }
        let expected = count as usize * dt.width();
        if payload.len() != expected {
            return Err(PluginError::Size { expected, actual: payload.len() });
        }
        let req = SendRequest { dest, tag, datatype: dt, count, payload: payload.to_vec() };
        loop {
            self.write(&Frame::Send(req.clone()))?;
            match self.wait_reply()? {
                Wait::Interrupted => continue,
                Wait::Reply(Frame::SendAck { seq }) => {
                    self.counters.sent += 1;
                    self.counters.per_dest_sent[dest.index()] = seq + 1;
                    return Ok(());
                }
                Wait::Reply(Frame::Nack { code, detail }) => return Err(Self::nack_error(code, detail)),
                Wait::Reply(other) => return Err(PluginError::Protocol(format!("SEND answered {:?}", other.opcode()))),
            }
        }
    }

    /// Receives the oldest matching message, from the cache if possible.
    /// An oversized message is consumed and reported as truncation.
    pub fn recv(
        &mut self,
        count: u32,
        dt: Datatype,
        src: SourceSelector,
        tag: Tag,
        comm: CommHandle,
    ) -> Result<(Vec<u8>, Status), PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        let selector = self.check_selector(src, tag)?;
        let capacity = count as usize * dt.width();
        let env = loop {
            if let Some(env) = self.cache.take(&selector) {
                self.stats.cache_hits += 1;
                break env;
            }
            self.write(&Frame::RecvReq { selector, capacity: capacity as u64 })?;
            match self.wait_reply()? {
                Wait::Interrupted => continue,
                Wait::Reply(Frame::Deliver(env)) => {
                    self.counters.received += 1;
                    break env;
                }
                Wait::Reply(other) => return Err(PluginError::Protocol(format!("RECV answered {:?}", other.opcode()))),
            }
        };
        if env.payload.len() > capacity {
            return Err(PluginError::Truncation { capacity, actual: env.payload.len() });
        }
        let status = env.status();
        Ok((env.payload, status))
    }

    /// Blocks until a matching message is available; does not consume it.
    pub fn probe(&mut self, src: SourceSelector, tag: Tag, comm: CommHandle) -> Result<Status, PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        let selector = self.check_selector(src, tag)?;
        loop {
            if let Some(env) = self.cache.peek(&selector) {
                self.stats.cache_hits += 1;
                return Ok(env.status());
            }
            self.write(&Frame::ProbeReq { selector })?;
            match self.wait_reply()? {
                Wait::Interrupted => continue,
                Wait::Reply(Frame::ProbeResult(st)) => return Ok(st),
                Wait::Reply(other) => {
                    return Err(PluginError::Protocol(format!("PROBE answered {:?}", other.opcode())))
                }
            }
        }
    }

    /// Non-blocking probe over the cache and the proxy's buffered messages.
    pub fn iprobe(&mut self, src: SourceSelector, tag: Tag, comm: CommHandle) -> Result<Option<Status>, PluginError> {
        self.enter()?;
        self.check_comm(comm)?;
        let selector = self.check_selector(src, tag)?;
        loop {
            if let Some(env) = self.cache.peek(&selector) {
                self.stats.cache_hits += 1;
                return Ok(Some(env.status()));
            }
            self.write(&Frame::IprobeReq { selector })?;
            match self.wait_reply()? {
                Wait::Interrupted => continue,
                Wait::Reply(Frame::IprobeResult(st)) => return Ok(st),
                Wait::Reply(other) => {
                    return Err(PluginError::Protocol(format!("IPROBE answered {:?}", other.opcode())))
                }
            }
        }
    }

    /// Blocks until every rank has finalized, then closes the link.
    pub fn finalize(&mut self) -> Result<(), PluginError> {
        if self.finalized {
            return Err(PluginError::Usage("finalize called twice"));
        }
        self.enter()?;
        loop {
            self.write(&Frame::Finalize)?;
            match self.wait_reply()? {
                Wait::Interrupted => continue,
                Wait::Reply(Frame::FinalizeAck) => break,
                Wait::Reply(other) => {
                    return Err(PluginError::Protocol(format!("FINALIZE answered {:?}", other.opcode())))
                }
            }
        }
        self.finalized = true;
        let _ = self.link.shutdown(Shutdown::Both);
        Ok(())
    }
}

impl Drop for Context {
    fn drop(&mut self) {
        let _ = self.link.shutdown(Shutdown::Both);
    }
}
