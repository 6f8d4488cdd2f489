//! World formation, finalize barrier and checkpoint orchestration.
//!
//! Every connection gets a reader thread that decodes frames into one
//! channel; a single event loop owns the [`WorldRegistry`] and all
//! decisions. While a checkpoint runs, the loop waits for specific answers
//! and handles everything else as side traffic.

mod drain;
mod registry;

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

pub use drain::{
    drain_loop, is_quiescent, totals, CounterSource, DrainError, QuiescenceProof, Totals, DEFAULT_MAX_ROUNDS,
};
pub use registry::{Member, RegistryError, WorldRegistry};

use crate::ckpt::Manifest;
use crate::proto::{
    read_frame, read_frame_on, write_frame, CounterReport, DrainSummary, Frame, LinkKind, RankId, WorldState,
    PROTOCOL_VERSION,
};

pub const DEFAULT_PHASE_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Debug, Clone)]
pub struct CoordinatorConfig {
    pub listen: SocketAddr,
    pub world_size: u32,
    pub image_dir: PathBuf,
    pub ckpt_interval: Option<Duration>,
    /// Continue after this epoch in RESTARTING state.
    pub restart_epoch: Option<u64>,
    /// Stop the world right after the first committed checkpoint.
    pub halt_after_ckpt: bool,
    pub phase_timeout: Duration,
    pub max_drain_rounds: u32,
    /// Pause between drain rounds.
    pub drain_poll: Duration,
    /// Print `MANIFEST <path>` on stdout after each commit.
    pub announce: bool,
}

impl CoordinatorConfig {
    pub fn new(world_size: u32, image_dir: impl Into<PathBuf>) -> Self {
        CoordinatorConfig {
            listen: "127.0.0.1:0".parse().expect("literal address"),
            world_size,
            image_dir: image_dir.into(),
            ckpt_interval: None,
            restart_epoch: None,
            halt_after_ckpt: false,
            phase_timeout: DEFAULT_PHASE_TIMEOUT,
            max_drain_rounds: DEFAULT_MAX_ROUNDS,
            drain_poll: Duration::from_millis(2),
            announce: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CheckpointRecord {
    pub epoch: u64,
    pub manifest: PathBuf,
    pub drain: QuiescenceProof,
}

#[derive(Debug, Clone, Default)]
pub struct CoordinatorReport {
    pub checkpoints: Vec<CheckpointRecord>,
    pub aborted: Vec<String>,
    pub halted: bool,
}

#[derive(Debug, thiserror::Error)]
pub enum CoordinatorError {
    #[error("rank {0} lost")]
    RankLost(RankId),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

enum Event {
    Registered { conn: u64, version: u8, rank: RankId, endpoint: String, stream: TcpStream },
    Proxy { conn: u64, frame: Frame },
    ProxyClosed { conn: u64 },
    Control { frame: Frame, reply: TcpStream },
}

/// A coordinator with its listening socket bound.
pub struct Coordinator {
    config: CoordinatorConfig,
    listener: TcpListener,
}

struct Session {
    conn: u64,
    stream: TcpStream,
}

struct Core {
    cfg: CoordinatorConfig,
    reg: WorldRegistry,
    rx: Receiver<Event>,
    sessions: BTreeMap<RankId, Session>,
    conns: HashMap<u64, RankId>,
    lost: Option<RankId>,
    report: CoordinatorReport,
}

impl Coordinator {
    pub fn bind(mut config: CoordinatorConfig) -> io::Result<Coordinator> {
        fs::create_dir_all(&config.image_dir)?;
        config.image_dir = fs::canonicalize(&config.image_dir)?;
        let listener = TcpListener::bind(config.listen)?;
        Ok(Coordinator { config, listener })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.listener.local_addr().expect("bound listener")
    }

    pub fn image_dir(&self) -> &PathBuf {
        &self.config.image_dir
    }

    /// Serves until the world finalizes or halts. Losing a rank outside a
    /// checkpoint is fatal.
    pub fn run(self) -> Result<CoordinatorReport, CoordinatorError> {
        let addr = self.local_addr();
        let stop = Arc::new(AtomicBool::new(false));
        let (tx, rx) = mpsc::channel();
        {
            let stop = Arc::clone(&stop);
            let listener = self.listener;
            thread::spawn(move || accept_loop(listener, tx, stop));
        }
        let reg = match self.config.restart_epoch {
            Some(epoch) => WorldRegistry::restarting(self.config.world_size, epoch),
            None => WorldRegistry::new(self.config.world_size),
        };
        let mut core = Core {
            cfg: self.config,
            reg,
            rx,
            sessions: BTreeMap::new(),
            conns: HashMap::new(),
            lost: None,
            report: CoordinatorReport::default(),
        };
        let result = core.serve();
        stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect(addr);
        for s in core.sessions.values() {
            let _ = s.stream.shutdown(Shutdown::Both);
        }
        result.map(|()| core.report)
    }
}

fn accept_loop(listener: TcpListener, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let mut next_conn = 0u64;
    for stream in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            return;
        }
        let Ok(stream) = stream else { continue };
        let _ = stream.set_nodelay(true);
        next_conn += 1;
        let conn = next_conn;
        let tx = tx.clone();
        thread::spawn(move || serve_connection(conn, stream, tx));
    }
}

fn serve_connection(conn: u64, mut stream: TcpStream, tx: Sender<Event>) {
    let first = match read_frame(&mut stream) {
        Ok(Some(f)) => f,
        _ => return,
    };
    let Ok(clone) = stream.try_clone() else { return };
    match first {
        Frame::Register { version, rank, endpoint } => {
            if tx.send(Event::Registered { conn, version, rank, endpoint, stream: clone }).is_err() {
                return;
            }
            loop {
                match read_frame_on(&mut stream, LinkKind::ProxyToCoordinator) {
                    Ok(Some(frame)) => {
                        if tx.send(Event::Proxy { conn, frame }).is_err() {
                            return;
                        }
                    }
                    Ok(None) | Err(_) => break,
                }
            }
            let _ = tx.send(Event::ProxyClosed { conn });
        }
        f if LinkKind::ControlToCoordinator.accepts(f.opcode()) => {
            let _ = tx.send(Event::Control { frame: f, reply: clone });
            while let Ok(Some(frame)) = read_frame_on(&mut stream, LinkKind::ControlToCoordinator) {
                let Ok(reply) = stream.try_clone() else { return };
                if tx.send(Event::Control { frame, reply }).is_err() {
                    return;
                }
            }
        }
        other => log::warn!("coordinator: connection opened with {:?}", other.opcode()),
    }
}

impl Core {
    fn serve(&mut self) -> Result<(), CoordinatorError> {
        let mut next_tick = self.cfg.ckpt_interval.map(|d| Instant::now() + d);
        while self.reg.state() != WorldState::Done {
            if let Some(r) = self.lost {
                return Err(CoordinatorError::RankLost(r));
            }
            let wait = next_tick.map_or(Duration::from_millis(200), |t| t.saturating_duration_since(Instant::now()));
            match self.rx.recv_timeout(wait) {
                Ok(ev) => self.on_event(ev),
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Ok(()),
            }
            if let (Some(t), Some(d)) = (next_tick, self.cfg.ckpt_interval) {
                if Instant::now() >= t {
                    if self.reg.state() == WorldState::Running {
                        let _ = self.checkpoint();
                    }
                    next_tick = Some(Instant::now() + d);
                }
            }
        }
        if let Some(r) = self.lost {
            return Err(CoordinatorError::RankLost(r));
        }
        // Let proxies close first so nothing they still send is reset.
        let deadline = Instant::now() + self.cfg.phase_timeout;
        while !self.sessions.is_empty() && Instant::now() < deadline {
            match self.rx.recv_timeout(Duration::from_millis(50)) {
                Ok(ev) => {
                    self.side_event(ev);
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => break,
            }
        }
        self.lost = None;
        Ok(())
    }

    fn send_to(&mut self, rank: RankId, frame: &Frame) {
        if let Some(s) = self.sessions.get_mut(&rank) {
            if let Err(e) = write_frame(&mut s.stream, frame) {
                log::debug!("coordinator: write to rank {rank} failed: {e}");
            }
        }
    }

    fn broadcast(&mut self, frame: &Frame) {
        for (rank, s) in self.sessions.iter_mut() {
            if let Err(e) = write_frame(&mut s.stream, frame) {
                log::debug!("coordinator: write to rank {rank} failed: {e}");
            }
        }
    }

    fn status_reply(&self) -> Frame {
        Frame::StatusReply {
            state: self.reg.state(),
            world_size: self.reg.expected(),
            members: self.reg.members().len() as u32,
            epoch: self.reg.epoch(),
        }
    }

    fn on_register(&mut self, conn: u64, version: u8, rank: RankId, endpoint: String, mut stream: TcpStream) {
        if version != PROTOCOL_VERSION {
            let _ = write_frame(&mut stream, &Frame::Reject { reason: format!("protocol version {version}") });
            return;
        }
        match self.reg.register(rank, endpoint) {
            Err(e) => {
                log::warn!("coordinator: rejecting rank {rank}: {e}");
                let _ = write_frame(&mut stream, &Frame::Reject { reason: e.to_string() });
                let _ = stream.shutdown(Shutdown::Both);
            }
            Ok(table) => {
                self.conns.insert(conn, rank);
                self.sessions.insert(rank, Session { conn, stream });
                if let Some(endpoints) = table {
                    log::info!("coordinator: world of {} formed", endpoints.len());
                    self.broadcast(&Frame::World { endpoints });
                }
            }
        }
    }

    fn on_closed(&mut self, conn: u64) {
        let Some(rank) = self.conns.remove(&conn) else { return };
        if self.sessions.get(&rank).is_some_and(|s| s.conn == conn) {
            self.sessions.remove(&rank);
        }
        self.reg.mark_lost(rank);
        if self.reg.state() != WorldState::Done {
            log::error!("coordinator: lost rank {rank}");
            self.lost.get_or_insert(rank);
        }
    }

    /// Handles traffic that is not an awaited checkpoint answer. Proxy
    /// frames that need a decision are handed back.
    fn side_event(&mut self, ev: Event) -> Option<(RankId, Frame)> {
        match ev {
            Event::Registered { conn, version, rank, endpoint, stream } => {
                self.on_register(conn, version, rank, endpoint, stream);
                None
            }
            Event::ProxyClosed { conn } => {
                self.on_closed(conn);
                None
            }
            Event::Control { frame, mut reply } => {
                let answer = match frame {
                    Frame::Ping => Frame::Pong,
                    Frame::Status => self.status_reply(),
                    Frame::CkptNow => return self.control_checkpoint(reply),
                    other => Frame::CkptAborted { reason: format!("unsupported request {:?}", other.opcode()) },
                };
                let _ = write_frame(&mut reply, &answer);
                None
            }
            Event::Proxy { conn, frame } => {
                let rank = *self.conns.get(&conn)?;
                match frame {
                    Frame::PluginLost { rank: r } => {
                        log::error!("coordinator: rank {r} lost its application");
                        self.lost.get_or_insert(r);
                        None
                    }
                    f => Some((rank, f)),
                }
            }
        }
    }

    fn control_checkpoint(&mut self, mut reply: TcpStream) -> Option<(RankId, Frame)> {
        let answer = if self.reg.state() != WorldState::Running {
            Frame::CkptAborted { reason: format!("world is {:?}", self.reg.state()) }
        } else {
            match self.checkpoint() {
                Ok(rec) => Frame::CkptDone {
                    epoch: rec.epoch,
                    drain: DrainSummary {
                        rounds: rec.drain.rounds,
                        first_sent: rec.drain.first.sent,
                        first_received: rec.drain.first.received,
                    },
                    manifest: rec.manifest.display().to_string(),
                },
                Err(reason) => Frame::CkptAborted { reason },
            }
        };
        let _ = write_frame(&mut reply, &answer);
        None
    }

    fn on_event(&mut self, ev: Event) {
        let Some((rank, frame)) = self.side_event(ev) else { return };
        match frame {
            Frame::FinalizeEnter { rank: r } if r == rank => match self.reg.finalize_enter(r) {
                Ok(true) => {
                    log::info!("coordinator: all ranks finalized");
                    self.broadcast(&Frame::FinalizeRelease);
                }
                Ok(false) => {}
                Err(e) => log::warn!("coordinator: finalize from rank {r}: {e}"),
            },
            Frame::CkptNow => {
                if self.reg.state() == WorldState::Running {
                    let _ = self.checkpoint();
                } else {
                    let reason = format!("world is {:?}", self.reg.state());
                    self.send_to(rank, &Frame::CkptAbort { epoch: 0, reason });
                }
            }
            other => log::debug!("coordinator: ignoring {:?} from rank {rank}", other.opcode()),
        }
    }

    /// Waits until every rank has answered; `pick` recognises answers.
    fn collect<T>(
        &mut self,
        what: &str,
        mut pick: impl FnMut(RankId, Frame) -> Option<T>,
    ) -> Result<BTreeMap<RankId, T>, String> {
        let deadline = Instant::now() + self.cfg.phase_timeout;
        let mut got = BTreeMap::new();
        while got.len() < self.reg.expected() as usize {
            if let Some(r) = self.lost {
                return Err(format!("rank {r} lost while waiting for {what}"));
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                let missing: Vec<u32> = (0..self.reg.expected()).filter(|r| !got.contains_key(&RankId(*r))).collect();
                return Err(format!("timed out waiting for {what} from ranks {missing:?}"));
            }
            match self.rx.recv_timeout(left) {
                Ok(Event::Control { frame: Frame::CkptNow, mut reply }) => {
                    let _ = write_frame(&mut reply, &Frame::CkptAborted { reason: "checkpoint in progress".into() });
                }
                Ok(ev) => {
                    if let Some((rank, frame)) = self.side_event(ev) {
                        if let Some(v) = pick(rank, frame) {
                            got.insert(rank, v);
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => return Err("coordinator shutting down".into()),
            }
        }
        Ok(got)
    }

    fn abort(&mut self, epoch: u64, reason: String) -> String {
        log::warn!("coordinator: checkpoint {epoch} aborted: {reason}");
        self.broadcast(&Frame::CkptAbort { epoch, reason: reason.clone() });
        let _ = self.reg.abort_checkpoint();
        self.report.aborted.push(reason.clone());
        reason
    }

    /// One full checkpoint: prepare, drain, write, commit, then resume or
    /// halt.
    fn checkpoint(&mut self) -> Result<CheckpointRecord, String> {
        let epoch = self.reg.begin_checkpoint().map_err(|e| e.to_string())?;
        log::info!("coordinator: checkpoint {epoch} started");
        self.broadcast(&Frame::CkptPrepare { epoch });
        if let Err(reason) = self.collect("prepare acknowledgements", |_, f| match f {
            Frame::PrepareAck { epoch: e, .. } if e == epoch => Some(()),
            _ => None,
        }) {
            return Err(self.abort(epoch, reason));
        }

        let ws = self.reg.expected();
        let max_rounds = self.cfg.max_drain_rounds;
        let proof = match drain_loop(&mut LiveCounters { core: self }, ws, max_rounds) {
            Ok(p) => p,
            Err(e) => return Err(self.abort(epoch, e.to_string())),
        };
        log::info!("coordinator: drained in {} rounds", proof.rounds);

        self.reg.begin_write().map_err(|e| e.to_string())?;
        let dir = self.cfg.image_dir.clone();
        self.broadcast(&Frame::CkptWrite { epoch, dir: dir.display().to_string() });
        let acks = match self.collect("image writes", |_, f| match f {
            Frame::WriteAck { epoch: e, path, .. } if e == epoch => Some(Ok(PathBuf::from(path))),
            Frame::WriteFail { epoch: e, reason, .. } if e == epoch => Some(Err(reason)),
            _ => None,
        }) {
            Ok(a) => a,
            Err(reason) => return Err(self.abort(epoch, reason)),
        };
        let mut images = Vec::with_capacity(acks.len());
        for (rank, ack) in acks {
            match ack {
                Ok(p) => images.push(p),
                Err(reason) => return Err(self.abort(epoch, format!("rank {rank} failed to write: {reason}"))),
            }
        }
        let manifest = Manifest::new(epoch, images);
        let path = dir.join(Manifest::file_name(epoch));
        if let Err(e) = manifest.write(&path) {
            return Err(self.abort(epoch, e.to_string()));
        }

        self.broadcast(&Frame::CkptCommit { epoch });
        if self.cfg.halt_after_ckpt {
            self.broadcast(&Frame::CkptHalt { epoch });
            let _ = self.reg.halt_after_checkpoint();
            self.report.halted = true;
        } else {
            self.broadcast(&Frame::CkptResume { epoch });
            let _ = self.reg.complete_checkpoint();
        }
        log::info!("coordinator: checkpoint {epoch} committed at {}", path.display());
        if self.cfg.announce {
            println!("MANIFEST {}", path.display());
        }
        let rec = CheckpointRecord { epoch, manifest: path, drain: proof };
        self.report.checkpoints.push(rec.clone());
        Ok(rec)
    }
}

/// Counter rounds gathered from the live proxies.
struct LiveCounters<'a> {
    core: &'a mut Core,
}

impl CounterSource for LiveCounters<'_> {
    fn collect(&mut self, round: u64) -> Result<Vec<CounterReport>, DrainError> {
        if round > 1 && !self.core.cfg.drain_poll.is_zero() {
            thread::sleep(self.core.cfg.drain_poll);
        }
        self.core.broadcast(&Frame::CounterReq { round });
        let reports = self
            .core
            .collect("counter reports", |rank, f| match f {
                Frame::CounterReport { round: r, report } if r == round && report.rank == rank => Some(report),
                _ => None,
            })
            .map_err(DrainError::Collect)?;
        Ok(reports.into_values().collect())
    }
}
