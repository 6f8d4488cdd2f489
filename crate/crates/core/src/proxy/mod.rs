//! Per-rank proxy: the process that owns the active transport.
//!
//! The proxy terminates the plugin link, holds one connection to every
//! other proxy and one to the coordinator. All transitions of
//! [`ProxyState`] happen under a single mutex; the threads that own the
//! sockets only decode frames and feed them in.

mod state;

use std::io;
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Sender};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::{Duration, Instant};

pub use state::{Action, CkptStage, Pending, Phase, ProxyState};

use crate::proto::{
    read_frame_on, write_frame, Frame, FrameIoError, LinkKind, MessageEnvelope, RankId, PROTOCOL_VERSION,
};

/// Exit status of a proxy process when registration is refused.
pub const EXIT_REJECTED: i32 = 10;

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub rank: RankId,
    pub coordinator: SocketAddr,
    pub listen: SocketAddr,
    pub plugin_listen: SocketAddr,
    /// Artificial latency added to every proxy-to-proxy envelope; widens
    /// the in-flight window for tests.
    pub forward_delay: Duration,
    pub connect_timeout: Duration,
}

impl ProxyConfig {
    pub fn new(rank: RankId, coordinator: SocketAddr) -> Self {
        let any: SocketAddr = "127.0.0.1:0".parse().expect("literal address");
        ProxyConfig {
            rank,
            coordinator,
            listen: any,
            plugin_listen: any,
            forward_delay: Duration::ZERO,
            connect_timeout: Duration::from_secs(10),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProxyExit {
    Finalized,
    Halted,
    PluginLost,
    CoordinatorLost,
}

impl ProxyExit {
    pub fn code(self) -> i32 {
        match self {
            ProxyExit::Finalized | ProxyExit::Halted => 0,
            ProxyExit::PluginLost | ProxyExit::CoordinatorLost => 1,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ProxyError {
    #[error("registration rejected: {0}")]
    Rejected(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Frame(#[from] FrameIoError),
    #[error("protocol: {0}")]
    Protocol(String),
}

impl ProxyError {
    pub fn exit_code(&self) -> i32 {
        match self {
            ProxyError::Rejected(_) => EXIT_REJECTED,
            _ => 1,
        }
    }
}

/// A proxy with its listening sockets bound, not yet registered.
pub struct Proxy {
    config: ProxyConfig,
    peer_listener: TcpListener,
    plugin_listener: TcpListener,
}

struct Shared {
    state: ProxyState,
    plugin: TcpStream,
    coordinator: TcpStream,
    peers: Vec<Option<Sender<MessageEnvelope>>>,
}

impl Shared {
    fn apply(&mut self, actions: Vec<Action>) {
        for action in actions {
            let res = match action {
                Action::ToPlugin(f) => write_frame(&mut self.plugin, &f),
                Action::ToCoordinator(f) => write_frame(&mut self.coordinator, &f),
                Action::ToPeer(rank, env) => {
                    if let Some(Some(tx)) = self.peers.get(rank.index()) {
                        let _ = tx.send(env);
                    }
                    Ok(())
                }
            };
            if let Err(e) = res {
                log::debug!("proxy {}: write failed: {e}", self.state.rank());
            }
        }
    }
}

enum Event {
    PluginClosed,
    CoordinatorClosed,
}

pub(crate) fn connect_with_retry(addr: SocketAddr, timeout: Duration) -> io::Result<TcpStream> {
    let deadline = Instant::now() + timeout;
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                return Ok(s);
            }
            Err(e) if Instant::now() < deadline => {
                log::trace!("connect {addr}: {e}; retrying");
                thread::sleep(Duration::from_millis(20));
            }
            Err(e) => return Err(e),
        }
    }
}

impl Proxy {
    pub fn bind(config: ProxyConfig) -> io::Result<Proxy> {
        let peer_listener = TcpListener::bind(config.listen)?;
        let plugin_listener = TcpListener::bind(config.plugin_listen)?;
        Ok(Proxy { config, peer_listener, plugin_listener })
    }

    pub fn plugin_addr(&self) -> SocketAddr {
        self.plugin_listener.local_addr().expect("bound listener")
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer_listener.local_addr().expect("bound listener")
    }

    /// Registers, builds the peer mesh, then serves until the world is
    /// finalized, halted, or a link is lost.
    pub fn run(self) -> Result<ProxyExit, ProxyError> {
        let rank = self.config.rank;
        let mut coord = connect_with_retry(self.config.coordinator, self.config.connect_timeout)?;
        write_frame(
            &mut coord,
            &Frame::Register { version: PROTOCOL_VERSION, rank, endpoint: self.peer_addr().to_string() },
        )?;
        let endpoints = match read_frame_on(&mut coord, LinkKind::CoordinatorToProxy)? {
            Some(Frame::World { endpoints }) => endpoints,
            Some(Frame::Reject { reason }) => return Err(ProxyError::Rejected(reason)),
            Some(other) => return Err(ProxyError::Protocol(format!("expected WORLD, got {:?}", other.opcode()))),
            None => return Err(ProxyError::Protocol("coordinator closed during registration".into())),
        };
        let world_size = endpoints.len() as u32;
        log::info!("proxy {rank}: world of {world_size} formed");

        let peer_streams = self.build_mesh(&endpoints)?;

        let (plugin, _) = self.plugin_listener.accept()?;
        plugin.set_nodelay(true)?;

        let (event_tx, event_rx) = mpsc::channel();
        let mut peer_senders = Vec::with_capacity(world_size as usize);
        let mut all_sockets = vec![plugin.try_clone()?, coord.try_clone()?];
        for stream in &peer_streams {
            peer_senders.push(match stream {
                Some(s) => {
                    all_sockets.push(s.try_clone()?);
                    Some(spawn_peer_writer(rank, s.try_clone()?, self.config.forward_delay))
                }
                None => None,
            });
        }
        let shared = Arc::new(Mutex::new(Shared {
            state: ProxyState::new(rank, world_size),
            plugin: plugin.try_clone()?,
            coordinator: coord.try_clone()?,
            peers: peer_senders,
        }));

        for stream in peer_streams.into_iter().flatten() {
            let shared = Arc::clone(&shared);
            thread::spawn(move || peer_reader(rank, stream, shared));
        }
        {
            let shared = Arc::clone(&shared);
            let tx = event_tx.clone();
            thread::spawn(move || coordinator_reader(rank, coord, shared, tx));
        }
        {
            let shared = Arc::clone(&shared);
            thread::spawn(move || plugin_reader(rank, plugin, shared, event_tx));
        }

        let exit = loop {
            let phase = |s: &Arc<Mutex<Shared>>| s.lock().expect("proxy lock").state.phase();
            match event_rx.recv() {
                Ok(Event::PluginClosed) => match phase(&shared) {
                    Phase::Released => break ProxyExit::Finalized,
                    Phase::Halted => break ProxyExit::Halted,
                    _ => {
                        let mut s = shared.lock().expect("proxy lock");
                        let _ = write_frame(&mut s.coordinator, &Frame::PluginLost { rank });
                        break ProxyExit::PluginLost;
                    }
                },
                Ok(Event::CoordinatorClosed) => match phase(&shared) {
                    Phase::Released | Phase::Halted => continue,
                    _ => break ProxyExit::CoordinatorLost,
                },
                Err(_) => break ProxyExit::CoordinatorLost,
            }
        };
        shared.lock().expect("proxy lock").peers.clear();
        for s in all_sockets {
            let _ = s.shutdown(Shutdown::Both);
        }
        log::info!("proxy {rank}: exiting ({exit:?})");
        Ok(exit)
    }

    /// Higher ranks connect to lower ranks; one link per pair.
    fn build_mesh(&self, endpoints: &[String]) -> Result<Vec<Option<TcpStream>>, ProxyError> {
        let rank = self.config.rank;
        let mut links: Vec<Option<TcpStream>> = (0..endpoints.len()).map(|_| None).collect();
        for (r, ep) in endpoints.iter().enumerate().take(rank.index()) {
            let addr: SocketAddr = ep.parse().map_err(|_| ProxyError::Protocol(format!("bad peer endpoint {ep:?}")))?;
            let mut s = connect_with_retry(addr, self.config.connect_timeout)?;
            write_frame(&mut s, &Frame::PeerHello { version: PROTOCOL_VERSION, rank })?;
            links[r] = Some(s);
        }
        let higher = endpoints.len().saturating_sub(rank.index() + 1);
        for _ in 0..higher {
            let (mut s, _) = self.peer_listener.accept()?;
            s.set_nodelay(true)?;
            match read_frame_on(&mut s, LinkKind::Peer)? {
                Some(Frame::PeerHello { rank: peer, .. })
                    if peer > rank && peer.index() < links.len() && links[peer.index()].is_none() =>
                {
                    links[peer.index()] = Some(s);
                }
                other => return Err(ProxyError::Protocol(format!("bad peer hello: {other:?}"))),
            }
        }
        Ok(links)
    }
}

fn spawn_peer_writer(rank: RankId, mut stream: TcpStream, delay: Duration) -> Sender<MessageEnvelope> {
    let (tx, rx) = mpsc::channel::<MessageEnvelope>();
    thread::spawn(move || {
        for env in rx {
            if !delay.is_zero() {
                thread::sleep(delay);
            }
            if let Err(e) = write_frame(&mut stream, &Frame::Envelope(env)) {
                log::warn!("proxy {rank}: peer write failed: {e}");
                break;
            }
        }
    });
    tx
}

fn peer_reader(rank: RankId, mut stream: TcpStream, shared: Arc<Mutex<Shared>>) {
    loop {
        match read_frame_on(&mut stream, LinkKind::Peer) {
            Ok(Some(Frame::Envelope(env))) if env.dest == rank => {
                let mut s = shared.lock().expect("proxy lock");
                let actions = s.state.on_envelope(env);
                s.apply(actions);
            }
            Ok(Some(other)) => log::warn!("proxy {rank}: unexpected peer frame {other:?}"),
            Ok(None) => return,
            Err(e) => {
                log::debug!("proxy {rank}: peer link closed: {e}");
                return;
            }
        }
    }
}

fn coordinator_reader(rank: RankId, mut stream: TcpStream, shared: Arc<Mutex<Shared>>, events: Sender<Event>) {
    loop {
        match read_frame_on(&mut stream, LinkKind::CoordinatorToProxy) {
            Ok(Some(frame)) => {
                let mut s = shared.lock().expect("proxy lock");
                let actions = s.state.on_coordinator(frame);
                s.apply(actions);
            }
            Ok(None) => break,
            Err(e) => {
                log::debug!("proxy {rank}: coordinator link error: {e}");
                break;
            }
        }
    }
    let _ = events.send(Event::CoordinatorClosed);
}

fn plugin_reader(rank: RankId, mut stream: TcpStream, shared: Arc<Mutex<Shared>>, events: Sender<Event>) {
    loop {
        match read_frame_on(&mut stream, LinkKind::PluginToProxy) {
            Ok(Some(frame)) => {
                let mut s = shared.lock().expect("proxy lock");
                let actions = s.state.on_plugin(frame);
                s.apply(actions);
            }
            Ok(None) => break,
            Err(e) => {
                log::debug!("proxy {rank}: plugin link error: {e}");
                break;
            }
        }
    }
    let _ = events.send(Event::PluginClosed);
}
