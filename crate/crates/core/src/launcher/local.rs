//! In-process world: coordinator, proxies and ranks as threads of one
//! process, wired over loopback exactly like the multi-process launch.

use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use super::control::{self, CkptOutcome, ControlError};
use crate::ckpt::{assemble_restart, Manifest, RestartPlan};
use crate::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, CoordinatorReport};
use crate::plugin::LaunchEnv;
use crate::proto::RankId;
use crate::proxy::{Proxy, ProxyConfig, ProxyError, ProxyExit};

#[derive(Debug, Clone)]
pub struct LocalConfig {
    pub world_size: u32,
    pub image_dir: PathBuf,
    pub forward_delay: Duration,
    pub phase_timeout: Duration,
    pub ckpt_interval: Option<Duration>,
    pub ckpt_after_call: Option<u64>,
    pub halt_after_ckpt: bool,
}

impl LocalConfig {
    pub fn new(world_size: u32, image_dir: impl Into<PathBuf>) -> Self {
        LocalConfig {
            world_size,
            image_dir: image_dir.into(),
            forward_delay: Duration::ZERO,
            phase_timeout: Duration::from_secs(10),
            ckpt_interval: None,
            ckpt_after_call: None,
            halt_after_ckpt: false,
        }
    }
}

pub struct LocalWorld {
    coord_addr: SocketAddr,
    coordinator: JoinHandle<Result<CoordinatorReport, CoordinatorError>>,
    proxies: Vec<JoinHandle<Result<ProxyExit, ProxyError>>>,
    envs: Vec<LaunchEnv>,
}

/// Result of every thread of a finished world.
pub struct LocalOutcome<T> {
    pub ranks: Vec<T>,
    pub proxies: Vec<Result<ProxyExit, ProxyError>>,
    pub coordinator: Result<CoordinatorReport, CoordinatorError>,
}

impl LocalWorld {
    /// Starts a fresh world; ranks are launched by [`LocalWorld::run`].
    pub fn start(cfg: &LocalConfig) -> io::Result<LocalWorld> {
        Self::start_inner(cfg, None)
    }

    /// Rebuilds the world recorded by `manifest`: fresh coordinator and
    /// proxies, ranks restored from their images.
    pub fn restart(cfg: &LocalConfig, manifest: &Path) -> io::Result<LocalWorld> {
        let (_, m) = Manifest::resolve(manifest).map_err(io::Error::other)?;
        let plan = assemble_restart(&m).map_err(io::Error::other)?;
        let cfg = LocalConfig { world_size: plan.world_size, ..cfg.clone() };
        Self::start_inner(&cfg, Some(plan))
    }

    fn start_inner(cfg: &LocalConfig, plan: Option<RestartPlan>) -> io::Result<LocalWorld> {
        let mut ccfg = CoordinatorConfig::new(cfg.world_size, &cfg.image_dir);
        ccfg.phase_timeout = cfg.phase_timeout;
        ccfg.ckpt_interval = cfg.ckpt_interval;
        ccfg.halt_after_ckpt = cfg.halt_after_ckpt;
        ccfg.restart_epoch = plan.as_ref().map(|p| p.epoch);
        let coord = Coordinator::bind(ccfg)?;
        let coord_addr = coord.local_addr();
        let coordinator = thread::spawn(move || coord.run());

        let mut proxies = Vec::new();
        let mut envs = Vec::new();
        for r in 0..cfg.world_size {
            let rank = RankId(r);
            let mut pcfg = ProxyConfig::new(rank, coord_addr);
            pcfg.forward_delay = cfg.forward_delay;
            let proxy = Proxy::bind(pcfg)?;
            let endpoint = proxy.plugin_addr();
            proxies.push(thread::spawn(move || proxy.run()));
            let env = match &plan {
                Some(p) => p.app_env(rank, endpoint).expect("plan covers every rank"),
                None => LaunchEnv::fresh(endpoint),
            };
            let env = env.with_ckpt_after_call(cfg.ckpt_after_call);
            envs.push(env);
        }
        Ok(LocalWorld { coord_addr, coordinator, proxies, envs })
    }

    pub fn coordinator_addr(&self) -> SocketAddr {
        self.coord_addr
    }

    pub fn env(&self, rank: RankId) -> &LaunchEnv {
        &self.envs[rank.index()]
    }

    pub fn checkpoint_now(&self) -> Result<CkptOutcome, ControlError> {
        control::checkpoint_now(self.coord_addr)
    }

    /// Runs one thread per rank and waits for the whole world.
    pub fn run<T, F>(self, app: F) -> LocalOutcome<T>
    where
        T: Send + 'static,
        F: Fn(RankId, LaunchEnv) -> T + Send + Sync + Clone + 'static,
    {
        let handles: Vec<_> = self
            .envs
            .iter()
            .cloned()
            .enumerate()
            .map(|(r, env)| {
                let app = app.clone();
                thread::spawn(move || app(RankId(r as u32), env))
            })
            .collect();
        let ranks = handles.into_iter().map(|h| h.join().expect("rank thread panicked")).collect();
        self.join(ranks)
    }

    /// Waits for proxies and coordinator once the ranks are done.
    pub fn join<T>(self, ranks: Vec<T>) -> LocalOutcome<T> {
        let proxies = self.proxies.into_iter().map(|h| h.join().expect("proxy thread panicked")).collect();
        let coordinator = self.coordinator.join().expect("coordinator thread panicked");
        LocalOutcome { ranks, proxies, coordinator }
    }
}
