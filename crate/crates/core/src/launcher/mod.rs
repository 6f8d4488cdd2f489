//! Multi-process launcher: spawns the coordinator, one proxy and one
//! application per rank, supervises them, and restarts worlds from a
//! manifest.

pub mod control;
pub mod local;

use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::mpsc::{self, Receiver};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::ckpt::{assemble_restart, Manifest, RestartPlan};
use crate::plugin::LaunchEnv;
use crate::proto::RankId;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_SPAWN: i32 = 3;
pub const EXIT_ABORTED: i32 = 4;
pub const EXIT_RESTART: i32 = 5;

/// Name of the file recording the application command inside an image
/// directory, so a restart needs only the manifest.
pub const LAUNCH_RECORD: &str = "launch.json";

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);

#[derive(Debug, Clone)]
pub struct LaunchSpec {
    pub world_size: u32,
    pub command: Vec<String>,
    pub image_dir: PathBuf,
    pub ckpt_interval: Option<Duration>,
    /// Coordinator on `base`, proxy `r` on `base+1+2r` (peers) and
    /// `base+2+2r` (plugin). Ephemeral ports when unset.
    pub port_base: Option<u16>,
    pub ckpt_after_call: Option<u64>,
    pub halt_after_ckpt: bool,
    pub forward_delay: Duration,
    pub phase_timeout: Option<Duration>,
    /// Per-rank copies of application stdout, `rank<r>.out`.
    pub output_dir: Option<PathBuf>,
    /// Prefix forwarded output lines with `[r] `.
    pub tag_output: bool,
    /// Where `pmpcr-coord`, `pmpcr-proxy` and example programs live.
    pub bin_dir: Option<PathBuf>,
}

impl LaunchSpec {
    pub fn new(world_size: u32, command: Vec<String>) -> Self {
        LaunchSpec {
            world_size,
            command,
            image_dir: PathBuf::from("pmpcr-images"),
            ckpt_interval: None,
            port_base: None,
            ckpt_after_call: None,
            halt_after_ckpt: false,
            forward_delay: Duration::ZERO,
            phase_timeout: None,
            output_dir: None,
            tag_output: false,
            bin_dir: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LaunchError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("spawn failed: {0}")]
    Spawn(String),
    #[error("restart failed: {0}")]
    Restart(String),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

impl LaunchError {
    pub fn exit_code(&self) -> i32 {
        match self {
            LaunchError::Usage(_) => EXIT_USAGE,
            LaunchError::Spawn(_) | LaunchError::Io(_) => EXIT_SPAWN,
            LaunchError::Restart(_) => EXIT_RESTART,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LaunchRecord {
    pub world_size: u32,
    pub command: Vec<String>,
}

impl LaunchRecord {
    pub fn read(dir: &Path) -> io::Result<Self> {
        let text = fs::read_to_string(dir.join(LAUNCH_RECORD))?;
        serde_json::from_str(&text).map_err(io::Error::other)
    }

    pub fn write(&self, dir: &Path) -> io::Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(io::Error::other)?;
        fs::write(dir.join(LAUNCH_RECORD), text)
    }
}

fn bin_dir(spec: &LaunchSpec) -> PathBuf {
    if let Some(d) = &spec.bin_dir {
        return d.clone();
    }
    if let Some(d) = std::env::var_os("PMPCR_BIN_DIR") {
        return PathBuf::from(d);
    }
    std::env::current_exe().ok().and_then(|p| p.parent().map(Path::to_path_buf)).unwrap_or_else(|| PathBuf::from("."))
}

/// Bare program names are looked up next to the launcher first, then on
/// `PATH`.
fn resolve_program(dir: &Path, program: &str) -> String {
    if program.contains('/') {
        return fs::canonicalize(program).map_or_else(|_| program.to_string(), |p| p.display().to_string());
    }
    let sibling = dir.join(program);
    if sibling.is_file() {
        return sibling.display().to_string();
    }
    program.to_string()
}

struct Supervised {
    name: String,
    child: Child,
    /// Applications are checked first so their exit status wins over the
    /// proxy reactions it causes.
    is_app: bool,
}

/// Owns every spawned process; whatever happens, nothing outlives it.
struct Supervisor {
    children: Vec<Supervised>,
    pumps: Vec<JoinHandle<()>>,
}

impl Supervisor {
    fn new() -> Self {
        Supervisor { children: Vec::new(), pumps: Vec::new() }
    }

    fn spawn(&mut self, name: String, mut cmd: Command, is_app: bool) -> Result<&mut Child, LaunchError> {
        let child = cmd.spawn().map_err(|e| LaunchError::Spawn(format!("{name}: {e}")))?;
        log::debug!("spawned {name} (pid {})", child.id());
        self.children.push(Supervised { name, child, is_app });
        Ok(&mut self.children.last_mut().expect("just pushed").child)
    }

    fn teardown(&mut self) {
        for c in &mut self.children {
            if matches!(c.child.try_wait(), Ok(None)) {
                let _ = c.child.kill();
            }
        }
        for c in &mut self.children {
            let _ = c.child.wait();
        }
    }

    /// Waits for every child; the first nonzero exit tears the rest down.
    fn wait_all(&mut self) -> i32 {
        let mut order: Vec<usize> = (0..self.children.len()).collect();
        order.sort_by_key(|&i| !self.children[i].is_app);
        let mut done = vec![false; self.children.len()];
        loop {
            for &i in &order {
                if done[i] {
                    continue;
                }
                let c = &mut self.children[i];
                match c.child.try_wait() {
                    Ok(Some(status)) => {
                        done[i] = true;
                        if !status.success() {
                            let code = status.code().unwrap_or(1);
                            log::error!("{} exited with {status}", c.name);
                            self.teardown();
                            return if code == 0 { 1 } else { code };
                        }
                    }
                    Ok(None) => {}
                    Err(e) => {
                        log::error!("waiting for {}: {e}", c.name);
                        done[i] = true;
                    }
                }
            }
            if done.iter().all(|d| *d) {
                return EXIT_OK;
            }
            thread::sleep(Duration::from_millis(10));
        }
    }

    fn finish(mut self) {
        self.teardown();
        for p in self.pumps.drain(..) {
            let _ = p.join();
        }
    }
}

impl Drop for Supervisor {
    fn drop(&mut self) {
        self.teardown();
    }
}

/// Forwards lines from `src` to a channel until EOF.
fn line_channel(src: impl Read + Send + 'static) -> (Receiver<String>, JoinHandle<()>) {
    let (tx, rx) = mpsc::channel();
    let h = thread::spawn(move || {
        for line in BufReader::new(src).lines() {
            let Ok(line) = line else { return };
            if tx.send(line).is_err() {
                return;
            }
        }
    });
    (rx, h)
}

fn await_line(rx: &Receiver<String>, prefix: &str, who: &str) -> Result<String, LaunchError> {
    let deadline = Instant::now() + HANDSHAKE_TIMEOUT;
    loop {
        let left = deadline.saturating_duration_since(Instant::now());
        match rx.recv_timeout(left) {
            Ok(line) => {
                if let Some(rest) = line.strip_prefix(prefix) {
                    return Ok(rest.trim().to_string());
                }
            }
            Err(_) => return Err(LaunchError::Spawn(format!("{who} did not report its {prefix}address"))),
        }
    }
}

fn parse_addr(s: &str, who: &str) -> Result<SocketAddr, LaunchError> {
    s.parse().map_err(|_| LaunchError::Spawn(format!("{who} reported bad address {s:?}")))
}

fn copy_output(
    rank: RankId,
    src: impl Read + Send + 'static,
    tag: bool,
    file: Option<PathBuf>,
) -> io::Result<JoinHandle<()>> {
    let mut file = match file {
        Some(p) => Some(fs::File::create(p)?),
        None => None,
    };
    Ok(thread::spawn(move || {
        let mut reader = BufReader::new(src);
        let mut line = Vec::new();
        loop {
            line.clear();
            match reader.read_until(b'\n', &mut line) {
                Ok(0) | Err(_) => return,
                Ok(_) => {}
            }
            if let Some(f) = file.as_mut() {
                let _ = f.write_all(&line);
            }
            let mut out = io::stdout().lock();
            if tag {
                let _ = write!(out, "[{rank}] ");
            }
            let _ = out.write_all(&line);
            let _ = out.flush();
        }
    }))
}

fn launch(spec: &LaunchSpec, command: &[String], plan: Option<&RestartPlan>) -> Result<i32, LaunchError> {
    let bins = bin_dir(spec);
    let ws = plan.map_or(spec.world_size, |p| p.world_size);
    let mut sup = Supervisor::new();
    if let Some(d) = &spec.output_dir {
        fs::create_dir_all(d)?;
    }

    let mut coord = Command::new(bins.join("pmpcr-coord"));
    coord
        .arg("--port")
        .arg(spec.port_base.unwrap_or(0).to_string())
        .arg("--world-size")
        .arg(ws.to_string())
        .arg("--image-dir")
        .arg(&spec.image_dir)
        .stdout(Stdio::piped());
    if let Some(i) = spec.ckpt_interval {
        coord.arg("--ckpt-interval").arg(i.as_secs_f64().to_string());
    }
    if spec.halt_after_ckpt {
        coord.arg("--halt-after-ckpt");
    }
    if let Some(t) = spec.phase_timeout {
        coord.arg("--phase-timeout-ms").arg(t.as_millis().to_string());
    }
    if let Some(p) = plan {
        coord.arg("--restart-epoch").arg(p.epoch.to_string());
    }
    let child = sup.spawn("coordinator".into(), coord, false)?;
    let (coord_lines, pump) = line_channel(child.stdout.take().expect("piped stdout"));
    sup.pumps.push(pump);
    let coord_addr = parse_addr(&await_line(&coord_lines, "LISTEN ", "coordinator")?, "coordinator")?;
    eprintln!("pmpcr: coordinator listening on {coord_addr}");
    sup.pumps.push(thread::spawn(move || {
        for line in coord_lines {
            if let Some(path) = line.strip_prefix("MANIFEST ") {
                eprintln!("pmpcr: checkpoint committed: {path}");
            }
        }
    }));

    let mut plugin_addrs = Vec::with_capacity(ws as usize);
    for r in 0..ws {
        let (listen, plugin) = match spec.port_base {
            Some(b) => {
                let peer = u32::from(b) + 1 + 2 * r;
                (peer, peer + 1)
            }
            None => (0, 0),
        };
        if listen > u32::from(u16::MAX) {
            return Err(LaunchError::Usage("port base too high for this world size".into()));
        }
        let mut proxy = Command::new(bins.join("pmpcr-proxy"));
        proxy
            .arg("--rank")
            .arg(r.to_string())
            .arg("--coordinator")
            .arg(coord_addr.to_string())
            .arg("--listen")
            .arg(format!("127.0.0.1:{listen}"))
            .arg("--plugin-listen")
            .arg(format!("127.0.0.1:{plugin}"))
            .stdout(Stdio::piped());
        if !spec.forward_delay.is_zero() {
            proxy.arg("--forward-delay-ms").arg(spec.forward_delay.as_millis().to_string());
        }
        let who = format!("proxy {r}");
        let child = sup.spawn(who.clone(), proxy, false)?;
        let (lines, pump) = line_channel(child.stdout.take().expect("piped stdout"));
        sup.pumps.push(pump);
        plugin_addrs.push(parse_addr(&await_line(&lines, "PLUGIN ", &who)?, &who)?);
    }

    for (r, endpoint) in plugin_addrs.into_iter().enumerate() {
        let rank = RankId(r as u32);
        let env = match plan {
            Some(p) => {
                p.app_env(rank, endpoint).ok_or_else(|| LaunchError::Restart(format!("no image for rank {rank}")))?
            }
            None => LaunchEnv::fresh(endpoint),
        };
        let env = env.with_ckpt_after_call(spec.ckpt_after_call);
        let mut app = Command::new(&command[0]);
        app.args(&command[1..]).envs(env.to_vars()).stdout(Stdio::piped());
        let child = sup.spawn(format!("rank {r}"), app, true)?;
        let out = child.stdout.take().expect("piped stdout");
        let file = spec.output_dir.as_ref().map(|d| d.join(format!("rank{r}.out")));
        let pump = copy_output(rank, out, spec.tag_output, file)?;
        sup.pumps.push(pump);
    }

    let code = sup.wait_all();
    sup.finish();
    Ok(code)
}

/// Spawns and supervises a fresh world; returns the exit status to report.
pub fn run(spec: &LaunchSpec) -> Result<i32, LaunchError> {
    if spec.world_size == 0 {
        return Err(LaunchError::Usage("world size must be at least 1".into()));
    }
    if spec.command.is_empty() {
        return Err(LaunchError::Usage("missing application command".into()));
    }
    fs::create_dir_all(&spec.image_dir)?;
    let mut command = spec.command.clone();
    command[0] = resolve_program(&bin_dir(spec), &command[0]);
    LaunchRecord { world_size: spec.world_size, command: command.clone() }.write(&spec.image_dir)?;
    launch(spec, &command, None)
}

/// Restarts the world recorded by `manifest` (a manifest file or an image
/// directory). The application command defaults to the recorded one.
pub fn restart(manifest: &Path, spec: &LaunchSpec) -> Result<i32, LaunchError> {
    let (path, m) = Manifest::resolve(manifest).map_err(|e| LaunchError::Restart(e.to_string()))?;
    let plan = assemble_restart(&m).map_err(|e| LaunchError::Restart(e.to_string()))?;
    let dir = path.parent().map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("."));
    let command = if spec.command.is_empty() {
        LaunchRecord::read(&dir)
            .map_err(|e| LaunchError::Restart(format!("no application command given and {LAUNCH_RECORD}: {e}")))?
            .command
    } else {
        let mut c = spec.command.clone();
        c[0] = resolve_program(&bin_dir(spec), &c[0]);
        c
    };
    let spec = LaunchSpec { image_dir: dir, ..spec.clone() };
    eprintln!("pmpcr: restarting epoch {} from {}", plan.epoch, path.display());
    launch(&spec, &command, Some(&plan))
}
