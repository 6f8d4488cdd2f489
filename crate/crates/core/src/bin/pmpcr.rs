use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::{Parser, Subcommand};
use pmpcr::launcher::control::{self, CkptOutcome};
use pmpcr::launcher::{self, LaunchSpec, EXIT_ABORTED};

/// Launch, checkpoint and restart message-passing worlds.
#[derive(Parser)]
#[command(name = "pmpcr")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args, Clone)]
struct WorldOpts {
    /// Seconds between automatic checkpoints.
    #[arg(long)]
    ckpt_interval: Option<f64>,
    /// Rank 0 requests a checkpoint at the entry of its K-th API call
    /// (0-based; counted from init or restore).
    #[arg(long, value_name = "K")]
    ckpt_after_call: Option<u64>,
    /// Deterministic ports starting here instead of ephemeral ones.
    #[arg(long)]
    port_base: Option<u16>,
    /// Stop the world right after the first committed checkpoint.
    #[arg(long)]
    halt_after_ckpt: bool,
    /// Delay added to every proxy-to-proxy envelope, in milliseconds.
    #[arg(long, default_value_t = 0)]
    forward_delay_ms: u64,
    /// Per-phase checkpoint timeout, in milliseconds.
    #[arg(long)]
    phase_timeout_ms: Option<u64>,
    /// Also write each rank's stdout to DIR/rank<r>.out.
    #[arg(long)]
    output_dir: Option<PathBuf>,
    /// Prefix forwarded output lines with the rank.
    #[arg(long)]
    tag_output: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Spawn a fresh world.
    Run {
        #[arg(short = 'n', long = "np")]
        world_size: u32,
        #[arg(long, default_value = "pmpcr-images")]
        image_dir: PathBuf,
        #[command(flatten)]
        opts: WorldOpts,
        #[arg(last = true, required = true)]
        command: Vec<String>,
    },
    /// Checkpoint a running world now.
    Checkpoint {
        #[arg(long)]
        coordinator: SocketAddr,
    },
    /// Restart a world from a manifest file or an image directory.
    Restart {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        opts: WorldOpts,
        /// Application command; defaults to the one recorded at launch.
        #[arg(last = true)]
        command: Vec<String>,
    },
}

fn apply(spec: &mut LaunchSpec, o: WorldOpts) {
    spec.ckpt_interval = o.ckpt_interval.map(Duration::from_secs_f64);
    spec.ckpt_after_call = o.ckpt_after_call;
    spec.port_base = o.port_base;
    spec.halt_after_ckpt = o.halt_after_ckpt;
    spec.forward_delay = Duration::from_millis(o.forward_delay_ms);
    spec.phase_timeout = o.phase_timeout_ms.map(Duration::from_millis);
    spec.output_dir = o.output_dir;
    spec.tag_output = o.tag_output;
}

fn main() {
    env_logger::init();
    let code = match Cli::parse().cmd {
        Cmd::Run { world_size, image_dir, opts, command } => {
            let mut spec = LaunchSpec::new(world_size, command);
            spec.image_dir = image_dir;
            apply(&mut spec, opts);
            report(launcher::run(&spec))
        }
        Cmd::Restart { manifest, opts, command } => {
            let mut spec = LaunchSpec::new(0, command);
            apply(&mut spec, opts);
            report(launcher::restart(&manifest, &spec))
        }
        Cmd::Checkpoint { coordinator } => match control::checkpoint_now(coordinator) {
            Ok(CkptOutcome::Done { manifest, .. }) => {
                println!("{}", manifest.display());
                0
            }
            Ok(CkptOutcome::Aborted(reason)) => {
                eprintln!("pmpcr: checkpoint aborted: {reason}");
                EXIT_ABORTED
            }
            Err(e) => {
                eprintln!("pmpcr: {e}");
                EXIT_ABORTED
            }
        },
    };
    std::process::exit(code);
}

fn report(res: Result<i32, launcher::LaunchError>) -> i32 {
    match res {
        Ok(code) => code,
        Err(e) => {
            eprintln!("pmpcr: {e}");
            e.exit_code()
        }
    }
}
