use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::time::Duration;

use clap::Parser;
use pmpcr::coordinator::{Coordinator, CoordinatorConfig, CoordinatorError, DEFAULT_MAX_ROUNDS};

/// World coordinator: registration, finalize barrier, checkpoints.
#[derive(Parser)]
#[command(name = "pmpcr-coord")]
struct Args {
    /// Listening port; 0 picks a free one.
    #[arg(long, default_value_t = 0)]
    port: u16,
    #[arg(long)]
    world_size: u32,
    /// Seconds between automatic checkpoints.
    #[arg(long)]
    ckpt_interval: Option<f64>,
    #[arg(long, default_value = "pmpcr-images")]
    image_dir: PathBuf,
    /// Continue a restarted world after this epoch.
    #[arg(long)]
    restart_epoch: Option<u64>,
    /// Stop every rank right after the first committed checkpoint.
    #[arg(long)]
    halt_after_ckpt: bool,
    #[arg(long, default_value_t = 30_000)]
    phase_timeout_ms: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ROUNDS)]
    max_drain_rounds: u32,
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    if args.world_size == 0 {
        eprintln!("pmpcr-coord: world size must be at least 1");
        std::process::exit(2);
    }
    let mut cfg = CoordinatorConfig::new(args.world_size, args.image_dir);
    cfg.listen = SocketAddr::from(([127, 0, 0, 1], args.port));
    cfg.ckpt_interval = args.ckpt_interval.map(Duration::from_secs_f64);
    cfg.restart_epoch = args.restart_epoch;
    cfg.halt_after_ckpt = args.halt_after_ckpt;
    cfg.phase_timeout = Duration::from_millis(args.phase_timeout_ms);
    cfg.max_drain_rounds = args.max_drain_rounds;
    cfg.announce = true;
    let coord = match Coordinator::bind(cfg) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("pmpcr-coord: {e}");
            std::process::exit(1);
        }
    };
    println!("LISTEN {}", coord.local_addr());
    let _ = std::io::stdout().flush();
    match coord.run() {
        Ok(_) => {}
        Err(e @ CoordinatorError::RankLost(_)) | Err(e @ CoordinatorError::Io(_)) => {
            eprintln!("pmpcr-coord: {e}");
            std::process::exit(1);
        }
    }
}
