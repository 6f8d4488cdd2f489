use std::io::Write;
use std::net::SocketAddr;
use std::time::Duration;

use clap::Parser;
use pmpcr::proto::RankId;
use pmpcr::proxy::{Proxy, ProxyConfig};

/// Per-rank proxy holding the transport.
#[derive(Parser)]
#[command(name = "pmpcr-proxy")]
struct Args {
    #[arg(long)]
    rank: u32,
    #[arg(long)]
    coordinator: SocketAddr,
    /// Peer listening address.
    #[arg(long, default_value = "127.0.0.1:0")]
    listen: SocketAddr,
    #[arg(long, default_value = "127.0.0.1:0")]
    plugin_listen: SocketAddr,
    /// Delay added to every envelope sent to a peer.
    #[arg(long, default_value_t = 0)]
    forward_delay_ms: u64,
}

fn main() {
    env_logger::init();
    let args = Args::parse();
    let mut cfg = ProxyConfig::new(RankId(args.rank), args.coordinator);
    cfg.listen = args.listen;
    cfg.plugin_listen = args.plugin_listen;
    cfg.forward_delay = Duration::from_millis(args.forward_delay_ms);
    let proxy = match Proxy::bind(cfg) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("pmpcr-proxy {}: {e}", args.rank);
            std::process::exit(1);
        }
    };
    println!("PLUGIN {}", proxy.plugin_addr());
    let _ = std::io::stdout().flush();
    let code = match proxy.run() {
        Ok(exit) => exit.code(),
        Err(e) => {
            eprintln!("pmpcr-proxy {}: {e}", args.rank);
            e.exit_code()
        }
    };
    std::process::exit(code);
}
