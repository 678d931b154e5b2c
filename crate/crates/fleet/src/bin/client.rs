//! Client node with a synthetic telemetry source.

use std::path::PathBuf;

use clap::Parser;
use fleet::client::ClientNode;
use fleet::config::{ClientConfig, SignalKind, ENV_MODULE_ROOT};

#[derive(Parser)]
#[command(about = "Run a client node")]
struct Args {
    #[arg(long, env = "FLEET_CLIENT_ID")]
    id: String,
    /// host:port of the cloud's fleet listener
    #[arg(long, env = "FLEET_CLOUD_ADDR", default_value = "127.0.0.1:9100")]
    cloud: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Telemetry values per second.
    #[arg(long, default_value_t = 100.0)]
    rate: f64,
    #[arg(long, env = ENV_MODULE_ROOT)]
    module_root: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SignalKind::Walk)]
    signal: SignalKind,
    #[arg(long, default_value_t = 2000)]
    heartbeat_ms: u64,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    fleet::init_logging();
    let args = Args::parse();
    let mut config = ClientConfig::new(&args.id, &args.cloud, args.seed);
    config.rate = args.rate;
    config.signal = args.signal;
    config.heartbeat_ms = args.heartbeat_ms;
    if let Some(root) = args.module_root {
        config.module_root = root;
    }
    let node = ClientNode::spawn(config)?;
    tokio::select! {
        _ = node.wait() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    Ok(())
}
