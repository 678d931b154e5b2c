//! Cloud node: fleet listener plus HTTP gateway.

use std::path::PathBuf;

use clap::Parser;
use fleet::cloud::CloudNode;
use fleet::config::CloudConfig;

#[derive(Parser)]
#[command(about = "Run the cloud node")]
struct Args {
    /// JSON config file; falls back to FLEET_CONFIG, then defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[tokio::main]
async fn main() -> anyhow::Result<()> {
    fleet::init_logging();
    let args = Args::parse();
    let config = CloudConfig::load(args.config.as_deref())?;
    let node = CloudNode::start(config).await?;
    let h = node.handle();
    // machine-readable readiness line for supervisors
    println!(
        "ready client_addr={} gateway_addr={}",
        h.client_addr(),
        h.gateway_addr()
    );
    tokio::select! {
        _ = node.wait() => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    Ok(())
}
