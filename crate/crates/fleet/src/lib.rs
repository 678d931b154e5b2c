//! Cloud and client nodes, the analyst front-end, and the benchmark harness.

pub mod api;
pub mod client;
pub mod cloud;
pub mod config;
pub mod frontend;
pub mod harness;
pub mod net;

/// Installs a stderr log subscriber honouring `RUST_LOG` (default `info`).
pub fn init_logging() {
    let filter = tracing_subscriber::EnvFilter::try_from_default_env()
        .unwrap_or_else(|_| tracing_subscriber::EnvFilter::new("info"));
    let _ = tracing_subscriber::fmt()
        .with_env_filter(filter)
        .with_writer(std::io::stderr)
        .try_init();
}
