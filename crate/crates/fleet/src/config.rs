//! Node configuration. Files are JSON; every key is optional.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub const ENV_CONFIG: &str = "FLEET_CONFIG";
pub const ENV_MODULE_ROOT: &str = "FLEET_MODULE_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CloudConfig {
    pub bind_host: String,
    /// Fleet-side TCP port; 0 picks a free port.
    pub client_port: u16,
    /// Gateway HTTP port; 0 picks a free port.
    pub gateway_port: u16,
    pub module_root: PathBuf,
    pub ack_timeout_ms: u64,
    pub iteration_timeout_ms: u64,
    /// A client silent for three of these is marked disconnected.
    pub heartbeat_ms: u64,
    /// Enables delay injection on the CODE_PUSH send path.
    pub fault_injection: bool,
    /// Initial per-client CODE_PUSH delays; only honoured with `fault_injection`.
    pub code_push_delays: BTreeMap<String, u64>,
    /// Directory served under `/ui`, when set.
    pub ui_dir: Option<PathBuf>,
}

impl Default for CloudConfig {
    fn default() -> Self {
        Self {
            bind_host: "127.0.0.1".into(),
            client_port: 9100,
            gateway_port: 9200,
            module_root: PathBuf::from("fleet-modules/cloud"),
            ack_timeout_ms: 5000,
            iteration_timeout_ms: 10_000,
            heartbeat_ms: 2000,
            fault_injection: false,
            code_push_delays: BTreeMap::new(),
            ui_dir: None,
        }
    }
}

impl CloudConfig {
    pub fn from_file(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| anyhow::anyhow!("cannot read config {}: {e}", path.display()))?;
        serde_json::from_str(&text)
            .map_err(|e| anyhow::anyhow!("invalid config {}: {e}", path.display()))
    }

    /// Loads the file named by `path` (or `FLEET_CONFIG`), then applies
    /// `FLEET_MODULE_ROOT`.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let env_path = std::env::var_os(ENV_CONFIG).map(PathBuf::from);
        let mut config = match path.map(Path::to_path_buf).or(env_path) {
            Some(p) => Self::from_file(&p)?,
            None => Self::default(),
        };
        if let Some(root) = std::env::var_os(ENV_MODULE_ROOT) {
            config.module_root = root.into();
        }
        Ok(config)
    }

    pub fn client_addr(&self) -> anyhow::Result<SocketAddr> {
        Ok(format!("{}:{}", self.bind_host, self.client_port).parse()?)
    }

    pub fn gateway_addr(&self) -> anyhow::Result<SocketAddr> {
        Ok(format!("{}:{}", self.bind_host, self.gateway_port).parse()?)
    }
}

/// Which synthetic signal a client's telemetry source produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    /// Seeded random walk.
    #[default]
    Walk,
    /// 1, 2, 3, ... regardless of seed.
    Ramp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub client_id: String,
    /// `host:port` of the cloud's fleet listener.
    pub cloud_addr: String,
    pub seed: u64,
    /// Telemetry values per second.
    pub rate: f64,
    pub signal: SignalKind,
    pub module_root: PathBuf,
    pub heartbeat_ms: u64,
    pub backoff_initial_ms: u64,
    pub backoff_max_ms: u64,
}

impl ClientConfig {
    pub fn new(client_id: impl Into<String>, cloud_addr: impl Into<String>, seed: u64) -> Self {
        let client_id = client_id.into();
        Self {
            module_root: PathBuf::from("fleet-modules").join(&client_id),
            client_id,
            cloud_addr: cloud_addr.into(),
            seed,
            rate: 100.0,
            signal: SignalKind::Walk,
            heartbeat_ms: 2000,
            backoff_initial_ms: 50,
            backoff_max_ms: 5000,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_uses_defaults() {
        let c: CloudConfig =
            serde_json::from_str(r#"{"gateway_port": 1234, "fault_injection": true}"#).unwrap();
        assert_eq!(c.gateway_port, 1234);
        assert_eq!(c.client_port, 9100);
        assert_eq!(c.ack_timeout_ms, 5000);
        assert_eq!(c.iteration_timeout_ms, 10_000);
        assert!(c.fault_injection);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(serde_json::from_str::<CloudConfig>(r#"{"gateway": 1}"#).is_err());
    }
}
