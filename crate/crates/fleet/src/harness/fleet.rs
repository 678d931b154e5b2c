//! Fleets the harness can drive: in-process nodes or real OS processes.

use std::future::Future;
use std::net::TcpListener as StdListener;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::time::Duration;

use anyhow::{bail, Context};
use tokio::process::{Child, Command};
use tokio::time::Instant;

use crate::client::ClientNode;
use crate::cloud::CloudNode;
use crate::config::{ClientConfig, CloudConfig, SignalKind};
use crate::frontend::{Frontend, HttpTransport};

/// How long a fleet may take to become ready.
pub const READY_TIMEOUT: Duration = Duration::from_secs(20);

#[derive(Debug, Clone)]
pub struct FleetOptions {
    pub clients: usize,
    /// Telemetry values per second on every client.
    pub rate: f64,
    pub signal: SignalKind,
    /// Client `i` gets seed `seed + i`, or `seed` when `same_seed` is set.
    pub seed: u64,
    pub same_seed: bool,
    pub heartbeat_ms: u64,
    pub iteration_timeout_ms: u64,
    pub ack_timeout_ms: u64,
    pub fault_injection: bool,
}

impl Default for FleetOptions {
    fn default() -> Self {
        Self {
            clients: 5,
            rate: 100.0,
            signal: SignalKind::Walk,
            seed: 1,
            same_seed: false,
            heartbeat_ms: 500,
            iteration_timeout_ms: 10_000,
            ack_timeout_ms: 5000,
            fault_injection: true,
        }
    }
}

impl FleetOptions {
    pub fn client_id(&self, i: usize) -> String {
        format!("c{i}")
    }

    pub fn client_ids(&self) -> Vec<String> {
        (0..self.clients).map(|i| self.client_id(i)).collect()
    }

    pub fn seed_for(&self, i: usize) -> u64 {
        if self.same_seed {
            self.seed
        } else {
            self.seed + i as u64
        }
    }

    fn cloud_config(&self, root: &Path, client_port: u16, gateway_port: u16) -> CloudConfig {
        CloudConfig {
            bind_host: "127.0.0.1".into(),
            client_port,
            gateway_port,
            module_root: root.join("cloud"),
            ack_timeout_ms: self.ack_timeout_ms,
            iteration_timeout_ms: self.iteration_timeout_ms,
            heartbeat_ms: self.heartbeat_ms,
            fault_injection: self.fault_injection,
            ..CloudConfig::default()
        }
    }
}

pub trait Fleet: Send + Sync {
    /// `host:port` of the gateway.
    fn gateway(&self) -> String;

    fn client_ids(&self) -> Vec<String>;

    fn options(&self) -> &FleetOptions;

    /// Stops every node and starts them again on the same module stores;
    /// returns once the gateway answers and every client is registered.
    fn restart(&mut self) -> impl Future<Output = anyhow::Result<()>> + Send;

    fn frontend(&self) -> Frontend<HttpTransport> {
        Frontend::new(HttpTransport::new(self.gateway()))
    }
}

/// Polls the gateway until all `ids` are connected.
pub async fn wait_ready(gateway: &str, ids: &[String], timeout: Duration) -> anyhow::Result<()> {
    let fe = Frontend::new(HttpTransport::new(gateway));
    let deadline = Instant::now() + timeout;
    loop {
        if let Ok(clients) = fe.clients().await {
            if ids
                .iter()
                .all(|id| clients.iter().any(|c| &c.client_id == id && c.connected))
            {
                return Ok(());
            }
        }
        if Instant::now() >= deadline {
            bail!("fleet at {gateway} not ready within {timeout:?}");
        }
        tokio::time::sleep(Duration::from_millis(5)).await;
    }
}

/// Cloud and clients as tasks inside this process, on real localhost TCP.
pub struct LocalFleet {
    options: FleetOptions,
    root: tempfile::TempDir,
    cloud: Option<CloudNode>,
    clients: Vec<ClientNode>,
    gateway: String,
}

impl LocalFleet {
    pub async fn start(options: FleetOptions) -> anyhow::Result<Self> {
        let root = tempfile::tempdir()?;
        let mut fleet = Self {
            options,
            root,
            cloud: None,
            clients: Vec::new(),
            gateway: String::new(),
        };
        fleet.launch().await?;
        Ok(fleet)
    }

    async fn launch(&mut self) -> anyhow::Result<()> {
        let config = self.options.cloud_config(self.root.path(), 0, 0);
        let cloud = CloudNode::start(config).await?;
        let handle = cloud.handle();
        self.gateway = handle.gateway_addr().to_string();
        for i in 0..self.options.clients {
            let id = self.options.client_id(i);
            let mut cc = ClientConfig::new(
                &id,
                handle.client_addr().to_string(),
                self.options.seed_for(i),
            );
            cc.rate = self.options.rate;
            cc.signal = self.options.signal;
            cc.module_root = self.root.path().join(&id);
            cc.heartbeat_ms = self.options.heartbeat_ms;
            self.clients.push(ClientNode::spawn(cc)?);
        }
        self.cloud = Some(cloud);
        wait_ready(&self.gateway, &self.options.client_ids(), READY_TIMEOUT).await
    }

    fn stop(&mut self) {
        for c in self.clients.drain(..) {
            c.shutdown();
        }
        if let Some(cloud) = self.cloud.take() {
            cloud.shutdown();
        }
    }

    pub fn cloud(&self) -> &CloudNode {
        self.cloud.as_ref().expect("fleet is running")
    }

    pub fn clients(&self) -> &[ClientNode] {
        &self.clients
    }

    /// Stops one client node, as if its process died.
    pub fn kill_client(&mut self, client_id: &str) -> bool {
        match self.clients.iter().position(|c| c.client_id() == client_id) {
            Some(i) => {
                self.clients.remove(i).shutdown();
                true
            }
            None => false,
        }
    }

    pub fn root(&self) -> &Path {
        self.root.path()
    }
}

impl Drop for LocalFleet {
    fn drop(&mut self) {
        self.stop();
    }
}

impl Fleet for LocalFleet {
    fn gateway(&self) -> String {
        self.gateway.clone()
    }

    fn client_ids(&self) -> Vec<String> {
        self.options.client_ids()
    }

    fn options(&self) -> &FleetOptions {
        &self.options
    }

    async fn restart(&mut self) -> anyhow::Result<()> {
        self.stop();
        self.launch().await
    }
}

/// Where the node executables live.
#[derive(Debug, Clone)]
pub struct Binaries {
    pub cloud: PathBuf,
    pub client: PathBuf,
}

impl Binaries {
    /// `cloud` and `client` next to the running executable.
    pub fn beside_current_exe() -> anyhow::Result<Self> {
        let exe = std::env::current_exe()?;
        let dir = exe.parent().context("executable has no directory")?;
        Ok(Self {
            cloud: dir.join("cloud"),
            client: dir.join("client"),
        })
    }
}

/// Cloud and clients as separate OS processes.
pub struct ProcessFleet {
    options: FleetOptions,
    binaries: Binaries,
    root: tempfile::TempDir,
    client_port: u16,
    gateway_port: u16,
    cloud: Option<Child>,
    clients: Vec<Child>,
}

fn free_port() -> anyhow::Result<u16> {
    Ok(StdListener::bind("127.0.0.1:0")?.local_addr()?.port())
}

impl ProcessFleet {
    pub async fn start(options: FleetOptions, binaries: Binaries) -> anyhow::Result<Self> {
        for b in [&binaries.cloud, &binaries.client] {
            if !b.exists() {
                bail!("missing executable {}", b.display());
            }
        }
        let root = tempfile::tempdir()?;
        let mut fleet = Self {
            options,
            binaries,
            root,
            client_port: free_port()?,
            gateway_port: free_port()?,
            cloud: None,
            clients: Vec::new(),
        };
        let config =
            fleet
                .options
                .cloud_config(fleet.root.path(), fleet.client_port, fleet.gateway_port);
        std::fs::write(fleet.config_path(), serde_json::to_vec_pretty(&config)?)?;
        fleet.launch().await?;
        Ok(fleet)
    }

    fn config_path(&self) -> PathBuf {
        self.root.path().join("cloud.json")
    }

    fn log(&self, name: &str) -> anyhow::Result<Stdio> {
        let f = std::fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.root.path().join(name))?;
        Ok(Stdio::from(f))
    }

    async fn launch(&mut self) -> anyhow::Result<()> {
        let cloud = Command::new(&self.binaries.cloud)
            .arg("--config")
            .arg(self.config_path())
            .env("RUST_LOG", "warn")
            .env_remove("FLEET_MODULE_ROOT")
            .env_remove("FLEET_CONFIG")
            .stdout(Stdio::null())
            .stderr(self.log("cloud.log")?)
            .kill_on_drop(true)
            .spawn()
            .with_context(|| format!("spawning {}", self.binaries.cloud.display()))?;
        self.cloud = Some(cloud);
        let gateway = self.gateway();
        wait_ready(&gateway, &[], READY_TIMEOUT).await?;
        let cloud_addr = format!("127.0.0.1:{}", self.client_port);
        for i in 0..self.options.clients {
            let id = self.options.client_id(i);
            let child = Command::new(&self.binaries.client)
                .args(["--id", &id, "--cloud", &cloud_addr])
                .args(["--seed", &self.options.seed_for(i).to_string()])
                .args(["--rate", &self.options.rate.to_string()])
                .args(["--heartbeat-ms", &self.options.heartbeat_ms.to_string()])
                .arg("--module-root")
                .arg(self.root.path().join(&id))
                .arg("--signal")
                .arg(match self.options.signal {
                    SignalKind::Walk => "walk",
                    SignalKind::Ramp => "ramp",
                })
                .env("RUST_LOG", "warn")
                .env_remove("FLEET_CLIENT_ID")
                .env_remove("FLEET_CLOUD_ADDR")
                .env_remove("FLEET_MODULE_ROOT")
                .stdout(Stdio::null())
                .stderr(self.log(&format!("{id}.log"))?)
                .kill_on_drop(true)
                .spawn()
                .with_context(|| format!("spawning {}", self.binaries.client.display()))?;
            self.clients.push(child);
        }
        wait_ready(&gateway, &self.options.client_ids(), READY_TIMEOUT).await
    }

    async fn stop(&mut self) {
        for mut c in self.clients.drain(..) {
            let _ = c.kill().await;
        }
        if let Some(mut c) = self.cloud.take() {
            let _ = c.kill().await;
        }
    }

    pub fn root(&self) -> &Path {
        self.root.path()
    }
}

impl Fleet for ProcessFleet {
    fn gateway(&self) -> String {
        format!("127.0.0.1:{}", self.gateway_port)
    }

    fn client_ids(&self) -> Vec<String> {
        self.options.client_ids()
    }

    fn options(&self) -> &FleetOptions {
        &self.options
    }

    async fn restart(&mut self) -> anyhow::Result<()> {
        self.stop().await;
        self.launch().await
    }
}
