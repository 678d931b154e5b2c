//! The permanent cloud node.
//!
//! A single router task owns the fleet registry, the table of live handlers,
//! the assignment archive and the per-user sessions. Client connections, the
//! gateway and the handlers talk to it only through [`Command`] messages.
//! Every assignment gets its own handler task, which exits after emitting
//! the assignment's terminal status; every deployment that touches clients
//! gets a deployment task that lives until all acks are in or time runs out.

mod deploy;
mod gateway;
pub mod handler;
pub mod majority;

use std::collections::{BTreeMap, BTreeSet};
use std::net::SocketAddr;
use std::sync::Arc;
use std::time::Duration;

use fleet_core::executor::{Executor, ModuleStore, ReferenceExecutor};
use fleet_core::protocol::{
    derive_tasks, now_ms, AssignmentSpec, CodeDeploymentSpec, Envelope, ErrorReport,
    IterationOutput, Method, Payload, ProtocolError, ResultRecord, SeqTracker, Signature,
    StatusRecord, StatusState,
};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{mpsc, oneshot};
use tokio::task::{JoinHandle, JoinSet};
use tokio::time::Instant;
use tracing::{debug, info, warn};

use crate::api::{ApiError, AssignmentView, ClientInfo, DelayProfile};
use crate::config::CloudConfig;
use crate::net::{write_envelope, EnvelopeReader};
use deploy::{run_deployment, DeployMsg, PushTarget};
use handler::{initial_signature, AssignmentHandler, HandlerEvent, Offboard};

pub const CLOUD_SENDER_ID: &str = "cloud";

/// A request the cloud refused, with its HTTP status.
#[derive(Debug, Clone, PartialEq)]
pub struct Rejection {
    pub status: u16,
    pub body: ApiError,
}

impl Rejection {
    fn new(status: u16, error: &str, message: impl Into<String>) -> Self {
        Self {
            status,
            body: ApiError {
                error: error.into(),
                message: message.into(),
                fields: vec![],
                diagnostics: vec![],
            },
        }
    }

    fn validation(message: impl Into<String>) -> Self {
        Self::new(400, "validation", message)
    }

    fn not_found(message: impl Into<String>) -> Self {
        Self::new(404, "not_found", message)
    }

    fn from_protocol(e: ProtocolError) -> Self {
        Self::validation(e.to_string())
    }
}

impl std::fmt::Display for Rejection {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} ({}): {}",
            self.body.error, self.status, self.body.message
        )
    }
}

impl std::error::Error for Rejection {}

type Reply<T> = oneshot::Sender<Result<T, Rejection>>;

/// Item pushed to a user's stream.
pub type StreamItem = Payload;

pub(crate) enum Command {
    ClientConnected {
        conn: u64,
        client_id: String,
        address: String,
        outbound: mpsc::UnboundedSender<Payload>,
    },
    ClientDisconnected {
        conn: u64,
    },
    FromClient {
        conn: u64,
        envelope: Envelope,
    },
    Submit {
        spec: AssignmentSpec,
        reply: Reply<String>,
    },
    Deploy {
        spec: CodeDeploymentSpec,
        reply: Reply<oneshot::Receiver<StatusRecord>>,
    },
    Cancel {
        assignment_id: String,
        reply: Reply<StatusRecord>,
    },
    Clients {
        reply: oneshot::Sender<Vec<ClientInfo>>,
    },
    Assignment {
        assignment_id: String,
        reply: Reply<AssignmentView>,
    },
    Subscribe {
        user_id: String,
        assignment_id: Option<String>,
        tx: mpsc::UnboundedSender<StreamItem>,
    },
    HandlerEvent {
        assignment_id: String,
        event: HandlerEvent,
    },
    HandlerFinished {
        assignment_id: String,
    },
    DeploymentFinished {
        deployment_id: String,
        user_id: String,
        status: StatusRecord,
    },
    SetDelays {
        profile: DelayProfile,
        reply: Reply<DelayProfile>,
    },
    LiveHandlers {
        reply: oneshot::Sender<LiveCounts>,
    },
    Tick,
}

/// Number of ephemeral handlers currently alive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LiveCounts {
    pub assignments: usize,
    pub deployments: usize,
    /// Non-terminal assignments in the archive; always equal to `assignments`.
    pub active_assignments: usize,
}

/// Cheap, cloneable access to a running cloud node.
#[derive(Clone)]
pub struct CloudHandle {
    tx: mpsc::UnboundedSender<Command>,
    client_addr: SocketAddr,
    gateway_addr: SocketAddr,
}

impl CloudHandle {
    pub fn client_addr(&self) -> SocketAddr {
        self.client_addr
    }

    pub fn gateway_addr(&self) -> SocketAddr {
        self.gateway_addr
    }

    async fn ask<T>(&self, make: impl FnOnce(Reply<T>) -> Command) -> Result<T, Rejection> {
        let (reply, rx) = oneshot::channel();
        self.tx.send(make(reply)).map_err(|_| gone())?;
        rx.await.map_err(|_| gone())?
    }

    pub async fn submit(&self, spec: AssignmentSpec) -> Result<String, Rejection> {
        self.ask(|reply| Command::Submit { spec, reply }).await
    }

    /// Resolves once the deployment reached DEPLOYED or FAILED.
    pub async fn deploy(&self, spec: CodeDeploymentSpec) -> Result<StatusRecord, Rejection> {
        let done = self.ask(|reply| Command::Deploy { spec, reply }).await?;
        done.await.map_err(|_| gone())
    }

    pub async fn cancel(&self, assignment_id: &str) -> Result<StatusRecord, Rejection> {
        let assignment_id = assignment_id.to_owned();
        self.ask(|reply| Command::Cancel {
            assignment_id,
            reply,
        })
        .await
    }

    pub async fn clients(&self) -> Vec<ClientInfo> {
        let (reply, rx) = oneshot::channel();
        let _ = self.tx.send(Command::Clients { reply });
        rx.await.unwrap_or_default()
    }

    pub async fn assignment(&self, assignment_id: &str) -> Result<AssignmentView, Rejection> {
        let assignment_id = assignment_id.to_owned();
        self.ask(|reply| Command::Assignment {
            assignment_id,
            reply,
        })
        .await
    }

    /// Live stream of a user's outputs and statuses. With `assignment_id`,
    /// only that assignment, replayed from its first output.
    pub fn subscribe(
        &self,
        user_id: &str,
        assignment_id: Option<&str>,
    ) -> mpsc::UnboundedReceiver<StreamItem> {
        let (tx, rx) = mpsc::unbounded_channel();
        let _ = self.tx.send(Command::Subscribe {
            user_id: user_id.to_owned(),
            assignment_id: assignment_id.map(str::to_owned),
            tx,
        });
        rx
    }

    pub async fn set_delays(&self, profile: DelayProfile) -> Result<DelayProfile, Rejection> {
        self.ask(|reply| Command::SetDelays { profile, reply })
            .await
    }

    pub async fn live_handlers(&self) -> LiveCounts {
        let (reply, rx) = oneshot::channel();
        let _ = self.tx.send(Command::LiveHandlers { reply });
        rx.await.unwrap_or_default()
    }
}

fn gone() -> Rejection {
    Rejection::new(503, "internal", "cloud node is shutting down")
}

/// A started cloud node. Dropping it does not stop it; call [`CloudNode::shutdown`].
pub struct CloudNode {
    handle: CloudHandle,
    tasks: Vec<JoinHandle<()>>,
}

impl CloudNode {
    pub async fn start(config: CloudConfig) -> anyhow::Result<Self> {
        Self::start_with_executor(config, Arc::new(ReferenceExecutor::default())).await
    }

    pub async fn start_with_executor(
        config: CloudConfig,
        executor: Arc<dyn Executor>,
    ) -> anyhow::Result<Self> {
        let store = Arc::new(ModuleStore::open(&config.module_root)?);
        let fleet_listener = TcpListener::bind(config.client_addr()?).await?;
        let gateway_listener = TcpListener::bind(config.gateway_addr()?).await?;
        let client_addr = fleet_listener.local_addr()?;
        let gateway_addr = gateway_listener.local_addr()?;
        let (tx, rx) = mpsc::unbounded_channel();
        let handle = CloudHandle {
            tx: tx.clone(),
            client_addr,
            gateway_addr,
        };

        let delays = if config.fault_injection {
            DelayProfile {
                code_push_delay_ms: config.code_push_delays.clone(),
            }
        } else {
            DelayProfile::default()
        };
        let heartbeat = Duration::from_millis(config.heartbeat_ms.max(1));
        let router = Router {
            config: config.clone(),
            store,
            executor,
            tx: tx.clone(),
            clients: BTreeMap::new(),
            conns: BTreeMap::new(),
            handlers: BTreeMap::new(),
            archive: BTreeMap::new(),
            deployments: BTreeMap::new(),
            current: BTreeMap::new(),
            sessions: Vec::new(),
            delays,
            next_id: 1,
        };
        let mut tasks = vec![tokio::spawn(router.run(rx))];
        tasks.push(tokio::spawn(accept_loop(fleet_listener, tx.clone())));
        let ticker = tx.clone();
        tasks.push(tokio::spawn(async move {
            let mut interval = tokio::time::interval(heartbeat / 2);
            loop {
                interval.tick().await;
                if ticker.send(Command::Tick).is_err() {
                    break;
                }
            }
        }));
        tasks.push(tokio::spawn(gateway::serve(
            gateway_listener,
            handle.clone(),
            config,
        )));
        info!(%client_addr, %gateway_addr, "cloud node up");
        Ok(Self { handle, tasks })
    }

    pub fn handle(&self) -> CloudHandle {
        self.handle.clone()
    }

    pub fn shutdown(self) {
        for t in self.tasks {
            t.abort();
        }
    }

    /// Runs until the router stops.
    pub async fn wait(mut self) {
        if let Some(router) = self.tasks.drain(..1).next() {
            let _ = router.await;
        }
        for t in self.tasks {
            t.abort();
        }
    }
}

async fn accept_loop(listener: TcpListener, tx: mpsc::UnboundedSender<Command>) {
    let mut conns = JoinSet::new();
    let mut next_conn = 1u64;
    loop {
        tokio::select! {
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let conn = next_conn;
                    next_conn += 1;
                    conns.spawn(serve_connection(conn, stream, peer, tx.clone()));
                }
                Err(e) => warn!("accept failed: {e}"),
            },
            Some(_) = conns.join_next(), if !conns.is_empty() => {}
        }
    }
}

async fn serve_connection(
    conn: u64,
    stream: TcpStream,
    peer: SocketAddr,
    tx: mpsc::UnboundedSender<Command>,
) {
    let _ = stream.set_nodelay(true);
    let (read, mut write) = stream.into_split();
    let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Payload>();
    let writer = tokio::spawn(async move {
        let mut seq = 0u64;
        while let Some(payload) = out_rx.recv().await {
            seq += 1;
            if let Err(e) =
                write_envelope(&mut write, &Envelope::new(CLOUD_SENDER_ID, seq, payload)).await
            {
                debug!(conn, "write failed: {e}");
                break;
            }
        }
    });
    let mut reader = EnvelopeReader::new(read);
    let mut seqs = SeqTracker::new();
    let mut registered = false;
    loop {
        let envelope = match reader.next().await {
            Ok(Some(Ok(env))) => env,
            Ok(Some(Err(e))) => {
                warn!(conn, %peer, "dropping bad envelope: {e}");
                continue;
            }
            Ok(None) => break,
            Err(e) => {
                debug!(conn, "read failed: {e}");
                break;
            }
        };
        if let Err(e) = seqs.observe(&envelope) {
            warn!(conn, "dropping envelope: {e}");
            continue;
        }
        if let Payload::RegisterClient(reg) = &envelope.payload {
            registered = true;
            let cmd = Command::ClientConnected {
                conn,
                client_id: reg.client_id.clone(),
                address: peer.to_string(),
                outbound: out_tx.clone(),
            };
            if tx.send(cmd).is_err() {
                break;
            }
            continue;
        }
        if !registered {
            warn!(conn, msg_type = %envelope.msg_type(), "message before REGISTER_CLIENT ignored");
            continue;
        }
        if tx.send(Command::FromClient { conn, envelope }).is_err() {
            break;
        }
    }
    let _ = tx.send(Command::ClientDisconnected { conn });
    drop(out_tx);
    writer.abort();
}

struct ClientEntry {
    address: String,
    last_heartbeat: u64,
    last_seen: Instant,
    connected: bool,
    conn: u64,
    outbound: mpsc::UnboundedSender<Payload>,
}

enum HandlerMsg {
    Result(ResultRecord),
    Failure {
        client_id: String,
        iteration: u64,
        reason: String,
    },
    Lost(String),
    Regained(String),
    Signature(Signature),
    Cancel(String),
}

struct HandlerLink {
    tx: mpsc::UnboundedSender<HandlerMsg>,
}

struct AssignmentRecord {
    spec: AssignmentSpec,
    targets: BTreeSet<String>,
    status: StatusRecord,
    outputs: Vec<IterationOutput>,
}

struct Subscriber {
    user_id: String,
    assignment_id: Option<String>,
    tx: mpsc::UnboundedSender<StreamItem>,
}

struct Router {
    config: CloudConfig,
    store: Arc<ModuleStore>,
    executor: Arc<dyn Executor>,
    tx: mpsc::UnboundedSender<Command>,
    clients: BTreeMap<String, ClientEntry>,
    conns: BTreeMap<u64, String>,
    handlers: BTreeMap<String, HandlerLink>,
    archive: BTreeMap<String, AssignmentRecord>,
    deployments: BTreeMap<String, mpsc::UnboundedSender<DeployMsg>>,
    /// Latest signature deployed to clients per (user, module).
    current: BTreeMap<(String, String), Signature>,
    sessions: Vec<Subscriber>,
    delays: DelayProfile,
    next_id: u64,
}

impl Router {
    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Command>) {
        while let Some(cmd) = rx.recv().await {
            self.dispatch(cmd);
        }
    }

    fn dispatch(&mut self, cmd: Command) {
        match cmd {
            Command::ClientConnected {
                conn,
                client_id,
                address,
                outbound,
            } => self.client_connected(conn, client_id, address, outbound),
            Command::ClientDisconnected { conn } => self.client_disconnected(conn),
            Command::FromClient { conn, envelope } => self.client_envelope(conn, envelope),
            Command::Submit { spec, reply } => {
                let _ = reply.send(self.submit(spec));
            }
            Command::Deploy { spec, reply } => {
                let _ = reply.send(self.deploy(spec));
            }
            Command::Cancel {
                assignment_id,
                reply,
            } => {
                let _ = reply.send(self.cancel(&assignment_id));
            }
            Command::Clients { reply } => {
                let _ = reply.send(self.client_infos());
            }
            Command::Assignment {
                assignment_id,
                reply,
            } => {
                let view = self
                    .archive
                    .get(&assignment_id)
                    .map(|r| AssignmentView {
                        spec: r.spec.clone(),
                        status: r.status.clone(),
                        outputs: r.outputs.clone(),
                    })
                    .ok_or_else(|| {
                        Rejection::not_found(format!("unknown assignment {assignment_id}"))
                    });
                let _ = reply.send(view);
            }
            Command::Subscribe {
                user_id,
                assignment_id,
                tx,
            } => self.subscribe(user_id, assignment_id, tx),
            Command::HandlerEvent {
                assignment_id,
                event,
            } => self.handler_event(&assignment_id, event),
            Command::HandlerFinished { assignment_id } => {
                self.handlers.remove(&assignment_id);
            }
            Command::DeploymentFinished {
                deployment_id,
                user_id,
                status,
            } => {
                self.deployments.remove(&deployment_id);
                self.broadcast(&user_id, None, Payload::AssignmentStatus(status));
            }
            Command::SetDelays { profile, reply } => {
                let res = if self.config.fault_injection {
                    self.delays = profile.clone();
                    Ok(profile)
                } else {
                    Err(Rejection::new(
                        403,
                        "forbidden",
                        "fault injection is disabled",
                    ))
                };
                let _ = reply.send(res);
            }
            Command::LiveHandlers { reply } => {
                let active = self
                    .archive
                    .values()
                    .filter(|r| !r.status.state.is_terminal())
                    .count();
                let _ = reply.send(LiveCounts {
                    assignments: self.handlers.len(),
                    deployments: self.deployments.len(),
                    active_assignments: active,
                });
            }
            Command::Tick => self.check_liveness(),
        }
    }

    fn fresh_id(&mut self, prefix: &str) -> String {
        let id = format!("{prefix}-{}-{:x}", self.next_id, now_ms());
        self.next_id += 1;
        id
    }

    fn client_connected(
        &mut self,
        conn: u64,
        client_id: String,
        address: String,
        outbound: mpsc::UnboundedSender<Payload>,
    ) {
        let now = Instant::now();
        if let Some(old) = self.clients.get(&client_id) {
            if old.conn != conn {
                self.conns.remove(&old.conn);
            }
        }
        let was_connected = self.clients.get(&client_id).is_some_and(|c| c.connected);
        info!(client = %client_id, %address, "client registered");
        self.conns.insert(conn, client_id.clone());
        self.clients.insert(
            client_id.clone(),
            ClientEntry {
                address,
                last_heartbeat: now_ms(),
                last_seen: now,
                connected: true,
                conn,
                outbound,
            },
        );
        if !was_connected {
            self.notify_handlers_of(&client_id, || HandlerMsg::Regained(client_id.clone()));
        }
    }

    fn client_disconnected(&mut self, conn: u64) {
        let Some(client_id) = self.conns.remove(&conn) else {
            return;
        };
        let Some(entry) = self.clients.get_mut(&client_id) else {
            return;
        };
        if entry.conn != conn {
            return;
        }
        info!(client = %client_id, "client connection closed");
        if entry.connected {
            entry.connected = false;
            self.notify_handlers_of(&client_id, || HandlerMsg::Lost(client_id.clone()));
        }
    }

    fn check_liveness(&mut self) {
        let limit = Duration::from_millis(self.config.heartbeat_ms.saturating_mul(3));
        let now = Instant::now();
        let silent: Vec<String> = self
            .clients
            .iter_mut()
            .filter(|(_, c)| c.connected && now.duration_since(c.last_seen) > limit)
            .map(|(id, c)| {
                c.connected = false;
                id.clone()
            })
            .collect();
        for id in silent {
            warn!(client = %id, "missed heartbeats, marking disconnected");
            self.notify_handlers_of(&id, || HandlerMsg::Lost(id.clone()));
        }
    }

    fn notify_handlers_of(&self, client_id: &str, msg: impl Fn() -> HandlerMsg) {
        for (id, link) in &self.handlers {
            if self
                .archive
                .get(id)
                .is_some_and(|r| r.targets.contains(client_id))
            {
                let _ = link.tx.send(msg());
            }
        }
    }

    fn client_envelope(&mut self, conn: u64, envelope: Envelope) {
        let Some(client_id) = self.conns.get(&conn).cloned() else {
            return;
        };
        let mut regained = false;
        if let Some(entry) = self.clients.get_mut(&client_id) {
            entry.last_seen = Instant::now();
            if !entry.connected {
                entry.connected = true;
                regained = true;
            }
        }
        if regained {
            self.notify_handlers_of(&client_id, || HandlerMsg::Regained(client_id.clone()));
        }
        match envelope.payload {
            Payload::Heartbeat(_) => {
                if let Some(entry) = self.clients.get_mut(&client_id) {
                    entry.last_heartbeat = now_ms();
                }
            }
            Payload::TaskResult(record) => {
                if record.client_id != client_id {
                    warn!(client = %client_id, claimed = %record.client_id, "result with foreign client id dropped");
                    return;
                }
                match self.handlers.get(&record.assignment_id) {
                    Some(link) => {
                        let _ = link.tx.send(HandlerMsg::Result(record));
                    }
                    None => warn!(
                        assignment = %record.assignment_id,
                        client = %client_id,
                        iteration = record.iteration,
                        "result for unknown or finished assignment dropped"
                    ),
                }
            }
            Payload::CodeAck(ack) => match self.deployments.get(&ack.deployment_id) {
                Some(tx) => {
                    let _ = tx.send(DeployMsg::Ack(ack));
                }
                None => debug!(deployment = %ack.deployment_id, "late code ack"),
            },
            Payload::Error(report) => self.client_error(&client_id, report),
            other => {
                warn!(client = %client_id, msg_type = %other.msg_type(), "unexpected message from client")
            }
        }
    }

    fn client_error(&mut self, client_id: &str, report: ErrorReport) {
        if let Some(dep) = report
            .deployment_id
            .as_ref()
            .and_then(|d| self.deployments.get(d))
        {
            let _ = dep.send(DeployMsg::Rejected {
                client_id: client_id.to_owned(),
                reason: report.message,
            });
            return;
        }
        if let (Some(aid), Some(iteration)) = (&report.assignment_id, report.iteration) {
            if let Some(link) = self.handlers.get(aid) {
                let _ = link.tx.send(HandlerMsg::Failure {
                    client_id: client_id.to_owned(),
                    iteration,
                    reason: format!("{}: {}", report.kind, report.message),
                });
                return;
            }
        }
        warn!(client = %client_id, kind = %report.kind, "client error: {}", report.message);
    }

    fn connected_ids(&self) -> Vec<String> {
        self.clients
            .iter()
            .filter(|(_, c)| c.connected)
            .map(|(id, _)| id.clone())
            .collect()
    }

    fn client_infos(&self) -> Vec<ClientInfo> {
        self.clients
            .iter()
            .map(|(id, c)| ClientInfo {
                client_id: id.clone(),
                address: c.address.clone(),
                last_heartbeat: c.last_heartbeat,
                connected: c.connected,
            })
            .collect()
    }

    fn module_known(&self, user_id: &str, name: &str) -> Option<Signature> {
        self.current
            .get(&(user_id.to_owned(), name.to_owned()))
            .cloned()
            .or_else(|| self.store.signature_of(user_id, name))
    }

    fn submit(&mut self, mut spec: AssignmentSpec) -> Result<String, Rejection> {
        let fields = spec.validate();
        if !fields.is_empty() {
            let mut r = Rejection::validation("invalid assignment");
            r.body.fields = fields;
            return Err(r);
        }
        if spec.assignment_id.is_empty() {
            spec.assignment_id = self.fresh_id("asg");
        } else if self.archive.contains_key(&spec.assignment_id) {
            return Err(Rejection::new(
                409,
                "conflict",
                format!("assignment {} exists", spec.assignment_id),
            ));
        }
        let tasks = derive_tasks(&spec, &self.connected_ids()).map_err(Rejection::from_protocol)?;
        let known = match (&spec.method, &spec.custom_module) {
            (Method::Custom, Some(name)) => {
                Some(self.module_known(&spec.user_id, name).ok_or_else(|| {
                    Rejection::not_found(format!(
                        "module {}/{name} has not been deployed",
                        spec.user_id
                    ))
                })?)
            }
            _ => None,
        };
        if let Some(name) = &spec.offboard_module {
            if self.store.signature_of(&spec.user_id, name).is_none() {
                return Err(Rejection::not_found(format!(
                    "module {}/{name} is not on the cloud",
                    spec.user_id
                )));
            }
        }
        let id = spec.assignment_id.clone();
        let targets: BTreeSet<String> = tasks.iter().map(|t| t.client_id.clone()).collect();
        let handler = AssignmentHandler::new(
            spec.clone(),
            targets.clone(),
            initial_signature(&spec, known),
            Duration::from_millis(self.config.iteration_timeout_ms),
            std::time::Instant::now(),
        );
        let (htx, hrx) = mpsc::unbounded_channel();
        tokio::spawn(run_handler(
            handler,
            hrx,
            self.store.clone(),
            self.executor.clone(),
            self.tx.clone(),
        ));
        self.handlers.insert(id.clone(), HandlerLink { tx: htx });
        let status = StatusRecord::assignment(
            &id,
            StatusState::Running,
            format!("{} task(s)", targets.len()),
        );
        self.archive.insert(
            id.clone(),
            AssignmentRecord {
                spec: spec.clone(),
                targets,
                status: status.clone(),
                outputs: Vec::new(),
            },
        );
        for task in tasks {
            if let Some(c) = self.clients.get(&task.client_id) {
                let _ = c.outbound.send(Payload::Task(task));
            }
        }
        info!(assignment = %id, user = %spec.user_id, "assignment accepted");
        self.broadcast(
            &spec.user_id,
            Some(&id),
            Payload::AssignmentStatus(StatusRecord::assignment(&id, StatusState::Accepted, "")),
        );
        self.broadcast(&spec.user_id, Some(&id), Payload::AssignmentStatus(status));
        Ok(id)
    }

    fn deploy(
        &mut self,
        mut spec: CodeDeploymentSpec,
    ) -> Result<oneshot::Receiver<StatusRecord>, Rejection> {
        let fields = spec.validate();
        if !fields.is_empty() {
            let mut r = Rejection::validation("invalid deployment");
            r.body.fields = fields;
            return Err(r);
        }
        if let Err(diagnostics) = self.executor.validate(&spec.module.code) {
            let mut r = Rejection::new(
                400,
                "invalid_code",
                format!("module {} failed validation", spec.module.name),
            );
            r.body.diagnostics = diagnostics;
            return Err(r);
        }
        if spec.deployment_id.is_empty() {
            spec.deployment_id = self.fresh_id("dep");
        } else if self.deployments.contains_key(&spec.deployment_id) {
            return Err(Rejection::new(
                409,
                "conflict",
                format!("deployment {} in progress", spec.deployment_id),
            ));
        }
        let targets = if spec.target.includes_clients() {
            let fleet = self.connected_ids();
            if fleet.is_empty() {
                return Err(Rejection::validation("no connected clients"));
            }
            if spec.target_clients.is_empty() {
                fleet
            } else {
                let unknown: Vec<String> = spec
                    .target_clients
                    .iter()
                    .filter(|c| !fleet.contains(c))
                    .cloned()
                    .collect();
                if !unknown.is_empty() {
                    return Err(Rejection::from_protocol(ProtocolError::UnknownClients(
                        unknown,
                    )));
                }
                let set: BTreeSet<String> = spec.target_clients.iter().cloned().collect();
                set.into_iter().collect()
            }
        } else {
            Vec::new()
        };
        if spec.target.includes_cloud() {
            self.store
                .store_module(&spec.module)
                .map_err(|e| Rejection::validation(e.to_string()))?;
        }
        let (done_tx, done_rx) = oneshot::channel();
        let module = spec.module.clone();
        let dep_id = spec.deployment_id.clone();
        let user_id = spec.user_id.clone();
        if targets.is_empty() {
            let status = StatusRecord::deployment(
                &dep_id,
                StatusState::Deployed,
                format!(
                    "{}/{} signature {} on the cloud",
                    module.user_id, module.name, module.signature
                ),
            );
            self.broadcast(&user_id, None, Payload::AssignmentStatus(status.clone()));
            let _ = done_tx.send(status);
            return Ok(done_rx);
        }
        // the newest deployment is the tie-break reference from now on
        let key = (module.user_id.clone(), module.name.clone());
        self.current.insert(key, module.signature.clone());
        for (id, link) in &self.handlers {
            let Some(rec) = self.archive.get(id) else {
                continue;
            };
            if rec.spec.user_id == module.user_id
                && rec.spec.method == Method::Custom
                && rec.spec.custom_module.as_deref() == Some(module.name.as_str())
            {
                let _ = link
                    .tx
                    .send(HandlerMsg::Signature(module.signature.clone()));
            }
        }
        let push_targets: Vec<PushTarget> = targets
            .iter()
            .filter_map(|id| {
                self.clients.get(id).map(|c| PushTarget {
                    client_id: id.clone(),
                    outbound: c.outbound.clone(),
                    delay: Duration::from_millis(self.delays.delay_for(id)),
                })
            })
            .collect();
        let (dtx, drx) = mpsc::unbounded_channel();
        self.deployments.insert(dep_id.clone(), dtx);
        self.broadcast(
            &user_id,
            None,
            Payload::AssignmentStatus(StatusRecord::deployment(
                &dep_id,
                StatusState::Accepted,
                format!("pushing to {}", targets.join(", ")),
            )),
        );
        let ack_timeout = Duration::from_millis(self.config.ack_timeout_ms);
        let router = self.tx.clone();
        tokio::spawn(async move {
            let status =
                run_deployment(dep_id.clone(), module, push_targets, ack_timeout, drx).await;
            let _ = done_tx.send(status.clone());
            let _ = router.send(Command::DeploymentFinished {
                deployment_id: dep_id,
                user_id,
                status,
            });
        });
        Ok(done_rx)
    }

    fn cancel(&mut self, assignment_id: &str) -> Result<StatusRecord, Rejection> {
        let Some(record) = self.archive.get(assignment_id) else {
            return Err(Rejection::not_found(format!(
                "unknown assignment {assignment_id}"
            )));
        };
        if record.status.state.is_terminal() {
            return Err(Rejection::new(
                409,
                "conflict",
                format!(
                    "assignment {assignment_id} is already {}",
                    record.status.state
                ),
            ));
        }
        if let Some(link) = self.handlers.get(assignment_id) {
            let _ = link.tx.send(HandlerMsg::Cancel("cancelled by user".into()));
        }
        Ok(StatusRecord::assignment(
            assignment_id,
            StatusState::Cancelled,
            "cancel requested",
        ))
    }

    fn handler_event(&mut self, assignment_id: &str, event: HandlerEvent) {
        let Some(record) = self.archive.get_mut(assignment_id) else {
            return;
        };
        let user_id = record.spec.user_id.clone();
        let payload = match event {
            HandlerEvent::Output(output) => {
                record.outputs.push(output.clone());
                Payload::IterationOutput(output)
            }
            HandlerEvent::Status(status) => {
                if status.state.is_terminal() {
                    record.status = status.clone();
                    // stop client-side task handlers still running
                    let notice = Payload::AssignmentStatus(status.clone());
                    for client in &record.targets {
                        if let Some(c) = self.clients.get(client) {
                            let _ = c.outbound.send(notice.clone());
                        }
                    }
                    self.handlers.remove(assignment_id);
                    info!(assignment = %assignment_id, state = %status.state, "assignment finished");
                }
                Payload::AssignmentStatus(status)
            }
        };
        self.broadcast(&user_id, Some(assignment_id), payload);
    }

    fn subscribe(
        &mut self,
        user_id: String,
        assignment_id: Option<String>,
        tx: mpsc::UnboundedSender<StreamItem>,
    ) {
        if let Some(record) = assignment_id.as_ref().and_then(|id| self.archive.get(id)) {
            if record.spec.user_id == user_id {
                for o in &record.outputs {
                    let _ = tx.send(Payload::IterationOutput(o.clone()));
                }
                let _ = tx.send(Payload::AssignmentStatus(record.status.clone()));
            }
        }
        self.sessions.push(Subscriber {
            user_id,
            assignment_id,
            tx,
        });
    }

    fn broadcast(&mut self, user_id: &str, assignment_id: Option<&str>, payload: Payload) {
        self.sessions.retain(|s| {
            if s.user_id != user_id {
                return !s.tx.is_closed();
            }
            if s.assignment_id.is_some() && s.assignment_id.as_deref() != assignment_id {
                return !s.tx.is_closed();
            }
            s.tx.send(payload.clone()).is_ok()
        });
    }
}

async fn run_handler(
    mut handler: AssignmentHandler,
    mut rx: mpsc::UnboundedReceiver<HandlerMsg>,
    store: Arc<ModuleStore>,
    executor: Arc<dyn Executor>,
    router: mpsc::UnboundedSender<Command>,
) {
    let id = handler.spec().assignment_id.clone();
    let emit = |event: HandlerEvent| {
        let _ = router.send(Command::HandlerEvent {
            assignment_id: id.clone(),
            event,
        });
    };
    loop {
        let deadline = handler.deadline().map(Instant::from_std);
        let msg = tokio::select! {
            m = rx.recv() => match m {
                Some(m) => Some(m),
                None => break,
            },
            _ = async {
                match deadline {
                    Some(d) => tokio::time::sleep_until(d).await,
                    None => std::future::pending().await,
                }
            } => None,
        };
        let now = std::time::Instant::now();
        if let Some(msg) = msg {
            match msg {
                HandlerMsg::Result(record) => {
                    let (client, iteration) = (record.client_id.clone(), record.iteration);
                    let outcome = handler.collect_result(record, now);
                    if outcome != handler::Collected::Accepted {
                        warn!(assignment = %id, %client, iteration, ?outcome, "result dropped");
                    }
                }
                HandlerMsg::Failure {
                    client_id,
                    iteration,
                    reason,
                } => {
                    handler.record_failure(&client_id, iteration, &reason, now);
                }
                HandlerMsg::Lost(c) => handler.client_lost(&c),
                HandlerMsg::Regained(c) => handler.client_regained(&c),
                HandlerMsg::Signature(s) => handler.set_current_signature(s),
                HandlerMsg::Cancel(reason) => {
                    if let Some(e) = handler.cancel(&reason) {
                        emit(e);
                    }
                }
            }
        }
        let offboard = Offboard {
            store: &store,
            executor: executor.as_ref(),
        };
        for event in handler.poll(now, &offboard) {
            emit(event);
        }
        if handler.is_finished() {
            break;
        }
    }
    let _ = router.send(Command::HandlerFinished { assignment_id: id });
}
