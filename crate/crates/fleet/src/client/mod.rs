//! The permanent client node.
//!
//! One connection loop owns the cloud connection, the outbound queue and the
//! table of live task handlers. Task handlers run concurrently with each
//! other and with code pushes; they share only the module store.

pub mod task;
pub mod telemetry;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use fleet_core::executor::{Executor, ModuleStore, ReferenceExecutor};
use fleet_core::protocol::{
    CodeAck, CodePush, Envelope, ErrorReport, Heartbeat, Payload, RegisterClient, SeqTracker,
    TaskSpec,
};
use tokio::net::TcpStream;
use tokio::sync::mpsc;
use tokio::task::{AbortHandle, JoinHandle, JoinSet};
use tracing::{debug, info, warn};

use crate::config::ClientConfig;
use crate::net::{write_envelope, EnvelopeReader};
use task::{run_task, TaskContext};

/// A running client node.
pub struct ClientNode {
    client_id: String,
    live_tasks: Arc<AtomicUsize>,
    main: JoinHandle<()>,
}

impl ClientNode {
    pub fn spawn(config: ClientConfig) -> anyhow::Result<Self> {
        Self::spawn_with_executor(config, Arc::new(ReferenceExecutor::default()))
    }

    pub fn spawn_with_executor(
        config: ClientConfig,
        executor: Arc<dyn Executor>,
    ) -> anyhow::Result<Self> {
        anyhow::ensure!(
            config.rate > 0.0 && config.rate.is_finite(),
            "rate must be a positive number"
        );
        anyhow::ensure!(
            fleet_core::protocol::is_valid_user_id(&config.client_id),
            "client id must match [A-Za-z0-9_-]{{1,64}}"
        );
        let store = Arc::new(ModuleStore::open(&config.module_root)?);
        let live_tasks = Arc::new(AtomicUsize::new(0));
        let client_id = config.client_id.clone();
        let node = Node {
            config,
            store,
            executor,
            tasks: JoinSet::new(),
            by_task: BTreeMap::new(),
            live: live_tasks.clone(),
            seq: 0,
        };
        let main = tokio::spawn(node.run());
        Ok(Self {
            client_id,
            live_tasks,
            main,
        })
    }

    pub fn client_id(&self) -> &str {
        &self.client_id
    }

    /// Number of task handlers currently alive.
    pub fn live_tasks(&self) -> usize {
        self.live_tasks.load(Ordering::SeqCst)
    }

    /// Stops the node and every task handler, closing the connection.
    pub fn shutdown(self) {
        self.main.abort();
    }

    pub async fn wait(self) {
        let _ = self.main.await;
    }
}

/// Verifies, validates and stores a pushed module; the reply is the
/// CODE_ACK or an ERROR naming what was wrong. Nothing is stored on error.
pub fn apply_code_push(
    push: &CodePush,
    store: &ModuleStore,
    executor: &dyn Executor,
    client_id: &str,
) -> Payload {
    let reject = |kind: &str, message: String| {
        let mut e = ErrorReport::new(kind, message);
        e.deployment_id = Some(push.deployment_id.clone());
        e.client_id = Some(client_id.to_owned());
        Payload::Error(e)
    };
    let module = &push.module;
    if !module.signature_matches() {
        return reject(
            "signature_mismatch",
            format!(
                "module {}/{} does not hash to {}",
                module.user_id, module.name, module.signature
            ),
        );
    }
    if let Err(diags) = executor.validate(&module.code) {
        let text: Vec<String> = diags.iter().map(|d| d.to_string()).collect();
        return reject("invalid_code", text.join("; "));
    }
    match store.store_module(module) {
        Ok(stored) => Payload::CodeAck(CodeAck {
            deployment_id: push.deployment_id.clone(),
            client_id: client_id.to_owned(),
            user_id: stored.user_id,
            name: stored.name,
            signature: stored.signature,
        }),
        Err(e) => reject("store", e.to_string()),
    }
}

struct TaskEntry {
    assignment_id: String,
    abort: AbortHandle,
}

struct Node {
    config: ClientConfig,
    store: Arc<ModuleStore>,
    executor: Arc<dyn Executor>,
    tasks: JoinSet<String>,
    by_task: BTreeMap<String, TaskEntry>,
    live: Arc<AtomicUsize>,
    /// Global so that it keeps increasing across reconnects.
    seq: u64,
}

impl Node {
    async fn run(mut self) {
        let (out_tx, mut out_rx) = mpsc::unbounded_channel::<Payload>();
        let initial = Duration::from_millis(self.config.backoff_initial_ms.max(1));
        let max = Duration::from_millis(self.config.backoff_max_ms.max(1));
        let mut backoff = initial;
        loop {
            match TcpStream::connect(&self.config.cloud_addr).await {
                Ok(stream) => {
                    backoff = initial;
                    info!(client = %self.config.client_id, cloud = %self.config.cloud_addr, "connected");
                    self.session(stream, &out_tx, &mut out_rx).await;
                    warn!(client = %self.config.client_id, "connection to cloud lost");
                }
                Err(e) => {
                    warn!(client = %self.config.client_id, "cloud unreachable: {e}; retry in {backoff:?}")
                }
            }
            tokio::time::sleep(backoff).await;
            backoff = (backoff * 2).min(max);
            self.reap();
        }
    }

    fn reap(&mut self) {
        while let Some(done) = self.tasks.try_join_next() {
            if let Ok(task_id) = done {
                self.by_task.remove(&task_id);
            }
        }
        self.by_task.retain(|_, e| !e.abort.is_finished());
        self.live.store(self.by_task.len(), Ordering::SeqCst);
    }

    async fn send(
        &mut self,
        w: &mut tokio::net::tcp::OwnedWriteHalf,
        payload: Payload,
    ) -> std::io::Result<()> {
        self.seq += 1;
        write_envelope(
            w,
            &Envelope::new(self.config.client_id.clone(), self.seq, payload),
        )
        .await
    }

    async fn session(
        &mut self,
        stream: TcpStream,
        out_tx: &mpsc::UnboundedSender<Payload>,
        out_rx: &mut mpsc::UnboundedReceiver<Payload>,
    ) {
        let _ = stream.set_nodelay(true);
        let (read, mut write) = stream.into_split();
        let register = Payload::RegisterClient(RegisterClient {
            client_id: self.config.client_id.clone(),
        });
        if self.send(&mut write, register).await.is_err() {
            return;
        }
        // the reader runs apart because line reads are not cancel safe
        let (in_tx, mut in_rx) = mpsc::unbounded_channel::<Envelope>();
        let mut reader_set = JoinSet::new();
        reader_set.spawn(async move {
            let mut reader = EnvelopeReader::new(read);
            let mut seqs = SeqTracker::new();
            loop {
                match reader.next().await {
                    Ok(Some(Ok(env))) => {
                        if let Err(e) = seqs.observe(&env) {
                            warn!("dropping envelope from cloud: {e}");
                            continue;
                        }
                        if in_tx.send(env).is_err() {
                            break;
                        }
                    }
                    Ok(Some(Err(e))) => warn!("bad envelope from cloud: {e}"),
                    Ok(None) | Err(_) => break,
                }
            }
        });
        let mut heartbeat =
            tokio::time::interval(Duration::from_millis(self.config.heartbeat_ms.max(1)));
        heartbeat.tick().await;
        loop {
            tokio::select! {
                incoming = in_rx.recv() => {
                    let Some(env) = incoming else { return };
                    if let Some(reply) = self.handle(env, out_tx) {
                        if self.send(&mut write, reply).await.is_err() {
                            return;
                        }
                    }
                }
                outgoing = out_rx.recv() => {
                    let Some(payload) = outgoing else { return };
                    if self.send(&mut write, payload).await.is_err() {
                        return;
                    }
                }
                _ = heartbeat.tick() => {
                    if self.send(&mut write, Payload::Heartbeat(Heartbeat {})).await.is_err() {
                        return;
                    }
                }
                Some(done) = self.tasks.join_next(), if !self.tasks.is_empty() => {
                    if let Ok(task_id) = done {
                        self.by_task.remove(&task_id);
                        self.live.store(self.by_task.len(), Ordering::SeqCst);
                    }
                }
            }
        }
    }

    fn handle(
        &mut self,
        env: Envelope,
        out_tx: &mpsc::UnboundedSender<Payload>,
    ) -> Option<Payload> {
        match env.payload {
            Payload::Task(task) => {
                self.on_task(task, out_tx);
                None
            }
            Payload::CodePush(push) => {
                let reply = apply_code_push(
                    &push,
                    &self.store,
                    self.executor.as_ref(),
                    &self.config.client_id,
                );
                match &reply {
                    Payload::CodeAck(ack) => info!(
                        client = %self.config.client_id,
                        module = %format!("{}/{}", ack.user_id, ack.name),
                        signature = %ack.signature,
                        "module stored"
                    ),
                    _ => warn!(client = %self.config.client_id, "code push rejected: {reply:?}"),
                }
                Some(reply)
            }
            Payload::AssignmentStatus(status) if status.state.is_terminal() => {
                if let Some(aid) = &status.assignment_id {
                    self.stop_assignment(aid);
                }
                None
            }
            Payload::AssignmentStatus(_) | Payload::Heartbeat(_) => None,
            other => {
                debug!(msg_type = %other.msg_type(), "ignoring message from cloud");
                None
            }
        }
    }

    fn on_task(&mut self, task: TaskSpec, out_tx: &mpsc::UnboundedSender<Payload>) {
        if task.client_id != self.config.client_id {
            warn!(task = %task.task_id, "task addressed to {} ignored", task.client_id);
            return;
        }
        if self.by_task.contains_key(&task.task_id) {
            debug!(task = %task.task_id, "duplicate task ignored");
            return;
        }
        let ctx = TaskContext {
            client_id: self.config.client_id.clone(),
            store: self.store.clone(),
            executor: self.executor.clone(),
            seed: self.config.seed,
            signal: self.config.signal,
            rate: self.config.rate,
            out: out_tx.clone(),
        };
        info!(client = %self.config.client_id, task = %task.task_id, "task handler spawned");
        let entry_id = task.task_id.clone();
        let assignment_id = task.assignment_id.clone();
        let abort = self.tasks.spawn(run_task(task, ctx));
        self.by_task.insert(
            entry_id,
            TaskEntry {
                assignment_id,
                abort,
            },
        );
        self.live.store(self.by_task.len(), Ordering::SeqCst);
    }

    fn stop_assignment(&mut self, assignment_id: &str) {
        self.by_task.retain(|task_id, e| {
            if e.assignment_id == assignment_id {
                debug!(task = %task_id, "task handler stopped");
                e.abort.abort();
                false
            } else {
                true
            }
        });
        self.live.store(self.by_task.len(), Ordering::SeqCst);
    }
}
