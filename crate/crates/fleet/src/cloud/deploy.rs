//! Ephemeral deployment handler: pushes one module to its target clients and
//! waits for their acknowledgements.

use std::collections::{BTreeMap, BTreeSet};
use std::time::Duration;

use fleet_core::protocol::{CodeAck, CodeModule, CodePush, Payload, StatusRecord, StatusState};
use tokio::sync::mpsc;
use tokio::time::Instant;
use tracing::{debug, warn};

pub(crate) enum DeployMsg {
    Ack(CodeAck),
    Rejected { client_id: String, reason: String },
}

pub(crate) struct PushTarget {
    pub client_id: String,
    pub outbound: mpsc::UnboundedSender<Payload>,
    /// Injected delivery delay.
    pub delay: Duration,
}

/// Sends CODE_PUSH to every target and returns the deployment's terminal
/// status: DEPLOYED once all targets acknowledged the module's signature,
/// FAILED when any target rejected it or stayed silent past `ack_timeout`.
pub(crate) async fn run_deployment(
    deployment_id: String,
    module: CodeModule,
    targets: Vec<PushTarget>,
    ack_timeout: Duration,
    mut rx: mpsc::UnboundedReceiver<DeployMsg>,
) -> StatusRecord {
    let mut pending: BTreeSet<String> = targets.iter().map(|t| t.client_id.clone()).collect();
    let total = pending.len();
    let deadline = Instant::now() + ack_timeout;
    for target in targets {
        let push = Payload::CodePush(CodePush {
            deployment_id: deployment_id.clone(),
            module: module.clone(),
        });
        if target.delay.is_zero() {
            let _ = target.outbound.send(push);
        } else {
            tokio::spawn(async move {
                tokio::time::sleep(target.delay).await;
                let _ = target.outbound.send(push);
            });
        }
    }
    let mut rejected: BTreeMap<String, String> = BTreeMap::new();
    while !pending.is_empty() {
        let msg = tokio::select! {
            m = rx.recv() => m,
            _ = tokio::time::sleep_until(deadline) => None,
        };
        let Some(msg) = msg else { break };
        match msg {
            DeployMsg::Ack(ack) => {
                if !pending.remove(&ack.client_id) {
                    debug!(deployment = %deployment_id, client = %ack.client_id, "stray ack");
                    continue;
                }
                if ack.signature != module.signature {
                    rejected.insert(
                        ack.client_id,
                        format!("acknowledged signature {}", ack.signature.short()),
                    );
                }
            }
            DeployMsg::Rejected { client_id, reason } => {
                if pending.remove(&client_id) {
                    rejected.insert(client_id, reason);
                }
            }
        }
    }
    if pending.is_empty() && rejected.is_empty() {
        return StatusRecord::deployment(
            &deployment_id,
            StatusState::Deployed,
            format!(
                "{}/{} signature {} on {total} client(s)",
                module.user_id, module.name, module.signature
            ),
        );
    }
    let mut parts = Vec::new();
    if !pending.is_empty() {
        parts.push(format!(
            "unacknowledged: {}",
            pending.iter().cloned().collect::<Vec<_>>().join(", ")
        ));
    }
    if !rejected.is_empty() {
        let r: Vec<String> = rejected
            .iter()
            .map(|(c, why)| format!("{c} ({why})"))
            .collect();
        parts.push(format!("rejected: {}", r.join(", ")));
    }
    warn!(deployment = %deployment_id, "deployment failed: {}", parts.join("; "));
    StatusRecord::deployment(&deployment_id, StatusState::Failed, parts.join("; "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn target(id: &str, delay_ms: u64) -> (PushTarget, mpsc::UnboundedReceiver<Payload>) {
        let (tx, rx) = mpsc::unbounded_channel();
        (
            PushTarget {
                client_id: id.into(),
                outbound: tx,
                delay: Duration::from_millis(delay_ms),
            },
            rx,
        )
    }

    fn ack(module: &CodeModule, client: &str) -> DeployMsg {
        DeployMsg::Ack(CodeAck {
            deployment_id: "d".into(),
            client_id: client.into(),
            user_id: module.user_id.clone(),
            name: module.name.clone(),
            signature: module.signature.clone(),
        })
    }

    #[tokio::test]
    async fn all_acks_deploy() {
        let module = CodeModule::new("u", "agg", "mean(xs)");
        let (tx, rx) = mpsc::unbounded_channel();
        let (a, mut ra) = target("a", 0);
        let (b, mut rb) = target("b", 20);
        let task = tokio::spawn(run_deployment(
            "d".into(),
            module.clone(),
            vec![a, b],
            Duration::from_secs(5),
            rx,
        ));
        assert!(matches!(ra.recv().await, Some(Payload::CodePush(p)) if p.module == module));
        assert!(matches!(rb.recv().await, Some(Payload::CodePush(_))));
        tx.send(ack(&module, "a")).unwrap();
        tx.send(ack(&module, "b")).unwrap();
        let status = task.await.unwrap();
        assert_eq!(status.state, StatusState::Deployed);
    }

    #[tokio::test]
    async fn silent_client_fails_after_timeout() {
        let module = CodeModule::new("u", "agg", "mean(xs)");
        let (tx, rx) = mpsc::unbounded_channel();
        let (a, _ra) = target("a", 0);
        let (b, _rb) = target("b", 0);
        let task = tokio::spawn(run_deployment(
            "d".into(),
            module.clone(),
            vec![a, b],
            Duration::from_millis(100),
            rx,
        ));
        tx.send(ack(&module, "a")).unwrap();
        let status = task.await.unwrap();
        assert_eq!(status.state, StatusState::Failed);
        assert_eq!(status.detail, "unacknowledged: b");
    }

    #[tokio::test]
    async fn rejection_fails() {
        let module = CodeModule::new("u", "agg", "mean(xs)");
        let (tx, rx) = mpsc::unbounded_channel();
        let (a, _ra) = target("a", 0);
        let task = tokio::spawn(run_deployment(
            "d".into(),
            module,
            vec![a],
            Duration::from_secs(5),
            rx,
        ));
        tx.send(DeployMsg::Rejected {
            client_id: "a".into(),
            reason: "signature mismatch".into(),
        })
        .unwrap();
        let status = task.await.unwrap();
        assert_eq!(status.state, StatusState::Failed);
        assert!(status.detail.contains("a (signature mismatch)"));
    }
}
