//! Desk-scale evaluation: hot replacement against restart-based redeployment,
//! and the inconsistent-update scenario under injected CODE_PUSH delays.

pub mod fleet;
pub mod trace;

use std::time::Duration;

use anyhow::{bail, Context};
use fleet_core::protocol::{
    AssignmentSpec, BuiltinMethod, CodeModule, DeployTarget, IterationOutput, Iterations, Method,
    Signature, StatusRecord, StatusState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;

use crate::api::DelayProfile;
use crate::frontend::{Frontend, FrontendError, HttpTransport};
pub use fleet::{Binaries, Fleet, FleetOptions, LocalFleet, ProcessFleet};
use trace::{check_trace, signature_boundary, IterationTrace, TraceCheck};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub runs_ms: Vec<f64>,
    pub mean_ms: f64,
    /// This report's mean over the baseline's, when there is one.
    pub ratio_vs_baseline: Option<f64>,
}

impl BenchReport {
    pub fn new(
        scenario: impl Into<String>,
        runs_ms: Vec<f64>,
        baseline_mean_ms: Option<f64>,
    ) -> Self {
        let mean_ms = if runs_ms.is_empty() {
            0.0
        } else {
            runs_ms.iter().sum::<f64>() / runs_ms.len() as f64
        };
        let ratio_vs_baseline = baseline_mean_ms.filter(|b| *b > 0.0).map(|b| mean_ms / b);
        Self {
            scenario: scenario.into(),
            runs_ms,
            mean_ms,
            ratio_vs_baseline,
        }
    }

    /// One human-readable row.
    pub fn table_row(&self) -> String {
        let runs: Vec<String> = self.runs_ms.iter().map(|r| format!("{r:.1}")).collect();
        let ratio = self
            .ratio_vs_baseline
            .map_or_else(|| "-".to_owned(), |r| format!("{r:.1}x"));
        format!(
            "{:<28} {:>10.2} ms  {:>8}  [{}]",
            self.scenario,
            self.mean_ms,
            ratio,
            runs.join(", ")
        )
    }
}

pub fn table(reports: &[&BenchReport]) -> String {
    let mut s = format!(
        "{:<28} {:>13}  {:>8}  runs (ms)\n",
        "scenario", "mean", "ratio"
    );
    for r in reports {
        s.push_str(&r.table_row());
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplacementReport {
    pub cloud: BenchReport,
    pub clients: BenchReport,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

async fn timed_deploy(
    fe: &Frontend<HttpTransport>,
    module: CodeModule,
    target: DeployTarget,
) -> anyhow::Result<f64> {
    let started = Instant::now();
    let status = fe
        .deploy_module(module, target, vec![])
        .await
        .context("deployment failed")?;
    let elapsed = started.elapsed();
    if status.state != StatusState::Deployed {
        bail!("deployment ended {}: {}", status.state, status.detail);
    }
    Ok(ms(elapsed))
}

/// Times deploy-to-DEPLOYED for cloud-only and client targets, `runs` each.
/// Every run deploys different code so each one is a real replacement.
pub async fn bench_replacement<F: Fleet>(
    fleet: &F,
    runs: usize,
    user_id: &str,
) -> anyhow::Result<ReplacementReport> {
    let fe = fleet.frontend();
    // first request opens the HTTP connection; keep it out of the numbers
    timed_deploy(
        &fe,
        CodeModule::new(user_id, "bench_hot", "mean(xs)"),
        DeployTarget::Cloud,
    )
    .await?;
    let mut cloud = Vec::with_capacity(runs);
    let mut clients = Vec::with_capacity(runs);
    for run in 0..runs {
        let code = format!("mean(xs) + {run} * 0");
        cloud.push(
            timed_deploy(
                &fe,
                CodeModule::new(user_id, "bench_hot", &code),
                DeployTarget::Cloud,
            )
            .await?,
        );
        clients.push(
            timed_deploy(
                &fe,
                CodeModule::new(user_id, "bench_hot", &code),
                DeployTarget::Clients,
            )
            .await?,
        );
    }
    Ok(ReplacementReport {
        cloud: BenchReport::new("hot_replacement_cloud", cloud, None),
        clients: BenchReport::new("hot_replacement_clients", clients, None),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RedeployReport {
    pub report: BenchReport,
    /// A module deployed before the first restart still runs on the cloud
    /// and on every client after it.
    pub store_persisted: bool,
    /// An assignment running before the first restart is still known after it.
    pub assignment_survived: bool,
}

/// Restart-based redeployment: stop every node, relaunch it, wait for the
/// gateway and all registrations. `hot_mean_ms` is the baseline for the ratio.
pub async fn bench_redeploy<F: Fleet>(
    fleet: &mut F,
    runs: usize,
    hot_mean_ms: Option<f64>,
    user_id: &str,
) -> anyhow::Result<RedeployReport> {
    let n_clients = fleet.client_ids().len() as u64;
    let fe = fleet.frontend();
    let persisted = CodeModule::new(user_id, "bench_persist", "max(xs)");
    fe.deploy_module(persisted.clone(), DeployTarget::Both, vec![])
        .await?;
    let running = fe
        .submit_spec(AssignmentSpec {
            assignment_id: String::new(),
            user_id: user_id.into(),
            method: Method::Builtin(BuiltinMethod::Mean),
            custom_module: None,
            offboard_module: None,
            target_clients: vec![],
            iterations: Iterations::Indefinite,
            window_size: 10,
            params: Default::default(),
        })
        .await?;
    let mut runs_ms = Vec::with_capacity(runs);
    let mut store_persisted = false;
    let mut assignment_survived = true;
    for run in 0..runs {
        let started = Instant::now();
        fleet
            .restart()
            .await
            .with_context(|| format!("restart {run}"))?;
        runs_ms.push(ms(started.elapsed()));
        if run == 0 {
            let fe = fleet.frontend();
            assignment_survived = match fe.assignment(&running).await {
                Err(FrontendError::Remote(e)) if e.error == "not_found" => false,
                Err(e) => return Err(e.into()),
                Ok(_) => true,
            };
            let spec = AssignmentSpec {
                assignment_id: String::new(),
                user_id: user_id.into(),
                method: Method::Custom,
                custom_module: Some(persisted.name.clone()),
                offboard_module: Some(persisted.name.clone()),
                target_clients: vec![],
                iterations: Iterations::Finite(1),
                window_size: 5,
                params: Default::default(),
            };
            let (outputs, status) = run_assignment(&fe, spec).await?;
            store_persisted = status.state == StatusState::Completed
                && outputs.len() == 1
                && outputs[0].accepted_signature.as_ref() == Some(&persisted.signature)
                && outputs[0].accepted_count == n_clients
                && outputs[0].cloud_signature.as_ref() == Some(&persisted.signature);
        }
    }
    Ok(RedeployReport {
        report: BenchReport::new("restart_redeploy", runs_ms, hot_mean_ms),
        store_persisted,
        assignment_survived,
    })
}

/// Submits `spec` and collects its outputs until the terminal status.
pub async fn run_assignment(
    fe: &Frontend<HttpTransport>,
    spec: AssignmentSpec,
) -> anyhow::Result<(Vec<IterationOutput>, StatusRecord)> {
    let id = fe.submit_spec(spec).await?;
    let mut outputs = Vec::new();
    let status = fe.watch(&id, |o| outputs.push(o.clone())).await?;
    Ok((outputs, status))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioConfig {
    pub user_id: String,
    pub module: String,
    pub v1_code: String,
    pub v2_code: String,
    pub iterations: u64,
    pub window_size: u64,
    /// v2 is deployed half an iteration after this iteration's output arrives.
    pub switch_after: u64,
    pub delays: DelayProfile,
}

impl ScenarioConfig {
    pub fn new(user_id: &str, delays: DelayProfile) -> Self {
        Self {
            user_id: user_id.into(),
            module: "agg".into(),
            v1_code: "mean(xs)".into(),
            v2_code: "max(xs)".into(),
            iterations: 20,
            window_size: 20,
            switch_after: 7,
            delays,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub v1: Signature,
    pub v2: Signature,
    pub deployment: Option<StatusRecord>,
    pub final_state: StatusState,
    pub iterations: Vec<IterationTrace>,
    /// First iteration in which any client reported v2.
    pub transition: Option<IterationTrace>,
    /// Where accepted signatures flip from v1 to v2, when they flip cleanly.
    pub boundary: Option<u64>,
    pub check: TraceCheck,
    pub discarded_total: u64,
}

/// Runs a CUSTOM assignment on v1, deploys v2 mid-run with `config.delays`
/// applied to its CODE_PUSH messages, and checks the whole trace.
pub async fn scenario_inconsistent_update<F: Fleet>(
    fleet: &F,
    config: &ScenarioConfig,
) -> anyhow::Result<TransitionReport> {
    let fe = fleet.frontend();
    let v1 = CodeModule::new(&config.user_id, &config.module, &config.v1_code);
    let v2 = CodeModule::new(&config.user_id, &config.module, &config.v2_code);
    fe.deploy_module(v1.clone(), DeployTarget::Clients, vec![])
        .await?;
    let iteration_time = Duration::from_secs_f64(config.window_size as f64 / fleet.options().rate);
    let spec = AssignmentSpec {
        assignment_id: String::new(),
        user_id: config.user_id.clone(),
        method: Method::Custom,
        custom_module: Some(config.module.clone()),
        offboard_module: None,
        target_clients: vec![],
        iterations: Iterations::Finite(config.iterations),
        window_size: config.window_size,
        params: Default::default(),
    };
    let id = fe.submit_spec(spec).await?;
    let mut outputs = Vec::new();
    let mut deploy = None;
    let status = fe
        .watch(&id, |o| {
            outputs.push(o.clone());
            if o.iteration == config.switch_after && deploy.is_none() {
                let fe = fleet.frontend();
                let module = v2.clone();
                let delays = config.delays.clone();
                deploy = Some(tokio::spawn(async move {
                    fe.transport().set_delays(&delays).await?;
                    tokio::time::sleep(iteration_time / 2).await;
                    let res = fe
                        .deploy_module(module, DeployTarget::Clients, vec![])
                        .await;
                    fe.transport().set_delays(&DelayProfile::default()).await?;
                    res
                }));
            }
        })
        .await?;
    let deployment = match deploy {
        Some(h) => Some(h.await.context("deploy task")??),
        None => None,
    };
    let check = check_trace(&outputs, &[v1.signature.clone(), v2.signature.clone()]);
    let iterations: Vec<IterationTrace> = outputs.iter().map(IterationTrace::of).collect();
    let transition = iterations
        .iter()
        .find(|t| t.groups.contains_key(&v2.signature))
        .cloned();
    Ok(TransitionReport {
        boundary: signature_boundary(&outputs, &v1.signature, &v2.signature),
        discarded_total: outputs.iter().map(|o| o.discarded_count).sum(),
        v1: v1.signature,
        v2: v2.signature,
        deployment,
        final_state: status.state,
        iterations,
        transition,
        check,
    })
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub profiles: usize,
    pub outputs: usize,
    /// Outputs whose accepted results mixed signatures.
    pub mixed_outputs: usize,
    /// Outputs whose decision disagreed with the oracle or whose counts were off.
    pub inconsistent_outputs: usize,
    pub discarded_results: u64,
    /// Runs that did not complete, with the reason.
    pub failures: Vec<String>,
}

/// Random CODE_PUSH delay profiles, each against a fresh user on one of
/// `parallel` fleets. Delays range over zero to three iterations.
pub async fn sweep_inconsistent(
    profiles: usize,
    parallel: usize,
    options: FleetOptions,
    iterations: u64,
    window_size: u64,
    seed: u64,
) -> anyhow::Result<SweepReport> {
    let parallel = parallel.max(1);
    let iteration_ms = (window_size as f64 * 1e3 / options.rate) as u64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut plans: Vec<Vec<ScenarioConfig>> = vec![Vec::new(); parallel];
    for k in 0..profiles {
        let delays = DelayProfile {
            code_push_delay_ms: options
                .client_ids()
                .into_iter()
                .map(|c| (c, rng.random_range(0..=3 * iteration_ms)))
                .collect(),
        };
        let mut cfg = ScenarioConfig::new(&format!("sweep{k}"), delays);
        cfg.iterations = iterations;
        cfg.window_size = window_size;
        cfg.switch_after = rng.random_range(0..iterations.saturating_sub(4).max(1));
        plans[k % parallel].push(cfg);
    }
    let mut workers = Vec::new();
    for plan in plans {
        let options = options.clone();
        workers.push(tokio::spawn(async move {
            let fleet = LocalFleet::start(options).await?;
            let mut reports = Vec::new();
            for cfg in plan {
                reports.push((
                    cfg.user_id.clone(),
                    scenario_inconsistent_update(&fleet, &cfg).await,
                ));
            }
            anyhow::Ok(reports)
        }));
    }
    let mut sweep = SweepReport {
        profiles,
        ..Default::default()
    };
    for w in workers {
        for (user, res) in w.await.context("sweep worker")?? {
            match res {
                Ok(r) => {
                    sweep.outputs += r.iterations.len();
                    sweep.mixed_outputs += r.check.mixed.len();
                    sweep.inconsistent_outputs +=
                        r.check.miscounted.len() + r.check.oracle_mismatch.len();
                    sweep.discarded_results += r.discarded_total;
                    if r.final_state != StatusState::Completed || !r.check.gaps.is_empty() {
                        sweep.failures.push(format!(
                            "{user}: {} with gaps {:?}",
                            r.final_state, r.check.gaps
                        ));
                    }
                }
                Err(e) => sweep.failures.push(format!("{user}: {e:#}")),
            }
        }
    }
    Ok(sweep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_mean_and_ratio() {
        let r = BenchReport::new("x", vec![1.0, 2.0, 6.0], Some(0.5));
        assert_eq!(r.mean_ms, 3.0);
        assert_eq!(r.ratio_vs_baseline, Some(6.0));
        assert!(BenchReport::new("y", vec![], None)
            .ratio_vs_baseline
            .is_none());
    }
}
