//! Desk-scale benchmarks.
//!
//! `bench replacement` times hot module replacement against a full
//! stop-and-relaunch of the fleet. `bench inconsistent` runs the delayed
//! CODE_PUSH scenario once, and optionally a sweep of random delay profiles.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use fleet::api::DelayProfile;
use fleet::harness::{
    self, bench_redeploy, bench_replacement, scenario_inconsistent_update, sweep_inconsistent,
    Binaries, Fleet, FleetOptions, LocalFleet, ProcessFleet, ScenarioConfig,
};
use serde_json::json;

#[derive(Parser)]
#[command(about = "Benchmarks and scenarios against a desk-scale fleet")]
struct Cli {
    #[command(flatten)]
    fleet: FleetArgs,
    /// Write the JSON report here as well as to stdout.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct FleetArgs {
    #[arg(long, global = true, default_value_t = 5)]
    clients: usize,
    /// Telemetry values per second per client.
    #[arg(long, global = true, default_value_t = 100.0)]
    rate: f64,
    /// Run the nodes as tasks in this process instead of OS processes.
    #[arg(long, global = true)]
    local: bool,
    /// Cloud executable; defaults to `cloud` next to this binary.
    #[arg(long, global = true)]
    cloud_bin: Option<PathBuf>,
    /// Client executable; defaults to `client` next to this binary.
    #[arg(long, global = true)]
    client_bin: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Hot replacement (cloud and client targets) against restart-based redeployment.
    Replacement {
        #[arg(long, default_value_t = 10)]
        runs: usize,
    },
    /// Deploy v2 mid-assignment with some clients' CODE_PUSH delayed.
    Inconsistent {
        /// How many clients get their CODE_PUSH one iteration late.
        #[arg(long, default_value_t = 2)]
        delayed: usize,
        #[arg(long, default_value_t = 20)]
        iterations: u64,
        #[arg(long, default_value_t = 20)]
        window: u64,
        /// Also run this many random delay profiles on in-process fleets.
        #[arg(long, default_value_t = 0)]
        sweep: usize,
        #[arg(long, default_value_t = 4)]
        parallel: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
}

impl FleetArgs {
    fn options(&self) -> FleetOptions {
        FleetOptions {
            clients: self.clients,
            rate: self.rate,
            ..FleetOptions::default()
        }
    }

    fn binaries(&self) -> anyhow::Result<Binaries> {
        let mut b = Binaries::beside_current_exe()?;
        if let Some(c) = &self.cloud_bin {
            b.cloud = c.clone();
        }
        if let Some(c) = &self.client_bin {
            b.client = c.clone();
        }
        Ok(b)
    }
}

async fn replacement<F: Fleet>(fleet: &mut F, runs: usize) -> anyhow::Result<serde_json::Value> {
    let hot = bench_replacement(fleet, runs, "bench").await?;
    let redeploy = bench_redeploy(fleet, runs, Some(hot.clients.mean_ms), "bench").await?;
    eprint!(
        "{}",
        harness::table(&[&hot.cloud, &hot.clients, &redeploy.report])
    );
    eprintln!(
        "store persisted across restart: {}; running assignment survived restart: {}",
        redeploy.store_persisted, redeploy.assignment_survived
    );
    Ok(json!({ "hot": hot, "redeploy": redeploy }))
}

async fn run(cli: Cli) -> anyhow::Result<serde_json::Value> {
    let options = cli.fleet.options();
    match cli.command {
        Command::Replacement { runs } => {
            if cli.fleet.local {
                replacement(&mut LocalFleet::start(options).await?, runs).await
            } else {
                replacement(
                    &mut ProcessFleet::start(options, cli.fleet.binaries()?).await?,
                    runs,
                )
                .await
            }
        }
        Command::Inconsistent {
            delayed,
            iterations,
            window,
            sweep,
            parallel,
            seed,
        } => {
            let iteration_ms = (window as f64 * 1e3 / options.rate) as u64;
            let delays = DelayProfile {
                code_push_delay_ms: options
                    .client_ids()
                    .into_iter()
                    .take(delayed)
                    .map(|c| (c, iteration_ms))
                    .collect(),
            };
            let mut config = ScenarioConfig::new("bench", delays);
            config.iterations = iterations;
            config.window_size = window;
            config.switch_after = iterations / 3;
            let report = if cli.fleet.local {
                scenario_inconsistent_update(&LocalFleet::start(options.clone()).await?, &config)
                    .await?
            } else {
                let fleet = ProcessFleet::start(options.clone(), cli.fleet.binaries()?).await?;
                scenario_inconsistent_update(&fleet, &config).await?
            };
            for t in &report.iterations {
                let groups: Vec<String> = t
                    .groups
                    .iter()
                    .map(|(s, n)| format!("{}x{n}", s.short()))
                    .collect();
                eprintln!(
                    "iteration={} groups=[{}] accepted={} discarded={}",
                    t.iteration,
                    groups.join(" "),
                    t.accepted_signature.as_ref().map_or("-", |s| s.short()),
                    t.discarded_count
                );
            }
            eprintln!("trace clean: {}", report.check.is_clean());
            let sweep = if sweep > 0 {
                let s =
                    sweep_inconsistent(sweep, parallel, options, iterations, window, seed).await?;
                eprintln!(
                    "sweep: {} profiles, {} outputs, {} mixed, {} inconsistent, {} failures",
                    s.profiles,
                    s.outputs,
                    s.mixed_outputs,
                    s.inconsistent_outputs,
                    s.failures.len()
                );
                Some(s)
            } else {
                None
            };
            Ok(json!({ "scenario": report, "sweep": sweep }))
        }
    }
}

#[tokio::main]
async fn main() -> ExitCode {
    fleet::init_logging();
    let cli = Cli::parse();
    let out = cli.out.clone();
    let report = match run(cli).await {
        Ok(r) => r,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    };
    let text = serde_json::to_string_pretty(&report).expect("report serializes");
    println!("{text}");
    if let Some(path) = out {
        if let Err(e) =
            std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))
        {
            eprintln!("error: {e:#}");
            return ExitCode::FAILURE;
        }
    }
    ExitCode::SUCCESS
}
