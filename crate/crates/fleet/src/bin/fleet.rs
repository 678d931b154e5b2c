//! Analyst command line.
//!
//! Exit codes: 0 ok, 1 validation or remote failure, 2 I/O, 3 network.

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fleet::frontend::{Frontend, FrontendError, HttpTransport};
use fleet_core::protocol::DeployTarget;

#[derive(Parser)]
#[command(about = "Validate, deploy, submit and watch fleet assignments")]
struct Cli {
    /// host:port of the cloud gateway
    #[arg(
        long,
        global = true,
        env = "FLEET_GATEWAY",
        default_value = "127.0.0.1:9200"
    )]
    gateway: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check an assignment file and its code without contacting the cloud.
    Validate {
        file: PathBuf,
    },
    /// Deploy referenced code, then submit the assignment; prints its id.
    Submit {
        file: PathBuf,
    },
    /// Deploy a code file as a named module.
    Deploy {
        code: PathBuf,
        #[arg(long)]
        name: String,
        #[arg(long, env = "FLEET_USER")]
        user: String,
        /// CLOUD, CLIENTS or BOTH
        #[arg(long, default_value = "BOTH")]
        target: DeployTarget,
        /// Target clients; all connected clients when omitted.
        #[arg(long = "client")]
        clients: Vec<String>,
    },
    /// Print outputs of an assignment until it finishes.
    Watch {
        assignment_id: String,
    },
    Cancel {
        assignment_id: String,
    },
    /// Print the fleet registry.
    Clients,
}

#[tokio::main]
async fn main() -> ExitCode {
    let cli = Cli::parse();
    let fe = Frontend::new(HttpTransport::new(cli.gateway));
    let mut out = std::io::stdout();
    let result: Result<(), FrontendError> = match cli.command {
        Command::Validate { file } => fe.cmd_validate(&file, &mut out).map(drop),
        Command::Submit { file } => fe.cmd_submit(&file, &mut out).await.map(drop),
        Command::Deploy {
            code,
            name,
            user,
            target,
            clients,
        } => fe
            .cmd_deploy(&code, &user, &name, target, clients, &mut out)
            .await
            .map(drop),
        Command::Watch { assignment_id } => fe.cmd_watch(&assignment_id, &mut out).await.map(drop),
        Command::Cancel { assignment_id } => {
            fe.cmd_cancel(&assignment_id, &mut out).await.map(drop)
        }
        Command::Clients => fe.cmd_clients(&mut out).await.map(drop),
    };
    let _ = out.flush();
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
