//! The analyst's front-end: local checks, then gateway calls.
//!
//! Everything that can be checked locally is checked before the transport
//! is touched, so a rejected input never produces network traffic.

mod transport;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use fleet_core::executor::validate_code;
use fleet_core::protocol::{
    AssignmentSpec, CodeDeploymentSpec, CodeModule, DeployTarget, FieldError, IterationOutput,
    Iterations, Method, Payload, StatusRecord, StatusState,
};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use transport::{CapturingTransport, EnvelopeStream, HttpTransport, Reply, Request, Transport};

use crate::api::{ApiError, AssignmentView, ClientInfo};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FrontendError {
    /// Problems found locally, one line each.
    #[error("{}", .0.join("\n"))]
    Validation(Vec<String>),
    #[error("{}", describe_remote(.0))]
    Remote(ApiError),
    /// The remote side answered with a failed status.
    #[error("{0}")]
    Failed(String),
    #[error("{0}")]
    Io(String),
    #[error("network error: {0}")]
    Network(String),
}

fn describe_remote(e: &ApiError) -> String {
    let mut lines = vec![format!("{}: {}", e.error, e.message)];
    lines.extend(
        e.fields
            .iter()
            .map(|f| format!("  {}: {}", f.field, f.message)),
    );
    lines.extend(e.diagnostics.iter().map(|d| format!("  {d}")));
    lines.join("\n")
}

impl FrontendError {
    /// 0 ok, 1 validation or remote failure, 2 I/O, 3 network.
    pub fn exit_code(&self) -> i32 {
        match self {
            FrontendError::Validation(_) | FrontendError::Remote(_) | FrontendError::Failed(_) => 1,
            FrontendError::Io(_) => 2,
            FrontendError::Network(_) => 3,
        }
    }
}

/// An assignment as written by the analyst.
///
/// Besides the assignment fields it may reference code files: `code_file`
/// is deployed to the targeted clients as `custom_module`, and
/// `offboard_code_file` to the cloud as `offboard_module`, before the
/// assignment is submitted. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentFile {
    #[serde(default)]
    pub assignment_id: String,
    pub user_id: String,
    pub method: Method,
    #[serde(default)]
    pub custom_module: Option<String>,
    #[serde(default)]
    pub offboard_module: Option<String>,
    #[serde(default)]
    pub target_clients: Vec<String>,
    pub iterations: Iterations,
    pub window_size: u64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
    #[serde(default)]
    pub code_file: Option<PathBuf>,
    #[serde(default)]
    pub offboard_code_file: Option<PathBuf>,
}

impl AssignmentFile {
    pub fn spec(&self) -> AssignmentSpec {
        AssignmentSpec {
            assignment_id: self.assignment_id.clone(),
            user_id: self.user_id.clone(),
            method: self.method,
            custom_module: self.custom_module.clone(),
            offboard_module: self.offboard_module.clone(),
            target_clients: self.target_clients.clone(),
            iterations: self.iterations,
            window_size: self.window_size,
            params: self.params.clone(),
        }
    }
}

/// A validated assignment file with its code loaded.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckedAssignment {
    pub spec: AssignmentSpec,
    /// Module for the clients, when the file carries one.
    pub onboard: Option<CodeModule>,
    /// Module for the cloud, when the file carries one.
    pub offboard: Option<CodeModule>,
}

fn read_text(path: &Path) -> Result<String, FrontendError> {
    std::fs::read(path)
        .map_err(|e| FrontendError::Io(format!("{}: {e}", path.display())))
        .and_then(|b| {
            String::from_utf8(b).map_err(|_| {
                FrontendError::Validation(vec![format!("{}: not UTF-8", path.display())])
            })
        })
}

fn code_diagnostics(label: &str, code: &str) -> Vec<String> {
    match validate_code(code) {
        Ok(()) => vec![],
        Err(diags) => diags.iter().map(|d| format!("{label}:{d}")).collect(),
    }
}

fn field_lines(errors: &[FieldError]) -> Vec<String> {
    errors
        .iter()
        .map(|f| format!("{}: {}", f.field, f.message))
        .collect()
}

/// Parses and checks an assignment file without any network I/O.
pub fn check_assignment_file(path: &Path) -> Result<CheckedAssignment, FrontendError> {
    let text = read_text(path)?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    let file: AssignmentFile = serde_path_to_error::deserialize(de).map_err(|e| {
        let field = e.path().to_string();
        FrontendError::Validation(vec![format!("{field}: {}", e.inner())])
    })?;
    let spec = file.spec();
    let mut problems = field_lines(&spec.validate());
    let base = path.parent().unwrap_or(Path::new("."));
    let mut load = |file_ref: &Option<PathBuf>,
                    module: &Option<String>,
                    key: &str|
     -> Result<_, FrontendError> {
        let Some(rel) = file_ref else { return Ok(None) };
        let Some(name) = module else {
            problems.push(format!("{key}: needs the matching module name"));
            return Ok(None);
        };
        let full = base.join(rel);
        let code = read_text(&full)?;
        problems.extend(code_diagnostics(&full.display().to_string(), &code));
        Ok(Some(CodeModule::new(&spec.user_id, name, &code)))
    };
    let onboard = load(&file.code_file, &file.custom_module, "code_file")?;
    let offboard = load(
        &file.offboard_code_file,
        &file.offboard_module,
        "offboard_code_file",
    )?;
    if file.code_file.is_some() && spec.method != Method::Custom {
        problems.push("code_file: only meaningful with method CUSTOM".into());
    }
    for m in onboard.iter().chain(offboard.iter()) {
        problems.extend(field_lines(&m.validate()));
    }
    if !problems.is_empty() {
        return Err(FrontendError::Validation(problems));
    }
    Ok(CheckedAssignment {
        spec,
        onboard,
        offboard,
    })
}

pub fn format_output(o: &IterationOutput) -> String {
    let value = o.value.map_or_else(|| "-".to_owned(), |v| v.to_string());
    let sig = o.accepted_signature.as_ref().map_or("-", |s| s.as_str());
    format!(
        "iteration={} value={value} accepted_signature={sig} discarded_count={}",
        o.iteration, o.discarded_count
    )
}

pub struct Frontend<T> {
    transport: T,
}

impl<T: Transport> Frontend<T> {
    pub fn new(transport: T) -> Self {
        Self { transport }
    }

    pub fn transport(&self) -> &T {
        &self.transport
    }

    /// Prints every problem with the file and its code. No network I/O.
    pub fn cmd_validate(
        &self,
        path: &Path,
        out: &mut (dyn Write + Send),
    ) -> Result<CheckedAssignment, FrontendError> {
        let checked = check_assignment_file(path)?;
        let _ = writeln!(out, "ok: {}", path.display());
        for m in checked.onboard.iter().chain(checked.offboard.iter()) {
            let _ = writeln!(
                out,
                "module {}/{} signature={}",
                m.user_id, m.name, m.signature
            );
        }
        Ok(checked)
    }

    /// Validates locally, then deploys and waits for DEPLOYED or FAILED.
    pub async fn deploy_module(
        &self,
        module: CodeModule,
        target: DeployTarget,
        clients: Vec<String>,
    ) -> Result<StatusRecord, FrontendError> {
        let mut problems = code_diagnostics(&module.name, &module.code);
        problems.extend(field_lines(&module.validate()));
        if !problems.is_empty() {
            return Err(FrontendError::Validation(problems));
        }
        let spec = CodeDeploymentSpec {
            deployment_id: String::new(),
            user_id: module.user_id.clone(),
            target,
            target_clients: clients,
            module,
        };
        if let Some(f) = spec.validate().first() {
            return Err(FrontendError::Validation(vec![format!(
                "{}: {}",
                f.field, f.message
            )]));
        }
        match self.transport.call(Request::Deploy(spec)).await? {
            Reply::Status(s) if s.state == StatusState::Failed => {
                Err(FrontendError::Failed(format!("FAILED {}", s.detail)))
            }
            Reply::Status(s) => Ok(s),
            other => Err(unexpected(other)),
        }
    }

    pub async fn cmd_deploy(
        &self,
        code_path: &Path,
        user_id: &str,
        name: &str,
        target: DeployTarget,
        clients: Vec<String>,
        out: &mut (dyn Write + Send),
    ) -> Result<StatusRecord, FrontendError> {
        let code = read_text(code_path)?;
        let problems = code_diagnostics(&code_path.display().to_string(), &code);
        if !problems.is_empty() {
            return Err(FrontendError::Validation(problems));
        }
        let module = CodeModule::new(user_id, name, &code);
        let signature = module.signature.clone();
        let status = self.deploy_module(module, target, clients).await?;
        let _ = writeln!(
            out,
            "{} signature={signature} {}",
            status.state, status.detail
        );
        Ok(status)
    }

    /// Deploys the file's code, if any, then submits the assignment.
    pub async fn cmd_submit(
        &self,
        path: &Path,
        out: &mut (dyn Write + Send),
    ) -> Result<String, FrontendError> {
        let checked = check_assignment_file(path)?;
        if let Some(m) = checked.onboard {
            let targets = checked.spec.target_clients.clone();
            let s = self
                .deploy_module(m.clone(), DeployTarget::Clients, targets)
                .await?;
            let _ = writeln!(out, "{} {} signature={}", s.state, m.name, m.signature);
        }
        if let Some(m) = checked.offboard {
            let s = self
                .deploy_module(m.clone(), DeployTarget::Cloud, vec![])
                .await?;
            let _ = writeln!(out, "{} {} signature={}", s.state, m.name, m.signature);
        }
        let id = self.submit_spec(checked.spec).await?;
        let _ = writeln!(out, "{id}");
        Ok(id)
    }

    pub async fn submit_spec(&self, spec: AssignmentSpec) -> Result<String, FrontendError> {
        let problems = field_lines(&spec.validate());
        if !problems.is_empty() {
            return Err(FrontendError::Validation(problems));
        }
        match self.transport.call(Request::Submit(spec)).await? {
            Reply::Submitted(r) => Ok(r.assignment_id),
            other => Err(unexpected(other)),
        }
    }

    /// Streams outputs until the terminal status, which is returned.
    pub async fn watch(
        &self,
        assignment_id: &str,
        mut on_output: impl FnMut(&IterationOutput),
    ) -> Result<StatusRecord, FrontendError> {
        let view = match self
            .transport
            .call(Request::Assignment(assignment_id.to_owned()))
            .await?
        {
            Reply::Assignment(v) => v,
            other => return Err(unexpected(other)),
        };
        let mut stream = self
            .transport
            .stream(&view.spec.user_id, assignment_id)
            .await?;
        while let Some(item) = stream.next().await {
            match item?.payload {
                Payload::IterationOutput(o) => on_output(&o),
                Payload::AssignmentStatus(s) if s.state.is_terminal() => return Ok(s),
                _ => {}
            }
        }
        Err(FrontendError::Network(
            "stream closed before the assignment finished".into(),
        ))
    }

    pub async fn cmd_watch(
        &self,
        assignment_id: &str,
        out: &mut (dyn Write + Send),
    ) -> Result<StatusRecord, FrontendError> {
        let status = self
            .watch(assignment_id, |o| {
                let _ = writeln!(out, "{}", format_output(o));
                let _ = out.flush();
            })
            .await?;
        let _ = writeln!(out, "{}", status.state);
        if status.state == StatusState::Failed {
            return Err(FrontendError::Failed(status.detail));
        }
        Ok(status)
    }

    pub async fn cmd_cancel(
        &self,
        assignment_id: &str,
        out: &mut (dyn Write + Send),
    ) -> Result<StatusRecord, FrontendError> {
        match self
            .transport
            .call(Request::Cancel(assignment_id.to_owned()))
            .await?
        {
            Reply::Status(s) => {
                let _ = writeln!(out, "{} {}", s.state, s.subject_id());
                Ok(s)
            }
            other => Err(unexpected(other)),
        }
    }

    pub async fn assignment(&self, assignment_id: &str) -> Result<AssignmentView, FrontendError> {
        match self
            .transport
            .call(Request::Assignment(assignment_id.to_owned()))
            .await?
        {
            Reply::Assignment(a) => Ok(a),
            other => Err(unexpected(other)),
        }
    }

    pub async fn clients(&self) -> Result<Vec<ClientInfo>, FrontendError> {
        match self.transport.call(Request::Clients).await? {
            Reply::Clients(c) => Ok(c),
            other => Err(unexpected(other)),
        }
    }

    pub async fn cmd_clients(
        &self,
        out: &mut (dyn Write + Send),
    ) -> Result<Vec<ClientInfo>, FrontendError> {
        let clients = self.clients().await?;
        let _ = writeln!(
            out,
            "{:<24} {:<22} {:<10} last_heartbeat",
            "client_id", "address", "state"
        );
        for c in &clients {
            let state = if c.connected { "connected" } else { "lost" };
            let _ = writeln!(
                out,
                "{:<24} {:<22} {:<10} {}",
                c.client_id, c.address, state, c.last_heartbeat
            );
        }
        Ok(clients)
    }
}

fn unexpected(reply: Reply) -> FrontendError {
    FrontendError::Network(format!("unexpected reply {reply:?}"))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn field_paths_are_reported() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(
            dir.path(),
            "a.json",
            r#"{"user_id":"u","method":"mean","iterations":"x","window_size":1}"#,
        );
        let err = check_assignment_file(&p).unwrap_err();
        assert!(err.to_string().starts_with("iterations:"), "{err}");
        let p = write(
            dir.path(),
            "b.json",
            r#"{"user_id":"u","method":"mean","iterations":3,"window_size":0}"#,
        );
        let err = check_assignment_file(&p).unwrap_err();
        assert_eq!(err.to_string(), "window_size: window_size must be ≥ 1");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn code_files_resolve_relative_to_the_assignment() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "agg.expr", "mean(xs)\r\n");
        let p = write(
            dir.path(),
            "a.json",
            r#"{"user_id":"u","method":"CUSTOM","custom_module":"agg","code_file":"agg.expr","iterations":3,"window_size":4}"#,
        );
        let checked = check_assignment_file(&p).unwrap();
        let m = checked.onboard.unwrap();
        assert_eq!(m.signature.as_str(), "c6ee0594e81d35adbe018b1853ae09a5");
    }

    #[test]
    fn missing_file_is_io() {
        let err = check_assignment_file(Path::new("/nonexistent/a.json")).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[tokio::test]
    async fn rejected_input_sends_nothing() {
        let dir = tempfile::tempdir().unwrap();
        write(dir.path(), "bad.expr", "mean(xs");
        let p = write(
            dir.path(),
            "a.json",
            r#"{"user_id":"u","method":"CUSTOM","custom_module":"agg","code_file":"bad.expr","iterations":3,"window_size":4}"#,
        );
        let fe = Frontend::new(CapturingTransport::new());
        let err = fe.cmd_submit(&p, &mut Vec::new()).await.unwrap_err();
        assert_eq!(err.exit_code(), 1);
        let err = fe
            .deploy_module(
                CodeModule::new("u", "agg", "ys + 1"),
                DeployTarget::Both,
                vec![],
            )
            .await
            .unwrap_err();
        assert!(err.to_string().contains("unknown identifier ys"), "{err}");
        assert!(fe.transport().sent().is_empty());
    }

    #[test]
    fn output_line_format() {
        let o = IterationOutput {
            assignment_id: "a".into(),
            iteration: 2,
            accepted_signature: Some(fleet_core::protocol::Signature::of_code("mean(xs)")),
            accepted_count: 3,
            discarded_count: 1,
            missing_count: 0,
            value: Some(2.5),
            cloud_signature: None,
            contributions: vec![],
            error: None,
        };
        assert_eq!(
            format_output(&o),
            "iteration=2 value=2.5 accepted_signature=c6ee0594e81d35adbe018b1853ae09a5 discarded_count=1"
        );
    }
}
