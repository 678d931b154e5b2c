//! Ephemeral per-task handler on a client.

use std::sync::Arc;
use std::time::Duration;

use fleet_core::executor::{apply_builtin, Executor, ModuleStore, StoreError, WindowBatch};
use fleet_core::protocol::{
    now_ms, CodeModule, ErrorReport, Method, Payload, ResultRecord, Signature, TaskSpec,
};
use tokio::sync::mpsc;
use tokio::time::Instant;
use tracing::debug;

use super::telemetry::TelemetrySource;

/// Everything a task handler needs besides its task.
#[derive(Clone)]
pub struct TaskContext {
    pub client_id: String,
    pub store: Arc<ModuleStore>,
    pub executor: Arc<dyn Executor>,
    pub seed: u64,
    pub signal: crate::config::SignalKind,
    /// Telemetry values per second.
    pub rate: f64,
    pub out: mpsc::UnboundedSender<Payload>,
}

/// Runs `task` to completion and returns its task id. Each iteration loads
/// the module at its start, waits for its window to fill, then reports one
/// TASK_RESULT or ERROR.
pub async fn run_task(task: TaskSpec, ctx: TaskContext) -> String {
    let mut source = TelemetrySource::new(ctx.seed, ctx.signal);
    let per_window = task.window_size as f64 / ctx.rate;
    let started = Instant::now();
    let mut iteration = 0u64;
    while task.iterations.contains(iteration) {
        let module = load_for(&task, &ctx.store);
        tokio::time::sleep_until(
            started + Duration::from_secs_f64(per_window * (iteration + 1) as f64),
        )
        .await;
        let window = source.take(task.window_size as usize);
        let payload = run_iteration(
            &task,
            &ctx.client_id,
            iteration,
            &window,
            module,
            ctx.executor.as_ref(),
        );
        if ctx.out.send(payload).is_err() {
            break;
        }
        iteration += 1;
    }
    debug!(task = %task.task_id, iterations = iteration, "task done");
    task.task_id
}

/// The boundary load: `None` for builtin methods.
pub fn load_for(task: &TaskSpec, store: &ModuleStore) -> Option<Result<CodeModule, StoreError>> {
    match (&task.method, &task.custom_module) {
        (Method::Custom, Some(name)) => Some(store.load_module(&task.user_id, name)),
        (Method::Custom, None) => Some(Err(StoreError::Validation(
            "task names no custom module".into(),
        ))),
        (Method::Builtin(_), _) => None,
    }
}

/// Computes one iteration over `window` with the module loaded at its start.
pub fn run_iteration(
    task: &TaskSpec,
    client_id: &str,
    iteration: u64,
    window: &[f64],
    module: Option<Result<CodeModule, StoreError>>,
    executor: &dyn Executor,
) -> Payload {
    let error = |kind: &str, message: String| {
        let mut e = ErrorReport::new(kind, message);
        e.assignment_id = Some(task.assignment_id.clone());
        e.client_id = Some(client_id.to_owned());
        e.iteration = Some(iteration);
        Payload::Error(e)
    };
    let computed: Result<(f64, Signature), Payload> = match (task.method, module) {
        (Method::Builtin(b), _) => apply_builtin(b, window)
            .map(|v| (v, b.signature()))
            .map_err(|e| error("evaluation", e.to_string())),
        (Method::Custom, Some(Ok(module))) => {
            let batch = WindowBatch {
                assignment_id: task.assignment_id.clone(),
                iteration,
                values: window.to_vec(),
            };
            executor
                .execute(&module, &batch, &task.params)
                .map(|r| (r.value, r.signature))
                .map_err(|e| {
                    error(
                        "evaluation",
                        format!("{} ({}): {e}", module.name, module.signature.short()),
                    )
                })
        }
        (Method::Custom, Some(Err(e))) => Err(error("module_missing", e.to_string())),
        (Method::Custom, None) => Err(error("module_missing", "no module loaded".into())),
    };
    match computed {
        Ok((value, signature)) => Payload::TaskResult(ResultRecord {
            assignment_id: task.assignment_id.clone(),
            client_id: client_id.to_owned(),
            iteration,
            value,
            signature,
            produced_at: now_ms(),
        }),
        Err(p) => p,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use fleet_core::executor::ReferenceExecutor;
    use fleet_core::protocol::{BuiltinMethod, Iterations};

    fn task(method: Method, module: Option<&str>) -> TaskSpec {
        TaskSpec {
            assignment_id: "a".into(),
            task_id: "a/c".into(),
            user_id: "u".into(),
            client_id: "c".into(),
            method,
            custom_module: module.map(String::from),
            window_size: 4,
            iterations: Iterations::Finite(2),
            params: Default::default(),
        }
    }

    fn value(p: &Payload) -> (f64, &Signature) {
        match p {
            Payload::TaskResult(r) => (r.value, &r.signature),
            other => panic!("expected result, got {other:?}"),
        }
    }

    #[test]
    fn custom_windows_over_ramp() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModuleStore::open(dir.path()).unwrap();
        let stored = store
            .store_module(&CodeModule::new("u", "agg", "mean(xs)"))
            .unwrap();
        let t = task(Method::Custom, Some("agg"));
        let exec = ReferenceExecutor::default();
        let mut src = TelemetrySource::new(0, crate::config::SignalKind::Ramp);
        let r0 = run_iteration(&t, "c", 0, &src.take(4), load_for(&t, &store), &exec);
        let r1 = run_iteration(&t, "c", 1, &src.take(4), load_for(&t, &store), &exec);
        assert_eq!(value(&r0), (2.5, &stored.signature));
        assert_eq!(value(&r1), (6.5, &stored.signature));
    }

    #[test]
    fn builtin_is_tagged_with_reserved_signature() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModuleStore::open(dir.path()).unwrap();
        let t = task(Method::Builtin(BuiltinMethod::Max), None);
        let exec = ReferenceExecutor::default();
        let r = run_iteration(&t, "c", 0, &[1.0, 9.0, 3.0], load_for(&t, &store), &exec);
        let (v, sig) = value(&r);
        assert_eq!(v, 9.0);
        assert_eq!(sig.as_str(), "builtin:max");
    }

    #[test]
    fn missing_module_and_eval_errors_name_the_iteration() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModuleStore::open(dir.path()).unwrap();
        let t = task(Method::Custom, Some("agg"));
        let exec = ReferenceExecutor::default();
        let r = run_iteration(&t, "c", 3, &[1.0], load_for(&t, &store), &exec);
        assert!(
            matches!(&r, Payload::Error(e) if e.kind == "module_missing" && e.iteration == Some(3))
        );
        store
            .store_module(&CodeModule::new("u", "agg", "1 / (first(xs) - first(xs))"))
            .unwrap();
        let r = run_iteration(&t, "c", 4, &[1.0], load_for(&t, &store), &exec);
        assert!(
            matches!(&r, Payload::Error(e) if e.kind == "evaluation" && e.iteration == Some(4))
        );
    }

    #[test]
    fn replacement_takes_effect_at_the_next_boundary() {
        let dir = tempfile::tempdir().unwrap();
        let store = ModuleStore::open(dir.path()).unwrap();
        let v1 = store
            .store_module(&CodeModule::new("u", "agg", "min(xs)"))
            .unwrap();
        let t = task(Method::Custom, Some("agg"));
        let exec = ReferenceExecutor::default();
        let loaded = load_for(&t, &store);
        // a push lands while iteration 0 is still collecting
        let v2 = store
            .store_module(&CodeModule::new("u", "agg", "max(xs)"))
            .unwrap();
        let r0 = run_iteration(&t, "c", 0, &[1.0, 5.0], loaded, &exec);
        let r1 = run_iteration(&t, "c", 1, &[1.0, 5.0], load_for(&t, &store), &exec);
        assert_eq!(value(&r0), (1.0, &v1.signature));
        assert_eq!(value(&r1), (5.0, &v2.signature));
    }
}
