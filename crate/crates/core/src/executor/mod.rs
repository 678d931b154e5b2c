//! Evaluation of user modules over telemetry windows, and the per-user
//! module store they are loaded from.
//!
//! The reference executor interprets a small sandboxed expression language
//! (see [`lang`]). It has no access to files, the network, or the host: the
//! only inputs are the window `xs` and the assignment parameters `p_<key>`.
//! Other executors can be plugged in through the [`Executor`] trait.

pub mod eval;
pub mod lang;
mod store;

use std::collections::BTreeMap;
use std::time::Instant;

use thiserror::Error;

pub use eval::{EvalError, DEFAULT_STEP_LIMIT};
pub use lang::{Diagnostic, Program};
pub use store::{ModuleStore, StoreError, MODULE_EXTENSION};

use crate::protocol::{BuiltinMethod, CodeModule, Signature};

/// Window used by the dynamic check.
pub const PROBE_WINDOW: [f64; 3] = [1.0, 2.0, 3.0];

/// Value bound to every referenced parameter during the dynamic check.
pub const PROBE_PARAM: f64 = 1.0;

/// The values collected for one iteration of an assignment.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowBatch {
    pub assignment_id: String,
    pub iteration: u64,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecResult {
    pub value: f64,
    pub signature: Signature,
    /// Wall-clock evaluation time in milliseconds.
    pub duration_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ExecError {
    #[error("module {name} is invalid: {}", join(.diagnostics))]
    Invalid {
        name: String,
        diagnostics: Vec<Diagnostic>,
    },
    #[error("empty window")]
    EmptyWindow,
    #[error("evaluation failed: {0}")]
    Eval(EvalError),
    #[error("resource limit: {0}")]
    ResourceLimit(EvalError),
}

fn join(diags: &[Diagnostic]) -> String {
    diags
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

impl From<EvalError> for ExecError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::StepLimit { .. } => ExecError::ResourceLimit(e),
            other => ExecError::Eval(other),
        }
    }
}

/// Runs user modules. Implementations must be deterministic and free of
/// side effects.
pub trait Executor: Send + Sync {
    /// Static and dynamic checks; every problem found is returned.
    fn validate(&self, code: &str) -> Result<(), Vec<Diagnostic>>;

    fn execute(
        &self,
        module: &CodeModule,
        batch: &WindowBatch,
        params: &BTreeMap<String, f64>,
    ) -> Result<ExecResult, ExecError>;
}

/// Interpreter for the reference expression language.
#[derive(Debug, Clone)]
pub struct ReferenceExecutor {
    step_limit: u64,
}

impl Default for ReferenceExecutor {
    fn default() -> Self {
        Self {
            step_limit: DEFAULT_STEP_LIMIT,
        }
    }
}

impl ReferenceExecutor {
    pub fn with_step_limit(step_limit: u64) -> Self {
        Self { step_limit }
    }
}

impl Executor for ReferenceExecutor {
    fn validate(&self, code: &str) -> Result<(), Vec<Diagnostic>> {
        let program = Program::parse(code)?;
        let params: BTreeMap<String, f64> = program
            .param_keys()
            .into_iter()
            .map(|k| (k, PROBE_PARAM))
            .collect();
        let env = eval::Env {
            window: &PROBE_WINDOW,
            params: &params,
            step_limit: self.step_limit,
        };
        eval::evaluate(&program.root, &env)
            .map(|_| ())
            .map_err(|e| vec![Diagnostic::at(e.pos(), strip_pos(&e))])
    }

    fn execute(
        &self,
        module: &CodeModule,
        batch: &WindowBatch,
        params: &BTreeMap<String, f64>,
    ) -> Result<ExecResult, ExecError> {
        if batch.values.is_empty() {
            return Err(ExecError::EmptyWindow);
        }
        let started = Instant::now();
        let program = Program::parse(&module.code).map_err(|diagnostics| ExecError::Invalid {
            name: module.name.clone(),
            diagnostics,
        })?;
        let env = eval::Env {
            window: &batch.values,
            params,
            step_limit: self.step_limit,
        };
        let value = eval::evaluate(&program.root, &env)?;
        Ok(ExecResult {
            value,
            signature: module.signature.clone(),
            duration_ms: started.elapsed().as_secs_f64() * 1e3,
        })
    }
}

fn strip_pos(e: &EvalError) -> String {
    let full = e.to_string();
    let prefix = format!("{}: ", e.pos());
    full.strip_prefix(&prefix)
        .map(str::to_owned)
        .unwrap_or(full)
}

/// Convenience wrapper over [`ReferenceExecutor::validate`].
pub fn validate_code(code: &str) -> Result<(), Vec<Diagnostic>> {
    ReferenceExecutor::default().validate(code)
}

/// Applies a builtin method to a window.
pub fn apply_builtin(method: BuiltinMethod, values: &[f64]) -> Result<f64, ExecError> {
    let func = match method {
        BuiltinMethod::Mean => lang::Func::Mean,
        BuiltinMethod::Median => lang::Func::Median,
        BuiltinMethod::Sum => lang::Func::Sum,
        BuiltinMethod::Count => lang::Func::Count,
        BuiltinMethod::Min => lang::Func::Min,
        BuiltinMethod::Max => lang::Func::Max,
        BuiltinMethod::Sd => lang::Func::Sd,
        BuiltinMethod::First => lang::Func::First,
        BuiltinMethod::Last => lang::Func::Last,
    };
    Ok(eval::reduce(func, values, lang::Pos::START)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(values: &[f64]) -> WindowBatch {
        WindowBatch {
            assignment_id: "a".into(),
            iteration: 0,
            values: values.to_vec(),
        }
    }

    #[test]
    fn validate_examples() {
        assert!(validate_code("mean(xs)").is_ok());
        let d = validate_code("mean(ys)").unwrap_err();
        assert_eq!(d[0].message, "unknown identifier ys");
        let d = validate_code("xs").unwrap_err();
        assert_eq!(d[0].message, "result is not a scalar number");
        assert!(validate_code("sum(xs) / p_n").is_ok());
        let d = validate_code("mean(xs) / (count(xs) - 3)").unwrap_err();
        assert_eq!(d[0].message, "division by zero");
        assert_eq!((d[0].line, d[0].column), (1, 10));
    }

    #[test]
    fn execute_reports_signature() {
        let m = CodeModule::new("u", "agg", "mean(xs)");
        let r = ReferenceExecutor::default()
            .execute(&m, &batch(&[1.0, 2.0, 3.0]), &BTreeMap::new())
            .unwrap();
        assert_eq!(r.value, 2.0);
        assert_eq!(r.signature, m.signature);
        assert!(r.duration_ms >= 0.0);
    }

    #[test]
    fn execute_errors_are_values() {
        let ex = ReferenceExecutor::default();
        let m = CodeModule::new("u", "agg", "sum(xs) / (first(xs) - first(xs))");
        assert!(matches!(
            ex.execute(&m, &batch(&[1.0]), &BTreeMap::new()),
            Err(ExecError::Eval(EvalError::DivisionByZero { .. }))
        ));
        assert_eq!(
            ex.execute(&m, &batch(&[]), &BTreeMap::new()),
            Err(ExecError::EmptyWindow)
        );
        let tight = ReferenceExecutor::with_step_limit(10);
        let m = CodeModule::new("u", "agg", "sum(xs)");
        assert!(matches!(
            tight.execute(&m, &batch(&[1.0; 20]), &BTreeMap::new()),
            Err(ExecError::ResourceLimit(_))
        ));
    }

    #[test]
    fn builtins_match_language_functions() {
        let xs = [4.0, 1.0, 3.0];
        assert_eq!(apply_builtin(BuiltinMethod::Mean, &xs).unwrap(), 8.0 / 3.0);
        assert_eq!(apply_builtin(BuiltinMethod::Median, &xs).unwrap(), 3.0);
        assert_eq!(apply_builtin(BuiltinMethod::Count, &xs).unwrap(), 3.0);
        assert_eq!(apply_builtin(BuiltinMethod::Last, &xs).unwrap(), 3.0);
    }
}
