//! Step-bounded evaluation of parsed modules.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use thiserror::Error;

use super::lang::{BinOp, Expr, ExprKind, Func, Pos};

/// Default bound on interpreter steps per evaluation.
pub const DEFAULT_STEP_LIMIT: u64 = 1_000_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EvalError {
    #[error("{pos}: division by zero")]
    DivisionByZero { pos: Pos },
    #[error("{pos}: {what} produced a non-finite value")]
    NonFinite { pos: Pos, what: String },
    #[error("{pos}: {message}")]
    Type { pos: Pos, message: String },
    #[error("{pos}: parameter p_{key} is not bound")]
    UnboundParam { pos: Pos, key: String },
    #[error("{pos}: {func} of an empty list")]
    EmptyList { pos: Pos, func: &'static str },
    #[error("evaluation exceeded {limit} interpreter steps")]
    StepLimit { limit: u64 },
}

impl EvalError {
    pub fn pos(&self) -> Pos {
        match self {
            EvalError::DivisionByZero { pos }
            | EvalError::NonFinite { pos, .. }
            | EvalError::Type { pos, .. }
            | EvalError::UnboundParam { pos, .. }
            | EvalError::EmptyList { pos, .. } => *pos,
            EvalError::StepLimit { .. } => Pos::START,
        }
    }
}

#[derive(Debug, Clone, Copy)]
enum Value<'a> {
    Scalar(f64),
    List(&'a [f64]),
}

/// Evaluation environment: the window plus bound parameters.
pub struct Env<'a> {
    pub window: &'a [f64],
    pub params: &'a BTreeMap<String, f64>,
    pub step_limit: u64,
}

/// Evaluates `expr` to a finite scalar.
pub fn evaluate(expr: &Expr, env: &Env<'_>) -> Result<f64, EvalError> {
    let mut ev = Evaluator { env, steps: 0 };
    match ev.eval(expr)? {
        Value::Scalar(v) => Ok(v),
        Value::List(_) => Err(EvalError::Type {
            pos: expr.pos,
            message: "result is not a scalar number".into(),
        }),
    }
}

struct Evaluator<'e, 'a> {
    env: &'e Env<'a>,
    steps: u64,
}

impl<'a> Evaluator<'_, 'a> {
    fn charge(&mut self, n: u64) -> Result<(), EvalError> {
        self.steps = self.steps.saturating_add(n);
        if self.steps > self.env.step_limit {
            Err(EvalError::StepLimit {
                limit: self.env.step_limit,
            })
        } else {
            Ok(())
        }
    }

    fn eval(&mut self, e: &Expr) -> Result<Value<'a>, EvalError> {
        self.charge(1)?;
        match &e.kind {
            ExprKind::Num(n) => Ok(Value::Scalar(*n)),
            ExprKind::Window => Ok(Value::List(self.env.window)),
            ExprKind::Param(key) => self
                .env
                .params
                .get(key)
                .map(|v| Value::Scalar(*v))
                .ok_or_else(|| EvalError::UnboundParam {
                    pos: e.pos,
                    key: key.clone(),
                }),
            ExprKind::Neg(inner) => {
                let v = self.scalar(inner, "unary `-`")?;
                Ok(Value::Scalar(-v))
            }
            ExprKind::Binary(op, lhs, rhs) => {
                let what = format!("operator `{}`", op.symbol());
                let a = self.scalar(lhs, &what)?;
                let b = self.scalar(rhs, &what)?;
                let v = match op {
                    BinOp::Add => a + b,
                    BinOp::Sub => a - b,
                    BinOp::Mul => a * b,
                    BinOp::Div if b == 0.0 => return Err(EvalError::DivisionByZero { pos: e.pos }),
                    BinOp::Div => a / b,
                    BinOp::Pow => a.powf(b),
                };
                finite(v, e.pos, what).map(Value::Scalar)
            }
            ExprKind::Call(func, args) => self.call(*func, args, e.pos),
        }
    }

    fn scalar(&mut self, e: &Expr, context: &str) -> Result<f64, EvalError> {
        match self.eval(e)? {
            Value::Scalar(v) => Ok(v),
            Value::List(_) => Err(EvalError::Type {
                pos: e.pos,
                message: format!("the list xs cannot be an operand of {context}; reduce it with a function such as mean(xs)"),
            }),
        }
    }

    fn call(&mut self, func: Func, args: &[Expr], pos: Pos) -> Result<Value<'a>, EvalError> {
        if func.is_scalar() {
            let [arg] = args else {
                return Err(EvalError::Type {
                    pos,
                    message: format!("{} takes exactly 1 argument", func.name()),
                });
            };
            let x = self.scalar(arg, func.name())?;
            let v = match func {
                Func::Abs => x.abs(),
                Func::Sqrt => x.sqrt(),
                _ => unreachable!("scalar functions are abs and sqrt"),
            };
            return finite(v, pos, func.name().to_owned()).map(Value::Scalar);
        }
        // A single list argument is reduced directly; otherwise the scalar
        // arguments form the list.
        let owned;
        let values: &[f64] = match args {
            [single] => match self.eval(single)? {
                Value::List(xs) => xs,
                Value::Scalar(v) => {
                    owned = vec![v];
                    &owned
                }
            },
            _ => {
                let mut collected = Vec::with_capacity(args.len());
                for a in args {
                    collected.push(self.scalar(a, func.name())?);
                }
                owned = collected;
                &owned
            }
        };
        self.charge(values.len() as u64)?;
        reduce(func, values, pos).map(Value::Scalar)
    }
}

fn finite(v: f64, pos: Pos, what: String) -> Result<f64, EvalError> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(EvalError::NonFinite { pos, what })
    }
}

/// Applies a list-reducing function.
pub fn reduce(func: Func, values: &[f64], pos: Pos) -> Result<f64, EvalError> {
    if func == Func::Count {
        return Ok(values.len() as f64);
    }
    if values.is_empty() {
        return Err(EvalError::EmptyList {
            pos,
            func: func.name(),
        });
    }
    let n = values.len() as f64;
    let v = match func {
        Func::Sum => values.iter().sum(),
        Func::Mean => values.iter().sum::<f64>() / n,
        Func::Min => values.iter().copied().fold(f64::INFINITY, f64::min),
        Func::Max => values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        Func::First => values[0],
        Func::Last => values[values.len() - 1],
        Func::Median => {
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
            let mid = sorted.len() / 2;
            if sorted.len().is_multiple_of(2) {
                (sorted[mid - 1] + sorted[mid]) / 2.0
            } else {
                sorted[mid]
            }
        }
        Func::Sd => {
            let mean = values.iter().sum::<f64>() / n;
            (values.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt()
        }
        Func::Count | Func::Abs | Func::Sqrt => unreachable!("not a list reducer"),
    };
    finite(v, pos, func.name().to_owned())
}
