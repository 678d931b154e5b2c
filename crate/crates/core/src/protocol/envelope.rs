//! Line-delimited JSON framing of inter-node messages.
//!
//! Every message is one JSON object on one LF-terminated line:
//!
//! ```text
//! {"msg_type":"HEARTBEAT","sender_id":"client-1","seq":7,"payload":{}}
//! ```
//!
//! The payload schema is fixed by `msg_type`; decoding rejects payloads with
//! missing or unexpected fields.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::types::*;
use super::ProtocolError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MsgType {
    SubmitAssignment,
    DeployCode,
    Task,
    CodePush,
    TaskResult,
    CodeAck,
    AssignmentStatus,
    IterationOutput,
    Error,
    RegisterClient,
    Heartbeat,
}

impl MsgType {
    pub const ALL: [MsgType; 11] = [
        MsgType::SubmitAssignment,
        MsgType::DeployCode,
        MsgType::Task,
        MsgType::CodePush,
        MsgType::TaskResult,
        MsgType::CodeAck,
        MsgType::AssignmentStatus,
        MsgType::IterationOutput,
        MsgType::Error,
        MsgType::RegisterClient,
        MsgType::Heartbeat,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MsgType::SubmitAssignment => "SUBMIT_ASSIGNMENT",
            MsgType::DeployCode => "DEPLOY_CODE",
            MsgType::Task => "TASK",
            MsgType::CodePush => "CODE_PUSH",
            MsgType::TaskResult => "TASK_RESULT",
            MsgType::CodeAck => "CODE_ACK",
            MsgType::AssignmentStatus => "ASSIGNMENT_STATUS",
            MsgType::IterationOutput => "ITERATION_OUTPUT",
            MsgType::Error => "ERROR",
            MsgType::RegisterClient => "REGISTER_CLIENT",
            MsgType::Heartbeat => "HEARTBEAT",
        }
    }
}

impl fmt::Display for MsgType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MsgType {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MsgType::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownMsgType(s.to_owned()))
    }
}

/// Message body; the variant determines the envelope's `msg_type`.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    SubmitAssignment(AssignmentSpec),
    DeployCode(CodeDeploymentSpec),
    Task(TaskSpec),
    CodePush(CodePush),
    TaskResult(ResultRecord),
    CodeAck(CodeAck),
    AssignmentStatus(StatusRecord),
    IterationOutput(IterationOutput),
    Error(ErrorReport),
    RegisterClient(RegisterClient),
    Heartbeat(Heartbeat),
}

impl Payload {
    pub fn msg_type(&self) -> MsgType {
        match self {
            Payload::SubmitAssignment(_) => MsgType::SubmitAssignment,
            Payload::DeployCode(_) => MsgType::DeployCode,
            Payload::Task(_) => MsgType::Task,
            Payload::CodePush(_) => MsgType::CodePush,
            Payload::TaskResult(_) => MsgType::TaskResult,
            Payload::CodeAck(_) => MsgType::CodeAck,
            Payload::AssignmentStatus(_) => MsgType::AssignmentStatus,
            Payload::IterationOutput(_) => MsgType::IterationOutput,
            Payload::Error(_) => MsgType::Error,
            Payload::RegisterClient(_) => MsgType::RegisterClient,
            Payload::Heartbeat(_) => MsgType::Heartbeat,
        }
    }

    /// Checks the constraints the type system does not carry, most notably
    /// that every number is finite.
    fn check(&self) -> Result<(), ProtocolError> {
        match self {
            Payload::SubmitAssignment(spec) => {
                for (k, v) in &spec.params {
                    check_finite(&format!("payload.params.{k}"), *v)?;
                }
                Ok(())
            }
            Payload::Task(task) => {
                for (k, v) in &task.params {
                    check_finite(&format!("payload.params.{k}"), *v)?;
                }
                Ok(())
            }
            Payload::TaskResult(r) => check_finite("payload.value", r.value),
            Payload::IterationOutput(out) => {
                if let Some(v) = out.value {
                    check_finite("payload.value", v)?;
                }
                for (i, c) in out.contributions.iter().enumerate() {
                    check_finite(&format!("payload.contributions[{i}].value"), c.value)?;
                }
                Ok(())
            }
            Payload::AssignmentStatus(s) => match (&s.assignment_id, &s.deployment_id) {
                (Some(_), None) | (None, Some(_)) => Ok(()),
                _ => Err(ProtocolError::validation(
                    "payload.assignment_id",
                    "exactly one of assignment_id and deployment_id must be set",
                )),
            },
            _ => Ok(()),
        }
    }

    fn to_value(&self) -> Result<Value, serde_json::Error> {
        match self {
            Payload::SubmitAssignment(p) => serde_json::to_value(p),
            Payload::DeployCode(p) => serde_json::to_value(p),
            Payload::Task(p) => serde_json::to_value(p),
            Payload::CodePush(p) => serde_json::to_value(p),
            Payload::TaskResult(p) => serde_json::to_value(p),
            Payload::CodeAck(p) => serde_json::to_value(p),
            Payload::AssignmentStatus(p) => serde_json::to_value(p),
            Payload::IterationOutput(p) => serde_json::to_value(p),
            Payload::Error(p) => serde_json::to_value(p),
            Payload::RegisterClient(p) => serde_json::to_value(p),
            Payload::Heartbeat(p) => serde_json::to_value(p),
        }
    }

    fn from_value(msg_type: MsgType, value: Value) -> Result<Self, ProtocolError> {
        fn parse<T: DeserializeOwned>(value: Value) -> Result<T, ProtocolError> {
            serde_path_to_error::deserialize(value).map_err(|e| {
                let path = e.path().to_string();
                let field = if path == "." {
                    "payload".to_owned()
                } else {
                    format!("payload.{path}")
                };
                ProtocolError::validation(field, e.into_inner().to_string())
            })
        }
        Ok(match msg_type {
            MsgType::SubmitAssignment => Payload::SubmitAssignment(parse(value)?),
            MsgType::DeployCode => Payload::DeployCode(parse(value)?),
            MsgType::Task => Payload::Task(parse(value)?),
            MsgType::CodePush => Payload::CodePush(parse(value)?),
            MsgType::TaskResult => Payload::TaskResult(parse(value)?),
            MsgType::CodeAck => Payload::CodeAck(parse(value)?),
            MsgType::AssignmentStatus => Payload::AssignmentStatus(parse(value)?),
            MsgType::IterationOutput => Payload::IterationOutput(parse(value)?),
            MsgType::Error => Payload::Error(parse(value)?),
            MsgType::RegisterClient => Payload::RegisterClient(parse(value)?),
            MsgType::Heartbeat => Payload::Heartbeat(parse(value)?),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub sender_id: String,
    pub seq: u64,
    pub payload: Payload,
}

impl Envelope {
    pub fn new(sender_id: impl Into<String>, seq: u64, payload: Payload) -> Self {
        Self {
            sender_id: sender_id.into(),
            seq,
            payload,
        }
    }

    pub fn msg_type(&self) -> MsgType {
        self.payload.msg_type()
    }
}

#[derive(Serialize)]
struct WireOut<'a> {
    msg_type: MsgType,
    sender_id: &'a str,
    seq: u64,
    payload: Value,
}

/// Encodes one envelope as a single LF-terminated JSON line.
pub fn encode_envelope(env: &Envelope) -> Result<Vec<u8>, ProtocolError> {
    env.payload.check()?;
    let payload = env
        .payload
        .to_value()
        .map_err(|e| ProtocolError::validation("payload", e.to_string()))?;
    let wire = WireOut {
        msg_type: env.msg_type(),
        sender_id: &env.sender_id,
        seq: env.seq,
        payload,
    };
    let mut line = serde_json::to_vec(&wire)
        .map_err(|e| ProtocolError::validation("payload", e.to_string()))?;
    line.push(b'\n');
    Ok(line)
}

/// Decodes one line (with or without its trailing LF).
pub fn decode_envelope(line: &[u8]) -> Result<Envelope, ProtocolError> {
    let line = line.strip_suffix(b"\n").unwrap_or(line);
    let line = line.strip_suffix(b"\r").unwrap_or(line);
    let value: Value =
        serde_json::from_slice(line).map_err(|e| ProtocolError::Parse(e.to_string()))?;
    let Value::Object(mut obj) = value else {
        return Err(ProtocolError::validation(
            "envelope",
            "expected a JSON object",
        ));
    };
    let msg_type = match obj.remove("msg_type") {
        Some(Value::String(s)) => s.parse::<MsgType>()?,
        Some(_) => return Err(ProtocolError::validation("msg_type", "expected a string")),
        None => {
            return Err(ProtocolError::validation(
                "msg_type",
                "missing required field",
            ))
        }
    };
    let sender_id = match obj.remove("sender_id") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(ProtocolError::validation("sender_id", "expected a string")),
        None => {
            return Err(ProtocolError::validation(
                "sender_id",
                "missing required field",
            ))
        }
    };
    let seq = match obj.remove("seq") {
        Some(v) => v
            .as_u64()
            .ok_or_else(|| ProtocolError::validation("seq", "expected a non-negative integer"))?,
        None => return Err(ProtocolError::validation("seq", "missing required field")),
    };
    let payload = match obj.remove("payload") {
        Some(v @ Value::Object(_)) => v,
        Some(_) => return Err(ProtocolError::validation("payload", "expected an object")),
        None => {
            return Err(ProtocolError::validation(
                "payload",
                "missing required field",
            ))
        }
    };
    if let Some(extra) = obj.keys().next() {
        return Err(ProtocolError::validation(
            extra.clone(),
            "unknown top-level field",
        ));
    }
    let payload = Payload::from_value(msg_type, payload)?;
    payload.check()?;
    Ok(Envelope {
        sender_id,
        seq,
        payload,
    })
}

/// Receiver-side check that sequence numbers strictly increase per sender.
#[derive(Debug, Default)]
pub struct SeqTracker {
    last: HashMap<String, u64>,
}

impl SeqTracker {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn observe(&mut self, env: &Envelope) -> Result<(), ProtocolError> {
        match self.last.get(&env.sender_id) {
            Some(&last) if env.seq <= last => Err(ProtocolError::SeqRegression {
                sender: env.sender_id.clone(),
                last,
                got: env.seq,
            }),
            _ => {
                self.last.insert(env.sender_id.clone(), env.seq);
                Ok(())
            }
        }
    }
}
