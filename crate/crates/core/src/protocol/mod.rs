//! Messages, records and their wire encoding.

mod envelope;
mod signature;
mod tasks;
mod types;

pub use envelope::{decode_envelope, encode_envelope, Envelope, MsgType, Payload, SeqTracker};
pub use signature::{
    canonicalize, canonicalize_str, compute_signature, md5_hex, Signature, BUILTIN_PREFIX,
};
pub use tasks::derive_tasks;
pub use types::{
    is_valid_module_name, is_valid_user_id, AssignmentSpec, BuiltinMethod, CodeAck,
    CodeDeploymentSpec, CodeModule, CodePush, Contribution, DeployTarget, ErrorReport, FieldError,
    Heartbeat, IterationOutput, Iterations, Method, RegisterClient, ResultRecord, StatusRecord,
    StatusState, TaskSpec,
};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("input is not valid UTF-8 (first invalid byte at offset {offset})")]
    Encoding { offset: usize },
    #[error("malformed JSON: {0}")]
    Parse(String),
    #[error("unknown msg_type `{0}`")]
    UnknownMsgType(String),
    #[error("invalid field `{field}`: {message}")]
    Validation { field: String, message: String },
    #[error("unknown client ids: {}", .0.join(", "))]
    UnknownClients(Vec<String>),
    #[error("sequence number from `{sender}` did not increase ({got} after {last})")]
    SeqRegression { sender: String, last: u64, got: u64 },
}

impl ProtocolError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        ProtocolError::Validation {
            field: field.into(),
            message: message.into(),
        }
    }
}

/// Milliseconds since the Unix epoch.
pub fn now_ms() -> u64 {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}
