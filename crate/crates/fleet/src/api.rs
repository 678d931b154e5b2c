//! JSON bodies of the gateway's HTTP API.

use std::collections::BTreeMap;

use fleet_core::protocol::{AssignmentSpec, FieldError, IterationOutput, StatusRecord};
use fleet_core::Diagnostic;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SubmitResponse {
    pub assignment_id: String,
}

/// Registry entry as reported by `GET /clients`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientInfo {
    pub client_id: String,
    pub address: String,
    /// Milliseconds since the Unix epoch.
    pub last_heartbeat: u64,
    pub connected: bool,
}

/// `GET /assignments/{id}`: status and the outputs emitted so far.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssignmentView {
    pub spec: AssignmentSpec,
    pub status: StatusRecord,
    pub outputs: Vec<IterationOutput>,
}

/// Added CODE_PUSH delivery delay per client, in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DelayProfile {
    #[serde(default)]
    pub code_push_delay_ms: BTreeMap<String, u64>,
}

impl DelayProfile {
    pub fn delay_for(&self, client_id: &str) -> u64 {
        self.code_push_delay_ms.get(client_id).copied().unwrap_or(0)
    }
}

/// Error body returned with every non-2xx response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApiError {
    /// One of `validation`, `invalid_code`, `not_found`, `conflict`, `internal`.
    pub error: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FieldError>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub diagnostics: Vec<Diagnostic>,
}
