use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::signature::Signature;
use super::ProtocolError;

/// Builtin on-board computations, addressed by keyword.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuiltinMethod {
    Mean,
    Median,
    Sum,
    Count,
    Min,
    Max,
    Sd,
    First,
    Last,
}

impl BuiltinMethod {
    pub const ALL: [BuiltinMethod; 9] = [
        BuiltinMethod::Mean,
        BuiltinMethod::Median,
        BuiltinMethod::Sum,
        BuiltinMethod::Count,
        BuiltinMethod::Min,
        BuiltinMethod::Max,
        BuiltinMethod::Sd,
        BuiltinMethod::First,
        BuiltinMethod::Last,
    ];

    pub fn keyword(self) -> &'static str {
        match self {
            BuiltinMethod::Mean => "mean",
            BuiltinMethod::Median => "median",
            BuiltinMethod::Sum => "sum",
            BuiltinMethod::Count => "count",
            BuiltinMethod::Min => "min",
            BuiltinMethod::Max => "max",
            BuiltinMethod::Sd => "sd",
            BuiltinMethod::First => "first",
            BuiltinMethod::Last => "last",
        }
    }

    pub fn from_keyword(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|m| m.keyword() == s)
    }

    pub fn signature(self) -> Signature {
        Signature::builtin(self.keyword())
    }
}

/// What a task computes per iteration: a builtin keyword or the user's custom module.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Method {
    Builtin(BuiltinMethod),
    Custom,
}

impl Method {
    pub const CUSTOM_KEYWORD: &'static str = "CUSTOM";
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Builtin(b) => f.write_str(b.keyword()),
            Method::Custom => f.write_str(Self::CUSTOM_KEYWORD),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == Self::CUSTOM_KEYWORD {
            return Ok(Method::Custom);
        }
        BuiltinMethod::from_keyword(s)
            .map(Method::Builtin)
            .ok_or_else(|| {
                let known: Vec<_> = BuiltinMethod::ALL.iter().map(|m| m.keyword()).collect();
                format!(
                    "unknown method `{s}` (expected CUSTOM or one of {})",
                    known.join(", ")
                )
            })
    }
}

impl Serialize for Method {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Number of rounds an assignment runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Iterations {
    Finite(u64),
    Indefinite,
}

impl Iterations {
    pub const INDEFINITE_KEYWORD: &'static str = "INDEFINITE";

    pub fn is_last(self, iteration: u64) -> bool {
        match self {
            Iterations::Finite(n) => iteration + 1 >= n,
            Iterations::Indefinite => false,
        }
    }

    pub fn contains(self, iteration: u64) -> bool {
        match self {
            Iterations::Finite(n) => iteration < n,
            Iterations::Indefinite => true,
        }
    }
}

impl Serialize for Iterations {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            Iterations::Finite(n) => serializer.serialize_u64(*n),
            Iterations::Indefinite => serializer.serialize_str(Self::INDEFINITE_KEYWORD),
        }
    }
}

impl<'de> Deserialize<'de> for Iterations {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Count(u64),
            Word(String),
        }
        match Raw::deserialize(deserializer).map_err(|_| {
            serde::de::Error::custom("expected a non-negative integer or \"INDEFINITE\"")
        })? {
            Raw::Count(n) => Ok(Iterations::Finite(n)),
            Raw::Word(w) if w == Self::INDEFINITE_KEYWORD => Ok(Iterations::Indefinite),
            Raw::Word(w) => Err(serde::de::Error::custom(format!(
                "expected a non-negative integer or \"INDEFINITE\", got \"{w}\""
            ))),
        }
    }
}

/// One problem in a record, located by its field path.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldError {
    pub field: String,
    pub message: String,
}

impl FieldError {
    pub fn new(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            field: field.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Module names are used verbatim as file names.
pub fn is_valid_module_name(name: &str) -> bool {
    (1..=64).contains(&name.len())
        && name
            .bytes()
            .all(|b| b.is_ascii_lowercase() || b.is_ascii_digit() || b == b'_')
}

/// User ids become directory names in the module store.
pub fn is_valid_user_id(id: &str) -> bool {
    (1..=64).contains(&id.len())
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || b == b'_' || b == b'-')
}

fn is_param_key(key: &str) -> bool {
    !key.is_empty() && key.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'_')
}

/// What a user wants computed, where, and for how long.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AssignmentSpec {
    /// Assigned by the cloud when left empty.
    #[serde(default)]
    pub assignment_id: String,
    pub user_id: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_module: Option<String>,
    /// Cloud-side module applied to the accepted client values of each
    /// iteration. Absent means the builtin reducer (arithmetic mean).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub offboard_module: Option<String>,
    /// Empty targets the whole fleet.
    #[serde(default)]
    pub target_clients: Vec<String>,
    pub iterations: Iterations,
    pub window_size: u64,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl AssignmentSpec {
    /// All field-level problems, empty when the assignment is well formed.
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if !is_valid_user_id(&self.user_id) {
            errors.push(FieldError::new("user_id", "must match [A-Za-z0-9_-]{1,64}"));
        }
        if self.window_size < 1 {
            errors.push(FieldError::new("window_size", "window_size must be ≥ 1"));
        }
        if self.iterations == Iterations::Finite(0) {
            errors.push(FieldError::new(
                "iterations",
                "iterations must be ≥ 1 or INDEFINITE",
            ));
        }
        match (&self.method, &self.custom_module) {
            (Method::Custom, None) => errors.push(FieldError::new(
                "custom_module",
                "custom_module is required when method is CUSTOM",
            )),
            (Method::Custom, Some(name)) if !is_valid_module_name(name) => errors.push(
                FieldError::new("custom_module", "module name must match [a-z0-9_]{1,64}"),
            ),
            (Method::Builtin(_), Some(_)) => errors.push(FieldError::new(
                "custom_module",
                "custom_module is only allowed when method is CUSTOM",
            )),
            _ => {}
        }
        if let Some(name) = &self.offboard_module {
            if !is_valid_module_name(name) {
                errors.push(FieldError::new(
                    "offboard_module",
                    "module name must match [a-z0-9_]{1,64}",
                ));
            }
        }
        for (i, client) in self.target_clients.iter().enumerate() {
            if client.is_empty() {
                errors.push(FieldError::new(
                    format!("target_clients[{i}]"),
                    "client id is empty",
                ));
            }
        }
        for (key, value) in &self.params {
            if !is_param_key(key) {
                errors.push(FieldError::new(
                    format!("params.{key}"),
                    "parameter names must match [A-Za-z0-9_]+",
                ));
            }
            if !value.is_finite() {
                errors.push(FieldError::new(
                    format!("params.{key}"),
                    "value must be finite",
                ));
            }
        }
        errors
    }
}

/// A user-owned deployable unit of computation.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeModule {
    pub user_id: String,
    pub name: String,
    pub code: String,
    pub signature: Signature,
    /// Milliseconds since the Unix epoch.
    #[serde(default)]
    pub deployed_at: u64,
}

impl CodeModule {
    pub fn new(user_id: impl Into<String>, name: impl Into<String>, code: &str) -> Self {
        Self {
            user_id: user_id.into(),
            name: name.into(),
            signature: Signature::of_code(code),
            code: code.to_owned(),
            deployed_at: 0,
        }
    }

    /// True when `signature` is the md5 of the canonical code.
    pub fn signature_matches(&self) -> bool {
        Signature::of_code(&self.code) == self.signature
    }

    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = Vec::new();
        if !is_valid_user_id(&self.user_id) {
            errors.push(FieldError::new(
                "module.user_id",
                "must match [A-Za-z0-9_-]{1,64}",
            ));
        }
        if !is_valid_module_name(&self.name) {
            errors.push(FieldError::new(
                "module.name",
                "module name must match [a-z0-9_]{1,64}",
            ));
        }
        if !self.signature_matches() {
            errors.push(FieldError::new(
                "module.signature",
                format!(
                    "signature {} does not match md5 of canonical code {}",
                    self.signature,
                    Signature::of_code(&self.code)
                ),
            ));
        }
        errors
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DeployTarget {
    Cloud,
    Clients,
    Both,
}

impl DeployTarget {
    pub fn includes_cloud(self) -> bool {
        matches!(self, DeployTarget::Cloud | DeployTarget::Both)
    }

    pub fn includes_clients(self) -> bool {
        matches!(self, DeployTarget::Clients | DeployTarget::Both)
    }
}

impl FromStr for DeployTarget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().as_str() {
            "CLOUD" => Ok(DeployTarget::Cloud),
            "CLIENTS" => Ok(DeployTarget::Clients),
            "BOTH" => Ok(DeployTarget::Both),
            _ => Err(format!(
                "unknown target `{s}` (expected cloud, clients or both)"
            )),
        }
    }
}

/// Code deployment, handled as a special kind of assignment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeDeploymentSpec {
    #[serde(default)]
    pub deployment_id: String,
    pub user_id: String,
    pub target: DeployTarget,
    #[serde(default)]
    pub target_clients: Vec<String>,
    pub module: CodeModule,
}

impl CodeDeploymentSpec {
    pub fn validate(&self) -> Vec<FieldError> {
        let mut errors = self.module.validate();
        if self.module.user_id != self.user_id {
            errors.push(FieldError::new(
                "module.user_id",
                "module owner must equal the deploying user_id",
            ));
        }
        if self.target == DeployTarget::Cloud && !self.target_clients.is_empty() {
            errors.push(FieldError::new(
                "target_clients",
                "target_clients is only meaningful when target includes clients",
            ));
        }
        errors
    }
}

/// Per-client projection of an assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub assignment_id: String,
    pub task_id: String,
    pub user_id: String,
    pub client_id: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub custom_module: Option<String>,
    pub window_size: u64,
    pub iterations: Iterations,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

/// One client's output for one iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResultRecord {
    pub assignment_id: String,
    pub client_id: String,
    pub iteration: u64,
    pub value: f64,
    pub signature: Signature,
    pub produced_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StatusState {
    Accepted,
    Deployed,
    Running,
    IterationDiscarded,
    Completed,
    Cancelled,
    Failed,
}

impl StatusState {
    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            StatusState::Completed | StatusState::Cancelled | StatusState::Failed
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            StatusState::Accepted => "ACCEPTED",
            StatusState::Deployed => "DEPLOYED",
            StatusState::Running => "RUNNING",
            StatusState::IterationDiscarded => "ITERATION_DISCARDED",
            StatusState::Completed => "COMPLETED",
            StatusState::Cancelled => "CANCELLED",
            StatusState::Failed => "FAILED",
        }
    }
}

impl fmt::Display for StatusState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Status of an assignment or a deployment; exactly one of the two ids is set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatusRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployment_id: Option<String>,
    pub state: StatusState,
    #[serde(default)]
    pub detail: String,
}

impl StatusRecord {
    pub fn assignment(
        id: impl Into<String>,
        state: StatusState,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            assignment_id: Some(id.into()),
            deployment_id: None,
            state,
            detail: detail.into(),
        }
    }

    pub fn deployment(
        id: impl Into<String>,
        state: StatusState,
        detail: impl Into<String>,
    ) -> Self {
        Self {
            assignment_id: None,
            deployment_id: Some(id.into()),
            state,
            detail: detail.into(),
        }
    }

    pub fn subject_id(&self) -> &str {
        self.assignment_id
            .as_deref()
            .or(self.deployment_id.as_deref())
            .unwrap_or_default()
    }
}

/// One client result as judged by the per-iteration version filter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Contribution {
    pub client_id: String,
    pub signature: Signature,
    pub value: f64,
    pub accepted: bool,
}

/// The cloud's aggregate for one iteration of an assignment.
///
/// `accepted_count + discarded_count` equals the number of results received.
/// Clients that never reported (timeout or error) are counted in
/// `missing_count`. `value` is absent when the iteration was discarded or the
/// off-board computation failed; `error` says why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IterationOutput {
    pub assignment_id: String,
    pub iteration: u64,
    pub accepted_signature: Option<Signature>,
    pub accepted_count: u64,
    pub discarded_count: u64,
    #[serde(default)]
    pub missing_count: u64,
    pub value: Option<f64>,
    /// Signature of the off-board module, when one ran.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cloud_signature: Option<Signature>,
    #[serde(default)]
    pub contributions: Vec<Contribution>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodePush {
    pub deployment_id: String,
    pub module: CodeModule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeAck {
    pub deployment_id: String,
    pub client_id: String,
    pub user_id: String,
    pub name: String,
    pub signature: Signature,
}

/// Error report from a node. The optional ids tie it to the work it concerns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorReport {
    pub kind: String,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assignment_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub deployment_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iteration: Option<u64>,
}

impl ErrorReport {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            message: message.into(),
            assignment_id: None,
            deployment_id: None,
            client_id: None,
            iteration: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegisterClient {
    pub client_id: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Heartbeat {}

/// Rejects non-finite numbers, which JSON cannot carry.
pub(crate) fn check_finite(field: &str, value: f64) -> Result<(), ProtocolError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(ProtocolError::validation(
            field,
            format!("{value} is not a finite number"),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> AssignmentSpec {
        AssignmentSpec {
            assignment_id: "a1".into(),
            user_id: "u1".into(),
            method: Method::Custom,
            custom_module: Some("agg".into()),
            offboard_module: None,
            target_clients: vec![],
            iterations: Iterations::Finite(3),
            window_size: 4,
            params: BTreeMap::new(),
        }
    }

    #[test]
    fn well_formed_spec_has_no_errors() {
        assert!(spec().validate().is_empty());
    }

    #[test]
    fn zero_window_is_rejected() {
        let mut s = spec();
        s.window_size = 0;
        let errs = s.validate();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "window_size");
        assert_eq!(errs[0].message, "window_size must be ≥ 1");
    }

    #[test]
    fn custom_needs_module() {
        let mut s = spec();
        s.custom_module = None;
        assert_eq!(s.validate()[0].field, "custom_module");
        s.custom_module = Some("Bad-Name".into());
        assert_eq!(s.validate()[0].field, "custom_module");
    }

    #[test]
    fn iterations_serde() {
        let v: Iterations = serde_json::from_str("\"INDEFINITE\"").unwrap();
        assert_eq!(v, Iterations::Indefinite);
        let v: Iterations = serde_json::from_str("10").unwrap();
        assert_eq!(v, Iterations::Finite(10));
        assert!(serde_json::from_str::<Iterations>("\"forever\"").is_err());
        assert_eq!(
            serde_json::to_string(&Iterations::Indefinite).unwrap(),
            "\"INDEFINITE\""
        );
    }

    #[test]
    fn method_serde() {
        assert_eq!(
            serde_json::to_string(&Method::Custom).unwrap(),
            "\"CUSTOM\""
        );
        let m: Method = serde_json::from_str("\"median\"").unwrap();
        assert_eq!(m, Method::Builtin(BuiltinMethod::Median));
        assert!(serde_json::from_str::<Method>("\"custom\"").is_err());
    }

    #[test]
    fn module_name_rules() {
        assert!(is_valid_module_name("agg_2"));
        assert!(!is_valid_module_name(""));
        assert!(!is_valid_module_name("../etc"));
        assert!(!is_valid_module_name(&"a".repeat(65)));
        assert!(!is_valid_user_id("a/b"));
    }

    #[test]
    fn deployment_owner_must_match() {
        let dep = CodeDeploymentSpec {
            deployment_id: String::new(),
            user_id: "u2".into(),
            target: DeployTarget::Both,
            target_clients: vec![],
            module: CodeModule::new("u1", "agg", "mean(xs)"),
        };
        let errs = dep.validate();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "module.user_id");
    }

    #[test]
    fn tampered_module_fails_validation() {
        let mut m = CodeModule::new("u1", "agg", "mean(xs)");
        m.code = "max(xs)".into();
        assert!(!m.signature_matches());
        assert_eq!(m.validate()[0].field, "module.signature");
    }
}
