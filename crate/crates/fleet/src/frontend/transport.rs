//! How the front-end reaches the gateway.

use std::future::Future;
use std::pin::Pin;
use std::sync::Mutex;

use fleet_core::protocol::{
    decode_envelope, AssignmentSpec, CodeDeploymentSpec, Envelope, StatusRecord,
};
use futures::{Stream, StreamExt};
use serde::de::DeserializeOwned;
use tokio_tungstenite::tungstenite::Message;

use super::FrontendError;
use crate::api::{ApiError, AssignmentView, ClientInfo, DelayProfile, SubmitResponse};

#[derive(Debug, Clone, PartialEq)]
pub enum Request {
    Submit(AssignmentSpec),
    Deploy(CodeDeploymentSpec),
    Cancel(String),
    Clients,
    Assignment(String),
    Stream {
        user_id: String,
        assignment_id: String,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Reply {
    Submitted(SubmitResponse),
    Status(StatusRecord),
    Clients(Vec<ClientInfo>),
    Assignment(AssignmentView),
}

pub type EnvelopeStream = Pin<Box<dyn Stream<Item = Result<Envelope, FrontendError>> + Send>>;

pub trait Transport: Send + Sync {
    fn call(&self, request: Request) -> impl Future<Output = Result<Reply, FrontendError>> + Send;

    /// Live envelopes for one assignment, starting with everything emitted so far.
    fn stream(
        &self,
        user_id: &str,
        assignment_id: &str,
    ) -> impl Future<Output = Result<EnvelopeStream, FrontendError>> + Send;
}

/// Talks HTTP and WebSocket to a gateway at `host:port`.
#[derive(Debug, Clone)]
pub struct HttpTransport {
    gateway: String,
    http: reqwest::Client,
}

impl HttpTransport {
    pub fn new(gateway: impl Into<String>) -> Self {
        let gateway = gateway.into();
        let gateway = gateway
            .strip_prefix("http://")
            .unwrap_or(&gateway)
            .trim_end_matches('/')
            .to_owned();
        Self {
            gateway,
            http: reqwest::Client::new(),
        }
    }

    pub fn gateway(&self) -> &str {
        &self.gateway
    }

    /// Replaces the cloud's CODE_PUSH delay profile (fault injection only).
    pub async fn set_delays(&self, profile: &DelayProfile) -> Result<DelayProfile, FrontendError> {
        self.send(self.http.put(self.url("/faults")).json(profile))
            .await
    }

    fn url(&self, path: &str) -> String {
        format!("http://{}{path}", self.gateway)
    }

    async fn send<T: DeserializeOwned>(
        &self,
        req: reqwest::RequestBuilder,
    ) -> Result<T, FrontendError> {
        let resp = req
            .send()
            .await
            .map_err(|e| FrontendError::Network(format!("{}: {e}", self.gateway)))?;
        let status = resp.status();
        let body = resp
            .bytes()
            .await
            .map_err(|e| FrontendError::Network(e.to_string()))?;
        if status.is_success() {
            return serde_json::from_slice(&body).map_err(|e| {
                FrontendError::Network(format!("unexpected response from gateway: {e}"))
            });
        }
        let err = serde_json::from_slice::<ApiError>(&body).unwrap_or_else(|_| ApiError {
            error: "internal".into(),
            message: format!("HTTP {status}: {}", String::from_utf8_lossy(&body)),
            fields: vec![],
            diagnostics: vec![],
        });
        Err(FrontendError::Remote(err))
    }
}

impl Transport for HttpTransport {
    async fn call(&self, request: Request) -> Result<Reply, FrontendError> {
        let h = &self.http;
        match request {
            Request::Submit(spec) => Ok(Reply::Submitted(
                self.send(h.post(self.url("/assignments")).json(&spec))
                    .await?,
            )),
            Request::Deploy(spec) => Ok(Reply::Status(
                self.send(h.post(self.url("/modules")).json(&spec)).await?,
            )),
            Request::Cancel(id) => Ok(Reply::Status(
                self.send(h.post(self.url(&format!("/assignments/{id}/cancel"))))
                    .await?,
            )),
            Request::Clients => Ok(Reply::Clients(
                self.send(h.get(self.url("/clients"))).await?,
            )),
            Request::Assignment(id) => Ok(Reply::Assignment(
                self.send(h.get(self.url(&format!("/assignments/{id}"))))
                    .await?,
            )),
            Request::Stream { .. } => Err(FrontendError::Network(
                "streams are opened with Transport::stream".into(),
            )),
        }
    }

    async fn stream(
        &self,
        user_id: &str,
        assignment_id: &str,
    ) -> Result<EnvelopeStream, FrontendError> {
        let url = format!(
            "ws://{}/stream?user_id={user_id}&assignment_id={assignment_id}",
            self.gateway
        );
        let (ws, _) = tokio_tungstenite::connect_async(url)
            .await
            .map_err(|e| FrontendError::Network(format!("{}: {e}", self.gateway)))?;
        let s = ws.filter_map(|msg| async move {
            match msg {
                Ok(Message::Text(text)) => Some(
                    decode_envelope(text.as_bytes())
                        .map_err(|e| FrontendError::Network(e.to_string())),
                ),
                Ok(_) => None,
                Err(e) => Some(Err(FrontendError::Network(e.to_string()))),
            }
        });
        Ok(Box::pin(s))
    }
}

/// Records every request and never reaches a network. Replies come from a
/// queue filled by the test; an empty queue fails the call.
#[derive(Debug, Default)]
pub struct CapturingTransport {
    sent: Mutex<Vec<Request>>,
    replies: Mutex<Vec<Reply>>,
}

impl CapturingTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_replies(replies: Vec<Reply>) -> Self {
        Self {
            sent: Mutex::new(Vec::new()),
            replies: Mutex::new(replies),
        }
    }

    pub fn sent(&self) -> Vec<Request> {
        self.sent.lock().unwrap().clone()
    }
}

impl Transport for CapturingTransport {
    async fn call(&self, request: Request) -> Result<Reply, FrontendError> {
        self.sent.lock().unwrap().push(request);
        let mut replies = self.replies.lock().unwrap();
        if replies.is_empty() {
            return Err(FrontendError::Network(
                "capturing transport has no reply queued".into(),
            ));
        }
        Ok(replies.remove(0))
    }

    async fn stream(
        &self,
        user_id: &str,
        assignment_id: &str,
    ) -> Result<EnvelopeStream, FrontendError> {
        self.sent.lock().unwrap().push(Request::Stream {
            user_id: user_id.to_owned(),
            assignment_id: assignment_id.to_owned(),
        });
        Err(FrontendError::Network(
            "capturing transport cannot stream".into(),
        ))
    }
}
