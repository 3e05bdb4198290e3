//! Minimal blocking HTTP layer shared by the LLM client, the embedding
//! provider and the EDGAR client.
//!
//! [`UreqTransport`] talks to the network. [`ReplayTransport`] serves recorded
//! fixtures and counts calls, which is what the test suite uses.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TransportError {
    #[error("connection failed: {0}")]
    Connect(String),
    #[error("request timed out")]
    Timeout,
    #[error("no recorded response for {method} {url}")]
    NoFixture { method: String, url: String },
    #[error("transport error: {0}")]
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpRequest {
    pub method: String,
    pub url: String,
    pub headers: Vec<(String, String)>,
    pub body: Option<Vec<u8>>,
    pub timeout: Option<Duration>,
}

impl HttpRequest {
    pub fn get(url: impl Into<String>) -> Self {
        Self {
            method: "GET".into(),
            url: url.into(),
            headers: Vec::new(),
            body: None,
            timeout: None,
        }
    }

    pub fn post_json(url: impl Into<String>, body: &serde_json::Value) -> Self {
        Self {
            method: "POST".into(),
            url: url.into(),
            headers: vec![("Content-Type".into(), "application/json".into())],
            body: Some(serde_json::to_vec(body).expect("json value serializes")),
            timeout: None,
        }
    }

    pub fn header(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn timeout(mut self, timeout: Duration) -> Self {
        self.timeout = Some(timeout);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl HttpResponse {
    pub fn ok(body: impl Into<Vec<u8>>) -> Self {
        let body = body.into();
        Self {
            status: 200,
            headers: vec![("content-length".into(), body.len().to_string())],
            body,
        }
    }

    pub fn status(status: u16, body: impl Into<Vec<u8>>) -> Self {
        Self {
            status,
            headers: Vec::new(),
            body: body.into(),
        }
    }

    /// Sets a header, replacing any existing value of the same name.
    pub fn with_header(mut self, name: &str, value: &str) -> Self {
        self.headers.retain(|(k, _)| !k.eq_ignore_ascii_case(name));
        self.headers.push((name.to_string(), value.to_string()));
        self
    }

    /// Case-insensitive header lookup.
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    pub fn text(&self) -> String {
        String::from_utf8_lossy(&self.body).into_owned()
    }
}

pub trait HttpTransport: Send + Sync {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError>;
}

/// Live transport backed by `ureq`.
pub struct UreqTransport {
    agent: ureq::Agent,
}

impl UreqTransport {
    pub fn new() -> Self {
        let config = ureq::Agent::config_builder()
            .http_status_as_error(false)
            .build();
        Self {
            agent: ureq::Agent::new_with_config(config),
        }
    }
}

impl Default for UreqTransport {
    fn default() -> Self {
        Self::new()
    }
}

fn map_ureq_error(e: ureq::Error) -> TransportError {
    match e {
        ureq::Error::Timeout(_) => TransportError::Timeout,
        ureq::Error::Io(io) => TransportError::Connect(io.to_string()),
        ureq::Error::HostNotFound | ureq::Error::ConnectionFailed => TransportError::Connect(e.to_string()),
        other => TransportError::Other(other.to_string()),
    }
}

impl HttpTransport for UreqTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        let mut builder = ureq::http::Request::builder()
            .method(request.method.as_str())
            .uri(request.url.as_str());
        for (k, v) in &request.headers {
            builder = builder.header(k.as_str(), v.as_str());
        }
        let body = request.body.clone().unwrap_or_default();
        let req = builder
            .body(body)
            .map_err(|e| TransportError::Other(e.to_string()))?;
        let mut config = self.agent.configure_request(req);
        if let Some(t) = request.timeout {
            config = config.timeout_global(Some(t));
        }
        let mut resp = self
            .agent
            .run(config.build())
            .map_err(map_ureq_error)?;
        let status = resp.status().as_u16();
        let headers = resp
            .headers()
            .iter()
            .map(|(k, v)| (k.as_str().to_string(), v.to_str().unwrap_or("").to_string()))
            .collect();
        let body = resp
            .body_mut()
            .with_config()
            .limit(512 * 1024 * 1024)
            .read_to_vec()
            .map_err(map_ureq_error)?;
        Ok(HttpResponse { status, headers, body })
    }
}

/// One recorded exchange. Responses for the same key are served in order;
/// the last one repeats.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Fixture {
    pub method: String,
    pub url: String,
    pub status: u16,
    #[serde(default)]
    pub headers: Vec<(String, String)>,
    /// UTF-8 body; use `body_file` for binary content.
    #[serde(default)]
    pub body: Option<String>,
    #[serde(default)]
    pub body_file: Option<String>,
}

/// Serves responses from recorded fixtures and never touches the network.
#[derive(Default)]
pub struct ReplayTransport {
    responses: Mutex<BTreeMap<(String, String), Vec<HttpResponse>>>,
    calls: AtomicUsize,
    log: Mutex<Vec<HttpRequest>>,
}

impl ReplayTransport {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(self, method: &str, url: &str, response: HttpResponse) -> Self {
        self.add(method, url, response);
        self
    }

    pub fn add(&self, method: &str, url: &str, response: HttpResponse) {
        self.responses
            .lock()
            .unwrap()
            .entry((method.to_uppercase(), url.to_string()))
            .or_default()
            .push(response);
    }

    /// Loads a JSON array of [`Fixture`]s; `body_file` paths are relative to
    /// the fixture file.
    pub fn from_fixture_file(path: &Path) -> std::io::Result<Self> {
        let text = fs::read_to_string(path)?;
        let fixtures: Vec<Fixture> =
            serde_json::from_str(&text).map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let t = Self::new();
        for f in fixtures {
            let body = match (&f.body, &f.body_file) {
                (_, Some(file)) => fs::read(base.join(file))?,
                (Some(b), None) => b.clone().into_bytes(),
                (None, None) => Vec::new(),
            };
            t.add(
                &f.method,
                &f.url,
                HttpResponse {
                    status: f.status,
                    headers: f.headers,
                    body,
                },
            );
        }
        Ok(t)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn requests(&self) -> Vec<HttpRequest> {
        self.log.lock().unwrap().clone()
    }
}

impl HttpTransport for ReplayTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.log.lock().unwrap().push(request.clone());
        let key = (request.method.to_uppercase(), request.url.clone());
        let mut map = self.responses.lock().unwrap();
        match map.get_mut(&key) {
            Some(queue) if queue.len() > 1 => Ok(queue.remove(0)),
            Some(queue) if queue.len() == 1 => Ok(queue[0].clone()),
            _ => Err(TransportError::NoFixture {
                method: key.0,
                url: key.1,
            }),
        }
    }
}

/// Transport that refuses every request; used to prove a code path is offline.
pub struct OfflineTransport;

impl HttpTransport for OfflineTransport {
    fn execute(&self, request: &HttpRequest) -> Result<HttpResponse, TransportError> {
        Err(TransportError::Connect(format!("offline: {}", request.url)))
    }
}
