//! Inference backends: a deterministic seeded mock for simulation-grade
//! tests and an OpenAI-compatible HTTP client for live runs.
//!
//! Both speak the same contract — take an [`InferenceRequest`], return an
//! [`InferenceResult`] — so the live runner is backend-agnostic. The mock's
//! output is a stable digest of its input (plus a count of the response
//! blocks it was shown), which lets end-to-end tests assert prompt
//! construction without real models.

use std::time::{Duration, Instant};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Mutex;
use thiserror::Error;

use crate::dist::ServiceDist;
use crate::protocol::MessageBundle;
use crate::rng::{substream, Stream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

/// One chat-completion call: the wire-visible fields.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InferenceRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
}

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request is malformed: {0}")]
    BadRequest(String),
    #[error("backend configuration: {0}")]
    Config(String),
    #[error("endpoint unreachable: {0}")]
    Unreachable(String),
    #[error("request timed out: {0}")]
    Timeout(String),
    #[error("HTTP status {status}: {detail}")]
    Status { status: u16, detail: String },
    #[error("response body not decodable: {0}")]
    Decode(String),
    #[error("transport error: {0}")]
    Transport(String),
}

impl InferenceRequest {
    pub fn new(
        model: impl Into<String>,
        messages: Vec<ChatMessage>,
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<Self, BackendError> {
        let req = InferenceRequest {
            model: model.into(),
            messages,
            temperature,
            max_tokens,
        };
        req.validate()?;
        Ok(req)
    }

    /// Render a protocol [`MessageBundle`] as a chat-completion request.
    pub fn from_bundle(
        bundle: &MessageBundle,
        model: impl Into<String>,
        temperature: f64,
        max_tokens: Option<u32>,
    ) -> Result<Self, BackendError> {
        let mut messages = Vec::with_capacity(2);
        if let Some(system) = &bundle.system_text {
            messages.push(ChatMessage {
                role: Role::System,
                content: system.clone(),
            });
        }
        messages.push(ChatMessage {
            role: Role::User,
            content: bundle.user_text.clone(),
        });
        Self::new(model, messages, temperature, max_tokens)
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.messages.is_empty() {
            return Err(BackendError::BadRequest("no messages".into()));
        }
        let system_count = self
            .messages
            .iter()
            .filter(|m| m.role == Role::System)
            .count();
        if system_count > 1 {
            return Err(BackendError::BadRequest(
                "more than one system message".into(),
            ));
        }
        if system_count == 1 && self.messages[0].role != Role::System {
            return Err(BackendError::BadRequest(
                "system message must come first".into(),
            ));
        }
        if let Some(empty) = self.messages.iter().position(|m| m.content.is_empty()) {
            return Err(BackendError::BadRequest(format!(
                "message {empty} has empty content"
            )));
        }
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(BackendError::BadRequest(format!(
                "temperature {} out of range",
                self.temperature
            )));
        }
        Ok(())
    }

    fn system_text(&self) -> Option<&str> {
        self.messages
            .iter()
            .find(|m| m.role == Role::System)
            .map(|m| m.content.as_str())
    }

    fn user_text(&self) -> &str {
        self.messages
            .iter()
            .rev()
            .find(|m| m.role == Role::User)
            .map(|m| m.content.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceResult {
    pub text: String,
    /// Wall-clock duration of the call (seconds).
    pub measured_latency: f64,
    pub backend_id: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HealthReport {
    pub backend_id: String,
    pub healthy: bool,
    /// Probe round-trip time (seconds), when a probe was issued.
    pub round_trip: Option<f64>,
    pub detail: String,
}

/// Mock backend: sleeps a sampled delay, answers with a digest transform.
#[derive(Debug, Clone, PartialEq)]
pub struct MockSpec {
    pub node: usize,
    pub delay: ServiceDist,
    pub seed: u64,
}

/// OpenAI-compatible HTTP backend configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct HttpSpec {
    /// Falls back to the MOA_API_BASE environment variable when absent.
    pub base_url: Option<String>,
    pub model: String,
    pub timeout: f64,
    pub max_retries: u32,
    pub backoff_base: f64,
}

impl Default for HttpSpec {
    fn default() -> Self {
        HttpSpec {
            base_url: None,
            model: String::new(),
            timeout: 30.0,
            max_retries: 3,
            backoff_base: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum BackendSpec {
    Mock(MockSpec),
    Http(HttpSpec),
}

impl BackendSpec {
    pub fn build(&self) -> Result<Box<dyn Backend>, BackendError> {
        match self {
            BackendSpec::Mock(spec) => Ok(Box::new(MockBackend::new(spec.clone()))),
            BackendSpec::Http(spec) => Ok(Box::new(HttpBackend::new(spec.clone())?)),
        }
    }

    pub fn validate_spec(&self) -> Result<(), BackendError> {
        match self {
            BackendSpec::Mock(spec) => {
                let mean = spec.delay.mean();
                if !(mean > 0.0 && mean.is_finite()) {
                    return Err(BackendError::Config(format!(
                        "mock delay mean must be positive, got {mean}"
                    )));
                }
            }
            BackendSpec::Http(spec) => {
                if !(spec.timeout > 0.0 && spec.timeout.is_finite()) {
                    return Err(BackendError::Config(format!(
                        "timeout must be positive, got {}",
                        spec.timeout
                    )));
                }
                if !(spec.backoff_base >= 0.0 && spec.backoff_base.is_finite()) {
                    return Err(BackendError::Config(format!(
                        "backoff base must be nonnegative, got {}",
                        spec.backoff_base
                    )));
                }
                if spec.model.is_empty() {
                    return Err(BackendError::Config("model name is empty".into()));
                }
            }
        }
        Ok(())
    }
}

pub trait Backend: Send + Sync {
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResult, BackendError>;
    fn validate(&self) -> HealthReport;
    fn id(&self) -> String;
}

/// Execute one inference against a freshly built backend.
pub fn infer(
    request: &InferenceRequest,
    backend: &BackendSpec,
) -> Result<InferenceResult, BackendError> {
    backend.build()?.infer(request)
}

/// Health-check a backend: mock is always healthy; HTTP probes the
/// endpoint's model listing (a cheap GET, not a chat call) and measures the
/// round trip.
pub fn validate_backend(backend: &BackendSpec) -> HealthReport {
    match backend.build() {
        Ok(b) => b.validate(),
        Err(e) => HealthReport {
            backend_id: "unbuildable".into(),
            healthy: false,
            round_trip: None,
            detail: e.to_string(),
        },
    }
}

fn fnv1a64(bytes: impl IntoIterator<Item = u8>) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

/// Count the numbered response blocks of the concatenation template in a
/// user text: "Response 1 (from node …", "Response 2 (from node …", … must
/// appear in sequence, each starting its own block.
pub fn count_response_blocks(user_text: &str) -> usize {
    let mut count = 0;
    loop {
        let needle = format!("\n\nResponse {} (from node ", count + 1);
        if user_text.contains(&needle) {
            count += 1;
        } else {
            return count;
        }
    }
}

fn mock_transform_parts(node: usize, system_text: Option<&str>, user_text: &str) -> String {
    let bytes = system_text
        .unwrap_or("")
        .bytes()
        .chain(std::iter::once(0x1f))
        .chain(user_text.bytes());
    let digest = fnv1a64(bytes);
    let mut out = format!("MOCK[{node}]:{digest:016x}");
    if system_text.is_some() {
        out.push_str(&format!(":responses={}", count_response_blocks(user_text)));
    }
    out
}

/// Deterministic content transform shared by the simulator and the mock
/// backend: a stable 64-bit digest of the input, tagged with the producing
/// node, plus — when the input carries prior responses — how many response
/// blocks were seen. Content-sensitive yet reproducible.
pub fn mock_transform(node: usize, payload: &MessageBundle) -> String {
    mock_transform_parts(node, payload.system_text.as_deref(), &payload.user_text)
}

pub struct MockBackend {
    spec: MockSpec,
    rng: Mutex<ChaCha8Rng>,
    id: String,
}

impl MockBackend {
    pub fn new(spec: MockSpec) -> Self {
        let rng = substream(spec.seed, Stream::MockBackend, spec.node as u64);
        let id = format!("mock[{}]", spec.node);
        MockBackend {
            spec,
            rng: Mutex::new(rng),
            id,
        }
    }

    /// Sample the next delay without sleeping (simulation-style use).
    pub fn sample_delay(&self) -> f64 {
        let mut rng = self.rng.lock().expect("mock rng poisoned");
        self.spec.delay.sample(&mut *rng)
    }
}

impl Backend for MockBackend {
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResult, BackendError> {
        request.validate()?;
        let delay = self.sample_delay();
        std::thread::sleep(Duration::from_secs_f64(delay));
        Ok(InferenceResult {
            text: mock_transform_parts(self.spec.node, request.system_text(), request.user_text()),
            measured_latency: delay,
            backend_id: self.id.clone(),
        })
    }

    fn validate(&self) -> HealthReport {
        HealthReport {
            backend_id: self.id.clone(),
            healthy: true,
            round_trip: None,
            detail: "mock backend is always healthy".into(),
        }
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

#[derive(Deserialize)]
struct ChatChoiceMessage {
    content: String,
}

#[derive(Deserialize)]
struct ChatChoice {
    message: ChatChoiceMessage,
}

#[derive(Deserialize)]
struct ChatCompletionResponse {
    choices: Vec<ChatChoice>,
}

pub struct HttpBackend {
    spec: HttpSpec,
    client: reqwest::blocking::Client,
    base_url: String,
    api_key: Option<String>,
    id: String,
}

/// Upper bound of the i-th backoff sleep (0-based): base · 2^i. The actual
/// sleep is jittered uniformly in [0.8, 1.2] of the bound.
pub fn backoff_bound(base: f64, attempt: u32) -> f64 {
    base * 2f64.powi(attempt as i32)
}

fn retryable(err: &BackendError) -> bool {
    match err {
        BackendError::Timeout(_) | BackendError::Unreachable(_) => true,
        BackendError::Status { status, .. } => *status == 429 || *status >= 500,
        _ => false,
    }
}

impl HttpBackend {
    pub fn new(spec: HttpSpec) -> Result<Self, BackendError> {
        BackendSpec::Http(spec.clone()).validate_spec()?;
        let base_url = spec
            .base_url
            .clone()
            .or_else(|| std::env::var("MOA_API_BASE").ok())
            .ok_or_else(|| {
                BackendError::Config(
                    "no base URL: set base_url in the config or MOA_API_BASE in the environment"
                        .into(),
                )
            })?;
        let base_url = base_url.trim_end_matches('/').to_string();
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs_f64(spec.timeout))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let api_key = std::env::var("MOA_API_KEY").ok();
        let id = format!("{} @ {}", spec.model, base_url);
        Ok(HttpBackend {
            spec,
            client,
            base_url,
            api_key,
            id,
        })
    }

    fn classify(err: reqwest::Error) -> BackendError {
        if err.is_timeout() {
            BackendError::Timeout(err.to_string())
        } else if err.is_connect() {
            BackendError::Unreachable(err.to_string())
        } else {
            BackendError::Transport(err.to_string())
        }
    }

    fn post_once(&self, request: &InferenceRequest) -> Result<String, BackendError> {
        let url = format!("{}/chat/completions", self.base_url);
        let mut call = self.client.post(&url).json(request);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let response = call.send().map_err(Self::classify)?;
        let status = response.status();
        if !status.is_success() {
            let detail = response.text().unwrap_or_default();
            return Err(BackendError::Status {
                status: status.as_u16(),
                detail: detail.chars().take(200).collect(),
            });
        }
        let body: ChatCompletionResponse = response
            .json()
            .map_err(|e| BackendError::Decode(e.to_string()))?;
        let text = body
            .choices
            .first()
            .map(|c| c.message.content.clone())
            .ok_or_else(|| BackendError::Decode("response has no choices".into()))?;
        if text.is_empty() {
            return Err(BackendError::Decode("choice content is empty".into()));
        }
        Ok(text)
    }
}

impl Backend for HttpBackend {
    /// POST the chat-completion request, retrying timeouts, connection
    /// failures, 429 and 5xx with jittered exponential backoff. Client
    /// errors and undecodable bodies are surfaced immediately.
    fn infer(&self, request: &InferenceRequest) -> Result<InferenceResult, BackendError> {
        request.validate()?;
        let started = Instant::now();
        let mut attempt = 0u32;
        loop {
            match self.post_once(request) {
                Ok(text) => {
                    return Ok(InferenceResult {
                        text,
                        measured_latency: started.elapsed().as_secs_f64(),
                        backend_id: self.id.clone(),
                    });
                }
                Err(err) if retryable(&err) && attempt < self.spec.max_retries => {
                    let bound = backoff_bound(self.spec.backoff_base, attempt);
                    let jitter = rand::rng().random_range(0.8..1.2);
                    std::thread::sleep(Duration::from_secs_f64(bound * jitter));
                    attempt += 1;
                }
                Err(err) => return Err(err),
            }
        }
    }

    fn validate(&self) -> HealthReport {
        let url = format!("{}/models", self.base_url);
        let mut call = self.client.get(&url);
        if let Some(key) = &self.api_key {
            call = call.bearer_auth(key);
        }
        let started = Instant::now();
        match call.send() {
            Ok(response) => {
                let rtt = started.elapsed().as_secs_f64();
                let status = response.status();
                HealthReport {
                    backend_id: self.id.clone(),
                    healthy: status.is_success(),
                    round_trip: Some(rtt),
                    detail: format!("GET /models -> {}", status.as_u16()),
                }
            }
            Err(err) => HealthReport {
                backend_id: self.id.clone(),
                healthy: false,
                round_trip: None,
                detail: Self::classify(err).to_string(),
            },
        }
    }

    fn id(&self) -> String {
        self.id.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle(system: Option<&str>, user: &str) -> MessageBundle {
        MessageBundle {
            system_text: system.map(str::to_string),
            user_text: user.to_string(),
        }
    }

    #[test]
    fn request_wire_format_is_exact() {
        let req = InferenceRequest::new(
            "test-model",
            vec![
                ChatMessage {
                    role: Role::System,
                    content: "sys".into(),
                },
                ChatMessage {
                    role: Role::User,
                    content: "hello".into(),
                },
            ],
            0.7,
            None,
        )
        .unwrap();
        let json = serde_json::to_value(&req).unwrap();
        let object = json.as_object().unwrap();
        let mut keys: Vec<&str> = object.keys().map(String::as_str).collect();
        keys.sort_unstable();
        assert_eq!(keys, vec!["messages", "model", "temperature"]);
        assert_eq!(json["temperature"], 0.7);
        assert_eq!(json["messages"][0]["role"], "system");
        assert_eq!(json["messages"][1]["content"], "hello");

        let capped = InferenceRequest::new("m", req.messages.clone(), 0.7, Some(256)).unwrap();
        let json = serde_json::to_value(&capped).unwrap();
        assert_eq!(json["max_tokens"], 256);
    }

    #[test]
    fn request_roundtrips_through_json() {
        let req = InferenceRequest::new(
            "m",
            vec![
                ChatMessage {
                    role: Role::System,
                    content: "a".into(),
                },
                ChatMessage {
                    role: Role::User,
                    content: "b".into(),
                },
            ],
            0.7,
            None,
        )
        .unwrap();
        let json = serde_json::to_string(&req).unwrap();
        let value: serde_json::Value = serde_json::from_str(&json).unwrap();
        let messages: Vec<ChatMessage> =
            serde_json::from_value(value["messages"].clone()).unwrap();
        assert_eq!(messages, req.messages);
        assert_eq!(value["temperature"].as_f64(), Some(0.7));
    }

    #[test]
    fn request_validation_rejects_malformed_shapes() {
        let sys = ChatMessage {
            role: Role::System,
            content: "s".into(),
        };
        let user = ChatMessage {
            role: Role::User,
            content: "u".into(),
        };
        assert!(InferenceRequest::new("m", vec![], 0.7, None).is_err());
        assert!(
            InferenceRequest::new("m", vec![user.clone(), sys.clone()], 0.7, None).is_err(),
            "system message must be first"
        );
        assert!(
            InferenceRequest::new("m", vec![sys.clone(), sys.clone(), user.clone()], 0.7, None)
                .is_err(),
            "at most one system message"
        );
        assert!(InferenceRequest::new(
            "m",
            vec![ChatMessage {
                role: Role::User,
                content: String::new(),
            }],
            0.7,
            None
        )
        .is_err());
        assert!(InferenceRequest::new("m", vec![user.clone()], f64::NAN, None).is_err());
        assert!(InferenceRequest::new("m", vec![sys, user], 0.7, None).is_ok());
    }

    #[test]
    fn from_bundle_places_system_first() {
        let req =
            InferenceRequest::from_bundle(&bundle(Some("inst"), "query"), "m", 0.7, None).unwrap();
        assert_eq!(req.messages.len(), 2);
        assert_eq!(req.messages[0].role, Role::System);
        assert_eq!(req.messages[1].role, Role::User);

        let bare = InferenceRequest::from_bundle(&bundle(None, "query"), "m", 0.7, None).unwrap();
        assert_eq!(bare.messages.len(), 1);
        assert_eq!(bare.messages[0].role, Role::User);
    }

    #[test]
    fn mock_transform_is_stable_and_content_sensitive() {
        let a = mock_transform(3, &bundle(None, "x"));
        assert_eq!(a, mock_transform(3, &bundle(None, "x")));
        assert!(a.starts_with("MOCK[3]:"));
        assert!(!a.contains(":responses="), "bare prompts carry no count");
        assert_ne!(a, mock_transform(3, &bundle(None, "y")));
        assert_ne!(a, mock_transform(2, &bundle(None, "x")));
        assert_ne!(
            mock_transform(3, &bundle(Some("s"), "x")),
            mock_transform(3, &bundle(None, "x")),
            "system text must affect the digest"
        );
    }

    #[test]
    fn mock_transform_counts_response_blocks() {
        let user = "orig\n\nResponse 1 (from node 0):\nA\n\nResponse 2 (from node 2):\nB";
        let out = mock_transform(1, &bundle(Some("sys"), user));
        assert!(out.ends_with(":responses=2"), "got {out}");
        assert_eq!(count_response_blocks(user), 2);
        assert_eq!(count_response_blocks("no blocks here"), 0);
        // numbering must be sequential to count
        assert_eq!(
            count_response_blocks("x\n\nResponse 2 (from node 0):\nA"),
            0
        );
    }

    #[test]
    fn mock_backend_sequence_is_reproducible() {
        let spec = MockSpec {
            node: 1,
            delay: ServiceDist::Exponential { mean: 1e-6 },
            seed: 99,
        };
        let req = InferenceRequest::from_bundle(&bundle(None, "q"), "m", 0.7, None).unwrap();
        let run = |spec: &MockSpec| {
            let backend = MockBackend::new(spec.clone());
            (0..20)
                .map(|_| {
                    let r = backend.infer(&req).unwrap();
                    (r.measured_latency, r.text)
                })
                .collect::<Vec<_>>()
        };
        assert_eq!(run(&spec), run(&spec));
    }

    #[test]
    fn mock_backend_delay_calibration() {
        let spec = MockSpec {
            node: 0,
            delay: ServiceDist::Exponential { mean: 0.5 },
            seed: 7,
        };
        let backend = MockBackend::new(spec);
        let n = 100_000;
        let total: f64 = (0..n).map(|_| backend.sample_delay()).sum();
        let mean = total / f64::from(n);
        assert!((mean - 0.5).abs() < 0.01, "mock delay mean {mean}");
    }

    #[test]
    fn mock_validation_always_healthy() {
        let spec = BackendSpec::Mock(MockSpec {
            node: 0,
            delay: ServiceDist::Deterministic { mean: 0.001 },
            seed: 1,
        });
        let health = validate_backend(&spec);
        assert!(health.healthy);
    }

    #[test]
    fn backoff_bounds_grow_geometrically() {
        assert_eq!(backoff_bound(0.5, 0), 0.5);
        assert_eq!(backoff_bound(0.5, 1), 1.0);
        assert_eq!(backoff_bound(0.5, 2), 2.0);
        assert_eq!(backoff_bound(0.5, 3), 4.0);
    }

    #[test]
    fn retryability_classification() {
        assert!(retryable(&BackendError::Timeout("t".into())));
        assert!(retryable(&BackendError::Unreachable("u".into())));
        assert!(retryable(&BackendError::Status {
            status: 429,
            detail: String::new()
        }));
        assert!(retryable(&BackendError::Status {
            status: 503,
            detail: String::new()
        }));
        assert!(!retryable(&BackendError::Status {
            status: 404,
            detail: String::new()
        }));
        assert!(!retryable(&BackendError::Decode("d".into())));
        assert!(!retryable(&BackendError::BadRequest("b".into())));
    }

    #[test]
    fn http_spec_validation() {
        let mut spec = HttpSpec {
            model: "m".into(),
            ..HttpSpec::default()
        };
        assert!(BackendSpec::Http(spec.clone()).validate_spec().is_ok());
        spec.timeout = 0.0;
        assert!(BackendSpec::Http(spec.clone()).validate_spec().is_err());
        spec.timeout = 30.0;
        spec.model = String::new();
        assert!(BackendSpec::Http(spec).validate_spec().is_err());
    }

    #[test]
    fn http_backend_requires_a_base_url() {
        // guard against env leakage from the test harness
        if std::env::var("MOA_API_BASE").is_ok() {
            return;
        }
        let err = HttpBackend::new(HttpSpec {
            model: "m".into(),
            ..HttpSpec::default()
        })
        .err()
        .expect("must fail without a base URL");
        assert!(matches!(err, BackendError::Config(_)));
    }
}
