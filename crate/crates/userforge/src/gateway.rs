//! Chat-completion gateway used by every LLM-dependent stage.
//!
//! All model traffic — rewriting, scoring, synthesis, quality control,
//! distractor generation, judge scoring — flows through [`Gateway`], which
//! owns the admission limit (at most `max_concurrent` requests in flight)
//! and the retry policy (exponential backoff on transient failures). The
//! backend behind it is either `live` (an OpenAI-compatible HTTP endpoint)
//! or `mock` (deterministic, fixture-driven; see [`mock`]).
//!
//! Determinism is guaranteed only on the mock path. On the live path
//! `seed_hint` is forwarded when present, but endpoints are free to ignore
//! it.

pub mod mock;

use std::path::PathBuf;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding::sha256_hex;

/// Sampling temperature used when a request does not override it.
pub const DEFAULT_TEMPERATURE: f64 = 0.7;
pub const DEFAULT_MAX_TOKENS: u32 = 1024;
/// Environment variable holding the bearer token for live endpoints.
pub const API_KEY_ENV: &str = "USERFORGE_API_KEY";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::User,
            content: content.into(),
        }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        ChatMessage {
            role: Role::Assistant,
            content: content.into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_name: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed_hint: Option<u64>,
}

impl ChatRequest {
    pub fn new(model_name: impl Into<String>, messages: Vec<ChatMessage>) -> Result<Self> {
        let req = ChatRequest {
            model_name: model_name.into(),
            messages,
            temperature: DEFAULT_TEMPERATURE,
            max_tokens: DEFAULT_MAX_TOKENS,
            seed_hint: None,
        };
        req.validate()?;
        Ok(req)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn with_max_tokens(mut self, max_tokens: u32) -> Self {
        self.max_tokens = max_tokens;
        self
    }

    pub fn with_seed_hint(mut self, seed_hint: u64) -> Self {
        self.seed_hint = Some(seed_hint);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.messages.is_empty() {
            return Err(Error::config("chat request has no messages"));
        }
        if self.messages[0].role == Role::Assistant {
            return Err(Error::config(
                "chat request must open with a system or user message",
            ));
        }
        if self.temperature < 0.0 {
            return Err(Error::config("temperature must be >= 0"));
        }
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be positive"));
        }
        Ok(())
    }

    /// Content digest used for fixture lookup and mock seeding: sha256 over
    /// the model name and the message sequence. The model name is included
    /// deliberately so the same prompt sent to different models (distractor
    /// generation) resolves to different canned responses. Sampling knobs
    /// are excluded, so a retry with identical messages hits the same
    /// fixture while a corrective re-ask (which appends a message) does
    /// not.
    pub fn digest(&self) -> String {
        let canonical = serde_json::json!({
            "model": self.model_name,
            "messages": self
                .messages
                .iter()
                .map(|m| serde_json::json!({"role": m.role, "content": m.content}))
                .collect::<Vec<_>>(),
        });
        sha256_hex(serde_json::to_string(&canonical).expect("serializable").as_bytes())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub content: String,
    pub finish_reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryConfig {
    pub max_attempts: u32,
    pub backoff_base_ms: u64,
}

impl Default for RetryConfig {
    fn default() -> Self {
        RetryConfig {
            max_attempts: 3,
            backoff_base_ms: 200,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GatewayConfig {
    pub endpoint_url: String,
    pub max_concurrent: usize,
    pub retry: RetryConfig,
    pub timeout_ms: u64,
    pub backend: BackendKind,
    /// Directory of canned responses, named `<request digest>.txt`.
    /// Required when `backend = mock`.
    pub fixtures_dir: Option<PathBuf>,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        GatewayConfig {
            endpoint_url: String::new(),
            max_concurrent: 4,
            retry: RetryConfig::default(),
            timeout_ms: 30_000,
            backend: BackendKind::Mock,
            fixtures_dir: None,
        }
    }
}

impl GatewayConfig {
    pub fn validate(&self) -> Result<()> {
        if self.retry.max_attempts < 1 {
            return Err(Error::config("retry.max_attempts must be >= 1"));
        }
        if self.max_concurrent < 1 {
            return Err(Error::config("max_concurrent must be >= 1"));
        }
        if self.backend == BackendKind::Mock && self.fixtures_dir.is_none() {
            return Err(Error::config("mock backend requires fixtures_dir"));
        }
        if self.backend == BackendKind::Live && self.endpoint_url.is_empty() {
            return Err(Error::config("live backend requires endpoint_url"));
        }
        Ok(())
    }
}

/// Outcome of a single backend attempt. The gateway decides whether to try
/// again; backends only classify.
#[derive(Debug)]
pub enum AttemptError {
    /// Transient (HTTP 429/5xx, connection failure): worth retrying.
    Retryable(String),
    /// The attempt hit the configured timeout: worth retrying.
    TimedOut(String),
    /// Permanent (malformed request, auth failure): retrying cannot help.
    Fatal(String),
}

/// A single-attempt chat completion provider.
pub trait Backend: Send + Sync {
    fn complete_once(&self, req: &ChatRequest) -> std::result::Result<Completion, AttemptError>;
}

/// Counting semaphore on std primitives; `acquire` blocks while the limit
/// is saturated and the permit releases on drop.
struct Semaphore {
    permits: Mutex<usize>,
    available: Condvar,
}

impl Semaphore {
    fn new(count: usize) -> Self {
        Semaphore {
            permits: Mutex::new(count),
            available: Condvar::new(),
        }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut permits = self.permits.lock().expect("semaphore lock");
        while *permits == 0 {
            permits = self.available.wait(permits).expect("semaphore wait");
        }
        *permits -= 1;
        Permit(self)
    }
}

struct Permit<'a>(&'a Semaphore);

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut permits = self.0.permits.lock().expect("semaphore lock");
        *permits += 1;
        self.0.available.notify_one();
    }
}

/// Backoff delay before retry attempt `n + 2` (0-based slot `n`):
/// exponential doubling from the base, saturating instead of overflowing.
fn backoff_delays(base_ms: u64, max_attempts: u32) -> Vec<u64> {
    (0..max_attempts.saturating_sub(1))
        .map(|slot| base_ms.saturating_mul(1u64.checked_shl(slot).unwrap_or(u64::MAX)))
        .collect()
}

pub struct Gateway {
    backend: Box<dyn Backend>,
    semaphore: Semaphore,
    retry: RetryConfig,
    timeout_ms: u64,
}

impl Gateway {
    /// Builds the gateway described by the config, wiring up the live or
    /// mock backend.
    pub fn new(config: &GatewayConfig) -> Result<Self> {
        config.validate()?;
        let backend: Box<dyn Backend> = match config.backend {
            BackendKind::Mock => Box::new(mock::MockBackend::new(
                config.fixtures_dir.clone().expect("validated above"),
            )?),
            BackendKind::Live => Box::new(LiveBackend::new(
                &config.endpoint_url,
                config.timeout_ms,
                std::env::var(API_KEY_ENV).ok(),
            )?),
        };
        Ok(Gateway {
            backend,
            semaphore: Semaphore::new(config.max_concurrent),
            retry: config.retry.clone(),
            timeout_ms: config.timeout_ms,
        })
    }

    /// Wraps an arbitrary backend — how tests inject scripted responders.
    pub fn from_backend(backend: Box<dyn Backend>, max_concurrent: usize, retry: RetryConfig) -> Self {
        Gateway {
            backend,
            semaphore: Semaphore::new(max_concurrent),
            retry,
            timeout_ms: 30_000,
        }
    }

    /// Issues one completion, holding an admission permit for the whole
    /// call (retries included) so at most `max_concurrent` requests are in
    /// flight at once.
    pub fn complete(&self, req: &ChatRequest) -> Result<Completion> {
        req.validate()?;
        let _permit = self.semaphore.acquire();
        let delays = backoff_delays(self.retry.backoff_base_ms, self.retry.max_attempts);
        let mut attempt_log: Vec<String> = Vec::new();
        let mut last_was_timeout = false;
        for attempt in 1..=self.retry.max_attempts {
            match self.backend.complete_once(req) {
                Ok(completion) => return Ok(completion),
                Err(AttemptError::Fatal(detail)) => {
                    attempt_log.push(format!("attempt {attempt}: {detail}"));
                    return Err(Error::Transport {
                        attempts: attempt,
                        detail: attempt_log.join("; "),
                    });
                }
                Err(AttemptError::Retryable(detail)) => {
                    last_was_timeout = false;
                    attempt_log.push(format!("attempt {attempt}: {detail}"));
                }
                Err(AttemptError::TimedOut(detail)) => {
                    last_was_timeout = true;
                    attempt_log.push(format!("attempt {attempt}: {detail}"));
                }
            }
            if let Some(delay) = delays.get(attempt as usize - 1) {
                std::thread::sleep(Duration::from_millis(*delay));
            }
        }
        if last_was_timeout {
            return Err(Error::Timeout(self.timeout_ms));
        }
        Err(Error::Transport {
            attempts: self.retry.max_attempts,
            detail: attempt_log.join("; "),
        })
    }
}

/// OpenAI-compatible HTTP backend.
struct LiveBackend {
    client: reqwest::blocking::Client,
    url: String,
    api_key: Option<String>,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireMessage,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    content: String,
}

impl LiveBackend {
    fn new(endpoint_url: &str, timeout_ms: u64, api_key: Option<String>) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(timeout_ms))
            .build()
            .map_err(|e| Error::config(format!("http client: {e}")))?;
        let url = if endpoint_url.ends_with("/chat/completions") {
            endpoint_url.to_string()
        } else {
            format!("{}/chat/completions", endpoint_url.trim_end_matches('/'))
        };
        Ok(LiveBackend {
            client,
            url,
            api_key,
        })
    }
}

impl Backend for LiveBackend {
    fn complete_once(&self, req: &ChatRequest) -> std::result::Result<Completion, AttemptError> {
        let mut body = serde_json::json!({
            "model": req.model_name,
            "messages": req.messages,
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        if let Some(seed) = req.seed_hint {
            body["seed"] = serde_json::json!(seed);
        }
        let mut request = self.client.post(&self.url).json(&body);
        if let Some(key) = &self.api_key {
            request = request.bearer_auth(key);
        }
        let response = request.send().map_err(|e| {
            if e.is_timeout() {
                AttemptError::TimedOut(format!("request timed out: {e}"))
            } else {
                AttemptError::Retryable(format!("network failure: {e}"))
            }
        })?;
        let status = response.status();
        if status.as_u16() == 429 || status.is_server_error() {
            return Err(AttemptError::Retryable(format!("HTTP {status}")));
        }
        if !status.is_success() {
            let body = response.text().unwrap_or_default();
            let snippet: String = body.chars().take(200).collect();
            return Err(AttemptError::Fatal(format!("HTTP {status}: {snippet}")));
        }
        let wire: WireResponse = response
            .json()
            .map_err(|e| AttemptError::Fatal(format!("unparseable response body: {e}")))?;
        let choice = wire
            .choices
            .into_iter()
            .next()
            .ok_or_else(|| AttemptError::Fatal("response had no choices".to_string()))?;
        Ok(Completion {
            content: choice.message.content,
            finish_reason: choice.finish_reason.unwrap_or_else(|| "stop".to_string()),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testkit::{FakeServer, ScriptedResponse};
    use std::sync::atomic::{AtomicU32, Ordering};
    use std::sync::Arc;

    fn request() -> ChatRequest {
        ChatRequest::new("test-model", vec![ChatMessage::user("hello")]).unwrap()
    }

    #[test]
    fn request_defaults_and_validation() {
        let req = request();
        assert_eq!(req.temperature, DEFAULT_TEMPERATURE);
        assert!(ChatRequest::new("m", vec![]).is_err());
        assert!(ChatRequest::new("m", vec![ChatMessage::assistant("hi")]).is_err());
        assert!(request().with_temperature(-0.1).validate().is_err());
        assert!(request().with_max_tokens(0).validate().is_err());
    }

    #[test]
    fn digest_covers_model_name_and_messages_only() {
        let a = request();
        let b = request().with_temperature(0.0).with_max_tokens(9);
        assert_eq!(a.digest(), b.digest());
        let other_model = ChatRequest::new("other", vec![ChatMessage::user("hello")]).unwrap();
        assert_ne!(a.digest(), other_model.digest());
        let other_text = ChatRequest::new("test-model", vec![ChatMessage::user("bye")]).unwrap();
        assert_ne!(a.digest(), other_text.digest());
    }

    #[test]
    fn backoff_is_exponential_and_non_decreasing() {
        let delays = backoff_delays(100, 4);
        assert_eq!(delays, vec![100, 200, 400]);
        for pair in delays.windows(2) {
            assert!(pair[0] <= pair[1]);
        }
        assert!(backoff_delays(100, 1).is_empty());
        // Saturates instead of overflowing at absurd attempt counts.
        let big = backoff_delays(u64::MAX / 2, 5);
        assert_eq!(big.last(), Some(&u64::MAX));
    }

    struct FailNTimes {
        failures: AtomicU32,
    }

    impl Backend for FailNTimes {
        fn complete_once(&self, _req: &ChatRequest) -> std::result::Result<Completion, AttemptError> {
            if self.failures.fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| {
                if n > 0 {
                    Some(n - 1)
                } else {
                    None
                }
            }).is_ok()
            {
                Err(AttemptError::Retryable("scripted failure".to_string()))
            } else {
                Ok(Completion {
                    content: "ok".to_string(),
                    finish_reason: "stop".to_string(),
                })
            }
        }
    }

    #[test]
    fn retries_until_success_within_budget() {
        let gateway = Gateway::from_backend(
            Box::new(FailNTimes {
                failures: AtomicU32::new(2),
            }),
            1,
            RetryConfig {
                max_attempts: 3,
                backoff_base_ms: 1,
            },
        );
        assert_eq!(gateway.complete(&request()).unwrap().content, "ok");
    }

    #[test]
    fn single_attempt_budget_fails_fast() {
        let gateway = Gateway::from_backend(
            Box::new(FailNTimes {
                failures: AtomicU32::new(10),
            }),
            1,
            RetryConfig {
                max_attempts: 1,
                backoff_base_ms: 1,
            },
        );
        let err = gateway.complete(&request()).unwrap_err();
        match err {
            Error::Transport { attempts, detail } => {
                assert_eq!(attempts, 1);
                assert!(detail.contains("attempt 1"));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn fatal_errors_do_not_retry() {
        struct AlwaysFatal;
        impl Backend for AlwaysFatal {
            fn complete_once(
                &self,
                _req: &ChatRequest,
            ) -> std::result::Result<Completion, AttemptError> {
                Err(AttemptError::Fatal("bad request".to_string()))
            }
        }
        let gateway = Gateway::from_backend(
            Box::new(AlwaysFatal),
            1,
            RetryConfig {
                max_attempts: 5,
                backoff_base_ms: 1,
            },
        );
        let err = gateway.complete(&request()).unwrap_err();
        match err {
            Error::Transport { attempts, .. } => assert_eq!(attempts, 1),
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn live_backend_recovers_after_two_rate_limits() {
        let ok_body = r#"{"choices":[{"message":{"content":"served"},"finish_reason":"stop"}]}"#;
        let server = FakeServer::start(vec![
            ScriptedResponse::status(429),
            ScriptedResponse::status(429),
            ScriptedResponse::ok_json(ok_body),
        ]);
        let config = GatewayConfig {
            endpoint_url: server.url(),
            backend: BackendKind::Live,
            retry: RetryConfig {
                max_attempts: 3,
                backoff_base_ms: 1,
            },
            ..GatewayConfig::default()
        };
        let gateway = Gateway::new(&config).unwrap();
        let completion = gateway.complete(&request()).unwrap();
        assert_eq!(completion.content, "served");
        assert_eq!(server.hits(), 3);
    }

    #[test]
    fn live_backend_gives_up_after_max_attempts() {
        let server = FakeServer::start(vec![
            ScriptedResponse::status(500),
            ScriptedResponse::status(502),
        ]);
        let config = GatewayConfig {
            endpoint_url: server.url(),
            backend: BackendKind::Live,
            retry: RetryConfig {
                max_attempts: 2,
                backoff_base_ms: 1,
            },
            ..GatewayConfig::default()
        };
        let gateway = Gateway::new(&config).unwrap();
        let err = gateway.complete(&request()).unwrap_err();
        match err {
            Error::Transport { attempts, detail } => {
                assert_eq!(attempts, 2);
                assert!(detail.contains("HTTP 500"));
                assert!(detail.contains("HTTP 502"));
            }
            other => panic!("expected transport error, got {other:?}"),
        }
    }

    #[test]
    fn live_backend_4xx_is_fatal() {
        let server = FakeServer::start(vec![ScriptedResponse::status(400)]);
        let config = GatewayConfig {
            endpoint_url: server.url(),
            backend: BackendKind::Live,
            retry: RetryConfig {
                max_attempts: 3,
                backoff_base_ms: 1,
            },
            ..GatewayConfig::default()
        };
        let gateway = Gateway::new(&config).unwrap();
        assert!(gateway.complete(&request()).is_err());
        assert_eq!(server.hits(), 1, "a 400 must not be retried");
    }

    #[test]
    fn concurrency_never_exceeds_limit() {
        let ok_body = r#"{"choices":[{"message":{"content":"x"},"finish_reason":"stop"}]}"#;
        let responses = vec![ScriptedResponse::ok_json(ok_body).with_delay_ms(25); 12];
        let server = FakeServer::start(responses);
        let config = GatewayConfig {
            endpoint_url: server.url(),
            backend: BackendKind::Live,
            max_concurrent: 3,
            retry: RetryConfig {
                max_attempts: 1,
                backoff_base_ms: 1,
            },
            ..GatewayConfig::default()
        };
        let gateway = Arc::new(Gateway::new(&config).unwrap());
        let mut handles = Vec::new();
        for _ in 0..12 {
            let gateway = Arc::clone(&gateway);
            handles.push(std::thread::spawn(move || {
                gateway
                    .complete(
                        &ChatRequest::new("m", vec![ChatMessage::user("go")]).unwrap(),
                    )
                    .unwrap()
            }));
        }
        for handle in handles {
            handle.join().unwrap();
        }
        assert_eq!(server.hits(), 12);
        assert!(
            server.max_in_flight() <= 3,
            "observed {} simultaneous connections",
            server.max_in_flight()
        );
    }

    #[test]
    fn config_validation_rules() {
        let mut config = GatewayConfig::default();
        assert!(config.validate().is_err(), "mock without fixtures_dir");
        config.fixtures_dir = Some(std::env::temp_dir());
        assert!(config.validate().is_ok());
        config.retry.max_attempts = 0;
        assert!(config.validate().is_err());
        config.retry.max_attempts = 1;
        config.backend = BackendKind::Live;
        assert!(config.validate().is_err(), "live without endpoint");
    }
}
