//! Language-model access: free-text completion and scored continuation.
//!
//! [`LmClient`] wraps a backend with retry/backoff, a bounded number of
//! in-flight batch requests, and an optional line-delimited request log.

mod mock;
mod openai;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use mock::{MockBackend, Responder};
pub use openai::{OpenAiBackend, DEFAULT_KEY_VAR};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LmError {
    /// Retryable failure (rate limit, 5xx, connection reset).
    #[error("transient backend failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transient {
        status: Option<u16>,
        message: String,
    },

    #[error("transport failed after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },

    #[error("credential rejected: {0}")]
    Credential(String),

    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("backend lacks capability: {0}")]
    Capability(String),

    #[error("precondition violated: {0}")]
    Precondition(String),
}

impl LmError {
    pub fn is_retryable(&self) -> bool {
        matches!(self, LmError::Transient { .. })
    }
}

pub type LmResult<T> = std::result::Result<T, LmError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: u32,
    /// Sampling seed forwarded to the backend; distinct seeds request distinct samples.
    pub seed: Option<u64>,
}

impl GenerationParams {
    pub fn validate(&self) -> LmResult<()> {
        if !(self.temperature.is_finite() && self.temperature >= 0.0) {
            return Err(LmError::Precondition(format!(
                "temperature {} < 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(LmError::Precondition(format!(
                "top_p {} outside (0, 1]",
                self.top_p
            )));
        }
        if self.max_tokens == 0 {
            return Err(LmError::Precondition("max_tokens must be positive".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.8,
            top_p: 0.8,
            max_tokens: 2560,
            seed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionRequest {
    pub model_ref: String,
    pub prompt: String,
    pub params: GenerationParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub model_ref: String,
    pub context: String,
    pub continuation: String,
}

/// A continuation and its summed natural-log probability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredCompletion {
    pub text: String,
    pub total_logprob: f64,
    pub token_count: usize,
}

impl ScoredCompletion {
    /// Mean per-token log-probability.
    pub fn normalized(&self) -> f64 {
        self.total_logprob / self.token_count.max(1) as f64
    }
}

pub trait LmBackend: Send + Sync {
    fn complete(&self, req: &CompletionRequest) -> LmResult<String>;
    fn score(&self, req: &ScoreRequest) -> LmResult<ScoredCompletion>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub max_delay_ms: u64,
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based): base · 2^retry, capped.
    pub fn delay(&self, retry: u32) -> Duration {
        let ms = self
            .base_delay_ms
            .saturating_mul(1u64.checked_shl(retry).unwrap_or(u64::MAX))
            .min(self.max_delay_ms);
        Duration::from_millis(ms)
    }

    pub fn no_delay(max_attempts: u32) -> Self {
        Self {
            max_attempts,
            base_delay_ms: 0,
            max_delay_ms: 0,
        }
    }
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 5,
            base_delay_ms: 500,
            max_delay_ms: 30_000,
        }
    }
}

#[derive(Serialize)]
struct LogRecord<'a> {
    run_id: &'a str,
    kind: &'a str,
    model_ref: &'a str,
    attempts: u32,
    ok: bool,
    request: &'a str,
    response: &'a str,
}

/// Counting semaphore bounding concurrent backend calls.
struct Permits {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Permits {
    fn new(n: usize) -> Self {
        Self {
            free: Mutex::new(n),
            cv: Condvar::new(),
        }
    }

    fn run<T>(&self, f: impl FnOnce() -> T) -> T {
        {
            let mut free = self.free.lock().unwrap_or_else(|p| p.into_inner());
            while *free == 0 {
                free = self.cv.wait(free).unwrap_or_else(|p| p.into_inner());
            }
            *free -= 1;
        }
        let out = f();
        *self.free.lock().unwrap_or_else(|p| p.into_inner()) += 1;
        self.cv.notify_one();
        out
    }
}

pub struct LmClient {
    backend: Arc<dyn LmBackend>,
    retry: RetryPolicy,
    max_in_flight: usize,
    permits: Permits,
    run_id: String,
    log: Option<Mutex<BufWriter<File>>>,
    retries: AtomicU64,
    sleep: fn(Duration),
}

impl LmClient {
    pub fn new(backend: Arc<dyn LmBackend>) -> Self {
        Self {
            backend,
            retry: RetryPolicy::default(),
            max_in_flight: 8,
            permits: Permits::new(8),
            run_id: "run".into(),
            log: None,
            retries: AtomicU64::new(0),
            sleep: std::thread::sleep,
        }
    }

    pub fn mock(seed: u64) -> Self {
        Self::new(Arc::new(MockBackend::new(seed))).with_retry(RetryPolicy::no_delay(3))
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn with_max_in_flight(mut self, n: usize) -> Self {
        self.max_in_flight = n.max(1);
        self.permits = Permits::new(self.max_in_flight);
        self
    }

    pub fn with_run_id(mut self, run_id: impl Into<String>) -> Self {
        self.run_id = run_id.into();
        self
    }

    pub fn with_request_log(mut self, path: &Path) -> std::io::Result<Self> {
        self.log = Some(Mutex::new(BufWriter::new(File::create(path)?)));
        Ok(self)
    }

    pub fn run_id(&self) -> &str {
        &self.run_id
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    /// Total retries performed so far across all requests.
    pub fn retries(&self) -> u64 {
        self.retries.load(Ordering::Relaxed)
    }

    fn with_retries<T>(&self, mut call: impl FnMut() -> LmResult<T>) -> (LmResult<T>, u32) {
        let max = self.retry.max_attempts.max(1);
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.permits.run(&mut call) {
                Err(e) if e.is_retryable() => {
                    if attempt >= max {
                        return (
                            Err(LmError::Transport {
                                attempts: attempt,
                                message: e.to_string(),
                            }),
                            attempt,
                        );
                    }
                    log::debug!("[{}] retry {attempt}/{max}: {e}", self.run_id);
                    self.retries.fetch_add(1, Ordering::Relaxed);
                    (self.sleep)(self.retry.delay(attempt - 1));
                }
                other => return (other, attempt),
            }
        }
    }

    fn record(
        &self,
        kind: &str,
        model_ref: &str,
        attempts: u32,
        request: &str,
        response: Result<&str, String>,
    ) {
        let Some(log) = &self.log else { return };
        let (ok, response) = match &response {
            Ok(text) => (true, text.to_string()),
            Err(e) => (false, e.clone()),
        };
        let rec = LogRecord {
            run_id: &self.run_id,
            kind,
            model_ref,
            attempts,
            ok,
            request,
            response: &response,
        };
        let mut w = log.lock().unwrap_or_else(|p| p.into_inner());
        if let Ok(line) = serde_json::to_string(&rec) {
            let _ = writeln!(w, "{line}");
            let _ = w.flush();
        }
    }

    pub fn complete(&self, req: &CompletionRequest) -> LmResult<String> {
        req.params.validate()?;
        let (result, attempts) = self.with_retries(|| {
            let text = self.backend.complete(req)?;
            if text.trim().is_empty() {
                return Err(LmError::Protocol("response carried no text".into()));
            }
            Ok(text)
        });
        self.record(
            "complete",
            &req.model_ref,
            attempts,
            &req.prompt,
            result.as_deref().map_err(ToString::to_string),
        );
        result
    }

    pub fn score(&self, req: &ScoreRequest) -> LmResult<ScoredCompletion> {
        if req.continuation.is_empty() {
            return Err(LmError::Precondition(
                "continuation must be non-empty".into(),
            ));
        }
        let (result, attempts) = self.with_retries(|| {
            let scored = self.backend.score(req)?;
            if !scored.total_logprob.is_finite() || scored.total_logprob > 0.0 {
                return Err(LmError::Protocol(format!(
                    "invalid total log-probability {}",
                    scored.total_logprob
                )));
            }
            Ok(scored)
        });
        let summary = result
            .as_ref()
            .map(|s| s.total_logprob.to_string())
            .map_err(ToString::to_string);
        self.record(
            "score",
            &req.model_ref,
            attempts,
            &req.continuation,
            summary.as_deref().map_err(Clone::clone),
        );
        result
    }

    pub fn complete_batch(&self, reqs: &[CompletionRequest]) -> Vec<LmResult<String>> {
        self.map_bounded(reqs, |r| self.complete(r))
    }

    pub fn score_batch(&self, reqs: &[ScoreRequest]) -> Vec<LmResult<ScoredCompletion>> {
        self.map_bounded(reqs, |r| self.score(r))
    }

    /// Applies `f` to every item with at most `max_in_flight` calls running at
    /// once. Output position `i` always corresponds to input `i`.
    pub fn map_bounded<T: Sync, R: Send>(&self, items: &[T], f: impl Fn(&T) -> R + Sync) -> Vec<R> {
        bounded_map(items, self.max_in_flight, f)
    }
}

pub(crate) fn bounded_map<T: Sync, R: Send>(
    items: &[T],
    workers: usize,
    f: impl Fn(&T) -> R + Sync,
) -> Vec<R> {
    let workers = workers.max(1).min(items.len());
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap_or_else(|p| p.into_inner()) = Some(r);
            });
        }
    });
    slots
        .into_iter()
        .map(|m| {
            m.into_inner()
                .unwrap_or_else(|p| p.into_inner())
                .expect("every slot filled")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::AtomicU32;

    fn req(prompt: &str) -> CompletionRequest {
        CompletionRequest {
            model_ref: "m".into(),
            prompt: prompt.into(),
            params: GenerationParams::default(),
        }
    }

    struct Flaky {
        failures: AtomicU32,
        status: u16,
    }

    impl LmBackend for Flaky {
        fn complete(&self, _req: &CompletionRequest) -> LmResult<String> {
            if self.failures.load(Ordering::SeqCst) > 0 {
                self.failures.fetch_sub(1, Ordering::SeqCst);
                return Err(LmError::Transient {
                    status: Some(self.status),
                    message: "slow down".into(),
                });
            }
            Ok("ok".into())
        }
        fn score(&self, _req: &ScoreRequest) -> LmResult<ScoredCompletion> {
            Err(LmError::Capability("no logprobs".into()))
        }
    }

    #[test]
    fn retries_then_succeeds() {
        let client = LmClient::new(Arc::new(Flaky {
            failures: AtomicU32::new(1),
            status: 429,
        }))
        .with_retry(RetryPolicy::no_delay(3));
        assert_eq!(client.complete(&req("x")).unwrap(), "ok");
        assert_eq!(client.retries(), 1);
    }

    #[test]
    fn retries_exhausted() {
        let client = LmClient::new(Arc::new(Flaky {
            failures: AtomicU32::new(10),
            status: 503,
        }))
        .with_retry(RetryPolicy::no_delay(3));
        let err = client.complete(&req("x")).unwrap_err();
        assert_eq!(
            err.clone(),
            LmError::Transport {
                attempts: 3,
                message: err_msg(&err)
            }
        );
        assert_eq!(client.retries(), 2);
    }

    fn err_msg(e: &LmError) -> String {
        match e {
            LmError::Transport { message, .. } => message.clone(),
            _ => String::new(),
        }
    }

    #[test]
    fn backoff_doubles_and_caps() {
        let p = RetryPolicy {
            max_attempts: 6,
            base_delay_ms: 100,
            max_delay_ms: 1000,
        };
        let d: Vec<u64> = (0..6).map(|i| p.delay(i).as_millis() as u64).collect();
        assert_eq!(d, vec![100, 200, 400, 800, 1000, 1000]);
        assert_eq!(p.delay(200).as_millis(), 1000);
    }

    #[test]
    fn capability_error_is_not_retried() {
        let client = LmClient::new(Arc::new(Flaky {
            failures: AtomicU32::new(0),
            status: 500,
        }));
        let r = client.score(&ScoreRequest {
            model_ref: "m".into(),
            context: "c".into(),
            continuation: "x".into(),
        });
        assert!(matches!(r, Err(LmError::Capability(_))));
        assert_eq!(client.retries(), 0);
    }

    #[test]
    fn empty_continuation_rejected() {
        let client = LmClient::mock(1);
        let r = client.score(&ScoreRequest {
            model_ref: "m".into(),
            context: "c".into(),
            continuation: String::new(),
        });
        assert!(matches!(r, Err(LmError::Precondition(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        let client = LmClient::mock(1);
        let mut r = req("x");
        r.params.top_p = 0.0;
        assert!(matches!(client.complete(&r), Err(LmError::Precondition(_))));
    }

    #[test]
    fn batch_preserves_order() {
        let client = LmClient::new(Arc::new(MockBackend::new(3).with_responder(
            |r: &CompletionRequest| {
                // Later items finish first.
                let n: u64 = r.prompt.parse().unwrap();
                std::thread::sleep(Duration::from_millis(30 - 10 * n));
                Ok(format!("out-{n}"))
            },
        )))
        .with_max_in_flight(3);
        let reqs: Vec<_> = (0..3).map(|i| req(&i.to_string())).collect();
        let out: Vec<String> = client
            .complete_batch(&reqs)
            .into_iter()
            .map(Result::unwrap)
            .collect();
        assert_eq!(out, vec!["out-0", "out-1", "out-2"]);
        assert!(client.complete_batch(&[]).is_empty());
    }

    #[test]
    fn poisoned_element_fails_alone() {
        let client = LmClient::new(Arc::new(MockBackend::new(3).with_responder(
            |r: &CompletionRequest| {
                if r.prompt == "poison" {
                    Err(LmError::Transient {
                        status: Some(500),
                        message: "boom".into(),
                    })
                } else {
                    Ok(r.prompt.to_uppercase())
                }
            },
        )))
        .with_retry(RetryPolicy::no_delay(2));
        let out = client.complete_batch(&[req("a"), req("poison"), req("b")]);
        assert_eq!(out[0].as_deref(), Ok("A"));
        assert!(matches!(
            out[1],
            Err(LmError::Transport { attempts: 2, .. })
        ));
        assert_eq!(out[2].as_deref(), Ok("B"));
    }

    #[test]
    fn request_log_written() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("requests.jsonl");
        let client = LmClient::mock(5)
            .with_run_id("abc")
            .with_request_log(&path)
            .unwrap();
        client.complete(&req("hello world")).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let rec: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(rec["run_id"], "abc");
        assert_eq!(rec["attempts"], 1);
        assert_eq!(rec["ok"], true);
    }
}
