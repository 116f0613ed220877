//! OpenAI-compatible HTTP backend.
//!
//! Completions go through `POST {base}/chat/completions`. Scoring uses the
//! legacy `POST {base}/completions` endpoint with `echo` and `logprobs`, which
//! local inference servers (vLLM and friends) expose for prompt scoring.

use std::time::Duration;

use reqwest::blocking::Client;
use reqwest::StatusCode;
use serde_json::{json, Value};

use super::{CompletionRequest, LmBackend, LmError, LmResult, ScoreRequest, ScoredCompletion};

pub const DEFAULT_KEY_VAR: &str = "OPENAI_API_KEY";

pub struct OpenAiBackend {
    base_url: String,
    api_key: Option<String>,
    http: Client,
}

impl OpenAiBackend {
    pub fn new(
        base_url: impl Into<String>,
        api_key: Option<String>,
        timeout: Duration,
    ) -> LmResult<Self> {
        let http = Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| LmError::Protocol(format!("cannot build HTTP client: {e}")))?;
        Ok(Self {
            base_url: base_url.into().trim_end_matches('/').to_string(),
            api_key,
            http,
        })
    }

    /// Reads the credential from `key_var` (unset means no Authorization header).
    pub fn from_env(base_url: impl Into<String>, key_var: &str) -> LmResult<Self> {
        Self::new(
            base_url,
            std::env::var(key_var).ok(),
            Duration::from_secs(120),
        )
    }

    fn post(&self, path: &str, body: &Value) -> LmResult<Value> {
        let mut req = self
            .http
            .post(format!("{}{path}", self.base_url))
            .json(body);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| LmError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        let status = resp.status();
        let text = resp.text().unwrap_or_default();
        classify(status, &text)?;
        serde_json::from_str(&text)
            .map_err(|e| LmError::Protocol(format!("invalid JSON body: {e}")))
    }
}

fn classify(status: StatusCode, body: &str) -> LmResult<()> {
    if status.is_success() {
        return Ok(());
    }
    let message = format!("{status}: {}", body.chars().take(300).collect::<String>());
    match status.as_u16() {
        401 | 403 => Err(LmError::Credential(message)),
        404 | 405 | 501 => Err(LmError::Capability(message)),
        408 | 409 | 429 | 500..=599 => Err(LmError::Transient {
            status: Some(status.as_u16()),
            message,
        }),
        _ => Err(LmError::Protocol(message)),
    }
}

impl LmBackend for OpenAiBackend {
    fn complete(&self, req: &CompletionRequest) -> LmResult<String> {
        let mut body = json!({
            "model": req.model_ref,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.params.temperature,
            "top_p": req.params.top_p,
            "max_tokens": req.params.max_tokens,
        });
        if let Some(seed) = req.params.seed {
            body["seed"] = json!(seed);
        }
        let v = self.post("/chat/completions", &body)?;
        v.pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .map(str::to_string)
            .ok_or_else(|| LmError::Protocol("response missing choices[0].message.content".into()))
    }

    fn score(&self, req: &ScoreRequest) -> LmResult<ScoredCompletion> {
        let body = json!({
            "model": req.model_ref,
            "prompt": format!("{}{}", req.context, req.continuation),
            "max_tokens": 0,
            "echo": true,
            "logprobs": 1,
            "temperature": 0.0,
        });
        let v = self.post("/completions", &body)?;
        let lp = v
            .pointer("/choices/0/logprobs")
            .filter(|x| !x.is_null())
            .ok_or_else(|| LmError::Capability("backend returned no log-probabilities".into()))?;
        let logprobs = lp
            .get("token_logprobs")
            .and_then(Value::as_array)
            .ok_or_else(|| LmError::Protocol("missing token_logprobs".into()))?;
        let offsets = lp
            .get("text_offset")
            .and_then(Value::as_array)
            .ok_or_else(|| LmError::Protocol("missing text_offset".into()))?;
        if logprobs.len() != offsets.len() {
            return Err(LmError::Protocol(
                "token_logprobs and text_offset differ in length".into(),
            ));
        }
        let boundary = req.context.chars().count() as u64;
        let mut total = 0.0;
        let mut tokens = 0;
        for (lp, off) in logprobs.iter().zip(offsets) {
            let off = off
                .as_u64()
                .ok_or_else(|| LmError::Protocol("non-integer text_offset".into()))?;
            if off < boundary {
                continue;
            }
            total += lp.as_f64().ok_or_else(|| {
                LmError::Protocol("null log-probability inside continuation".into())
            })?;
            tokens += 1;
        }
        if tokens == 0 {
            return Err(LmError::Protocol(
                "no continuation tokens were scored".into(),
            ));
        }
        Ok(ScoredCompletion {
            text: req.continuation.clone(),
            total_logprob: total,
            token_count: tokens,
        })
    }
}
