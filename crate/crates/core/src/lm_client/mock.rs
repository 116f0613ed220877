use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{CompletionRequest, LmBackend, LmError, LmResult, ScoreRequest, ScoredCompletion};

pub type Responder = Arc<dyn Fn(&CompletionRequest) -> LmResult<String> + Send + Sync>;

/// Offline backend whose every output is a pure function of its seed and the request.
///
/// Without a responder, a completion is a handful of words sampled from the
/// prompt. Scores are derived from a hash of (model, context, continuation)
/// and always lie in [-50, -0.1].
#[derive(Clone)]
pub struct MockBackend {
    seed: u64,
    responder: Option<Responder>,
    logprobs: bool,
}

impl MockBackend {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            responder: None,
            logprobs: true,
        }
    }

    pub fn with_responder<F>(mut self, f: F) -> Self
    where
        F: Fn(&CompletionRequest) -> LmResult<String> + Send + Sync + 'static,
    {
        self.responder = Some(Arc::new(f));
        self
    }

    /// Makes `score` fail with a capability error, like a chat-only endpoint.
    pub fn without_logprobs(mut self) -> Self {
        self.logprobs = false;
        self
    }

    fn rng(&self, parts: &[&str]) -> ChaCha8Rng {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        for p in parts {
            h.update((p.len() as u64).to_le_bytes());
            h.update(p.as_bytes());
        }
        let digest = h.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }

    fn sample_words(&self, req: &CompletionRequest) -> String {
        let sample_seed = req.params.seed.map(|s| s.to_string()).unwrap_or_default();
        let mut rng = self.rng(&["complete", &req.model_ref, &req.prompt, &sample_seed]);
        let mut words: Vec<&str> = Vec::new();
        for w in req.prompt.split(|c: char| !c.is_alphanumeric()) {
            if !w.is_empty() && !words.contains(&w) {
                words.push(w);
            }
        }
        if words.is_empty() {
            return format!("mock-{}", rng.gen::<u32>());
        }
        let k = rng.gen_range(3..=8).min(words.len());
        words.shuffle(&mut rng);
        words[..k].join(" ")
    }
}

impl LmBackend for MockBackend {
    fn complete(&self, req: &CompletionRequest) -> LmResult<String> {
        match &self.responder {
            Some(f) => f(req),
            None => Ok(self.sample_words(req)),
        }
    }

    fn score(&self, req: &ScoreRequest) -> LmResult<ScoredCompletion> {
        if !self.logprobs {
            return Err(LmError::Capability(
                "mock configured without log-probabilities".into(),
            ));
        }
        let mut rng = self.rng(&["score", &req.model_ref, &req.context, &req.continuation]);
        let u: f64 = rng.gen();
        Ok(ScoredCompletion {
            text: req.continuation.clone(),
            total_logprob: -0.1 - u * 49.9,
            token_count: req.continuation.split_whitespace().count().max(1),
        })
    }
}
