#![allow(dead_code)]

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use cqr_core::corpus::{Corpus, Dataset, Passage, Split, Turn};
use cqr_core::lm_client::{LmBackend, LmClient, MockBackend, RetryPolicy};
use cqr_core::pipeline::{PipelineConfig, Trainer, TrainingSpec};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOPICS: usize = 20;
pub const PER_TOPIC: usize = 10;
pub const TURNS_PER_SESSION: u32 = 4;

const FILLER: &[&str] = &[
    "the", "a", "of", "and", "in", "is", "was", "for", "with", "as", "by", "on", "it", "that",
    "this",
];

pub fn passage_id(topic: usize, j: usize) -> String {
    format!("t{topic:02}-p{j}")
}

/// Term found only in one passage.
pub fn key_term(topic: usize, j: usize) -> String {
    format!("key{topic}x{j}")
}

fn topic_word(topic: usize, w: usize) -> String {
    format!("topic{topic}w{w}")
}

/// 200 passages in 20 topics and 20 four-turn sessions, one per topic.
///
/// Responses use only topic vocabulary, so raw-response retrieval lands on
/// the right topic but not reliably on the gold passage; each passage also
/// carries a unique key term.
pub struct Fixture {
    pub corpus: Corpus,
    pub dataset: Dataset,
    /// Response text to the key term of its turn's gold passage.
    pub response_keys: HashMap<String, String>,
}

pub fn fixture() -> Fixture {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut passages = Vec::new();
    for t in 0..TOPICS {
        for j in 0..PER_TOPIC {
            let mut words: Vec<String> = (0..8).map(|w| topic_word(t, w)).collect();
            words.shuffle(&mut rng);
            words.truncate(rng.gen_range(3..=6));
            for _ in 0..rng.gen_range(4..10) {
                words.push(FILLER[rng.gen_range(0..FILLER.len())].to_string());
            }
            words.push(key_term(t, j));
            words.push(key_term(t, j));
            words.shuffle(&mut rng);
            passages.push(Passage {
                id: passage_id(t, j),
                text: words.join(" "),
            });
        }
    }
    let corpus = Corpus::new(passages).unwrap();

    let mut turns = Vec::new();
    let mut response_keys = HashMap::new();
    for s in 0..TOPICS {
        for t in 1..=TURNS_PER_SESSION {
            let j = (t as usize * 2 + s) % PER_TOPIC;
            let mut words: Vec<String> = (0..8).map(|w| topic_word(s, w)).collect();
            words.shuffle(&mut rng);
            words.truncate(4);
            let response = format!("it is {} turn {t}", words.join(" "));
            response_keys.insert(response.clone(), key_term(s, j));
            turns.push(Turn {
                session_id: format!("s{s:02}"),
                turn_index: t,
                query: format!("what about topic{s}w{} then", t % 8),
                response,
                gold_ref_ids: vec![passage_id(s, j)],
            });
        }
    }
    let dataset = Dataset::from_turns(turns, Split::Train, Some(&corpus)).unwrap();
    Fixture {
        corpus,
        dataset,
        response_keys,
    }
}

pub fn small_config(n_iters: usize) -> PipelineConfig {
    let mut cfg = PipelineConfig {
        n_iters,
        seed: 17,
        ..PipelineConfig::default()
    };
    cfg.candidates.n_rewrite = 6;
    cfg.candidates.n_expand = 2;
    cfg
}

pub fn mock_client(backend: impl LmBackend + 'static) -> LmClient {
    LmClient::new(Arc::new(backend)).with_retry(RetryPolicy::no_delay(3))
}

const REFINE_MARKER: &str = "state the main points of the last response (";
const REFINE_END: &str = "), contextualizing";

/// Mock whose refinements name the gold passage's key term; everything else
/// falls through to the plain mock.
pub fn oracle_refiner(seed: u64, keys: HashMap<String, String>) -> MockBackend {
    let plain = MockBackend::new(seed);
    MockBackend::new(seed).with_responder(move |req| {
        if let Some(start) = req.prompt.rfind(REFINE_MARKER) {
            let rest = &req.prompt[start + REFINE_MARKER.len()..];
            let response = &rest[..rest.rfind(REFINE_END).unwrap_or(rest.len())];
            if let Some(k) = keys.get(response) {
                return Ok(format!("{k} {k}"));
            }
        }
        plain.complete(req)
    })
}

/// Identity trainer that counts its calls.
#[derive(Default)]
pub struct CountingTrainer {
    pub calls: AtomicUsize,
}

impl CountingTrainer {
    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }
}

impl Trainer for CountingTrainer {
    fn optimize(
        &self,
        model_ref: &str,
        _sft: &Path,
        _dpo: &Path,
        _spec: &TrainingSpec,
    ) -> cqr_core::Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        Ok(model_ref.to_string())
    }
}

/// Trainer that names a new model each iteration and fails on a chosen one.
pub struct SteppingTrainer {
    pub fail_at: Option<usize>,
    pub calls: AtomicUsize,
}

impl Trainer for SteppingTrainer {
    fn optimize(
        &self,
        model_ref: &str,
        _sft: &Path,
        _dpo: &Path,
        spec: &TrainingSpec,
    ) -> cqr_core::Result<String> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        if self.fail_at == Some(spec.iteration) {
            return Err(cqr_core::Error::Trainer("simulated crash".into()));
        }
        Ok(format!("{model_ref}+{}", spec.iteration))
    }
}

/// Every file under `root` with its bytes, keyed by relative path.
pub fn tree_bytes(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(
                    path.strip_prefix(root).unwrap().to_path_buf(),
                    fs::read(&path).unwrap(),
                );
            }
        }
    }
    out
}

/// Asserts two directories hold the same files with the same bytes, naming the first difference.
pub fn assert_same_tree(a: &Path, b: &Path) {
    let (ta, tb) = (tree_bytes(a), tree_bytes(b));
    assert_eq!(ta.keys().collect::<Vec<_>>(), tb.keys().collect::<Vec<_>>());
    for (path, bytes) in &ta {
        assert!(bytes == &tb[path], "{} differs", path.display());
    }
}
