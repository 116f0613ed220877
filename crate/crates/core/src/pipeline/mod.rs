//! Iterative pseudo-reference / preference-optimization loop.
//!
//! Each iteration refines responses with the current model (skipped at
//! iteration 0), retrieves pseudo references, ranks candidate reformulations
//! against them, exports SFT/DPO data and hands it to a [`Trainer`]. Every
//! iteration lives in `iter_<i>/` and is complete once its `manifest.json`
//! exists; [`resume`] picks up at the first iteration without one.

mod config;
mod eval;
mod trainer;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use config::{ModelRefs, PipelineConfig, TrainerHyperparams};
pub use eval::{evaluate_pseudo, evaluate_retrieval, PseudoTrend};
pub use trainer::{CommandTrainer, IdentityTrainer, Trainer, TrainingSpec};

use crate::corpus::{Corpus, Dataset, DialogueContext, Turn, TurnKey};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::lm_client::{LmClient, ScoreRequest, ScoredCompletion};
use crate::preference::{
    dpo_loss, export_training_data, generate_candidates, sample_pairs, score_candidates, sft_loss,
    sft_target, CandidateQuery, ExportPaths, PreferenceFeedback, PreferencePair, PromptTemplates,
    SftRecord,
};
use crate::pseudo_ref::{
    generate_pseudo_refs, refine_or_empty, PseudoRefRecord, REFINEMENT_PROMPT_LAYOUT,
};
use crate::retriever::{InvertedIndex, Retriever};

pub const RUN_MANIFEST_FILE: &str = "run.json";
pub const ITERATION_MANIFEST_FILE: &str = "manifest.json";
pub const PSEUDO_REFS_FILE: &str = "pseudo_refs.jsonl";
pub const CANDIDATES_FILE: &str = "candidates.jsonl";
pub const FEEDBACK_FILE: &str = "feedback.jsonl";
pub const WARNINGS_FILE: &str = "warnings.jsonl";

const RUN_FORMAT_VERSION: u32 = 1;
const TOKENIZER_DESCRIPTION: &str =
    "lowercase; split on non-alphanumeric; no stemming; no stopwords";

pub fn iteration_dir(root: &Path, iteration: usize) -> PathBuf {
    root.join(format!("iter_{iteration}"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: u32,
    pub config_hash: String,
    pub config: PipelineConfig,
    pub turns: usize,
    pub passages: usize,
    pub tokenizer: String,
    pub refinement_prompt: String,
    /// Score weights and cutoffs are configuration, not values fixed by the method.
    pub score_weights_note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSummary {
    pub sft_scored: usize,
    pub mean_sft_loss: Option<f64>,
    pub dpo_scored: usize,
    pub mean_dpo_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationManifest {
    pub iteration: usize,
    pub config_hash: String,
    pub model_ref_in: String,
    pub model_ref_out: String,
    pub turns: usize,
    pub turns_with_pseudo_refs: usize,
    pub feedback_turns: usize,
    pub sft_records: usize,
    pub dpo_records: usize,
    pub warnings: usize,
    pub losses: Option<LossSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    #[serde(flatten)]
    pub key: TurnKey,
    pub candidates: Vec<CandidateQuery>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnWarning {
    #[serde(flatten)]
    pub key: TurnKey,
    pub stage: String,
    pub message: String,
}

/// Everything one iteration produced.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationArtifact {
    pub iteration: usize,
    pub dir: PathBuf,
    pub pseudo_refs: BTreeMap<TurnKey, PseudoRefRecord>,
    pub feedback: Vec<PreferenceFeedback>,
    pub export: ExportPaths,
    pub manifest: IterationManifest,
}

impl IterationArtifact {
    pub fn model_ref_out(&self) -> &str {
        &self.manifest.model_ref_out
    }

    /// Reads a completed iteration back from disk.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join(ITERATION_MANIFEST_FILE);
        let manifest: IterationManifest = read_manifest(&manifest_path)?;
        let pseudo: Vec<PseudoRefRecord> = jsonl::read(&dir.join(PSEUDO_REFS_FILE))?;
        let feedback: Vec<PreferenceFeedback> = jsonl::read(&dir.join(FEEDBACK_FILE))?;
        Ok(Self {
            iteration: manifest.iteration,
            dir: dir.to_path_buf(),
            pseudo_refs: pseudo.into_iter().map(|r| (r.key.clone(), r)).collect(),
            feedback,
            export: ExportPaths {
                sft: dir.join(crate::preference::SFT_FILE),
                dpo: dir.join(crate::preference::DPO_FILE),
                manifest: dir.join(crate::preference::EXPORT_MANIFEST_FILE),
            },
            manifest,
        })
    }
}

fn read_manifest<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::Resume {
        file: path.to_path_buf(),
        message: e.to_string(),
    })?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Resume {
        file: path.to_path_buf(),
        message: format!("corrupt manifest: {e}"),
    })
}

/// The initial model followed by every iteration's output model.
pub fn model_chain(initial: &str, artifacts: &[IterationArtifact]) -> Vec<String> {
    std::iter::once(initial.to_string())
        .chain(artifacts.iter().map(|a| a.manifest.model_ref_out.clone()))
        .collect()
}

/// Loads every completed iteration under `root`, in order.
pub fn load_artifacts(root: &Path) -> Result<Vec<IterationArtifact>> {
    let mut out = Vec::new();
    for i in 0.. {
        let dir = iteration_dir(root, i);
        if !dir.join(ITERATION_MANIFEST_FILE).exists() {
            break;
        }
        out.push(IterationArtifact::load(&dir)?);
    }
    Ok(out)
}

/// Candidate sampling seed for one turn, derived from the run seed.
pub fn turn_seed(seed: u64, key: &TurnKey, iteration: usize) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.session_id.as_bytes());
    h.update(key.turn.to_le_bytes());
    h.update((iteration as u64).to_le_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

pub struct Pipeline<'a> {
    config: &'a PipelineConfig,
    dataset: &'a Dataset,
    passages: usize,
    retriever: Box<dyn Retriever + 'a>,
    client: &'a LmClient,
    trainer: &'a dyn Trainer,
    prompts: PromptTemplates,
    hash: String,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        config: &'a PipelineConfig,
        dataset: &'a Dataset,
        corpus: &'a Corpus,
        client: &'a LmClient,
        trainer: &'a dyn Trainer,
    ) -> Result<Self> {
        config.validate()?;
        let index = InvertedIndex::build(corpus, config.index)?;
        Ok(Self {
            config,
            dataset,
            passages: corpus.len(),
            retriever: Box::new(index),
            client,
            trainer,
            prompts: PromptTemplates::default(),
            hash: config.hash(),
        })
    }

    pub fn with_prompts(mut self, prompts: PromptTemplates) -> Self {
        self.prompts = prompts;
        self
    }

    pub fn with_retriever(mut self, retriever: Box<dyn Retriever + 'a>) -> Self {
        self.retriever = retriever;
        self
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    fn run_manifest(&self) -> RunManifest {
        RunManifest {
            version: RUN_FORMAT_VERSION,
            config_hash: self.hash.clone(),
            config: self.config.clone(),
            turns: self.dataset.turn_count(),
            passages: self.passages,
            tokenizer: TOKENIZER_DESCRIPTION.into(),
            refinement_prompt: REFINEMENT_PROMPT_LAYOUT.into(),
            score_weights_note: format!(
                "weights (cov {}, imm {}, con {}) and cutoffs {:?} are configured defaults",
                self.config.weights.w_cov,
                self.config.weights.w_imm,
                self.config.weights.w_con,
                self.config.weights.cutoffs
            ),
        }
    }

    /// Starts a fresh run in `root`, which must not already hold one.
    pub fn run(&self, root: &Path) -> Result<Vec<IterationArtifact>> {
        let manifest_path = root.join(RUN_MANIFEST_FILE);
        if manifest_path.exists() {
            return Err(Error::Input(format!(
                "{} already holds a run; use resume",
                root.display()
            )));
        }
        fs::create_dir_all(root)?;
        jsonl::write_atomic(
            &manifest_path,
            &serde_json::to_vec_pretty(&self.run_manifest())?,
        )?;
        self.run_from(root, 0, self.config.models.initial.clone(), None)
    }

    /// Continues the run in `root` from its first incomplete iteration.
    pub fn resume(&self, root: &Path) -> Result<Vec<IterationArtifact>> {
        let manifest_path = root.join(RUN_MANIFEST_FILE);
        let run: RunManifest = read_manifest(&manifest_path)?;
        if run.config_hash != self.hash {
            return Err(Error::Resume {
                file: manifest_path,
                message: format!(
                    "config hash {} does not match the supplied config ({})",
                    run.config_hash, self.hash
                ),
            });
        }

        let mut model_ref = self.config.models.initial.clone();
        let mut next = 0;
        for i in 0..self.config.n_iters {
            let path = iteration_dir(root, i).join(ITERATION_MANIFEST_FILE);
            if !path.exists() {
                break;
            }
            let m: IterationManifest = read_manifest(&path)?;
            if m.iteration != i || m.config_hash != self.hash || m.model_ref_in != model_ref {
                return Err(Error::Resume {
                    file: path,
                    message: "manifest does not continue the iteration chain".into(),
                });
            }
            model_ref = m.model_ref_out;
            next = i + 1;
        }
        for later in next + 1..self.config.n_iters {
            let path = iteration_dir(root, later).join(ITERATION_MANIFEST_FILE);
            if path.exists() {
                return Err(Error::Resume {
                    file: path,
                    message: format!("iteration {later} is complete but iteration {next} is not"),
                });
            }
        }
        if next == self.config.n_iters {
            info!("run in {} is already complete", root.display());
            return Ok(Vec::new());
        }

        let candidates = if next > 0 && !self.config.regenerate_candidates {
            let path = iteration_dir(root, next - 1).join(CANDIDATES_FILE);
            let records: Vec<CandidateRecord> = jsonl::read(&path).map_err(|e| Error::Resume {
                file: path.clone(),
                message: e.to_string(),
            })?;
            Some(records.into_iter().map(|r| (r.key, r.candidates)).collect())
        } else {
            None
        };
        info!("resuming {} at iteration {next}", root.display());
        self.run_from(root, next, model_ref, candidates)
    }

    fn run_from(
        &self,
        root: &Path,
        start: usize,
        mut model_ref: String,
        mut candidates: Option<BTreeMap<TurnKey, Vec<CandidateQuery>>>,
    ) -> Result<Vec<IterationArtifact>> {
        let mut out = Vec::new();
        for i in start..self.config.n_iters {
            let artifact = self.iteration(root, i, &model_ref, &mut candidates)?;
            model_ref = artifact.manifest.model_ref_out.clone();
            out.push(artifact);
        }
        Ok(out)
    }

    fn iteration(
        &self,
        root: &Path,
        i: usize,
        model_ref: &str,
        candidates: &mut Option<BTreeMap<TurnKey, Vec<CandidateQuery>>>,
    ) -> Result<IterationArtifact> {
        let cfg = self.config;
        let dir = iteration_dir(root, i);
        if dir.exists() {
            fs::remove_dir_all(&dir)?;
        }
        fs::create_dir_all(&dir)?;
        info!("iteration {i}: model {model_ref}");

        let contexts: Vec<(&Turn, DialogueContext)> = self.dataset.contexts();
        let mut warnings: Vec<TurnWarning> = Vec::new();

        // Step I: refinement (never at iteration 0) and pseudo references.
        let refined: Vec<(String, Option<String>)> = if i == 0 {
            vec![(String::new(), None); contexts.len()]
        } else {
            self.client.map_bounded(&contexts, |(turn, ctx)| {
                refine_or_empty(
                    ctx,
                    &turn.response,
                    Some(model_ref),
                    self.client,
                    cfg.refine_params,
                )
            })
        };
        let pseudo: Vec<PseudoRefRecord> = contexts
            .par_iter()
            .zip(refined.par_iter())
            .map(|((turn, _), (text, warning))| {
                let set = generate_pseudo_refs(
                    &turn.response,
                    text,
                    self.retriever.as_ref(),
                    cfg.k_pseudo,
                )?;
                Ok(PseudoRefRecord::new(turn.key(), i, set, warning.clone()))
            })
            .collect::<Result<_>>()?;
        for r in &pseudo {
            if let Some(w) = &r.warning {
                warnings.push(TurnWarning {
                    key: r.key.clone(),
                    stage: "refine".into(),
                    message: w.clone(),
                });
            }
            if r.ref_ids.is_empty() {
                warnings.push(TurnWarning {
                    key: r.key.clone(),
                    stage: "pseudo_refs".into(),
                    message: "retrieval returned nothing; turn left unsupervised".into(),
                });
            }
        }
        jsonl::write(&dir.join(PSEUDO_REFS_FILE), &pseudo)?;

        // Candidate reformulations: sampled once unless regeneration is on.
        if candidates.is_none() || cfg.regenerate_candidates {
            let seed_iter = if cfg.regenerate_candidates { i } else { 0 };
            let generated = self.client.map_bounded(&contexts, |(turn, ctx)| {
                let key = turn.key();
                let outcome = generate_candidates(
                    ctx,
                    self.client,
                    &cfg.candidates,
                    &self.prompts,
                    turn_seed(cfg.seed, &key, seed_iter),
                );
                (key, outcome)
            });
            let mut map = BTreeMap::new();
            for (key, outcome) in generated {
                warnings.extend(outcome.warnings.into_iter().map(|message| TurnWarning {
                    key: key.clone(),
                    stage: "candidates".into(),
                    message,
                }));
                map.insert(key, outcome.candidates);
            }
            *candidates = Some(map);
        }
        let candidates = candidates.as_ref().expect("candidates populated");
        let records: Vec<CandidateRecord> = candidates
            .iter()
            .map(|(key, c)| CandidateRecord {
                key: key.clone(),
                candidates: c.clone(),
            })
            .collect();
        jsonl::write(&dir.join(CANDIDATES_FILE), &records)?;

        // Step II: preference feedback, SFT targets and pairs.
        let by_key: BTreeMap<TurnKey, &DialogueContext> =
            contexts.iter().map(|(t, ctx)| (t.key(), ctx)).collect();
        let scored: Vec<(TurnKey, Result<PreferenceFeedback>)> = pseudo
            .par_iter()
            .filter_map(|r| {
                let cands = candidates.get(&r.key)?;
                if cands.len() < 2 || r.ref_ids.is_empty() {
                    return None;
                }
                let fb = score_candidates(
                    r.key.clone(),
                    cands,
                    &r.set(),
                    self.retriever.as_ref(),
                    &cfg.weights,
                    cfg.top_n,
                );
                Some((r.key.clone(), fb))
            })
            .collect();
        let mut feedback = Vec::with_capacity(scored.len());
        for (key, fb) in scored {
            match fb {
                Ok(fb) => feedback.push(fb),
                Err(e) => warnings.push(TurnWarning {
                    key,
                    stage: "feedback".into(),
                    message: e.to_string(),
                }),
            }
        }
        jsonl::write(&dir.join(FEEDBACK_FILE), &feedback)?;

        let mut sft = Vec::with_capacity(feedback.len());
        let mut pairs: Vec<PreferencePair> = Vec::new();
        for fb in &feedback {
            let ctx = by_key[&fb.key];
            let target = sft_target(fb)?;
            sft.push(SftRecord {
                session_id: fb.key.session_id.clone(),
                turn: fb.key.turn,
                context_serialized: ctx.serialize(),
                target: target.text.clone(),
            });
            pairs.extend(sample_pairs(fb, ctx, cfg.pairs)?);
        }
        let export = export_training_data(&sft, &pairs, &dir, i, &self.hash)?;

        let spec = TrainingSpec {
            hyperparams: cfg.trainer.clone(),
            beta: cfg.loss.beta,
            iteration: i,
        };
        let model_ref_out = self
            .trainer
            .optimize(model_ref, &export.sft, &export.dpo, &spec)?;
        info!("iteration {i}: trainer produced {model_ref_out}");

        let losses = if cfg.score_losses {
            let reference = cfg.models.reference.as_deref().unwrap_or(model_ref);
            Some(self.loss_summary(&sft, &pairs, &model_ref_out, reference, &mut warnings))
        } else {
            None
        };

        for w in &warnings {
            warn!("iteration {i} {} [{}]: {}", w.key, w.stage, w.message);
        }
        jsonl::write(&dir.join(WARNINGS_FILE), &warnings)?;

        let manifest = IterationManifest {
            iteration: i,
            config_hash: self.hash.clone(),
            model_ref_in: model_ref.to_string(),
            model_ref_out,
            turns: pseudo.len(),
            turns_with_pseudo_refs: pseudo.iter().filter(|r| !r.ref_ids.is_empty()).count(),
            feedback_turns: feedback.len(),
            sft_records: sft.len(),
            dpo_records: pairs.len(),
            warnings: warnings.len(),
            losses,
        };
        jsonl::write_atomic(
            &dir.join(ITERATION_MANIFEST_FILE),
            &serde_json::to_vec_pretty(&manifest)?,
        )?;
        Ok(IterationArtifact {
            iteration: i,
            dir,
            pseudo_refs: pseudo.into_iter().map(|r| (r.key.clone(), r)).collect(),
            feedback,
            export,
            manifest,
        })
    }

    fn logprob(&self, s: &ScoredCompletion) -> f64 {
        if self.config.length_normalize {
            s.normalized()
        } else {
            s.total_logprob
        }
    }

    /// Mean SFT loss of the trained model on its targets and mean DPO loss of
    /// the trained model against `reference` on the exported pairs.
    fn loss_summary(
        &self,
        sft: &[SftRecord],
        pairs: &[PreferencePair],
        policy: &str,
        reference: &str,
        warnings: &mut Vec<TurnWarning>,
    ) -> LossSummary {
        let req = |model: &str, context: &str, text: &str| ScoreRequest {
            model_ref: model.to_string(),
            context: context.to_string(),
            continuation: text.to_string(),
        };
        let sft_reqs: Vec<ScoreRequest> = sft
            .iter()
            .map(|r| req(policy, &r.context_serialized, &r.target))
            .collect();
        let mut sft_losses = Vec::new();
        for (r, scored) in sft.iter().zip(self.client.score_batch(&sft_reqs)) {
            let loss = scored.map_err(Error::from).and_then(|s| {
                sft_loss(&ScoredCompletion {
                    total_logprob: self.logprob(&s),
                    ..s
                })
            });
            match loss {
                Ok(l) => sft_losses.push(l),
                Err(e) => warnings.push(TurnWarning {
                    key: TurnKey::new(r.session_id.clone(), r.turn),
                    stage: "sft_loss".into(),
                    message: e.to_string(),
                }),
            }
        }

        let dpo_reqs: Vec<ScoreRequest> = pairs
            .iter()
            .flat_map(|p| {
                let ctx = p.context.serialize();
                [
                    req(policy, &ctx, &p.winner),
                    req(policy, &ctx, &p.loser),
                    req(reference, &ctx, &p.winner),
                    req(reference, &ctx, &p.loser),
                ]
            })
            .collect();
        let scores = self.client.score_batch(&dpo_reqs);
        let mut dpo_losses = Vec::new();
        for (p, chunk) in pairs.iter().zip(scores.chunks(4)) {
            let lps: std::result::Result<Vec<f64>, _> = chunk
                .iter()
                .map(|s| s.as_ref().map(|s| self.logprob(s)))
                .collect();
            let loss = lps
                .map_err(|e| Error::from(e.clone()))
                .and_then(|lp| dpo_loss(lp[0], lp[1], lp[2], lp[3], self.config.loss));
            match loss {
                Ok(l) => dpo_losses.push(l),
                Err(e) => warnings.push(TurnWarning {
                    key: p.key.clone(),
                    stage: "dpo_loss".into(),
                    message: e.to_string(),
                }),
            }
        }
        LossSummary {
            sft_scored: sft_losses.len(),
            mean_sft_loss: mean(&sft_losses),
            dpo_scored: dpo_losses.len(),
            mean_dpo_loss: mean(&dpo_losses),
        }
    }
}

/// Runs the full loop into `root`.
pub fn run(
    config: &PipelineConfig,
    dataset: &Dataset,
    corpus: &Corpus,
    client: &LmClient,
    trainer: &dyn Trainer,
    root: &Path,
) -> Result<Vec<IterationArtifact>> {
    Pipeline::new(config, dataset, corpus, client, trainer)?.run(root)
}

/// Continues an interrupted run in `root`; returns only the newly completed iterations.
pub fn resume(
    config: &PipelineConfig,
    dataset: &Dataset,
    corpus: &Corpus,
    client: &LmClient,
    trainer: &dyn Trainer,
    root: &Path,
) -> Result<Vec<IterationArtifact>> {
    Pipeline::new(config, dataset, corpus, client, trainer)?.resume(root)
}
