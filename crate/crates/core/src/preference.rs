//! Candidate reformulations, preference feedback, winner/loser pairs, the
//! SFT/DPO loss values, and training-data export.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DialogueContext, TurnKey};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::lm_client::{CompletionRequest, GenerationParams, LmClient, ScoredCompletion};
use crate::metrics::{ScoreComponents, ScoreWeights};
use crate::pseudo_ref::PseudoReferenceSet;
use crate::retriever::Retriever;

pub const DEFAULT_REWRITE_PROMPT: &str = include_str!("../prompts/rewrite.txt");
pub const DEFAULT_EXPAND_PROMPT: &str = include_str!("../prompts/expand.txt");

/// Fills `{name}` placeholders.
pub fn render(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (name, value) in vars {
        out = out.replace(&format!("{{{name}}}"), value);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptTemplates {
    pub rewrite: String,
    pub expand: String,
}

impl PromptTemplates {
    pub fn load(rewrite: &Path, expand: &Path) -> Result<Self> {
        Ok(Self {
            rewrite: std::fs::read_to_string(rewrite)?,
            expand: std::fs::read_to_string(expand)?,
        })
    }
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            rewrite: DEFAULT_REWRITE_PROMPT.into(),
            expand: DEFAULT_EXPAND_PROMPT.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CandidateKind {
    Rewrite,
    Expansion,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateQuery {
    pub index: usize,
    pub text: String,
    pub kind: CandidateKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CandidateConfig {
    pub n_rewrite: usize,
    pub n_expand: usize,
    pub rewrite_model: String,
    pub expand_model: String,
    pub params: GenerationParams,
    /// Total sampling attempts per kind, as a multiple of the requested count.
    pub attempt_factor: usize,
}

impl Default for CandidateConfig {
    fn default() -> Self {
        Self {
            n_rewrite: 12,
            n_expand: 3,
            rewrite_model: "gpt-3.5-turbo-0125".into(),
            expand_model: "llama3.1-8b-instruct".into(),
            params: GenerationParams::default(),
            attempt_factor: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateOutcome {
    pub candidates: Vec<CandidateQuery>,
    pub warnings: Vec<String>,
}

impl CandidateOutcome {
    /// A turn needs at least two distinct candidates to yield any preference.
    pub fn is_usable(&self) -> bool {
        self.candidates.len() >= 2
    }
}

fn history_text(context: &DialogueContext) -> String {
    let mut s = String::new();
    for (q, a) in &context.history {
        s.push_str(&format!("Q: {q}\nA: {a}\n"));
    }
    s.trim_end().to_string()
}

/// Samples completions until `want` distinct non-empty texts are collected or
/// `max_attempts` requests have been made. `prompt_for(i)` builds attempt `i`.
#[allow(clippy::too_many_arguments)]
fn sample_distinct(
    client: &LmClient,
    model: &str,
    params: GenerationParams,
    seed: u64,
    want: usize,
    max_attempts: usize,
    seen: &mut HashSet<String>,
    prompt_for: impl Fn(usize) -> String,
    warnings: &mut Vec<String>,
) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut attempt = 0;
    while out.len() < want && attempt < max_attempts {
        let batch = (want - out.len()).min(max_attempts - attempt);
        let reqs: Vec<CompletionRequest> = (attempt..attempt + batch)
            .map(|i| CompletionRequest {
                model_ref: model.to_string(),
                prompt: prompt_for(i),
                params: params.with_seed(seed.wrapping_add(i as u64)),
            })
            .collect();
        for (offset, result) in client.complete_batch(&reqs).into_iter().enumerate() {
            match result {
                Ok(text) => {
                    let text = text.split_whitespace().collect::<Vec<_>>().join(" ");
                    if out.len() < want && !text.is_empty() && seen.insert(text.clone()) {
                        out.push((attempt + offset, text));
                    }
                }
                Err(e) => warnings.push(format!("{model} sample {}: {e}", attempt + offset)),
            }
        }
        attempt += batch;
    }
    out
}

/// Generates rewrite candidates, then expansion candidates built on the rewrites.
///
/// Expansion candidates are `<rewrite> <generated passage>`. Duplicates are
/// resampled with fresh seeds up to `attempt_factor × count` attempts per kind.
pub fn generate_candidates(
    context: &DialogueContext,
    client: &LmClient,
    cfg: &CandidateConfig,
    prompts: &PromptTemplates,
    seed: u64,
) -> CandidateOutcome {
    let mut warnings = Vec::new();
    let mut seen = HashSet::new();
    let history = history_text(context);
    let rewrite_prompt = render(
        &prompts.rewrite,
        &[("context", &history), ("query", &context.current_query)],
    );
    let rewrites = sample_distinct(
        client,
        &cfg.rewrite_model,
        cfg.params,
        seed,
        cfg.n_rewrite,
        cfg.n_rewrite * cfg.attempt_factor.max(1),
        &mut seen,
        |_| rewrite_prompt.clone(),
        &mut warnings,
    );

    let mut expansions = Vec::new();
    if cfg.n_expand > 0 && !rewrites.is_empty() {
        let bases: Vec<&str> = rewrites.iter().map(|(_, t)| t.as_str()).collect();
        let prompt_for = |i: usize| {
            render(
                &prompts.expand,
                &[("context", &history), ("rewrite", bases[i % bases.len()])],
            )
        };
        let mut expansion_seen = HashSet::new();
        let generated = sample_distinct(
            client,
            &cfg.expand_model,
            cfg.params,
            seed.wrapping_add(1 << 32),
            cfg.n_expand,
            cfg.n_expand * cfg.attempt_factor.max(1),
            &mut expansion_seen,
            prompt_for,
            &mut warnings,
        );
        for (attempt, passage) in generated {
            let text = format!("{} {passage}", bases[attempt % bases.len()]);
            if seen.insert(text.clone()) {
                expansions.push(text);
            }
        }
    }

    let candidates: Vec<CandidateQuery> = rewrites
        .into_iter()
        .map(|(_, t)| (t, CandidateKind::Rewrite))
        .chain(
            expansions
                .into_iter()
                .map(|t| (t, CandidateKind::Expansion)),
        )
        .enumerate()
        .map(|(i, (text, kind))| CandidateQuery {
            index: i + 1,
            text,
            kind,
        })
        .collect();
    if candidates.len() < 2 {
        warnings.push(format!(
            "only {} distinct candidate(s); turn excluded from preference construction",
            candidates.len()
        ));
    }
    CandidateOutcome {
        candidates,
        warnings,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEntry {
    pub candidate: CandidateQuery,
    pub score: f64,
    pub components: ScoreComponents,
}

/// Candidates sorted by descending retrieval score against the pseudo references.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceFeedback {
    #[serde(flatten)]
    pub key: TurnKey,
    pub entries: Vec<FeedbackEntry>,
}

impl PreferenceFeedback {
    /// Sorts entries by score, descending; equal scores keep ascending candidate index.
    pub fn from_entries(key: TurnKey, mut entries: Vec<FeedbackEntry>) -> Self {
        entries.sort_by_key(|e| e.candidate.index);
        entries.sort_by(|a, b| b.score.total_cmp(&a.score));
        Self { key, entries }
    }
}

pub fn score_candidates(
    key: TurnKey,
    candidates: &[CandidateQuery],
    pseudo_refs: &PseudoReferenceSet,
    retriever: &dyn Retriever,
    weights: &ScoreWeights,
    top_n: usize,
) -> Result<PreferenceFeedback> {
    weights.validate()?;
    if candidates.len() < 2 {
        return Err(Error::Input(format!(
            "turn {key}: need at least 2 candidates, got {}",
            candidates.len()
        )));
    }
    if pseudo_refs.is_empty() {
        return Err(Error::Input(format!("turn {key}: no pseudo references")));
    }
    let gold: HashSet<&str> = pseudo_refs.ref_ids.iter().map(String::as_str).collect();
    let entries = candidates
        .par_iter()
        .map(|c| {
            let ranked = retriever.retrieve(&c.text, top_n)?;
            let components = ScoreComponents::compute(&ranked.ids(), &gold, &weights.cutoffs)?;
            Ok(FeedbackEntry {
                candidate: c.clone(),
                score: components.combine(weights),
                components,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(PreferenceFeedback::from_entries(key, entries))
}

/// The top-ranked candidate, used as the supervised fine-tuning target.
pub fn sft_target(feedback: &PreferenceFeedback) -> Result<&CandidateQuery> {
    feedback
        .entries
        .first()
        .map(|e| &e.candidate)
        .ok_or_else(|| Error::Input(format!("turn {}: empty feedback", feedback.key)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub key: TurnKey,
    pub context: DialogueContext,
    pub winner: String,
    pub loser: String,
    pub winner_score: f64,
    pub loser_score: f64,
    pub score_gap: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairSampling {
    pub n_top: usize,
    pub n_bottom: usize,
    pub max_pairs: usize,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            n_top: 3,
            n_bottom: 3,
            max_pairs: 6,
        }
    }
}

/// Crosses the `n_top` best entries with the `n_bottom` worst, drops pairs
/// without a strictly positive score gap, and keeps the `max_pairs` widest gaps.
pub fn sample_pairs(
    feedback: &PreferenceFeedback,
    context: &DialogueContext,
    sampling: PairSampling,
) -> Result<Vec<PreferencePair>> {
    let n = feedback.entries.len();
    if n < 2 {
        return Err(Error::Input(format!(
            "turn {}: need at least 2 feedback entries, got {n}",
            feedback.key
        )));
    }
    let top = &feedback.entries[..sampling.n_top.min(n)];
    let bottom = &feedback.entries[n - sampling.n_bottom.min(n)..];
    let mut pairs = Vec::new();
    for w in top {
        for l in bottom {
            let gap = w.score - l.score;
            if gap > 0.0 {
                pairs.push(PreferencePair {
                    key: feedback.key.clone(),
                    context: context.clone(),
                    winner: w.candidate.text.clone(),
                    loser: l.candidate.text.clone(),
                    winner_score: w.score,
                    loser_score: l.score,
                    score_gap: gap,
                });
            }
        }
    }
    pairs.sort_by(|a, b| b.score_gap.total_cmp(&a.score_gap));
    pairs.truncate(sampling.max_pairs);
    Ok(pairs)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossHyperparams {
    pub beta: f64,
}

impl Default for LossHyperparams {
    fn default() -> Self {
        Self { beta: 0.5 }
    }
}

/// Negative log-likelihood of the SFT target.
pub fn sft_loss(scored: &ScoredCompletion) -> Result<f64> {
    let lp = scored.total_logprob;
    if !lp.is_finite() || lp > 0.0 {
        return Err(Error::Input(format!(
            "log-probability must be finite and <= 0, got {lp}"
        )));
    }
    Ok(0.0 - lp)
}

/// `-ln σ(x)` evaluated without overflow.
fn neg_log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        (-x).exp().ln_1p()
    } else {
        -x + x.exp().ln_1p()
    }
}

/// Direct-preference loss for one pair:
/// `-ln σ(β · [(lp_policy_w − lp_ref_w) − (lp_policy_l − lp_ref_l)])`.
pub fn dpo_loss(
    lp_policy_w: f64,
    lp_policy_l: f64,
    lp_ref_w: f64,
    lp_ref_l: f64,
    hp: LossHyperparams,
) -> Result<f64> {
    if !(hp.beta.is_finite() && hp.beta > 0.0) {
        return Err(Error::Parameter(format!(
            "beta must be positive, got {}",
            hp.beta
        )));
    }
    for lp in [lp_policy_w, lp_policy_l, lp_ref_w, lp_ref_l] {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::Input(format!(
                "log-probability must be finite and <= 0, got {lp}"
            )));
        }
    }
    let margin = (lp_policy_w - lp_ref_w) - (lp_policy_l - lp_ref_l);
    Ok(neg_log_sigmoid(hp.beta * margin))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftRecord {
    pub session_id: String,
    pub turn: u32,
    pub context_serialized: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DpoRecord {
    pub session_id: String,
    pub turn: u32,
    pub context_serialized: String,
    pub chosen: String,
    pub rejected: String,
    pub chosen_score: f64,
    pub rejected_score: f64,
}

impl From<&PreferencePair> for DpoRecord {
    fn from(p: &PreferencePair) -> Self {
        Self {
            session_id: p.key.session_id.clone(),
            turn: p.key.turn,
            context_serialized: p.context.serialize(),
            chosen: p.winner.clone(),
            rejected: p.loser.clone(),
            chosen_score: p.winner_score,
            rejected_score: p.loser_score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportManifest {
    pub iteration: usize,
    pub config_hash: String,
    pub sft_records: usize,
    pub dpo_records: usize,
    pub sft_file: String,
    pub dpo_file: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExportPaths {
    pub sft: PathBuf,
    pub dpo: PathBuf,
    pub manifest: PathBuf,
}

pub const SFT_FILE: &str = "sft.jsonl";
pub const DPO_FILE: &str = "dpo.jsonl";
pub const EXPORT_MANIFEST_FILE: &str = "export_manifest.json";

/// Writes SFT and DPO record files plus a manifest into `dir`, ordered by turn key.
pub fn export_training_data(
    sft: &[SftRecord],
    pairs: &[PreferencePair],
    dir: &Path,
    iteration: usize,
    config_hash: &str,
) -> Result<ExportPaths> {
    std::fs::create_dir_all(dir)?;
    let mut sft: Vec<&SftRecord> = sft.iter().collect();
    sft.sort_by(|a, b| (&a.session_id, a.turn).cmp(&(&b.session_id, b.turn)));
    let mut dpo: Vec<DpoRecord> = pairs.iter().map(DpoRecord::from).collect();
    dpo.sort_by(|a, b| (&a.session_id, a.turn).cmp(&(&b.session_id, b.turn)));

    let paths = ExportPaths {
        sft: dir.join(SFT_FILE),
        dpo: dir.join(DPO_FILE),
        manifest: dir.join(EXPORT_MANIFEST_FILE),
    };
    jsonl::write(&paths.sft, sft.iter().copied())?;
    jsonl::write(&paths.dpo, &dpo)?;
    let manifest = ExportManifest {
        iteration,
        config_hash: config_hash.to_string(),
        sft_records: sft.len(),
        dpo_records: dpo.len(),
        sft_file: SFT_FILE.into(),
        dpo_file: DPO_FILE.into(),
    };
    jsonl::write_atomic(&paths.manifest, &serde_json::to_vec_pretty(&manifest)?)?;
    Ok(paths)
}
