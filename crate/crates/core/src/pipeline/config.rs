use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::lm_client::GenerationParams;
use crate::metrics::{ScoreWeights, DEFAULT_REPORT_CUTOFFS};
use crate::preference::{CandidateConfig, LossHyperparams, PairSampling};
use crate::pseudo_ref::DEFAULT_K_PSEUDO;
use crate::retriever::{IndexParams, DEFAULT_TOP_N};

/// Fine-tuning settings handed to the trainer untouched.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerHyperparams {
    pub epochs_sft: u32,
    pub epochs_dpo: u32,
    pub learning_rate: f64,
    pub batch_size: u32,
}

impl Default for TrainerHyperparams {
    fn default() -> Self {
        Self {
            epochs_sft: 1,
            epochs_dpo: 2,
            learning_rate: 2e-5,
            batch_size: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelRefs {
    /// Reformulation model before any preference optimization.
    pub initial: String,
    /// Fixed reference model for the DPO loss diagnostics; when unset the
    /// model entering each iteration is used.
    pub reference: Option<String>,
}

impl Default for ModelRefs {
    fn default() -> Self {
        Self {
            initial: "cqr-base".into(),
            reference: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub n_iters: usize,
    pub k_pseudo: usize,
    pub top_n: usize,
    pub weights: ScoreWeights,
    pub loss: LossHyperparams,
    pub candidates: CandidateConfig,
    pub pairs: PairSampling,
    pub index: IndexParams,
    pub seed: u64,
    pub models: ModelRefs,
    pub refine_params: GenerationParams,
    pub trainer: TrainerHyperparams,
    /// Sample fresh candidates every iteration instead of reusing iteration 0's.
    pub regenerate_candidates: bool,
    /// Divide log-probabilities by token count before computing losses.
    pub length_normalize: bool,
    /// Score exported data under the trained and reference models and record mean losses.
    pub score_losses: bool,
    pub report_cutoffs: Vec<usize>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            n_iters: 3,
            k_pseudo: DEFAULT_K_PSEUDO,
            top_n: DEFAULT_TOP_N,
            weights: ScoreWeights::default(),
            loss: LossHyperparams::default(),
            candidates: CandidateConfig::default(),
            pairs: PairSampling::default(),
            index: IndexParams::default(),
            seed: 0,
            models: ModelRefs::default(),
            refine_params: GenerationParams {
                temperature: 0.0,
                top_p: 1.0,
                max_tokens: 256,
                seed: None,
            },
            trainer: TrainerHyperparams::default(),
            regenerate_candidates: false,
            length_normalize: false,
            score_losses: true,
            report_cutoffs: DEFAULT_REPORT_CUTOFFS.to_vec(),
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_iters == 0 {
            return Err(Error::Parameter("n_iters must be at least 1".into()));
        }
        if self.k_pseudo == 0 || self.top_n == 0 {
            return Err(Error::Parameter(
                "k_pseudo and top_n must be positive".into(),
            ));
        }
        if !(self.loss.beta.is_finite() && self.loss.beta > 0.0) {
            return Err(Error::Parameter(format!(
                "beta must be positive, got {}",
                self.loss.beta
            )));
        }
        if self.report_cutoffs.is_empty() || self.report_cutoffs.contains(&0) {
            return Err(Error::Parameter(
                "report cutoffs must be positive and non-empty".into(),
            ));
        }
        self.weights.validate()?;
        self.index.validate()?;
        self.candidates.params.validate()?;
        self.refine_params.validate()?;
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(bytes))
    }
}
