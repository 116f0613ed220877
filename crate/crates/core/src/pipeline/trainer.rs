use std::path::Path;
use std::process::Command;

use serde::Serialize;

use crate::error::{Error, Result};

use super::config::TrainerHyperparams;

/// What a trainer receives besides the model ref and data files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainingSpec {
    #[serde(flatten)]
    pub hyperparams: TrainerHyperparams,
    pub beta: f64,
    pub iteration: usize,
}

/// Runs one round of preference optimization and names the resulting model.
pub trait Trainer: Send + Sync {
    fn optimize(
        &self,
        model_ref: &str,
        sft: &Path,
        dpo: &Path,
        spec: &TrainingSpec,
    ) -> Result<String>;
}

/// Returns its input model unchanged.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityTrainer;

impl Trainer for IdentityTrainer {
    fn optimize(
        &self,
        model_ref: &str,
        _sft: &Path,
        _dpo: &Path,
        _spec: &TrainingSpec,
    ) -> Result<String> {
        Ok(model_ref.to_string())
    }
}

/// Delegates training to an external program.
///
/// The program receives `<model_ref> <sft_path> <dpo_path>` after any fixed
/// arguments, plus the [`TrainingSpec`] as JSON in `CQR_TRAINER_HYPERPARAMS`.
/// The last non-empty line it prints is taken as the new model ref.
#[derive(Debug, Clone)]
pub struct CommandTrainer {
    pub program: String,
    pub args: Vec<String>,
}

impl CommandTrainer {
    pub fn new(program: impl Into<String>, args: Vec<String>) -> Self {
        Self {
            program: program.into(),
            args,
        }
    }
}

impl Trainer for CommandTrainer {
    fn optimize(
        &self,
        model_ref: &str,
        sft: &Path,
        dpo: &Path,
        spec: &TrainingSpec,
    ) -> Result<String> {
        let output = Command::new(&self.program)
            .args(&self.args)
            .arg(model_ref)
            .arg(sft)
            .arg(dpo)
            .env("CQR_TRAINER_HYPERPARAMS", serde_json::to_string(spec)?)
            .output()
            .map_err(|e| Error::Trainer(format!("cannot start {:?}: {e}", self.program)))?;
        if !output.status.success() {
            return Err(Error::Trainer(format!(
                "{:?} exited with {}: {}",
                self.program,
                output.status,
                String::from_utf8_lossy(&output.stderr).trim()
            )));
        }
        let stdout = String::from_utf8_lossy(&output.stdout);
        stdout
            .lines()
            .rev()
            .map(str::trim)
            .find(|l| !l.is_empty())
            .map(str::to_string)
            .ok_or_else(|| Error::Trainer(format!("{:?} printed no model ref", self.program)))
    }
}
