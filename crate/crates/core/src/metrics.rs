//! Ranking metrics and the composite retrieval score used to order candidates.
//!
//! All metrics use binary relevance. The composite score is a weighted sum of
//! three components:
//!
//! * coverage: mean Recall@k over a set of cutoffs,
//! * immediacy: reciprocal rank of the first gold passage,
//! * concordance: NDCG@3.

use std::collections::{BTreeMap, HashSet};
use std::hash::Hash;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::TurnKey;
use crate::error::{Error, Result};
use crate::jsonl;
use crate::retriever::RankedRetrieval;

pub const CONCORDANCE_CUTOFF: usize = 3;
pub const DEFAULT_REPORT_CUTOFFS: [usize; 3] = [3, 5, 20];

fn require_gold<I>(gold: &HashSet<I>) -> Result<()> {
    if gold.is_empty() {
        return Err(Error::UndefinedMetric("gold set is empty".into()));
    }
    Ok(())
}

fn require_k(k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::Parameter("cutoff k must be positive".into()));
    }
    Ok(())
}

pub fn recall_at_k<I: Eq + Hash>(ranked: &[I], gold: &HashSet<I>, k: usize) -> Result<f64> {
    require_gold(gold)?;
    require_k(k)?;
    let hits = ranked.iter().take(k).filter(|id| gold.contains(id)).count();
    Ok(hits as f64 / gold.len() as f64)
}

/// Reciprocal rank of the first gold passage anywhere in the list; 0 if none.
pub fn mrr<I: Eq + Hash>(ranked: &[I], gold: &HashSet<I>) -> Result<f64> {
    require_gold(gold)?;
    Ok(ranked
        .iter()
        .position(|id| gold.contains(id))
        .map_or(0.0, |i| 1.0 / (i + 1) as f64))
}

pub fn ndcg_at<I: Eq + Hash>(ranked: &[I], gold: &HashSet<I>, k: usize) -> Result<f64> {
    require_gold(gold)?;
    require_k(k)?;
    let discount = |i: usize| 1.0 / ((i + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, id)| gold.contains(id))
        .map(|(i, _)| discount(i))
        .sum();
    let idcg: f64 = (0..gold.len().min(k)).map(discount).sum();
    Ok((dcg / idcg).clamp(0.0, 1.0))
}

pub fn coverage_score<I: Eq + Hash>(
    ranked: &[I],
    gold: &HashSet<I>,
    cutoffs: &[usize],
) -> Result<f64> {
    if cutoffs.is_empty() {
        return Err(Error::Parameter("cutoff set is empty".into()));
    }
    let mut sum = 0.0;
    for &k in cutoffs {
        sum += recall_at_k(ranked, gold, k)?;
    }
    Ok(sum / cutoffs.len() as f64)
}

/// Weights and cutoffs for the composite retrieval score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScoreWeights {
    pub w_cov: f64,
    pub w_imm: f64,
    pub w_con: f64,
    pub cutoffs: Vec<usize>,
}

impl ScoreWeights {
    pub fn new(w_cov: f64, w_imm: f64, w_con: f64, mut cutoffs: Vec<usize>) -> Result<Self> {
        cutoffs.sort_unstable();
        cutoffs.dedup();
        let w = Self {
            w_cov,
            w_imm,
            w_con,
            cutoffs,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("w_cov", self.w_cov),
            ("w_imm", self.w_imm),
            ("w_con", self.w_con),
        ] {
            if !(w.is_finite() && w >= 0.0) {
                return Err(Error::Parameter(format!(
                    "{name} must be non-negative, got {w}"
                )));
            }
        }
        let sum = self.w_cov + self.w_imm + self.w_con;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(Error::Parameter(format!(
                "score weights must sum to 1, got {sum}"
            )));
        }
        if self.cutoffs.is_empty() || self.cutoffs.contains(&0) {
            return Err(Error::Parameter(
                "cutoffs must be a non-empty set of positive integers".into(),
            ));
        }
        if self.cutoffs.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Parameter(
                "cutoffs must be sorted and distinct".into(),
            ));
        }
        Ok(())
    }
}

impl Default for ScoreWeights {
    fn default() -> Self {
        Self {
            w_cov: 1.0 / 3.0,
            w_imm: 1.0 / 3.0,
            w_con: 1.0 / 3.0,
            cutoffs: vec![5, 20],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ScoreComponents {
    pub coverage: f64,
    pub immediacy: f64,
    pub concordance: f64,
}

impl ScoreComponents {
    pub fn compute<I: Eq + Hash>(
        ranked: &[I],
        gold: &HashSet<I>,
        cutoffs: &[usize],
    ) -> Result<Self> {
        Ok(Self {
            coverage: coverage_score(ranked, gold, cutoffs)?,
            immediacy: mrr(ranked, gold)?,
            concordance: ndcg_at(ranked, gold, CONCORDANCE_CUTOFF)?,
        })
    }

    pub fn combine(&self, w: &ScoreWeights) -> f64 {
        w.w_cov * self.coverage + w.w_imm * self.immediacy + w.w_con * self.concordance
    }
}

pub fn retrieval_score<I: Eq + Hash>(
    ranked: &[I],
    gold: &HashSet<I>,
    weights: &ScoreWeights,
) -> Result<f64> {
    weights.validate()?;
    Ok(ScoreComponents::compute(ranked, gold, &weights.cutoffs)?.combine(weights))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TurnMetrics {
    #[serde(flatten)]
    pub key: TurnKey,
    pub mrr: f64,
    pub ndcg_3: f64,
    /// Recall@k aligned with the report's cutoff list.
    pub recall: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub label: String,
    pub turns: usize,
    pub skipped: usize,
    pub cutoffs: Vec<usize>,
    pub mrr: f64,
    pub ndcg_3: f64,
    pub recall: Vec<f64>,
}

/// Per-turn metrics plus macro means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_turn: Vec<TurnMetrics>,
    pub summary: MetricSummary,
}

impl MetricReport {
    /// Evaluates rankings against gold ids. Turns with no gold (or no ranking)
    /// are skipped and counted.
    pub fn evaluate(
        label: &str,
        rankings: &BTreeMap<TurnKey, RankedRetrieval>,
        gold: &BTreeMap<TurnKey, Vec<String>>,
        cutoffs: &[usize],
    ) -> Result<Self> {
        if cutoffs.is_empty() {
            return Err(Error::Parameter("report needs at least one cutoff".into()));
        }
        let mut per_turn = Vec::new();
        let mut skipped = 0;
        for (key, ranking) in rankings {
            let Some(g) = gold.get(key).filter(|g| !g.is_empty()) else {
                skipped += 1;
                continue;
            };
            let gold: HashSet<&str> = g.iter().map(String::as_str).collect();
            let ids = ranking.ids();
            per_turn.push(TurnMetrics {
                key: key.clone(),
                mrr: mrr(&ids, &gold)?,
                ndcg_3: ndcg_at(&ids, &gold, CONCORDANCE_CUTOFF)?,
                recall: cutoffs
                    .iter()
                    .map(|&k| recall_at_k(&ids, &gold, k))
                    .collect::<Result<_>>()?,
            });
        }
        skipped += gold.keys().filter(|k| !rankings.contains_key(*k)).count();
        if per_turn.is_empty() {
            return Err(Error::Report(format!("{label}: no evaluable turns")));
        }
        let n = per_turn.len() as f64;
        let mean = |f: &dyn Fn(&TurnMetrics) -> f64| per_turn.iter().map(f).sum::<f64>() / n;
        let summary = MetricSummary {
            label: label.to_string(),
            turns: per_turn.len(),
            skipped,
            cutoffs: cutoffs.to_vec(),
            mrr: mean(&|t| t.mrr),
            ndcg_3: mean(&|t| t.ndcg_3),
            recall: (0..cutoffs.len()).map(|i| mean(&|t| t.recall[i])).collect(),
        };
        Ok(Self { per_turn, summary })
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        let i = self.summary.cutoffs.iter().position(|&c| c == k)?;
        Some(self.summary.recall[i])
    }

    /// Per-turn records followed by a single `{"summary": ...}` record.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut lines: Vec<serde_json::Value> = self
            .per_turn
            .iter()
            .map(serde_json::to_value)
            .collect::<std::result::Result<_, _>>()?;
        lines.push(serde_json::json!({ "summary": self.summary }));
        jsonl::write(path, &lines)
    }

    pub fn csv_header(cutoffs: &[usize]) -> String {
        let mut h = String::from("label,turns,skipped,mrr,ndcg@3");
        for k in cutoffs {
            h.push_str(&format!(",recall@{k}"));
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let s = &self.summary;
        let mut row = format!(
            "{},{},{},{:.6},{:.6}",
            s.label, s.turns, s.skipped, s.mrr, s.ndcg_3
        );
        for r in &s.recall {
            row.push_str(&format!(",{r:.6}"));
        }
        row
    }
}

/// Writes a CSV table of summaries sharing the same cutoffs, with an optional `#` header note.
pub fn write_csv(path: &Path, note: Option<&str>, reports: &[MetricReport]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    if let Some(note) = note {
        writeln!(f, "# {note}")?;
    }
    let cutoffs = reports
        .first()
        .map(|r| r.summary.cutoffs.clone())
        .unwrap_or_default();
    writeln!(f, "{}", MetricReport::csv_header(&cutoffs))?;
    for r in reports {
        writeln!(f, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Agreement between pseudo reference rankings and ground-truth references.
pub fn pseudo_reference_accuracy(
    pseudo: &BTreeMap<TurnKey, RankedRetrieval>,
    gold: &BTreeMap<TurnKey, Vec<String>>,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    MetricReport::evaluate("pseudo_reference_accuracy", pseudo, gold, cutoffs)
}
