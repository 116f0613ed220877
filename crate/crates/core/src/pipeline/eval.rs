use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::corpus::TurnKey;
use crate::error::{Error, Result};
use crate::metrics::{pseudo_reference_accuracy, write_csv, MetricReport};
use crate::retriever::{RankedRetrieval, Retriever};

use super::IterationArtifact;

/// Retrieves with each turn's reformulation and scores the ranking against gold.
pub fn evaluate_retrieval(
    reformulations: &BTreeMap<TurnKey, String>,
    gold: &BTreeMap<TurnKey, Vec<String>>,
    retriever: &dyn Retriever,
    top_n: usize,
    cutoffs: &[usize],
) -> Result<MetricReport> {
    if gold.values().all(Vec::is_empty) {
        return Err(Error::Report("dataset carries no gold references".into()));
    }
    let rankings: BTreeMap<TurnKey, RankedRetrieval> = reformulations
        .par_iter()
        .map(|(key, q)| Ok((key.clone(), retriever.retrieve(q, top_n)?)))
        .collect::<Result<_>>()?;
    MetricReport::evaluate("retrieval", &rankings, gold, cutoffs)
}

/// Pseudo reference accuracy for each iteration of a run.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoTrend {
    pub reports: Vec<MetricReport>,
}

impl PseudoTrend {
    pub fn recall_at(&self, k: usize) -> Vec<Option<f64>> {
        self.reports.iter().map(|r| r.recall_at(k)).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_csv(
            path,
            Some("pseudo reference accuracy per iteration; one row per iteration"),
            &self.reports,
        )
    }
}

pub fn evaluate_pseudo(
    artifacts: &[IterationArtifact],
    gold: &BTreeMap<TurnKey, Vec<String>>,
    cutoffs: &[usize],
) -> Result<PseudoTrend> {
    if gold.values().all(Vec::is_empty) {
        return Err(Error::Report("dataset carries no gold references".into()));
    }
    let reports = artifacts
        .iter()
        .map(|a| {
            let ranked: BTreeMap<TurnKey, RankedRetrieval> = a
                .pseudo_refs
                .iter()
                .map(|(k, r)| (k.clone(), r.set().as_ranking()))
                .collect();
            let mut report = pseudo_reference_accuracy(&ranked, gold, cutoffs)?;
            report.summary.label = format!("iter_{}", a.iteration);
            Ok(report)
        })
        .collect::<Result<_>>()?;
    Ok(PseudoTrend { reports })
}
