//! Synthetic check of the pseudo-label denoising bounds.
//!
//! A graph whose nodes carry ground-truth labels is built so that the mean
//! neighbourhood size is `c` (expansion) and at most a fraction `mu` of nodes
//! touch a differently-labelled neighbour (separation). A noisy labeler
//! corrupts the labels; one round of neighbourhood majority vote stands in for
//! the single-role model, and a second round over its output for the dual-role
//! model.
//!
//! Majority vote is a proxy for the consistency-regularised minimiser the
//! bounds are stated for, so simulations are expected to follow the bounds'
//! ordering, not to satisfy the inequalities literally.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundParams {
    err_labeler: f64,
    c: f64,
    mu: f64,
}

impl BoundParams {
    pub fn new(err_labeler: f64, c: f64, mu: f64) -> Result<Self> {
        if !(err_labeler > 0.0 && err_labeler < 1.0) {
            return Err(Error::Parameter(format!(
                "labeler error must lie in (0, 1), got {err_labeler}"
            )));
        }
        if !(c.is_finite() && c > 3.0) {
            return Err(Error::Parameter(format!(
                "expansion factor c must exceed 3, got {c}"
            )));
        }
        if !(mu.is_finite() && mu >= 0.0) {
            return Err(Error::Parameter(format!(
                "separation mu must be non-negative, got {mu}"
            )));
        }
        Ok(Self { err_labeler, c, mu })
    }

    pub fn err_labeler(&self) -> f64 {
        self.err_labeler
    }

    pub fn c(&self) -> f64 {
        self.c
    }

    pub fn mu(&self) -> f64 {
        self.mu
    }
}

/// Error bound for a model trained on labeler output:
/// `2/(c−1) · err + 2c/(c−1) · μ`.
pub fn bound_single(p: &BoundParams) -> f64 {
    let shrink = 2.0 / (p.c - 1.0);
    shrink * p.err_labeler + (2.0 * p.c / (p.c - 1.0)) * p.mu
}

/// Error bound when the single-role model is itself the labeler:
/// `(2/(c−1))² · err + 2c/(c−1) · (c+1)/(c−1) · μ`.
pub fn bound_dual(p: &BoundParams) -> f64 {
    let shrink = 2.0 / (p.c - 1.0);
    shrink * shrink * p.err_labeler + (2.0 * p.c / (p.c - 1.0)) * ((p.c + 1.0) / (p.c - 1.0)) * p.mu
}

/// `bound_dual < bound_single` holds exactly when `err·(c−3) > 2c·μ`.
pub fn dual_bound_tighter(p: &BoundParams) -> bool {
    p.err_labeler * (p.c - 3.0) > 2.0 * p.c * p.mu
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphConfig {
    pub n: usize,
    pub c: f64,
    pub mu: f64,
    pub num_labels: usize,
    pub seed: u64,
    /// Cluster size ratio between consecutive labels is `1 / (1 + skew)`; 0 gives uniform sizes.
    #[serde(default)]
    pub skew: f64,
}

impl GraphConfig {
    pub fn new(n: usize, c: f64, mu: f64, num_labels: usize, seed: u64) -> Self {
        Self {
            n,
            c,
            mu,
            num_labels,
            seed,
            skew: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionGraph {
    pub labels: Vec<u32>,
    pub num_labels: usize,
    pub adjacency: Vec<Vec<u32>>,
    pub c_realized: f64,
    pub mu_realized: f64,
}

impl ExpansionGraph {
    pub fn n(&self) -> usize {
        self.labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn error_rate(&self, labels: &[u32]) -> f64 {
        let wrong = labels
            .iter()
            .zip(&self.labels)
            .filter(|(a, b)| a != b)
            .count();
        wrong as f64 / self.n() as f64
    }
}

fn cluster_sizes(n: usize, k: usize, skew: f64) -> Vec<usize> {
    let weights: Vec<f64> = (0..k).map(|i| (1.0 + skew).powi(-(i as i32))).collect();
    let total: f64 = weights.iter().sum();
    let mut sizes: Vec<usize> = weights
        .iter()
        .map(|w| (w / total * n as f64).floor() as usize)
        .collect();
    let mut rest = n - sizes.iter().sum::<usize>();
    let mut i = 0;
    while rest > 0 {
        sizes[i % k] += 1;
        rest -= 1;
        i += 1;
    }
    sizes
}

fn pair_count(size: usize) -> usize {
    size * size.saturating_sub(1) / 2
}

pub fn build_graph(cfg: &GraphConfig) -> Result<ExpansionGraph> {
    if !(cfg.c.is_finite() && cfg.c > 3.0) {
        return Err(Error::Parameter(format!(
            "expansion factor c must exceed 3, got {}",
            cfg.c
        )));
    }
    if cfg.num_labels < 2 {
        return Err(Error::Parameter("need at least 2 labels".into()));
    }
    if (cfg.n as f64) < 10.0 * cfg.c {
        return Err(Error::Parameter(format!(
            "n = {} is below 10·c = {}",
            cfg.n,
            10.0 * cfg.c
        )));
    }
    if !(0.0..=1.0).contains(&cfg.mu) {
        return Err(Error::Parameter(format!(
            "mu must lie in [0, 1], got {}",
            cfg.mu
        )));
    }
    if !(cfg.skew.is_finite() && cfg.skew >= 0.0) {
        return Err(Error::Parameter(format!(
            "skew must be non-negative, got {}",
            cfg.skew
        )));
    }

    let n = cfg.n;
    let total_edges = (n as f64 * cfg.c / 2.0).round() as usize;
    let cross_edges = ((cfg.mu * n as f64).floor() as usize) / 2;
    if cross_edges > total_edges {
        return Err(Error::Parameter(format!(
            "mu = {} needs {cross_edges} cross-label edges but the edge budget is {total_edges}",
            cfg.mu
        )));
    }
    let within_total = total_edges - cross_edges;

    let sizes = cluster_sizes(n, cfg.num_labels, cfg.skew);
    let mut labels = Vec::with_capacity(n);
    let mut starts = Vec::with_capacity(sizes.len());
    for (label, &size) in sizes.iter().enumerate() {
        starts.push(labels.len());
        labels.extend(std::iter::repeat_n(label as u32, size));
    }

    // Edges per cluster proportional to its size; the last cluster absorbs rounding.
    let mut per_cluster: Vec<usize> = sizes
        .iter()
        .map(|&s| (within_total as f64 * s as f64 / n as f64).round() as usize)
        .collect();
    let assigned: usize = per_cluster[..sizes.len() - 1].iter().sum();
    per_cluster[sizes.len() - 1] = within_total.saturating_sub(assigned);
    for (k, (&want, &size)) in per_cluster.iter().zip(&sizes).enumerate() {
        if want > pair_count(size) {
            return Err(Error::Parameter(format!(
                "cluster {k} of {size} nodes cannot hold {want} edges; lower c or the label count"
            )));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adjacency: Vec<Vec<u32>> = vec![Vec::new(); n];
    let add = |adj: &mut Vec<Vec<u32>>, u: usize, v: usize| {
        adj[u].push(v as u32);
        adj[v].push(u as u32);
    };

    for ((&start, &size), &want) in starts.iter().zip(&sizes).zip(&per_cluster) {
        if want * 2 > pair_count(size) {
            let mut all: Vec<(usize, usize)> = (0..size)
                .flat_map(|i| (i + 1..size).map(move |j| (i, j)))
                .collect();
            all.shuffle(&mut rng);
            for &(i, j) in &all[..want] {
                add(&mut adjacency, start + i, start + j);
            }
        } else {
            let mut seen = HashSet::with_capacity(want);
            while seen.len() < want {
                let i = rng.gen_range(0..size);
                let j = rng.gen_range(0..size);
                if i == j {
                    continue;
                }
                if seen.insert((i.min(j), i.max(j))) {
                    add(&mut adjacency, start + i, start + j);
                }
            }
        }
    }

    // Each cross edge joins two nodes that have no cross-label neighbour yet.
    let mut free: Vec<usize> = (0..n).collect();
    free.shuffle(&mut rng);
    let mut made = 0;
    while made < cross_edges {
        let Some(u) = free.pop() else { break };
        let Some(pos) = free.iter().rposition(|&v| labels[v] != labels[u]) else {
            break;
        };
        let v = free.swap_remove(pos);
        add(&mut adjacency, u, v);
        made += 1;
    }
    if made < cross_edges {
        return Err(Error::Parameter(format!(
            "could only place {made} of {cross_edges} cross-label edges"
        )));
    }

    for list in &mut adjacency {
        list.sort_unstable();
    }
    let edges: usize = adjacency.iter().map(Vec::len).sum::<usize>() / 2;
    let touching = (0..n)
        .filter(|&u| {
            adjacency[u]
                .iter()
                .any(|&v| labels[v as usize] != labels[u])
        })
        .count();
    Ok(ExpansionGraph {
        labels,
        num_labels: cfg.num_labels,
        adjacency,
        c_realized: 2.0 * edges as f64 / n as f64,
        mu_realized: touching as f64 / n as f64,
    })
}

/// Corrupts each node's label with probability `err`, replacing it with a
/// uniformly chosen wrong label.
pub fn apply_labeler(graph: &ExpansionGraph, err: f64, seed: u64) -> Result<Vec<u32>> {
    if !(err > 0.0 && err < 1.0) {
        return Err(Error::Parameter(format!(
            "labeler error must lie in (0, 1), got {err}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let k = graph.num_labels as u32;
    Ok(graph
        .labels
        .iter()
        .map(|&truth| {
            if rng.gen::<f64>() < err {
                let shift = rng.gen_range(1..k);
                (truth + shift) % k
            } else {
                truth
            }
        })
        .collect())
}

/// One synchronous round of majority vote over each node and its neighbours.
/// A node keeps its label unless a single label holds the strict maximum.
pub fn denoise(graph: &ExpansionGraph, labels: &[u32]) -> Vec<u32> {
    let mut counts = vec![0u32; graph.num_labels];
    (0..graph.n())
        .map(|u| {
            counts.iter_mut().for_each(|c| *c = 0);
            counts[labels[u] as usize] += 1;
            for &v in &graph.adjacency[u] {
                counts[labels[v as usize] as usize] += 1;
            }
            let best = *counts.iter().max().unwrap_or(&0);
            let mut winners = counts.iter().enumerate().filter(|(_, &c)| c == best);
            match (winners.next(), winners.next()) {
                (Some((label, _)), None) => label as u32,
                _ => labels[u],
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationOutcome {
    pub labeler_error: f64,
    pub single_error: f64,
    pub dual_error: f64,
}

pub fn simulate(graph: &ExpansionGraph, err: f64, seed: u64) -> Result<SimulationOutcome> {
    let noisy = apply_labeler(graph, err, seed)?;
    let single = denoise(graph, &noisy);
    let dual = denoise(graph, &single);
    Ok(SimulationOutcome {
        labeler_error: graph.error_rate(&noisy),
        single_error: graph.error_rate(&single),
        dual_error: graph.error_rate(&dual),
    })
}

pub fn single_role_error(graph: &ExpansionGraph, err: f64, seed: u64) -> Result<f64> {
    Ok(simulate(graph, err, seed)?.single_error)
}

pub fn dual_role_error(graph: &ExpansionGraph, err: f64, seed: u64) -> Result<f64> {
    Ok(simulate(graph, err, seed)?.dual_error)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRow {
    pub seed: u64,
    pub c_realized: f64,
    pub mu_realized: f64,
    pub labeler_error: f64,
    pub single_error: f64,
    pub dual_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundsReport {
    pub rows: Vec<SeedRow>,
    pub mean_labeler_error: f64,
    pub mean_single_error: f64,
    pub mean_dual_error: f64,
    pub bound_single: f64,
    pub bound_dual: f64,
}

/// Runs one graph + labeler draw per seed (in parallel) and summarises.
pub fn run_seeds(base: &GraphConfig, err: f64, seeds: &[u64]) -> Result<BoundsReport> {
    let params = BoundParams::new(err, base.c, base.mu)?;
    if seeds.is_empty() {
        return Err(Error::Parameter("at least one seed is required".into()));
    }
    let rows = seeds
        .par_iter()
        .map(|&seed| {
            let graph = build_graph(&GraphConfig {
                seed,
                ..base.clone()
            })?;
            let out = simulate(&graph, err, seed)?;
            Ok(SeedRow {
                seed,
                c_realized: graph.c_realized,
                mu_realized: graph.mu_realized,
                labeler_error: out.labeler_error,
                single_error: out.single_error,
                dual_error: out.dual_error,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mean = |f: fn(&SeedRow) -> f64| rows.iter().map(f).sum::<f64>() / rows.len() as f64;
    Ok(BoundsReport {
        mean_labeler_error: mean(|r| r.labeler_error),
        mean_single_error: mean(|r| r.single_error),
        mean_dual_error: mean(|r| r.dual_error),
        bound_single: bound_single(&params),
        bound_dual: bound_dual(&params),
        rows,
    })
}

impl BoundsReport {
    /// Per-seed CSV rows followed by a `mean` summary row. The header comment
    /// marks the numbers as output of the majority-vote simulator.
    pub fn write_csv(&self, out: &mut impl Write) -> std::io::Result<()> {
        writeln!(
            out,
            "# majority-vote denoising simulator; closed-form bounds repeated on every row"
        )?;
        writeln!(
            out,
            "seed,c_realized,mu_realized,labeler_error,single_error,dual_error,bound_single,bound_dual"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                r.seed,
                r.c_realized,
                r.mu_realized,
                r.labeler_error,
                r.single_error,
                r.dual_error,
                self.bound_single,
                self.bound_dual
            )?;
        }
        writeln!(
            out,
            "mean,,,{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.mean_labeler_error,
            self.mean_single_error,
            self.mean_dual_error,
            self.bound_single,
            self.bound_dual
        )
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        self.write_csv(&mut f)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph_from_edges(
        labels: Vec<u32>,
        num_labels: usize,
        edges: &[(usize, usize)],
    ) -> ExpansionGraph {
        let mut adjacency = vec![Vec::new(); labels.len()];
        for &(u, v) in edges {
            adjacency[u].push(v as u32);
            adjacency[v].push(u as u32);
        }
        ExpansionGraph {
            labels,
            num_labels,
            adjacency,
            c_realized: 0.0,
            mu_realized: 0.0,
        }
    }

    #[test]
    fn closed_form_examples() {
        let p = BoundParams::new(0.3, 4.0, 0.0).unwrap();
        assert!((bound_single(&p) - 0.2).abs() < 1e-15);
        assert!((bound_dual(&p) - 0.4 / 3.0).abs() < 1e-15);
        let p = BoundParams::new(0.2, 5.0, 0.01).unwrap();
        assert_eq!(bound_single(&p), 0.125);
        assert_eq!(bound_dual(&p), 0.0875);
    }

    #[test]
    fn ratio_without_separation_noise() {
        for c in [3.5, 4.0, 6.0, 11.0] {
            let p = BoundParams::new(0.25, c, 0.0).unwrap();
            let ratio = bound_dual(&p) / bound_single(&p);
            assert!((ratio - 2.0 / (c - 1.0)).abs() < 1e-12);
            assert!(ratio < 1.0);
        }
    }

    #[test]
    fn param_validation() {
        assert!(BoundParams::new(0.3, 3.0, 0.0).is_err());
        assert!(BoundParams::new(0.0, 5.0, 0.0).is_err());
        assert!(BoundParams::new(1.0, 5.0, 0.0).is_err());
        assert!(BoundParams::new(0.3, 5.0, -0.1).is_err());
        assert!(build_graph(&GraphConfig::new(400, 3.0, 0.0, 4, 1)).is_err());
        assert!(build_graph(&GraphConfig::new(50, 6.0, 0.0, 4, 1)).is_err());
        assert!(build_graph(&GraphConfig::new(400, 6.0, 0.0, 1, 1)).is_err());
        // 100 labels over 100 nodes leaves single-node clusters that cannot hold edges.
        assert!(build_graph(&GraphConfig::new(100, 4.0, 0.0, 100, 1)).is_err());
    }

    #[test]
    fn graph_invariants() {
        let g = build_graph(&GraphConfig::new(400, 6.0, 0.01, 4, 9)).unwrap();
        assert!((g.c_realized - 6.0).abs() < 0.01);
        assert!(g.mu_realized <= 0.01);
        assert!(g.mu_realized > 0.0);
        for (u, list) in g.adjacency.iter().enumerate() {
            for &v in list {
                assert!(g.adjacency[v as usize].binary_search(&(u as u32)).is_ok());
                assert_ne!(v as usize, u);
            }
        }
        assert_eq!(
            g,
            build_graph(&GraphConfig::new(400, 6.0, 0.01, 4, 9)).unwrap()
        );
    }

    #[test]
    fn zero_mu_has_no_cross_edges() {
        let g = build_graph(&GraphConfig::new(400, 6.0, 0.0, 4, 2)).unwrap();
        assert_eq!(g.mu_realized, 0.0);
        let skewed = build_graph(&GraphConfig {
            skew: 0.5,
            ..GraphConfig::new(400, 6.0, 0.0, 4, 2)
        })
        .unwrap();
        assert_eq!(skewed.mu_realized, 0.0);
        assert!((skewed.c_realized - 6.0).abs() < 0.01);
    }

    #[test]
    fn labeler_noise_rate() {
        let g = build_graph(&GraphConfig::new(10_000, 6.0, 0.0, 5, 3)).unwrap();
        let noisy = apply_labeler(&g, 0.5, 17).unwrap();
        assert!((g.error_rate(&noisy) - 0.5).abs() < 0.02);
        assert_eq!(noisy, apply_labeler(&g, 0.5, 17).unwrap());
        assert!(apply_labeler(&g, 1.0, 1).is_err());
        assert!(apply_labeler(&g, 0.0, 1).is_err());
    }

    #[test]
    fn majority_vote_cases() {
        let isolated = graph_from_edges(vec![0], 2, &[]);
        assert_eq!(denoise(&isolated, &[1]), vec![1]);

        let agree = graph_from_edges(vec![0, 0, 0], 2, &[(0, 1), (0, 2)]);
        assert_eq!(denoise(&agree, &[1, 0, 0])[0], 0);

        let star = graph_from_edges(vec![0; 6], 2, &[(0, 1), (0, 2), (0, 3), (0, 4), (0, 5)]);
        assert_eq!(denoise(&star, &[1, 0, 0, 0, 0, 0])[0], 0);

        let tie = graph_from_edges(vec![0, 0], 2, &[(0, 1)]);
        assert_eq!(denoise(&tie, &[1, 0]), vec![1, 0]);
    }

    #[test]
    fn low_noise_is_not_amplified() {
        let g = build_graph(&GraphConfig::new(2000, 8.0, 0.0, 10, 4)).unwrap();
        let out = simulate(&g, 0.01, 4).unwrap();
        assert!(out.single_error <= out.labeler_error);
        assert!(out.dual_error <= out.labeler_error);
    }

    #[test]
    fn simulation_is_deterministic() {
        let g = build_graph(&GraphConfig::new(1000, 6.0, 0.01, 5, 8)).unwrap();
        assert_eq!(simulate(&g, 0.3, 8).unwrap(), simulate(&g, 0.3, 8).unwrap());
        assert_eq!(
            single_role_error(&g, 0.3, 8).unwrap(),
            simulate(&g, 0.3, 8).unwrap().single_error
        );
        assert_eq!(
            dual_role_error(&g, 0.3, 8).unwrap(),
            simulate(&g, 0.3, 8).unwrap().dual_error
        );
    }

    #[test]
    fn csv_output() {
        let report = run_seeds(&GraphConfig::new(400, 6.0, 0.01, 4, 0), 0.3, &[1, 2, 3]).unwrap();
        let mut buf = Vec::new();
        report.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 6);
        assert!(text.lines().last().unwrap().starts_with("mean,"));
    }
}
