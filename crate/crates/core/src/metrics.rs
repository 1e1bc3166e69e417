//! Retrieval and diversity metrics, and seed-aggregated method comparison.

use crate::landscape::LandscapeTable;
use crate::space::{hamming, SpaceSpec, StateKey};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty input")]
    Empty,
    #[error("k = {k} exceeds the {count} terminals")]
    KTooLarge { k: usize, count: usize },
    #[error("reports mix configurations {0} and {1}")]
    MixedConfig(String, String),
    #[error(transparent)]
    Space(#[from] crate::space::SpaceError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BestSoFar {
    pub n: usize,
    pub gap: f64,
    pub reward: f64,
}

/// Best-so-far gap `min_{i <= n} loss_i - l_star` and its reward after each evaluation.
pub fn best_so_far(losses: &[f64], l_star: f64, beta: f64) -> Result<Vec<BestSoFar>, MetricsError> {
    if losses.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut best = f64::INFINITY;
    Ok(losses
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            best = best.min(l);
            BestSoFar {
                n: i + 1,
                gap: best - l_star,
                reward: (-beta * best).exp(),
            }
        })
        .collect())
}

/// `(k, |found ∩ top-k|)` for each requested k.
pub fn topk_recovery(
    found: &HashSet<StateKey>,
    landscape: &LandscapeTable,
    ks: &[usize],
) -> Result<Vec<(usize, usize)>, MetricsError> {
    let order = landscape.rank_order();
    ks.iter()
        .map(|&k| {
            if k > order.len() {
                return Err(MetricsError::KTooLarge { k, count: order.len() });
            }
            let count = order[..k]
                .iter()
                .filter(|&&i| found.contains(&landscape.keys[i]))
                .count();
            Ok((k, count))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Top20 {
    pub median_loss: f64,
    pub mean_hamming: f64,
    /// Number of distinct keys used (20 unless the input was short).
    pub count: usize,
    pub deficient: bool,
}

pub const TOP_N: usize = 20;

/// Median loss and mean pairwise Hamming distance over the 20 distinct
/// lowest-loss keys (ties by key order).
pub fn top20_stats(evaluated: &[(StateKey, f64)]) -> Result<Top20, MetricsError> {
    if evaluated.is_empty() {
        return Err(MetricsError::Empty);
    }
    let mut distinct: BTreeMap<&StateKey, f64> = BTreeMap::new();
    for (k, l) in evaluated {
        distinct.entry(k).or_insert(*l);
    }
    let mut items: Vec<(&StateKey, f64)> = distinct.into_iter().collect();
    items.sort_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(b.0)));
    items.truncate(TOP_N);
    let n = items.len();
    let losses: Vec<f64> = items.iter().map(|e| e.1).collect();
    let median_loss = median_sorted(&losses);
    let mut total = 0usize;
    let mut pairs = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            total += hamming(items[i].0, items[j].0)?;
            pairs += 1;
        }
    }
    Ok(Top20 {
        median_loss,
        mean_hamming: if pairs == 0 { 0.0 } else { total as f64 / pairs as f64 },
        count: n,
        deficient: n < TOP_N,
    })
}

fn median_sorted(v: &[f64]) -> f64 {
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub method: String,
    pub seed: u64,
    pub config_hash: String,
    pub best_loss: f64,
    pub median_top20_loss: f64,
    pub mean_hamming_top20: f64,
    pub top20_deficient: bool,
    pub wall_clock: f64,
    pub best_so_far: Vec<BestSoFar>,
    pub topk_recovery: Vec<(usize, usize)>,
}

impl RetrievalReport {
    /// Builds a report from a method's distinct evaluations.
    #[allow(clippy::too_many_arguments)]
    pub fn from_evaluations(
        method: &str,
        seed: u64,
        config_hash: &str,
        evaluated: &[(StateKey, f64)],
        l_star: f64,
        beta: f64,
        landscape: Option<&LandscapeTable>,
        ks: &[usize],
        wall_clock: f64,
    ) -> Result<Self, MetricsError> {
        let losses: Vec<f64> = evaluated.iter().map(|e| e.1).collect();
        let bsf = best_so_far(&losses, l_star, beta)?;
        let top = top20_stats(evaluated)?;
        let topk = match landscape {
            Some(l) => {
                let found: HashSet<StateKey> = evaluated.iter().map(|e| e.0.clone()).collect();
                topk_recovery(&found, l, ks)?
            }
            None => Vec::new(),
        };
        Ok(Self {
            method: method.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            best_loss: losses.iter().copied().fold(f64::INFINITY, f64::min),
            median_top20_loss: top.median_loss,
            mean_hamming_top20: top.mean_hamming,
            top20_deficient: top.deficient,
            wall_clock,
            best_so_far: bsf,
            topk_recovery: topk,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

/// Mean and sample standard deviation (n - 1 denominator; 0 for one value).
pub fn mean_std(v: &[f64]) -> MeanStd {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let std = if v.len() < 2 {
        0.0
    } else {
        (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    MeanStd { mean, std }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: usize,
    pub best_loss: MeanStd,
    pub median_top20: MeanStd,
    pub mean_hamming_top20: MeanStd,
    pub wall_clock: MeanStd,
}

/// Per-method seed aggregation, methods in order of first appearance.
pub fn compare_methods(reports: &[RetrievalReport]) -> Result<Vec<MethodSummary>, MetricsError> {
    let first = reports.first().ok_or(MetricsError::Empty)?;
    if let Some(r) = reports.iter().find(|r| r.config_hash != first.config_hash) {
        return Err(MetricsError::MixedConfig(first.config_hash.clone(), r.config_hash.clone()));
    }
    let mut methods: Vec<&str> = Vec::new();
    for r in reports {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    Ok(methods
        .into_iter()
        .map(|m| {
            let rs: Vec<&RetrievalReport> = reports.iter().filter(|r| r.method == m).collect();
            let col = |f: fn(&RetrievalReport) -> f64| mean_std(&rs.iter().map(|r| f(r)).collect::<Vec<_>>());
            MethodSummary {
                method: m.to_string(),
                seeds: rs.len(),
                best_loss: col(|r| r.best_loss),
                median_top20: col(|r| r.median_top20_loss),
                mean_hamming_top20: col(|r| r.mean_hamming_top20),
                wall_clock: col(|r| r.wall_clock),
            }
        })
        .collect())
}

pub const COMPARISON_COLUMNS: [&str; 5] =
    ["method", "best_loss", "median_top20", "mean_hamming_top20", "wall_clock"];

/// Comparison table with each metric formatted as `mean ± std`.
pub fn write_comparison_csv<W: Write>(
    summaries: &[MethodSummary],
    mut out: W,
    header: Option<&str>,
) -> Result<(), MetricsError> {
    if let Some(h) = header {
        writeln!(out, "# {h}")?;
    }
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARISON_COLUMNS)?;
    let fmt = |m: &MeanStd| format!("{:.6} ± {:.6}", m.mean, m.std);
    for s in summaries {
        w.write_record([
            s.method.clone(),
            fmt(&s.best_loss),
            fmt(&s.median_top20),
            fmt(&s.mean_hamming_top20),
            fmt(&s.wall_clock),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Per-slot action names of a key, for human-readable exports.
pub fn describe_key(space: &SpaceSpec, key: &StateKey) -> String {
    space.describe(key).join(",")
}
