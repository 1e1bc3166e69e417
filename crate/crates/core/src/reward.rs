//! Contextual discrepancies, quantile normalization, tail-risk aggregation and
//! the Boltzmann reward.
//!
//! For a terminal `x` with raw per-context losses `l_c`:
//!
//! ```text
//! n_c  = (l_c - q_lo[c]) / (q_hi[c] - q_lo[c] + eps)
//! tail = mean of the K largest n_c
//! L(x) = (1 - lambda) * mean(n) + lambda * tail
//! R(x) = exp(-beta * L(x))
//! ```

use crate::cache::{CacheError, RewardCache};
use crate::simulator::{ContextDataset, SimError, SimTrajectory, Simulator};
use crate::space::{SpaceError, SpaceSpec, StateKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

pub const DEFAULT_RESIDUAL_EPS: f64 = 1e-6;
pub const DEFAULT_NORMALIZATION_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("trajectory length {sim} differs from observation count {obs}")]
    LengthMismatch { sim: usize, obs: usize },
    #[error("non-finite value in trajectory or observations")]
    NonFinite,
    #[error("context {context}: empty loss sample")]
    EmptySample { context: usize },
    #[error("quantile levels must satisfy 0 < lo < hi < 1 (got {lo}, {hi})")]
    InvalidLevels { lo: f64, hi: f64 },
    #[error("K = {k} outside 1..={contexts}")]
    TailSize { k: usize, contexts: usize },
    #[error("lambda = {0} outside [0, 1]")]
    Lambda(f64),
    #[error("beta must be positive, got {0}")]
    Beta(f64),
    #[error("{got} losses for {expected} contexts")]
    ContextCount { got: usize, expected: usize },
    #[error("simulation failed in context {context}: {source}")]
    Simulation {
        context: usize,
        #[source]
        source: SimError,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error("{count} terminals exceed the enumeration cap of {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("quantile table: {0}")]
    Io(#[from] std::io::Error),
    #[error("quantile table: {0}")]
    Json(#[from] serde_json::Error),
}

/// Mean relative absolute residual between simulated and observed values.
pub fn context_loss(
    sim: &SimTrajectory,
    obs: &ContextDataset,
    residual_eps: f64,
) -> Result<f64, RewardError> {
    relative_residual(&sim.values, &obs.obs_values, residual_eps)
}

pub fn relative_residual(sim: &[f64], obs: &[f64], residual_eps: f64) -> Result<f64, RewardError> {
    if sim.len() != obs.len() {
        return Err(RewardError::LengthMismatch {
            sim: sim.len(),
            obs: obs.len(),
        });
    }
    if sim.iter().chain(obs).any(|v| !v.is_finite()) {
        return Err(RewardError::NonFinite);
    }
    if sim.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = sim
        .iter()
        .zip(obs)
        .map(|(s, o)| (s - o).abs() / (o.abs() + residual_eps))
        .sum();
    Ok(total / sim.len() as f64)
}

/// Empirical quantile of a sorted sample, linear interpolation between order
/// statistics at position `level * (n - 1)`.
pub fn quantile_sorted(sorted: &[f64], level: f64) -> f64 {
    let pos = level * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Per-context lower/upper loss quantiles used for normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantileTable {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub lo_level: f64,
    pub hi_level: f64,
    pub eps: f64,
}

impl QuantileTable {
    pub fn fit(
        losses_per_context: &[Vec<f64>],
        lo_level: f64,
        hi_level: f64,
        eps: f64,
    ) -> Result<Self, RewardError> {
        if !(0.0 < lo_level && lo_level < hi_level && hi_level < 1.0) {
            return Err(RewardError::InvalidLevels {
                lo: lo_level,
                hi: hi_level,
            });
        }
        let mut lo = Vec::with_capacity(losses_per_context.len());
        let mut hi = Vec::with_capacity(losses_per_context.len());
        for (c, sample) in losses_per_context.iter().enumerate() {
            if sample.is_empty() {
                return Err(RewardError::EmptySample { context: c + 1 });
            }
            if sample.iter().any(|v| !v.is_finite()) {
                return Err(RewardError::NonFinite);
            }
            let mut sorted = sample.clone();
            sorted.sort_by(f64::total_cmp);
            lo.push(quantile_sorted(&sorted, lo_level));
            hi.push(quantile_sorted(&sorted, hi_level));
        }
        Ok(Self {
            lo,
            hi,
            lo_level,
            hi_level,
            eps,
        })
    }

    pub fn contexts(&self) -> usize {
        self.lo.len()
    }

    /// Affine map onto the quantile range; values outside [0, 1] are kept.
    pub fn normalize(&self, raw: &[f64]) -> Result<Vec<f64>, RewardError> {
        if raw.len() != self.lo.len() {
            return Err(RewardError::ContextCount {
                got: raw.len(),
                expected: self.lo.len(),
            });
        }
        Ok(raw
            .iter()
            .zip(self.lo.iter().zip(&self.hi))
            .map(|(l, (lo, hi))| (l - lo) / (hi - lo + self.eps))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<(), RewardError> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, RewardError> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

/// `(1 - lambda) * mean + lambda * mean of the K largest`.
pub fn aggregate(normalized: &[f64], lambda: f64, k: usize) -> Result<f64, RewardError> {
    let c = normalized.len();
    if k < 1 || k > c {
        return Err(RewardError::TailSize { k, contexts: c });
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(RewardError::Lambda(lambda));
    }
    let mut sorted = normalized.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let mean = sorted.iter().sum::<f64>() / c as f64;
    let tail = sorted[..k].iter().sum::<f64>() / k as f64;
    Ok((1.0 - lambda) * mean + lambda * tail)
}

pub fn reward(aggregate: f64, beta: f64) -> f64 {
    (-beta * aggregate).exp()
}

/// Scalar settings of the reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardParams {
    pub lambda: f64,
    pub k: usize,
    pub beta: f64,
    pub lo_level: f64,
    pub hi_level: f64,
    pub normalization_eps: f64,
    pub residual_eps: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            lambda: 0.25,
            k: 2,
            beta: 4.0,
            lo_level: 0.05,
            hi_level: 0.95,
            normalization_eps: DEFAULT_NORMALIZATION_EPS,
            residual_eps: DEFAULT_RESIDUAL_EPS,
        }
    }
}

impl RewardParams {
    pub fn validate(&self, contexts: usize) -> Result<(), RewardError> {
        if self.k < 1 || self.k > contexts {
            return Err(RewardError::TailSize {
                k: self.k,
                contexts,
            });
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(RewardError::Lambda(self.lambda));
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(RewardError::Beta(self.beta));
        }
        if !(0.0 < self.lo_level && self.lo_level < self.hi_level && self.hi_level < 1.0) {
            return Err(RewardError::InvalidLevels {
                lo: self.lo_level,
                hi: self.hi_level,
            });
        }
        Ok(())
    }
}

/// Scores of one terminal state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub key: StateKey,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
    pub aggregate: f64,
    pub reward: f64,
}

impl LossRecord {
    pub fn log_reward(&self) -> f64 {
        self.reward.ln()
    }
}

/// Decodes keys and computes raw per-context losses, counting simulator calls.
pub struct Evaluator {
    space: SpaceSpec,
    simulator: Arc<dyn Simulator>,
    contexts: Vec<ContextDataset>,
    residual_eps: f64,
    simulations: AtomicU64,
}

impl Evaluator {
    pub fn new(
        space: SpaceSpec,
        simulator: Arc<dyn Simulator>,
        contexts: Vec<ContextDataset>,
        residual_eps: f64,
    ) -> Self {
        Self {
            space,
            simulator,
            contexts,
            residual_eps,
            simulations: AtomicU64::new(0),
        }
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn contexts(&self) -> &[ContextDataset] {
        &self.contexts
    }

    pub fn simulator(&self) -> &dyn Simulator {
        self.simulator.as_ref()
    }

    /// Total simulator invocations so far (one per context per terminal).
    pub fn simulations(&self) -> u64 {
        self.simulations.load(Ordering::Relaxed)
    }

    pub fn raw_losses(&self, key: &StateKey) -> Result<Vec<f64>, RewardError> {
        let theta = self.space.decode(key)?;
        self.contexts
            .iter()
            .map(|c| {
                self.simulations.fetch_add(1, Ordering::Relaxed);
                let sim = self
                    .simulator
                    .simulate(&theta, c)
                    .map_err(|source| RewardError::Simulation {
                        context: c.context_id,
                        source,
                    })?;
                context_loss(&sim, c, self.residual_eps)
            })
            .collect()
    }

    /// Daily simulated series of a terminal in every context.
    pub fn daily(&self, key: &StateKey) -> Result<Vec<Vec<f64>>, RewardError> {
        let theta = self.space.decode(key)?;
        self.contexts
            .iter()
            .map(|c| {
                self.simulations.fetch_add(1, Ordering::Relaxed);
                self.simulator
                    .simulate_daily(&theta, c)
                    .map_err(|source| RewardError::Simulation {
                        context: c.context_id,
                        source,
                    })
            })
            .collect()
    }

    /// Raw losses of every terminal in enumeration order.
    pub fn enumerate_raw(&self, cap: u128) -> Result<Vec<Vec<f64>>, RewardError> {
        let count = self.space.terminal_count();
        if count > cap {
            return Err(RewardError::TooLarge { count, cap });
        }
        (0..count as usize)
            .into_par_iter()
            .map(|i| self.raw_losses(&self.space.key_at(i)))
            .collect()
    }

    /// Raw losses of `n` uniformly drawn terminals.
    pub fn sample_raw(&self, n: usize, seed: u64) -> Result<Vec<(StateKey, Vec<f64>)>, RewardError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let radices = self.space.radices();
        let keys: Vec<StateKey> = (0..n)
            .map(|_| {
                StateKey::from_indices(
                    &radices.iter().map(|&r| rng.random_range(0..r)).collect::<Vec<_>>(),
                )
            })
            .collect();
        keys.into_par_iter()
            .map(|k| self.raw_losses(&k).map(|raw| (k, raw)))
            .collect()
    }
}

/// Transposes row-major per-terminal losses into per-context samples.
pub fn per_context(rows: &[Vec<f64>], contexts: usize) -> Vec<Vec<f64>> {
    (0..contexts)
        .map(|c| rows.iter().map(|r| r[c]).collect())
        .collect()
}

/// Cache-backed terminal scoring with frozen quantiles.
pub struct Scorer {
    evaluator: Evaluator,
    params: RewardParams,
    quantiles: QuantileTable,
    cache: RewardCache,
}

impl Scorer {
    pub fn new(
        evaluator: Evaluator,
        params: RewardParams,
        quantiles: QuantileTable,
        cache: RewardCache,
    ) -> Result<Self, RewardError> {
        params.validate(evaluator.contexts.len())?;
        if quantiles.contexts() != evaluator.contexts.len() {
            return Err(RewardError::ContextCount {
                got: quantiles.contexts(),
                expected: evaluator.contexts.len(),
            });
        }
        Ok(Self {
            evaluator,
            params,
            quantiles,
            cache,
        })
    }

    pub fn space(&self) -> &SpaceSpec {
        self.evaluator.space()
    }

    pub fn evaluator(&self) -> &Evaluator {
        &self.evaluator
    }

    pub fn params(&self) -> &RewardParams {
        &self.params
    }

    pub fn quantiles(&self) -> &QuantileTable {
        &self.quantiles
    }

    pub fn cache(&self) -> &RewardCache {
        &self.cache
    }

    pub fn simulations(&self) -> u64 {
        self.evaluator.simulations()
    }

    /// Builds a record from already computed raw losses.
    pub fn record_from_raw(&self, key: StateKey, raw: Vec<f64>) -> Result<LossRecord, RewardError> {
        let normalized = self.quantiles.normalize(&raw)?;
        let agg = aggregate(&normalized, self.params.lambda, self.params.k)?;
        Ok(LossRecord {
            key,
            raw,
            normalized,
            aggregate: agg,
            reward: reward(agg, self.params.beta),
        })
    }

    /// Commits a record built from known raw losses unless the key is cached.
    pub fn insert_raw(&self, key: StateKey, raw: Vec<f64>) -> Result<LossRecord, RewardError> {
        if let Some(r) = self.cache.get(&key) {
            return Ok(r);
        }
        let record = self.record_from_raw(key, raw)?;
        Ok(self.cache.insert(record)?)
    }

    /// Scores a terminal key, simulating only on a cache miss.
    pub fn score(&self, key: &StateKey) -> Result<LossRecord, RewardError> {
        if let Some(r) = self.cache.get(key) {
            return Ok(r);
        }
        let space = self.evaluator.space();
        space.validate_key(key)?;
        if !space.is_terminal(key) {
            return Err(SpaceError::NotTerminal {
                len: key.len(),
                slots: space.slots(),
            }
            .into());
        }
        let raw = self.evaluator.raw_losses(key)?;
        let record = self.record_from_raw(key.clone(), raw)?;
        Ok(self.cache.insert(record)?)
    }

    pub fn score_many(&self, keys: &[StateKey]) -> Result<Vec<LossRecord>, RewardError> {
        keys.par_iter().map(|k| self.score(k)).collect()
    }

    pub fn flush(&self) -> Result<(), RewardError> {
        Ok(self.cache.flush()?)
    }
}
