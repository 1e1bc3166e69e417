//! Trajectory sampling, trajectory-balance training and terminal-distribution
//! extraction.
//!
//! The construction graph is a tree, so the backward policy is deterministic
//! and `log P_B = 0`. The per-trajectory residual is
//! `log_z + sum_t log pi(a_t | s_t) - log R(x)`, and the loss is its mean
//! square over a batch.

use crate::policy::{encode_batch, PolicyError, PolicyModel, Adam};
use crate::reward::{RewardError, Scorer};
use crate::space::{SpaceSpec, StateKey};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GflowError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite log reward for {0}")]
    NonFiniteReward(StateKey),
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("{count} terminals exceed the enumeration cap of {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("exploration epsilon must lie in [0, 1), got {0}")]
    Epsilon(f64),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint version {0} unsupported")]
    Version(u32),
    #[error("training log: {0}")]
    Csv(#[from] csv::Error),
}

/// Source of terminal rewards for training.
pub trait TerminalReward: Sync {
    fn space(&self) -> &SpaceSpec;
    /// Returns `(aggregate loss, reward)` for a terminal key.
    fn evaluate(&self, key: &StateKey) -> Result<(f64, f64), GflowError>;
}

impl TerminalReward for Scorer {
    fn space(&self) -> &SpaceSpec {
        Scorer::space(self)
    }

    fn evaluate(&self, key: &StateKey) -> Result<(f64, f64), GflowError> {
        let r = self.score(key)?;
        Ok((r.aggregate, r.reward))
    }
}

/// Fixed rewards indexed by terminal enumeration order; loss is `-ln R`.
pub struct TableReward {
    space: SpaceSpec,
    rewards: Vec<f64>,
}

impl TableReward {
    pub fn new(space: SpaceSpec, rewards: Vec<f64>) -> Self {
        assert_eq!(space.terminal_count(), rewards.len() as u128);
        Self { space, rewards }
    }

    pub fn rewards(&self) -> &[f64] {
        &self.rewards
    }
}

impl TerminalReward for TableReward {
    fn space(&self) -> &SpaceSpec {
        &self.space
    }

    fn evaluate(&self, key: &StateKey) -> Result<(f64, f64), GflowError> {
        let idx = self
            .space
            .terminal_index(key)
            .map_err(|e| GflowError::Reward(e.into()))?;
        let r = self.rewards[idx];
        Ok((-r.ln(), r))
    }
}

/// One sampled trajectory with its reward and trajectory-balance residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryRecord {
    pub key: StateKey,
    /// Log-probability of each chosen action under the pure policy.
    pub step_logps: Vec<f64>,
    pub log_reward: f64,
    pub loss: f64,
    pub tb_residual: f64,
}

impl TrajectoryRecord {
    pub fn log_pf(&self) -> f64 {
        self.step_logps.iter().sum()
    }
}

/// Samples `n` terminal keys in lockstep, drawing each action from
/// `(1 - eps) * policy + eps * uniform`. Returns keys with per-step
/// log-probabilities under the pure policy.
pub fn rollout<R: Rng + ?Sized>(
    model: &PolicyModel,
    space: &SpaceSpec,
    n: usize,
    eps: f64,
    rng: &mut R,
) -> Result<Vec<(StateKey, Vec<f64>)>, GflowError> {
    if !(0.0..1.0).contains(&eps) {
        return Err(GflowError::Epsilon(eps));
    }
    model.check_space(space)?;
    let slots = space.slots();
    let mut keys = vec![StateKey::empty(); n];
    let mut logps = vec![Vec::with_capacity(slots); n];
    if n == 0 {
        return Ok(Vec::new());
    }
    for slot in 0..slots {
        let x = encode_batch(space, &keys)?;
        let lp = model.log_probs_batch(x, slot)?;
        let count = space.action_count(slot);
        for (i, row) in lp.axis_iter(Axis(0)).enumerate() {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut choice = count - 1;
            for (a, &l) in row.iter().enumerate() {
                acc += (1.0 - eps) * l.exp() + eps / count as f64;
                if u < acc {
                    choice = a;
                    break;
                }
            }
            keys[i] = keys[i].child(choice);
            logps[i].push(row[choice]);
        }
    }
    Ok(keys.into_iter().zip(logps).collect())
}

fn score_rollouts<T: TerminalReward + ?Sized>(
    model: &PolicyModel,
    reward: &T,
    rollouts: Vec<(StateKey, Vec<f64>)>,
) -> Result<Vec<TrajectoryRecord>, GflowError> {
    let log_z = model.log_z();
    rollouts
        .into_par_iter()
        .map(|(key, step_logps)| {
            let (loss, r) = reward.evaluate(&key)?;
            let log_reward = r.ln();
            if !log_reward.is_finite() {
                return Err(GflowError::NonFiniteReward(key));
            }
            let tb_residual = log_z + step_logps.iter().sum::<f64>() - log_reward;
            Ok(TrajectoryRecord {
                key,
                step_logps,
                log_reward,
                loss,
                tb_residual,
            })
        })
        .collect()
}

pub fn sample_trajectory<T: TerminalReward + ?Sized, R: Rng + ?Sized>(
    model: &PolicyModel,
    reward: &T,
    rng: &mut R,
    explore_eps: f64,
) -> Result<TrajectoryRecord, GflowError> {
    let mut batch = sample_batch(model, reward, 1, explore_eps, rng)?;
    Ok(batch.pop().expect("one trajectory"))
}

pub fn sample_batch<T: TerminalReward + ?Sized, R: Rng + ?Sized>(
    model: &PolicyModel,
    reward: &T,
    n: usize,
    explore_eps: f64,
    rng: &mut R,
) -> Result<Vec<TrajectoryRecord>, GflowError> {
    let rollouts = rollout(model, reward.space(), n, explore_eps, rng)?;
    score_rollouts(model, reward, rollouts)
}

/// `n` independent terminal draws from the pure policy.
pub fn sample_terminals<R: Rng + ?Sized>(
    model: &PolicyModel,
    space: &SpaceSpec,
    n: usize,
    rng: &mut R,
) -> Result<Vec<StateKey>, GflowError> {
    Ok(rollout(model, space, n, 0.0, rng)?
        .into_iter()
        .map(|(k, _)| k)
        .collect())
}

/// `log P_F` of a terminal's unique trajectory.
pub fn trajectory_log_pf(
    model: &PolicyModel,
    space: &SpaceSpec,
    key: &StateKey,
) -> Result<f64, GflowError> {
    let mut total = 0.0;
    for slot in 0..key.len() {
        let x = encode_batch(space, &[key.prefix(slot)])?;
        let lp = model.log_probs_batch(x, slot)?;
        total += lp[[0, key.actions()[slot] as usize]];
    }
    Ok(total)
}

/// Mean squared trajectory-balance residual, recomputing `log P_F` from the model.
pub fn tb_loss(
    model: &PolicyModel,
    space: &SpaceSpec,
    batch: &[TrajectoryRecord],
) -> Result<f64, GflowError> {
    Ok(tb_loss_and_grad_inner(model, space, batch, false)?.0)
}

/// Loss and its gradient with respect to every model parameter (including
/// `log_z`, the last entry).
pub fn tb_loss_and_grad(
    model: &PolicyModel,
    space: &SpaceSpec,
    batch: &[TrajectoryRecord],
) -> Result<(f64, Vec<f64>), GflowError> {
    tb_loss_and_grad_inner(model, space, batch, true)
}

fn tb_loss_and_grad_inner(
    model: &PolicyModel,
    space: &SpaceSpec,
    batch: &[TrajectoryRecord],
    want_grad: bool,
) -> Result<(f64, Vec<f64>), GflowError> {
    if batch.is_empty() {
        return Err(GflowError::EmptyBatch);
    }
    if let Some(t) = batch.iter().find(|t| !t.log_reward.is_finite()) {
        return Err(GflowError::NonFiniteReward(t.key.clone()));
    }
    let b = batch.len();
    let slots = space.slots();
    // Stack every prefix, slot-major: rows [slot * b, (slot + 1) * b).
    let mut prefixes = Vec::with_capacity(b * slots);
    for slot in 0..slots {
        for t in batch {
            prefixes.push(t.key.prefix(slot));
        }
    }
    let pass = model.trunk_forward(encode_batch(space, &prefixes)?)?;
    let top = pass.acts.last().unwrap();

    let mut log_pf = vec![0.0; b];
    let mut probs = Vec::with_capacity(slots);
    for slot in 0..slots {
        let rows = slot * b..(slot + 1) * b;
        let mut logits = model.head_logits(slot, top.slice(ndarray::s![rows, ..]));
        for (i, mut row) in logits.axis_iter_mut(Axis(0)).enumerate() {
            let row = row.as_slice_mut().expect("row-major");
            crate::policy::log_softmax_inplace(row);
            log_pf[i] += row[batch[i].key.actions()[slot] as usize];
        }
        probs.push(logits);
    }
    let log_z = model.log_z();
    let residuals: Vec<f64> = batch
        .iter()
        .zip(&log_pf)
        .map(|(t, lp)| log_z + lp - t.log_reward)
        .collect();
    let loss = residuals.iter().map(|r| r * r).sum::<f64>() / b as f64;

    let mut grad = vec![0.0; model.num_params()];
    if !want_grad {
        return Ok((loss, grad));
    }
    let scale = 2.0 / b as f64;
    let mut dlogits = Vec::with_capacity(slots);
    let mut slot_rows = Vec::with_capacity(slots);
    for (slot, logp) in probs.into_iter().enumerate() {
        let mut d: Array2<f64> = logp.mapv(|l| -l.exp());
        for (i, mut row) in d.axis_iter_mut(Axis(0)).enumerate() {
            row[batch[i].key.actions()[slot] as usize] += 1.0;
            row *= scale * residuals[i];
        }
        dlogits.push(d);
        slot_rows.push((slot, slot * b..(slot + 1) * b));
    }
    model.backward(&pass, &slot_rows, &dlogits, &mut grad);
    grad[model.log_z_index()] = scale * residuals.iter().sum::<f64>();
    Ok((loss, grad))
}

/// Probability of every terminal (enumeration order) under the pure policy.
pub fn exact_terminal_distribution(
    model: &PolicyModel,
    space: &SpaceSpec,
    cap: u128,
) -> Result<Vec<f64>, GflowError> {
    let count = space.terminal_count();
    if count > cap {
        return Err(GflowError::TooLarge { count, cap });
    }
    model.check_space(space)?;
    let mut level = vec![(StateKey::empty(), 0.0f64)];
    for slot in 0..space.slots() {
        let keys: Vec<StateKey> = level.iter().map(|(k, _)| k.clone()).collect();
        let lp = model.log_probs_batch(encode_batch(space, &keys)?, slot)?;
        let mut next = Vec::with_capacity(level.len() * space.action_count(slot));
        for ((key, acc), row) in level.iter().zip(lp.axis_iter(Axis(0))) {
            for (a, &l) in row.iter().enumerate() {
                next.push((key.child(a), acc + l));
            }
        }
        level = next;
    }
    Ok(level.into_iter().map(|(_, l)| l.exp()).collect())
}

/// Training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate applied to `log_z`.
    pub log_z_lr: f64,
    pub hidden: Vec<usize>,
    /// Initial exploration mixing weight.
    pub explore_eps: f64,
    /// Fraction of training over which exploration decays linearly to zero.
    pub explore_decay: f64,
    pub seed: u64,
    /// Stop once this many distinct terminals have been evaluated.
    pub max_unique: Option<usize>,
    /// Stop once this many trajectories have been drawn.
    pub max_trajectories: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr: 5e-4,
            log_z_lr: 0.05,
            hidden: vec![256, 256, 256],
            explore_eps: 0.05,
            explore_decay: 0.5,
            seed: 0,
            max_unique: None,
            max_trajectories: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), GflowError> {
        let bad = |m: &str| Err(GflowError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.log_z_lr > 0.0) {
            return bad("learning rates must be positive");
        }
        if !(0.0..1.0).contains(&self.explore_eps) {
            return Err(GflowError::Epsilon(self.explore_eps));
        }
        if !(self.explore_decay > 0.0 && self.explore_decay <= 1.0) {
            return bad("explore_decay must lie in (0, 1]");
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return bad("hidden widths must be positive");
        }
        Ok(())
    }

    pub fn epsilon_at(&self, step: usize) -> f64 {
        let horizon = self.explore_decay * self.steps as f64;
        if horizon <= 0.0 {
            return 0.0;
        }
        (self.explore_eps * (1.0 - step as f64 / horizon)).max(0.0)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub step: usize,
    pub tb_loss: f64,
    pub log_z: f64,
    pub unique_terminals: usize,
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: PolicyModel,
    pub log: Vec<TrainLogEntry>,
    /// Distinct terminals in order of first evaluation, with their losses.
    pub evaluated: Vec<(StateKey, f64)>,
    pub rng: ChaCha8Rng,
}

/// Trains a forward policy and `log_z` by trajectory balance.
pub fn train<T: TerminalReward + ?Sized>(
    reward: &T,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, GflowError> {
    cfg.validate()?;
    let space = reward.space();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = PolicyModel::new(space, &cfg.hidden, &mut rng);
    let mut opt = Adam::new(model.num_params());
    let log_z_index = model.log_z_index();
    let mut seen = HashSet::new();
    let mut evaluated = Vec::new();
    let mut log = Vec::with_capacity(cfg.steps);
    let mut drawn = 0usize;

    for step in 0..cfg.steps {
        let eps = cfg.epsilon_at(step);
        let mut rollouts = rollout(&model, space, cfg.batch_size, eps, &mut rng)?;
        let mut exhausted = false;
        if let Some(limit) = cfg.max_trajectories {
            let left = limit.saturating_sub(drawn);
            if left <= rollouts.len() {
                rollouts.truncate(left);
                exhausted = true;
            }
            if rollouts.is_empty() {
                break;
            }
        }
        if let Some(budget) = cfg.max_unique {
            let mut fresh = HashSet::new();
            let mut keep = 0;
            for (key, _) in &rollouts {
                if !seen.contains(key) && !fresh.contains(key) {
                    if seen.len() + fresh.len() >= budget {
                        exhausted = true;
                        break;
                    }
                    fresh.insert(key.clone());
                }
                keep += 1;
            }
            rollouts.truncate(keep);
            if rollouts.is_empty() {
                break;
            }
        }
        let batch = score_rollouts(&model, reward, rollouts)?;
        drawn += batch.len();
        for t in &batch {
            if seen.insert(t.key.clone()) {
                evaluated.push((t.key.clone(), t.loss));
            }
        }
        let (loss, grad) = tb_loss_and_grad(&model, space, &batch)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(GflowError::Diverged { step, loss });
        }
        let (lr, lz) = (cfg.lr, cfg.log_z_lr);
        opt.step(model.params_mut(), &grad, |i| if i == log_z_index { lz } else { lr });
        log.push(TrainLogEntry {
            step,
            tb_loss: loss,
            log_z: model.log_z(),
            unique_terminals: seen.len(),
        });
        if exhausted {
            break;
        }
    }
    Ok(TrainOutcome {
        model,
        log,
        evaluated,
        rng,
    })
}

pub fn write_train_log(path: &Path, log: &[TrainLogEntry]) -> Result<(), GflowError> {
    let mut w = csv::Writer::from_path(path)?;
    for e in log {
        w.serialize(e)?;
    }
    w.flush()?;
    Ok(())
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Serialized model plus the sampler state needed to resume.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config_hash: String,
    pub seed: u64,
    pub steps_completed: usize,
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub head_sizes: Vec<usize>,
    pub log_z: f64,
    pub params: Vec<f64>,
    pub rng: ChaCha8Rng,
}

impl Checkpoint {
    pub fn new(
        model: &PolicyModel,
        rng: &ChaCha8Rng,
        seed: u64,
        steps_completed: usize,
        config_hash: &str,
    ) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.to_string(),
            seed,
            steps_completed,
            input_dim: model.input_dim(),
            hidden: model.hidden().to_vec(),
            head_sizes: model.head_sizes().to_vec(),
            log_z: model.log_z(),
            params: model.params().to_vec(),
            rng: rng.clone(),
        }
    }

    pub fn model(&self) -> Result<PolicyModel, GflowError> {
        Ok(PolicyModel::from_params(
            self.input_dim,
            &self.hidden,
            &self.head_sizes,
            self.params.clone(),
        )?)
    }

    pub fn save(&self, path: &Path) -> Result<(), GflowError> {
        std::fs::write(path, serde_json::to_vec(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, GflowError> {
        let c: Checkpoint = serde_json::from_slice(&std::fs::read(path)?)?;
        if c.version != CHECKPOINT_VERSION {
            return Err(GflowError::Version(c.version));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{ActionSpec, GroupSpec, ParameterSpec};

    /// Two groups with 2 and 3 actions: six terminals.
    pub(crate) fn fixture_space() -> SpaceSpec {
        let p = |name: &str, group| ParameterSpec {
            name: name.into(),
            lower: 0.0,
            upper: 1.0,
            baseline: 0.5,
            group,
        };
        let a = |name: &str, param: &str, sign| ActionSpec {
            name: name.into(),
            signs: if sign == 0 {
                Default::default()
            } else {
                [(param.to_string(), sign)].into_iter().collect()
            },
        };
        SpaceSpec::build(
            vec![
                GroupSpec {
                    order: 1,
                    name: "a".into(),
                    actions: vec![a("none", "x", 0), a("up", "x", 1)],
                },
                GroupSpec {
                    order: 2,
                    name: "b".into(),
                    actions: vec![a("none", "y", 0), a("up", "y", 1), a("down", "y", -1)],
                },
            ],
            vec![p("x", 1), p("y", 2)],
            1,
            0.3,
        )
        .unwrap()
    }

    fn random_model(space: &SpaceSpec, hidden: &[usize], seed: u64) -> PolicyModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = PolicyModel::new(space, hidden, &mut rng);
        for v in m.params_mut() {
            *v = rng.random_range(-0.8..0.8);
        }
        m
    }

    #[test]
    fn uniform_policy_on_builtin_space() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = PolicyModel::new(&space, &[8], &mut rng);
        let p = exact_terminal_distribution(&model, &space, 100_000).unwrap();
        assert_eq!(p.len(), 2625);
        for v in &p {
            assert!((v - 1.0 / 2625.0).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_distribution_normalized_and_capped() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let model = random_model(&space, &[8, 8], 3);
        let p = exact_terminal_distribution(&model, &space, 100_000).unwrap();
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        let two = SpaceSpec::builtin(2, 0.3).unwrap();
        let m2 = PolicyModel::new(&two, &[4], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(
            exact_terminal_distribution(&m2, &two, 100_000),
            Err(GflowError::TooLarge { .. })
        ));
    }

    #[test]
    fn recorded_logps_match_recomputation() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let model = random_model(&space, &[8, 8], 4);
        let rewards = TableReward::new(space.clone(), vec![0.5; 2625]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch = sample_batch(&model, &rewards, 20, 0.3, &mut rng).unwrap();
        for t in &batch {
            let lp = trajectory_log_pf(&model, &space, &t.key).unwrap();
            assert!((t.log_pf() - lp).abs() < 1e-12);
            assert!(t.step_logps.iter().all(|&l| l <= 0.0));
            let expected = model.log_z() + lp - 0.5f64.ln();
            assert!((t.tb_residual - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn delta_policy_is_deterministic() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let mut model = PolicyModel::zeros(35, &[4], &space.radices());
        for slot in 0..5 {
            let mut logits = vec![0.0; space.action_count(slot)];
            let n = logits.len();
            logits[slot % n] = 60.0;
            model.set_head_bias(slot, &logits);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let keys = sample_terminals(&model, &space, 50, &mut rng).unwrap();
        assert!(keys.iter().all(|k| k == &keys[0]));
        assert_eq!(keys[0], StateKey::new(vec![0, 1, 2, 3, 4]));
        assert!(sample_terminals(&model, &space, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn sampling_reproducible_with_seed() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let model = random_model(&space, &[8], 6);
        let a = sample_terminals(&model, &space, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let b = sample_terminals(&model, &space, 30, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn near_uniform_exploration_marginals() {
        // delta policy, eps close to 1: each slot's marginal is near uniform
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let mut model = PolicyModel::zeros(35, &[4], &space.radices());
        for slot in 0..5 {
            let mut logits = vec![0.0; space.action_count(slot)];
            logits[0] = 60.0;
            model.set_head_bias(slot, &logits);
        }
        let eps = 1.0 - 1e-9;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let draws = rollout(&model, &space, n, eps, &mut rng).unwrap();
        for slot in 0..5 {
            let r = space.action_count(slot);
            let mut counts = vec![0usize; r];
            for (k, _) in &draws {
                counts[k.actions()[slot] as usize] += 1;
            }
            let p = 1.0 / r as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            for c in counts {
                assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd, "slot {slot}");
            }
        }
    }

    #[test]
    fn tb_loss_basic_properties() {
        let space = fixture_space();
        let model = random_model(&space, &[6], 8);
        let rewards = TableReward::new(space.clone(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut batch = sample_batch(&model, &rewards, 8, 0.0, &mut rng).unwrap();
        let loss = tb_loss(&model, &space, &batch).unwrap();
        let direct = batch.iter().map(|t| t.tb_residual.powi(2)).sum::<f64>() / 8.0;
        assert!((loss - direct).abs() < 1e-12);
        batch.reverse();
        assert!((tb_loss(&model, &space, &batch).unwrap() - loss).abs() < 1e-12);
        assert!(matches!(tb_loss(&model, &space, &[]), Err(GflowError::EmptyBatch)));
        batch[0].log_reward = f64::NEG_INFINITY;
        assert!(matches!(
            tb_loss(&model, &space, &batch),
            Err(GflowError::NonFiniteReward(_))
        ));
    }

    #[test]
    fn matched_model_has_zero_loss() {
        // rewards factor as r(a) * r(b), so independent per-slot biases are optimal
        let space = fixture_space();
        let rewards = vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0];
        let z: f64 = rewards.iter().sum();
        let mut model = PolicyModel::zeros(crate::policy::feature_dim(&space), &[4], &space.radices());
        model.set_head_bias(0, &[(6.0f64 / z).ln(), (12.0f64 / z).ln()]);
        model.set_head_bias(1, &[(1.0f64 / 6.0).ln(), (2.0f64 / 6.0).ln(), (3.0f64 / 6.0).ln()]);
        model.set_log_z(z.ln());
        let table = TableReward::new(space.clone(), rewards.clone());
        let p = exact_terminal_distribution(&model, &space, 100).unwrap();
        for (pi, r) in p.iter().zip(&rewards) {
            assert!((pi - r / z).abs() < 1e-12);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let batch = sample_batch(&model, &table, 32, 0.0, &mut rng).unwrap();
        assert!(tb_loss(&model, &space, &batch).unwrap() < 1e-20);
    }

    #[test]
    fn single_terminal_optimum() {
        let space = SpaceSpec::build(
            vec![GroupSpec {
                order: 1,
                name: "g".into(),
                actions: vec![ActionSpec {
                    name: "none".into(),
                    signs: Default::default(),
                }],
            }],
            vec![ParameterSpec {
                name: "x".into(),
                lower: 0.0,
                upper: 1.0,
                baseline: 0.5,
                group: 1,
            }],
            1,
            0.3,
        )
        .unwrap();
        let table = TableReward::new(space.clone(), vec![0.37]);
        let mut model = PolicyModel::zeros(crate::policy::feature_dim(&space), &[3], &[1]);
        model.set_log_z(0.37f64.ln());
        let batch = sample_batch(&model, &table, 4, 0.0, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(tb_loss(&model, &space, &batch).unwrap(), 0.0);
        assert_eq!(batch[0].step_logps, vec![0.0]);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let mut model = random_model(&space, &[8, 8, 8], 21);
        model.set_log_z(0.3);
        let rewards: Vec<f64> = (0..2625).map(|i| 0.05 + (i % 17) as f64 / 17.0).collect();
        let table = TableReward::new(space.clone(), rewards);
        let batch = sample_batch(&model, &table, 6, 0.2, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let (_, grad) = tb_loss_and_grad(&model, &space, &batch).unwrap();
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 0..model.num_params() {
            let orig = model.params()[i];
            model.params_mut()[i] = orig + h;
            let up = tb_loss(&model, &space, &batch).unwrap();
            model.params_mut()[i] = orig - h;
            let down = tb_loss(&model, &space, &batch).unwrap();
            model.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-4, "worst relative error {worst}");
    }

    #[test]
    fn training_reduces_loss_on_fixture() {
        let space = fixture_space();
        let table = TableReward::new(space.clone(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let cfg = TrainConfig {
            steps: 600,
            hidden: vec![32, 32],
            seed: 1,
            ..TrainConfig::default()
        };
        let out = train(&table, &cfg).unwrap();
        let n = out.log.len() / 10;
        let first: f64 = out.log[..n].iter().map(|e| e.tb_loss).sum::<f64>() / n as f64;
        let last: f64 = out.log[out.log.len() - n..].iter().map(|e| e.tb_loss).sum::<f64>() / n as f64;
        assert!(last < 0.1 * first, "first {first} last {last}");
    }

    #[test]
    fn budget_caps_distinct_evaluations() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = TableReward::new(space.clone(), vec![1.0; 2625]);
        let cfg = TrainConfig {
            steps: 500,
            hidden: vec![8],
            max_unique: Some(100),
            ..TrainConfig::default()
        };
        let out = train(&table, &cfg).unwrap();
        assert_eq!(out.evaluated.len(), 100);
        assert!(out.log.len() < 500);
        assert_eq!(out.log.last().unwrap().unique_terminals, 100);
    }

    #[test]
    fn trajectory_cap_stops_training() {
        let space = fixture_space();
        let table = TableReward::new(space, vec![1.0; 6]);
        let cfg = TrainConfig {
            steps: 100,
            hidden: vec![4],
            max_trajectories: Some(40),
            ..TrainConfig::default()
        };
        let out = train(&table, &cfg).unwrap();
        // 16 + 16 + 8
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let space = fixture_space();
        let model = random_model(&space, &[5, 4], 2);
        let rng = ChaCha8Rng::seed_from_u64(77);
        let ck = Checkpoint::new(&model, &rng, 3, 10, "abc");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.model().unwrap(), model);
    }
}
