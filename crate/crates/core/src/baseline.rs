//! Budget-matched baseline searchers: uniform random search and a per-slot
//! categorical tree-structured Parzen estimator.
//!
//! Budgets count distinct evaluated terminals. Repeated proposals are skipped
//! without consuming budget, so traces hold each key once.

use crate::gflownet::{GflowError, TerminalReward};
use crate::space::{SpaceSpec, StateKey};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::Write;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Reward(#[from] GflowError),
    #[error("invalid TPE settings: {0}")]
    Settings(String),
    #[error("trace: {0}")]
    Csv(#[from] csv::Error),
    #[error("trace: {0}")]
    Io(#[from] std::io::Error),
}

/// What a budget unit counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BudgetMode {
    /// Distinct simulator-evaluated terminals; repeated proposals are free.
    #[default]
    Unique,
    /// Every proposal, repeated or not.
    Proposals,
}

/// Ordered distinct evaluations of one search run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchTrace {
    pub method: String,
    pub seed: u64,
    pub budget: usize,
    pub evaluated: Vec<(StateKey, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub key: String,
    pub loss: f64,
    pub best_so_far: f64,
}

impl SearchTrace {
    pub fn rows(&self) -> Vec<TraceRow> {
        let mut best = f64::INFINITY;
        self.evaluated
            .iter()
            .enumerate()
            .map(|(i, (k, l))| {
                best = best.min(*l);
                TraceRow {
                    iteration: i + 1,
                    key: k.to_string(),
                    loss: *l,
                    best_so_far: best,
                }
            })
            .collect()
    }

    /// Writes the trace as CSV, preceded by a `#` comment line when `header` is given.
    pub fn write_csv<W: Write>(&self, mut out: W, header: Option<&str>) -> Result<(), SearchError> {
        if let Some(h) = header {
            writeln!(out, "# {h}")?;
        }
        let mut w = csv::Writer::from_writer(out);
        for r in self.rows() {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// One terminal with every slot's action drawn uniformly.
pub fn random_terminal<R: Rng + ?Sized>(space: &SpaceSpec, rng: &mut R) -> StateKey {
    StateKey::from_indices(
        &space
            .radices()
            .iter()
            .map(|&r| rng.random_range(0..r))
            .collect::<Vec<_>>(),
    )
}

/// Proposals tolerated per budget unit before giving up on finding unseen keys.
const MAX_REJECTS: usize = 10_000;

fn effective_budget(space: &SpaceSpec, budget: usize) -> usize {
    space.terminal_count().min(budget as u128) as usize
}

/// Tracks budget consumption for one run.
struct Meter {
    mode: BudgetMode,
    limit: usize,
    unique_target: usize,
    proposals: usize,
    rejects: usize,
}

impl Meter {
    fn new(space: &SpaceSpec, budget: usize, mode: BudgetMode) -> Self {
        Self {
            mode,
            limit: budget,
            unique_target: effective_budget(space, budget),
            proposals: 0,
            rejects: 0,
        }
    }

    fn open(&self, distinct: usize) -> bool {
        match self.mode {
            BudgetMode::Unique => {
                distinct < self.unique_target && self.rejects < MAX_REJECTS * self.unique_target.max(1)
            }
            BudgetMode::Proposals => self.proposals < self.limit && distinct < self.unique_target,
        }
    }

    fn propose(&mut self, fresh: bool) {
        self.proposals += 1;
        if !fresh {
            self.rejects += 1;
        }
    }
}

pub fn random_search<T: TerminalReward + ?Sized>(
    reward: &T,
    budget: usize,
    mode: BudgetMode,
    seed: u64,
) -> Result<SearchTrace, SearchError> {
    let space = reward.space();
    let mut meter = Meter::new(space, budget, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut evaluated = Vec::new();
    while meter.open(evaluated.len()) {
        let key = random_terminal(space, &mut rng);
        let fresh = seen.insert(key.clone());
        meter.propose(fresh);
        if !fresh {
            continue;
        }
        let (loss, _) = reward.evaluate(&key)?;
        evaluated.push((key, loss));
    }
    Ok(SearchTrace {
        method: "random".into(),
        seed,
        budget,
        evaluated,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TpeSettings {
    pub gamma: f64,
    pub n_candidates: usize,
    pub startup: usize,
}

impl Default for TpeSettings {
    fn default() -> Self {
        Self {
            gamma: 0.25,
            n_candidates: 24,
            startup: 10,
        }
    }
}

impl TpeSettings {
    pub fn validate(&self) -> Result<(), SearchError> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(SearchError::Settings(format!("gamma {} not in (0, 1)", self.gamma)));
        }
        if self.n_candidates == 0 || self.startup == 0 {
            return Err(SearchError::Settings("n_candidates and startup must be positive".into()));
        }
        Ok(())
    }
}

/// Laplace-smoothed per-slot categorical densities over a set of keys.
pub fn slot_densities(radices: &[usize], keys: &[&StateKey]) -> Vec<Vec<f64>> {
    radices
        .iter()
        .enumerate()
        .map(|(slot, &r)| {
            let mut counts = vec![1.0; r];
            for k in keys {
                counts[k.actions()[slot] as usize] += 1.0;
            }
            let denom = (keys.len() + r) as f64;
            counts.into_iter().map(|c| c / denom).collect()
        })
        .collect()
}

fn draw_categorical<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in p.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Next TPE proposal given the history; `None` if every candidate was seen.
pub fn tpe_propose<R: Rng + ?Sized>(
    space: &SpaceSpec,
    history: &[(StateKey, f64)],
    seen: &HashSet<StateKey>,
    settings: &TpeSettings,
    rng: &mut R,
) -> Option<StateKey> {
    let radices = space.radices();
    let mut order: Vec<usize> = (0..history.len()).collect();
    order.sort_by(|&a, &b| {
        history[a]
            .1
            .total_cmp(&history[b].1)
            .then_with(|| history[a].0.cmp(&history[b].0))
    });
    let n_good = ((settings.gamma * history.len() as f64).ceil() as usize).clamp(1, history.len());
    let good: Vec<&StateKey> = order[..n_good].iter().map(|&i| &history[i].0).collect();
    let bad: Vec<&StateKey> = order[n_good..].iter().map(|&i| &history[i].0).collect();
    let l = slot_densities(&radices, &good);
    let g = slot_densities(&radices, &bad);
    let mut best: Option<(f64, StateKey)> = None;
    for _ in 0..settings.n_candidates {
        let actions: Vec<usize> = l.iter().map(|p| draw_categorical(p, rng)).collect();
        let key = StateKey::from_indices(&actions);
        if seen.contains(&key) {
            continue;
        }
        let score: f64 = actions
            .iter()
            .enumerate()
            .map(|(s, &a)| l[s][a].ln() - g[s][a].ln())
            .sum();
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            best = Some((score, key));
        }
    }
    best.map(|(_, k)| k)
}

pub fn tpe_search<T: TerminalReward + ?Sized>(
    reward: &T,
    budget: usize,
    mode: BudgetMode,
    seed: u64,
    settings: &TpeSettings,
) -> Result<SearchTrace, SearchError> {
    settings.validate()?;
    let space = reward.space();
    let mut meter = Meter::new(space, budget, mode);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = HashSet::new();
    let mut evaluated: Vec<(StateKey, f64)> = Vec::new();
    while meter.open(evaluated.len()) {
        let proposal = if evaluated.len() < settings.startup {
            None
        } else {
            tpe_propose(space, &evaluated, &seen, settings, &mut rng)
        };
        let key = proposal.unwrap_or_else(|| random_terminal(space, &mut rng));
        let fresh = seen.insert(key.clone());
        meter.propose(fresh);
        if !fresh {
            continue;
        }
        let (loss, _) = reward.evaluate(&key)?;
        evaluated.push((key, loss));
    }
    Ok(SearchTrace {
        method: "tpe".into(),
        seed,
        budget,
        evaluated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gflownet::TableReward;

    /// Loss counts slots that deviate from a preferred action; preferred key wins.
    fn dominant_table(space: &SpaceSpec, preferred: &[u8]) -> TableReward {
        let rewards = space
            .enumerate_terminals()
            .map(|k| {
                let misses = k.actions().iter().zip(preferred).filter(|(a, b)| a != b).count();
                (-(misses as f64)).exp()
            })
            .collect();
        TableReward::new(space.clone(), rewards)
    }

    #[test]
    fn budget_zero_and_validity() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[1, 2, 3, 4, 5]);
        assert!(random_search(&table, 0, BudgetMode::Unique, 1).unwrap().evaluated.is_empty());
        assert!(tpe_search(&table, 0, BudgetMode::Unique, 1, &TpeSettings::default()).unwrap().evaluated.is_empty());
        for trace in [
            random_search(&table, 300, BudgetMode::Unique, 2).unwrap(),
            tpe_search(&table, 300, BudgetMode::Unique, 2, &TpeSettings::default()).unwrap(),
        ] {
            assert_eq!(trace.evaluated.len(), 300);
            let distinct: HashSet<_> = trace.evaluated.iter().map(|(k, _)| k).collect();
            assert_eq!(distinct.len(), 300);
            for (k, l) in &trace.evaluated {
                assert!(space.is_terminal(k));
                assert_eq!(*l, table.evaluate(k).unwrap().0);
            }
        }
    }

    #[test]
    fn budget_above_space_size_exhausts_space() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[0; 5]);
        let t = random_search(&table, 5000, BudgetMode::Unique, 0).unwrap();
        assert_eq!(t.evaluated.len(), 2625);
    }

    #[test]
    fn proposal_budget_counts_repeats() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[0; 5]);
        let t = random_search(&table, 2000, BudgetMode::Proposals, 4).unwrap();
        // repeats among 2000 uniform draws from 2625 keys are near certain
        assert!(t.evaluated.len() < 2000);
        let u = random_search(&table, 2000, BudgetMode::Unique, 4).unwrap();
        assert_eq!(u.evaluated.len(), 2000);
        assert_eq!(u.evaluated[..t.evaluated.len()], t.evaluated[..]);
    }

    #[test]
    fn random_terminal_marginals_uniform() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let n = 10_000;
        let draws: Vec<StateKey> = (0..n).map(|_| random_terminal(&space, &mut rng)).collect();
        for (slot, &r) in space.radices().iter().enumerate() {
            let mut counts = vec![0usize; r];
            for k in &draws {
                counts[k.actions()[slot] as usize] += 1;
            }
            let p = 1.0 / r as f64;
            let sd = (n as f64 * p * (1.0 - p)).sqrt();
            for c in counts {
                assert!((c as f64 - n as f64 * p).abs() <= 3.0 * sd);
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[2, 2, 2, 2, 2]);
        let s = TpeSettings::default();
        assert_eq!(tpe_search(&table, 80, BudgetMode::Unique, 5, &s).unwrap(), tpe_search(&table, 80, BudgetMode::Unique, 5, &s).unwrap());
        assert_eq!(random_search(&table, 80, BudgetMode::Unique, 5).unwrap(), random_search(&table, 80, BudgetMode::Unique, 5).unwrap());
        assert_ne!(random_search(&table, 80, BudgetMode::Unique, 5).unwrap(), random_search(&table, 80, BudgetMode::Unique, 6).unwrap());
    }

    #[test]
    fn densities_laplace_smoothed() {
        let k1 = StateKey::new(vec![0, 1]);
        let k2 = StateKey::new(vec![0, 2]);
        let d = slot_densities(&[2, 3], &[&k1, &k2]);
        assert_eq!(d[0], vec![3.0 / 4.0, 1.0 / 4.0]);
        assert_eq!(d[1], vec![1.0 / 5.0, 2.0 / 5.0, 2.0 / 5.0]);
        let empty = slot_densities(&[4], &[]);
        assert_eq!(empty[0], vec![0.25; 4]);
    }

    #[test]
    fn equal_losses_make_ratio_constant() {
        // good and bad sets hold the same key, so l == g and every candidate scores 0
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let k = StateKey::new(vec![1, 1, 1, 1, 1]);
        let history = vec![(k.clone(), 1.0), (k.clone(), 1.0)];
        let radices = space.radices();
        let l = slot_densities(&radices, &[&history[0].0]);
        let g = slot_densities(&radices, &[&history[1].0]);
        assert_eq!(l, g);
        let s = TpeSettings { gamma: 0.5, ..TpeSettings::default() };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut seen = HashSet::new();
        seen.insert(k.clone());
        let p = tpe_propose(&space, &history, &seen, &s, &mut rng).unwrap();
        // with constant ratio the first unseen candidate is kept
        let mut rng2 = ChaCha8Rng::seed_from_u64(0);
        let first = loop {
            let a: Vec<usize> = l.iter().map(|d| draw_categorical(d, &mut rng2)).collect();
            let c = StateKey::from_indices(&a);
            if !seen.contains(&c) {
                break c;
            }
        };
        assert_eq!(p, first);
    }

    #[test]
    fn settings_validated() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[0; 5]);
        for s in [
            TpeSettings { gamma: 1.0, ..TpeSettings::default() },
            TpeSettings { n_candidates: 0, ..TpeSettings::default() },
            TpeSettings { startup: 0, ..TpeSettings::default() },
        ] {
            assert!(matches!(tpe_search(&table, 10, BudgetMode::Unique, 0, &s), Err(SearchError::Settings(_))));
        }
    }

    #[test]
    fn tpe_beats_random_on_dominant_landscape() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        let table = dominant_table(&space, &[2, 4, 1, 3, 6]);
        let mut tpe = Vec::new();
        let mut rnd = Vec::new();
        let best = |t: &SearchTrace| t.evaluated.iter().map(|e| e.1).fold(f64::INFINITY, f64::min);
        for seed in 0..5 {
            tpe.push(best(&tpe_search(&table, 200, BudgetMode::Unique, seed, &TpeSettings::default()).unwrap()));
            rnd.push(best(&random_search(&table, 200, BudgetMode::Unique, seed).unwrap()));
        }
        tpe.sort_by(f64::total_cmp);
        rnd.sort_by(f64::total_cmp);
        assert!(tpe[2] <= rnd[2], "tpe {tpe:?} random {rnd:?}");
    }

    #[test]
    fn trace_csv_rows() {
        let trace = SearchTrace {
            method: "random".into(),
            seed: 0,
            budget: 3,
            evaluated: vec![
                (StateKey::new(vec![0, 1]), 0.5),
                (StateKey::new(vec![1, 1]), 0.4),
                (StateKey::new(vec![1, 0]), 0.45),
            ],
        };
        let mut buf = Vec::new();
        trace.write_csv(&mut buf, Some("config_hash=abc")).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "# config_hash=abc\niteration,key,loss,best_so_far\n1,0.1,0.5,0.5\n2,1.1,0.4,0.4\n3,1.0,0.45,0.4\n"
        );
    }
}
