//! Exact target landscape over an enumerable space and the analyses built on
//! it: neighborhood-ascent basins, L1 comparison, rank profiles and a 2-D
//! radix projection.

use crate::reward::{RewardError, Scorer};
use crate::space::{SpaceError, SpaceSpec, StateKey};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

pub const DEFAULT_ENUMERATION_CAP: u128 = 100_000;

#[derive(Debug, Error)]
pub enum LandscapeError {
    #[error("{count} terminals exceed the enumeration cap of {cap}")]
    TooLarge { count: u128, cap: u128 },
    #[error("distribution sizes differ: {0} vs {1}")]
    SupportMismatch(usize, usize),
    #[error("landscape has {got} entries, space has {expected} terminals")]
    Incomplete { got: usize, expected: u128 },
    #[error("rewards must be finite and non-negative with a positive sum")]
    BadRewards,
    #[error("row split {split} must lie in 1..{slots}")]
    BadSplit { split: usize, slots: usize },
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Space(#[from] SpaceError),
}

/// Every terminal of an enumerable space with its loss, reward and exact
/// target probability, indexed in enumeration order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeTable {
    pub keys: Vec<StateKey>,
    pub aggregate: Vec<f64>,
    pub reward: Vec<f64>,
    pub z: f64,
    pub target_prob: Vec<f64>,
}

impl LandscapeTable {
    pub fn from_rewards(
        space: &SpaceSpec,
        aggregate: Vec<f64>,
        reward: Vec<f64>,
    ) -> Result<Self, LandscapeError> {
        let expected = space.terminal_count();
        if aggregate.len() as u128 != expected || reward.len() as u128 != expected {
            return Err(LandscapeError::Incomplete {
                got: aggregate.len().min(reward.len()),
                expected,
            });
        }
        if reward.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(LandscapeError::BadRewards);
        }
        let z: f64 = reward.iter().sum();
        if !(z > 0.0 && z.is_finite()) {
            return Err(LandscapeError::BadRewards);
        }
        let target_prob = reward.iter().map(|r| r / z).collect();
        Ok(Self {
            keys: space.enumerate_terminals().collect(),
            aggregate,
            reward,
            z,
            target_prob,
        })
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    /// Terminal indices by decreasing target probability, ties by key order.
    pub fn rank_order(&self) -> Vec<usize> {
        rank_order(&self.target_prob)
    }

    /// 1-based rank of a terminal by target probability.
    pub fn rank_of(&self, index: usize) -> usize {
        let p = self.target_prob[index];
        1 + self
            .target_prob
            .iter()
            .enumerate()
            .filter(|&(j, &q)| q > p || (q == p && j < index))
            .count()
    }

    pub fn min_aggregate(&self) -> f64 {
        self.aggregate.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Index set of the top-k terminals by target probability.
    pub fn top_k(&self, k: usize) -> Vec<usize> {
        let mut order = self.rank_order();
        order.truncate(k);
        order
    }
}

/// Scores every terminal through the scorer (and its cache).
pub fn build_landscape(scorer: &Scorer, cap: u128) -> Result<LandscapeTable, LandscapeError> {
    let space = scorer.space();
    let count = space.terminal_count();
    if count > cap {
        return Err(LandscapeError::TooLarge { count, cap });
    }
    let keys: Vec<StateKey> = space.enumerate_terminals().collect();
    let records = scorer.score_many(&keys)?;
    let aggregate = records.iter().map(|r| r.aggregate).collect();
    let reward = records.iter().map(|r| r.reward).collect();
    LandscapeTable::from_rewards(space, aggregate, reward)
}

/// Indices sorted by decreasing probability, ties by index.
pub fn rank_order(p: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&i, &j| p[j].total_cmp(&p[i]).then(i.cmp(&j)));
    order
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Basin {
    pub mode: usize,
    pub mass: f64,
    pub size: usize,
}

/// Mode reached by probability ascent from every terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct BasinAssignment {
    /// Mode index for each terminal index.
    pub mode_of: Vec<usize>,
    /// Basins sorted by mode index.
    pub basins: Vec<Basin>,
    /// Longest ascent path, in moves.
    pub max_path: usize,
}

impl BasinAssignment {
    pub fn basin_mass(&self) -> BTreeMap<usize, f64> {
        self.basins.iter().map(|b| (b.mode, b.mass)).collect()
    }

    pub fn num_basins(&self) -> usize {
        self.basins.len()
    }
}

/// Best strictly improving neighbor, ties by smaller index.
pub fn ascent_step(space: &SpaceSpec, prob: &[f64], index: usize) -> Result<Option<usize>, LandscapeError> {
    let key = space.key_at(index);
    let mut best: Option<usize> = None;
    for n in space.neighbors(&key)? {
        let j = space.terminal_index(&n)?;
        if prob[j] > prob[index] {
            best = match best {
                Some(b) if prob[b] > prob[j] || (prob[b] == prob[j] && b < j) => Some(b),
                _ => Some(j),
            };
        }
    }
    Ok(best)
}

pub fn is_local_max(space: &SpaceSpec, prob: &[f64], index: usize) -> Result<bool, LandscapeError> {
    Ok(ascent_step(space, prob, index)?.is_none())
}

/// Assigns every terminal to the mode its ascent path reaches.
pub fn basin_map(space: &SpaceSpec, prob: &[f64]) -> Result<BasinAssignment, LandscapeError> {
    let n = prob.len();
    if n as u128 != space.terminal_count() {
        return Err(LandscapeError::Incomplete {
            got: n,
            expected: space.terminal_count(),
        });
    }
    let mut next = vec![0usize; n];
    for (i, slot) in next.iter_mut().enumerate() {
        *slot = ascent_step(space, prob, i)?.unwrap_or(i);
    }
    // depth[i] = moves from i to its mode; resolved by walking until a known node
    let mut mode_of = vec![usize::MAX; n];
    let mut depth = vec![0usize; n];
    let mut path = Vec::new();
    for start in 0..n {
        let mut cur = start;
        while mode_of[cur] == usize::MAX && next[cur] != cur {
            path.push(cur);
            cur = next[cur];
        }
        if mode_of[cur] == usize::MAX {
            mode_of[cur] = cur;
            depth[cur] = 0;
        }
        let (mode, mut d) = (mode_of[cur], depth[cur]);
        while let Some(p) = path.pop() {
            d += 1;
            mode_of[p] = mode;
            depth[p] = d;
        }
    }
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (i, &m) in mode_of.iter().enumerate() {
        let e = acc.entry(m).or_insert((0.0, 0));
        e.0 += prob[i];
        e.1 += 1;
    }
    Ok(BasinAssignment {
        mode_of,
        basins: acc
            .into_iter()
            .map(|(mode, (mass, size))| Basin { mode, mass, size })
            .collect(),
        max_path: depth.into_iter().max().unwrap_or(0),
    })
}

pub fn l1_distance(p: &[f64], q: &[f64]) -> Result<f64, LandscapeError> {
    if p.len() != q.len() {
        return Err(LandscapeError::SupportMismatch(p.len(), q.len()));
    }
    Ok(p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum())
}

/// Probabilities sorted in decreasing order.
pub fn ranked_profile(p: &[f64]) -> Vec<f64> {
    let mut v = p.to_vec();
    v.sort_by(|a, b| b.total_cmp(a));
    v
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileRow {
    pub rank: usize,
    pub key: String,
    pub exact_prob: f64,
    pub learned_prob: f64,
}

/// Both series ordered by the exact distribution's ranking.
pub fn paired_profile(
    space: &SpaceSpec,
    exact: &[f64],
    learned: &[f64],
) -> Result<Vec<ProfileRow>, LandscapeError> {
    if exact.len() != learned.len() {
        return Err(LandscapeError::SupportMismatch(exact.len(), learned.len()));
    }
    Ok(rank_order(exact)
        .into_iter()
        .enumerate()
        .map(|(r, i)| ProfileRow {
            rank: r + 1,
            key: space.key_at(i).to_string(),
            exact_prob: exact[i],
            learned_prob: learned[i],
        })
        .collect())
}

/// Row split giving the squarest grid; ties go to fewer row slots.
pub fn squarest_split(radices: &[usize]) -> usize {
    let total: f64 = radices.iter().map(|&r| (r as f64).ln()).sum();
    let mut best = (f64::INFINITY, 1);
    let mut rows = 0.0;
    for (s, &r) in radices.iter().enumerate().take(radices.len().saturating_sub(1)) {
        rows += (r as f64).ln();
        let skew = (2.0 * rows - total).abs();
        if skew < best.0 - 1e-12 {
            best = (skew, s + 1);
        }
    }
    best.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    /// Number of leading slots encoded in the row index.
    pub row_slots: usize,
    pub row_radices: Vec<usize>,
    pub col_radices: Vec<usize>,
    /// Row-major cell masses.
    pub mass: Vec<f64>,
    /// Row-major dominant mode key per cell, if a basin map was given.
    pub dominant_mode: Option<Vec<String>>,
}

impl Grid {
    pub fn cell(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.cols + col]
    }
}

/// Projects a distribution onto a 2-D grid by splitting the mixed-radix
/// terminal index into row digits (first `row_slots` slots) and column digits.
pub fn project_grid(
    space: &SpaceSpec,
    dist: &[f64],
    basins: Option<&BasinAssignment>,
    row_slots: Option<usize>,
) -> Result<Grid, LandscapeError> {
    let radices = space.radices();
    let slots = radices.len();
    if dist.len() as u128 != space.terminal_count() {
        return Err(LandscapeError::Incomplete {
            got: dist.len(),
            expected: space.terminal_count(),
        });
    }
    let split = row_slots.unwrap_or_else(|| squarest_split(&radices));
    if split == 0 || split >= slots.max(1) {
        return Err(LandscapeError::BadSplit { split, slots });
    }
    let rows: usize = radices[..split].iter().product();
    let cols: usize = radices[split..].iter().product();
    // enumeration order is slot-0-most-significant, so index = row * cols + col
    let mass = dist.to_vec();
    let dominant_mode = basins.map(|b| {
        // each cell holds exactly one terminal, so its basin dominates
        b.mode_of.iter().map(|&m| space.key_at(m).to_string()).collect()
    });
    Ok(Grid {
        rows,
        cols,
        row_slots: split,
        row_radices: radices[..split].to_vec(),
        col_radices: radices[split..].to_vec(),
        mass,
        dominant_mode,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::space::{hamming, ActionSpec, GroupSpec, ParameterSpec};
    use proptest::prelude::*;

    fn grid_space(radices: &[usize]) -> SpaceSpec {
        let groups = radices
            .iter()
            .enumerate()
            .map(|(g, &r)| GroupSpec {
                order: g + 1,
                name: format!("g{g}"),
                actions: (0..r)
                    .map(|a| ActionSpec {
                        name: format!("a{a}"),
                        signs: if a == 0 {
                            Default::default()
                        } else {
                            [(format!("p{g}"), if a % 2 == 0 { -1 } else { 1 })].into_iter().collect()
                        },
                    })
                    .collect(),
            })
            .collect();
        let params = (0..radices.len())
            .map(|g| ParameterSpec {
                name: format!("p{g}"),
                lower: 0.0,
                upper: 1.0,
                baseline: 0.5,
                group: g + 1,
            })
            .collect();
        SpaceSpec::build(groups, params, 1, 0.1).unwrap()
    }

    fn normalize(w: Vec<f64>) -> Vec<f64> {
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    }

    /// Follows ascent from one node without memoization.
    fn brute_mode(space: &SpaceSpec, p: &[f64], start: usize) -> usize {
        let mut cur = start;
        let mut steps = 0;
        loop {
            let key = space.key_at(cur);
            let mut cands: Vec<usize> = space
                .neighbors(&key)
                .unwrap()
                .iter()
                .map(|n| space.terminal_index(n).unwrap())
                .filter(|&j| p[j] > p[cur])
                .collect();
            if cands.is_empty() {
                return cur;
            }
            cands.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
            cur = cands[0];
            steps += 1;
            assert!(steps <= p.len());
        }
    }

    #[test]
    fn small_landscape_probabilities() {
        let space = grid_space(&[2]);
        let t = LandscapeTable::from_rewards(&space, vec![0.0, 0.0], vec![1.0, 3.0]).unwrap();
        assert_eq!(t.target_prob, vec![0.25, 0.75]);
        assert_eq!(t.z, 4.0);
        assert_eq!(t.rank_of(1), 1);
        assert_eq!(t.rank_of(0), 2);
        let u = LandscapeTable::from_rewards(&space, vec![0.0; 2], vec![2.0; 2]).unwrap();
        assert_eq!(u.target_prob, vec![0.5, 0.5]);
        assert!(matches!(
            LandscapeTable::from_rewards(&space, vec![0.0; 2], vec![0.0; 2]),
            Err(LandscapeError::BadRewards)
        ));
        assert!(matches!(
            LandscapeTable::from_rewards(&space, vec![0.0; 3], vec![1.0; 3]),
            Err(LandscapeError::Incomplete { .. })
        ));
    }

    #[test]
    fn unimodal_landscape_single_basin() {
        let space = grid_space(&[3, 4, 5]);
        let peak = StateKey::new(vec![1, 2, 3]);
        let p = normalize(
            space
                .enumerate_terminals()
                .map(|k| 0.5f64.powi(hamming(&k, &peak).unwrap() as i32))
                .collect(),
        );
        let b = basin_map(&space, &p).unwrap();
        assert_eq!(b.num_basins(), 1);
        assert_eq!(b.basins[0].mode, space.terminal_index(&peak).unwrap());
        assert!((b.basins[0].mass - 1.0).abs() < 1e-12);
        assert_eq!(b.basins[0].size, 60);
    }

    #[test]
    fn two_peak_landscape_matches_brute_force() {
        let space = grid_space(&[6, 6]);
        let a = StateKey::new(vec![0, 0]);
        let c = StateKey::new(vec![5, 5]);
        // peaks differ in both slots, so no neighbor path climbs across
        let p = normalize(
            space
                .enumerate_terminals()
                .map(|k| {
                    let da = hamming(&k, &a).unwrap() as f64;
                    let dc = hamming(&k, &c).unwrap() as f64;
                    (2.0 * (-da).exp()).max(1.5 * (-dc).exp()) + 1e-3 * space.terminal_index(&k).unwrap() as f64
                })
                .collect(),
        );
        let b = basin_map(&space, &p).unwrap();
        assert_eq!(b.num_basins(), 2);
        for i in 0..p.len() {
            assert_eq!(b.mode_of[i], brute_mode(&space, &p, i), "node {i}");
        }
        for basin in &b.basins {
            assert!(is_local_max(&space, &p, basin.mode).unwrap());
            assert_eq!(b.mode_of[basin.mode], basin.mode);
        }
        let total: f64 = b.basins.iter().map(|x| x.mass).sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ties_resolved_by_key_order() {
        let space = grid_space(&[3]);
        let p = vec![0.2, 0.4, 0.4];
        let b = basin_map(&space, &p).unwrap();
        // node 0 sees 1 and 2 equally; smaller key wins; 1 and 2 do not climb onto each other
        assert_eq!(b.mode_of, vec![1, 1, 2]);
        assert_eq!(b.num_basins(), 2);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_distance(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(l1_distance(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 2.0);
        assert_eq!(l1_distance(&[1.0, 0.0], &[0.5, 0.5]).unwrap(), 1.0);
        assert!(matches!(
            l1_distance(&[1.0], &[0.5, 0.5]),
            Err(LandscapeError::SupportMismatch(1, 2))
        ));
    }

    #[test]
    fn profile_examples() {
        assert_eq!(ranked_profile(&[0.25; 4]), vec![0.25; 4]);
        let prof = ranked_profile(&[0.1, 0.6, 0.3]);
        assert_eq!(prof, vec![0.6, 0.3, 0.1]);
        let space = grid_space(&[3]);
        let rows = paired_profile(&space, &[0.1, 0.6, 0.3], &[0.5, 0.2, 0.3]).unwrap();
        assert_eq!(rows[0].key, "1");
        assert_eq!(rows[0].learned_prob, 0.2);
        assert_eq!(rows[2].rank, 3);
    }

    #[test]
    fn builtin_grid_shape() {
        let space = SpaceSpec::builtin(1, 0.3).unwrap();
        assert_eq!(squarest_split(&space.radices()), 3);
        let uniform = vec![1.0 / 2625.0; 2625];
        let g = project_grid(&space, &uniform, None, None).unwrap();
        assert_eq!((g.rows, g.cols), (75, 35));
        let g2 = project_grid(&space, &uniform, None, Some(2)).unwrap();
        assert_eq!((g2.rows, g2.cols), (15, 175));
        assert!((g2.mass.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(g2.mass.iter().all(|&m| m == uniform[0]));
        // row digits are slots 0..2
        let k = StateKey::new(vec![2, 4, 1, 3, 6]);
        let i = space.terminal_index(&k).unwrap();
        assert_eq!(i, (2 * 5 + 4) * 175 + (1 * 5 + 3) * 7 + 6);
        assert!(matches!(
            project_grid(&space, &uniform, None, Some(5)),
            Err(LandscapeError::BadSplit { .. })
        ));
    }

    proptest! {
        #[test]
        fn basins_partition_mass(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let space = grid_space(&[3, 2, 4]);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let p = normalize((0..24).map(|_| rng.random::<f64>() + 1e-6).collect());
            let b = basin_map(&space, &p).unwrap();
            let total: f64 = b.basins.iter().map(|x| x.mass).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(b.max_path <= p.len());
            for i in 0..24 {
                prop_assert_eq!(b.mode_of[i], brute_mode(&space, &p, i));
            }
        }

        #[test]
        fn l1_is_a_metric(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut d = || normalize((0..8).map(|_| rng.random::<f64>()).collect());
            let (p, q, r) = (d(), d(), d());
            let pq = l1_distance(&p, &q).unwrap();
            prop_assert!((pq - l1_distance(&q, &p).unwrap()).abs() < 1e-15);
            prop_assert!(pq <= l1_distance(&p, &r).unwrap() + l1_distance(&r, &q).unwrap() + 1e-12);
            prop_assert!((0.0..=2.0 + 1e-12).contains(&pq));
        }
    }
}
