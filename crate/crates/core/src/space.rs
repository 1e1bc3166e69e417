//! Grouped discrete perturbation space.
//!
//! A terminal state is a sequence of action indices, one per decision slot.
//! Slots are laid out cycle-major: slot `t` addresses group `t % G` in cycle
//! `t / G + 1`. Decoding applies each chosen action to the baseline
//! parameterization with a clipped, cycle-annealed step:
//!
//! ```text
//! theta_p <- clip(theta_p + eta_c * sf * sign_{a,p} * (u_p - l_p), l_p, u_p)
//! eta_c    = 2^-(c - 1)
//! ```

use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Errors raised while building a space or addressing states in it.
#[derive(Debug, Error, Clone, PartialEq)]
pub enum SpaceError {
    #[error("group orders must be 1..={expected} without gaps, found order {found}")]
    GroupOrder { expected: usize, found: usize },
    #[error("duplicate group order {0}")]
    DuplicateGroup(usize),
    #[error("group `{0}` has no actions")]
    EmptyActions(String),
    #[error("group `{group}`: action 0 (`{action}`) must be the identity action")]
    FirstActionNotIdentity { group: String, action: String },
    #[error("group `{group}` has {count} actions; at most 256 are supported")]
    TooManyActions { group: String, count: usize },
    #[error("action `{action}` references parameter `{parameter}` outside its group")]
    ForeignParameter { action: String, parameter: String },
    #[error("action `{action}`: sign {sign} for `{parameter}` is not in {{-1, 0, 1}}")]
    InvalidSign {
        action: String,
        parameter: String,
        sign: i64,
    },
    #[error("parameter `{0}`: bounds or baseline invalid (need lower < upper and lower <= baseline <= upper)")]
    InvalidBounds(String),
    #[error("duplicate parameter `{0}`")]
    DuplicateParameter(String),
    #[error("parameter `{parameter}` assigned to unknown group {group}")]
    UnknownGroup { parameter: String, group: usize },
    #[error("cycles must be >= 1")]
    InvalidCycles,
    #[error("step fraction must lie in (0, 1], got {0}")]
    InvalidStepFraction(f64),
    #[error("slot {slot}: action index {action} out of range (group has {count} actions)")]
    ActionOutOfRange {
        slot: usize,
        action: usize,
        count: usize,
    },
    #[error("key has {len} actions but the space has {slots} slots")]
    KeyTooLong { len: usize, slots: usize },
    #[error("operation requires a terminal key ({slots} actions), got {len}")]
    NotTerminal { len: usize, slots: usize },
    #[error("keys have different lengths ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("space definition: {0}")]
    Parse(String),
}

/// Bounds and baseline of one simulator parameter, in model units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterSpec {
    pub name: String,
    pub lower: f64,
    pub upper: f64,
    pub baseline: f64,
    /// 1-based group order.
    pub group: usize,
}

/// A named perturbation: a direction in {-1, 0, +1} per parameter of its group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionSpec {
    pub name: String,
    #[serde(default)]
    pub signs: BTreeMap<String, i64>,
}

impl ActionSpec {
    pub fn is_identity(&self) -> bool {
        self.signs.values().all(|&s| s == 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub order: usize,
    pub name: String,
    pub actions: Vec<ActionSpec>,
}

/// Serialized form of a space definition file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceFile {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    #[serde(default = "default_cycles")]
    pub cycles: usize,
    #[serde(default = "default_step_fraction")]
    pub step_fraction: f64,
    pub parameters: Vec<ParameterSpec>,
    pub groups: Vec<GroupSpec>,
}

fn default_cycles() -> usize {
    1
}

fn default_step_fraction() -> f64 {
    0.3
}

/// Current schema version of space definition files.
pub const SPACE_FILE_VERSION: u32 = 1;

/// Built-in reduced greenhouse crop space (five groups, 3/5/5/5/7 actions).
pub const BUILTIN_SPACE: &str = include_str!("../data/tomato_reduced.toml");

impl SpaceFile {
    pub fn parse(text: &str) -> Result<Self, SpaceError> {
        let file: SpaceFile = toml::from_str(text).map_err(|e| SpaceError::Parse(e.to_string()))?;
        if file.version != SPACE_FILE_VERSION {
            return Err(SpaceError::Parse(format!(
                "unsupported version {} (expected {})",
                file.version, SPACE_FILE_VERSION
            )));
        }
        Ok(file)
    }

    pub fn builtin() -> Self {
        Self::parse(BUILTIN_SPACE).expect("built-in space definition is valid")
    }

    pub fn into_space(self) -> Result<SpaceSpec, SpaceError> {
        let (cycles, sf) = (self.cycles, self.step_fraction);
        self.into_space_with(cycles, sf)
    }

    pub fn into_space_with(self, cycles: usize, step_fraction: f64) -> Result<SpaceSpec, SpaceError> {
        SpaceSpec::build(self.groups, self.parameters, cycles, step_fraction)
    }
}

/// Validated perturbation space; immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct SpaceSpec {
    groups: Vec<GroupSpec>,
    parameters: Vec<ParameterSpec>,
    cycles: usize,
    step_fraction: f64,
    /// `signs[g][a]` lists (parameter index, sign) pairs with non-zero sign.
    signs: Vec<Vec<Vec<(usize, f64)>>>,
}

impl SpaceSpec {
    /// Validates and builds a space. Groups may be given in any order; they are
    /// stored sorted by `order`.
    pub fn build(
        mut groups: Vec<GroupSpec>,
        parameters: Vec<ParameterSpec>,
        cycles: usize,
        step_fraction: f64,
    ) -> Result<Self, SpaceError> {
        if cycles < 1 {
            return Err(SpaceError::InvalidCycles);
        }
        if !(step_fraction > 0.0 && step_fraction <= 1.0) {
            return Err(SpaceError::InvalidStepFraction(step_fraction));
        }
        groups.sort_by_key(|g| g.order);
        for pair in groups.windows(2) {
            if pair[0].order == pair[1].order {
                return Err(SpaceError::DuplicateGroup(pair[0].order));
            }
        }
        for (i, g) in groups.iter().enumerate() {
            if g.order != i + 1 {
                return Err(SpaceError::GroupOrder {
                    expected: groups.len(),
                    found: g.order,
                });
            }
        }

        let mut index_of = BTreeMap::new();
        for (i, p) in parameters.iter().enumerate() {
            let ok = p.lower.is_finite()
                && p.upper.is_finite()
                && p.baseline.is_finite()
                && p.lower < p.upper
                && p.lower <= p.baseline
                && p.baseline <= p.upper;
            if !ok {
                return Err(SpaceError::InvalidBounds(p.name.clone()));
            }
            if p.group < 1 || p.group > groups.len() {
                return Err(SpaceError::UnknownGroup {
                    parameter: p.name.clone(),
                    group: p.group,
                });
            }
            if index_of.insert(p.name.as_str(), i).is_some() {
                return Err(SpaceError::DuplicateParameter(p.name.clone()));
            }
        }

        let mut signs = Vec::with_capacity(groups.len());
        for g in &groups {
            if g.actions.is_empty() {
                return Err(SpaceError::EmptyActions(g.name.clone()));
            }
            if g.actions.len() > 256 {
                return Err(SpaceError::TooManyActions {
                    group: g.name.clone(),
                    count: g.actions.len(),
                });
            }
            if !g.actions[0].is_identity() {
                return Err(SpaceError::FirstActionNotIdentity {
                    group: g.name.clone(),
                    action: g.actions[0].name.clone(),
                });
            }
            let mut per_action = Vec::with_capacity(g.actions.len());
            for a in &g.actions {
                let mut entries = Vec::new();
                for (pname, &sign) in &a.signs {
                    let foreign = || SpaceError::ForeignParameter {
                        action: a.name.clone(),
                        parameter: pname.clone(),
                    };
                    let &pi = index_of.get(pname.as_str()).ok_or_else(foreign)?;
                    if parameters[pi].group != g.order {
                        return Err(foreign());
                    }
                    if !(-1..=1).contains(&sign) {
                        return Err(SpaceError::InvalidSign {
                            action: a.name.clone(),
                            parameter: pname.clone(),
                            sign,
                        });
                    }
                    if sign != 0 {
                        entries.push((pi, sign as f64));
                    }
                }
                per_action.push(entries);
            }
            signs.push(per_action);
        }

        Ok(Self {
            groups,
            parameters,
            cycles,
            step_fraction,
            signs,
        })
    }

    /// The built-in crop space with the given cycle count and step fraction.
    pub fn builtin(cycles: usize, step_fraction: f64) -> Result<Self, SpaceError> {
        SpaceFile::builtin().into_space_with(cycles, step_fraction)
    }

    pub fn groups(&self) -> &[GroupSpec] {
        &self.groups
    }

    pub fn parameters(&self) -> &[ParameterSpec] {
        &self.parameters
    }

    pub fn cycles(&self) -> usize {
        self.cycles
    }

    pub fn step_fraction(&self) -> f64 {
        self.step_fraction
    }

    pub fn num_groups(&self) -> usize {
        self.groups.len()
    }

    /// Total decision slots (`cycles * G`).
    pub fn slots(&self) -> usize {
        self.cycles * self.groups.len()
    }

    pub fn slot_group(&self, slot: usize) -> usize {
        slot % self.groups.len()
    }

    /// 1-based cycle of a slot.
    pub fn slot_cycle(&self, slot: usize) -> usize {
        slot / self.groups.len() + 1
    }

    /// Annealing factor `2^-(c-1)` for a 1-based cycle.
    pub fn eta(cycle: usize) -> f64 {
        0.5f64.powi(cycle as i32 - 1)
    }

    pub fn action_count(&self, slot: usize) -> usize {
        self.groups[self.slot_group(slot)].actions.len()
    }

    /// Action counts for every slot, in slot order.
    pub fn radices(&self) -> Vec<usize> {
        (0..self.slots()).map(|t| self.action_count(t)).collect()
    }

    pub fn action_name(&self, slot: usize, action: usize) -> &str {
        &self.groups[self.slot_group(slot)].actions[action].name
    }

    /// Number of terminal states, saturating at `u128::MAX`.
    pub fn terminal_count(&self) -> u128 {
        self.radices()
            .iter()
            .fold(1u128, |acc, &r| acc.saturating_mul(r as u128))
    }

    pub fn parameter_index(&self, name: &str) -> Option<usize> {
        self.parameters.iter().position(|p| p.name == name)
    }

    pub fn baseline(&self) -> ParameterVector {
        ParameterVector {
            values: self.parameters.iter().map(|p| p.baseline).collect(),
        }
    }

    pub fn validate_key(&self, key: &StateKey) -> Result<(), SpaceError> {
        let slots = self.slots();
        if key.len() > slots {
            return Err(SpaceError::KeyTooLong {
                len: key.len(),
                slots,
            });
        }
        for (slot, &a) in key.actions().iter().enumerate() {
            let count = self.action_count(slot);
            if a as usize >= count {
                return Err(SpaceError::ActionOutOfRange {
                    slot,
                    action: a as usize,
                    count,
                });
            }
        }
        Ok(())
    }

    pub fn is_terminal(&self, key: &StateKey) -> bool {
        key.len() == self.slots()
    }

    fn require_terminal(&self, key: &StateKey) -> Result<(), SpaceError> {
        self.validate_key(key)?;
        if !self.is_terminal(key) {
            return Err(SpaceError::NotTerminal {
                len: key.len(),
                slots: self.slots(),
            });
        }
        Ok(())
    }

    /// Applies the update for `action` at `slot` to `theta` in place.
    pub fn apply_action(&self, theta: &mut ParameterVector, slot: usize, action: usize) {
        let g = self.slot_group(slot);
        let magnitude = Self::eta(self.slot_cycle(slot)) * self.step_fraction;
        for &(pi, sign) in &self.signs[g][action] {
            let p = &self.parameters[pi];
            let v = theta.values[pi] + magnitude * sign * (p.upper - p.lower);
            theta.values[pi] = v.clamp(p.lower, p.upper);
        }
    }

    /// Decodes a (possibly partial) key into a parameter vector by applying the
    /// decided slots in order to the baseline.
    pub fn decode(&self, key: &StateKey) -> Result<ParameterVector, SpaceError> {
        self.validate_key(key)?;
        let mut theta = self.baseline();
        for (slot, &a) in key.actions().iter().enumerate() {
            self.apply_action(&mut theta, slot, a as usize);
        }
        Ok(theta)
    }

    /// Every terminal key, in lexicographic order of action indices.
    pub fn enumerate_terminals(&self) -> TerminalIter {
        TerminalIter {
            radices: self.radices(),
            next: Some(vec![0; self.slots()]),
        }
    }

    /// Mixed-radix index of a terminal key (its position in enumeration order).
    pub fn terminal_index(&self, key: &StateKey) -> Result<usize, SpaceError> {
        self.require_terminal(key)?;
        let mut idx = 0usize;
        for (slot, &a) in key.actions().iter().enumerate() {
            idx = idx * self.action_count(slot) + a as usize;
        }
        Ok(idx)
    }

    /// Inverse of [`SpaceSpec::terminal_index`].
    pub fn key_at(&self, mut index: usize) -> StateKey {
        let radices = self.radices();
        let mut actions = vec![0u8; radices.len()];
        for (slot, &r) in radices.iter().enumerate().rev() {
            actions[slot] = (index % r) as u8;
            index /= r;
        }
        StateKey::new(actions)
    }

    /// All terminal keys that differ from `key` in exactly one slot, ordered by
    /// slot and then action index.
    pub fn neighbors(&self, key: &StateKey) -> Result<Vec<StateKey>, SpaceError> {
        self.require_terminal(key)?;
        let mut out = Vec::new();
        for slot in 0..self.slots() {
            for a in 0..self.action_count(slot) {
                if a as u8 != key.actions()[slot] {
                    let mut actions = key.actions().to_vec();
                    actions[slot] = a as u8;
                    out.push(StateKey::new(actions));
                }
            }
        }
        Ok(out)
    }

    /// Neighbor count of any terminal: sum over slots of (actions - 1).
    pub fn neighbor_count(&self) -> usize {
        self.radices().iter().map(|r| r - 1).sum()
    }

    /// Human-readable action names of a key, `group:action` per slot.
    pub fn describe(&self, key: &StateKey) -> Vec<String> {
        key.actions()
            .iter()
            .enumerate()
            .map(|(slot, &a)| {
                let g = &self.groups[self.slot_group(slot)];
                format!("{}:{}", g.name, g.actions[a as usize].name)
            })
            .collect()
    }
}

/// Number of slots where two terminal keys differ.
pub fn hamming(a: &StateKey, b: &StateKey) -> Result<usize, SpaceError> {
    if a.len() != b.len() {
        return Err(SpaceError::LengthMismatch(a.len(), b.len()));
    }
    Ok(a.actions()
        .iter()
        .zip(b.actions())
        .filter(|(x, y)| x != y)
        .count())
}

/// Canonical state identifier: one byte per decided slot.
///
/// The byte sequence is the cache key; ordering is lexicographic on it.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct StateKey(Vec<u8>);

impl StateKey {
    pub fn new(actions: Vec<u8>) -> Self {
        Self(actions)
    }

    pub fn empty() -> Self {
        Self(Vec::new())
    }

    pub fn from_indices(indices: &[usize]) -> Self {
        Self(indices.iter().map(|&a| a as u8).collect())
    }

    pub fn actions(&self) -> &[u8] {
        &self.0
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// The one-shorter prefix; `None` for the root.
    pub fn parent(&self) -> Option<StateKey> {
        if self.0.is_empty() {
            None
        } else {
            Some(Self(self.0[..self.0.len() - 1].to_vec()))
        }
    }

    pub fn child(&self, action: usize) -> StateKey {
        let mut v = self.0.clone();
        v.push(action as u8);
        Self(v)
    }

    pub fn prefix(&self, len: usize) -> StateKey {
        Self(self.0[..len].to_vec())
    }

    /// Parses the dotted form produced by `Display`, e.g. `1.0.3.2.6`.
    pub fn parse(s: &str) -> Result<Self, SpaceError> {
        let s = s.trim();
        if s.is_empty() || s == "-" {
            return Ok(Self::empty());
        }
        s.split('.')
            .map(|part| {
                part.parse::<u8>()
                    .map_err(|_| SpaceError::Parse(format!("invalid state key `{s}`")))
            })
            .collect::<Result<Vec<_>, _>>()
            .map(Self)
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.0.is_empty() {
            return f.write_str("-");
        }
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

/// Odometer over terminal keys.
pub struct TerminalIter {
    radices: Vec<usize>,
    next: Option<Vec<u8>>,
}

impl Iterator for TerminalIter {
    type Item = StateKey;

    fn next(&mut self) -> Option<StateKey> {
        let current = self.next.take()?;
        let mut succ = current.clone();
        let mut slot = succ.len();
        let mut carried_out = true;
        while slot > 0 {
            slot -= 1;
            if (succ[slot] as usize) + 1 < self.radices[slot] {
                succ[slot] += 1;
                carried_out = false;
                break;
            }
            succ[slot] = 0;
        }
        if !carried_out {
            self.next = Some(succ);
        }
        Some(StateKey(current))
    }
}

/// Parameter values aligned with `SpaceSpec::parameters()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterVector {
    pub values: Vec<f64>,
}

impl ParameterVector {
    pub fn get(&self, space: &SpaceSpec, name: &str) -> Option<f64> {
        space.parameter_index(name).map(|i| self.values[i])
    }

    pub fn within_bounds(&self, space: &SpaceSpec) -> bool {
        self.values.len() == space.parameters().len()
            && self
                .values
                .iter()
                .zip(space.parameters())
                .all(|(&v, p)| v >= p.lower && v <= p.upper)
    }
}
