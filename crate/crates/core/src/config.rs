//! Experiment configuration: a sectioned TOML file, `section.key=value`
//! overrides, validation, and the stable config hash.

use crate::baseline::{BudgetMode, TpeSettings};
use crate::gflownet::TrainConfig;
use crate::landscape::DEFAULT_ENUMERATION_CAP;
use crate::reward::RewardParams;
use crate::space::{SpaceFile, SpaceSpec, StateKey, BUILTIN_SPACE};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::path::{Path, PathBuf};
use thiserror::Error;

/// Environment variable overriding `run.cache_dir`.
pub const CACHE_DIR_ENV: &str = "GFNADAPT_CACHE_DIR";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read { path: PathBuf, source: std::io::Error },
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("override `{0}` must have the form section.key=value")]
    Override(String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

fn invalid<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError::Invalid(msg.into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpaceSection {
    /// Space definition file; empty selects the built-in space.
    pub file: String,
    pub cycles: usize,
    pub step_fraction: f64,
    pub enumeration_cap: u64,
    /// Leading slots used as grid rows; 0 picks the squarest split.
    pub grid_row_slots: usize,
}

impl Default for SpaceSection {
    fn default() -> Self {
        Self {
            file: String::new(),
            cycles: 1,
            step_fraction: 0.3,
            enumeration_cap: DEFAULT_ENUMERATION_CAP as u64,
            grid_row_slots: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RewardSection {
    pub beta: f64,
    pub lambda: f64,
    pub k: usize,
    pub lo_level: f64,
    pub hi_level: f64,
    pub normalization_eps: f64,
    pub residual_eps: f64,
    /// Random terminals used to fit quantiles when the space is not enumerable.
    pub warmup: usize,
}

impl Default for RewardSection {
    fn default() -> Self {
        let p = RewardParams::default();
        Self {
            beta: p.beta,
            lambda: p.lambda,
            k: p.k,
            lo_level: p.lo_level,
            hi_level: p.hi_level,
            normalization_eps: p.normalization_eps,
            residual_eps: p.residual_eps,
            warmup: 256,
        }
    }
}

impl RewardSection {
    pub fn params(&self) -> RewardParams {
        RewardParams {
            lambda: self.lambda,
            k: self.k,
            beta: self.beta,
            lo_level: self.lo_level,
            hi_level: self.hi_level,
            normalization_eps: self.normalization_eps,
            residual_eps: self.residual_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    /// Context file with observations; empty generates synthetic data.
    pub contexts_file: String,
    pub contexts_seed: u64,
    pub observation_seed: u64,
    pub noise_rel: f64,
    /// Hidden truth key; shorter keys are padded with action 0.
    pub truth: String,
    pub horizon: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            contexts_file: String::new(),
            contexts_seed: 7,
            observation_seed: 11,
            noise_rel: 0.03,
            truth: "1.3.1.2.3".into(),
            horizon: crate::simulator::DEFAULT_HORIZON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub log_z_lr: f64,
    pub hidden: Vec<usize>,
    pub explore_eps: f64,
    pub explore_decay: f64,
    /// Terminals drawn by `sample`.
    pub samples: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            steps: t.steps,
            batch_size: t.batch_size,
            lr: t.lr,
            log_z_lr: t.log_z_lr,
            hidden: t.hidden,
            explore_eps: t.explore_eps,
            explore_decay: t.explore_decay,
            samples: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TpeSection {
    pub gamma: f64,
    pub n_candidates: usize,
    pub startup: usize,
}

impl Default for TpeSection {
    fn default() -> Self {
        let t = TpeSettings::default();
        Self {
            gamma: t.gamma,
            n_candidates: t.n_candidates,
            startup: t.startup,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Gflownet,
    Random,
    Tpe,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Gflownet => "gflownet",
            Method::Random => "random",
            Method::Tpe => "tpe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HammingSource {
    /// Every distinct key the method evaluated.
    Evaluated,
    /// Post-training samples (GFlowNet only; baselines use evaluations).
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    /// Baseline method run by `baseline`.
    pub method: Method,
    /// Distinct-evaluation budget; 0 means unlimited (training runs all steps).
    pub budget: usize,
    pub budget_mode: BudgetMode,
    pub seeds: Vec<u64>,
    pub out_dir: String,
    /// Reward cache directory; empty means `<out_dir>/cache`.
    pub cache_dir: String,
}

impl Default for RunSection {
    fn default() -> Self {
        Self {
            method: Method::Gflownet,
            budget: 0,
            budget_mode: BudgetMode::Unique,
            seeds: vec![1, 2, 3],
            out_dir: "runs".into(),
            cache_dir: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportSection {
    pub methods: Vec<Method>,
    pub topk: Vec<usize>,
    pub hamming_source: HammingSource,
}

impl Default for ReportSection {
    fn default() -> Self {
        Self {
            methods: vec![Method::Gflownet, Method::Random, Method::Tpe],
            topk: vec![1, 5, 10, 20, 50],
            hamming_source: HammingSource::Evaluated,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub space: SpaceSection,
    pub reward: RewardSection,
    pub data: DataSection,
    pub train: TrainSection,
    pub tpe: TpeSection,
    pub run: RunSection,
    pub report: ReportSection,
}

/// Parses `section.key=value`; the value is read as TOML, falling back to a bare string.
fn apply_override(root: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let (section, key) = path
        .trim()
        .split_once('.')
        .ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    if section.is_empty() || key.is_empty() || key.contains('.') {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let raw = raw.trim();
    let string_field = toml::Table::try_from(ExperimentConfig::default())
        .ok()
        .and_then(|d| d.get(section)?.get(key).map(toml::Value::is_str))
        .unwrap_or(false);
    let parsed = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"));
    let value = match parsed {
        Some(v) if !string_field || v.is_str() => v,
        _ => toml::Value::String(raw.to_string()),
    };
    let entry = root
        .entry(section.to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    match entry {
        toml::Value::Table(t) => {
            t.insert(key.to_string(), value);
            Ok(())
        }
        _ => Err(ConfigError::Override(spec.to_string())),
    }
}

impl ExperimentConfig {
    /// Parses TOML text, applies overrides, validates.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut root: toml::Table = toml::from_str(text)?;
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        let cfg: ExperimentConfig = root.try_into()?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file (or built-in defaults when `path` is `None`), applying overrides.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Read {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml(&text, overrides)?;
        // relative data paths resolve against the config file's directory
        if let Some(dir) = path.and_then(Path::parent) {
            for f in [&mut cfg.space.file, &mut cfg.data.contexts_file] {
                if !f.is_empty() && Path::new(f.as_str()).is_relative() {
                    *f = dir.join(f.as_str()).to_string_lossy().into_owned();
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn space_text(&self) -> Result<String, ConfigError> {
        if self.space.file.is_empty() {
            return Ok(BUILTIN_SPACE.to_string());
        }
        std::fs::read_to_string(&self.space.file).map_err(|source| ConfigError::Read {
            path: PathBuf::from(&self.space.file),
            source,
        })
    }

    pub fn build_space(&self) -> Result<SpaceSpec, ConfigError> {
        SpaceFile::parse(&self.space_text()?)
            .and_then(|f| f.into_space_with(self.space.cycles, self.space.step_fraction))
            .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    /// Truth key padded with action 0 to the full slot count.
    pub fn truth_key(&self, space: &SpaceSpec) -> Result<StateKey, ConfigError> {
        let key = StateKey::parse(&self.data.truth)
            .map_err(|e| ConfigError::Invalid(format!("data.truth: {e}")))?;
        if key.len() > space.slots() {
            return invalid(format!(
                "data.truth has {} slots, space has {}",
                key.len(),
                space.slots()
            ));
        }
        let mut actions = key.actions().to_vec();
        actions.resize(space.slots(), 0);
        let full = StateKey::new(actions);
        space
            .validate_key(&full)
            .map_err(|e| ConfigError::Invalid(format!("data.truth: {e}")))?;
        Ok(full)
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            log_z_lr: self.train.log_z_lr,
            hidden: self.train.hidden.clone(),
            explore_eps: self.train.explore_eps,
            explore_decay: self.train.explore_decay,
            seed,
            max_unique: self.budget().filter(|_| self.run.budget_mode == BudgetMode::Unique),
            max_trajectories: self.budget().filter(|_| self.run.budget_mode == BudgetMode::Proposals),
        }
    }

    pub fn tpe_settings(&self) -> TpeSettings {
        TpeSettings {
            gamma: self.tpe.gamma,
            n_candidates: self.tpe.n_candidates,
            startup: self.tpe.startup,
        }
    }

    pub fn budget(&self) -> Option<usize> {
        (self.run.budget > 0).then_some(self.run.budget)
    }

    pub fn enumeration_cap(&self) -> u128 {
        self.space.enumeration_cap as u128
    }

    /// Cache directory: environment override, then `run.cache_dir`, then `<out_dir>/cache`.
    pub fn cache_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(CACHE_DIR_ENV).filter(|d| !d.is_empty()) {
            return PathBuf::from(dir);
        }
        if !self.run.cache_dir.is_empty() {
            return PathBuf::from(&self.run.cache_dir);
        }
        Path::new(&self.run.out_dir).join("cache")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let s = &self.space;
        if s.cycles == 0 {
            return invalid("space.cycles must be at least 1");
        }
        if !(s.step_fraction > 0.0 && s.step_fraction <= 1.0) {
            return invalid("space.step_fraction must lie in (0, 1]");
        }
        let r = &self.reward;
        if !(r.beta > 0.0 && r.beta.is_finite()) {
            return invalid("reward.beta must be positive");
        }
        if !(0.0..=1.0).contains(&r.lambda) {
            return invalid("reward.lambda must lie in [0, 1]");
        }
        if r.k == 0 {
            return invalid("reward.k must be at least 1");
        }
        if !(0.0 < r.lo_level && r.lo_level < r.hi_level && r.hi_level < 1.0) {
            return invalid("reward quantile levels must satisfy 0 < lo_level < hi_level < 1");
        }
        if !(r.normalization_eps > 0.0 && r.residual_eps > 0.0) {
            return invalid("reward epsilons must be positive");
        }
        if r.warmup == 0 {
            return invalid("reward.warmup must be positive");
        }
        if !(self.data.noise_rel >= 0.0 && self.data.noise_rel.is_finite()) {
            return invalid("data.noise_rel must be non-negative");
        }
        if self.data.horizon == 0 {
            return invalid("data.horizon must be positive");
        }
        let t = &self.train;
        if t.steps == 0 || t.batch_size == 0 || t.samples == 0 {
            return invalid("train.steps, train.batch_size and train.samples must be positive");
        }
        if !(t.lr > 0.0 && t.log_z_lr > 0.0) {
            return invalid("train learning rates must be positive");
        }
        if t.hidden.is_empty() || t.hidden.contains(&0) {
            return invalid("train.hidden must list positive widths");
        }
        if !(0.0..1.0).contains(&t.explore_eps) || !(t.explore_decay > 0.0 && t.explore_decay <= 1.0) {
            return invalid("train.explore_eps must lie in [0, 1) and train.explore_decay in (0, 1]");
        }
        self.tpe_settings()
            .validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.run.seeds.is_empty() {
            return invalid("run.seeds must not be empty");
        }
        let mut seeds = self.run.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.run.seeds.len() {
            return invalid("run.seeds must be distinct");
        }
        if self.run.out_dir.is_empty() {
            return invalid("run.out_dir must not be empty");
        }
        if self.report.methods.is_empty() {
            return invalid("report.methods must not be empty");
        }
        if self.report.topk.contains(&0) {
            return invalid("report.topk entries must be positive");
        }
        Ok(())
    }

    /// Canonical content identifying an experiment: everything except the
    /// baseline method, seeds and output locations, with file references
    /// replaced by their contents.
    fn canonical(&self, extra: &[(&str, String)]) -> Result<String, ConfigError> {
        let mut c = self.clone();
        c.run.method = Method::Gflownet;
        c.run.seeds.clear();
        c.run.out_dir.clear();
        c.run.cache_dir.clear();
        c.space.file = digest_hex(self.space_text()?.as_bytes());
        if !c.data.contexts_file.is_empty() {
            let bytes = std::fs::read(&self.data.contexts_file).map_err(|source| ConfigError::Read {
                path: PathBuf::from(&self.data.contexts_file),
                source,
            })?;
            c.data.contexts_file = digest_hex(&bytes);
        }
        let mut value = serde_json::to_value(&c).expect("config serializes");
        for (k, v) in extra {
            value[*k] = serde_json::Value::String(v.clone());
        }
        Ok(value.to_string())
    }

    /// Stable 16-hex-digit digest of the canonical config.
    pub fn config_hash(&self) -> Result<String, ConfigError> {
        Ok(digest_hex(self.canonical(&[])?.as_bytes())[..16].to_string())
    }

    /// Digest of everything that determines terminal rewards; names the
    /// reward cache so experiments differing only in training settings share it.
    pub fn reward_digest(&self) -> Result<String, ConfigError> {
        let mut c = ExperimentConfig {
            space: self.space.clone(),
            reward: self.reward.clone(),
            data: self.data.clone(),
            ..ExperimentConfig::default()
        };
        c.space.grid_row_slots = 0;
        // warm-up size only matters when the space cannot be enumerated
        let enumerable = self
            .build_space()
            .map(|s| s.terminal_count() <= self.enumeration_cap())
            .unwrap_or(false);
        let extra = [("enumerable", enumerable.to_string())];
        Ok(digest_hex(c.canonical(&extra)?.as_bytes())[..16].to_string())
    }
}

pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        let c = ExperimentConfig::from_toml("", &[]).unwrap();
        assert_eq!(c, ExperimentConfig::default());
        assert_eq!(c.train.hidden, vec![256, 256, 256]);
        assert_eq!(c.run.seeds, vec![1, 2, 3]);
        let space = c.build_space().unwrap();
        assert_eq!(space.terminal_count(), 2625);
        assert_eq!(c.truth_key(&space).unwrap(), StateKey::new(vec![1, 3, 1, 2, 3]));
    }

    #[test]
    fn precedence_flag_over_file_over_default() {
        let file = "[reward]\nbeta = 2.0\n[train]\nsteps = 50\n";
        let c = ExperimentConfig::from_toml(file, &["reward.beta=8".into()]).unwrap();
        assert_eq!(c.reward.beta, 8.0);
        assert_eq!(c.train.steps, 50);
        assert_eq!(c.train.batch_size, 16);
        let c = ExperimentConfig::from_toml("", &["run.method=tpe".into(), "run.seeds=[4, 5]".into()]).unwrap();
        assert_eq!(c.run.method, Method::Tpe);
        assert_eq!(c.run.seeds, vec![4, 5]);
        let c = ExperimentConfig::from_toml("", &["data.truth=0.0.0.0.1".into()]).unwrap();
        assert_eq!(c.data.truth, "0.0.0.0.1");
    }

    #[test]
    fn rejects_bad_input() {
        for (text, ov) in [
            ("[reward]\nbeta = -1.0\n", vec![]),
            ("[reward]\nlo_level = 0.9\nhi_level = 0.1\n", vec![]),
            ("[run]\nseeds = []\n", vec![]),
            ("[run]\nseeds = [1, 1]\n", vec![]),
            ("[space]\ncycles = 0\n", vec![]),
            ("[tpe]\ngamma = 1.5\n", vec![]),
        ] {
            assert!(matches!(ExperimentConfig::from_toml(text, &ov), Err(ConfigError::Invalid(_))), "{text}");
        }
        assert!(matches!(ExperimentConfig::from_toml("[space]\nbogus = 1\n", &[]), Err(ConfigError::Parse(_))));
        assert!(matches!(ExperimentConfig::from_toml("", &["beta=2".into()]), Err(ConfigError::Override(_))));
        assert!(matches!(ExperimentConfig::from_toml("", &["reward.beta".into()]), Err(ConfigError::Override(_))));
        let c = ExperimentConfig::from_toml("", &["data.truth=9.9".into()]).unwrap();
        assert!(c.truth_key(&c.build_space().unwrap()).is_err());
    }

    #[test]
    fn hash_ignores_method_seeds_and_paths() {
        let base = ExperimentConfig::default();
        let h = base.config_hash().unwrap();
        assert_eq!(h.len(), 16);
        let mut other = base.clone();
        other.run.method = Method::Random;
        other.run.seeds = vec![9];
        other.run.out_dir = "elsewhere".into();
        assert_eq!(other.config_hash().unwrap(), h);
        let mut finer = base.clone();
        finer.space.step_fraction = 0.15;
        assert_ne!(finer.config_hash().unwrap(), h);
        let mut steps = base.clone();
        steps.train.steps = 10;
        assert_ne!(steps.config_hash().unwrap(), h);
        assert_eq!(steps.reward_digest().unwrap(), base.reward_digest().unwrap());
        assert_ne!(finer.reward_digest().unwrap(), base.reward_digest().unwrap());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig::default();
        c.run.budget = 2000;
        c.report.methods = vec![Method::Tpe];
        let back = ExperimentConfig::from_toml(&c.to_toml(), &[]).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn short_truth_padded_for_two_cycles() {
        let c = ExperimentConfig::from_toml("[space]\ncycles = 2\n", &[]).unwrap();
        let space = c.build_space().unwrap();
        assert_eq!(
            c.truth_key(&space).unwrap(),
            StateKey::new(vec![1, 3, 1, 2, 3, 0, 0, 0, 0, 0])
        );
    }
}
