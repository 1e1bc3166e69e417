//! Experiment orchestration: shared reward setup, the five pipeline commands
//! and their on-disk artifacts.
//!
//! Layout: `<out_dir>/<config-hash>/<command>/[<seed>/]files`. Every CSV starts
//! with a `# config_hash=<hash>` comment line and every JSON artifact carries a
//! `config_hash` field. Wall-clock times live in `timing.json` sidecars that are
//! kept on reruns, so rerunning a command reproduces every file byte for byte.

use crate::baseline::{random_search, tpe_search, SearchError, SearchTrace, TraceRow};
use crate::cache::{CacheError, RewardCache};
use crate::config::{ConfigError, ExperimentConfig, HammingSource, Method};
use crate::gflownet::{
    exact_terminal_distribution, sample_terminals, train, Checkpoint, GflowError, TrainLogEntry,
};
use crate::landscape::{
    basin_map, build_landscape, l1_distance, paired_profile, project_grid, BasinAssignment, Grid,
    LandscapeError, LandscapeTable,
};
use crate::metrics::{compare_methods, mean_std, write_comparison_csv, MetricsError, RetrievalReport};
use crate::reward::{per_context, Evaluator, QuantileTable, RewardError, Scorer};
use crate::simulator::{
    generate_contexts_with_horizon, load_contexts, save_contexts, synthesize_observations,
    ContextDataset, CountingSimulator, CropSimulator, SimError, Simulator,
};
use crate::space::{SpaceError, SpaceSpec, StateKey};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("{count} terminals exceed the enumeration cap of {cap}; the command needs an enumerable space")]
    NotEnumerable { count: u128, cap: u128 },
    #[error("`{0}` is not a baseline method; GFlowNet runs use the train command")]
    NotABaseline(String),
    #[error("baseline runs need a positive run.budget")]
    NoBudget,
    #[error("missing upstream artifact: {}", .0.display())]
    MissingArtifact(PathBuf),
    #[error("{}: config hash {found} does not match {expected}", path.display())]
    HashMismatch {
        path: PathBuf,
        expected: String,
        found: String,
    },
    #[error("{}: {reason}", path.display())]
    Artifact { path: PathBuf, reason: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Cache(#[from] CacheError),
    #[error(transparent)]
    Gflow(#[from] GflowError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error(transparent)]
    Landscape(#[from] LandscapeError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl ExperimentError {
    /// 1 for usage or configuration problems, 2 for runtime failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_)
            | ExperimentError::NotEnumerable { .. }
            | ExperimentError::NotABaseline(_)
            | ExperimentError::NoBudget => 1,
            _ => 2,
        }
    }
}

type Result<T, E = ExperimentError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn artifact_err(path: &Path, reason: impl ToString) -> ExperimentError {
    ExperimentError::Artifact {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

/// Writes through a temporary sibling so readers never see partial files.
fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    std::fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    std::fs::rename(&tmp, path).map_err(io_err(path))
}

fn csv_bytes<S: Serialize>(hash: &str, rows: &[S]) -> Result<Vec<u8>, csv::Error> {
    let mut out = format!("# config_hash={hash}\n").into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut out);
        for r in rows {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok(out)
}

fn write_csv<S: Serialize>(path: &Path, hash: &str, rows: &[S]) -> Result<()> {
    let bytes = csv_bytes(hash, rows).map_err(|e| artifact_err(path, e))?;
    write_file(path, &bytes)
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| artifact_err(path, e))?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

fn require(path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(ExperimentError::MissingArtifact(path.to_path_buf()))
    }
}

/// Reads a hash-stamped CSV artifact, refusing foreign hashes.
fn read_csv<T: DeserializeOwned>(path: &Path, hash: &str) -> Result<Vec<T>> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let first = text.lines().next().unwrap_or("");
    let found = first
        .strip_prefix("# config_hash=")
        .ok_or_else(|| artifact_err(path, "missing config hash header"))?;
    if found != hash {
        return Err(ExperimentError::HashMismatch {
            path: path.to_path_buf(),
            expected: hash.to_string(),
            found: found.to_string(),
        });
    }
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(text.as_bytes())
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| artifact_err(path, e))
}

/// Reads a JSON artifact with a `config_hash` field, refusing foreign hashes.
fn read_json<T: DeserializeOwned>(path: &Path, hash: &str) -> Result<T> {
    require(path)?;
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| artifact_err(path, e))?;
    let found = value["config_hash"].as_str().unwrap_or("").to_string();
    if found != hash {
        return Err(ExperimentError::HashMismatch {
            path: path.to_path_buf(),
            expected: hash.to_string(),
            found,
        });
    }
    serde_json::from_value(value).map_err(|e| artifact_err(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeRow {
    pub index: usize,
    pub key: String,
    pub loss: f64,
    pub reward: f64,
    pub target_prob: f64,
    pub mode_key: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinRow {
    pub mode_key: String,
    pub mode_index: usize,
    pub mass: f64,
    pub size: usize,
    pub mode_loss: f64,
    pub mode_target_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRow {
    pub sample: usize,
    pub key: String,
    pub loss: f64,
    pub reward: f64,
}

/// Grid projection with its radix metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridExport {
    pub config_hash: String,
    pub quantity: String,
    pub rows: usize,
    pub cols: usize,
    pub row_slots: usize,
    /// `c<cycle>:<group>` for each row digit, most significant first.
    pub row_digits: Vec<String>,
    pub col_digits: Vec<String>,
    pub row_radices: Vec<usize>,
    pub col_radices: Vec<usize>,
    pub values: Vec<Vec<f64>>,
    pub dominant_mode: Option<Vec<Vec<String>>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityRow {
    pub seed: u64,
    pub l1: f64,
    pub top50_in_samples: usize,
    pub log_z: f64,
    pub exact_log_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileExportRow {
    pub rank: usize,
    pub key: String,
    pub exact_prob: f64,
    pub learned_prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasinMassRow {
    pub mode_key: String,
    pub exact_mass: f64,
    pub learned_mass_mean: f64,
    pub learned_mass_std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalRow {
    pub method: String,
    pub seed: u64,
    pub evaluations: usize,
    pub best_loss: f64,
    pub median_top20_loss: f64,
    pub mean_hamming_top20: f64,
    pub top20_deficient: bool,
    pub wall_clock: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: String,
    pub seed: u64,
    pub n: usize,
    pub gap: f64,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryRow {
    pub method: String,
    pub seed: u64,
    pub k: usize,
    pub recovered: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayRow {
    pub method: String,
    pub key: String,
    pub context: usize,
    pub day: usize,
    pub simulated: f64,
    pub observed: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub methods: Vec<String>,
    pub seeds: Vec<u64>,
    pub budget: usize,
    pub l_star: f64,
    pub enumerable: bool,
    pub files: Vec<String>,
    pub summary: Vec<crate::metrics::MethodSummary>,
    pub reports: Vec<RetrievalReport>,
    pub fidelity: Vec<FidelityRow>,
}

/// What a command produced.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandOutcome {
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
    /// Simulator calls made by this experiment handle so far.
    pub simulations: u64,
}

/// A configured experiment: resolved space, config hash and a counting simulator.
pub struct Experiment {
    cfg: ExperimentConfig,
    hash: String,
    space: SpaceSpec,
    root: PathBuf,
    sim: Arc<CountingSimulator>,
}

impl Experiment {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let space = cfg.build_space()?;
        let hash = cfg.config_hash()?;
        let crop = CropSimulator::for_space(&space)
            .map_err(|e| ConfigError::Invalid(format!("space file: {e}")))?;
        cfg.truth_key(&space)?;
        let root = Path::new(&cfg.run.out_dir).join(&hash);
        Ok(Self {
            cfg,
            hash,
            space,
            root,
            sim: Arc::new(CountingSimulator::new(Arc::new(crop))),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn hash(&self) -> &str {
        &self.hash
    }

    pub fn space(&self) -> &SpaceSpec {
        &self.space
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Simulator calls made through this handle, including data synthesis.
    pub fn simulations(&self) -> u64 {
        self.sim.calls()
    }

    pub fn is_enumerable(&self) -> bool {
        self.space.terminal_count() <= self.cfg.enumeration_cap()
    }

    pub fn reward_dir(&self) -> Result<PathBuf> {
        Ok(self
            .cfg
            .cache_dir()
            .join(format!("reward-{}", self.cfg.reward_digest()?)))
    }

    pub fn command_dir(&self, command: &str) -> PathBuf {
        self.root.join(command)
    }

    pub fn seed_dir(&self, command: &str, seed: u64) -> PathBuf {
        self.command_dir(command).join(seed.to_string())
    }

    pub fn checkpoint_path(&self, seed: u64) -> PathBuf {
        self.seed_dir("train", seed).join(format!("checkpoint-seed{seed}.json"))
    }

    fn baseline_command(method: Method) -> String {
        format!("baseline-{}", method.name())
    }

    fn trace_path(&self, method: Method, seed: u64) -> PathBuf {
        match method {
            Method::Gflownet => self.seed_dir("train", seed).join("trace.csv"),
            m => self.seed_dir(&Self::baseline_command(m), seed).join("trace.csv"),
        }
    }

    fn timing_path(&self, method: Method, seed: u64) -> PathBuf {
        self.trace_path(method, seed).with_file_name("timing.json")
    }

    fn samples_path(&self, seed: u64) -> PathBuf {
        self.seed_dir("sample", seed).join("samples.csv")
    }

    /// Observational contexts, synthesized once per reward configuration.
    pub fn contexts(&self) -> Result<Vec<ContextDataset>> {
        let path = self.reward_dir()?.join("contexts.json");
        if path.is_file() {
            return Ok(load_contexts(&path)?);
        }
        let data = &self.cfg.data;
        let contexts = if data.contexts_file.is_empty() {
            let base = generate_contexts_with_horizon(data.contexts_seed, data.horizon);
            let truth = self.space.decode(&self.cfg.truth_key(&self.space)?)?;
            synthesize_observations(
                self.sim.as_ref(),
                &base,
                &truth,
                data.noise_rel,
                data.observation_seed,
            )?
        } else {
            load_contexts(Path::new(&data.contexts_file))?
        };
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        save_contexts(&path, &contexts)?;
        Ok(contexts)
    }

    fn evaluator(&self) -> Result<Evaluator> {
        let sim: Arc<dyn Simulator> = self.sim.clone();
        Ok(Evaluator::new(
            self.space.clone(),
            sim,
            self.contexts()?,
            self.cfg.reward.residual_eps,
        ))
    }

    /// Cache-backed scorer. Quantiles are fitted on the first call for this
    /// reward configuration (full table when enumerable, random warm-up
    /// otherwise) and frozen in `quantiles.json`.
    pub fn scorer(&self) -> Result<Scorer> {
        let evaluator = self.evaluator()?;
        let dir = self.reward_dir()?;
        let contexts = evaluator.contexts().len();
        let cache = RewardCache::open(&dir.join("records.bin"), self.space.slots(), contexts)?;
        let qpath = dir.join("quantiles.json");
        let r = &self.cfg.reward;
        if qpath.is_file() {
            let q = QuantileTable::load(&qpath)?;
            return Ok(Scorer::new(evaluator, r.params(), q, cache)?);
        }
        let seed = self.cfg.data.contexts_seed;
        let rows: Vec<(StateKey, Vec<f64>)> = if self.is_enumerable() {
            let raw = evaluator.enumerate_raw(self.cfg.enumeration_cap())?;
            raw.into_iter()
                .enumerate()
                .map(|(i, v)| (self.space.key_at(i), v))
                .collect()
        } else {
            evaluator.sample_raw(r.warmup, seed)?
        };
        let table: Vec<Vec<f64>> = rows.iter().map(|(_, v)| v.clone()).collect();
        let q = QuantileTable::fit(
            &per_context(&table, contexts),
            r.lo_level,
            r.hi_level,
            r.normalization_eps,
        )?;
        let scorer = Scorer::new(evaluator, r.params(), q.clone(), cache)?;
        for (key, raw) in rows {
            scorer.insert_raw(key, raw)?;
        }
        scorer.flush()?;
        let mut text = serde_json::to_string_pretty(&q).map_err(|e| artifact_err(&qpath, e))?;
        text.push('\n');
        write_file(&qpath, text.as_bytes())?;
        Ok(scorer)
    }

    fn write_config(&self, dir: &Path, files: &mut Vec<PathBuf>) -> Result<()> {
        let path = dir.join("config.toml");
        let text = format!("# config_hash={}\n{}", self.hash, self.cfg.to_toml());
        write_file(&path, text.as_bytes())?;
        files.push(path);
        Ok(())
    }

    /// Keeps the first recorded wall clock for this hash and seed.
    fn timing(&self, dir: &Path, seed: u64, seconds: f64) -> Result<f64> {
        let path = dir.join("timing.json");
        if let Ok(existing) = read_json::<Timing>(&path, &self.hash) {
            if existing.seed == seed {
                return Ok(existing.wall_clock_seconds);
            }
        }
        write_json(
            &path,
            &Timing {
                config_hash: self.hash.clone(),
                seed,
                wall_clock_seconds: seconds,
            },
        )?;
        Ok(seconds)
    }

    fn require_enumerable(&self) -> Result<()> {
        if self.is_enumerable() {
            Ok(())
        } else {
            Err(ExperimentError::NotEnumerable {
                count: self.space.terminal_count(),
                cap: self.cfg.enumeration_cap(),
            })
        }
    }

    fn grid_export(
        &self,
        quantity: &str,
        values: &[f64],
        basins: Option<&BasinAssignment>,
    ) -> Result<GridExport> {
        let split = match self.cfg.space.grid_row_slots {
            0 => None,
            s => Some(s),
        };
        let g: Grid = project_grid(&self.space, values, basins, split)?;
        let digit = |slot: usize| {
            format!(
                "c{}:{}",
                self.space.slot_cycle(slot),
                self.space.groups()[self.space.slot_group(slot)].name
            )
        };
        let chunk = |v: &[f64]| v.chunks(g.cols).map(<[f64]>::to_vec).collect();
        Ok(GridExport {
            config_hash: self.hash.clone(),
            quantity: quantity.to_string(),
            rows: g.rows,
            cols: g.cols,
            row_slots: g.row_slots,
            row_digits: (0..g.row_slots).map(digit).collect(),
            col_digits: (g.row_slots..self.space.slots()).map(digit).collect(),
            row_radices: g.row_radices.clone(),
            col_radices: g.col_radices.clone(),
            values: chunk(&g.mass),
            dominant_mode: g
                .dominant_mode
                .map(|m| m.chunks(g.cols).map(<[String]>::to_vec).collect()),
        })
    }

    /// Scores every terminal and writes the landscape, basin and grid exports.
    pub fn cmd_enumerate(&self) -> Result<CommandOutcome> {
        self.require_enumerable()?;
        let scorer = self.scorer()?;
        let landscape = build_landscape(&scorer, self.cfg.enumeration_cap())?;
        scorer.flush()?;
        let basins = basin_map(&self.space, &landscape.target_prob)?;
        let dir = self.command_dir("enumerate");
        let mut files = Vec::new();
        self.write_config(&dir, &mut files)?;

        let rows: Vec<LandscapeRow> = (0..landscape.len())
            .map(|i| LandscapeRow {
                index: i,
                key: landscape.keys[i].to_string(),
                loss: landscape.aggregate[i],
                reward: landscape.reward[i],
                target_prob: landscape.target_prob[i],
                mode_key: landscape.keys[basins.mode_of[i]].to_string(),
            })
            .collect();
        let path = dir.join("landscape.csv");
        write_csv(&path, &self.hash, &rows)?;
        files.push(path);

        let mut basin_rows: Vec<BasinRow> = basins
            .basins
            .iter()
            .map(|b| BasinRow {
                mode_key: landscape.keys[b.mode].to_string(),
                mode_index: b.mode,
                mass: b.mass,
                size: b.size,
                mode_loss: landscape.aggregate[b.mode],
                mode_target_prob: landscape.target_prob[b.mode],
            })
            .collect();
        basin_rows.sort_by(|a, b| b.mass.total_cmp(&a.mass).then(a.mode_index.cmp(&b.mode_index)));
        let path = dir.join("basins.csv");
        write_csv(&path, &self.hash, &basin_rows)?;
        files.push(path);

        let path = dir.join("grid.json");
        write_json(&path, &self.grid_export("target_prob", &landscape.target_prob, Some(&basins))?)?;
        files.push(path);

        let path = dir.join("contexts.json");
        #[derive(Serialize)]
        struct ContextsExport<'a> {
            config_hash: &'a str,
            contexts: &'a [ContextDataset],
        }
        write_json(
            &path,
            &ContextsExport {
                config_hash: &self.hash,
                contexts: scorer.evaluator().contexts(),
            },
        )?;
        files.push(path);
        Ok(CommandOutcome {
            dir,
            files,
            simulations: self.simulations(),
        })
    }

    /// Trains one policy per seed; writes checkpoint, training log, trace and timing.
    pub fn cmd_train(&self) -> Result<CommandOutcome> {
        let scorer = self.scorer()?;
        let dir = self.command_dir("train");
        let mut files = Vec::new();
        self.write_config(&dir, &mut files)?;
        let per_seed: Vec<Vec<PathBuf>> = self
            .cfg
            .run
            .seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<PathBuf>> {
                let start = Instant::now();
                let out = train(&scorer, &self.cfg.train_config(seed))?;
                let seconds = start.elapsed().as_secs_f64();
                let sdir = self.seed_dir("train", seed);
                let ck = Checkpoint::new(&out.model, &out.rng, seed, out.log.len(), &self.hash);
                let ck_path = self.checkpoint_path(seed);
                let mut text = serde_json::to_string(&ck).map_err(|e| artifact_err(&ck_path, e))?;
                text.push('\n');
                write_file(&ck_path, text.as_bytes())?;
                let log_path = sdir.join("train_log.csv");
                write_csv::<TrainLogEntry>(&log_path, &self.hash, &out.log)?;
                let trace = SearchTrace {
                    method: Method::Gflownet.name().into(),
                    seed,
                    budget: self.cfg.run.budget,
                    evaluated: out.evaluated,
                };
                let trace_path = sdir.join("trace.csv");
                write_csv(&trace_path, &self.hash, &trace.rows())?;
                self.timing(&sdir, seed, seconds)?;
                Ok(vec![ck_path, log_path, trace_path, sdir.join("timing.json")])
            })
            .collect::<Result<_>>()?;
        scorer.flush()?;
        files.extend(per_seed.into_iter().flatten());
        Ok(CommandOutcome {
            dir,
            files,
            simulations: self.simulations(),
        })
    }

    /// Draws `train.samples` terminals from each trained policy and scores them.
    pub fn cmd_sample(&self) -> Result<CommandOutcome> {
        for &seed in &self.cfg.run.seeds {
            require(&self.checkpoint_path(seed))?;
        }
        let scorer = self.scorer()?;
        let dir = self.command_dir("sample");
        let mut files = Vec::new();
        self.write_config(&dir, &mut files)?;
        for &seed in &self.cfg.run.seeds {
            let ck: Checkpoint = read_json(&self.checkpoint_path(seed), &self.hash)?;
            let model = ck.model()?;
            model.check_space(&self.space).map_err(GflowError::from)?;
            let mut rng = ck.rng.clone();
            let keys = sample_terminals(&model, &self.space, self.cfg.train.samples, &mut rng)?;
            let records = scorer.score_many(&keys)?;
            let rows: Vec<SampleRow> = records
                .into_iter()
                .enumerate()
                .map(|(i, r)| SampleRow {
                    sample: i + 1,
                    key: r.key.to_string(),
                    loss: r.aggregate,
                    reward: r.reward,
                })
                .collect();
            let path = self.samples_path(seed);
            write_csv(&path, &self.hash, &rows)?;
            files.push(path);
        }
        scorer.flush()?;
        Ok(CommandOutcome {
            dir,
            files,
            simulations: self.simulations(),
        })
    }

    /// Runs the configured baseline (`run.method`) for every seed.
    pub fn cmd_baseline(&self) -> Result<CommandOutcome> {
        let method = self.cfg.run.method;
        if method == Method::Gflownet {
            return Err(ExperimentError::NotABaseline(method.name().into()));
        }
        let budget = self.cfg.budget().ok_or(ExperimentError::NoBudget)?;
        let scorer = self.scorer()?;
        let command = Self::baseline_command(method);
        let dir = self.command_dir(&command);
        let mut files = Vec::new();
        self.write_config(&dir, &mut files)?;
        let mode = self.cfg.run.budget_mode;
        let settings = self.cfg.tpe_settings();
        let per_seed: Vec<Vec<PathBuf>> = self
            .cfg
            .run
            .seeds
            .par_iter()
            .map(|&seed| -> Result<Vec<PathBuf>> {
                let start = Instant::now();
                let trace = match method {
                    Method::Random => random_search(&scorer, budget, mode, seed)?,
                    _ => tpe_search(&scorer, budget, mode, seed, &settings)?,
                };
                let seconds = start.elapsed().as_secs_f64();
                let sdir = self.seed_dir(&command, seed);
                let path = sdir.join("trace.csv");
                write_csv(&path, &self.hash, &trace.rows())?;
                self.timing(&sdir, seed, seconds)?;
                Ok(vec![path, sdir.join("timing.json")])
            })
            .collect::<Result<_>>()?;
        scorer.flush()?;
        files.extend(per_seed.into_iter().flatten());
        Ok(CommandOutcome {
            dir,
            files,
            simulations: self.simulations(),
        })
    }

    fn parse_key(&self, path: &Path, key: &str) -> Result<StateKey> {
        let k = StateKey::parse(key).map_err(|e| artifact_err(path, e))?;
        if !self.space.is_terminal(&k) || self.space.validate_key(&k).is_err() {
            return Err(artifact_err(path, format!("{key} is not a terminal of this space")));
        }
        Ok(k)
    }

    fn load_trace(&self, method: Method, seed: u64) -> Result<Vec<(StateKey, f64)>> {
        let path = self.trace_path(method, seed);
        let rows: Vec<TraceRow> = read_csv(&path, &self.hash)?;
        rows.iter()
            .map(|r| Ok((self.parse_key(&path, &r.key)?, r.loss)))
            .collect()
    }

    fn load_samples(&self, seed: u64) -> Result<Vec<(StateKey, f64)>> {
        let path = self.samples_path(seed);
        let rows: Vec<SampleRow> = read_csv(&path, &self.hash)?;
        rows.iter()
            .map(|r| Ok((self.parse_key(&path, &r.key)?, r.loss)))
            .collect()
    }

    /// Rebuilds the exact landscape from the enumerate command's export.
    pub fn load_landscape(&self) -> Result<(LandscapeTable, Vec<usize>)> {
        let path = self.command_dir("enumerate").join("landscape.csv");
        let rows: Vec<LandscapeRow> = read_csv(&path, &self.hash)?;
        if rows.len() as u128 != self.space.terminal_count() {
            return Err(artifact_err(&path, "row count differs from the terminal count"));
        }
        let mut modes = Vec::with_capacity(rows.len());
        for (i, r) in rows.iter().enumerate() {
            if r.index != i || self.parse_key(&path, &r.key)? != self.space.key_at(i) {
                return Err(artifact_err(&path, format!("row {i} out of enumeration order")));
            }
            modes.push(self.space.terminal_index(&self.parse_key(&path, &r.mode_key)?).map_err(|e| artifact_err(&path, e))?);
        }
        let table = LandscapeTable::from_rewards(
            &self.space,
            rows.iter().map(|r| r.loss).collect(),
            rows.iter().map(|r| r.reward).collect(),
        )?;
        Ok((table, modes))
    }

    /// Daily trajectories of a terminal in every context, cached on disk.
    fn daily_trajectories(&self, evaluator: &Evaluator, key: &StateKey) -> Result<Vec<Vec<f64>>> {
        let path = self
            .reward_dir()?
            .join("trajectories")
            .join(format!("{key}.json"));
        if let Ok(text) = std::fs::read_to_string(&path) {
            if let Ok(v) = serde_json::from_str(&text) {
                return Ok(v);
            }
        }
        let series = evaluator.daily(key)?;
        let text = serde_json::to_string(&series).map_err(|e| artifact_err(&path, e))?;
        write_file(&path, text.as_bytes())?;
        Ok(series)
    }

    /// Builds retrieval reports, the comparison table and distributional
    /// diagnostics from prior command outputs.
    pub fn cmd_report(&self) -> Result<CommandOutcome> {
        let cfg = &self.cfg;
        let seeds = &cfg.run.seeds;
        let methods = &cfg.report.methods;
        let enumerable = self.is_enumerable();
        // fail fast, naming the first absent artifact
        if enumerable {
            require(&self.command_dir("enumerate").join("landscape.csv"))?;
        }
        for &m in methods {
            for &seed in seeds {
                require(&self.trace_path(m, seed))?;
                require(&self.timing_path(m, seed))?;
                if m == Method::Gflownet {
                    require(&self.checkpoint_path(seed))?;
                    require(&self.samples_path(seed))?;
                }
            }
        }
        let landscape = if enumerable { Some(self.load_landscape()?) } else { None };

        let mut traces: BTreeMap<(usize, u64), Vec<(StateKey, f64)>> = BTreeMap::new();
        let mut timings = BTreeMap::new();
        for (mi, &m) in methods.iter().enumerate() {
            for &seed in seeds {
                traces.insert((mi, seed), self.load_trace(m, seed)?);
                let t: Timing = read_json(&self.timing_path(m, seed), &self.hash)?;
                timings.insert((mi, seed), t.wall_clock_seconds);
            }
        }
        let l_star = match &landscape {
            Some((l, _)) => l.min_aggregate(),
            None => traces
                .values()
                .flatten()
                .map(|e| e.1)
                .fold(f64::INFINITY, f64::min),
        };
        let ks: Vec<usize> = cfg
            .report
            .topk
            .iter()
            .copied()
            .filter(|&k| (k as u128) <= self.space.terminal_count())
            .collect();

        let mut samples = BTreeMap::new();
        if methods.contains(&Method::Gflownet) {
            for &seed in seeds {
                samples.insert(seed, self.load_samples(seed)?);
            }
        }

        let mut reports = Vec::new();
        for (mi, &m) in methods.iter().enumerate() {
            for &seed in seeds {
                let evaluated = &traces[&(mi, seed)];
                if evaluated.is_empty() {
                    return Err(artifact_err(&self.trace_path(m, seed), "empty trace"));
                }
                let mut report = RetrievalReport::from_evaluations(
                    m.name(),
                    seed,
                    &self.hash,
                    evaluated,
                    l_star,
                    cfg.reward.beta,
                    landscape.as_ref().map(|(l, _)| l),
                    &ks,
                    timings[&(mi, seed)],
                )?;
                if m == Method::Gflownet && cfg.report.hamming_source == HammingSource::Samples {
                    let top = crate::metrics::top20_stats(&samples[&seed])?;
                    report.median_top20_loss = top.median_loss;
                    report.mean_hamming_top20 = top.mean_hamming;
                    report.top20_deficient = top.deficient;
                }
                reports.push(report);
            }
        }
        let summary = compare_methods(&reports)?;

        let dir = self.command_dir("report");
        let mut files = Vec::new();
        self.write_config(&dir, &mut files)?;

        let path = dir.join("comparison.csv");
        let mut buf = format!("# config_hash={}\n", self.hash).into_bytes();
        write_comparison_csv(&summary, &mut buf, None)?;
        write_file(&path, &buf)?;
        files.push(path);

        let retrieval: Vec<RetrievalRow> = reports
            .iter()
            .map(|r| RetrievalRow {
                method: r.method.clone(),
                seed: r.seed,
                evaluations: r.best_so_far.len(),
                best_loss: r.best_loss,
                median_top20_loss: r.median_top20_loss,
                mean_hamming_top20: r.mean_hamming_top20,
                top20_deficient: r.top20_deficient,
                wall_clock: r.wall_clock,
            })
            .collect();
        let path = dir.join("retrieval.csv");
        write_csv(&path, &self.hash, &retrieval)?;
        files.push(path);

        let curves: Vec<CurveRow> = reports
            .iter()
            .flat_map(|r| {
                r.best_so_far.iter().map(move |b| CurveRow {
                    method: r.method.clone(),
                    seed: r.seed,
                    n: b.n,
                    gap: b.gap,
                    reward: b.reward,
                })
            })
            .collect();
        let path = dir.join("best_so_far.csv");
        write_csv(&path, &self.hash, &curves)?;
        files.push(path);

        if enumerable {
            let recovery: Vec<RecoveryRow> = reports
                .iter()
                .flat_map(|r| {
                    r.topk_recovery.iter().map(move |&(k, c)| RecoveryRow {
                        method: r.method.clone(),
                        seed: r.seed,
                        k,
                        recovered: c,
                    })
                })
                .collect();
            let path = dir.join("topk_recovery.csv");
            write_csv(&path, &self.hash, &recovery)?;
            files.push(path);
        }

        let mut fidelity = Vec::new();
        if let (Some((land, modes)), true) = (&landscape, methods.contains(&Method::Gflownet)) {
            fidelity = self.distribution_exports(land, modes, &samples, &dir, &mut files)?;
        }

        let evaluator = self.evaluator()?;
        let mut overlay = Vec::new();
        for (mi, &m) in methods.iter().enumerate() {
            let best = seeds
                .iter()
                .flat_map(|s| traces[&(mi, *s)].iter())
                .min_by(|a, b| a.1.total_cmp(&b.1).then_with(|| a.0.cmp(&b.0)))
                .map(|e| e.0.clone())
                .expect("non-empty traces");
            let series = self.daily_trajectories(&evaluator, &best)?;
            for (ctx, daily) in evaluator.contexts().iter().zip(&series) {
                let observed: BTreeMap<usize, f64> = ctx
                    .obs_times
                    .iter()
                    .copied()
                    .zip(ctx.obs_values.iter().copied())
                    .collect();
                for (day, &y) in daily.iter().enumerate() {
                    overlay.push(OverlayRow {
                        method: m.name().into(),
                        key: best.to_string(),
                        context: ctx.context_id,
                        day,
                        simulated: y,
                        observed: observed.get(&day).copied(),
                    });
                }
            }
        }
        let path = dir.join("best_state_overlay.csv");
        write_csv(&path, &self.hash, &overlay)?;
        files.push(path);

        let manifest_path = dir.join("manifest.json");
        let mut names: Vec<String> = files
            .iter()
            .filter_map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()))
            .collect();
        names.push("manifest.json".into());
        let manifest = Manifest {
            config_hash: self.hash.clone(),
            methods: methods.iter().map(|m| m.name().to_string()).collect(),
            seeds: seeds.clone(),
            budget: cfg.run.budget,
            l_star,
            enumerable,
            files: names,
            summary,
            reports,
            fidelity,
        };
        write_json(&manifest_path, &manifest)?;
        files.push(manifest_path);
        Ok(CommandOutcome {
            dir,
            files,
            simulations: self.simulations(),
        })
    }

    /// L1 and sample recovery per seed, rank profile, basin masses and
    /// mass-difference grids against the exact landscape.
    fn distribution_exports(
        &self,
        land: &LandscapeTable,
        modes: &[usize],
        samples: &BTreeMap<u64, Vec<(StateKey, f64)>>,
        dir: &Path,
        files: &mut Vec<PathBuf>,
    ) -> Result<Vec<FidelityRow>> {
        let seeds = &self.cfg.run.seeds;
        let top50: HashSet<&StateKey> = land.top_k(50.min(land.len())).into_iter().map(|i| &land.keys[i]).collect();
        let mut fidelity = Vec::new();
        let mut learned = Vec::new();
        for &seed in seeds {
            let ck: Checkpoint = read_json(&self.checkpoint_path(seed), &self.hash)?;
            let model = ck.model()?;
            let dist = exact_terminal_distribution(&model, &self.space, self.cfg.enumeration_cap())?;
            let found: HashSet<&StateKey> = samples[&seed].iter().map(|e| &e.0).filter(|k| top50.contains(k)).collect();
            fidelity.push(FidelityRow {
                seed,
                l1: l1_distance(&dist, &land.target_prob)?,
                top50_in_samples: found.len(),
                log_z: model.log_z(),
                exact_log_z: land.z.ln(),
            });
            learned.push(dist);
        }
        let n = learned.len() as f64;
        let mean: Vec<f64> = (0..land.len())
            .map(|i| learned.iter().map(|d| d[i]).sum::<f64>() / n)
            .collect();

        let path = dir.join("fidelity.csv");
        write_csv(&path, &self.hash, &fidelity)?;
        files.push(path);

        let profile: Vec<ProfileExportRow> = paired_profile(&self.space, &land.target_prob, &mean)?
            .into_iter()
            .map(|r| ProfileExportRow {
                rank: r.rank,
                key: r.key,
                exact_prob: r.exact_prob,
                learned_prob: r.learned_prob,
            })
            .collect();
        let path = dir.join("rank_profile.csv");
        write_csv(&path, &self.hash, &profile)?;
        files.push(path);

        let mut mode_ids: Vec<usize> = modes.to_vec();
        mode_ids.sort_unstable();
        mode_ids.dedup();
        let mut basin_rows: Vec<BasinMassRow> = mode_ids
            .iter()
            .map(|&m| {
                let members = || (0..land.len()).filter(move |&i| modes[i] == m);
                let exact: f64 = members().map(|i| land.target_prob[i]).sum();
                let per_seed: Vec<f64> = learned.iter().map(|d| members().map(|i| d[i]).sum()).collect();
                let ms = mean_std(&per_seed);
                BasinMassRow {
                    mode_key: land.keys[m].to_string(),
                    exact_mass: exact,
                    learned_mass_mean: ms.mean,
                    learned_mass_std: ms.std,
                }
            })
            .collect();
        basin_rows.sort_by(|a, b| b.exact_mass.total_cmp(&a.exact_mass));
        let path = dir.join("basin_mass.csv");
        write_csv(&path, &self.hash, &basin_rows)?;
        files.push(path);

        let path = dir.join("grid_learned.json");
        write_json(&path, &self.grid_export("learned_prob_mean", &mean, None)?)?;
        files.push(path);
        let diff: Vec<f64> = mean.iter().zip(&land.target_prob).map(|(a, b)| a - b).collect();
        let path = dir.join("grid_difference.json");
        write_json(&path, &self.grid_export("learned_minus_target", &diff, None)?)?;
        files.push(path);
        Ok(fidelity)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(out: &Path) -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.run.out_dir = out.join("runs").to_string_lossy().into_owned();
        c.run.cache_dir = out.join("cache").to_string_lossy().into_owned();
        c.run.seeds = vec![1, 2];
        c.run.budget = 60;
        c.train.steps = 20;
        c.train.hidden = vec![16, 16];
        c.train.samples = 100;
        c
    }

    #[test]
    fn exit_codes() {
        assert_eq!(ExperimentError::NoBudget.exit_code(), 1);
        assert_eq!(ExperimentError::Config(ConfigError::Invalid("x".into())).exit_code(), 1);
        assert_eq!(ExperimentError::MissingArtifact("a".into()).exit_code(), 2);
    }

    #[test]
    fn report_names_missing_artifact() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(small_config(dir.path())).unwrap();
        let err = exp.cmd_report().unwrap_err();
        match err {
            ExperimentError::MissingArtifact(p) => assert!(p.ends_with("enumerate/landscape.csv")),
            e => panic!("unexpected {e}"),
        }
        let err = exp.cmd_sample().unwrap_err();
        assert!(err.to_string().contains("checkpoint-seed1.json"));
    }

    #[test]
    fn baseline_argument_errors() {
        let dir = tempfile::tempdir().unwrap();
        let exp = Experiment::new(small_config(dir.path())).unwrap();
        assert!(matches!(exp.cmd_baseline(), Err(ExperimentError::NotABaseline(_))));
        let mut c = small_config(dir.path());
        c.run.method = Method::Random;
        c.run.budget = 0;
        let exp = Experiment::new(c).unwrap();
        assert!(matches!(exp.cmd_baseline(), Err(ExperimentError::NoBudget)));
    }

    #[test]
    fn two_cycle_enumeration_refused() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small_config(dir.path());
        c.space.cycles = 2;
        let exp = Experiment::new(c).unwrap();
        let err = exp.cmd_enumerate().unwrap_err();
        assert!(matches!(err, ExperimentError::NotEnumerable { .. }));
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn hash_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.csv");
        write_csv(&path, "aaaa", &[SampleRow { sample: 1, key: "0".into(), loss: 0.0, reward: 1.0 }]).unwrap();
        let back: Vec<SampleRow> = read_csv(&path, "aaaa").unwrap();
        assert_eq!(back.len(), 1);
        assert!(matches!(
            read_csv::<SampleRow>(&path, "bbbb"),
            Err(ExperimentError::HashMismatch { .. })
        ));
    }
}
