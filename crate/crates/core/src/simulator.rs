//! Reduced mechanistic greenhouse crop simulator and synthetic observational
//! contexts.
//!
//! Daily recurrence over leaf, stem and fruit dry mass (kg m^-2) and a
//! development temperature sum. Radiation is intercepted by the canopy,
//! scaled by CO2 and a two-sided temperature inhibition, reduced by
//! maintenance respiration, and partitioned between fruit and vegetative
//! organs according to development stage.

use crate::space::{ParameterVector, SpaceSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("simulator parameter `{0}` missing from the space")]
    MissingParameter(String),
    #[error("parameter vector has {got} values, expected {expected}")]
    VectorLength { got: usize, expected: usize },
    #[error("context {context}: non-finite forcing on day {day}")]
    NonFiniteForcing { context: usize, day: usize },
    #[error("context {context}: {reason}")]
    InvalidContext { context: usize, reason: String },
    #[error("context file: {0}")]
    Io(#[from] std::io::Error),
    #[error("context file: {0}")]
    Json(#[from] serde_json::Error),
}

/// Climate forcing for one day.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DayForcing {
    /// Daytime canopy temperature, degC.
    pub t_day: f64,
    /// 24-hour mean temperature, degC.
    pub t_24: f64,
    /// Daily light integral, mol m^-2 d^-1.
    pub light: f64,
    /// CO2 concentration, ppm.
    pub co2: f64,
}

/// One observational context: forcing plus observed cumulative fruit dry mass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextDataset {
    pub context_id: usize,
    pub days: usize,
    pub forcing: Vec<DayForcing>,
    pub obs_times: Vec<usize>,
    pub obs_values: Vec<f64>,
}

impl ContextDataset {
    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| SimError::InvalidContext {
            context: self.context_id,
            reason: reason.to_string(),
        };
        if self.forcing.len() != self.days {
            return Err(bad("forcing length differs from horizon"));
        }
        if self.obs_times.len() != self.obs_values.len() {
            return Err(bad("observation times and values differ in length"));
        }
        if self.obs_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(bad("observation times not strictly increasing"));
        }
        if self.obs_times.iter().any(|&t| t > self.days) {
            return Err(bad("observation time beyond horizon"));
        }
        if self.obs_values.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(bad("observed values must be finite and non-negative"));
        }
        if self.obs_values.windows(2).any(|w| w[0] > w[1]) {
            return Err(bad("observed values must be non-decreasing"));
        }
        for (day, f) in self.forcing.iter().enumerate() {
            if ![f.t_day, f.t_24, f.light, f.co2].iter().all(|v| v.is_finite()) {
                return Err(SimError::NonFiniteForcing {
                    context: self.context_id,
                    day,
                });
            }
        }
        Ok(())
    }
}

/// Simulated cumulative fruit dry mass at a context's observation times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimTrajectory {
    pub values: Vec<f64>,
}

/// Mechanistic simulator interface `M(theta(x), c) -> y_sim`.
pub trait Simulator: Sync + Send {
    fn simulate(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<SimTrajectory, SimError>;

    /// Full daily series of cumulative fruit dry mass (day 0 ..= days).
    fn simulate_daily(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<Vec<f64>, SimError>;
}

/// Wraps a simulator and counts every call, for cache-effectiveness checks.
pub struct CountingSimulator {
    inner: Arc<dyn Simulator>,
    calls: AtomicU64,
}

impl CountingSimulator {
    pub fn new(inner: Arc<dyn Simulator>) -> Self {
        Self {
            inner,
            calls: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }
}

impl Simulator for CountingSimulator {
    fn simulate(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<SimTrajectory, SimError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate(params, context)
    }

    fn simulate_daily(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<Vec<f64>, SimError> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.simulate_daily(params, context)
    }
}

/// Names of the fifteen crop parameters, in [`CropParams`] field order.
pub const CROP_PARAMETERS: [&str; 15] = [
    "LAI_max",
    "SLA",
    "n_plants",
    "P_max",
    "alpha_light",
    "co2_half",
    "T_opt",
    "T_width",
    "s_sharp",
    "TS_start",
    "TS_end",
    "dev_rate",
    "rg_fruit",
    "c_maint",
    "Q10",
];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropParams {
    pub lai_max: f64,
    pub sla: f64,
    pub n_plants: f64,
    pub p_max: f64,
    pub alpha_light: f64,
    pub co2_half: f64,
    pub t_opt: f64,
    pub t_width: f64,
    pub s_sharp: f64,
    pub ts_start: f64,
    pub ts_end: f64,
    pub dev_rate: f64,
    pub rg_fruit: f64,
    pub c_maint: f64,
    pub q10: f64,
}

impl CropParams {
    fn from_slice(v: [f64; 15]) -> Self {
        Self {
            lai_max: v[0],
            sla: v[1],
            n_plants: v[2],
            p_max: v[3],
            alpha_light: v[4],
            co2_half: v[5],
            t_opt: v[6],
            t_width: v[7],
            s_sharp: v[8],
            ts_start: v[9],
            ts_end: v[10],
            dev_rate: v[11],
            rg_fruit: v[12],
            c_maint: v[13],
            q10: v[14],
        }
    }

    /// Two-sided logistic temperature inhibition, in [0, 1].
    pub fn inhibition(&self, t: f64) -> f64 {
        let lo = self.t_opt - self.t_width;
        let hi = self.t_opt + self.t_width;
        logistic(self.s_sharp * (t - lo)) * logistic(-self.s_sharp * (t - hi))
    }

    /// Fraction of net assimilate allocated to fruit at temperature sum `ts`.
    pub fn fruit_fraction(&self, ts: f64) -> f64 {
        if ts < self.ts_start {
            0.0
        } else if ts >= self.ts_end {
            self.rg_fruit
        } else {
            self.rg_fruit * (ts - self.ts_start) / (self.ts_end - self.ts_start)
        }
    }
}

fn logistic(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Crop state carried between days.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropState {
    pub leaf: f64,
    pub stem: f64,
    pub fruit: f64,
    pub temp_sum: f64,
}

impl Default for CropState {
    fn default() -> Self {
        Self {
            leaf: 0.05,
            stem: 0.02,
            fruit: 0.0,
            temp_sum: 0.0,
        }
    }
}

impl CropState {
    /// Advances one day under `f`.
    pub fn step(&mut self, p: &CropParams, f: &DayForcing) {
        let lai = (p.sla * p.n_plants * self.leaf).min(p.lai_max);
        let f_light = 1.0 - (-0.7 * lai).exp();
        let f_co2 = f.co2 / (f.co2 + p.co2_half);
        let gross = p.p_max
            * (1.0 - (-p.alpha_light * f.light / p.p_max).exp())
            * f_light
            * f_co2
            * p.inhibition(f.t_day)
            * p.inhibition(f.t_24);
        let total = self.fruit + self.leaf + self.stem;
        let maintenance = p.c_maint * total * p.q10.powf((f.t_24 - 25.0) / 10.0);
        self.temp_sum += p.dev_rate * (f.t_24 - 10.0).max(0.0);
        let pf = p.fruit_fraction(self.temp_sum);
        let net = (gross - maintenance).max(0.0);
        self.fruit += pf * net;
        self.leaf += 0.7 * (1.0 - pf) * net;
        self.stem += 0.3 * (1.0 - pf) * net;
    }
}

/// The built-in reduced crop model bound to a space's parameter layout.
#[derive(Debug, Clone)]
pub struct CropSimulator {
    indices: [usize; 15],
    n_params: usize,
}

impl CropSimulator {
    pub fn for_space(space: &SpaceSpec) -> Result<Self, SimError> {
        let mut indices = [0usize; 15];
        for (slot, name) in CROP_PARAMETERS.iter().enumerate() {
            indices[slot] = space
                .parameter_index(name)
                .ok_or_else(|| SimError::MissingParameter(name.to_string()))?;
        }
        Ok(Self {
            indices,
            n_params: space.parameters().len(),
        })
    }

    pub fn crop_params(&self, params: &ParameterVector) -> Result<CropParams, SimError> {
        if params.values.len() != self.n_params {
            return Err(SimError::VectorLength {
                got: params.values.len(),
                expected: self.n_params,
            });
        }
        Ok(CropParams::from_slice(self.indices.map(|i| params.values[i])))
    }

    fn check_forcing(context: &ContextDataset) -> Result<(), SimError> {
        for (day, f) in context.forcing.iter().enumerate() {
            if ![f.t_day, f.t_24, f.light, f.co2].iter().all(|v| v.is_finite()) {
                return Err(SimError::NonFiniteForcing {
                    context: context.context_id,
                    day,
                });
            }
        }
        Ok(())
    }
}

impl Simulator for CropSimulator {
    fn simulate(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<SimTrajectory, SimError> {
        let daily = self.simulate_daily(params, context)?;
        let values = context
            .obs_times
            .iter()
            .map(|&t| {
                daily.get(t).copied().ok_or_else(|| SimError::InvalidContext {
                    context: context.context_id,
                    reason: format!("observation day {t} beyond forcing"),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(SimTrajectory { values })
    }

    fn simulate_daily(
        &self,
        params: &ParameterVector,
        context: &ContextDataset,
    ) -> Result<Vec<f64>, SimError> {
        let p = self.crop_params(params)?;
        Self::check_forcing(context)?;
        let mut state = CropState::default();
        let mut out = Vec::with_capacity(context.forcing.len() + 1);
        out.push(state.fruit);
        for f in &context.forcing {
            state.step(&p, f);
            out.push(state.fruit);
        }
        Ok(out)
    }
}

/// Climate regime used to synthesize one context's forcing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Regime {
    pub mean_temp: f64,
    pub day_offset: f64,
    pub light_mean: f64,
    pub light_amplitude: f64,
    pub co2: f64,
}

/// Six compartment regimes: reference, warm, cool, high-CO2, unenriched,
/// supplemental light.
pub const REGIMES: [Regime; 6] = [
    Regime { mean_temp: 20.0, day_offset: 3.0, light_mean: 18.0, light_amplitude: 6.0, co2: 800.0 },
    Regime { mean_temp: 22.5, day_offset: 3.5, light_mean: 18.0, light_amplitude: 6.0, co2: 700.0 },
    Regime { mean_temp: 18.0, day_offset: 2.5, light_mean: 16.0, light_amplitude: 6.0, co2: 900.0 },
    Regime { mean_temp: 20.5, day_offset: 3.0, light_mean: 20.0, light_amplitude: 7.0, co2: 1000.0 },
    Regime { mean_temp: 21.0, day_offset: 3.0, light_mean: 17.0, light_amplitude: 6.0, co2: 450.0 },
    Regime { mean_temp: 19.0, day_offset: 4.0, light_mean: 22.0, light_amplitude: 5.0, co2: 600.0 },
];

pub const DEFAULT_HORIZON: usize = 180;
pub const OBSERVATION_INTERVAL: usize = 14;

/// Observation days: every two weeks from day 14 up to the horizon.
pub fn observation_days(days: usize) -> Vec<usize> {
    (1..)
        .map(|i| i * OBSERVATION_INTERVAL)
        .take_while(|&d| d <= days)
        .collect()
}

/// Generates the six synthetic contexts. Observations are left at zero; fill
/// them with [`synthesize_observations`].
pub fn generate_contexts(seed: u64) -> Vec<ContextDataset> {
    generate_contexts_with_horizon(seed, DEFAULT_HORIZON)
}

pub fn generate_contexts_with_horizon(seed: u64, days: usize) -> Vec<ContextDataset> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let obs_times = observation_days(days);
    REGIMES
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let forcing = (0..days)
                .map(|d| {
                    let season = (std::f64::consts::TAU * d as f64 / 365.0).sin();
                    let temp_noise: f64 = rng.sample(StandardNormal);
                    let day_noise: f64 = rng.sample(StandardNormal);
                    let light_noise: f64 = rng.sample(StandardNormal);
                    let co2_noise: f64 = rng.sample(StandardNormal);
                    let t_24 = r.mean_temp + 1.5 * season + 0.7 * temp_noise;
                    DayForcing {
                        t_24,
                        t_day: t_24 + r.day_offset + 0.5 * day_noise,
                        light: (r.light_mean + r.light_amplitude * season
                            + 0.15 * r.light_mean * light_noise)
                            .max(0.0),
                        co2: (r.co2 + 30.0 * co2_noise).max(300.0),
                    }
                })
                .collect();
            ContextDataset {
                context_id: i + 1,
                days,
                forcing,
                obs_times: obs_times.clone(),
                obs_values: vec![0.0; obs_times.len()],
            }
        })
        .collect()
}

/// Replaces each context's observations with the truth trajectory under
/// multiplicative noise `1 + noise_rel * g`, clamped at zero and made
/// non-decreasing by a running maximum.
pub fn synthesize_observations(
    simulator: &dyn Simulator,
    contexts: &[ContextDataset],
    truth: &ParameterVector,
    noise_rel: f64,
    seed: u64,
) -> Result<Vec<ContextDataset>, SimError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    contexts
        .iter()
        .map(|c| {
            let sim = simulator.simulate(truth, c)?;
            let mut running = 0.0f64;
            let obs_values = sim
                .values
                .iter()
                .map(|&y| {
                    let g: f64 = rng.sample(StandardNormal);
                    let v = if noise_rel > 0.0 {
                        (y * (1.0 + noise_rel * g)).max(0.0)
                    } else {
                        y
                    };
                    running = running.max(v);
                    running
                })
                .collect();
            Ok(ContextDataset {
                obs_values,
                ..c.clone()
            })
        })
        .collect()
}

pub fn save_contexts(path: &Path, contexts: &[ContextDataset]) -> Result<(), SimError> {
    let text = serde_json::to_string_pretty(contexts)?;
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_contexts(path: &Path) -> Result<Vec<ContextDataset>, SimError> {
    let text = std::fs::read_to_string(path)?;
    let contexts: Vec<ContextDataset> = serde_json::from_str(&text)?;
    for c in &contexts {
        c.validate()?;
    }
    Ok(contexts)
}
