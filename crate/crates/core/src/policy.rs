//! Forward-policy network: a ReLU MLP trunk shared by all decision slots with
//! one linear head per slot, plus the learned log-partition `log_z`.
//!
//! All trainable values live in one flat `Vec<f64>` (trunk layers, then
//! heads, then `log_z`), which keeps the optimizer, checkpoints and
//! finite-difference checks simple.

use crate::space::{SpaceSpec, StateKey};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum PolicyError {
    #[error("feature dimension {got} does not match model input {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("slot {slot} out of range ({slots} slots)")]
    Slot { slot: usize, slots: usize },
    #[error("cannot encode a terminal key")]
    TerminalKey,
    #[error("model does not match the space: {0}")]
    SpaceMismatch(String),
    #[error("parameter vector has {got} entries, expected {expected}")]
    ParamCount { got: usize, expected: usize },
}

/// Dimension of the state encoding for `space`.
pub fn feature_dim(space: &SpaceSpec) -> usize {
    space.radices().iter().map(|r| r + 1).sum::<usize>() + space.slots()
}

/// Writes the encoding of a non-terminal partial key into `out`: per slot a
/// one-hot over actions plus an "undecided" category, then a one-hot of the
/// slot about to be decided.
pub fn encode_into(space: &SpaceSpec, key: &StateKey, out: &mut [f64]) -> Result<(), PolicyError> {
    let slots = space.slots();
    if key.len() >= slots {
        return Err(PolicyError::TerminalKey);
    }
    out.fill(0.0);
    let mut offset = 0;
    for slot in 0..slots {
        let r = space.action_count(slot);
        let idx = key.actions().get(slot).map_or(r, |&a| a as usize);
        out[offset + idx] = 1.0;
        offset += r + 1;
    }
    out[offset + key.len()] = 1.0;
    Ok(())
}

pub fn encode_state(space: &SpaceSpec, key: &StateKey) -> Result<Vec<f64>, PolicyError> {
    let mut v = vec![0.0; feature_dim(space)];
    encode_into(space, key, &mut v)?;
    Ok(v)
}

/// Encodes a batch of partial keys (all the same length) into a matrix.
pub fn encode_batch(space: &SpaceSpec, keys: &[StateKey]) -> Result<Array2<f64>, PolicyError> {
    let d = feature_dim(space);
    let mut x = Array2::zeros((keys.len(), d));
    for (mut row, key) in x.axis_iter_mut(Axis(0)).zip(keys) {
        encode_into(space, key, row.as_slice_mut().expect("row-major"))?;
    }
    Ok(x)
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    fan_in: usize,
    fan_out: usize,
}

/// Parameter layout of a model.
#[derive(Debug, Clone, PartialEq)]
struct Layout {
    trunk: Vec<Dense>,
    heads: Vec<Dense>,
    log_z: usize,
}

impl Layout {
    fn new(input_dim: usize, hidden: &[usize], head_sizes: &[usize]) -> Self {
        let mut at = 0;
        let mut dense = |fan_in: usize, fan_out: usize| {
            let d = Dense {
                w: at,
                b: at + fan_in * fan_out,
                fan_in,
                fan_out,
            };
            at += fan_in * fan_out + fan_out;
            d
        };
        let mut trunk = Vec::with_capacity(hidden.len());
        let mut width = input_dim;
        for &h in hidden {
            trunk.push(dense(width, h));
            width = h;
        }
        let heads = head_sizes.iter().map(|&a| dense(width, a)).collect();
        Layout {
            trunk,
            heads,
            log_z: at,
        }
    }

    fn len(&self) -> usize {
        self.log_z + 1
    }
}

/// Forward-policy MLP with per-slot heads and learned `log_z`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyModel {
    input_dim: usize,
    hidden: Vec<usize>,
    head_sizes: Vec<usize>,
    layout: Layout,
    params: Vec<f64>,
}

/// Cached activations of one trunk pass.
pub(crate) struct TrunkPass {
    /// `acts[0]` is the input; `acts[l + 1]` the post-ReLU output of layer `l`.
    pub acts: Vec<Array2<f64>>,
}

impl PolicyModel {
    /// Trunk weights uniform in `±1/sqrt(fan_in)`, biases zero, heads zero
    /// (uniform initial policy), `log_z = 0`.
    pub fn new<R: Rng + ?Sized>(space: &SpaceSpec, hidden: &[usize], rng: &mut R) -> Self {
        let mut model = Self::zeros(feature_dim(space), hidden, &space.radices());
        for layer in model.layout.trunk.clone() {
            let bound = 1.0 / (layer.fan_in as f64).sqrt();
            for w in &mut model.params[layer.w..layer.b] {
                *w = rng.random_range(-bound..bound);
            }
        }
        model
    }

    pub fn zeros(input_dim: usize, hidden: &[usize], head_sizes: &[usize]) -> Self {
        let layout = Layout::new(input_dim, hidden, head_sizes);
        Self {
            input_dim,
            hidden: hidden.to_vec(),
            head_sizes: head_sizes.to_vec(),
            params: vec![0.0; layout.len()],
            layout,
        }
    }

    pub fn from_params(
        input_dim: usize,
        hidden: &[usize],
        head_sizes: &[usize],
        params: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        let mut m = Self::zeros(input_dim, hidden, head_sizes);
        if params.len() != m.params.len() {
            return Err(PolicyError::ParamCount {
                got: params.len(),
                expected: m.params.len(),
            });
        }
        m.params = params;
        Ok(m)
    }

    /// Checks that input width and heads agree with `space`.
    pub fn check_space(&self, space: &SpaceSpec) -> Result<(), PolicyError> {
        if self.input_dim != feature_dim(space) {
            return Err(PolicyError::SpaceMismatch(format!(
                "input {} vs {}",
                self.input_dim,
                feature_dim(space)
            )));
        }
        if self.head_sizes != space.radices() {
            return Err(PolicyError::SpaceMismatch("head sizes differ".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden(&self) -> &[usize] {
        &self.hidden
    }

    pub fn head_sizes(&self) -> &[usize] {
        &self.head_sizes
    }

    pub fn slots(&self) -> usize {
        self.head_sizes.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn log_z(&self) -> f64 {
        self.params[self.layout.log_z]
    }

    pub fn set_log_z(&mut self, v: f64) {
        let i = self.layout.log_z;
        self.params[i] = v;
    }

    pub fn log_z_index(&self) -> usize {
        self.layout.log_z
    }

    /// Range of the flat parameter vector holding head `slot` (weights and bias).
    pub fn head_range(&self, slot: usize) -> std::ops::Range<usize> {
        let h = self.layout.heads[slot];
        h.w..h.b + h.fan_out
    }

    /// Sets head `slot` so that its logits equal `logits` regardless of input.
    pub fn set_head_bias(&mut self, slot: usize, logits: &[f64]) {
        let h = self.layout.heads[slot];
        self.params[h.w..h.b].fill(0.0);
        self.params[h.b..h.b + h.fan_out].copy_from_slice(logits);
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|v| v.is_finite())
    }

    fn weights(&self, d: Dense) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((d.fan_in, d.fan_out), &self.params[d.w..d.b]).expect("layout")
    }

    fn bias(&self, d: Dense) -> ndarray::ArrayView1<'_, f64> {
        ndarray::ArrayView1::from(&self.params[d.b..d.b + d.fan_out])
    }

    pub(crate) fn trunk_forward(&self, x: Array2<f64>) -> Result<TrunkPass, PolicyError> {
        if x.ncols() != self.input_dim {
            return Err(PolicyError::Dimension {
                got: x.ncols(),
                expected: self.input_dim,
            });
        }
        let mut acts = Vec::with_capacity(self.layout.trunk.len() + 1);
        acts.push(x);
        for &layer in &self.layout.trunk {
            let mut z = acts.last().unwrap().dot(&self.weights(layer));
            z += &self.bias(layer);
            z.mapv_inplace(|v| v.max(0.0));
            acts.push(z);
        }
        Ok(TrunkPass { acts })
    }

    pub(crate) fn head_logits(&self, slot: usize, features: ArrayView2<'_, f64>) -> Array2<f64> {
        let head = self.layout.heads[slot];
        let mut logits = features.dot(&self.weights(head));
        logits += &self.bias(head);
        logits
    }

    /// Action log-probabilities for every row of `x` at `slot`.
    pub fn log_probs_batch(&self, x: Array2<f64>, slot: usize) -> Result<Array2<f64>, PolicyError> {
        if slot >= self.slots() {
            return Err(PolicyError::Slot {
                slot,
                slots: self.slots(),
            });
        }
        let pass = self.trunk_forward(x)?;
        let mut logits = self.head_logits(slot, pass.acts.last().unwrap().view());
        for mut row in logits.axis_iter_mut(Axis(0)) {
            log_softmax_inplace(row.as_slice_mut().expect("row-major"));
        }
        Ok(logits)
    }

    /// Action log-probabilities for one encoded state.
    pub fn forward_policy(&self, features: &[f64], slot: usize) -> Result<Vec<f64>, PolicyError> {
        let x = Array2::from_shape_vec((1, features.len()), features.to_vec()).expect("shape");
        Ok(self.log_probs_batch(x, slot)?.row(0).to_vec())
    }

    /// Back-propagates `dlogits` (one block per slot, rows aligned with the
    /// stacked trunk input) into `grad`.
    pub(crate) fn backward(
        &self,
        pass: &TrunkPass,
        slot_rows: &[(usize, std::ops::Range<usize>)],
        dlogits: &[Array2<f64>],
        grad: &mut [f64],
    ) {
        let top = pass.acts.last().unwrap();
        let mut dact = Array2::<f64>::zeros(top.raw_dim());
        for ((slot, rows), dl) in slot_rows.iter().zip(dlogits) {
            let head = self.layout.heads[*slot];
            let a = top.slice(ndarray::s![rows.clone(), ..]);
            let dw = a.t().dot(dl);
            add_into(&mut grad[head.w..head.b], dw.as_slice().expect("contiguous"));
            for (g, s) in grad[head.b..head.b + head.fan_out]
                .iter_mut()
                .zip(dl.sum_axis(Axis(0)).iter())
            {
                *g += s;
            }
            let da = dl.dot(&self.weights(head).t());
            let mut target = dact.slice_mut(ndarray::s![rows.clone(), ..]);
            target += &da;
        }
        for (l, &layer) in self.layout.trunk.iter().enumerate().rev() {
            let out = &pass.acts[l + 1];
            // ReLU derivative: gradient flows only where the output is positive
            ndarray::Zip::from(&mut dact).and(out).for_each(|d, &o| {
                if o <= 0.0 {
                    *d = 0.0;
                }
            });
            let input = &pass.acts[l];
            let dw = input.t().dot(&dact);
            add_into(&mut grad[layer.w..layer.b], dw.as_slice().expect("contiguous"));
            for (g, s) in grad[layer.b..layer.b + layer.fan_out]
                .iter_mut()
                .zip(dact.sum_axis(Axis(0)).iter())
            {
                *g += s;
            }
            if l > 0 {
                dact = dact.dot(&self.weights(layer).t());
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

pub fn log_softmax_inplace(v: &mut [f64]) {
    let max = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in v.iter_mut() {
        *x -= lse;
    }
}

/// Adaptive-moment optimizer over a flat parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One update; `lr(i)` gives the learning rate of parameter `i`.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: impl Fn(usize) -> f64) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= lr(i) * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}
