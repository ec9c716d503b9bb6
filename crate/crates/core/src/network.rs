//! Multi-layer perceptrons with hand-written reverse mode, and the two
//! conditional heads built on them: the score network `s_φ(x_t, t, y)` and
//! the boundary-clamped consistency network `f_θ(x_t, t, y)`.
//!
//! Weights are stored `[out, in]` row-major. A recorded forward pass keeps its
//! activations on the instance; `backward` consumes them.

use std::f64::consts::PI;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseVec, POSE_DIM};

/// Number of sinusoidal time features.
pub const TIME_FEATURES: usize = 16;

/// Default hidden width.
pub const HIDDEN_WIDTH: usize = 256;

/// Default number of hidden layers.
pub const HIDDEN_LAYERS: usize = 4;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_C: f64 = 0.044_715;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    /// Tanh approximation of GELU.
    #[serde(rename = "gelu_tanh")]
    Gelu,
    #[serde(rename = "tanh")]
    Tanh,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Activation::Tanh => x.tanh(),
        }
    }

    fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let th = (GELU_K * (x + GELU_C * x * x * x)).tanh();
                0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
            }
            Activation::Tanh => {
                let th = x.tanh();
                1.0 - th * th
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Tape {
    /// Input to each layer.
    inputs: Vec<Array2<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Array2<f64>>,
}

/// Fully connected network; hidden layers use `activation`, the output layer
/// is linear.
#[derive(Debug, Clone)]
pub struct MlpNet {
    layer_dims: Vec<usize>,
    weights: Vec<Array2<f64>>,
    biases: Vec<Array1<f64>>,
    activation: Activation,
    tape: Option<Tape>,
}

impl PartialEq for MlpNet {
    fn eq(&self, other: &Self) -> bool {
        self.layer_dims == other.layer_dims
            && self.activation == other.activation
            && self.weights == other.weights
            && self.biases == other.biases
    }
}

/// Parameter gradients, shaped like the network they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Gradients {
    pub fn zeros_like(net: &MlpNet) -> Self {
        Self {
            weights: net.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: net.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }

    pub fn scale(&mut self, k: f64) {
        for w in &mut self.weights {
            w.mapv_inplace(|v| v * k);
        }
        for b in &mut self.biases {
            b.mapv_inplace(|v| v * k);
        }
    }

    /// Global L2 norm over all entries, summed in parameter order.
    pub fn norm(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Flat views in the canonical order `w0, b0, w1, b1, …`.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    pub fn is_zero(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| *v == 0.0))
    }
}

impl MlpNet {
    /// Fan-in scaled uniform init for every layer but the last, which starts
    /// at zero.
    pub fn new(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(layer_dims, activation, |fan_in, last| {
            if last {
                0.0
            } else {
                let bound = (6.0 / fan_in as f64).sqrt();
                rng.random_range(-bound..bound)
            }
        })
    }

    /// Like [`MlpNet::new`] but with the output layer randomized too; used
    /// where a zero head would hide bugs (gradient checks).
    pub fn new_dense_init(layer_dims: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::with_init(layer_dims, activation, |fan_in, _| {
            let bound = (6.0 / fan_in as f64).sqrt();
            rng.random_range(-bound..bound)
        })
    }

    fn with_init(
        layer_dims: &[usize],
        activation: Activation,
        mut draw: impl FnMut(usize, bool) -> f64,
    ) -> Result<Self> {
        if layer_dims.len() < 2 || layer_dims.iter().any(|&d| d == 0) {
            return Err(Error::invalid(format!(
                "layer dims must have at least two positive entries, got {layer_dims:?}"
            )));
        }
        let n = layer_dims.len() - 1;
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (layer_dims[l], layer_dims[l + 1]);
            let last = l + 1 == n;
            weights.push(Array2::from_shape_simple_fn((fan_out, fan_in), || {
                draw(fan_in, last)
            }));
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            layer_dims: layer_dims.to_vec(),
            weights,
            biases,
            activation,
            tape: None,
        })
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    pub fn weights(&self) -> &[Array2<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[Array1<f64>] {
        &self.biases
    }

    /// Flat parameter views in the canonical order `w0, b0, w1, b1, …`.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.weights
            .iter()
            .zip(&self.biases)
            .flat_map(|(w, b)| [w.as_slice().unwrap(), b.as_slice().unwrap()])
            .collect()
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w.as_slice_mut().unwrap(), b.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn param_norm(&self) -> f64 {
        self.param_slices()
            .iter()
            .flat_map(|s| s.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.param_slices()
            .iter()
            .all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn same_shape(&self, other: &MlpNet) -> bool {
        self.layer_dims == other.layer_dims
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::invalid(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        Ok(())
    }

    fn run(&self, x: ArrayView2<f64>, mut tape: Option<&mut Tape>) -> Array2<f64> {
        let n = self.weights.len();
        let mut h = x.to_owned();
        for l in 0..n {
            let mut z = h.dot(&self.weights[l].t());
            z += &self.biases[l];
            if let Some(t) = tape.as_deref_mut() {
                t.inputs.push(h);
            }
            if l + 1 == n {
                h = z;
            } else {
                let act = self.activation;
                let a = z.mapv(|v| act.apply(v));
                if let Some(t) = tape.as_deref_mut() {
                    t.pre.push(z);
                }
                h = a;
            }
        }
        h
    }

    /// Inference-only evaluation of a `[batch, in]` input.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        Ok(self.run(x, None))
    }

    /// Evaluation that records activations for a following [`MlpNet::backward`].
    pub fn forward_recorded(&mut self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let mut tape = Tape {
            inputs: Vec::with_capacity(self.weights.len()),
            pre: Vec::with_capacity(self.weights.len()),
        };
        let out = self.run(x, Some(&mut tape));
        self.tape = Some(tape);
        Ok(out)
    }

    pub fn has_tape(&self) -> bool {
        self.tape.is_some()
    }

    /// Reverse pass of the last recorded forward. `upstream` is the gradient
    /// of a scalar with respect to the network output. Returns parameter
    /// gradients and the gradient with respect to the input.
    pub fn backward(&mut self, upstream: ArrayView2<f64>) -> Result<(Gradients, Array2<f64>)> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let batch = tape.inputs[0].nrows();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::invalid(format!(
                "upstream gradient shape {:?} does not match output ({batch}, {})",
                upstream.dim(),
                self.output_dim()
            )));
        }
        let n = self.weights.len();
        let mut dw = Vec::with_capacity(n);
        let mut db = Vec::with_capacity(n);
        let mut g = upstream.to_owned();
        for l in (0..n).rev() {
            dw.push(g.t().dot(&tape.inputs[l]));
            db.push(g.sum_axis(Axis(0)));
            let mut gin = g.dot(&self.weights[l]);
            if l > 0 {
                let act = self.activation;
                ndarray::Zip::from(&mut gin)
                    .and(&tape.pre[l - 1])
                    .for_each(|gv, &z| *gv *= act.derivative(z));
            }
            g = gin;
        }
        dw.reverse();
        db.reverse();
        Ok((
            Gradients {
                weights: dw,
                biases: db,
            },
            g,
        ))
    }

    pub fn snapshot(&self) -> MlpSnapshot {
        MlpSnapshot {
            layer_dims: self.layer_dims.clone(),
            activation: self.activation,
            weights: self
                .weights
                .iter()
                .map(|w| w.as_slice().unwrap().to_vec())
                .collect(),
            biases: self.biases.iter().map(|b| b.to_vec()).collect(),
        }
    }

    pub fn from_snapshot(s: &MlpSnapshot) -> Result<Self> {
        let dims = &s.layer_dims;
        if dims.len() < 2 || dims.iter().any(|&d| d == 0) {
            return Err(Error::Checkpoint(format!("bad layer dims {dims:?}")));
        }
        let n = dims.len() - 1;
        if s.weights.len() != n || s.biases.len() != n {
            return Err(Error::Checkpoint(format!(
                "expected {n} layers, found {} weight and {} bias arrays",
                s.weights.len(),
                s.biases.len()
            )));
        }
        let mut weights = Vec::with_capacity(n);
        let mut biases = Vec::with_capacity(n);
        for l in 0..n {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            if s.weights[l].len() != fan_in * fan_out || s.biases[l].len() != fan_out {
                return Err(Error::Checkpoint(format!(
                    "layer {l}: expected {fan_out}x{fan_in} weights and {fan_out} biases"
                )));
            }
            let all = s.weights[l].iter().chain(&s.biases[l]);
            if all.into_iter().any(|v| !v.is_finite()) {
                return Err(Error::Checkpoint(format!("layer {l}: non-finite parameter")));
            }
            weights.push(
                Array2::from_shape_vec((fan_out, fan_in), s.weights[l].clone())
                    .map_err(|e| Error::Checkpoint(e.to_string()))?,
            );
            biases.push(Array1::from(s.biases[l].clone()));
        }
        Ok(Self {
            layer_dims: dims.clone(),
            weights,
            biases,
            activation: s.activation,
            tape: None,
        })
    }
}

/// Serialized network parameters, row-major per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSnapshot {
    pub layer_dims: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

/// `[sin(2π·2^k·t/T), cos(2π·2^k·t/T)]` for `k = 0..8`, interleaved.
pub fn time_features(t: f64, horizon: f64) -> Result<[f64; TIME_FEATURES]> {
    if !(0.0..=horizon).contains(&t) {
        return Err(Error::Domain { t, horizon });
    }
    let mut out = [0.0; TIME_FEATURES];
    let base = 2.0 * PI * t / horizon;
    for k in 0..TIME_FEATURES / 2 {
        let (s, c) = (base * (1u32 << k) as f64).sin_cos();
        out[2 * k] = s;
        out[2 * k + 1] = c;
    }
    Ok(out)
}

/// Architecture shared by both heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrunkSpec {
    pub cond_dim: usize,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
}

impl TrunkSpec {
    pub fn new(cond_dim: usize) -> Self {
        Self {
            cond_dim,
            hidden_width: HIDDEN_WIDTH,
            hidden_layers: HIDDEN_LAYERS,
            activation: Activation::Gelu,
        }
    }

    pub fn input_dim(&self) -> usize {
        POSE_DIM + TIME_FEATURES + self.cond_dim
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(std::iter::repeat_n(self.hidden_width, self.hidden_layers));
        dims.push(POSE_DIM);
        dims
    }
}

/// A trunk reading `concat(x_t, time_features(t), y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalMlp {
    trunk: MlpNet,
    horizon: f64,
    cond_dim: usize,
}

impl ConditionalMlp {
    pub fn new(spec: &TrunkSpec, horizon: f64, seed: u64) -> Result<Self> {
        Self::from_trunk(
            MlpNet::new(&spec.layer_dims(), spec.activation, seed)?,
            horizon,
            spec.cond_dim,
        )
    }

    pub fn from_trunk(trunk: MlpNet, horizon: f64, cond_dim: usize) -> Result<Self> {
        if trunk.input_dim() != POSE_DIM + TIME_FEATURES + cond_dim || trunk.output_dim() != POSE_DIM
        {
            return Err(Error::invalid(format!(
                "trunk dims {:?} incompatible with condition dim {cond_dim}",
                trunk.layer_dims()
            )));
        }
        if !(horizon > 0.0) {
            return Err(Error::invalid("horizon must be positive"));
        }
        Ok(Self {
            trunk,
            horizon,
            cond_dim,
        })
    }

    pub fn trunk(&self) -> &MlpNet {
        &self.trunk
    }

    pub fn trunk_mut(&mut self) -> &mut MlpNet {
        &mut self.trunk
    }

    pub fn cond_dim(&self) -> usize {
        self.cond_dim
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn assemble(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Array2<f64>> {
        let b = xs.len();
        if ts.len() != b || ys.len() != b {
            return Err(Error::invalid(format!(
                "batch mismatch: {} states, {} times, {} conditions",
                b,
                ts.len(),
                ys.len()
            )));
        }
        let width = self.trunk.input_dim();
        let mut m = Array2::zeros((b, width));
        for (row, ((x, &t), y)) in m.rows_mut().into_iter().zip(xs.iter().zip(ts).zip(ys)) {
            if y.len() != self.cond_dim {
                return Err(Error::invalid(format!(
                    "condition has dim {}, expected {}",
                    y.len(),
                    self.cond_dim
                )));
            }
            let tf = time_features(t, self.horizon)?;
            let row = row.into_slice().unwrap();
            row[..POSE_DIM].copy_from_slice(&x.0);
            row[POSE_DIM..POSE_DIM + TIME_FEATURES].copy_from_slice(&tf);
            row[POSE_DIM + TIME_FEATURES..].copy_from_slice(y);
        }
        Ok(m)
    }

    pub fn forward(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Array2<f64>> {
        let input = self.assemble(xs, ts, ys)?;
        self.trunk.forward(input.view())
    }

    pub fn forward_recorded(
        &mut self,
        xs: &[PoseVec],
        ts: &[f64],
        ys: &[&[f64]],
    ) -> Result<Array2<f64>> {
        let input = self.assemble(xs, ts, ys)?;
        self.trunk.forward_recorded(input.view())
    }
}

pub(crate) fn rows_to_poses(m: &Array2<f64>) -> Vec<PoseVec> {
    m.rows()
        .into_iter()
        .map(|r| {
            let mut v = [0.0; POSE_DIM];
            for (o, x) in v.iter_mut().zip(r.iter()) {
                *o = *x;
            }
            PoseVec(v)
        })
        .collect()
}

pub(crate) fn poses_to_rows(ps: &[PoseVec]) -> Array2<f64> {
    let mut m = Array2::zeros((ps.len(), POSE_DIM));
    for (mut row, p) in m.rows_mut().into_iter().zip(ps) {
        for (o, v) in row.iter_mut().zip(p.0) {
            *o = v;
        }
    }
    m
}

/// The score network `s_φ`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreNet {
    net: ConditionalMlp,
}

impl ScoreNet {
    pub fn new(spec: &TrunkSpec, horizon: f64, seed: u64) -> Result<Self> {
        Ok(Self {
            net: ConditionalMlp::new(spec, horizon, seed)?,
        })
    }

    pub fn from_parts(net: ConditionalMlp) -> Self {
        Self { net }
    }

    pub fn inner(&self) -> &ConditionalMlp {
        &self.net
    }

    pub fn inner_mut(&mut self) -> &mut ConditionalMlp {
        &mut self.net
    }

    pub fn forward_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        Ok(rows_to_poses(&self.net.forward(xs, ts, ys)?))
    }

    pub fn forward(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        Ok(self.forward_batch(std::slice::from_ref(x), &[t], &[y])?[0])
    }

    pub fn forward_recorded(
        &mut self,
        xs: &[PoseVec],
        ts: &[f64],
        ys: &[&[f64]],
    ) -> Result<Vec<PoseVec>> {
        Ok(rows_to_poses(&self.net.forward_recorded(xs, ts, ys)?))
    }

    /// Parameter gradients given `∂L/∂s` per batch row.
    pub fn backward(&mut self, upstream: &[PoseVec]) -> Result<Gradients> {
        let up = poses_to_rows(upstream);
        Ok(self.net.trunk.backward(up.view())?.0)
    }
}

/// The consistency network `f_θ`: identity for `t ≤ ε`, the trunk otherwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConsistencyNet {
    net: ConditionalMlp,
    epsilon: f64,
    boundary_mask: Option<Vec<bool>>,
}

impl ConsistencyNet {
    pub fn new(spec: &TrunkSpec, horizon: f64, epsilon: f64, seed: u64) -> Result<Self> {
        Self::from_parts(ConditionalMlp::new(spec, horizon, seed)?, epsilon)
    }

    pub fn from_parts(net: ConditionalMlp, epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon < net.horizon()) {
            return Err(Error::invalid("consistency boundary must lie in (0, T)"));
        }
        Ok(Self {
            net,
            epsilon,
            boundary_mask: None,
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn inner(&self) -> &ConditionalMlp {
        &self.net
    }

    pub fn inner_mut(&mut self) -> &mut ConditionalMlp {
        &mut self.net
    }

    fn clamp(&self, xs: &[PoseVec], ts: &[f64], out: Array2<f64>) -> Vec<PoseVec> {
        let mut poses = rows_to_poses(&out);
        for ((p, x), &t) in poses.iter_mut().zip(xs).zip(ts) {
            if t <= self.epsilon {
                *p = *x;
            }
        }
        poses
    }

    pub fn forward_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        let out = self.net.forward(xs, ts, ys)?;
        Ok(self.clamp(xs, ts, out))
    }

    pub fn forward(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        Ok(self.forward_batch(std::slice::from_ref(x), &[t], &[y])?[0])
    }

    pub fn forward_recorded(
        &mut self,
        xs: &[PoseVec],
        ts: &[f64],
        ys: &[&[f64]],
    ) -> Result<Vec<PoseVec>> {
        let out = self.net.forward_recorded(xs, ts, ys)?;
        self.boundary_mask = Some(ts.iter().map(|&t| t <= self.epsilon).collect());
        Ok(self.clamp(xs, ts, out))
    }

    /// Parameter gradients given `∂L/∂f` per batch row. Rows on the boundary
    /// branch carry no parameter dependence.
    pub fn backward(&mut self, upstream: &[PoseVec]) -> Result<Gradients> {
        let mask = self
            .boundary_mask
            .take()
            .ok_or_else(|| Error::State("backward called without a recorded forward pass".into()))?;
        let mut up = poses_to_rows(upstream);
        for (mut row, clamped) in up.rows_mut().into_iter().zip(mask) {
            if clamped {
                row.fill(0.0);
            }
        }
        Ok(self.net.trunk.backward(up.view())?.0)
    }
}

/// Exponential-moving-average copy `θ*` of the consistency network. Exposes
/// evaluation only; parameters move exclusively through [`EmaCopy::update`].
#[derive(Debug, Clone, PartialEq)]
pub struct EmaCopy {
    net: ConsistencyNet,
    decay: f64,
}

impl EmaCopy {
    pub fn new(online: &ConsistencyNet, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::invalid(format!("EMA decay must lie in [0, 1], got {decay}")));
        }
        let mut net = online.clone();
        net.boundary_mask = None;
        net.net.trunk.tape = None;
        Ok(Self { net, decay })
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn net(&self) -> &ConsistencyNet {
        &self.net
    }

    pub fn forward_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        self.net.forward_batch(xs, ts, ys)
    }

    /// `θ* ← decay·θ* + (1-decay)·θ`, elementwise.
    pub fn update(&mut self, online: &ConsistencyNet) -> Result<()> {
        if !self.net.net.trunk.same_shape(&online.net.trunk) {
            return Err(Error::invalid("EMA target and online network differ in shape"));
        }
        let d = self.decay;
        let src = online.net.trunk.param_slices();
        for (dst, s) in self.net.net.trunk.param_slices_mut().into_iter().zip(src) {
            for (a, b) in dst.iter_mut().zip(s) {
                *a = d * *a + (1.0 - d) * b;
            }
        }
        Ok(())
    }
}

/// Free-function form of [`EmaCopy::update`].
pub fn ema_update(target: &mut EmaCopy, online: &ConsistencyNet) -> Result<()> {
    target.update(online)
}
