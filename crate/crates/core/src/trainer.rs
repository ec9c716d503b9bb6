//! Joint training of the score network and the consistency network: run
//! configuration, Adam, EMA maintenance, checkpoints and the epoch loop.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::sample_consistency;
use crate::geometry::{decode_pose, is_success, GraspPose, PoseVec};
use crate::network::{Activation, ConditionalMlp, ConsistencyNet, EmaCopy, Gradients, MlpNet, MlpSnapshot, ScoreNet, TrunkSpec};
use crate::objectives::{score_loss, total_loss, LossBreakdown, TrainBatch};
use crate::schedule::{NoiseSchedule, TimeGrid};
use crate::synthdata::{sha256_hex, write_atomic, Dataset, SplitTag};

pub const CHECKPOINT_SCHEMA: u32 = 1;
pub const LAST_CHECKPOINT: &str = "last.json";
pub const BEST_CHECKPOINT: &str = "best.json";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,score,consistency,detection,total,wall_ms";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: u64,
    /// Upper bound on optimizer steps; 0 means no bound.
    pub max_steps: u64,
    pub batch_size: usize,
    pub lr_score: f64,
    pub lr_consistency: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub ema_decay: f64,
    pub clip_norm: f64,
    pub grid_n: usize,
    pub gamma_min: f64,
    pub gamma_max: f64,
    pub horizon: f64,
    pub epsilon: f64,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub activation: Activation,
    pub eval_every: u64,
    pub eval_samples: usize,
    pub eval_steps: usize,
    pub checkpoint_every: u64,
    pub log_wall_ms: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            max_steps: 0,
            batch_size: 8,
            lr_score: 1e-4,
            lr_consistency: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            ema_decay: 0.999,
            clip_norm: 10.0,
            grid_n: 2000,
            gamma_min: 1e-4,
            gamma_max: 2e-2,
            horizon: 1000.0,
            epsilon: 1.0,
            hidden_width: 256,
            hidden_layers: 4,
            activation: Activation::Gelu,
            eval_every: 1000,
            eval_samples: 200,
            eval_steps: 3,
            checkpoint_every: 5000,
            log_wall_ms: true,
            seed: 0,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for key `{key}`")))
}

fn activation_name(a: Activation) -> &'static str {
    match a {
        Activation::Gelu => "gelu_tanh",
        Activation::Tanh => "tanh",
    }
}

macro_rules! config_keys {
    ($($field:ident),* $(,)?) => {
        impl TrainConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($field)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                match key.trim() {
                    "activation" => {
                        self.activation = match value {
                            "gelu_tanh" | "gelu" => Activation::Gelu,
                            "tanh" => Activation::Tanh,
                            _ => return Err(Error::Config(format!("invalid value `{value}` for key `activation`"))),
                        }
                    }
                    $(stringify!($field) => self.$field = parse_value(stringify!($field), value)?,)*
                    other => return Err(Error::Config(format!("unknown key `{other}`"))),
                }
                Ok(())
            }

            /// Canonical `key = value` rendering, one key per line.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(let _ = writeln!(out, "{} = {}", stringify!($field), self.$field);)*
                let _ = writeln!(out, "activation = {}", activation_name(self.activation));
                out
            }
        }
    };
}

config_keys!(
    epochs,
    max_steps,
    batch_size,
    lr_score,
    lr_consistency,
    adam_beta1,
    adam_beta2,
    adam_eps,
    ema_decay,
    clip_norm,
    grid_n,
    gamma_min,
    gamma_max,
    horizon,
    epsilon,
    hidden_width,
    hidden_layers,
    eval_every,
    eval_samples,
    eval_steps,
    checkpoint_every,
    log_wall_ms,
    seed,
);

impl TrainConfig {
    /// Parses flat `key = value` text over the defaults. `#` starts a comment.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 of the canonical rendering.
    pub fn hash(&self) -> String {
        sha256_hex(self.to_text().as_bytes())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, why: &str| Err(Error::Config(format!("`{k}` {why}")));
        if self.batch_size < 1 {
            return bad("batch_size", "must be at least 1");
        }
        for (k, lr) in [("lr_score", self.lr_score), ("lr_consistency", self.lr_consistency)] {
            if !(lr > 0.0 && lr < 1.0) {
                return bad(k, "must lie in (0, 1)");
            }
        }
        for (k, b) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(k, "must lie in [0, 1)");
            }
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", "must be positive");
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return bad("ema_decay", "must lie in [0, 1]");
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", "must be positive");
        }
        if self.grid_n < 2 {
            return bad("grid_n", "must be at least 2");
        }
        if self.hidden_width < 1 || self.hidden_layers < 1 {
            return bad("hidden_width", "and hidden_layers must be positive");
        }
        if self.eval_steps < 1 {
            return bad("eval_steps", "must be at least 1");
        }
        self.schedule()
            .map_err(|e| Error::Config(format!("schedule: {e}")))?;
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.gamma_min, self.gamma_max, self.horizon, self.epsilon)
    }

    pub fn trunk_spec(&self, cond_dim: usize) -> TrunkSpec {
        TrunkSpec {
            cond_dim,
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
            activation: self.activation,
        }
    }
}

/// Moment buffers for one network, in parameter-slice order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(net: &MlpNet) -> Self {
        let zeros: Vec<Vec<f64>> = net.param_slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }

    pub fn matches(&self, net: &MlpNet) -> bool {
        let shapes: Vec<usize> = net.param_slices().iter().map(|s| s.len()).collect();
        let m: Vec<usize> = self.m.iter().map(Vec::len).collect();
        let v: Vec<usize> = self.v.iter().map(Vec::len).collect();
        m == shapes && v == shapes
    }

    /// One bias-corrected Adam update.
    pub fn apply(&mut self, net: &mut MlpNet, grads: &Gradients, p: &AdamParams) -> Result<()> {
        if !self.matches(net) {
            return Err(Error::invalid("optimizer buffers do not match the network"));
        }
        let g = grads.slices();
        let params = net.param_slices_mut();
        if g.len() != params.len() || g.iter().zip(&params).any(|(a, b)| a.len() != b.len()) {
            return Err(Error::invalid("gradient shape does not match the network"));
        }
        self.step += 1;
        let c1 = 1.0 - p.beta1.powf(self.step as f64);
        let c2 = 1.0 - p.beta2.powf(self.step as f64);
        for (((theta, g), m), v) in params.into_iter().zip(g).zip(&mut self.m).zip(&mut self.v) {
            for i in 0..theta.len() {
                m[i] = p.beta1 * m[i] + (1.0 - p.beta1) * g[i];
                v[i] = p.beta2 * v[i] + (1.0 - p.beta2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                theta[i] -= p.lr * m_hat / (v_hat.sqrt() + p.eps);
            }
        }
        Ok(())
    }
}

/// Rescales `g` to global norm `max_norm` if it exceeds it.
pub fn clip_global_norm(g: &mut Gradients, max_norm: f64) -> f64 {
    let n = g.norm();
    if n > max_norm {
        g.scale(max_norm / n);
    }
    n
}

/// Serializable position of a ChaCha stream.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: hex::encode(rng.get_seed()),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bytes = hex::decode(&self.seed).map_err(|e| Error::Checkpoint(format!("rng seed: {e}")))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| Error::Checkpoint("rng seed must be 32 bytes".into()))?;
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("rng position `{}` is not an integer", self.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

/// Source of training pairs for [`fit`].
pub trait TrainingSet {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn cond_dim(&self) -> usize;

    /// Clean state and condition of entry `index`; `rng` resolves any
    /// ambiguity such as multiple valid grasps.
    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(PoseVec, Vec<f64>)>;

    /// Held-out score, higher is better.
    fn validate(&self, _state: &TrainState) -> Result<Option<f64>> {
        Ok(None)
    }

    /// Identifier of the underlying data, recorded in checkpoints.
    fn fingerprint(&self) -> String {
        String::new()
    }
}

/// Full training state.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub schedule: NoiseSchedule,
    pub grid: TimeGrid,
    pub score: ScoreNet,
    pub consistency: ConsistencyNet,
    pub target: EmaCopy,
    pub adam_score: AdamState,
    pub adam_consistency: AdamState,
    pub rng: ChaCha8Rng,
    pub step: u64,
    pub best_eval: Option<f64>,
    pub data_fingerprint: String,
}

fn derive_seed(seed: u64, salt: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(salt);
    rand::Rng::random(&mut rng)
}

const STREAM_STEPS: u64 = 1;
const STREAM_SHUFFLE: u64 = 1 << 32;
const STREAM_EVAL: u64 = 2 << 32;

impl TrainState {
    pub fn new(config: &TrainConfig, cond_dim: usize) -> Result<Self> {
        config.validate()?;
        let schedule = config.schedule()?;
        let grid = schedule.uniform_grid(config.grid_n)?;
        let spec = config.trunk_spec(cond_dim);
        let score = ScoreNet::new(&spec, schedule.horizon(), derive_seed(config.seed, 11))?;
        let consistency =
            ConsistencyNet::new(&spec, schedule.horizon(), schedule.epsilon(), derive_seed(config.seed, 12))?;
        let target = EmaCopy::new(&consistency, config.ema_decay)?;
        let adam_score = AdamState::new(score.inner().trunk());
        let adam_consistency = AdamState::new(consistency.inner().trunk());
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(STREAM_STEPS);
        Ok(Self {
            config: config.clone(),
            schedule,
            grid,
            score,
            consistency,
            target,
            adam_score,
            adam_consistency,
            rng,
            step: 0,
            best_eval: None,
            data_fingerprint: String::new(),
        })
    }

    pub fn cond_dim(&self) -> usize {
        self.score.inner().cond_dim()
    }

    fn diagnostic(&self, what: &str, losses: Option<&LossBreakdown>) -> Error {
        let mut detail = what.to_string();
        if let Some(l) = losses {
            let _ = write!(
                detail,
                "; score={} consistency={} detection={}",
                l.score, l.consistency, l.detection
            );
        }
        let _ = write!(
            detail,
            "; |phi|={:.6e} |theta|={:.6e}",
            self.score.inner().trunk().param_norm(),
            self.consistency.inner().trunk().param_norm()
        );
        Error::NonFinite {
            step: self.step,
            detail,
        }
    }

    /// One joint step: Adam on `φ` from the score loss, Adam on `θ` from the
    /// consistency plus detection loss, then the EMA update of `θ*`. The
    /// losses are all evaluated before either network moves.
    pub fn train_step(&mut self, batch: &TrainBatch) -> Result<LossBreakdown> {
        if batch.conds.iter().any(|c| c.len() != self.cond_dim()) {
            return Err(Error::invalid("batch condition width does not match the networks"));
        }
        let (score, mut g_score) = score_loss(&mut self.score, batch, &self.schedule, &mut self.rng)?;
        let theta = total_loss(
            &mut self.consistency,
            &self.target,
            &self.score,
            &self.grid,
            batch,
            &self.schedule,
            &mut self.rng,
        )?;
        let losses = LossBreakdown::new(score, theta.consistency, theta.detection);
        let mut g_theta = theta.grads;
        if !losses.is_finite() {
            return Err(self.diagnostic("non-finite loss", Some(&losses)));
        }
        if !g_score.norm().is_finite() || !g_theta.norm().is_finite() {
            return Err(self.diagnostic("non-finite gradient", Some(&losses)));
        }
        clip_global_norm(&mut g_score, self.config.clip_norm);
        clip_global_norm(&mut g_theta, self.config.clip_norm);
        let c = &self.config;
        let p_score = AdamParams {
            lr: c.lr_score,
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        };
        let p_theta = AdamParams {
            lr: c.lr_consistency,
            ..p_score
        };
        self.adam_score.apply(self.score.inner_mut().trunk_mut(), &g_score, &p_score)?;
        self.adam_consistency
            .apply(self.consistency.inner_mut().trunk_mut(), &g_theta, &p_theta)?;
        self.target.update(&self.consistency)?;
        self.step += 1;
        if !self.score.inner().trunk().all_finite() || !self.consistency.inner().trunk().all_finite() {
            return Err(self.diagnostic("non-finite parameters after update", Some(&losses)));
        }
        Ok(losses)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            config_hash: self.config.hash(),
            config: self.config.clone(),
            cond_dim: self.cond_dim(),
            step: self.step,
            best_eval: self.best_eval,
            data_fingerprint: self.data_fingerprint.clone(),
            score_net: self.score.inner().trunk().snapshot(),
            consistency_net: self.consistency.inner().trunk().snapshot(),
            target_net: self.target.net().inner().trunk().snapshot(),
            adam_score: self.adam_score.clone(),
            adam_consistency: self.adam_consistency.clone(),
            rng: RngState::capture(&self.rng),
        }
    }

    /// Rebuilds a state. A stored config whose hash disagrees with the
    /// stored hash is rejected unless `force` is set.
    pub fn from_checkpoint(ck: &Checkpoint, force: bool) -> Result<Self> {
        if ck.schema_version != CHECKPOINT_SCHEMA {
            return Err(Error::Checkpoint(format!(
                "schema version {} unsupported (expected {CHECKPOINT_SCHEMA})",
                ck.schema_version
            )));
        }
        if ck.config.hash() != ck.config_hash && !force {
            return Err(Error::Checkpoint("config hash mismatch".into()));
        }
        ck.config
            .validate()
            .map_err(|e| Error::Checkpoint(format!("stored config: {e}")))?;
        let mut state = Self::new(&ck.config, ck.cond_dim)?;
        let expected = ck.config.trunk_spec(ck.cond_dim).layer_dims();
        let horizon = state.schedule.horizon();
        let rebuild = |snap: &MlpSnapshot, name: &str| -> Result<ConditionalMlp> {
            let net = MlpNet::from_snapshot(snap)?;
            if net.layer_dims() != expected.as_slice() || net.activation() != ck.config.activation {
                return Err(Error::Checkpoint(format!("{name} shape does not match the config")));
            }
            ConditionalMlp::from_trunk(net, horizon, ck.cond_dim)
        };
        state.score = ScoreNet::from_parts(rebuild(&ck.score_net, "score network")?);
        state.consistency = ConsistencyNet::from_parts(rebuild(&ck.consistency_net, "consistency network")?, state.schedule.epsilon())?;
        let target_net = ConsistencyNet::from_parts(rebuild(&ck.target_net, "target network")?, state.schedule.epsilon())?;
        state.target = EmaCopy::new(&target_net, ck.config.ema_decay)?;
        if !ck.adam_score.matches(state.score.inner().trunk())
            || !ck.adam_consistency.matches(state.consistency.inner().trunk())
        {
            return Err(Error::Checkpoint("optimizer buffers do not match the networks".into()));
        }
        state.adam_score = ck.adam_score.clone();
        state.adam_consistency = ck.adam_consistency.clone();
        state.rng = ck.rng.restore()?;
        state.step = ck.step;
        state.best_eval = ck.best_eval;
        state.data_fingerprint = ck.data_fingerprint.clone();
        Ok(state)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(&self.to_checkpoint(), path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?, false)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: TrainConfig,
    pub config_hash: String,
    pub cond_dim: usize,
    pub step: u64,
    pub best_eval: Option<f64>,
    pub data_fingerprint: String,
    pub score_net: MlpSnapshot,
    pub consistency_net: MlpSnapshot,
    pub target_net: MlpSnapshot,
    pub adam_score: AdamState,
    pub adam_consistency: AdamState,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn all_finite(&self) -> bool {
        let nets = [&self.score_net, &self.consistency_net, &self.target_net];
        let net_ok = nets.iter().all(|n| {
            n.weights.iter().chain(&n.biases).all(|v| v.iter().all(|x| x.is_finite()))
        });
        let adam_ok = [&self.adam_score, &self.adam_consistency]
            .iter()
            .all(|a| a.m.iter().chain(&a.v).all(|v| v.iter().all(|x| x.is_finite())));
        net_ok && adam_ok
    }
}

/// Atomic JSON write; refuses to persist non-finite values.
pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    if !ck.all_finite() {
        return Err(Error::NonFinite {
            step: ck.step,
            detail: format!("refusing to write {}", path.display()),
        });
    }
    let text = serde_json::to_string(ck).map_err(|source| Error::Json {
        context: format!("serializing {}", path.display()),
        source,
    })?;
    write_atomic(path, text.as_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Seen-split grasp samples with a held-out validation tail.
#[derive(Debug, Clone)]
pub struct GraspTrainingSet {
    train: Vec<(Vec<PoseVec>, Vec<f64>)>,
    validation: Vec<(Vec<GraspPose>, Vec<f64>)>,
    extent: f64,
    eval_steps: usize,
    fingerprint: String,
}

impl GraspTrainingSet {
    /// Uses the seen split only; the last `eval_samples` seen entries are
    /// held out for validation.
    pub fn new(data: &Dataset, eval_samples: usize, eval_steps: usize) -> Result<Self> {
        let seen = data.split(SplitTag::Seen);
        if seen.len() <= eval_samples {
            return Err(Error::invalid(format!(
                "{} seen samples leave nothing to train on after holding out {eval_samples}",
                seen.len()
            )));
        }
        let cut = seen.len() - eval_samples;
        let extent = seen[0].scene.extent;
        let mut train = Vec::with_capacity(cut);
        for s in &seen[..cut] {
            train.push((s.encoded_targets()?, s.condition.clone()));
        }
        let validation = seen[cut..]
            .iter()
            .map(|s| (s.gt_grasps.clone(), s.condition.clone()))
            .collect();
        let bytes = fs::read(&data.path).map_err(|e| Error::io(&data.path, e))?;
        Ok(Self {
            train,
            validation,
            extent,
            eval_steps,
            fingerprint: sha256_hex(&bytes),
        })
    }
}

impl TrainingSet for GraspTrainingSet {
    fn len(&self) -> usize {
        self.train.len()
    }

    fn cond_dim(&self) -> usize {
        self.train[0].1.len()
    }

    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(PoseVec, Vec<f64>)> {
        let (targets, y) = self
            .train
            .get(index)
            .ok_or_else(|| Error::invalid(format!("training index {index} out of range")))?;
        let pick = if targets.len() > 1 {
            rand::Rng::random_range(rng, 0..targets.len())
        } else {
            0
        };
        Ok((targets[pick], y.clone()))
    }

    /// Success rate of the consistency sampler on the validation tail.
    fn validate(&self, state: &TrainState) -> Result<Option<f64>> {
        if self.validation.is_empty() {
            return Ok(None);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(state.config.seed);
        rng.set_stream(STREAM_EVAL);
        let mut hits = 0usize;
        for (gts, y) in &self.validation {
            let out = sample_consistency(&state.consistency, y, self.eval_steps, &state.schedule, &mut rng)?;
            if is_success(&decode_pose(&out.pose, self.extent), gts)? {
                hits += 1;
            }
        }
        Ok(Some(hits as f64 / self.validation.len() as f64))
    }

    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }
}

/// Result of [`fit`].
#[derive(Debug, Clone)]
pub struct FitSummary {
    pub state: TrainState,
    pub steps_run: u64,
    pub total_steps: u64,
    pub last_checkpoint: PathBuf,
    pub best_checkpoint: PathBuf,
    pub log: PathBuf,
    pub last_losses: Option<LossBreakdown>,
}

pub fn steps_per_epoch(len: usize, batch_size: usize) -> u64 {
    len.div_ceil(batch_size) as u64
}

pub fn total_steps(config: &TrainConfig, len: usize) -> u64 {
    let t = config.epochs * steps_per_epoch(len, config.batch_size);
    if config.max_steps > 0 {
        t.min(config.max_steps)
    } else {
        t
    }
}

/// Seeded permutation of `0..len` for one epoch.
pub fn epoch_order(len: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STREAM_SHUFFLE + epoch);
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut rng);
    order
}

fn log_row(step: u64, l: &LossBreakdown, wall_ms: u128) -> String {
    format!(
        "{step},{},{},{},{},{wall_ms}\n",
        l.score, l.consistency, l.detection, l.total
    )
}

/// Keeps the header and rows up to `step`, so a resumed log matches an
/// uninterrupted one.
fn truncate_log(path: &Path, step: u64) -> Result<String> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
        Err(e) => return Err(Error::io(path, e)),
    };
    let mut out = format!("{LOG_HEADER}\n");
    for line in text.lines().skip(1) {
        let row_step: u64 = line
            .split(',')
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::invalid(format!("{}: malformed row `{line}`", path.display())))?;
        if row_step <= step {
            out.push_str(line);
            out.push('\n');
        }
    }
    Ok(out)
}

fn better(new: f64, best: Option<f64>) -> bool {
    best.is_none_or(|b| new > b)
}

/// Optional controls for [`fit_with`].
#[derive(Debug, Clone, Default)]
pub struct FitOptions {
    /// Continue from this state instead of a fresh initialization.
    pub resume: Option<TrainState>,
    /// Halt once this absolute step is reached, as an interrupted run would:
    /// `last.json` is written, the closing evaluation is skipped.
    pub stop_at: Option<u64>,
}

/// Runs training to completion, writing `last.json`, `best.json` and the
/// CSV log into `out_dir`. A `resume` state continues where it stopped.
pub fn fit(
    config: &TrainConfig,
    data: &dyn TrainingSet,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<FitSummary> {
    fit_with(
        config,
        data,
        out_dir,
        FitOptions {
            resume,
            stop_at: None,
        },
    )
}

pub fn fit_with(
    config: &TrainConfig,
    data: &dyn TrainingSet,
    out_dir: &Path,
    options: FitOptions,
) -> Result<FitSummary> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let last_path = out_dir.join(LAST_CHECKPOINT);
    let best_path = out_dir.join(BEST_CHECKPOINT);
    let log_path = out_dir.join(TRAIN_LOG);

    let mut state = match options.resume {
        Some(s) => {
            if s.config.hash() != config.hash() {
                return Err(Error::Checkpoint("resume state was trained under a different config".into()));
            }
            if s.cond_dim() != data.cond_dim() {
                return Err(Error::Checkpoint("resume state condition width differs from the data".into()));
            }
            if !s.data_fingerprint.is_empty() && s.data_fingerprint != data.fingerprint() {
                return Err(Error::Checkpoint("resume state was trained on different data".into()));
            }
            s
        }
        None => {
            let mut s = TrainState::new(config, data.cond_dim())?;
            s.data_fingerprint = data.fingerprint();
            s
        }
    };
    let start_step = state.step;
    let total = total_steps(config, data.len());
    let halt = options.stop_at.map_or(total, |s| s.min(total));
    let spe = steps_per_epoch(data.len(), config.batch_size);

    let prefix = truncate_log(&log_path, start_step)?;
    let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    log.write_all(prefix.as_bytes()).map_err(|e| Error::io(&log_path, e))?;

    let write_best = |state: &TrainState| state.save(&best_path);
    if start_step == 0 {
        if let Some(v) = data.validate(&state)? {
            state.best_eval = Some(v);
            write_best(&state)?;
        }
    }

    let clock = Instant::now();
    let mut order_epoch = u64::MAX;
    let mut order = Vec::new();
    let mut last_losses = None;
    while state.step < halt {
        let epoch = state.step / spe;
        if epoch != order_epoch {
            order = epoch_order(data.len(), config.seed, epoch);
            order_epoch = epoch;
        }
        let pos = (state.step % spe) as usize * config.batch_size;
        let idx = &order[pos..(pos + config.batch_size).min(order.len())];
        let mut x0 = Vec::with_capacity(idx.len());
        let mut conds = Vec::with_capacity(idx.len());
        for &i in idx {
            let (x, y) = data.draw(i, &mut state.rng)?;
            x0.push(x);
            conds.push(y);
        }
        let batch = TrainBatch::new(x0, conds)?;
        let losses = state.train_step(&batch)?;
        last_losses = Some(losses);
        let wall = if config.log_wall_ms { clock.elapsed().as_millis() } else { 0 };
        log.write_all(log_row(state.step, &losses, wall).as_bytes())
            .map_err(|e| Error::io(&log_path, e))?;

        if config.eval_every > 0 && state.step % config.eval_every == 0 {
            if let Some(v) = data.validate(&state)? {
                if better(v, state.best_eval) {
                    state.best_eval = Some(v);
                    write_best(&state)?;
                }
            }
        }
        if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            state.save(&last_path)?;
        }
    }
    let finished = state.step >= total;
    if finished && (config.eval_every == 0 || state.step % config.eval_every != 0) {
        if let Some(v) = data.validate(&state)? {
            if better(v, state.best_eval) {
                state.best_eval = Some(v);
                write_best(&state)?;
            }
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    state.save(&last_path)?;
    if finished && !best_path.exists() {
        state.save(&best_path)?;
    }
    Ok(FitSummary {
        steps_run: state.step - start_step,
        total_steps: total,
        state,
        last_checkpoint: last_path,
        best_checkpoint: best_path,
        log: log_path,
        last_losses,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::GaussianToy;

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            batch_size: 4,
            grid_n: 50,
            hidden_width: 8,
            hidden_layers: 2,
            eval_every: 5,
            checkpoint_every: 7,
            log_wall_ms: false,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = tiny_config();
        let parsed = TrainConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(parsed, cfg);
        assert_eq!(parsed.hash(), cfg.hash());
        let with_comments = "# comment\nseed = 9 # trailing\n\nbatch_size=16\n";
        let c = TrainConfig::from_text(with_comments).unwrap();
        assert_eq!((c.seed, c.batch_size), (9, 16));
        assert_ne!(c.hash(), TrainConfig::default().hash());
    }

    #[test]
    fn config_rejects_unknown_key_by_name() {
        match TrainConfig::from_text("learning_rate = 0.1\n") {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("{other:?}"),
        }
        for bad in ["batch_size = 0", "lr_score = 1.5", "seed = x", "activation = relu", "novalue"] {
            assert!(matches!(TrainConfig::from_text(bad), Err(Error::Config(_))), "{bad}");
        }
    }

    fn one_param_net(w: f64) -> MlpNet {
        let snap = MlpSnapshot {
            layer_dims: vec![1, 1],
            activation: Activation::Tanh,
            weights: vec![vec![w]],
            biases: vec![vec![0.0]],
        };
        MlpNet::from_snapshot(&snap).unwrap()
    }

    #[test]
    fn adam_matches_hand_computation() {
        let mut net = one_param_net(0.7);
        let mut grads = Gradients::zeros_like(&net);
        grads.weights[0][[0, 0]] = 0.5;
        let p = AdamParams {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut adam = AdamState::new(&net);
        adam.apply(&mut net, &grads, &p).unwrap();
        // m̂ = g, v̂ = g² on the first step.
        let expected = 0.7 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((net.weights()[0][[0, 0]] - expected).abs() < 1e-12);

        grads.weights[0][[0, 0]] = -0.2;
        adam.apply(&mut net, &grads, &p).unwrap();
        let m = 0.9 * 0.05 + 0.1 * -0.2;
        let v = 0.999 * 0.001 * 0.25 + 0.001 * 0.04;
        let m_hat = m / (1.0 - 0.81);
        let v_hat = v / (1.0 - 0.999f64.powi(2));
        let expected2 = expected - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((net.weights()[0][[0, 0]] - expected2).abs() < 1e-12);
        assert_eq!(adam.step, 2);
    }

    #[test]
    fn adam_zero_gradient_only_counts() {
        let mut net = one_param_net(0.3);
        let before = net.clone();
        let mut adam = AdamState::new(&net);
        let p = AdamParams {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let zero = Gradients::zeros_like(&net);
        adam.apply(&mut net, &zero, &p).unwrap();
        assert_eq!(net, before);
        assert_eq!(adam.step, 1);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let net = one_param_net(0.0);
        let mut g = Gradients::zeros_like(&net);
        g.weights[0][[0, 0]] = 30.0;
        g.biases[0][0] = 40.0;
        assert_eq!(clip_global_norm(&mut g, 10.0), 50.0);
        assert!((g.norm() - 10.0).abs() < 1e-12);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        rng.set_stream(9);
        for _ in 0..37 {
            let _: u32 = rand::Rng::random(&mut rng);
        }
        let mut restored = RngState::capture(&rng).restore().unwrap();
        for _ in 0..10 {
            assert_eq!(rand::Rng::random::<u64>(&mut rng), rand::Rng::random::<u64>(&mut restored));
        }
    }

    #[test]
    fn checkpoint_save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let toy = GaussianToy::standard(64);
        let out = fit(&tiny_config(), &toy, dir.path(), None).unwrap();
        let a = dir.path().join("a.json");
        let b = dir.path().join("b.json");
        out.state.save(&a).unwrap();
        TrainState::load(&a).unwrap().save(&b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
        assert_eq!(TrainState::load(&a).unwrap(), out.state);
    }

    #[test]
    fn corrupt_checkpoints_fail_cleanly() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(&tiny_config(), 3).unwrap();
        let path = dir.path().join("ck.json");
        state.save(&path).unwrap();
        let bytes = fs::read(&path).unwrap();
        fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(TrainState::load(&path), Err(Error::Checkpoint(_))));
        assert!(matches!(TrainState::load(&dir.path().join("none.json")), Err(Error::Io { .. })));

        let mut ck = state.to_checkpoint();
        ck.schema_version = 99;
        assert!(TrainState::from_checkpoint(&ck, false).is_err());

        let mut ck = state.to_checkpoint();
        ck.config_hash = "0".repeat(64);
        assert!(matches!(TrainState::from_checkpoint(&ck, false), Err(Error::Checkpoint(_))));
        assert!(TrainState::from_checkpoint(&ck, true).is_ok());

        let mut ck = state.to_checkpoint();
        ck.score_net.weights[0].pop();
        assert!(TrainState::from_checkpoint(&ck, false).is_err());

        let mut ck = state.to_checkpoint();
        ck.adam_score.m[0].push(0.0);
        assert!(TrainState::from_checkpoint(&ck, false).is_err());
    }

    #[test]
    fn non_finite_never_persisted() {
        let dir = tempfile::tempdir().unwrap();
        let state = TrainState::new(&tiny_config(), 3).unwrap();
        let mut ck = state.to_checkpoint();
        ck.consistency_net.biases[0][0] = f64::NAN;
        let path = dir.path().join("nan.json");
        assert!(matches!(save_checkpoint(&ck, &path), Err(Error::NonFinite { .. })));
        assert!(!path.exists());
    }

    #[test]
    fn non_finite_batch_aborts_with_diagnostic() {
        let mut state = TrainState::new(&tiny_config(), 3).unwrap();
        let batch = TrainBatch::new(vec![PoseVec([f64::NAN; 5])], vec![vec![1.0, 0.0, 0.0]]).unwrap();
        match state.train_step(&batch) {
            Err(Error::NonFinite { step, detail }) => {
                assert_eq!(step, 0);
                assert!(detail.contains("|phi|"), "{detail}");
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_epochs_writes_initial_checkpoint_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_config()
        };
        let toy = GaussianToy::standard(16);
        let out = fit(&cfg, &toy, dir.path(), None).unwrap();
        assert_eq!(out.steps_run, 0);
        assert_eq!(fs::read_to_string(&out.log).unwrap(), format!("{LOG_HEADER}\n"));
        let fresh = TrainState::new(&cfg, 3).unwrap();
        let loaded = TrainState::load(&out.last_checkpoint).unwrap();
        assert_eq!(loaded.score, fresh.score);
        assert_eq!(loaded.consistency, fresh.consistency);
        assert!(out.best_checkpoint.exists());
    }

    #[test]
    fn ema_target_never_receives_gradient() {
        let mut state = TrainState::new(&tiny_config(), 3).unwrap();
        let toy = GaussianToy::standard(8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let (x, y) = toy.draw(0, &mut rng).unwrap();
            let batch = TrainBatch::new(vec![x], vec![y]).unwrap();
            let before = state.target.clone();
            let online_before = state.consistency.clone();
            state.train_step(&batch).unwrap();
            // θ* moves exactly by the EMA rule from its previous value.
            let mut expect = before;
            expect.update(&state.consistency).unwrap();
            assert_eq!(expect, state.target);
            assert_ne!(online_before, state.consistency);
            assert!(!state.target.net().inner().trunk().has_tape());
        }
    }

    #[test]
    fn ema_gap_shrinks_when_online_frozen() {
        let state = TrainState::new(&tiny_config(), 3).unwrap();
        let mut online = state.consistency.clone();
        for s in online.inner_mut().trunk_mut().param_slices_mut() {
            s.iter_mut().for_each(|v| *v += 0.5);
        }
        let mut target = EmaCopy::new(&state.consistency, 0.9).unwrap();
        let gap = |t: &EmaCopy| {
            let a = t.net().inner().trunk().param_slices();
            let b = online.inner().trunk().param_slices();
            a.iter()
                .zip(&b)
                .flat_map(|(x, y)| x.iter().zip(y.iter()).map(|(p, q)| (p - q).powi(2)))
                .sum::<f64>()
                .sqrt()
        };
        let mut prev = gap(&target);
        for _ in 0..20 {
            target.update(&online).unwrap();
            let g = gap(&target);
            assert!(g < prev);
            assert!((g - 0.9 * prev).abs() < 1e-9);
            prev = g;
        }
    }

    #[test]
    fn runs_are_bit_identical() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let toy = GaussianToy::standard(40);
        fit(&tiny_config(), &toy, a.path(), None).unwrap();
        fit(&tiny_config(), &toy, b.path(), None).unwrap();
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, TRAIN_LOG] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_is_bit_exact() {
        let full = tempfile::tempdir().unwrap();
        let part = tempfile::tempdir().unwrap();
        let toy = GaussianToy::standard(40);
        let cfg = tiny_config();
        fit(&cfg, &toy, full.path(), None).unwrap();

        // Interrupt mid-run, then continue from the written checkpoint.
        let opts = FitOptions {
            resume: None,
            stop_at: Some(7),
        };
        fit_with(&cfg, &toy, part.path(), opts).unwrap();
        let mid = TrainState::load(&part.path().join(LAST_CHECKPOINT)).unwrap();
        assert_eq!(mid.step, 7);
        fit(&cfg, &toy, part.path(), Some(mid)).unwrap();
        for f in [LAST_CHECKPOINT, BEST_CHECKPOINT, TRAIN_LOG] {
            assert_eq!(fs::read(full.path().join(f)).unwrap(), fs::read(part.path().join(f)).unwrap(), "{f}");
        }
    }

    #[test]
    fn resume_rejects_other_config() {
        let dir = tempfile::tempdir().unwrap();
        let toy = GaussianToy::standard(16);
        let state = TrainState::new(&tiny_config(), 3).unwrap();
        let other = TrainConfig {
            seed: 99,
            ..tiny_config()
        };
        assert!(matches!(fit(&other, &toy, dir.path(), Some(state)), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 1, 0);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 1, 0));
        assert_ne!(a, epoch_order(50, 1, 1));
        assert_eq!(steps_per_epoch(10, 4), 3);
        let cfg = TrainConfig {
            epochs: 5,
            batch_size: 4,
            max_steps: 7,
            ..TrainConfig::default()
        };
        assert_eq!(total_steps(&cfg, 10), 7);
    }
}
