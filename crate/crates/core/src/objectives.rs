//! Training objectives: denoising score matching for `s_φ`, and the
//! consistency and detection losses for `f_θ`.
//!
//! Each loss has a `*_with` form taking explicit random draws, and a
//! convenience form that draws them from a stream. Gradients are returned by
//! value and only ever cover the network being optimized; the score network
//! and EMA target are borrowed immutably where they act as fixed teachers.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::euler_step_batch;
use crate::geometry::PoseVec;
use crate::network::{ConsistencyNet, EmaCopy, Gradients, ScoreNet};
use crate::schedule::{standard_normal, NoiseSchedule, TimeGrid};

/// Clean states and their conditions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainBatch {
    pub x0: Vec<PoseVec>,
    pub conds: Vec<Vec<f64>>,
}

impl TrainBatch {
    pub fn new(x0: Vec<PoseVec>, conds: Vec<Vec<f64>>) -> Result<Self> {
        if x0.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        if x0.len() != conds.len() {
            return Err(Error::invalid("states and conditions differ in count"));
        }
        Ok(Self { x0, conds })
    }

    pub fn len(&self) -> usize {
        self.x0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x0.is_empty()
    }

    pub fn cond_refs(&self) -> Vec<&[f64]> {
        self.conds.iter().map(Vec::as_slice).collect()
    }

    fn check(&self) -> Result<()> {
        if self.x0.is_empty() {
            return Err(Error::invalid("training batch is empty"));
        }
        if self.x0.len() != self.conds.len() {
            return Err(Error::invalid("states and conditions differ in count"));
        }
        Ok(())
    }
}

/// Continuous time and noise for one score-matching sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeDraw {
    pub t: f64,
    pub z: PoseVec,
}

/// 1-based grid index and noise for one consistency/detection sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridDraw {
    pub index: usize,
    pub z: PoseVec,
}

pub fn draw_times<R: Rng + ?Sized>(n: usize, s: &NoiseSchedule, rng: &mut R) -> Vec<TimeDraw> {
    (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..=s.horizon());
            TimeDraw {
                t,
                z: standard_normal(rng),
            }
        })
        .collect()
}

/// Indices uniform on `1..=max_index`.
pub fn draw_indices<R: Rng + ?Sized>(n: usize, max_index: usize, rng: &mut R) -> Vec<GridDraw> {
    (0..n)
        .map(|_| {
            let index = rng.random_range(1..=max_index);
            GridDraw {
                index,
                z: standard_normal(rng),
            }
        })
        .collect()
}

fn mean_sq_residual(
    pred: &[PoseVec],
    target: &[PoseVec],
    weights: &[f64],
) -> (f64, Vec<PoseVec>) {
    let b = pred.len() as f64;
    let mut loss = 0.0;
    let mut upstream = Vec::with_capacity(pred.len());
    for ((p, t), &w) in pred.iter().zip(target).zip(weights) {
        let r = *p - *t;
        loss += w * r.0.iter().map(|v| v * v).sum::<f64>();
        upstream.push(r.scale(2.0 * w / b));
    }
    (loss / b, upstream)
}

/// Conditional denoising target `∇log p(x_t | x_0) = −(x_t − √α x_0)/(1−α)`,
/// with the variance floored at `1 − α(ε)`.
pub fn denoising_target(s: &NoiseSchedule, t: f64, x_t: &PoseVec, x0: &PoseVec) -> Result<PoseVec> {
    let alpha = s.alpha(t)?;
    let floor = 1.0 - s.alpha(s.epsilon())?;
    let var = (1.0 - alpha).max(floor);
    Ok((*x_t - x0.scale(alpha.sqrt())).scale(-1.0 / var))
}

/// Score-matching loss and its gradient with respect to `φ`.
pub fn score_loss_with(
    net: &mut ScoreNet,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    draws: &[TimeDraw],
) -> Result<(f64, Gradients)> {
    batch.check()?;
    if draws.len() != batch.len() {
        return Err(Error::invalid("one draw per batch element required"));
    }
    let mut xs = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (x0, d) in batch.x0.iter().zip(draws) {
        let x_t = s.perturb(d.t, x0, &d.z)?;
        targets.push(denoising_target(s, d.t, &x_t, x0)?);
        weights.push(s.weight(d.t)?);
        xs.push(x_t);
    }
    let ts: Vec<f64> = draws.iter().map(|d| d.t).collect();
    let pred = net.forward_recorded(&xs, &ts, &batch.cond_refs())?;
    let (loss, upstream) = mean_sq_residual(&pred, &targets, &weights);
    let grads = net.backward(&upstream)?;
    Ok((loss, grads))
}

pub fn score_loss<R: Rng + ?Sized>(
    net: &mut ScoreNet,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    let draws = draw_times(batch.len(), s, rng);
    score_loss_with(net, batch, s, &draws)
}

fn check_grid(grid: &TimeGrid, s: &NoiseSchedule) -> Result<()> {
    if grid.len() < 2 {
        return Err(Error::invalid("time grid needs at least two points"));
    }
    if grid.t(1) != s.epsilon() || grid.t(grid.len()) != s.horizon() {
        return Err(Error::invalid("time grid does not match the schedule"));
    }
    Ok(())
}

/// Consistency-distillation loss: `f_θ(x_{t_{i+1}})` against the EMA target
/// at the Euler-estimated `x̂_{t_i}`. Gradients flow into `θ` only.
#[allow(clippy::too_many_arguments)]
pub fn consistency_loss_with(
    f: &mut ConsistencyNet,
    f_star: &EmaCopy,
    s_net: &ScoreNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    draws: &[GridDraw],
) -> Result<(f64, Gradients)> {
    batch.check()?;
    check_grid(grid, s)?;
    if draws.len() != batch.len() {
        return Err(Error::invalid("one draw per batch element required"));
    }
    let n = grid.len();
    let mut t_next = Vec::with_capacity(batch.len());
    let mut t_cur = Vec::with_capacity(batch.len());
    let mut x_next = Vec::with_capacity(batch.len());
    for (x0, d) in batch.x0.iter().zip(draws) {
        if !(1..n).contains(&d.index) {
            return Err(Error::invalid(format!(
                "consistency index {} outside 1..{}",
                d.index,
                n - 1
            )));
        }
        let (ti, tn) = (grid.t(d.index), grid.t(d.index + 1));
        x_next.push(s.perturb(tn, x0, &d.z)?);
        t_cur.push(ti);
        t_next.push(tn);
    }
    let conds = batch.cond_refs();
    let x_hat = euler_step_batch(s_net, &x_next, &t_next, &t_cur, &conds, s)?;
    let target = f_star.forward_batch(&x_hat, &t_cur, &conds)?;
    let weights = t_cur
        .iter()
        .map(|&t| s.weight(t))
        .collect::<Result<Vec<_>>>()?;
    let pred = f.forward_recorded(&x_next, &t_next, &conds)?;
    let (loss, upstream) = mean_sq_residual(&pred, &target, &weights);
    let grads = f.backward(&upstream)?;
    Ok((loss, grads))
}

pub fn consistency_loss<R: Rng + ?Sized>(
    f: &mut ConsistencyNet,
    f_star: &EmaCopy,
    s_net: &ScoreNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    check_grid(grid, s)?;
    let draws = draw_indices(batch.len(), grid.len() - 1, rng);
    consistency_loss_with(f, f_star, s_net, grid, batch, s, &draws)
}

/// Detection loss `‖f_θ(x_{t_i}, t_i, y) − x_0‖²`.
pub fn detection_loss_with(
    f: &mut ConsistencyNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    draws: &[GridDraw],
) -> Result<(f64, Gradients)> {
    batch.check()?;
    check_grid(grid, s)?;
    if draws.len() != batch.len() {
        return Err(Error::invalid("one draw per batch element required"));
    }
    let n = grid.len();
    let mut ts = Vec::with_capacity(batch.len());
    let mut xs = Vec::with_capacity(batch.len());
    let mut weights = Vec::with_capacity(batch.len());
    for (x0, d) in batch.x0.iter().zip(draws) {
        if !(1..=n).contains(&d.index) {
            return Err(Error::invalid(format!(
                "detection index {} outside 1..{n}",
                d.index
            )));
        }
        let t = grid.t(d.index);
        xs.push(s.perturb(t, x0, &d.z)?);
        weights.push(s.weight(t)?);
        ts.push(t);
    }
    let pred = f.forward_recorded(&xs, &ts, &batch.cond_refs())?;
    let (loss, upstream) = mean_sq_residual(&pred, &batch.x0, &weights);
    let grads = f.backward(&upstream)?;
    Ok((loss, grads))
}

pub fn detection_loss<R: Rng + ?Sized>(
    f: &mut ConsistencyNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<(f64, Gradients)> {
    batch.check()?;
    check_grid(grid, s)?;
    let draws = draw_indices(batch.len(), grid.len(), rng);
    detection_loss_with(f, grid, batch, s, &draws)
}

/// Per-step loss values. `total` is the `θ` objective; the score loss is
/// optimized separately and reported alongside.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub score: f64,
    pub consistency: f64,
    pub detection: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(score: f64, consistency: f64, detection: f64) -> Self {
        Self {
            score,
            consistency,
            detection,
            total: consistency + detection,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.score, self.consistency, self.detection, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// The `θ` objective `L_consistency + L_detection` with summed gradients.
#[derive(Debug, Clone)]
pub struct ThetaLoss {
    pub consistency: f64,
    pub detection: f64,
    pub grads: Gradients,
}

impl ThetaLoss {
    pub fn total(&self) -> f64 {
        self.consistency + self.detection
    }
}

/// Consistency and detection draws for one step, in the order they are
/// taken from the stream.
pub fn draw_theta<R: Rng + ?Sized>(
    n: usize,
    grid: &TimeGrid,
    rng: &mut R,
) -> (Vec<GridDraw>, Vec<GridDraw>) {
    let c = draw_indices(n, grid.len() - 1, rng);
    let d = draw_indices(n, grid.len(), rng);
    (c, d)
}

#[allow(clippy::too_many_arguments)]
pub fn total_loss_with(
    f: &mut ConsistencyNet,
    f_star: &EmaCopy,
    s_net: &ScoreNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    consistency_draws: &[GridDraw],
    detection_draws: &[GridDraw],
) -> Result<ThetaLoss> {
    let (consistency, mut grads) =
        consistency_loss_with(f, f_star, s_net, grid, batch, s, consistency_draws)?;
    let (detection, dg) = detection_loss_with(f, grid, batch, s, detection_draws)?;
    grads.add_assign(&dg);
    Ok(ThetaLoss {
        consistency,
        detection,
        grads,
    })
}

pub fn total_loss<R: Rng + ?Sized>(
    f: &mut ConsistencyNet,
    f_star: &EmaCopy,
    s_net: &ScoreNet,
    grid: &TimeGrid,
    batch: &TrainBatch,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<ThetaLoss> {
    batch.check()?;
    check_grid(grid, s)?;
    let (c, d) = draw_theta(batch.len(), grid, rng);
    total_loss_with(f, f_star, s_net, grid, batch, s, &c, &d)
}
