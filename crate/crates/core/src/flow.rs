//! Probability-flow ODE `dx/dt = -½γ(t)[x + ∇log p(x_t|y)]`, its Euler
//! discretization, the few-step consistency sampler, and a many-step
//! ancestral baseline.

use std::time::{Duration, Instant};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::PoseVec;
use crate::network::{ConsistencyNet, EmaCopy, ScoreNet};
use crate::schedule::{standard_normal, NoiseSchedule, TimeGrid};

/// Anything that can stand in for `∇log p(x_t | y)`.
pub trait ScoreField {
    fn score_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>>;

    fn score(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        Ok(self.score_batch(std::slice::from_ref(x), &[t], &[y])?[0])
    }
}

impl ScoreField for ScoreNet {
    fn score_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        self.forward_batch(xs, ts, ys)
    }
}

/// Score of the standard-normal marginal, `-x`. The PF-ODE is stationary
/// under it.
#[derive(Debug, Clone, Copy, Default)]
pub struct StandardNormalField;

impl ScoreField for StandardNormalField {
    fn score_batch(&self, xs: &[PoseVec], _ts: &[f64], _ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        Ok(xs.iter().map(|x| x.scale(-1.0)).collect())
    }
}

/// Exact marginal score for data `x_0 | y ~ N(m_y, σ²I)`.
///
/// Conditions are matched exactly against the registered table.
#[derive(Debug, Clone)]
pub struct GaussianField {
    schedule: NoiseSchedule,
    sigma: f64,
    components: Vec<(Vec<f64>, PoseVec)>,
}

impl GaussianField {
    pub fn new(schedule: NoiseSchedule, sigma: f64, components: Vec<(Vec<f64>, PoseVec)>) -> Self {
        Self {
            schedule,
            sigma,
            components,
        }
    }

    /// A single component that ignores the condition.
    pub fn unconditional(schedule: NoiseSchedule, mean: PoseVec, sigma: f64) -> Self {
        Self::new(schedule, sigma, vec![(Vec::new(), mean)])
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn mean_for(&self, y: &[f64]) -> Result<PoseVec> {
        if let [(key, m)] = self.components.as_slice() {
            if key.is_empty() {
                return Ok(*m);
            }
        }
        self.components
            .iter()
            .find(|(key, _)| key.as_slice() == y)
            .map(|(_, m)| *m)
            .ok_or_else(|| Error::invalid("condition not registered with the Gaussian field"))
    }

    /// Marginal variance `α σ² + 1 − α` of `x_t | y`.
    pub fn marginal_var(&self, t: f64) -> Result<f64> {
        let a = self.schedule.alpha(t)?;
        Ok(a * self.sigma * self.sigma + (1.0 - a))
    }

    /// `E[x_0 | x_t, y]`.
    pub fn posterior_mean(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        let m = self.mean_for(y)?;
        let a = self.schedule.alpha(t)?;
        let gain = self.sigma * self.sigma * a.sqrt() / self.marginal_var(t)?;
        Ok(m + (*x - m.scale(a.sqrt())).scale(gain))
    }

    /// Closed-form PF-ODE transport of `x` from `t_from` to `t_to`.
    pub fn exact_flow(&self, x: &PoseVec, t_from: f64, t_to: f64, y: &[f64]) -> Result<PoseVec> {
        let m = self.mean_for(y)?;
        let (a0, a1) = (self.schedule.alpha(t_from)?, self.schedule.alpha(t_to)?);
        let xi = (*x - m.scale(a0.sqrt())).scale(1.0 / self.marginal_var(t_from)?.sqrt());
        Ok(m.scale(a1.sqrt()) + xi.scale(self.marginal_var(t_to)?.sqrt()))
    }
}

impl ScoreField for GaussianField {
    fn score_batch(&self, xs: &[PoseVec], ts: &[f64], ys: &[&[f64]]) -> Result<Vec<PoseVec>> {
        xs.iter()
            .zip(ts)
            .zip(ys)
            .map(|((x, &t), y)| {
                let m = self.mean_for(y)?;
                let a = self.schedule.alpha(t)?;
                let var = self.marginal_var(t)?;
                Ok((*x - m.scale(a.sqrt())).scale(-1.0 / var))
            })
            .collect()
    }
}

fn euler_update(x: &PoseVec, score: &PoseVec, gamma: f64, dt: f64) -> PoseVec {
    *x - (*x + *score).scale(0.5 * gamma * dt)
}

fn check_step(t_from: f64, t_to: f64, s: &NoiseSchedule) -> Result<()> {
    if !(s.epsilon() <= t_to && t_to <= t_from && t_from <= s.horizon()) {
        return Err(Error::invalid(format!(
            "Euler step needs epsilon <= t_to <= t_from <= T, got t_from={t_from} t_to={t_to}"
        )));
    }
    Ok(())
}

/// One Euler step of the PF-ODE, backward in time:
/// `x̂ = x − ½γ(t_from)(t_to − t_from)(x + score(x, t_from, y))`.
pub fn euler_step<F: ScoreField + ?Sized>(
    field: &F,
    x: &PoseVec,
    t_from: f64,
    t_to: f64,
    y: &[f64],
    s: &NoiseSchedule,
) -> Result<PoseVec> {
    check_step(t_from, t_to, s)?;
    let score = field.score(x, t_from, y)?;
    Ok(euler_update(x, &score, s.gamma(t_from)?, t_to - t_from))
}

/// Row-wise [`euler_step`] with a single batched field evaluation.
pub fn euler_step_batch<F: ScoreField + ?Sized>(
    field: &F,
    xs: &[PoseVec],
    t_from: &[f64],
    t_to: &[f64],
    ys: &[&[f64]],
    s: &NoiseSchedule,
) -> Result<Vec<PoseVec>> {
    if t_to.len() != xs.len() {
        return Err(Error::invalid("Euler batch: time arrays differ in length"));
    }
    for (&a, &b) in t_from.iter().zip(t_to) {
        check_step(a, b, s)?;
    }
    let scores = field.score_batch(xs, t_from, ys)?;
    xs.iter()
        .zip(&scores)
        .zip(t_from.iter().zip(t_to))
        .map(|((x, sc), (&a, &b))| Ok(euler_update(x, sc, s.gamma(a)?, b - a)))
        .collect()
}

/// States along a backward PF-ODE solve, aligned with strictly decreasing
/// times.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PoseVec>,
}

impl Trajectory {
    pub fn terminal(&self) -> &PoseVec {
        self.states.last().expect("trajectory is never empty")
    }

    /// CSV dump: header `t,x0,x1,x2,x3,x4`, one row per grid point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t,x0,x1,x2,x3,x4\n");
        for (t, x) in self.times.iter().zip(&self.states) {
            out.push_str(&t.to_string());
            for v in x.0 {
                out.push(',');
                out.push_str(&v.to_string());
            }
            out.push('\n');
        }
        out
    }
}

/// Integrates the PF-ODE from `t_N = T` down to `t_1 = ε` with Euler steps.
pub fn solve_pf_ode<F: ScoreField + ?Sized>(
    field: &F,
    x_t: &PoseVec,
    grid: &TimeGrid,
    y: &[f64],
    s: &NoiseSchedule,
) -> Result<Trajectory> {
    let pts = grid.points();
    let mut times = Vec::with_capacity(pts.len());
    let mut states = Vec::with_capacity(pts.len());
    let mut x = *x_t;
    times.push(pts[pts.len() - 1]);
    states.push(x);
    for k in (0..pts.len() - 1).rev() {
        x = euler_step(field, &x, pts[k + 1], pts[k], y, s)?;
        times.push(pts[k]);
        states.push(x);
    }
    Ok(Trajectory { times, states })
}

/// Anything usable as `f(x_t, t, y)` inside the sampler.
pub trait ConsistencyFn {
    fn evaluate(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec>;
}

impl ConsistencyFn for ConsistencyNet {
    fn evaluate(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        self.forward(x, t, y)
    }
}

impl ConsistencyFn for EmaCopy {
    fn evaluate(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        Ok(self.forward_batch(std::slice::from_ref(x), &[t], &[y])?[0])
    }
}

/// Denoiser via the Tweedie posterior mean of an analytic Gaussian; the
/// ideal consistency model for Gaussian data under the detection objective.
impl ConsistencyFn for GaussianField {
    fn evaluate(&self, x: &PoseVec, t: f64, y: &[f64]) -> Result<PoseVec> {
        if t <= self.schedule.epsilon() {
            return Ok(*x);
        }
        self.posterior_mean(x, t, y)
    }
}

/// Output of [`sample_consistency`].
#[derive(Debug, Clone)]
pub struct ConsistencySample {
    pub pose: PoseVec,
    /// Wall time of each network evaluation, in call order.
    pub step_times: Vec<Duration>,
}

impl ConsistencySample {
    pub fn evaluations(&self) -> usize {
        self.step_times.len()
    }
}

/// Number of model evaluations the `P`-step sampler performs.
pub fn consistency_calls(p: usize) -> usize {
    1 + p.saturating_sub(2)
}

/// Few-step multistep consistency sampling.
///
/// Inference times `t_1 = ε < … < t_P = T` are spaced uniformly. The chain
/// starts from `x_T ~ N(0, I)`, predicts `x_0 = f(x_T, T, y)`, then for
/// `i = P−1` down to `2` re-noises to `t_i` and predicts again. With `P = 2`
/// the refinement loop is empty.
pub fn sample_consistency<F: ConsistencyFn + ?Sized, R: Rng + ?Sized>(
    f: &F,
    y: &[f64],
    steps: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<ConsistencySample> {
    if steps < 1 {
        return Err(Error::invalid("consistency sampling needs at least one step"));
    }
    let times: Vec<f64> = if steps == 1 {
        vec![s.horizon()]
    } else {
        s.uniform_grid(steps)?.points().to_vec()
    };
    let mut step_times = Vec::with_capacity(consistency_calls(steps));
    let x_t = standard_normal(rng);
    let start = Instant::now();
    let mut x0 = f.evaluate(&x_t, s.horizon(), y)?;
    step_times.push(start.elapsed());
    for i in (2..steps).rev() {
        let t = times[i - 1];
        let start = Instant::now();
        let x = s.sample_xt(t, &x0, rng)?;
        x0 = f.evaluate(&x, t, y)?;
        step_times.push(start.elapsed());
    }
    Ok(ConsistencySample {
        pose: x0,
        step_times,
    })
}

/// Ancestral sampling over the uniform grid `τ_k = kT/steps`, converting the
/// score to a noise prediction `ε̂ = −√(1−α)·score`.
pub fn sample_ddpm_baseline<F: ScoreField + ?Sized, R: Rng + ?Sized>(
    field: &F,
    y: &[f64],
    steps: usize,
    s: &NoiseSchedule,
    rng: &mut R,
) -> Result<PoseVec> {
    if steps < 1 {
        return Err(Error::invalid("ancestral sampling needs at least one step"));
    }
    let tau = |k: usize| {
        if k == steps {
            s.horizon()
        } else {
            s.horizon() * k as f64 / steps as f64
        }
    };
    let mut x = standard_normal(rng);
    for k in (1..=steps).rev() {
        let (t, t_prev) = (tau(k), tau(k - 1));
        let ab = s.alpha(t)?;
        let ab_prev = s.alpha(t_prev)?;
        let score = field.score(&x, t, y)?;
        let eps_hat = score.scale(-(1.0 - ab).sqrt());
        let x0_hat = (x - eps_hat.scale((1.0 - ab).sqrt())).scale(1.0 / ab.sqrt());
        let a_k = ab / ab_prev;
        let beta = 1.0 - a_k;
        let mean = x0_hat.scale(ab_prev.sqrt() * beta / (1.0 - ab))
            + x.scale(a_k.sqrt() * (1.0 - ab_prev) / (1.0 - ab));
        if k > 1 {
            let var = (beta * (1.0 - ab_prev) / (1.0 - ab)).max(0.0);
            x = mean + standard_normal(rng).scale(var.sqrt());
        } else {
            x = mean;
        }
    }
    Ok(x)
}
