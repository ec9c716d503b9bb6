//! Continuous-time variance-preserving noise schedule.
//!
//! The forward SDE `dx = -½γ(t)x dt + √γ(t) dw` has the Gaussian kernel
//! `x_t | x_0 ~ N(√α(t)·x_0, (1-α(t))I)` with `α(t) = exp(ρ(t))` and
//! `ρ(t) = -∫₀ᵗ γ(s) ds`. Here `γ` is a linear ramp, so `ρ` is closed-form.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{PoseVec, POSE_DIM};

/// Terminal signal level a schedule must fall below to count as pure noise.
pub const TERMINAL_ALPHA_MAX: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    gamma_min: f64,
    gamma_max: f64,
    horizon: f64,
    epsilon: f64,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::new(1e-4, 2e-2, 1000.0, 1.0).expect("default schedule is valid")
    }
}

impl NoiseSchedule {
    pub fn new(gamma_min: f64, gamma_max: f64, horizon: f64, epsilon: f64) -> Result<Self> {
        let finite = [gamma_min, gamma_max, horizon, epsilon]
            .iter()
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("schedule parameters must be finite"));
        }
        if !(0.0 < epsilon && epsilon < horizon) {
            return Err(Error::invalid(format!(
                "need 0 < epsilon < T, got epsilon={epsilon} T={horizon}"
            )));
        }
        if !(0.0 < gamma_min && gamma_min <= gamma_max) {
            return Err(Error::invalid(format!(
                "need 0 < gamma_min <= gamma_max, got {gamma_min}, {gamma_max}"
            )));
        }
        let s = Self {
            gamma_min,
            gamma_max,
            horizon,
            epsilon,
        };
        let terminal = s.alpha_unchecked(horizon);
        if terminal >= TERMINAL_ALPHA_MAX {
            return Err(Error::invalid(format!(
                "alpha(T) = {terminal:.3e} is not near pure noise (must be < {TERMINAL_ALPHA_MAX:e})"
            )));
        }
        Ok(s)
    }

    pub fn gamma_min(&self) -> f64 {
        self.gamma_min
    }

    pub fn gamma_max(&self) -> f64 {
        self.gamma_max
    }

    /// The horizon `T`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// The boundary time `ε`.
    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    fn check(&self, t: f64) -> Result<()> {
        if (0.0..=self.horizon).contains(&t) {
            Ok(())
        } else {
            Err(Error::Domain {
                t,
                horizon: self.horizon,
            })
        }
    }

    fn gamma_unchecked(&self, t: f64) -> f64 {
        self.gamma_min + (self.gamma_max - self.gamma_min) * t / self.horizon
    }

    fn rho_unchecked(&self, t: f64) -> f64 {
        -(self.gamma_min * t + (self.gamma_max - self.gamma_min) * t * t / (2.0 * self.horizon))
    }

    fn alpha_unchecked(&self, t: f64) -> f64 {
        self.rho_unchecked(t).exp()
    }

    pub fn gamma(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.gamma_unchecked(t))
    }

    pub fn rho(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.rho_unchecked(t))
    }

    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(self.alpha_unchecked(t))
    }

    /// Loss weighting `λ(t)`; uniform.
    pub fn weight(&self, t: f64) -> Result<f64> {
        self.check(t)?;
        Ok(1.0)
    }

    /// Mean and isotropic standard deviation of `x_t | x_0`.
    pub fn perturbation_params(&self, t: f64, x0: &PoseVec) -> Result<(PoseVec, f64)> {
        let alpha = self.alpha(t)?;
        Ok((x0.scale(alpha.sqrt()), (1.0 - alpha).max(0.0).sqrt()))
    }

    /// `√α·x0 + √(1-α)·z` for a caller-supplied noise vector.
    pub fn perturb(&self, t: f64, x0: &PoseVec, z: &PoseVec) -> Result<PoseVec> {
        let (mean, std) = self.perturbation_params(t, x0)?;
        if std == 0.0 {
            return Ok(mean);
        }
        Ok(mean + z.scale(std))
    }

    /// Draws `x_t ~ p(x_t | x_0)` using standard-normal noise from `rng`.
    pub fn sample_xt<R: Rng + ?Sized>(&self, t: f64, x0: &PoseVec, rng: &mut R) -> Result<PoseVec> {
        self.check(t)?;
        let z = standard_normal(rng);
        self.perturb(t, x0, &z)
    }

    /// `n` points uniformly spaced on `[ε, T]` with exact endpoints.
    pub fn uniform_grid(&self, n: usize) -> Result<TimeGrid> {
        if n < 2 {
            return Err(Error::invalid(format!("grid needs at least 2 points, got {n}")));
        }
        let span = self.horizon - self.epsilon;
        let last = (n - 1) as f64;
        let mut points: Vec<f64> = (0..n)
            .map(|k| self.epsilon + span * k as f64 / last)
            .collect();
        points[0] = self.epsilon;
        points[n - 1] = self.horizon;
        TimeGrid::new(points, self)
    }
}

/// Draws a standard-normal vector.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> PoseVec {
    let mut z = [0.0; POSE_DIM];
    for v in z.iter_mut() {
        *v = rng.sample(StandardNormal);
    }
    PoseVec(z)
}

/// Strictly increasing discretization `ε = t_1 < … < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>, schedule: &NoiseSchedule) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::invalid("grid needs at least 2 points"));
        }
        if points[0] != schedule.epsilon() || *points.last().unwrap() != schedule.horizon() {
            return Err(Error::invalid("grid endpoints must be exactly epsilon and T"));
        }
        if points.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("grid must be strictly increasing"));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// 1-based access matching the `t_1 … t_N` convention.
    pub fn t(&self, i: usize) -> f64 {
        self.points[i - 1]
    }
}
