//! Conditional Gaussian toy: `x_0 | y_k ~ N(m_k, σ²I)` for one-hot `y_k`,
//! with analytic marginal score and posterior mean as oracles.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::GaussianField;
use crate::geometry::PoseVec;
use crate::network::ScoreNet;
use crate::schedule::{standard_normal, NoiseSchedule};
use crate::trainer::{TrainState, TrainingSet};

/// Probe points used for the score comparison.
#[derive(Debug, Clone)]
pub struct Probe {
    pub x: PoseVec,
    pub t: f64,
    pub y: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GaussianToy {
    pub means: Vec<PoseVec>,
    pub sigma: f64,
    size: usize,
    probe_count: usize,
}

impl GaussianToy {
    /// Three well-separated conditions with `σ = 0.2`; `size` entries per
    /// epoch, each a fresh draw.
    pub fn standard(size: usize) -> Self {
        Self {
            means: vec![
                PoseVec([0.5, -0.4, 0.3, -0.6, 0.2]),
                PoseVec([-0.5, 0.3, -0.2, 0.1, -0.5]),
                PoseVec([0.1, 0.6, -0.6, 0.5, 0.6]),
            ],
            sigma: 0.2,
            size,
            probe_count: 512,
        }
    }

    pub fn with_probe_count(mut self, n: usize) -> Self {
        self.probe_count = n;
        self
    }

    pub fn conditions(&self) -> usize {
        self.means.len()
    }

    pub fn condition(&self, k: usize) -> Vec<f64> {
        let mut y = vec![0.0; self.means.len()];
        y[k] = 1.0;
        y
    }

    pub fn field(&self, schedule: NoiseSchedule) -> GaussianField {
        let comps = (0..self.means.len())
            .map(|k| (self.condition(k), self.means[k]))
            .collect();
        GaussianField::new(schedule, self.sigma, comps)
    }

    /// Points drawn from the marginal `p_t(x | y)` at `t ~ U[ε, T]`.
    pub fn probes(&self, schedule: &NoiseSchedule, n: usize, seed: u64) -> Result<Vec<Probe>> {
        let field = self.field(*schedule);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let k = i % self.means.len();
                let t = rng.random_range(schedule.epsilon()..=schedule.horizon());
                let a = schedule.alpha(t)?;
                let sd = field.marginal_var(t)?.sqrt();
                let x = self.means[k].scale(a.sqrt()) + standard_normal(&mut rng).scale(sd);
                Ok(Probe {
                    x,
                    t,
                    y: self.condition(k),
                })
            })
            .collect()
    }

    /// `‖s_φ − ∇log p_t‖ / ‖∇log p_t‖`, pooled over the probe set.
    pub fn score_relative_l2(&self, net: &ScoreNet, schedule: &NoiseSchedule, probes: &[Probe]) -> Result<f64> {
        if probes.is_empty() {
            return Err(Error::invalid("probe set is empty"));
        }
        let field = self.field(*schedule);
        let xs: Vec<PoseVec> = probes.iter().map(|p| p.x).collect();
        let ts: Vec<f64> = probes.iter().map(|p| p.t).collect();
        let ys: Vec<&[f64]> = probes.iter().map(|p| p.y.as_slice()).collect();
        let pred = net.forward_batch(&xs, &ts, &ys)?;
        let (mut num, mut den) = (0.0, 0.0);
        for (p, s) in probes.iter().zip(&pred) {
            let truth = crate::flow::ScoreField::score(&field, &p.x, p.t, &p.y)?;
            num += (*s - truth).norm().powi(2);
            den += truth.norm().powi(2);
        }
        Ok((num / den).sqrt())
    }
}

const PROBE_SEED: u64 = 0x7072_6f62;

impl TrainingSet for GaussianToy {
    fn len(&self) -> usize {
        self.size
    }

    fn cond_dim(&self) -> usize {
        self.means.len()
    }

    fn draw(&self, index: usize, rng: &mut ChaCha8Rng) -> Result<(PoseVec, Vec<f64>)> {
        let k = index % self.means.len();
        Ok((self.means[k] + standard_normal(rng).scale(self.sigma), self.condition(k)))
    }

    /// Negated score error, so larger is better.
    fn validate(&self, state: &TrainState) -> Result<Option<f64>> {
        if self.probe_count == 0 {
            return Ok(None);
        }
        let probes = self.probes(&state.schedule, self.probe_count, PROBE_SEED)?;
        Ok(Some(-self.score_relative_l2(&state.score, &state.schedule, &probes)?))
    }

    fn fingerprint(&self) -> String {
        format!("gaussian-toy:{}:{}", self.size, self.sigma)
    }
}
