use serde::{Deserialize, Serialize};

use super::{DiffusionError, Result};
use crate::tensor::Tensor;

/// Default cosine-schedule offset.
pub const COSINE_OFFSET: f64 = 0.008;

const MAX_BETA: f64 = 0.999;

/// Per-timestep noise tables. Index `t = 0` is the clean state and
/// `t = T - 1` the noisiest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub timesteps: usize,
    pub alpha_bar: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Cosine schedule: `alpha_bar[t] = f(t) / f(0)` with
/// `f(t) = cos^2(((t/T + s) / (1 + s)) * pi/2)`.
///
/// `beta[t] = 1 - alpha_bar[t] / alpha_bar[t-1]`, clipped to 0.999. The
/// same recurrence extended one step back through `f(-1)` defines
/// `beta[0]`, which keeps every beta strictly positive.
pub fn cosine_schedule(timesteps: usize, s: f64) -> Result<NoiseSchedule> {
    if timesteps < 2 {
        return Err(DiffusionError::Schedule(format!(
            "need at least 2 timesteps, got {timesteps}"
        )));
    }
    let big_t = timesteps as f64;
    let f = |t: f64| {
        let x = ((t / big_t + s) / (1.0 + s)) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    };
    let f0 = f(0.0);
    let alpha_bar: Vec<f64> = (0..timesteps).map(|t| f(t as f64) / f0).collect();
    let mut beta = Vec::with_capacity(timesteps);
    beta.push((1.0 - f0 / f(-1.0)).min(MAX_BETA));
    for t in 1..timesteps {
        beta.push((1.0 - alpha_bar[t] / alpha_bar[t - 1]).min(MAX_BETA));
    }
    Ok(NoiseSchedule {
        timesteps,
        alpha_bar,
        beta,
    })
}

impl NoiseSchedule {
    pub fn len(&self) -> usize {
        self.timesteps
    }

    pub fn is_empty(&self) -> bool {
        self.timesteps == 0
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t >= self.timesteps {
            return Err(DiffusionError::TimestepOutOfRange {
                t,
                timesteps: self.timesteps,
            });
        }
        Ok(())
    }

    /// Maps a timestep expressed on a 1000-step axis onto this schedule:
    /// `round(t * T / 1000)`, kept inside `[0, T)`.
    pub fn scale_from_thousand(&self, t: usize) -> usize {
        let scaled = (t as f64 * self.timesteps as f64 / 1000.0).round() as usize;
        scaled.min(self.timesteps - 1)
    }
}

/// Forward noising `sqrt(alpha_bar[t]) * x0 + sqrt(1 - alpha_bar[t]) * eps`.
pub fn q_sample(x0: &Tensor<f32>, t: usize, eps: &Tensor<f32>, sched: &NoiseSchedule) -> Result<Tensor<f32>> {
    sched.check_timestep(t)?;
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!(
            "q_sample: x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let (a, b) = signal_noise(sched, t);
    let data = x0
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&x, &e)| a * x + b * e)
        .collect();
    Ok(Tensor::new(x0.shape().to_vec(), data)?)
}

/// `(sqrt(alpha_bar[t]), sqrt(1 - alpha_bar[t]))` in `f32`.
pub(crate) fn signal_noise(sched: &NoiseSchedule, t: usize) -> (f32, f32) {
    let ab = sched.alpha_bar[t];
    (ab.sqrt() as f32, (1.0 - ab).sqrt() as f32)
}
