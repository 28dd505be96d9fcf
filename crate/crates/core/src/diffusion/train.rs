use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::schedule::{signal_noise, NoiseSchedule};
use super::unet::{UNet, UNetConfig};
use super::{DiffusionError, Result};
use crate::faces::Dataset;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Steps between progress log lines; 0 disables them.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1e-3,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: UNet,
    /// Batch loss at every step.
    pub losses: Vec<f32>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    step: i32,
}

impl Adam {
    fn new(model: &UNet) -> Self {
        let zeros = || model.params().iter().map(|p| vec![0.0; p.numel()]).collect();
        Adam {
            m: zeros(),
            v: zeros(),
            step: 0,
        }
    }

    fn update(&mut self, model: &mut UNet, grads: &[Vec<f32>], cfg: &TrainConfig) {
        self.step += 1;
        let (b1, b2) = (cfg.beta1 as f32, cfg.beta2 as f32);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        let (lr, eps) = (cfg.lr as f32, cfg.adam_eps as f32);
        for (((p, g), m), v) in model.params_mut().iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
}

/// Draws a training batch: images, per-example timesteps in `[1, T)`,
/// noise, and the noised inputs.
fn draw_batch(
    data: &Dataset,
    sched: &NoiseSchedule,
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, Vec<usize>, Tensor<f32>)> {
    let img = data.images[0].shape().to_vec();
    let per: usize = img.iter().product();
    let mut x_t = Vec::with_capacity(batch * per);
    let mut ts = Vec::with_capacity(batch);
    let noise = Tensor::randn(&[batch * per], rng);
    for b in 0..batch {
        let idx = rng.random_range(0..data.len());
        let t = rng.random_range(1..sched.timesteps);
        let (a, s) = signal_noise(sched, t);
        let e = &noise.data()[b * per..(b + 1) * per];
        x_t.extend(data.images[idx].data().iter().zip(e).map(|(&x, &n)| a * x + s * n));
        ts.push(t);
    }
    let mut shape = vec![batch];
    shape.extend(img);
    let eps = noise.reshape(&shape)?;
    Ok((Tensor::new(shape, x_t)?, ts, eps))
}

/// Trains a fresh model on the noise-prediction objective with Adam.
/// Fully determined by `seed`.
pub fn train(
    data: &Dataset,
    model_cfg: &UNetConfig,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(DiffusionError::EmptyDataset);
    }
    if cfg.batch_size == 0 {
        return Err(DiffusionError::Config("batch_size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = UNet::new(model_cfg.clone(), rng.random())?;
    let mut opt = Adam::new(&model);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (x_t, ts, eps) = draw_batch(data, sched, cfg.batch_size, &mut rng)?;
        let (loss, grads) = model.loss_and_grads(&x_t, &ts, &eps)?;
        if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
            return Err(DiffusionError::Diverged { step, loss });
        }
        opt.update(&mut model, &grads, cfg);
        losses.push(loss);
        if cfg.log_every > 0 && (step + 1) % cfg.log_every == 0 {
            let w = &losses[losses.len().saturating_sub(cfg.log_every)..];
            log::info!("step {}: mean loss {:.4}", step + 1, w.iter().sum::<f32>() / w.len() as f32);
        }
    }
    Ok(TrainOutcome { model, losses })
}

pub fn write_loss_curve(losses: &[f32], path: &Path) -> std::io::Result<()> {
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    std::fs::write(path, out)
}
