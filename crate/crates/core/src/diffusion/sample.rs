use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::hooks::HookRegistry;
use super::schedule::{signal_noise, NoiseSchedule};
use super::unet::UNet;
use super::{DiffusionError, Result};
use crate::faces::Dataset;
use crate::tensor::Tensor;

/// Largest batch pushed through the network at once during evaluation.
const EVAL_CHUNK: usize = 16;

/// Anything that predicts the noise in `x_t` at a shared timestep.
pub trait NoisePredictor {
    fn predict_noise(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>>;
}

impl NoisePredictor for UNet {
    fn predict_noise(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
        self.forward(x_t, t, None, None)
    }
}

/// Fixed `(x0, eps)` pairs reused across evaluations so that baseline and
/// intervened passes see identical inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalBatch {
    pub x0: Tensor<f32>,
    pub eps: Tensor<f32>,
    /// Dataset index of each row of `x0`.
    pub indices: Vec<usize>,
}

impl EvalBatch {
    /// `n` images drawn with replacement plus unit Gaussian noise.
    pub fn draw(data: &Dataset, n: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let indices: Vec<usize> = (0..n).map(|_| rng.random_range(0..data.len())).collect();
        Self::from_indices(data, indices, &mut rng)
    }

    /// The first `n` images in order (cycling if the set is smaller).
    pub fn first(data: &Dataset, n: usize, seed: u64) -> Result<Self> {
        if data.is_empty() {
            return Err(DiffusionError::EmptyDataset);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::from_indices(data, (0..n).map(|i| i % data.len()).collect(), &mut rng)
    }

    fn from_indices(data: &Dataset, indices: Vec<usize>, rng: &mut ChaCha8Rng) -> Result<Self> {
        let images: Vec<Tensor<f32>> = indices.iter().map(|&i| data.images[i].clone()).collect();
        let mut shape = vec![indices.len(), data.channels, data.image_size, data.image_size];
        let x0 = if images.is_empty() {
            Tensor::zeros(&shape)
        } else {
            Tensor::stack(&images)?
        };
        shape[0] = indices.len();
        let eps = Tensor::randn(&shape, rng);
        Ok(EvalBatch { x0, eps, indices })
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    pub fn noised(&self, sched: &NoiseSchedule, t: usize) -> Result<Tensor<f32>> {
        super::q_sample(&self.x0, t, &self.eps, sched)
    }

    /// Rows `range` of a batch tensor.
    pub(crate) fn rows(t: &Tensor<f32>, range: std::ops::Range<usize>) -> Result<Tensor<f32>> {
        let per: usize = t.shape()[1..].iter().product();
        let mut shape = t.shape().to_vec();
        shape[0] = range.len();
        Ok(Tensor::new(shape, t.data()[range.start * per..range.end * per].to_vec())?)
    }

    /// Runs `f` over the batch in chunks and concatenates the outputs.
    pub(crate) fn chunked<F>(x: &Tensor<f32>, mut f: F) -> Result<Tensor<f32>>
    where
        F: FnMut(&Tensor<f32>, usize) -> Result<Tensor<f32>>,
    {
        let n = x.shape()[0];
        let mut data = Vec::with_capacity(x.numel());
        let mut start = 0;
        while start < n {
            let end = (start + EVAL_CHUNK).min(n);
            let out = f(&Self::rows(x, start..end)?, start)?;
            data.extend_from_slice(out.data());
            start = end;
        }
        Ok(Tensor::new(x.shape().to_vec(), data)?)
    }
}

/// Mean over draws of `max(0, 1 - MSE(eps_hat, eps) / Var(eps))`, with the
/// variance taken per draw (population form).
pub fn prediction_accuracy<P: NoisePredictor>(
    model: &P,
    data: &Dataset,
    sched: &NoiseSchedule,
    t: usize,
    n: usize,
    seed: u64,
) -> Result<f64> {
    sched.check_timestep(t)?;
    let batch = EvalBatch::draw(data, n, seed)?;
    if batch.is_empty() {
        return Ok(0.0);
    }
    let x_t = batch.noised(sched, t)?;
    let pred = EvalBatch::chunked(&x_t, |x, _| model.predict_noise(x, t))?;
    let per = batch.eps.numel() / n;
    let mut total = 0.0;
    for i in 0..n {
        let e = &batch.eps.data()[i * per..(i + 1) * per];
        let p = &pred.data()[i * per..(i + 1) * per];
        let mean = e.iter().map(|&v| v as f64).sum::<f64>() / per as f64;
        let var = e.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / per as f64;
        let mse = e.iter().zip(p).map(|(&a, &b)| (a as f64 - b as f64).powi(2)).sum::<f64>() / per as f64;
        total += (1.0 - mse / var).max(0.0);
    }
    Ok(total / n as f64)
}

/// Ancestral sampling from `t = T - 1` down to `t = 1`, predicting `x0`
/// (clipped to `[-1, 1]`) at each step. Hooks, when given, capture at the
/// listed timesteps only.
pub fn p_sample_loop(
    model: &UNet,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
    mut hooks: Option<(&mut HookRegistry, &[usize])>,
) -> Result<Tensor<f32>> {
    let c = model.config();
    let shape = [n, c.channels, c.image_size, c.image_size];
    if n == 0 {
        return Ok(Tensor::zeros(&shape));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = Tensor::randn(&shape, &mut rng);
    for t in (1..sched.timesteps).rev() {
        let eps = match hooks.as_mut() {
            Some((reg, ts)) if ts.contains(&t) => model.forward(&x, t, Some(&mut **reg), None)?,
            _ => model.forward(&x, t, None, None)?,
        };
        let ab = sched.alpha_bar[t];
        let ab_prev = sched.alpha_bar[t - 1];
        let beta = sched.beta[t];
        let alpha = 1.0 - beta;
        let (sa, sn) = signal_noise(sched, t);
        let c0 = (ab_prev.sqrt() * beta / (1.0 - ab)) as f32;
        let ct = (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab)) as f32;
        let sigma = (beta * (1.0 - ab_prev) / (1.0 - ab)).sqrt() as f32;
        let z = if t > 1 { Some(Tensor::randn(&shape, &mut rng)) } else { None };
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            let x0 = ((*v - sn * eps.data()[i]) / sa).clamp(-1.0, 1.0);
            let mut next = c0 * x0 + ct * *v;
            if let Some(z) = &z {
                next += sigma * z.data()[i];
            }
            *v = next;
        }
    }
    x.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::{cosine_schedule, UNetConfig};
    use crate::faces::{build_dataset, DatasetConfig};

    struct Oracle {
        x0: Tensor<f32>,
        sched: NoiseSchedule,
    }

    impl NoisePredictor for Oracle {
        fn predict_noise(&self, x_t: &Tensor<f32>, t: usize) -> Result<Tensor<f32>> {
            let (a, s) = signal_noise(&self.sched, t);
            let per = self.x0.numel();
            let data = x_t.data().iter().enumerate().map(|(i, &x)| (x - a * self.x0.data()[i % per]) / s).collect();
            Ok(Tensor::new(x_t.shape().to_vec(), data)?)
        }
    }

    struct Zeros;

    impl NoisePredictor for Zeros {
        fn predict_noise(&self, x_t: &Tensor<f32>, _: usize) -> Result<Tensor<f32>> {
            Ok(Tensor::zeros(x_t.shape()))
        }
    }

    fn one_image() -> Dataset {
        build_dataset(&DatasetConfig {
            count: 1,
            image_size: 16,
            ..DatasetConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn perfect_and_null_predictors() {
        let data = one_image();
        let sched = cosine_schedule(100, 0.008).unwrap();
        let oracle = Oracle {
            x0: data.images[0].clone(),
            sched: sched.clone(),
        };
        let acc = prediction_accuracy(&oracle, &data, &sched, 50, 8, 1).unwrap();
        assert!((acc - 1.0).abs() < 1e-4, "{acc}");
        let acc = prediction_accuracy(&Zeros, &data, &sched, 50, 8, 1).unwrap();
        assert!(acc < 0.05, "{acc}");
        let again = prediction_accuracy(&Zeros, &data, &sched, 50, 8, 1).unwrap();
        assert_eq!(acc, again);
    }

    #[test]
    fn sampling_edge_cases() {
        let cfg = UNetConfig {
            base_channels: 8,
            hidden_dim: 12,
            image_size: 8,
            channels: 1,
            time_embed_dim: 8,
            norm_groups: 2,
            ..UNetConfig::default()
        };
        let net = UNet::new(cfg, 0).unwrap();
        let sched = cosine_schedule(20, 0.008).unwrap();
        let empty = p_sample_loop(&net, &sched, 0, 0, None).unwrap();
        assert_eq!(empty.shape(), &[0, 1, 8, 8]);
        let mut hooks = HookRegistry::new();
        hooks.subscribe_all(&net);
        let x = p_sample_loop(&net, &sched, 2, 0, Some((&mut hooks, &[5, 10]))).unwrap();
        assert!(x.is_finite());
        assert!(x.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        let ts: std::collections::BTreeSet<u32> = hooks.records().iter().map(|r| r.timestep).collect();
        assert_eq!(ts.into_iter().collect::<Vec<_>>(), vec![5, 10]);
    }
}
