#![allow(dead_code)]

use circuitscope::diffusion::{attention_block, res_block, AttentionParams, NoTaps, ResBlockParams};
use circuitscope::tensor::{grad_check_params, Graph, NodeId, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LINEAR_TOL: f64 = 1e-8;
pub const NONLINEAR_TOL: f64 = 1e-3;
const BLOCK_STEP: f64 = 1e-6;

pub struct OpCheck {
    pub name: &'static str,
    pub error: f64,
    pub tolerance: f64,
}

impl OpCheck {
    pub fn passed(&self) -> bool {
        self.error < self.tolerance
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::randn_f64(shape, rng)
}

/// Values bounded away from zero so relu kinks sit far from the probes.
fn away_from_zero(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() { m } else { -m }
        })
        .collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Scalarizes `y` as `sum(y * r)` with fixed weights `|r|` in [0.5, 1.5].
fn weighted_sum(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let r = away_from_zero(&shape, &mut rng);
    let v: Vec<f64> = r.data().iter().map(|x| x.signum() * (0.5 + (x.abs() - 0.2) / 1.3)).collect();
    let rn = g.constant(Tensor::from_f64(&shape, &v)?);
    let p = g.mul(y, rn)?;
    Ok(g.sum(p))
}

fn check<F>(name: &'static str, inputs: Vec<Tensor<f64>>, linear: bool, f: F) -> OpCheck
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    // Central differences are exact for polynomials of degree <= 2, so a
    // wide step only removes rounding noise there.
    check_with_step(name, inputs, linear, if linear { 1e-3 } else { 1e-5 }, f)
}

fn check_with_step<F>(name: &'static str, inputs: Vec<Tensor<f64>>, linear: bool, h: f64, f: F) -> OpCheck
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let seed = name.bytes().fold(17u64, |a, b| a.wrapping_mul(31).wrapping_add(b as u64));
    let error = grad_check_params(
        |g, ids| {
            let y = f(g, ids)?;
            weighted_sum(g, y, seed)
        },
        &inputs,
        h,
    )
    .unwrap_or_else(|e| panic!("{name}: {e}"));
    OpCheck {
        name,
        error,
        tolerance: if linear { LINEAR_TOL } else { NONLINEAR_TOL },
    }
}

pub fn op_checks() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let r = &mut rng;
    let img = [2, 4, 4, 4];
    let mut out = Vec::new();

    out.push(check("add", vec![randn(&[3, 5], r), randn(&[3, 5], r)], true, |g, x| g.add(x[0], x[1])));
    out.push(check("sub", vec![randn(&[3, 5], r), randn(&[3, 5], r)], true, |g, x| g.sub(x[0], x[1])));
    out.push(check("add_scalar", vec![randn(&[7], r)], true, |g, x| Ok(g.add_scalar(x[0], 0.7))));
    out.push(check("mul_scalar", vec![randn(&[7], r)], true, |g, x| Ok(g.mul_scalar(x[0], -1.3))));
    let scale: Vec<f64> = (0..6).map(|i| 0.5 + i as f64 * 0.1).collect();
    out.push(check("affine_const", vec![randn(&[2, 3], r)], true, move |g, x| {
        g.affine_const(x[0], scale.clone(), vec![0.25])
    }));
    out.push(check("reshape", vec![randn(&[2, 6], r)], true, |g, x| g.reshape(x[0], &[3, 4])));
    out.push(check("permute", vec![randn(&[2, 3, 4], r)], true, |g, x| g.permute(x[0], &[2, 0, 1])));
    out.push(check("avg_pool2", vec![randn(&img, r)], true, |g, x| g.avg_pool2(x[0])));
    out.push(check("upsample2", vec![randn(&[2, 3, 2, 2], r)], true, |g, x| g.upsample2(x[0])));
    out.push(check("sum", vec![randn(&[4, 3], r)], true, |g, x| Ok(g.sum(x[0]))));
    out.push(check("mean", vec![randn(&[4, 3], r)], true, |g, x| Ok(g.mean(x[0]))));
    out.push(check("add_channel_bias", vec![randn(&img, r), randn(&[4], r)], true, |g, x| {
        g.add_channel_bias(x[0], x[1])
    }));
    out.push(check("add_batch_channel", vec![randn(&img, r), randn(&[2, 4], r)], true, |g, x| {
        g.add_batch_channel(x[0], x[1])
    }));
    out.push(check("add_last_bias", vec![randn(&[3, 5], r), randn(&[5], r)], true, |g, x| {
        g.add_last_bias(x[0], x[1])
    }));

    out.push(check("mul", vec![randn(&[3, 5], r), randn(&[3, 5], r)], false, |g, x| g.mul(x[0], x[1])));
    out.push(check("matmul", vec![randn(&[3, 4], r), randn(&[4, 5], r)], false, |g, x| g.matmul(x[0], x[1])));
    for (ta, tb, name) in [(false, false, "bmm"), (true, false, "bmm_ta"), (false, true, "bmm_tb"), (true, true, "bmm_tatb")] {
        let a = if ta { randn(&[2, 4, 3], r) } else { randn(&[2, 3, 4], r) };
        let b = if tb { randn(&[2, 5, 4], r) } else { randn(&[2, 4, 5], r) };
        out.push(check(name, vec![a, b], false, move |g, x| g.bmm(x[0], x[1], ta, tb)));
    }
    out.push(check("conv2d_3x3", vec![randn(&[2, 3, 5, 5], r), randn(&[4, 3, 3, 3], r)], false, |g, x| {
        g.conv2d(x[0], x[1], 1)
    }));
    out.push(check("conv2d_1x1", vec![randn(&[2, 3, 4, 4], r), randn(&[2, 3, 1, 1], r)], false, |g, x| {
        g.conv2d(x[0], x[1], 0)
    }));
    out.push(check("softmax_rows", vec![randn(&[2, 3, 5], r)], false, |g, x| g.softmax_rows(x[0])));
    out.push(check("group_norm", vec![randn(&img, r)], false, |g, x| g.group_norm(x[0], 2, 1e-5)));
    out.push(check("relu", vec![away_from_zero(&[4, 5], r)], false, |g, x| Ok(g.relu(x[0]))));
    out.push(check("silu", vec![randn(&[4, 5], r)], false, |g, x| Ok(g.silu(x[0]))));
    out.push(check("channel_affine", vec![randn(&img, r), randn(&[4], r), randn(&[4], r)], false, |g, x| {
        g.channel_affine(x[0], x[1], x[2])
    }));
    out.push(check("mse", vec![randn(&[3, 4], r), randn(&[3, 4], r)], false, |g, x| g.mse(x[0], x[1])));
    out
}

/// One residual block and one two-head attention block, every parameter
/// checked. Pre-activations inside a block can land within 1e-5 of a relu
/// kink, so these use a narrower step.
pub fn block_checks() -> Vec<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = &mut rng;
    let small = |shape: &[usize], r: &mut ChaCha8Rng| {
        let t = randn(shape, r);
        let v: Vec<f64> = t.data().iter().map(|x| 0.3 * x).collect();
        Tensor::from_f64(shape, &v).unwrap()
    };
    let res_inputs = vec![
        randn(&[2, 4, 4, 4], r),
        randn(&[2, 6], r),
        small(&[4], r),
        small(&[4], r),
        small(&[6, 4, 3, 3], r),
        small(&[6], r),
        small(&[6, 6], r),
        small(&[6], r),
        small(&[6, 4, 1, 1], r),
    ];
    let res = check_with_step("res_block", res_inputs, false, BLOCK_STEP, |g, x| {
        let p = ResBlockParams {
            norm_g: x[2],
            norm_b: x[3],
            conv_w: x[4],
            conv_b: x[5],
            temb_w: x[6],
            temb_b: x[7],
            skip_w: Some(x[8]),
        };
        Ok(res_block(g, x[0], x[1], &p, 2).expect("res_block"))
    });
    let (c, hidden) = (4, 6);
    let mut attn_inputs = vec![randn(&[1, c, 3, 3], r), small(&[c], r), small(&[c], r)];
    for _ in 0..3 {
        attn_inputs.push(small(&[c, hidden], r));
        attn_inputs.push(small(&[hidden], r));
    }
    attn_inputs.push(small(&[hidden, c], r));
    attn_inputs.push(small(&[c], r));
    let attn = check_with_step("attention_block", attn_inputs, false, BLOCK_STEP, |g, x| {
        let p = AttentionParams {
            norm_g: x[1],
            norm_b: x[2],
            q_w: x[3],
            q_b: x[4],
            k_w: x[5],
            k_b: x[6],
            v_w: x[7],
            v_b: x[8],
            o_w: x[9],
            o_b: x[10],
        };
        Ok(attention_block(g, x[0], &p, 2, 2, &mut NoTaps).expect("attention_block"))
    });
    let (c, hidden) = (4, 4);
    let mut chain_inputs = vec![randn(&[1, 2, 4, 4], r), small(&[c, 2, 3, 3], r), small(&[c], r), small(&[c], r)];
    for _ in 0..3 {
        chain_inputs.push(small(&[c, hidden], r));
        chain_inputs.push(small(&[hidden], r));
    }
    chain_inputs.push(small(&[hidden, c], r));
    chain_inputs.push(small(&[c], r));
    chain_inputs.push(randn(&[1, c, 4, 4], r));
    let chain = check_with_step("conv_norm_attn_mse", chain_inputs, false, BLOCK_STEP, |g, x| {
        let h = g.conv2d(x[0], x[1], 1)?;
        let h = g.group_norm(h, 2, 1e-5)?;
        let p = AttentionParams {
            norm_g: x[2],
            norm_b: x[3],
            q_w: x[4],
            q_b: x[5],
            k_w: x[6],
            k_b: x[7],
            v_w: x[8],
            v_b: x[9],
            o_w: x[10],
            o_b: x[11],
        };
        let h = attention_block(g, h, &p, 2, 2, &mut NoTaps).expect("attention_block");
        g.mse(h, x[12])
    });
    vec![res, attn, chain]
}

pub mod traces {
    use circuitscope::trace::{RecordKind, TraceFile, TraceHeader, TraceRecord, NO_HEAD};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const NAMES: [&str; 5] = ["enc1", "enc2.attn", "mid", "dec2.attn", "conv_out"];

    /// Row-normalized when `kind` is attention.
    pub fn random_record(rng: &mut ChaCha8Rng, max_numel: usize) -> TraceRecord {
        let kind = match rng.random_range(0..4) {
            0 => RecordKind::Activation,
            1 => RecordKind::Attention,
            2 => RecordKind::Image,
            _ => RecordKind::Scalar,
        };
        let rank = rng.random_range(if kind == RecordKind::Attention { 1..=4 } else { 0..=4 });
        let mut shape = Vec::with_capacity(rank);
        let mut numel = 1usize;
        for _ in 0..rank {
            let d = rng.random_range(1..=64usize).min((max_numel / numel).max(1));
            numel *= d;
            shape.push(d);
        }
        let mut payload: Vec<f32> = (0..numel).map(|_| rng.random_range(-4.0f32..4.0)).collect();
        if kind == RecordKind::Attention {
            let k = *shape.last().unwrap();
            for row in payload.chunks_mut(k) {
                for v in row.iter_mut() {
                    *v = v.abs() + 1e-3;
                }
                let s: f32 = row.iter().sum();
                for v in row.iter_mut() {
                    *v /= s;
                }
            }
        }
        TraceRecord {
            name: NAMES[rng.random_range(0..NAMES.len())].to_string(),
            kind,
            timestep: [20u32, 60, 120, 180][rng.random_range(0..4)],
            head: if kind == RecordKind::Attention { rng.random_range(0..8) } else { NO_HEAD },
            batch_index: rng.random_range(0..16),
            shape,
            payload,
        }
    }

    pub fn random_file(seed: u64, n: usize, max_numel: usize) -> TraceFile {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut digest = [0u8; 32];
        rng.fill(&mut digest[..]);
        let records = (0..n).map(|_| random_record(&mut rng, max_numel)).collect();
        TraceFile::new(TraceHeader { seed, config_digest: digest }, records)
    }

    /// Field-by-field equality with payloads compared by bit pattern.
    pub fn bit_identical(a: &TraceFile, b: &TraceFile) -> bool {
        a.header == b.header
            && a.records.len() == b.records.len()
            && a.records.iter().zip(&b.records).all(|(x, y)| {
                x.name == y.name
                    && x.kind == y.kind
                    && x.timestep == y.timestep
                    && x.head == y.head
                    && x.batch_index == y.batch_index
                    && x.shape == y.shape
                    && x.payload.len() == y.payload.len()
                    && x.payload.iter().zip(&y.payload).all(|(p, q)| p.to_bits() == q.to_bits())
            })
    }

    /// Byte positions whose single-byte corruption `decode` must reject:
    /// magic, version, endianness flag, record count, index offset, and
    /// everything from the first record to the end of the index.
    pub fn checked_positions(len: usize) -> impl Iterator<Item = usize> {
        use circuitscope::trace::HEADER_LEN;
        (0..7).chain(48..HEADER_LEN).chain(HEADER_LEN..len)
    }
}

/// A two-arm pipeline small enough to run end to end in a few seconds.
pub const SMOKE_CONFIG: &str = r#"{
  "seed": 7,
  "arm_a": {"source": "synthetic", "count": 8, "style": "crisp"},
  "arm_b": {"source": "synthetic", "count": 8, "style": "textured"},
  "model": {"base_channels": 8, "hidden_dim": 12, "image_size": 16, "channels": 3, "time_embed_dim": 16, "norm_groups": 2},
  "timesteps": 50,
  "train": {"steps": 50, "batch_size": 4, "log_every": 25},
  "analysis": {"trace_batch": 4, "accuracy_samples": 8},
  "interventions": {"eval_count": 8},
  "stats": {"resamples": 1000}
}"#;

pub fn smoke_config() -> circuitscope::experiment::ExperimentConfig {
    let cfg: circuitscope::experiment::ExperimentConfig = serde_json::from_str(SMOKE_CONFIG).unwrap();
    cfg.validate().unwrap();
    cfg
}
