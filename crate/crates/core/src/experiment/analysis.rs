//! Metric tables computed from a stored trace. Everything here reads only
//! the trace and the analysis settings, so a report can be re-derived from
//! its trace files.

use serde::{Deserialize, Serialize};

use super::config::AnalysisConfig;
use super::{ExperimentError, Result};
use crate::metrics::{
    attention_entropy, circuit_complexity, feature_complexity, information_flow_efficiency, specialization,
    AttentionMap, CircuitComplexity, MetricKind, MetricValue, MetricsError,
};
use crate::trace::{RecordKind, TraceFile, TraceRecord};

/// Side of the common grid that layer summaries are resampled to before
/// measuring information flow between layers of different resolution.
pub const IFE_GRID: usize = 16;

/// Per-image observations at one timestep; the unit of the cross-arm tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimestepSamples {
    pub timestep: usize,
    /// Mean over layers of each image's feature complexity.
    pub complexity: Vec<f64>,
    /// Mean over heads of each image's attention entropy.
    pub entropy: Vec<f64>,
    /// Mean over heads of each image's specialization.
    pub specialization: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceAnalysis {
    pub metrics: Vec<MetricValue>,
    pub circuit: Vec<CircuitComplexity>,
    pub samples: Vec<TimestepSamples>,
    /// Adjacent-layer pairs whose efficiency is undefined (constant layer).
    pub degenerate_pairs: Vec<String>,
}

impl TraceAnalysis {
    /// `(timestep, across-heads mean)` of entropy or specialization.
    pub fn head_mean_series(&self, kind: MetricKind) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for m in self.metrics.iter().filter(|m| m.kind == kind && m.head.is_some()) {
            let t = m.timestep.unwrap_or_default();
            match out.iter_mut().find(|e| e.0 == t) {
                Some(e) => {
                    e.1 += m.value;
                    e.2 += 1;
                }
                None => out.push((t, m.value, 1)),
            }
        }
        out.into_iter().map(|(t, s, n)| (t, s / n as f64)).collect()
    }

    pub fn complexity_series(&self) -> Vec<(usize, f64)> {
        self.circuit.iter().map(|c| (c.timestep, c.mean)).collect()
    }
}

/// Records of one `(name, kind, head)` at one timestep, concatenated along
/// the batch axis.
struct Pooled<'a> {
    name: &'a str,
    kind: RecordKind,
    head: Option<usize>,
    /// Shape of one image's slice.
    item_shape: Vec<usize>,
    images: usize,
    data: Vec<f32>,
}

impl Pooled<'_> {
    fn item(&self, i: usize) -> &[f32] {
        let per: usize = self.item_shape.iter().product();
        &self.data[i * per..(i + 1) * per]
    }
}

fn pool<'a>(records: &[&'a TraceRecord]) -> std::result::Result<Vec<Pooled<'a>>, MetricsError> {
    let mut out: Vec<Pooled<'a>> = Vec::new();
    for r in records {
        if r.shape.is_empty() {
            return Err(MetricsError::Shape(format!("record `{}` has no batch axis", r.name)));
        }
        let item_shape = r.shape[1..].to_vec();
        match out
            .iter_mut()
            .find(|p| p.name == r.name && p.kind == r.kind && p.head == r.head())
        {
            Some(p) => {
                if p.item_shape != item_shape {
                    return Err(MetricsError::Shape(format!(
                        "`{}` batches disagree: {:?} vs {:?}",
                        r.name, p.item_shape, item_shape
                    )));
                }
                p.images += r.shape[0];
                p.data.extend_from_slice(&r.payload);
            }
            None => out.push(Pooled {
                name: &r.name,
                kind: r.kind,
                head: r.head(),
                item_shape,
                images: r.shape[0],
                data: r.payload.clone(),
            }),
        }
    }
    Ok(out)
}

/// Channel-mean map of one `[C, H, W]` activation, resampled to
/// `IFE_GRID x IFE_GRID` (block mean when the side divides evenly, nearest
/// neighbour otherwise).
pub fn layer_summary(item: &[f32], shape: &[usize]) -> Vec<f64> {
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let mut mean = vec![0.0f64; h * w];
    for ch in 0..c {
        for (m, &v) in mean.iter_mut().zip(&item[ch * h * w..(ch + 1) * h * w]) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= c as f64);
    let g = IFE_GRID;
    let mut out = Vec::with_capacity(g * g);
    for oy in 0..g {
        for ox in 0..g {
            if h % g == 0 && w % g == 0 {
                let (fy, fx) = (h / g, w / g);
                let mut s = 0.0;
                for y in oy * fy..(oy + 1) * fy {
                    for x in ox * fx..(ox + 1) * fx {
                        s += mean[y * w + x];
                    }
                }
                out.push(s / (fy * fx) as f64);
            } else {
                out.push(mean[(oy * h / g) * w + ox * w / g]);
            }
        }
    }
    out
}

fn metric(kind: MetricKind, value: f64, layer: Option<&str>, head: Option<usize>, t: usize, arm: Option<&str>, n: usize) -> MetricValue {
    MetricValue {
        kind,
        value,
        layer: layer.map(str::to_string),
        head,
        timestep: Some(t),
        arm: arm.map(str::to_string),
        n,
    }
}

/// Entropy and specialization per head, complexity per layer and per
/// circuit, and information-flow efficiency between consecutive layers,
/// at every timestep present in the trace.
pub fn analyze_trace(trace: &TraceFile, arm: Option<&str>, cfg: &AnalysisConfig) -> std::result::Result<TraceAnalysis, MetricsError> {
    let mut timesteps: Vec<u32> = trace.records.iter().map(|r| r.timestep).collect();
    timesteps.sort_unstable();
    timesteps.dedup();
    let mut out = TraceAnalysis {
        metrics: Vec::new(),
        circuit: Vec::new(),
        samples: Vec::new(),
        degenerate_pairs: Vec::new(),
    };
    let norm = cfg.entropy_normalization;
    for t32 in timesteps {
        let t = t32 as usize;
        let at_t: Vec<&TraceRecord> = trace.records.iter().filter(|r| r.timestep == t32).collect();
        let pooled = pool(&at_t)?;
        let images = pooled.first().map_or(0, |p| p.images);
        if let Some(p) = pooled.iter().find(|p| p.images != images) {
            return Err(MetricsError::Shape(format!(
                "`{}` has {} images at t = {t}, expected {images}",
                p.name, p.images
            )));
        }
        let mut samples = TimestepSamples {
            timestep: t,
            complexity: vec![0.0; images],
            entropy: Vec::new(),
            specialization: Vec::new(),
        };

        let heads: Vec<&Pooled> = pooled.iter().filter(|p| p.kind == RecordKind::Attention).collect();
        if !heads.is_empty() {
            samples.entropy = vec![0.0; images];
            samples.specialization = vec![0.0; images];
        }
        for p in &heads {
            if p.item_shape.len() != 2 {
                return Err(MetricsError::Shape(format!("attention `{}` is not [B, Q, K]", p.name)));
            }
            let (mut h_sum, mut s_sum) = (0.0, 0.0);
            for i in 0..images {
                let map = AttentionMap::from_f32(p.item_shape[0], p.item_shape[1], p.item(i))?;
                let h = attention_entropy(&map, norm);
                let s = specialization(&map, norm)?;
                samples.entropy[i] += h / heads.len() as f64;
                samples.specialization[i] += s / heads.len() as f64;
                h_sum += h;
                s_sum += s;
            }
            let n = images.max(1) as f64;
            out.metrics
                .push(metric(MetricKind::Entropy, h_sum / n, Some(p.name), p.head, t, arm, images));
            out.metrics
                .push(metric(MetricKind::Specialization, s_sum / n, Some(p.name), p.head, t, arm, images));
        }

        let layers: Vec<&Pooled> = pooled.iter().filter(|p| p.kind == RecordKind::Activation).collect();
        if layers.is_empty() {
            samples.complexity.clear();
        } else {
            let cc = circuit_complexity(trace.records.as_slice(), t, cfg.sparsity_eps)?;
            for (layer, c) in &cc.per_layer {
                out.metrics
                    .push(metric(MetricKind::Complexity, *c, Some(layer), None, t, arm, images));
            }
            out.metrics
                .push(metric(MetricKind::Complexity, cc.mean, None, None, t, arm, images));
            out.circuit.push(cc);
            for p in &layers {
                for i in 0..images {
                    samples.complexity[i] += feature_complexity(p.item(i), cfg.sparsity_eps)? / layers.len() as f64;
                }
            }
        }

        let spatial: Vec<&&Pooled> = layers.iter().filter(|p| p.item_shape.len() == 3).collect();
        let summaries: Vec<Vec<f64>> = spatial
            .iter()
            .map(|p| (0..images).flat_map(|i| layer_summary(p.item(i), &p.item_shape)).collect())
            .collect();
        for (k, pair) in spatial.windows(2).enumerate() {
            let label = format!("{}->{}", pair[0].name, pair[1].name);
            match information_flow_efficiency(&summaries[k], &summaries[k + 1], cfg.bins) {
                Ok(v) => out
                    .metrics
                    .push(metric(MetricKind::Ife, v, Some(&label), None, t, arm, images)),
                Err(MetricsError::ConstantInput) => {
                    log::warn!("information flow {label} at t = {t} is undefined: constant layer");
                    out.degenerate_pairs.push(format!("{label}@{t}"));
                }
                Err(e) => return Err(e),
            }
        }
        out.samples.push(samples);
    }
    Ok(out)
}

/// Four contiguous bands of the timestep axis, noisiest first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Phase {
    pub index: usize,
    /// Inclusive lower bound (phase 4) or exclusive lower bound (others).
    pub lower: usize,
    /// Inclusive upper bound.
    pub upper: usize,
    pub timesteps: Vec<usize>,
    pub mean_complexity: Option<f64>,
    pub mean_accuracy: Option<f64>,
}

pub const PHASE_FRACTIONS: [f64; 3] = [0.7, 0.4, 0.1];

pub fn phase_boundaries(timesteps: usize) -> [usize; 3] {
    PHASE_FRACTIONS.map(|f| (f * timesteps as f64).round() as usize)
}

/// Splits the series at `0.7 T`, `0.4 T` and `0.1 T`. Phase 1 is
/// `(0.7 T, T)`, phase 2 `(0.4 T, 0.7 T]`, phase 3 `(0.1 T, 0.4 T]` and phase
/// 4 `[0, 0.1 T]`.
pub fn segment_phases(complexity: &[(usize, f64)], accuracy: &[(usize, f64)], timesteps: usize) -> Result<Vec<Phase>> {
    if complexity.len() < 4 {
        return Err(ExperimentError::InvalidInput(format!(
            "phase segmentation needs at least 4 timesteps, got {}",
            complexity.len()
        )));
    }
    let [b1, b2, b3] = phase_boundaries(timesteps);
    let bands = [(b1, timesteps.saturating_sub(1)), (b2, b1), (b3, b2), (0, b3)];
    let mean_in = |series: &[(usize, f64)], lo: usize, hi: usize, idx: usize| {
        let v: Vec<f64> = series
            .iter()
            .filter(|(t, _)| *t <= hi && (*t > lo || (idx == 4 && *t >= lo)))
            .map(|p| p.1)
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    };
    Ok(bands
        .iter()
        .enumerate()
        .map(|(k, &(lo, hi))| {
            let idx = k + 1;
            let mut ts: Vec<usize> = complexity
                .iter()
                .map(|p| p.0)
                .filter(|&t| t <= hi && (t > lo || (idx == 4 && t >= lo)))
                .collect();
            ts.sort_unstable();
            Phase {
                index: idx,
                lower: lo,
                upper: hi,
                timesteps: ts,
                mean_complexity: mean_in(complexity, lo, hi, idx),
                mean_accuracy: mean_in(accuracy, lo, hi, idx),
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trace::{TraceHeader, NO_HEAD};

    #[test]
    fn boundaries_scale() {
        assert_eq!(phase_boundaries(1000), [700, 400, 100]);
        assert_eq!(phase_boundaries(200), [140, 80, 20]);
    }

    #[test]
    fn phases_hold_one_reference_timestep_each() {
        let series = [(100, 1.0), (300, 1.0), (600, 1.0), (900, 1.0)];
        let phases = segment_phases(&series, &series, 1000).unwrap();
        let ts: Vec<Vec<usize>> = phases.iter().map(|p| p.timesteps.clone()).collect();
        assert_eq!(ts, vec![vec![900], vec![600], vec![300], vec![100]]);
        assert!(phases.iter().all(|p| p.mean_complexity == Some(1.0)));
        assert!(segment_phases(&series[..3], &[], 1000).is_err());
    }

    #[test]
    fn summary_resamples() {
        // One channel, 32x32 ramp: block means of 2x2.
        let item: Vec<f32> = (0..32 * 32).map(|i| (i % 32) as f32).collect();
        let s = layer_summary(&item, &[1, 32, 32]);
        assert_eq!(s.len(), 256);
        assert_eq!(s[0], 0.5);
        let small: Vec<f32> = (0..64).map(|i| i as f32).collect();
        let up = layer_summary(&small, &[1, 8, 8]);
        assert_eq!((up[0], up[1], up[2]), (0.0, 0.0, 1.0));
    }

    #[test]
    fn analyzes_a_handmade_trace() {
        let act = |name: &str, payload: Vec<f32>| TraceRecord {
            name: name.into(),
            kind: RecordKind::Activation,
            timestep: 5,
            head: NO_HEAD,
            batch_index: 0,
            shape: vec![2, 1, 16, 16],
            payload,
        };
        let a: Vec<f32> = (0..512).map(|i| if i % 3 == 0 { 0.0 } else { (i % 7) as f32 }).collect();
        let b: Vec<f32> = a.iter().map(|v| v * 2.0).collect();
        let attn = TraceRecord {
            name: "mid_attn".into(),
            kind: RecordKind::Attention,
            timestep: 5,
            head: 3,
            batch_index: 0,
            shape: vec![2, 2, 2],
            payload: vec![0.5, 0.5, 0.5, 0.5, 1.0, 0.0, 1.0, 0.0],
        };
        let trace = TraceFile::new(
            TraceHeader {
                seed: 0,
                config_digest: [0; 32],
            },
            vec![act("l1", a), attn, act("l2", b)],
        );
        let r = analyze_trace(&trace, Some("A"), &AnalysisConfig::default()).unwrap();
        let ent: Vec<f64> = r.metrics.iter().filter(|m| m.kind == MetricKind::Entropy).map(|m| m.value).collect();
        // Uniform 2x2 map is 2 bits, the deterministic one 1 bit.
        assert_eq!(ent, vec![1.5]);
        assert_eq!(r.samples[0].entropy, vec![2.0, 1.0]);
        let ife: Vec<&MetricValue> = r.metrics.iter().filter(|m| m.kind == MetricKind::Ife).collect();
        assert_eq!(ife.len(), 1);
        assert_eq!(ife[0].layer.as_deref(), Some("l1->l2"));
        assert!((ife[0].value - 1.0).abs() < 1e-12);
        let cc = &r.circuit[0];
        assert_eq!(cc.per_layer.len(), 2);
        assert!((cc.per_layer[1].1 - 4.0 * cc.per_layer[0].1).abs() < 1e-9);
    }
}
