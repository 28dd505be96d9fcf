//! Attention entropy and specialization, feature complexity, histogram
//! mutual information, information-flow efficiency and cross-arm
//! divergence. Every function here is a pure function of its inputs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::trace::{RecordKind, TraceRecord};

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_SPARSITY_EPS: f64 = 1e-6;
pub const ROW_TOLERANCE: f64 = 1e-5;
pub const METRICS_CSV_HEADER: [&str; 7] = ["metric", "layer", "head", "timestep", "arm", "value", "n"];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("attention row {row} sums to {sum} (tolerance {ROW_TOLERANCE})")]
    NotNormalized { row: usize, sum: f64 },
    #[error("attention entry {value} outside [0, 1]")]
    OutOfRange { value: f64 },
    #[error("attention map shape: {0}")]
    Shape(String),
    #[error("specialization needs at least 2 keys")]
    DegenerateMap,
    #[error("empty input")]
    Empty,
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("{samples} samples cannot fill {bins} bins; use fewer bins")]
    TooFewSamples { samples: usize, bins: usize },
    #[error("constant input has zero entropy; efficiency is undefined")]
    ConstantInput,
    #[error("timestep mismatch between series: {0:?} vs {1:?}")]
    TimestepMismatch(Vec<usize>, Vec<usize>),
    #[error("no activation records at timestep {0}")]
    NoRecords(usize),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

/// How a row-stochastic map is turned into a distribution for entropy.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyNormalization {
    /// Divide by the query count; `H_max = log2(Q * K)`.
    #[default]
    Joint,
    /// Mean of per-row entropies; `H_max = log2(K)`.
    PerRow,
}

/// A `queries x keys` map whose rows are distributions.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMap {
    queries: usize,
    keys: usize,
    weights: Vec<f64>,
}

impl AttentionMap {
    pub fn new(queries: usize, keys: usize, weights: Vec<f64>) -> Result<Self> {
        if queries == 0 || keys == 0 || weights.len() != queries * keys {
            return Err(MetricsError::Shape(format!(
                "{} weights for {queries} x {keys}",
                weights.len()
            )));
        }
        for (row, r) in weights.chunks(keys).enumerate() {
            if let Some(&v) = r.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(MetricsError::OutOfRange { value: v });
            }
            let sum: f64 = r.iter().sum();
            if (sum - 1.0).abs() > ROW_TOLERANCE {
                return Err(MetricsError::NotNormalized { row, sum });
            }
        }
        Ok(AttentionMap { queries, keys, weights })
    }

    pub fn from_f32(queries: usize, keys: usize, weights: &[f32]) -> Result<Self> {
        Self::new(queries, keys, weights.iter().map(|&v| v as f64).collect())
    }

    /// One map per batch image of an attention record `[B, Q, K]`.
    pub fn from_record(r: &TraceRecord) -> Result<Vec<Self>> {
        if r.kind != RecordKind::Attention || r.shape.len() != 3 {
            return Err(MetricsError::Shape(format!("record `{}` is not a [B, Q, K] attention map", r.name)));
        }
        let (q, k) = (r.shape[1], r.shape[2]);
        r.payload
            .chunks(q * k)
            .map(|c| Self::from_f32(q, k, c))
            .collect()
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    pub fn keys(&self) -> usize {
        self.keys
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }
}

/// Terms are summed in sorted order so the result depends only on the
/// multiset of probabilities, not their layout.
fn plogp_sum(ps: impl Iterator<Item = f64>) -> f64 {
    let mut terms: Vec<f64> = ps.filter(|&p| p > 0.0).map(|p| p * p.log2()).collect();
    terms.sort_by(f64::total_cmp);
    -terms.iter().sum::<f64>()
}

/// Entropy in bits; zero-probability entries contribute nothing.
pub fn attention_entropy(a: &AttentionMap, norm: EntropyNormalization) -> f64 {
    match norm {
        EntropyNormalization::Joint => {
            let q = a.queries as f64;
            plogp_sum(a.weights.iter().map(|&w| w / q)).max(0.0)
        }
        EntropyNormalization::PerRow => {
            let total: f64 = a.weights.chunks(a.keys).map(|r| plogp_sum(r.iter().copied())).sum();
            (total / a.queries as f64).max(0.0)
        }
    }
}

pub fn max_entropy(a: &AttentionMap, norm: EntropyNormalization) -> f64 {
    match norm {
        EntropyNormalization::Joint => ((a.queries * a.keys) as f64).log2(),
        EntropyNormalization::PerRow => (a.keys as f64).log2(),
    }
}

/// `(H_max - H) / H_max`, clamped to `[0, 1]`.
pub fn specialization(a: &AttentionMap, norm: EntropyNormalization) -> Result<f64> {
    if a.keys < 2 {
        return Err(MetricsError::DegenerateMap);
    }
    let h_max = max_entropy(a, norm);
    Ok(((h_max - attention_entropy(a, norm)) / h_max).clamp(0.0, 1.0))
}

/// Population standard deviation x (max - min) x fraction of entries with
/// `|x| < eps`.
pub fn feature_complexity(values: &[f32], sparsity_eps: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(MetricsError::Empty);
    }
    let n = values.len() as f64;
    let mean = values.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = values.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let sparse = values.iter().filter(|v| (v.abs() as f64) < sparsity_eps).count() as f64 / n;
    Ok(var.sqrt() * (hi - lo) * sparse)
}

/// Equal-width bin index of every value over the observed range. A
/// constant input lands entirely in bin 0.
pub fn bin_indices(x: &[f64], bins: usize) -> Vec<usize> {
    let (lo, hi) = x
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let width = hi - lo;
    x.iter()
        .map(|&v| {
            if width > 0.0 {
                (((v - lo) / width * bins as f64) as usize).min(bins - 1)
            } else {
                0
            }
        })
        .collect()
}

fn entropy_of_counts(counts: &[usize], n: usize) -> f64 {
    let n = n as f64;
    plogp_sum(counts.iter().map(|&c| c as f64 / n))
}

fn check_binning(len: usize, bins: usize) -> Result<()> {
    if len == 0 {
        return Err(MetricsError::Empty);
    }
    if bins == 0 || len < bins {
        return Err(MetricsError::TooFewSamples { samples: len, bins });
    }
    Ok(())
}

/// Plug-in entropy (bits) of the equal-width histogram of `x`.
pub fn binned_entropy(x: &[f64], bins: usize) -> Result<f64> {
    check_binning(x.len(), bins)?;
    let mut counts = vec![0usize; bins];
    for i in bin_indices(x, bins) {
        counts[i] += 1;
    }
    Ok(entropy_of_counts(&counts, x.len()))
}

struct Histograms {
    hx: f64,
    hy: f64,
    hxy: f64,
}

fn histograms(x: &[f64], y: &[f64], bins: usize) -> Result<Histograms> {
    if x.len() != y.len() {
        return Err(MetricsError::LengthMismatch(x.len(), y.len()));
    }
    check_binning(x.len(), bins)?;
    let (bx, by) = (bin_indices(x, bins), bin_indices(y, bins));
    let mut cx = vec![0usize; bins];
    let mut cy = vec![0usize; bins];
    let mut cxy = vec![0usize; bins * bins];
    for (&i, &j) in bx.iter().zip(&by) {
        cx[i] += 1;
        cy[j] += 1;
        cxy[i * bins + j] += 1;
    }
    let n = x.len();
    Ok(Histograms {
        hx: entropy_of_counts(&cx, n),
        hy: entropy_of_counts(&cy, n),
        hxy: entropy_of_counts(&cxy, n),
    })
}

/// Plug-in mutual information in bits, `H(X) + H(Y) - H(X, Y)` over
/// equal-width histograms. When `y == x` the joint histogram is diagonal
/// and the result equals `binned_entropy(x)` exactly.
pub fn mutual_information(x: &[f64], y: &[f64], bins: usize) -> Result<f64> {
    let h = histograms(x, y, bins)?;
    Ok((h.hx + h.hy - h.hxy).max(0.0))
}

/// `MI(F_l, F_next) / max(H(F_l), H(F_next))`, clamped to `[0, 1]`.
pub fn information_flow_efficiency(f_l: &[f64], f_next: &[f64], bins: usize) -> Result<f64> {
    let h = histograms(f_l, f_next, bins)?;
    if h.hx == 0.0 || h.hy == 0.0 {
        return Err(MetricsError::ConstantInput);
    }
    let mi = (h.hx + h.hy - h.hxy).max(0.0);
    Ok((mi / h.hx.max(h.hy)).clamp(0.0, 1.0))
}

/// Per-timestep `|a - b|` of two `(timestep, value)` series.
pub fn divergence(a: &[(usize, f64)], b: &[(usize, f64)]) -> Result<Vec<(usize, f64)>> {
    let ta: Vec<usize> = a.iter().map(|p| p.0).collect();
    let tb: Vec<usize> = b.iter().map(|p| p.0).collect();
    if ta != tb {
        return Err(MetricsError::TimestepMismatch(ta, tb));
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x.0, (x.1 - y.1).abs())).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CircuitComplexity {
    pub timestep: usize,
    pub mean: f64,
    /// Complexity of each layer, in first-appearance order.
    pub per_layer: Vec<(String, f64)>,
}

/// Mean over layers of the complexity of all activation values captured for
/// that layer at `timestep` (batch records of a layer are pooled).
pub fn circuit_complexity(records: &[TraceRecord], timestep: usize, sparsity_eps: f64) -> Result<CircuitComplexity> {
    let mut order: Vec<&str> = Vec::new();
    let mut pooled: BTreeMap<&str, Vec<f32>> = BTreeMap::new();
    for r in records
        .iter()
        .filter(|r| r.kind == RecordKind::Activation && r.timestep as usize == timestep)
    {
        let entry = pooled.entry(&r.name).or_insert_with(|| {
            order.push(&r.name);
            Vec::new()
        });
        entry.extend_from_slice(&r.payload);
    }
    if order.is_empty() {
        return Err(MetricsError::NoRecords(timestep));
    }
    let per_layer = order
        .iter()
        .map(|&l| Ok((l.to_string(), feature_complexity(&pooled[l], sparsity_eps)?)))
        .collect::<Result<Vec<_>>>()?;
    let mean = per_layer.iter().map(|p| p.1).sum::<f64>() / per_layer.len() as f64;
    Ok(CircuitComplexity {
        timestep,
        mean,
        per_layer,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Entropy,
    Specialization,
    Complexity,
    Ife,
    Divergence,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Entropy => "entropy",
            MetricKind::Specialization => "specialization",
            MetricKind::Complexity => "complexity",
            MetricKind::Ife => "ife",
            MetricKind::Divergence => "divergence",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricValue {
    pub kind: MetricKind,
    pub value: f64,
    pub layer: Option<String>,
    pub head: Option<usize>,
    pub timestep: Option<usize>,
    pub arm: Option<String>,
    pub n: usize,
}

impl MetricValue {
    pub fn csv_row(&self) -> [String; 7] {
        let opt = |o: Option<String>| o.unwrap_or_default();
        [
            self.kind.name().to_string(),
            opt(self.layer.clone()),
            opt(self.head.map(|h| h.to_string())),
            opt(self.timestep.map(|t| t.to_string())),
            opt(self.arm.clone()),
            self.value.to_string(),
            self.n.to_string(),
        ]
    }
}

pub fn write_metrics_csv(values: &[MetricValue], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(METRICS_CSV_HEADER)?;
    for v in values {
        w.write_record(v.csv_row())?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn uniform(q: usize, k: usize) -> AttentionMap {
        AttentionMap::new(q, k, vec![1.0 / k as f64; q * k]).unwrap()
    }

    #[test]
    fn entropy_fixtures() {
        let j = EntropyNormalization::Joint;
        assert_eq!(attention_entropy(&uniform(16, 16), j), 8.0);
        let one_hot = AttentionMap::new(1, 4, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(attention_entropy(&one_hot, j), 0.0);
        let row = AttentionMap::new(1, 3, vec![0.5, 0.25, 0.25]).unwrap();
        assert!((attention_entropy(&row, j) - 1.5).abs() < 1e-12);
        assert!((attention_entropy(&row, EntropyNormalization::PerRow) - 1.5).abs() < 1e-12);
    }

    #[test]
    fn specialization_fixtures() {
        let j = EntropyNormalization::Joint;
        assert_eq!(specialization(&uniform(8, 8), j).unwrap(), 0.0);
        let one_hot = AttentionMap::new(1, 4, vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        assert_eq!(specialization(&one_hot, j).unwrap(), 1.0);
        let padded = AttentionMap::new(1, 4, vec![0.5, 0.25, 0.25, 0.0]).unwrap();
        assert!((specialization(&padded, j).unwrap() - 0.25).abs() < 1e-12);
        let single = AttentionMap::new(3, 1, vec![1.0; 3]).unwrap();
        assert!(matches!(specialization(&single, j), Err(MetricsError::DegenerateMap)));
    }

    #[test]
    fn rejects_unnormalized_rows() {
        assert!(matches!(
            AttentionMap::new(1, 2, vec![0.5, 0.6]),
            Err(MetricsError::NotNormalized { .. })
        ));
    }

    #[test]
    fn complexity_fixtures() {
        assert_eq!(feature_complexity(&[0.0, 0.0, 1.0, 1.0], 1e-6).unwrap(), 0.25);
        assert_eq!(feature_complexity(&[2.0; 5], 1e-6).unwrap(), 0.0);
        assert_eq!(feature_complexity(&[1.0, 2.0, 3.5], 1e-6).unwrap(), 0.0);
        assert!(feature_complexity(&[], 1e-6).is_err());
    }

    #[test]
    fn mi_requires_enough_samples() {
        let x: Vec<f64> = (0..10).map(f64::from).collect();
        assert!(matches!(
            mutual_information(&x, &x, 64),
            Err(MetricsError::TooFewSamples { .. })
        ));
        assert!(matches!(
            mutual_information(&x, &x[..9], 4),
            Err(MetricsError::LengthMismatch(10, 9))
        ));
    }

    #[test]
    fn ife_constant_is_error() {
        let x: Vec<f64> = (0..100).map(f64::from).collect();
        let c = vec![1.0; 100];
        assert!(matches!(
            information_flow_efficiency(&x, &c, 8),
            Err(MetricsError::ConstantInput)
        ));
        assert!((information_flow_efficiency(&x, &x, 8).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn divergence_fixtures() {
        let a = vec![(1, 0.5), (2, 0.7)];
        let b: Vec<_> = a.iter().map(|&(t, v)| (t, v + 0.1)).collect();
        for (_, d) in divergence(&a, &b).unwrap() {
            assert!((d - 0.1).abs() < 1e-12);
        }
        assert!(divergence(&a, &a).unwrap().iter().all(|p| p.1 == 0.0));
        assert!(matches!(divergence(&a, &b[..1]), Err(MetricsError::TimestepMismatch(..))));
    }
}
