//! Two-sample statistics: effect size, bootstrap intervals, Welch and KS
//! tests, normal-approximation power and Bonferroni correction.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;
use thiserror::Error;

pub const STATS_CSV_HEADER: [&str; 13] = [
    "comparison",
    "metric",
    "timestep",
    "test",
    "statistic",
    "p",
    "adjusted_p",
    "d",
    "ci_low",
    "ci_high",
    "n_a",
    "n_b",
    "power",
];

/// Resamples drawn from one RNG stream before switching to the next.
const BOOTSTRAP_CHUNK: usize = 1000;

#[derive(Debug, Error)]
pub enum StatsError {
    #[error("sample `{0}` is empty")]
    Empty(String),
    #[error("sample `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("sample `{label}` has {n} values, at least {min} required")]
    TooSmall { label: String, n: usize, min: usize },
    #[error("pooled standard deviation is zero")]
    ZeroPooledSd,
    #[error("both samples have zero variance")]
    ZeroVariance,
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, StatsError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleSet {
    label: String,
    values: Vec<f64>,
}

impl SampleSet {
    pub fn new(label: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        let label = label.into();
        if values.is_empty() {
            return Err(StatsError::Empty(label));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(StatsError::NonFinite(label));
        }
        Ok(SampleSet { label, values })
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn mean(&self) -> f64 {
        mean(&self.values)
    }

    /// Unbiased (n - 1) variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (self.len() as f64 - 1.0)
    }

    fn require(&self, min: usize) -> Result<()> {
        if self.len() < min {
            return Err(StatsError::TooSmall {
                label: self.label.clone(),
                n: self.len(),
                min,
            });
        }
        Ok(())
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EffectLabel {
    Negligible,
    Small,
    Medium,
    Large,
}

impl EffectLabel {
    pub fn classify(d: f64) -> Self {
        match d.abs() {
            x if x >= 0.8 => EffectLabel::Large,
            x if x >= 0.5 => EffectLabel::Medium,
            x if x >= 0.2 => EffectLabel::Small,
            _ => EffectLabel::Negligible,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EffectLabel::Negligible => "negligible",
            EffectLabel::Small => "small",
            EffectLabel::Medium => "medium",
            EffectLabel::Large => "large",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EffectSize {
    pub d: f64,
    pub label: EffectLabel,
}

/// `(mean_a - mean_b) / pooled_sd`.
pub fn cohens_d(a: &SampleSet, b: &SampleSet) -> Result<EffectSize> {
    a.require(2)?;
    b.require(2)?;
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let pooled = (((na - 1.0) * a.variance() + (nb - 1.0) * b.variance()) / (na + nb - 2.0)).sqrt();
    if pooled == 0.0 {
        return Err(StatsError::ZeroPooledSd);
    }
    let d = (a.mean() - b.mean()) / pooled;
    Ok(EffectSize {
        d,
        label: EffectLabel::classify(d),
    })
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Percentile interval for `mean(a) - mean(b)`. Resamples are drawn in
/// chunks, each from its own stream of the seeded generator.
pub fn bootstrap_ci(a: &SampleSet, b: &SampleSet, resamples: usize, coverage: f64, seed: u64) -> Result<(f64, f64)> {
    a.require(2)?;
    b.require(2)?;
    if resamples < 2 {
        return Err(StatsError::InvalidArgument(format!("{resamples} resamples")));
    }
    if !(coverage > 0.0 && coverage < 1.0) {
        return Err(StatsError::InvalidArgument(format!("coverage {coverage}")));
    }
    let resample_mean = |rng: &mut ChaCha8Rng, v: &[f64]| {
        (0..v.len()).map(|_| v[rng.random_range(0..v.len())]).sum::<f64>() / v.len() as f64
    };
    let mut diffs = Vec::with_capacity(resamples);
    for (chunk, start) in (0..resamples).step_by(BOOTSTRAP_CHUNK).enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chunk as u64);
        for _ in start..(start + BOOTSTRAP_CHUNK).min(resamples) {
            diffs.push(resample_mean(&mut rng, a.values()) - resample_mean(&mut rng, b.values()));
        }
    }
    diffs.sort_by(f64::total_cmp);
    let tail = (1.0 - coverage) / 2.0;
    Ok((quantile_sorted(&diffs, tail), quantile_sorted(&diffs, 1.0 - tail)))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TestOutcome {
    pub statistic: f64,
    pub p: f64,
    /// Welch-Satterthwaite degrees of freedom, or the KS effective sample size.
    pub df: f64,
}

/// Two-sided Student t tail probability `P(|T| >= |t|)`.
pub fn t_two_sided_p(t: f64, df: f64) -> f64 {
    beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

pub fn welch_t_test(a: &SampleSet, b: &SampleSet) -> Result<TestOutcome> {
    a.require(2)?;
    b.require(2)?;
    let (va, vb) = (a.variance() / a.len() as f64, b.variance() / b.len() as f64);
    if va == 0.0 && vb == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    let se2 = va + vb;
    let t = (a.mean() - b.mean()) / se2.sqrt();
    let df = se2 * se2 / (va * va / (a.len() as f64 - 1.0) + vb * vb / (b.len() as f64 - 1.0));
    Ok(TestOutcome {
        statistic: t,
        p: t_two_sided_p(t, df),
        df,
    })
}

/// Asymptotic Kolmogorov survival function `P(K > lambda)`.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    if lambda < 1.18 {
        // Jacobi-theta form converges fast for small lambda.
        let pi2 = std::f64::consts::PI.powi(2);
        let cdf: f64 = (1..=20)
            .map(|k| {
                let m = (2 * k - 1) as f64;
                (-m * m * pi2 / (8.0 * lambda * lambda)).exp()
            })
            .sum::<f64>()
            * (2.0 * std::f64::consts::PI).sqrt()
            / lambda;
        (1.0 - cdf).clamp(0.0, 1.0)
    } else {
        let sf: f64 = (1..=100)
            .map(|k| {
                let sign = if k % 2 == 1 { 1.0 } else { -1.0 };
                sign * (-2.0 * (k * k) as f64 * lambda * lambda).exp()
            })
            .sum::<f64>()
            * 2.0;
        sf.clamp(0.0, 1.0)
    }
}

pub fn ks_test(a: &SampleSet, b: &SampleSet) -> TestOutcome {
    let sort = |s: &SampleSet| {
        let mut v = s.values().to_vec();
        v.sort_by(f64::total_cmp);
        v
    };
    let (xa, xb) = (sort(a), sort(b));
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < xa.len() && j < xb.len() {
        let x = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= x {
            i += 1;
        }
        while j < xb.len() && xb[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    let ne = na * nb / (na + nb);
    TestOutcome {
        statistic: d,
        p: kolmogorov_sf(ne.sqrt() * d),
        df: ne,
    }
}

/// Normal-approximation power of a two-sided two-sample test,
/// `Phi(d * sqrt(n / 2) - z_{1 - alpha / 2})`.
pub fn power_two_sample(d: f64, n_per_group: usize, alpha: f64) -> Result<f64> {
    if !(d >= 0.0) || n_per_group < 2 || !(alpha > 0.0 && alpha < 1.0) {
        return Err(StatsError::InvalidArgument(format!(
            "d = {d}, n = {n_per_group}, alpha = {alpha}"
        )));
    }
    let z = std_normal().inverse_cdf(1.0 - alpha / 2.0);
    Ok(std_normal().cdf(d * (n_per_group as f64 / 2.0).sqrt() - z))
}

fn std_normal() -> Normal {
    Normal::standard()
}

/// `min(1, m * p)` with `m` the family size.
pub fn bonferroni(p_values: &[f64]) -> Vec<f64> {
    let m = p_values.len() as f64;
    p_values.iter().map(|p| (p * m).min(1.0)).collect()
}

/// Human-readable p-value.
pub fn format_p(p: f64) -> String {
    if p < 1e-12 {
        "<1e-12".to_string()
    } else if p < 1e-3 {
        format!("{p:.2e}")
    } else {
        format!("{p:.4}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StatsConfig {
    pub resamples: usize,
    pub coverage: f64,
    pub alpha: f64,
}

impl Default for StatsConfig {
    fn default() -> Self {
        StatsConfig {
            resamples: 10_000,
            coverage: 0.95,
            alpha: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestKind {
    WelchT,
    Ks,
}

impl TestKind {
    pub fn name(self) -> &'static str {
        match self {
            TestKind::WelchT => "welch_t",
            TestKind::Ks => "ks",
        }
    }
}

/// One hypothesis test of a cross-arm comparison, with the effect size,
/// bootstrap interval and power of that comparison attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TestResult {
    pub comparison: String,
    pub metric: String,
    pub timestep: Option<usize>,
    pub test: TestKind,
    pub statistic: f64,
    pub p: f64,
    pub adjusted_p: Option<f64>,
    pub d: Option<f64>,
    pub effect: Option<EffectLabel>,
    pub ci_low: f64,
    pub ci_high: f64,
    pub n_a: usize,
    pub n_b: usize,
    pub power: Option<f64>,
}

impl TestResult {
    pub fn csv_row(&self) -> [String; 13] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.comparison.clone(),
            self.metric.clone(),
            self.timestep.map(|t| t.to_string()).unwrap_or_default(),
            self.test.name().to_string(),
            self.statistic.to_string(),
            self.p.to_string(),
            opt(self.adjusted_p),
            opt(self.d),
            self.ci_low.to_string(),
            self.ci_high.to_string(),
            self.n_a.to_string(),
            self.n_b.to_string(),
            opt(self.power),
        ]
    }
}

/// Welch and KS tests of `a` against `b`. Effect size and power are left
/// empty when the pooled spread is zero.
pub fn compare(
    comparison: &str,
    metric: &str,
    timestep: Option<usize>,
    a: &SampleSet,
    b: &SampleSet,
    cfg: &StatsConfig,
    seed: u64,
) -> Result<Vec<TestResult>> {
    let effect = match cohens_d(a, b) {
        Ok(e) => Some(e),
        Err(StatsError::ZeroPooledSd) => None,
        Err(e) => return Err(e),
    };
    let power = match effect {
        Some(e) => Some(power_two_sample(e.d.abs(), a.len().min(b.len()), cfg.alpha)?),
        None => None,
    };
    let (ci_low, ci_high) = bootstrap_ci(a, b, cfg.resamples, cfg.coverage, seed)?;
    let welch = match welch_t_test(a, b) {
        Ok(w) => w,
        // Two constant samples: identical means are no evidence, distinct ones are conclusive.
        Err(StatsError::ZeroVariance) => TestOutcome {
            statistic: 0.0,
            p: if a.mean() == b.mean() { 1.0 } else { 0.0 },
            df: f64::NAN,
        },
        Err(e) => return Err(e),
    };
    let ks = ks_test(a, b);
    Ok([(TestKind::WelchT, welch), (TestKind::Ks, ks)]
        .into_iter()
        .map(|(test, o)| TestResult {
            comparison: comparison.to_string(),
            metric: metric.to_string(),
            timestep,
            test,
            statistic: o.statistic,
            p: o.p,
            adjusted_p: None,
            d: effect.map(|e| e.d),
            effect: effect.map(|e| e.label),
            ci_low,
            ci_high,
            n_a: a.len(),
            n_b: b.len(),
            power,
        })
        .collect())
}

/// Bonferroni-adjusts every result against the whole slice as one family.
pub fn adjust_family(results: &mut [TestResult]) {
    let ps: Vec<f64> = results.iter().map(|r| r.p).collect();
    for (r, adj) in results.iter_mut().zip(bonferroni(&ps)) {
        r.adjusted_p = Some(adj);
    }
}

pub fn write_stats_csv(results: &[TestResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(STATS_CSV_HEADER)?;
    for r in results {
        w.write_record(r.csv_row())?;
    }
    w.flush()?;
    Ok(())
}
