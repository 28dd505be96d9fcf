use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::analysis::{analyze_trace, Phase, TimestepSamples, TraceAnalysis};
use super::config::{ArmConfig, ExperimentConfig};
use super::{ExperimentError, Result, StageCause};
use crate::intervention::{write_impact_csv, ImpactResult};
use crate::metrics::{divergence, write_metrics_csv, CircuitComplexity, MetricKind, MetricValue};
use crate::stats::{adjust_family, compare, write_stats_csv, SampleSet, TestResult};
use crate::trace::read_trace;

pub const REPORT_FILE: &str = "report.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub version: String,
    pub config_digest: String,
    pub seed: u64,
    pub derived_seeds: BTreeMap<String, u64>,
    pub timesteps: usize,
    pub analysis_timesteps: Vec<usize>,
    /// SHA-256 of each arm's trace file.
    pub trace_digests: BTreeMap<String, String>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesPoint {
    pub timestep: usize,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub steps: usize,
    /// Steps averaged at each end of the curve.
    pub window: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub loss_ratio: f64,
    pub losses: Vec<f32>,
}

impl TrainingSummary {
    /// `None` for an empty curve.
    pub fn from_losses(losses: &[f32]) -> Option<Self> {
        if losses.is_empty() {
            return None;
        }
        let window = (losses.len() / 10).clamp(1, 100);
        let mean = |w: &[f32]| w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
        let initial_loss = mean(&losses[..window]);
        let final_loss = mean(&losses[losses.len() - window..]);
        Some(TrainingSummary {
            steps: losses.len(),
            window,
            initial_loss,
            final_loss,
            loss_ratio: final_loss / initial_loss,
            losses: losses.to_vec(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ArmInterventions {
    pub ablation: Vec<ImpactResult>,
    pub heads: Vec<ImpactResult>,
    pub robustness: Vec<SeriesPoint>,
    pub robustness_results: Vec<ImpactResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub source: ArmConfig,
    pub images: usize,
    pub training: Option<TrainingSummary>,
    pub accuracy: Vec<SeriesPoint>,
    pub metrics: Vec<MetricValue>,
    pub circuit_complexity: Vec<CircuitComplexity>,
    pub samples: Vec<TimestepSamples>,
    pub degenerate_pairs: Vec<String>,
    pub interventions: ArmInterventions,
}

/// Arm-B over arm-A circuit complexity. The spread columns describe the
/// per-image circuit complexities (sample SD and its standard error).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRatioRow {
    pub timestep: usize,
    pub complexity_a: f64,
    pub complexity_b: f64,
    pub ratio: Option<f64>,
    pub sd_a: Option<f64>,
    pub sem_a: Option<f64>,
    pub sd_b: Option<f64>,
    pub sem_b: Option<f64>,
    pub n_a: usize,
    pub n_b: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadRow {
    pub arm: String,
    pub layer: String,
    pub head: usize,
    pub timestep: usize,
    pub entropy: f64,
    pub specialization: f64,
    /// Impact of ablating this head alone.
    pub importance: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmImpact {
    pub arm: String,
    pub result: ImpactResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tables {
    pub complexity_ratio: Vec<ComplexityRatioRow>,
    pub head_specialization: Vec<HeadRow>,
    pub ablation: Vec<ArmImpact>,
    pub cross_arm_stats: Vec<TestResult>,
}

/// Per-timestep `|A - B|`. Each value's `layer` field names the metric it
/// was derived from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub entropy: Vec<MetricValue>,
    pub specialization: Vec<MetricValue>,
    pub complexity: Vec<MetricValue>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub provenance: Provenance,
    pub arms: BTreeMap<String, ArmReport>,
    pub tables: Tables,
    pub divergence: Divergence,
    pub phases: BTreeMap<String, Vec<Phase>>,
}

fn spread(v: &[f64]) -> (Option<f64>, Option<f64>) {
    if v.len() < 2 {
        return (None, None);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let sd = (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    (Some(sd), Some(sd / n.sqrt()))
}

pub(crate) fn complexity_ratio_rows(a: &TraceAnalysis, b: &TraceAnalysis) -> Vec<ComplexityRatioRow> {
    a.circuit
        .iter()
        .filter_map(|ca| {
            let cb = b.circuit.iter().find(|c| c.timestep == ca.timestep)?;
            let samples = |x: &TraceAnalysis| {
                x.samples
                    .iter()
                    .find(|s| s.timestep == ca.timestep)
                    .map(|s| s.complexity.clone())
                    .unwrap_or_default()
            };
            let (sa, sb) = (samples(a), samples(b));
            let ((sd_a, sem_a), (sd_b, sem_b)) = (spread(&sa), spread(&sb));
            Some(ComplexityRatioRow {
                timestep: ca.timestep,
                complexity_a: ca.mean,
                complexity_b: cb.mean,
                ratio: (ca.mean != 0.0).then(|| cb.mean / ca.mean),
                sd_a,
                sem_a,
                sd_b,
                sem_b,
                n_a: sa.len(),
                n_b: sb.len(),
            })
        })
        .collect()
}

pub(crate) fn divergence_tables(a: &TraceAnalysis, b: &TraceAnalysis) -> Result<Divergence> {
    let n = |x: &TraceAnalysis| x.samples.first().map_or(0, |s| s.complexity.len().max(s.entropy.len()));
    let n = n(a).min(n(b));
    let build = |name: &str, sa: Vec<(usize, f64)>, sb: Vec<(usize, f64)>| -> Result<Vec<MetricValue>> {
        Ok(divergence(&sa, &sb)
            .map_err(|e| ExperimentError::InvalidInput(e.to_string()))?
            .into_iter()
            .map(|(t, v)| MetricValue {
                kind: MetricKind::Divergence,
                value: v,
                layer: Some(name.to_string()),
                head: None,
                timestep: Some(t),
                arm: None,
                n,
            })
            .collect())
    };
    Ok(Divergence {
        entropy: build(
            "entropy",
            a.head_mean_series(MetricKind::Entropy),
            b.head_mean_series(MetricKind::Entropy),
        )?,
        specialization: build(
            "specialization",
            a.head_mean_series(MetricKind::Specialization),
            b.head_mean_series(MetricKind::Specialization),
        )?,
        complexity: build("complexity", a.complexity_series(), b.complexity_series())?,
    })
}

/// Welch and KS comparisons of per-image complexity, entropy and
/// specialization at every shared timestep, Bonferroni-adjusted as one
/// family.
pub(crate) fn cross_arm_tests(cfg: &ExperimentConfig, a: &TraceAnalysis, b: &TraceAnalysis) -> Result<Vec<TestResult>> {
    let mut out = Vec::new();
    for sa in &a.samples {
        let Some(sb) = b.samples.iter().find(|s| s.timestep == sa.timestep) else {
            continue;
        };
        let t = sa.timestep;
        for (metric, va, vb) in [
            ("complexity", &sa.complexity, &sb.complexity),
            ("entropy", &sa.entropy, &sb.entropy),
            ("specialization", &sa.specialization, &sb.specialization),
        ] {
            if va.len() < 2 || vb.len() < 2 {
                continue;
            }
            let stats_err = |e: crate::stats::StatsError| ExperimentError::InvalidInput(e.to_string());
            let set_a = SampleSet::new(format!("A/{metric}/{t}"), va.clone()).map_err(stats_err)?;
            let set_b = SampleSet::new(format!("B/{metric}/{t}"), vb.clone()).map_err(stats_err)?;
            let seed = super::config::derive_seed(cfg.seed, &format!("stats/{metric}/{t}"));
            out.extend(compare("A_vs_B", metric, Some(t), &set_a, &set_b, &cfg.stats, seed).map_err(stats_err)?);
        }
    }
    adjust_family(&mut out);
    Ok(out)
}

pub(crate) fn head_rows(arm: &str, analysis: &TraceAnalysis, heads: &[ImpactResult]) -> Vec<HeadRow> {
    analysis
        .metrics
        .iter()
        .filter(|m| m.kind == MetricKind::Entropy)
        .filter_map(|m| {
            let (head, t) = (m.head?, m.timestep?);
            let spec = analysis.metrics.iter().find(|s| {
                s.kind == MetricKind::Specialization && s.layer == m.layer && s.head == m.head && s.timestep == m.timestep
            })?;
            let label = format!("head{head}");
            Some(HeadRow {
                arm: arm.to_string(),
                layer: m.layer.clone().unwrap_or_default(),
                head,
                timestep: t,
                entropy: m.value,
                specialization: spec.value,
                importance: heads
                    .iter()
                    .find(|r| r.target == label && r.timestep == t)
                    .map(|r| r.impact),
            })
        })
        .collect()
}

pub fn sha256_file(path: &Path) -> std::io::Result<String> {
    Ok(hex::encode(Sha256::digest(std::fs::read(path)?)))
}

fn write_rows<const N: usize>(path: &Path, header: [&str; N], rows: impl Iterator<Item = [String; N]>) -> std::result::Result<(), StageCause> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush()?;
    Ok(())
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `report.json`, one CSV per table and the `plotdata/` directory.
pub fn emit_report(report: &Report, dir: &Path) -> std::result::Result<(), StageCause> {
    let plot = dir.join("plotdata");
    std::fs::create_dir_all(&plot)?;
    let mut json = serde_json::to_vec_pretty(report)?;
    json.push(b'\n');
    std::fs::write(dir.join(REPORT_FILE), json)?;

    write_rows(
        &dir.join("complexity_ratio.csv"),
        [
            "timestep",
            "complexity_a",
            "complexity_b",
            "ratio",
            "sd_a",
            "sem_a",
            "sd_b",
            "sem_b",
            "n_a",
            "n_b",
        ],
        report.tables.complexity_ratio.iter().map(|r| {
            [
                r.timestep.to_string(),
                r.complexity_a.to_string(),
                r.complexity_b.to_string(),
                opt(r.ratio),
                opt(r.sd_a),
                opt(r.sem_a),
                opt(r.sd_b),
                opt(r.sem_b),
                r.n_a.to_string(),
                r.n_b.to_string(),
            ]
        }),
    )?;
    write_rows(
        &dir.join("head_specialization.csv"),
        ["arm", "layer", "head", "timestep", "entropy", "specialization", "importance"],
        report.tables.head_specialization.iter().map(|r| {
            [
                r.arm.clone(),
                r.layer.clone(),
                r.head.to_string(),
                r.timestep.to_string(),
                r.entropy.to_string(),
                r.specialization.to_string(),
                opt(r.importance),
            ]
        }),
    )?;
    write_stats_csv(&report.tables.cross_arm_stats, &dir.join("cross_arm_stats.csv"))?;

    let by_kind = |kinds: &[MetricKind]| -> Vec<MetricValue> {
        report
            .arms
            .values()
            .flat_map(|a| a.metrics.iter())
            .filter(|m| kinds.contains(&m.kind))
            .cloned()
            .collect()
    };
    write_metrics_csv(&by_kind(&[MetricKind::Complexity]), &plot.join("complexity_evolution.csv"))?;
    write_metrics_csv(
        &by_kind(&[MetricKind::Entropy, MetricKind::Specialization]),
        &plot.join("entropy_heads.csv"),
    )?;
    write_metrics_csv(&by_kind(&[MetricKind::Ife]), &plot.join("information_flow.csv"))?;
    let d = &report.divergence;
    let div: Vec<MetricValue> = d
        .entropy
        .iter()
        .chain(&d.specialization)
        .chain(&d.complexity)
        .cloned()
        .collect();
    write_metrics_csv(&div, &plot.join("divergence.csv"))?;

    for (arm, a) in &report.arms {
        write_metrics_csv(&a.metrics, &dir.join(format!("metrics_{arm}.csv")))?;
        let ablation: Vec<ImpactResult> = report
            .tables
            .ablation
            .iter()
            .filter(|r| &r.arm == arm)
            .map(|r| r.result.clone())
            .collect();
        write_impact_csv(&ablation, &dir.join(format!("ablation_{arm}.csv")))?;
        let mut impacts = a.interventions.ablation.clone();
        impacts.extend(a.interventions.heads.iter().cloned());
        impacts.extend(a.interventions.robustness_results.iter().cloned());
        write_impact_csv(&impacts, &plot.join(format!("ablation_impacts_{arm}.csv")))?;
        let losses = a.training.as_ref().map(|t| t.losses.as_slice()).unwrap_or_default();
        crate::diffusion::write_loss_curve(losses, &plot.join(format!("loss_curve_{arm}.csv")))?;
    }
    Ok(())
}

pub fn read_report(dir: &Path) -> std::result::Result<Report, StageCause> {
    let path = dir.join(REPORT_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => StageCause::Missing(path.display().to_string()),
        _ => StageCause::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// One number from the report and its recomputation.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCheck {
    pub what: String,
    pub reported: f64,
    pub recomputed: Option<f64>,
}

impl VerifyCheck {
    pub fn passed(&self) -> bool {
        self.recomputed.is_some_and(|v| v.to_bits() == self.reported.to_bits())
    }
}

enum Candidate<'a> {
    Metric(&'a str, &'a MetricValue),
    Ratio(&'a ComplexityRatioRow),
    Divergence(&'a MetricValue),
    Stat(&'a TestResult),
}

fn same_cell(a: &MetricValue, b: &MetricValue) -> bool {
    a.kind == b.kind && a.layer == b.layer && a.head == b.head && a.timestep == b.timestep
}

/// Re-derives `checks` randomly chosen report numbers from the stored
/// traces and config, and checks the trace digests. Fails unless every
/// check matches bit for bit.
pub fn verify_report(dir: &Path, checks: usize, seed: u64) -> Result<Vec<VerifyCheck>> {
    let fail = |m: String| ExperimentError::Verify(m);
    let report = read_report(dir).map_err(|e| fail(e.to_string()))?;
    let cfg = ExperimentConfig::load(&dir.join(CONFIG_FILE)).map_err(|e| fail(e.to_string()))?;
    if cfg.digest_hex() != report.provenance.config_digest {
        return Err(fail("config.json does not match the report's config digest".into()));
    }
    let mut recomputed: BTreeMap<String, TraceAnalysis> = BTreeMap::new();
    for (arm, digest) in &report.provenance.trace_digests {
        let path = dir.join("traces").join(format!("{arm}.dtrc"));
        let actual = sha256_file(&path).map_err(|e| fail(format!("{}: {e}", path.display())))?;
        if &actual != digest {
            return Err(fail(format!("trace {} does not match its recorded digest", path.display())));
        }
        let trace = read_trace(&path).map_err(|e| fail(e.to_string()))?;
        let analysis = analyze_trace(&trace, Some(arm), &cfg.analysis).map_err(|e| fail(e.to_string()))?;
        recomputed.insert(arm.clone(), analysis);
    }

    let mut candidates: Vec<Candidate> = Vec::new();
    for (arm, a) in &report.arms {
        candidates.extend(a.metrics.iter().map(|m| Candidate::Metric(arm, m)));
    }
    candidates.extend(report.tables.complexity_ratio.iter().map(Candidate::Ratio));
    let d = &report.divergence;
    candidates.extend(d.entropy.iter().chain(&d.specialization).chain(&d.complexity).map(Candidate::Divergence));
    candidates.extend(report.tables.cross_arm_stats.iter().map(Candidate::Stat));
    if candidates.is_empty() {
        return Err(fail("report contains no recomputable numbers".into()));
    }

    let pair = || match (recomputed.get("A"), recomputed.get("B")) {
        (Some(a), Some(b)) => Some((a, b)),
        _ => None,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for c in candidates.choose_multiple(&mut rng, checks) {
        let check = match c {
            Candidate::Metric(arm, m) => VerifyCheck {
                what: format!(
                    "arm {arm} {} layer={} head={:?} t={:?}",
                    m.kind.name(),
                    m.layer.as_deref().unwrap_or("circuit"),
                    m.head,
                    m.timestep
                ),
                reported: m.value,
                recomputed: recomputed
                    .get(*arm)
                    .and_then(|a| a.metrics.iter().find(|r| same_cell(r, m)))
                    .map(|r| r.value),
            },
            Candidate::Ratio(row) => VerifyCheck {
                what: format!("complexity ratio t={}", row.timestep),
                reported: row.ratio.unwrap_or(f64::NAN),
                recomputed: pair().and_then(|(a, b)| {
                    complexity_ratio_rows(a, b)
                        .into_iter()
                        .find(|r| r.timestep == row.timestep)
                        .and_then(|r| r.ratio)
                }),
            },
            Candidate::Divergence(m) => VerifyCheck {
                what: format!(
                    "{} divergence t={:?}",
                    m.layer.as_deref().unwrap_or_default(),
                    m.timestep
                ),
                reported: m.value,
                recomputed: pair()
                    .and_then(|(a, b)| divergence_tables(a, b).ok())
                    .and_then(|d| {
                        d.entropy
                            .into_iter()
                            .chain(d.specialization)
                            .chain(d.complexity)
                            .find(|r| same_cell(r, m))
                    })
                    .map(|r| r.value),
            },
            Candidate::Stat(s) => VerifyCheck {
                what: format!("{} {} statistic t={:?}", s.metric, s.test.name(), s.timestep),
                reported: s.statistic,
                recomputed: pair()
                    .and_then(|(a, b)| cross_arm_tests(&cfg, a, b).ok())
                    .and_then(|rs| {
                        rs.into_iter()
                            .find(|r| r.metric == s.metric && r.test == s.test && r.timestep == s.timestep)
                    })
                    .map(|r| r.statistic),
            },
        };
        out.push(check);
    }
    if let Some(bad) = out.iter().find(|c| !c.passed()) {
        return Err(fail(format!(
            "{}: reported {} but recomputed {:?}",
            bad.what, bad.reported, bad.recomputed
        )));
    }
    Ok(out)
}
