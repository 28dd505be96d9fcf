use std::cell::OnceCell;
use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::analysis::{analyze_trace, segment_phases, TraceAnalysis};
use super::config::{derive_seed, ArmConfig, ExperimentConfig};
use super::report::{
    complexity_ratio_rows, cross_arm_tests, divergence_tables, emit_report, head_rows, sha256_file, ArmImpact,
    ArmInterventions, ArmReport, Provenance, Report, SeriesPoint, Tables, TrainingSummary, CONFIG_FILE,
};
use super::{ExperimentError, Result, StageCause};
use crate::diffusion::{
    prediction_accuracy, read_checkpoint, train, write_checkpoint, write_loss_curve, EvalBatch, HookRegistry,
    NoiseSchedule, UNet,
};
use crate::faces::{build_dataset, load_external_images, save_png, Dataset};
use crate::intervention::{ablation_groups, ablation_sweep, head_importance, robustness, write_impact_csv};
use crate::metrics::write_metrics_csv;
use crate::stats::TestResult;
use crate::trace::{read_trace, write_trace, TraceFile, TraceHeader};

/// Preview images written per arm by `gen-data`.
const PREVIEW_IMAGES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    GenData,
    Train,
    Trace,
    Analyze,
    Intervene,
    Stats,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 7] = [
        Stage::GenData,
        Stage::Train,
        Stage::Trace,
        Stage::Analyze,
        Stage::Intervene,
        Stage::Stats,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenData => "gen-data",
            Stage::Train => "train",
            Stage::Trace => "trace",
            Stage::Analyze => "analyze",
            Stage::Intervene => "intervene",
            Stage::Stats => "stats",
            Stage::Report => "report",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

type StageResult<T> = std::result::Result<T, StageCause>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArmAnalysis {
    analysis: TraceAnalysis,
    accuracy: Vec<SeriesPoint>,
}

/// The experiment rooted at one output directory. Each stage reads the
/// artifacts of the stages before it, so stages can also run one at a time.
pub struct Pipeline {
    cfg: ExperimentConfig,
    out: PathBuf,
    resume: bool,
    digest: String,
    datasets: BTreeMap<&'static str, OnceCell<Dataset>>,
}

impl Pipeline {
    /// Validates the config, creates the output directory and writes the
    /// resolved `config.json` there.
    pub fn new(cfg: ExperimentConfig, out: &Path, resume: bool) -> Result<Self> {
        cfg.validate()?;
        let config_err = |e: std::io::Error| ExperimentError::Config(format!("{}: {e}", out.display()));
        std::fs::create_dir_all(out.join("stages")).map_err(config_err)?;
        let mut json = serde_json::to_vec_pretty(&ExperimentConfig {
            output_dir: None,
            ..cfg.clone()
        })
        .expect("config serializes");
        json.push(b'\n');
        std::fs::write(out.join(CONFIG_FILE), json).map_err(config_err)?;
        let datasets = cfg.arms().iter().map(|(l, _)| (*l, OnceCell::new())).collect();
        Ok(Pipeline {
            digest: cfg.digest_hex(),
            cfg,
            out: out.to_path_buf(),
            resume,
            datasets,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    fn marker(&self, stage: Stage) -> PathBuf {
        self.out.join("stages").join(format!("{}.done", stage.name()))
    }

    fn is_done(&self, stage: Stage) -> bool {
        std::fs::read_to_string(self.marker(stage)).is_ok_and(|d| d.trim() == self.digest)
    }

    fn run_stage<T>(&self, stage: Stage, f: impl FnOnce(&Self) -> StageResult<T>) -> Result<Option<T>> {
        if self.resume && self.is_done(stage) {
            log::info!("stage {stage}: already complete, skipping");
            return Ok(None);
        }
        log::info!("stage {stage}: running");
        let wrap = |cause: StageCause| match cause {
            StageCause::Experiment(e) if matches!(*e, ExperimentError::SingleArm(_) | ExperimentError::Config(_)) => *e,
            cause => ExperimentError::Stage { stage, cause },
        };
        // Later stages depend on this one's outputs.
        for later in Stage::ALL.iter().filter(|s| **s > stage) {
            let _ = std::fs::remove_file(self.marker(*later));
        }
        let value = f(self).map_err(wrap)?;
        std::fs::write(self.marker(stage), format!("{}\n", self.digest))
            .map_err(|e| wrap(StageCause::Io(e)))?;
        Ok(Some(value))
    }

    fn seed(&self, purpose: &str) -> u64 {
        derive_seed(self.cfg.seed, purpose)
    }

    fn schedule(&self) -> StageResult<NoiseSchedule> {
        Ok(self.cfg.schedule()?)
    }

    fn dataset(&self, arm: &'static str) -> StageResult<&Dataset> {
        let cell = &self.datasets[arm];
        if let Some(d) = cell.get() {
            return Ok(d);
        }
        let data = match self.arm_config(arm) {
            ArmConfig::Synthetic(s) => build_dataset(&self.cfg.dataset_config(s))?,
            ArmConfig::External { dir } => load_external_images(dir, self.cfg.model.image_size, self.cfg.model.channels)?,
        };
        log::info!("arm {arm}: {} images", data.len());
        Ok(cell.get_or_init(|| data))
    }

    fn arm_config(&self, arm: &str) -> &ArmConfig {
        match arm {
            "A" => &self.cfg.arm_a,
            _ => self.cfg.arm_b.as_ref().expect("arm B configured"),
        }
    }

    fn arms(&self) -> Vec<&'static str> {
        self.cfg.arms().into_iter().map(|(l, _)| l).collect()
    }

    fn require_two_arms(&self) -> StageResult<()> {
        match self.arms().len() {
            2 => Ok(()),
            n => Err(ExperimentError::SingleArm(n).into()),
        }
    }

    fn path(&self, parts: &[&str]) -> StageResult<PathBuf> {
        let p = parts.iter().fold(self.out.clone(), |p, s| p.join(s));
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(p)
    }

    fn existing(&self, parts: &[&str], producer: Stage) -> StageResult<PathBuf> {
        let p = parts.iter().fold(self.out.clone(), |p, s| p.join(s));
        if !p.exists() {
            return Err(StageCause::Missing(format!("{} (run `{producer}` first)", p.display())));
        }
        Ok(p)
    }

    fn read_json<T: DeserializeOwned>(&self, parts: &[&str], producer: Stage) -> StageResult<T> {
        let p = self.existing(parts, producer)?;
        Ok(serde_json::from_slice(&std::fs::read(p)?)?)
    }

    fn write_json<T: Serialize>(&self, parts: &[&str], value: &T) -> StageResult<()> {
        let mut bytes = serde_json::to_vec_pretty(value)?;
        bytes.push(b'\n');
        std::fs::write(self.path(parts)?, bytes)?;
        Ok(())
    }

    fn model(&self, arm: &str) -> StageResult<UNet> {
        let p = self.existing(&["models", &format!("{arm}.ckpt")], Stage::Train)?;
        Ok(read_checkpoint(&p, &self.cfg.model)?)
    }

    /// Writes each arm's manifest and a few preview images.
    pub fn gen_data(&self) -> Result<()> {
        self.run_stage(Stage::GenData, |p| {
            for arm in p.arms() {
                let data = p.dataset(arm)?;
                if !data.manifest.is_empty() {
                    data.write_manifest(&p.path(&["data", arm, "manifest.csv"])?)?;
                }
                for (i, img) in data.images.iter().take(PREVIEW_IMAGES).enumerate() {
                    save_png(img, &p.path(&["data", arm, &format!("preview_{i:03}.png")])?)?;
                }
            }
            Ok(())
        })?;
        Ok(())
    }

    pub fn train(&self) -> Result<()> {
        self.run_stage(Stage::Train, |p| {
            let sched = p.schedule()?;
            for arm in p.arms() {
                let data = p.dataset(arm)?;
                let started = std::time::Instant::now();
                let outcome = train(data, &p.cfg.model, &sched, &p.cfg.train, p.seed(&format!("{arm}/train")))?;
                log::info!(
                    "arm {arm}: trained {} steps in {:.1}s",
                    outcome.losses.len(),
                    started.elapsed().as_secs_f64()
                );
                write_checkpoint(&outcome.model, &p.path(&["models", &format!("{arm}.ckpt")])?)?;
                write_loss_curve(&outcome.losses, &p.path(&["models", &format!("loss_{arm}.csv")])?)?;
                p.write_json(&["models", &format!("loss_{arm}.json")], &outcome.losses)?;
            }
            Ok(())
        })?;
        Ok(())
    }

    /// Captures every activation and attention map of a fixed batch at each
    /// analysis timestep.
    pub fn trace(&self) -> Result<()> {
        self.run_stage(Stage::Trace, |p| {
            let sched = p.schedule()?;
            for arm in p.arms() {
                let model = p.model(arm)?;
                let seed = p.seed(&format!("{arm}/trace"));
                let batch = EvalBatch::first(p.dataset(arm)?, p.cfg.analysis.trace_batch, seed)?;
                let mut records = Vec::new();
                for t in p.cfg.analysis_timesteps() {
                    let mut hooks = HookRegistry::new();
                    hooks.subscribe_all(&model);
                    model.forward(&batch.noised(&sched, t)?, t, Some(&mut hooks), None)?;
                    records.extend(hooks.take_records());
                }
                let file = TraceFile::new(
                    TraceHeader {
                        seed,
                        config_digest: p.cfg.digest(),
                    },
                    records,
                );
                let bytes = write_trace(&file, &p.path(&["traces", &format!("{arm}.dtrc")])?)?;
                log::info!("arm {arm}: {} trace records, {bytes} bytes", file.records.len());
            }
            Ok(())
        })?;
        Ok(())
    }

    pub fn analyze(&self) -> Result<()> {
        self.run_stage(Stage::Analyze, |p| {
            let sched = p.schedule()?;
            for arm in p.arms() {
                let trace = read_trace(&p.existing(&["traces", &format!("{arm}.dtrc")], Stage::Trace)?)?;
                let analysis = analyze_trace(&trace, Some(arm), &p.cfg.analysis)?;
                let model = p.model(arm)?;
                let seed = p.seed(&format!("{arm}/accuracy"));
                let accuracy = p
                    .cfg
                    .analysis_timesteps()
                    .into_iter()
                    .map(|t| {
                        let value =
                            prediction_accuracy(&model, p.dataset(arm)?, &sched, t, p.cfg.analysis.accuracy_samples, seed)?;
                        Ok(SeriesPoint { timestep: t, value })
                    })
                    .collect::<StageResult<Vec<_>>>()?;
                write_metrics_csv(&analysis.metrics, &p.path(&["analysis", &format!("metrics_{arm}.csv")])?)?;
                p.write_json(&["analysis", &format!("{arm}.json")], &ArmAnalysis { analysis, accuracy })?;
            }
            Ok(())
        })?;
        Ok(())
    }

    pub fn intervene(&self) -> Result<()> {
        self.run_stage(Stage::Intervene, |p| {
            let sched = p.schedule()?;
            let ic = &p.cfg.interventions;
            let timesteps = p.cfg.analysis_timesteps();
            for arm in p.arms() {
                let model = p.model(arm)?;
                let seed = p.seed(&format!("{arm}/eval"));
                let eval = EvalBatch::draw(p.dataset(arm)?, ic.eval_count, seed)?;
                let mut out = ArmInterventions::default();
                if ic.ablation {
                    let groups: Vec<_> = ablation_groups(&model)
                        .into_iter()
                        .filter(|g| !g.layers.is_empty())
                        .collect();
                    out.ablation = ablation_sweep(&model, &groups, &timesteps, &eval, &sched, seed)?;
                }
                for &t in &timesteps {
                    if ic.heads {
                        out.heads.extend(head_importance(&model, &eval, &sched, t, seed)?);
                    }
                    if ic.robustness {
                        let (value, results) = robustness(&model, &eval, &sched, t, seed)?;
                        out.robustness.push(SeriesPoint { timestep: t, value });
                        out.robustness_results.extend(results);
                    }
                }
                write_impact_csv(&out.ablation, &p.path(&["interventions", &format!("ablation_{arm}.csv")])?)?;
                p.write_json(&["interventions", &format!("{arm}.json")], &out)?;
            }
            Ok(())
        })?;
        Ok(())
    }

    fn arm_analysis(&self, arm: &str) -> StageResult<ArmAnalysis> {
        self.read_json(&["analysis", &format!("{arm}.json")], Stage::Analyze)
    }

    pub fn stats(&self) -> Result<()> {
        self.run_stage(Stage::Stats, |p| {
            p.require_two_arms()?;
            let (a, b) = (p.arm_analysis("A")?, p.arm_analysis("B")?);
            let results = cross_arm_tests(&p.cfg, &a.analysis, &b.analysis)?;
            crate::stats::write_stats_csv(&results, &p.path(&["stats", "cross_arm_stats.csv"])?)?;
            p.write_json(&["stats", "cross_arm_stats.json"], &results)?;
            Ok(())
        })?;
        Ok(())
    }

    /// Assembles the report from the stage artifacts and writes it with its
    /// tables and plot data.
    pub fn report(&self) -> Result<Report> {
        let mut built = None;
        self.run_stage(Stage::Report, |p| {
            let report = p.build_report()?;
            emit_report(&report, &p.out)?;
            built = Some(report);
            Ok(())
        })?;
        match built {
            Some(r) => Ok(r),
            None => super::report::read_report(&self.out).map_err(|cause| ExperimentError::Stage {
                stage: Stage::Report,
                cause,
            }),
        }
    }

    fn build_report(&self) -> StageResult<Report> {
        self.require_two_arms()?;
        let mut arms = BTreeMap::new();
        let mut analyses = BTreeMap::new();
        let mut trace_digests = BTreeMap::new();
        let mut derived_seeds = BTreeMap::new();
        derived_seeds.insert("data".to_string(), self.seed("data"));
        let mut head_table = Vec::new();
        let mut ablation = Vec::new();
        let mut phases = BTreeMap::new();
        for arm in self.arms() {
            for purpose in ["train", "trace", "accuracy", "eval"] {
                let key = format!("{arm}/{purpose}");
                derived_seeds.insert(key.clone(), self.seed(&key));
            }
            let trace_path = self.existing(&["traces", &format!("{arm}.dtrc")], Stage::Trace)?;
            trace_digests.insert(arm.to_string(), sha256_file(&trace_path)?);
            let losses: Vec<f32> = self.read_json(&["models", &format!("loss_{arm}.json")], Stage::Train)?;
            let ArmAnalysis { analysis, accuracy } = self.arm_analysis(arm)?;
            let interventions: ArmInterventions =
                self.read_json(&["interventions", &format!("{arm}.json")], Stage::Intervene)?;
            head_table.extend(head_rows(arm, &analysis, &interventions.heads));
            ablation.extend(interventions.ablation.iter().map(|r| ArmImpact {
                arm: arm.to_string(),
                result: r.clone(),
            }));
            let acc: Vec<(usize, f64)> = accuracy.iter().map(|p| (p.timestep, p.value)).collect();
            let arm_phases = match segment_phases(&analysis.complexity_series(), &acc, self.cfg.timesteps) {
                Ok(ph) => ph,
                Err(e) => {
                    log::warn!("arm {arm}: no phase segmentation: {e}");
                    Vec::new()
                }
            };
            phases.insert(arm.to_string(), arm_phases);
            arms.insert(
                arm.to_string(),
                ArmReport {
                    source: self.arm_config(arm).clone(),
                    images: self.dataset(arm)?.len(),
                    training: TrainingSummary::from_losses(&losses),
                    accuracy,
                    metrics: analysis.metrics.clone(),
                    circuit_complexity: analysis.circuit.clone(),
                    samples: analysis.samples.clone(),
                    degenerate_pairs: analysis.degenerate_pairs.clone(),
                    interventions,
                },
            );
            analyses.insert(arm, analysis);
        }
        let (a, b) = (&analyses["A"], &analyses["B"]);
        let cross_arm_stats: Vec<TestResult> = self.read_json(&["stats", "cross_arm_stats.json"], Stage::Stats)?;
        Ok(Report {
            provenance: Provenance {
                version: env!("CARGO_PKG_VERSION").to_string(),
                config_digest: self.digest.clone(),
                seed: self.cfg.seed,
                derived_seeds,
                timesteps: self.cfg.timesteps,
                analysis_timesteps: self.cfg.analysis_timesteps(),
                trace_digests,
                notes: vec![
                    "ranks are strict within each timestep; equal impacts are ordered by target name".into(),
                    "a layer-ablation table that gives two groups the same rank cannot come from strict ranking; \
                     such tables are treated as inconsistent"
                        .into(),
                    "prediction accuracy is max(0, 1 - MSE(eps_hat, eps) / Var(eps)) averaged over draws, \
                     a convention of this tool"
                        .into(),
                    "ratio = arm B / arm A circuit complexity; sd and sem describe per-image circuit complexity".into(),
                    "statistical tests treat each traced image as one observation".into(),
                    format!(
                        "attention entropy uses {} normalization",
                        match self.cfg.analysis.entropy_normalization {
                            crate::metrics::EntropyNormalization::Joint => "joint",
                            crate::metrics::EntropyNormalization::PerRow => "per-row",
                        }
                    ),
                ],
            },
            arms,
            tables: Tables {
                complexity_ratio: complexity_ratio_rows(a, b),
                head_specialization: head_table,
                ablation,
                cross_arm_stats,
            },
            divergence: divergence_tables(a, b)?,
            phases,
        })
    }

    /// Every stage in order. With `resume`, completed stages are skipped.
    pub fn run_all(&self) -> Result<Report> {
        self.require_two_arms().map_err(|cause| match cause {
            StageCause::Experiment(e) => *e,
            cause => ExperimentError::Stage {
                stage: Stage::GenData,
                cause,
            },
        })?;
        self.gen_data()?;
        self.train()?;
        self.trace()?;
        self.analyze()?;
        self.intervene()?;
        self.stats()?;
        self.report()
    }
}
