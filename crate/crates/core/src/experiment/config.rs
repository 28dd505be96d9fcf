use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ExperimentError, Result};
use crate::diffusion::{cosine_schedule, NoiseSchedule, TrainConfig, UNetConfig, COSINE_OFFSET};
use crate::faces::{CorrelationTable, DatasetConfig, RenderStyle};
use crate::metrics::{EntropyNormalization, DEFAULT_BINS, DEFAULT_SPARSITY_EPS};
use crate::stats::StatsConfig;

/// Analysis timesteps on a 1000-step axis; rescaled to the configured `T`.
pub const REFERENCE_TIMESTEPS: [usize; 4] = [100, 300, 600, 900];

pub const ARM_LABELS: [&str; 2] = ["A", "B"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticArm {
    pub count: usize,
    pub style: RenderStyle,
    pub correlation_table: CorrelationTable,
}

impl Default for SyntheticArm {
    fn default() -> Self {
        SyntheticArm {
            count: 512,
            style: RenderStyle::Crisp,
            correlation_table: CorrelationTable::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ArmConfig {
    Synthetic(SyntheticArm),
    /// A directory of PNG files.
    External { dir: PathBuf },
}

impl ArmConfig {
    pub fn synthetic(style: RenderStyle) -> Self {
        ArmConfig::Synthetic(SyntheticArm {
            style,
            ..SyntheticArm::default()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InterventionConfig {
    pub ablation: bool,
    pub heads: bool,
    pub robustness: bool,
    /// Size of the fixed evaluation set shared by every intervention.
    pub eval_count: usize,
}

impl Default for InterventionConfig {
    fn default() -> Self {
        InterventionConfig {
            ablation: true,
            heads: true,
            robustness: true,
            eval_count: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    /// Explicit timesteps; `None` rescales the reference set to `T`.
    pub timesteps: Option<Vec<usize>>,
    /// Images pushed through the instrumented forward pass.
    pub trace_batch: usize,
    pub accuracy_samples: usize,
    pub bins: usize,
    pub sparsity_eps: f64,
    pub entropy_normalization: EntropyNormalization,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            timesteps: None,
            trace_batch: 8,
            accuracy_samples: 64,
            bins: DEFAULT_BINS,
            sparsity_eps: DEFAULT_SPARSITY_EPS,
            entropy_normalization: EntropyNormalization::Joint,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub arm_a: ArmConfig,
    /// `None` runs a single-arm experiment; cross-arm stages then refuse to run.
    pub arm_b: Option<ArmConfig>,
    pub model: UNetConfig,
    pub timesteps: usize,
    pub train: TrainConfig,
    pub analysis: AnalysisConfig,
    pub interventions: InterventionConfig,
    pub stats: StatsConfig,
    /// Not part of the digest: moving the output elsewhere changes nothing.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            arm_a: ArmConfig::synthetic(RenderStyle::Crisp),
            arm_b: Some(ArmConfig::synthetic(RenderStyle::Textured)),
            model: UNetConfig::default(),
            timesteps: 200,
            train: TrainConfig::default(),
            analysis: AnalysisConfig::default(),
            interventions: InterventionConfig::default(),
            stats: StatsConfig::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ExperimentError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        self.model.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        if self.timesteps < 2 {
            return bad(format!("timesteps must be at least 2, got {}", self.timesteps));
        }
        for (label, arm) in self.arms() {
            match arm {
                ArmConfig::Synthetic(s) => {
                    if s.count == 0 {
                        return bad(format!("arm {label}: count must be positive"));
                    }
                    self.dataset_config(s)
                        .validate()
                        .map_err(|e| ExperimentError::Config(format!("arm {label}: {e}")))?;
                }
                ArmConfig::External { dir } if !dir.is_dir() => {
                    return bad(format!("arm {label}: {} is not a directory", dir.display()));
                }
                ArmConfig::External { .. } => {}
            }
        }
        let ts = self.analysis_timesteps();
        if ts.is_empty() {
            return bad("no analysis timesteps".into());
        }
        if let Some(&t) = ts.iter().find(|&&t| t >= self.timesteps) {
            return bad(format!("analysis timestep {t} outside [0, {})", self.timesteps));
        }
        if ts.windows(2).any(|w| w[0] == w[1]) {
            return bad(format!("duplicate analysis timesteps {ts:?}"));
        }
        if self.analysis.trace_batch == 0 || self.analysis.accuracy_samples == 0 || self.interventions.eval_count == 0 {
            return bad("trace_batch, accuracy_samples and eval_count must be positive".into());
        }
        if self.analysis.bins < 2 {
            return bad(format!("bins must be at least 2, got {}", self.analysis.bins));
        }
        if self.train.batch_size == 0 {
            return bad("train.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Configured arms with their labels, `A` first.
    pub fn arms(&self) -> Vec<(&'static str, &ArmConfig)> {
        let mut out = vec![(ARM_LABELS[0], &self.arm_a)];
        if let Some(b) = &self.arm_b {
            out.push((ARM_LABELS[1], b));
        }
        out
    }

    /// Sorted analysis timesteps.
    pub fn analysis_timesteps(&self) -> Vec<usize> {
        let mut ts = match &self.analysis.timesteps {
            Some(ts) => ts.clone(),
            None => REFERENCE_TIMESTEPS
                .iter()
                .map(|&t| ((t as f64 * self.timesteps as f64 / 1000.0).round() as usize).min(self.timesteps - 1))
                .collect(),
        };
        ts.sort_unstable();
        ts
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        cosine_schedule(self.timesteps, COSINE_OFFSET).map_err(|e| ExperimentError::Config(e.to_string()))
    }

    /// Both arms draw the same attribute sequence; they differ only in
    /// rendering.
    pub fn dataset_config(&self, arm: &SyntheticArm) -> DatasetConfig {
        DatasetConfig {
            count: arm.count,
            image_size: self.model.image_size,
            channels: self.model.channels,
            correlation_table: arm.correlation_table.clone(),
            seed: derive_seed(self.seed, "data"),
            style: arm.style,
        }
    }

    /// SHA-256 of the canonical JSON form, output directory excluded.
    pub fn digest(&self) -> [u8; 32] {
        let canonical = ExperimentConfig {
            output_dir: None,
            ..self.clone()
        };
        let bytes = serde_json::to_vec(&canonical).expect("config serializes");
        Sha256::digest(bytes).into()
    }

    pub fn digest_hex(&self) -> String {
        hex::encode(self.digest())
    }
}

/// Independent 64-bit seed for a named purpose.
pub fn derive_seed(root: u64, purpose: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(purpose.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_timesteps_scale() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.analysis_timesteps(), vec![20, 60, 120, 180]);
        let big = ExperimentConfig {
            timesteps: 1000,
            ..cfg
        };
        assert_eq!(big.analysis_timesteps(), vec![100, 300, 600, 900]);
    }

    #[test]
    fn validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let mut cfg = ExperimentConfig::default();
        cfg.analysis.timesteps = Some(vec![10, 200]);
        assert!(matches!(cfg.validate(), Err(ExperimentError::Config(_))));
    }

    #[test]
    fn digest_ignores_output_dir() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            output_dir: Some("elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.digest(), b.digest());
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn json_round_trip_and_partial() {
        let cfg = ExperimentConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&text).unwrap(), cfg);
        let partial: ExperimentConfig =
            serde_json::from_str(r#"{"seed": 3, "arm_b": {"source": "synthetic", "count": 8, "style": "textured"}}"#)
                .unwrap();
        assert_eq!(partial.seed, 3);
        assert!(matches!(partial.arm_b, Some(ArmConfig::Synthetic(SyntheticArm { count: 8, .. }))));
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(0, "A/train"), derive_seed(0, "B/train"));
        assert_eq!(derive_seed(5, "x"), derive_seed(5, "x"));
    }
}
