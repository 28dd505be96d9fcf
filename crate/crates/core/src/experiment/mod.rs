//! Two-arm experiment orchestration: data generation, training, tracing,
//! analysis, interventions, cross-arm statistics and the report.

mod analysis;
mod config;
mod pipeline;
mod report;

use thiserror::Error;

pub use analysis::{
    analyze_trace, layer_summary, phase_boundaries, segment_phases, Phase, TimestepSamples, TraceAnalysis, IFE_GRID,
    PHASE_FRACTIONS,
};
pub use config::{
    derive_seed, AnalysisConfig, ArmConfig, ExperimentConfig, InterventionConfig, SyntheticArm, ARM_LABELS,
    REFERENCE_TIMESTEPS,
};
pub use pipeline::{Pipeline, Stage};
pub use report::{
    emit_report, read_report, verify_report, ArmImpact, ArmInterventions, ArmReport, ComplexityRatioRow, Divergence,
    HeadRow, Provenance, Report, SeriesPoint, Tables, TrainingSummary, VerifyCheck,
};

#[derive(Debug, Error)]
pub enum StageCause {
    #[error(transparent)]
    Faces(#[from] crate::faces::FacesError),
    #[error(transparent)]
    Model(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    Trace(#[from] crate::trace::TraceError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error(transparent)]
    Intervention(#[from] crate::intervention::InterventionError),
    #[error(transparent)]
    Stats(#[from] crate::stats::StatsError),
    #[error("missing artifact {0}")]
    Missing(String),
    #[error(transparent)]
    Experiment(Box<ExperimentError>),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

impl StageCause {
    pub fn kind(&self) -> &'static str {
        match self {
            StageCause::Faces(_) => "dataset",
            StageCause::Model(_) => "model",
            StageCause::Trace(_) => "trace",
            StageCause::Metrics(_) => "metrics",
            StageCause::Intervention(_) => "intervention",
            StageCause::Stats(_) => "stats",
            StageCause::Missing(_) => "missing_artifact",
            StageCause::Experiment(e) => e.kind(),
            StageCause::Io(_) => "io",
            StageCause::Json(_) => "json",
            StageCause::Csv(_) => "csv",
        }
    }
}

impl From<ExperimentError> for StageCause {
    fn from(e: ExperimentError) -> Self {
        StageCause::Experiment(Box::new(e))
    }
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("cross-arm analysis requires two arms; the config defines {0}")]
    SingleArm(usize),
    #[error("stage {stage} failed: {cause}")]
    Stage { stage: Stage, cause: StageCause },
    #[error("verification failed: {0}")]
    Verify(String),
}

impl ExperimentError {
    pub fn kind(&self) -> &'static str {
        match self {
            ExperimentError::Config(_) => "config",
            ExperimentError::InvalidInput(_) => "invalid_input",
            ExperimentError::SingleArm(_) => "single_arm",
            ExperimentError::Stage { cause, .. } => cause.kind(),
            ExperimentError::Verify(_) => "verification",
        }
    }

    /// 2 for configuration problems, 3 for stage failures, 4 for failed
    /// verification.
    pub fn exit_code(&self) -> i32 {
        match self {
            ExperimentError::Config(_) | ExperimentError::SingleArm(_) => 2,
            ExperimentError::Verify(_) => 4,
            ExperimentError::Stage {
                cause: StageCause::Experiment(inner),
                ..
            } => inner.exit_code(),
            ExperimentError::InvalidInput(_) | ExperimentError::Stage { .. } => 3,
        }
    }

    pub fn stage(&self) -> Option<Stage> {
        match self {
            ExperimentError::Stage { stage, .. } => Some(*stage),
            _ => None,
        }
    }

    /// Innermost message, without the stage prefix.
    pub fn message(&self) -> String {
        match self {
            ExperimentError::Stage { cause, .. } => cause.to_string(),
            e => e.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, ExperimentError>;
