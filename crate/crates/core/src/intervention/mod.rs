//! Causal interventions on the denoiser and impact measurement.

mod harness;
mod spec;

use std::ops::Range;

use thiserror::Error;

pub use harness::{
    ablation_groups, ablation_sweep, head_importance, impact_from_mse, impact_score, rank_results, robustness,
    robustness_battery, robustness_from_impacts, write_impact_csv, AblationGroup, ImpactResult,
    IMPACT_CSV_HEADER,
};
pub use spec::{AblationMode, Coefficients, Edit, InterventionSpec, ResolvedIntervention, SiteCatalog, Target};

use crate::diffusion::DiffusionError;

#[derive(Debug, Error)]
pub enum InterventionError {
    #[error("intervention target `{0}` not found in the model")]
    UnknownTarget(String),
    #[error("layer `{0}` has no attention heads")]
    NotAttention(String),
    #[error("head {head} does not belong to `{layer}` (heads {range:?})")]
    InvalidHead { layer: String, head: usize, range: Range<usize> },
    #[error("invalid intervention parameter: {0}")]
    InvalidParam(String),
    #[error("baseline MSE is zero; impact is undefined")]
    ZeroBaseline,
    #[error("ablation group `{0}` is empty")]
    EmptyGroup(String),
    #[error("evaluation set is empty")]
    EmptyEvalSet,
    #[error(transparent)]
    Model(#[from] DiffusionError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, InterventionError>;
