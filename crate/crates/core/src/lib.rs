pub mod diffusion;
pub mod experiment;
pub mod faces;
pub mod intervention;
pub mod metrics;
pub mod stats;
pub mod tensor;
pub mod trace;
