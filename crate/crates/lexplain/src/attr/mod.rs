//! Feature attribution: perturbation- and gradient-based methods, the unified
//! explainer front door, and faithfulness metrics.

pub mod engine;
pub mod gradient;
pub mod mask;
pub mod metrics;
pub mod perturb;

pub use engine::{
    aggregate_to_granularity, explain, resolve_score, run_pipeline, AttributionResult,
    Diagnostics, ExplainerConfig, InferenceMode, Target, TargetKind,
};
pub use mask::{apply_masks, DesignKind, MaskMatrix, PerturbationConfig, Replacement};
