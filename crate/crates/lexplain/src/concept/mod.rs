//! Concept pipeline: concept-space construction over activations, concept
//! interpretation, importance, and concept-space metrics.

pub mod analysis;
pub mod models;

pub use analysis::{
    concept_importance, concept_metrics, llm_label, maxact_words, stability, top_vocab,
    ConceptImportance, ConceptInterpretation, ConceptMetrics, HttpLabelingClient,
    ImportanceEstimator, LabelingClient, StubLabelingClient,
};
pub use models::{fit, load_model, save_model, ConceptKind, ConceptModel, FitConfig, SAEConfig};
