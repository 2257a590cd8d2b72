//! lexplain: post-hoc explainability for transformer language models.
//!
//! Two families of tools behind one API:
//!
//! - **Attributions** — perturbation-based (Occlusion, LIME, KernelSHAP,
//!   Sobol) and gradient-based (Saliency, Input×Gradient, Integrated
//!   Gradients, SmoothGrad, SquareGrad, VarGrad, GradientSHAP) methods with
//!   faithfulness metrics (Insertion, Deletion, AOPC).
//! - **Concept pipeline** — split a model into feature extractor and
//!   predictor, learn a concept space over activations (neurons, KMeans, PCA,
//!   SVD, NMF, SAE variants), interpret concepts, estimate their importance,
//!   and measure concept-space quality (MSE, FID, sparsity, stability).
//!
//! A CLI (`lexplain`) drives both pipelines and emits JSON plus self-contained
//! interactive HTML reports.

pub mod activations;
pub mod attr;
pub mod autodiff;
pub mod concept;
pub mod error;
pub mod model;
pub mod report;
pub mod text;

pub use error::{Error, Result};
