//! The unified attribution front door: target resolution, inference modes,
//! granularity aggregation, and the perturbation→inference→aggregation
//! pipeline that every perturbation method is built from.

use std::cell::Cell;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::attr::gradient::{self, GradConfig};
use crate::attr::mask::{DesignKind, MaskMatrix, PerturbationConfig};
use crate::attr::perturb;
use crate::error::{Error, Result};
use crate::model::{Logits, ModelAdapter};
use crate::text::{tokenize, Granularity, TokenizedText, Tokenizer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InferenceMode {
    Logits,
    Softmax,
    LogSoftmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    ClassIndex,
    GeneratedToken,
}

/// What to explain: a class index (classification) or one generated token
/// (generation). Generation targets are resolved to a concrete token id and
/// an absolute logits row during target resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub kind: TargetKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_index: Option<usize>,
    /// Position among the generated tokens (0-based).
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub output_position: Option<usize>,
    /// Display string of the resolved target token.
    #[serde(rename = "token", skip_serializing_if = "Option::is_none", default)]
    pub token_display: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub token_id: Option<u32>,
}

impl Target {
    pub fn class(index: usize) -> Self {
        Target {
            kind: TargetKind::ClassIndex,
            class_index: Some(index),
            output_position: None,
            token_display: None,
            token_id: None,
        }
    }

    pub fn generated(position: usize) -> Self {
        Target {
            kind: TargetKind::GeneratedToken,
            class_index: None,
            output_position: Some(position),
            token_display: None,
            token_id: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub n_model_calls: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

/// Per-unit scores at a stated granularity for a stated target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: String,
    pub granularity: Granularity,
    pub inference_mode: InferenceMode,
    pub target: Target,
    pub units: Vec<String>,
    pub scores: Vec<f64>,
    pub diagnostics: Diagnostics,
}

impl AttributionResult {
    pub fn top_unit(&self) -> Option<&str> {
        self.scores
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| self.units[i].as_str())
    }
}

// ---------------------------------------------------------------------------
// Score resolution
// ---------------------------------------------------------------------------

fn softmax(row: &Array1<f64>) -> Array1<f64> {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ex = row.mapv(|v| (v - mx).exp());
    let sum = ex.sum();
    ex / sum
}

fn log_sum_exp(row: &Array1<f64>) -> f64 {
    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    mx + row.mapv(|v| (v - mx).exp()).sum().ln()
}

fn mode_score(row: &Array1<f64>, index: usize, mode: InferenceMode) -> f64 {
    match mode {
        InferenceMode::Logits => row[index],
        InferenceMode::Softmax => softmax(row)[index],
        InferenceMode::LogSoftmax => row[index] - log_sum_exp(row),
    }
}

/// Gradient of the mode score with respect to the logits row.
fn mode_score_grad(row: &Array1<f64>, index: usize, mode: InferenceMode) -> Array1<f64> {
    match mode {
        InferenceMode::Logits => {
            let mut g = Array1::zeros(row.len());
            g[index] = 1.0;
            g
        }
        InferenceMode::Softmax => {
            let p = softmax(row);
            let pt = p[index];
            let mut g = -&p * pt;
            g[index] += pt;
            g
        }
        InferenceMode::LogSoftmax => {
            let p = softmax(row);
            let mut g = -p;
            g[index] += 1.0;
            g
        }
    }
}

/// Scalar target score from logits. For generation targets the
/// `output_position` is the absolute logits row whose next-token distribution
/// is scored (the engine computes it under teacher forcing).
pub fn resolve_score(logits: &Logits, target: &Target, mode: InferenceMode) -> Result<f64> {
    match (logits, target.kind) {
        (Logits::Classification(row), TargetKind::ClassIndex) => {
            let idx = target
                .class_index
                .ok_or_else(|| Error::InvalidTarget("missing class_index".to_string()))?;
            if idx >= row.len() {
                return Err(Error::InvalidTarget(format!(
                    "class {idx} out of range for {} classes",
                    row.len()
                )));
            }
            Ok(mode_score(row, idx, mode))
        }
        (Logits::Generation(matrix), TargetKind::GeneratedToken) => {
            let pos = target
                .output_position
                .ok_or_else(|| Error::InvalidTarget("missing output_position".to_string()))?;
            let token = target
                .token_id
                .ok_or_else(|| Error::InvalidTarget("unresolved token id".to_string()))?
                as usize;
            if pos >= matrix.nrows() {
                return Err(Error::InvalidTarget(format!(
                    "position {pos} beyond sequence of length {}",
                    matrix.nrows()
                )));
            }
            Ok(mode_score(&matrix.row(pos).to_owned(), token, mode))
        }
        _ => Err(Error::InvalidTarget(
            "target kind does not match model task".to_string(),
        )),
    }
}

/// Gradient of the resolved target score with respect to the logits. For
/// generation the gradient is placed at the target's `output_position` row.
pub(crate) fn resolve_score_grad(
    logits: &Logits,
    target: &Target,
    mode: InferenceMode,
) -> Result<Logits> {
    match (logits, target.kind) {
        (Logits::Classification(row), TargetKind::ClassIndex) => {
            let idx = target
                .class_index
                .ok_or_else(|| Error::InvalidTarget("missing class_index".to_string()))?;
            Ok(Logits::Classification(mode_score_grad(row, idx, mode)))
        }
        (Logits::Generation(m), TargetKind::GeneratedToken) => {
            let pos = target
                .output_position
                .ok_or_else(|| Error::InvalidTarget("missing output_position".to_string()))?;
            let token = target
                .token_id
                .ok_or_else(|| Error::InvalidTarget("unresolved token id".to_string()))?
                as usize;
            let row_grad = mode_score_grad(&m.row(pos).to_owned(), token, mode);
            let mut g = Array2::zeros(m.dim());
            g.row_mut(pos).assign(&row_grad);
            Ok(Logits::Generation(g))
        }
        _ => Err(Error::InvalidTarget(
            "target kind does not match model task".to_string(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

/// Scores perturbed token sequences for one resolved target. For generation
/// the previously generated tokens are teacher-forced after the (possibly
/// perturbed) prompt and the score is read at the last position.
pub struct Scorer<'a> {
    model: &'a dyn ModelAdapter,
    pub target: Target,
    pub mode: InferenceMode,
    forced_suffix: Vec<u32>,
    calls: Cell<usize>,
}

impl<'a> Scorer<'a> {
    pub fn new(
        model: &'a dyn ModelAdapter,
        target: Target,
        mode: InferenceMode,
        forced_suffix: Vec<u32>,
    ) -> Self {
        Scorer {
            model,
            target,
            mode,
            forced_suffix,
            calls: Cell::new(0),
        }
    }

    pub fn n_calls(&self) -> usize {
        self.calls.get()
    }

    pub fn score_ids(&self, prompt_ids: &[u32]) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        match self.target.kind {
            TargetKind::ClassIndex => {
                let logits = self.model.forward_ids(prompt_ids);
                resolve_score(&logits, &self.target, self.mode)
            }
            TargetKind::GeneratedToken => {
                let mut ids = prompt_ids.to_vec();
                ids.extend_from_slice(&self.forced_suffix);
                let logits = self.model.forward_ids(&ids);
                let last = match &logits {
                    Logits::Generation(m) => m.nrows() - 1,
                    _ => return Err(Error::InvalidTarget("generation model expected".into())),
                };
                let mut t = self.target.clone();
                t.output_position = Some(last);
                resolve_score(&logits, &t, self.mode)
            }
        }
    }
}

/// Score and embedding-gradient evaluation for gradient-based methods.
/// Operates on the embeddings of the full teacher-forced sequence.
pub struct GradScorer<'a> {
    model: &'a dyn ModelAdapter,
    pub target: Target,
    pub mode: InferenceMode,
    /// Absolute logits row scored (last row for generation).
    row: Option<usize>,
    calls: Cell<usize>,
}

impl<'a> GradScorer<'a> {
    pub fn new(
        model: &'a dyn ModelAdapter,
        target: Target,
        mode: InferenceMode,
        seq_len: usize,
    ) -> Self {
        let row = match target.kind {
            TargetKind::GeneratedToken => Some(seq_len - 1),
            TargetKind::ClassIndex => None,
        };
        GradScorer {
            model,
            target,
            mode,
            row,
            calls: Cell::new(0),
        }
    }

    fn score_of_logits(&self, logits: &Logits) -> Result<f64> {
        match self.target.kind {
            TargetKind::ClassIndex => resolve_score(logits, &self.target, self.mode),
            TargetKind::GeneratedToken => {
                let mut t = self.target.clone();
                t.output_position = self.row;
                resolve_score(logits, &t, self.mode)
            }
        }
    }

    pub fn n_calls(&self) -> usize {
        self.calls.get()
    }

    pub fn score(&self, emb: &Array2<f64>) -> Result<f64> {
        self.calls.set(self.calls.get() + 1);
        self.score_of_logits(&self.model.forward_embeddings(emb))
    }

    pub fn score_and_grad(&self, emb: &Array2<f64>) -> Result<(f64, Array2<f64>)> {
        self.calls.set(self.calls.get() + 1);
        let (logits, vjp) = self.model.forward_embeddings_vjp(emb);
        let score = self.score_of_logits(&logits)?;
        let grad_logits = match (&logits, self.target.kind) {
            (Logits::Classification(row), TargetKind::ClassIndex) => {
                let idx = self.target.class_index.unwrap();
                Logits::Classification(mode_score_grad(row, idx, self.mode))
            }
            (Logits::Generation(m), TargetKind::GeneratedToken) => {
                let r = self.row.unwrap();
                let token = self.target.token_id.unwrap() as usize;
                let row_grad = mode_score_grad(&m.row(r).to_owned(), token, self.mode);
                let mut g = Array2::zeros(m.dim());
                g.row_mut(r).assign(&row_grad);
                Logits::Generation(g)
            }
            _ => return Err(Error::InvalidTarget("target/task mismatch".into())),
        };
        Ok((score, vjp(&grad_logits)))
    }
}

// ---------------------------------------------------------------------------
// Granularity aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Aggregate per-token scores to units at a granularity: special tokens are
/// dropped, groups reduced (default sum).
pub fn aggregate_to_granularity(
    token_scores: &[f64],
    tok: &TokenizedText,
    granularity: Granularity,
    reduce: Reduce,
) -> Result<(Vec<String>, Vec<f64>)> {
    if token_scores.len() != tok.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} token scores for {} tokens",
            token_scores.len(),
            tok.len()
        )));
    }
    let units = tok.units(granularity);
    let mut names = Vec::with_capacity(units.len());
    let mut scores = Vec::with_capacity(units.len());
    for (name, token_indices) in units {
        let vals: Vec<f64> = token_indices.iter().map(|&i| token_scores[i]).collect();
        let v = match reduce {
            Reduce::Sum => vals.iter().sum(),
            Reduce::Mean => vals.iter().sum::<f64>() / vals.len() as f64,
            Reduce::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        names.push(name);
        scores.push(v);
    }
    Ok((names, scores))
}

// ---------------------------------------------------------------------------
// Three-stage pipeline
// ---------------------------------------------------------------------------

/// Stage 1: produce a binary design over M units.
pub trait MaskDesignStage {
    fn kind(&self) -> DesignKind;
    fn build(&self, n_units: usize) -> Result<MaskMatrix>;
}

/// Stage 2: score perturbed sequences. `Scorer` is the plain-forward default.
pub trait InferenceStage {
    fn score_batch(&self, sequences: &[Vec<u32>]) -> Result<Vec<f64>>;
    fn n_calls(&self) -> usize;
}

impl InferenceStage for Scorer<'_> {
    fn score_batch(&self, sequences: &[Vec<u32>]) -> Result<Vec<f64>> {
        sequences.iter().map(|s| self.score_ids(s)).collect()
    }
    fn n_calls(&self) -> usize {
        self.n_calls()
    }
}

pub struct AggOutput {
    pub scores: Vec<f64>,
    pub warnings: Vec<String>,
}

/// Stage 3: turn design rows and their scores into per-unit scores.
pub trait AggregationStage {
    fn method_name(&self) -> &str;
    fn aggregate(&self, masks: &MaskMatrix, scores: &[f64]) -> Result<AggOutput>;
}

/// Deterministic composition of the three stages.
pub fn run_pipeline(
    design: &dyn MaskDesignStage,
    inference: &dyn InferenceStage,
    aggregator: &dyn AggregationStage,
    tok: &TokenizedText,
    granularity: Granularity,
    cfg: &PerturbationConfig,
    has_mask_token: bool,
    target: Target,
    mode: InferenceMode,
) -> Result<AttributionResult> {
    let units = tok.units(granularity);
    let m = units.len();
    let masks = design.build(m)?;
    if masks.n_units() != m {
        return Err(Error::PipelineContract {
            stage: "perturbations".to_string(),
            detail: format!("design produced {} columns for {m} units", masks.n_units()),
        });
    }
    let batch = crate::attr::mask::apply_masks(tok, &masks, &units, cfg, has_mask_token)?;
    let scores = inference.score_batch(&batch.sequences)?;
    if scores.len() != masks.n_designs() {
        return Err(Error::PipelineContract {
            stage: "inference".to_string(),
            detail: format!(
                "{} scores for {} designs",
                scores.len(),
                masks.n_designs()
            ),
        });
    }
    let out = aggregator.aggregate(&masks, &scores)?;
    if out.scores.len() != m {
        return Err(Error::PipelineContract {
            stage: "aggregation".to_string(),
            detail: format!("{} unit scores for {m} units", out.scores.len()),
        });
    }
    let mut warnings = batch.warnings;
    warnings.extend(out.warnings);
    Ok(AttributionResult {
        method: aggregator.method_name().to_string(),
        granularity,
        inference_mode: mode,
        target,
        units: units.into_iter().map(|(n, _)| n).collect(),
        scores: out.scores,
        diagnostics: Diagnostics {
            n_model_calls: inference.n_calls(),
            seed: cfg.seed,
            warnings,
        },
    })
}

// ---------------------------------------------------------------------------
// Explain front door
// ---------------------------------------------------------------------------

pub const PERTURBATION_METHODS: &[&str] = &["occlusion", "lime", "kernelshap", "sobol"];
pub const GRADIENT_METHODS: &[&str] = &[
    "saliency",
    "input_x_gradient",
    "integrated_gradients",
    "smoothgrad",
    "squaregrad",
    "vargrad",
    "gradient_shap",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainerConfig {
    pub method: String,
    pub granularity: Granularity,
    pub inference_mode: InferenceMode,
    pub perturb: PerturbationConfig,
    pub grad: GradConfig,
    pub max_new_tokens: usize,
    /// Forward batch size for perturbed inputs; a performance knob only.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ExplainerConfig {
    fn default() -> Self {
        ExplainerConfig {
            method: "occlusion".to_string(),
            granularity: Granularity::Word,
            inference_mode: InferenceMode::Logits,
            perturb: PerturbationConfig::default(),
            grad: GradConfig::default(),
            max_new_tokens: 3,
            batch_size: 32,
            seed: 0,
        }
    }
}

/// Greedy decoding: returns the generated token ids.
pub fn greedy_decode(model: &dyn ModelAdapter, prompt: &[u32], max_new_tokens: usize) -> Vec<u32> {
    let mut ids = prompt.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_new_tokens {
        let logits = model.forward_ids(&ids);
        let row = match &logits {
            Logits::Generation(m) => m.row(m.nrows() - 1).to_owned(),
            _ => break,
        };
        let next = row
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i as u32)
            .unwrap();
        out.push(next);
        ids.push(next);
    }
    out
}

pub fn display_token(id: u32) -> String {
    format!("<{id}>")
}

/// Run one fully resolved (input, target) attribution.
#[allow(clippy::too_many_arguments)]
fn run_one(
    cfg: &ExplainerConfig,
    model: &dyn ModelAdapter,
    tokenizer: &Tokenizer,
    tok: &TokenizedText,
    target: Target,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    let mut pcfg = cfg.perturb.clone();
    pcfg.seed = cfg.seed;
    let mut gcfg = cfg.grad.clone();
    gcfg.seed = cfg.seed;
    match cfg.method.as_str() {
        "occlusion" => perturb::occlusion(
            model,
            tok,
            target,
            cfg.granularity,
            &pcfg,
            tokenizer.has_mask_token,
            cfg.inference_mode,
            forced_suffix,
        ),
        "lime" => perturb::lime(
            model,
            tok,
            target,
            cfg.granularity,
            &pcfg,
            tokenizer.has_mask_token,
            cfg.inference_mode,
            forced_suffix,
        ),
        "kernelshap" => perturb::kernelshap(
            model,
            tok,
            target,
            cfg.granularity,
            &pcfg,
            tokenizer.has_mask_token,
            cfg.inference_mode,
            forced_suffix,
        ),
        "sobol" => perturb::sobol(
            model,
            tok,
            target,
            cfg.granularity,
            &pcfg,
            tokenizer.has_mask_token,
            cfg.inference_mode,
            forced_suffix,
        ),
        "saliency" => gradient::saliency(model, tok, target, cfg.granularity, &gcfg, cfg.inference_mode, forced_suffix),
        "input_x_gradient" => {
            let mut g = gcfg.clone();
            g.input_x_gradient = true;
            gradient::saliency_named(
                model,
                tok,
                target,
                cfg.granularity,
                &g,
                cfg.inference_mode,
                forced_suffix,
                "input_x_gradient",
            )
        }
        "integrated_gradients" => gradient::integrated_gradients(
            model,
            tok,
            target,
            cfg.granularity,
            &gcfg,
            cfg.inference_mode,
            forced_suffix,
        ),
        "smoothgrad" => gradient::noise_ensemble(
            model,
            tok,
            target,
            cfg.granularity,
            &gcfg,
            cfg.inference_mode,
            forced_suffix,
            gradient::NoiseVariant::SmoothGrad,
        ),
        "squaregrad" => gradient::noise_ensemble(
            model,
            tok,
            target,
            cfg.granularity,
            &gcfg,
            cfg.inference_mode,
            forced_suffix,
            gradient::NoiseVariant::SquareGrad,
        ),
        "vargrad" => gradient::noise_ensemble(
            model,
            tok,
            target,
            cfg.granularity,
            &gcfg,
            cfg.inference_mode,
            forced_suffix,
            gradient::NoiseVariant::VarGrad,
        ),
        "gradient_shap" => gradient::gradient_shap(
            model,
            tok,
            target,
            cfg.granularity,
            &gcfg,
            cfg.inference_mode,
            forced_suffix,
        ),
        other => Err(Error::UnknownMethod(other.to_string())),
    }
}

/// Compute explanations for `inputs`, one result per (input, target) pair.
/// When targets are omitted: classification uses the argmax class; generation
/// yields one result per greedily generated token.
pub fn explain(
    cfg: &ExplainerConfig,
    model: &dyn ModelAdapter,
    tokenizer: &Tokenizer,
    inputs: &[String],
    targets: Option<&[Target]>,
) -> Result<Vec<AttributionResult>> {
    if inputs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !PERTURBATION_METHODS.contains(&cfg.method.as_str())
        && !GRADIENT_METHODS.contains(&cfg.method.as_str())
    {
        return Err(Error::UnknownMethod(cfg.method.clone()));
    }
    let mut results = Vec::new();
    for (i, text) in inputs.iter().enumerate() {
        let tok = tokenize(text, tokenizer)?;
        match model.task() {
            crate::model::Task::Classification => {
                let target = match targets.and_then(|t| t.get(i)) {
                    Some(t) => {
                        let idx = t
                            .class_index
                            .ok_or_else(|| Error::InvalidTarget("missing class_index".into()))?;
                        if idx >= model.num_classes() {
                            return Err(Error::InvalidTarget(format!(
                                "class {idx} out of range for {} classes",
                                model.num_classes()
                            )));
                        }
                        t.clone()
                    }
                    None => {
                        let logits = model.forward_ids(&tok.token_ids);
                        let row = match logits {
                            Logits::Classification(r) => r,
                            _ => unreachable!(),
                        };
                        let argmax = row
                            .iter()
                            .enumerate()
                            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                            .map(|(j, _)| j)
                            .unwrap();
                        Target::class(argmax)
                    }
                };
                results.push(run_one(cfg, model, tokenizer, &tok, target, Vec::new())?);
            }
            crate::model::Task::Generation => {
                let generated = greedy_decode(model, &tok.token_ids, cfg.max_new_tokens);
                let positions: Vec<usize> = match targets.and_then(|t| t.get(i)) {
                    Some(t) => {
                        let p = t
                            .output_position
                            .ok_or_else(|| Error::InvalidTarget("missing output_position".into()))?;
                        if p >= generated.len() {
                            return Err(Error::InvalidTarget(format!(
                                "position {p} beyond {} generated tokens",
                                generated.len()
                            )));
                        }
                        vec![p]
                    }
                    None => (0..generated.len()).collect(),
                };
                for p in positions {
                    let mut target = Target::generated(p);
                    target.token_id = Some(generated[p]);
                    target.token_display = Some(display_token(generated[p]));
                    let forced_suffix = generated[..p].to_vec();
                    results.push(run_one(cfg, model, tokenizer, &tok, target, forced_suffix)?);
                }
            }
        }
    }
    Ok(results)
}
