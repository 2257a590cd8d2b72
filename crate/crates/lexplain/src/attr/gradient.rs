//! Gradient-based attribution over input embeddings: Saliency,
//! Input×Gradient, Integrated Gradients, SmoothGrad, SquareGrad, VarGrad,
//! GradientSHAP.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::attr::engine::{
    aggregate_to_granularity, AttributionResult, Diagnostics, GradScorer, InferenceMode, Reduce,
    Target,
};
use crate::error::{Error, Result};
use crate::model::ModelAdapter;
use crate::text::{Granularity, TokenizedText, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    ZeroEmbedding,
    PadEmbedding,
}

/// Reduction over the embedding dimension, from per-(token, dim) attributions
/// to per-token scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbReduce {
    L2Norm,
    Sum,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GradConfig {
    pub ig_steps: usize,
    /// Noise std relative to the std of the input embeddings.
    pub noise_std: f64,
    pub n_noise: usize,
    pub baseline: Baseline,
    /// Defaults to `sum` when input×gradient is on, `l2_norm` otherwise.
    pub reduce: Option<EmbReduce>,
    pub input_x_gradient: bool,
    pub seed: u64,
}

impl Default for GradConfig {
    fn default() -> Self {
        GradConfig {
            ig_steps: 64,
            noise_std: 0.1,
            n_noise: 32,
            baseline: Baseline::PadEmbedding,
            reduce: None,
            input_x_gradient: true,
            seed: 0,
        }
    }
}

impl GradConfig {
    fn effective_reduce(&self) -> EmbReduce {
        self.reduce.unwrap_or(if self.input_x_gradient {
            EmbReduce::Sum
        } else {
            EmbReduce::L2Norm
        })
    }
}

fn reduce_rows(attr: &Array2<f64>, reduce: EmbReduce, n_tokens: usize) -> Vec<f64> {
    (0..n_tokens)
        .map(|i| {
            let row = attr.row(i);
            match reduce {
                EmbReduce::Sum => row.sum(),
                EmbReduce::Mean => row.mean().unwrap_or(0.0),
                EmbReduce::L2Norm => row.mapv(|v| v * v).sum().sqrt(),
            }
        })
        .collect()
}

struct GradContext<'a> {
    scorer: GradScorer<'a>,
    tok: &'a TokenizedText,
    /// Embeddings of prompt plus teacher-forced suffix.
    emb: Array2<f64>,
    prompt_len: usize,
}

fn context<'a>(
    model: &'a dyn ModelAdapter,
    tok: &'a TokenizedText,
    target: Target,
    mode: InferenceMode,
    forced_suffix: &[u32],
) -> GradContext<'a> {
    let mut ids = tok.token_ids.clone();
    ids.extend_from_slice(forced_suffix);
    let emb = model.embed(&ids);
    let scorer = GradScorer::new(model, target, mode, ids.len());
    GradContext {
        scorer,
        tok,
        emb,
        prompt_len: tok.len(),
    }
}

/// Baseline embeddings: zeros or pad-token embeddings for the non-special
/// prompt rows. Special tokens and the teacher-forced suffix stay untouched,
/// so the baseline differs from the input exactly on the attributed rows.
fn baseline_embeddings(model: &dyn ModelAdapter, ctx: &GradContext, kind: Baseline) -> Array2<f64> {
    let mut base = ctx.emb.clone();
    match kind {
        Baseline::ZeroEmbedding => {
            for r in 0..ctx.prompt_len {
                if !ctx.tok.special_mask[r] {
                    base.row_mut(r).fill(0.0);
                }
            }
        }
        Baseline::PadEmbedding => {
            let pad_ids: Vec<u32> = vec![model.pad_id(); ctx.prompt_len];
            let pad_emb = model.embed(&pad_ids);
            for r in 0..ctx.prompt_len {
                if !ctx.tok.special_mask[r] {
                    base.row_mut(r).assign(&pad_emb.row(r));
                }
            }
        }
    }
    base
}

fn finish(
    ctx: &GradContext,
    method: &str,
    granularity: Granularity,
    target: Target,
    mode: InferenceMode,
    seed: u64,
    token_scores: Vec<f64>,
) -> Result<AttributionResult> {
    let (units, scores) =
        aggregate_to_granularity(&token_scores, ctx.tok, granularity, Reduce::Sum)?;
    Ok(AttributionResult {
        method: method.to_string(),
        granularity,
        inference_mode: mode,
        target,
        units,
        scores,
        diagnostics: Diagnostics {
            n_model_calls: ctx.scorer.n_calls(),
            seed,
            warnings: Vec::new(),
        },
    })
}

#[allow(clippy::too_many_arguments)]
pub fn saliency_named(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &GradConfig,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
    method: &str,
) -> Result<AttributionResult> {
    let ctx = context(model, tok, target.clone(), mode, &forced_suffix);
    let (_, grad) = ctx.scorer.score_and_grad(&ctx.emb)?;
    let attr = if cfg.input_x_gradient {
        &grad * &ctx.emb
    } else {
        grad
    };
    let token_scores = reduce_rows(&attr, cfg.effective_reduce(), ctx.prompt_len);
    finish(&ctx, method, granularity, target, mode, cfg.seed, token_scores)
}

pub fn saliency(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &GradConfig,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    saliency_named(model, tok, target, granularity, cfg, mode, forced_suffix, "saliency")
}

/// Midpoint-rule integrated gradients, reduced by sum over the embedding
/// dimension so completeness is preserved.
pub fn integrated_gradients(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &GradConfig,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    if cfg.ig_steps < 2 {
        return Err(Error::InsufficientSamples(format!(
            "integrated gradients needs ig_steps >= 2, got {}",
            cfg.ig_steps
        )));
    }
    let ctx = context(model, tok, target.clone(), mode, &forced_suffix);
    let base = baseline_embeddings(model, &ctx, cfg.baseline);
    let diff = &ctx.emb - &base;
    let m = cfg.ig_steps;
    let mut grad_sum: Array2<f64> = Array2::zeros(ctx.emb.dim());
    for k in 1..=m {
        let alpha = (k as f64 - 0.5) / m as f64;
        let point = &base + &(&diff * alpha);
        let (_, g) = ctx.scorer.score_and_grad(&point)?;
        grad_sum += &g;
    }
    let attr = &diff * &(grad_sum / m as f64);
    let token_scores = reduce_rows(&attr, EmbReduce::Sum, ctx.prompt_len);
    finish(
        &ctx,
        "integrated_gradients",
        granularity,
        target,
        mode,
        cfg.seed,
        token_scores,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseVariant {
    SmoothGrad,
    SquareGrad,
    VarGrad,
}

impl NoiseVariant {
    fn name(self) -> &'static str {
        match self {
            NoiseVariant::SmoothGrad => "smoothgrad",
            NoiseVariant::SquareGrad => "squaregrad",
            NoiseVariant::VarGrad => "vargrad",
        }
    }
}

fn emb_std(emb: &Array2<f64>) -> f64 {
    let mean = emb.mean().unwrap_or(0.0);
    (emb.mapv(|v| (v - mean) * (v - mean)).mean().unwrap_or(0.0)).sqrt()
}

/// Gaussian-noise gradient ensembles: mean (SmoothGrad), mean of squares
/// (SquareGrad), or elementwise variance (VarGrad).
#[allow(clippy::too_many_arguments)]
pub fn noise_ensemble(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &GradConfig,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
    variant: NoiseVariant,
) -> Result<AttributionResult> {
    if cfg.n_noise < 1 || (variant == NoiseVariant::VarGrad && cfg.n_noise < 2) {
        return Err(Error::InsufficientSamples(format!(
            "{} needs n_noise >= {}, got {}",
            variant.name(),
            if variant == NoiseVariant::VarGrad { 2 } else { 1 },
            cfg.n_noise
        )));
    }
    let ctx = context(model, tok, target.clone(), mode, &forced_suffix);
    let std = cfg.noise_std * emb_std(&ctx.emb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut grads: Vec<Array2<f64>> = Vec::with_capacity(cfg.n_noise);
    for _ in 0..cfg.n_noise {
        let mut point = ctx.emb.clone();
        if std > 0.0 {
            for r in 0..ctx.prompt_len {
                if ctx.tok.special_mask[r] {
                    continue;
                }
                for v in point.row_mut(r).iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += std * n;
                }
            }
        }
        let (_, g) = ctx.scorer.score_and_grad(&point)?;
        grads.push(g);
    }
    let n = grads.len() as f64;
    let mean = grads
        .iter()
        .fold(Array2::<f64>::zeros(ctx.emb.dim()), |acc, g| acc + g)
        / n;
    let attr = match variant {
        NoiseVariant::SmoothGrad => mean,
        NoiseVariant::SquareGrad => {
            grads
                .iter()
                .fold(Array2::<f64>::zeros(ctx.emb.dim()), |acc, g| {
                    acc + &(g * g)
                })
                / n
        }
        NoiseVariant::VarGrad => {
            grads
                .iter()
                .fold(Array2::<f64>::zeros(ctx.emb.dim()), |acc, g| {
                    let d = g - &mean;
                    acc + &(&d * &d)
                })
                / n
        }
    };
    let attr = if cfg.input_x_gradient {
        &attr * &ctx.emb
    } else {
        attr
    };
    let token_scores = reduce_rows(&attr, cfg.effective_reduce(), ctx.prompt_len);
    finish(
        &ctx,
        variant.name(),
        granularity,
        target,
        mode,
        cfg.seed,
        token_scores,
    )
}

/// Expected-gradients style estimator: average of (e − e₀) ⊙ ∇s at points
/// u·(e − e₀) + e₀ + noise with u uniform in (0, 1).
pub fn gradient_shap(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &GradConfig,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    if cfg.n_noise < 1 {
        return Err(Error::InsufficientSamples(
            "gradient_shap needs n_noise >= 1".to_string(),
        ));
    }
    let ctx = context(model, tok, target.clone(), mode, &forced_suffix);
    let base = baseline_embeddings(model, &ctx, cfg.baseline);
    let diff = &ctx.emb - &base;
    let std = cfg.noise_std * emb_std(&ctx.emb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut attr: Array2<f64> = Array2::zeros(ctx.emb.dim());
    for _ in 0..cfg.n_noise {
        let u: f64 = rng.gen_range(0.0..1.0);
        let mut point = &base + &(&diff * u);
        if std > 0.0 {
            for r in 0..ctx.prompt_len {
                if ctx.tok.special_mask[r] {
                    continue;
                }
                for v in point.row_mut(r).iter_mut() {
                    let n: f64 = rng.sample(StandardNormal);
                    *v += std * n;
                }
            }
        }
        let (_, g) = ctx.scorer.score_and_grad(&point)?;
        attr += &(&diff * &g);
    }
    attr /= cfg.n_noise as f64;
    let token_scores = reduce_rows(&attr, EmbReduce::Sum, ctx.prompt_len);
    finish(
        &ctx,
        "gradient_shap",
        granularity,
        target,
        mode,
        cfg.seed,
        token_scores,
    )
}

/// Pad-token baseline sequence used in tests.
pub fn pad_sequence(len: usize) -> Vec<u32> {
    vec![PAD_ID; len]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{LinearBagOfWords, TinyTransformer, Task, LBOW_VOCAB};
    use crate::text::{tokenize, Tokenizer};

    fn lbow() -> (LinearBagOfWords, Tokenizer) {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(&tk, &[("great", 2.0), ("bad", -1.0)], 0.0);
        (model, tk)
    }

    #[test]
    fn raw_gradient_constant_on_linear_model() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad other", &tk).unwrap();
        let cfg = GradConfig {
            input_x_gradient: false,
            reduce: Some(EmbReduce::Sum),
            ..Default::default()
        };
        let r = saliency(
            &model,
            &tok,
            Target::class(1),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
        )
        .unwrap();
        // gradient of the class-1 logit w.r.t. every token embedding is the
        // same head column; summed it is 1.0 for this construction
        for s in &r.scores {
            assert!((s - 1.0).abs() < 1e-12, "{:?}", r.scores);
        }
    }

    #[test]
    fn input_x_gradient_recovers_weights() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad other", &tk).unwrap();
        let cfg = GradConfig::default(); // ixg on, reduce sum
        let r = saliency_named(
            &model,
            &tok,
            Target::class(1),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
            "input_x_gradient",
        )
        .unwrap();
        assert!((r.scores[0] - 2.0).abs() < 1e-12);
        assert!((r.scores[1] + 1.0).abs() < 1e-12);
        assert!(r.scores[2].abs() < 1e-12);
    }

    #[test]
    fn ixg_differs_from_raw_by_embedding_factor() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad", &tk).unwrap();
        let base = GradConfig {
            input_x_gradient: false,
            reduce: Some(EmbReduce::Sum),
            ..Default::default()
        };
        let ixg = GradConfig {
            input_x_gradient: true,
            reduce: Some(EmbReduce::Sum),
            ..Default::default()
        };
        let raw = saliency(&model, &tok, Target::class(1), Granularity::Token, &base, InferenceMode::Logits, Vec::new()).unwrap();
        let prod = saliency(&model, &tok, Target::class(1), Granularity::Token, &ixg, InferenceMode::Logits, Vec::new()).unwrap();
        // for this model the gradient is the indicator of coordinate 0, so
        // the product reduces to the embedding's first coordinate
        assert_eq!(raw.scores.len(), prod.scores.len());
        assert!((prod.scores[0] - 2.0).abs() < 1e-12);
        assert!((raw.scores[0] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ig_equals_ixg_on_linear_model_any_steps() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad other", &tk).unwrap();
        for steps in [2, 7, 64] {
            let cfg = GradConfig {
                ig_steps: steps,
                baseline: Baseline::ZeroEmbedding,
                ..Default::default()
            };
            let r = integrated_gradients(
                &model,
                &tok,
                Target::class(1),
                Granularity::Word,
                &cfg,
                InferenceMode::Logits,
                Vec::new(),
            )
            .unwrap();
            assert!((r.scores[0] - 2.0).abs() < 1e-9);
            assert!((r.scores[1] + 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn ig_zero_at_baseline() {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(&tk, &[], 0.0);
        let tok = tokenize("anything here", &tk).unwrap();
        let cfg = GradConfig {
            baseline: Baseline::ZeroEmbedding,
            ..Default::default()
        };
        // every embedding of this model is zero, so x equals the baseline
        let r = integrated_gradients(
            &model,
            &tok,
            Target::class(1),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
        )
        .unwrap();
        for s in &r.scores {
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn ig_completeness_tiny_transformer() {
        let model = TinyTransformer::new(Task::Classification, 5);
        let tk = Tokenizer::hashed(256, true);
        let tok = tokenize("one two three four five", &tk).unwrap();
        let cfg = GradConfig {
            ig_steps: 64,
            baseline: Baseline::PadEmbedding,
            ..Default::default()
        };
        let r = integrated_gradients(
            &model,
            &tok,
            Target::class(1),
            Granularity::Token,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
        )
        .unwrap();
        let emb = model.embed(&tok.token_ids);
        let pad = model.embed(&vec![crate::text::PAD_ID; tok.len()]);
        let mut base = emb.clone();
        for r in 0..tok.len() {
            if !tok.special_mask[r] {
                base.row_mut(r).assign(&pad.row(r));
            }
        }
        let score = |e: &ndarray::Array2<f64>| match model.forward_embeddings(e) {
            crate::model::Logits::Classification(l) => l[1],
            _ => unreachable!(),
        };
        let delta = score(&emb) - score(&base);
        let total: f64 = r.scores.iter().sum();
        assert!(
            (total - delta).abs() / delta.abs().max(1e-9) < 1e-2,
            "sum {total} vs delta {delta}"
        );
    }

    #[test]
    fn smoothgrad_degenerates_to_saliency() {
        let model = TinyTransformer::new(Task::Classification, 9);
        let tk = Tokenizer::hashed(256, true);
        let tok = tokenize("alpha beta gamma", &tk).unwrap();
        let cfg = GradConfig {
            noise_std: 0.0,
            n_noise: 4,
            ..Default::default()
        };
        let sal = saliency(&model, &tok, Target::class(0), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        let sg = noise_ensemble(
            &model,
            &tok,
            Target::class(0),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
            NoiseVariant::SmoothGrad,
        )
        .unwrap();
        for (a, b) in sal.scores.iter().zip(&sg.scores) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn vargrad_zero_on_linear_model() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad", &tk).unwrap();
        let cfg = GradConfig {
            n_noise: 8,
            input_x_gradient: false,
            reduce: Some(EmbReduce::Sum),
            ..Default::default()
        };
        let r = noise_ensemble(
            &model,
            &tok,
            Target::class(1),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
            NoiseVariant::VarGrad,
        )
        .unwrap();
        for s in &r.scores {
            assert!(s.abs() < 1e-6);
        }
    }

    #[test]
    fn squaregrad_nonnegative() {
        let model = TinyTransformer::new(Task::Classification, 2);
        let tk = Tokenizer::hashed(256, true);
        let tok = tokenize("some words here now", &tk).unwrap();
        let cfg = GradConfig {
            input_x_gradient: false,
            ..Default::default()
        };
        let r = noise_ensemble(
            &model,
            &tok,
            Target::class(0),
            Granularity::Token,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
            NoiseVariant::SquareGrad,
        )
        .unwrap();
        // squared gradients reduced by l2 norm are nonnegative
        for s in &r.scores {
            assert!(*s >= 0.0);
        }
    }

    #[test]
    fn vargrad_needs_two_samples() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad", &tk).unwrap();
        let cfg = GradConfig {
            n_noise: 1,
            ..Default::default()
        };
        let r = noise_ensemble(
            &model,
            &tok,
            Target::class(1),
            Granularity::Word,
            &cfg,
            InferenceMode::Logits,
            Vec::new(),
            NoiseVariant::VarGrad,
        );
        assert!(matches!(r, Err(Error::InsufficientSamples(_))));
    }

    #[test]
    fn gradient_shap_matches_ig_on_linear_model() {
        let (model, tk) = lbow();
        let tok = tokenize("great bad other", &tk).unwrap();
        let cfg = GradConfig {
            noise_std: 0.0,
            n_noise: 256,
            baseline: Baseline::ZeroEmbedding,
            ..Default::default()
        };
        let gs = gradient_shap(&model, &tok, Target::class(1), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        let ig = integrated_gradients(&model, &tok, Target::class(1), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        for (a, b) in gs.scores.iter().zip(&ig.scores) {
            let rel = (a - b).abs() / b.abs().max(1e-9);
            assert!(rel < 5e-2, "gs {a} ig {b}");
        }
    }

    #[test]
    fn gradient_shap_zero_at_baseline_zero_noise() {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(&tk, &[], 0.0);
        let tok = tokenize("anything here", &tk).unwrap();
        let cfg = GradConfig {
            noise_std: 0.0,
            n_noise: 16,
            baseline: Baseline::ZeroEmbedding,
            ..Default::default()
        };
        // all embeddings are zero for this model, so x == baseline
        let r = gradient_shap(&model, &tok, Target::class(1), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        for s in &r.scores {
            assert_eq!(*s, 0.0);
        }
    }

    #[test]
    fn noise_methods_deterministic_under_seed() {
        let model = TinyTransformer::new(Task::Classification, 4);
        let tk = Tokenizer::hashed(256, true);
        let tok = tokenize("seeded run check", &tk).unwrap();
        let cfg = GradConfig {
            n_noise: 8,
            seed: 123,
            ..Default::default()
        };
        for variant in [NoiseVariant::SmoothGrad, NoiseVariant::SquareGrad, NoiseVariant::VarGrad] {
            let a = noise_ensemble(&model, &tok, Target::class(0), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new(), variant).unwrap();
            let b = noise_ensemble(&model, &tok, Target::class(0), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new(), variant).unwrap();
            assert_eq!(a.scores, b.scores);
        }
        let a = gradient_shap(&model, &tok, Target::class(0), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        let b = gradient_shap(&model, &tok, Target::class(0), Granularity::Word, &cfg, InferenceMode::Logits, Vec::new()).unwrap();
        assert_eq!(a.scores, b.scores);
    }
}
