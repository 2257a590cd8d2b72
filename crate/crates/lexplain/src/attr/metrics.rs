//! Faithfulness metrics over attribution results: Insertion, Deletion, and
//! AOPC comprehensiveness/sufficiency.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::attr::engine::{greedy_decode, AttributionResult, Scorer, TargetKind};
use crate::attr::mask::{apply_masks, DesignKind, MaskMatrix, PerturbationConfig};
use crate::error::{Error, Result};
use crate::model::ModelAdapter;
use crate::text::TokenizedText;

/// Target score as progressively more units are perturbed (deletion) or
/// restored (insertion), with the trapezoidal area under the curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaithfulnessCurve {
    pub fractions: Vec<f64>,
    pub scores: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricConfig {
    /// Replacement strategy shared with the explainer that produced the result.
    pub perturb: PerturbationConfig,
    /// AOPC top-k grid as fractions of the unit count.
    pub k_fractions: Vec<f64>,
}

impl Default for MetricConfig {
    fn default() -> Self {
        MetricConfig {
            perturb: PerturbationConfig::default(),
            k_fractions: vec![0.1, 0.2, 0.3, 0.4, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AopcVariant {
    Comprehensiveness,
    Sufficiency,
}

fn trapezoid(fractions: &[f64], scores: &[f64]) -> f64 {
    let mut auc = 0.0;
    for i in 1..fractions.len() {
        auc += 0.5 * (scores[i] + scores[i - 1]) * (fractions[i] - fractions[i - 1]);
    }
    auc
}

/// Unit order by decreasing score, ties broken by unit index ascending.
fn ranked_units(result: &AttributionResult) -> Vec<usize> {
    let mut order: Vec<usize> = (0..result.scores.len()).collect();
    order.sort_by(|&a, &b| {
        result.scores[b]
            .partial_cmp(&result.scores[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    order
}

struct MetricRun<'a> {
    scorer: Scorer<'a>,
    units: Vec<(String, Vec<usize>)>,
    tok: &'a TokenizedText,
    has_mask_token: bool,
}

fn setup<'a>(
    model: &'a dyn ModelAdapter,
    tok: &'a TokenizedText,
    result: &AttributionResult,
    has_mask_token: bool,
) -> Result<MetricRun<'a>> {
    if result.units.is_empty() {
        return Err(Error::EmptyResult);
    }
    let units = tok.units(result.granularity);
    if units.len() != result.units.len() {
        return Err(Error::DimensionMismatch(format!(
            "result has {} units but input segments into {}",
            result.units.len(),
            units.len()
        )));
    }
    let forced_suffix = match result.target.kind {
        TargetKind::ClassIndex => Vec::new(),
        TargetKind::GeneratedToken => {
            let p = result
                .target
                .output_position
                .ok_or_else(|| Error::InvalidTarget("missing output_position".into()))?;
            let generated = greedy_decode(model, &tok.token_ids, p + 1);
            generated[..p].to_vec()
        }
    };
    Ok(MetricRun {
        scorer: Scorer::new(model, result.target.clone(), result.inference_mode, forced_suffix),
        units,
        tok,
        has_mask_token,
    })
}

impl MetricRun<'_> {
    /// Score with exactly the given units perturbed.
    fn score_without(&self, perturbed: &[usize], cfg: &PerturbationConfig) -> Result<f64> {
        let m = self.units.len();
        let mut mask = Array2::ones((1, m));
        for &u in perturbed {
            mask[[0, u]] = 0;
        }
        let masks = MaskMatrix {
            masks: mask,
            design_kind: DesignKind::Occlusion,
        };
        let batch = apply_masks(self.tok, &masks, &self.units, cfg, self.has_mask_token)?;
        self.scorer.score_ids(&batch.sequences[0])
    }
}

/// Remove units in decreasing score order, tracing target score vs fraction
/// removed.
pub fn deletion(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    result: &AttributionResult,
    cfg: &MetricConfig,
    has_mask_token: bool,
) -> Result<FaithfulnessCurve> {
    let run = setup(model, tok, result, has_mask_token)?;
    let order = ranked_units(result);
    let m = order.len();
    let mut fractions = Vec::with_capacity(m + 1);
    let mut scores = Vec::with_capacity(m + 1);
    for j in 0..=m {
        fractions.push(j as f64 / m as f64);
        scores.push(run.score_without(&order[..j], &cfg.perturb)?);
    }
    let auc = trapezoid(&fractions, &scores);
    Ok(FaithfulnessCurve {
        fractions,
        scores,
        auc,
    })
}

/// Dual of deletion: start fully perturbed and restore units in decreasing
/// score order.
pub fn insertion(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    result: &AttributionResult,
    cfg: &MetricConfig,
    has_mask_token: bool,
) -> Result<FaithfulnessCurve> {
    let run = setup(model, tok, result, has_mask_token)?;
    let order = ranked_units(result);
    let m = order.len();
    let mut fractions = Vec::with_capacity(m + 1);
    let mut scores = Vec::with_capacity(m + 1);
    for j in 0..=m {
        fractions.push(j as f64 / m as f64);
        scores.push(run.score_without(&order[j..], &cfg.perturb)?);
    }
    let auc = trapezoid(&fractions, &scores);
    Ok(FaithfulnessCurve {
        fractions,
        scores,
        auc,
    })
}

/// Mean score drop when the top-k units are removed (comprehensiveness) or
/// when only the top-k units are kept (sufficiency), over the k grid.
pub fn aopc(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    result: &AttributionResult,
    cfg: &MetricConfig,
    has_mask_token: bool,
    variant: AopcVariant,
) -> Result<f64> {
    let run = setup(model, tok, result, has_mask_token)?;
    let order = ranked_units(result);
    let m = order.len();
    let full = run.score_without(&[], &cfg.perturb)?;
    let mut acc = 0.0;
    for frac in &cfg.k_fractions {
        let k = ((frac * m as f64).ceil() as usize).clamp(1, m);
        let perturbed: Vec<usize> = match variant {
            AopcVariant::Comprehensiveness => order[..k].to_vec(),
            AopcVariant::Sufficiency => order[k..].to_vec(),
        };
        acc += full - run.score_without(&perturbed, &cfg.perturb)?;
    }
    Ok(acc / cfg.k_fractions.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attr::engine::{Diagnostics, InferenceMode, Target};
    use crate::attr::mask::Replacement;
    use crate::model::{CoalitionGame, LinearBagOfWords, LBOW_VOCAB};
    use crate::text::{tokenize, Granularity, Tokenizer};

    fn analytic() -> (LinearBagOfWords, Tokenizer, TokenizedText) {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(
            &tk,
            &[("three", 3.0), ("two", 2.0), ("one", 1.0)],
            0.0,
        );
        let tok = tokenize("three two one", &tk).unwrap();
        (model, tk, tok)
    }

    fn result_with_scores(tok: &TokenizedText, scores: Vec<f64>) -> AttributionResult {
        let units = tok.units(Granularity::Word);
        AttributionResult {
            method: "occlusion".to_string(),
            granularity: Granularity::Word,
            inference_mode: InferenceMode::Logits,
            target: Target::class(1),
            units: units.into_iter().map(|(n, _)| n).collect(),
            scores,
            diagnostics: Diagnostics {
                n_model_calls: 0,
                seed: 0,
                warnings: Vec::new(),
            },
        }
    }

    fn delete_cfg() -> MetricConfig {
        MetricConfig {
            perturb: PerturbationConfig {
                replacement: Replacement::Delete,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn deletion_curve_analytic() {
        let (model, _, tok) = analytic();
        let result = result_with_scores(&tok, vec![3.0, 2.0, 1.0]);
        let c = deletion(&model, &tok, &result, &delete_cfg(), true).unwrap();
        assert_eq!(c.scores, vec![6.0, 3.0, 1.0, 0.0]);
        assert_eq!(c.fractions.first(), Some(&0.0));
        assert_eq!(c.fractions.last(), Some(&1.0));
    }

    #[test]
    fn insertion_curve_analytic() {
        let (model, _, tok) = analytic();
        let result = result_with_scores(&tok, vec![3.0, 2.0, 1.0]);
        let c = insertion(&model, &tok, &result, &delete_cfg(), true).unwrap();
        assert_eq!(c.scores, vec![0.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn endpoints_agree_between_curves() {
        let (model, _, tok) = analytic();
        let result = result_with_scores(&tok, vec![3.0, 2.0, 1.0]);
        let d = deletion(&model, &tok, &result, &delete_cfg(), true).unwrap();
        let i = insertion(&model, &tok, &result, &delete_cfg(), true).unwrap();
        assert_eq!(d.scores.first(), i.scores.last());
        assert_eq!(d.scores.last(), i.scores.first());
    }

    #[test]
    fn perfect_ordering_extremal_over_permutations() {
        let (model, _, tok) = analytic();
        let perfect_scores = vec![3.0, 2.0, 1.0];
        let perms: Vec<Vec<f64>> = vec![
            vec![3.0, 2.0, 1.0],
            vec![3.0, 1.0, 2.0],
            vec![2.0, 3.0, 1.0],
            vec![1.0, 3.0, 2.0],
            vec![2.0, 1.0, 3.0],
            vec![1.0, 2.0, 3.0],
        ];
        let perfect = result_with_scores(&tok, perfect_scores);
        let d_perfect = deletion(&model, &tok, &perfect, &delete_cfg(), true)
            .unwrap()
            .auc;
        let i_perfect = insertion(&model, &tok, &perfect, &delete_cfg(), true)
            .unwrap()
            .auc;
        let mut d_sum = 0.0;
        for p in perms {
            let r = result_with_scores(&tok, p);
            let d = deletion(&model, &tok, &r, &delete_cfg(), true).unwrap().auc;
            let i = insertion(&model, &tok, &r, &delete_cfg(), true).unwrap().auc;
            assert!(d >= d_perfect - 1e-12);
            assert!(i <= i_perfect + 1e-12);
            d_sum += d;
        }
        // random (average over all orders) deletion auc >= perfect auc
        assert!(d_sum / 6.0 >= d_perfect);
    }

    #[test]
    fn constant_model_flat_curve_and_zero_aopc() {
        let tk = Tokenizer::hashed(1024, false);
        let a = tk.word_id("p");
        let b = tk.word_id("q");
        let game = CoalitionGame::from_fn(vec![a, b], |_| 2.5);
        let tok = tokenize("p q", &tk).unwrap();
        let units = tok.units(Granularity::Word);
        let result = AttributionResult {
            method: "occlusion".into(),
            granularity: Granularity::Word,
            inference_mode: InferenceMode::Logits,
            target: Target::class(0),
            units: units.iter().map(|(n, _)| n.clone()).collect(),
            scores: vec![0.0, 0.0],
            diagnostics: Diagnostics {
                n_model_calls: 0,
                seed: 0,
                warnings: Vec::new(),
            },
        };
        let c = deletion(&game, &tok, &result, &delete_cfg(), true).unwrap();
        assert!(c.scores.iter().all(|&s| s == 2.5));
        assert!((c.auc - 2.5).abs() < 1e-12);
        for variant in [AopcVariant::Comprehensiveness, AopcVariant::Sufficiency] {
            let v = aopc(&game, &tok, &result, &delete_cfg(), true, variant).unwrap();
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn aopc_analytic_orderings() {
        let (model, _, tok) = analytic();
        let perfect = result_with_scores(&tok, vec![3.0, 2.0, 1.0]);
        let reversed = result_with_scores(&tok, vec![1.0, 2.0, 3.0]);
        let comp = aopc(
            &model,
            &tok,
            &perfect,
            &delete_cfg(),
            true,
            AopcVariant::Comprehensiveness,
        )
        .unwrap();
        assert!(comp > 0.0);
        let suff_perfect = aopc(&model, &tok, &perfect, &delete_cfg(), true, AopcVariant::Sufficiency).unwrap();
        let suff_reversed = aopc(&model, &tok, &reversed, &delete_cfg(), true, AopcVariant::Sufficiency).unwrap();
        assert!(suff_perfect <= suff_reversed);
    }

    #[test]
    fn curves_invariant_to_positive_rescaling() {
        let (model, _, tok) = analytic();
        let a = result_with_scores(&tok, vec![3.0, 2.0, 1.0]);
        let b = result_with_scores(&tok, vec![300.0, 200.0, 100.0]);
        let ca = deletion(&model, &tok, &a, &delete_cfg(), true).unwrap();
        let cb = deletion(&model, &tok, &b, &delete_cfg(), true).unwrap();
        assert_eq!(ca.scores, cb.scores);
    }

    #[test]
    fn single_unit_two_point_curve() {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(&tk, &[("only", 4.0)], 0.0);
        let tok = tokenize("only", &tk).unwrap();
        let result = AttributionResult {
            method: "occlusion".into(),
            granularity: Granularity::Word,
            inference_mode: InferenceMode::Logits,
            target: Target::class(1),
            units: vec!["only".into()],
            scores: vec![4.0],
            diagnostics: Diagnostics {
                n_model_calls: 0,
                seed: 0,
                warnings: Vec::new(),
            },
        };
        let c = insertion(&model, &tok, &result, &delete_cfg(), true).unwrap();
        assert_eq!(c.scores, vec![0.0, 4.0]);
    }

    #[test]
    fn empty_result_rejected() {
        let (model, _, tok) = analytic();
        let mut r = result_with_scores(&tok, vec![1.0, 2.0, 3.0]);
        r.units.clear();
        r.scores.clear();
        assert!(matches!(
            deletion(&model, &tok, &r, &delete_cfg(), true),
            Err(Error::EmptyResult)
        ));
    }
}
