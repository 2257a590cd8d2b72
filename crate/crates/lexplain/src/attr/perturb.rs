//! Perturbation-based attribution: Occlusion, LIME, KernelSHAP, and Sobol
//! total-order indices, each expressed as a (design, inference, aggregation)
//! pipeline.

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attr::engine::{
    run_pipeline, AggOutput, AggregationStage, AttributionResult, InferenceMode, MaskDesignStage,
    Scorer, Target,
};
use crate::attr::mask::{DesignKind, MaskMatrix, PerturbationConfig};
use crate::error::{Error, Result};
use crate::model::ModelAdapter;
use crate::text::{Granularity, TokenizedText};

/// Full-enumeration threshold for KernelSHAP coalitions.
const ENUM_LIMIT: usize = 4096;
const LIME_RIDGE: f64 = 1e-6;
const SVD_EPS: f64 = 1e-12;

fn mask_row_from_bits(z: u64, m: usize) -> Vec<u8> {
    (0..m).map(|i| ((z >> i) & 1) as u8).collect()
}

fn binom(n: usize, k: usize) -> f64 {
    let mut out = 1.0;
    for i in 0..k {
        out *= (n - i) as f64 / (i + 1) as f64;
    }
    out
}

/// Pseudo-inverse solve of the weighted, optionally ridge-regularized least
/// squares system; never raises on singular designs.
fn wls_solve(x: &DMatrix<f64>, y: &DVector<f64>, w: &[f64], ridge: f64, skip_ridge_col: Option<usize>) -> DVector<f64> {
    let p = x.nrows();
    let q = x.ncols();
    let mut xtwx = DMatrix::zeros(q, q);
    let mut xtwy = DVector::zeros(q);
    for r in 0..p {
        let wr = w[r];
        for a in 0..q {
            xtwy[a] += wr * x[(r, a)] * y[r];
            for b in 0..q {
                xtwx[(a, b)] += wr * x[(r, a)] * x[(r, b)];
            }
        }
    }
    // Ridge only steps in for ill-conditioned systems (under-determined
    // sampled designs); well-conditioned enumerated designs solve unbiased.
    let svd = xtwx.clone().svd(true, true);
    let max_sv = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let min_sv = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    if ridge > 0.0 && min_sv <= max_sv * 1e-10 {
        for a in 0..q {
            if Some(a) != skip_ridge_col {
                xtwx[(a, a)] += ridge;
            }
        }
        let svd = xtwx.svd(true, true);
        return svd
            .solve(&xtwy, SVD_EPS)
            .unwrap_or_else(|_| DVector::zeros(q));
    }
    svd.solve(&xtwy, SVD_EPS).unwrap_or_else(|_| DVector::zeros(q))
}

// ---------------------------------------------------------------------------
// Occlusion
// ---------------------------------------------------------------------------

pub struct OcclusionDesign;

impl MaskDesignStage for OcclusionDesign {
    fn kind(&self) -> DesignKind {
        DesignKind::Occlusion
    }
    fn build(&self, n_units: usize) -> Result<MaskMatrix> {
        Ok(MaskMatrix::occlusion(n_units))
    }
}

/// score_i = s(x) − s(x with unit i perturbed).
pub struct DifferenceAggregator;

impl AggregationStage for DifferenceAggregator {
    fn method_name(&self) -> &str {
        "occlusion"
    }
    fn aggregate(&self, masks: &MaskMatrix, scores: &[f64]) -> Result<AggOutput> {
        let m = masks.n_units();
        if scores.len() != m + 1 {
            return Err(Error::PipelineContract {
                stage: "aggregation".to_string(),
                detail: format!("occlusion expects {} scores, got {}", m + 1, scores.len()),
            });
        }
        let full = scores[0];
        Ok(AggOutput {
            scores: (0..m).map(|i| full - scores[i + 1]).collect(),
            warnings: Vec::new(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn occlusion(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &PerturbationConfig,
    has_mask_token: bool,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    let scorer = Scorer::new(model, target.clone(), mode, forced_suffix);
    run_pipeline(
        &OcclusionDesign,
        &scorer,
        &DifferenceAggregator,
        tok,
        granularity,
        cfg,
        has_mask_token,
        target,
        mode,
    )
}

// ---------------------------------------------------------------------------
// LIME
// ---------------------------------------------------------------------------

/// All-ones design plus coalitions sampled uniformly over sizes then uniformly
/// within a size; enumerates the full 2^M cube when it fits the budget.
pub struct LimeDesign {
    pub n_samples: usize,
    pub seed: u64,
}

impl MaskDesignStage for LimeDesign {
    fn kind(&self) -> DesignKind {
        DesignKind::LimeUniform
    }
    fn build(&self, m: usize) -> Result<MaskMatrix> {
        if m > 0 && m < 64 && (1usize << m) <= self.n_samples {
            let rows = 1usize << m;
            let mut masks = Array2::zeros((rows, m));
            for z in 0..rows as u64 {
                let bits = mask_row_from_bits(z, m);
                for (i, b) in bits.into_iter().enumerate() {
                    masks[[z as usize, i]] = b;
                }
            }
            return Ok(MaskMatrix {
                masks,
                design_kind: DesignKind::LimeUniform,
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut masks = Array2::zeros((self.n_samples, m));
        masks.row_mut(0).fill(1);
        for r in 1..self.n_samples {
            let size = rng.gen_range(0..=m);
            let mut picked: Vec<usize> = (0..m).collect();
            for i in 0..size {
                let j = rng.gen_range(i..m);
                picked.swap(i, j);
            }
            for &u in &picked[..size] {
                masks[[r, u]] = 1;
            }
        }
        Ok(MaskMatrix {
            masks,
            design_kind: DesignKind::LimeUniform,
        })
    }
}

/// Weighted ridge regression of scores on mask rows; the coefficients are the
/// attribution scores. Weight: exp(−(1 − |z|/M)² / kernel_width²).
pub struct LimeAggregator {
    pub kernel_width: f64,
}

impl AggregationStage for LimeAggregator {
    fn method_name(&self) -> &str {
        "lime"
    }
    fn aggregate(&self, masks: &MaskMatrix, scores: &[f64]) -> Result<AggOutput> {
        let m = masks.n_units();
        let p = masks.n_designs();
        // column 0 is the intercept
        let mut x = DMatrix::zeros(p, m + 1);
        let mut w = Vec::with_capacity(p);
        for r in 0..p {
            x[(r, 0)] = 1.0;
            for u in 0..m {
                x[(r, u + 1)] = f64::from(masks.masks[[r, u]]);
            }
            let kept = masks.kept_count(r) as f64;
            let z = 1.0 - kept / m as f64;
            w.push((-(z * z) / (self.kernel_width * self.kernel_width)).exp());
        }
        let y = DVector::from_column_slice(scores);
        let beta = wls_solve(&x, &y, &w, LIME_RIDGE, Some(0));
        Ok(AggOutput {
            scores: (0..m).map(|u| beta[u + 1]).collect(),
            warnings: Vec::new(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn lime(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &PerturbationConfig,
    has_mask_token: bool,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    let m = tok.units(granularity).len();
    if cfg.n_samples < m + 2 {
        return Err(Error::InsufficientSamples(format!(
            "LIME needs n_samples >= {} for {m} units, got {}",
            m + 2,
            cfg.n_samples
        )));
    }
    let design = LimeDesign {
        n_samples: cfg.n_samples,
        seed: cfg.seed,
    };
    let aggregator = LimeAggregator {
        kernel_width: cfg.kernel_width,
    };
    let scorer = Scorer::new(model, target.clone(), mode, forced_suffix);
    run_pipeline(
        &design,
        &scorer,
        &aggregator,
        tok,
        granularity,
        cfg,
        has_mask_token,
        target,
        mode,
    )
}

// ---------------------------------------------------------------------------
// KernelSHAP
// ---------------------------------------------------------------------------

/// Row 0: full coalition; row 1: empty coalition; then every non-trivial
/// coalition when 2^M ≤ 4096, else sampled coalitions.
pub struct KernelShapDesign {
    pub n_samples: usize,
    pub seed: u64,
}

impl MaskDesignStage for KernelShapDesign {
    fn kind(&self) -> DesignKind {
        DesignKind::KernelShap
    }
    fn build(&self, m: usize) -> Result<MaskMatrix> {
        if m < 2 {
            return Err(Error::TooFewUnits(m));
        }
        let mut rows: Vec<Vec<u8>> = vec![vec![1; m], vec![0; m]];
        if m < 63 && (1usize << m) <= ENUM_LIMIT {
            for z in 1..((1u64 << m) - 1) {
                rows.push(mask_row_from_bits(z, m));
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            // size distribution proportional to the Shapley kernel mass per size
            let size_weights: Vec<f64> = (1..m)
                .map(|k| (m - 1) as f64 / (k * (m - k)) as f64)
                .collect();
            let total: f64 = size_weights.iter().sum();
            for _ in 0..self.n_samples {
                let mut u = rng.gen_range(0.0..total);
                let mut size = 1;
                for (k, sw) in size_weights.iter().enumerate() {
                    if u < *sw {
                        size = k + 1;
                        break;
                    }
                    u -= sw;
                }
                let mut picked: Vec<usize> = (0..m).collect();
                for i in 0..size {
                    let j = rng.gen_range(i..m);
                    picked.swap(i, j);
                }
                let mut row = vec![0u8; m];
                for &i in &picked[..size] {
                    row[i] = 1;
                }
                rows.push(row);
            }
        }
        let p = rows.len();
        let flat: Vec<u8> = rows.into_iter().flatten().collect();
        Ok(MaskMatrix {
            masks: Array2::from_shape_vec((p, m), flat)
                .map_err(|e| Error::DimensionMismatch(e.to_string()))?,
            design_kind: DesignKind::KernelShap,
        })
    }
}

/// Weighted least squares under the Shapley kernel with the efficiency
/// constraint Σφ = s(full) − s(empty) enforced exactly by eliminating the
/// last unit.
pub struct KernelShapAggregator;

impl AggregationStage for KernelShapAggregator {
    fn method_name(&self) -> &str {
        "kernelshap"
    }
    fn aggregate(&self, masks: &MaskMatrix, scores: &[f64]) -> Result<AggOutput> {
        let m = masks.n_units();
        if m < 2 {
            return Err(Error::TooFewUnits(m));
        }
        let s_full = scores[0];
        let s_empty = scores[1];
        let delta = s_full - s_empty;
        let p = masks.n_designs() - 2;
        let mut x = DMatrix::zeros(p, m - 1);
        let mut y = DVector::zeros(p);
        let mut w = Vec::with_capacity(p);
        for r in 0..p {
            let row = masks.masks.row(r + 2);
            let kept = row.iter().filter(|&&v| v == 1).count();
            let z_last = f64::from(row[m - 1]);
            for u in 0..m - 1 {
                x[(r, u)] = f64::from(row[u]) - z_last;
            }
            y[r] = scores[r + 2] - s_empty - z_last * delta;
            let weight = if kept == 0 || kept == m {
                0.0
            } else {
                (m - 1) as f64 / (binom(m, kept) * (kept * (m - kept)) as f64)
            };
            w.push(weight);
        }
        let beta = wls_solve(&x, &y, &w, 0.0, None);
        let mut phi: Vec<f64> = (0..m - 1).map(|u| beta[u]).collect();
        let sum: f64 = phi.iter().sum();
        phi.push(delta - sum);
        Ok(AggOutput {
            scores: phi,
            warnings: Vec::new(),
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn kernelshap(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &PerturbationConfig,
    has_mask_token: bool,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    let design = KernelShapDesign {
        n_samples: cfg.n_samples,
        seed: cfg.seed,
    };
    let scorer = Scorer::new(model, target.clone(), mode, forced_suffix);
    run_pipeline(
        &design,
        &scorer,
        &KernelShapAggregator,
        tok,
        granularity,
        cfg,
        has_mask_token,
        target,
        mode,
    )
}

// ---------------------------------------------------------------------------
// Sobol (total-order, Jansen estimator)
// ---------------------------------------------------------------------------

/// Replicated design: N base pairs (A, B) of Bernoulli(0.5) masks followed by
/// the M hybrid blocks AB_i (A with column i taken from B).
pub struct SobolDesign {
    pub n_base: usize,
    pub seed: u64,
}

impl MaskDesignStage for SobolDesign {
    fn kind(&self) -> DesignKind {
        DesignKind::SobolReplicated
    }
    fn build(&self, m: usize) -> Result<MaskMatrix> {
        let n = self.n_base;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let a = Array2::from_shape_fn((n, m), |_| u8::from(rng.gen_bool(0.5)));
        let b = Array2::from_shape_fn((n, m), |_| u8::from(rng.gen_bool(0.5)));
        let mut masks = Array2::zeros((n * (m + 2), m));
        for r in 0..n {
            for u in 0..m {
                masks[[r, u]] = a[[r, u]];
                masks[[n + r, u]] = b[[r, u]];
            }
        }
        for i in 0..m {
            for r in 0..n {
                for u in 0..m {
                    masks[[n * (2 + i) + r, u]] = if u == i { b[[r, u]] } else { a[[r, u]] };
                }
            }
        }
        Ok(MaskMatrix {
            masks,
            design_kind: DesignKind::SobolReplicated,
        })
    }
}

const SOBOL_VAR_FLOOR: f64 = 1e-12;

pub struct SobolAggregator {
    pub n_base: usize,
}

impl AggregationStage for SobolAggregator {
    fn method_name(&self) -> &str {
        "sobol"
    }
    fn aggregate(&self, masks: &MaskMatrix, scores: &[f64]) -> Result<AggOutput> {
        let m = masks.n_units();
        let n = self.n_base;
        if scores.len() != n * (m + 2) {
            return Err(Error::PipelineContract {
                stage: "aggregation".to_string(),
                detail: format!(
                    "sobol expects {} scores, got {}",
                    n * (m + 2),
                    scores.len()
                ),
            });
        }
        let base = &scores[..2 * n];
        let mean = base.iter().sum::<f64>() / base.len() as f64;
        let var = base.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / base.len() as f64;
        let mut out = Vec::with_capacity(m);
        let mut warnings = Vec::new();
        for i in 0..m {
            let mut acc = 0.0;
            for r in 0..n {
                let d = scores[r] - scores[n * (2 + i) + r];
                acc += d * d;
            }
            let numerator = acc / (2.0 * n as f64);
            out.push(numerator);
        }
        if var >= SOBOL_VAR_FLOOR {
            for v in &mut out {
                *v /= var;
            }
        } else {
            warnings.push(
                "output variance below 1e-12; Sobol indices reported unnormalized".to_string(),
            );
        }
        Ok(AggOutput {
            scores: out,
            warnings,
        })
    }
}

#[allow(clippy::too_many_arguments)]
pub fn sobol(
    model: &dyn ModelAdapter,
    tok: &TokenizedText,
    target: Target,
    granularity: Granularity,
    cfg: &PerturbationConfig,
    has_mask_token: bool,
    mode: InferenceMode,
    forced_suffix: Vec<u32>,
) -> Result<AttributionResult> {
    if cfg.sobol_n < 32 {
        return Err(Error::InsufficientSamples(format!(
            "Sobol needs sobol_n >= 32, got {}",
            cfg.sobol_n
        )));
    }
    let design = SobolDesign {
        n_base: cfg.sobol_n,
        seed: cfg.seed,
    };
    let aggregator = SobolAggregator {
        n_base: cfg.sobol_n,
    };
    let scorer = Scorer::new(model, target.clone(), mode, forced_suffix);
    run_pipeline(
        &design,
        &scorer,
        &aggregator,
        tok,
        granularity,
        cfg,
        has_mask_token,
        target,
        mode,
    )
}
