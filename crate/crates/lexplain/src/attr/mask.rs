//! Binary perturbation designs over interpretable units and their application
//! to token sequences.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{TokenizedText, MASK_ID, PAD_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignKind {
    Occlusion,
    LimeUniform,
    KernelShap,
    SobolReplicated,
}

/// A batch of binary designs over M interpretable units. Entry 1 keeps the
/// unit, 0 perturbs it.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix {
    pub masks: Array2<u8>,
    pub design_kind: DesignKind,
}

impl MaskMatrix {
    pub fn n_designs(&self) -> usize {
        self.masks.nrows()
    }

    pub fn n_units(&self) -> usize {
        self.masks.ncols()
    }

    /// The occlusion design: row 0 keeps everything, row i+1 drops unit i.
    pub fn occlusion(m: usize) -> Self {
        let mut masks = Array2::ones((m + 1, m));
        for i in 0..m {
            masks[[i + 1, i]] = 0;
        }
        MaskMatrix {
            masks,
            design_kind: DesignKind::Occlusion,
        }
    }

    pub fn kept_count(&self, row: usize) -> usize {
        self.masks.row(row).iter().filter(|&&v| v == 1).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Replacement {
    MaskToken,
    PadToken,
    Delete,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PerturbationConfig {
    pub replacement: Replacement,
    pub n_samples: usize,
    pub kernel_width: f64,
    /// Base sample count N for the Sobol replicated design.
    pub sobol_n: usize,
    pub seed: u64,
}

impl Default for PerturbationConfig {
    fn default() -> Self {
        PerturbationConfig {
            replacement: Replacement::MaskToken,
            n_samples: 1000,
            kernel_width: 0.25,
            sobol_n: 256,
            seed: 0,
        }
    }
}

pub struct PerturbedBatch {
    pub sequences: Vec<Vec<u32>>,
    pub warnings: Vec<String>,
}

/// Apply each design row to the token sequence. Units with mask 0 have all
/// their tokens replaced (or deleted); special tokens are never touched.
pub fn apply_masks(
    tok: &TokenizedText,
    masks: &MaskMatrix,
    units: &[(String, Vec<usize>)],
    cfg: &PerturbationConfig,
    has_mask_token: bool,
) -> Result<PerturbedBatch> {
    if masks.n_units() != units.len() {
        return Err(Error::DimensionMismatch(format!(
            "mask has {} columns but input has {} units",
            masks.n_units(),
            units.len()
        )));
    }
    let mut warnings = Vec::new();
    let replacement = match cfg.replacement {
        Replacement::MaskToken if !has_mask_token => {
            warnings.push("tokenizer has no mask token; falling back to pad token".to_string());
            Replacement::PadToken
        }
        r => r,
    };
    let mut sequences = Vec::with_capacity(masks.n_designs());
    for row in 0..masks.n_designs() {
        let mut drop = vec![false; tok.len()];
        for (u, (_, token_indices)) in units.iter().enumerate() {
            if masks.masks[[row, u]] == 0 {
                for &i in token_indices {
                    if !tok.special_mask[i] {
                        drop[i] = true;
                    }
                }
            }
        }
        let seq: Vec<u32> = match replacement {
            Replacement::Delete => tok
                .token_ids
                .iter()
                .zip(&drop)
                .filter(|(_, &d)| !d)
                .map(|(&id, _)| id)
                .collect(),
            Replacement::MaskToken | Replacement::PadToken => {
                let rep = if replacement == Replacement::MaskToken {
                    MASK_ID
                } else {
                    PAD_ID
                };
                tok.token_ids
                    .iter()
                    .zip(&drop)
                    .map(|(&id, &d)| if d { rep } else { id })
                    .collect()
            }
        };
        sequences.push(seq);
    }
    Ok(PerturbedBatch {
        sequences,
        warnings,
    })
}
