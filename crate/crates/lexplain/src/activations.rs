//! Activation collection at a split point and the binary activation cache.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::SplitModel;
use crate::text::{tokenize, ActivationGranularity, Tokenizer};

pub const ACT_MAGIC: &[u8; 8] = b"LXACT\0\0\x01";

/// An n×d activation matrix with provenance: which (sample, token/word) each
/// row came from, at which granularity and split point.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationBundle {
    pub matrix: Array2<f32>,
    pub granularity: ActivationGranularity,
    /// One `(sample_index, unit_index)` per matrix row.
    pub provenance: Vec<(usize, usize)>,
    pub split_point: String,
}

impl ActivationBundle {
    pub fn n_rows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }
}

/// Run texts through the extractor and keep rows per the granularity rule.
/// `word_mean` averages the token rows sharing a word id.
pub fn collect_activations(
    split: &SplitModel,
    tokenizer: &Tokenizer,
    texts: &[String],
    granularity: ActivationGranularity,
) -> Result<ActivationBundle> {
    if texts.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut provenance = Vec::new();
    for (sample, text) in texts.iter().enumerate() {
        let tok = tokenize(text, tokenizer)?;
        let acts = split.extract(&tok.token_ids);
        if acts.nrows() != tok.len() {
            // pooled split points only support whole-sample granularities
            rows.push(acts.row(0).iter().map(|&v| v as f32).collect());
            provenance.push((sample, 0));
            continue;
        }
        match granularity {
            ActivationGranularity::ClsToken => {
                if tok.special_mask.first().copied() != Some(true) {
                    return Err(Error::MissingClsToken);
                }
                rows.push(acts.row(0).iter().map(|&v| v as f32).collect());
                provenance.push((sample, 0));
            }
            ActivationGranularity::AllTokens => {
                for i in 0..tok.len() {
                    rows.push(acts.row(i).iter().map(|&v| v as f32).collect());
                    provenance.push((sample, i));
                }
            }
            ActivationGranularity::NonSpecialTokens => {
                for (k, i) in tok.non_special_indices().into_iter().enumerate() {
                    rows.push(acts.row(i).iter().map(|&v| v as f32).collect());
                    provenance.push((sample, k));
                }
            }
            ActivationGranularity::WordMean => {
                for (w, group) in tok.word_groups().into_iter().enumerate() {
                    let mut mean = vec![0f64; acts.ncols()];
                    for &i in &group {
                        for (j, m) in mean.iter_mut().enumerate() {
                            *m += acts[[i, j]];
                        }
                    }
                    let n = group.len() as f64;
                    rows.push(mean.into_iter().map(|v| (v / n) as f32).collect());
                    provenance.push((sample, w));
                }
            }
        }
    }
    let d = rows.first().map_or(0, Vec::len);
    let flat: Vec<f32> = rows.into_iter().flatten().collect();
    let matrix = Array2::from_shape_vec((provenance.len(), d), flat)
        .map_err(|e| Error::DimensionMismatch(e.to_string()))?;
    Ok(ActivationBundle {
        matrix,
        granularity,
        provenance,
        split_point: split.split_point.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct CacheHeader {
    shape: [usize; 2],
    granularity: ActivationGranularity,
    split_point: String,
    provenance: Vec<(usize, usize)>,
}

/// Write the bundle to the binary cache format: magic, length-prefixed JSON
/// header, then row-major little-endian float32 data.
pub fn save_bundle(bundle: &ActivationBundle, path: &Path) -> Result<()> {
    let header = CacheHeader {
        shape: [bundle.n_rows(), bundle.dim()],
        granularity: bundle.granularity,
        split_point: bundle.split_point.clone(),
        provenance: bundle.provenance.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + bundle.matrix.len() * 4);
    out.extend_from_slice(ACT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for v in bundle.matrix.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(path, &out)
}

pub fn load_bundle(path: &Path) -> Result<ActivationBundle> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[0..8] != ACT_MAGIC {
        return Err(Error::BadFileFormat {
            kind: "activation cache".to_string(),
            detail: "bad magic".to_string(),
        });
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let header: CacheHeader = serde_json::from_slice(&buf[16..16 + hlen])?;
    let [n, d] = header.shape;
    let data = &buf[16 + hlen..];
    if data.len() != n * d * 4 {
        return Err(Error::BadFileFormat {
            kind: "activation cache".to_string(),
            detail: format!("expected {} data bytes, got {}", n * d * 4, data.len()),
        });
    }
    let values: Vec<f32> = data
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ActivationBundle {
        matrix: Array2::from_shape_vec((n, d), values)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))?,
        granularity: header.granularity,
        provenance: header.provenance,
        split_point: header.split_point,
    })
}

/// Write-temp-then-rename so readers never see a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{split, TinyTransformer, Task};
    use std::sync::Arc;

    fn setup() -> (SplitModel, Tokenizer) {
        let model = Arc::new(TinyTransformer::new(Task::Generation, 1));
        (split(model, "layer_1").unwrap(), Tokenizer::hashed(256, false))
    }

    #[test]
    fn one_row_per_sample_at_cls() {
        let model = Arc::new(TinyTransformer::new(Task::Classification, 1));
        let sm = split(model, "layer_0").unwrap();
        let tk = Tokenizer::hashed(256, true);
        let texts: Vec<String> = (0..100).map(|i| format!("sample number {i}")).collect();
        let b = collect_activations(&sm, &tk, &texts, ActivationGranularity::ClsToken).unwrap();
        assert_eq!(b.n_rows(), 100);
    }

    #[test]
    fn cls_requires_special_first_token() {
        let (sm, tk) = setup(); // generation tokenizer: no CLS
        let r = collect_activations(
            &sm,
            &tk,
            &["hello world".to_string()],
            ActivationGranularity::ClsToken,
        );
        assert!(matches!(r, Err(Error::MissingClsToken)));
    }

    #[test]
    fn non_special_provenance() {
        let (sm, tk) = setup();
        let b = collect_activations(
            &sm,
            &tk,
            &["one two three four five".to_string()],
            ActivationGranularity::NonSpecialTokens,
        )
        .unwrap();
        assert_eq!(b.n_rows(), 5);
        assert_eq!(b.provenance, vec![(0, 0), (0, 1), (0, 2), (0, 3), (0, 4)]);
    }

    #[test]
    fn word_mean_averages_subword_rows() {
        let model = Arc::new(TinyTransformer::new(Task::Generation, 1));
        let sm = split(model, "layer_1").unwrap();
        let tk = Tokenizer::with_pieces(256, &["work", "##shop"], false);
        let text = "workshop".to_string();
        let tokens = collect_activations(
            &sm,
            &tk,
            &[text.clone()],
            ActivationGranularity::AllTokens,
        )
        .unwrap();
        assert_eq!(tokens.n_rows(), 2);
        let words =
            collect_activations(&sm, &tk, &[text], ActivationGranularity::WordMean).unwrap();
        assert_eq!(words.n_rows(), 1);
        for j in 0..words.dim() {
            let mean = (tokens.matrix[[0, j]] as f64 + tokens.matrix[[1, j]] as f64) / 2.0;
            assert!((words.matrix[[0, j]] as f64 - mean).abs() < 1e-6);
        }
    }

    #[test]
    fn determinism_and_cache_roundtrip() {
        let (sm, tk) = setup();
        let texts = vec!["alpha beta gamma".to_string(), "delta".to_string()];
        let a = collect_activations(&sm, &tk, &texts, ActivationGranularity::NonSpecialTokens)
            .unwrap();
        let b = collect_activations(&sm, &tk, &texts, ActivationGranularity::NonSpecialTokens)
            .unwrap();
        assert_eq!(a.matrix, b.matrix);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("acts.lxact");
        save_bundle(&a, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(a, loaded);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.lxact");
        std::fs::write(&path, b"NOTMAGIC________").unwrap();
        assert!(matches!(
            load_bundle(&path),
            Err(Error::BadFileFormat { .. })
        ));
    }
}
