//! Concept interpretation, concept importance, and concept-space metrics.

use std::io::{Read as _, Write as _};
use std::net::TcpStream;
use std::time::Duration;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use ordered_float::OrderedFloat;
use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix;
use serde::{Deserialize, Serialize};

use crate::activations::ActivationBundle;
use crate::attr::engine::{display_token, resolve_score_grad, InferenceMode, Target};
use crate::concept::models::ConceptModel;
use crate::error::{Error, Result};
use crate::model::{SplitModel, Task};
use crate::text::{ActivationGranularity, Granularity, TokenizedText};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptInterpretation {
    pub concept_id: usize,
    pub method: String,
    /// (display string, activation or logit value), sorted by value descending.
    pub evidence: Vec<(String, f64)>,
    pub label: Option<String>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImportanceEstimator {
    Grad,
    ConceptXGrad,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptImportance {
    pub concept_id: usize,
    pub value: f64,
    pub estimator: ImportanceEstimator,
    pub target: Target,
}

/// Display string for the corpus unit a bundle row came from.
fn row_display(
    granularity: ActivationGranularity,
    tok: &TokenizedText,
    position: usize,
) -> String {
    match granularity {
        ActivationGranularity::ClsToken => tok.text.clone(),
        ActivationGranularity::WordMean => {
            let units = tok.units(Granularity::Word);
            units
                .get(position)
                .map(|(name, _)| name.clone())
                .unwrap_or_default()
        }
        ActivationGranularity::AllTokens => match tok.word_ids.get(position).copied().flatten() {
            Some(w) => {
                let units = tok.units(Granularity::Word);
                units.get(w).map(|(name, _)| name.clone()).unwrap_or_default()
            }
            None => tok.text.clone(),
        },
        ActivationGranularity::NonSpecialTokens => {
            let idx = tok.non_special_indices();
            match idx.get(position).and_then(|&i| tok.word_ids[i]) {
                Some(w) => {
                    let units = tok.units(Granularity::Word);
                    units.get(w).map(|(name, _)| name.clone()).unwrap_or_default()
                }
                None => tok.text.clone(),
            }
        }
    }
}

/// For each concept, the k corpus words with the highest encoded activation.
/// Ties broken by (sample, position).
pub fn maxact_words(
    model: &ConceptModel,
    bundle: &ActivationBundle,
    corpus: &[TokenizedText],
    k: usize,
) -> Result<Vec<ConceptInterpretation>> {
    let a = bundle.matrix.mapv(|v| v as f64);
    let t = model.encode(&a)?;
    let n = t.nrows();
    let mut warnings = Vec::new();
    let take = if k > n {
        warnings.push(format!("requested k={k} evidence but only {n} rows available"));
        n
    } else {
        k
    };
    let mut out = Vec::with_capacity(model.c());
    for j in 0..model.c() {
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&x, &y| {
            t[[y, j]]
                .partial_cmp(&t[[x, j]])
                .unwrap()
                .then(bundle.provenance[x].cmp(&bundle.provenance[y]))
        });
        let evidence = order[..take]
            .iter()
            .map(|&row| {
                let (sample, position) = bundle.provenance[row];
                (
                    row_display(bundle.granularity, &corpus[sample], position),
                    t[[row, j]],
                )
            })
            .collect();
        out.push(ConceptInterpretation {
            concept_id: j,
            method: "maxact_words".to_string(),
            evidence,
            label: None,
            warnings: warnings.clone(),
        });
    }
    Ok(out)
}

/// Feed the unit-scaled concept direction through the predictor and report
/// the k vocabulary tokens with the highest next-token logits. Generation
/// only: the predictor must end in an unembedding.
pub fn top_vocab(
    split: &SplitModel,
    model: &ConceptModel,
    concept_id: usize,
    k: usize,
) -> Result<ConceptInterpretation> {
    if split.adapter.task() != Task::Generation {
        return Err(Error::UnsupportedTask(
            "top_vocab requires a causal-generation adapter".to_string(),
        ));
    }
    if concept_id >= model.c() {
        return Err(Error::InvalidTarget(format!(
            "concept {concept_id} out of range for c={}",
            model.c()
        )));
    }
    let dir = model.dictionary.row(concept_id).to_owned();
    let norm = dir.mapv(|v| v * v).sum().sqrt();
    let unit = if norm > 1e-12 { dir / norm } else { dir };
    let acts = unit.insert_axis(Axis(0));
    let logits = match split.predict(&acts) {
        crate::model::Logits::Generation(m) => m.row(m.nrows() - 1).to_owned(),
        crate::model::Logits::Classification(_) => {
            return Err(Error::UnsupportedTask(
                "predictor produced classification logits".to_string(),
            ))
        }
    };
    let take = k.min(logits.len());
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&x, &y| logits[y].partial_cmp(&logits[x]).unwrap().then(x.cmp(&y)));
    let evidence = order[..take]
        .iter()
        .map(|&id| (display_token(id as u32), logits[id]))
        .collect();
    Ok(ConceptInterpretation {
        concept_id,
        method: "top_vocab".to_string(),
        evidence,
        label: None,
        warnings: Vec::new(),
    })
}

/// A labeling backend: given a prompt built from concept evidence, return a
/// short label.
pub trait LabelingClient {
    fn label(&self, prompt: &str) -> Result<String>;
}

/// Deterministic in-process client: the top-3 evidence strings joined with
/// " / ".
pub struct StubLabelingClient;

impl LabelingClient for StubLabelingClient {
    fn label(&self, prompt: &str) -> Result<String> {
        let evidence: Vec<&str> = prompt
            .lines()
            .filter_map(|l| l.strip_prefix("- "))
            .take(3)
            .collect();
        Ok(evidence.join(" / "))
    }
}

/// HTTP client for the wire contract: POST {"prompt": ...} returning
/// {"label": ...}.
pub struct HttpLabelingClient {
    /// host:port
    pub address: String,
    pub path: String,
    pub timeout: Duration,
}

impl LabelingClient for HttpLabelingClient {
    fn label(&self, prompt: &str) -> Result<String> {
        let unavailable = |detail: String| Error::LabelingUnavailable(detail);
        let body = serde_json::to_string(&serde_json::json!({ "prompt": prompt }))?;
        let mut stream = TcpStream::connect(&self.address).map_err(|e| unavailable(e.to_string()))?;
        stream
            .set_read_timeout(Some(self.timeout))
            .map_err(|e| unavailable(e.to_string()))?;
        stream
            .set_write_timeout(Some(self.timeout))
            .map_err(|e| unavailable(e.to_string()))?;
        let request = format!(
            "POST {} HTTP/1.1\r\nHost: {}\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            self.path,
            self.address,
            body.len(),
            body
        );
        stream
            .write_all(request.as_bytes())
            .map_err(|e| unavailable(e.to_string()))?;
        let mut response = String::new();
        stream
            .read_to_string(&mut response)
            .map_err(|e| unavailable(e.to_string()))?;
        let payload = response
            .split("\r\n\r\n")
            .nth(1)
            .ok_or_else(|| unavailable("malformed http response".to_string()))?;
        let value: serde_json::Value =
            serde_json::from_str(payload.trim()).map_err(|e| unavailable(e.to_string()))?;
        value
            .get("label")
            .and_then(|v| v.as_str())
            .map(str::to_string)
            .ok_or_else(|| unavailable("response missing label".to_string()))
    }
}

fn labeling_prompt(interp: &ConceptInterpretation) -> String {
    let mut prompt = String::from(
        "These examples most strongly activate one learned concept of a language model.\n",
    );
    for (text, _) in &interp.evidence {
        prompt.push_str("- ");
        prompt.push_str(text);
        prompt.push('\n');
    }
    prompt.push_str("Reply with a short label for the concept.");
    prompt
}

/// Fill the interpretation's label from the client. On client failure the
/// caller keeps the unlabeled interpretation; the error carries the detail.
pub fn llm_label(
    interp: &ConceptInterpretation,
    client: &dyn LabelingClient,
) -> Result<ConceptInterpretation> {
    let mut labeled = interp.clone();
    labeled.method = "llm_label".to_string();
    if interp.evidence.is_empty() {
        labeled.label = Some(String::new());
        labeled
            .warnings
            .push("no evidence available for labeling".to_string());
        return Ok(labeled);
    }
    labeled.label = Some(client.label(&labeling_prompt(interp))?);
    Ok(labeled)
}

/// Concept-to-output gradients at the encoded input: g = ∂score/∂t through
/// decode and the predictor. `concept_x_grad` weights by the concept
/// activation itself. Generation targets read the activation row at the
/// target's output position; classification sums over rows.
pub fn concept_importance(
    split: &SplitModel,
    model: &ConceptModel,
    ids: &[u32],
    target: &Target,
    mode: InferenceMode,
    estimator: ImportanceEstimator,
) -> Result<Vec<ConceptImportance>> {
    let acts = split.extract(ids);
    let t = model.encode(&acts)?;
    let decoded = model.decode(&t)?;
    let (logits, vjp) = split.predict_vjp(&decoded);
    let glogits = resolve_score_grad(&logits, target, mode)?;
    let mut gact = vjp(&glogits);
    // decode's linear part is t·D, columnwise rescaled when standardized
    if let Some((_, s)) = &model.standardizer {
        gact = gact * &s.view().insert_axis(Axis(0));
    }
    let g = gact.dot(&model.dictionary.t());
    let pick = |m: &Array2<f64>| -> Result<Array1<f64>> {
        match target.output_position {
            Some(p) => {
                if p >= m.nrows() {
                    return Err(Error::InvalidTarget(format!(
                        "position {p} beyond {} activation rows",
                        m.nrows()
                    )));
                }
                Ok(m.row(p).to_owned())
            }
            None => Ok(m.sum_axis(Axis(0))),
        }
    };
    let values = match estimator {
        ImportanceEstimator::Grad => pick(&g)?,
        ImportanceEstimator::ConceptXGrad => pick(&(&t * &g))?,
    };
    Ok(values
        .iter()
        .enumerate()
        .map(|(j, &value)| ConceptImportance {
            concept_id: j,
            value,
            estimator,
            target: target.clone(),
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub mse: f64,
    pub fid: f64,
    pub sparsity: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub stability: Option<f64>,
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub warnings: Vec<String>,
}

fn mean_and_cov(x: &Array2<f64>) -> (Array1<f64>, DMatrix<f64>) {
    let (n, d) = x.dim();
    let mean = x.mean_axis(Axis(0)).expect("non-empty");
    let centered = x - &mean.view().insert_axis(Axis(0));
    let cov = DMatrix::from_fn(d, d, |p, q| {
        (0..n).map(|i| centered[[i, p]] * centered[[i, q]]).sum::<f64>() / n as f64
    });
    (mean, cov)
}

/// Fréchet distance between the Gaussian fits of two sample sets:
/// ‖μ₁−μ₂‖² + Tr(Σ₁+Σ₂−2(Σ₁Σ₂)^{1/2}). The matrix square root comes from the
/// eigendecomposition of the symmetrized product with negative eigenvalues
/// clipped at zero.
pub fn fid_samples(x: &Array2<f64>, y: &Array2<f64>) -> Result<(f64, Vec<String>)> {
    if x.ncols() != y.ncols() {
        return Err(Error::DimensionMismatch(format!(
            "fid sample widths {} vs {}",
            x.ncols(),
            y.ncols()
        )));
    }
    let (m1, s1) = mean_and_cov(x);
    let (m2, s2) = mean_and_cov(y);
    let mean_term: f64 = (&m1 - &m2).mapv(|v| v * v).sum();
    let prod = &s1 * &s2;
    let sym = (&prod + prod.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let mut warnings = Vec::new();
    if eig.eigenvalues.iter().any(|&l| l < -1e-10) {
        warnings.push("covariance product not PSD; negative eigenvalues clipped".to_string());
    }
    let trace_sqrt: f64 = eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).sum();
    let fid = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt;
    Ok((fid, warnings))
}

fn cosine(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

/// Mean cosine similarity of dictionary rows under the optimal one-to-one
/// assignment. Absolute cosine for sign-symmetric kinds (PCA/SVD).
pub fn stability(model: &ConceptModel, other: Option<&ConceptModel>) -> Result<f64> {
    let other = other.ok_or(Error::MissingCounterpart)?;
    if model.c() != other.c() || model.d() != other.d() {
        return Err(Error::DimensionMismatch(format!(
            "stability needs matching shapes, got {}x{} vs {}x{}",
            model.c(),
            model.d(),
            other.c(),
            other.d()
        )));
    }
    let absolute = model.kind.sign_symmetric() || other.kind.sign_symmetric();
    let c = model.c();
    let rows: Vec<Vec<OrderedFloat<f64>>> = (0..c)
        .map(|i| {
            (0..c)
                .map(|j| {
                    let cs = cosine(model.dictionary.row(i), other.dictionary.row(j));
                    OrderedFloat(if absolute { cs.abs() } else { cs })
                })
                .collect()
        })
        .collect();
    let weights = Matrix::from_rows(rows).expect("square cosine matrix");
    let (total, _) = kuhn_munkres(&weights);
    Ok(total.into_inner() / c as f64)
}

/// Concept-space quality metrics: reconstruction MSE, FID between original
/// and reconstructed activations, mean encoding sparsity, and (when `other`
/// is given) dictionary stability.
pub fn concept_metrics(
    model: &ConceptModel,
    bundle: &ActivationBundle,
    other: Option<&ConceptModel>,
) -> Result<ConceptMetrics> {
    let a = bundle.matrix.mapv(|v| v as f64);
    let t = model.encode(&a)?;
    let recon = model.decode(&t)?;
    let mse = (&a - &recon).mapv(|v| v * v).mean().unwrap_or(0.0);
    let (fid, mut warnings) = fid_samples(&a, &recon)?;
    let nonzero = t.iter().filter(|v| v.abs() > 1e-8).count();
    let sparsity = nonzero as f64 / t.len() as f64;
    let stability = match other {
        Some(o) => Some(stability(model, Some(o))?),
        None => None,
    };
    if warnings.is_empty() {
        warnings = Vec::new();
    }
    Ok(ConceptMetrics {
        mse,
        fid,
        sparsity,
        stability,
        warnings,
    })
}
