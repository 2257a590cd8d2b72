//! Concept models: a common dictionary interface over eight constructions,
//! from neurons-as-concepts through matrix factorizations to sparse
//! autoencoders.

use std::io::Read;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::activations::{atomic_write, ActivationBundle};
use crate::error::{Error, Result};

pub const CPT_MAGIC: &[u8; 8] = b"LXCPT\0\0\x01";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptKind {
    Neurons,
    KMeans,
    Pca,
    Svd,
    Nmf,
    SaeVanilla,
    SaeTopK,
    SaeBatchTopK,
}

impl ConceptKind {
    pub fn is_sae(self) -> bool {
        matches!(
            self,
            ConceptKind::SaeVanilla | ConceptKind::SaeTopK | ConceptKind::SaeBatchTopK
        )
    }

    /// Eigendirection kinds whose rows are only defined up to sign.
    pub fn sign_symmetric(self) -> bool {
        matches!(self, ConceptKind::Pca | ConceptKind::Svd)
    }

    pub fn name(self) -> &'static str {
        match self {
            ConceptKind::Neurons => "neurons",
            ConceptKind::KMeans => "kmeans",
            ConceptKind::Pca => "pca",
            ConceptKind::Svd => "svd",
            ConceptKind::Nmf => "nmf",
            ConceptKind::SaeVanilla => "sae_vanilla",
            ConceptKind::SaeTopK => "sae_top_k",
            ConceptKind::SaeBatchTopK => "sae_batch_top_k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SAEConfig {
    /// Sparsity for TopK/BatchTopK.
    pub k: usize,
    /// L1 coefficient for the vanilla SAE.
    pub l1_coef: f64,
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Standardize activation columns before training; recorded in the model.
    pub standardize: bool,
}

impl Default for SAEConfig {
    fn default() -> Self {
        SAEConfig {
            k: 4,
            l1_coef: 0.0,
            lr: 1e-2,
            epochs: 200,
            batch_size: 64,
            standardize: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FitConfig {
    /// Concept count (ignored by the neurons kind, which uses c = d).
    pub c: usize,
    pub seed: u64,
    /// Iteration cap for KMeans / NMF.
    pub max_iters: usize,
    pub sae: SAEConfig,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            c: 16,
            seed: 0,
            max_iters: 200,
            sae: SAEConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitMeta {
    pub seed: u64,
    pub n_iters: usize,
    pub final_loss: f64,
    /// Concepts never active over the final epoch (SAEs only); logged, not
    /// resampled.
    pub dead_concepts: Vec<usize>,
    /// Per-iteration (KMeans inertia, NMF objective) or per-epoch (SAE) loss.
    pub loss_trace: Vec<f64>,
}

/// A fitted concept space: dictionary rows are concept directions in
/// activation space. All parameters are stored at float32 precision so the
/// on-disk format round-trips bitwise.
#[derive(Debug, Clone, PartialEq)]
pub struct ConceptModel {
    pub kind: ConceptKind,
    /// c×d, one row per concept direction.
    pub dictionary: Array2<f64>,
    /// Activation mean for centered kinds (PCA).
    pub mean: Option<Array1<f64>>,
    /// Global-minimum shift applied before NMF; decode un-shifts.
    pub shift: f64,
    /// d×c encoder weights (SAEs).
    pub encoder_w: Option<Array2<f64>>,
    pub encoder_b: Option<Array1<f64>>,
    pub decoder_b: Option<Array1<f64>>,
    /// TopK/BatchTopK sparsity.
    pub k: Option<usize>,
    /// Column (mean, std) when the SAE was trained on standardized input.
    pub standardizer: Option<(Array1<f64>, Array1<f64>)>,
    pub config: FitConfig,
    pub fit_meta: FitMeta,
}

fn relu(x: f64) -> f64 {
    x.max(0.0)
}

/// Keep the k largest entries of a row, zeroing the rest. Ties broken by
/// lower index kept first.
fn topk_row(row: &mut [f64], k: usize) {
    if k >= row.len() {
        return;
    }
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    for &i in &order[k..] {
        row[i] = 0.0;
    }
}

/// Keep the k·n largest entries of the whole batch, zeroing the rest.
fn batch_topk(t: &mut Array2<f64>, k: usize) {
    let n = t.nrows();
    let total = t.len();
    let keep = (k * n).min(total);
    if keep == total {
        return;
    }
    let mut order: Vec<usize> = (0..total).collect();
    let flat: Vec<f64> = t.iter().cloned().collect();
    order.sort_by(|&a, &b| flat[b].partial_cmp(&flat[a]).unwrap().then(a.cmp(&b)));
    let cols = t.ncols();
    for &i in &order[keep..] {
        t[[i / cols, i % cols]] = 0.0;
    }
}

impl ConceptModel {
    pub fn c(&self) -> usize {
        self.dictionary.nrows()
    }

    pub fn d(&self) -> usize {
        self.dictionary.ncols()
    }

    fn check_d(&self, a: &Array2<f64>) -> Result<()> {
        if a.ncols() != self.d() {
            return Err(Error::DimensionMismatch(format!(
                "activation width {} does not match concept model d={}",
                a.ncols(),
                self.d()
            )));
        }
        Ok(())
    }

    /// n×d activations to n×c concept activations.
    pub fn encode(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_d(a)?;
        match self.kind {
            ConceptKind::Neurons => Ok(a.clone()),
            ConceptKind::KMeans => {
                let mut t = Array2::zeros((a.nrows(), self.c()));
                for (i, row) in a.rows().into_iter().enumerate() {
                    let mut best = 0;
                    let mut best_d = f64::INFINITY;
                    for (j, cent) in self.dictionary.rows().into_iter().enumerate() {
                        let d2: f64 = row
                            .iter()
                            .zip(cent.iter())
                            .map(|(x, c)| (x - c) * (x - c))
                            .sum();
                        if d2 < best_d {
                            best_d = d2;
                            best = j;
                        }
                    }
                    t[[i, best]] = 1.0;
                }
                Ok(t)
            }
            ConceptKind::Pca => {
                let mean = self.mean.as_ref().expect("pca stores a mean");
                let centered = a - &mean.view().insert_axis(Axis(0));
                Ok(centered.dot(&self.dictionary.t()))
            }
            ConceptKind::Svd => Ok(a.dot(&self.dictionary.t())),
            ConceptKind::Nmf => Ok(nnls_encode(&(a + self.shift), &self.dictionary)),
            ConceptKind::SaeVanilla | ConceptKind::SaeTopK | ConceptKind::SaeBatchTopK => {
                let x = self.standardize_in(a);
                let w = self.encoder_w.as_ref().expect("sae stores encoder");
                let b = self.encoder_b.as_ref().expect("sae stores encoder bias");
                let mut t = x.dot(w) + &b.view().insert_axis(Axis(0));
                t.mapv_inplace(relu);
                // BatchTopK falls back to per-row TopK at inference
                if self.kind != ConceptKind::SaeVanilla {
                    let k = self.k.expect("topk sae stores k");
                    for mut row in t.rows_mut() {
                        topk_row(row.as_slice_mut().unwrap(), k);
                    }
                }
                Ok(t)
            }
        }
    }

    /// n×c concept activations back to n×d activation space.
    pub fn decode(&self, t: &Array2<f64>) -> Result<Array2<f64>> {
        if t.ncols() != self.c() {
            return Err(Error::DimensionMismatch(format!(
                "concept width {} does not match concept model c={}",
                t.ncols(),
                self.c()
            )));
        }
        match self.kind {
            ConceptKind::Neurons => Ok(t.clone()),
            ConceptKind::KMeans | ConceptKind::Svd => Ok(t.dot(&self.dictionary)),
            ConceptKind::Pca => {
                let mean = self.mean.as_ref().expect("pca stores a mean");
                Ok(t.dot(&self.dictionary) + &mean.view().insert_axis(Axis(0)))
            }
            ConceptKind::Nmf => Ok(t.dot(&self.dictionary) - self.shift),
            ConceptKind::SaeVanilla | ConceptKind::SaeTopK | ConceptKind::SaeBatchTopK => {
                let b = self.decoder_b.as_ref().expect("sae stores decoder bias");
                let x = t.dot(&self.dictionary) + &b.view().insert_axis(Axis(0));
                Ok(self.standardize_out(&x))
            }
        }
    }

    pub fn reconstruct(&self, a: &Array2<f64>) -> Result<Array2<f64>> {
        self.decode(&self.encode(a)?)
    }

    fn standardize_in(&self, a: &Array2<f64>) -> Array2<f64> {
        match &self.standardizer {
            None => a.clone(),
            Some((m, s)) => {
                (a - &m.view().insert_axis(Axis(0))) / &s.view().insert_axis(Axis(0))
            }
        }
    }

    fn standardize_out(&self, x: &Array2<f64>) -> Array2<f64> {
        match &self.standardizer {
            None => x.clone(),
            Some((m, s)) => {
                x * &s.view().insert_axis(Axis(0)) + &m.view().insert_axis(Axis(0))
            }
        }
    }
}

fn bundle_to_f64(bundle: &ActivationBundle) -> Array2<f64> {
    bundle.matrix.mapv(|v| v as f64)
}

fn mse(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    (a - b).mapv(|v| v * v).mean().unwrap_or(0.0)
}

/// Round all parameters through float32 so the on-disk format is lossless.
fn quantize(model: &mut ConceptModel) {
    let q2 = |m: &Array2<f64>| m.mapv(|v| v as f32 as f64);
    let q1 = |m: &Array1<f64>| m.mapv(|v| v as f32 as f64);
    model.dictionary = q2(&model.dictionary);
    model.mean = model.mean.as_ref().map(&q1);
    model.shift = model.shift as f32 as f64;
    model.encoder_w = model.encoder_w.as_ref().map(&q2);
    model.encoder_b = model.encoder_b.as_ref().map(&q1);
    model.decoder_b = model.decoder_b.as_ref().map(&q1);
    model.standardizer = model
        .standardizer
        .as_ref()
        .map(|(m, s)| (q1(m), q1(s)));
}

/// Fit a concept model of the given kind on an activation bundle.
/// Deterministic given the seed.
pub fn fit(kind: ConceptKind, bundle: &ActivationBundle, config: &FitConfig) -> Result<ConceptModel> {
    let a = bundle_to_f64(bundle);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidActivations);
    }
    if a.nrows() == 0 {
        return Err(Error::EmptyInput);
    }
    if config.c == 0 {
        return Err(Error::Config("concept count c must be >= 1".to_string()));
    }
    if kind.is_sae() && config.sae.k > config.c {
        return Err(Error::Config(format!(
            "sae k={} exceeds concept count c={}",
            config.sae.k, config.c
        )));
    }
    if kind != ConceptKind::Neurons && a.nrows() < config.c {
        return Err(Error::InsufficientData {
            need: config.c,
            got: a.nrows(),
        });
    }
    let mut model = match kind {
        ConceptKind::Neurons => fit_neurons(&a, config),
        ConceptKind::KMeans => fit_kmeans(&a, config),
        ConceptKind::Pca => fit_pca(&a, config),
        ConceptKind::Svd => fit_svd(&a, config),
        ConceptKind::Nmf => fit_nmf(&a, config),
        ConceptKind::SaeVanilla | ConceptKind::SaeTopK | ConceptKind::SaeBatchTopK => {
            train_sae_inner(&a, config, kind)
        }
    }?;
    quantize(&mut model);
    // final loss on the quantized model, so it matches what callers observe
    let recon = model.reconstruct(&a)?;
    model.fit_meta.final_loss = mse(&a, &recon);
    Ok(model)
}

fn meta(seed: u64, n_iters: usize, trace: Vec<f64>) -> FitMeta {
    FitMeta {
        seed,
        n_iters,
        final_loss: 0.0,
        dead_concepts: Vec::new(),
        loss_trace: trace,
    }
}

fn fit_neurons(a: &Array2<f64>, config: &FitConfig) -> Result<ConceptModel> {
    let d = a.ncols();
    Ok(ConceptModel {
        kind: ConceptKind::Neurons,
        dictionary: Array2::eye(d),
        mean: None,
        shift: 0.0,
        encoder_w: None,
        encoder_b: None,
        decoder_b: None,
        k: None,
        standardizer: None,
        config: config.clone(),
        fit_meta: meta(config.seed, 0, Vec::new()),
    })
}

fn fit_kmeans(a: &Array2<f64>, config: &FitConfig) -> Result<ConceptModel> {
    let (n, d) = a.dim();
    let c = config.c;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    let mut centroids = Array2::zeros((c, d));
    for (j, &i) in idx[..c].iter().enumerate() {
        centroids.row_mut(j).assign(&a.row(i));
    }
    let mut assign = vec![usize::MAX; n];
    let mut trace = Vec::new();
    let mut iters = 0;
    for _ in 0..config.max_iters {
        iters += 1;
        let mut changed = false;
        let mut inertia = 0.0;
        for i in 0..n {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..c {
                let d2: f64 = a
                    .row(i)
                    .iter()
                    .zip(centroids.row(j).iter())
                    .map(|(x, m)| (x - m) * (x - m))
                    .sum();
                if d2 < best_d {
                    best_d = d2;
                    best = j;
                }
            }
            inertia += best_d;
            if assign[i] != best {
                assign[i] = best;
                changed = true;
            }
        }
        trace.push(inertia);
        if !changed {
            break;
        }
        let mut sums = Array2::<f64>::zeros((c, d));
        let mut counts = vec![0usize; c];
        for i in 0..n {
            let j = assign[i];
            counts[j] += 1;
            let mut row = sums.row_mut(j);
            row += &a.row(i);
        }
        for j in 0..c {
            if counts[j] > 0 {
                let mut row = centroids.row_mut(j);
                row.assign(&(&sums.row(j) / counts[j] as f64));
            }
        }
    }
    Ok(ConceptModel {
        kind: ConceptKind::KMeans,
        dictionary: centroids,
        mean: None,
        shift: 0.0,
        encoder_w: None,
        encoder_b: None,
        decoder_b: None,
        k: None,
        standardizer: None,
        config: config.clone(),
        fit_meta: meta(config.seed, iters, trace),
    })
}

/// Fix each direction's sign so its largest-magnitude component is positive.
fn canonicalize_signs(d: &mut Array2<f64>) {
    for mut row in d.rows_mut() {
        let mut pivot = 0;
        let mut best = -1.0;
        for (j, v) in row.iter().enumerate() {
            if v.abs() > best {
                best = v.abs();
                pivot = j;
            }
        }
        if row[pivot] < 0.0 {
            row.mapv_inplace(|v| -v);
        }
    }
}

fn fit_pca(a: &Array2<f64>, config: &FitConfig) -> Result<ConceptModel> {
    let (n, d) = a.dim();
    let c = config.c.min(d);
    let mean = a.mean_axis(Axis(0)).expect("non-empty");
    let centered = a - &mean.view().insert_axis(Axis(0));
    let mut cov = DMatrix::zeros(d, d);
    for p in 0..d {
        for q in 0..d {
            let mut s = 0.0;
            for i in 0..n {
                s += centered[[i, p]] * centered[[i, q]];
            }
            cov[(p, q)] = s / n as f64;
        }
    }
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[y].partial_cmp(&eig.eigenvalues[x]).unwrap());
    let mut dict = Array2::zeros((c, d));
    for (row, &e) in order[..c].iter().enumerate() {
        for j in 0..d {
            dict[[row, j]] = eig.eigenvectors[(j, e)];
        }
    }
    canonicalize_signs(&mut dict);
    let trace: Vec<f64> = order.iter().map(|&e| eig.eigenvalues[e]).collect();
    Ok(ConceptModel {
        kind: ConceptKind::Pca,
        dictionary: dict,
        mean: Some(mean),
        shift: 0.0,
        encoder_w: None,
        encoder_b: None,
        decoder_b: None,
        k: None,
        standardizer: None,
        config: config.clone(),
        fit_meta: meta(config.seed, 1, trace),
    })
}

fn fit_svd(a: &Array2<f64>, config: &FitConfig) -> Result<ConceptModel> {
    let (n, d) = a.dim();
    let c = config.c.min(d);
    let m = DMatrix::from_fn(n, d, |i, j| a[[i, j]]);
    let svd = m.svd(false, true);
    let vt = svd.v_t.expect("requested v_t");
    let mut dict = Array2::zeros((c, d));
    for row in 0..c {
        for j in 0..d {
            dict[[row, j]] = vt[(row, j)];
        }
    }
    canonicalize_signs(&mut dict);
    Ok(ConceptModel {
        kind: ConceptKind::Svd,
        dictionary: dict,
        mean: None,
        shift: 0.0,
        encoder_w: None,
        encoder_b: None,
        decoder_b: None,
        k: None,
        standardizer: None,
        config: config.clone(),
        fit_meta: meta(config.seed, 1, Vec::new()),
    })
}

/// Nonnegative least squares via multiplicative updates with the dictionary
/// fixed.
fn nnls_encode(a_shifted: &Array2<f64>, dict: &Array2<f64>) -> Array2<f64> {
    let (n, _) = a_shifted.dim();
    let c = dict.nrows();
    let eps = 1e-12;
    let adt = a_shifted.dot(&dict.t());
    let ddt = dict.dot(&dict.t());
    let mut s = Array2::from_elem((n, c), 1.0);
    for _ in 0..200 {
        let denom = s.dot(&ddt);
        for i in 0..n {
            for j in 0..c {
                s[[i, j]] *= adt[[i, j]].max(0.0) / (denom[[i, j]] + eps);
            }
        }
    }
    s
}

fn fit_nmf(a: &Array2<f64>, config: &FitConfig) -> Result<ConceptModel> {
    let (n, d) = a.dim();
    let c = config.c;
    let min = a.iter().cloned().fold(f64::INFINITY, f64::min);
    let shift = if min < 0.0 { -min } else { 0.0 };
    let x = a + shift;
    let eps = 1e-12;
    let scale = (x.mean().unwrap_or(1.0).max(eps) / c as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut s = Array2::from_shape_fn((n, c), |_| rng.gen_range(0.1..1.0) * scale);
    let mut dict = Array2::from_shape_fn((c, d), |_| rng.gen_range(0.1..1.0) * scale);
    let mut trace = Vec::new();
    let mut iters = 0;
    for _ in 0..config.max_iters {
        iters += 1;
        // W update (codes)
        let xd = x.dot(&dict.t());
        let sdd = s.dot(&dict.dot(&dict.t()));
        for i in 0..n {
            for j in 0..c {
                s[[i, j]] *= xd[[i, j]] / (sdd[[i, j]] + eps);
            }
        }
        // H update (dictionary)
        let sx = s.t().dot(&x);
        let ssd = s.t().dot(&s).dot(&dict);
        for j in 0..c {
            for q in 0..d {
                dict[[j, q]] *= sx[[j, q]] / (ssd[[j, q]] + eps);
            }
        }
        trace.push(mse(&x, &s.dot(&dict)));
    }
    Ok(ConceptModel {
        kind: ConceptKind::Nmf,
        dictionary: dict,
        mean: None,
        shift,
        encoder_w: None,
        encoder_b: None,
        decoder_b: None,
        k: None,
        standardizer: None,
        config: config.clone(),
        fit_meta: meta(config.seed, iters, trace),
    })
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = f64>,
        lr: f64,
    ) {
        const B1: f64 = 0.9;
        const B2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t as i32);
        let c2 = 1.0 - B2.powi(self.t as i32);
        for ((p, g), i) in params.zip(grads).zip(0..) {
            self.m[i] = B1 * self.m[i] + (1.0 - B1) * g;
            self.v[i] = B2 * self.v[i] + (1.0 - B2) * g * g;
            *p -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + EPS);
        }
    }
}

/// Mini-batch SAE training: MSE plus optional L1 (vanilla) or a TopK /
/// BatchTopK constraint. Decoder rows renormalized to unit norm each step.
pub fn train_sae(
    bundle: &ActivationBundle,
    config: &FitConfig,
    kind: ConceptKind,
) -> Result<ConceptModel> {
    if !kind.is_sae() {
        return Err(Error::Config(format!(
            "train_sae called with non-sae kind {}",
            kind.name()
        )));
    }
    fit(kind, bundle, config)
}

fn train_sae_inner(a: &Array2<f64>, config: &FitConfig, kind: ConceptKind) -> Result<ConceptModel> {
    let (n, d) = a.dim();
    let c = config.c;
    let sae = &config.sae;
    let k = sae.k.min(c);

    let standardizer = if sae.standardize {
        let m = a.mean_axis(Axis(0)).expect("non-empty");
        let s = a
            .std_axis(Axis(0), 0.0)
            .mapv(|v| if v < 1e-8 { 1.0 } else { v });
        Some((m, s))
    } else {
        None
    };
    let x = match &standardizer {
        None => a.clone(),
        Some((m, s)) => (a - &m.view().insert_axis(Axis(0))) / &s.view().insert_axis(Axis(0)),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lim = 1.0 / (d as f64).sqrt();
    let mut w_e = Array2::from_shape_fn((d, c), |_| rng.gen_range(-lim..lim));
    let mut b_e = Array1::<f64>::zeros(c);
    let mut dict: Array2<f64> = w_e.t().to_owned();
    normalize_rows(&mut dict);
    let mut b_d = x.mean_axis(Axis(0)).expect("non-empty");

    let mut opt_we = Adam::new(d * c);
    let mut opt_be = Adam::new(c);
    let mut opt_d = Adam::new(c * d);
    let mut opt_bd = Adam::new(d);

    let mut trace = Vec::with_capacity(sae.epochs);
    let mut dead = vec![true; c];
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0usize;
    for epoch in 0..sae.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut epoch_entries = 0.0;
        if epoch + 1 == sae.epochs {
            dead = vec![true; c];
        }
        for chunk in order.chunks(sae.batch_size.max(1)) {
            step += 1;
            let bsz = chunk.len();
            let mut xb = Array2::zeros((bsz, d));
            for (r, &i) in chunk.iter().enumerate() {
                xb.row_mut(r).assign(&x.row(i));
            }
            let mut pre = xb.dot(&w_e) + &b_e.view().insert_axis(Axis(0));
            let mut t = pre.mapv(relu);
            match kind {
                ConceptKind::SaeVanilla => {}
                ConceptKind::SaeTopK => {
                    for mut row in t.rows_mut() {
                        topk_row(row.as_slice_mut().unwrap(), k);
                    }
                }
                ConceptKind::SaeBatchTopK => batch_topk(&mut t, k),
                _ => unreachable!(),
            }
            for j in 0..c {
                if dead[j] && t.column(j).iter().any(|&v| v != 0.0) {
                    dead[j] = false;
                }
            }
            let xhat = t.dot(&dict) + &b_d.view().insert_axis(Axis(0));
            let r = &xhat - &xb;
            let mse_loss = r.mapv(|v| v * v).mean().unwrap();
            let l1_loss = if kind == ConceptKind::SaeVanilla {
                sae.l1_coef * t.mapv(f64::abs).mean().unwrap()
            } else {
                0.0
            };
            let loss = mse_loss + l1_loss;
            if !loss.is_finite() {
                return Err(Error::TrainingDiverged(step));
            }
            epoch_loss += loss * (bsz * d) as f64;
            epoch_entries += (bsz * d) as f64;

            let scale = 2.0 / (bsz * d) as f64;
            let dxhat = r.mapv(|v| v * scale);
            let g_dict = t.t().dot(&dxhat);
            let g_bd = dxhat.sum_axis(Axis(0));
            let mut dt = dxhat.dot(&dict.t());
            if kind == ConceptKind::SaeVanilla {
                let l1g = sae.l1_coef / (bsz * c) as f64;
                dt += &t.mapv(|v| {
                    if v > 0.0 {
                        l1g
                    } else if v < 0.0 {
                        -l1g
                    } else {
                        0.0
                    }
                });
            }
            // gradient flows only through kept, positive units
            pre.zip_mut_with(&t, |p, &tv| *p = if tv > 0.0 { 1.0 } else { 0.0 });
            let dpre = &dt * &pre;
            let g_we = xb.t().dot(&dpre);
            let g_be = dpre.sum_axis(Axis(0));

            opt_we.step(w_e.iter_mut(), g_we.iter().cloned(), sae.lr);
            opt_be.step(b_e.iter_mut(), g_be.iter().cloned(), sae.lr);
            opt_d.step(dict.iter_mut(), g_dict.iter().cloned(), sae.lr);
            opt_bd.step(b_d.iter_mut(), g_bd.iter().cloned(), sae.lr);
            normalize_rows(&mut dict);
        }
        trace.push(epoch_loss / epoch_entries.max(1.0));
    }
    let dead_concepts: Vec<usize> = (0..c).filter(|&j| dead[j]).collect();
    let mut fit_meta = meta(config.seed, step, trace);
    fit_meta.dead_concepts = dead_concepts;
    Ok(ConceptModel {
        kind,
        dictionary: dict,
        mean: None,
        shift: 0.0,
        encoder_w: Some(w_e),
        encoder_b: Some(b_e),
        decoder_b: Some(b_d),
        k: Some(k),
        standardizer,
        config: config.clone(),
        fit_meta,
    })
}

fn normalize_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let norm = row.mapv(|v| v * v).sum().sqrt();
        if norm > 1e-8 {
            row.mapv_inplace(|v| v / norm);
        }
    }
}

// ---------------------------------------------------------------------------
// On-disk format
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ConceptKind,
    c: usize,
    d: usize,
    shift: f64,
    k: Option<usize>,
    config: FitConfig,
    fit_meta: FitMeta,
    /// (name, rows, cols) per float32 block, in file order.
    blocks: Vec<(String, usize, usize)>,
}

fn push_block(
    blocks: &mut Vec<(String, usize, usize)>,
    data: &mut Vec<u8>,
    name: &str,
    rows: usize,
    cols: usize,
    values: impl Iterator<Item = f64>,
) {
    blocks.push((name.to_string(), rows, cols));
    for v in values {
        data.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Magic, length-prefixed JSON header, then float32 blocks. Loading
/// reproduces encode outputs bitwise because fitted models are already
/// float32-quantized.
pub fn save_model(model: &ConceptModel, path: &Path) -> Result<()> {
    let mut blocks = Vec::new();
    let mut data = Vec::new();
    let (c, d) = model.dictionary.dim();
    push_block(&mut blocks, &mut data, "dictionary", c, d, model.dictionary.iter().cloned());
    if let Some(m) = &model.mean {
        push_block(&mut blocks, &mut data, "mean", 1, m.len(), m.iter().cloned());
    }
    if let Some(w) = &model.encoder_w {
        push_block(&mut blocks, &mut data, "encoder_w", w.nrows(), w.ncols(), w.iter().cloned());
    }
    if let Some(b) = &model.encoder_b {
        push_block(&mut blocks, &mut data, "encoder_b", 1, b.len(), b.iter().cloned());
    }
    if let Some(b) = &model.decoder_b {
        push_block(&mut blocks, &mut data, "decoder_b", 1, b.len(), b.iter().cloned());
    }
    if let Some((m, s)) = &model.standardizer {
        push_block(&mut blocks, &mut data, "std_mean", 1, m.len(), m.iter().cloned());
        push_block(&mut blocks, &mut data, "std_std", 1, s.len(), s.iter().cloned());
    }
    let header = ModelHeader {
        kind: model.kind,
        c,
        d,
        shift: model.shift,
        k: model.k,
        config: model.config.clone(),
        fit_meta: model.fit_meta.clone(),
        blocks,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + data.len());
    out.extend_from_slice(CPT_MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&data);
    atomic_write(path, &out)
}

pub fn load_model(path: &Path) -> Result<ConceptModel> {
    let mut file = std::fs::File::open(path)?;
    let mut buf = Vec::new();
    file.read_to_end(&mut buf)?;
    if buf.len() < 16 || &buf[0..8] != CPT_MAGIC {
        return Err(Error::BadFileFormat {
            kind: "concept model".to_string(),
            detail: "bad magic".to_string(),
        });
    }
    let hlen = u64::from_le_bytes(buf[8..16].try_into().unwrap()) as usize;
    let header: ModelHeader = serde_json::from_slice(&buf[16..16 + hlen])?;
    let mut offset = 16 + hlen;
    let mut read_block = |rows: usize, cols: usize| -> Result<Array2<f64>> {
        let bytes = rows * cols * 4;
        if offset + bytes > buf.len() {
            return Err(Error::BadFileFormat {
                kind: "concept model".to_string(),
                detail: "truncated data block".to_string(),
            });
        }
        let values: Vec<f64> = buf[offset..offset + bytes]
            .chunks_exact(4)
            .map(|ch| f32::from_le_bytes(ch.try_into().unwrap()) as f64)
            .collect();
        offset += bytes;
        Array2::from_shape_vec((rows, cols), values)
            .map_err(|e| Error::DimensionMismatch(e.to_string()))
    };
    let mut dictionary = None;
    let mut mean = None;
    let mut encoder_w = None;
    let mut encoder_b = None;
    let mut decoder_b = None;
    let mut std_mean = None;
    let mut std_std = None;
    for (name, rows, cols) in &header.blocks {
        let m = read_block(*rows, *cols)?;
        match name.as_str() {
            "dictionary" => dictionary = Some(m),
            "mean" => mean = Some(m.row(0).to_owned()),
            "encoder_w" => encoder_w = Some(m),
            "encoder_b" => encoder_b = Some(m.row(0).to_owned()),
            "decoder_b" => decoder_b = Some(m.row(0).to_owned()),
            "std_mean" => std_mean = Some(m.row(0).to_owned()),
            "std_std" => std_std = Some(m.row(0).to_owned()),
            other => {
                return Err(Error::BadFileFormat {
                    kind: "concept model".to_string(),
                    detail: format!("unknown block {other}"),
                })
            }
        }
    }
    let dictionary = dictionary.ok_or_else(|| Error::BadFileFormat {
        kind: "concept model".to_string(),
        detail: "missing dictionary block".to_string(),
    })?;
    Ok(ConceptModel {
        kind: header.kind,
        dictionary,
        mean,
        shift: header.shift,
        encoder_w,
        encoder_b,
        decoder_b,
        k: header.k,
        standardizer: std_mean.zip(std_std),
        config: header.config,
        fit_meta: header.fit_meta,
    })
}

#[cfg(test)]
pub(crate) fn synthetic_bundle(n: usize, d: usize, seed: u64) -> ActivationBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let matrix = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0f32..1.0));
    ActivationBundle {
        matrix,
        granularity: crate::text::ActivationGranularity::AllTokens,
        provenance: (0..n).map(|i| (i, 0)).collect(),
        split_point: "layer_0".to_string(),
    }
}

/// Planted nonnegative factors: A = S·D* with sparse S ≥ 0, D* ≥ 0.
#[cfg(test)]
pub(crate) fn planted_bundle(n: usize, d: usize, c: usize, seed: u64) -> ActivationBundle {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dict = Array2::from_shape_fn((c, d), |_| rng.gen_range(0.0f64..1.0));
    let mut codes = Array2::<f64>::zeros((n, c));
    for i in 0..n {
        for _ in 0..2 {
            let j = rng.gen_range(0..c);
            codes[[i, j]] = rng.gen_range(0.5..1.5);
        }
    }
    let a = codes.dot(&dict);
    ActivationBundle {
        matrix: a.mapv(|v| v as f32),
        granularity: crate::text::ActivationGranularity::AllTokens,
        provenance: (0..n).map(|i| (i, 0)).collect(),
        split_point: "layer_0".to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neurons_identity() {
        let b = synthetic_bundle(10, 6, 1);
        let m = fit(ConceptKind::Neurons, &b, &FitConfig::default()).unwrap();
        let a = bundle_to_f64(&b);
        let t = m.encode(&a).unwrap();
        assert_eq!(t, a);
        assert_eq!(m.decode(&t).unwrap(), a);
        assert_eq!(m.fit_meta.final_loss, 0.0);
    }

    #[test]
    fn kmeans_centroid_encodes_one_hot() {
        let b = synthetic_bundle(64, 5, 2);
        let cfg = FitConfig {
            c: 4,
            ..Default::default()
        };
        let m = fit(ConceptKind::KMeans, &b, &cfg).unwrap();
        let t = m.encode(&m.dictionary.clone()).unwrap();
        for j in 0..4 {
            assert_eq!(t[[j, j]], 1.0);
            assert_eq!(t.row(j).sum(), 1.0);
        }
    }

    #[test]
    fn kmeans_inertia_non_increasing() {
        let b = synthetic_bundle(200, 8, 3);
        let cfg = FitConfig {
            c: 6,
            ..Default::default()
        };
        let m = fit(ConceptKind::KMeans, &b, &cfg).unwrap();
        let trace = &m.fit_meta.loss_trace;
        assert!(trace.len() >= 2);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", trace);
        }
    }

    #[test]
    fn pca_complete_basis_reconstructs() {
        let b = synthetic_bundle(100, 6, 4);
        let cfg = FitConfig {
            c: 6,
            ..Default::default()
        };
        let m = fit(ConceptKind::Pca, &b, &cfg).unwrap();
        assert!(m.fit_meta.final_loss <= 1e-8, "{}", m.fit_meta.final_loss);
    }

    #[test]
    fn pca_truncated_error_equals_discarded_eigenvalue_mean() {
        let b = synthetic_bundle(300, 8, 5);
        let cfg = FitConfig {
            c: 3,
            ..Default::default()
        };
        let m = fit(ConceptKind::Pca, &b, &cfg).unwrap();
        let a = bundle_to_f64(&b);
        let recon = m.reconstruct(&a).unwrap();
        // per-sample squared error over the d - c discarded directions
        let (n, d) = a.dim();
        let per_sample: f64 = (&a - &recon).mapv(|v| v * v).sum() / n as f64;
        let lhs = per_sample / (d - 3) as f64;

        // independent oracle: eigenvalues of the sample covariance
        let mean = a.mean_axis(Axis(0)).unwrap();
        let centered = &a - &mean.view().insert_axis(Axis(0));
        let cov = DMatrix::from_fn(d, d, |p, q| {
            (0..n).map(|i| centered[[i, p]] * centered[[i, q]]).sum::<f64>() / n as f64
        });
        let mut eigs: Vec<f64> = SymmetricEigen::new(cov).eigenvalues.iter().cloned().collect();
        eigs.sort_by(|x, y| y.partial_cmp(x).unwrap());
        let rhs: f64 = eigs[3..].iter().sum::<f64>() / (d - 3) as f64;
        assert!((lhs - rhs).abs() < 1e-6, "lhs {lhs} rhs {rhs}");
    }

    #[test]
    fn pca_svd_rows_orthonormal() {
        let b = synthetic_bundle(120, 7, 6);
        for kind in [ConceptKind::Pca, ConceptKind::Svd] {
            let cfg = FitConfig {
                c: 4,
                ..Default::default()
            };
            let m = fit(kind, &b, &cfg).unwrap();
            let gram = m.dictionary.dot(&m.dictionary.t());
            for i in 0..4 {
                for j in 0..4 {
                    let expect = if i == j { 1.0 } else { 0.0 };
                    assert!((gram[[i, j]] - expect).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn nmf_nonnegative_and_recovers_planted_factors() {
        let b = planted_bundle(1024, 32, 8, 7);
        let cfg = FitConfig {
            c: 8,
            max_iters: 300,
            ..Default::default()
        };
        let m = fit(ConceptKind::Nmf, &b, &cfg).unwrap();
        assert!(m.dictionary.iter().all(|&v| v >= 0.0));
        let a = bundle_to_f64(&b);
        let t = m.encode(&a).unwrap();
        assert!(t.iter().all(|&v| v >= 0.0));
        let mean_sq = a.mapv(|v| v * v).mean().unwrap();
        assert!(
            m.fit_meta.final_loss <= 1e-2 * mean_sq,
            "loss {} vs bound {}",
            m.fit_meta.final_loss,
            1e-2 * mean_sq
        );
    }

    #[test]
    fn nmf_objective_monotone() {
        let b = planted_bundle(256, 16, 4, 8);
        let cfg = FitConfig {
            c: 4,
            max_iters: 100,
            ..Default::default()
        };
        let m = fit(ConceptKind::Nmf, &b, &cfg).unwrap();
        for w in m.fit_meta.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-10, "objective increased: {} -> {}", w[0], w[1]);
        }
    }

    #[test]
    fn nmf_shift_recorded_for_signed_input() {
        let b = synthetic_bundle(64, 6, 9); // signed values in (-1, 1)
        let cfg = FitConfig {
            c: 3,
            ..Default::default()
        };
        let m = fit(ConceptKind::Nmf, &b, &cfg).unwrap();
        assert!(m.shift > 0.0);
    }

    #[test]
    fn topk_encoding_matches_sort_oracle() {
        let b = synthetic_bundle(40, 10, 10);
        let cfg = FitConfig {
            c: 8,
            sae: SAEConfig {
                k: 2,
                epochs: 5,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = fit(ConceptKind::SaeTopK, &b, &cfg).unwrap();
        let a = bundle_to_f64(&b);
        let t = m.encode(&a).unwrap();
        // pre-mask values from the stored encoder
        let x = m.standardize_in(&a);
        let pre = (x.dot(m.encoder_w.as_ref().unwrap())
            + &m.encoder_b.as_ref().unwrap().view().insert_axis(Axis(0)))
            .mapv(relu);
        for i in 0..t.nrows() {
            let nnz = t.row(i).iter().filter(|&&v| v != 0.0).count();
            assert!(nnz <= 2);
            let mut vals: Vec<f64> = pre.row(i).iter().cloned().collect();
            vals.sort_by(|p, q| q.partial_cmp(p).unwrap());
            for (j, &v) in t.row(i).iter().enumerate() {
                if v != 0.0 {
                    assert!(v >= vals[1] - 1e-12, "row {i} col {j} kept {v} below 2nd largest");
                }
            }
        }
    }

    #[test]
    fn batch_topk_bounds_batch_nonzeros() {
        let mut t = Array2::from_shape_fn((4, 6), |(i, j)| (i * 6 + j) as f64);
        batch_topk(&mut t, 2);
        assert_eq!(t.iter().filter(|&&v| v != 0.0).count(), 8);
    }

    #[test]
    fn sae_vanilla_large_l1_is_sparse() {
        let b = planted_bundle(256, 16, 8, 11);
        let cfg = FitConfig {
            c: 16,
            sae: SAEConfig {
                l1_coef: 1e3,
                epochs: 30,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = fit(ConceptKind::SaeVanilla, &b, &cfg).unwrap();
        let t = m.encode(&bundle_to_f64(&b)).unwrap();
        let l0 = t.iter().filter(|&&v| v.abs() > 1e-8).count() as f64 / t.nrows() as f64;
        assert!(l0 <= 0.05 * 16.0, "mean l0 {l0}");
    }

    #[test]
    fn sae_loss_non_increasing_over_epochs() {
        let b = planted_bundle(512, 16, 8, 12);
        let cfg = FitConfig {
            c: 16,
            sae: SAEConfig {
                k: 4,
                epochs: 20,
                ..Default::default()
            },
            ..Default::default()
        };
        let m = fit(ConceptKind::SaeTopK, &b, &cfg).unwrap();
        let trace = &m.fit_meta.loss_trace;
        assert!(*trace.last().unwrap() <= trace[0]);
        for w in trace.windows(2) {
            assert!(w[1] <= w[0] * 1.05, "epoch uptick beyond 5%: {:?}", trace);
        }
    }

    #[test]
    fn sae_complete_reconstruction_near_pca_bound() {
        // nonnegative planted data so the relu encoder can represent it
        let b = planted_bundle(512, 8, 8, 13);
        let cfg = FitConfig {
            c: 8,
            sae: SAEConfig {
                k: 8,
                l1_coef: 0.0,
                epochs: 400,
                lr: 5e-3,
                ..Default::default()
            },
            ..Default::default()
        };
        let sae = fit(ConceptKind::SaeTopK, &b, &cfg).unwrap();
        let pca = fit(ConceptKind::Pca, &b, &cfg).unwrap();
        let a = bundle_to_f64(&b);
        let var = a.mapv(|v| v * v).mean().unwrap();
        // PCA at c = d reconstructs exactly; hold the SAE to a small fraction
        // of the data's second moment above that bound
        assert!(
            sae.fit_meta.final_loss <= pca.fit_meta.final_loss + 0.02 * var,
            "sae {} pca {} var {}",
            sae.fit_meta.final_loss,
            pca.fit_meta.final_loss,
            var
        );
    }

    #[test]
    fn training_divergence_reported() {
        let b = planted_bundle(64, 8, 4, 14);
        let cfg = FitConfig {
            c: 8,
            sae: SAEConfig {
                // Adam's step size is bounded by lr, so only an lr past the
                // float overflow threshold makes the loss non-finite
                lr: 1e200,
                epochs: 50,
                ..Default::default()
            },
            ..Default::default()
        };
        match fit(ConceptKind::SaeVanilla, &b, &cfg) {
            Err(Error::TrainingDiverged(step)) => assert!(step >= 1),
            other => panic!("expected TrainingDiverged, got {:?}", other.map(|m| m.kind)),
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let b = synthetic_bundle(128, 8, 15);
        for kind in [
            ConceptKind::KMeans,
            ConceptKind::Pca,
            ConceptKind::Svd,
            ConceptKind::Nmf,
            ConceptKind::SaeVanilla,
            ConceptKind::SaeTopK,
            ConceptKind::SaeBatchTopK,
        ] {
            let cfg = FitConfig {
                c: 4,
                sae: SAEConfig {
                    k: 2,
                    epochs: 3,
                    ..Default::default()
                },
                ..Default::default()
            };
            let m1 = fit(kind, &b, &cfg).unwrap();
            let m2 = fit(kind, &b, &cfg).unwrap();
            assert_eq!(m1.dictionary, m2.dictionary, "{}", kind.name());
        }
    }

    #[test]
    fn too_few_rows_rejected() {
        let b = synthetic_bundle(3, 6, 16);
        let cfg = FitConfig {
            c: 8,
            ..Default::default()
        };
        assert!(matches!(
            fit(ConceptKind::Pca, &b, &cfg),
            Err(Error::InsufficientData { need: 8, got: 3 })
        ));
    }

    #[test]
    fn nan_activations_rejected() {
        let mut b = synthetic_bundle(10, 4, 17);
        b.matrix[[0, 0]] = f32::NAN;
        assert!(matches!(
            fit(ConceptKind::Svd, &b, &FitConfig { c: 2, ..Default::default() }),
            Err(Error::InvalidActivations)
        ));
    }

    #[test]
    fn shape_contract_all_kinds_single_row() {
        let b = synthetic_bundle(32, 6, 18);
        let a = bundle_to_f64(&b);
        let single = a.slice(ndarray::s![0..1, ..]).to_owned();
        for kind in [
            ConceptKind::Neurons,
            ConceptKind::KMeans,
            ConceptKind::Pca,
            ConceptKind::Svd,
            ConceptKind::Nmf,
            ConceptKind::SaeVanilla,
            ConceptKind::SaeTopK,
            ConceptKind::SaeBatchTopK,
        ] {
            let cfg = FitConfig {
                c: 4,
                sae: SAEConfig {
                    k: 2,
                    epochs: 2,
                    ..Default::default()
                },
                ..Default::default()
            };
            let m = fit(kind, &b, &cfg).unwrap();
            let t = m.encode(&single).unwrap();
            assert_eq!(t.nrows(), 1);
            let r = m.decode(&t).unwrap();
            assert_eq!(r.dim(), (1, 6), "{}", kind.name());
        }
    }

    #[test]
    fn roundtrip_reproduces_encode_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let b = planted_bundle(64, 8, 4, 19);
        let a = bundle_to_f64(&b);
        for kind in [
            ConceptKind::Pca,
            ConceptKind::Nmf,
            ConceptKind::SaeTopK,
        ] {
            let cfg = FitConfig {
                c: 4,
                sae: SAEConfig {
                    k: 2,
                    epochs: 3,
                    standardize: kind == ConceptKind::SaeTopK,
                    ..Default::default()
                },
                ..Default::default()
            };
            let m = fit(kind, &b, &cfg).unwrap();
            let path = dir.path().join(format!("{}.lxcpt", kind.name()));
            save_model(&m, &path).unwrap();
            let loaded = load_model(&path).unwrap();
            assert_eq!(m.encode(&a).unwrap(), loaded.encode(&a).unwrap(), "{}", kind.name());
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.lxcpt");
        std::fs::write(&path, b"WRONG___========").unwrap();
        assert!(matches!(load_model(&path), Err(Error::BadFileFormat { .. })));
    }
}
