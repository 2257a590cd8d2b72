//! Model and tokenizer abstractions: the adapter trait, the split-point
//! wrapper separating feature extractor from predictor, and the built-in
//! desk-scale reference models.

use std::collections::HashMap;
use std::sync::Arc;

use ndarray::{Array1, Array2, Axis};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::text::{Tokenizer, CLS_ID, MASK_ID, PAD_ID, SEP_ID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Generation,
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Task::Classification => write!(f, "classification"),
            Task::Generation => write!(f, "generation"),
        }
    }
}

/// Model outputs: class logits or per-position vocabulary logits.
#[derive(Debug, Clone, PartialEq)]
pub enum Logits {
    /// `num_classes` values.
    Classification(Array1<f64>),
    /// `seq_len × vocab_size`.
    Generation(Array2<f64>),
}

/// Pullback from a gradient over logits to a gradient over input embeddings
/// (or split-point activations). The argument mirrors the `Logits` shape.
pub type Vjp = Box<dyn FnOnce(&Logits) -> Array2<f64>>;

pub trait ModelAdapter: Send + Sync {
    fn task(&self) -> Task;
    fn vocab_size(&self) -> usize;
    fn num_classes(&self) -> usize;
    /// Embedding / hidden width at the input.
    fn hidden_dim(&self) -> usize;
    /// Ordered registry of named layers usable as split points.
    fn layer_names(&self) -> Vec<String>;
    fn embed(&self, ids: &[u32]) -> Array2<f64>;
    fn forward_ids(&self, ids: &[u32]) -> Logits;
    fn forward_embeddings(&self, emb: &Array2<f64>) -> Logits;
    /// Forward from embeddings returning the logits and a pullback to
    /// embedding gradients.
    fn forward_embeddings_vjp(&self, emb: &Array2<f64>) -> (Logits, Vjp);
    /// Run the model up to (and including) the named layer.
    fn forward_to_layer(&self, ids: &[u32], layer: &str) -> Result<Array2<f64>>;
    /// Resume the model from activations at the named layer.
    fn forward_from_layer(&self, acts: &Array2<f64>, layer: &str) -> Result<Logits>;
    /// As `forward_from_layer`, with a pullback to activation gradients.
    fn forward_from_layer_vjp(&self, acts: &Array2<f64>, layer: &str) -> Result<(Logits, Vjp)>;
    fn pad_id(&self) -> u32 {
        PAD_ID
    }
    fn mask_id(&self) -> u32 {
        MASK_ID
    }
}

fn check_layer(adapter: &dyn ModelAdapter, layer: &str) -> Result<()> {
    let valid = adapter.layer_names();
    if valid.iter().any(|l| l == layer) {
        Ok(())
    } else {
        Err(Error::UnknownSplitPoint {
            requested: layer.to_string(),
            valid,
        })
    }
}

/// A model divided at a named layer into feature extractor and predictor.
/// Composing the two reproduces the adapter's forward bitwise: both paths run
/// the same stage functions in the same order.
#[derive(Clone)]
pub struct SplitModel {
    pub adapter: Arc<dyn ModelAdapter>,
    pub split_point: String,
}

impl SplitModel {
    pub fn hidden_dim_at_split(&self, sample_ids: &[u32]) -> usize {
        self.extract(sample_ids).ncols()
    }

    pub fn extract(&self, ids: &[u32]) -> Array2<f64> {
        self.adapter
            .forward_to_layer(ids, &self.split_point)
            .expect("split point validated at construction")
    }

    pub fn predict(&self, acts: &Array2<f64>) -> Logits {
        self.adapter
            .forward_from_layer(acts, &self.split_point)
            .expect("split point validated at construction")
    }

    pub fn predict_vjp(&self, acts: &Array2<f64>) -> (Logits, Vjp) {
        self.adapter
            .forward_from_layer_vjp(acts, &self.split_point)
            .expect("split point validated at construction")
    }
}

/// Split an adapter at a named layer, validating against the layer registry.
pub fn split(adapter: Arc<dyn ModelAdapter>, split_point: &str) -> Result<SplitModel> {
    check_layer(adapter.as_ref(), split_point)?;
    Ok(SplitModel {
        adapter,
        split_point: split_point.to_string(),
    })
}

// ---------------------------------------------------------------------------
// TinyTransformer
// ---------------------------------------------------------------------------

struct BlockParams {
    ln1_g: Array1<f64>,
    ln1_b: Array1<f64>,
    wq: Array2<f64>,
    wk: Array2<f64>,
    wv: Array2<f64>,
    wo: Array2<f64>,
    ln2_g: Array1<f64>,
    ln2_b: Array1<f64>,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

/// Deterministic seeded 2-layer causal transformer (d=32, vocab=256)
/// supporting both task modes. Single attention head, GELU MLP, pre-norm.
pub struct TinyTransformer {
    task: Task,
    d: usize,
    vocab: usize,
    num_classes: usize,
    embed: Array2<f64>,
    pos: Array2<f64>,
    blocks: Vec<BlockParams>,
    lnf_g: Array1<f64>,
    lnf_b: Array1<f64>,
    unembed: Array2<f64>,
    cls_w: Array2<f64>,
    cls_b: Array1<f64>,
}

pub const TINY_MAX_LEN: usize = 64;

fn rand_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-scale..scale))
}

impl TinyTransformer {
    pub fn new(task: Task, seed: u64) -> Self {
        let d = 32;
        let vocab = 256;
        let hidden = 2 * d;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::new();
        let embed = rand_mat(&mut rng, vocab, d, scale);
        let pos = rand_mat(&mut rng, TINY_MAX_LEN, d, scale);
        for _ in 0..2 {
            blocks.push(BlockParams {
                ln1_g: Array1::ones(d),
                ln1_b: Array1::zeros(d),
                wq: rand_mat(&mut rng, d, d, scale),
                wk: rand_mat(&mut rng, d, d, scale),
                wv: rand_mat(&mut rng, d, d, scale),
                wo: rand_mat(&mut rng, d, d, scale),
                ln2_g: Array1::ones(d),
                ln2_b: Array1::zeros(d),
                w1: rand_mat(&mut rng, d, hidden, scale),
                b1: Array1::zeros(hidden),
                w2: rand_mat(&mut rng, hidden, d, scale),
                b2: Array1::zeros(d),
            });
        }
        let unembed = rand_mat(&mut rng, d, vocab, scale);
        let cls_w = rand_mat(&mut rng, d, 2, scale);
        let cls_b = Array1::zeros(2);
        TinyTransformer {
            task,
            d,
            vocab,
            num_classes: 2,
            embed,
            pos,
            blocks,
            lnf_g: Array1::ones(d),
            lnf_b: Array1::zeros(d),
            unembed,
            cls_w,
            cls_b,
        }
    }

    fn block(&self, tape: &mut Tape, x: Var, l: usize) -> Var {
        let p = &self.blocks[l];
        let h = tape.layer_norm(x, &p.ln1_g, &p.ln1_b);
        let wq = tape.leaf(p.wq.clone());
        let wk = tape.leaf(p.wk.clone());
        let wv = tape.leaf(p.wv.clone());
        let wo = tape.leaf(p.wo.clone());
        let q = tape.matmul(h, wq);
        let k = tape.matmul(h, wk);
        let v = tape.matmul(h, wv);
        let scores = tape.matmul_bt(q, k);
        let scores = tape.scale(scores, 1.0 / (self.d as f64).sqrt());
        let att = tape.causal_softmax(scores);
        let ctx = tape.matmul(att, v);
        let proj = tape.matmul(ctx, wo);
        let x = tape.add(x, proj);
        let h2 = tape.layer_norm(x, &p.ln2_g, &p.ln2_b);
        let w1 = tape.leaf(p.w1.clone());
        let w2 = tape.leaf(p.w2.clone());
        let m = tape.matmul(h2, w1);
        let m = tape.add_row(m, &p.b1);
        let m = tape.gelu(m);
        let m = tape.matmul(m, w2);
        let m = tape.add_row(m, &p.b2);
        tape.add(x, m)
    }

    /// Stage indices: 0 = embeddings output, 1 = layer_0, 2 = layer_1,
    /// 3 = final_norm; the head runs after the last stage.
    fn stage_of(&self, layer: &str) -> Option<usize> {
        match layer {
            "embeddings" => Some(0),
            "layer_0" => Some(1),
            "layer_1" => Some(2),
            "final_norm" => Some(3),
            _ => None,
        }
    }

    /// Run stages (from_stage, to_stage] on the tape.
    fn run_stages(&self, tape: &mut Tape, x: Var, from_stage: usize, to_stage: usize) -> Var {
        let mut x = x;
        for stage in (from_stage + 1)..=to_stage {
            x = match stage {
                1 => self.block(tape, x, 0),
                2 => self.block(tape, x, 1),
                3 => tape.layer_norm(x, &self.lnf_g, &self.lnf_b),
                _ => unreachable!(),
            };
        }
        x
    }

    fn head(&self, tape: &mut Tape, x: Var) -> Var {
        match self.task {
            Task::Generation => {
                let u = tape.leaf(self.unembed.clone());
                tape.matmul(x, u)
            }
            Task::Classification => {
                let pooled = tape.mean_rows(x);
                let w = tape.leaf(self.cls_w.clone());
                let z = tape.matmul(pooled, w);
                tape.add_row(z, &self.cls_b)
            }
        }
    }

    fn logits_from_var(&self, tape: &Tape, v: Var) -> Logits {
        let val = tape.value(v);
        match self.task {
            Task::Generation => Logits::Generation(val.clone()),
            Task::Classification => Logits::Classification(val.row(0).to_owned()),
        }
    }

}

impl ModelAdapter for TinyTransformer {
    fn task(&self) -> Task {
        self.task
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn num_classes(&self) -> usize {
        self.num_classes
    }
    fn hidden_dim(&self) -> usize {
        self.d
    }
    fn layer_names(&self) -> Vec<String> {
        ["embeddings", "layer_0", "layer_1", "final_norm"]
            .iter()
            .map(|s| s.to_string())
            .collect()
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.d));
        for (i, &id) in ids.iter().enumerate() {
            let id = (id as usize).min(self.vocab - 1);
            out.row_mut(i).assign(&self.embed.row(id));
            out.row_mut(i).scaled_add(1.0, &self.pos.row(i.min(TINY_MAX_LEN - 1)));
        }
        out
    }

    fn forward_ids(&self, ids: &[u32]) -> Logits {
        self.forward_embeddings(&self.embed(ids))
    }

    fn forward_embeddings(&self, emb: &Array2<f64>) -> Logits {
        let mut tape = Tape::new();
        let x = tape.leaf(emb.clone());
        let x = self.run_stages(&mut tape, x, 0, 3);
        let out = self.head(&mut tape, x);
        self.logits_from_var(&tape, out)
    }

    fn forward_embeddings_vjp(&self, emb: &Array2<f64>) -> (Logits, Vjp) {
        let mut tape = Tape::new();
        let x = tape.leaf(emb.clone());
        let h = self.run_stages(&mut tape, x, 0, 3);
        let out = self.head(&mut tape, h);
        let logits = self.logits_from_var(&tape, out);
        let task = self.task;
        let vjp: Vjp = Box::new(move |g: &Logits| {
            let seed = match (task, g) {
                (Task::Generation, Logits::Generation(m)) => m.clone(),
                (Task::Classification, Logits::Classification(v)) => {
                    v.clone().insert_axis(Axis(0))
                }
                _ => panic!("logits gradient shape does not match task"),
            };
            tape.backward(out, &seed, x)
        });
        (logits, vjp)
    }

    fn forward_to_layer(&self, ids: &[u32], layer: &str) -> Result<Array2<f64>> {
        let stage = self
            .stage_of(layer)
            .ok_or_else(|| Error::UnknownSplitPoint {
                requested: layer.to_string(),
                valid: self.layer_names(),
            })?;
        let mut tape = Tape::new();
        let x = tape.leaf(self.embed(ids));
        let x = self.run_stages(&mut tape, x, 0, stage);
        Ok(tape.value(x).clone())
    }

    fn forward_from_layer(&self, acts: &Array2<f64>, layer: &str) -> Result<Logits> {
        let stage = self
            .stage_of(layer)
            .ok_or_else(|| Error::UnknownSplitPoint {
                requested: layer.to_string(),
                valid: self.layer_names(),
            })?;
        let mut tape = Tape::new();
        let x = tape.leaf(acts.clone());
        let x = self.run_stages(&mut tape, x, stage, 3);
        let out = self.head(&mut tape, x);
        Ok(self.logits_from_var(&tape, out))
    }

    fn forward_from_layer_vjp(&self, acts: &Array2<f64>, layer: &str) -> Result<(Logits, Vjp)> {
        let stage = self
            .stage_of(layer)
            .ok_or_else(|| Error::UnknownSplitPoint {
                requested: layer.to_string(),
                valid: self.layer_names(),
            })?;
        let mut tape = Tape::new();
        let x = tape.leaf(acts.clone());
        let h = self.run_stages(&mut tape, x, stage, 3);
        let out = self.head(&mut tape, h);
        let logits = self.logits_from_var(&tape, out);
        let task = self.task;
        let vjp: Vjp = Box::new(move |g: &Logits| {
            let seed = match (task, g) {
                (Task::Generation, Logits::Generation(m)) => m.clone(),
                (Task::Classification, Logits::Classification(v)) => {
                    v.clone().insert_axis(Axis(0))
                }
                _ => panic!("logits gradient shape does not match task"),
            };
            tape.backward(out, &seed, x)
        });
        Ok((logits, vjp))
    }
}

// ---------------------------------------------------------------------------
// LinearBagOfWords
// ---------------------------------------------------------------------------

/// Classification model whose class-1 logit is exactly the sum of per-token
/// word weights plus a bias. Special-token embeddings are zero, so pooling is
/// a plain row sum. Attributions on it have closed forms.
pub struct LinearBagOfWords {
    d: usize,
    vocab: usize,
    embed: Array2<f64>,
    /// d × 2 head.
    w: Array2<f64>,
    b: Array1<f64>,
}

pub const LBOW_VOCAB: usize = 512;

impl LinearBagOfWords {
    /// Model with `w(word)` on the class-1 logit for the listed words, zero
    /// for every other word, and the given bias.
    pub fn from_word_weights(tokenizer: &Tokenizer, weights: &[(&str, f64)], bias: f64) -> Self {
        let d = 16;
        let vocab = tokenizer.vocab_size();
        let mut embed = Array2::zeros((vocab, d));
        for (word, weight) in weights {
            let id = tokenizer.word_id(word) as usize;
            embed[[id, 0]] = *weight;
        }
        let mut w = Array2::zeros((d, 2));
        w[[0, 1]] = 1.0;
        let mut b = Array1::zeros(2);
        b[1] = bias;
        LinearBagOfWords {
            d,
            vocab,
            embed,
            w,
            b,
        }
    }

    /// Fully random instance (all embedding coordinates populated); used by
    /// property tests and the concept pipeline.
    pub fn random(seed: u64) -> Self {
        let d = 16;
        let vocab = LBOW_VOCAB;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embed = rand_mat(&mut rng, vocab, d, 1.0);
        for special in 0..=4usize {
            embed.row_mut(special).fill(0.0);
        }
        let w = rand_mat(&mut rng, d, 2, 1.0);
        let b = Array1::zeros(2);
        LinearBagOfWords {
            d,
            vocab,
            embed,
            w,
            b,
        }
    }

    /// Class-1 weight carried by one word.
    pub fn word_weight(&self, tokenizer: &Tokenizer, word: &str) -> f64 {
        let id = tokenizer.word_id(word) as usize;
        self.embed.row(id).dot(&self.w.column(1))
    }

    fn pool(&self, emb: &Array2<f64>) -> Array1<f64> {
        emb.sum_axis(Axis(0))
    }

    fn head(&self, pooled: &Array1<f64>) -> Array1<f64> {
        pooled.dot(&self.w) + &self.b
    }
}

impl ModelAdapter for LinearBagOfWords {
    fn task(&self) -> Task {
        Task::Classification
    }
    fn vocab_size(&self) -> usize {
        self.vocab
    }
    fn num_classes(&self) -> usize {
        2
    }
    fn hidden_dim(&self) -> usize {
        self.d
    }
    fn layer_names(&self) -> Vec<String> {
        vec!["embeddings".to_string(), "pooling".to_string()]
    }

    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        let mut out = Array2::zeros((ids.len(), self.d));
        for (i, &id) in ids.iter().enumerate() {
            if !is_special_id(id) {
                out.row_mut(i).assign(&self.embed.row((id as usize).min(self.vocab - 1)));
            }
        }
        out
    }

    fn forward_ids(&self, ids: &[u32]) -> Logits {
        self.forward_embeddings(&self.embed(ids))
    }

    fn forward_embeddings(&self, emb: &Array2<f64>) -> Logits {
        Logits::Classification(self.head(&self.pool(emb)))
    }

    fn forward_embeddings_vjp(&self, emb: &Array2<f64>) -> (Logits, Vjp) {
        let logits = self.forward_embeddings(emb);
        let w = self.w.clone();
        let rows = emb.nrows();
        let d = self.d;
        let vjp: Vjp = Box::new(move |g: &Logits| {
            let g = match g {
                Logits::Classification(v) => v,
                _ => panic!("classification gradient expected"),
            };
            // d logit / d e_row = w column; same for every row
            let per_row = w.dot(g);
            let mut out = Array2::zeros((rows, d));
            for r in 0..rows {
                out.row_mut(r).assign(&per_row);
            }
            out
        });
        (logits, vjp)
    }

    fn forward_to_layer(&self, ids: &[u32], layer: &str) -> Result<Array2<f64>> {
        match layer {
            "embeddings" => Ok(self.embed(ids)),
            "pooling" => Ok(self.pool(&self.embed(ids)).insert_axis(Axis(0))),
            _ => Err(Error::UnknownSplitPoint {
                requested: layer.to_string(),
                valid: self.layer_names(),
            }),
        }
    }

    fn forward_from_layer(&self, acts: &Array2<f64>, layer: &str) -> Result<Logits> {
        match layer {
            "embeddings" => Ok(Logits::Classification(self.head(&self.pool(acts)))),
            "pooling" => Ok(Logits::Classification(self.head(&acts.row(0).to_owned()))),
            _ => Err(Error::UnknownSplitPoint {
                requested: layer.to_string(),
                valid: self.layer_names(),
            }),
        }
    }

    fn forward_from_layer_vjp(&self, acts: &Array2<f64>, layer: &str) -> Result<(Logits, Vjp)> {
        let logits = self.forward_from_layer(acts, layer)?;
        let w = self.w.clone();
        let (rows, d) = acts.dim();
        let pooled_split = layer == "pooling";
        let vjp: Vjp = Box::new(move |g: &Logits| {
            let g = match g {
                Logits::Classification(v) => v,
                _ => panic!("classification gradient expected"),
            };
            let per_row = w.dot(g);
            let n = if pooled_split { 1 } else { rows };
            let mut out = Array2::zeros((n, d));
            for r in 0..n {
                out.row_mut(r).assign(&per_row);
            }
            out
        });
        Ok((logits, vjp))
    }
}

fn is_special_id(id: u32) -> bool {
    id <= 4 || id == CLS_ID || id == SEP_ID
}

// ---------------------------------------------------------------------------
// CoalitionGame: lookup-table test model over unit presence
// ---------------------------------------------------------------------------

/// A classification model whose single logit is a lookup over which of a fixed
/// set of unit token ids survive in the input. Used as an exact game oracle
/// for Shapley-style estimators.
pub struct CoalitionGame {
    unit_ids: Vec<u32>,
    values: HashMap<u64, f64>,
}

impl CoalitionGame {
    pub fn new(unit_ids: Vec<u32>, values: HashMap<u64, f64>) -> Self {
        assert!(unit_ids.len() <= 63);
        CoalitionGame { unit_ids, values }
    }

    /// Build from a closure over the coalition bitmask.
    pub fn from_fn(unit_ids: Vec<u32>, f: impl Fn(u64) -> f64) -> Self {
        let m = unit_ids.len();
        let values = (0u64..(1 << m)).map(|z| (z, f(z))).collect();
        CoalitionGame::new(unit_ids, values)
    }

    pub fn value(&self, coalition: u64) -> f64 {
        self.values[&coalition]
    }

    pub fn n_units(&self) -> usize {
        self.unit_ids.len()
    }

    fn coalition_of(&self, ids: &[u32]) -> u64 {
        let mut z = 0u64;
        for (i, &u) in self.unit_ids.iter().enumerate() {
            if ids.contains(&u) {
                z |= 1 << i;
            }
        }
        z
    }
}

impl ModelAdapter for CoalitionGame {
    fn task(&self) -> Task {
        Task::Classification
    }
    fn vocab_size(&self) -> usize {
        1024
    }
    fn num_classes(&self) -> usize {
        1
    }
    fn hidden_dim(&self) -> usize {
        1
    }
    fn layer_names(&self) -> Vec<String> {
        vec!["lookup".to_string()]
    }
    fn embed(&self, ids: &[u32]) -> Array2<f64> {
        Array2::zeros((ids.len(), 1))
    }
    fn forward_ids(&self, ids: &[u32]) -> Logits {
        let z = self.coalition_of(ids);
        Logits::Classification(Array1::from_elem(1, self.values[&z]))
    }
    fn forward_embeddings(&self, _emb: &Array2<f64>) -> Logits {
        panic!("CoalitionGame has no embedding forward")
    }
    fn forward_embeddings_vjp(&self, _emb: &Array2<f64>) -> (Logits, Vjp) {
        panic!("CoalitionGame has no embedding forward")
    }
    fn forward_to_layer(&self, _ids: &[u32], _layer: &str) -> Result<Array2<f64>> {
        Err(Error::UnsupportedTask("lookup-table game".to_string()))
    }
    fn forward_from_layer(&self, _acts: &Array2<f64>, _layer: &str) -> Result<Logits> {
        Err(Error::UnsupportedTask("lookup-table game".to_string()))
    }
    fn forward_from_layer_vjp(&self, _acts: &Array2<f64>, _layer: &str) -> Result<(Logits, Vjp)> {
        Err(Error::UnsupportedTask("lookup-table game".to_string()))
    }
}

// ---------------------------------------------------------------------------
// Registry
// ---------------------------------------------------------------------------

/// The two built-in desk-scale reference models with their tokenizers.
pub fn reference_models(seed: u64) -> (Arc<dyn ModelAdapter>, Arc<dyn ModelAdapter>) {
    (
        Arc::new(TinyTransformer::new(Task::Generation, seed)),
        Arc::new(LinearBagOfWords::random(seed)),
    )
}

/// Built-in model registry for the CLI: name -> (adapter, tokenizer).
pub fn model_by_name(name: &str, seed: u64) -> Result<(Arc<dyn ModelAdapter>, Tokenizer)> {
    match name {
        "tiny-gen" => Ok((
            Arc::new(TinyTransformer::new(Task::Generation, seed)),
            Tokenizer::hashed(256, false),
        )),
        "tiny-cls" => Ok((
            Arc::new(TinyTransformer::new(Task::Classification, seed)),
            Tokenizer::hashed(256, true),
        )),
        "linear-bow" => {
            let tokenizer = Tokenizer::hashed(LBOW_VOCAB, true);
            Ok((Arc::new(LinearBagOfWords::random(seed)), tokenizer))
        }
        "linear-bow-great" => {
            // Fig-1a style sentiment toy: only "great" carries positive weight.
            let tokenizer = Tokenizer::hashed(LBOW_VOCAB, true);
            let model = LinearBagOfWords::from_word_weights(&tokenizer, &[("great", 2.0)], 0.0);
            Ok((Arc::new(model), tokenizer))
        }
        other => Err(Error::Config(format!("unknown model '{other}'"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::tokenize;

    fn assert_logits_eq(a: &Logits, b: &Logits) {
        match (a, b) {
            (Logits::Classification(x), Logits::Classification(y)) => assert_eq!(x, y),
            (Logits::Generation(x), Logits::Generation(y)) => assert_eq!(x, y),
            _ => panic!("task mismatch"),
        }
    }

    #[test]
    fn split_recompose_identity_tiny() {
        let model = Arc::new(TinyTransformer::new(Task::Generation, 7));
        let ids: Vec<u32> = vec![10, 20, 30, 40, 5];
        let direct = model.forward_ids(&ids);
        for layer in model.layer_names() {
            let sm = split(model.clone(), &layer).unwrap();
            let recomposed = sm.predict(&sm.extract(&ids));
            assert_logits_eq(&direct, &recomposed);
        }
    }

    #[test]
    fn unknown_split_point_lists_valid() {
        let model = Arc::new(TinyTransformer::new(Task::Generation, 7));
        match split(model, "layer_99") {
            Err(Error::UnknownSplitPoint { requested, valid }) => {
                assert_eq!(requested, "layer_99");
                assert!(valid.contains(&"layer_0".to_string()));
            }
            Err(other) => panic!("expected UnknownSplitPoint, got {other:?}"),
            Ok(_) => panic!("expected UnknownSplitPoint, got Ok"),
        }
    }

    #[test]
    fn lbow_logit_is_weight_sum() {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = LinearBagOfWords::from_word_weights(&tk, &[("great", 2.0)], 0.0);
        let tok = tokenize("great movie", &tk).unwrap();
        match model.forward_ids(&tok.token_ids) {
            Logits::Classification(l) => assert_eq!(l[1], 2.0),
            _ => panic!(),
        }
    }

    #[test]
    fn lbow_split_before_head() {
        let tk = Tokenizer::hashed(LBOW_VOCAB, true);
        let model = Arc::new(LinearBagOfWords::from_word_weights(&tk, &[("great", 2.0)], 0.5));
        let tok = tokenize("great movie", &tk).unwrap();
        let sm = split(model.clone(), "pooling").unwrap();
        let pooled = sm.extract(&tok.token_ids);
        assert_eq!(pooled.nrows(), 1);
        let logits = sm.predict(&pooled);
        assert_logits_eq(&logits, &model.forward_ids(&tok.token_ids));
        match logits {
            Logits::Classification(l) => assert!((l[1] - 2.5).abs() < 1e-12),
            _ => panic!(),
        }
    }

    #[test]
    fn tiny_deterministic_forward() {
        let model = TinyTransformer::new(Task::Generation, 3);
        let ids = vec![1, 2, 3, 4];
        let a = model.forward_ids(&ids);
        let b = model.forward_ids(&ids);
        assert_logits_eq(&a, &b);
    }

    #[test]
    fn tiny_gradient_matches_finite_differences() {
        let model = TinyTransformer::new(Task::Generation, 11);
        let ids: Vec<u32> = vec![5, 9, 101, 33];
        let emb = model.embed(&ids);
        let (logits, vjp) = model.forward_embeddings_vjp(&emb);
        // scalar score: logit of token 42 at the last position
        let (pos, tok) = (ids.len() - 1, 42usize);
        let s0 = match &logits {
            Logits::Generation(m) => m[[pos, tok]],
            _ => panic!(),
        };
        let mut seed = Array2::zeros(match &logits {
            Logits::Generation(m) => m.dim(),
            _ => panic!(),
        });
        seed[[pos, tok]] = 1.0;
        let grad = vjp(&Logits::Generation(seed));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let h = 1e-3;
        for _ in 0..10 {
            let i = rng.gen_range(0..emb.nrows());
            let j = rng.gen_range(0..emb.ncols());
            let mut ep = emb.clone();
            ep[[i, j]] += h;
            let mut em = emb.clone();
            em[[i, j]] -= h;
            let f = |e: &Array2<f64>| match model.forward_embeddings(e) {
                Logits::Generation(m) => m[[pos, tok]],
                _ => panic!(),
            };
            let fd = (f(&ep) - f(&em)) / (2.0 * h);
            let rel = (grad[[i, j]] - fd).abs() / fd.abs().max(1e-4);
            assert!(rel < 1e-3, "({i},{j}) ad={} fd={} s0={s0}", grad[[i, j]], fd);
        }
    }

    #[test]
    fn coalition_game_lookup() {
        let game = CoalitionGame::from_fn(vec![100, 101], |z| {
            if z == 0b11 {
                1.0
            } else {
                0.0
            }
        });
        match game.forward_ids(&[100, 101]) {
            Logits::Classification(l) => assert_eq!(l[0], 1.0),
            _ => panic!(),
        }
        match game.forward_ids(&[100]) {
            Logits::Classification(l) => assert_eq!(l[0], 0.0),
            _ => panic!(),
        }
    }
}
