//! Minimal reverse-mode autodiff over `f64` matrices.
//!
//! Supports exactly the operations the built-in reference models need:
//! matrix products, bias/residual adds, GELU, row layer-norm, causal softmax,
//! and row pooling. Gradients flow to every node; callers read the gradient at
//! the leaf they care about (the input embeddings).

use ndarray::{Array1, Array2, Axis};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    /// a (m×k) · b (k×n)
    MatMul(usize, usize),
    /// a (m×k) · bᵀ with b (n×k)
    MatMulBT(usize, usize),
    Add(usize, usize),
    AddConst(usize),
    /// broadcast a row vector over all rows
    AddRow(usize),
    Scale(usize, f64),
    Gelu(usize),
    LayerNorm(usize, Array1<f64>),
    CausalSoftmax(usize),
    MeanRows(usize),
}

struct Node {
    op: Op,
    value: Array2<f64>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Leaf, value)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        self.push(Op::MatMul(a.0, b.0), v)
    }

    /// a · bᵀ
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        self.push(Op::MatMulBT(a.0, b.0), v)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(Op::Add(a.0, b.0), v)
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let v = &self.nodes[a.0].value + c;
        self.push(Op::AddConst(a.0), v)
    }

    pub fn add_row(&mut self, a: Var, bias: &Array1<f64>) -> Var {
        let v = &self.nodes[a.0].value + &bias.view().insert_axis(Axis(0));
        self.push(Op::AddRow(a.0), v)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.nodes[a.0].value * c;
        self.push(Op::Scale(a.0, c), v)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(gelu);
        self.push(Op::Gelu(a.0), v)
    }

    pub fn layer_norm(&mut self, a: Var, gamma: &Array1<f64>, beta: &Array1<f64>) -> Var {
        let x = &self.nodes[a.0].value;
        let mut v = x.clone();
        for mut row in v.rows_mut() {
            let mean = row.mean().unwrap();
            let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
            let std = (var + LN_EPS).sqrt();
            for (j, e) in row.iter_mut().enumerate() {
                *e = gamma[j] * (*e - mean) / std + beta[j];
            }
        }
        self.push(Op::LayerNorm(a.0, gamma.clone()), v)
    }

    /// Row-wise softmax with entries above the diagonal masked out.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let (m, n) = x.dim();
        let mut v = Array2::zeros((m, n));
        for i in 0..m {
            let limit = (i + 1).min(n);
            let row = x.row(i);
            let mx = (0..limit).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for j in 0..limit {
                denom += (row[j] - mx).exp();
            }
            for j in 0..limit {
                v[[i, j]] = (row[j] - mx).exp() / denom;
            }
        }
        self.push(Op::CausalSoftmax(a.0), v)
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a.0].value;
        let v = x
            .mean_axis(Axis(0))
            .expect("non-empty matrix")
            .insert_axis(Axis(0));
        self.push(Op::MeanRows(a.0), v)
    }

    /// Backpropagate `seed` (the gradient at `output`) and return the gradient
    /// at `wrt`.
    pub fn backward(&self, output: Var, seed: &Array2<f64>, wrt: Var) -> Array2<f64> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(seed.clone());

        fn acc(grads: &mut [Option<Array2<f64>>], idx: usize, g: Array2<f64>) {
            match &mut grads[idx] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..self.nodes.len()).rev() {
            let g = match grads[i].clone() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value.t());
                    let gb = self.nodes[*a].value.t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulBT(a, b) => {
                    let ga = g.dot(&self.nodes[*b].value);
                    let gb = g.t().dot(&self.nodes[*a].value);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::AddConst(a) | Op::AddRow(a) => acc(&mut grads, *a, g),
                Op::Scale(a, c) => acc(&mut grads, *a, &g * *c),
                Op::Gelu(a) => {
                    let dx = self.nodes[*a].value.mapv(gelu_grad);
                    acc(&mut grads, *a, &g * &dx);
                }
                Op::LayerNorm(a, gamma) => {
                    let x = &self.nodes[*a].value;
                    let mut dx = Array2::zeros(x.dim());
                    for (r, row) in x.rows().into_iter().enumerate() {
                        let mean = row.mean().unwrap();
                        let var = row.mapv(|e| (e - mean) * (e - mean)).mean().unwrap();
                        let std = (var + LN_EPS).sqrt();
                        let n = row.len() as f64;
                        let xhat: Vec<f64> = row.iter().map(|&e| (e - mean) / std).collect();
                        let gh: Vec<f64> = (0..row.len()).map(|j| g[[r, j]] * gamma[j]).collect();
                        let mean_gh: f64 = gh.iter().sum::<f64>() / n;
                        let mean_ghx: f64 =
                            gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                        for j in 0..row.len() {
                            dx[[r, j]] = (gh[j] - mean_gh - xhat[j] * mean_ghx) / std;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::CausalSoftmax(a) => {
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(y.dim());
                    for r in 0..y.nrows() {
                        let dot: f64 = (0..y.ncols()).map(|j| g[[r, j]] * y[[r, j]]).sum();
                        for j in 0..y.ncols() {
                            dx[[r, j]] = y[[r, j]] * (g[[r, j]] - dot);
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
                Op::MeanRows(a) => {
                    let m = self.nodes[*a].value.nrows() as f64;
                    let rows = self.nodes[*a].value.nrows();
                    let mut dx = Array2::zeros(self.nodes[*a].value.dim());
                    for r in 0..rows {
                        for j in 0..dx.ncols() {
                            dx[[r, j]] = g[[0, j]] / m;
                        }
                    }
                    acc(&mut grads, *a, dx);
                }
            }
        }
        grads[wrt.0]
            .clone()
            .unwrap_or_else(|| Array2::zeros(self.nodes[wrt.0].value.dim()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Scalar loss: sum of all entries of the network output.
    fn composite(x: &Array2<f64>) -> (f64, Array2<f64>) {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let w = tape.leaf(array![[0.3, -0.2], [0.5, 0.9]]);
        let gamma = array![1.1, 0.9];
        let beta = array![0.05, -0.02];
        let h = tape.matmul(v, w);
        let h = tape.gelu(h);
        let h = tape.layer_norm(h, &gamma, &beta);
        let att = tape.matmul_bt(h, h);
        let att = tape.scale(att, 0.5);
        let att = tape.causal_softmax(att);
        let h = tape.matmul(att, h);
        let pooled = tape.mean_rows(h);
        let loss: f64 = tape.value(pooled).sum();
        let seed = Array2::from_elem(tape.value(pooled).dim(), 1.0);
        let grad = tape.backward(pooled, &seed, v);
        (loss, grad)
    }

    #[test]
    fn gradcheck_composite() {
        let x = array![[0.2, -0.4], [0.7, 0.1], [-0.3, 0.6]];
        let (_, grad) = composite(&x);
        let h = 1e-5;
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                let fd = (composite(&xp).0 - composite(&xm).0) / (2.0 * h);
                let rel = (grad[[i, j]] - fd).abs() / fd.abs().max(1e-6);
                assert!(rel < 1e-5, "({i},{j}): ad={} fd={}", grad[[i, j]], fd);
            }
        }
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut tape = Tape::new();
        let v = tape.leaf(array![[1.0, 5.0, 9.0], [0.0, 0.0, 4.0], [1.0, 1.0, 1.0]]);
        let s = tape.causal_softmax(v);
        let y = tape.value(s);
        assert_eq!(y[[0, 1]], 0.0);
        assert_eq!(y[[0, 2]], 0.0);
        assert_eq!(y[[1, 2]], 0.0);
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
        for r in 0..3 {
            let sum: f64 = (0..3).map(|c| y[[r, c]]).sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }
}
