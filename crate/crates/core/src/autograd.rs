//! A small reverse-mode automatic differentiation tape over dense matrices.
//!
//! Every value is an `Array2<f64>`; scalars are `1 x 1`. Nodes are appended
//! in evaluation order, so a single reverse sweep computes all gradients.
//! Attention and batch normalization are fused nodes with hand-written
//! backward passes.

use ndarray::{linalg::general_mat_mul, s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Named trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> usize {
        self.names.push(name.into());
        self.values.push(value);
        self.values.len() - 1
    }

    /// Uniform in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn add_uniform(&mut self, name: impl Into<String>, rows: usize, cols: usize, fan_in: usize, rng: &mut impl Rng) -> usize {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let value = Array2::from_shape_simple_fn((rows, cols), || rng.gen_range(-bound..bound));
        self.add(name, value)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: usize) -> &Mat {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut Mat {
        &mut self.values[id]
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar entries.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }
}

#[derive(Debug)]
enum Op {
    Const,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Exp(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Sum(Var),
    Mean(Var),
    Pick(Var, usize, usize),
    Attention { q: Var, k: Var, v: Var, heads: usize, probs: Vec<Mat> },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Mat, inv_std: Array1<f64>, batch_stats: bool },
    LogSoftmax { x: Var, mask: Vec<bool> },
    Entropy(Var),
}

#[derive(Debug)]
struct Node {
    value: Mat,
    op: Op,
}

/// Batch statistics of the last [`Tape::batch_norm`] call in training mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats {
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

fn matmul(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Mat {
    let mut out = Array2::zeros((a.nrows(), b.ncols()));
    general_mat_mul(1.0, &a, &b, 0.0, &mut out);
    out
}

fn softmax_rows(mut s: Mat) -> Mat {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const)
    }

    pub fn constant_scalar(&mut self, v: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), v))
    }

    /// The tape node of parameter `id`, created on first use.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        if self.param_vars.len() <= id {
            self.param_vars.resize(id + 1, None);
        }
        if let Some(v) = self.param_vars[id] {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Param(id));
        self.param_vars[id] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = matmul(self.value(a).view(), self.value(b).view());
        self.push(out, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// `a + b` with the `1 x n` row `b` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(out, Op::Scale(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(out, Op::Exp(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views).expect("matching column counts");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    /// Rows `start..end` of `a`.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.value(a).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Array2::from_elem((1, 1), v.sum() / v.len() as f64);
        self.push(out, Op::Mean(a))
    }

    /// Entry `(row, col)` as a scalar.
    pub fn pick(&mut self, a: Var, row: usize, col: usize) -> Var {
        let out = Array2::from_elem((1, 1), self.value(a)[[row, col]]);
        self.push(out, Op::Pick(a, row, col))
    }

    /// Multi-head scaled dot-product attention. `q` is `m x d`, `k` and `v`
    /// are `n x d`; head `j` uses columns `j * d / heads .. (j + 1) * d / heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(heads);
        for j in 0..heads {
            let cols = s![.., j * dk..(j + 1) * dk];
            let scores = matmul(qv.slice(cols), kv.slice(cols).t()) * scale;
            let p = softmax_rows(scores);
            out.slice_mut(cols).assign(&matmul(p.view(), vv.slice(cols)));
            probs.push(p);
        }
        self.push(out, Op::Attention { q, k, v, heads, probs })
    }

    /// Batch normalization over rows. With `stats == None` the batch mean and
    /// biased variance are used and returned; otherwise the given running
    /// statistics are applied as constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, stats: Option<&BatchStats>) -> (Var, BatchStats) {
        let xv = self.value(x);
        let (mean, var, batch_stats) = match stats {
            Some(s) => (s.mean.clone(), s.var.clone(), false),
            None => {
                let mean = xv.mean_axis(Axis(0)).expect("non-empty batch");
                let var = (xv - &mean).mapv(|v| v * v).mean_axis(Axis(0)).expect("non-empty batch");
                (mean, var, true)
            }
        };
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let xhat = (xv - &mean) * &inv_std;
        let out = &xhat * self.value(gamma) + self.value(beta);
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats });
        (v, BatchStats { mean, var })
    }

    /// Row-wise log-softmax of a `1 x n` row; masked entries become `-inf`
    /// and receive no gradient.
    pub fn log_softmax(&mut self, x: Var, mask: &[bool]) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), 1, "log_softmax expects a single row");
        assert_eq!(xv.ncols(), mask.len());
        let m = xv.iter().zip(mask).filter(|(_, &ok)| ok).map(|(v, _)| *v).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = xv.iter().zip(mask).filter(|(_, &ok)| ok).map(|(v, _)| (v - m).exp()).sum();
        let lz = m + z.ln();
        let out = Array2::from_shape_fn((1, mask.len()), |(_, j)| if mask[j] { xv[[0, j]] - lz } else { f64::NEG_INFINITY });
        self.push(out, Op::LogSoftmax { x, mask: mask.to_vec() })
    }

    /// `-sum p log p` of a row of log-probabilities; `-inf` entries count as 0.
    pub fn entropy(&mut self, logp: Var) -> Var {
        let h: f64 = self.value(logp).iter().filter(|v| v.is_finite()).map(|lp| -lp.exp() * lp).sum();
        self.push(Array2::from_elem((1, 1), h), Op::Entropy(logp))
    }

    /// Gradients of the scalar `root` with respect to every parameter used on
    /// this tape, indexed by parameter id.
    pub fn backward(&self, root: Var, n_params: usize) -> Vec<Option<Mat>> {
        let mut grads: Vec<Option<Mat>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::ones(self.value(root).raw_dim()));
        let mut out: Vec<Option<Mat>> = vec![None; n_params];

        fn acc(grads: &mut [Option<Mat>], v: Var, g: Mat) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Const => {}
                Op::Param(id) => {
                    if *id < n_params {
                        out[*id] = Some(g);
                    }
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    acc(&mut grads, *a, matmul(g.view(), bv.t()));
                    acc(&mut grads, *b, matmul(av.t(), g.view()));
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    acc(&mut grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    ga.zip_mut_with(self.value(*a), |gv, &x| if x <= 0.0 { *gv = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Exp(a) => acc(&mut grads, *a, g * &node.value),
                Op::Transpose(a) => acc(&mut grads, *a, g.t().to_owned()),
                Op::ConcatRows(parts) => {
                    let mut r = 0;
                    for p in parts {
                        let n = self.value(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![r..r + n, ..]).to_owned());
                        r += n;
                    }
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga.slice_mut(s![*start..*start + g.nrows(), ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Sum(a) => acc(&mut grads, *a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]])),
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    acc(&mut grads, *a, Array2::from_elem(self.value(*a).raw_dim(), g[[0, 0]] / n));
                }
                Op::Pick(a, r, c) => {
                    let mut ga = Array2::zeros(self.value(*a).raw_dim());
                    ga[[*r, *c]] = g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
                Op::Attention { q, k, v, heads, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let dk = qv.ncols() / heads;
                    let scale = 1.0 / (dk as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    for (j, p) in probs.iter().enumerate() {
                        let cols = s![.., j * dk..(j + 1) * dk];
                        let go = g.slice(cols);
                        let gp = matmul(go, vv.slice(cols).t());
                        gv.slice_mut(cols).assign(&matmul(p.t(), go));
                        // softmax backward, row by row
                        let row_dot = (&gp * p).sum_axis(Axis(1)).insert_axis(Axis(1));
                        let gs = p * &(gp - &row_dot) * scale;
                        gq.slice_mut(cols).assign(&matmul(gs.view(), kv.slice(cols)));
                        gk.slice_mut(cols).assign(&matmul(gs.t(), qv.slice(cols)));
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let gamma_v = self.value(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gxhat = &g * gamma_v;
                    let gx = if *batch_stats {
                        let n = g.nrows() as f64;
                        let sum_g = gxhat.sum_axis(Axis(0));
                        let sum_gx = (&gxhat * xhat).sum_axis(Axis(0));
                        (gxhat * n - &sum_g - xhat * &sum_gx) * &(inv_std / n)
                    } else {
                        gxhat * inv_std
                    };
                    acc(&mut grads, *x, gx);
                }
                Op::LogSoftmax { x, mask } => {
                    let out = &node.value;
                    let total: f64 = g.iter().zip(mask).filter(|(_, &ok)| ok).map(|(v, _)| *v).sum();
                    let gx = Array2::from_shape_fn(out.raw_dim(), |(_, j)| {
                        if mask[j] { g[[0, j]] - out[[0, j]].exp() * total } else { 0.0 }
                    });
                    acc(&mut grads, *x, gx);
                }
                Op::Entropy(lp) => {
                    let gl = self.value(*lp).mapv(|l| if l.is_finite() { -(l.exp()) * (l + 1.0) } else { 0.0 }) * g[[0, 0]];
                    acc(&mut grads, *lp, gl);
                }
            }
        }
        out
    }
}

/// Euclidean norm over every entry of every present gradient.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Option<Mat>>) -> f64 {
    grads.into_iter().flatten().map(|g| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt()
}
