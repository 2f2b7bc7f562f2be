//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is viewed as a matrix (`rows x cols`, last axis
//! is the column axis). Ops record what their backward pass needs; calling
//! [`Graph::backward`] on a single-element value walks the tape in reverse
//! and returns a [`Gradients`] table indexed by [`Var`].

use std::sync::Arc;

use super::tensor::Tensor;
use crate::error::{MuseError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Row-sparse linear map: `out[r] = sum_j w_j * in[idx_j]` for `j` in row `r`.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    offsets: Vec<usize>,
    idx: Vec<usize>,
    weight: Vec<f64>,
    in_rows: usize,
}

impl SparseRows {
    pub fn new(in_rows: usize) -> Self {
        Self {
            offsets: vec![0],
            idx: Vec::new(),
            weight: Vec::new(),
            in_rows,
        }
    }

    /// Append one output row built from `(input_row, weight)` terms.
    /// Zero weights are dropped.
    pub fn push_row(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        for (i, w) in terms {
            debug_assert!(i < self.in_rows);
            if w != 0.0 {
                self.idx.push(i);
                self.weight.push(w);
            }
        }
        self.offsets.push(self.idx.len());
    }

    pub fn out_rows(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn in_rows(&self) -> usize {
        self.in_rows
    }

    fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (s, e) = (self.offsets[r], self.offsets[r + 1]);
        self.idx[s..e].iter().copied().zip(self.weight[s..e].iter().copied())
    }

    pub fn apply(&self, input: &[f64], cols: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.out_rows() * cols];
        for r in 0..self.out_rows() {
            let dst = &mut out[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let src = &input[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
        out
    }

    fn apply_transpose_acc(&self, grad_out: &[f64], cols: usize, grad_in: &mut [f64]) {
        for r in 0..self.out_rows() {
            let src = &grad_out[r * cols..(r + 1) * cols];
            for (i, w) in self.row(r) {
                let dst = &mut grad_in[i * cols..(i + 1) * cols];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow { a: Var, bias: Var },
    MulRow { a: Var, scale: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm { a: Var, rstd: Vec<f64> },
    SoftmaxRows(Var),
    L2NormRows { a: Var, norms: Vec<f64> },
    SliceRows { a: Var, start: usize },
    SliceCols { a: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather { a: Var, map: Arc<SparseRows> },
    Im2Col { a: Var, h: usize, w: usize },
    SoftCrossEntropy { logits: Var, probs: Vec<f64>, targets: Tensor, tau: f64, weights: Vec<f64> },
    SquaredError { a: Var, target: Tensor, weights: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recording tape. Values are immutable once pushed.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when no path exists.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

/// Strided matrix view used to drive `dgemm`.
#[derive(Clone, Copy)]
struct View {
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl View {
    fn dense(rows: usize, cols: usize, transposed: bool) -> View {
        // `rows x cols` is the logical (possibly transposed) shape.
        if transposed {
            View { rows, cols, rs: 1, cs: rows as isize }
        } else {
            View { rows, cols, rs: cols as isize, cs: 1 }
        }
    }

    fn t(self) -> View {
        View { rows: self.cols, cols: self.rows, rs: self.cs, cs: self.rs }
    }
}

fn gemm(a: &[f64], av: View, b: &[f64], bv: View, c: &mut [f64], cv: View, beta: f64) {
    debug_assert_eq!(av.cols, bv.rows);
    debug_assert_eq!(cv.rows, av.rows);
    debug_assert_eq!(cv.cols, bv.cols);
    if av.rows == 0 || bv.cols == 0 {
        return;
    }
    // SAFETY: the views describe in-bounds strided access into slices whose
    // lengths are rows*cols of the underlying row-major storage.
    unsafe {
        matrixmultiply::dgemm(
            av.rows, av.cols, bv.cols, 1.0,
            a.as_ptr(), av.rs, av.cs,
            b.as_ptr(), bv.rs, bv.cs,
            beta,
            c.as_mut_ptr(), cv.rs, cv.cs,
        );
    }
}

fn matmul_views(a: &Tensor, b: &Tensor, ta: bool, tb: bool) -> (View, View) {
    let (ar, ac) = (a.rows(), a.cols());
    let (br, bc) = (b.rows(), b.cols());
    let av = if ta { View::dense(ac, ar, true) } else { View::dense(ar, ac, false) };
    let bv = if tb { View::dense(bc, br, true) } else { View::dense(br, bc, false) };
    (av, bv)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Copy of `v` with no gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn mat(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
        Tensor::new(vec![rows, cols], data).expect("matrix shape")
    }

    /// `op(a) @ op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (av, bv) = matmul_views(self.value(a), self.value(b), ta, tb);
        if av.cols != bv.rows {
            return Err(MuseError::arg(format!(
                "matmul inner dims {} vs {} (shapes {:?}{} {:?}{})",
                av.cols,
                bv.rows,
                self.value(a).shape(),
                if ta { "^T" } else { "" },
                self.value(b).shape(),
                if tb { "^T" } else { "" },
            )));
        }
        let mut out = vec![0.0; av.rows * bv.cols];
        gemm(
            self.value(a).data(), av,
            self.value(b).data(), bv,
            &mut out, View::dense(av.rows, bv.cols, false), 0.0,
        );
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Self::mat(av.rows, bv.cols, out), Op::MatMul { a, b, ta, tb }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "add")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        x.check_same_shape(y, "mul")?;
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let t = Tensor::new(x.shape().to_vec(), data)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(t, Op::Mul(a, b), ng))
    }

    /// Broadcast-add a `[cols]` vector to every row.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (x, b) = (self.value(a), self.value(bias));
        let c = x.cols();
        if b.len() != c {
            return Err(MuseError::arg(format!("add_row: bias len {} vs cols {c}", b.len())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, bb) in row.iter_mut().zip(b.data()) {
                *d += bb;
            }
        }
        let t = Self::mat(x.rows(), c, data);
        let ng = self.ng(a) || self.ng(bias);
        Ok(self.push(t, Op::AddRow { a, bias }, ng))
    }

    /// Broadcast-multiply every row by a `[cols]` vector.
    pub fn mul_row(&mut self, a: Var, scale: Var) -> Result<Var> {
        let (x, s) = (self.value(a), self.value(scale));
        let c = x.cols();
        if s.len() != c {
            return Err(MuseError::arg(format!("mul_row: scale len {} vs cols {c}", s.len())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(c) {
            for (d, ss) in row.iter_mut().zip(s.data()) {
                *d *= ss;
            }
        }
        let t = Self::mat(x.rows(), c, data);
        let ng = self.ng(a) || self.ng(scale);
        Ok(self.push(t, Op::MulRow { a, scale }, ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let t = self.value(a).map(|v| v * s);
        let ng = self.ng(a);
        self.push(t, Op::Scale(a, s), ng)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(gelu);
        let ng = self.ng(a);
        self.push(t, Op::Gelu(a), ng)
    }

    /// Row-wise normalization to zero mean, unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        let mut rstd = Vec::with_capacity(r);
        for (i, row) in x.data().chunks(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let ng = self.ng(a);
        self.push(Self::mat(r, c, out), Op::LayerNorm { a, rstd }, ng)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        for (i, row) in x.data().chunks(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut s = 0.0;
            for (d, v) in dst.iter_mut().zip(row) {
                *d = (v - m).exp();
                s += *d;
            }
            for d in dst.iter_mut() {
                *d /= s;
            }
        }
        let ng = self.ng(a);
        self.push(Self::mat(r, c, out), Op::SoftmaxRows(a), ng)
    }

    /// Divide every row by its Euclidean norm.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = vec![0.0; r * c];
        let mut norms = Vec::with_capacity(r);
        for (i, row) in x.data().chunks(c).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            norms.push(n);
            for (o, v) in out[i * c..(i + 1) * c].iter_mut().zip(row) {
                *o = v / n;
            }
        }
        let ng = self.ng(a);
        self.push(Self::mat(r, c, out), Op::L2NormRows { a, norms }, ng)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let c = x.cols();
        if start + len > x.rows() {
            return Err(MuseError::arg(format!(
                "slice_rows {start}+{len} beyond {} rows",
                x.rows()
            )));
        }
        let data = x.data()[start * c..(start + len) * c].to_vec();
        let ng = self.ng(a);
        Ok(self.push(Self::mat(len, c, data), Op::SliceRows { a, start }, ng))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        if start + len > c {
            return Err(MuseError::arg(format!("slice_cols {start}+{len} beyond {c} cols")));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in x.data().chunks(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let ng = self.ng(a);
        Ok(self.push(Self::mat(r, len, data), Op::SliceCols { a, start }, ng))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let c = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let x = self.value(p);
            if x.cols() != c {
                return Err(MuseError::arg("concat_rows: column mismatch"));
            }
            rows += x.rows();
            data.extend_from_slice(x.data());
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::mat(rows, c, data), Op::ConcatRows(parts.to_vec()), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let r = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != r) {
            return Err(MuseError::arg("concat_cols: row mismatch"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let ng = parts.iter().any(|&p| self.ng(p));
        Ok(self.push(Self::mat(r, total, data), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Apply a fixed row-sparse linear map (bilinear resampling, point lookup).
    pub fn gather(&mut self, a: Var, map: Arc<SparseRows>) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != map.in_rows() {
            return Err(MuseError::arg(format!(
                "gather: map expects {} rows, input has {}",
                map.in_rows(),
                x.rows()
            )));
        }
        let c = x.cols();
        let data = map.apply(x.data(), c);
        let t = Self::mat(map.out_rows(), c, data);
        let ng = self.ng(a);
        Ok(self.push(t, Op::Gather { a, map }, ng))
    }

    /// 3x3 zero-padded patches of a channels-last `[h*w, c]` map -> `[h*w, 9c]`.
    pub fn im2col3(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let x = self.value(a);
        if x.rows() != h * w {
            return Err(MuseError::arg(format!("im2col3: {} rows vs {h}x{w}", x.rows())));
        }
        let c = x.cols();
        let mut out = vec![0.0; h * w * 9 * c];
        let src = x.data();
        for i in 0..h {
            for j in 0..w {
                let dst = &mut out[(i * w + j) * 9 * c..(i * w + j + 1) * 9 * c];
                for (k, (di, dj)) in NEIGHBOURS.iter().enumerate() {
                    let (ii, jj) = (i as isize + di, j as isize + dj);
                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= w as isize {
                        continue;
                    }
                    let s = (ii as usize * w + jj as usize) * c;
                    dst[k * c..(k + 1) * c].copy_from_slice(&src[s..s + c]);
                }
            }
        }
        let ng = self.ng(a);
        Ok(self.push(Self::mat(h * w, 9 * c, out), Op::Im2Col { a, h, w }, ng))
    }

    /// `sum_r w_r * (-sum_k t_rk * log softmax(z_r / tau)_k)`; targets are constants.
    pub fn soft_cross_entropy(&mut self, logits: Var, targets: Tensor, tau: f64, weights: Vec<f64>) -> Result<Var> {
        let z = self.value(logits);
        let (r, c) = (z.rows(), z.cols());
        if targets.rows() != r || targets.cols() != c || weights.len() != r {
            return Err(MuseError::arg(format!(
                "soft_cross_entropy: logits {r}x{c}, targets {}x{}, {} weights",
                targets.rows(),
                targets.cols(),
                weights.len()
            )));
        }
        if !(tau > 0.0) {
            return Err(MuseError::arg("temperature must be positive"));
        }
        let mut probs = vec![0.0; r * c];
        let mut loss = 0.0;
        for i in 0..r {
            let row = z.row(i);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let s: f64 = row.iter().map(|v| ((v - m) / tau).exp()).sum();
            let lse = s.ln();
            let mut term = 0.0;
            for k in 0..c {
                let ls = (row[k] - m) / tau - lse;
                probs[i * c + k] = ls.exp();
                term -= targets.row(i)[k] * ls;
            }
            loss += weights[i] * term;
        }
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftCrossEntropy { logits, probs, targets, tau, weights },
            ng,
        ))
    }

    /// `sum_r w_r * ||a_r - t_r||^2`.
    pub fn squared_error(&mut self, a: Var, target: Tensor, weights: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if x.shape() != target.shape() && (x.rows(), x.cols()) != (target.rows(), target.cols()) {
            return Err(MuseError::arg("squared_error: shape mismatch"));
        }
        if weights.len() != x.rows() {
            return Err(MuseError::arg("squared_error: weight count"));
        }
        let c = x.cols();
        let loss = x
            .data()
            .chunks(c)
            .zip(target.data().chunks(c))
            .zip(&weights)
            .map(|((p, q), w)| w * p.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
            .sum();
        let ng = self.ng(a);
        Ok(self.push(Tensor::scalar(loss), Op::SquaredError { a, target, weights }, ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// Sum of several scalar vars (empty input gives a constant 0).
    pub fn add_scalars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = match parts.first() {
            Some(&p) => p,
            None => return Ok(self.constant(Tensor::scalar(0.0))),
        };
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from the single-element value `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(MuseError::arg("backward needs a single-element loss"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        macro_rules! acc {
            ($v:expr) => {{
                let v: Var = $v;
                let l = len_of(v);
                grads[v.0].get_or_insert_with(|| vec![0.0; l])
            }};
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (av, bv) = matmul_views(x, y, *ta, *tb);
                let gv = View::dense(av.rows, bv.cols, false);
                if self.ng(*a) {
                    let out_view = View::dense(av.rows, av.cols, *ta);
                    gemm(g, gv, y.data(), bv.t(), acc!(*a), out_view, 1.0);
                }
                if self.ng(*b) {
                    let out_view = View::dense(bv.rows, bv.cols, *tb);
                    gemm(x.data(), av.t(), g, gv, acc!(*b), out_view, 1.0);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        for (d, s) in acc!(v).iter_mut().zip(g) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    for ((d, s), yy) in acc!(*a).iter_mut().zip(g).zip(y) {
                        *d += s * yy;
                    }
                }
                if self.ng(*b) {
                    for ((d, s), xx) in acc!(*b).iter_mut().zip(g).zip(x) {
                        *d += s * xx;
                    }
                }
            }
            Op::AddRow { a, bias } => {
                let c = self.value(*a).cols();
                if self.ng(*a) {
                    for (d, s) in acc!(*a).iter_mut().zip(g) {
                        *d += s;
                    }
                }
                if self.ng(*bias) {
                    let db = acc!(*bias);
                    for row in g.chunks(c) {
                        for (d, s) in db.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::MulRow { a, scale } => {
                let x = self.value(*a);
                let c = x.cols();
                let s = self.value(*scale).data();
                if self.ng(*a) {
                    let da = acc!(*a);
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(c)) {
                        for k in 0..c {
                            drow[k] += grow[k] * s[k];
                        }
                    }
                }
                if self.ng(*scale) {
                    let ds = acc!(*scale);
                    for (xrow, grow) in x.data().chunks(c).zip(g.chunks(c)) {
                        for k in 0..c {
                            ds[k] += grow[k] * xrow[k];
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if self.ng(*a) {
                    for (d, gg) in acc!(*a).iter_mut().zip(g) {
                        *d += s * gg;
                    }
                }
            }
            Op::Gelu(a) => {
                if self.ng(*a) {
                    let x = self.value(*a).data();
                    for ((d, gg), xx) in acc!(*a).iter_mut().zip(g).zip(x) {
                        *d += gg * gelu_grad(*xx);
                    }
                }
            }
            Op::LayerNorm { a, rstd } => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let da = acc!(*a);
                    for (i, rs) in rstd.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let mg = gr.iter().sum::<f64>() / c as f64;
                        let mgy = gr.iter().zip(yr).map(|(p, q)| p * q).sum::<f64>() / c as f64;
                        for k in 0..c {
                            da[i * c + k] += rs * (gr[k] - mg - yr[k] * mgy);
                        }
                    }
                }
            }
            Op::SoftmaxRows(a) => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let da = acc!(*a);
                    for ((drow, grow), yrow) in da.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            drow[k] += yrow[k] * (grow[k] - dot);
                        }
                    }
                }
            }
            Op::L2NormRows { a, norms } => {
                if self.ng(*a) {
                    let y = node.value.data();
                    let c = node.value.cols();
                    let da = acc!(*a);
                    for (i, n) in norms.iter().enumerate() {
                        let gr = &g[i * c..(i + 1) * c];
                        let yr = &y[i * c..(i + 1) * c];
                        let dot: f64 = gr.iter().zip(yr).map(|(p, q)| p * q).sum();
                        for k in 0..c {
                            da[i * c + k] += (gr[k] - yr[k] * dot) / n;
                        }
                    }
                }
            }
            Op::SliceRows { a, start } => {
                if self.ng(*a) {
                    let c = node.value.cols();
                    let da = acc!(*a);
                    for (d, s) in da[start * c..start * c + g.len()].iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::SliceCols { a, start } => {
                if self.ng(*a) {
                    let len = node.value.cols();
                    let c = self.value(*a).cols();
                    let da = acc!(*a);
                    for (drow, grow) in da.chunks_mut(c).zip(g.chunks(len)) {
                        for (d, s) in drow[*start..start + len].iter_mut().zip(grow) {
                            *d += s;
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let l = len_of(p);
                    if self.ng(p) {
                        for (d, s) in acc!(p).iter_mut().zip(&g[off..off + l]) {
                            *d += s;
                        }
                    }
                    off += l;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut off = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if self.ng(p) {
                        let dp = acc!(p);
                        for (drow, grow) in dp.chunks_mut(c).zip(g.chunks(total)) {
                            for (d, s) in drow.iter_mut().zip(&grow[off..off + c]) {
                                *d += s;
                            }
                        }
                    }
                    off += c;
                }
            }
            Op::Gather { a, map } => {
                if self.ng(*a) {
                    let c = node.value.cols();
                    map.apply_transpose_acc(g, c, acc!(*a));
                }
            }
            Op::Im2Col { a, h, w } => {
                if self.ng(*a) {
                    let c = self.value(*a).cols();
                    let da = acc!(*a);
                    for i in 0..*h {
                        for j in 0..*w {
                            let src = &g[(i * w + j) * 9 * c..(i * w + j + 1) * 9 * c];
                            for (k, (di, dj)) in NEIGHBOURS.iter().enumerate() {
                                let (ii, jj) = (i as isize + di, j as isize + dj);
                                if ii < 0 || jj < 0 || ii >= *h as isize || jj >= *w as isize {
                                    continue;
                                }
                                let d = (ii as usize * w + jj as usize) * c;
                                for (dd, s) in da[d..d + c].iter_mut().zip(&src[k * c..(k + 1) * c]) {
                                    *dd += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::SoftCrossEntropy { logits, probs, targets, tau, weights } => {
                if self.ng(*logits) {
                    let c = targets.cols();
                    let dz = acc!(*logits);
                    for (i, w) in weights.iter().enumerate() {
                        let t = targets.row(i);
                        let mass: f64 = t.iter().sum();
                        let f = g[0] * w / tau;
                        for k in 0..c {
                            dz[i * c + k] += f * (mass * probs[i * c + k] - t[k]);
                        }
                    }
                }
            }
            Op::SquaredError { a, target, weights } => {
                if self.ng(*a) {
                    let x = self.value(*a).data();
                    let c = self.value(*a).cols();
                    let da = acc!(*a);
                    for (i, w) in weights.iter().enumerate() {
                        for k in i * c..(i + 1) * c {
                            da[k] += g[0] * 2.0 * w * (x[k] - target.data()[k]);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.ng(*a) {
                    for d in acc!(*a).iter_mut() {
                        *d += g[0];
                    }
                }
            }
        }
    }
}

/// Row-major 3x3 neighbourhood offsets `(di, dj)`.
const NEIGHBOURS: [(isize, isize); 9] = [
    (-1, -1), (-1, 0), (-1, 1),
    (0, -1), (0, 0), (0, 1),
    (1, -1), (1, 0), (1, 1),
];
