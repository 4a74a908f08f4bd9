//! Minimal reverse-mode differentiation over matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Calling
//! [`Tape::backward`] on a scalar node walks the records in reverse and
//! accumulates vector-Jacobian products into a [`Grads`] table. The op set is
//! exactly what the transformer, projection head and distillation loss need.

use crate::tensor::{Mat, Scalar};

/// Handle to a node on a tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Mat<T>, rstd: Vec<T> },
    Softmax(Var),
    LogSoftmax(Var),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    L2NormRows { x: Var, norms: Vec<T> },
    DotConst { x: Var, weights: Mat<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const L2_NORM_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, a, half) = (T::lit(GELU_C), T::lit(GELU_A), T::lit(0.5));
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::lit(3.0) * a * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

#[derive(Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    /// Parameters and constants both enter as leaves; only the caller decides
    /// which leaves it reads gradients for.
    pub fn leaf(&mut self, value: Mat<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b)).expect("matmul shapes");
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul_bt(self.value(b)).expect("matmul_bt shapes");
        self.push(v, Op::MatMulBt(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).add(self.value(b)).expect("add shapes");
        self.push(v, Op::Add(a, b))
    }

    /// Adds a `1×c` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut v = self.value(a).clone();
        assert_eq!(v.cols(), b.cols(), "bias width");
        let b = b.as_slice().to_vec();
        for r in 0..v.rows() {
            for (x, &y) in v.row_mut(r).iter_mut().zip(&b) {
                *x = *x + y;
            }
        }
        self.push(v, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(gelu);
        self.push(v, Op::Gelu(a))
    }

    /// Per-row layer normalization with affine `gamma`, `beta` (both `1×c`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::from_usize(cols).unwrap();
        let eps = T::lit(LAYER_NORM_EPS);
        let mut xhat = Mat::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let s = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * s;
            }
            rstd.push(s);
        }
        let g = self.value(gamma).as_slice();
        let b = self.value(beta).as_slice();
        let mut out = xhat.clone();
        for r in 0..rows {
            for ((o, &gi), &bi) in out.row_mut(r).iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = crate::tensor::softmax_rows(self.value(a));
        self.push(v, Op::Softmax(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x = *x - lse;
            }
        }
        self.push(v, Op::LogSoftmax(a))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_rows(start, len);
        self.push(v, Op::SliceRows { x, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x).slice_cols(start, len);
        self.push(v, Op::SliceCols { x, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.cols(), cols, "concat_rows widths");
            rows += m.rows();
            data.extend_from_slice(m.as_slice());
        }
        let v = Mat::from_vec(rows, cols, data).unwrap();
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows();
        let cols: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Mat::zeros(rows, cols);
        let mut offset = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows(), rows, "concat_cols heights");
            for r in 0..rows {
                v.row_mut(r)[offset..offset + m.cols()].copy_from_slice(m.row(r));
            }
            offset += m.cols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Divides each row by its Euclidean norm (floored at a tiny epsilon).
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        let eps = T::lit(L2_NORM_EPS);
        let mut norms = Vec::with_capacity(v.rows());
        for r in 0..v.rows() {
            let row = v.row_mut(r);
            let norm = row.iter().map(|&a| a * a).sum::<T>().sqrt().max(eps);
            for a in row.iter_mut() {
                *a = *a / norm;
            }
            norms.push(norm);
        }
        self.push(v, Op::L2NormRows { x, norms })
    }

    /// Scalar `Σ x ⊙ weights` against a constant weight matrix.
    pub fn dot_const(&mut self, x: Var, weights: Mat<T>) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.shape(), weights.shape(), "dot_const shapes");
        let s = xv.as_slice().iter().zip(weights.as_slice()).map(|(&a, &b)| a * b).sum();
        self.push(Mat::filled(1, 1, s), Op::DotConst { x, weights })
    }

    /// Reverse sweep from a `1×1` output.
    pub fn backward(&self, output: Var) -> Grads<T> {
        assert_eq!(self.value(output).shape(), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Mat::filled(1, 1, T::one()));

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let da = g.matmul_bt(self.value(*b)).unwrap();
                    let db = self.value(*a).matmul_at(&g).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::MatMulBt(a, b) => {
                    let da = g.matmul(self.value(*b)).unwrap();
                    let db = g.matmul_at(self.value(*a)).unwrap();
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g);
                }
                Op::AddBias(a, bias) => {
                    let db = Mat::from_vec(1, g.cols(), g.col_sums()).unwrap();
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Gelu(a) => {
                    let x = self.value(*a);
                    let data = g
                        .as_slice()
                        .iter()
                        .zip(x.as_slice())
                        .map(|(&gi, &xi)| gi * gelu_grad(xi))
                        .collect();
                    accumulate(&mut grads, *a, Mat::from_vec(x.rows(), x.cols(), data).unwrap());
                }
                Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let gam = self.value(*gamma).as_slice();
                    let n = T::from_usize(cols).unwrap();
                    let mut dgamma = vec![T::zero(); cols];
                    let mut dbeta = vec![T::zero(); cols];
                    let mut dx = Mat::zeros(rows, cols);
                    for r in 0..rows {
                        let gr = g.row(r);
                        let xr = xhat.row(r);
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for c in 0..cols {
                            dgamma[c] = dgamma[c] + gr[c] * xr[c];
                            dbeta[c] = dbeta[c] + gr[c];
                            let dxh = gr[c] * gam[c];
                            sum_dxhat = sum_dxhat + dxh;
                            sum_dxhat_xhat = sum_dxhat_xhat + dxh * xr[c];
                        }
                        let out = dx.row_mut(r);
                        for c in 0..cols {
                            let dxh = gr[c] * gam[c];
                            out[c] = rstd[r] / n * (n * dxh - sum_dxhat - xr[c] * sum_dxhat_xhat);
                        }
                    }
                    accumulate(&mut grads, *gamma, Mat::from_vec(1, cols, dgamma).unwrap());
                    accumulate(&mut grads, *beta, Mat::from_vec(1, cols, dbeta).unwrap());
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = p * (q - dot);
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::LogSoftmax(a) => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let gsum: T = gr.iter().copied().sum();
                        for (o, (&ly, &q)) in dx.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                            *o = q - ly.exp() * gsum;
                        }
                    }
                    accumulate(&mut grads, *a, dx);
                }
                Op::SliceRows { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::SliceCols { x, start } => {
                    let src = self.value(*x);
                    let mut dx = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        dx.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        accumulate(&mut grads, p, g.slice_rows(offset, rows));
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        accumulate(&mut grads, p, g.slice_cols(offset, cols));
                        offset += cols;
                    }
                }
                Op::L2NormRows { x, norms } => {
                    let y = &node.value;
                    let mut dx = Mat::zeros(y.rows(), y.cols());
                    let eps = T::lit(L2_NORM_EPS);
                    for r in 0..y.rows() {
                        let (yr, gr) = (y.row(r), g.row(r));
                        let out = dx.row_mut(r);
                        if norms[r] <= eps {
                            for (o, &q) in out.iter_mut().zip(gr) {
                                *o = q / eps;
                            }
                            continue;
                        }
                        let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                        for (o, (&p, &q)) in out.iter_mut().zip(yr.iter().zip(gr)) {
                            *o = (q - p * dot) / norms[r];
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::DotConst { x, weights } => {
                    accumulate(&mut grads, *x, weights.scale(g.get(0, 0)));
                }
            }
        }
        Grads { grads }
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, g: Mat<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g).expect("gradient shape"),
        slot @ None => *slot = Some(g),
    }
}

/// Gradients of one backward sweep, indexed by [`Var`].
pub struct Grads<T> {
    grads: Vec<Option<Mat<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Mat<T>> {
        self.grads[v.0].take()
    }
}
