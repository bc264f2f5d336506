//! Tape-based reverse-mode differentiation.
//!
//! Forward ops append nodes to the tape; [`Tape::backward`] walks the
//! tape in reverse, propagating cotangents. Gradients accumulate: calling
//! `backward` twice without a fresh tape doubles them.

use super::params::ParamId;
use super::Tensor;
use crate::scalar::Scalar;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {details}")]
    ShapeMismatch { op: &'static str, details: String },
    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("head count {heads} does not divide feature dimension {dim}")]
    IndivisibleHeads { heads: usize, dim: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug)]
enum Op<S> {
    Const,
    Leaf { param: Option<ParamId> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, S),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Relu(Var),
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, eps: S },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize, len: usize },
    RowSelect { x: Var, row: usize },
    RepeatRow { x: Var, n: usize },
    MaxPoolRows { x: Var, argmax: Vec<usize> },
    MeanPoolRows(Var),
    Im2Col { x: Var, k: usize, stride: usize, pad: usize },
    SumAll(Var),
    SmoothL1Masked { pred: Var, target: Tensor<S>, mask: Vec<bool>, norm: S },
    CrossEntropyLogits { logits: Var, target: usize },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Tensor<S>>,
    op: Op<S>,
}

pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.nodes[v.0].grad.as_ref()
    }

    /// Record a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<S>) -> Var {
        self.push(t, Op::Const)
    }

    /// Record a differentiable leaf, optionally tied to a parameter slot.
    pub fn leaf(&mut self, t: Tensor<S>, param: Option<ParamId>) -> Var {
        self.push(t, Op::Leaf { param })
    }

    pub fn zeros(&mut self, shape: &[usize]) -> Var {
        self.constant(Tensor::zeros(shape))
    }

    fn same_shape(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
    ) -> Result<(), TensorError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                details: format!("{sa:?} vs {sb:?}"),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("add", a, b)?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o + *x;
        }
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("sub", a, b)?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o - *x;
        }
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.same_shape("mul", a, b)?;
        let mut out = self.value(a).clone();
        for (o, x) in out.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
            *o = *o * *x;
        }
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = -*o;
        }
        self.push(out, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, s: S) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            *o = *o * s;
        }
        self.push(out, Op::Scale(a, s))
    }

    /// Broadcast-add a (1, c) row to every row of a (r, c) matrix.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (r, c) = (self.value(a).rows(), self.value(a).cols());
        if self.value(b).shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "add_row",
                details: format!(
                    "matrix {:?} + row {:?}",
                    self.value(a).shape(),
                    self.value(b).shape()
                ),
            });
        }
        let mut out = self.value(a).clone();
        for i in 0..r {
            for j in 0..c {
                let v = out.at(i, j) + self.nodes[b.0].value.at(0, j);
                out.set(i, j, v);
            }
        }
        Ok(self.push(out, Op::AddRow(a, b)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ar, ac) = (self.value(a).rows(), self.value(a).cols());
        let (br, bc) = (self.value(b).rows(), self.value(b).cols());
        if ac != br {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                details: format!("({ar}, {ac}) x ({br}, {bc})"),
            });
        }
        let out = matmul_values(self.value(a), self.value(b));
        Ok(self.push(out, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let (r, c) = (x.rows(), x.cols());
        let mut out = Tensor::zeros(&[c, r]);
        for i in 0..r {
            for j in 0..c {
                out.set(j, i, x.at(i, j));
            }
        }
        self.push(out, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for o in out.data_mut() {
            if *o < S::zero() {
                *o = S::zero();
            }
        }
        self.push(out, Op::Relu(a))
    }

    /// Numerically stable softmax along `axis` (0 = down columns,
    /// 1 = along rows) of a rank-2 tensor.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        if axis > 1 {
            return Err(TensorError::Invalid(format!("softmax axis {axis}")));
        }
        let out = softmax_values(self.value(a), axis);
        Ok(self.push(out, Op::Softmax { x: a, axis }))
    }

    /// Per-row layer normalization followed by the gamma/beta affine map.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: S,
    ) -> Result<Var, TensorError> {
        let c = self.value(x).cols();
        if self.value(gamma).shape() != [1, c] || self.value(beta).shape() != [1, c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                details: format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    self.value(x).shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            });
        }
        let out = layer_norm_values(self.value(x), self.value(gamma), self.value(beta), eps);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, eps }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_cols of nothing".into()));
        }
        let r = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != r {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    details: "row counts differ".into(),
                });
            }
            total += self.value(p).cols();
        }
        let mut out = Tensor::zeros(&[r, total]);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            for i in 0..r {
                for j in 0..x.cols() {
                    out.set(i, off + j, x.at(i, j));
                }
            }
            off += x.cols();
        }
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::Invalid("concat_rows of nothing".into()));
        }
        let c = self.value(parts[0]).cols();
        let mut total = 0;
        for &p in parts {
            if self.value(p).cols() != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    details: "column counts differ".into(),
                });
            }
            total += self.value(p).rows();
        }
        let mut out = Tensor::zeros(&[total, c]);
        let mut off = 0;
        for &p in parts {
            let x = self.value(p);
            for i in 0..x.rows() {
                for j in 0..c {
                    out.set(off + i, j, x.at(i, j));
                }
            }
            off += x.rows();
        }
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if start + len > c {
            return Err(TensorError::ShapeMismatch {
                op: "slice_cols",
                details: format!("[{start}, {}) of {c} cols", start + len),
            });
        }
        let mut out = Tensor::zeros(&[r, len]);
        for i in 0..r {
            for j in 0..len {
                out.set(i, j, self.value(x).at(i, start + j));
            }
        }
        Ok(self.push(out, Op::SliceCols { x, start, len }))
    }

    /// Select one row as a (1, c) tensor (also the embedding lookup).
    pub fn row_select(&mut self, x: Var, row: usize) -> Result<Var, TensorError> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if row >= r {
            return Err(TensorError::Invalid(format!("row {row} of {r}")));
        }
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            out.set(0, j, self.value(x).at(row, j));
        }
        Ok(self.push(out, Op::RowSelect { x, row }))
    }

    /// Tile a (1, c) row into an (n, c) matrix.
    pub fn repeat_row(&mut self, x: Var, n: usize) -> Result<Var, TensorError> {
        if self.value(x).rows() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "repeat_row",
                details: format!("{:?}", self.value(x).shape()),
            });
        }
        let c = self.value(x).cols();
        let mut out = Tensor::zeros(&[n, c]);
        for i in 0..n {
            for j in 0..c {
                out.set(i, j, self.value(x).at(0, j));
            }
        }
        Ok(self.push(out, Op::RepeatRow { x, n }))
    }

    /// Column-wise max over rows: (r, c) -> (1, c). Ties pick the lowest
    /// row so duplicated points cannot change the result.
    pub fn max_pool_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if r == 0 {
            return Err(TensorError::Invalid("max_pool_rows of empty input".into()));
        }
        let mut out = Tensor::zeros(&[1, c]);
        let mut argmax = vec![0usize; c];
        for j in 0..c {
            let mut best = self.value(x).at(0, j);
            for i in 1..r {
                let v = self.value(x).at(i, j);
                if v > best {
                    best = v;
                    argmax[j] = i;
                }
            }
            out.set(0, j, best);
        }
        Ok(self.push(out, Op::MaxPoolRows { x, argmax }))
    }

    /// Column-wise mean over rows: (r, c) -> (1, c).
    pub fn mean_pool_rows(&mut self, x: Var) -> Result<Var, TensorError> {
        let (r, c) = (self.value(x).rows(), self.value(x).cols());
        if r == 0 {
            return Err(TensorError::Invalid("mean_pool_rows of empty input".into()));
        }
        let inv = S::from_f64(1.0 / r as f64);
        let mut out = Tensor::zeros(&[1, c]);
        for j in 0..c {
            let mut s = S::zero();
            for i in 0..r {
                s = s + self.value(x).at(i, j);
            }
            out.set(0, j, s * inv);
        }
        Ok(self.push(out, Op::MeanPoolRows(x)))
    }

    /// Unfold a (length, channels) sequence into convolution windows:
    /// output row t holds the k x channels window starting at
    /// t*stride - pad, zero-padded at the borders.
    pub fn im2col(
        &mut self,
        x: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let (l, c) = (self.value(x).rows(), self.value(x).cols());
        if k == 0 || stride == 0 || l + 2 * pad < k {
            return Err(TensorError::Invalid(format!(
                "im2col k={k} stride={stride} pad={pad} over length {l}"
            )));
        }
        let l_out = (l + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros(&[l_out, k * c]);
        for t in 0..l_out {
            for j in 0..k {
                let src = t as isize * stride as isize + j as isize - pad as isize;
                if src < 0 || src >= l as isize {
                    continue;
                }
                for ch in 0..c {
                    out.set(t, j * c + ch, self.value(x).at(src as usize, ch));
                }
            }
        }
        Ok(self.push(out, Op::Im2Col { x, k, stride, pad }))
    }

    /// 1D convolution over a (length, in_channels) sequence with weights
    /// (k * in_channels, out_channels) and bias (1, out_channels).
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Result<Var, TensorError> {
        let cols = self.value(x).cols();
        if self.value(w).rows() != k * cols {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                details: format!(
                    "weights {:?} vs window {} x {}",
                    self.value(w).shape(),
                    k,
                    cols
                ),
            });
        }
        let windows = self.im2col(x, k, stride, pad)?;
        let y = self.matmul(windows, w)?;
        self.add_row(y, b)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: S = self.value(x).data().iter().copied().fold(S::zero(), |a, b| a + b);
        self.push(Tensor::scalar(s), Op::SumAll(x))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum_all(x);
        self.scale(s, S::from_f64(1.0 / n as f64))
    }

    /// Masked smooth-L1 trajectory loss. `pred` and `target` are
    /// (1, 2T) rows laid out (x_0, y_0, x_1, y_1, ...); masked steps are
    /// excluded from both the sum and the normalizer (norm is
    /// 1 / (2 * valid_steps)).
    pub fn smooth_l1_masked(
        &mut self,
        pred: Var,
        target: Tensor<S>,
        mask: Vec<bool>,
    ) -> Result<Var, TensorError> {
        let p = self.value(pred);
        if p.rows() != 1 || p.cols() != target.cols() || p.cols() != 2 * mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "smooth_l1_masked",
                details: format!(
                    "pred {:?}, target {:?}, mask {}",
                    p.shape(),
                    target.shape(),
                    mask.len()
                ),
            });
        }
        let valid = mask.iter().filter(|&&m| m).count();
        if valid == 0 {
            return Err(TensorError::Invalid(
                "smooth_l1_masked needs at least one unmasked step".into(),
            ));
        }
        let norm = S::from_f64(1.0 / (2.0 * valid as f64));
        let mut acc = S::zero();
        for (t, &m) in mask.iter().enumerate() {
            if !m {
                continue;
            }
            for j in 0..2 {
                let d = p.at(0, 2 * t + j) - target.at(0, 2 * t + j);
                acc = acc + smooth_l1_scalar(d);
            }
        }
        let value = Tensor::scalar(acc * norm);
        Ok(self.push(value, Op::SmoothL1Masked { pred, target, mask, norm }))
    }

    /// Cross-entropy of a (1, K) logit row against a target index, with
    /// log-sum-exp stabilization.
    pub fn cross_entropy_logits(&mut self, logits: Var, target: usize) -> Result<Var, TensorError> {
        let l = self.value(logits);
        if l.rows() != 1 || target >= l.cols() {
            return Err(TensorError::Invalid(format!(
                "cross_entropy_logits: logits {:?}, target {target}",
                l.shape()
            )));
        }
        let max = l.data().iter().copied().fold(S::neg_infinity(), S::max);
        let lse = max
            + l.data()
                .iter()
                .map(|&v| (v - max).exp())
                .fold(S::zero(), |a, b| a + b)
                .ln();
        let value = Tensor::scalar(lse - l.at(0, target));
        Ok(self.push(value, Op::CrossEntropyLogits { logits, target }))
    }

    /// Propagate d(loss)/d(node) for every node reachable from `loss`,
    /// then add the result into stored gradients. Calling twice without a
    /// fresh tape therefore doubles every gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), TensorError> {
        if !self.value(loss).is_scalar_shaped() {
            return Err(TensorError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut cot: Vec<Option<Tensor<S>>> = vec![None; self.nodes.len()];
        cot[loss.0] = Some(Tensor::scalar(S::one()));
        let add_grad = |cot: &mut Vec<Option<Tensor<S>>>, v: Var, g: Tensor<S>| {
            match cot[v.0].as_mut() {
                Some(existing) => existing.accumulate(&g),
                None => cot[v.0] = Some(g),
            }
        };
        for i in (0..=loss.0).rev() {
            let Some(g) = cot[i].clone() else {
                continue;
            };
            match &self.nodes[i].op {
                Op::Const | Op::Leaf { .. } => {}
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    add_grad(&mut cot, a, g.clone());
                    add_grad(&mut cot, b, g);
                }
                Op::Sub(a, b) => {
                    let (a, b) = (*a, *b);
                    add_grad(&mut cot, a, g.clone());
                    let mut ng = g;
                    ng.scale_in_place(-S::one());
                    add_grad(&mut cot, b, ng);
                }
                Op::Mul(a, b) => {
                    let (a, b) = (*a, *b);
                    let mut ga = g.clone();
                    for (x, y) in ga.data_mut().iter_mut().zip(self.nodes[b.0].value.data()) {
                        *x = *x * *y;
                    }
                    let mut gb = g;
                    for (x, y) in gb.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        *x = *x * *y;
                    }
                    add_grad(&mut cot, a, ga);
                    add_grad(&mut cot, b, gb);
                }
                Op::Neg(a) => {
                    let a = *a;
                    let mut ng = g;
                    ng.scale_in_place(-S::one());
                    add_grad(&mut cot, a, ng);
                }
                Op::Scale(a, s) => {
                    let (a, s) = (*a, *s);
                    let mut ga = g;
                    ga.scale_in_place(s);
                    add_grad(&mut cot, a, ga);
                }
                Op::AddRow(a, b) => {
                    let (a, b) = (*a, *b);
                    let (r, c) = (g.rows(), g.cols());
                    let mut gb = Tensor::zeros(&[1, c]);
                    for j in 0..c {
                        let mut s = S::zero();
                        for i in 0..r {
                            s = s + g.at(i, j);
                        }
                        gb.set(0, j, s);
                    }
                    add_grad(&mut cot, a, g);
                    add_grad(&mut cot, b, gb);
                }
                Op::Matmul(a, b) => {
                    let (a, b) = (*a, *b);
                    let ga = matmul_nt(&g, &self.nodes[b.0].value);
                    let gb = matmul_tn(&self.nodes[a.0].value, &g);
                    add_grad(&mut cot, a, ga);
                    add_grad(&mut cot, b, gb);
                }
                Op::Transpose(a) => {
                    let a = *a;
                    let (r, c) = (g.rows(), g.cols());
                    let mut ga = Tensor::zeros(&[c, r]);
                    for i in 0..r {
                        for j in 0..c {
                            ga.set(j, i, g.at(i, j));
                        }
                    }
                    add_grad(&mut cot, a, ga);
                }
                Op::Relu(a) => {
                    let a = *a;
                    let mut ga = g;
                    for (x, v) in ga.data_mut().iter_mut().zip(self.nodes[a.0].value.data()) {
                        if *v <= S::zero() {
                            *x = S::zero();
                        }
                    }
                    add_grad(&mut cot, a, ga);
                }
                Op::Softmax { x, axis } => {
                    let (x, axis) = (*x, *axis);
                    let y = self.nodes[i].value.clone();
                    let (r, c) = (y.rows(), y.cols());
                    let mut gx = Tensor::zeros(&[r, c]);
                    if axis == 1 {
                        for row in 0..r {
                            let mut dot = S::zero();
                            for j in 0..c {
                                dot = dot + g.at(row, j) * y.at(row, j);
                            }
                            for j in 0..c {
                                gx.set(row, j, y.at(row, j) * (g.at(row, j) - dot));
                            }
                        }
                    } else {
                        for col in 0..c {
                            let mut dot = S::zero();
                            for j in 0..r {
                                dot = dot + g.at(j, col) * y.at(j, col);
                            }
                            for j in 0..r {
                                gx.set(j, col, y.at(j, col) * (g.at(j, col) - dot));
                            }
                        }
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xv = self.nodes[x.0].value.clone();
                    let gv = self.nodes[gamma.0].value.clone();
                    let (r, c) = (xv.rows(), xv.cols());
                    let inv_c = S::from_f64(1.0 / c as f64);
                    let mut gx = Tensor::zeros(&[r, c]);
                    let mut ggamma = Tensor::zeros(&[1, c]);
                    let mut gbeta = Tensor::zeros(&[1, c]);
                    for row in 0..r {
                        let mut mean = S::zero();
                        for j in 0..c {
                            mean = mean + xv.at(row, j);
                        }
                        mean = mean * inv_c;
                        let mut var = S::zero();
                        for j in 0..c {
                            let d = xv.at(row, j) - mean;
                            var = var + d * d;
                        }
                        var = var * inv_c;
                        let inv_std = S::one() / (var + eps).sqrt();
                        let mut mean_h = S::zero();
                        let mut mean_hx = S::zero();
                        for j in 0..c {
                            let xh = (xv.at(row, j) - mean) * inv_std;
                            let h = g.at(row, j) * gv.at(0, j);
                            mean_h = mean_h + h;
                            mean_hx = mean_hx + h * xh;
                            ggamma.set(0, j, ggamma.at(0, j) + g.at(row, j) * xh);
                            gbeta.set(0, j, gbeta.at(0, j) + g.at(row, j));
                        }
                        mean_h = mean_h * inv_c;
                        mean_hx = mean_hx * inv_c;
                        for j in 0..c {
                            let xh = (xv.at(row, j) - mean) * inv_std;
                            let h = g.at(row, j) * gv.at(0, j);
                            gx.set(row, j, inv_std * (h - mean_h - xh * mean_hx));
                        }
                    }
                    add_grad(&mut cot, x, gx);
                    add_grad(&mut cot, gamma, ggamma);
                    add_grad(&mut cot, beta, gbeta);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let r = g.rows();
                    let mut off = 0;
                    for p in parts {
                        let w = self.nodes[p.0].value.cols();
                        let mut gp = Tensor::zeros(&[r, w]);
                        for i in 0..r {
                            for j in 0..w {
                                gp.set(i, j, g.at(i, off + j));
                            }
                        }
                        add_grad(&mut cot, p, gp);
                        off += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let parts = parts.clone();
                    let c = g.cols();
                    let mut off = 0;
                    for p in parts {
                        let h = self.nodes[p.0].value.rows();
                        let mut gp = Tensor::zeros(&[h, c]);
                        for i in 0..h {
                            for j in 0..c {
                                gp.set(i, j, g.at(off + i, j));
                            }
                        }
                        add_grad(&mut cot, p, gp);
                        off += h;
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let (r, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..len {
                            gx.set(i, start + j, g.at(i, j));
                        }
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::RowSelect { x, row } => {
                    let (x, row) = (*x, *row);
                    let (r, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let mut gx = Tensor::zeros(&[r, c]);
                    for j in 0..c {
                        gx.set(row, j, g.at(0, j));
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::RepeatRow { x, n } => {
                    let (x, n) = (*x, *n);
                    let c = g.cols();
                    let mut gx = Tensor::zeros(&[1, c]);
                    for i in 0..n {
                        for j in 0..c {
                            gx.set(0, j, gx.at(0, j) + g.at(i, j));
                        }
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::MaxPoolRows { x, argmax } => {
                    let (x, argmax) = (*x, argmax.clone());
                    let (r, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let mut gx = Tensor::zeros(&[r, c]);
                    for (j, &row) in argmax.iter().enumerate() {
                        gx.set(row, j, g.at(0, j));
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::MeanPoolRows(x) => {
                    let x = *x;
                    let (r, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let inv = S::from_f64(1.0 / r as f64);
                    let mut gx = Tensor::zeros(&[r, c]);
                    for i in 0..r {
                        for j in 0..c {
                            gx.set(i, j, g.at(0, j) * inv);
                        }
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::Im2Col { x, k, stride, pad } => {
                    let (x, k, stride, pad) = (*x, *k, *stride, *pad);
                    let (l, c) = (
                        self.nodes[x.0].value.rows(),
                        self.nodes[x.0].value.cols(),
                    );
                    let l_out = g.rows();
                    let mut gx = Tensor::zeros(&[l, c]);
                    for t in 0..l_out {
                        for j in 0..k {
                            let src = t as isize * stride as isize + j as isize - pad as isize;
                            if src < 0 || src >= l as isize {
                                continue;
                            }
                            for ch in 0..c {
                                let v = gx.at(src as usize, ch) + g.at(t, j * c + ch);
                                gx.set(src as usize, ch, v);
                            }
                        }
                    }
                    add_grad(&mut cot, x, gx);
                }
                Op::SumAll(x) => {
                    let x = *x;
                    let s = g.scalar_value();
                    let gx = Tensor::filled(self.nodes[x.0].value.shape(), s);
                    add_grad(&mut cot, x, gx);
                }
                Op::SmoothL1Masked { pred, target, mask, norm } => {
                    let (pred, target, mask, norm) = (*pred, target.clone(), mask.clone(), *norm);
                    let scale = g.scalar_value() * norm;
                    let p = self.nodes[pred.0].value.clone();
                    let mut gp = Tensor::zeros(p.shape());
                    for (t, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        for j in 0..2 {
                            let d = p.at(0, 2 * t + j) - target.at(0, 2 * t + j);
                            gp.set(0, 2 * t + j, scale * smooth_l1_grad(d));
                        }
                    }
                    add_grad(&mut cot, pred, gp);
                }
                Op::CrossEntropyLogits { logits, target } => {
                    let (logits, target) = (*logits, *target);
                    let l = self.nodes[logits.0].value.clone();
                    let scale = g.scalar_value();
                    let probs = softmax_values(&l, 1);
                    let mut gl = Tensor::zeros(l.shape());
                    for j in 0..l.cols() {
                        let indicator = if j == target { S::one() } else { S::zero() };
                        gl.set(0, j, scale * (probs.at(0, j) - indicator));
                    }
                    add_grad(&mut cot, logits, gl);
                }
            }
        }
        for (node, c) in self.nodes.iter_mut().zip(cot.into_iter()) {
            if let Some(c) = c {
                match node.grad.as_mut() {
                    Some(g) => g.accumulate(&c),
                    None => node.grad = Some(c),
                }
            }
        }
        Ok(())
    }

    /// Accumulate parameter-leaf gradients into a [`super::GradTable`].
    pub fn grads_into(&self, grads: &mut super::GradTable<S>) {
        for node in &self.nodes {
            if let Op::Leaf { param: Some(id) } = node.op {
                if let Some(g) = &node.grad {
                    grads.accumulate(id, g);
                }
            }
        }
    }
}

fn smooth_l1_scalar<S: Scalar>(d: S) -> S {
    let a = d.abs();
    if a < S::one() {
        S::from_f64(0.5) * d * d
    } else {
        a - S::from_f64(0.5)
    }
}

fn smooth_l1_grad<S: Scalar>(d: S) -> S {
    if d.abs() < S::one() {
        d
    } else if d > S::zero() {
        S::one()
    } else {
        -S::one()
    }
}

pub(crate) fn matmul_values<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (ar, ac, bc) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[ar, bc]);
    for i in 0..ar {
        for k in 0..ac {
            let av = a.at(i, k);
            if av == S::zero() {
                continue;
            }
            for j in 0..bc {
                let v = out.at(i, j) + av * b.at(k, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

/// a * b^T
fn matmul_nt<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (ar, ac, br) = (a.rows(), a.cols(), b.rows());
    let mut out = Tensor::zeros(&[ar, br]);
    for i in 0..ar {
        for j in 0..br {
            let mut s = S::zero();
            for k in 0..ac {
                s = s + a.at(i, k) * b.at(j, k);
            }
            out.set(i, j, s);
        }
    }
    out
}

/// a^T * b
fn matmul_tn<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Tensor<S> {
    let (ar, ac, bc) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(&[ac, bc]);
    for k in 0..ar {
        for i in 0..ac {
            let av = a.at(k, i);
            if av == S::zero() {
                continue;
            }
            for j in 0..bc {
                let v = out.at(i, j) + av * b.at(k, j);
                out.set(i, j, v);
            }
        }
    }
    out
}

pub(crate) fn softmax_values<S: Scalar>(x: &Tensor<S>, axis: usize) -> Tensor<S> {
    let (r, c) = (x.rows(), x.cols());
    let mut out = Tensor::zeros(&[r, c]);
    if axis == 1 {
        for i in 0..r {
            let mut max = S::neg_infinity();
            for j in 0..c {
                max = max.max(x.at(i, j));
            }
            let mut sum = S::zero();
            for j in 0..c {
                let e = (x.at(i, j) - max).exp();
                out.set(i, j, e);
                sum = sum + e;
            }
            for j in 0..c {
                out.set(i, j, out.at(i, j) / sum);
            }
        }
    } else {
        for j in 0..c {
            let mut max = S::neg_infinity();
            for i in 0..r {
                max = max.max(x.at(i, j));
            }
            let mut sum = S::zero();
            for i in 0..r {
                let e = (x.at(i, j) - max).exp();
                out.set(i, j, e);
                sum = sum + e;
            }
            for i in 0..r {
                out.set(i, j, out.at(i, j) / sum);
            }
        }
    }
    out
}

fn layer_norm_values<S: Scalar>(
    x: &Tensor<S>,
    gamma: &Tensor<S>,
    beta: &Tensor<S>,
    eps: S,
) -> Tensor<S> {
    let (r, c) = (x.rows(), x.cols());
    let inv_c = S::from_f64(1.0 / c as f64);
    let mut out = Tensor::zeros(&[r, c]);
    for i in 0..r {
        let mut mean = S::zero();
        for j in 0..c {
            mean = mean + x.at(i, j);
        }
        mean = mean * inv_c;
        let mut var = S::zero();
        for j in 0..c {
            let d = x.at(i, j) - mean;
            var = var + d * d;
        }
        var = var * inv_c;
        let inv_std = S::one() / (var + eps).sqrt();
        for j in 0..c {
            let xh = (x.at(i, j) - mean) * inv_std;
            out.set(i, j, gamma.at(0, j) * xh + beta.at(0, j));
        }
    }
    out
}
