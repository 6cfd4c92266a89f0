//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation as a node appended after its parents,
//! so node order is already a topological order and [`Graph::backward`] only
//! has to walk the tape from the loss towards the front. Parameters can be
//! bound by reference so recording a forward pass never copies weights.
//!
//! Values are `f32`. Reductions (sums, means, normalisation statistics)
//! accumulate in `f64`.

use std::borrow::Cow;

use thiserror::Error;

use crate::error::ShapeError;
use crate::tensor::Tensor;

const GELU_C: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_K: f32 = 0.044_715;

#[derive(Debug, Error)]
pub enum AutodiffError {
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),
    #[error("loss does not depend on any differentiable input")]
    NoGradient,
    #[error("internal: node {node} refers to parent {parent} recorded after it")]
    Cycle { node: usize, parent: usize },
}

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f32),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    Gelu(Var),
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
    NarrowCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    StopGradient(Var),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b) => vec![*a, *b],
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Softmax(a)
            | Op::Gelu(a)
            | Op::Reshape(a)
            | Op::GatherRows(a, _)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::MeanRows(a)
            | Op::StopGradient(a) => vec![*a],
            Op::NarrowCols { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => {
                let mut v = vec![*x];
                v.extend(gamma.iter().copied());
                v.extend(beta.iter().copied());
                v
            }
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
        }
    }
}

struct Node<'p> {
    shape: Vec<usize>,
    value: Cow<'p, [f32]>,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. The lifetime ties borrowed parameter leaves to
/// their owning storage.
#[derive(Default)]
pub struct Graph<'p> {
    nodes: Vec<Node<'p>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let c = shape.last().copied().unwrap_or(1);
    let n: usize = shape.iter().product();
    (if c == 0 { 0 } else { n / c }, c)
}

/// `c += a · b` with arbitrary strides; `a` is m×k, `b` is k×n, `c` is m×n row-major.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: usize,
    csa: usize,
    b: &[f32],
    rsb: usize,
    csb: usize,
    c: &mut [f32],
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    // SAFETY: the caller's slices cover every addressed element for the given
    // extents and strides; `c` is a distinct, row-major m×n buffer.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + GELU_K * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl<'p> Graph<'p> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f32>, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf | Op::StopGradient(_) => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node {
            shape,
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, shape: Vec<usize>, value: Cow<'p, [f32]>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf bound by reference (no copy).
    pub fn param(&mut self, t: &'p Tensor) -> Var {
        self.leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), true)
    }

    /// Non-differentiable leaf bound by reference.
    pub fn frozen(&mut self, t: &'p Tensor) -> Var {
        self.leaf(t.shape().to_vec(), Cow::Borrowed(t.data()), false)
    }

    /// Owned constant input.
    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), false)
    }

    /// Owned differentiable leaf.
    pub fn variable(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.leaf(shape, Cow::Owned(t.into_data()), true)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> f32 {
        self.nodes[v.0].value[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), ShapeError> {
        if self.shape(a) != self.shape(b) {
            return Err(ShapeError::Mismatch {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn matrix(&self, op: &'static str, a: Var) -> Result<(usize, usize), ShapeError> {
        match self.shape(a) {
            [r, c] => Ok((*r, *c)),
            other => Err(ShapeError::Mismatch {
                op,
                lhs: other.to_vec(),
                rhs: vec![],
            }),
        }
    }

    /// `[m,k] · [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(ShapeError::Mismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0f32; m * n];
        gemm_acc(m, k, n, self.value(a), k, 1, self.value(b), n, 1, &mut out);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (r, c) = self.matrix("transpose", a)?;
        let src = self.value(a);
        let mut out = vec![0.0f32; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(vec![c, r], out, Op::Transpose(a)))
    }

    /// Elementwise sum. `b` may also be a single row broadcast over the rows of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        if self.shape(a) == self.shape(b) {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(x, y)| x + y)
                .collect();
            return Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b)));
        }
        let (_, c) = rows_cols(self.shape(a));
        let bl = self.value(b).len();
        let row_like = matches!(self.shape(b), [n] | [1, n] if *n == c);
        if !row_like || bl != c {
            return Err(ShapeError::Mismatch {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let row = self.value(b);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|r| r.iter().zip(row).map(|(x, y)| x + y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRow(a, b)))
    }

    fn zip_map(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f32, f32) -> f32,
        op: Op,
    ) -> Result<Var, ShapeError> {
        self.same_shape(name, a, b)?;
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok(self.push(self.shape(a).to_vec(), out, op))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_map("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_map("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.zip_map("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let out = self.value(a).iter().map(|x| x * c).collect();
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (_, c) = rows_cols(self.shape(a));
        let mut out = self.value(a).to_vec();
        if c > 0 {
            for row in out.chunks_mut(c) {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0f64;
                for x in row.iter_mut() {
                    *x = (*x - max).exp();
                    sum += *x as f64;
                }
                let inv = (1.0 / sum) as f32;
                row.iter_mut().for_each(|x| *x *= inv);
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::Softmax(a))
    }

    /// Row-wise layer normalisation over the last axis, optionally affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Option<Var>,
        beta: Option<Var>,
        eps: f32,
    ) -> Result<Var, ShapeError> {
        let (r, c) = rows_cols(self.shape(x));
        for p in gamma.iter().chain(beta.iter()) {
            if self.value(*p).len() != c {
                return Err(ShapeError::Mismatch {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(*p).to_vec(),
                });
            }
        }
        let src = self.value(x);
        let mut xhat = vec![0.0f32; r * c];
        let mut rstd = vec![0.0f32; r];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[i] = rs as f32;
            for j in 0..c {
                xhat[i * c + j] = ((row[j] as f64 - mean) * rs) as f32;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gamma {
            let g = self.value(g);
            out.chunks_mut(c.max(1))
                .for_each(|row| row.iter_mut().zip(g).for_each(|(v, s)| *v *= s));
        }
        if let Some(b) = beta {
            let b = self.value(b);
            out.chunks_mut(c.max(1))
                .for_each(|row| row.iter_mut().zip(b).for_each(|(v, s)| *v += s));
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() {
            return Err(ShapeError::ElementCount {
                shape: shape.to_vec(),
                expected: n,
                actual: self.value(a).len(),
            });
        }
        let out = self.value(a).to_vec();
        Ok(self.push(shape.to_vec(), out, Op::Reshape(a)))
    }

    /// Select rows of a matrix by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, ShapeError> {
        let (r, c) = self.matrix("gather_rows", a)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(ShapeError::Index {
                op: "gather_rows",
                index: bad,
                extent: r,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        Ok(self.push(vec![idx.len(), c], out, Op::GatherRows(a, idx.to_vec())))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, ShapeError> {
        let (r, c) = self.matrix("narrow_cols", a)?;
        if start + len > c {
            return Err(ShapeError::Index {
                op: "narrow_cols",
                index: start + len,
                extent: c,
            });
        }
        let src = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        Ok(self.push(vec![r, len], out, Op::NarrowCols { x: a, start }))
    }

    /// Stack matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let c = match parts.first() {
            Some(&p) => self.matrix("concat_rows", p)?.1,
            None => {
                return Err(ShapeError::Mismatch {
                    op: "concat_rows",
                    lhs: vec![],
                    rhs: vec![],
                })
            }
        };
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix("concat_rows", p)?;
            if pc != c {
                return Err(ShapeError::Mismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            rows += r;
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push(vec![rows, c], out, Op::ConcatRows(parts.to_vec())))
    }

    /// Place matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, ShapeError> {
        let r = match parts.first() {
            Some(&p) => self.matrix("concat_cols", p)?.0,
            None => {
                return Err(ShapeError::Mismatch {
                    op: "concat_cols",
                    lhs: vec![],
                    rhs: vec![],
                })
            }
        };
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix("concat_cols", p)?;
            if pr != r {
                return Err(ShapeError::Mismatch {
                    op: "concat_cols",
                    lhs: vec![r],
                    rhs: vec![pr, pc],
                });
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        Ok(self.push(vec![r, total], out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>();
        self.push(vec![1], vec![s as f32], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().map(|&x| x as f64).sum::<f64>() / v.len().max(1) as f64;
        self.push(vec![1], vec![s as f32], Op::Mean(a))
    }

    /// Mean over rows: `[r,c] → [1,c]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, ShapeError> {
        let (r, c) = self.matrix("mean_rows", a)?;
        let src = self.value(a);
        let mut acc = vec![0.0f64; c];
        for row in src.chunks(c.max(1)) {
            acc.iter_mut().zip(row).for_each(|(s, &x)| *s += x as f64);
        }
        let out = acc.iter().map(|s| (s / r.max(1) as f64) as f32).collect();
        Ok(self.push(vec![1, c], out, Op::MeanRows(a)))
    }

    /// Forward identity that contributes no gradient to its input.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).to_vec();
        self.push(self.shape(a).to_vec(), out, Op::StopGradient(a))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, AutodiffError> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ln.shape.clone()));
        }
        if !ln.requires_grad {
            return Err(AutodiffError::NoGradient);
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for p in node.op.parents() {
                if p.0 >= i {
                    return Err(AutodiffError::Cycle { node: i, parent: p.0 });
                }
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.shape.clone()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn acc<'a>(&self, grads: &'a mut [Option<Vec<f32>>], p: Var) -> Option<&'a mut Vec<f32>> {
        if !self.nodes[p.0].requires_grad {
            return None;
        }
        let n = self.nodes[p.0].value.len();
        Some(grads[p.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::StopGradient(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[a.0].shape);
                let n = node.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dC · Bᵀ
                    gemm_acc(m, n, k, g, n, 1, self.value(*b), 1, n, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    // dB = Aᵀ · dC
                    gemm_acc(k, m, n, self.value(*a), 1, k, g, n, 1, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = rows_cols(&self.nodes[a.0].shape);
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for p in [a, b] {
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let c = self.nodes[b.0].value.len();
                if let Some(gb) = self.acc(grads, *b) {
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(s, &x)| *s += x as f64);
                    }
                    gb.iter_mut().zip(acc).for_each(|(x, s)| *x += s as f32);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for ((x, gy), y) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * y;
                    }
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), y) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy / y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (((x, gy), num), den) in gb.iter_mut().zip(g).zip(va).zip(vb) {
                        *x -= gy * num / (den * den);
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * c);
                }
            }
            Op::Softmax(a) => {
                let (_, c) = rows_cols(&node.shape);
                let y = &node.value;
                if let Some(ga) = self.acc(grads, *a) {
                    for ((gr, yr), gar) in g.chunks(c).zip(y.chunks(c)).zip(ga.chunks_mut(c)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(&a, &b)| (a * b) as f64).sum();
                        let dot = dot as f32;
                        for ((x, &gy), &yy) in gar.iter_mut().zip(gr).zip(yr) {
                            *x += yy * (gy - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (_, c) = rows_cols(&node.shape);
                let gam = gamma.map(|v| self.value(v));
                if let Some(gb) = beta.and_then(|b| self.acc(grads, b)) {
                    let mut acc = vec![0.0f64; c];
                    for row in g.chunks(c) {
                        acc.iter_mut().zip(row).for_each(|(s, &v)| *s += v as f64);
                    }
                    gb.iter_mut().zip(acc).for_each(|(v, s)| *v += s as f32);
                }
                if let Some(gg) = gamma.and_then(|gv| self.acc(grads, gv)) {
                    let mut acc = vec![0.0f64; c];
                    for (row, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ((s, &v), &xh) in acc.iter_mut().zip(row).zip(xr) {
                            *s += (v * xh) as f64;
                        }
                    }
                    gg.iter_mut().zip(acc).for_each(|(v, s)| *v += s as f32);
                }
                if let Some(gx) = self.acc(grads, *x) {
                    let mut dxhat = vec![0.0f32; c];
                    for (r, ((gr, xr), gxr)) in g
                        .chunks(c)
                        .zip(xhat.chunks(c))
                        .zip(gx.chunks_mut(c))
                        .enumerate()
                    {
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam.map_or(1.0, |gm| gm[j]);
                        }
                        let m1 = dxhat.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                        let m2 = dxhat
                            .iter()
                            .zip(xr)
                            .map(|(&d, &xh)| (d * xh) as f64)
                            .sum::<f64>()
                            / c as f64;
                        let rs = rstd[r];
                        for j in 0..c {
                            gxr[j] += rs * (dxhat[j] - m1 as f32 - xr[j] * m2 as f32);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let va = self.value(*a);
                if let Some(ga) = self.acc(grads, *a) {
                    for ((x, gy), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += gy * gelu_grad(v);
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::GatherRows(a, idx) => {
                let c = node.shape[1];
                if let Some(ga) = self.acc(grads, *a) {
                    for (k, &row) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[row * c + j] += g[k * c + j];
                        }
                    }
                }
            }
            Op::NarrowCols { x, start } => {
                let (r, len) = (node.shape[0], node.shape[1]);
                let c = self.nodes[x.0].shape[1];
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..r {
                        for j in 0..len {
                            gx[i * c + start + j] += g[i * len + j];
                        }
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.len();
                    if let Some(gp) = self.acc(grads, *p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::ConcatCols(parts) => {
                let r = node.shape[0];
                let total = node.shape[1];
                let mut off = 0;
                for p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if let Some(gp) = self.acc(grads, *p) {
                        for i in 0..r {
                            for j in 0..w {
                                gp[i * w + j] += g[i * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                let n = self.nodes[a.0].value.len().max(1) as f32;
                if let Some(ga) = self.acc(grads, *a) {
                    ga.iter_mut().for_each(|x| *x += g[0] / n);
                }
            }
            Op::MeanRows(a) => {
                let (r, c) = rows_cols(&self.nodes[a.0].shape);
                let inv = 1.0 / r.max(1) as f32;
                if let Some(ga) = self.acc(grads, *a) {
                    for row in ga.chunks_mut(c) {
                        row.iter_mut().zip(g).for_each(|(x, y)| *x += y * inv);
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; all zeros when `v` is not a
    /// differentiable ancestor of the loss.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Raw gradient buffer, `None` when nothing reached `v`.
    pub fn slice(&self, v: Var) -> Option<&[f32]> {
        self.grads[v.0].as_deref()
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads[v.0].take()
    }
}
