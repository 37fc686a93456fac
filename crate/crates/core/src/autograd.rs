//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a tape: every op appends a node holding its forward value
//! and what its backward rule needs. Node order is a topological order, so
//! [`Graph::backward`] walks the tape once in reverse. Graphs are built fresh
//! for every step and dropped afterwards.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index value meaning "write zero" in a gather.
pub const GATHER_ZERO: usize = usize::MAX;

/// Rectangular boolean mask where `true` blocks a query/key pair.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BlockMask {
    rows: usize,
    cols: usize,
    blocked: Vec<bool>,
}

impl BlockMask {
    pub fn open(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            blocked: vec![false; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_blocked(&self, row: usize, col: usize) -> bool {
        self.blocked[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, blocked: bool) {
        self.blocked[row * self.cols + col] = blocked;
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|&&b| b).count()
    }

    /// Copies the sub-block `rows × cols`.
    pub fn sub(&self, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Self {
        let mut out = Self::open(rows.len(), cols.len());
        for (oi, i) in rows.clone().enumerate() {
            for (oj, j) in cols.clone().enumerate() {
                out.set(oi, oj, self.is_blocked(i, j));
            }
        }
        out
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Reshape(Var),
    Gather {
        src: Var,
        index: Arc<Vec<usize>>,
    },
    Concat(Vec<Var>),
    SliceRows {
        src: Var,
        start: usize,
    },
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    Sum(Var),
    Mean(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Mse {
        pred: Var,
        target: Vec<f64>,
    },
    L2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `c = beta * c + a · b` for row-major-with-strides operands.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: strides describe in-bounds accesses for the given extents; callers
    // pass buffers of exactly m*k, k*n and m*n elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn is_suffix(shape: &[usize], suffix: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            0.0,
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), rg))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sa, sb) {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        self.broadcast_check(op, a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let n = bv.len();
        let data = av
            .data()
            .chunks(n)
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        Ok(Tensor::from_parts(av.shape().to_vec(), data))
    }

    /// Elementwise sum; `b` may broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let av = self.value(a);
        let t = Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().map(|&x| f(x)).collect(),
        );
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Gelu(a), gelu_fwd)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// `out[i] = src[index[i]]`, or zero where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, src: Var, index: Arc<Vec<usize>>, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        let sv = self.value(src).data();
        if n != index.len() || index.iter().any(|&i| i != GATHER_ZERO && i >= sv.len()) {
            return Err(Error::ShapeMismatch {
                op: "gather",
                lhs: self.shape(src).to_vec(),
                rhs: shape,
            });
        }
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { sv[i] })
            .collect();
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Gather { src, index },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "transpose",
                shape: s,
            });
        }
        let (r, c) = (s[0], s[1]);
        let mut index = Vec::with_capacity(r * c);
        for j in 0..c {
            for i in 0..r {
                index.push(i * c + j);
            }
        }
        self.gather(a, Arc::new(index), vec![c, r])
    }

    /// Concatenates along axis 0.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        let mut rg = false;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: self.shape(first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.value(p).data());
            rg |= self.rg(p);
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat(parts.to_vec()),
            rg,
        ))
    }

    /// Rows `start..end` along axis 0.
    pub fn slice_rows(&mut self, src: Var, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(src).to_vec();
        if start >= end || end > s[0] {
            return Err(Error::ShapeMismatch {
                op: "slice",
                lhs: s,
                rhs: vec![start, end],
            });
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(src).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let rg = self.rg(src);
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::SliceRows { src, start },
            rg,
        ))
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta`.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let d = self.value(x).cols();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x);
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = xv.shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let d = av.cols();
        if d == 0 {
            return Err(Error::EmptyAxis("softmax"));
        }
        let mut out = av.data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let t = Tensor::from_parts(av.shape().to_vec(), out);
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Multi-head scaled dot-product attention over pre-projected `q`, `k`,
    /// `v`. Blocked pairs are skipped entirely, so a blocked key has no effect
    /// on the corresponding query row, bit for bit. A query row with every key
    /// blocked outputs zeros.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: Option<&BlockMask>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2
            || sk.len() != 2
            || sk != sv
            || sq[1] != sk[1]
            || heads == 0
            || sq[1] % heads != 0
        {
            return Err(Error::ShapeMismatch {
                op: "attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if let Some(m) = mask {
            if m.rows() != nq || m.cols() != nk {
                return Err(Error::ShapeMismatch {
                    op: "attention mask",
                    lhs: vec![nq, nk],
                    rhs: vec![m.rows(), m.cols()],
                });
            }
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![0.0; heads * nq * nk];
        let mut out = vec![0.0; nq * d];
        let mut scores = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let qi = &qd[i * d + off..i * d + off + dh];
                let mut max = f64::NEG_INFINITY;
                for j in 0..nk {
                    if mask.is_some_and(|m| m.is_blocked(i, j)) {
                        continue;
                    }
                    let kj = &kd[j * d + off..j * d + off + dh];
                    let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    scores[j] = s;
                    max = max.max(s);
                }
                if max == f64::NEG_INFINITY {
                    continue;
                }
                let p = &mut probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let mut total = 0.0;
                for j in 0..nk {
                    if mask.is_some_and(|m| m.is_blocked(i, j)) {
                        continue;
                    }
                    let e = (scores[j] - max).exp();
                    p[j] = e;
                    total += e;
                }
                let o = &mut out[i * d + off..i * d + off + dh];
                for j in 0..nk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    p[j] /= total;
                    let vj = &vd[j * d + off..j * d + off + dh];
                    for (ov, vv) in o.iter_mut().zip(vj) {
                        *ov += p[j] * vv;
                    }
                }
            }
        }
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            Tensor::from_parts(vec![nq, d], out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    /// Weighted softmax cross-entropy: `Σ_i w_i · −log softmax(logits_i)[t_i]`.
    /// Rows with zero weight are ignored.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<Var> {
        let lv = self.value(logits);
        if lv.rank() != 2 || targets.len() != lv.rows() || weights.len() != lv.rows() {
            return Err(Error::ShapeMismatch {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let c = lv.cols();
        if targets.iter().any(|&t| t >= c) {
            return Err(Error::invalid("cross_entropy target class out of range"));
        }
        let mut probs = lv.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            let logit_t = lv.data()[r * c + targets[r]];
            if weights[r] != 0.0 {
                loss += weights[r] * (m + s.ln() - logit_t);
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[f64]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.len() != target.len() {
            return Err(Error::ShapeMismatch {
                op: "mse",
                lhs: pv.shape().to_vec(),
                rhs: vec![target.len()],
            });
        }
        let n = pv.len() as f64;
        let s = pv
            .data()
            .iter()
            .zip(target)
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            rg,
        ))
    }

    /// Scales every row of the last axis to unit L2 norm.
    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = xv.data().to_vec();
        let mut norms = Vec::with_capacity(xv.rows());
        for row in out.chunks_mut(d) {
            let n = (row.iter().map(|v| v * v).sum::<f64>() + 1e-24).sqrt();
            norms.push(n);
            row.iter_mut().for_each(|v| *v /= n);
        }
        let t = Tensor::from_parts(xv.shape().to_vec(), out);
        let rg = self.rg(x);
        self.push(t, Op::L2Normalize { x, norms }, rg)
    }

    /// Runs the reverse sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::InvalidShape {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        for n in &mut self.nodes {
            n.grad = None;
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop(idx, &op, &g);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(g);
        }
        Ok(())
    }

    fn grad_slot(&mut self, v: Var) -> Option<&mut Vec<f64>> {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let len = node.value.len();
        Some(accumulate(&mut node.grad, len))
    }

    fn backprop(&mut self, idx: usize, op: &Op, g: &[f64]) {
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let ga = self.grad_slot(*a).unwrap();
                    gemm(m, n, k, g, (n as isize, 1), &bd, (1, n as isize), 1.0, ga);
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = self.grad_slot(*b).unwrap();
                    gemm(k, m, n, &ad, (1, k as isize), g, (n as isize, 1), 1.0, gb);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.grad_slot(*b) {
                    let n = gb.len();
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(x, y)| *x += sign * y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let n = self.value(*b).len();
                if self.rg(*a) {
                    let bd = self.value(*b).data().to_vec();
                    let ga = self.grad_slot(*a).unwrap();
                    for (i, x) in ga.iter_mut().enumerate() {
                        *x += g[i] * bd[i % n];
                    }
                }
                if self.rg(*b) {
                    let ad = self.value(*a).data().to_vec();
                    let gb = self.grad_slot(*b).unwrap();
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % n] += gi * ad[i];
                    }
                }
            }
            Op::Scale(a, s) => {
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y);
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
            }
            Op::Gather { src, index } => {
                if let Some(gs) = self.grad_slot(*src) {
                    for (&i, &gi) in index.iter().zip(g) {
                        if i != GATHER_ZERO {
                            gs[i] += gi;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.grad_slot(p) {
                        gp.iter_mut()
                            .zip(&g[off..off + n])
                            .for_each(|(x, y)| *x += y);
                    }
                    off += n;
                }
            }
            Op::SliceRows { src, start } => {
                let inner: usize = self.shape(*src)[1..].iter().product();
                if let Some(gs) = self.grad_slot(*src) {
                    let off = start * inner;
                    gs[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, y)| *x += y);
                }
            }
            Op::Relu(a) | Op::Gelu(a) | Op::Sigmoid(a) | Op::Softplus(a) => {
                if !self.rg(*a) {
                    return;
                }
                let local: Vec<f64> = match op {
                    Op::Relu(_) => self
                        .value(*a)
                        .data()
                        .iter()
                        .map(|&x| if x > 0.0 { 1.0 } else { 0.0 })
                        .collect(),
                    Op::Gelu(_) => self
                        .value(*a)
                        .data()
                        .iter()
                        .map(|&x| gelu_grad(x))
                        .collect(),
                    Op::Sigmoid(_) => self.nodes[idx]
                        .value
                        .data()
                        .iter()
                        .map(|&y| y * (1.0 - y))
                        .collect(),
                    _ => self.value(*a).data().iter().map(|&x| sigmoid(x)).collect(),
                };
                let ga = self.grad_slot(*a).unwrap();
                for ((x, y), l) in ga.iter_mut().zip(g).zip(local) {
                    *x += y * l;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*x).cols();
                let gv = self.value(*gamma).data().to_vec();
                if let Some(gg) = self.grad_slot(*gamma) {
                    for (i, (&gi, &h)) in g.iter().zip(xhat).enumerate() {
                        gg[i % d] += gi * h;
                    }
                }
                if let Some(gb) = self.grad_slot(*beta) {
                    for (i, &gi) in g.iter().enumerate() {
                        gb[i % d] += gi;
                    }
                }
                if let Some(gx) = self.grad_slot(*x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                            m1 += dxhat[j];
                            m2 += dxhat[j] * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            gx[r * d + j] += rs * (dxhat[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                if !self.rg(*a) {
                    return;
                }
                let y = self.nodes[idx].value.data().to_vec();
                let d = self.nodes[idx].value.cols();
                let ga = self.grad_slot(*a).unwrap();
                for ((yr, gr), out) in y.chunks(d).zip(g.chunks(d)).zip(ga.chunks_mut(d)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        out[j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.grad_slot(*a) {
                    ga.iter_mut().for_each(|x| *x += g[0]);
                }
            }
            Op::Mean(a) => {
                if let Some(ga) = self.grad_slot(*a) {
                    let s = g[0] / ga.len() as f64;
                    ga.iter_mut().for_each(|x| *x += s);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, probs, g),
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                if let Some(gl) = self.grad_slot(*logits) {
                    let c = gl.len() / targets.len();
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..c {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            gl[r * c + j] += g[0] * w * (probs[r * c + j] - onehot);
                        }
                    }
                }
            }
            Op::Mse { pred, target } => {
                let pd = self.value(*pred).data().to_vec();
                if let Some(gp) = self.grad_slot(*pred) {
                    let s = 2.0 * g[0] / pd.len() as f64;
                    for ((x, p), t) in gp.iter_mut().zip(&pd).zip(target) {
                        *x += s * (p - t);
                    }
                }
            }
            Op::L2Normalize { x, norms } => {
                if !self.rg(*x) {
                    return;
                }
                let y = self.nodes[idx].value.data().to_vec();
                let d = self.nodes[idx].value.cols();
                let gx = self.grad_slot(*x).unwrap();
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] += (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
        }
    }

    fn backprop_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
    ) {
        let (nq, d) = (self.shape(q)[0], self.shape(q)[1]);
        let nk = self.shape(k)[0];
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let qd = self.value(q).data().to_vec();
        let kd = self.value(k).data().to_vec();
        let vd = self.value(v).data().to_vec();
        let mut gq = vec![0.0; nq * d];
        let mut gk = vec![0.0; nk * d];
        let mut gv = vec![0.0; nk * d];
        let mut dp = vec![0.0; nk];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..nq {
                let p = &probs[(h * nq + i) * nk..(h * nq + i + 1) * nk];
                let gi = &g[i * d + off..i * d + off + dh];
                let mut dot = 0.0;
                for j in 0..nk {
                    if p[j] == 0.0 {
                        dp[j] = 0.0;
                        continue;
                    }
                    let vj = &vd[j * d + off..j * d + off + dh];
                    dp[j] = gi.iter().zip(vj).map(|(a, b)| a * b).sum();
                    dot += p[j] * dp[j];
                    for (x, y) in gv[j * d + off..j * d + off + dh].iter_mut().zip(gi) {
                        *x += p[j] * y;
                    }
                }
                for j in 0..nk {
                    if p[j] == 0.0 {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - dot) * scale;
                    for t in 0..dh {
                        gq[i * d + off + t] += ds * kd[j * d + off + t];
                        gk[j * d + off + t] += ds * qd[i * d + off + t];
                    }
                }
            }
        }
        for (var, grad) in [(q, gq), (k, gk), (v, gv)] {
            if let Some(slot) = self.grad_slot(var) {
                slot.iter_mut().zip(&grad).for_each(|(x, y)| *x += y);
            }
        }
    }
}

/// Gather-based layout ops shared by the model.
impl Graph {
    /// `[h, w, c] → [h·f, w·f, c]` by pixel replication.
    pub fn upsample_nearest(&mut self, a: Var, factor: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || factor == 0 {
            return Err(Error::InvalidShape {
                op: "upsample",
                shape: s,
            });
        }
        let (h, w, c) = (s[0], s[1], s[2]);
        let (oh, ow) = (h * factor, w * factor);
        let mut index = Vec::with_capacity(oh * ow * c);
        for r in 0..oh {
            for cc in 0..ow {
                let base = ((r / factor) * w + cc / factor) * c;
                index.extend(base..base + c);
            }
        }
        self.gather(a, Arc::new(index), vec![oh, ow, c])
    }

    /// `[H, W, C] → [(H/p)·(W/p), p·p·C]`, tokens in raster order of the patch
    /// grid, entries within a token ordered (row, col, channel).
    pub fn unfold_patches(&mut self, a: Var, patch: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 || patch == 0 || s[0] % patch != 0 || s[1] % patch != 0 {
            return Err(Error::InvalidShape {
                op: "unfold",
                shape: s,
            });
        }
        let index = Arc::new(patch_index(s[0], s[1], s[2], patch));
        let (gh, gw) = (s[0] / patch, s[1] / patch);
        self.gather(a, index, vec![gh * gw, patch * patch * s[2]])
    }

    /// Inverse of [`Graph::unfold_patches`]: `[gh·gw, p·p·C] → [gh·p, gw·p, C]`.
    pub fn fold_patches(&mut self, a: Var, grid: (usize, usize), patch: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (gh, gw) = grid;
        if s.len() != 2 || s[0] != gh * gw || patch == 0 || s[1] % (patch * patch) != 0 {
            return Err(Error::InvalidShape {
                op: "fold",
                shape: s,
            });
        }
        let c = s[1] / (patch * patch);
        let (h, w) = (gh * patch, gw * patch);
        let fwd = patch_index(h, w, c, patch);
        let mut inv = vec![0; fwd.len()];
        for (o, &i) in fwd.iter().enumerate() {
            inv[i] = o;
        }
        self.gather(a, Arc::new(inv), vec![h, w, c])
    }

    /// `[H, W, C] → [H·W, 9·C]` 3×3 neighbourhoods with zero padding.
    pub fn im2col3x3(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                op: "im2col",
                shape: s,
            });
        }
        let (h, w, c) = (s[0] as isize, s[1] as isize, s[2]);
        let mut index = Vec::with_capacity((h * w) as usize * 9 * c);
        for r in 0..h {
            for cc in 0..w {
                for dr in -1..=1 {
                    for dc in -1..=1 {
                        let (rr, ccc) = (r + dr, cc + dc);
                        if rr < 0 || rr >= h || ccc < 0 || ccc >= w {
                            index.extend(std::iter::repeat(GATHER_ZERO).take(c));
                        } else {
                            let base = ((rr * w + ccc) as usize) * c;
                            index.extend(base..base + c);
                        }
                    }
                }
            }
        }
        self.gather(a, Arc::new(index), vec![(h * w) as usize, 9 * c])
    }

    /// 3×3 same-padded convolution: `[H, W, Cin] → [H·W, Cout]` with kernel
    /// `[9·Cin, Cout]` and bias `[Cout]`.
    pub fn conv3x3(&mut self, a: Var, kernel: Var, bias: Var) -> Result<Var> {
        let cols = self.im2col3x3(a)?;
        let y = self.matmul(cols, kernel)?;
        self.add(y, bias)
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 || ids.is_empty() || ids.iter().any(|&i| i >= s[0]) {
            return Err(Error::ShapeMismatch {
                op: "embedding",
                lhs: s,
                rhs: ids.to_vec(),
            });
        }
        let d = s[1];
        let index: Vec<usize> = ids.iter().flat_map(|&i| i * d..(i + 1) * d).collect();
        self.gather(table, Arc::new(index), vec![ids.len(), d])
    }

    /// `x · w + b` for `x: [n, din]`, `w: [din, dout]`, `b: [dout]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }
}

fn patch_index(h: usize, w: usize, c: usize, p: usize) -> Vec<usize> {
    let (gh, gw) = (h / p, w / p);
    let mut index = Vec::with_capacity(h * w * c);
    for gr in 0..gh {
        for gc in 0..gw {
            for r in 0..p {
                for cc in 0..p {
                    let base = ((gr * p + r) * w + gc * p + cc) * c;
                    index.extend(base..base + c);
                }
            }
        }
    }
    index
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn relu_forward_and_backward() {
        let mut g = Graph::new();
        let x = g.param(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[0.0, 1.0]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);
    }

    #[test]
    fn layernorm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2], &[1.0, 3.0]));
        let gamma = g.constant(Tensor::full(&[2], 1.0));
        let beta = g.constant(Tensor::zeros(&[2]));
        let y = g.layernorm(x, gamma, beta, 1e-5).unwrap();
        let v = g.value(y).data();
        assert!(
            (v[0] + 1.0).abs() < 1e-4 && (v[1] - 1.0).abs() < 1e-4,
            "{v:?}"
        );
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn identity_matmul_is_exact() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..12).map(|i| (i as f64) - 5.0).collect();
        let a = g.constant(t(&[3, 4], &data));
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 5] = 1.0;
        }
        let e = g.constant(t(&[4, 4], &eye));
        let y = g.matmul(a, e).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
    }

    #[test]
    fn fold_inverts_unfold() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..4 * 6 * 2).map(|i| i as f64).collect();
        let x = g.constant(t(&[4, 6, 2], &data));
        let u = g.unfold_patches(x, 2).unwrap();
        assert_eq!(g.shape(u), &[6, 8]);
        let f = g.fold_patches(u, (2, 3), 2).unwrap();
        assert_eq!(g.value(f).data(), &data[..]);
    }

    #[test]
    fn fully_blocked_attention_row_is_zero() {
        let mut g = Graph::new();
        let q = g.constant(Tensor::full(&[2, 4], 0.3));
        let k = g.constant(Tensor::full(&[3, 4], 0.1));
        let v = g.constant(Tensor::full(&[3, 4], 1.0));
        let mut m = BlockMask::open(2, 3);
        for j in 0..3 {
            m.set(0, j, true);
        }
        let y = g.attention(q, k, v, 2, Some(&m)).unwrap();
        assert_eq!(&g.value(y).data()[..4], &[0.0; 4]);
        assert!((g.value(y).data()[4] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn empty_axes_are_unrepresentable() {
        // A softmax axis can only be empty if a tensor has a zero extent.
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        let mut g = Graph::new();
        assert!(g.concat(&[]).is_err());
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
