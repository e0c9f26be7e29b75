use std::rc::Rc;

use super::gemm::gemm;
use super::{numel, Real, Tensor};
use crate::error::{shape_err, Error, Result};

/// Pointwise nonlinearities.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    Silu,
    Elu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => x.max(T::zero()),
            Activation::Silu => x / (T::one() + (-x).exp()),
            Activation::Elu => {
                if x > T::zero() {
                    x
                } else {
                    x.exp_m1()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    x
                } else {
                    x * T::of(slope)
                }
            }
        }
    }

    pub fn derivative<T: Real>(self, x: T) -> T {
        match self {
            Activation::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Activation::Silu => {
                let s = T::one() / (T::one() + (-x).exp());
                s * (T::one() + x * (T::one() - s))
            }
            Activation::Elu => {
                if x > T::zero() {
                    T::one()
                } else {
                    x.exp()
                }
            }
            Activation::LeakyRelu(slope) => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::of(slope)
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct MatMulDims {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    trans_b: bool,
    shared_b: bool,
}

/// Provenance of a recorded tensor.
pub(crate) enum Op<T: Real> {
    Add(Tensor<T>, Tensor<T>),
    Sub(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    AddBroadcast(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    MulMask(Tensor<T>, Rc<Vec<T>>),
    MatMul(MatMulDims, Tensor<T>, Tensor<T>),
    Unary(Activation, Tensor<T>),
    Softmax(Tensor<T>),
    LayerNorm {
        x: Tensor<T>,
        gamma: Tensor<T>,
        beta: Tensor<T>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CrossEntropy {
        logits: Tensor<T>,
        targets: Vec<usize>,
        probs: Vec<T>,
        count: usize,
    },
    Sum(Tensor<T>),
    Reshape(Tensor<T>),
    Permute(Tensor<T>, Vec<usize>),
    Narrow {
        x: Tensor<T>,
        start: usize,
        len: usize,
    },
    Concat(Vec<Tensor<T>>),
    PairSum(Tensor<T>, Tensor<T>),
    GatherRows(Tensor<T>, Vec<usize>),
    Expand {
        x: Tensor<T>,
        width: usize,
        deriv: Vec<T>,
    },
}

/// Targets equal to this value are skipped by [`Tensor::cross_entropy`].
pub const IGNORE_INDEX: usize = usize::MAX;

fn push<T: Real>(op: &'static str, t: &Tensor<T>, g: &[T]) -> Result<()> {
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteGradient { op });
    }
    t.accumulate_grad(g);
    Ok(())
}

/// Strides for a row-major shape.
fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// `out[dst] = src[perm-mapped src index]` for every output element.
fn permute_copy<T: Real>(src: &[T], shape: &[usize], axes: &[usize], inverse: bool) -> Vec<T> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![T::zero(); src.len()];
    let mut idx = vec![0usize; out_shape.len()];
    for (flat, _) in src.iter().enumerate() {
        let mut offset = 0;
        for (d, &a) in axes.iter().enumerate() {
            offset += idx[d] * in_strides[a];
        }
        if inverse {
            out[offset] = src[flat];
        } else {
            out[flat] = src[offset];
        }
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

impl<T: Real> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddBroadcast(..) => "add_broadcast",
            Op::Scale(..) => "scale",
            Op::MulMask(..) => "mul_mask",
            Op::MatMul(..) => "matmul",
            Op::Unary(..) => "activation",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Sum(..) => "sum",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat(..) => "concat",
            Op::PairSum(..) => "pair_sum",
            Op::GatherRows(..) => "gather_rows",
            Op::Expand { .. } => "expand_features",
        }
    }

    pub(crate) fn inputs(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddBroadcast(a, b)
            | Op::MatMul(_, a, b)
            | Op::PairSum(a, b) => vec![a, b],
            Op::Scale(x, _)
            | Op::MulMask(x, _)
            | Op::Unary(_, x)
            | Op::Softmax(x)
            | Op::Sum(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::GatherRows(x, _) => vec![x],
            Op::Narrow { x, .. } | Op::Expand { x, .. } => vec![x],
            Op::CrossEntropy { logits, .. } => vec![logits],
            Op::LayerNorm { x, gamma, beta, .. } => vec![x, gamma, beta],
            Op::Concat(parts) => parts.iter().collect(),
        }
    }

    /// Propagates `g` (gradient w.r.t. this node's output `out`) to inputs.
    pub(crate) fn backward(&self, out: &[T], g: &[T], out_shape: &[usize]) -> Result<()> {
        let name = self.name();
        match self {
            Op::Add(a, b) => {
                if a.requires_grad() {
                    push(name, a, g)?;
                }
                if b.requires_grad() {
                    push(name, b, g)?;
                }
            }
            Op::Sub(a, b) => {
                if a.requires_grad() {
                    push(name, a, g)?;
                }
                if b.requires_grad() {
                    let neg: Vec<T> = g.iter().map(|&v| -v).collect();
                    push(name, b, &neg)?;
                }
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    let ga: Vec<T> = g.iter().zip(bd.iter()).map(|(&g, &y)| g * y).collect();
                    drop(bd);
                    push(name, a, &ga)?;
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let gb: Vec<T> = g.iter().zip(ad.iter()).map(|(&g, &x)| g * x).collect();
                    drop(ad);
                    push(name, b, &gb)?;
                }
            }
            Op::AddBroadcast(a, b) => {
                if a.requires_grad() {
                    push(name, a, g)?;
                }
                if b.requires_grad() {
                    let n = b.numel();
                    let mut gb = vec![T::zero(); n];
                    for chunk in g.chunks(n) {
                        gb.iter_mut().zip(chunk).for_each(|(s, &v)| *s = *s + v);
                    }
                    push(name, b, &gb)?;
                }
            }
            Op::Scale(x, c) => {
                let gx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                push(name, x, &gx)?;
            }
            Op::MulMask(x, mask) => {
                let gx: Vec<T> = g.iter().zip(mask.iter()).map(|(&v, &m)| v * m).collect();
                push(name, x, &gx)?;
            }
            Op::MatMul(d, a, b) => {
                let (m, k, n) = (d.m, d.k, d.n);
                if a.requires_grad() {
                    let bd = b.data();
                    let mut ga = vec![T::zero(); d.batch * m * k];
                    for bi in 0..d.batch {
                        let bs = if d.shared_b { 0 } else { bi * k * n };
                        let bslice = &bd[bs..bs + k * n];
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let out = &mut ga[bi * m * k..(bi + 1) * m * k];
                        // dA = dC · op(B)ᵀ
                        gemm(gs, bslice, out, m, n, k, false, !d.trans_b);
                    }
                    drop(bd);
                    push(name, a, &ga)?;
                }
                if b.requires_grad() {
                    let ad = a.data();
                    let mut gb = vec![T::zero(); b.numel()];
                    for bi in 0..d.batch {
                        let aslice = &ad[bi * m * k..(bi + 1) * m * k];
                        let gs = &g[bi * m * n..(bi + 1) * m * n];
                        let bs = if d.shared_b { 0 } else { bi * k * n };
                        let out = &mut gb[bs..bs + k * n];
                        if d.trans_b {
                            // dB (n×k) = dCᵀ · A
                            gemm(gs, aslice, out, n, m, k, true, false);
                        } else {
                            // dB (k×n) = Aᵀ · dC
                            gemm(aslice, gs, out, k, m, n, true, false);
                        }
                    }
                    drop(ad);
                    push(name, b, &gb)?;
                }
            }
            Op::Unary(act, x) => {
                let xd = x.data();
                let gx: Vec<T> = g
                    .iter()
                    .zip(xd.iter())
                    .map(|(&v, &xv)| v * act.derivative(xv))
                    .collect();
                drop(xd);
                push(name, x, &gx)?;
            }
            Op::Softmax(x) => {
                let n = *out_shape.last().unwrap();
                let mut gx = vec![T::zero(); out.len()];
                for ((y, dy), dx) in out.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                    let dot: T = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
                        *o = yi * (dyi - dot);
                    }
                }
                push(name, x, &gx)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = gamma.numel();
                let gam = gamma.data().clone();
                if x.requires_grad() {
                    let mut gx = vec![T::zero(); g.len()];
                    let inv_d = T::one() / T::of(d as f64);
                    for (row, ((dy, xh), dx)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for i in 0..d {
                            let dxh = dy[i] * gam[i];
                            mean_dxh = mean_dxh + dxh;
                            mean_dxh_xh = mean_dxh_xh + dxh * xh[i];
                        }
                        mean_dxh = mean_dxh * inv_d;
                        mean_dxh_xh = mean_dxh_xh * inv_d;
                        for i in 0..d {
                            let dxh = dy[i] * gam[i];
                            dx[i] = rstd[row] * (dxh - mean_dxh - xh[i] * mean_dxh_xh);
                        }
                    }
                    push(name, x, &gx)?;
                }
                if gamma.requires_grad() {
                    let mut gg = vec![T::zero(); d];
                    for (dy, xh) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            gg[i] = gg[i] + dy[i] * xh[i];
                        }
                    }
                    push(name, gamma, &gg)?;
                }
                if beta.requires_grad() {
                    let mut gb = vec![T::zero(); d];
                    for dy in g.chunks(d) {
                        gb.iter_mut().zip(dy).for_each(|(s, &v)| *s = *s + v);
                    }
                    push(name, beta, &gb)?;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let c = probs.len() / targets.len();
                let scale = g[0] / T::of(*count as f64);
                let mut gl = vec![T::zero(); probs.len()];
                for (row, &t) in targets.iter().enumerate() {
                    if t == IGNORE_INDEX {
                        continue;
                    }
                    for j in 0..c {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[row * c + j] = (probs[row * c + j] - onehot) * scale;
                    }
                }
                push(name, logits, &gl)?;
            }
            Op::Sum(x) => {
                let gx = vec![g[0]; x.numel()];
                push(name, x, &gx)?;
            }
            Op::Reshape(x) => push(name, x, g)?,
            Op::Permute(x, axes) => {
                // g has the permuted shape; scatter it back to the input layout.
                let gx = permute_copy(g, x.shape(), axes, true);
                push(name, x, &gx)?;
            }
            Op::Narrow { x, start, len } => {
                let n = x.last_dim();
                let mut gx = vec![T::zero(); x.numel()];
                for (dst, src) in gx.chunks_mut(n).zip(g.chunks(*len)) {
                    dst[*start..start + len].copy_from_slice(src);
                }
                push(name, x, &gx)?;
            }
            Op::Concat(parts) => {
                let total = *out_shape.last().unwrap();
                let mut offset = 0;
                for p in parts {
                    let w = p.last_dim();
                    if p.requires_grad() {
                        let gp: Vec<T> = g
                            .chunks(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        push(name, p, &gp)?;
                    }
                    offset += w;
                }
            }
            Op::PairSum(u, v) => {
                let t = u.last_dim();
                let batch = u.numel() / t;
                if u.requires_grad() {
                    let gu: Vec<T> = g.chunks(t).map(|row| row.iter().copied().sum()).collect();
                    push(name, u, &gu)?;
                }
                if v.requires_grad() {
                    let mut gv = vec![T::zero(); u.numel()];
                    for b in 0..batch {
                        for i in 0..t {
                            let row = &g[(b * t + i) * t..(b * t + i + 1) * t];
                            let dst = &mut gv[b * t..(b + 1) * t];
                            dst.iter_mut().zip(row).for_each(|(s, &x)| *s = *s + x);
                        }
                    }
                    push(name, v, &gv)?;
                }
            }
            Op::GatherRows(w, idx) => {
                let d = w.last_dim();
                let mut gw = vec![T::zero(); w.numel()];
                for (r, &i) in idx.iter().enumerate() {
                    let dst = &mut gw[i * d..(i + 1) * d];
                    dst.iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(s, &v)| *s = *s + v);
                }
                push(name, w, &gw)?;
            }
            Op::Expand { x, width, deriv } => {
                let gx: Vec<T> = g
                    .chunks(*width)
                    .zip(deriv.chunks(*width))
                    .map(|(gr, dr)| gr.iter().zip(dr).map(|(&a, &b)| a * b).sum())
                    .collect();
                push(name, x, &gx)?;
            }
        }
        Ok(())
    }
}

impl<T: Real> Tensor<T> {
    fn same_shape(&self, other: &Self, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Vec<T> {
        let a = self.data();
        let b = other.data();
        a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "add")?;
        let data = self.zip_with(other, |a, b| a + b);
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Add(self.clone(), other.clone()),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "sub")?;
        let data = self.zip_with(other, |a, b| a - b);
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Sub(self.clone(), other.clone()),
        ))
    }

    pub fn mul(&self, other: &Self) -> Result<Self> {
        self.same_shape(other, "mul")?;
        let data = self.zip_with(other, |a, b| a * b);
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::Mul(self.clone(), other.clone()),
        ))
    }

    /// `self + other` where `other`'s shape is a trailing suffix of
    /// `self`'s (bias rows, attention masks). Other broadcasts are rejected.
    pub fn add_broadcast(&self, other: &Self) -> Result<Self> {
        let s = self.shape();
        let o = other.shape();
        if o.len() > s.len() || s[s.len() - o.len()..] != *o {
            return Err(shape_err("add_broadcast", format!("{o:?} is not a suffix of {s:?}")));
        }
        let n = other.numel();
        let data = {
            let a = self.data();
            let b = other.data();
            a.chunks(n)
                .flat_map(|row| row.iter().zip(b.iter()).map(|(&x, &y)| x + y))
                .collect()
        };
        Ok(Self::from_op(
            data,
            s.to_vec(),
            Op::AddBroadcast(self.clone(), other.clone()),
        ))
    }

    pub fn scale(&self, c: T) -> Self {
        let data = self.data().iter().map(|&v| v * c).collect();
        Self::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), c))
    }

    /// Elementwise product with a constant mask (dropout).
    pub fn mul_mask(&self, mask: Vec<T>) -> Result<Self> {
        if mask.len() != self.numel() {
            return Err(shape_err(
                "mul_mask",
                format!("mask of {} for {:?}", mask.len(), self.shape()),
            ));
        }
        let data = self.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        Ok(Self::from_op(
            data,
            self.shape().to_vec(),
            Op::MulMask(self.clone(), Rc::new(mask)),
        ))
    }

    fn matmul_impl(&self, b: &Self, trans_b: bool) -> Result<Self> {
        let op = if trans_b { "matmul_t" } else { "matmul" };
        let a_shape = self.shape();
        let b_shape = b.shape();
        if a_shape.len() < 2 || b_shape.len() < 2 {
            return Err(shape_err(op, "operands must be at least 2-D"));
        }
        let m = a_shape[a_shape.len() - 2];
        let k = a_shape[a_shape.len() - 1];
        let lead = &a_shape[..a_shape.len() - 2];
        let batch = numel(lead);
        let (bk, n) = {
            let r = b_shape[b_shape.len() - 2];
            let c = b_shape[b_shape.len() - 1];
            if trans_b {
                (c, r)
            } else {
                (r, c)
            }
        };
        let shared_b = b_shape.len() == 2;
        if bk != k || (!shared_b && b_shape[..b_shape.len() - 2] != *lead) {
            return Err(shape_err(op, format!("{a_shape:?} x {b_shape:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let ad = self.data();
            let bd = b.data();
            for bi in 0..batch {
                let bs = if shared_b { 0 } else { bi * k * n };
                gemm(
                    &ad[bi * m * k..(bi + 1) * m * k],
                    &bd[bs..bs + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                    false,
                    trans_b,
                );
            }
        }
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        let dims = MatMulDims {
            batch,
            m,
            k,
            n,
            trans_b,
            shared_b,
        };
        Ok(Self::from_op(out, shape, Op::MatMul(dims, self.clone(), b.clone())))
    }

    /// `(…, m, k) · (k, n)` or batched `(…, m, k) · (…, k, n)`.
    pub fn matmul(&self, b: &Self) -> Result<Self> {
        self.matmul_impl(b, false)
    }

    /// `(…, m, k) · (n, k)ᵀ` or batched with `b` of shape `(…, n, k)`.
    pub fn matmul_t(&self, b: &Self) -> Result<Self> {
        self.matmul_impl(b, true)
    }

    pub fn activation(&self, act: Activation) -> Self {
        let data = self.data().iter().map(|&v| act.apply(v)).collect();
        Self::from_op(data, self.shape().to_vec(), Op::Unary(act, self.clone()))
    }

    pub fn relu(&self) -> Self {
        self.activation(Activation::Relu)
    }

    pub fn silu(&self) -> Self {
        self.activation(Activation::Silu)
    }

    pub fn elu(&self) -> Self {
        self.activation(Activation::Elu)
    }

    pub fn leaky_relu(&self, slope: f64) -> Self {
        self.activation(Activation::LeakyRelu(slope))
    }

    /// Softmax over the last dimension, computed with max subtraction.
    /// Entries equal to `-inf` receive probability exactly zero.
    pub fn softmax(&self) -> Self {
        let n = self.last_dim();
        let mut out = self.to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            for v in row.iter_mut() {
                *v = *v / sum;
            }
        }
        Self::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone()))
    }

    /// Normalizes each trailing row with population variance, then applies
    /// `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: &Self, beta: &Self, eps: f64) -> Result<Self> {
        let d = self.last_dim();
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!("gamma {:?} / beta {:?} for width {d}", gamma.shape(), beta.shape()),
            ));
        }
        let rows = self.numel() / d;
        let mut xhat = vec![T::zero(); self.numel()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); self.numel()];
        {
            let x = self.data();
            let g = gamma.data();
            let b = beta.data();
            let inv_d = T::one() / T::of(d as f64);
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().copied().sum::<T>() * inv_d;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
                let rs = T::one() / (var + T::of(eps)).sqrt();
                rstd[r] = rs;
                for i in 0..d {
                    let xh = (row[i] - mean) * rs;
                    xhat[r * d + i] = xh;
                    out[r * d + i] = xh * g[i] + b[i];
                }
            }
        }
        Ok(Self::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                x: self.clone(),
                gamma: gamma.clone(),
                beta: beta.clone(),
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// 2-D logits. Rows whose target is [`IGNORE_INDEX`] are skipped.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Self> {
        if self.ndim() != 2 || self.shape()[0] != targets.len() {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} for {} targets", self.shape(), targets.len()),
            ));
        }
        let c = self.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE_INDEX && t >= c) {
            return Err(Error::IndexOutOfRange {
                what: "class label",
                index: bad,
                size: c,
            });
        }
        let count = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if count == 0 {
            return Err(Error::InvalidArgument("cross_entropy with every target ignored".into()));
        }
        let probs = self.softmax().to_vec();
        let mut loss = T::zero();
        for (row, &t) in targets.iter().enumerate() {
            if t != IGNORE_INDEX {
                let p = probs[row * c + t];
                // NaN must survive the floor so callers can detect it.
                let p = if p.is_nan() { p } else { p.max(T::min_positive_value()) };
                loss = loss - p.ln();
            }
        }
        loss = loss / T::of(count as f64);
        Ok(Self::from_op(
            vec![loss],
            vec![1],
            Op::CrossEntropy {
                logits: self.clone(),
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&self) -> Self {
        let s = self.data().iter().copied().sum();
        Self::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Self {
        let n = T::of(self.numel() as f64);
        self.sum().scale(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        if numel(shape) != self.numel() {
            return Err(shape_err("reshape", format!("{:?} -> {shape:?}", self.shape())));
        }
        Ok(Self::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Reorders dimensions: output dim `i` is input dim `axes[i]`.
    pub fn permute(&self, axes: &[usize]) -> Result<Self> {
        let mut seen = vec![false; self.ndim()];
        if axes.len() != self.ndim() || axes.iter().any(|&a| a >= seen.len()) {
            return Err(shape_err("permute", format!("axes {axes:?}")));
        }
        for &a in axes {
            if std::mem::replace(&mut seen[a], true) {
                return Err(shape_err("permute", format!("repeated axis in {axes:?}")));
            }
        }
        let data = permute_copy(&self.data(), self.shape(), axes, false);
        let shape = axes.iter().map(|&a| self.shape()[a]).collect();
        Ok(Self::from_op(data, shape, Op::Permute(self.clone(), axes.to_vec())))
    }

    /// Slice `[start, start+len)` of the last dimension.
    pub fn narrow(&self, start: usize, len: usize) -> Result<Self> {
        let n = self.last_dim();
        if len == 0 || start + len > n {
            return Err(shape_err("narrow", format!("[{start}, {}) of width {n}", start + len)));
        }
        let data = self
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = self.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        Ok(Self::from_op(
            data,
            shape,
            Op::Narrow {
                x: self.clone(),
                start,
                len,
            },
        ))
    }

    /// Concatenates along the last dimension; leading dims must agree.
    pub fn concat(parts: &[Self]) -> Result<Self> {
        let first = parts.first().ok_or_else(|| shape_err("concat", "no tensors"))?;
        let lead = &first.shape()[..first.ndim() - 1];
        if parts
            .iter()
            .any(|p| p.ndim() != first.ndim() || p.shape()[..p.ndim() - 1] != *lead)
        {
            return Err(shape_err("concat", "leading dimensions differ"));
        }
        let rows = numel(lead);
        let total: usize = parts.iter().map(|p| p.last_dim()).sum();
        let mut data = Vec::with_capacity(rows * total);
        let datas: Vec<_> = parts.iter().map(|p| p.data()).collect();
        for r in 0..rows {
            for (p, d) in parts.iter().zip(&datas) {
                let w = p.last_dim();
                data.extend_from_slice(&d[r * w..(r + 1) * w]);
            }
        }
        drop(datas);
        let mut shape = lead.to_vec();
        shape.push(total);
        Ok(Self::from_op(data, shape, Op::Concat(parts.to_vec())))
    }

    /// `out[…, i, j] = u[…, i] + v[…, j]` for `u`, `v` of identical shape.
    pub fn pair_sum(u: &Self, v: &Self) -> Result<Self> {
        u.same_shape(v, "pair_sum")?;
        let t = u.last_dim();
        let batch = u.numel() / t;
        let mut data = Vec::with_capacity(batch * t * t);
        {
            let ud = u.data();
            let vd = v.data();
            for b in 0..batch {
                for i in 0..t {
                    let ui = ud[b * t + i];
                    data.extend(vd[b * t..(b + 1) * t].iter().map(|&vj| ui + vj));
                }
            }
        }
        let mut shape = u.shape().to_vec();
        shape.push(t);
        Ok(Self::from_op(data, shape, Op::PairSum(u.clone(), v.clone())))
    }

    /// Selects rows of a 2-D tensor (embedding lookup).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Self> {
        if self.ndim() != 2 {
            return Err(shape_err("gather_rows", format!("{:?}", self.shape())));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        {
            let w = self.data();
            for &i in idx {
                if i >= rows {
                    return Err(Error::IndexOutOfRange {
                        what: "row",
                        index: i,
                        size: rows,
                    });
                }
                data.extend_from_slice(&w[i * d..(i + 1) * d]);
            }
        }
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        Ok(Self::from_op(
            data,
            vec![idx.len(), d],
            Op::GatherRows(self.clone(), idx.to_vec()),
        ))
    }

    /// Maps every element to `width` features via `eval(x, values, derivs)`,
    /// appending a trailing dimension. `derivs` must receive d(value)/dx.
    pub fn expand_features(&self, width: usize, mut eval: impl FnMut(T, &mut [T], &mut [T])) -> Self {
        let n = self.numel();
        let mut values = vec![T::zero(); n * width];
        let mut deriv = vec![T::zero(); n * width];
        for (i, &x) in self.data().iter().enumerate() {
            eval(
                x,
                &mut values[i * width..(i + 1) * width],
                &mut deriv[i * width..(i + 1) * width],
            );
        }
        let mut shape = self.shape().to_vec();
        shape.push(width);
        Self::from_op(
            values,
            shape,
            Op::Expand {
                x: self.clone(),
                width,
                deriv,
            },
        )
    }
}
