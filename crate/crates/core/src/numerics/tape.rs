//! Reverse-mode differentiation over a dynamically recorded tape.
//!
//! Every operation appends a node holding its forward value; `backward`
//! walks the nodes in reverse insertion order (a valid reverse topological
//! order) and accumulates gradients additively, so fan-out needs no special
//! handling. A tape is rebuilt for every forward pass.

use rand::Rng;

use super::scalar::gemm;
use super::tensor::axis_extents;
use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query rows processed together by attention.
const ATTN_BLOCK: usize = 64;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        scale: T,
        probs: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
        mask: Option<Vec<T>>,
        count: usize,
    },
    OverlapAverage {
        x: Var,
        starts: Vec<usize>,
        inv_cover: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<usize>,
}

#[derive(Debug)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Input that receives a gradient.
    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Binds every parameter of `store` onto the tape, in store order.
    pub fn bind_params(&mut self, store: &ParamStore<T>) -> Vec<Var> {
        (0..store.len())
            .map(|i| {
                let v = self.push(store.value(i).clone(), Op::Leaf, true);
                self.nodes[v.0].param = Some(i);
                v
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Adds the gradients of all bound parameters into `store`.
    pub fn accumulate_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, grad) in self.nodes.iter().zip(&self.grads) {
            if let (Some(p), Some(g)) = (node.param, grad) {
                for (acc, &x) in store.grad_mut(p).iter_mut().zip(g) {
                    *acc += x;
                }
            }
        }
    }

    // ----- forward operations -------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("add", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a vector of length `n` to every row of a `[.., n]` tensor.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (vx, vb) = (self.value(x), self.value(bias));
        let n = *vx.shape().last().unwrap_or(&1);
        if vb.shape() != [n] {
            return Err(Error::shape("add_bias", vx.shape(), vb.shape()));
        }
        let b = vb.data();
        let data = vx
            .data()
            .chunks(n.max(1))
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mul", va.shape(), vb.shape()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64(c);
        let vx = self.value(x);
        let data = vx.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(vx.shape(), data).expect("same length");
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, c), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape().len() != 2 || vb.shape().len() != 2 || va.shape()[1] != vb.shape()[0] {
            return Err(Error::shape("matmul", va.shape(), vb.shape()));
        }
        let (m, k, n) = (va.shape()[0], va.shape()[1], vb.shape()[1]);
        let mut data = vec![T::ZERO; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, T::ONE, T::ZERO, &mut data);
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let vx = self.value(x);
        if vx.shape().len() != 2 {
            return Err(Error::shape("transpose", vx.shape(), &[0, 0]));
        }
        let (m, n) = (vx.shape()[0], vx.shape()[1]);
        let src = vx.data();
        let mut data = vec![T::ZERO; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(&[n, m], data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Transpose(x), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_extents(&shape, axis);
        let mut data = vec![T::ZERO; shape.iter().product()];
        let mut offset = 0;
        for &v in inputs {
            let len = self.shape(v)[axis];
            let src = self.value(v).data();
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let out = Tensor::new(&shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::shape("slice", &shape, &[axis, start, end]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let width = end - start;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let from = (o * len + start) * inner;
            data.extend_from_slice(&src[from..from + width * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let out = Tensor::new(&out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_f64(v.len().max(1) as f64);
        let s: T = v.data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s / n), Op::Mean(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        let mut data = self.value(x).data().to_vec();
        if inner == 1 {
            for row in data.chunks_mut(len.max(1)) {
                T::softmax_row(row);
            }
            let out = Tensor::new(&shape, data)?;
            let rg = self.rg(x);
            return Ok(self.push(out, Op::Softmax { x, axis }, rg));
        }
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut max = data[idx(0)];
                for l in 1..len {
                    if data[idx(l)] > max {
                        max = data[idx(l)];
                    }
                }
                let mut total = T::ZERO;
                for l in 0..len {
                    let e = (data[idx(l)] - max).exp();
                    data[idx(l)] = e;
                    total += e;
                }
                for l in 0..len {
                    data[idx(l)] /= total;
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Softmax { x, axis }, rg))
    }

    /// Normalizes along `axis` to zero mean / unit variance, then applies the
    /// per-position affine `gamma * xhat + beta`.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("layer_norm", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_extents(&shape, axis);
        if self.shape(gamma) != [len] || self.shape(beta) != [len] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let eps = T::from_f64(eps);
        let n = T::from_f64(len as f64);
        let mut xhat = vec![T::ZERO; src.len()];
        let mut rstd = vec![T::ZERO; outer * inner];
        let mut data = vec![T::ZERO; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let mut mu = T::ZERO;
                for l in 0..len {
                    mu += src[idx(l)];
                }
                mu /= n;
                let mut var = T::ZERO;
                for l in 0..len {
                    let d = src[idx(l)] - mu;
                    var += d * d;
                }
                var /= n;
                let r = T::ONE / (var + eps).sqrt();
                rstd[o * inner + i] = r;
                for l in 0..len {
                    let h = (src[idx(l)] - mu) * r;
                    xhat[idx(l)] = h;
                    data[idx(l)] = h * g[l] + b[l];
                }
            }
        }
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(GELU_K);
        let half = T::from_f64(0.5);
        let vx = self.value(x);
        let data = vx
            .data()
            .iter()
            .map(|&v| half * v * (T::ONE + (c * (v + k * v * v * v)).tanh_approx()))
            .collect();
        let out = Tensor::new(vx.shape(), data).expect("same length");
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    /// `x W + b` for `x: [n, in]`, `W: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (vx, vw) = (self.value(x), self.value(w));
        if vx.shape().len() != 2 || vw.shape().len() != 2 || vx.shape()[1] != vw.shape()[0] {
            return Err(Error::shape("linear", vx.shape(), vw.shape()));
        }
        let (m, k, n) = (vx.shape()[0], vx.shape()[1], vw.shape()[1]);
        let mut data = vec![T::ZERO; m * n];
        if let Some(b) = b {
            let vb = self.value(b);
            if vb.shape() != [n] {
                return Err(Error::shape("linear", vw.shape(), vb.shape()));
            }
            for row in data.chunks_mut(n.max(1)) {
                row.copy_from_slice(vb.data());
            }
        }
        gemm(m, k, n, vx.data(), false, vw.data(), false, T::ONE, T::ONE, &mut data);
        let out = Tensor::new(&[m, n], data)?;
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    /// `softmax(scale * Q K^T) V` with `Q: [nq, d]`, `K: [nk, d]`, `V: [nk, dv]`.
    pub fn scaled_dot_attention(&mut self, q: Var, k: Var, v: Var, scale: f64) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
            return Err(Error::shape("attention(q,k)", sq, sk));
        }
        if sv.len() != 2 || sv[0] != sk[0] {
            return Err(Error::shape("attention(k,v)", sk, sv));
        }
        let (nq, d, nk, dv) = (sq[0], sq[1], sk[0], sv[1]);
        let scale = T::from_f64(scale);
        let (vq, vk, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![T::ZERO; nq * nk];
        let mut data = vec![T::ZERO; nq * dv];
        for r0 in (0..nq).step_by(ATTN_BLOCK) {
            let r1 = (r0 + ATTN_BLOCK).min(nq);
            let pb = &mut probs[r0 * nk..r1 * nk];
            gemm(r1 - r0, d, nk, &vq[r0 * d..r1 * d], false, vk, true, scale, T::ZERO, pb);
            for row in pb.chunks_mut(nk.max(1)) {
                T::softmax_row(row);
            }
            gemm(r1 - r0, nk, dv, pb, false, vv, false, T::ONE, T::ZERO, &mut data[r0 * dv..r1 * dv]);
        }
        let out = Tensor::new(&[nq, dv], data)?;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            },
            rg,
        ))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. `p == 0` records an identity mask.
    pub fn dropout<R: Rng>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} not in [0, 1)")));
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let vx = self.value(x);
        let mask: Vec<T> = (0..vx.len())
            .map(|_| {
                if p > 0.0 && rng.random::<f64>() < p {
                    T::ZERO
                } else {
                    keep
                }
            })
            .collect();
        let data = vx.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// Mean squared error over the positions where `mask` is nonzero
    /// (all positions when `mask` is `None`).
    pub fn mse_loss(&mut self, pred: Var, target: &[T], mask: Option<&[T]>) -> Result<Var> {
        let vp = self.value(pred);
        if target.len() != vp.len() {
            return Err(Error::shape("mse_loss", vp.shape(), &[target.len()]));
        }
        if let Some(m) = mask {
            if m.len() != vp.len() {
                return Err(Error::shape("mse_loss(mask)", vp.shape(), &[m.len()]));
            }
        }
        let count = match mask {
            Some(m) => m.iter().filter(|&&w| w != T::ZERO).count(),
            None => vp.len(),
        };
        if count == 0 {
            return Err(Error::Data("mse_loss over zero valid positions".into()));
        }
        let mut total = T::ZERO;
        for (i, (&p, &t)) in vp.data().iter().zip(target).enumerate() {
            let w = mask.map_or(T::ONE, |m| m[i]);
            let d = p - t;
            total += w * d * d;
        }
        let loss = total / T::from_f64(count as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                count,
            },
            rg,
        ))
    }

    /// Folds per-token outputs `[n_tokens, width]` onto a length-`len`
    /// sequence: token `i` covers `starts[i]..starts[i] + width` and each
    /// timestep is the mean of all values that land on it. Returns `[len, 1]`.
    pub fn overlap_average(&mut self, x: Var, starts: &[usize], len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != starts.len() {
            return Err(Error::shape("overlap_average", &shape, &[starts.len()]));
        }
        let width = shape[1];
        let mut cover = vec![0usize; len];
        for &s in starts {
            if s + width > len {
                return Err(Error::shape("overlap_average", &shape, &[len]));
            }
            for c in &mut cover[s..s + width] {
                *c += 1;
            }
        }
        if let Some(t) = cover.iter().position(|&c| c == 0) {
            return Err(Error::Config(format!("timestep {t} is not covered by any token")));
        }
        let inv_cover: Vec<T> = cover.iter().map(|&c| T::ONE / T::from_f64(c as f64)).collect();
        let src = self.value(x).data();
        let mut data = vec![T::ZERO; len];
        for (i, &s) in starts.iter().enumerate() {
            for j in 0..width {
                data[s + j] += src[i * width + j];
            }
        }
        for (d, &w) in data.iter_mut().zip(&inv_cover) {
            *d *= w;
        }
        let out = Tensor::new(&[len, 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(
            out,
            Op::OverlapAverage {
                x,
                starts: starts.to_vec(),
                inv_cover,
            },
            rg,
        ))
    }

    // ----- reverse pass --------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        self.backward_with_seed(loss, T::ONE)
    }

    /// Runs the reverse pass from a scalar node whose incoming gradient is `seed`.
    pub fn backward_with_seed(&mut self, loss: Var, seed: T) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", self.shape(loss), &[]));
        }
        self.grads[loss.0] = Some(vec![seed]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
        }
        Ok(())
    }

    fn buf(&mut self, v: Var) -> Option<&mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(self.grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
    }

    fn acc(&mut self, v: Var, f: impl Fn(usize) -> T) {
        if let Some(buf) = self.buf(v) {
            for (i, b) in buf.iter_mut().enumerate() {
                *b += f(i);
            }
        }
    }

    // Grad buffers are taken out of `self.grads` while the tape is read, so
    // each arm computes against immutable node values and then accumulates.
    fn propagate(&mut self, i: usize, g: &[T]) {
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(*a, |j| g[j]);
                self.acc(*b, |j| g[j]);
            }
            Op::AddBias(x, b) => {
                self.acc(*x, |j| g[j]);
                let n = self.value(*b).len();
                let mut gb = vec![T::ZERO; n];
                for row in g.chunks(n.max(1)) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                self.acc(*b, |j| gb[j]);
            }
            Op::Mul(a, b) => {
                let va = self.value(*a).data().to_vec();
                let vb = self.value(*b).data().to_vec();
                self.acc(*a, |j| g[j] * vb[j]);
                self.acc(*b, |j| g[j] * va[j]);
            }
            Op::Scale(x, c) => {
                let c = *c;
                self.acc(*x, |j| g[j] * c);
            }
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                self.matmul_backward(*a, *b, g, m, k, n);
            }
            Op::Transpose(x) => {
                let (m, n) = (self.shape(*x)[0], self.shape(*x)[1]);
                self.acc(*x, |idx| g[(idx % n) * m + idx / n]);
            }
            Op::Reshape(x) => self.acc(*x, |j| g[j]),
            Op::Concat { inputs, axis } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (_, total, inner) = axis_extents(&shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis];
                    self.acc(v, |idx| {
                        let o = idx / (len * inner);
                        let rest = idx % (len * inner);
                        g[(o * total + offset) * inner + rest]
                    });
                    offset += len;
                }
            }
            Op::Slice { x, axis, start } => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (_, width, inner) = axis_extents(&out_shape, *axis);
                let len = self.shape(*x)[*axis];
                let start = *start;
                if let Some(buf) = self.buf(*x) {
                    for (j, &v) in g.iter().enumerate() {
                        let o = j / (width * inner);
                        let l = (j / inner) % width;
                        let r = j % inner;
                        buf[(o * len + start + l) * inner + r] += v;
                    }
                }
            }
            Op::Sum(x) => {
                let s = g[0];
                self.acc(*x, |_| s);
            }
            Op::Mean(x) => {
                let s = g[0] / T::from_f64(self.value(*x).len().max(1) as f64);
                self.acc(*x, |_| s);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data().to_vec();
                let (outer, len, inner) = axis_extents(self.nodes[i].value.shape(), *axis);
                let mut gx = vec![T::ZERO; y.len()];
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + r;
                        let mut dot = T::ZERO;
                        for l in 0..len {
                            dot += g[idx(l)] * y[idx(l)];
                        }
                        for l in 0..len {
                            gx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                self.acc(*x, |j| gx[j]);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                axis,
                xhat,
                rstd,
            } => {
                let shape = self.nodes[i].value.shape().to_vec();
                let (outer, len, inner) = axis_extents(&shape, *axis);
                let gam = self.value(*gamma).data().to_vec();
                let mut ggam = vec![T::ZERO; len];
                let mut gbeta = vec![T::ZERO; len];
                let mut gx = vec![T::ZERO; g.len()];
                let n = T::from_f64(len as f64);
                for o in 0..outer {
                    for r in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + r;
                        let mut mean_gh = T::ZERO;
                        let mut mean_ghx = T::ZERO;
                        for l in 0..len {
                            let gv = g[idx(l)];
                            ggam[l] += gv * xhat[idx(l)];
                            gbeta[l] += gv;
                            let gh = gv * gam[l];
                            mean_gh += gh;
                            mean_ghx += gh * xhat[idx(l)];
                        }
                        mean_gh /= n;
                        mean_ghx /= n;
                        let rs = rstd[o * inner + r];
                        for l in 0..len {
                            let gh = g[idx(l)] * gam[l];
                            gx[idx(l)] = rs * (gh - mean_gh - xhat[idx(l)] * mean_ghx);
                        }
                    }
                }
                self.acc(*x, |j| gx[j]);
                self.acc(*gamma, |j| ggam[j]);
                self.acc(*beta, |j| gbeta[j]);
            }
            Op::Gelu(x) => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(GELU_K);
                let half = T::from_f64(0.5);
                let three_k = T::from_f64(3.0 * GELU_K);
                let vx = self.value(*x).data().to_vec();
                self.acc(*x, |j| {
                    let v = vx[j];
                    let t = (c * (v + k * v * v * v)).tanh_approx();
                    let d = half * (T::ONE + t)
                        + half * v * (T::ONE - t * t) * c * (T::ONE + three_k * v * v);
                    g[j] * d
                });
            }
            Op::Linear { x, w, b } => {
                let (m, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = self.shape(*w)[1];
                self.matmul_backward(*x, *w, g, m, k, n);
                if let Some(b) = b {
                    let mut gb = vec![T::ZERO; n];
                    for row in g.chunks(n.max(1)) {
                        for (acc, &v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    self.acc(*b, |j| gb[j]);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                scale,
                probs,
            } => {
                let (nq, d) = (self.shape(*q)[0], self.shape(*q)[1]);
                let (nk, dv) = (self.shape(*v)[0], self.shape(*v)[1]);
                // fresh buffers: q, k and v may be the same node
                let mut gq = self.rg(*q).then(|| vec![T::ZERO; nq * d]);
                let mut gk = self.rg(*k).then(|| vec![T::ZERO; nk * d]);
                let mut gv = self.rg(*v).then(|| vec![T::ZERO; nk * dv]);
                let (vq, vk, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                // row blocks keep the [rows x nk] temporaries cache-resident
                let mut ds = vec![T::ZERO; ATTN_BLOCK.min(nq) * nk];
                for r0 in (0..nq).step_by(ATTN_BLOCK) {
                    let r1 = (r0 + ATTN_BLOCK).min(nq);
                    let rows = r1 - r0;
                    let pb = &probs[r0 * nk..r1 * nk];
                    let gb = &g[r0 * dv..r1 * dv];
                    if let Some(gv) = gv.as_mut() {
                        gemm(nk, rows, dv, pb, true, gb, false, T::ONE, T::ONE, gv);
                    }
                    if gq.is_none() && gk.is_none() {
                        continue;
                    }
                    // dP = dO V^T, then dS = P * (dP - rowsum(dP * P)) * scale
                    let dsb = &mut ds[..rows * nk];
                    gemm(rows, dv, nk, gb, false, vv, true, T::ONE, T::ZERO, dsb);
                    for (row, prow) in dsb.chunks_mut(nk.max(1)).zip(pb.chunks(nk.max(1))) {
                        T::softmax_backward_row(row, prow, *scale);
                    }
                    if let Some(gq) = gq.as_mut() {
                        gemm(rows, nk, d, dsb, false, vk, false, T::ONE, T::ONE, &mut gq[r0 * d..r1 * d]);
                    }
                    if let Some(gk) = gk.as_mut() {
                        gemm(nk, rows, d, dsb, true, &vq[r0 * d..r1 * d], false, T::ONE, T::ONE, gk);
                    }
                }
                for (x, buf) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(buf) = buf {
                        self.acc(x, |j| buf[j]);
                    }
                }
            }
            Op::Dropout { x, mask } => self.acc(*x, |j| g[j] * mask[j]),
            Op::Mse {
                pred,
                target,
                mask,
                count,
            } => {
                let scale = g[0] * T::from_f64(2.0 / *count as f64);
                let vp = self.value(*pred).data().to_vec();
                self.acc(*pred, |j| {
                    let w = mask.as_ref().map_or(T::ONE, |m| m[j]);
                    scale * w * (vp[j] - target[j])
                });
            }
            Op::OverlapAverage {
                x,
                starts,
                inv_cover,
            } => {
                let width = self.shape(*x)[1];
                self.acc(*x, |j| {
                    let t = starts[j / width] + j % width;
                    g[t] * inv_cover[t]
                });
            }
        }
        self.nodes[i].op = op;
    }

    fn matmul_backward(&mut self, a: Var, b: Var, g: &[T], m: usize, k: usize, n: usize) {
        if self.rg(a) {
            let mut ga = self.grads[a.0].take().unwrap_or_else(|| vec![T::ZERO; m * k]);
            gemm(m, n, k, g, false, self.value(b).data(), true, T::ONE, T::ONE, &mut ga);
            self.grads[a.0] = Some(ga);
        }
        if self.rg(b) {
            let mut gb = self.grads[b.0].take().unwrap_or_else(|| vec![T::ZERO; k * n]);
            gemm(k, m, n, self.value(a).data(), true, g, false, T::ONE, T::ONE, &mut gb);
            self.grads[b.0] = Some(gb);
        }
    }
}

