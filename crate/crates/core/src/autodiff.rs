//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the vector-Jacobian product. Parents always precede children on
//! the tape, so reverse index order is a valid topological order.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv3dGeom};
use crate::params::{ParamId, ParamStore};
use crate::ssm::{self, ScanCache, ScanDims};
use crate::tensor::{Real, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Silu,
    Softplus,
    Sigmoid,
    Exp,
    Relu,
    Neg,
}

impl Unary {
    fn apply<T: Real>(self, x: T) -> T {
        match self {
            Unary::Silu => x * kernels::sigmoid(x),
            Unary::Softplus => kernels::softplus(x),
            Unary::Sigmoid => kernels::sigmoid(x),
            Unary::Exp => x.exp(),
            Unary::Relu => x.max(T::zero()),
            Unary::Neg => -x,
        }
    }

    /// d out / d in, given input `x` and output `y`.
    fn derivative<T: Real>(self, x: T, y: T) -> T {
        match self {
            Unary::Silu => {
                let s = kernels::sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            }
            Unary::Softplus => kernels::sigmoid(x),
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Exp => y,
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Neg => -T::one(),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Silu => "silu",
            Unary::Softplus => "softplus",
            Unary::Sigmoid => "sigmoid",
            Unary::Exp => "exp",
            Unary::Relu => "relu",
            Unary::Neg => "neg",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum NormKind {
    /// Normalize each row over the channel axis.
    Layer,
    /// Normalize each channel over all rows using batch statistics.
    BatchTrain,
    /// Normalize with frozen statistics (affine in x).
    BatchFrozen,
}

#[derive(Clone, Copy, Debug)]
struct Axes {
    outer: usize,
    extent: usize,
    inner: usize,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    Matmul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        inp: usize,
        out: usize,
    },
    Reduce {
        x: Var,
        kind: Reduce,
        axes: Axes,
        argmax: Vec<usize>,
    },
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    Norm {
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        ch: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Conv3d {
        x: Var,
        w: Var,
        b: Var,
        geom: Conv3dGeom,
    },
    DwConv {
        x: Var,
        w: Var,
        b: Var,
        side: usize,
        ch: usize,
    },
    AvgPool {
        x: Var,
        batch: usize,
        side: usize,
        ch: usize,
        m: usize,
        s: usize,
    },
    ChannelScale {
        x: Var,
        w: Var,
        batch: usize,
        ch: usize,
    },
    Scan {
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
        dims: ScanDims,
        cache: ScanCache<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
        classes: usize,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records one forward computation. Build a fresh tape per forward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    bindings: Vec<(Var, ParamId)>,
    buffer_updates: Vec<(ParamId, Tensor<T>)>,
    training: bool,
    grad_enabled: bool,
    check_finite: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Training-mode tape with gradients enabled.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bindings: Vec::new(),
            buffer_updates: Vec::new(),
            training: true,
            grad_enabled: true,
            check_finite: cfg!(debug_assertions),
        }
    }

    /// Evaluation-mode tape: frozen normalization statistics, no gradients.
    pub fn inference() -> Self {
        Self {
            training: false,
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_training(mut self, training: bool) -> Self {
        self.training = training;
        self
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, name: &'static str) -> Result<Var> {
        if self.check_finite && !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let needs_grad = self.grad_enabled
            && match &op {
                Op::Leaf => false,
                _ => self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad),
            };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn parents(&self, op: &Op<T>) -> Vec<Var> {
        match op {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(x, _) | Op::Unary(x, _) | Op::Reshape(x) => vec![*x],
            Op::Matmul { a, b, .. } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b.iter().copied());
                v
            }
            Op::Reduce { x, .. } | Op::Gather { x, .. } | Op::AvgPool { x, .. } => vec![*x],
            Op::Concat(vs) => vs.clone(),
            Op::Norm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Conv3d { x, w, b, .. } | Op::DwConv { x, w, b, .. } => vec![*x, *w, *b],
            Op::ChannelScale { x, w, .. } => vec![*x, *w],
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d_skip,
                ..
            } => vec![*x, *delta, *a, *b, *c, *d_skip],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }

    // ----- leaves -----

    /// Differentiable input (gradients are reported by [`Tape::backward`]).
    pub fn var(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter; its gradient is accumulated by
    /// [`Tape::backward_into`].
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let needs_grad = self.grad_enabled && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Leaf,
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        if needs_grad {
            self.bindings.push((v, id));
        }
        v
    }

    /// Queues a non-trainable buffer overwrite (running statistics).
    pub fn stage_buffer_update(&mut self, id: ParamId, value: Tensor<T>) {
        self.buffer_updates.push((id, value));
    }

    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ----- elementwise -----

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() == tb.shape() {
            let data = ta
                .data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(ta.shape(), data)
        } else if tb.len() == 1 {
            let y = tb.data()[0];
            Ok(ta.map(|x| f(x, y)))
        } else if ta.len() == 1 {
            let x = ta.data()[0];
            Ok(tb.map(|y| f(x, y)))
        } else {
            Err(Error::shape(name, ta.shape(), tb.shape()))
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(v, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.value(x).map(|e| e * s);
        self.push(v, Op::Scale(x, s), "scale")
    }

    pub fn unary(&mut self, x: Var, u: Unary) -> Result<Var> {
        let v = self.value(x).map(|e| u.apply(e));
        self.push(v, Op::Unary(x, u), u.name())
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Silu)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Softplus)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Exp)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Relu)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(x, Unary::Neg)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(ta.data(), tb.data(), &mut out, m, k, n);
        let v = Tensor::new(&[m, n], out)?;
        self.push(v, Op::Matmul { a, b, m, k, n }, "matmul")
    }

    /// `x[.., in] · w[in, out] + b[out]`, applied over all leading axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let inp = *tx.shape().last().unwrap();
        if tw.rank() != 2 || tw.shape()[0] != inp {
            return Err(Error::shape("linear", tx.shape(), tw.shape()));
        }
        let out = tw.shape()[1];
        let rows = tx.len() / inp;
        let mut data = vec![T::zero(); rows * out];
        kernels::matmul(tx.data(), tw.data(), &mut data, rows, inp, out);
        if let Some(b) = b {
            let tb = self.value(b);
            if tb.len() != out {
                return Err(Error::shape("linear bias", tw.shape(), tb.shape()));
            }
            for row in data.chunks_mut(out) {
                kernels::add_into(row, tb.data());
            }
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = out;
        let v = Tensor::new(&shape, data)?;
        self.push(
            v,
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            },
            "linear",
        )
    }

    // ----- reductions & layout -----

    pub fn reduce(&mut self, x: Var, kind: Reduce, axis: usize) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(Error::Contract(format!(
                "reduce axis {axis} out of range for shape {:?}",
                tx.shape()
            )));
        }
        let shape = tx.shape();
        let axes = Axes {
            outer: shape[..axis].iter().product(),
            extent: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        };
        let mut out = vec![T::zero(); axes.outer * axes.inner];
        let mut argmax = Vec::new();
        let d = tx.data();
        match kind {
            Reduce::Sum | Reduce::Mean => {
                for o in 0..axes.outer {
                    for e in 0..axes.extent {
                        let src = &d[(o * axes.extent + e) * axes.inner..][..axes.inner];
                        kernels::add_into(&mut out[o * axes.inner..(o + 1) * axes.inner], src);
                    }
                }
                if kind == Reduce::Mean {
                    let s = T::one() / T::lit(axes.extent as f64);
                    out.iter_mut().for_each(|v| *v *= s);
                }
            }
            Reduce::Max => {
                argmax = vec![0; out.len()];
                for o in 0..axes.outer {
                    for i in 0..axes.inner {
                        let mut best = 0;
                        let mut best_v = d[o * axes.extent * axes.inner + i];
                        for e in 1..axes.extent {
                            let v = d[(o * axes.extent + e) * axes.inner + i];
                            if v > best_v {
                                best_v = v;
                                best = e;
                            }
                        }
                        out[o * axes.inner + i] = best_v;
                        argmax[o * axes.inner + i] = best;
                    }
                }
            }
        }
        let mut new_shape: Vec<usize> = shape[..axis].to_vec();
        new_shape.extend_from_slice(&shape[axis + 1..]);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        let v = Tensor::new(&new_shape, out)?;
        self.push(
            v,
            Op::Reduce {
                x,
                kind,
                axes,
                argmax,
            },
            "reduce",
        )
    }

    pub fn sum(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Sum, axis)
    }

    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Mean, axis)
    }

    pub fn max(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(x, Reduce::Max, axis)
    }

    /// Sum of every element, as a one-element tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let flat = self.reshape(x, &[n])?;
        self.sum(flat, 0)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape)?;
        self.push(v, Op::Reshape(x), "reshape")
    }

    /// `out[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= tx.len()) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for {} elements",
                tx.len()
            )));
        }
        let data: Vec<T> = index.iter().map(|&i| tx.data()[i]).collect();
        let v = Tensor::new(shape, data)?;
        self.push(v, Op::Gather { x, index }, "gather")
    }

    /// Flat concatenation of every input, as a rank-1 tensor.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::Contract("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &x in xs {
            data.extend_from_slice(self.value(x).data());
        }
        let n = data.len();
        let v = Tensor::new(&[n], data)?;
        self.push(v, Op::Concat(xs.to_vec()), "concat")
    }

    // ----- normalization -----

    fn norm_check(&self, x: Var, gamma: Var, beta: Var) -> Result<usize> {
        let ch = *self.shape(x).last().unwrap();
        if self.value(gamma).len() != ch || self.value(beta).len() != ch {
            return Err(Error::shape("norm", self.shape(x), self.shape(gamma)));
        }
        Ok(ch)
    }

    fn finish_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        xhat: Vec<T>,
        rstd: Vec<T>,
    ) -> Result<Var> {
        let ch = self.norm_check(x, gamma, beta)?;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = xhat.clone();
        for row in out.chunks_mut(ch) {
            for ((o, &gv), &bv) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gv + bv;
            }
        }
        let v = Tensor::new(self.shape(x), out)?;
        self.push(
            v,
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                ch,
                xhat,
                rstd,
            },
            "norm",
        )
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let ch = self.norm_check(x, gamma, beta)?;
        let d = self.value(x).data();
        let rows = d.len() / ch;
        let mut xhat = vec![T::zero(); d.len()];
        let mut rstd = vec![T::zero(); rows];
        let inv = T::one() / T::lit(ch as f64);
        for r in 0..rows {
            let row = &d[r * ch..(r + 1) * ch];
            let mean = row.iter().copied().sum::<T>() * inv;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv;
            let s = T::one() / (var + eps).sqrt();
            rstd[r] = s;
            for (h, &v) in xhat[r * ch..(r + 1) * ch].iter_mut().zip(row) {
                *h = (v - mean) * s;
            }
        }
        self.finish_norm(x, gamma, beta, NormKind::Layer, xhat, rstd)
    }

    /// Batch normalization over the last axis using batch statistics.
    /// Returns the output plus the per-channel mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let ch = self.norm_check(x, gamma, beta)?;
        let d = self.value(x).data();
        let rows = d.len() / ch;
        let inv = T::one() / T::lit(rows as f64);
        let mut mean = vec![T::zero(); ch];
        for row in d.chunks(ch) {
            kernels::add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m *= inv);
        let mut var = vec![T::zero(); ch];
        for row in d.chunks(ch) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v / T::lit(rows.saturating_sub(1).max(1) as f64))
            .collect();
        var.iter_mut().for_each(|v| *v *= inv);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = d.to_vec();
        for row in xhat.chunks_mut(ch) {
            for ((h, &m), &s) in row.iter_mut().zip(&mean).zip(&rstd) {
                *h = (*h - m) * s;
            }
        }
        let out = self.finish_norm(x, gamma, beta, NormKind::BatchTrain, xhat, rstd)?;
        Ok((out, mean, unbiased))
    }

    /// Batch normalization with frozen running statistics.
    pub fn batch_norm_frozen(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let ch = self.norm_check(x, gamma, beta)?;
        if mean.len() != ch || var.len() != ch {
            return Err(Error::shape(
                "batch_norm stats",
                &[ch],
                &[mean.len(), var.len()],
            ));
        }
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = self.value(x).data().to_vec();
        for row in xhat.chunks_mut(ch) {
            for ((h, &m), &s) in row.iter_mut().zip(mean).zip(&rstd) {
                *h = (*h - m) * s;
            }
        }
        self.finish_norm(x, gamma, beta, NormKind::BatchFrozen, xhat, rstd)
    }

    // ----- convolution & pooling -----

    /// Single-input-channel 3×3×3 same-padded convolution.
    /// `x [batch, rows, cols, bands]`, `w [27, features]`, `b [features]` →
    /// `[batch, rows, cols, bands, features]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        if tx.rank() != 4 || tw.rank() != 2 || tw.shape()[0] != 27 || tb.len() != tw.shape()[1] {
            return Err(Error::shape("conv3d", tx.shape(), tw.shape()));
        }
        let s = tx.shape();
        let geom = Conv3dGeom {
            batch: s[0],
            rows: s[1],
            cols: s[2],
            bands: s[3],
            features: tw.shape()[1],
        };
        let mut out = vec![T::zero(); tx.len() * geom.features];
        kernels::conv3d_forward(tx.data(), tw.data(), tb.data(), &mut out, geom);
        let v = Tensor::new(&[s[0], s[1], s[2], s[3], geom.features], out)?;
        self.push(v, Op::Conv3d { x, w, b, geom }, "conv3d")
    }

    /// Depth-wise 3×3 same-padded convolution. `x [batch, p, p, ch]`,
    /// `w [9, ch]`, `b [ch]`.
    pub fn dwconv(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let s = tx.shape();
        if s.len() != 4 || s[1] != s[2] || tw.shape() != [9, s[3]] || tb.len() != s[3] {
            return Err(Error::shape("dwconv", s, tw.shape()));
        }
        let (side, ch) = (s[1], s[3]);
        let mut out = vec![T::zero(); tx.len()];
        kernels::dwconv_forward(tx.data(), tw.data(), tb.data(), &mut out, side, ch);
        let v = Tensor::new(s, out)?;
        self.push(v, Op::DwConv { x, w, b, side, ch }, "dwconv")
    }

    /// Mean over `m×m` spatial windows at stride `s`. `x [batch, P, P, ch]`.
    pub fn avg_pool(&mut self, x: Var, m: usize, s: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if shape.len() != 4 || shape[1] != shape[2] {
            return Err(Error::shape("avg_pool", shape, &[m, s]));
        }
        let (batch, side, ch) = (shape[0], shape[1], shape[3]);
        let p = kernels::pooled_side(side, m, s).ok_or_else(|| {
            Error::Config(format!(
                "pooling window {m}x{m} stride {s} does not tile a {side}x{side} grid"
            ))
        })?;
        let mut out = vec![T::zero(); batch * p * p * ch];
        kernels::avgpool_forward(tx.data(), &mut out, batch, side, ch, m, s);
        let v = Tensor::new(&[batch, p, p, ch], out)?;
        self.push(
            v,
            Op::AvgPool {
                x,
                batch,
                side,
                ch,
                m,
                s,
            },
            "avg_pool",
        )
    }

    /// `out[b, .., c] = x[b, .., c] * w[b, c]`.
    pub fn channel_scale(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if ws.len() != 2 || xs.len() < 2 || xs[0] != ws[0] || *xs.last().unwrap() != ws[1] {
            return Err(Error::shape("channel_scale", xs, ws));
        }
        let (batch, ch) = (ws[0], ws[1]);
        let per = tx.len() / batch;
        let mut out = tx.data().to_vec();
        for (b, chunk) in out.chunks_mut(per).enumerate() {
            let wrow = &tw.data()[b * ch..(b + 1) * ch];
            for row in chunk.chunks_mut(ch) {
                for (o, &wv) in row.iter_mut().zip(wrow) {
                    *o *= wv;
                }
            }
        }
        let v = Tensor::new(xs, out)?;
        self.push(v, Op::ChannelScale { x, w, batch, ch }, "channel_scale")
    }

    // ----- sequence scan -----

    /// Selective scan over `seqs` independent sequences.
    ///
    /// Shapes: `x, delta [seqs, len, width]`, `a [width, state]` (negative),
    /// `b, c [seqs, len, state]`, `d_skip [width]`.
    pub fn selective_scan(
        &mut self,
        x: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(Error::shape("selective_scan x", &xs, &[3]));
        }
        let (seqs, len, width) = (xs[0], xs[1], xs[2]);
        let a_shape = self.shape(a);
        if a_shape.len() != 2 || a_shape[0] != width {
            return Err(Error::shape("selective_scan A", &xs, a_shape));
        }
        let state = a_shape[1];
        let dims = ScanDims {
            seqs,
            len,
            width,
            state,
        };
        let checks: [(&'static str, Var, Vec<usize>); 4] = [
            ("selective_scan delta", delta, xs.clone()),
            ("selective_scan B", b, vec![seqs, len, state]),
            ("selective_scan C", c, vec![seqs, len, state]),
            ("selective_scan D", d_skip, vec![width]),
        ];
        for (name, v, want) in checks {
            if self.shape(v) != want.as_slice() {
                return Err(Error::shape(name, self.shape(v), &want));
            }
        }
        let record =
            self.grad_enabled && [x, delta, a, b, c, d_skip].iter().any(|&v| self.needs(v));
        let mut y = vec![T::zero(); seqs * len * width];
        let cache = ssm::scan_forward_kernel(
            self.value(x).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d_skip).data(),
            dims,
            &mut y,
            record,
        );
        let v = Tensor::new(&xs, y)?;
        self.push(
            v,
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d_skip,
                dims,
                cache,
            },
            "selective_scan",
        )
    }

    // ----- loss -----

    /// Mean softmax cross-entropy. `targets` are 0-based class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.rank() != 2 || tl.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", tl.shape(), &[targets.len()]));
        }
        let classes = tl.shape()[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Contract(format!(
                "target class {bad} out of range for {classes} classes"
            )));
        }
        let mut probs = vec![T::zero(); tl.len()];
        let mut loss = T::zero();
        for (i, (row, &t)) in tl.data().chunks(classes).zip(targets).enumerate() {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let p = &mut probs[i * classes..(i + 1) * classes];
            let mut z = T::zero();
            for (pv, &l) in p.iter_mut().zip(row) {
                *pv = (l - mx).exp();
                z += *pv;
            }
            p.iter_mut().for_each(|v| *v = *v / z);
            loss += z.ln() - (row[t] - mx);
        }
        let n = T::lit(targets.len() as f64);
        let v = Tensor::scalar(loss / n);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                classes,
            },
            "cross_entropy",
        )
    }

    // ----- backward -----

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(Gradients { grads })
    }

    /// Backward pass that adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let grads = self.backward(loss)?;
        for &(v, id) in &self.bindings {
            if let Some(g) = &grads.grads[v.0] {
                kernels::add_into(store.get_mut(id).grad.data_mut(), g);
            }
        }
        Ok(grads)
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) {
                    -T::one()
                } else {
                    T::one()
                };
                self.accumulate_broadcast(grads, *a, g, |_, gv| gv);
                self.accumulate_broadcast(grads, *b, g, |_, gv| sign * gv);
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let bv = |i: usize| tb.data()[if tb.len() == 1 { 0 } else { i }];
                let av = |i: usize| ta.data()[if ta.len() == 1 { 0 } else { i }];
                self.accumulate_broadcast(grads, *a, g, |i, gv| gv * bv(i));
                self.accumulate_broadcast(grads, *b, g, |i, gv| gv * av(i));
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, &gv) in dx.iter_mut().zip(g) {
                        *d += gv * *s;
                    }
                }
            }
            Op::Unary(x, u) => {
                let tx = self.value(*x).data();
                let ty = node.value.data();
                if let Some(dx) = self.slot(grads, *x) {
                    for (((d, &gv), &xv), &yv) in dx.iter_mut().zip(g).zip(tx).zip(ty) {
                        *d += gv * u.derivative(xv, yv);
                    }
                }
            }
            Op::Matmul { a, b, m, k, n } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(da) = self.slot(grads, *a) {
                    kernels::matmul_grad_lhs(g, tb, da, *m, *k, *n);
                }
                if let Some(db) = self.slot(grads, *b) {
                    kernels::matmul_grad_rhs(ta, g, db, *m, *k, *n);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                inp,
                out,
            } => {
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::matmul_grad_lhs(g, tw, dx, *rows, *inp, *out);
                }
                if let Some(dw) = self.slot(grads, *w) {
                    kernels::matmul_grad_rhs(tx, g, dw, *rows, *inp, *out);
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(*out) {
                            kernels::add_into(db, row);
                        }
                    }
                }
            }
            Op::Reduce {
                x,
                kind,
                axes,
                argmax,
            } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let scale = match kind {
                        Reduce::Mean => T::one() / T::lit(axes.extent as f64),
                        _ => T::one(),
                    };
                    for o in 0..axes.outer {
                        let gs = &g[o * axes.inner..(o + 1) * axes.inner];
                        match kind {
                            Reduce::Sum | Reduce::Mean => {
                                for e in 0..axes.extent {
                                    let dst =
                                        &mut dx[(o * axes.extent + e) * axes.inner..][..axes.inner];
                                    for (d, &gv) in dst.iter_mut().zip(gs) {
                                        *d += gv * scale;
                                    }
                                }
                            }
                            Reduce::Max => {
                                for (ii, &gv) in gs.iter().enumerate() {
                                    let e = argmax[o * axes.inner + ii];
                                    dx[(o * axes.extent + e) * axes.inner + ii] += gv;
                                }
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::add_into(dx, g);
                }
            }
            Op::Gather { x, index } => {
                if let Some(dx) = self.slot(grads, *x) {
                    for (&src, &gv) in index.iter().zip(g) {
                        dx[src] += gv;
                    }
                }
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).len();
                    if let Some(dx) = self.slot(grads, x) {
                        kernels::add_into(dx, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::Norm {
                x,
                gamma,
                beta,
                kind,
                ch,
                xhat,
                rstd,
            } => self.norm_backward(grads, g, *x, *gamma, *beta, *kind, *ch, xhat, rstd),
            Op::Conv3d { x, w, b, geom } => {
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                let mut dw = vec![T::zero(); tw.len()];
                let mut db = vec![T::zero(); geom.features];
                let mut dx_buf = self.needs(*x).then(|| vec![T::zero(); tx.len()]);
                kernels::conv3d_backward(tx, tw, g, dx_buf.as_deref_mut(), &mut dw, &mut db, *geom);
                self.add_to(grads, *w, &dw);
                self.add_to(grads, *b, &db);
                if let Some(dx) = dx_buf {
                    self.add_to(grads, *x, &dx);
                }
            }
            Op::DwConv { x, w, b, side, ch } => {
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                let mut dw = vec![T::zero(); tw.len()];
                let mut db = vec![T::zero(); *ch];
                let mut dx_buf = self.needs(*x).then(|| vec![T::zero(); tx.len()]);
                kernels::dwconv_backward(
                    tx,
                    tw,
                    g,
                    dx_buf.as_deref_mut(),
                    &mut dw,
                    &mut db,
                    *side,
                    *ch,
                );
                self.add_to(grads, *w, &dw);
                self.add_to(grads, *b, &db);
                if let Some(dx) = dx_buf {
                    self.add_to(grads, *x, &dx);
                }
            }
            Op::AvgPool {
                x,
                batch,
                side,
                ch,
                m,
                s,
            } => {
                if let Some(dx) = self.slot(grads, *x) {
                    kernels::avgpool_backward(g, dx, *batch, *side, *ch, *m, *s);
                }
            }
            Op::ChannelScale { x, w, batch, ch } => {
                let (tx, tw) = (self.value(*x).data(), self.value(*w).data());
                let per = tx.len() / batch;
                if let Some(dx) = self.slot(grads, *x) {
                    for b in 0..*batch {
                        let wrow = &tw[b * ch..(b + 1) * ch];
                        for (drow, grow) in dx[b * per..(b + 1) * per]
                            .chunks_mut(*ch)
                            .zip(g[b * per..(b + 1) * per].chunks(*ch))
                        {
                            for ((d, &gv), &wv) in drow.iter_mut().zip(grow).zip(wrow) {
                                *d += gv * wv;
                            }
                        }
                    }
                }
                if let Some(dw) = self.slot(grads, *w) {
                    for b in 0..*batch {
                        let drow = &mut dw[b * ch..(b + 1) * ch];
                        for (xrow, grow) in tx[b * per..(b + 1) * per]
                            .chunks(*ch)
                            .zip(g[b * per..(b + 1) * per].chunks(*ch))
                        {
                            for ((d, &gv), &xv) in drow.iter_mut().zip(grow).zip(xrow) {
                                *d += gv * xv;
                            }
                        }
                    }
                }
            }
            Op::Scan {
                x,
                delta,
                a,
                b,
                c,
                d_skip,
                dims,
                cache,
            } => {
                let sg = ssm::scan_backward_kernel(
                    self.value(*x).data(),
                    self.value(*delta).data(),
                    self.value(*a).data(),
                    self.value(*b).data(),
                    self.value(*c).data(),
                    self.value(*d_skip).data(),
                    *dims,
                    cache,
                    g,
                );
                self.add_to(grads, *x, &sg.dx);
                self.add_to(grads, *delta, &sg.ddelta);
                self.add_to(grads, *a, &sg.da);
                self.add_to(grads, *b, &sg.db);
                self.add_to(grads, *c, &sg.dc);
                self.add_to(grads, *d_skip, &sg.dd_skip);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                classes,
            } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let scale = g[0] / T::lit(targets.len() as f64);
                    for (i, &t) in targets.iter().enumerate() {
                        for c in 0..*classes {
                            let onehot = if c == t { T::one() } else { T::zero() };
                            dl[i * classes + c] += (probs[i * classes + c] - onehot) * scale;
                        }
                    }
                }
            }
        }
    }

    fn add_to(&self, grads: &mut [Option<Vec<T>>], v: Var, src: &[T]) {
        if let Some(d) = self.slot(grads, v) {
            kernels::add_into(d, src);
        }
    }

    /// Accumulates `f(i, g[i])` into `v`, summing when `v` was broadcast.
    fn accumulate_broadcast(
        &self,
        grads: &mut [Option<Vec<T>>],
        v: Var,
        g: &[T],
        f: impl Fn(usize, T) -> T,
    ) {
        let scalar = self.value(v).len() == 1 && g.len() != 1;
        if let Some(d) = self.slot(grads, v) {
            if scalar {
                d[0] += g.iter().enumerate().map(|(i, &gv)| f(i, gv)).sum::<T>();
            } else {
                for (i, (dv, &gv)) in d.iter_mut().zip(g).enumerate() {
                    *dv += f(i, gv);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn norm_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: Var,
        gamma: Var,
        beta: Var,
        kind: NormKind,
        ch: usize,
        xhat: &[T],
        rstd: &[T],
    ) {
        let gam = self.value(gamma).data();
        if let Some(dg) = self.slot(grads, gamma) {
            for (grow, hrow) in g.chunks(ch).zip(xhat.chunks(ch)) {
                for ((d, &gv), &h) in dg.iter_mut().zip(grow).zip(hrow) {
                    *d += gv * h;
                }
            }
        }
        if let Some(db) = self.slot(grads, beta) {
            for grow in g.chunks(ch) {
                kernels::add_into(db, grow);
            }
        }
        let Some(dx) = self.slot(grads, x) else {
            return;
        };
        let rows = g.len() / ch;
        match kind {
            NormKind::Layer => {
                let inv = T::one() / T::lit(ch as f64);
                for r in 0..rows {
                    let gr = &g[r * ch..(r + 1) * ch];
                    let hr = &xhat[r * ch..(r + 1) * ch];
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for ((&gv, &h), &gm) in gr.iter().zip(hr).zip(gam) {
                        let dh = gv * gm;
                        m1 += dh;
                        m2 += dh * h;
                    }
                    m1 *= inv;
                    m2 *= inv;
                    for (((d, &gv), &h), &gm) in
                        dx[r * ch..(r + 1) * ch].iter_mut().zip(gr).zip(hr).zip(gam)
                    {
                        *d += rstd[r] * (gv * gm - m1 - h * m2);
                    }
                }
            }
            NormKind::BatchTrain => {
                let inv = T::one() / T::lit(rows as f64);
                let mut m1 = vec![T::zero(); ch];
                let mut m2 = vec![T::zero(); ch];
                for (gr, hr) in g.chunks(ch).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        let dh = gr[c] * gam[c];
                        m1[c] += dh;
                        m2[c] += dh * hr[c];
                    }
                }
                m1.iter_mut().chain(m2.iter_mut()).for_each(|v| *v *= inv);
                for ((drow, gr), hr) in dx.chunks_mut(ch).zip(g.chunks(ch)).zip(xhat.chunks(ch)) {
                    for c in 0..ch {
                        drow[c] += rstd[c] * (gr[c] * gam[c] - m1[c] - hr[c] * m2[c]);
                    }
                }
            }
            NormKind::BatchFrozen => {
                for (drow, gr) in dx.chunks_mut(ch).zip(g.chunks(ch)) {
                    for c in 0..ch {
                        drow[c] += gr[c] * gam[c] * rstd[c];
                    }
                }
            }
        }
    }
}

/// Result of a reverse sweep: gradients for every differentiable leaf.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, tape: &Tape<T>, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(tape.shape(v), g.clone()).expect("gradient shape"))
    }
}
