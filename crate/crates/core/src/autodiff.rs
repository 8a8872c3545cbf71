//! Tape-based reverse-mode automatic differentiation over [`Real`] scalars.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s. Calling
//! [`Graph::backward`] walks the tape in reverse and accumulates gradients for
//! every node that transitively depends on a leaf created with
//! `requires_grad = true`. Instantiating the graph over [`crate::Dual`] makes
//! the whole reverse pass differentiable once more in a chosen direction.

use std::sync::Arc;

use crate::scalar::Real;
use crate::tensor::{col2im, im2col, resample2d, resample2d_adjoint, Taps, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    AddBias(Var, Var),
    ChannelScale(Var, Var),
    ChannelShift(Var, Var),
    Noise(Var, Var, Var),
    Conv2d { x: Var, w: Var, pad: usize, cols: Option<Vec<T>> },
    Linear(Var, Var),
    Resample(Var, Arc<(Taps, Taps)>),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Exp(Var),
    Square(Var),
    Rsqrt(Var),
    Sum(Var),
    SumInner(Var, usize),
    Reshape(Var),
    ConcatChannels(Vec<Var>),
    ConcatBatch(Vec<Var>),
    SliceBatch(Var, usize),
    NormalizeChannels(Var, T),
    SoftmaxXent(Var, Vec<usize>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

/// Recording of one forward computation.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients indexed by [`Var`]; `None` for nodes that do not need one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0].take()
    }
}

fn leading_and_inner(shape: &[usize]) -> (usize, usize, usize) {
    let n = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let rest: usize = shape.iter().skip(2).product();
    (n, c, rest)
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of a one-element node.
    pub fn item(&self, v: Var) -> T {
        self.nodes[v.0].value.data()[0]
    }

    fn unary(&mut self, a: Var, value: Tensor<T>, op: Op<T>) -> Var {
        let g = self.needs(a);
        self.push(value, op, g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y).expect("add shapes");
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Add(a, b), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y).expect("sub shapes");
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Sub(a, b), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y).expect("mul shapes");
        let g = self.needs(a) || self.needs(b);
        self.push(v, Op::Mul(a, b), g)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let v = self.value(a).scale(s);
        self.unary(a, v, Op::Scale(a, s))
    }

    pub fn offset(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a).map(|x| x + c);
        self.unary(a, v, Op::Offset(a))
    }

    /// `x[N, C, ...] + b[C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (n, c, rest) = leading_and_inner(self.shape(x));
        assert_eq!(self.value(b).len(), c, "bias length");
        let mut v = self.value(x).clone();
        let bd = self.value(b).data().to_vec();
        for (i, chunk) in v.data_mut().chunks_mut(rest).enumerate() {
            let bv = bd[i % c];
            chunk.iter_mut().for_each(|e| *e += bv);
        }
        debug_assert_eq!(v.len(), n * c * rest);
        let g = self.needs(x) || self.needs(b);
        self.push(v, Op::AddBias(x, b), g)
    }

    /// `x[N, C, ...] * s[N, C]` broadcast over trailing axes.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let (n, c, rest) = leading_and_inner(self.shape(x));
        assert_eq!(self.shape(s), &[n, c], "channel scale shape");
        let sd = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(rest).enumerate() {
            let sv = sd[i];
            chunk.iter_mut().for_each(|e| *e *= sv);
        }
        let g = self.needs(x) || self.needs(s);
        self.push(v, Op::ChannelScale(x, s), g)
    }

    /// `x[N, C, ...] + s[N, C]` broadcast over trailing axes.
    pub fn channel_shift(&mut self, x: Var, s: Var) -> Var {
        let (n, c, rest) = leading_and_inner(self.shape(x));
        assert_eq!(self.shape(s), &[n, c], "channel shift shape");
        let sd = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (i, chunk) in v.data_mut().chunks_mut(rest).enumerate() {
            let sv = sd[i];
            chunk.iter_mut().for_each(|e| *e += sv);
        }
        let g = self.needs(x) || self.needs(s);
        self.push(v, Op::ChannelShift(x, s), g)
    }

    /// `x[N, C, H, W] + strength[1] · noise[H, W]`.
    pub fn add_noise(&mut self, x: Var, strength: Var, noise: Var) -> Var {
        let hw = self.value(noise).len();
        let st = self.item(strength);
        let nd = self.value(noise).data().to_vec();
        let mut v = self.value(x).clone();
        for chunk in v.data_mut().chunks_mut(hw) {
            for (e, &z) in chunk.iter_mut().zip(&nd) {
                *e += st * z;
            }
        }
        let g = self.needs(x) || self.needs(strength);
        self.push(v, Op::Noise(x, strength, noise), g)
    }

    /// Stride-1 convolution of `x[N, C, H, W]` with `w[O, C, k, k]` and zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], c, "conv input channels");
        let (oh, ow) = (h + 2 * pad + 1 - k, wd + 2 * pad + 1 - k);
        let ckk = c * k * k;
        let direct = k == 1 && pad == 0;
        // patches are kept for the weight gradient
        let keep = self.needs(w) && !direct;
        let mut out = vec![T::zero(); n * o * oh * ow];
        let mut cols = vec![T::zero(); if direct { 0 } else if keep { n * ckk * oh * ow } else { ckk * oh * ow }];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for i in 0..n {
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            let src: &[T] = if direct {
                xi
            } else {
                let off = if keep { i * ckk * oh * ow } else { 0 };
                let buf = &mut cols[off..off + ckk * oh * ow];
                im2col(xi, c, h, wd, k, pad, buf);
                buf
            };
            let dst = &mut out[i * o * oh * ow..(i + 1) * o * oh * ow];
            T::gemm(o, ckk, oh * ow, T::one(), wv, (ckk, 1), src, (oh * ow, 1), T::zero(), dst, (oh * ow, 1));
        }
        let v = Tensor::from_vec(&[n, o, oh, ow], out).expect("conv shape");
        let g = self.needs(x) || self.needs(w);
        let cols = if keep { Some(cols) } else { None };
        self.push(v, Op::Conv2d { x, w, pad, cols }, g)
    }

    /// Dense layer `x[N, I] · w[O, I]ᵀ`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        let (n, i) = (self.shape(x)[0], self.shape(x)[1]);
        let o = self.shape(w)[0];
        assert_eq!(self.shape(w)[1], i, "linear input size");
        let mut out = vec![T::zero(); n * o];
        T::gemm(n, i, o, T::one(), self.value(x).data(), (i, 1), self.value(w).data(), (1, i), T::zero(), &mut out, (o, 1));
        let v = Tensor::from_vec(&[n, o], out).expect("linear shape");
        let g = self.needs(x) || self.needs(w);
        self.push(v, Op::Linear(x, w), g)
    }

    /// Separable linear resampling of the two trailing axes.
    pub fn resample(&mut self, x: Var, taps: Arc<(Taps, Taps)>) -> Var {
        let v = resample2d(self.value(x), &taps.0, &taps.1);
        self.unary(x, v, Op::Resample(x, taps))
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let taps = Arc::new((Taps::bilinear(h, 2 * h), Taps::bilinear(w, 2 * w)));
        self.resample(x, taps)
    }

    pub fn avgpool2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let taps = Arc::new((Taps::box_down(h, 2), Taps::box_down(w, 2)));
        self.resample(x, taps)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let v = self.value(x).map(|e| if e > T::zero() { e } else { e * slope });
        self.unary(x, v, Op::LeakyRelu(x, slope))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, T::zero())
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| T::one() / (T::one() + (-e).exp()));
        self.unary(x, v, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.exp());
        self.unary(x, v, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e * e);
        self.unary(x, v, Op::Square(x))
    }

    pub fn rsqrt(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|e| e.sqrt().recip());
        self.unary(x, v, Op::Rsqrt(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.unary(x, v, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Sums contiguous blocks of `inner` elements, giving shape `[len / inner]`.
    pub fn sum_inner(&mut self, x: Var, inner: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.len() % inner, 0, "sum_inner block");
        let data: Vec<T> = xv.data().chunks(inner).map(|c| c.iter().copied().sum()).collect();
        let v = Tensor::from_vec(&[data.len()], data).expect("sum_inner shape");
        self.unary(x, v, Op::SumInner(x, inner))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        self.unary(x, v, Op::Reshape(x))
    }

    pub fn concat_channels(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let n = first[0];
        let rest: usize = first[2..].iter().product();
        let total_c: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
        let mut out = Vec::with_capacity(n * total_c * rest);
        for i in 0..n {
            for &v in xs {
                let s = self.shape(v);
                assert_eq!((s[0], &s[2..]), (n, &first[2..]), "concat shapes");
                let blk = s[1] * rest;
                out.extend_from_slice(&self.value(v).data()[i * blk..(i + 1) * blk]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let v = Tensor::from_vec(&shape, out).expect("concat shape");
        let g = xs.iter().any(|&v| self.needs(v));
        self.push(v, Op::ConcatChannels(xs.to_vec()), g)
    }

    pub fn concat_batch(&mut self, xs: &[Var]) -> Var {
        let first = self.shape(xs[0]).to_vec();
        let mut out = Vec::new();
        let mut n = 0;
        for &v in xs {
            assert_eq!(&self.shape(v)[1..], &first[1..], "concat batch shapes");
            n += self.shape(v)[0];
            out.extend_from_slice(self.value(v).data());
        }
        let mut shape = first;
        shape[0] = n;
        let v = Tensor::from_vec(&shape, out).expect("concat shape");
        let g = xs.iter().any(|&v| self.needs(v));
        self.push(v, Op::ConcatBatch(xs.to_vec()), g)
    }

    /// Items `start..start + len` of the leading axis.
    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        let data = self.value(x).data()[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let v = Tensor::from_vec(&shape, data).expect("slice shape");
        self.unary(x, v, Op::SliceBatch(x, start))
    }

    /// Unit-normalizes the channel vector at every position of `x[N, C, ...]`.
    pub fn normalize_channels(&mut self, x: Var, eps: T) -> Var {
        let (n, c, rest) = leading_and_inner(self.shape(x));
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for p in 0..rest {
                let mut ss = eps;
                for ch in 0..c {
                    let e = xv[(i * c + ch) * rest + p];
                    ss += e * e;
                }
                let r = ss.sqrt().recip();
                for ch in 0..c {
                    let idx = (i * c + ch) * rest + p;
                    out[idx] = xv[idx] * r;
                }
            }
        }
        let v = Tensor::from_vec(self.shape(x), out).expect("normalize shape");
        self.unary(x, v, Op::NormalizeChannels(x, eps))
    }

    /// Mean softmax cross-entropy of `logits[N, K]` against integer labels.
    pub fn softmax_xent(&mut self, logits: Var, labels: &[usize]) -> Var {
        let (n, k) = (self.shape(logits)[0], self.shape(logits)[1]);
        assert_eq!(labels.len(), n);
        let lv = self.value(logits).data();
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &lv[i * k..(i + 1) * k];
            let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
            let lse = m + row.iter().map(|&e| (e - m).exp()).sum::<T>().ln();
            total += lse - row[y];
        }
        let v = Tensor::scalar(total / T::from_usize(n).unwrap());
        self.unary(logits, v, Op::SoftmaxXent(logits, labels.to_vec()))
    }

    /// Reverse pass from a one-element node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|e| -e));
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    self.accumulate(grads, *a, g.zip_map(self.value(*b), |x, y| x * y).unwrap());
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, g.zip_map(self.value(*a), |x, y| x * y).unwrap());
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.scale(*s)),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*b) {
                    let (_, c, rest) = leading_and_inner(g.shape());
                    let mut gb = vec![T::zero(); c];
                    for (i, chunk) in g.data().chunks(rest).enumerate() {
                        gb[i % c] += chunk.iter().copied().sum();
                    }
                    let shape = self.shape(*b).to_vec();
                    self.accumulate(grads, *b, Tensor::from_vec(&shape, gb).unwrap());
                }
            }
            Op::ChannelScale(x, s) => {
                let (_, _, rest) = leading_and_inner(g.shape());
                let sd = self.value(*s).data();
                if self.needs(*x) {
                    let mut gx = g.clone();
                    for (i, chunk) in gx.data_mut().chunks_mut(rest).enumerate() {
                        let sv = sd[i];
                        chunk.iter_mut().for_each(|e| *e *= sv);
                    }
                    self.accumulate(grads, *x, gx);
                }
                if self.needs(*s) {
                    let xd = self.value(*x).data();
                    let gs: Vec<T> = g
                        .data()
                        .chunks(rest)
                        .zip(xd.chunks(rest))
                        .map(|(gc, xc)| gc.iter().zip(xc).map(|(&a, &b)| a * b).sum())
                        .collect();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::from_vec(&shape, gs).unwrap());
                }
            }
            Op::ChannelShift(x, s) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*s) {
                    let (_, _, rest) = leading_and_inner(g.shape());
                    let gs: Vec<T> = g.data().chunks(rest).map(|c| c.iter().copied().sum()).collect();
                    let shape = self.shape(*s).to_vec();
                    self.accumulate(grads, *s, Tensor::from_vec(&shape, gs).unwrap());
                }
            }
            Op::Noise(x, strength, noise) => {
                self.accumulate(grads, *x, g.clone());
                if self.needs(*strength) {
                    let nd = self.value(*noise).data();
                    let gs: T = g.data().chunks(nd.len()).map(|c| c.iter().zip(nd).map(|(&a, &b)| a * b).sum::<T>()).sum();
                    self.accumulate(grads, *strength, Tensor::scalar(gs));
                }
            }
            Op::Conv2d { x, w, pad, cols } => self.conv_backward(*x, *w, *pad, cols.as_deref(), g, grads),
            Op::Linear(x, w) => {
                let (n, i) = (self.shape(*x)[0], self.shape(*x)[1]);
                let o = self.shape(*w)[0];
                if self.needs(*x) {
                    let mut gx = vec![T::zero(); n * i];
                    T::gemm(n, o, i, T::one(), g.data(), (o, 1), self.value(*w).data(), (i, 1), T::zero(), &mut gx, (i, 1));
                    self.accumulate(grads, *x, Tensor::from_vec(&[n, i], gx).unwrap());
                }
                if self.needs(*w) {
                    let mut gw = vec![T::zero(); o * i];
                    T::gemm(o, n, i, T::one(), g.data(), (1, o), self.value(*x).data(), (i, 1), T::zero(), &mut gw, (i, 1));
                    self.accumulate(grads, *w, Tensor::from_vec(&[o, i], gw).unwrap());
                }
            }
            Op::Resample(x, taps) => self.accumulate(grads, *x, resample2d_adjoint(g, &taps.0, &taps.1)),
            Op::LeakyRelu(x, slope) => {
                let gx = g.zip_map(self.value(*x), |gi, xi| if xi > T::zero() { gi } else { gi * *slope }).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Sigmoid(x) => {
                let gx = g.zip_map(&node.value, |gi, y| gi * y * (T::one() - y)).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.zip_map(&node.value, |gi, y| gi * y).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Square(x) => {
                let two = T::lit(2.0);
                let gx = g.zip_map(self.value(*x), |gi, xi| gi * two * xi).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Rsqrt(x) => {
                let h = T::lit(-0.5);
                let gx = g.zip_map(&node.value, |gi, y| gi * h * y * y * y).unwrap();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let s = g.data()[0];
                self.accumulate(grads, *x, Tensor::full(self.shape(*x), s));
            }
            Op::SumInner(x, inner) => {
                let mut gx = Vec::with_capacity(self.value(*x).len());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat(gi).take(*inner));
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, gx).unwrap());
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(&shape).unwrap());
            }
            Op::ConcatChannels(xs) => {
                let s = g.shape();
                let (n, rest) = (s[0], s[2..].iter().product::<usize>());
                let mut offset = 0;
                let total = s[1] * rest;
                for &v in xs {
                    let c = self.shape(v)[1];
                    if self.needs(v) {
                        let mut gv = Vec::with_capacity(n * c * rest);
                        for i in 0..n {
                            let base = i * total + offset * rest;
                            gv.extend_from_slice(&g.data()[base..base + c * rest]);
                        }
                        let shape = self.shape(v).to_vec();
                        self.accumulate(grads, v, Tensor::from_vec(&shape, gv).unwrap());
                    }
                    offset += c;
                }
            }
            Op::ConcatBatch(xs) => {
                let mut offset = 0;
                for &v in xs {
                    let len = self.value(v).len();
                    if self.needs(v) {
                        let shape = self.shape(v).to_vec();
                        let gv = g.data()[offset..offset + len].to_vec();
                        self.accumulate(grads, v, Tensor::from_vec(&shape, gv).unwrap());
                    }
                    offset += len;
                }
            }
            Op::SliceBatch(x, start) => {
                let shape = self.shape(*x).to_vec();
                let inner: usize = shape[1..].iter().product();
                let mut gx = Tensor::zeros(&shape);
                gx.data_mut()[start * inner..start * inner + g.len()].copy_from_slice(g.data());
                self.accumulate(grads, *x, gx);
            }
            Op::NormalizeChannels(x, eps) => {
                let (n, c, rest) = leading_and_inner(g.shape());
                let xv = self.value(*x).data();
                let gd = g.data();
                let mut gx = vec![T::zero(); xv.len()];
                for i in 0..n {
                    for p in 0..rest {
                        let mut ss = *eps;
                        let mut dot = T::zero();
                        for ch in 0..c {
                            let idx = (i * c + ch) * rest + p;
                            ss += xv[idx] * xv[idx];
                            dot += xv[idx] * gd[idx];
                        }
                        let r = ss.sqrt().recip();
                        let r3 = r * r * r;
                        for ch in 0..c {
                            let idx = (i * c + ch) * rest + p;
                            gx[idx] = gd[idx] * r - xv[idx] * r3 * dot;
                        }
                    }
                }
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::from_vec(&shape, gx).unwrap());
            }
            Op::SoftmaxXent(logits, labels) => {
                let (n, k) = (self.shape(*logits)[0], self.shape(*logits)[1]);
                let lv = self.value(*logits).data();
                let scale = g.data()[0] / T::from_usize(n).unwrap();
                let mut gl = vec![T::zero(); n * k];
                for (i, &y) in labels.iter().enumerate() {
                    let row = &lv[i * k..(i + 1) * k];
                    let m = row.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                    let z: T = row.iter().map(|&e| (e - m).exp()).sum();
                    for j in 0..k {
                        let p = (row[j] - m).exp() / z;
                        let t = if j == y { T::one() } else { T::zero() };
                        gl[i * k + j] = (p - t) * scale;
                    }
                }
                self.accumulate(grads, *logits, Tensor::from_vec(&[n, k], gl).unwrap());
            }
        }
    }

    fn conv_backward(&self, x: Var, w: Var, pad: usize, saved: Option<&[T]>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let (oh, ow) = (g.shape()[2], g.shape()[3]);
        let (ckk, hw) = (c * k * k, oh * ow);
        let direct = k == 1 && pad == 0;
        let same = !direct && 2 * pad + 1 == k;
        let (need_x, need_w) = (self.needs(x), self.needs(w));
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut gw = if need_w { vec![T::zero(); o * ckk] } else { Vec::new() };
        let mut gx = if need_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
        let mut cols = vec![T::zero(); if direct || saved.is_some() { 0 } else { ckk * hw }];
        // "same" padding: the input gradient is a convolution of the output
        // gradient with the flipped, transposed kernel
        let flipped: Vec<T> = if need_x && same {
            let mut f = vec![T::zero(); c * o * k * k];
            for oi in 0..o {
                for ci in 0..c {
                    for ky in 0..k {
                        for kx in 0..k {
                            f[((ci * o + oi) * k + (k - 1 - ky)) * k + (k - 1 - kx)] = wv[((oi * c + ci) * k + ky) * k + kx];
                        }
                    }
                }
            }
            f
        } else {
            Vec::new()
        };
        let okk = o * k * k;
        let mut gcols = vec![T::zero(); if !need_x || direct { 0 } else if same { okk * hw } else { ckk * hw }];
        for i in 0..n {
            let gi = &g.data()[i * o * hw..(i + 1) * o * hw];
            let xi = &xv[i * c * h * wd..(i + 1) * c * h * wd];
            if need_w {
                let src: &[T] = if direct {
                    xi
                } else if let Some(sv) = saved {
                    &sv[i * ckk * hw..(i + 1) * ckk * hw]
                } else {
                    im2col(xi, c, h, wd, k, pad, &mut cols);
                    &cols
                };
                T::gemm(o, hw, ckk, T::one(), gi, (hw, 1), src, (1, hw), T::one(), &mut gw, (ckk, 1));
            }
            if need_x {
                let dst = &mut gx[i * c * h * wd..(i + 1) * c * h * wd];
                if direct {
                    T::gemm(ckk, o, hw, T::one(), wv, (1, ckk), gi, (hw, 1), T::zero(), dst, (hw, 1));
                } else if same {
                    im2col(gi, o, oh, ow, k, pad, &mut gcols);
                    T::gemm(c, okk, hw, T::one(), &flipped, (okk, 1), &gcols, (hw, 1), T::zero(), dst, (hw, 1));
                } else {
                    T::gemm(ckk, o, hw, T::one(), wv, (1, ckk), gi, (hw, 1), T::zero(), &mut gcols, (hw, 1));
                    col2im(&gcols, c, h, wd, k, pad, dst);
                }
            }
        }
        if need_w {
            self.accumulate(grads, w, Tensor::from_vec(&ws, gw).unwrap());
        }
        if need_x {
            self.accumulate(grads, x, Tensor::from_vec(&xs, gx).unwrap());
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Checks d(sum(f(x) * probe))/dx against central differences.
    fn check_unary(build: impl Fn(&mut Graph<f64>, Var) -> Var, shape: &[usize]) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x0 = Tensor::<f64>::randn(shape, 1.0, &mut rng);
        let probe_shape = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = build(&mut g, x);
            g.shape(y).to_vec()
        };
        let probe = Tensor::<f64>::randn(&probe_shape, 1.0, &mut rng);
        let eval = |xt: &Tensor<f64>| -> (f64, Option<Tensor<f64>>) {
            let mut g = Graph::new();
            let x = g.param(xt.clone());
            let y = build(&mut g, x);
            let p = g.constant(probe.clone());
            let m = g.mul(y, p);
            let s = g.sum(m);
            let grads = g.backward(s);
            (g.item(s), grads.get(x).cloned())
        };
        let (_, ga) = eval(&x0);
        let ga = ga.unwrap();
        let h = 1e-6;
        for i in 0..x0.len() {
            let mut xp = x0.clone();
            xp.data_mut()[i] += h;
            let mut xm = x0.clone();
            xm.data_mut()[i] -= h;
            let fd = (eval(&xp).0 - eval(&xm).0) / (2.0 * h);
            let an = ga.data()[i];
            assert!((fd - an).abs() <= 1e-6 * (1.0 + fd.abs()), "index {i}: fd {fd} vs analytic {an}");
        }
    }

    #[test]
    fn conv_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = Tensor::<f64>::randn(&[4, 2, 3, 3], 0.5, &mut rng);
        check_unary(
            move |g, x| {
                let w = g.constant(w.clone());
                g.conv2d(x, w, 1)
            },
            &[2, 2, 5, 4],
        );
        let x = Tensor::<f64>::randn(&[2, 3, 4, 4], 1.0, &mut rng);
        check_unary(
            move |g, w| {
                let x = g.constant(x.clone());
                g.conv2d(x, w, 1)
            },
            &[2, 3, 3, 3],
        );
    }

    #[test]
    fn pointwise_and_layout_gradients() {
        check_unary(|g, x| g.sigmoid(x), &[3, 4]);
        check_unary(|g, x| g.exp(x), &[3, 4]);
        check_unary(|g, x| g.leaky_relu(x, 0.2), &[3, 4]);
        check_unary(
            |g, x| {
                let s = g.square(x);
                let o = g.offset(s, 1.0);
                g.rsqrt(o)
            },
            &[7],
        );
        check_unary(|g, x| g.upsample2x(x), &[1, 2, 3, 3]);
        check_unary(|g, x| g.avgpool2(x), &[2, 1, 4, 4]);
        check_unary(|g, x| g.normalize_channels(x, 1e-3), &[2, 3, 2, 2]);
        check_unary(|g, x| g.sum_inner(x, 3), &[2, 6]);
        check_unary(
            |g, x| {
                let a = g.slice_batch(x, 1, 2);
                let b = g.slice_batch(x, 0, 1);
                let c = g.concat_batch(&[a, b]);
                let d = g.concat_channels(&[c, c]);
                g.square(d)
            },
            &[3, 2, 2, 2],
        );
        check_unary(
            |g, x| {
                let l = g.reshape(x, &[2, 3]);
                g.softmax_xent(l, &[2, 0])
            },
            &[6],
        );
    }

    #[test]
    fn broadcast_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = Tensor::<f64>::randn(&[2, 3], 1.0, &mut rng);
        let s2 = s.clone();
        check_unary(
            move |g, x| {
                let sv = g.constant(s.clone());
                let y = g.channel_scale(x, sv);
                g.channel_shift(y, sv)
            },
            &[2, 3, 2, 2],
        );
        let x = Tensor::<f64>::randn(&[2, 3, 2, 2], 1.0, &mut rng);
        check_unary(
            move |g, s| {
                let xv = g.constant(x.clone());
                let y = g.channel_scale(xv, s);
                let y = g.channel_shift(y, s);
                g.square(y)
            },
            &[2, 3],
        );
        let _ = s2;
        check_unary(
            |g, b| {
                let x = g.constant(Tensor::full(&[2, 3, 2], 0.5));
                let y = g.add_bias(x, b);
                g.square(y)
            },
            &[3],
        );
        let noise = Tensor::<f64>::randn(&[2, 2], 1.0, &mut rng);
        check_unary(
            move |g, st| {
                let x = g.constant(Tensor::full(&[2, 3, 2, 2], 0.1));
                let nz = g.constant(noise.clone());
                let y = g.add_noise(x, st, nz);
                g.square(y)
            },
            &[1],
        );
        let w = Tensor::<f64>::randn(&[4, 3], 1.0, &mut rng);
        check_unary(
            move |g, x| {
                let wv = g.constant(w.clone());
                g.linear(x, wv)
            },
            &[2, 3],
        );
    }

    #[test]
    fn unused_branches_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.param(Tensor::scalar(2.0));
        let b = g.constant(Tensor::scalar(3.0));
        let c = g.mul(a, b);
        let grads = g.backward(c);
        assert_eq!(grads.get(a).unwrap().data(), &[3.0]);
        assert!(grads.get(b).is_none());
    }
}
