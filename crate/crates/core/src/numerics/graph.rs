//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied while building a loss; calling
//! [`Graph::backward`] walks the tape in reverse and accumulates d(loss)/dp
//! into a [`ParamStore`]. The [`Eval`] context runs the same forward
//! functions without recording, so training and inference share one
//! implementation of the math.

use std::collections::HashMap;

use super::kernels as k;
use super::store::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// View of a parameter store used while building a forward pass. Frozen
/// sets contribute constants; trainable sets contribute differentiable
/// leaves whose gradients land back in the store.
#[derive(Clone)]
pub struct ParamSet<'a> {
    pub store: &'a ParamStore,
    pub trainable: bool,
    prefix: String,
}

impl<'a> ParamSet<'a> {
    pub fn trainable(store: &'a ParamStore) -> ParamSet<'a> {
        ParamSet { store, trainable: true, prefix: String::new() }
    }

    pub fn frozen(store: &'a ParamStore) -> ParamSet<'a> {
        ParamSet { store, trainable: false, prefix: String::new() }
    }

    pub fn sub(&self, seg: &str) -> ParamSet<'a> {
        let prefix = if self.prefix.is_empty() {
            seg.to_string()
        } else {
            format!("{}.{}", self.prefix, seg)
        };
        ParamSet { store: self.store, trainable: self.trainable, prefix }
    }

    pub fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }
}

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Value(usize);

enum Op {
    Leaf { param: Option<String> },
    Add(Value, Value),
    Sub(Value, Value),
    Mul(Value, Value),
    AddScalar(Value),
    MulScalar(Value, f64),
    AddBias(Value, Value),
    AddChannels(Value, Value),
    Film { x: Value, s: Value, b: Value },
    Matmul(Value, Value),
    Transpose(Value),
    Reshape(Value),
    SliceFirst { x: Value, r0: usize },
    SliceLast { x: Value, c0: usize },
    ConcatFirst(Vec<Value>),
    ConcatLast(Vec<Value>),
    SoftmaxRows(Value),
    Gelu(Value),
    Silu(Value),
    Exp(Value),
    Abs(Value),
    SumAll(Value),
    MeanAll(Value),
    LayerNorm { x: Value, gamma: Value, beta: Value },
    GroupNorm { x: Value, groups: usize, gamma: Value, beta: Value },
    Conv2d { x: Value, w: Value, b: Value, geom: k::ConvGeom },
    ConvT2d { x: Value, w: Value, b: Value, geom: k::ConvTGeom },
    NearestResize { x: Value, hi: usize, wi: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Operation context: either a recording [`Graph`] or the pure [`Eval`].
pub trait Ctx {
    type T: Clone;

    fn constant(&mut self, t: Tensor) -> Self::T;
    fn param(&mut self, set: &ParamSet<'_>, name: &str) -> Result<Self::T>;
    /// Materializes the tensor behind a handle (cheap: buffers are shared).
    fn value(&self, t: &Self::T) -> Tensor;
    fn shape_of(&self, t: &Self::T) -> Vec<usize>;

    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn sub(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn mul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_scalar(&mut self, a: &Self::T, c: f64) -> Result<Self::T>;
    fn mul_scalar(&mut self, a: &Self::T, c: f64) -> Result<Self::T>;
    fn add_bias(&mut self, x: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn add_channels(&mut self, x: &Self::T, v: &Self::T) -> Result<Self::T>;
    fn film(&mut self, x: &Self::T, s: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T>;
    fn transpose(&mut self, a: &Self::T) -> Result<Self::T>;
    fn reshape(&mut self, a: &Self::T, shape: &[usize]) -> Result<Self::T>;
    fn slice_first(&mut self, a: &Self::T, r0: usize, r1: usize) -> Result<Self::T>;
    fn slice_last(&mut self, a: &Self::T, c0: usize, c1: usize) -> Result<Self::T>;
    fn concat_first(&mut self, xs: &[Self::T]) -> Result<Self::T>;
    fn concat_last(&mut self, xs: &[Self::T]) -> Result<Self::T>;
    fn softmax_rows(&mut self, a: &Self::T) -> Result<Self::T>;
    fn gelu(&mut self, a: &Self::T) -> Result<Self::T>;
    fn silu(&mut self, a: &Self::T) -> Result<Self::T>;
    fn exp(&mut self, a: &Self::T) -> Result<Self::T>;
    fn abs(&mut self, a: &Self::T) -> Result<Self::T>;
    fn sum_all(&mut self, a: &Self::T) -> Result<Self::T>;
    fn mean_all(&mut self, a: &Self::T) -> Result<Self::T>;
    fn layer_norm(&mut self, x: &Self::T, gamma: &Self::T, beta: &Self::T) -> Result<Self::T>;
    fn group_norm(
        &mut self,
        x: &Self::T,
        groups: usize,
        gamma: &Self::T,
        beta: &Self::T,
    ) -> Result<Self::T>;
    fn conv2d(
        &mut self,
        x: &Self::T,
        w: &Self::T,
        b: &Self::T,
        stride: usize,
        pad: usize,
    ) -> Result<Self::T>;
    fn convt2d(
        &mut self,
        x: &Self::T,
        w: &Self::T,
        b: &Self::T,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Self::T>;
    fn nearest_resize(&mut self, x: &Self::T, ho: usize, wo: usize) -> Result<Self::T>;
}

// ---------------------------------------------------------------------------
// Shared forward math
// ---------------------------------------------------------------------------

mod fwd {
    use super::*;

    pub fn zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64, what: &str) -> Result<Tensor> {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(Tensor::from_parts(a.shape().to_vec(), data))
    }

    pub fn add_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
        let kdim = *x.shape().last().ok_or_else(|| Error::shape("add_bias on rank-0"))?;
        if b.shape() != [kdim] {
            return Err(Error::shape(format!(
                "add_bias: bias {:?} does not match last dim {kdim}",
                b.shape()
            )));
        }
        let bd = b.data();
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bd[i % kdim])
            .collect();
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn per_channel(
        x: &Tensor,
        v: &Tensor,
        f: impl Fn(f64, f64) -> f64,
        what: &str,
    ) -> Result<Tensor> {
        if x.rank() < 2 || v.shape() != [x.shape()[0]] {
            return Err(Error::shape(format!(
                "{what}: x {:?} with channel vector {:?}",
                x.shape(),
                v.shape()
            )));
        }
        let c = x.shape()[0];
        let inner = x.len() / c;
        let mut data = Vec::with_capacity(x.len());
        for ch in 0..c {
            let vv = v.data()[ch];
            for &xi in &x.data()[ch * inner..(ch + 1) * inner] {
                data.push(f(xi, vv));
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn film(x: &Tensor, s: &Tensor, b: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 || s.shape() != [x.shape()[0]] || b.shape() != [x.shape()[0]] {
            return Err(Error::shape(format!(
                "film: x {:?}, scale {:?}, shift {:?}",
                x.shape(),
                s.shape(),
                b.shape()
            )));
        }
        let c = x.shape()[0];
        let inner = x.len() / c;
        let mut data = Vec::with_capacity(x.len());
        for ch in 0..c {
            let (sv, bv) = (s.data()[ch], b.data()[ch]);
            for &xi in &x.data()[ch * inner..(ch + 1) * inner] {
                data.push(xi * (1.0 + sv) + bv);
            }
        }
        Ok(Tensor::from_parts(x.shape().to_vec(), data))
    }

    pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(Error::shape(format!(
                "matmul: {:?} x {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (m, kk) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        k::gemm_nn(m, kk, n, a.data(), b.data(), &mut c, 0.0);
        Ok(Tensor::from_parts(vec![m, n], c))
    }

    pub fn transpose(a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!("transpose wants rank 2, got {:?}", a.shape())));
        }
        let (m, n) = (a.shape()[0], a.shape()[1]);
        let src = a.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(Tensor::from_parts(vec![n, m], data))
    }

    pub fn slice_first(a: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
        let rows = a.shape()[0];
        if r0 >= r1 || r1 > rows {
            return Err(Error::shape(format!("slice_first {r0}..{r1} of {rows} rows")));
        }
        let inner = a.len() / rows;
        let mut shape = a.shape().to_vec();
        shape[0] = r1 - r0;
        Ok(Tensor::from_parts(shape, a.data()[r0 * inner..r1 * inner].to_vec()))
    }

    pub fn slice_last(a: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        let kdim = *a.shape().last().unwrap();
        if c0 >= c1 || c1 > kdim {
            return Err(Error::shape(format!("slice_last {c0}..{c1} of {kdim} columns")));
        }
        let rows = a.len() / kdim;
        let width = c1 - c0;
        let mut data = Vec::with_capacity(rows * width);
        for r in 0..rows {
            data.extend_from_slice(&a.data()[r * kdim + c0..r * kdim + c1]);
        }
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = width;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat_first(xs: &[Tensor]) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let tail = &first.shape()[1..];
        let mut rows = 0;
        for x in xs {
            if &x.shape()[1..] != tail {
                return Err(Error::shape("concat_first: trailing dims differ"));
            }
            rows += x.shape()[0];
        }
        let mut shape = first.shape().to_vec();
        shape[0] = rows;
        let mut data = Vec::with_capacity(shape.iter().product());
        for x in xs {
            data.extend_from_slice(x.data());
        }
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn concat_last(xs: &[Tensor]) -> Result<Tensor> {
        let first = xs.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let lead = &first.shape()[..first.rank() - 1];
        let rows: usize = lead.iter().product();
        let mut kdim = 0;
        for x in xs {
            if &x.shape()[..x.rank() - 1] != lead {
                return Err(Error::shape("concat_last: leading dims differ"));
            }
            kdim += x.shape().last().unwrap();
        }
        let mut data = Vec::with_capacity(rows * kdim);
        for r in 0..rows {
            for x in xs {
                let xk = *x.shape().last().unwrap();
                data.extend_from_slice(&x.data()[r * xk..(r + 1) * xk]);
            }
        }
        let mut shape = first.shape().to_vec();
        *shape.last_mut().unwrap() = kdim;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn softmax_rows(a: &Tensor) -> Result<Tensor> {
        if a.rank() != 2 {
            return Err(Error::shape(format!("softmax_rows wants rank 2, got {:?}", a.shape())));
        }
        let (r, c) = (a.shape()[0], a.shape()[1]);
        Ok(Tensor::from_parts(vec![r, c], k::softmax_rows_fwd(a.data(), r, c)))
    }

    pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        let kdim = *x.shape().last().unwrap();
        if gamma.shape() != [kdim] || beta.shape() != [kdim] {
            return Err(Error::shape(format!(
                "layer_norm: affine {:?}/{:?} vs last dim {kdim}",
                gamma.shape(),
                beta.shape()
            )));
        }
        let rows = x.len() / kdim;
        Ok(Tensor::from_parts(
            x.shape().to_vec(),
            k::layer_norm_fwd(x.data(), rows, kdim, gamma.data(), beta.data()),
        ))
    }

    pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        if x.rank() < 2 {
            return Err(Error::shape("group_norm wants rank >= 2"));
        }
        let c = x.shape()[0];
        if c % groups != 0 || gamma.shape() != [c] || beta.shape() != [c] {
            return Err(Error::shape(format!(
                "group_norm: {c} channels, {groups} groups, affine {:?}",
                gamma.shape()
            )));
        }
        let hw = x.len() / c;
        Ok(Tensor::from_parts(
            x.shape().to_vec(),
            k::group_norm_fwd(x.data(), c, hw, groups, gamma.data(), beta.data()),
        ))
    }

    pub fn conv_geom(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<k::ConvGeom> {
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::shape(format!(
                "conv2d: x {:?}, w {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, wcin, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin || b.shape() != [cout] {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin} vs weight {wcin}, bias {:?}",
                b.shape()
            )));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: kernel {kh}x{kw} larger than padded input {h}x{wd}"
            )));
        }
        Ok(k::ConvGeom::forward(cin, h, wd, cout, kh, kw, stride, pad))
    }

    pub fn convt_geom(
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<k::ConvTGeom> {
        if x.rank() != 3 || w.rank() != 4 {
            return Err(Error::shape(format!(
                "convt2d: x {:?}, w {:?}",
                x.shape(),
                w.shape()
            )));
        }
        let (cin, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (wcin, cout, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        if wcin != cin || b.shape() != [cout] {
            return Err(Error::shape(format!(
                "convt2d: input channels {cin} vs weight {wcin}, bias {:?}",
                b.shape()
            )));
        }
        Ok(k::ConvTGeom::forward(cin, hi, wi, cout, kh, kw, stride, pad, out_pad))
    }
}

// ---------------------------------------------------------------------------
// Recording context
// ---------------------------------------------------------------------------

/// Gradient tape. Build the forward pass through the `Ctx` methods, then
/// call [`Graph::backward`] on a scalar loss.
pub struct Graph {
    nodes: Vec<Node>,
    leaf_cache: HashMap<(usize, String), Value>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Graph {
        Graph { nodes: Vec::new(), leaf_cache: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Value {
        self.nodes.push(Node { value, op });
        Value(self.nodes.len() - 1)
    }

    fn val(&self, v: Value) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Reverse pass. Writes d(loss)/dp into the gradient slot of every
    /// trainable leaf that belongs to `store`; parameters the loss does not
    /// reach are left untouched (zero after a fresh `zero_grads`).
    pub fn backward(&self, loss: Value, store: &mut ParamStore) -> Result<()> {
        if self.val(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.val(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(gy) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf { param } => {
                    if let Some(name) = param {
                        store.accumulate_grad(name, &gy)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, self.val(*a).len(), |g| add_into(g, &gy, 1.0));
                    acc(&mut grads, *b, self.val(*b).len(), |g| add_into(g, &gy, 1.0));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *a, self.val(*a).len(), |g| add_into(g, &gy, 1.0));
                    acc(&mut grads, *b, self.val(*b).len(), |g| add_into(g, &gy, -1.0));
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.val(*a).data(), self.val(*b).data());
                    acc(&mut grads, *a, av.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * bv[i];
                        }
                    });
                    acc(&mut grads, *b, bv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * av[i];
                        }
                    });
                }
                Op::AddScalar(a) => {
                    acc(&mut grads, *a, self.val(*a).len(), |g| add_into(g, &gy, 1.0));
                }
                Op::MulScalar(a, c) => {
                    let c = *c;
                    acc(&mut grads, *a, self.val(*a).len(), |g| add_into(g, &gy, c));
                }
                Op::AddBias(x, b) => {
                    let kdim = self.val(*b).len();
                    acc(&mut grads, *x, self.val(*x).len(), |g| add_into(g, &gy, 1.0));
                    acc(&mut grads, *b, kdim, |g| {
                        for (i, &v) in gy.iter().enumerate() {
                            g[i % kdim] += v;
                        }
                    });
                }
                Op::AddChannels(x, v) => {
                    let c = self.val(*v).len();
                    let inner = self.val(*x).len() / c;
                    acc(&mut grads, *x, self.val(*x).len(), |g| add_into(g, &gy, 1.0));
                    acc(&mut grads, *v, c, |g| {
                        for ch in 0..c {
                            g[ch] += gy[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                        }
                    });
                }
                Op::Film { x, s, b } => {
                    let c = self.val(*s).len();
                    let xv = self.val(*x).data();
                    let sv = self.val(*s).data();
                    let inner = xv.len() / c;
                    acc(&mut grads, *x, xv.len(), |g| {
                        for ch in 0..c {
                            let f = 1.0 + sv[ch];
                            for i in ch * inner..(ch + 1) * inner {
                                g[i] += gy[i] * f;
                            }
                        }
                    });
                    acc(&mut grads, *s, c, |g| {
                        for ch in 0..c {
                            let mut acc_s = 0.0;
                            for i in ch * inner..(ch + 1) * inner {
                                acc_s += gy[i] * xv[i];
                            }
                            g[ch] += acc_s;
                        }
                    });
                    acc(&mut grads, *b, c, |g| {
                        for ch in 0..c {
                            g[ch] += gy[ch * inner..(ch + 1) * inner].iter().sum::<f64>();
                        }
                    });
                }
                Op::Matmul(a, b) => {
                    let av = self.val(*a);
                    let bv = self.val(*b);
                    let (m, kk) = (av.shape()[0], av.shape()[1]);
                    let n = bv.shape()[1];
                    acc(&mut grads, *a, m * kk, |g| {
                        k::gemm_nt(m, n, kk, &gy, bv.data(), g, 1.0);
                    });
                    acc(&mut grads, *b, kk * n, |g| {
                        k::gemm_tn(kk, m, n, av.data(), &gy, g, 1.0);
                    });
                }
                Op::Transpose(a) => {
                    let av = self.val(*a);
                    let (m, n) = (av.shape()[0], av.shape()[1]);
                    acc(&mut grads, *a, m * n, |g| {
                        for i in 0..n {
                            for j in 0..m {
                                g[j * n + i] += gy[i * m + j];
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    acc(&mut grads, *a, self.val(*a).len(), |g| add_into(g, &gy, 1.0));
                }
                Op::SliceFirst { x, r0 } => {
                    let xv = self.val(*x);
                    let inner = xv.len() / xv.shape()[0];
                    let off = r0 * inner;
                    acc(&mut grads, *x, xv.len(), |g| {
                        for (i, &v) in gy.iter().enumerate() {
                            g[off + i] += v;
                        }
                    });
                }
                Op::SliceLast { x, c0 } => {
                    let xv = self.val(*x);
                    let kdim = *xv.shape().last().unwrap();
                    let width = gy.len() / (xv.len() / kdim);
                    acc(&mut grads, *x, xv.len(), |g| {
                        let rows = g.len() / kdim;
                        for r in 0..rows {
                            for j in 0..width {
                                g[r * kdim + c0 + j] += gy[r * width + j];
                            }
                        }
                    });
                }
                Op::ConcatFirst(xs) => {
                    let mut off = 0;
                    for x in xs.clone() {
                        let n = self.val(x).len();
                        let chunk = gy[off..off + n].to_vec();
                        acc(&mut grads, x, n, |g| add_into(g, &chunk, 1.0));
                        off += n;
                    }
                }
                Op::ConcatLast(xs) => {
                    let xs = xs.clone();
                    let widths: Vec<usize> =
                        xs.iter().map(|x| *self.val(*x).shape().last().unwrap()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = gy.len() / total;
                    let mut col = 0;
                    for (x, w) in xs.iter().zip(&widths) {
                        let (w, col0) = (*w, col);
                        let mut chunk = vec![0.0; rows * w];
                        for r in 0..rows {
                            chunk[r * w..(r + 1) * w]
                                .copy_from_slice(&gy[r * total + col0..r * total + col0 + w]);
                        }
                        acc(&mut grads, *x, rows * w, |g| add_into(g, &chunk, 1.0));
                        col += w;
                    }
                }
                Op::SoftmaxRows(a) => {
                    let yv = &self.nodes[id].value;
                    let (r, c) = (yv.shape()[0], yv.shape()[1]);
                    let dx = k::softmax_rows_bwd(yv.data(), &gy, r, c);
                    acc(&mut grads, *a, dx.len(), |g| add_into(g, &dx, 1.0));
                }
                Op::Gelu(a) => {
                    let xv = self.val(*a).data();
                    acc(&mut grads, *a, xv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * k::gelu_grad(xv[i]);
                        }
                    });
                }
                Op::Silu(a) => {
                    let xv = self.val(*a).data();
                    acc(&mut grads, *a, xv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * k::silu_grad(xv[i]);
                        }
                    });
                }
                Op::Exp(a) => {
                    let yv = self.nodes[id].value.data();
                    acc(&mut grads, *a, yv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * yv[i];
                        }
                    });
                }
                Op::Abs(a) => {
                    let xv = self.val(*a).data();
                    acc(&mut grads, *a, xv.len(), |g| {
                        for i in 0..g.len() {
                            g[i] += gy[i] * sign(xv[i]);
                        }
                    });
                }
                Op::SumAll(a) => {
                    let s = gy[0];
                    acc(&mut grads, *a, self.val(*a).len(), |g| {
                        for v in g.iter_mut() {
                            *v += s;
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let n = self.val(*a).len();
                    let s = gy[0] / n as f64;
                    acc(&mut grads, *a, n, |g| {
                        for v in g.iter_mut() {
                            *v += s;
                        }
                    });
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xv = self.val(*x);
                    let kdim = *xv.shape().last().unwrap();
                    let rows = xv.len() / kdim;
                    let (dx, dgamma, dbeta) =
                        k::layer_norm_bwd(xv.data(), &gy, rows, kdim, self.val(*gamma).data());
                    acc(&mut grads, *x, dx.len(), |g| add_into(g, &dx, 1.0));
                    acc(&mut grads, *gamma, kdim, |g| add_into(g, &dgamma, 1.0));
                    acc(&mut grads, *beta, kdim, |g| add_into(g, &dbeta, 1.0));
                }
                Op::GroupNorm { x, groups, gamma, beta } => {
                    let xv = self.val(*x);
                    let c = xv.shape()[0];
                    let hw = xv.len() / c;
                    let (dx, dgamma, dbeta) =
                        k::group_norm_bwd(xv.data(), &gy, c, hw, *groups, self.val(*gamma).data());
                    acc(&mut grads, *x, dx.len(), |g| add_into(g, &dx, 1.0));
                    acc(&mut grads, *gamma, c, |g| add_into(g, &dgamma, 1.0));
                    acc(&mut grads, *beta, c, |g| add_into(g, &dbeta, 1.0));
                }
                Op::Conv2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        k::conv2d_bwd(self.val(*x).data(), self.val(*w).data(), geom, &gy);
                    acc(&mut grads, *x, dx.len(), |g| add_into(g, &dx, 1.0));
                    acc(&mut grads, *w, dw.len(), |g| add_into(g, &dw, 1.0));
                    acc(&mut grads, *b, db.len(), |g| add_into(g, &db, 1.0));
                }
                Op::ConvT2d { x, w, b, geom } => {
                    let (dx, dw, db) =
                        k::convt2d_bwd(self.val(*x).data(), self.val(*w).data(), geom, &gy);
                    acc(&mut grads, *x, dx.len(), |g| add_into(g, &dx, 1.0));
                    acc(&mut grads, *w, dw.len(), |g| add_into(g, &dw, 1.0));
                    acc(&mut grads, *b, db.len(), |g| add_into(g, &db, 1.0));
                }
                Op::NearestResize { x, hi, wi } => {
                    let yv = &self.nodes[id].value;
                    let (c, ho, wo) = (yv.shape()[0], yv.shape()[1], yv.shape()[2]);
                    let dx = k::nearest_resize_bwd(&gy, c, *hi, *wi, ho, wo);
                    acc(&mut grads, *x, dx.len(), |g| add_into(g, &dx, 1.0));
                }
            }
        }
        Ok(())
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn add_into(dst: &mut [f64], src: &[f64], scale: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += scale * s;
    }
}

fn acc(grads: &mut [Option<Vec<f64>>], v: Value, len: usize, f: impl FnOnce(&mut Vec<f64>)) {
    let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

impl Ctx for Graph {
    type T = Value;

    fn constant(&mut self, t: Tensor) -> Value {
        self.push(t, Op::Leaf { param: None })
    }

    fn param(&mut self, set: &ParamSet<'_>, name: &str) -> Result<Value> {
        let full = set.full_name(name);
        let key = (set.store as *const ParamStore as usize, full.clone());
        if let Some(&v) = self.leaf_cache.get(&key) {
            return Ok(v);
        }
        let tensor = set.store.get(&full)?.clone();
        let v = self.push(
            tensor,
            Op::Leaf { param: set.trainable.then(|| full.clone()) },
        );
        self.leaf_cache.insert(key, v);
        Ok(v)
    }

    fn value(&self, t: &Value) -> Tensor {
        self.val(*t).clone()
    }

    fn shape_of(&self, t: &Value) -> Vec<usize> {
        self.val(*t).shape().to_vec()
    }

    fn add(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let t = fwd::zip(self.val(*a), self.val(*b), |x, y| x + y, "add")?;
        Ok(self.push(t, Op::Add(*a, *b)))
    }

    fn sub(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let t = fwd::zip(self.val(*a), self.val(*b), |x, y| x - y, "sub")?;
        Ok(self.push(t, Op::Sub(*a, *b)))
    }

    fn mul(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let t = fwd::zip(self.val(*a), self.val(*b), |x, y| x * y, "mul")?;
        Ok(self.push(t, Op::Mul(*a, *b)))
    }

    fn add_scalar(&mut self, a: &Value, c: f64) -> Result<Value> {
        let t = self.val(*a).map(|x| x + c);
        Ok(self.push(t, Op::AddScalar(*a)))
    }

    fn mul_scalar(&mut self, a: &Value, c: f64) -> Result<Value> {
        let t = self.val(*a).map(|x| x * c);
        Ok(self.push(t, Op::MulScalar(*a, c)))
    }

    fn add_bias(&mut self, x: &Value, b: &Value) -> Result<Value> {
        let t = fwd::add_bias(self.val(*x), self.val(*b))?;
        Ok(self.push(t, Op::AddBias(*x, *b)))
    }

    fn add_channels(&mut self, x: &Value, v: &Value) -> Result<Value> {
        let t = fwd::per_channel(self.val(*x), self.val(*v), |a, b| a + b, "add_channels")?;
        Ok(self.push(t, Op::AddChannels(*x, *v)))
    }

    fn film(&mut self, x: &Value, s: &Value, b: &Value) -> Result<Value> {
        let t = fwd::film(self.val(*x), self.val(*s), self.val(*b))?;
        Ok(self.push(t, Op::Film { x: *x, s: *s, b: *b }))
    }

    fn matmul(&mut self, a: &Value, b: &Value) -> Result<Value> {
        let t = fwd::matmul(self.val(*a), self.val(*b))?;
        Ok(self.push(t, Op::Matmul(*a, *b)))
    }

    fn transpose(&mut self, a: &Value) -> Result<Value> {
        let t = fwd::transpose(self.val(*a))?;
        Ok(self.push(t, Op::Transpose(*a)))
    }

    fn reshape(&mut self, a: &Value, shape: &[usize]) -> Result<Value> {
        let t = self.val(*a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(*a)))
    }

    fn slice_first(&mut self, a: &Value, r0: usize, r1: usize) -> Result<Value> {
        let t = fwd::slice_first(self.val(*a), r0, r1)?;
        Ok(self.push(t, Op::SliceFirst { x: *a, r0 }))
    }

    fn slice_last(&mut self, a: &Value, c0: usize, c1: usize) -> Result<Value> {
        let t = fwd::slice_last(self.val(*a), c0, c1)?;
        Ok(self.push(t, Op::SliceLast { x: *a, c0 }))
    }

    fn concat_first(&mut self, xs: &[Value]) -> Result<Value> {
        let tensors: Vec<Tensor> = xs.iter().map(|v| self.val(*v).clone()).collect();
        let t = fwd::concat_first(&tensors)?;
        Ok(self.push(t, Op::ConcatFirst(xs.to_vec())))
    }

    fn concat_last(&mut self, xs: &[Value]) -> Result<Value> {
        let tensors: Vec<Tensor> = xs.iter().map(|v| self.val(*v).clone()).collect();
        let t = fwd::concat_last(&tensors)?;
        Ok(self.push(t, Op::ConcatLast(xs.to_vec())))
    }

    fn softmax_rows(&mut self, a: &Value) -> Result<Value> {
        let t = fwd::softmax_rows(self.val(*a))?;
        Ok(self.push(t, Op::SoftmaxRows(*a)))
    }

    fn gelu(&mut self, a: &Value) -> Result<Value> {
        let t = self.val(*a).map(k::gelu);
        Ok(self.push(t, Op::Gelu(*a)))
    }

    fn silu(&mut self, a: &Value) -> Result<Value> {
        let t = self.val(*a).map(k::silu);
        Ok(self.push(t, Op::Silu(*a)))
    }

    fn exp(&mut self, a: &Value) -> Result<Value> {
        let t = self.val(*a).map(f64::exp);
        Ok(self.push(t, Op::Exp(*a)))
    }

    fn abs(&mut self, a: &Value) -> Result<Value> {
        let t = self.val(*a).map(f64::abs);
        Ok(self.push(t, Op::Abs(*a)))
    }

    fn sum_all(&mut self, a: &Value) -> Result<Value> {
        let s: f64 = self.val(*a).data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::SumAll(*a)))
    }

    fn mean_all(&mut self, a: &Value) -> Result<Value> {
        let n = self.val(*a).len();
        let s: f64 = self.val(*a).data().iter().sum::<f64>() / n as f64;
        Ok(self.push(Tensor::scalar(s), Op::MeanAll(*a)))
    }

    fn layer_norm(&mut self, x: &Value, gamma: &Value, beta: &Value) -> Result<Value> {
        let t = fwd::layer_norm(self.val(*x), self.val(*gamma), self.val(*beta))?;
        Ok(self.push(t, Op::LayerNorm { x: *x, gamma: *gamma, beta: *beta }))
    }

    fn group_norm(&mut self, x: &Value, groups: usize, gamma: &Value, beta: &Value) -> Result<Value> {
        let t = fwd::group_norm(self.val(*x), groups, self.val(*gamma), self.val(*beta))?;
        Ok(self.push(t, Op::GroupNorm { x: *x, groups, gamma: *gamma, beta: *beta }))
    }

    fn conv2d(&mut self, x: &Value, w: &Value, b: &Value, stride: usize, pad: usize) -> Result<Value> {
        let geom = fwd::conv_geom(self.val(*x), self.val(*w), self.val(*b), stride, pad)?;
        let y = k::conv2d_fwd(self.val(*x).data(), self.val(*w).data(), self.val(*b).data(), &geom);
        let t = Tensor::from_parts(vec![geom.cout, geom.ho, geom.wo], y);
        Ok(self.push(t, Op::Conv2d { x: *x, w: *w, b: *b, geom }))
    }

    fn convt2d(
        &mut self,
        x: &Value,
        w: &Value,
        b: &Value,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Value> {
        let geom = fwd::convt_geom(self.val(*x), self.val(*w), self.val(*b), stride, pad, out_pad)?;
        let y = k::convt2d_fwd(self.val(*x).data(), self.val(*w).data(), self.val(*b).data(), &geom);
        let t = Tensor::from_parts(vec![geom.cout, geom.ho, geom.wo], y);
        Ok(self.push(t, Op::ConvT2d { x: *x, w: *w, b: *b, geom }))
    }

    fn nearest_resize(&mut self, x: &Value, ho: usize, wo: usize) -> Result<Value> {
        let xv = self.val(*x);
        if xv.rank() != 3 {
            return Err(Error::shape("nearest_resize wants rank 3"));
        }
        let (c, hi, wi) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
        let y = k::nearest_resize_fwd(xv.data(), c, hi, wi, ho, wo);
        let t = Tensor::from_parts(vec![c, ho, wo], y);
        Ok(self.push(t, Op::NearestResize { x: *x, hi, wi }))
    }
}

// ---------------------------------------------------------------------------
// Pure evaluation context
// ---------------------------------------------------------------------------

/// Non-recording context: every op returns a plain tensor. Forward math is
/// shared with [`Graph`], so eval and training agree bitwise.
#[derive(Default)]
pub struct Eval;

impl Eval {
    pub fn new() -> Eval {
        Eval
    }
}

impl Ctx for Eval {
    type T = Tensor;

    fn constant(&mut self, t: Tensor) -> Tensor {
        t
    }

    fn param(&mut self, set: &ParamSet<'_>, name: &str) -> Result<Tensor> {
        Ok(set.store.get(&set.full_name(name))?.clone())
    }

    fn value(&self, t: &Tensor) -> Tensor {
        t.clone()
    }

    fn shape_of(&self, t: &Tensor) -> Vec<usize> {
        t.shape().to_vec()
    }

    fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::zip(a, b, |x, y| x + y, "add")
    }

    fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::zip(a, b, |x, y| x - y, "sub")
    }

    fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::zip(a, b, |x, y| x * y, "mul")
    }

    fn add_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        Ok(a.map(|x| x + c))
    }

    fn mul_scalar(&mut self, a: &Tensor, c: f64) -> Result<Tensor> {
        Ok(a.map(|x| x * c))
    }

    fn add_bias(&mut self, x: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::add_bias(x, b)
    }

    fn add_channels(&mut self, x: &Tensor, v: &Tensor) -> Result<Tensor> {
        fwd::per_channel(x, v, |a, b| a + b, "add_channels")
    }

    fn film(&mut self, x: &Tensor, s: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::film(x, s, b)
    }

    fn matmul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        fwd::matmul(a, b)
    }

    fn transpose(&mut self, a: &Tensor) -> Result<Tensor> {
        fwd::transpose(a)
    }

    fn reshape(&mut self, a: &Tensor, shape: &[usize]) -> Result<Tensor> {
        a.reshape(shape)
    }

    fn slice_first(&mut self, a: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
        fwd::slice_first(a, r0, r1)
    }

    fn slice_last(&mut self, a: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        fwd::slice_last(a, c0, c1)
    }

    fn concat_first(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        fwd::concat_first(xs)
    }

    fn concat_last(&mut self, xs: &[Tensor]) -> Result<Tensor> {
        fwd::concat_last(xs)
    }

    fn softmax_rows(&mut self, a: &Tensor) -> Result<Tensor> {
        fwd::softmax_rows(a)
    }

    fn gelu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(k::gelu))
    }

    fn silu(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(k::silu))
    }

    fn exp(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(f64::exp))
    }

    fn abs(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(a.map(f64::abs))
    }

    fn sum_all(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(a.data().iter().sum()))
    }

    fn mean_all(&mut self, a: &Tensor) -> Result<Tensor> {
        Ok(Tensor::scalar(a.data().iter().sum::<f64>() / a.len() as f64))
    }

    fn layer_norm(&mut self, x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        fwd::layer_norm(x, gamma, beta)
    }

    fn group_norm(&mut self, x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
        fwd::group_norm(x, groups, gamma, beta)
    }

    fn conv2d(&mut self, x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let geom = fwd::conv_geom(x, w, b, stride, pad)?;
        let y = k::conv2d_fwd(x.data(), w.data(), b.data(), &geom);
        Ok(Tensor::from_parts(vec![geom.cout, geom.ho, geom.wo], y))
    }

    fn convt2d(
        &mut self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> Result<Tensor> {
        let geom = fwd::convt_geom(x, w, b, stride, pad, out_pad)?;
        let y = k::convt2d_fwd(x.data(), w.data(), b.data(), &geom);
        Ok(Tensor::from_parts(vec![geom.cout, geom.ho, geom.wo], y))
    }

    fn nearest_resize(&mut self, x: &Tensor, ho: usize, wo: usize) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(Error::shape("nearest_resize wants rank 3"));
        }
        let (c, hi, wi) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let y = k::nearest_resize_fwd(x.data(), c, hi, wi, ho, wo);
        Ok(Tensor::from_parts(vec![c, ho, wo], y))
    }
}

// ---------------------------------------------------------------------------
// Finite-difference gradient checking
// ---------------------------------------------------------------------------

/// Outcome of a finite-difference probe run.
#[derive(Debug)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    pub worst: Option<(String, usize)>,
}

impl ParamStore {
    /// Adds `delta` to one scalar of a parameter. Gradient-check support.
    pub fn perturb(&mut self, name: &str, index: usize, delta: f64) -> Result<()> {
        let t = self.get(name)?.clone();
        let mut data = t.to_vec();
        data[index] += delta;
        self.set(name, Tensor::from_parts(t.shape().to_vec(), data))
    }
}

/// Compares tape gradients against central finite differences on randomly
/// probed parameters. `loss_eval` must be a pure function of the store;
/// `populate_grads` must leave d(loss)/dp in the gradient slots.
pub fn gradient_check(
    store: &mut ParamStore,
    rng: &mut super::rng::RngState,
    probes: usize,
    h: f64,
    populate_grads: &mut dyn FnMut(&mut ParamStore) -> Result<()>,
    loss_eval: &mut dyn FnMut(&ParamStore) -> Result<f64>,
) -> Result<GradCheckReport> {
    store.zero_grads();
    populate_grads(store)?;
    let names: Vec<String> = store.names().map(str::to_string).collect();
    let mut report = GradCheckReport { probes: 0, max_rel_err: 0.0, worst: None };
    for _ in 0..probes {
        let name = &names[rng.below(names.len() as u64) as usize];
        let n = store.get(name)?.len();
        let idx = rng.below(n as u64) as usize;
        let analytic = store.grad(name)?[idx];

        store.perturb(name, idx, h)?;
        let up = loss_eval(store)?;
        store.perturb(name, idx, -2.0 * h)?;
        let down = loss_eval(store)?;
        store.perturb(name, idx, h)?;

        let fd = (up - down) / (2.0 * h);
        let denom = analytic.abs().max(fd.abs()).max(1e-6);
        let rel = (analytic - fd).abs() / denom;
        report.probes += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = Some((name.clone(), idx));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngState;
    use crate::numerics::store::Init;

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let eye = g.constant(Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let a = g.constant(Tensor::new(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let prod = g.matmul(&eye, &a).unwrap();
        assert_eq!(g.value(&prod).data(), g.value(&a).data());

        let m = g.constant(Tensor::new(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let v = g.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let mv = g.matmul(&m, &v).unwrap();
        assert_eq!(g.value(&mv).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_random_matches_triple_loop_oracle() {
        let mut rng = RngState::new(21);
        let a = Tensor::randn(&[5, 7], &mut rng);
        let b = Tensor::randn(&[7, 3], &mut rng);
        let mut g = Graph::new();
        let av = g.constant(a.clone());
        let bv = g.constant(b.clone());
        let c = g.matmul(&av, &bv).unwrap();
        // Naive triple-loop oracle.
        let mut expect = vec![0.0; 5 * 3];
        for i in 0..5 {
            for j in 0..3 {
                let mut s = 0.0;
                for p in 0..7 {
                    s += a.at(&[i, p]) * b.at(&[p, j]);
                }
                expect[i * 3 + j] = s;
            }
        }
        for (x, y) in g.value(&c).data().iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[4, 2]));
        assert!(matches!(g.matmul(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[2, 3], vec![0.5; 6]).unwrap()).unwrap();
        let mut g = Graph::new();
        let p = g.param(&ParamSet::trainable(&store), "p").unwrap();
        let loss = g.sum_all(&p).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap(), &[1.0; 6]);
    }

    #[test]
    fn backward_of_half_sum_squares() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::new(&[2], vec![1.0, -2.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let p = g.param(&ParamSet::trainable(&store), "p").unwrap();
        let sq = g.mul(&p, &p).unwrap();
        let s = g.sum_all(&sq).unwrap();
        let loss = g.mul_scalar(&s, 0.5).unwrap();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("p").unwrap(), &[1.0, -2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut store = ParamStore::new();
        store.insert("p", Tensor::zeros(&[3])).unwrap();
        let mut g = Graph::new();
        let p = g.param(&ParamSet::trainable(&store), "p").unwrap();
        assert!(matches!(g.backward(p, &mut store), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_params_keep_zero_gradient() {
        let mut store = ParamStore::new();
        store.insert("used", Tensor::scalar(2.0)).unwrap();
        store.insert("unused", Tensor::scalar(3.0)).unwrap();
        let mut g = Graph::new();
        let p = g.param(&ParamSet::trainable(&store), "used").unwrap();
        let loss = g.sum_all(&p).unwrap();
        store.zero_grads();
        g.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad("unused").unwrap(), &[0.0]);
        assert_eq!(store.grad("used").unwrap(), &[1.0]);
    }

    /// Two-layer MLP gradient vs central finite differences.
    #[test]
    fn mlp_gradients_match_finite_differences() {
        let root = RngState::new(77);
        let mut store = ParamStore::new();
        store.init(&root, "w1", &[4, 8], Init::KaimingUniform { fan_in: 4 }).unwrap();
        store.init(&root, "b1", &[8], Init::Zeros).unwrap();
        store.init(&root, "w2", &[8, 3], Init::KaimingUniform { fan_in: 8 }).unwrap();
        store.init(&root, "b2", &[3], Init::Zeros).unwrap();
        let x = Tensor::randn(&[5, 4], &mut RngState::new(11));
        let target = Tensor::randn(&[5, 3], &mut RngState::new(12));

        fn loss_of<C: Ctx>(
            ctx: &mut C,
            set: &ParamSet<'_>,
            x: &Tensor,
            target: &Tensor,
        ) -> Result<C::T> {
            let xv = ctx.constant(x.clone());
            let tv = ctx.constant(target.clone());
            let w1 = ctx.param(set, "w1")?;
            let b1 = ctx.param(set, "b1")?;
            let w2 = ctx.param(set, "w2")?;
            let b2 = ctx.param(set, "b2")?;
            let h = ctx.matmul(&xv, &w1)?;
            let h = ctx.add_bias(&h, &b1)?;
            let h = ctx.gelu(&h)?;
            let y = ctx.matmul(&h, &w2)?;
            let y = ctx.add_bias(&y, &b2)?;
            let d = ctx.sub(&y, &tv)?;
            let sq = ctx.mul(&d, &d)?;
            ctx.mean_all(&sq)
        }

        let mut rng = RngState::new(13);
        let report = gradient_check(
            &mut store,
            &mut rng,
            64,
            1e-4,
            &mut |s| {
                let mut g = Graph::new();
                let loss = loss_of(&mut g, &ParamSet::trainable(s), &x, &target)?;
                g.backward(loss, s)
            },
            &mut |s| {
                let mut e = Eval::new();
                Ok(loss_of(&mut e, &ParamSet::frozen(s), &x, &target)?.item())
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {:?}", report);
    }

    /// Every structured op, probed by finite differences through a random
    /// scalar head.
    #[test]
    fn structured_ops_gradients_match_finite_differences() {
        let root = RngState::new(31);
        let mut store = ParamStore::new();
        store.init(&root, "x3", &[3, 6, 5], Init::Normal { std: 1.0 }).unwrap();
        store.init(&root, "cw", &[4, 3, 3, 3], Init::Normal { std: 0.4 }).unwrap();
        store.init(&root, "cb", &[4], Init::Normal { std: 0.2 }).unwrap();
        store.init(&root, "tw", &[4, 2, 3, 3], Init::Normal { std: 0.4 }).unwrap();
        store.init(&root, "tb", &[2], Init::Normal { std: 0.2 }).unwrap();
        store.init(&root, "gamma", &[4], Init::Const(1.2)).unwrap();
        store.init(&root, "beta", &[4], Init::Normal { std: 0.1 }).unwrap();
        store.init(&root, "film_s", &[2], Init::Normal { std: 0.3 }).unwrap();
        store.init(&root, "film_b", &[2], Init::Normal { std: 0.3 }).unwrap();

        fn loss_of<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>) -> Result<C::T> {
            let x = ctx.param(set, "x3")?;
            let cw = ctx.param(set, "cw")?;
            let cb = ctx.param(set, "cb")?;
            let h = ctx.conv2d(&x, &cw, &cb, 2, 1)?; // [4,3,3]
            let gamma = ctx.param(set, "gamma")?;
            let beta = ctx.param(set, "beta")?;
            let h = ctx.group_norm(&h, 2, &gamma, &beta)?;
            let h = ctx.silu(&h)?;
            let h = ctx.nearest_resize(&h, 4, 5)?;
            let tw = ctx.param(set, "tw")?;
            let tb = ctx.param(set, "tb")?;
            let h = ctx.convt2d(&h, &tw, &tb, 2, 1, 1)?; // [2,8,10]
            let s = ctx.param(set, "film_s")?;
            let b = ctx.param(set, "film_b")?;
            let h = ctx.film(&h, &s, &b)?;
            let h = ctx.abs(&h)?;
            ctx.mean_all(&h)
        }

        let mut rng = RngState::new(32);
        let report = gradient_check(
            &mut store,
            &mut rng,
            96,
            1e-4,
            &mut |s| {
                let mut g = Graph::new();
                let loss = loss_of(&mut g, &ParamSet::trainable(s))?;
                g.backward(loss, s)
            },
            &mut |s| {
                let mut e = Eval::new();
                Ok(loss_of(&mut e, &ParamSet::frozen(s))?.item())
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {:?}", report);
    }

    #[test]
    fn attention_style_ops_gradients_match_finite_differences() {
        let root = RngState::new(41);
        let mut store = ParamStore::new();
        store.init(&root, "x", &[5, 8], Init::Normal { std: 1.0 }).unwrap();
        store.init(&root, "wq", &[8, 8], Init::KaimingUniform { fan_in: 8 }).unwrap();
        store.init(&root, "wk", &[8, 8], Init::KaimingUniform { fan_in: 8 }).unwrap();
        store.init(&root, "wv", &[8, 8], Init::KaimingUniform { fan_in: 8 }).unwrap();
        store.init(&root, "g", &[8], Init::Const(1.0)).unwrap();
        store.init(&root, "b", &[8], Init::Zeros).unwrap();

        fn loss_of<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>) -> Result<C::T> {
            let x = ctx.param(set, "x")?;
            let g = ctx.param(set, "g")?;
            let b = ctx.param(set, "b")?;
            let xn = ctx.layer_norm(&x, &g, &b)?;
            let wq = ctx.param(set, "wq")?;
            let wk = ctx.param(set, "wk")?;
            let wv = ctx.param(set, "wv")?;
            let q = ctx.matmul(&xn, &wq)?;
            let kk = ctx.matmul(&xn, &wk)?;
            let v = ctx.matmul(&xn, &wv)?;
            // Two heads of width 4.
            let mut heads = Vec::new();
            for h in 0..2 {
                let qh = ctx.slice_last(&q, h * 4, (h + 1) * 4)?;
                let kh = ctx.slice_last(&kk, h * 4, (h + 1) * 4)?;
                let vh = ctx.slice_last(&v, h * 4, (h + 1) * 4)?;
                let kt = ctx.transpose(&kh)?;
                let scores = ctx.matmul(&qh, &kt)?;
                let scores = ctx.mul_scalar(&scores, 0.5)?;
                let attn = ctx.softmax_rows(&scores)?;
                heads.push(ctx.matmul(&attn, &vh)?);
            }
            let cat = ctx.concat_last(&heads)?;
            let e = ctx.exp(&cat)?;
            ctx.mean_all(&e)
        }

        let mut rng = RngState::new(42);
        let report = gradient_check(
            &mut store,
            &mut rng,
            64,
            1e-4,
            &mut |s| {
                let mut g = Graph::new();
                let loss = loss_of(&mut g, &ParamSet::trainable(s))?;
                g.backward(loss, s)
            },
            &mut |s| {
                let mut e = Eval::new();
                Ok(loss_of(&mut e, &ParamSet::frozen(s))?.item())
            },
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "max rel err {:?}", report);
    }

    #[test]
    fn eval_and_graph_forward_agree_bitwise() {
        let root = RngState::new(51);
        let mut store = ParamStore::new();
        store.init(&root, "w", &[6, 4], Init::Normal { std: 0.7 }).unwrap();
        store.init(&root, "b", &[4], Init::Normal { std: 0.3 }).unwrap();
        let x = Tensor::randn(&[3, 6], &mut RngState::new(52));

        let mut g = Graph::new();
        let set = ParamSet::trainable(&store);
        let xv = g.constant(x.clone());
        let w = g.param(&set, "w").unwrap();
        let b = g.param(&set, "b").unwrap();
        let y = g.matmul(&xv, &w).unwrap();
        let y = g.add_bias(&y, &b).unwrap();
        let y = g.silu(&y).unwrap();
        let y_graph = g.value(&y);

        let mut e = Eval::new();
        let eset = ParamSet::frozen(&store);
        let w = e.param(&eset, "w").unwrap();
        let b = e.param(&eset, "b").unwrap();
        let y = e.matmul(&x, &w).unwrap();
        let y = e.add_bias(&y, &b).unwrap();
        let y_eval = e.silu(&y).unwrap();

        assert_eq!(y_graph.data(), y_eval.data());
    }
}
