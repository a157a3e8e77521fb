//! Small parameterized building blocks shared by the trainable models.

use crate::error::Result;
use crate::numerics::graph::{Ctx, ParamSet};
use crate::numerics::store::{Init, ParamStore};
use crate::numerics::{RngState, Tensor};

/// Registers a linear layer's weight [fan_in, fan_out] and bias [fan_out].
pub fn init_linear(
    store: &mut ParamStore,
    root: &RngState,
    name: &str,
    fan_in: usize,
    fan_out: usize,
) -> Result<()> {
    store.init(root, &format!("{name}.w"), &[fan_in, fan_out], Init::KaimingUniform { fan_in })?;
    store.init(root, &format!("{name}.b"), &[fan_out], Init::Zeros)
}

/// x [n, fan_in] -> [n, fan_out].
pub fn linear<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, name: &str, x: &C::T) -> Result<C::T> {
    let w = ctx.param(set, &format!("{name}.w"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    let y = ctx.matmul(x, &w)?;
    ctx.add_bias(&y, &b)
}

/// Rank-1 convenience: x [fan_in] -> [fan_out].
pub fn linear_vec<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, name: &str, x: &C::T) -> Result<C::T> {
    let n = ctx.shape_of(x)[0];
    let row = ctx.reshape(x, &[1, n])?;
    let y = linear(ctx, set, name, &row)?;
    let out = ctx.shape_of(&y)[1];
    ctx.reshape(&y, &[out])
}

pub fn init_layer_norm(store: &mut ParamStore, root: &RngState, name: &str, dim: usize) -> Result<()> {
    store.init(root, &format!("{name}.g"), &[dim], Init::Const(1.0))?;
    store.init(root, &format!("{name}.b"), &[dim], Init::Zeros)
}

pub fn layer_norm<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, name: &str, x: &C::T) -> Result<C::T> {
    let g = ctx.param(set, &format!("{name}.g"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    ctx.layer_norm(x, &g, &b)
}

pub fn init_group_norm(store: &mut ParamStore, root: &RngState, name: &str, channels: usize) -> Result<()> {
    store.init(root, &format!("{name}.g"), &[channels], Init::Const(1.0))?;
    store.init(root, &format!("{name}.b"), &[channels], Init::Zeros)
}

pub fn group_norm<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    name: &str,
    x: &C::T,
    groups: usize,
) -> Result<C::T> {
    let g = ctx.param(set, &format!("{name}.g"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    ctx.group_norm(x, groups, &g, &b)
}

/// Registers a conv2d layer: weight [cout, cin, k, k], bias [cout].
pub fn init_conv(
    store: &mut ParamStore,
    root: &RngState,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let fan_in = cin * k * k;
    store.init(root, &format!("{name}.w"), &[cout, cin, k, k], Init::KaimingUniform { fan_in })?;
    store.init(root, &format!("{name}.b"), &[cout], Init::Zeros)
}

pub fn conv2d<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    name: &str,
    x: &C::T,
    stride: usize,
    pad: usize,
) -> Result<C::T> {
    let w = ctx.param(set, &format!("{name}.w"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    ctx.conv2d(x, &w, &b, stride, pad)
}

/// Registers a transposed conv2d layer: weight [cin, cout, k, k].
pub fn init_convt(
    store: &mut ParamStore,
    root: &RngState,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
) -> Result<()> {
    let fan_in = cin * k * k;
    store.init(root, &format!("{name}.w"), &[cin, cout, k, k], Init::KaimingUniform { fan_in })?;
    store.init(root, &format!("{name}.b"), &[cout], Init::Zeros)
}

pub fn convt2d<C: Ctx>(
    ctx: &mut C,
    set: &ParamSet<'_>,
    name: &str,
    x: &C::T,
    stride: usize,
    pad: usize,
    out_pad: usize,
) -> Result<C::T> {
    let w = ctx.param(set, &format!("{name}.w"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    ctx.convt2d(x, &w, &b, stride, pad, out_pad)
}

/// Sinusoidal embedding of an integer position, dimension `dim` (even).
pub fn sinusoidal_embedding(position: f64, dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; dim];
    for i in 0..half {
        let freq = (10_000f64).powf(-(i as f64) / half as f64);
        data[i] = (position * freq).sin();
        data[half + i] = (position * freq).cos();
    }
    Tensor::from_parts(vec![dim], data)
}

/// Mean squared error between two equally shaped values.
pub fn mse<C: Ctx>(ctx: &mut C, a: &C::T, b: &C::T) -> Result<C::T> {
    let d = ctx.sub(a, b)?;
    let sq = ctx.mul(&d, &d)?;
    ctx.mean_all(&sq)
}
