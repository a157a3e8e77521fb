//! Shared dense compute kernels.
//!
//! Both the autodiff graph and the pure inference path call into these
//! functions, so training and evaluation see bit-identical forward math.
//! Matrix products go through `matrixmultiply::dgemm`; convolutions are
//! lowered to GEMM via im2col. Parallel splits assign each output element
//! to exactly one task with a fixed inner summation order, so results do
//! not depend on thread scheduling.

use rayon::prelude::*;

/// c = a·b + beta*c for contiguous row-major a [m,k], b [k,n], c [m,n].
pub fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    gemm_split(m, k, n, a, k as isize, 1, b, c, beta);
}

/// c = a·btᵀ + beta*c where bt is row-major [n,k] (used as its transpose).
pub fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], bt: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(bt.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm_threaded(
            m,
            k,
            n,
            a.as_ptr(),
            k as isize,
            1,
            bt.as_ptr(),
            1,
            k as isize,
            c.as_mut_ptr(),
            n,
            beta,
        );
    }
}

/// c = atᵀ·b + beta*c where at is row-major [k,m] (used as its transpose).
pub fn gemm_tn(m: usize, k: usize, n: usize, at: &[f64], b: &[f64], c: &mut [f64], beta: f64) {
    debug_assert_eq!(at.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        dgemm_threaded(
            m,
            k,
            n,
            at.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
            n,
            beta,
        );
    }
}

fn gemm_split(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    c: &mut [f64],
    beta: f64,
) {
    unsafe {
        dgemm_threaded(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            n as isize,
            1,
            c.as_mut_ptr(),
            n,
            beta,
        );
    }
}

/// Splits the m dimension over the rayon pool when the product is large.
/// Each row of c is produced by exactly one dgemm call, so the result is
/// independent of how the split lands on threads.
#[allow(clippy::too_many_arguments)]
unsafe fn dgemm_threaded(
    m: usize,
    k: usize,
    n: usize,
    a: *const f64,
    rsa: isize,
    csa: isize,
    b: *const f64,
    rsb: isize,
    csb: isize,
    c: *mut f64,
    ldc: usize,
    beta: f64,
) {
    let threads = rayon::current_num_threads();
    let flops = 2usize.saturating_mul(m).saturating_mul(k).saturating_mul(n);
    let chunks = if flops < 2_000_000 || threads < 2 {
        1
    } else {
        threads.min(m).min(8)
    };
    if chunks <= 1 {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, ldc as isize, 1);
        return;
    }
    let rows_per = m.div_ceil(chunks);
    // Disjoint row blocks of c; addresses cross the thread boundary as usize.
    let (a_addr, b_addr, c_addr) = (a as usize, b as usize, c as usize);
    (0..chunks).into_par_iter().for_each(|ci| {
        let r0 = ci * rows_per;
        if r0 >= m {
            return;
        }
        let rows = rows_per.min(m - r0);
        unsafe {
            let a_off = (a_addr as *const f64).offset(rsa * r0 as isize);
            let c_off = (c_addr as *mut f64).add(r0 * ldc);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_off,
                rsa,
                csa,
                b_addr as *const f64,
                rsb,
                csb,
                beta,
                c_off,
                ldc as isize,
                1,
            );
        }
    });
}

// ---------------------------------------------------------------------------
// Convolution (lowered to GEMM via im2col)
// ---------------------------------------------------------------------------

/// Geometry of a 2-D convolution over a [C, H, W] input.
#[derive(Debug, Clone, Copy)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn forward(
        cin: usize,
        h: usize,
        w: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> ConvGeom {
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { cin, h, w, cout, kh, kw, stride, pad, ho, wo }
    }
}

fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64]) {
    let n = g.ho * g.wo;
    debug_assert_eq!(cols.len(), g.cin * g.kh * g.kw * n);
    cols.par_chunks_mut(g.kh * g.kw * n)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let row = (u * g.kw + v) * n;
                    for ho in 0..g.ho {
                        let hi = (ho * g.stride + u) as isize - g.pad as isize;
                        let dst = &mut chunk[row + ho * g.wo..row + (ho + 1) * g.wo];
                        if hi < 0 || hi >= g.h as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let xrow = &xc[hi as usize * g.w..(hi as usize + 1) * g.w];
                        for (wo, d) in dst.iter_mut().enumerate() {
                            let wi = (wo * g.stride + v) as isize - g.pad as isize;
                            *d = if wi < 0 || wi >= g.w as isize {
                                0.0
                            } else {
                                xrow[wi as usize]
                            };
                        }
                    }
                }
            }
        });
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let n = g.ho * g.wo;
    dx.par_chunks_mut(g.h * g.w)
        .enumerate()
        .for_each(|(ci, xc)| {
            let chunk = &cols[ci * g.kh * g.kw * n..(ci + 1) * g.kh * g.kw * n];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let row = (u * g.kw + v) * n;
                    for ho in 0..g.ho {
                        let hi = (ho * g.stride + u) as isize - g.pad as isize;
                        if hi < 0 || hi >= g.h as isize {
                            continue;
                        }
                        let src = &chunk[row + ho * g.wo..row + (ho + 1) * g.wo];
                        let xrow =
                            &mut xc[hi as usize * g.w..(hi as usize + 1) * g.w];
                        for (wo, s) in src.iter().enumerate() {
                            let wi = (wo * g.stride + v) as isize - g.pad as isize;
                            if wi >= 0 && wi < g.w as isize {
                                xrow[wi as usize] += s;
                            }
                        }
                    }
                }
            }
        });
}

/// y = conv2d(x, w) + b. x [Cin,H,W], w [Cout,Cin,kh,kw], b [Cout].
pub fn conv2d_fwd(x: &[f64], w: &[f64], b: &[f64], g: &ConvGeom) -> Vec<f64> {
    let n = g.ho * g.wo;
    let ckk = g.cin * g.kh * g.kw;
    let mut cols = vec![0.0; ckk * n];
    im2col(x, g, &mut cols);
    let mut y = vec![0.0; g.cout * n];
    gemm_nn(g.cout, ckk, n, w, &cols, &mut y, 0.0);
    for (co, yc) in y.chunks_mut(n).enumerate() {
        let bias = b[co];
        for v in yc.iter_mut() {
            *v += bias;
        }
    }
    y
}

/// Gradients of conv2d. Returns (dx, dw, db).
pub fn conv2d_bwd(
    x: &[f64],
    w: &[f64],
    g: &ConvGeom,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.ho * g.wo;
    let ckk = g.cin * g.kh * g.kw;
    let mut cols = vec![0.0; ckk * n];
    im2col(x, g, &mut cols);

    let mut dw = vec![0.0; g.cout * ckk];
    gemm_nt(g.cout, n, ckk, dy, &cols, &mut dw, 0.0);

    let mut db = vec![0.0; g.cout];
    for (co, dyc) in dy.chunks(n).enumerate() {
        db[co] = dyc.iter().sum();
    }

    let mut dcols = vec![0.0; ckk * n];
    gemm_tn(ckk, g.cout, n, w, dy, &mut dcols, 0.0);
    let mut dx = vec![0.0; g.cin * g.h * g.w];
    col2im(&dcols, g, &mut dx);
    (dx, dw, db)
}

/// Geometry of a transposed 2-D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvTGeom {
    pub cin: usize,
    pub hi: usize,
    pub wi: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvTGeom {
    pub fn forward(
        cin: usize,
        hi: usize,
        wi: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
        out_pad: usize,
    ) -> ConvTGeom {
        let ho = (hi - 1) * stride + kh + out_pad - 2 * pad;
        let wo = (wi - 1) * stride + kw + out_pad - 2 * pad;
        ConvTGeom { cin, hi, wi, cout, kh, kw, stride, pad, out_pad, ho, wo }
    }
}

/// y = conv_transpose2d(x, w) + b. x [Cin,Hi,Wi], w [Cin,Cout,kh,kw], b [Cout].
pub fn convt2d_fwd(x: &[f64], w: &[f64], b: &[f64], g: &ConvTGeom) -> Vec<f64> {
    let n = g.hi * g.wi;
    let ckk = g.cout * g.kh * g.kw;
    // cols [Cout*kh*kw, Hi*Wi] = wᵀ · x_flat
    let mut cols = vec![0.0; ckk * n];
    gemm_tn(ckk, g.cin, n, w, x, &mut cols, 0.0);

    let mut y = vec![0.0; g.cout * g.ho * g.wo];
    y.par_chunks_mut(g.ho * g.wo).enumerate().for_each(|(co, yc)| {
        for u in 0..g.kh {
            for v in 0..g.kw {
                let row = ((co * g.kh + u) * g.kw + v) * n;
                for hi in 0..g.hi {
                    let ho = (hi * g.stride + u) as isize - g.pad as isize;
                    if ho < 0 || ho >= g.ho as isize {
                        continue;
                    }
                    let yrow = &mut yc[ho as usize * g.wo..(ho as usize + 1) * g.wo];
                    let src = &cols[row + hi * g.wi..row + (hi + 1) * g.wi];
                    for (wi_, s) in src.iter().enumerate() {
                        let wo = (wi_ * g.stride + v) as isize - g.pad as isize;
                        if wo >= 0 && wo < g.wo as isize {
                            yrow[wo as usize] += s;
                        }
                    }
                }
            }
        }
        let bias = b[co];
        for v in yc.iter_mut() {
            *v += bias;
        }
    });
    y
}

/// Gradients of conv_transpose2d. Returns (dx, dw, db).
pub fn convt2d_bwd(
    x: &[f64],
    w: &[f64],
    g: &ConvTGeom,
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = g.hi * g.wi;
    let ckk = g.cout * g.kh * g.kw;

    // dcols [ckk, n]: gather from dy at the scatter targets.
    let mut dcols = vec![0.0; ckk * n];
    dcols
        .par_chunks_mut(g.kh * g.kw * n)
        .enumerate()
        .for_each(|(co, chunk)| {
            let dyc = &dy[co * g.ho * g.wo..(co + 1) * g.ho * g.wo];
            for u in 0..g.kh {
                for v in 0..g.kw {
                    let row = (u * g.kw + v) * n;
                    for hi in 0..g.hi {
                        let ho = (hi * g.stride + u) as isize - g.pad as isize;
                        let dst = &mut chunk[row + hi * g.wi..row + (hi + 1) * g.wi];
                        if ho < 0 || ho >= g.ho as isize {
                            dst.fill(0.0);
                            continue;
                        }
                        let dyrow = &dyc[ho as usize * g.wo..(ho as usize + 1) * g.wo];
                        for (wi_, d) in dst.iter_mut().enumerate() {
                            let wo = (wi_ * g.stride + v) as isize - g.pad as isize;
                            *d = if wo < 0 || wo >= g.wo as isize {
                                0.0
                            } else {
                                dyrow[wo as usize]
                            };
                        }
                    }
                }
            }
        });

    // dx [Cin, n] = w_mat · dcols, w_mat [Cin, ckk]
    let mut dx = vec![0.0; g.cin * n];
    gemm_nn(g.cin, ckk, n, w, &dcols, &mut dx, 0.0);

    // dw [Cin, ckk] = x_flat · dcolsᵀ
    let mut dw = vec![0.0; g.cin * ckk];
    gemm_nt(g.cin, n, ckk, x, &dcols, &mut dw, 0.0);

    let mut db = vec![0.0; g.cout];
    for (co, dyc) in dy.chunks(g.ho * g.wo).enumerate() {
        db[co] = dyc.iter().sum();
    }
    (dx, dw, db)
}

// ---------------------------------------------------------------------------
// Normalization
// ---------------------------------------------------------------------------

pub const NORM_EPS: f64 = 1e-5;

/// GroupNorm over [C, H*W] with per-channel affine.
pub fn group_norm_fwd(
    x: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
    beta: &[f64],
) -> Vec<f64> {
    let gsize = c / groups;
    let n = gsize * hw;
    let mut y = vec![0.0; x.len()];
    for g in 0..groups {
        let base = g * n;
        let xs = &x[base..base + n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        for cc in 0..gsize {
            let ch = g * gsize + cc;
            let (ga, be) = (gamma[ch], beta[ch]);
            let xrow = &xs[cc * hw..(cc + 1) * hw];
            let yrow = &mut y[base + cc * hw..base + (cc + 1) * hw];
            for (yo, &xi) in yrow.iter_mut().zip(xrow) {
                *yo = ga * (xi - mean) * inv + be;
            }
        }
    }
    y
}

/// GroupNorm gradients. Returns (dx, dgamma, dbeta).
pub fn group_norm_bwd(
    x: &[f64],
    dy: &[f64],
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let gsize = c / groups;
    let n = gsize * hw;
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    for g in 0..groups {
        let base = g * n;
        let xs = &x[base..base + n];
        let dys = &dy[base..base + n];
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();

        // t = gamma_c * dy; reductions of t and t*xhat over the group.
        let mut sum_t = 0.0;
        let mut sum_tx = 0.0;
        for cc in 0..gsize {
            let ch = g * gsize + cc;
            let ga = gamma[ch];
            for i in 0..hw {
                let idx = cc * hw + i;
                let xhat = (xs[idx] - mean) * inv;
                let t = ga * dys[idx];
                sum_t += t;
                sum_tx += t * xhat;
                dgamma[ch] += dys[idx] * xhat;
                dbeta[ch] += dys[idx];
            }
        }
        let mt = sum_t / n as f64;
        let mtx = sum_tx / n as f64;
        for cc in 0..gsize {
            let ch = g * gsize + cc;
            let ga = gamma[ch];
            for i in 0..hw {
                let idx = cc * hw + i;
                let xhat = (xs[idx] - mean) * inv;
                dx[base + idx] = inv * (ga * dys[idx] - mt - xhat * mtx);
            }
        }
    }
    (dx, dgamma, dbeta)
}

/// LayerNorm over the last axis of a [rows, k] view with affine.
pub fn layer_norm_fwd(x: &[f64], rows: usize, k: usize, gamma: &[f64], beta: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * k..(r + 1) * k];
        let mean = xs.iter().sum::<f64>() / k as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let ys = &mut y[r * k..(r + 1) * k];
        for j in 0..k {
            ys[j] = gamma[j] * (xs[j] - mean) * inv + beta[j];
        }
    }
    y
}

/// LayerNorm gradients. Returns (dx, dgamma, dbeta).
pub fn layer_norm_bwd(
    x: &[f64],
    dy: &[f64],
    rows: usize,
    k: usize,
    gamma: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut dx = vec![0.0; x.len()];
    let mut dgamma = vec![0.0; k];
    let mut dbeta = vec![0.0; k];
    for r in 0..rows {
        let xs = &x[r * k..(r + 1) * k];
        let dys = &dy[r * k..(r + 1) * k];
        let mean = xs.iter().sum::<f64>() / k as f64;
        let var = xs.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k as f64;
        let inv = 1.0 / (var + NORM_EPS).sqrt();
        let mut sum_t = 0.0;
        let mut sum_tx = 0.0;
        for j in 0..k {
            let xhat = (xs[j] - mean) * inv;
            let t = gamma[j] * dys[j];
            sum_t += t;
            sum_tx += t * xhat;
            dgamma[j] += dys[j] * xhat;
            dbeta[j] += dys[j];
        }
        let mt = sum_t / k as f64;
        let mtx = sum_tx / k as f64;
        let dxs = &mut dx[r * k..(r + 1) * k];
        for j in 0..k {
            let xhat = (xs[j] - mean) * inv;
            dxs[j] = inv * (gamma[j] * dys[j] - mt - xhat * mtx);
        }
    }
    (dx, dgamma, dbeta)
}

// ---------------------------------------------------------------------------
// Softmax and activations
// ---------------------------------------------------------------------------

pub fn softmax_rows_fwd(x: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    for r in 0..rows {
        let xs = &x[r * k..(r + 1) * k];
        let ys = &mut y[r * k..(r + 1) * k];
        let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..k {
            let e = (xs[j] - mx).exp();
            ys[j] = e;
            z += e;
        }
        let inv = 1.0 / z;
        for v in ys.iter_mut() {
            *v *= inv;
        }
    }
    y
}

pub fn softmax_rows_bwd(y: &[f64], dy: &[f64], rows: usize, k: usize) -> Vec<f64> {
    let mut dx = vec![0.0; y.len()];
    for r in 0..rows {
        let ys = &y[r * k..(r + 1) * k];
        let dys = &dy[r * k..(r + 1) * k];
        let dot: f64 = ys.iter().zip(dys).map(|(a, b)| a * b).sum();
        let dxs = &mut dx[r * k..(r + 1) * k];
        for j in 0..k {
            dxs[j] = ys[j] * (dys[j] - dot);
        }
    }
    dx
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

pub fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

// ---------------------------------------------------------------------------
// Nearest-neighbor spatial resize
// ---------------------------------------------------------------------------

/// Center-aligned source index for nearest resize.
#[inline]
pub fn nn_index(dst: usize, dst_len: usize, src_len: usize) -> usize {
    let pos = (dst as f64 + 0.5) * src_len as f64 / dst_len as f64;
    (pos.floor() as usize).min(src_len - 1)
}

/// Nearest resize of [C, Hi, Wi] to [C, Ho, Wo].
pub fn nearest_resize_fwd(
    x: &[f64],
    c: usize,
    hi: usize,
    wi: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut y = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let xs = &x[ch * hi * wi..(ch + 1) * hi * wi];
        let ys = &mut y[ch * ho * wo..(ch + 1) * ho * wo];
        for i in 0..ho {
            let si = nn_index(i, ho, hi);
            for j in 0..wo {
                let sj = nn_index(j, wo, wi);
                ys[i * wo + j] = xs[si * wi + sj];
            }
        }
    }
    y
}

pub fn nearest_resize_bwd(
    dy: &[f64],
    c: usize,
    hi: usize,
    wi: usize,
    ho: usize,
    wo: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; c * hi * wi];
    for ch in 0..c {
        let dys = &dy[ch * ho * wo..(ch + 1) * ho * wo];
        let dxs = &mut dx[ch * hi * wi..(ch + 1) * hi * wi];
        for i in 0..ho {
            let si = nn_index(i, ho, hi);
            for j in 0..wo {
                let sj = nn_index(j, wo, wi);
                dxs[si * wi + sj] += dys[i * wo + j];
            }
        }
    }
    dx
}
