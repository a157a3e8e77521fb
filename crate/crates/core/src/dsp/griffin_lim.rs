//! Mel-to-waveform reconstruction: filterbank pseudo-inverse followed by
//! Griffin-Lim phase recovery. Stands in for a neural vocoder; fidelity is
//! not a goal beyond round-trip consistency.

use rustfft::num_complex::Complex;

use super::mel::{mel_filterbank, MelSpectrogram, LOG_FLOOR, N_MELS};
use super::stft::{overlap_add, stft_frames, StftConfig};
use super::wav::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Solves A x = b for square A by Gaussian elimination with partial
/// pivoting. A is row-major n x n and consumed in place.
fn solve_in_place(a: &mut [f64], b: &mut [f64], n: usize) -> Result<()> {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
        if a[pivot * n + col].abs() < 1e-12 {
            return Err(Error::contract("singular filterbank Gram matrix"));
        }
        if pivot != col {
            for k in 0..n {
                a.swap(col * n + k, pivot * n + k);
            }
            b.swap(col, pivot);
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let f = a[row * n + col] * inv;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut v = b[col];
        for k in col + 1..n {
            v -= a[col * n + k] * b[k];
        }
        b[col] = v / a[col * n + col];
    }
    Ok(())
}

/// Lawson-Hanson non-negative least squares: min ||A x - b|| with x >= 0.
/// Columns of A are given densely; the filterbank's columns have at most
/// two nonzero entries, so the active sets stay small.
fn nnls(a_cols: &[Vec<f64>], b: &[f64], max_iter: usize) -> Result<Vec<f64>> {
    let n = a_cols.len();
    let m = b.len();
    let mut x = vec![0.0; n];
    let mut passive: Vec<usize> = Vec::new();
    let mut in_passive = vec![false; n];
    let mut r = b.to_vec();
    let tol = 1e-12 * b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-30);
    for _ in 0..max_iter {
        let mut best: Option<usize> = None;
        let mut best_w = tol;
        for j in 0..n {
            if in_passive[j] {
                continue;
            }
            let w: f64 = a_cols[j].iter().zip(&r).map(|(a, b)| a * b).sum();
            if w > best_w {
                best_w = w;
                best = Some(j);
            }
        }
        let Some(j) = best else { break };
        passive.push(j);
        in_passive[j] = true;
        loop {
            // Unconstrained least squares on the passive columns.
            let np = passive.len();
            let mut gram = vec![0.0; np * np];
            let mut rhs = vec![0.0; np];
            for (i, &ci) in passive.iter().enumerate() {
                for (j2, &cj) in passive.iter().enumerate() {
                    gram[i * np + j2] =
                        a_cols[ci].iter().zip(&a_cols[cj]).map(|(a, b)| a * b).sum();
                }
                rhs[i] = a_cols[ci].iter().zip(b).map(|(a, b)| a * b).sum();
            }
            solve_in_place(&mut gram, &mut rhs, np)?;
            if rhs.iter().all(|&z| z > 0.0) {
                for (i, &ci) in passive.iter().enumerate() {
                    x[ci] = rhs[i];
                }
                break;
            }
            let mut alpha = f64::INFINITY;
            for (i, &ci) in passive.iter().enumerate() {
                if rhs[i] <= 0.0 {
                    alpha = alpha.min(x[ci] / (x[ci] - rhs[i]));
                }
            }
            for (i, &ci) in passive.iter().enumerate() {
                x[ci] += alpha * (rhs[i] - x[ci]);
            }
            let mut keep = Vec::with_capacity(passive.len());
            for &ci in &passive {
                if x[ci] > 1e-14 {
                    keep.push(ci);
                } else {
                    x[ci] = 0.0;
                    in_passive[ci] = false;
                }
            }
            passive = keep;
            if passive.is_empty() {
                break;
            }
        }
        for i in 0..m {
            let mut ax = 0.0;
            for &ci in &passive {
                ax += a_cols[ci][i] * x[ci];
            }
            r[i] = b[i] - ax;
        }
    }
    Ok(x)
}

/// Hann power mainlobe, the smoothing kernel of the inversion basis.
const MAINLOBE: [f64; 3] = [0.25, 1.0, 0.25];

/// Inverts mel power back to non-negative linear power.
///
/// A plain pseudo-inverse clipped at zero leaves large positive residuals
/// in quiet bands (the clipped negative lobes no longer cancel), and an
/// unconstrained NNLS picks spectra too spiky for any real signal to
/// realize, which stalls the phase recovery. Solving min ||M K y - p||
/// with y >= 0 over a mainlobe-smoothed basis K gives a solution
/// x = K y that is both mel-consistent and shaped like a windowed
/// analysis of a real signal.
fn mel_to_linear_power(m: &MelSpectrogram, cfg: &StftConfig) -> Result<Vec<Vec<f64>>> {
    let bins = cfg.bin_count();
    let fb = mel_filterbank(cfg, N_MELS, f64::from(SAMPLE_RATE));
    let ksum: f64 = MAINLOBE.iter().sum();
    let smoothed_cols: Vec<Vec<f64>> = (0..bins)
        .map(|k| {
            let mut col = vec![0.0; N_MELS];
            for (d, &kv) in MAINLOBE.iter().enumerate() {
                let j = k as isize + d as isize - 1;
                if j >= 0 && (j as usize) < bins {
                    for (mm, c) in col.iter_mut().enumerate() {
                        *c += kv / ksum * fb[mm * bins + j as usize];
                    }
                }
            }
            col
        })
        .collect();
    let frames = m.n_frames();
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let p: Vec<f64> = (0..N_MELS)
            .map(|mm| (m.at(mm, t).exp() - LOG_FLOOR).max(0.0))
            .collect();
        let y = nnls(&smoothed_cols, &p, 4 * N_MELS)?;
        let mut x = vec![0.0; bins];
        for (k, &yv) in y.iter().enumerate() {
            if yv <= 0.0 {
                continue;
            }
            for (d, &kv) in MAINLOBE.iter().enumerate() {
                let j = k as isize + d as isize - 1;
                if j >= 0 && (j as usize) < bins {
                    x[j as usize] += yv * kv / ksum;
                }
            }
        }
        out.push(x);
    }
    Ok(out)
}

/// Number of replicated edge frames shielding the signal from boundary
/// effects of the iteration.
const EDGE_GUARD: usize = 8;

/// Griffin-Lim phase recovery with zero-phase initialization. The whole
/// iteration runs in the padded frame domain (edge frames replicated, no
/// re-padding between iterations), so boundary artifacts stay inside the
/// guard band that is trimmed at the end. Deterministic.
pub fn griffin_lim(m: &MelSpectrogram, cfg: &StftConfig, iters: usize) -> Result<Waveform> {
    if iters == 0 {
        return Err(Error::config("griffin_lim needs at least one iteration".to_string()));
    }
    cfg.validate()?;
    let mut magnitude: Vec<Vec<f64>> = mel_to_linear_power(m, cfg)?
        .into_iter()
        .map(|frame| frame.into_iter().map(f64::sqrt).collect())
        .collect();
    // Replicate edge frames as a guard band.
    for _ in 0..EDGE_GUARD {
        magnitude.insert(0, magnitude[0].clone());
        magnitude.push(magnitude[magnitude.len() - 1].clone());
    }
    let frames = magnitude.len();
    let out_len = (m.n_frames() - 1) * cfg.hop;
    let bins = cfg.bin_count();

    // Zero phase: spectrum is the magnitude itself.
    let mut spec: Vec<Vec<Complex<f64>>> = magnitude
        .iter()
        .map(|fr| fr.iter().map(|&v| Complex::new(v, 0.0)).collect())
        .collect();
    let mut full = overlap_add(&spec, cfg);
    for _ in 1..iters {
        let re = stft_frames(&full, cfg, frames);
        for (t, frame) in spec.iter_mut().enumerate() {
            for k in 0..bins {
                let c = re[t][k];
                let norm = c.norm();
                frame[k] = if norm > 1e-12 {
                    c * (magnitude[t][k] / norm)
                } else {
                    Complex::new(magnitude[t][k], 0.0)
                };
            }
        }
        full = overlap_add(&spec, cfg);
    }
    // Trim the guard band and the analysis half-window.
    let start = EDGE_GUARD * cfg.hop + cfg.win_len / 2;
    Waveform::new(full[start..start + out_len].to_vec())
}
