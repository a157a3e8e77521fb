//! The control signal: per-frame energy of a log-mel spectrogram, its
//! smoothing, resizing, and the energy MAE metric.

use crate::dsp::mel::MelSpectrogram;
use crate::error::{Error, Result};

/// One energy value per frame (mean log-mel over frequency, smoothed).
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyCurve {
    values: Vec<f64>,
    frame_rate: f64,
}

impl EnergyCurve {
    pub fn new(values: Vec<f64>, frame_rate: f64) -> Result<EnergyCurve> {
        if values.is_empty() {
            return Err(Error::contract("energy curve needs at least one value"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite energy value"));
        }
        if frame_rate <= 0.0 {
            return Err(Error::config(format!("frame rate must be positive, got {frame_rate}")));
        }
        Ok(EnergyCurve { values, frame_rate })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    /// Min-max normalization to [0, 1]; a constant curve maps to zeros.
    pub fn normalized(&self) -> EnergyCurve {
        let lo = self.values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = self.values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let span = hi - lo;
        let values = if span > 1e-12 {
            self.values.iter().map(|v| (v - lo) / span).collect()
        } else {
            vec![0.0; self.values.len()]
        };
        EnergyCurve { values, frame_rate: self.frame_rate }
    }
}

/// Per-frame mean over the mel bins followed by Savitzky-Golay smoothing.
pub fn energy_from_mel(m: &MelSpectrogram) -> EnergyCurve {
    let frames = m.n_frames();
    let d = m.n_mels();
    let mut means = vec![0.0; frames];
    for t in 0..frames {
        let mut acc = 0.0;
        for mel in 0..d {
            acc += m.at(mel, t);
        }
        means[t] = acc / d as f64;
    }
    let smoothed = savgol(&means, 9, 2).expect("fixed window/order are valid");
    EnergyCurve { values: smoothed, frame_rate: m.frame_rate() }
}

/// Savitzky-Golay smoothing: per position, a least-squares polynomial of
/// the given order over the window, evaluated at the center. Edges fall
/// back to the truncated one-sided neighborhood (no mirrored samples).
pub fn savgol(x: &[f64], window: usize, order: usize) -> Result<Vec<f64>> {
    if x.is_empty() {
        return Err(Error::contract("savgol needs a non-empty input"));
    }
    if window % 2 == 0 {
        return Err(Error::config(format!("savgol window must be odd, got {window}")));
    }
    if order >= window {
        return Err(Error::config(format!(
            "savgol order {order} must be below window {window}"
        )));
    }
    let half = window / 2;
    let n = x.len();
    let mut out = vec![0.0; n];
    for j in 0..n {
        let lo = j.saturating_sub(half);
        let hi = (j + half).min(n - 1);
        out[j] = polyfit_eval(&x[lo..=hi], j - lo, order);
    }
    Ok(out)
}

/// Least-squares polynomial fit of `order` (capped by point count) over
/// `pts`, evaluated at offset `at`. Offsets are centered to keep the
/// normal equations well-conditioned.
fn polyfit_eval(pts: &[f64], at: usize, order: usize) -> f64 {
    let n = pts.len();
    let deg = order.min(n - 1);
    let m = deg + 1;
    let center = (n as f64 - 1.0) / 2.0;
    // Normal equations G c = r with G[a][b] = sum t^(a+b), r[a] = sum y t^a.
    let mut g = vec![0.0; m * m];
    let mut r = vec![0.0; m];
    for (i, &y) in pts.iter().enumerate() {
        let t = i as f64 - center;
        let mut ta = 1.0;
        for a in 0..m {
            r[a] += y * ta;
            let mut tb = ta;
            for b in 0..m {
                g[a * m + b] += tb;
                tb *= t;
            }
            ta *= t;
        }
    }
    solve_small(&mut g, &mut r, m);
    let t = at as f64 - center;
    let mut acc = 0.0;
    let mut tp = 1.0;
    for c in r.iter() {
        acc += c * tp;
        tp *= t;
    }
    acc
}

fn solve_small(a: &mut [f64], b: &mut [f64], n: usize) {
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i * n + col].abs().partial_cmp(&a[j * n + col].abs()).unwrap())
            .unwrap();
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
}

/// Center-aligned nearest-neighbor resize: out[j] = e[floor((j+0.5)*L/S)].
pub fn resize_nn(e: &EnergyCurve, target_len: usize) -> Result<EnergyCurve> {
    if target_len == 0 {
        return Err(Error::contract("resize_nn target length must be positive"));
    }
    let l = e.len();
    let values: Vec<f64> = (0..target_len)
        .map(|j| {
            let src = ((j as f64 + 0.5) * l as f64 / target_len as f64).floor() as usize;
            e.values[src.min(l - 1)]
        })
        .collect();
    let frame_rate = e.frame_rate * target_len as f64 / l as f64;
    EnergyCurve::new(values, frame_rate)
}

/// Mean absolute error between two curves after resampling both to the
/// shorter length. With `normalize`, each curve is min-max scaled to
/// [0, 1] first, making the metric loudness-calibration free.
pub fn energy_mae(a: &EnergyCurve, b: &EnergyCurve, normalize: bool) -> Result<f64> {
    let common = a.len().min(b.len());
    let mut ra = resize_nn(a, common)?;
    let mut rb = resize_nn(b, common)?;
    if normalize {
        ra = ra.normalized();
        rb = rb.normalized();
    }
    let mae = ra
        .values
        .iter()
        .zip(&rb.values)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / common as f64;
    Ok(mae)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::mel::MelSpectrogram;
    use crate::numerics::rng::RngState;

    fn curve(values: Vec<f64>) -> EnergyCurve {
        EnergyCurve::new(values, 100.0).unwrap()
    }

    /// Brute-force per-position normal-equations oracle, written against
    /// the textbook definition rather than the implementation.
    fn savgol_oracle(x: &[f64], window: usize, order: usize) -> Vec<f64> {
        let half = window / 2;
        let n = x.len();
        let mut out = vec![0.0; n];
        for j in 0..n {
            let lo = j.saturating_sub(half);
            let hi = (j + half).min(n - 1);
            let pts: Vec<(f64, f64)> = (lo..=hi)
                .map(|i| (i as f64 - j as f64, x[i]))
                .collect();
            let deg = order.min(pts.len() - 1);
            // Solve the Vandermonde least squares by normal equations.
            let m = deg + 1;
            let mut g = vec![vec![0.0; m]; m];
            let mut r = vec![0.0; m];
            for &(t, y) in &pts {
                for a in 0..m {
                    r[a] += y * t.powi(a as i32);
                    for b in 0..m {
                        g[a][b] += t.powi((a + b) as i32);
                    }
                }
            }
            // Gaussian elimination without pivoting (small, well-scaled).
            for col in 0..m {
                for row in col + 1..m {
                    let f = g[row][col] / g[col][col];
                    for k in col..m {
                        g[row][k] -= f * g[col][k];
                    }
                    r[row] -= f * r[col];
                }
            }
            let mut c = vec![0.0; m];
            for col in (0..m).rev() {
                let mut v = r[col];
                for k in col + 1..m {
                    v -= g[col][k] * c[k];
                }
                c[col] = v / g[col][col];
            }
            out[j] = c[0]; // evaluated at t = 0
        }
        out
    }

    #[test]
    fn savgol_constant_is_unchanged() {
        let x = vec![3.25; 17];
        assert_eq!(savgol(&x, 9, 2).unwrap(), x);
    }

    #[test]
    fn savgol_reproduces_quadratics() {
        let x: Vec<f64> = (0..21).map(|j| (j * j) as f64).collect();
        let y = savgol(&x, 9, 2).unwrap();
        for (a, b) in x.iter().zip(&y) {
            assert!((a - b).abs() < 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn savgol_matches_normal_equations_oracle() {
        let mut rng = RngState::new(17);
        for _ in 0..20 {
            let x: Vec<f64> = (0..40).map(|_| rng.normal() * 3.0).collect();
            let got = savgol(&x, 9, 2).unwrap();
            let expect = savgol_oracle(&x, 9, 2);
            for (a, b) in got.iter().zip(&expect) {
                assert!((a - b).abs() < 1e-9, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn savgol_rejects_even_window() {
        assert!(matches!(savgol(&[1.0, 2.0], 8, 2), Err(Error::Config(_))));
    }

    #[test]
    fn savgol_short_inputs_are_reproduced() {
        // Fewer points than the order: the fit degree drops to n-1 and
        // passes through every point.
        assert_eq!(savgol(&[5.0], 9, 2).unwrap(), vec![5.0]);
        let two = savgol(&[1.0, 3.0], 9, 2).unwrap();
        assert!((two[0] - 1.0).abs() < 1e-12 && (two[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn savgol_is_linear() {
        let mut rng = RngState::new(18);
        let x: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let y: Vec<f64> = (0..30).map(|_| rng.normal()).collect();
        let (alpha, beta) = (0.7, -1.3);
        let combo: Vec<f64> = x.iter().zip(&y).map(|(a, b)| alpha * a + beta * b).collect();
        let lhs = savgol(&combo, 9, 2).unwrap();
        let sx = savgol(&x, 9, 2).unwrap();
        let sy = savgol(&y, 9, 2).unwrap();
        for i in 0..30 {
            assert!((lhs[i] - (alpha * sx[i] + beta * sy[i])).abs() < 1e-10);
        }
    }

    #[test]
    fn energy_of_constant_mel_is_constant() {
        let m = MelSpectrogram::from_parts(vec![-2.5; 64 * 30], 64, 30, 100.0).unwrap();
        let e = energy_from_mel(&m);
        assert!(e.values().iter().all(|&v| (v + 2.5).abs() < 1e-12));
    }

    #[test]
    fn energy_of_linear_mel_is_the_frame_means() {
        // Frame means linear in t: order-2 smoothing reproduces them.
        let frames = 40;
        let data =
            Tensorish::build(64, frames, |_, t| 0.1 * t as f64 - 3.0 + 0.0);
        let m = MelSpectrogram::from_parts(data, 64, frames, 100.0).unwrap();
        let e = energy_from_mel(&m);
        for (t, &v) in e.values().iter().enumerate() {
            assert!((v - (0.1 * t as f64 - 3.0)).abs() < 1e-10);
        }
    }

    struct Tensorish;
    impl Tensorish {
        fn build(d: usize, w: usize, f: impl Fn(usize, usize) -> f64) -> Vec<f64> {
            let mut out = vec![0.0; d * w];
            for mel in 0..d {
                for t in 0..w {
                    out[mel * w + t] = f(mel, t);
                }
            }
            out
        }
    }

    #[test]
    fn energy_matches_mean_then_smooth_composition() {
        let mut rng = RngState::new(19);
        let frames = 50;
        let data: Vec<f64> = (0..64 * frames).map(|_| rng.normal()).collect();
        let m = MelSpectrogram::from_parts(data.clone(), 64, frames, 100.0).unwrap();
        let e = energy_from_mel(&m);
        let means: Vec<f64> = (0..frames)
            .map(|t| (0..64).map(|mel| data[mel * frames + t]).sum::<f64>() / 64.0)
            .collect();
        let expect = savgol_oracle(&means, 9, 2);
        for (a, b) in e.values().iter().zip(&expect) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn energy_commutes_with_mel_offset() {
        let mut rng = RngState::new(20);
        let frames = 35;
        let data: Vec<f64> = (0..64 * frames).map(|_| rng.normal()).collect();
        let shifted: Vec<f64> = data.iter().map(|v| v + 1.75).collect();
        let e1 = energy_from_mel(&MelSpectrogram::from_parts(data, 64, frames, 100.0).unwrap());
        let e2 =
            energy_from_mel(&MelSpectrogram::from_parts(shifted, 64, frames, 100.0).unwrap());
        for (a, b) in e1.values().iter().zip(e2.values()) {
            assert!((b - a - 1.75).abs() < 1e-10);
        }
    }

    #[test]
    fn resize_identity_and_center_mapping() {
        let e = curve(vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(resize_nn(&e, 4).unwrap().values(), e.values());
        // floor((j+0.5)*4/2) = 1, 3.
        assert_eq!(resize_nn(&e, 2).unwrap().values(), &[2.0, 4.0]);
    }

    #[test]
    fn resize_constant_stays_constant() {
        let e = curve(vec![0.6; 7]);
        for s in [1, 3, 7, 20] {
            assert!(resize_nn(&e, s).unwrap().values().iter().all(|&v| v == 0.6));
        }
    }

    #[test]
    fn resize_invents_no_values() {
        let mut rng = RngState::new(21);
        let vals: Vec<f64> = (0..13).map(|_| rng.normal()).collect();
        let e = curve(vals.clone());
        for s in [1, 2, 5, 13, 40] {
            for v in resize_nn(&e, s).unwrap().values() {
                assert!(vals.contains(v));
            }
        }
    }

    #[test]
    fn mae_identical_is_zero_and_opposite_is_one() {
        let a = curve(vec![0.0, 1.0]);
        let b = curve(vec![1.0, 0.0]);
        assert_eq!(energy_mae(&a, &a, true).unwrap(), 0.0);
        assert_eq!(energy_mae(&a, &b, true).unwrap(), 1.0);
    }

    #[test]
    fn mae_raw_mode_hand_case() {
        let a = curve(vec![0.1, 0.2]);
        let b = curve(vec![0.2, 0.4]);
        let got = energy_mae(&a, &b, false).unwrap();
        assert!((got - 0.15).abs() < 1e-12);
    }

    #[test]
    fn mae_is_a_pseudometric() {
        let mut rng = RngState::new(22);
        for _ in 0..30 {
            let n = 5 + rng.below(20) as usize;
            let a = curve((0..n).map(|_| rng.normal()).collect());
            let b = curve((0..n).map(|_| rng.normal()).collect());
            let c = curve((0..n).map(|_| rng.normal()).collect());
            let ab = energy_mae(&a, &b, true).unwrap();
            let ba = energy_mae(&b, &a, true).unwrap();
            assert!((ab - ba).abs() < 1e-12);
            assert!(energy_mae(&a, &a, true).unwrap() < 1e-12);
            let ac = energy_mae(&a, &c, true).unwrap();
            let cb = energy_mae(&c, &b, true).unwrap();
            assert!(ab <= ac + cb + 1e-12);
        }
    }
}
