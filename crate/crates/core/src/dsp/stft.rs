//! Short-time Fourier transform with reflect center padding, and its
//! inverse via windowed overlap-add.

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::wav::SAMPLE_RATE;
use crate::error::{Error, Result};

/// Analysis configuration. The `audioldm` preset is the one the rest of
/// the pipeline assumes: 1024 window, 1024 FFT, 160 hop, Hann, 0-8 kHz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StftConfig {
    pub win_len: usize,
    pub fft_len: usize,
    pub hop: usize,
    pub f_min: f64,
    pub f_max: f64,
}

impl Default for StftConfig {
    fn default() -> Self {
        StftConfig::audioldm()
    }
}

impl StftConfig {
    pub fn audioldm() -> StftConfig {
        StftConfig { win_len: 1024, fft_len: 1024, hop: 160, f_min: 0.0, f_max: 8000.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hop == 0 || self.hop > self.win_len {
            return Err(Error::config(format!(
                "hop {} must be in 1..={}",
                self.hop, self.win_len
            )));
        }
        if self.win_len > self.fft_len {
            return Err(Error::config("window longer than FFT".to_string()));
        }
        if self.f_max > f64::from(SAMPLE_RATE) / 2.0 {
            return Err(Error::config(format!(
                "f_max {} above Nyquist {}",
                self.f_max,
                SAMPLE_RATE / 2
            )));
        }
        Ok(())
    }

    /// Number of analysis frames for a signal of `len` samples under
    /// center padding: 1 + floor(len / hop).
    pub fn frame_count(&self, len: usize) -> usize {
        1 + len / self.hop
    }

    pub fn bin_count(&self) -> usize {
        self.fft_len / 2 + 1
    }

    /// Periodic Hann window.
    pub fn window(&self) -> Vec<f64> {
        let n = self.win_len;
        (0..n)
            .map(|i| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos()))
            .collect()
    }

    pub fn frame_rate(&self) -> f64 {
        f64::from(SAMPLE_RATE) / self.hop as f64
    }
}

/// Reflect-pads by win/2 on each side so frame k is centered at k*hop.
fn center_pad(x: &[f64], half: usize) -> Vec<f64> {
    let n = x.len();
    let mut out = Vec::with_capacity(n + 2 * half);
    for i in 0..half {
        out.push(x[(half - i).min(n - 1)]);
    }
    out.extend_from_slice(x);
    for i in 0..half {
        let idx = n as isize - 2 - i as isize;
        out.push(x[idx.clamp(0, n as isize - 1) as usize]);
    }
    out
}

/// Windowed analysis of an already-padded signal: one frame every `hop`
/// samples starting at sample 0.
pub fn stft_frames(padded: &[f64], cfg: &StftConfig, frames: usize) -> Vec<Vec<Complex<f64>>> {
    debug_assert!(padded.len() >= (frames - 1) * cfg.hop + cfg.win_len);
    let window = cfg.window();
    let fft = FftPlanner::new().plan_fft_forward(cfg.fft_len);
    let bins = cfg.bin_count();
    let mut out = Vec::with_capacity(frames);
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    for f in 0..frames {
        let start = f * cfg.hop;
        for i in 0..cfg.fft_len {
            buf[i] = if i < cfg.win_len {
                Complex::new(padded[start + i] * window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        fft.process(&mut buf);
        out.push(buf[..bins].to_vec());
    }
    out
}

/// Windowed overlap-add of spectral frames, normalized by the accumulated
/// squared window. Returns the full padded-domain signal of length
/// (frames - 1) * hop + win.
pub fn overlap_add(frames: &[Vec<Complex<f64>>], cfg: &StftConfig) -> Vec<f64> {
    let total = (frames.len() - 1) * cfg.hop + cfg.win_len;
    let mut acc = vec![0.0; total];
    let mut win_acc = vec![0.0; total];
    let window = cfg.window();
    let ifft = FftPlanner::new().plan_fft_inverse(cfg.fft_len);
    let bins = cfg.bin_count();
    let mut buf = vec![Complex::new(0.0, 0.0); cfg.fft_len];
    for (f, spec) in frames.iter().enumerate() {
        buf[..bins].copy_from_slice(spec);
        // Hermitian completion for a real signal.
        for i in bins..cfg.fft_len {
            buf[i] = spec[cfg.fft_len - i].conj();
        }
        ifft.process(&mut buf);
        let start = f * cfg.hop;
        let scale = 1.0 / cfg.fft_len as f64;
        for i in 0..cfg.win_len {
            acc[start + i] += buf[i].re * scale * window[i];
            win_acc[start + i] += window[i] * window[i];
        }
    }
    for (a, w) in acc.iter_mut().zip(&win_acc) {
        *a = if *w > 1e-11 { *a / *w } else { 0.0 };
    }
    acc
}

/// Complex STFT: frames x (fft/2 + 1) bins, with reflect center padding.
pub fn stft(x: &[f64], cfg: &StftConfig) -> Result<Vec<Vec<Complex<f64>>>> {
    cfg.validate()?;
    if x.len() < cfg.win_len {
        return Err(Error::config(format!(
            "signal of {} samples is shorter than the {}-sample window",
            x.len(),
            cfg.win_len
        )));
    }
    let half = cfg.win_len / 2;
    let padded = center_pad(x, half);
    Ok(stft_frames(&padded, cfg, cfg.frame_count(x.len())))
}

/// Inverse STFT: overlap-add, then trim the center padding back to
/// `out_len` samples.
pub fn istft(frames: &[Vec<Complex<f64>>], cfg: &StftConfig, out_len: usize) -> Vec<f64> {
    let half = cfg.win_len / 2;
    let full = overlap_add(frames, cfg);
    full[half..half + out_len].to_vec()
}
