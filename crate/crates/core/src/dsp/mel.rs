//! Slaney-style mel filterbank and log-mel spectrograms.
//!
//! 64 triangular, area-normalized filters spanning 0-8000 Hz over the
//! power spectrum, followed by a natural log with a 1e-5 floor. The mel
//! scale is linear below 1 kHz and logarithmic above.

use super::stft::{stft, StftConfig};
use super::wav::Waveform;
use crate::error::{Error, Result};

pub const N_MELS: usize = 64;
pub const LOG_FLOOR: f64 = 1e-5;

const MIN_LOG_HZ: f64 = 1000.0;
const LIN_STEP: f64 = 200.0 / 3.0;
const MIN_LOG_MEL: f64 = MIN_LOG_HZ / LIN_STEP;

pub fn hz_to_mel(f: f64) -> f64 {
    if f < MIN_LOG_HZ {
        f / LIN_STEP
    } else {
        MIN_LOG_MEL + (f / MIN_LOG_HZ).ln() / (6.4f64.ln() / 27.0)
    }
}

pub fn mel_to_hz(m: f64) -> f64 {
    if m < MIN_LOG_MEL {
        m * LIN_STEP
    } else {
        MIN_LOG_HZ * ((m - MIN_LOG_MEL) * (6.4f64.ln() / 27.0)).exp()
    }
}

/// D x W log-mel matrix (row = mel bin, column = frame).
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    data: Vec<f64>,
    n_mels: usize,
    n_frames: usize,
    frame_rate: f64,
}

impl MelSpectrogram {
    pub fn from_parts(data: Vec<f64>, n_mels: usize, n_frames: usize, frame_rate: f64) -> Result<Self> {
        if data.len() != n_mels * n_frames {
            return Err(Error::shape(format!(
                "mel data of {} values is not {n_mels}x{n_frames}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("non-finite mel value"));
        }
        Ok(MelSpectrogram { data, n_mels, n_frames, frame_rate })
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn frame_rate(&self) -> f64 {
        self.frame_rate
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, mel: usize, frame: usize) -> f64 {
        self.data[mel * self.n_frames + frame]
    }

    /// Row of one mel bin across frames.
    pub fn row(&self, mel: usize) -> &[f64] {
        &self.data[mel * self.n_frames..(mel + 1) * self.n_frames]
    }
}

/// Triangular filterbank matrix, [n_mels x bins], Slaney area normalization.
pub fn mel_filterbank(cfg: &StftConfig, n_mels: usize, sample_rate: f64) -> Vec<f64> {
    let bins = cfg.bin_count();
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    // n_mels + 2 corner points, uniformly spaced on the mel scale.
    let corners: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = vec![0.0; n_mels * bins];
    for m in 0..n_mels {
        let (lo, center, hi) = (corners[m], corners[m + 1], corners[m + 2]);
        let norm = 2.0 / (hi - lo);
        for k in 0..bins {
            let f = k as f64 * sample_rate / cfg.fft_len as f64;
            let up = (f - lo) / (center - lo);
            let down = (hi - f) / (hi - center);
            let w = up.min(down).max(0.0);
            fb[m * bins + k] = w * norm;
        }
    }
    fb
}

/// Center frequency of each mel filter, in Hz.
pub fn mel_center_frequencies(cfg: &StftConfig, n_mels: usize) -> Vec<f64> {
    let mel_lo = hz_to_mel(cfg.f_min);
    let mel_hi = hz_to_mel(cfg.f_max);
    (1..=n_mels)
        .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
        .collect()
}

/// |STFT|^2 -> mel filterbank -> ln(power + 1e-5).
pub fn mel_spectrogram(w: &Waveform, cfg: &StftConfig) -> Result<MelSpectrogram> {
    let spec = stft(w.samples(), cfg)?;
    let bins = cfg.bin_count();
    let frames = spec.len();
    let fb = mel_filterbank(cfg, N_MELS, f64::from(w.sample_rate()));
    let mut data = vec![0.0; N_MELS * frames];
    let mut power = vec![0.0; bins];
    for (t, frame) in spec.iter().enumerate() {
        for (k, c) in frame.iter().enumerate() {
            power[k] = c.norm_sqr();
        }
        for m in 0..N_MELS {
            let row = &fb[m * bins..(m + 1) * bins];
            let p: f64 = row.iter().zip(&power).map(|(a, b)| a * b).sum();
            data[m * frames + t] = (p + LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::from_parts(data, N_MELS, frames, cfg.frame_rate())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::wav::SAMPLE_RATE;

    fn tone(freq: f64, amp: f64, secs: f64) -> Waveform {
        let n = (secs * f64::from(SAMPLE_RATE)) as usize;
        Waveform::new(
            (0..n)
                .map(|i| amp * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn silence_hits_the_log_floor() {
        let cfg = StftConfig::audioldm();
        let w = Waveform::silence(16_000);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        for &v in m.data() {
            assert_eq!(v, LOG_FLOOR.ln());
        }
    }

    #[test]
    fn tone_peaks_at_the_bracketing_mel_filter() {
        // The argmax over mel bins must equal the filter whose center
        // frequency brackets 1 kHz, recomputed from the scale formula.
        let cfg = StftConfig::audioldm();
        let w = tone(1000.0, 0.5, 1.0);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        let centers = mel_center_frequencies(&cfg, N_MELS);
        let expected = (0..N_MELS)
            .min_by(|&a, &b| {
                (centers[a] - 1000.0)
                    .abs()
                    .partial_cmp(&(centers[b] - 1000.0).abs())
                    .unwrap()
            })
            .unwrap();
        // Interior frames only: edge frames see reflect padding.
        for t in 10..m.n_frames() - 10 {
            let argmax = (0..N_MELS)
                .max_by(|&a, &b| m.at(a, t).partial_cmp(&m.at(b, t)).unwrap())
                .unwrap();
            assert!(
                argmax == expected
                    || (centers[argmax] - 1000.0).abs() <= (centers[expected] - 1000.0).abs() * 1.5
                        && argmax.abs_diff(expected) <= 1,
                "frame {t}: argmax {argmax} (center {:.1} Hz), expected {expected} (center {:.1} Hz)",
                centers[argmax],
                centers[expected]
            );
        }
    }

    #[test]
    fn five_second_clip_has_501_frames() {
        let cfg = StftConfig::audioldm();
        let w = Waveform::silence(80_000);
        let m = mel_spectrogram(&w, &cfg).unwrap();
        assert_eq!(m.n_frames(), 501);
        assert_eq!(m.n_mels(), 64);
    }

    #[test]
    fn doubling_amplitude_adds_log4_above_floor() {
        let cfg = StftConfig::audioldm();
        let quiet = mel_spectrogram(&tone(800.0, 0.25, 0.5), &cfg).unwrap();
        let loud = mel_spectrogram(&tone(800.0, 0.5, 0.5), &cfg).unwrap();
        let mut checked = 0;
        for (a, b) in quiet.data().iter().zip(loud.data()) {
            // Only where power dominates the floor.
            if *a > (1e-2f64).ln() {
                assert!(((b - a) - 4.0f64.ln()).abs() < 0.02, "{a} -> {b}");
                checked += 1;
            }
        }
        assert!(checked > 100, "only {checked} cells above threshold");
    }

    #[test]
    fn filterbank_rows_are_nonnegative_and_cover_band() {
        let cfg = StftConfig::audioldm();
        let fb = mel_filterbank(&cfg, N_MELS, 16000.0);
        let bins = cfg.bin_count();
        for m in 0..N_MELS {
            let row = &fb[m * bins..(m + 1) * bins];
            assert!(row.iter().all(|&v| v >= 0.0));
            assert!(row.iter().sum::<f64>() > 0.0, "filter {m} is empty");
        }
    }

    #[test]
    fn mel_scale_round_trips() {
        for f in [0.0, 150.0, 999.0, 1000.0, 3123.5, 8000.0] {
            assert!((mel_to_hz(hz_to_mel(f)) - f).abs() < 1e-9);
        }
    }
}
