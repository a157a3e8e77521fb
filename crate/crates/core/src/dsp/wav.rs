//! RIFF/WAVE reading and writing, with windowed-sinc resampling to 16 kHz.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// The pipeline's fixed sample rate in Hz.
pub const SAMPLE_RATE: u32 = 16000;

/// Mono 16 kHz waveform with samples in [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    samples: Vec<f64>,
    sample_rate: u32,
}

impl Waveform {
    /// Builds a waveform, scaling down uniformly if the peak exceeds 1.
    pub fn new(samples: Vec<f64>) -> Result<Waveform> {
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::contract("non-finite sample in waveform"));
        }
        let peak = samples.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        let samples = if peak > 1.0 {
            samples.iter().map(|s| s / peak).collect()
        } else {
            samples
        };
        Ok(Waveform { samples, sample_rate: SAMPLE_RATE })
    }

    pub fn silence(n: usize) -> Waveform {
        Waveform { samples: vec![0.0; n], sample_rate: SAMPLE_RATE }
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate)
    }

    pub fn rms(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        (self.samples.iter().map(|s| s * s).sum::<f64>() / self.samples.len() as f64).sqrt()
    }
}

/// Reads a RIFF/WAVE file: PCM16 or float32, mono or stereo (averaged),
/// any sample rate (resampled to 16 kHz).
pub fn read_wav(path: &Path) -> Result<Waveform> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_wav(&bytes)
}

fn parse_wav(bytes: &[u8]) -> Result<Waveform> {
    let header_err = |msg: &str| Error::format(format!("wav: {msg}"));
    if bytes.len() < 12 || &bytes[0..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(header_err("missing RIFF/WAVE header"));
    }
    let mut pos = 12usize;
    let mut fmt: Option<(u16, u16, u32, u16)> = None; // (format, channels, rate, bits)
    let mut data: Option<&[u8]> = None;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let size = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        pos += 8;
        if pos + size > bytes.len() {
            return Err(Error::Corrupt {
                offset: pos as u64,
                detail: format!("chunk {:?} overruns file", String::from_utf8_lossy(id)),
            });
        }
        let body = &bytes[pos..pos + size];
        match id {
            b"fmt " => {
                if size < 16 {
                    return Err(header_err("fmt chunk too small"));
                }
                let format = u16::from_le_bytes(body[0..2].try_into().unwrap());
                let channels = u16::from_le_bytes(body[2..4].try_into().unwrap());
                let rate = u32::from_le_bytes(body[4..8].try_into().unwrap());
                let bits = u16::from_le_bytes(body[14..16].try_into().unwrap());
                fmt = Some((format, channels, rate, bits));
            }
            b"data" => data = Some(body),
            _ => {}
        }
        // Chunks are word-aligned.
        pos += size + (size & 1);
    }
    let (format, channels, rate, bits) = fmt.ok_or_else(|| header_err("no fmt chunk"))?;
    let data = data.ok_or_else(|| header_err("no data chunk"))?;
    if channels == 0 || rate == 0 {
        return Err(header_err("zero channels or sample rate"));
    }
    let channels = channels as usize;
    let interleaved: Vec<f64> = match (format, bits) {
        (1, 16) => data
            .chunks_exact(2)
            .map(|c| f64::from(i16::from_le_bytes(c.try_into().unwrap())) / 32768.0)
            .collect(),
        (3, 32) => data
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect(),
        _ => {
            return Err(Error::Unsupported(format!(
                "wav codec: format tag {format}, {bits}-bit"
            )))
        }
    };
    if interleaved.iter().any(|s| !s.is_finite()) {
        return Err(Error::format("wav: non-finite sample value"));
    }
    // Downmix to mono by averaging channels.
    let frames = interleaved.len() / channels;
    let mono: Vec<f64> = (0..frames)
        .map(|i| {
            interleaved[i * channels..(i + 1) * channels].iter().sum::<f64>() / channels as f64
        })
        .collect();
    let resampled = if rate == SAMPLE_RATE {
        mono
    } else {
        resample_sinc(&mono, rate, SAMPLE_RATE)
    };
    Waveform::new(resampled)
}

/// Windowed-sinc resampling with a Hann-windowed kernel; the cutoff sits at
/// the lower of the two Nyquist frequencies.
fn resample_sinc(x: &[f64], from: u32, to: u32) -> Vec<f64> {
    if x.is_empty() {
        return Vec::new();
    }
    const HALF_WIDTH: isize = 32;
    let ratio = f64::from(to) / f64::from(from);
    let cutoff = ratio.min(1.0);
    let out_len = (x.len() as f64 * ratio).round() as usize;
    let mut out = Vec::with_capacity(out_len);
    for j in 0..out_len {
        let center = j as f64 / ratio;
        let k0 = (center.floor() as isize - HALF_WIDTH).max(0);
        let k1 = (center.floor() as isize + HALF_WIDTH + 1).min(x.len() as isize - 1);
        let mut acc = 0.0;
        for k in k0..=k1 {
            let u = center - k as f64;
            let w = 0.5 * (1.0 + (std::f64::consts::PI * u / (HALF_WIDTH as f64 + 1.0)).cos());
            acc += x[k as usize] * cutoff * sinc(cutoff * u) * w;
        }
        out.push(acc);
    }
    out
}

fn sinc(u: f64) -> f64 {
    if u.abs() < 1e-12 {
        1.0
    } else {
        let pu = std::f64::consts::PI * u;
        pu.sin() / pu
    }
}

/// Writes PCM16 LE mono at 16 kHz.
pub fn write_wav(path: &Path, w: &Waveform) -> Result<()> {
    let n = w.samples.len();
    let data_size = 2 * n as u32;
    let mut buf = Vec::with_capacity(44 + 2 * n);
    buf.extend_from_slice(b"RIFF");
    buf.extend_from_slice(&(36 + data_size).to_le_bytes());
    buf.extend_from_slice(b"WAVE");
    buf.extend_from_slice(b"fmt ");
    buf.extend_from_slice(&16u32.to_le_bytes());
    buf.extend_from_slice(&1u16.to_le_bytes()); // PCM
    buf.extend_from_slice(&1u16.to_le_bytes()); // mono
    buf.extend_from_slice(&SAMPLE_RATE.to_le_bytes());
    buf.extend_from_slice(&(SAMPLE_RATE * 2).to_le_bytes()); // byte rate
    buf.extend_from_slice(&2u16.to_le_bytes()); // block align
    buf.extend_from_slice(&16u16.to_le_bytes()); // bits
    buf.extend_from_slice(b"data");
    buf.extend_from_slice(&data_size.to_le_bytes());
    for &s in &w.samples {
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        buf.extend_from_slice(&q.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}
