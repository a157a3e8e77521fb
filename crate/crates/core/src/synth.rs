//! Procedural paired-data generator: class-characteristic waveforms with
//! event schedules, matching video-embedding sequences, and a corpus
//! builder writing wav + feature files plus a TSV manifest.

use std::path::{Path, PathBuf};

use crate::dsp::wav::{write_wav, Waveform, SAMPLE_RATE};
use crate::energy::EnergyCurve;
use crate::error::{Error, Result};
use crate::features::{write_features, FeatureRecord, REC_VIDEO_EMBEDDING, REC_VISUAL_ENERGY};
use crate::numerics::RngState;
use crate::phi::{VideoEmbedding, EMBED_DIM};

/// Segments per second of video, chosen so a 5 s clip yields 112 segments.
pub const SEGMENTS_PER_SECOND: f64 = 112.0 / 5.0;
/// Span of one video segment window in seconds.
pub const SEGMENT_WINDOW: f64 = 0.64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthClass {
    ToneBurst,
    ClickTrain,
    NoiseSwell,
    Chirp,
}

pub const CLASS_COUNT: usize = 4;

impl SynthClass {
    pub fn from_id(id: usize) -> Result<SynthClass> {
        Ok(match id {
            0 => SynthClass::ToneBurst,
            1 => SynthClass::ClickTrain,
            2 => SynthClass::NoiseSwell,
            3 => SynthClass::Chirp,
            _ => return Err(Error::config(format!("class id {id} out of range 0..{CLASS_COUNT}"))),
        })
    }

    pub fn id(&self) -> usize {
        match self {
            SynthClass::ToneBurst => 0,
            SynthClass::ClickTrain => 1,
            SynthClass::NoiseSwell => 2,
            SynthClass::Chirp => 3,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            SynthClass::ToneBurst => "tone-burst",
            SynthClass::ClickTrain => "click-train",
            SynthClass::NoiseSwell => "noise-swell",
            SynthClass::Chirp => "chirp",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SynthEvent {
    pub onset: f64,
    pub duration: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub class: SynthClass,
    pub events: Vec<SynthEvent>,
    pub duration: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.duration <= 0.0 {
            return Err(Error::config("clip duration must be positive".to_string()));
        }
        for e in &self.events {
            if e.onset < 0.0 || e.onset + e.duration > self.duration {
                return Err(Error::config(format!(
                    "event at {}s (+{}s) leaves the {}s clip",
                    e.onset, e.duration, self.duration
                )));
            }
            if !(0.0..=1.0).contains(&e.amplitude) || e.amplitude == 0.0 {
                return Err(Error::config(format!("amplitude {} outside (0, 1]", e.amplitude)));
            }
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        ((self.duration * SEGMENTS_PER_SECOND).round() as usize).max(1)
    }
}

const ATTACK: f64 = 0.15;
const RELEASE: f64 = 0.25;

/// Attack-sustain-release envelope of one event at time t.
fn event_envelope(e: &SynthEvent, t: f64) -> f64 {
    if t < e.onset || t > e.onset + e.duration {
        return 0.0;
    }
    let u = (t - e.onset) / e.duration;
    let shape = if u < ATTACK {
        u / ATTACK
    } else if u > 1.0 - RELEASE {
        (1.0 - u) / RELEASE
    } else {
        1.0
    };
    e.amplitude * shape
}

/// Summed event envelope, clamped to 1.
pub fn envelope(spec: &SynthSpec, t: f64) -> f64 {
    spec.events.iter().map(|e| event_envelope(e, t)).sum::<f64>().min(1.0)
}

/// Class-characteristic signal over a silent floor.
pub fn synth_audio(spec: &SynthSpec) -> Result<Waveform> {
    spec.validate()?;
    let n = (spec.duration * f64::from(SAMPLE_RATE)).round() as usize;
    let sr = f64::from(SAMPLE_RATE);
    let mut samples = vec![0.0; n];
    let mut rng = RngState::new(spec.seed).derive("audio");
    match spec.class {
        SynthClass::ToneBurst => {
            let f0 = 660.0;
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = envelope(spec, t);
                if env > 0.0 {
                    let w = 2.0 * std::f64::consts::PI * f0 * t;
                    *s = env * (w.sin() + 0.35 * (2.0 * w).sin()) / 1.35;
                }
            }
        }
        SynthClass::ClickTrain => {
            // Dense damped-sine clicks inside each event.
            const CLICK_SPACING: f64 = 0.035;
            const CLICK_LEN: f64 = 0.02;
            for e in &spec.events {
                let mut at = e.onset;
                while at + CLICK_LEN <= e.onset + e.duration {
                    let gain = event_envelope(e, at + 0.5 * CLICK_LEN).max(0.3 * e.amplitude);
                    let start = (at * sr) as usize;
                    let len = (CLICK_LEN * sr) as usize;
                    for i in 0..len.min(n - start) {
                        let t = i as f64 / sr;
                        samples[start + i] += gain
                            * (-t / 0.003).exp()
                            * (2.0 * std::f64::consts::PI * 1800.0 * t).sin();
                    }
                    at += CLICK_SPACING;
                }
            }
        }
        SynthClass::NoiseSwell => {
            for (i, s) in samples.iter_mut().enumerate() {
                let t = i as f64 / sr;
                let env = envelope(spec, t);
                let noise = 2.0 * rng.uniform() - 1.0;
                if env > 0.0 {
                    *s = 0.8 * env * noise;
                }
            }
        }
        SynthClass::Chirp => {
            for e in &spec.events {
                let start = (e.onset * sr) as usize;
                let len = ((e.duration * sr) as usize).min(n - start);
                for i in 0..len {
                    let t = i as f64 / sr;
                    let u = t / e.duration;
                    // 300 Hz sweeping to 2400 Hz across the event.
                    let phase = 2.0 * std::f64::consts::PI * (300.0 * t + 0.5 * 2100.0 * u * t);
                    let env = event_envelope(e, e.onset + t);
                    samples[start + i] += env * phase.sin();
                }
            }
        }
    }
    Waveform::new(samples)
}

/// Envelope averaged over one segment's 0.64 s window.
fn windowed_envelope(spec: &SynthSpec, center: f64) -> f64 {
    const STEP: f64 = 0.004;
    let lo = (center - SEGMENT_WINDOW / 2.0).max(0.0);
    let hi = (center + SEGMENT_WINDOW / 2.0).min(spec.duration);
    let mut acc = 0.0;
    let mut count = 0usize;
    let mut t = lo;
    while t < hi {
        acc += envelope(spec, t);
        count += 1;
        t += STEP;
    }
    if count == 0 {
        0.0
    } else {
        acc / count as f64
    }
}

/// Deterministic unit vector tied to a class, orthogonal pairs for the
/// static and motion components.
fn class_directions(class: SynthClass) -> (Vec<f64>, Vec<f64>) {
    let mut rng = RngState::new(0xC1A5_5E5 ^ class.id() as u64);
    let mut base = rng.normal_vec(EMBED_DIM);
    let norm = base.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut base {
        *v /= norm;
    }
    let mut motion = rng.normal_vec(EMBED_DIM);
    let dot: f64 = motion.iter().zip(&base).map(|(a, b)| a * b).sum();
    for (m, b) in motion.iter_mut().zip(&base) {
        *m -= dot * b;
    }
    let norm = motion.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut motion {
        *v /= norm;
    }
    (base, motion)
}

/// Per-segment embeddings (class basis + motion scaled by the envelope +
/// seeded noise) and the visual energy curve at segment rate.
pub fn synth_video_embedding(spec: &SynthSpec) -> Result<(VideoEmbedding, EnergyCurve)> {
    spec.validate()?;
    let s = spec.segments();
    let rate = s as f64 / spec.duration;
    let (base, motion) = class_directions(spec.class);
    let mut noise_rng = RngState::new(spec.seed).derive("embedding");
    let mut data = Vec::with_capacity(s * EMBED_DIM);
    let mut visual = Vec::with_capacity(s);
    for j in 0..s {
        let center = (j as f64 + 0.5) / rate;
        let env = windowed_envelope(spec, center);
        visual.push(env);
        for c in 0..EMBED_DIM {
            data.push(0.35 * base[c] + (0.15 + env) * motion[c] + 0.02 * noise_rng.normal());
        }
    }
    let ev = VideoEmbedding::new(data, s, rate)?;
    let visual = EnergyCurve::new(visual, rate)?;
    Ok((ev, visual))
}

/// Random event schedule for a class, seeded per item.
pub fn random_spec(class: SynthClass, duration: f64, seed: u64) -> SynthSpec {
    let mut rng = RngState::new(seed).derive("schedule");
    let n_events = 1 + rng.below(3) as usize;
    let mut events = Vec::with_capacity(n_events);
    for _ in 0..n_events {
        let dur = rng.uniform_in(0.3, (1.2f64).min(duration * 0.45));
        let onset = rng.uniform_in(0.05, (duration - dur - 0.05).max(0.06));
        let amplitude = rng.uniform_in(0.35, 0.95);
        events.push(SynthEvent { onset, duration: dur, amplitude });
    }
    events.sort_by(|a, b| a.onset.partial_cmp(&b.onset).unwrap());
    SynthSpec { class, events, duration, seed }
}

/// One corpus row: file locations plus the generating spec.
#[derive(Debug, Clone)]
pub struct CorpusItem {
    pub wav: PathBuf,
    pub features: PathBuf,
    pub class: SynthClass,
    pub spec: SynthSpec,
}

/// Generates n paired items on disk and a manifest.tsv
/// (wav path, feature path, class id). Deterministic per seed.
pub fn build_corpus(n: usize, seed: u64, out_dir: &Path, duration: f64) -> Result<PathBuf> {
    if n == 0 {
        return Err(Error::config("corpus size must be at least 1".to_string()));
    }
    std::fs::create_dir_all(out_dir.join("wav"))?;
    std::fs::create_dir_all(out_dir.join("feat"))?;
    let mut manifest = String::new();
    for i in 0..n {
        let class = SynthClass::from_id(i % CLASS_COUNT)?;
        let item_seed = RngState::new(seed).derive_index(i as u64).seed();
        let spec = random_spec(class, duration, item_seed);
        let item = write_item(out_dir, i, &spec)?;
        manifest.push_str(&format!(
            "wav/item_{i:04}.wav\tfeat/item_{i:04}.feat\t{}\n",
            item.class.id()
        ));
    }
    let path = out_dir.join("manifest.tsv");
    std::fs::write(&path, manifest)?;
    Ok(path)
}

/// Writes one item's wav and feature file.
pub fn write_item(out_dir: &Path, index: usize, spec: &SynthSpec) -> Result<CorpusItem> {
    let wav_path = out_dir.join(format!("wav/item_{index:04}.wav"));
    let feat_path = out_dir.join(format!("feat/item_{index:04}.feat"));
    let audio = synth_audio(spec)?;
    write_wav(&wav_path, &audio)?;
    let (ev, visual) = synth_video_embedding(spec)?;
    let s = ev.segments();
    let emb_f32: Vec<f32> = ev.data().iter().map(|&v| v as f32).collect();
    write_features(
        &feat_path,
        &[
            FeatureRecord::f32(REC_VIDEO_EMBEDDING, &[s, EMBED_DIM], emb_f32)?,
            FeatureRecord::f64(REC_VISUAL_ENERGY, &[s], visual.values().to_vec())?,
        ],
    )?;
    Ok(CorpusItem {
        wav: wav_path,
        features: feat_path,
        class: spec.class,
        spec: spec.clone(),
    })
}

/// Parses a manifest written by [`build_corpus`]: (wav, features, class).
pub fn read_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf, usize)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let base = path.parent().unwrap_or(Path::new("."));
    let text = std::fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 {
            return Err(Error::format(format!(
                "manifest line {}: expected 3 tab-separated columns",
                i + 1
            )));
        }
        let class: usize = cols[2]
            .trim()
            .parse()
            .map_err(|_| Error::format(format!("manifest line {}: bad class id", i + 1)))?;
        rows.push((base.join(cols[0]), base.join(cols[1]), class));
    }
    Ok(rows)
}
