//! Alignment metrics that need no pretrained networks: energy-peak
//! matching (AV-align) and onset accuracy / average precision.

use crate::dsp::wav::Waveform;
use crate::energy::EnergyCurve;
use crate::error::{Error, Result};

/// Sorted event times in seconds.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakTrain {
    times: Vec<f64>,
}

impl PeakTrain {
    pub fn new(mut times: Vec<f64>) -> Result<PeakTrain> {
        times.sort_by(|a, b| a.partial_cmp(b).unwrap());
        if times.iter().any(|t| !t.is_finite() || *t < 0.0) {
            return Err(Error::contract("peak times must be finite and non-negative"));
        }
        Ok(PeakTrain { times })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Onset times plus the detector confidence that ranked them.
#[derive(Debug, Clone, PartialEq)]
pub struct OnsetLabels {
    times: Vec<f64>,
    confidences: Vec<f64>,
    duration: f64,
}

impl OnsetLabels {
    pub fn new(times: Vec<f64>, confidences: Vec<f64>, duration: f64) -> Result<OnsetLabels> {
        if times.len() != confidences.len() {
            return Err(Error::contract("onset times and confidences must pair up"));
        }
        if times.iter().any(|&t| t < 0.0 || t >= duration.max(f64::MIN_POSITIVE)) {
            return Err(Error::contract("onset time outside [0, duration)"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::contract("onset times must be strictly increasing"));
        }
        Ok(OnsetLabels { times, confidences, duration })
    }

    /// Ground-truth labels with uniform confidence.
    pub fn ground_truth(times: Vec<f64>, duration: f64) -> Result<OnsetLabels> {
        let conf = vec![1.0; times.len()];
        OnsetLabels::new(times, conf, duration)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidences
    }

    pub fn duration(&self) -> f64 {
        self.duration
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }
}

/// Topographic prominence of `values[i]`: height above the higher of the
/// two key saddles toward taller terrain (or the array minimum on an open
/// side).
fn prominence(values: &[f64], i: usize) -> f64 {
    let h = values[i];
    let mut left_min = h;
    let mut left_base = f64::NEG_INFINITY;
    for j in (0..i).rev() {
        if values[j] > h {
            left_base = left_min;
            break;
        }
        left_min = left_min.min(values[j]);
    }
    if left_base == f64::NEG_INFINITY {
        left_base = left_min;
    }
    let mut right_min = h;
    let mut right_base = f64::NEG_INFINITY;
    for &v in &values[i + 1..] {
        if v > h {
            right_base = right_min;
            break;
        }
        right_min = right_min.min(v);
    }
    if right_base == f64::NEG_INFINITY {
        right_base = right_min;
    }
    h - left_base.max(right_base)
}

/// Local maxima of the min-max-normalized curve with prominence and
/// separation thresholds. Among peaks closer than `min_separation`, the
/// larger one wins.
pub fn detect_peaks(e: &EnergyCurve, min_prominence: f64, min_separation: f64) -> PeakTrain {
    let norm = e.normalized();
    let v = norm.values();
    let n = v.len();
    let mut candidates: Vec<usize> = Vec::new();
    for i in 1..n.saturating_sub(1) {
        // Plateau-tolerant local maximum: strictly above the previous
        // distinct value and at least as high as the next.
        if v[i] > v[i - 1] && v[i] >= v[i + 1] && prominence(v, i) >= min_prominence {
            candidates.push(i);
        }
    }
    // Enforce separation, keeping higher peaks first.
    let mut by_height = candidates.clone();
    by_height.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    // Separation in whole frames, with a guard against representation
    // error right at the boundary.
    let sep_frames = (min_separation * e.frame_rate() - 1e-9).ceil().max(0.0) as usize;
    let mut kept: Vec<usize> = Vec::new();
    for i in by_height {
        if kept.iter().all(|&j| i.abs_diff(j) >= sep_frames) {
            kept.push(i);
        }
    }
    kept.sort_unstable();
    let rate = e.frame_rate();
    PeakTrain { times: kept.into_iter().map(|i| i as f64 / rate).collect() }
}

/// Intersection-over-union of two peak trains under greedy one-to-one
/// in-order matching within +-window. Two empty trains count as perfectly
/// aligned.
pub fn av_align(audio: &PeakTrain, visual: &PeakTrain, window: f64) -> f64 {
    if audio.is_empty() && visual.is_empty() {
        return 1.0;
    }
    let (a, v) = (audio.times(), visual.times());
    let mut i = 0;
    let mut j = 0;
    let mut matched = 0usize;
    while i < a.len() && j < v.len() {
        let d = a[i] - v[j];
        if d.abs() <= window + 1e-9 {
            matched += 1;
            i += 1;
            j += 1;
        } else if d < 0.0 {
            i += 1;
        } else {
            j += 1;
        }
    }
    matched as f64 / (a.len() + v.len() - matched) as f64
}

const ENVELOPE_FRAME: usize = 160; // 10 ms at 16 kHz
const DEBOUNCE: f64 = 0.05;

/// Onsets as upward threshold crossings of the amplitude-envelope
/// gradient (per-10ms RMS, first difference), debounced at 50 ms.
/// Confidence is the gradient magnitude at the crossing.
pub fn onset_detect(w: &Waveform, threshold: f64) -> Result<OnsetLabels> {
    let samples = w.samples();
    let frames = samples.len() / ENVELOPE_FRAME;
    let duration = w.duration();
    if frames < 2 {
        return OnsetLabels::new(Vec::new(), Vec::new(), duration.max(1e-9));
    }
    let rms: Vec<f64> = (0..frames)
        .map(|f| {
            let s = &samples[f * ENVELOPE_FRAME..(f + 1) * ENVELOPE_FRAME];
            (s.iter().map(|x| x * x).sum::<f64>() / ENVELOPE_FRAME as f64).sqrt()
        })
        .collect();
    let dt = ENVELOPE_FRAME as f64 / f64::from(w.sample_rate());
    let mut times = Vec::new();
    let mut confidences = Vec::new();
    let mut last = f64::NEG_INFINITY;
    let mut prev_grad = 0.0;
    for f in 1..frames {
        let grad = rms[f] - rms[f - 1];
        let t = f as f64 * dt;
        if grad >= threshold && prev_grad < threshold && t - last >= DEBOUNCE {
            times.push(t);
            confidences.push(grad);
            last = t;
        }
        prev_grad = grad;
    }
    OnsetLabels::new(times, confidences, duration.max(dt * frames as f64))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OnsetMetrics {
    pub accuracy: f64,
    pub average_precision: f64,
}

/// One-to-one tolerance matching in confidence order. Accuracy is the
/// matched fraction against the larger of the two counts; AP is the area
/// under the interpolated precision-recall curve.
pub fn onset_metrics(pred: &OnsetLabels, gt: &OnsetLabels, tol: f64) -> OnsetMetrics {
    if pred.is_empty() && gt.is_empty() {
        return OnsetMetrics { accuracy: 1.0, average_precision: 1.0 };
    }
    if pred.is_empty() || gt.is_empty() {
        return OnsetMetrics { accuracy: 0.0, average_precision: 0.0 };
    }
    // Rank predictions by confidence (descending; ties by time).
    let mut order: Vec<usize> = (0..pred.len()).collect();
    order.sort_by(|&a, &b| {
        pred.confidences()[b]
            .partial_cmp(&pred.confidences()[a])
            .unwrap()
            .then(a.cmp(&b))
    });
    let mut gt_used = vec![false; gt.len()];
    let mut hits = Vec::with_capacity(pred.len());
    for &pi in &order {
        let t = pred.times()[pi];
        // Nearest unmatched ground-truth onset within tolerance.
        let mut best: Option<usize> = None;
        for (gi, &gt_t) in gt.times().iter().enumerate() {
            if gt_used[gi] || (gt_t - t).abs() > tol + 1e-9 {
                continue;
            }
            if best.is_none_or(|b| (gt_t - t).abs() < (gt.times()[b] - t).abs()) {
                best = Some(gi);
            }
        }
        if let Some(gi) = best {
            gt_used[gi] = true;
            hits.push(true);
        } else {
            hits.push(false);
        }
    }
    let matched = hits.iter().filter(|&&h| h).count();
    let accuracy = matched as f64 / pred.len().max(gt.len()) as f64;

    // All-point interpolated PR area.
    let mut tp = 0usize;
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(hits.len()); // (recall, precision)
    for (k, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        points.push((tp as f64 / gt.len() as f64, tp as f64 / (k + 1) as f64));
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (r, _) = points[i];
        if r > prev_recall {
            let p_max = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(f64::NEG_INFINITY, f64::max);
            ap += (r - prev_recall) * p_max;
            prev_recall = r;
        }
    }
    OnsetMetrics { accuracy, average_precision: ap }
}
