//! End-to-end synthesis: control encoding, DDIM sampling, VAE decoding,
//! and Griffin-Lim reconstruction.

use super::sampler::{ddim_sample, SamplerConfig};
use super::schedule::NoiseSchedule;
use super::train::BasePredictor;
use super::unet::{Cond, DenoiserModel};
use crate::adapter::{latent_shape_for, AdapterModel, ControlledPredictor};
use crate::dsp::griffin_lim::griffin_lim;
use crate::dsp::mel::MelSpectrogram;
use crate::dsp::stft::StftConfig;
use crate::dsp::wav::{Waveform, SAMPLE_RATE};
use crate::energy::EnergyCurve;
use crate::error::{Error, Result};
use crate::vae::{LatentTensor, VaeModel};

/// Frozen models and settings shared across generations.
pub struct Pipeline<'a> {
    pub vae: &'a VaeModel,
    pub denoiser: &'a DenoiserModel,
    pub adapter: Option<&'a AdapterModel>,
    pub stft: StftConfig,
    pub schedule: NoiseSchedule,
    pub griffin_lim_iters: usize,
}

#[derive(Debug, Clone)]
pub struct GenerateRequest {
    pub class: usize,
    /// Control curve; requires an adapter in the pipeline.
    pub energy: Option<EnergyCurve>,
    pub duration: f64,
    pub sampler: SamplerConfig,
}

/// Mel frame count for a requested duration.
pub fn frames_for_duration(duration: f64, stft: &StftConfig) -> usize {
    let samples = (duration * f64::from(SAMPLE_RATE)).round() as usize;
    stft.frame_count(samples)
}

/// Runs the reverse process and decodes to a waveform. Returns both the
/// waveform and the decoded mel (the mel is what metrics read).
pub fn generate(p: &Pipeline<'_>, req: &GenerateRequest) -> Result<(Waveform, MelSpectrogram)> {
    if req.duration <= 0.0 {
        return Err(Error::config("duration must be positive".to_string()));
    }
    let mel_frames = frames_for_duration(req.duration, &p.stft);
    let shape = latent_shape_for(mel_frames);
    let cond = Cond::Class(req.class);
    let z = match (&req.energy, p.adapter) {
        (Some(energy), Some(adapter)) => {
            let control =
                adapter.encode_control(energy, p.vae, mel_frames, p.stft.frame_rate())?;
            let model = ControlledPredictor { base: p.denoiser, adapter, control };
            ddim_sample(&model, &p.schedule, &shape, &cond, &req.sampler)?
        }
        (Some(_), None) => {
            return Err(Error::config(
                "an energy control was supplied but the pipeline has no adapter".to_string(),
            ))
        }
        (None, _) => {
            let model = BasePredictor { model: p.denoiser };
            ddim_sample(&model, &p.schedule, &shape, &cond, &req.sampler)?
        }
    };
    let latent = LatentTensor::new(z, mel_frames)?;
    let mel = p.vae.decode(&latent, p.stft.frame_rate())?;
    let wav = griffin_lim(&mel, &p.stft, p.griffin_lim_iters)?;
    Ok((wav, mel))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngState;

    fn tiny_pipeline(vae: &VaeModel, denoiser: &DenoiserModel) -> NoiseSchedule {
        let _ = (vae, denoiser);
        NoiseSchedule::linear(100, 1e-4, 2e-2).unwrap()
    }

    #[test]
    fn five_second_request_yields_80000_samples() {
        let vae = VaeModel::init(41).unwrap();
        let denoiser = DenoiserModel::init(42, 4).unwrap();
        let schedule = tiny_pipeline(&vae, &denoiser);
        let p = Pipeline {
            vae: &vae,
            denoiser: &denoiser,
            adapter: None,
            stft: StftConfig::audioldm(),
            schedule,
            griffin_lim_iters: 1,
        };
        let req = GenerateRequest {
            class: 0,
            energy: None,
            duration: 5.0,
            sampler: SamplerConfig { ddim_steps: 2, guidance_weight: 1.0, eta: 0.0, seed: 1 },
        };
        let (wav, mel) = generate(&p, &req).unwrap();
        assert_eq!(wav.len(), 80_000);
        assert_eq!(mel.n_frames(), 501);
    }

    #[test]
    fn same_seed_same_bytes() {
        let vae = VaeModel::init(43).unwrap();
        let denoiser = DenoiserModel::init(44, 4).unwrap();
        let schedule = tiny_pipeline(&vae, &denoiser);
        let p = Pipeline {
            vae: &vae,
            denoiser: &denoiser,
            adapter: None,
            stft: StftConfig::audioldm(),
            schedule,
            griffin_lim_iters: 2,
        };
        let req = GenerateRequest {
            class: 1,
            energy: None,
            duration: 0.6,
            sampler: SamplerConfig { ddim_steps: 3, guidance_weight: 2.5, eta: 0.0, seed: 7 },
        };
        let (a, _) = generate(&p, &req).unwrap();
        let (b, _) = generate(&p, &req).unwrap();
        assert_eq!(a.samples(), b.samples());
    }

    #[test]
    fn energy_without_adapter_is_a_config_error() {
        let vae = VaeModel::init(45).unwrap();
        let denoiser = DenoiserModel::init(46, 4).unwrap();
        let schedule = tiny_pipeline(&vae, &denoiser);
        let p = Pipeline {
            vae: &vae,
            denoiser: &denoiser,
            adapter: None,
            stft: StftConfig::audioldm(),
            schedule,
            griffin_lim_iters: 1,
        };
        let mut rng = RngState::new(1);
        let energy = EnergyCurve::new(rng.normal_vec(50), 100.0).unwrap();
        let req = GenerateRequest {
            class: 0,
            energy: Some(energy),
            duration: 0.5,
            sampler: SamplerConfig { ddim_steps: 1, guidance_weight: 0.0, eta: 0.0, seed: 1 },
        };
        assert!(matches!(generate(&p, &req), Err(Error::Config(_))));
    }
}
