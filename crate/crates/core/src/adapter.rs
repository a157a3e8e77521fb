//! Energy adapter: a trainable copy of the denoiser's down path and
//! bottleneck, initialized from the trained denoiser, joined to the frozen
//! model through zero-initialized 1x1 convolutions. The energy curve is
//! upsampled, duplicated across the mel bins, pushed through the frozen
//! VAE encoder, and refined by a small per-position FC + SiLU head into a
//! latent-shaped control feature.

use crate::diffusion::sampler::NoisePredictor;
use crate::diffusion::schedule::NoiseSchedule;
use crate::diffusion::train::TrainDraw;
use crate::diffusion::unet::{
    denoiser_eps, down_path, text_embedding, time_embedding, Cond, DenoiserModel, UnetTaps,
    UNET_WIDTHS,
};
use crate::dsp::mel::MelSpectrogram;
use crate::energy::{resize_nn, EnergyCurve};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::graph::{Ctx, Eval, Graph, ParamSet};
use crate::numerics::store::{AdamW, Init, ParamStore};
use crate::numerics::{RngState, Tensor};
use crate::vae::{LatentTensor, VaeModel, LATENT_CHANNELS};

/// Latent-shaped control feature c_e.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlFeature {
    pub values: Tensor,
}

pub struct AdapterModel {
    pub store: ParamStore,
}

const DOWN_PREFIXES: [&str; 6] = ["conv_in.", "down1.", "ds1.", "down2.", "ds2.", "mid."];

impl AdapterModel {
    /// Copies the trained denoiser's down path and adds the zero
    /// convolutions and the energy-encoding head.
    pub fn from_base(base: &DenoiserModel, seed: u64) -> Result<AdapterModel> {
        let root = RngState::new(seed).derive("adapter");
        let mut store = ParamStore::new();
        for name in base.store.names().map(str::to_string).collect::<Vec<_>>() {
            if DOWN_PREFIXES.iter().any(|p| name.starts_with(p)) {
                store.insert(&name, base.store.get(&name)?.clone())?;
            }
        }
        // Zero convolutions: the hint entry point and one per skip tap.
        store.init(&root, "hint_zc.w", &[LATENT_CHANNELS, LATENT_CHANNELS, 1, 1], Init::Zeros)?;
        store.init(&root, "hint_zc.b", &[LATENT_CHANNELS], Init::Zeros)?;
        store.init(&root, "zc_s1.w", &[UNET_WIDTHS[1], UNET_WIDTHS[1], 1, 1], Init::Zeros)?;
        store.init(&root, "zc_s1.b", &[UNET_WIDTHS[1]], Init::Zeros)?;
        store.init(&root, "zc_s2.w", &[UNET_WIDTHS[2], UNET_WIDTHS[2], 1, 1], Init::Zeros)?;
        store.init(&root, "zc_s2.b", &[UNET_WIDTHS[2]], Init::Zeros)?;
        store.init(&root, "zc_mid.w", &[UNET_WIDTHS[2], UNET_WIDTHS[2], 1, 1], Init::Zeros)?;
        store.init(&root, "zc_mid.b", &[UNET_WIDTHS[2]], Init::Zeros)?;
        // Energy-encoding head after the VAE: per-position FC over the
        // latent channels, then SiLU.
        nn::init_conv(&mut store, &root, "energy_fc", LATENT_CHANNELS, LATENT_CHANNELS, 1)?;
        Ok(AdapterModel { store })
    }

    pub fn load(path: &std::path::Path) -> Result<AdapterModel> {
        Ok(AdapterModel { store: ParamStore::load(path)? })
    }

    /// True while every zero convolution is still exactly zero.
    pub fn zero_convs_are_zero(&self) -> bool {
        ["hint_zc.w", "hint_zc.b", "zc_s1.w", "zc_s1.b", "zc_s2.w", "zc_s2.b", "zc_mid.w",
         "zc_mid.b"]
        .iter()
        .all(|n| {
            self.store
                .get(n)
                .map(|t| t.data().iter().all(|&v| v == 0.0))
                .unwrap_or(false)
        })
    }

    /// Energy curve -> pseudo-mel -> frozen VAE -> FC + SiLU -> c_e.
    pub fn encode_control(
        &self,
        energy: &EnergyCurve,
        vae: &VaeModel,
        mel_frames: usize,
        frame_rate: f64,
    ) -> Result<ControlFeature> {
        let latent = control_latent(vae, energy, mel_frames, frame_rate)?;
        let mut ctx = Eval::new();
        let set = ParamSet::frozen(&self.store);
        let z = ctx.constant(latent);
        let values = control_feature_graph(&mut ctx, &set, &z)?;
        Ok(ControlFeature { values })
    }
}

/// The energy curve resized to the mel frame count and duplicated across
/// all mel bins: a pseudo-mel carrying only temporal structure.
pub fn energy_pseudo_mel(
    energy: &EnergyCurve,
    mel_frames: usize,
    frame_rate: f64,
) -> Result<MelSpectrogram> {
    let resized = resize_nn(energy, mel_frames)?;
    let mut data = Vec::with_capacity(crate::dsp::mel::N_MELS * mel_frames);
    for _ in 0..crate::dsp::mel::N_MELS {
        data.extend_from_slice(resized.values());
    }
    MelSpectrogram::from_parts(data, crate::dsp::mel::N_MELS, mel_frames, frame_rate)
}

/// Frozen-VAE encoding (posterior mean) of the pseudo-mel. Cacheable: the
/// trainable part of the control pathway starts after this.
pub fn control_latent(
    vae: &VaeModel,
    energy: &EnergyCurve,
    mel_frames: usize,
    frame_rate: f64,
) -> Result<Tensor> {
    let pseudo = energy_pseudo_mel(energy, mel_frames, frame_rate)?;
    Ok(vae.encode_mean(&pseudo)?.values)
}

/// The trainable tail of the control encoding: FC (1x1 conv) + SiLU.
pub fn control_feature_graph<C: Ctx>(
    ctx: &mut C,
    adapter: &ParamSet<'_>,
    control_latent: &C::T,
) -> Result<C::T> {
    let h = nn::conv2d(ctx, adapter, "energy_fc", control_latent, 1, 0)?;
    ctx.silu(&h)
}

fn zero_conv<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, name: &str, x: &C::T) -> Result<C::T> {
    let w = ctx.param(set, &format!("{name}.w"))?;
    let b = ctx.param(set, &format!("{name}.b"))?;
    ctx.conv2d(x, &w, &b, 1, 0)
}

/// Adapter branch: consumes z_t plus the zero-convolved hint, runs the
/// copied down path, and returns zero-convolved taps for the frozen
/// model's skip connections.
pub fn adapter_taps<C: Ctx>(
    ctx: &mut C,
    adapter: &ParamSet<'_>,
    z_t: &C::T,
    temb: &C::T,
    text: &C::T,
    c_e: &C::T,
) -> Result<UnetTaps<C::T>> {
    let hint = zero_conv(ctx, adapter, "hint_zc", c_e)?;
    let x = ctx.add(z_t, &hint)?;
    let taps = down_path(ctx, adapter, &x, temb, text)?;
    Ok(UnetTaps {
        s1: zero_conv(ctx, adapter, "zc_s1", &taps.s1)?,
        s2: zero_conv(ctx, adapter, "zc_s2", &taps.s2)?,
        mid: zero_conv(ctx, adapter, "zc_mid", &taps.mid)?,
    })
}

/// Noise prediction with the adapter attached. Shape of c_e must match z_t.
pub fn controlled_eps_graph<C: Ctx>(
    ctx: &mut C,
    base: &ParamSet<'_>,
    adapter: &ParamSet<'_>,
    num_classes: usize,
    z_t: &C::T,
    t: usize,
    cond: &Cond,
    c_e: &C::T,
) -> Result<C::T> {
    if ctx.shape_of(z_t) != ctx.shape_of(c_e) {
        return Err(Error::shape(format!(
            "control feature {:?} does not match latent {:?}",
            ctx.shape_of(c_e),
            ctx.shape_of(z_t)
        )));
    }
    let temb = time_embedding(ctx, base, t)?;
    let text = text_embedding(ctx, base, num_classes, cond)?;
    let taps = adapter_taps(ctx, adapter, z_t, &temb, &text, c_e)?;
    denoiser_eps(ctx, base, z_t, &temb, &text, Some(&taps))
}

/// Eval-mode controlled prediction.
pub fn controlled_eps(
    base: &DenoiserModel,
    adapter: &AdapterModel,
    z_t: &Tensor,
    t: usize,
    cond: &Cond,
    c_e: &ControlFeature,
) -> Result<Tensor> {
    let mut ctx = Eval::new();
    let base_set = ParamSet::frozen(&base.store);
    let adapter_set = ParamSet::frozen(&adapter.store);
    let z = ctx.constant(z_t.clone());
    let c = ctx.constant(c_e.values.clone());
    controlled_eps_graph(&mut ctx, &base_set, &adapter_set, base.num_classes, &z, t, cond, &c)
}

/// Sampler view: frozen base + adapter + one clip's control feature.
pub struct ControlledPredictor<'a> {
    pub base: &'a DenoiserModel,
    pub adapter: &'a AdapterModel,
    pub control: ControlFeature,
}

impl NoisePredictor for ControlledPredictor<'_> {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Cond) -> Result<Tensor> {
        controlled_eps(self.base, self.adapter, z_t, t, cond, &self.control)
    }
}

#[derive(Debug, Clone)]
pub struct AdapterTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub text_drop_prob: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub log_every: usize,
}

impl Default for AdapterTrainConfig {
    fn default() -> Self {
        AdapterTrainConfig {
            lr: 3e-4,
            steps: 2200,
            batch: 1,
            text_drop_prob: 0.3,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            seed: 42,
            log_every: 100,
        }
    }
}

/// One training example: data latent, class id, and the frozen-VAE
/// encoding of its ground-truth energy control.
pub struct AdapterExample {
    pub z0: Tensor,
    pub class: usize,
    pub control_latent: Tensor,
}

/// Trains the adapter against the frozen base and VAE. Returns the model
/// and per-step losses.
pub fn train_adapter(
    base: &DenoiserModel,
    dataset: &[AdapterExample],
    schedule: &NoiseSchedule,
    cfg: &AdapterTrainConfig,
) -> Result<(AdapterModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::config("train_adapter: empty dataset".to_string()));
    }
    let mut adapter = AdapterModel::from_base(base, cfg.seed)?;
    let opt = AdamW {
        lr: cfg.lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut rng = RngState::new(cfg.seed).derive("adapter-train");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let base_set = ParamSet::frozen(&base.store);
        let adapter_set = ParamSet::trainable(&adapter.store);
        let mut batch_loss = None;
        for _ in 0..cfg.batch {
            let ex = &dataset[rng.below(dataset.len() as u64) as usize];
            let draw = train_draw(schedule, ex.z0.shape(), cfg.text_drop_prob, &mut rng);
            let z_t = g.constant(schedule.q_sample(&ex.z0, draw.t, &draw.eps)?);
            let cl = g.constant(ex.control_latent.clone());
            let c_e = control_feature_graph(&mut g, &adapter_set, &cl)?;
            let cond = if draw.dropped { Cond::Null } else { Cond::Class(ex.class) };
            let pred = controlled_eps_graph(
                &mut g,
                &base_set,
                &adapter_set,
                base.num_classes,
                &z_t,
                draw.t,
                &cond,
                &c_e,
            )?;
            let eps = g.constant(draw.eps.clone());
            let loss = nn::mse(&mut g, &pred, &eps)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(prev) => g.add(&prev, &loss)?,
            });
        }
        let loss = g.mul_scalar(&batch_loss.unwrap(), 1.0 / cfg.batch as f64)?;
        losses.push(g.value(&loss).item());
        adapter.store.zero_grads();
        g.backward(loss, &mut adapter.store)?;
        adapter.store.adamw_step(&opt)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("train-adapter\t{step}\t{:.6}", losses[step]);
        }
    }
    Ok((adapter, losses))
}

use crate::diffusion::train::train_draw;

/// Control latent from a ground-truth mel's energy (training path).
pub fn control_latent_for_mel(
    vae: &VaeModel,
    mel: &MelSpectrogram,
) -> Result<(Tensor, EnergyCurve)> {
    let energy = crate::energy::energy_from_mel(mel);
    let latent = control_latent(vae, &energy, mel.n_frames(), mel.frame_rate())?;
    Ok((latent, energy))
}

/// Latent shape for a mel width (used to build sampling requests).
pub fn latent_shape_for(mel_frames: usize) -> Vec<usize> {
    vec![
        LATENT_CHANNELS,
        crate::dsp::mel::N_MELS / crate::vae::DOWNSAMPLE,
        crate::vae::latent_frames(mel_frames),
    ]
}

/// Convenience: wraps a raw tensor as a latent for decoding.
pub fn latent_from_tensor(values: Tensor, mel_frames: usize) -> Result<LatentTensor> {
    LatentTensor::new(values, mel_frames)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_setup() -> (DenoiserModel, AdapterModel, VaeModel) {
        let base = DenoiserModel::init(21, 4).unwrap();
        let adapter = AdapterModel::from_base(&base, 22).unwrap();
        let vae = VaeModel::init(23).unwrap();
        (base, adapter, vae)
    }

    #[test]
    fn zero_convs_start_exactly_zero_and_copies_match_base() {
        let (base, adapter, _) = small_setup();
        assert!(adapter.zero_convs_are_zero());
        for name in ["conv_in.w", "down1.conv1.w", "ds2.b", "mid.conv2.w"] {
            assert_eq!(adapter.store.get(name).unwrap(), base.store.get(name).unwrap());
        }
    }

    #[test]
    fn fresh_adapter_is_the_identity_on_the_base() {
        let (base, adapter, _) = small_setup();
        let mut rng = RngState::new(30);
        let z = Tensor::randn(&[4, 16, 12], &mut rng);
        let c_e = ControlFeature { values: Tensor::randn(&[4, 16, 12], &mut rng) };
        let plain = base.eps(&z, 100, &Cond::Class(2)).unwrap();
        let controlled = controlled_eps(&base, &adapter, &z, 100, &Cond::Class(2), &c_e).unwrap();
        assert_eq!(plain.data(), controlled.data());
        // Also with a zero control.
        let zero = ControlFeature { values: Tensor::zeros(&[4, 16, 12]) };
        let controlled = controlled_eps(&base, &adapter, &z, 100, &Cond::Class(2), &zero).unwrap();
        assert_eq!(plain.data(), controlled.data());
    }

    #[test]
    fn control_shape_mismatch_is_an_error() {
        let (base, adapter, _) = small_setup();
        let z = Tensor::zeros(&[4, 16, 12]);
        let c_e = ControlFeature { values: Tensor::zeros(&[4, 16, 8]) };
        assert!(controlled_eps(&base, &adapter, &z, 1, &Cond::Null, &c_e).is_err());
    }

    #[test]
    fn constant_energy_duplicates_into_a_constant_pseudo_mel() {
        let energy = EnergyCurve::new(vec![-3.5; 40], 100.0).unwrap();
        let pseudo = energy_pseudo_mel(&energy, 40, 100.0).unwrap();
        assert!(pseudo.data().iter().all(|&v| v == -3.5));
        assert_eq!((pseudo.n_mels(), pseudo.n_frames()), (64, 40));
    }

    #[test]
    fn control_feature_has_latent_shape_for_any_width() {
        let (_, adapter, vae) = small_setup();
        for frames in [40usize, 101, 250] {
            let energy = EnergyCurve::new(vec![-2.0; 64], 12.8).unwrap();
            let c = adapter.encode_control(&energy, &vae, frames, 100.0).unwrap();
            assert_eq!(c.values.shape(), latent_shape_for(frames).as_slice());
        }
    }

    #[test]
    fn control_encoding_is_temporally_local() {
        // Two energies differing only in the left half produce control
        // features differing only there, within the encoder's receptive
        // field (half-width 8 mel frames = 2 latent frames).
        let (_, adapter, vae) = small_setup();
        let frames = 96;
        let a = EnergyCurve::new(vec![-6.0; frames], 100.0).unwrap();
        let mut right = vec![-6.0; frames];
        for v in right.iter_mut().take(frames / 2) {
            *v = -2.0;
        }
        let b = EnergyCurve::new(right, 100.0).unwrap();
        let ca = adapter.encode_control(&a, &vae, frames, 100.0).unwrap();
        let cb = adapter.encode_control(&b, &vae, frames, 100.0).unwrap();
        let shape = ca.values.shape().to_vec();
        let (ch, h, w) = (shape[0], shape[1], shape[2]);
        let half_latent = (frames / 2) / 4;
        for c in 0..ch {
            for i in 0..h {
                for j in (half_latent + 2)..w {
                    let idx = (c * h + i) * w + j;
                    let d = (ca.values.data()[idx] - cb.values.data()[idx]).abs();
                    assert!(
                        d < 1e-12,
                        "leak at latent frame {j} (boundary {half_latent}): {d}"
                    );
                }
            }
        }
        // And the difference is real on the left side.
        let mut max_left = 0.0f64;
        for c in 0..ch {
            for i in 0..h {
                for j in 0..half_latent {
                    let idx = (c * h + i) * w + j;
                    max_left =
                        max_left.max((ca.values.data()[idx] - cb.values.data()[idx]).abs());
                }
            }
        }
        assert!(max_left > 1e-6, "control feature ignored the energy change");
    }

    #[test]
    fn first_training_step_loss_equals_frozen_base_loss() {
        let (base, _, vae) = small_setup();
        let mut rng = RngState::new(31);
        let z0 = Tensor::randn(&[4, 16, 8], &mut rng);
        let energy = EnergyCurve::new(vec![-4.0; 32], 100.0).unwrap();
        let cl = control_latent(&vae, &energy, 32, 100.0).unwrap();
        let schedule = NoiseSchedule::default_linear();
        let example = AdapterExample { z0: z0.clone(), class: 1, control_latent: cl };
        let cfg = AdapterTrainConfig { steps: 1, log_every: 0, ..AdapterTrainConfig::default() };
        let (_, losses) = train_adapter(&base, &[example], &schedule, &cfg).unwrap();

        // The frozen base model's loss on the identical draw sequence.
        let mut rng2 = RngState::new(cfg.seed).derive("adapter-train");
        let _idx = rng2.below(1);
        let draw = train_draw(&schedule, z0.shape(), cfg.text_drop_prob, &mut rng2);
        let base_loss = crate::diffusion::diffusion_loss(
            &crate::diffusion::BasePredictor { model: &base },
            &schedule,
            &z0,
            &Cond::Class(1),
            &draw,
        )
        .unwrap();
        assert!(
            (losses[0] - base_loss).abs() < 1e-12,
            "{} vs {base_loss}",
            losses[0]
        );
    }

    #[test]
    fn base_is_untouched_and_gradients_reach_the_adapter() {
        let (base, _, vae) = small_setup();
        let checksum_before = base.store.checksum();
        let mut rng = RngState::new(32);
        let z0 = Tensor::randn(&[4, 16, 8], &mut rng);
        let energy = EnergyCurve::new(
            (0..32).map(|i| -8.0 + 0.2 * i as f64).collect(),
            100.0,
        )
        .unwrap();
        let cl = control_latent(&vae, &energy, 32, 100.0).unwrap();
        let schedule = NoiseSchedule::default_linear();
        let example = AdapterExample { z0, class: 0, control_latent: cl };
        let cfg = AdapterTrainConfig { steps: 4, log_every: 0, ..AdapterTrainConfig::default() };
        let (adapter, _) = train_adapter(&base, &[example], &schedule, &cfg).unwrap();
        assert_eq!(base.store.checksum(), checksum_before);
        // After the taps become nonzero, gradients reach the copied
        // blocks and the energy head.
        assert!(!adapter.zero_convs_are_zero());
        let copied_grad: f64 = adapter
            .store
            .grad("down1.conv1.w")
            .unwrap()
            .iter()
            .map(|g| g.abs())
            .sum();
        let head_grad: f64 =
            adapter.store.grad("energy_fc.w").unwrap().iter().map(|g| g.abs()).sum();
        assert!(copied_grad > 0.0, "no gradient reached the copied blocks");
        assert!(head_grad > 0.0, "no gradient reached the energy head");
    }

    #[test]
    fn adapter_diverges_from_base_after_training() {
        let (base, _, vae) = small_setup();
        let mut rng = RngState::new(33);
        let z0 = Tensor::randn(&[4, 16, 8], &mut rng);
        let energy = EnergyCurve::new(
            (0..32).map(|i| if i < 16 { -9.0 } else { -2.0 }).collect(),
            100.0,
        )
        .unwrap();
        let cl = control_latent(&vae, &energy, 32, 100.0).unwrap();
        let schedule = NoiseSchedule::default_linear();
        let example = AdapterExample { z0: z0.clone(), class: 0, control_latent: cl.clone() };
        let cfg = AdapterTrainConfig { steps: 60, log_every: 0, ..AdapterTrainConfig::default() };
        let (adapter, _) = train_adapter(&base, &[example], &schedule, &cfg).unwrap();

        let mut ctx = Eval::new();
        let c_e = {
            let set = ParamSet::frozen(&adapter.store);
            let z = ctx.constant(cl);
            ControlFeature { values: control_feature_graph(&mut ctx, &set, &z).unwrap() }
        };
        let z_t = Tensor::randn(&[4, 16, 8], &mut rng);
        let plain = base.eps(&z_t, 500, &Cond::Class(0)).unwrap();
        let controlled =
            controlled_eps(&base, &adapter, &z_t, 500, &Cond::Class(0), &c_e).unwrap();
        assert!(plain.max_abs_diff(&controlled) > 1e-3);
    }
}
