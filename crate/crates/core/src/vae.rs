//! Convolutional VAE compressing log-mel spectrograms 4x along both axes
//! into a 4-channel latent space shared by the diffusion model and the
//! energy control feature.

use crate::dsp::mel::{MelSpectrogram, LOG_FLOOR, N_MELS};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::graph::{Ctx, Eval, Graph, ParamSet};
use crate::numerics::store::{AdamW, Init, ParamStore};
use crate::numerics::{RngState, Tensor};

pub const LATENT_CHANNELS: usize = 4;
pub const DOWNSAMPLE: usize = 4;
const GROUPS: usize = 8;
const WIDTHS: [usize; 3] = [32, 64, 128];

/// VAE-latent state: [4, 16, ceil(W/4)] plus the unpadded frame count it
/// decodes back to.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentTensor {
    pub values: Tensor,
    pub orig_frames: usize,
}

impl LatentTensor {
    pub fn new(values: Tensor, orig_frames: usize) -> Result<LatentTensor> {
        if values.rank() != 3 || values.shape()[0] != LATENT_CHANNELS {
            return Err(Error::shape(format!(
                "latent must be [{LATENT_CHANNELS}, D/4, W/4], got {:?}",
                values.shape()
            )));
        }
        Ok(LatentTensor { values, orig_frames })
    }

    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[2]
    }
}

/// Frame count of the latent for a given mel width.
pub fn latent_frames(mel_frames: usize) -> usize {
    mel_frames.div_ceil(DOWNSAMPLE)
}

/// Mel as a [1, 64, W] tensor, edge-replicated up to a multiple of 4.
pub fn mel_to_padded_tensor(m: &MelSpectrogram) -> Tensor {
    let w = m.n_frames();
    let wp = latent_frames(w) * DOWNSAMPLE;
    let mut data = Vec::with_capacity(N_MELS * wp);
    for mel in 0..N_MELS {
        let row = m.row(mel);
        data.extend_from_slice(row);
        for _ in w..wp {
            data.push(row[w - 1]);
        }
    }
    Tensor::from_parts(vec![1, N_MELS, wp], data)
}

/// Inverse of [`mel_to_padded_tensor`]: crops padding, clamps at the log
/// floor.
pub fn tensor_to_mel(t: &Tensor, orig_frames: usize, frame_rate: f64) -> Result<MelSpectrogram> {
    if t.rank() != 3 || t.shape()[0] != 1 || t.shape()[1] != N_MELS {
        return Err(Error::shape(format!("expected [1, {N_MELS}, W], got {:?}", t.shape())));
    }
    let wp = t.shape()[2];
    if orig_frames > wp {
        return Err(Error::shape(format!("cannot crop {wp} frames to {orig_frames}")));
    }
    let floor = LOG_FLOOR.ln();
    let mut data = Vec::with_capacity(N_MELS * orig_frames);
    for mel in 0..N_MELS {
        for f in 0..orig_frames {
            data.push(t.data()[mel * wp + f].max(floor));
        }
    }
    MelSpectrogram::from_parts(data, N_MELS, orig_frames, frame_rate)
}

pub struct VaeModel {
    pub store: ParamStore,
}

impl VaeModel {
    pub fn init(seed: u64) -> Result<VaeModel> {
        let root = RngState::new(seed).derive("vae");
        let mut store = ParamStore::new();
        nn::init_conv(&mut store, &root, "enc.conv0", 1, WIDTHS[0], 3)?;
        nn::init_group_norm(&mut store, &root, "enc.gn0", WIDTHS[0])?;
        nn::init_conv(&mut store, &root, "enc.conv1", WIDTHS[0], WIDTHS[1], 3)?;
        nn::init_group_norm(&mut store, &root, "enc.gn1", WIDTHS[1])?;
        nn::init_conv(&mut store, &root, "enc.conv2", WIDTHS[1], WIDTHS[2], 3)?;
        nn::init_group_norm(&mut store, &root, "enc.gn2", WIDTHS[2])?;
        nn::init_conv(&mut store, &root, "enc.mean", WIDTHS[2], LATENT_CHANNELS, 3)?;
        nn::init_conv(&mut store, &root, "enc.logvar", WIDTHS[2], LATENT_CHANNELS, 3)?;
        // Zero log-variance head: fresh models sample with sigma = 1.
        store.set("enc.logvar.w", Tensor::zeros(&[LATENT_CHANNELS, WIDTHS[2], 3, 3]))?;

        nn::init_conv(&mut store, &root, "dec.conv0", LATENT_CHANNELS, WIDTHS[2], 3)?;
        nn::init_group_norm(&mut store, &root, "dec.gn0", WIDTHS[2])?;
        nn::init_convt(&mut store, &root, "dec.up1", WIDTHS[2], WIDTHS[1], 3)?;
        nn::init_group_norm(&mut store, &root, "dec.gn1", WIDTHS[1])?;
        nn::init_convt(&mut store, &root, "dec.up2", WIDTHS[1], WIDTHS[0], 3)?;
        nn::init_group_norm(&mut store, &root, "dec.gn2", WIDTHS[0])?;
        nn::init_conv(&mut store, &root, "dec.out", WIDTHS[0], 1, 3)?;
        Ok(VaeModel { store })
    }

    pub fn load(path: &std::path::Path) -> Result<VaeModel> {
        Ok(VaeModel { store: ParamStore::load(path)? })
    }

    /// Deterministic eval-mode encoding (posterior mean).
    pub fn encode_mean(&self, m: &MelSpectrogram) -> Result<LatentTensor> {
        let mut ctx = Eval::new();
        let set = ParamSet::frozen(&self.store);
        let x = ctx.constant(mel_to_padded_tensor(m));
        let (mean, _) = encode_graph(&mut ctx, &set, &x)?;
        LatentTensor::new(mean, m.n_frames())
    }

    /// Train-mode encoding: mean + sigma * eps with caller-owned rng.
    pub fn encode_sample(&self, m: &MelSpectrogram, rng: &mut RngState) -> Result<LatentTensor> {
        let mut ctx = Eval::new();
        let set = ParamSet::frozen(&self.store);
        let x = ctx.constant(mel_to_padded_tensor(m));
        let (mean, logvar) = encode_graph(&mut ctx, &set, &x)?;
        let eps = ctx.constant(Tensor::randn(mean.shape(), rng));
        let half = ctx.mul_scalar(&logvar, 0.5)?;
        let sigma = ctx.exp(&half)?;
        let noise = ctx.mul(&sigma, &eps)?;
        let z = ctx.add(&mean, &noise)?;
        LatentTensor::new(z, m.n_frames())
    }

    /// Decodes a latent back to a mel estimate (values clamped at the
    /// log floor).
    pub fn decode(&self, z: &LatentTensor, frame_rate: f64) -> Result<MelSpectrogram> {
        let mut ctx = Eval::new();
        let set = ParamSet::frozen(&self.store);
        let out = decode_graph(&mut ctx, &set, &z.values)?;
        tensor_to_mel(&out, z.orig_frames, frame_rate)
    }
}

/// Encoder stack: returns (mean, logvar), each [4, 16, W/4].
pub fn encode_graph<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, x: &C::T) -> Result<(C::T, C::T)> {
    let h = nn::conv2d(ctx, set, "enc.conv0", x, 1, 1)?;
    let h = nn::group_norm(ctx, set, "enc.gn0", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::conv2d(ctx, set, "enc.conv1", &h, 2, 1)?;
    let h = nn::group_norm(ctx, set, "enc.gn1", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::conv2d(ctx, set, "enc.conv2", &h, 2, 1)?;
    let h = nn::group_norm(ctx, set, "enc.gn2", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let mean = nn::conv2d(ctx, set, "enc.mean", &h, 1, 1)?;
    let logvar = nn::conv2d(ctx, set, "enc.logvar", &h, 1, 1)?;
    Ok((mean, logvar))
}

/// Decoder stack: latent [4, 16, W/4] to mel tensor [1, 64, W].
pub fn decode_graph<C: Ctx>(ctx: &mut C, set: &ParamSet<'_>, z: &C::T) -> Result<C::T> {
    let h = nn::conv2d(ctx, set, "dec.conv0", z, 1, 1)?;
    let h = nn::group_norm(ctx, set, "dec.gn0", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::convt2d(ctx, set, "dec.up1", &h, 2, 1, 1)?;
    let h = nn::group_norm(ctx, set, "dec.gn1", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    let h = nn::convt2d(ctx, set, "dec.up2", &h, 2, 1, 1)?;
    let h = nn::group_norm(ctx, set, "dec.gn2", &h, GROUPS)?;
    let h = ctx.silu(&h)?;
    nn::conv2d(ctx, set, "dec.out", &h, 1, 1)
}

/// Reconstruction (L1) + beta * KL on one example; KL is skipped entirely
/// when beta is zero so it contributes no gradient.
pub fn vae_loss_graph(
    g: &mut Graph,
    set: &ParamSet<'_>,
    mel_tensor: &Tensor,
    kl_weight: f64,
    rng: &mut RngState,
) -> Result<crate::numerics::Value> {
    let x = g.constant(mel_tensor.clone());
    let (mean, logvar) = encode_graph(g, set, &x)?;
    let eps = g.constant(Tensor::randn(&g.shape_of(&mean), rng));
    let half = g.mul_scalar(&logvar, 0.5)?;
    let sigma = g.exp(&half)?;
    let noise = g.mul(&sigma, &eps)?;
    let z = g.add(&mean, &noise)?;
    let recon = decode_graph(g, set, &z)?;
    let diff = g.sub(&recon, &x)?;
    let l1 = g.abs(&diff)?;
    let recon_loss = g.mean_all(&l1)?;
    if kl_weight == 0.0 {
        return Ok(recon_loss);
    }
    // KL(q || N(0, I)) per element: -0.5 (1 + logvar - mean^2 - exp(logvar)).
    let mean_sq = g.mul(&mean, &mean)?;
    let var = g.exp(&logvar)?;
    let inner = g.add_scalar(&logvar, 1.0)?;
    let inner = g.sub(&inner, &mean_sq)?;
    let inner = g.sub(&inner, &var)?;
    let kl = g.mean_all(&inner)?;
    let kl = g.mul_scalar(&kl, -0.5)?;
    let kl = g.mul_scalar(&kl, kl_weight)?;
    g.add(&recon_loss, &kl)
}

#[derive(Debug, Clone)]
pub struct VaeTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub kl_weight: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub log_every: usize,
}

impl Default for VaeTrainConfig {
    fn default() -> Self {
        VaeTrainConfig {
            lr: 1e-3,
            steps: 900,
            batch: 1,
            kl_weight: 1e-4,
            weight_decay: 0.01,
            betas: (0.9, 0.999),
            seed: 42,
            log_every: 100,
        }
    }
}

/// Trains on a mel corpus; returns the model and the per-step losses.
pub fn train_vae(mels: &[MelSpectrogram], cfg: &VaeTrainConfig) -> Result<(VaeModel, Vec<f64>)> {
    if mels.is_empty() {
        return Err(Error::config("train_vae: empty corpus".to_string()));
    }
    let tensors: Vec<Tensor> = mels.iter().map(mel_to_padded_tensor).collect();
    let mut model = VaeModel::init(cfg.seed)?;
    let opt = AdamW {
        lr: cfg.lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut rng = RngState::new(cfg.seed).derive("vae-train");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let set = ParamSet::trainable(&model.store);
        let mut batch_loss = None;
        for _ in 0..cfg.batch {
            let idx = rng.below(tensors.len() as u64) as usize;
            let loss = vae_loss_graph(&mut g, &set, &tensors[idx], cfg.kl_weight, &mut rng)?;
            batch_loss = Some(match batch_loss {
                None => loss,
                Some(prev) => g.add(&prev, &loss)?,
            });
        }
        let loss = g.mul_scalar(&batch_loss.unwrap(), 1.0 / cfg.batch as f64)?;
        losses.push(g.value(&loss).item());
        model.store.zero_grads();
        g.backward(loss, &mut model.store)?;
        model.store.adamw_step(&opt)?;
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step + 1 == cfg.steps) {
            eprintln!("train-vae\t{step}\t{:.6}", losses[step]);
        }
    }
    Ok((model, losses))
}

/// Mean absolute reconstruction error (log units) through the mean latent.
pub fn reconstruction_error(model: &VaeModel, m: &MelSpectrogram) -> Result<f64> {
    let z = model.encode_mean(m)?;
    let rec = model.decode(&z, m.frame_rate())?;
    let n = m.data().len();
    Ok(m
        .data()
        .iter()
        .zip(rec.data())
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / n as f64)
}
