//! Noise-prediction training objective with text-condition dropping.

use super::sampler::NoisePredictor;
use super::schedule::NoiseSchedule;
use super::unet::{denoiser_eps, text_embedding, time_embedding, Cond, DenoiserModel};
use crate::error::{Error, Result};
use crate::nn;
use crate::numerics::graph::{Graph, ParamSet};
use crate::numerics::store::AdamW;
use crate::numerics::{Ctx, RngState, Tensor};

/// One training draw: the timestep, the injected noise, and whether the
/// text condition is replaced by the null embedding.
#[derive(Debug, Clone)]
pub struct TrainDraw {
    pub t: usize,
    pub eps: Tensor,
    pub dropped: bool,
}

/// Samples t uniformly from 1..=T, Gaussian noise, and the text-drop coin.
pub fn train_draw(
    schedule: &NoiseSchedule,
    shape: &[usize],
    drop_prob: f64,
    rng: &mut RngState,
) -> TrainDraw {
    let t = 1 + rng.below(schedule.steps() as u64) as usize;
    let dropped = rng.uniform() < drop_prob;
    let eps = Tensor::randn(shape, rng);
    TrainDraw { t, eps, dropped }
}

/// Mean squared error between the injected and the predicted noise, for
/// any noise predictor (the trained model or a test stub).
pub fn diffusion_loss(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    cond: &Cond,
    draw: &TrainDraw,
) -> Result<f64> {
    let z_t = schedule.q_sample(z0, draw.t, &draw.eps)?;
    let used = if draw.dropped { Cond::Null } else { *cond };
    let pred = model.predict(&z_t, draw.t, &used)?;
    if pred.shape() != draw.eps.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} vs noise {:?}",
            pred.shape(),
            draw.eps.shape()
        )));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(draw.eps.data())
        .map(|(p, e)| (p - e) * (p - e))
        .sum::<f64>()
        / n)
}

/// In-graph training loss for the base denoiser.
pub fn diffusion_loss_graph(
    g: &mut Graph,
    set: &ParamSet<'_>,
    schedule: &NoiseSchedule,
    z0: &Tensor,
    class: usize,
    num_classes: usize,
    draw: &TrainDraw,
) -> Result<crate::numerics::Value> {
    let z_t = g.constant(schedule.q_sample(z0, draw.t, &draw.eps)?);
    let temb = time_embedding(g, set, draw.t)?;
    let cond = if draw.dropped { Cond::Null } else { Cond::Class(class) };
    let text = text_embedding(g, set, num_classes, &cond)?;
    let pred = denoiser_eps(g, set, &z_t, &temb, &text, None)?;
    let eps = g.constant(draw.eps.clone());
    nn::mse(g, &pred, &eps)
}

/// Eval-mode predictor view over a trained denoiser.
pub struct BasePredictor<'a> {
    pub model: &'a DenoiserModel,
}

impl NoisePredictor for BasePredictor<'_> {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Cond) -> Result<Tensor> {
        self.model.eps(z_t, t, cond)
    }
}

#[derive(Debug, Clone)]
pub struct DiffusionTrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub batch: usize,
    pub text_drop_prob: f64,
    pub weight_decay: f64,
    pub betas: (f64, f64),
    pub seed: u64,
    pub log_every: usize,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
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

/// Trains the base denoiser on (latent, class) pairs. Returns the model
/// and the per-step losses.
pub fn train_diffusion(
    dataset: &[(Tensor, usize)],
    num_classes: usize,
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<(DenoiserModel, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::config("train_diffusion: empty dataset".to_string()));
    }
    let mut model = DenoiserModel::init(cfg.seed, num_classes)?;
    let losses = train_diffusion_into(&mut model, dataset, schedule, cfg)?;
    Ok((model, losses))
}

/// Training loop over an existing model (used both for fresh training and
/// by tests that pre-arrange the parameters).
pub fn train_diffusion_into(
    model: &mut DenoiserModel,
    dataset: &[(Tensor, usize)],
    schedule: &NoiseSchedule,
    cfg: &DiffusionTrainConfig,
) -> Result<Vec<f64>> {
    if dataset.is_empty() {
        return Err(Error::config("train_diffusion: empty dataset".to_string()));
    }
    let opt = AdamW {
        lr: cfg.lr,
        beta1: cfg.betas.0,
        beta2: cfg.betas.1,
        eps: 1e-8,
        weight_decay: cfg.weight_decay,
    };
    let mut rng = RngState::new(cfg.seed).derive("diffusion-train");
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let set = ParamSet::trainable(&model.store);
        let mut batch_loss = None;
        for _ in 0..cfg.batch {
            let idx = rng.below(dataset.len() as u64) as usize;
            let (z0, class) = &dataset[idx];
            let draw = train_draw(schedule, z0.shape(), cfg.text_drop_prob, &mut rng);
            let loss =
                diffusion_loss_graph(&mut g, &set, schedule, z0, *class, model.num_classes, &draw)?;
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
            eprintln!("train-diffusion\t{step}\t{:.6}", losses[step]);
        }
    }
    Ok(losses)
}
