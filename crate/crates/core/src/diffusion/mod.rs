//! Text-conditioned latent diffusion: schedule, denoiser, classifier-free
//! guidance, DDIM sampling, training, and end-to-end generation.

pub mod generate;
pub mod sampler;
pub mod schedule;
pub mod train;
pub mod unet;

pub use generate::{generate, GenerateRequest, Pipeline};
pub use sampler::{cfg_eps, ddim_sample, ddim_timesteps, NoisePredictor, SamplerConfig};
pub use schedule::NoiseSchedule;
pub use train::{
    diffusion_loss, train_diffusion, train_draw, BasePredictor, DiffusionTrainConfig, TrainDraw,
};
pub use unet::{Cond, DenoiserModel};
