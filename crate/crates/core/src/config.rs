//! Flat `key = value` run configuration with defaults for every knob.
//! Unknown keys are rejected rather than silently ignored.

use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Only `audioldm` exists: 1024 window, 1024 FFT, 160 hop, 0-8 kHz.
    pub stft_preset: String,
    pub griffin_lim_iters: usize,

    pub corpus_n: usize,
    pub corpus_duration: f64,

    pub schedule_steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,

    pub vae_lr: f64,
    pub vae_steps: usize,
    pub vae_batch: usize,
    pub vae_kl_weight: f64,

    pub diffusion_lr: f64,
    pub diffusion_steps: usize,
    pub diffusion_batch: usize,
    pub text_drop_prob: f64,

    pub adapter_lr: f64,
    pub adapter_steps: usize,
    pub adapter_batch: usize,

    pub phi_lr: f64,
    pub phi_steps: usize,
    pub phi_batch: usize,
    pub phi_val_fraction: f64,
    pub phi_early_stop_mae: f64,

    pub ddim_steps: usize,
    pub guidance_weight: f64,

    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,

    pub av_window: f64,
    pub onset_tolerance: f64,
    pub onset_threshold: f64,
    pub peak_prominence: f64,
    pub peak_separation: f64,
    pub mae_normalize: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 42,
            stft_preset: "audioldm".into(),
            griffin_lim_iters: 60,
            corpus_n: 128,
            corpus_duration: 5.0,
            schedule_steps: 1000,
            beta_start: 1e-4,
            beta_end: 2e-2,
            vae_lr: 1e-3,
            vae_steps: 900,
            vae_batch: 1,
            vae_kl_weight: 1e-4,
            diffusion_lr: 3e-4,
            diffusion_steps: 2200,
            diffusion_batch: 1,
            text_drop_prob: 0.3,
            adapter_lr: 3e-4,
            adapter_steps: 2200,
            adapter_batch: 1,
            phi_lr: 3e-5,
            phi_steps: 4000,
            phi_batch: 2,
            phi_val_fraction: 0.125,
            phi_early_stop_mae: 0.05,
            ddim_steps: 50,
            guidance_weight: 2.5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            av_window: 0.1,
            onset_tolerance: 0.1,
            onset_threshold: 0.05,
            peak_prominence: 0.1,
            peak_separation: 0.1,
            mae_normalize: true,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::format(format!(
                    "config line {}: expected `key = value`, got {raw:?}",
                    lineno + 1
                )));
            };
            cfg.set(key.trim(), value.trim()).map_err(|e| {
                Error::format(format!("config line {}: {e}", lineno + 1))
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::config(format!("{key}: cannot parse {value:?}")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "stft_preset" => self.stft_preset = value.to_string(),
            "griffin_lim_iters" => self.griffin_lim_iters = num(key, value)?,
            "corpus_n" => self.corpus_n = num(key, value)?,
            "corpus_duration" => self.corpus_duration = num(key, value)?,
            "schedule_steps" => self.schedule_steps = num(key, value)?,
            "beta_start" => self.beta_start = num(key, value)?,
            "beta_end" => self.beta_end = num(key, value)?,
            "vae_lr" => self.vae_lr = num(key, value)?,
            "vae_steps" => self.vae_steps = num(key, value)?,
            "vae_batch" => self.vae_batch = num(key, value)?,
            "vae_kl_weight" => self.vae_kl_weight = num(key, value)?,
            "diffusion_lr" => self.diffusion_lr = num(key, value)?,
            "diffusion_steps" => self.diffusion_steps = num(key, value)?,
            "diffusion_batch" => self.diffusion_batch = num(key, value)?,
            "text_drop_prob" => self.text_drop_prob = num(key, value)?,
            "adapter_lr" => self.adapter_lr = num(key, value)?,
            "adapter_steps" => self.adapter_steps = num(key, value)?,
            "adapter_batch" => self.adapter_batch = num(key, value)?,
            "phi_lr" => self.phi_lr = num(key, value)?,
            "phi_steps" => self.phi_steps = num(key, value)?,
            "phi_batch" => self.phi_batch = num(key, value)?,
            "phi_val_fraction" => self.phi_val_fraction = num(key, value)?,
            "phi_early_stop_mae" => self.phi_early_stop_mae = num(key, value)?,
            "ddim_steps" => self.ddim_steps = num(key, value)?,
            "guidance_weight" => self.guidance_weight = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "av_window" => self.av_window = num(key, value)?,
            "onset_tolerance" => self.onset_tolerance = num(key, value)?,
            "onset_threshold" => self.onset_threshold = num(key, value)?,
            "peak_prominence" => self.peak_prominence = num(key, value)?,
            "peak_separation" => self.peak_separation = num(key, value)?,
            "mae_normalize" => {
                self.mae_normalize = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::config(format!("mae_normalize: {value:?}"))),
                }
            }
            _ => return Err(Error::config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.stft_preset != "audioldm" {
            return Err(Error::config(format!(
                "unknown stft preset {:?} (only `audioldm`)",
                self.stft_preset
            )));
        }
        if !(0.0..=1.0).contains(&self.text_drop_prob) {
            return Err(Error::config("text_drop_prob must be in [0, 1]".to_string()));
        }
        if self.schedule_steps == 0 || self.ddim_steps == 0 || self.ddim_steps > self.schedule_steps
        {
            return Err(Error::config(format!(
                "ddim_steps {} must be in 1..=schedule_steps {}",
                self.ddim_steps, self.schedule_steps
            )));
        }
        if self.beta_start <= 0.0 || self.beta_end >= 1.0 || self.beta_start > self.beta_end {
            return Err(Error::config("betas must satisfy 0 < start <= end < 1".to_string()));
        }
        if self.corpus_duration <= 0.2 {
            return Err(Error::config("corpus_duration must exceed 0.2 s".to_string()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_parse_and_validate() {
        let cfg = RunConfig::parse("").unwrap();
        assert_eq!(cfg, RunConfig::default());
    }

    #[test]
    fn values_and_comments_parse() {
        let cfg = RunConfig::parse(
            "# comment\nseed = 7\nddim_steps = 25  # inline\n\nguidance_weight = 4.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ddim_steps, 25);
        assert_eq!(cfg.guidance_weight, 4.0);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::parse("no_such_key = 3\n").unwrap_err();
        assert!(err.to_string().contains("no_such_key"), "{err}");
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse("seed = banana\n").is_err());
        assert!(RunConfig::parse("ddim_steps = 0\n").is_err());
        assert!(RunConfig::parse("stft_preset = other\n").is_err());
        assert!(RunConfig::parse("text_drop_prob = 1.5\n").is_err());
    }
}
