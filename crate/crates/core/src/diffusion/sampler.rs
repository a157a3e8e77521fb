//! Classifier-free guidance and the deterministic DDIM sampler.

use super::schedule::NoiseSchedule;
use super::unet::Cond;
use crate::error::{Error, Result};
use crate::numerics::{RngState, Tensor};

/// Anything that can estimate the forward-process noise from (z_t, t,
/// condition): the plain denoiser, the adapter-controlled denoiser, or a
/// test stub.
pub trait NoisePredictor {
    fn predict(&self, z_t: &Tensor, t: usize, cond: &Cond) -> Result<Tensor>;
}

#[derive(Debug, Clone, Copy)]
pub struct SamplerConfig {
    pub ddim_steps: usize,
    pub guidance_weight: f64,
    /// Kept at zero: the sampler is deterministic.
    pub eta: f64,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { ddim_steps: 50, guidance_weight: 2.5, eta: 0.0, seed: 0 }
    }
}

impl SamplerConfig {
    pub fn validate(&self, schedule: &NoiseSchedule) -> Result<()> {
        if self.ddim_steps == 0 || self.ddim_steps > schedule.steps() {
            return Err(Error::config(format!(
                "ddim_steps {} must lie in 1..={}",
                self.ddim_steps,
                schedule.steps()
            )));
        }
        if self.eta != 0.0 {
            return Err(Error::config("only eta = 0 (deterministic) is supported".to_string()));
        }
        Ok(())
    }
}

/// Guided noise estimate: (1 + w) eps(cond) - w eps(null). The model is
/// evaluated on both branches; a control feature inside `model` applies
/// to both.
pub fn cfg_eps(
    model: &dyn NoisePredictor,
    z_t: &Tensor,
    t: usize,
    cond: &Cond,
    w: f64,
) -> Result<Tensor> {
    let conditional = model.predict(z_t, t, cond)?;
    let unconditional = model.predict(z_t, t, &Cond::Null)?;
    let data = conditional
        .data()
        .iter()
        .zip(unconditional.data())
        .map(|(c, u)| (1.0 + w) * c - w * u)
        .collect();
    Ok(Tensor::from_parts(conditional.shape().to_vec(), data))
}

/// Evenly spaced ascending timestep subset of 1..=T ending at T.
pub fn ddim_timesteps(total: usize, count: usize) -> Vec<usize> {
    let mut taus: Vec<usize> = (1..=count)
        .map(|i| ((i as f64 * total as f64 / count as f64).round() as usize).clamp(1, total))
        .collect();
    taus.dedup();
    taus
}

/// Deterministic (eta = 0) DDIM sampling from seeded Gaussian noise.
pub fn ddim_sample(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    shape: &[usize],
    cond: &Cond,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let mut rng = RngState::new(cfg.seed).derive("ddim-init");
    let z_init = Tensor::randn(shape, &mut rng);
    ddim_sample_from(model, schedule, z_init, cond, cfg)
}

/// DDIM from a given terminal latent.
pub fn ddim_sample_from(
    model: &dyn NoisePredictor,
    schedule: &NoiseSchedule,
    z_init: Tensor,
    cond: &Cond,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    cfg.validate(schedule)?;
    let taus = ddim_timesteps(schedule.steps(), cfg.ddim_steps);
    let mut z = z_init;
    for i in (0..taus.len()).rev() {
        let t = taus[i];
        let t_prev = if i == 0 { 0 } else { taus[i - 1] };
        let eps_hat = cfg_eps(model, &z, t, cond, cfg.guidance_weight)?;
        let a_t = schedule.alpha_bar(t);
        let a_prev = schedule.alpha_bar(t_prev);
        let (sa_t, sb_t) = (a_t.sqrt(), (1.0 - a_t).sqrt());
        let (sa_p, sb_p) = (a_prev.sqrt(), (1.0 - a_prev).sqrt());
        let data: Vec<f64> = z
            .data()
            .iter()
            .zip(eps_hat.data())
            .map(|(zt, e)| {
                let z0_hat = (zt - sb_t * e) / sa_t;
                sa_p * z0_hat + sb_p * e
            })
            .collect();
        z = Tensor::from_parts(z.shape().to_vec(), data);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Stub that returns a fixed tensor for the conditional branch and
    /// another for the null branch.
    struct TwoBranchStub {
        cond: Tensor,
        null: Tensor,
    }

    impl NoisePredictor for TwoBranchStub {
        fn predict(&self, _z: &Tensor, _t: usize, cond: &Cond) -> Result<Tensor> {
            Ok(match cond {
                Cond::Null => self.null.clone(),
                _ => self.cond.clone(),
            })
        }
    }

    /// Stub that always returns a fixed noise tensor.
    struct FixedEps(Tensor);

    impl NoisePredictor for FixedEps {
        fn predict(&self, _z: &Tensor, _t: usize, _cond: &Cond) -> Result<Tensor> {
            Ok(self.0.clone())
        }
    }

    #[test]
    fn cfg_weight_zero_is_the_conditional_branch() {
        let mut rng = RngState::new(1);
        let stub = TwoBranchStub {
            cond: Tensor::randn(&[3, 4], &mut rng),
            null: Tensor::randn(&[3, 4], &mut rng),
        };
        let z = Tensor::zeros(&[3, 4]);
        let out = cfg_eps(&stub, &z, 10, &Cond::Class(0), 0.0).unwrap();
        assert_eq!(out.data(), stub.cond.data());
    }

    #[test]
    fn cfg_identical_branches_cancel_for_any_weight() {
        let mut rng = RngState::new(2);
        let shared = Tensor::randn(&[5], &mut rng);
        let stub = TwoBranchStub { cond: shared.clone(), null: shared.clone() };
        let z = Tensor::zeros(&[5]);
        for w in [0.0, 1.0, 2.5, 7.0, -3.0] {
            let out = cfg_eps(&stub, &z, 1, &Cond::Class(0), w).unwrap();
            for (a, b) in out.data().iter().zip(shared.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cfg_scalar_probe() {
        let stub = TwoBranchStub { cond: Tensor::scalar(0.2), null: Tensor::scalar(0.1) };
        let z = Tensor::zeros(&[1]);
        let out = cfg_eps(&stub, &z, 1, &Cond::Class(0), 2.5).unwrap();
        assert!((out.item() - 0.45).abs() < 1e-12);
    }

    #[test]
    fn single_step_with_exact_noise_recovers_z0() {
        let schedule = NoiseSchedule::default_linear();
        let mut rng = RngState::new(3);
        let z0 = Tensor::randn(&[4, 3], &mut rng);
        let eps = Tensor::randn(&[4, 3], &mut rng);
        let t = schedule.steps();
        let z_t = schedule.q_sample(&z0, t, &eps).unwrap();
        let model = FixedEps(eps);
        let cfg = SamplerConfig { ddim_steps: 1, guidance_weight: 0.0, eta: 0.0, seed: 0 };
        let out = ddim_sample_from(&model, &schedule, z_t, &Cond::Class(0), &cfg).unwrap();
        assert!(out.max_abs_diff(&z0) < 1e-10);
    }

    #[test]
    fn sampling_is_deterministic_per_seed() {
        let schedule = NoiseSchedule::default_linear();
        let model = FixedEps(Tensor::full(&[2, 2], 0.1));
        let cfg = SamplerConfig { ddim_steps: 7, guidance_weight: 1.0, eta: 0.0, seed: 9 };
        let a = ddim_sample(&model, &schedule, &[2, 2], &Cond::Class(0), &cfg).unwrap();
        let b = ddim_sample(&model, &schedule, &[2, 2], &Cond::Class(0), &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        let c = ddim_sample(
            &model,
            &schedule,
            &[2, 2],
            &Cond::Class(0),
            &SamplerConfig { seed: 10, ..cfg },
        )
        .unwrap();
        assert!(a.max_abs_diff(&c) > 1e-9);
    }

    /// Linear stub: eps prediction proportional to z_t.
    struct LinearStub(f64);

    impl NoisePredictor for LinearStub {
        fn predict(&self, z: &Tensor, _t: usize, _cond: &Cond) -> Result<Tensor> {
            Ok(z.map(|v| self.0 * v))
        }
    }

    /// Independent transcription of the two-step DDIM recurrence on a
    /// one-element latent.
    fn ddim_two_step_reference(z2: f64, k: f64, schedule: &NoiseSchedule, t2: usize, t1: usize) -> f64 {
        let step = |z: f64, t: usize, t_prev: usize| -> f64 {
            let (a, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t_prev));
            let eps = k * z;
            let z0 = (z - (1.0 - a).sqrt() * eps) / a.sqrt();
            ap.sqrt() * z0 + (1.0 - ap).sqrt() * eps
        };
        let z1 = step(z2, t2, t1);
        step(z1, t1, 0)
    }

    #[test]
    fn two_step_trajectory_matches_reference_recurrence() {
        let schedule = NoiseSchedule::default_linear();
        let model = LinearStub(0.3);
        let cfg = SamplerConfig { ddim_steps: 2, guidance_weight: 0.0, eta: 0.0, seed: 0 };
        let taus = ddim_timesteps(schedule.steps(), 2);
        assert_eq!(taus, vec![500, 1000]);
        let z_init = Tensor::scalar(0.8);
        let got = ddim_sample_from(&model, &schedule, z_init, &Cond::Class(0), &cfg)
            .unwrap()
            .item();
        let expect = ddim_two_step_reference(0.8, 0.3, &schedule, 1000, 500);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn full_step_subset_is_convention_independent() {
        // With ddim_steps == T, the rounded-linspace subset must equal the
        // plain 1..=T range, so any convention yields the same trajectory.
        let schedule = NoiseSchedule::linear(40, 1e-4, 2e-2).unwrap();
        let taus = ddim_timesteps(40, 40);
        let explicit: Vec<usize> = (1..=40).collect();
        assert_eq!(taus, explicit);
        let model = LinearStub(-0.2);
        let cfg = SamplerConfig { ddim_steps: 40, guidance_weight: 0.0, eta: 0.0, seed: 4 };
        let a = ddim_sample(&model, &schedule, &[3], &Cond::Class(0), &cfg).unwrap();
        // Manual full-range walk.
        let mut rng = RngState::new(4).derive("ddim-init");
        let mut z = Tensor::randn(&[3], &mut rng);
        for t in (1..=40usize).rev() {
            let eps = model.predict(&z, t, &Cond::Class(0)).unwrap();
            let (at, ap) = (schedule.alpha_bar(t), schedule.alpha_bar(t - 1));
            let data: Vec<f64> = z
                .data()
                .iter()
                .zip(eps.data())
                .map(|(zt, e)| {
                    let z0 = (zt - (1.0 - at).sqrt() * e) / at.sqrt();
                    ap.sqrt() * z0 + (1.0 - ap).sqrt() * e
                })
                .collect();
            z = Tensor::from_parts(vec![3], data);
        }
        assert_eq!(a.data(), z.data());
    }

    #[test]
    fn nonzero_eta_is_rejected() {
        let schedule = NoiseSchedule::default_linear();
        let cfg = SamplerConfig { eta: 0.5, ..SamplerConfig::default() };
        assert!(cfg.validate(&schedule).is_err());
    }
}
