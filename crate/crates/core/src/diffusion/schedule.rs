//! Forward-process noise schedule: linear betas with the
//! identity-at-zero convention for the cumulative alphas.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    /// betas[t-1] is the step-t noise rate, t in 1..=T.
    betas: Vec<f64>,
    /// alpha_bar[t] for t in 0..=T; alpha_bar[0] == 1.
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn linear(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if steps == 0 {
            return Err(Error::config("schedule needs at least one step".to_string()));
        }
        if beta_start <= 0.0 || beta_end >= 1.0 || beta_start > beta_end {
            return Err(Error::config(format!(
                "betas must satisfy 0 < {beta_start} <= {beta_end} < 1"
            )));
        }
        let betas: Vec<f64> = (0..steps)
            .map(|i| {
                if steps == 1 {
                    beta_start
                } else {
                    beta_start + (beta_end - beta_start) * i as f64 / (steps - 1) as f64
                }
            })
            .collect();
        let mut alpha_bar = Vec::with_capacity(steps + 1);
        alpha_bar.push(1.0);
        let mut prod = 1.0;
        for beta in &betas {
            prod *= 1.0 - beta;
            alpha_bar.push(prod);
        }
        Ok(NoiseSchedule { betas, alpha_bar })
    }

    pub fn default_linear() -> NoiseSchedule {
        NoiseSchedule::linear(1000, 1e-4, 2e-2).expect("default schedule is valid")
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// Cumulative alpha at t, t in 0..=T; exactly 1 at t = 0.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Forward process: sqrt(abar_t) z0 + sqrt(1 - abar_t) eps.
    pub fn q_sample(&self, z0: &Tensor, t: usize, eps: &Tensor) -> Result<Tensor> {
        if t > self.steps() {
            return Err(Error::config(format!(
                "timestep {t} outside 0..={}",
                self.steps()
            )));
        }
        if z0.shape() != eps.shape() {
            return Err(Error::shape(format!(
                "q_sample: z0 {:?} vs eps {:?}",
                z0.shape(),
                eps.shape()
            )));
        }
        let a = self.alpha_bar(t);
        let (sa, sb) = (a.sqrt(), (1.0 - a).sqrt());
        let data = z0
            .data()
            .iter()
            .zip(eps.data())
            .map(|(z, e)| sa * z + sb * e)
            .collect();
        Ok(Tensor::from_parts(z0.shape().to_vec(), data))
    }
}
