//! Low-dimensional toy distributions with known answers.

use crate::error::{contract, Result};
use crate::rng::RngStream;
use crate::sampling::Denoiser;
use crate::schedules::NoiseSchedule;
use crate::sde::gaussian_posterior_mean_oracle;
use crate::tensor::Tensor;

/// `x_0 ~ N(0, prior_var·I)`, `x_T = x_0 + N(0, noise_var·I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GaussianToy {
    pub dim: usize,
    pub prior_var: f64,
    pub noise_var: f64,
}

impl GaussianToy {
    pub fn new(dim: usize, prior_var: f64, noise_var: f64) -> Result<Self> {
        contract!(dim >= 1, "toy dimension must be at least 1");
        contract!(
            prior_var > 0.0 && noise_var > 0.0,
            "toy variances must be positive, got {prior_var} and {noise_var}"
        );
        Ok(Self {
            dim,
            prior_var,
            noise_var,
        })
    }

    pub fn sample_pair(&self, rng: &mut RngStream) -> (Tensor, Tensor) {
        let (sp, sn) = (self.prior_var.sqrt(), self.noise_var.sqrt());
        let x0: Vec<f64> = (0..self.dim).map(|_| sp * rng.normal()).collect();
        let x_end: Vec<f64> = x0.iter().map(|&v| v + sn * rng.normal()).collect();
        (Tensor::from_vec(x0), Tensor::from_vec(x_end))
    }

    pub fn pairs(&self, n: usize, rng: &mut RngStream) -> Vec<(Tensor, Tensor)> {
        (0..n).map(|_| self.sample_pair(rng)).collect()
    }

    /// Mean and variance of `x_0 | x_T` (per coordinate).
    pub fn endpoint_posterior(&self, x_end: f64) -> (f64, f64) {
        let (p, n) = (self.prior_var, self.noise_var);
        (p / (p + n) * x_end, p * n / (p + n))
    }
}

/// Exact bridge data prediction `E[x_0 | x_t, x_T]` for a [`GaussianToy`].
#[derive(Clone, Debug)]
pub struct GaussianBridgeOracle {
    pub toy: GaussianToy,
    pub schedule: NoiseSchedule,
}

impl GaussianBridgeOracle {
    pub fn new(toy: GaussianToy, schedule: NoiseSchedule) -> Self {
        Self { toy, schedule }
    }
}

impl Denoiser for GaussianBridgeOracle {
    fn predict_x0(&self, x_t: &Tensor, x_end: &Tensor, t: f64) -> Result<Tensor> {
        gaussian_posterior_mean_oracle(self.toy.prior_var, self.toy.noise_var, &self.schedule, x_t, x_end, t)
    }
}

/// Exact marginal data prediction `E[x_0 | x_t]` for `x_0 ~ N(0, prior_var·I)`.
#[derive(Clone, Debug)]
pub struct GaussianMarginalOracle {
    pub prior_var: f64,
    pub schedule: NoiseSchedule,
}

impl GaussianMarginalOracle {
    pub fn new(prior_var: f64, schedule: NoiseSchedule) -> Self {
        Self { prior_var, schedule }
    }
}

impl Denoiser for GaussianMarginalOracle {
    fn predict_x0(&self, x_t: &Tensor, _x_end: &Tensor, t: f64) -> Result<Tensor> {
        let (alpha, sigma) = self.schedule.alpha_sigma(t)?;
        let p = self.prior_var;
        let w = alpha * p / (alpha * alpha * p + sigma * sigma);
        Ok(x_t.scale(w))
    }
}

/// Two interleaved half circles in 2D with isotropic jitter.
pub fn two_moons(n: usize, noise_sd: f64, rng: &mut RngStream) -> Vec<Tensor> {
    (0..n)
        .map(|i| {
            let u = std::f64::consts::PI * rng.uniform();
            let (x, y) = if i % 2 == 0 {
                (u.cos(), u.sin())
            } else {
                (1.0 - u.cos(), 0.5 - u.sin())
            };
            Tensor::from_vec(vec![x + noise_sd * rng.normal(), y + noise_sd * rng.normal()])
        })
        .collect()
}
