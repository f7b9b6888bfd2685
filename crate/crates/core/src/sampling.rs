//! Counterfactual samplers: the implicit bridge sampler, reverse bridge SDE
//! integration, DDPM ancestral sampling and the partial-noising baseline.

use crate::error::{contract, Error, Result};
use crate::network::score_from_prediction;
use crate::rng::RngStream;
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;
use crate::training::Objective;

/// Anything that predicts `x̂_0 = E[x_0 | x_t, x_T]` at absolute time `t`.
/// Marginal (DSM) models receive an all-zero endpoint.
pub trait Denoiser: Sync {
    fn predict_x0(&self, x_t: &Tensor, x_end: &Tensor, t: f64) -> Result<Tensor>;

    /// Training objective the model was fitted with; `None` for analytic
    /// oracles valid for either use.
    fn objective(&self) -> Option<Objective> {
        None
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeGrid {
    /// `t_n = T·n/N`.
    Uniform,
    /// `t_n = T·(n/N)²`, denser near `t = 0`.
    Quadratic,
}

impl TimeGrid {
    pub fn as_str(self) -> &'static str {
        match self {
            TimeGrid::Uniform => "uniform_t",
            TimeGrid::Quadratic => "quadratic_t",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "uniform_t" => Ok(TimeGrid::Uniform),
            "quadratic_t" => Ok(TimeGrid::Quadratic),
            _ => Err(Error::Config(format!("unknown grid `{s}` (uniform_t|quadratic_t)"))),
        }
    }

    /// `t_0 = 0 < t_1 < … < t_N = horizon`, with both ends exact.
    pub fn times(self, n_steps: usize, horizon: f64) -> Result<Vec<f64>> {
        contract!(n_steps >= 1, "sampler needs at least one step");
        let n = n_steps as f64;
        let mut ts: Vec<f64> = (0..=n_steps)
            .map(|k| {
                let u = k as f64 / n;
                match self {
                    TimeGrid::Uniform => horizon * u,
                    TimeGrid::Quadratic => horizon * u * u,
                }
            })
            .collect();
        ts[n_steps] = horizon;
        Ok(ts)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerConfig {
    pub n_steps: usize,
    /// Noise scale `ρ_n = eta·c_{t_n}`, in `[0, 1]`.
    pub eta: f64,
    pub grid: TimeGrid,
    pub seed: u64,
    /// Also drop the fresh noise of the first step out of `t_N = T`.
    pub strict: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_steps: 10,
            eta: 0.0,
            grid: TimeGrid::Uniform,
            seed: 0,
            strict: false,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::Config("sampler n_steps must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta must lie in [0, 1], got {}", self.eta)));
        }
        Ok(())
    }
}

/// State around one implicit-sampler update from `t_next` down to `t_cur`.
pub struct DbimStep<'a> {
    pub n: usize,
    pub t_next: f64,
    pub t_cur: f64,
    pub x_next: &'a Tensor,
    pub x0_hat: &'a Tensor,
    /// `None` on the first step out of `T`, where it is 0/0.
    pub eps_hat: Option<&'a Tensor>,
    pub rho: f64,
}

/// Sampler seed for the `index`-th input of a batch run with `seed`.
pub fn per_sample_seed(seed: u64, index: u64) -> u64 {
    RngStream::new(seed, 6).derive(index).next_u64()
}

/// Implicit bridge sampler from the endpoint `x_end` down to `t = 0`.
pub fn dbim_sample(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    x_end: &Tensor,
    cfg: &SamplerConfig,
) -> Result<Tensor> {
    dbim_sample_traced(model, schedule, x_end, cfg, |_| {})
}

/// `dbim_sample`, calling `visit` before each update.
pub fn dbim_sample_traced(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    x_end: &Tensor,
    cfg: &SamplerConfig,
    mut visit: impl FnMut(&DbimStep),
) -> Result<Tensor> {
    cfg.validate()?;
    let ts = cfg.grid.times(cfg.n_steps, schedule.horizon)?;
    let mut rng = RngStream::new(cfg.seed, 0);
    let mut x = x_end.clone();
    for n in (0..cfg.n_steps).rev() {
        let (t_next, t_cur) = (ts[n + 1], ts[n]);
        let x0_hat = model.predict_x0(&x, x_end, t_next)?;
        x.ensure_same_shape(&x0_hat, "model prediction")?;
        let cur = schedule.bridge_coefficients(t_cur)?;
        let mut out = x_end.lincomb(cur.a, &x0_hat, cur.b);
        if n + 1 == cfg.n_steps {
            // ε̂ is undefined at t_N = T: pure fresh noise, ρ = c.
            let rho = if cfg.strict { 0.0 } else { cur.c };
            visit(&DbimStep {
                n,
                t_next,
                t_cur,
                x_next: &x,
                x0_hat: &x0_hat,
                eps_hat: None,
                rho,
            });
            if rho > 0.0 {
                for v in out.data_mut() {
                    *v += rho * rng.normal();
                }
            }
        } else {
            let rho = cfg.eta * cur.c;
            contract!(rho <= cur.c, "noise scale {rho} exceeds c = {} at t = {t_cur}", cur.c);
            let next = schedule.bridge_coefficients(t_next)?;
            let eps_hat = x
                .zip_map(x_end, |xv, e| xv - next.a * e)
                .zip_map(&x0_hat, |r, x0| (r - next.b * x0) / next.c);
            visit(&DbimStep {
                n,
                t_next,
                t_cur,
                x_next: &x,
                x0_hat: &x0_hat,
                eps_hat: Some(&eps_hat),
                rho,
            });
            let keep = (cur.c_sq() - rho * rho).max(0.0).sqrt();
            if keep > 0.0 {
                out = out.lincomb(1.0, &eps_hat, keep);
            }
            if rho > 0.0 {
                for v in out.data_mut() {
                    *v += rho * rng.normal();
                }
            }
        }
        x = out;
    }
    Ok(x)
}

/// Euler–Maruyama integration of the reverse bridge SDE on a uniform grid.
/// The first step out of `T` samples the bridge kernel around the model's
/// prediction, since the score is singular at the pinned endpoint.
pub fn reverse_bridge_sde_sample(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    x_end: &Tensor,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    contract!(n_steps >= 10, "reverse SDE needs at least 10 steps, got {n_steps}");
    let horizon = schedule.horizon;
    let dt = horizon / n_steps as f64;
    let x0_hat = model.predict_x0(x_end, x_end, horizon)?;
    let t1 = horizon - dt;
    let coef = schedule.bridge_coefficients(t1)?;
    let mut x = x_end.lincomb(coef.a, &x0_hat, coef.b);
    for v in x.data_mut() {
        *v += coef.c * rng.normal();
    }
    for k in (1..n_steps).rev() {
        let t = k as f64 * dt;
        let x0_hat = model.predict_x0(&x, x_end, t)?;
        let s = score_from_prediction(schedule, &x, x_end, t, &x0_hat)?;
        let (r, v) = schedule.terminal_transition(t)?;
        let f = schedule.drift_coef(t);
        let g_sq = schedule.diffusion_sq(t);
        let noise = (g_sq * dt).sqrt();
        let mut next = Vec::with_capacity(x.numel());
        for i in 0..x.numel() {
            let xi = x.data()[i];
            let h = r * (x_end.data()[i] - r * xi) / v;
            let drift = f * xi - g_sq * (s.data()[i] - h);
            next.push(xi - drift * dt + noise * rng.normal());
        }
        x = Tensor::new(x.shape().to_vec(), next)?;
    }
    x.ensure_finite("reverse SDE sample")?;
    Ok(x)
}

/// Ancestral sampling from `x` at `t_start` down to 0 in `n_steps` uniform
/// steps, drawing from `q(x_s | x_t, x̂_0)` at each step.
fn ancestral_from(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    mut x: Tensor,
    t_start: f64,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    contract!(n_steps >= 1, "ancestral sampling needs at least one step");
    let zeros = Tensor::zeros(x.shape());
    for k in (1..=n_steps).rev() {
        let t = t_start * k as f64 / n_steps as f64;
        let s = t_start * (k - 1) as f64 / n_steps as f64;
        let x0_hat = model.predict_x0(&x, &zeros, t)?;
        x.ensure_same_shape(&x0_hat, "model prediction")?;
        if k == 1 {
            return Ok(x0_hat);
        }
        let (alpha_t, sigma_t) = schedule.alpha_sigma(t)?;
        let (alpha_s, sigma_s) = schedule.alpha_sigma(s)?;
        let alpha_ts = alpha_t / alpha_s;
        let var_ts = sigma_t * sigma_t - alpha_ts * alpha_ts * sigma_s * sigma_s;
        let (st2, ss2) = (sigma_t * sigma_t, sigma_s * sigma_s);
        let w_x = alpha_ts * ss2 / st2;
        let w_0 = alpha_s * var_ts / st2;
        let sd = (var_ts * ss2 / st2).max(0.0).sqrt();
        let mut next = x.lincomb(w_x, &x0_hat, w_0);
        for v in next.data_mut() {
            *v += sd * rng.normal();
        }
        x = next;
    }
    unreachable!("loop returns at k = 1")
}

fn require_marginal_model(model: &impl Denoiser) -> Result<()> {
    if model.objective() == Some(Objective::Dbsm) {
        return Err(Error::Config(
            "DDPM sampling needs a dsm-trained model; this checkpoint was trained with dbsm".into(),
        ));
    }
    Ok(())
}

/// Unconditional DDPM sample starting from `x_T ~ N(0, σ_T² I)`.
pub fn ddpm_ancestral_sample(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    shape: &[usize],
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    require_marginal_model(model)?;
    let (_, sigma) = schedule.alpha_sigma(schedule.horizon)?;
    let mut x = Tensor::zeros(shape);
    for v in x.data_mut() {
        *v = sigma * rng.normal();
    }
    ancestral_from(model, schedule, x, schedule.horizon, n_steps, rng)
}

/// Partial-noising baseline: noise `x_path` to `t_star` with the marginal
/// kernel, then denoise back to `t = 0`.
pub fn partial_diffusion_counterfactual(
    model: &impl Denoiser,
    schedule: &NoiseSchedule,
    x_path: &Tensor,
    t_star: f64,
    n_steps: usize,
    rng: &mut RngStream,
) -> Result<Tensor> {
    require_marginal_model(model)?;
    contract!(
        t_star > 0.0 && t_star < schedule.horizon,
        "t_star must lie in (0, T), got {t_star}"
    );
    let (alpha, sigma) = schedule.alpha_sigma(t_star)?;
    let mut x = x_path.scale(alpha);
    for v in x.data_mut() {
        *v += sigma * rng.normal();
    }
    ancestral_from(model, schedule, x, t_star, n_steps, rng)
}
