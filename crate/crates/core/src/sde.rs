//! Bridge SDE simulation and closed-form bridge quantities.

use crate::error::{contract, domain, Result};
use crate::rng::RngStream;
use crate::schedules::NoiseSchedule;
use crate::tensor::Tensor;

/// Draw `x_t ~ q(x_t | x_0, x_T)`.
pub fn sample_bridge_kernel(
    rng: &mut RngStream,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    x_end: &Tensor,
    t: f64,
) -> Result<Tensor> {
    x0.ensure_same_shape(x_end, "sample_bridge_kernel")?;
    let coef = schedule.bridge_coefficients(t)?;
    let mut out = x_end.lincomb(coef.a, x0, coef.b);
    if coef.c > 0.0 {
        for v in out.data_mut() {
            *v += coef.c * rng.normal();
        }
    }
    Ok(out)
}

/// Distance from the horizon at which the h-transform drift is frozen.
const PIN_GAP: f64 = 1e-4;

/// Euler–Maruyama simulation of the Doob h-transformed forward SDE,
/// calling `visit(step, t, state)` for every grid point including both ends.
///
/// The drift is evaluated no later than `T − 1e-4·T` and the terminal state
/// is set to `x_T` exactly.
pub fn simulate_forward_bridge(
    rng: &mut RngStream,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    x_end: &Tensor,
    n_steps: usize,
    mut visit: impl FnMut(usize, f64, &[f64]),
) -> Result<()> {
    contract!(n_steps >= 2, "forward bridge needs n_steps >= 2, got {n_steps}");
    x0.ensure_same_shape(x_end, "euler_maruyama_forward_bridge")?;
    let horizon = schedule.horizon;
    let dt = horizon / n_steps as f64;
    let t_cap = horizon * (1.0 - PIN_GAP);
    let target = x_end.data();
    let mut state = x0.data().to_vec();
    visit(0, 0.0, &state);
    for k in 0..n_steps - 1 {
        let t = (k as f64 * dt).min(t_cap);
        let f = schedule.drift_coef(t);
        let g2 = schedule.diffusion_sq(t);
        let (r, v) = schedule.terminal_transition(t)?;
        let noise_scale = (g2 * dt).sqrt();
        for (x, &y) in state.iter_mut().zip(target) {
            // ∇ log p(x_T | x_t) = r (x_T − r x_t) / v
            let h = r * (y - r * *x) / v;
            *x += (f * *x + g2 * h) * dt + noise_scale * rng.normal();
        }
        visit(k + 1, (k + 1) as f64 * dt, &state);
    }
    visit(n_steps, horizon, target);
    Ok(())
}

/// Full path of the forward bridge on the uniform grid `t_k = k T / n`.
pub fn euler_maruyama_forward_bridge(
    rng: &mut RngStream,
    schedule: &NoiseSchedule,
    x0: &Tensor,
    x_end: &Tensor,
    n_steps: usize,
) -> Result<Vec<Tensor>> {
    let shape = x0.shape().to_vec();
    let mut path = Vec::with_capacity(n_steps + 1);
    simulate_forward_bridge(rng, schedule, x0, x_end, n_steps, |_, _, s| {
        path.push(Tensor::new(shape.clone(), s.to_vec()).expect("shape preserved"));
    })?;
    Ok(path)
}

/// `∇_{x_t} log q(x_t | x_0, x_T) = −(x_t − a x_T − b x_0) / c²`.
pub fn analytic_bridge_score(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    x0: &Tensor,
    x_end: &Tensor,
    t: f64,
) -> Result<Tensor> {
    x_t.ensure_same_shape(x0, "analytic_bridge_score")?;
    x_t.ensure_same_shape(x_end, "analytic_bridge_score")?;
    let coef = schedule.bridge_coefficients(t)?;
    let c_sq = coef.c_sq();
    domain!(c_sq > 0.0, "bridge variance vanishes at t={t}");
    let mean = x_end.lincomb(coef.a, x0, coef.b);
    Ok(x_t.zip_map(&mean, |x, m| -(x - m) / c_sq))
}

/// Linear weights `(w_t, w_T)` with `E[x_0 | x_t, x_T] = w_t x_t + w_T x_T`
/// under the toy model `x_0 ~ N(0, p I)`, `x_T = x_0 + N(0, n I)` and the
/// bridge kernel at time `t`.
pub fn gaussian_posterior_weights(
    prior_var: f64,
    noise_var: f64,
    schedule: &NoiseSchedule,
    t: f64,
) -> Result<(f64, f64)> {
    contract!(
        prior_var > 0.0 && noise_var > 0.0,
        "variances must be positive, got prior {prior_var}, noise {noise_var}"
    );
    let coef = schedule.bridge_coefficients(t)?;
    let (a, b, c_sq) = (coef.a, coef.b, coef.c_sq());
    let (p, n) = (prior_var, noise_var);
    if c_sq == 0.0 {
        // Pinned endpoints: x_t carries no information beyond x_0 or x_T.
        return Ok(if b == 0.0 {
            (0.0, p / (p + n))
        } else {
            (1.0 / b, -a / b)
        });
    }
    // Per-coordinate covariances of (x_0, x_t, x_T).
    let var_xt = (a + b) * (a + b) * p + a * a * n + c_sq;
    let var_end = p + n;
    let cov_xt_end = a * (p + n) + b * p;
    let cov_0_xt = (a + b) * p;
    let cov_0_end = p;
    let det = var_xt * var_end - cov_xt_end * cov_xt_end;
    domain!(det > 0.0, "singular conditioning covariance at t={t}");
    let w_t = (cov_0_xt * var_end - cov_0_end * cov_xt_end) / det;
    let w_end = (cov_0_end * var_xt - cov_0_xt * cov_xt_end) / det;
    Ok((w_t, w_end))
}

/// Exact `E[x_0 | x_t, x_T]` for the jointly Gaussian toy model.
pub fn gaussian_posterior_mean_oracle(
    prior_var: f64,
    noise_var: f64,
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    x_end: &Tensor,
    t: f64,
) -> Result<Tensor> {
    x_t.ensure_same_shape(x_end, "gaussian_posterior_mean_oracle")?;
    let (w_t, w_end) = gaussian_posterior_weights(prior_var, noise_var, schedule, t)?;
    Ok(x_t.lincomb(w_t, x_end, w_end))
}
