//! Noise schedules and the Gaussian bridge coefficients.
//!
//! All quantities are evaluated in closed form. Signal-to-noise ratios are
//! only ever combined as ratios `(α_n² σ_d²) / (α_d² σ_n²)`, so the infinite
//! SNR at `t = 0` never materializes.

use crate::error::{contract, domain, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Variance preserving, linear β(s).
    Vp,
    /// Standard Brownian motion: α ≡ 1, σ² = t.
    Brownian,
}

impl ScheduleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ScheduleKind::Vp => "vp",
            ScheduleKind::Brownian => "brownian",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vp" => Ok(ScheduleKind::Vp),
            "brownian" => Ok(ScheduleKind::Brownian),
            other => Err(Error::Config(format!("unknown schedule kind `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub beta_min: f64,
    pub beta_max: f64,
    pub horizon: f64,
    pub t_clamp_lo: f64,
    pub t_clamp_hi: f64,
}

/// Coefficients of `q(x_t | x_0, x_T) = N(a x_T + b x_0, c² I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BridgeCoefficients {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl BridgeCoefficients {
    pub fn c_sq(&self) -> f64 {
        self.c * self.c
    }
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::vp(0.1, 20.0, 1.0)
    }
}

impl NoiseSchedule {
    pub fn vp(beta_min: f64, beta_max: f64, horizon: f64) -> Self {
        Self {
            kind: ScheduleKind::Vp,
            beta_min,
            beta_max,
            horizon,
            t_clamp_lo: 1e-4 * horizon,
            t_clamp_hi: (1.0 - 1e-4) * horizon,
        }
    }

    pub fn brownian(horizon: f64) -> Self {
        Self {
            kind: ScheduleKind::Brownian,
            beta_min: 0.0,
            beta_max: 0.0,
            horizon,
            t_clamp_lo: 1e-4 * horizon,
            t_clamp_hi: (1.0 - 1e-4) * horizon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(
            self.horizon > 0.0 && self.horizon.is_finite(),
            "horizon must be positive and finite, got {}",
            self.horizon
        );
        contract!(
            self.t_clamp_lo > 0.0 && self.t_clamp_lo < self.t_clamp_hi && self.t_clamp_hi <= self.horizon,
            "clamp range must satisfy 0 < lo < hi <= T, got [{}, {}]",
            self.t_clamp_lo,
            self.t_clamp_hi
        );
        if self.kind == ScheduleKind::Vp {
            contract!(
                self.beta_min > 0.0 && self.beta_max >= self.beta_min,
                "VP schedule needs 0 < beta_min <= beta_max, got {} and {}",
                self.beta_min,
                self.beta_max
            );
        }
        Ok(())
    }

    fn check_time(&self, t: f64) -> Result<()> {
        domain!(
            (0.0..=self.horizon).contains(&t),
            "time {t} outside [0, {}]",
            self.horizon
        );
        Ok(())
    }

    /// β(t) for VP; 1 for Brownian (so that g² = β in both cases).
    pub fn beta(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => self.beta_min + t * (self.beta_max - self.beta_min) / self.horizon,
            ScheduleKind::Brownian => 1.0,
        }
    }

    /// ∫₀ᵗ β(s) ds for the VP schedule.
    fn integrated_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t / self.horizon
    }

    /// Linear drift coefficient: f(x, t) = drift_coef(t) · x.
    pub fn drift_coef(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Vp => -0.5 * self.beta(t),
            ScheduleKind::Brownian => 0.0,
        }
    }

    /// Squared diffusion coefficient g²(t).
    pub fn diffusion_sq(&self, t: f64) -> f64 {
        self.beta(t)
    }

    pub fn alpha_sigma(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.alpha_sigma_unchecked(t))
    }

    pub(crate) fn alpha_sigma_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            ScheduleKind::Vp => {
                let integral = self.integrated_beta(t);
                let alpha = (-0.5 * integral).exp();
                // 1 - α² = 1 - exp(-∫β), accurate near t = 0 via expm1.
                let sigma = (-(-integral).exp_m1()).max(0.0).sqrt();
                (alpha, sigma)
            }
            ScheduleKind::Brownian => (1.0, t.sqrt()),
        }
    }

    /// SNR_num / SNR_den in ratio form.
    pub fn snr_ratio(&self, num_t: f64, den_t: f64) -> Result<f64> {
        self.check_time(num_t)?;
        self.check_time(den_t)?;
        let (a_n, s_n) = self.alpha_sigma_unchecked(num_t);
        let (a_d, s_d) = self.alpha_sigma_unchecked(den_t);
        let top = a_n * a_n * s_d * s_d;
        let bottom = a_d * a_d * s_n * s_n;
        if bottom == 0.0 {
            if top == 0.0 {
                return Err(Error::Domain(format!("SNR ratio 0/0 at num_t={num_t}, den_t={den_t}")));
            }
            return Err(Error::Domain(format!(
                "SNR ratio unbounded at num_t={num_t} (σ = 0 in the numerator SNR)"
            )));
        }
        Ok(top / bottom)
    }

    pub fn bridge_coefficients(&self, t: f64) -> Result<BridgeCoefficients> {
        self.check_time(t)?;
        let horizon = self.horizon;
        let (alpha_t, sigma_t) = self.alpha_sigma_unchecked(t);
        let (alpha_end, _) = self.alpha_sigma_unchecked(horizon);
        let ratio = self.snr_ratio(horizon, t)?;
        let keep = 1.0 - ratio;
        Ok(BridgeCoefficients {
            a: alpha_t * ratio / alpha_end,
            b: alpha_t * keep,
            c: (sigma_t * sigma_t * keep).max(0.0).sqrt(),
        })
    }

    /// Scalar parameters `(r, v)` of the forward transition
    /// `p(x_T | x_t) = N(r x_t, v I)` with `r = α_T/α_t` and
    /// `v = σ_T² − r² σ_t²`.
    pub fn terminal_transition(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        let (alpha_t, sigma_t) = self.alpha_sigma_unchecked(t);
        let (alpha_end, sigma_end) = self.alpha_sigma_unchecked(self.horizon);
        let r = alpha_end / alpha_t;
        let v = sigma_end * sigma_end - r * r * sigma_t * sigma_t;
        domain!(v > 0.0, "terminal transition is degenerate at t={t}");
        Ok((r, v))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vp() -> NoiseSchedule {
        NoiseSchedule::default()
    }

    #[test]
    fn brownian_alpha_sigma() {
        let s = NoiseSchedule::brownian(1.0);
        assert_eq!(s.alpha_sigma(0.25).unwrap(), (1.0, 0.5));
    }

    #[test]
    fn vp_endpoints() {
        let s = vp();
        assert_eq!(s.alpha_sigma(0.0).unwrap(), (1.0, 0.0));
        let (alpha, sigma) = s.alpha_sigma(1.0).unwrap();
        // ∫₀¹ β = 0.1 + 19.9 / 2 = 10.05 by hand.
        let expected_alpha = (-5.025f64).exp();
        assert!((alpha - expected_alpha).abs() < 1e-15);
        assert!((alpha - 6.5716e-3).abs() < 1e-7);
        assert!((sigma - (1.0 - expected_alpha * expected_alpha).sqrt()).abs() < 1e-14);
        assert!((sigma - 0.9999784).abs() < 1e-7);
    }

    #[test]
    fn time_outside_horizon_is_domain_error() {
        assert!(matches!(vp().alpha_sigma(1.5), Err(Error::Domain(_))));
        assert!(matches!(vp().alpha_sigma(-0.1), Err(Error::Domain(_))));
    }

    #[test]
    fn vp_variance_preserving() {
        let s = vp();
        for i in 0..=1000 {
            let t = i as f64 / 1000.0;
            let (a, sg) = s.alpha_sigma(t).unwrap();
            assert!((a * a + sg * sg - 1.0).abs() < 1e-12, "t={t}");
        }
    }

    #[test]
    fn monotone_alpha_sigma() {
        for s in [vp(), NoiseSchedule::brownian(2.0)] {
            let mut prev = s.alpha_sigma(0.0).unwrap();
            for i in 1..=500 {
                let t = s.horizon * i as f64 / 500.0;
                let cur = s.alpha_sigma(t).unwrap();
                assert!(cur.0 <= prev.0 && cur.1 >= prev.1);
                prev = cur;
            }
        }
    }

    #[test]
    fn snr_ratio_examples() {
        let b = NoiseSchedule::brownian(1.0);
        assert!((b.snr_ratio(1.0, 0.25).unwrap() - 0.25).abs() < 1e-15);
        assert_eq!(vp().snr_ratio(0.7, 0.7).unwrap(), 1.0);
        assert_eq!(b.snr_ratio(0.7, 0.7).unwrap(), 1.0);
        assert_eq!(vp().snr_ratio(1.0, 0.0).unwrap(), 0.0);
        assert!(matches!(vp().snr_ratio(0.0, 0.0), Err(Error::Domain(_))));
        assert!(matches!(vp().snr_ratio(0.0, 0.5), Err(Error::Domain(_))));
    }

    #[test]
    fn bridge_endpoints() {
        for s in [vp(), NoiseSchedule::brownian(1.0)] {
            let end = s.bridge_coefficients(s.horizon).unwrap();
            assert_eq!((end.a, end.b, end.c), (1.0, 0.0, 0.0));
            let start = s.bridge_coefficients(0.0).unwrap();
            let (alpha0, _) = s.alpha_sigma(0.0).unwrap();
            assert_eq!((start.a, start.b, start.c), (0.0, alpha0, 0.0));
        }
    }

    #[test]
    fn brownian_bridge_midpoint() {
        let c = NoiseSchedule::brownian(1.0).bridge_coefficients(0.5).unwrap();
        assert!((c.a - 0.5).abs() < 1e-15);
        assert!((c.b - 0.5).abs() < 1e-15);
        assert!((c.c_sq() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn vp_mean_map_tends_to_identity_near_zero() {
        let s = vp();
        let mut prev_gap = f64::INFINITY;
        for t in [1e-1, 1e-2, 1e-3, 1e-4, 1e-6] {
            let c = s.bridge_coefficients(t).unwrap();
            let gap = (c.a + c.b - 1.0).abs();
            assert!(gap <= prev_gap);
            prev_gap = gap;
        }
        assert!(prev_gap < 1e-6);
    }

    #[test]
    fn brownian_terminal_transition() {
        let (r, v) = NoiseSchedule::brownian(1.0).terminal_transition(0.25).unwrap();
        assert_eq!(r, 1.0);
        assert!((v - 0.75).abs() < 1e-15);
        assert!(NoiseSchedule::brownian(1.0).terminal_transition(1.0).is_err());
    }

    #[test]
    fn validate_rejects_bad_clamp() {
        let mut s = vp();
        s.t_clamp_lo = 0.0;
        assert!(s.validate().is_err());
        assert!(vp().validate().is_ok());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn snr_ratio_cocycle(t1 in 0.01f64..1.0, t2 in 0.01f64..1.0, t3 in 0.01f64..1.0) {
                for s in [NoiseSchedule::default(), NoiseSchedule::brownian(1.0)] {
                    let lhs = s.snr_ratio(t1, t2).unwrap() * s.snr_ratio(t2, t3).unwrap();
                    let rhs = s.snr_ratio(t1, t3).unwrap();
                    prop_assert!((lhs - rhs).abs() <= 1e-10 * rhs.abs().max(1.0));
                }
            }

            #[test]
            fn bridge_variance_non_negative(t in 0.0f64..=1.0) {
                let c = NoiseSchedule::default().bridge_coefficients(t).unwrap();
                prop_assert!(c.c_sq() >= 0.0);
                prop_assert!(c.a >= 0.0 && c.b >= 0.0);
            }
        }
    }
}
