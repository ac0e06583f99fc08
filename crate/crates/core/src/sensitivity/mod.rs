//! Sensitivity parameters (R²_ε, ρ_ετ, σ²_τ) and the bias algebra built on them.

mod benchmark;
mod contour;

use serde::{Deserialize, Serialize};

pub use benchmark::{benchmark_modifiers, benchmark_row, mrems_from_bias, BenchmarkRow};
pub use contour::{contour_grid, significance_border, ContourGrid, GridSpec};

use crate::error::{Error, Result};
use crate::estimators::EstimateReport;
use crate::scalar::{sample_variance, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityParams<T> {
    pub r2_eps: T,
    pub rho: T,
    pub sigma2_tau: T,
}

impl<T: Scalar> SensitivityParams<T> {
    pub fn new(r2_eps: T, rho: T, sigma2_tau: T) -> Self {
        Self { r2_eps, rho, sigma2_tau }
    }
}

/// Bias of the weighted estimator implied by the sensitivity parameters.
///
/// For R² < 1 this is ρ·sqrt(R²/(1 − R²)·var_w·σ²). At exactly R² = 1 the
/// caller must pass var(w*) as `var_w`, giving ρ·sqrt(var(w*)·σ²).
pub fn bias_from_params<T: Scalar>(p: SensitivityParams<T>, var_w: T) -> Result<T> {
    let SensitivityParams { r2_eps: r2, rho, sigma2_tau: s2 } = p;
    if !(r2 >= T::zero() && r2 <= T::one()) {
        return Err(Error::Domain(format!("R² = {r2} outside [0, 1]")));
    }
    if !(rho >= -T::one() && rho <= T::one()) {
        return Err(Error::Domain(format!("ρ = {rho} outside [-1, 1]")));
    }
    if !(s2 >= T::zero()) || !(var_w >= T::zero()) {
        return Err(Error::Domain("σ²_τ and var(w) must be nonnegative".into()));
    }
    if r2 == T::one() {
        return Ok(rho * (var_w * s2).sqrt());
    }
    let gap = T::one() - r2;
    if gap < T::lit(1e-12) {
        return Err(Error::Branch);
    }
    Ok(rho * (r2 / gap * var_w * s2).sqrt())
}

pub fn adjusted_estimate<T: Scalar>(tau_hat: T, p: SensitivityParams<T>, var_w: T) -> Result<T> {
    Ok(tau_hat - bias_from_params(p, var_w)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SigmaMode {
    /// (sd₁ + sd₀)², the Cauchy–Schwarz bound.
    Sharp,
    /// v₁ + v₀.
    #[default]
    Conservative,
}

pub fn sigma2_tau_bound<T: Scalar>(var_y1: T, var_y0: T, mode: SigmaMode) -> Result<T> {
    if !(var_y1 >= T::zero()) || !(var_y0 >= T::zero()) {
        return Err(Error::Domain(format!("negative potential-outcome variance ({var_y1}, {var_y0})")));
    }
    Ok(match mode {
        SigmaMode::Sharp => var_y1 + var_y0 + T::lit(2.0) * (var_y1 * var_y0).sqrt(),
        SigmaMode::Conservative => var_y1 + var_y0,
    })
}

/// ±sqrt(1 − cov²/(σ²·var_w)), the admissible range of ρ_ετ.
pub fn rho_bounds<T: Scalar>(cov_w_tau: T, sigma2_tau_max: T, var_w: T) -> Result<(T, T)> {
    if !(sigma2_tau_max > T::zero()) || !(var_w > T::zero()) {
        return Err(Error::Domain("σ²_τ,max and var(w) must be positive".into()));
    }
    let ratio = cov_w_tau * cov_w_tau / (sigma2_tau_max * var_w);
    if ratio > T::one() + T::lit(1e-12) {
        return Err(Error::Inconsistent(format!(
            "cov(w, τ)² exceeds σ²_τ,max·var(w) by a factor {ratio}; the variance bound is violated"
        )));
    }
    let r = (T::one() - ratio).max(T::zero()).sqrt();
    Ok((-r, r))
}

/// RV_q = ½(sqrt(a² + 4a) − a) with a = q²τ̂²/(σ²·var_w).
pub fn robustness_value<T: Scalar>(tau_hat: T, sigma2_tau_max: T, var_w: T, q: T) -> Result<T> {
    if !(q >= T::zero()) {
        return Err(Error::Domain(format!("q = {q} must be nonnegative")));
    }
    let den = sigma2_tau_max * var_w;
    if !(den > T::zero()) {
        return Err(Error::Domain("σ²_τ,max·var(w) must be positive".into()));
    }
    let a = q * q * tau_hat * tau_hat / den;
    if a == T::zero() {
        return Ok(T::zero());
    }
    // Algebraically equal to the textbook form, without its cancellation for large a.
    let two = T::lit(2.0);
    Ok(two / (T::one() + (T::one() + T::lit(4.0) / a).sqrt()))
}

/// RV at the significance threshold: q = threshold / |τ̂|.
pub fn robustness_value_alpha<T: Scalar>(tau_hat: T, sigma2_tau_max: T, var_w: T, threshold: T) -> Result<T> {
    if tau_hat == T::zero() {
        return Err(Error::Domain("τ̂ = 0 has no significance robustness value".into()));
    }
    robustness_value(tau_hat, sigma2_tau_max, var_w, threshold / tau_hat.abs())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivitySummary<T> {
    pub tau_hat: T,
    pub sigma2_tau_max: T,
    pub sigma_mode: SigmaMode,
    pub rho_bounds: (T, T),
    pub var_w: T,
    /// (q, RV_q) pairs.
    pub rv: Vec<(T, T)>,
    pub rv_alpha: Option<T>,
}

/// σ² bound, ρ bounds and robustness values for one estimate.
///
/// `w` are the normalized generalization weights over study units.
pub fn summarize<T: Scalar>(
    report: &EstimateReport<T>,
    w: &[T],
    mode: SigmaMode,
    qs: &[T],
    threshold: Option<T>,
) -> Result<SensitivitySummary<T>> {
    let s2 = sigma2_tau_bound(report.var_y1, report.var_y0, mode)?;
    let var_w = sample_variance(w);
    let rho_bounds = rho_bounds(report.cov_w_tau, s2, var_w)?;
    let rv = qs
        .iter()
        .map(|&q| robustness_value(report.tau_hat, s2, var_w, q).map(|r| (q, r)))
        .collect::<Result<Vec<_>>>()?;
    let rv_alpha = match threshold {
        Some(t) if report.tau_hat != T::zero() => Some(robustness_value_alpha(report.tau_hat, s2, var_w, t)?),
        _ => None,
    };
    Ok(SensitivitySummary {
        tau_hat: report.tau_hat,
        sigma2_tau_max: s2,
        sigma_mode: mode,
        rho_bounds,
        var_w,
        rv,
        rv_alpha,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p(r2: f64, rho: f64, s2: f64) -> SensitivityParams<f64> {
        SensitivityParams::new(r2, rho, s2)
    }

    #[test]
    fn zero_rho_means_zero_bias() {
        assert_eq!(bias_from_params(p(0.4, 0.0, 9.0), 2.0).unwrap(), 0.0);
        assert_eq!(adjusted_estimate(3.5, p(0.4, 0.0, 9.0), 2.0).unwrap(), 3.5);
    }

    #[test]
    fn exact_one_uses_limit_branch() {
        assert!((bias_from_params(p(1.0, 0.5, 4.0), 9.0).unwrap() - 3.0).abs() < 1e-15);
        let near = 1.0 - 1e-14;
        assert!(matches!(bias_from_params(p(near, 0.5, 4.0), 9.0), Err(Error::Branch)));
        assert!(matches!(bias_from_params(p(1.2, 0.5, 4.0), 9.0), Err(Error::Domain(_))));
    }

    #[test]
    fn nullifying_pairs_reproduce_estimate() {
        // var(w) back-solved from the first pair; both pairs should then give |bias| ≈ 454.84.
        let sigma = 767.1_f64;
        let var_w = 0.862;
        let b1 = bias_from_params(p(0.5, -0.639, sigma * sigma), var_w).unwrap();
        assert!((b1 + 454.84).abs() / 454.84 < 0.005, "{b1}");
        let b2 = bias_from_params(p(0.867, 0.25, sigma * sigma), var_w).unwrap();
        assert!(b2 > 0.0);
        assert!((b2 - 454.84).abs() / 454.84 < 0.005, "{b2}");
    }

    #[test]
    fn sigma_bounds() {
        assert_eq!(sigma2_tau_bound(1.0, 1.0, SigmaMode::Sharp).unwrap(), 4.0);
        assert_eq!(sigma2_tau_bound(1.0, 1.0, SigmaMode::Conservative).unwrap(), 2.0);
        assert_eq!(sigma2_tau_bound(3.0, 0.0, SigmaMode::Sharp).unwrap(), 3.0);
        assert_eq!(sigma2_tau_bound(3.0, 0.0, SigmaMode::Conservative).unwrap(), 3.0);
        assert!(sigma2_tau_bound(-1.0, 0.0, SigmaMode::Sharp).is_err());
    }

    #[test]
    fn rho_bound_edges() {
        assert_eq!(rho_bounds(0.0, 2.0, 3.0).unwrap(), (-1.0, 1.0));
        assert_eq!(rho_bounds(2.0_f64, 2.0, 2.0).unwrap(), (-0.0, 0.0));
        assert!(matches!(rho_bounds(3.0, 2.0, 3.0), Err(Error::Inconsistent(_))));
    }

    #[test]
    fn robustness_value_cases() {
        assert_eq!(robustness_value(5.0, 1.0, 1.0, 0.0).unwrap(), 0.0);
        // a = 0.4168 when τ̂² = 0.4168 and σ²·var_w = 1.
        let rv = robustness_value(0.4168_f64.sqrt(), 1.0, 1.0, 1.0).unwrap();
        assert!((rv - 0.470).abs() < 5e-4, "{rv}");
        assert!((rv * rv / (1.0 - rv) - 0.4168).abs() < 1e-10);
        assert!(robustness_value(1.0, 0.0, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn rv_inverse_identity(tau in -1e3..1e3f64, s2 in 1e-2..1e6f64, vw in 1e-3..10.0f64, q in 0.0..3.0f64) {
            let rv = robustness_value(tau, s2, vw, q).unwrap();
            let a = q * q * tau * tau / (s2 * vw);
            prop_assert!((0.0..1.0).contains(&rv));
            prop_assert!((rv * rv / (1.0 - rv) - a).abs() <= 1e-10 * (1.0 + a));
        }

        #[test]
        fn bias_is_odd_in_rho(r2 in 0.0..0.99f64, rho in -1.0..1.0f64, s2 in 0.0..1e4f64, vw in 0.0..5.0f64) {
            let b = bias_from_params(p(r2, rho, s2), vw).unwrap();
            let c = bias_from_params(p(r2, -rho, s2), vw).unwrap();
            prop_assert_eq!(b, -c);
        }

        #[test]
        fn bias_increases_with_r2(r2 in 0.0..0.98f64, d in 1e-4..0.01f64, rho in 0.01..1.0f64, s2 in 0.1..1e4f64, vw in 0.01..5.0f64) {
            let lo = bias_from_params(p(r2, rho, s2), vw).unwrap();
            let hi = bias_from_params(p(r2 + d, rho, s2), vw).unwrap();
            prop_assert!(hi > lo);
        }

        #[test]
        fn rho_bounds_shrink_with_cov(c1 in 0.0..1.0f64, c2 in 0.0..1.0f64, s2 in 0.1..10.0f64, vw in 0.1..10.0f64) {
            let scale = (s2 * vw).sqrt();
            let (lo, hi) = (c1.min(c2) * scale, c1.max(c2) * scale);
            let (_, u_lo) = rho_bounds(lo, s2, vw).unwrap();
            let (l_hi, u_hi) = rho_bounds(hi, s2, vw).unwrap();
            prop_assert!(u_hi <= u_lo);
            prop_assert_eq!(l_hi, -u_hi);
        }
    }
}
