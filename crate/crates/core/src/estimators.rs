//! Weighted PATE estimators and Hájek moment estimators.

use serde::{Deserialize, Serialize};

use crate::data::{ArmCounts, PooledDataset};
use crate::error::{Error, Result};
use crate::scalar::{variance, Scalar};
use crate::weights::{estimate_weights, WeightConfig, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult<T> {
    pub tau_hat: T,
    pub n_used: ArmCounts,
    /// Label of the weight families that produced the estimate.
    pub weight_ref: String,
}

/// Hájek means, second moments and variances, indexed by arm (0 = control).
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PotentialOutcomeMoments<T> {
    pub mu: [T; 2],
    pub nu: [T; 2],
    /// Centered weighted sum of squares; never negative.
    pub var: [T; 2],
}

impl<T: Scalar> PotentialOutcomeMoments<T> {
    /// The `ν − μ²` form of the variance (may round below zero).
    pub fn var_uncentered(&self, arm: usize) -> T {
        self.nu[arm] - self.mu[arm] * self.mu[arm]
    }
}

/// Which estimate of var(Yᵃ) over the trial population to report.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum VarianceRoute {
    /// Inverse-propensity weighted (works for observational studies).
    #[default]
    Hajek,
    /// Pooled within-study sample variances; all studies randomized.
    PooledTrial,
}

fn check_alignment<T: Scalar>(ds: &PooledDataset<T>, v: &[T]) -> Result<()> {
    let expected = ds.study_units().len();
    if v.len() != expected {
        return Err(Error::Alignment { expected, got: v.len() });
    }
    Ok(())
}

/// (1/N₁) Σ wλγ A Y − (1/N₀) Σ wλγ (1 − A) Y over study units.
pub fn weighted_contrast<T: Scalar>(ds: &PooledDataset<T>, w: &[T], lambda: &[T], gamma: &[T]) -> Result<T> {
    check_alignment(ds, w)?;
    check_alignment(ds, lambda)?;
    check_alignment(ds, gamma)?;
    let (mut s1, mut s0) = (T::zero(), T::zero());
    let (mut n1, mut n0) = (0usize, 0usize);
    for (k, &i) in ds.study_units().iter().enumerate() {
        let term = w[k] * lambda[k] * gamma[k] * ds.outcome(i);
        if ds.treated(i) {
            s1 += term;
            n1 += 1;
        } else {
            s0 += term;
            n0 += 1;
        }
    }
    if n1 == 0 {
        return Err(Error::DegenerateArm { arm: 1 });
    }
    if n0 == 0 {
        return Err(Error::DegenerateArm { arm: 0 });
    }
    Ok(s1 / T::from_usize_lossy(n1) - s0 / T::from_usize_lossy(n0))
}

pub fn estimate_pate<T: Scalar>(ds: &PooledDataset<T>, ws: &WeightSet<T>) -> Result<EstimateResult<T>> {
    ws.ensure_usable()?;
    let tau_hat = weighted_contrast(ds, &ws.w, &ws.lambda, &ws.gamma)?;
    Ok(EstimateResult { tau_hat, n_used: ds.arm_counts(), weight_ref: ws.meta.label() })
}

/// Estimator with w⁻ʲ in place of w and the full-model λ, γ.
pub fn estimate_pate_leave_one_out<T: Scalar>(
    ds: &PooledDataset<T>,
    ws: &WeightSet<T>,
    w_minus: &[T],
) -> Result<EstimateResult<T>> {
    ws.ensure_usable()?;
    let tau_hat = weighted_contrast(ds, w_minus, &ws.lambda, &ws.gamma)?;
    Ok(EstimateResult { tau_hat, n_used: ds.arm_counts(), weight_ref: format!("{} (leave-one-out)", ws.meta.label()) })
}

/// Generalizes from study `s` alone: weights are refit on study `s` and the target.
pub fn estimate_pate_single_study<T: Scalar>(
    ds: &PooledDataset<T>,
    s: u32,
    cfg: &WeightConfig,
) -> Result<(EstimateResult<T>, WeightSet<T>, PooledDataset<T>)> {
    let sub = ds.restrict_to_study(s)?;
    let ws = estimate_weights(&sub, cfg)?;
    if !ws.meta.fits[0].1.converged && !cfg.allow_unconverged {
        return Err(Error::Overlap { study: s });
    }
    let est = estimate_pate(&sub, &ws)?;
    Ok((est, ws, sub))
}

/// Hájek IPW moments of Y¹ and Y⁰ over the pooled trial population.
///
/// `propensity` holds P̂(A = 1 | X, S) for each study unit.
pub fn hajek_moments<T: Scalar>(ds: &PooledDataset<T>, propensity: &[T]) -> Result<PotentialOutcomeMoments<T>> {
    check_alignment(ds, propensity)?;
    let units = ds.study_units();
    let mut mass = [T::zero(); 2];
    let mut s1 = [T::zero(); 2];
    let mut s2 = [T::zero(); 2];
    for (k, &i) in units.iter().enumerate() {
        let p = propensity[k];
        if !(p > T::zero() && p < T::one()) {
            return Err(Error::Domain(format!("propensity {p} at unit {i} is outside (0, 1)")));
        }
        let (a, pa) = if ds.treated(i) { (1, p) } else { (0, T::one() - p) };
        let y = ds.outcome(i);
        let h = T::one() / pa;
        mass[a] += h;
        s1[a] += h * y;
        s2[a] += h * y * y;
    }
    let mut mu = [T::zero(); 2];
    let mut nu = [T::zero(); 2];
    for a in 0..2 {
        if mass[a] <= T::zero() {
            return Err(Error::DegenerateArm { arm: a as u8 });
        }
        mu[a] = s1[a] / mass[a];
        nu[a] = s2[a] / mass[a];
    }
    let mut css = [T::zero(); 2];
    for (k, &i) in units.iter().enumerate() {
        let p = propensity[k];
        let (a, pa) = if ds.treated(i) { (1, p) } else { (0, T::one() - p) };
        let d = ds.outcome(i) - mu[a];
        css[a] += d * d / pa;
    }
    Ok(PotentialOutcomeMoments { mu, nu, var: [css[0] / mass[0], css[1] / mass[1]] })
}

/// Σ(nᵢ − 1) vᵢ / Σ(nᵢ − 1) from `(nᵢ, vᵢ)` pairs.
pub fn pooled_trial_variance<T: Scalar>(per_study: &[(usize, T)]) -> Result<T> {
    if per_study.is_empty() {
        return Err(Error::InsufficientData("no studies to pool".into()));
    }
    let (mut num, mut den) = (T::zero(), T::zero());
    for &(n, v) in per_study {
        if n < 2 {
            return Err(Error::InsufficientData(format!("arm with {n} unit(s); need at least 2 per study")));
        }
        let df = T::from_usize_lossy(n - 1);
        num += df * v;
        den += df;
    }
    Ok(num / den)
}

/// Pooled within-study sample variances of Y per arm, `[control, treated]`.
pub fn trial_arm_variances<T: Scalar>(ds: &PooledDataset<T>) -> Result<[T; 2]> {
    let mut out = [T::zero(); 2];
    for (a, slot) in out.iter_mut().enumerate() {
        let mut parts = Vec::new();
        for s in ds.study_ids() {
            let ys: Vec<T> = ds
                .study_units()
                .iter()
                .filter(|&&i| ds.study_of(i) == s && ds.treated(i) == (a == 1))
                .map(|&i| ds.outcome(i))
                .collect();
            parts.push((ys.len(), variance(&ys, 1)));
        }
        *slot = pooled_trial_variance(&parts)?;
    }
    Ok(out)
}

/// ĉov(w, τ) = τ̂_W − (μ̂₁ − μ̂₀).
pub fn estimate_cov_w_tau<T: Scalar>(tau_hat: T, moments: &PotentialOutcomeMoments<T>) -> T {
    tau_hat - (moments.mu[1] - moments.mu[0])
}

/// Point estimate together with the moments the sensitivity analysis needs.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateReport<T> {
    pub tau_hat: T,
    pub mu1: T,
    pub mu0: T,
    pub var_y1: T,
    pub var_y0: T,
    pub cov_w_tau: T,
    pub n1: usize,
    pub n0: usize,
}

pub fn estimate_report<T: Scalar>(
    ds: &PooledDataset<T>,
    ws: &WeightSet<T>,
    route: VarianceRoute,
) -> Result<EstimateReport<T>> {
    let est = estimate_pate(ds, ws)?;
    let m = hajek_moments(ds, &ws.propensity)?;
    let var = match route {
        VarianceRoute::Hajek => m.var,
        VarianceRoute::PooledTrial => trial_arm_variances(ds)?,
    };
    Ok(EstimateReport {
        tau_hat: est.tau_hat,
        mu1: m.mu[1],
        mu0: m.mu[0],
        var_y1: var[1],
        var_y0: var[0],
        cov_w_tau: estimate_cov_w_tau(est.tau_hat, &m),
        n1: est.n_used.n_treated,
        n0: est.n_used.n_control,
    })
}
