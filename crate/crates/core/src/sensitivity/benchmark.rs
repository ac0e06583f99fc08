//! Formal benchmarking against observed modifiers (leave-one-out weights).

use serde::Serialize;

use crate::data::PooledDataset;
use crate::error::Result;
use crate::estimators::estimate_pate_leave_one_out;
use crate::scalar::{sample_variance, Scalar};
use crate::weights::{leave_one_out_weights, WeightConfig, WeightSet};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchmarkRow<T> {
    pub modifier: String,
    pub r2_minus_j: T,
    /// Not clamped; see `rho_out_of_range`.
    pub rho_minus_j: T,
    pub bias_est: T,
    pub mrems: T,
    pub mrems_alpha: T,
    pub tau_minus_j: T,
    /// False when dropping the modifier leaves the weights unchanged.
    pub informative: bool,
    pub rho_out_of_range: bool,
}

/// MREMS = τ̂ / bias.
pub fn mrems_from_bias<T: Scalar>(tau_hat: T, bias: T) -> T {
    tau_hat / bias
}

/// One benchmarking row from the full and leave-one-out estimates.
///
/// `var_eps` is the sample variance of w⁻ʲ − w and `var_w` that of w.
pub fn benchmark_row<T: Scalar>(
    modifier: &str,
    tau_hat: T,
    tau_minus_j: T,
    var_w: T,
    var_eps: T,
    sigma2_tau_max: T,
    threshold: T,
) -> BenchmarkRow<T> {
    if var_eps <= T::zero() {
        return BenchmarkRow {
            modifier: modifier.to_string(),
            r2_minus_j: T::zero(),
            rho_minus_j: T::zero(),
            bias_est: T::zero(),
            mrems: T::infinity(),
            mrems_alpha: T::infinity(),
            tau_minus_j,
            informative: false,
            rho_out_of_range: false,
        };
    }
    let r2 = var_eps / var_w;
    let rho = (tau_minus_j - tau_hat) / (sigma2_tau_max * var_eps).sqrt();
    let bias = rho * (sigma2_tau_max * r2 / (T::one() + r2)).sqrt();
    BenchmarkRow {
        modifier: modifier.to_string(),
        r2_minus_j: r2,
        rho_minus_j: rho,
        bias_est: bias,
        mrems: mrems_from_bias(tau_hat, bias),
        mrems_alpha: threshold / bias,
        tau_minus_j,
        informative: true,
        rho_out_of_range: rho.abs() > T::one(),
    }
}

/// Benchmarks every observed modifier by refitting w without it.
pub fn benchmark_modifiers<T: Scalar>(
    ds: &PooledDataset<T>,
    ws: &WeightSet<T>,
    tau_hat: T,
    sigma2_tau_max: T,
    threshold: T,
    cfg: &WeightConfig,
) -> Result<Vec<BenchmarkRow<T>>> {
    let var_w = sample_variance(&ws.w);
    let mut rows = Vec::with_capacity(ds.modifiers().len());
    for m in ds.modifiers() {
        let (w_minus, _) = leave_one_out_weights(ds, &m.name, ws.meta.generalization, cfg)?;
        let est = estimate_pate_leave_one_out(ds, ws, &w_minus)?;
        let eps: Vec<T> = w_minus.iter().zip(&ws.w).map(|(&a, &b)| a - b).collect();
        rows.push(benchmark_row(&m.name, tau_hat, est.tau_hat, var_w, sample_variance(&eps), sigma2_tau_max, threshold));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn printed_rows_are_division_identities() {
        let tau = -454.84_f64;
        assert!((mrems_from_bias(tau, 6.42) - -70.83).abs() / 70.83 < 0.005);
        assert!((mrems_from_bias(tau, 0.95) - -476.77).abs() / 476.77 < 0.01);
    }

    #[test]
    fn row_algebra_by_hand() {
        // var_eps = 0.25, var_w = 1 → R² = 0.25; σ² = 4; Δτ = 0.5 → ρ = 0.5/sqrt(1) = 0.5.
        let r = benchmark_row::<f64>("v", 2.0, 2.5, 1.0, 0.25, 4.0, 1.0);
        assert!((r.r2_minus_j - 0.25).abs() < 1e-15);
        assert!((r.rho_minus_j - 0.5).abs() < 1e-15);
        let bias = 0.5 * (4.0_f64 * 0.25 / 1.25).sqrt();
        assert!((r.bias_est - bias).abs() < 1e-15);
        assert!((r.mrems * r.bias_est - 2.0).abs() < 1e-14);
        assert!((r.mrems_alpha * r.bias_est - 1.0).abs() < 1e-14);
        assert!(r.informative && !r.rho_out_of_range);
    }

    #[test]
    fn irrelevant_modifier_is_flagged() {
        let r = benchmark_row::<f64>("v", 2.0, 2.0, 1.0, 0.0, 4.0, 1.0);
        assert!(!r.informative);
        assert!(r.mrems.is_infinite());
    }

    #[test]
    fn large_shift_keeps_raw_rho() {
        let r = benchmark_row("v", 0.0, 10.0, 1.0, 0.01, 1.0, 1.0);
        assert!(r.rho_minus_j > 1.0 && r.rho_out_of_range);
    }
}
