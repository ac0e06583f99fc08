//! Multivariate Wald test for agreement of per-study generalized estimates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::Scalar;
pub use crate::special::chi2_sf;

/// Largest tolerated condition number of CΣCᵀ.
pub const CONDITION_LIMIT: f64 = 1e12;

/// Significance levels worth reporting against, in increasing order.
pub const SUGGESTED_ALPHAS: [f64; 3] = [0.05, 0.1, 0.15];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaldInput<T> {
    pub estimates: Vec<T>,
    pub sds: Vec<T>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WaldResult<T> {
    pub statistic: T,
    pub df: usize,
    pub p_value: f64,
    pub estimates: Vec<T>,
    pub sds: Vec<T>,
}

/// (k−1)×k contrast of the first study against each other study.
pub fn contrast_matrix<T: Scalar>(k: usize) -> Result<Vec<Vec<T>>> {
    if k < 2 {
        return Err(Error::Domain(format!("contrast needs k ≥ 2 studies, got {k}")));
    }
    Ok((0..k - 1)
        .map(|i| {
            let mut row = vec![T::zero(); k];
            row[0] = T::one();
            row[i + 1] = -T::one();
            row
        })
        .collect())
}

pub fn wald_test<T: Scalar>(input: &WaldInput<T>) -> Result<WaldResult<T>> {
    let k = input.estimates.len();
    if input.sds.len() != k {
        return Err(Error::Alignment { expected: k, got: input.sds.len() });
    }
    if input.estimates.iter().chain(&input.sds).any(|v| !v.is_finite()) {
        return Err(Error::Domain("estimates and sds must be finite".into()));
    }
    if input.sds.iter().any(|&s| s < T::zero()) {
        return Err(Error::Domain("standard deviations must be nonnegative".into()));
    }
    let c = contrast_matrix::<T>(k)?;
    let var: Vec<T> = input.sds.iter().map(|&s| s * s).collect();
    // CΣCᵀ with Σ diagonal: Σ₀ everywhere plus Σ_{i+1} on the diagonal.
    let m = k - 1;
    let mut cov = SquareMatrix::zeros(m);
    for i in 0..m {
        for j in 0..m {
            let v = var[0] + if i == j { var[i + 1] } else { T::zero() };
            cov.set(i, j, v);
        }
    }
    let diff: Vec<T> = c.iter().map(|row| row.iter().zip(&input.estimates).map(|(&a, &b)| a * b).sum()).collect();
    let cond = cov.condition_number();
    if !(cond.as_f64() <= CONDITION_LIMIT) {
        return Err(Error::Singular(format!("contrast covariance condition number {cond} exceeds {CONDITION_LIMIT:e}")));
    }
    let statistic = cov.cholesky()?.quadratic_form_inverse(&diff);
    Ok(WaldResult {
        statistic,
        df: m,
        p_value: chi2_sf(statistic.as_f64(), m)?,
        estimates: input.estimates.clone(),
        sds: input.sds.clone(),
    })
}
