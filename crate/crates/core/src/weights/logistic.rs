//! Binary logistic regression by iteratively reweighted least squares.
//!
//! Columns are standardized before fitting (constant columns are dropped), so
//! the separation cap applies to coefficients on a common scale.

use serde::{Deserialize, Serialize};

use super::FitDiagnostics;
use crate::error::{Error, Result};
use crate::linalg::SquareMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogisticConfig {
    pub max_iter: usize,
    /// Convergence threshold on the largest absolute score component.
    pub tol: f64,
    /// Standardized coefficient magnitude treated as separation.
    pub coef_cap: f64,
    /// Refit with a small ridge penalty instead of failing on separation.
    pub ridge_fallback: bool,
    pub ridge: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        Self { max_iter: 100, tol: 1e-8, coef_cap: 30.0, ridge_fallback: false, ridge: 1e-4 }
    }
}

#[derive(Debug, Clone)]
pub struct LogisticFit<T> {
    /// Intercept followed by one coefficient per input column, original scale.
    pub coef: Vec<T>,
    /// Fitted P(y = 1 | x) per row.
    pub fitted: Vec<T>,
    pub diagnostics: FitDiagnostics,
}

#[inline]
pub(crate) fn expit<T: Scalar>(eta: T) -> T {
    if eta >= T::zero() {
        T::one() / (T::one() + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (T::one() + e)
    }
}

/// Fits `P(y = 1 | x) = expit(b0 + bᵀx)`.
///
/// `design` is row-major with `p` columns and one row per element of `y`.
/// `context` names the fit in error messages.
pub fn fit_logistic<T: Scalar>(
    design: &[T],
    p: usize,
    y: &[bool],
    cfg: &LogisticConfig,
    context: &str,
) -> Result<LogisticFit<T>> {
    match irls(design, p, y, cfg, T::zero(), context) {
        Err(Error::Separation { .. }) if cfg.ridge_fallback => {
            let mut fit = irls(design, p, y, cfg, T::lit(cfg.ridge), context)?;
            fit.diagnostics.condition_flag =
                Some(format!("separation in {context}; ridge penalty {} applied", cfg.ridge));
            Ok(fit)
        }
        other => other,
    }
}

fn irls<T: Scalar>(
    design: &[T],
    p: usize,
    y: &[bool],
    cfg: &LogisticConfig,
    ridge: T,
    context: &str,
) -> Result<LogisticFit<T>> {
    let n = y.len();
    assert_eq!(design.len(), n * p, "design shape mismatch");
    if n == 0 {
        return Err(Error::InsufficientData(format!("{context}: no observations")));
    }
    let n_t = T::from_usize_lossy(n);

    // Standardize; keep only non-constant columns.
    let mut centers = vec![T::zero(); p];
    let mut scales = vec![T::zero(); p];
    for j in 0..p {
        let m = (0..n).map(|i| design[i * p + j]).sum::<T>() / n_t;
        let v = (0..n).map(|i| (design[i * p + j] - m) * (design[i * p + j] - m)).sum::<T>() / n_t;
        centers[j] = m;
        scales[j] = v.sqrt();
    }
    let tiny = T::epsilon().sqrt();
    let active: Vec<usize> = (0..p).filter(|&j| scales[j] > tiny * (T::one() + centers[j].abs())).collect();
    let q = active.len() + 1;
    let mut z = vec![T::zero(); n * q];
    for i in 0..n {
        z[i * q] = T::one();
        for (k, &j) in active.iter().enumerate() {
            z[i * q + k + 1] = (design[i * p + j] - centers[j]) / scales[j];
        }
    }

    let yv: Vec<T> = y.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
    let ybar = yv.iter().copied().sum::<T>() / n_t;
    if ybar == T::zero() || ybar == T::one() {
        return Err(Error::Separation { context: format!("{context} (outcome constant)"), cap: cfg.coef_cap });
    }
    let mut beta = vec![T::zero(); q];
    beta[0] = (ybar / (T::one() - ybar)).ln();

    let tol = T::lit(cfg.tol).max(T::epsilon() * T::lit(1e3) * n_t);
    let cap = T::lit(cfg.coef_cap);
    let mut eta = vec![T::zero(); n];
    let mut mu = vec![T::zero(); n];
    let objective = |beta: &[T], eta: &mut [T], mu: &mut [T]| -> T {
        let mut ll = T::zero();
        for i in 0..n {
            let e: T = (0..q).map(|k| z[i * q + k] * beta[k]).sum();
            eta[i] = e;
            // One exponential serves both expit and log(1 + exp(e)).
            let t = (-e.abs()).exp();
            mu[i] = if e >= T::zero() { T::one() / (T::one() + t) } else { t / (T::one() + t) };
            ll += yv[i] * e - (e.max(T::zero()) + t.ln_1p());
        }
        let pen: T = beta.iter().skip(1).map(|&b| b * b).sum::<T>() * ridge / T::lit(2.0);
        -(ll - pen)
    };
    let mut obj = objective(&beta, &mut eta, &mut mu);
    let mut converged = false;
    let mut grad_norm = T::infinity();
    let mut iterations = 0;
    for it in 0..cfg.max_iter {
        iterations = it + 1;
        let mut score = vec![T::zero(); q];
        let mut info = SquareMatrix::zeros(q);
        for i in 0..n {
            let r = yv[i] - mu[i];
            let wgt = mu[i] * (T::one() - mu[i]);
            let zi = &z[i * q..(i + 1) * q];
            for a in 0..q {
                score[a] += zi[a] * r;
                let wa = wgt * zi[a];
                for b in a..q {
                    info.add_to(a, b, wa * zi[b]);
                }
            }
        }
        for k in 1..q {
            score[k] -= ridge * beta[k];
            info.add_to(k, k, ridge);
        }
        info.symmetrize_from_upper();
        grad_norm = score.iter().fold(T::zero(), |m, s| m.max(s.abs()));
        if grad_norm < tol {
            converged = true;
            iterations = it;
            break;
        }
        let step = match info.cholesky() {
            Ok(ch) => ch.solve(&score),
            Err(_) => {
                let mut jittered = info.clone();
                jittered.add_diagonal(T::lit(1e-8) * n_t);
                jittered.cholesky()?.solve(&score)
            }
        };
        // Step halving keeps the objective monotone.
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..30 {
            let cand: Vec<T> = beta.iter().zip(&step).map(|(&b, &d)| b + t * d).collect();
            let c_obj = objective(&cand, &mut eta, &mut mu);
            if c_obj <= obj + T::epsilon() * obj.abs().max(T::one()) * T::lit(10.0) {
                beta = cand;
                obj = c_obj;
                accepted = true;
                break;
            }
            t = t / T::lit(2.0);
        }
        if !accepted {
            obj = objective(&beta, &mut eta, &mut mu);
        }
        if beta.iter().skip(1).any(|b| b.abs() > cap) || beta[0].abs() > cap * T::lit(4.0) {
            return Err(Error::Separation { context: context.to_string(), cap: cfg.coef_cap });
        }
        if !accepted {
            break;
        }
    }

    // Back to the original scale.
    let mut coef = vec![T::zero(); p + 1];
    let mut intercept = beta[0];
    for (k, &j) in active.iter().enumerate() {
        let b = beta[k + 1] / scales[j];
        coef[j + 1] = b;
        intercept -= b * centers[j];
    }
    coef[0] = intercept;
    Ok(LogisticFit {
        coef,
        fitted: mu,
        diagnostics: FitDiagnostics {
            converged,
            iterations,
            gradient_norm: grad_norm.as_f64(),
            condition_flag: None,
        },
    })
}
