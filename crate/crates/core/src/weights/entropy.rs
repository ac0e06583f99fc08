//! Entropy balancing on first moments.
//!
//! Study-unit weights take the form `w_i ∝ exp(θᵀ V_i)`; θ solves the convex
//! dual `min_θ log Σ_i exp(θᵀ (V_i − m))`, whose stationarity condition is
//! exactly that the weighted study means of V equal the target means `m`.

use serde::{Deserialize, Serialize};

use super::FitDiagnostics;
use crate::linalg::SquareMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    pub max_iter: usize,
    /// Largest allowed |weighted study mean − target mean| per column.
    pub tol: f64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self { max_iter: 200, tol: 1e-10 }
    }
}

/// Balances the rows of `study` (row-major, `p` columns) to `target_means`.
///
/// Returns weights normalized to mean 1 and the fit diagnostics. With `p = 0`
/// the weights are identically 1.
pub fn entropy_balance<T: Scalar>(
    study: &[T],
    p: usize,
    target_means: &[T],
    cfg: &BalanceConfig,
) -> (Vec<T>, FitDiagnostics) {
    let n = if p == 0 { 0 } else { study.len() / p };
    if p == 0 || n == 0 {
        let n_rows = if p == 0 { 0 } else { n };
        return (vec![T::one(); n_rows], FitDiagnostics::trivial());
    }
    let n_t = T::from_usize_lossy(n);
    let tol = T::lit(cfg.tol).max(T::epsilon() * T::lit(100.0));

    // Centre on the target means and scale by the study SD.
    let mut scales = vec![T::one(); p];
    let mut infeasible = false;
    let mut active = Vec::with_capacity(p);
    for j in 0..p {
        let m = (0..n).map(|i| study[i * p + j]).sum::<T>() / n_t;
        let v = (0..n).map(|i| (study[i * p + j] - m) * (study[i * p + j] - m)).sum::<T>() / n_t;
        let sd = v.sqrt();
        if sd > T::epsilon().sqrt() * (T::one() + m.abs()) {
            scales[j] = sd;
            active.push(j);
        } else if (m - target_means[j]).abs() > tol {
            // Constant in the study but not at the target mean: no solution.
            infeasible = true;
        }
    }
    let q = active.len();
    let mut z = vec![T::zero(); n * q];
    for i in 0..n {
        for (k, &j) in active.iter().enumerate() {
            z[i * q + k] = (study[i * p + j] - target_means[j]) / scales[j];
        }
    }

    let mut theta = vec![T::zero(); q];
    let mut probs = vec![T::zero(); n];
    // log Σ exp(θᵀz) with max-shift; fills `probs` with the softmax.
    let evaluate = |theta: &[T], probs: &mut [T]| -> T {
        let mut max = T::neg_infinity();
        for i in 0..n {
            let e: T = (0..q).map(|k| z[i * q + k] * theta[k]).sum();
            probs[i] = e;
            if e > max {
                max = e;
            }
        }
        let mut total = T::zero();
        for pr in probs.iter_mut() {
            *pr = (*pr - max).exp();
            total += *pr;
        }
        for pr in probs.iter_mut() {
            *pr /= total;
        }
        max + total.ln()
    };
    let mut obj = evaluate(&theta, &mut probs);
    let mut converged = false;
    let mut iterations = 0;
    let mut grad_norm = T::infinity();
    let max_dev = |grad: &[T]| -> T {
        active.iter().enumerate().fold(T::zero(), |m, (k, &j)| m.max((grad[k] * scales[j]).abs()))
    };
    if q == 0 {
        converged = !infeasible;
        grad_norm = T::zero();
    } else {
        for it in 0..cfg.max_iter {
            iterations = it;
            let mut grad = vec![T::zero(); q];
            for i in 0..n {
                for k in 0..q {
                    grad[k] += probs[i] * z[i * q + k];
                }
            }
            grad_norm = max_dev(&grad);
            if grad_norm < tol {
                converged = !infeasible;
                break;
            }
            let mut hess = SquareMatrix::zeros(q);
            for i in 0..n {
                let zi = &z[i * q..(i + 1) * q];
                for a in 0..q {
                    let pa = probs[i] * zi[a];
                    for b in a..q {
                        hess.add_to(a, b, pa * zi[b]);
                    }
                }
            }
            for a in 0..q {
                for b in a..q {
                    hess.add_to(a, b, -grad[a] * grad[b]);
                }
            }
            hess.symmetrize_from_upper();
            let step = match hess.cholesky() {
                Ok(ch) => ch.solve(&grad),
                Err(_) => {
                    let mut h = hess.clone();
                    h.add_diagonal(T::lit(1e-10));
                    match h.cholesky() {
                        Ok(ch) => ch.solve(&grad),
                        Err(_) => grad.clone(),
                    }
                }
            };
            let slope: T = grad.iter().zip(&step).map(|(g, s)| *g * *s).sum();
            let mut t = T::one();
            let mut accepted = false;
            let mut cand_probs = vec![T::zero(); n];
            for _ in 0..50 {
                let cand: Vec<T> = theta.iter().zip(&step).map(|(&th, &d)| th - t * d).collect();
                let c_obj = evaluate(&cand, &mut cand_probs);
                if c_obj.is_finite() && c_obj <= obj - T::lit(1e-4) * t * slope + T::epsilon() * obj.abs() * T::lit(10.0) {
                    theta = cand;
                    obj = c_obj;
                    std::mem::swap(&mut probs, &mut cand_probs);
                    accepted = true;
                    break;
                }
                t = t / T::lit(2.0);
            }
            iterations = it + 1;
            if !accepted {
                break;
            }
        }
        if !converged {
            let mut grad = vec![T::zero(); q];
            for i in 0..n {
                for k in 0..q {
                    grad[k] += probs[i] * z[i * q + k];
                }
            }
            grad_norm = max_dev(&grad);
            converged = grad_norm < tol && !infeasible;
        }
    }

    let w: Vec<T> = probs.iter().map(|&pr| pr * n_t).collect();
    let max_w = w.iter().fold(T::zero(), |m, &x| m.max(x));
    let condition_flag = if infeasible {
        Some("target mean outside the range of a constant study column".to_string())
    } else if max_w > T::lit(50.0) {
        Some(format!("extreme generalization weight {:.3}", max_w.as_f64()))
    } else {
        None
    };
    (
        w,
        FitDiagnostics { converged, iterations, gradient_norm: grad_norm.as_f64(), condition_flag },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn already_balanced_gives_unit_weights() {
        let study: [f64; 4] = [0.0, 1.0, 2.0, 3.0];
        let (w, d) = entropy_balance(&study, 1, &[1.5], &BalanceConfig::default());
        assert!(d.converged);
        for x in w {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn binary_modifier_hand_solution() {
        // Study split 50/50, target 80/20: w = 0.8/0.5 for V=1 and 0.2/0.5 for V=0.
        let study: [f64; 6] = [1.0, 1.0, 0.0, 0.0, 1.0, 0.0];
        let (w, d) = entropy_balance(&study, 1, &[0.8], &BalanceConfig::default());
        assert!(d.converged);
        for (x, v) in w.iter().zip(&study) {
            let expected = if *v == 1.0 { 1.6 } else { 0.4 };
            assert!((x - expected).abs() < 1e-10, "{x} vs {expected}");
        }
    }

    #[test]
    fn target_outside_hull_does_not_converge() {
        let study = [0.0, 1.0, 0.5, 0.2];
        let (_, d) = entropy_balance(&study, 1, &[2.0], &BalanceConfig::default());
        assert!(!d.converged);
    }

    #[test]
    fn constant_column_away_from_target_is_infeasible() {
        let study = [1.0, 0.0, 1.0, 1.0, 1.0, 0.5];
        let (_, d) = entropy_balance(&study, 2, &[1.0, 0.3], &BalanceConfig::default());
        assert!(d.converged);
        let (_, d) = entropy_balance(&study, 2, &[0.5, 0.3], &BalanceConfig::default());
        assert!(!d.converged);
    }
}
