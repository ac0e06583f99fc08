//! Generalization (w), combination (λ) and de-confounding (γ) weights.
//!
//! All per-unit vectors in this module are aligned with
//! [`PooledDataset::study_units`].

mod entropy;
mod logistic;

use serde::{Deserialize, Serialize};

pub use entropy::{entropy_balance, BalanceConfig};
pub use logistic::{fit_logistic, LogisticConfig, LogisticFit};
pub(crate) use logistic::expit;

use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Convergence record of one fitted weight model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    pub gradient_norm: f64,
    pub condition_flag: Option<String>,
}

impl FitDiagnostics {
    pub(crate) fn trivial() -> Self {
        Self { converged: true, iterations: 0, gradient_norm: 0.0, condition_flag: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum GeneralizationMethod {
    #[default]
    EntropyBalancing,
    Logistic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DeconfoundingMethod {
    #[default]
    LogisticPerStudy,
    /// γ ≡ 1, for randomized trials.
    Constant,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WeightConfig {
    pub generalization: GeneralizationMethod,
    pub deconfounding: DeconfoundingMethod,
    pub logistic: LogisticConfig,
    pub balance: BalanceConfig,
    /// Fitted propensities outside `[ε, 1 − ε]` raise a warning (no clipping).
    pub propensity_epsilon: f64,
    /// Let downstream estimators use weights whose fit did not converge.
    pub allow_unconverged: bool,
}

impl Default for WeightConfig {
    fn default() -> Self {
        Self {
            generalization: GeneralizationMethod::EntropyBalancing,
            deconfounding: DeconfoundingMethod::LogisticPerStudy,
            logistic: LogisticConfig::default(),
            balance: BalanceConfig::default(),
            propensity_epsilon: 0.01,
            allow_unconverged: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightMeta {
    pub generalization: GeneralizationMethod,
    pub deconfounding: DeconfoundingMethod,
    /// (model label, diagnostics) for every fit that produced the weights.
    pub fits: Vec<(String, FitDiagnostics)>,
    pub allow_unconverged: bool,
}

impl WeightMeta {
    pub fn converged(&self) -> bool {
        self.fits.iter().all(|(_, d)| d.converged)
    }

    pub fn warnings(&self) -> Vec<String> {
        self.fits
            .iter()
            .filter_map(|(label, d)| d.condition_flag.as_ref().map(|f| format!("{label}: {f}")))
            .collect()
    }

    pub fn label(&self) -> String {
        format!("{:?}/{:?}", self.generalization, self.deconfounding)
    }
}

/// Weights for every study unit, aligned with `study_units()`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WeightSet<T> {
    pub w: Vec<T>,
    pub lambda: Vec<T>,
    pub gamma: Vec<T>,
    /// Fitted P(A = 1 | X, S) used for γ and the Hájek moments.
    pub propensity: Vec<T>,
    pub meta: WeightMeta,
}

impl<T: Scalar> WeightSet<T> {
    pub fn len(&self) -> usize {
        self.w.len()
    }

    pub fn is_empty(&self) -> bool {
        self.w.is_empty()
    }

    /// Fails unless every fit converged or the override is set.
    pub fn ensure_usable(&self) -> Result<()> {
        if self.meta.converged() || self.meta.allow_unconverged {
            Ok(())
        } else {
            let bad: Vec<&str> =
                self.meta.fits.iter().filter(|(_, d)| !d.converged).map(|(l, _)| l.as_str()).collect();
            Err(Error::NotConverged(bad.join(", ")))
        }
    }

    /// Copy with the generalization weights replaced (λ and γ kept).
    pub fn with_generalization(&self, w: Vec<T>) -> Result<Self> {
        if w.len() != self.w.len() {
            return Err(Error::Alignment { expected: self.w.len(), got: w.len() });
        }
        Ok(Self { w, ..self.clone() })
    }

    /// `unit_index,w,lambda,gamma` rows, unit_index being the dataset row.
    pub fn write_csv<W: std::io::Write>(&self, ds: &PooledDataset<T>, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["unit_index", "w", "lambda", "gamma"])?;
        for (k, &i) in ds.study_units().iter().enumerate() {
            out.write_record([
                i.to_string(),
                self.w[k].to_string(),
                self.lambda[k].to_string(),
                self.gamma[k].to_string(),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn gather_rows<T: Scalar>(ds: &PooledDataset<T>, units: &[usize], cols: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(units.len() * cols.len());
    for &i in units {
        let row = ds.row(i);
        out.extend(cols.iter().map(|&c| row[c]));
    }
    out
}

/// Generalization weights balancing study units to the target on `cols`.
pub fn generalization_weights_on<T: Scalar>(
    ds: &PooledDataset<T>,
    cols: &[usize],
    method: GeneralizationMethod,
    cfg: &WeightConfig,
) -> Result<(Vec<T>, FitDiagnostics)> {
    let n_study = ds.study_units().len();
    if cols.is_empty() {
        return Ok((vec![T::one(); n_study], FitDiagnostics::trivial()));
    }
    match method {
        GeneralizationMethod::EntropyBalancing => {
            let target = ds.target_units();
            let nt = T::from_usize_lossy(target.len());
            let means: Vec<T> = cols
                .iter()
                .map(|&c| target.iter().map(|&i| ds.value(i, c)).sum::<T>() / nt)
                .collect();
            let rows = gather_rows(ds, ds.study_units(), cols);
            Ok(entropy_balance(&rows, cols.len(), &means, &cfg.balance))
        }
        GeneralizationMethod::Logistic => {
            let all: Vec<usize> = (0..ds.n_units()).collect();
            let rows = gather_rows(ds, &all, cols);
            let r: Vec<bool> = all.iter().map(|&i| ds.in_studies(i)).collect();
            let fit = fit_logistic(&rows, cols.len(), &r, &cfg.logistic, "participation model")?;
            let n1 = T::from_usize_lossy(n_study);
            let n0 = T::from_usize_lossy(ds.n_target());
            let mut w: Vec<T> = ds
                .study_units()
                .iter()
                .map(|&i| (n1 / n0) * (T::one() - fit.fitted[i]) / fit.fitted[i])
                .collect();
            normalize_mean_one(&mut w);
            Ok((w, fit.diagnostics))
        }
    }
}

pub(crate) fn normalize_mean_one<T: Scalar>(w: &mut [T]) {
    let m = w.iter().copied().sum::<T>() / T::from_usize_lossy(w.len().max(1));
    if m > T::zero() {
        for x in w.iter_mut() {
            *x /= m;
        }
    }
}

/// Generalization weights on the dataset's modifier set V.
pub fn estimate_generalization_weights<T: Scalar>(
    ds: &PooledDataset<T>,
    method: GeneralizationMethod,
    cfg: &WeightConfig,
) -> Result<(Vec<T>, FitDiagnostics)> {
    generalization_weights_on(ds, &ds.modifier_columns(), method, cfg)
}

/// Generalization weights with modifier `name` (all its columns) left out.
pub fn leave_one_out_weights<T: Scalar>(
    ds: &PooledDataset<T>,
    name: &str,
    method: GeneralizationMethod,
    cfg: &WeightConfig,
) -> Result<(Vec<T>, FitDiagnostics)> {
    let cols = ds.modifier_columns_without(name)?;
    generalization_weights_on(ds, &cols, method, cfg)
}

/// λ_i = P̂(A_i | R = 1) / P̂(A_i | S_i, R = 1) from sample proportions.
pub fn estimate_combination_weights<T: Scalar>(ds: &PooledDataset<T>) -> Vec<T> {
    let counts = ds.arm_counts();
    let n = T::from_usize_lossy(counts.total());
    let p1 = T::from_usize_lossy(counts.n_treated) / n;
    ds.study_units()
        .iter()
        .map(|&i| {
            let (t, c) = counts.per_study[&ds.study_of(i)];
            let ns = T::from_usize_lossy(t + c);
            let ps1 = T::from_usize_lossy(t) / ns;
            if ds.treated(i) {
                p1 / ps1
            } else {
                (T::one() - p1) / (T::one() - ps1)
            }
        })
        .collect()
}

/// γ weights and fitted propensities P̂(A = 1 | X, S) per study unit.
pub fn estimate_deconfounding_weights<T: Scalar>(
    ds: &PooledDataset<T>,
    method: DeconfoundingMethod,
    cfg: &WeightConfig,
) -> Result<(Vec<T>, Vec<T>, Vec<(String, FitDiagnostics)>)> {
    let units = ds.study_units();
    let counts = ds.arm_counts();
    let mut gamma = vec![T::one(); units.len()];
    let mut propensity = vec![T::zero(); units.len()];
    let mut fits = Vec::new();
    let cols = ds.adjuster_columns();
    if method == DeconfoundingMethod::LogisticPerStudy && cols.is_empty() {
        return Err(Error::Config("logistic de-confounding needs a non-empty adjustment set".into()));
    }
    for s in ds.study_ids() {
        let pos: Vec<usize> = (0..units.len()).filter(|&k| ds.study_of(units[k]) == s).collect();
        let (t, c) = counts.per_study[&s];
        let ps1 = T::from_usize_lossy(t) / T::from_usize_lossy(t + c);
        match method {
            DeconfoundingMethod::Constant => {
                for &k in &pos {
                    propensity[k] = ps1;
                }
            }
            DeconfoundingMethod::LogisticPerStudy => {
                let members: Vec<usize> = pos.iter().map(|&k| units[k]).collect();
                let rows = gather_rows(ds, &members, &cols);
                let a: Vec<bool> = members.iter().map(|&i| ds.treated(i)).collect();
                let label = format!("propensity model, study {s}");
                let mut fit = fit_logistic(&rows, cols.len(), &a, &cfg.logistic, &label)?;
                let eps = T::lit(cfg.propensity_epsilon);
                let extreme = fit.fitted.iter().filter(|&&p| p < eps || p > T::one() - eps).count();
                if extreme > 0 && fit.diagnostics.condition_flag.is_none() {
                    fit.diagnostics.condition_flag =
                        Some(format!("{extreme} fitted propensities outside [{0}, 1 - {0}]", cfg.propensity_epsilon));
                }
                for (m, &k) in pos.iter().enumerate() {
                    let p = fit.fitted[m];
                    propensity[k] = p;
                    gamma[k] = if a[m] { ps1 / p } else { (T::one() - ps1) / (T::one() - p) };
                }
                fits.push((label, fit.diagnostics));
            }
        }
    }
    Ok((gamma, propensity, fits))
}

/// All three weight families with the configured methods.
pub fn estimate_weights<T: Scalar>(ds: &PooledDataset<T>, cfg: &WeightConfig) -> Result<WeightSet<T>> {
    let (w, gdiag) = estimate_generalization_weights(ds, cfg.generalization, cfg)?;
    let lambda = estimate_combination_weights(ds);
    let (gamma, propensity, mut fits) = estimate_deconfounding_weights(ds, cfg.deconfounding, cfg)?;
    fits.insert(0, ("generalization weights".to_string(), gdiag));
    Ok(WeightSet {
        w,
        lambda,
        gamma,
        propensity,
        meta: WeightMeta {
            generalization: cfg.generalization,
            deconfounding: cfg.deconfounding,
            fits,
            allow_unconverged: cfg.allow_unconverged,
        },
    })
}
