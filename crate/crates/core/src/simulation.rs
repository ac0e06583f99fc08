//! Three-trial data-generating process with an omitted effect modifier, and the
//! power study of the Wald test built on it.
//!
//! Selection and allocation depend on the covariates only through
//! Z = X¹ + X² + X³ ~ N(0, 3 + 6ρ), so intercepts and the exact PATE are
//! one-dimensional Gaussian integrals.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{bootstrap_estimate, BootstrapPlan};
use crate::data::{PooledDataset, UnitRecord};
use crate::error::{Error, Result};
use crate::estimators::estimate_pate_single_study;
use crate::linalg::SquareMatrix;
use crate::rng::{derive_seed, keyed_rng, streams};
use crate::scalar::Scalar;
use crate::testing::{wald_test, WaldInput, WaldResult};
use crate::weights::{expit, DeconfoundingMethod, GeneralizationMethod, WeightConfig};

pub const N_STUDIES: u32 = 3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    /// Expected size of each trial and of the target sample.
    pub n: usize,
    /// Strength of the omitted modifier X³.
    pub k: f64,
    pub selection_log_or: f64,
    /// Per-covariate slope of the study-1 allocation logit.
    pub xi_log_or: f64,
    /// Per-covariate slope of the study-2 allocation logit.
    pub zeta_log_or: f64,
    pub correlation: f64,
    pub treatment_prob: f64,
    pub noise_sd: f64,
    pub seed: u64,
    pub replications: usize,
    pub bootstrap: usize,
    /// Pass X³ to weight estimation (it is withheld by default).
    pub include_withheld: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            n: 1000,
            k: 1.5,
            selection_log_or: 1.25_f64.ln(),
            xi_log_or: 1.25_f64.ln(),
            zeta_log_or: 1.5_f64.ln(),
            correlation: 0.5,
            treatment_prob: 0.5,
            noise_sd: 1.0,
            seed: 0,
            replications: 1000,
            bootstrap: 1000,
            include_withheld: false,
        }
    }
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.n < 10 {
            return Err(Error::Config(format!("n = {} is too small", self.n)));
        }
        if !(self.correlation > -0.5 && self.correlation < 1.0) {
            return Err(Error::Config("equicorrelation must lie in (-0.5, 1)".into()));
        }
        if !(self.treatment_prob > 0.0 && self.treatment_prob < 1.0) {
            return Err(Error::Config("treatment probability must lie in (0, 1)".into()));
        }
        Ok(())
    }

    fn z_sd(&self) -> f64 {
        (3.0 + 6.0 * self.correlation).sqrt()
    }

    /// Expected share of the population selected into the trials.
    pub fn trial_share(&self) -> f64 {
        N_STUDIES as f64 / (N_STUDIES as f64 + 1.0)
    }

    pub fn population_size(&self) -> usize {
        self.n * (N_STUDIES as usize + 1)
    }

    fn weight_config(&self) -> WeightConfig {
        WeightConfig {
            generalization: GeneralizationMethod::EntropyBalancing,
            deconfounding: DeconfoundingMethod::LogisticPerStudy,
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Intercepts {
    pub beta0: f64,
    pub xi0: f64,
    pub zeta0: f64,
}

const QUAD_POINTS: usize = 4001;
const QUAD_HALF_WIDTH: f64 = 12.0;

/// Trapezoid nodes and normalized weights for Z ~ N(0, sd²).
fn z_nodes(sd: f64) -> Vec<(f64, f64)> {
    let h = 2.0 * QUAD_HALF_WIDTH / (QUAD_POINTS - 1) as f64;
    let raw: Vec<(f64, f64)> = (0..QUAD_POINTS)
        .map(|i| {
            let t = -QUAD_HALF_WIDTH + i as f64 * h;
            (sd * t, (-0.5 * t * t).exp())
        })
        .collect();
    let total: f64 = raw.iter().map(|p| p.1).sum();
    raw.into_iter().map(|(z, w)| (z, w / total)).collect()
}

fn allocation(z: f64, icpt: &Intercepts, cfg: &SimConfig) -> (f64, f64) {
    let e1 = (icpt.xi0 + cfg.xi_log_or * z).exp();
    let e2 = (icpt.zeta0 + cfg.zeta_log_or * z).exp();
    let den = 1.0 + e1 + e2;
    (e1 / den, e2 / den)
}

/// Intercepts giving P(R = 1) = 3/4 and E[π_s | R = 1] = 1/3 for each trial.
pub fn solve_intercepts(cfg: &SimConfig) -> Result<Intercepts> {
    cfg.validate()?;
    let nodes = z_nodes(cfg.z_sd());
    let b = cfg.selection_log_or;
    let share = |b0: f64| nodes.iter().map(|&(z, w)| w * expit(b0 + b * z)).sum::<f64>();
    let (mut lo, mut hi) = (-60.0, 60.0);
    let target = cfg.trial_share();
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if share(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let beta0 = 0.5 * (lo + hi);
    let mut icpt = Intercepts { beta0, xi0: 0.0, zeta0: 0.0 };
    let third = 1.0 / N_STUDIES as f64;
    for _ in 0..10_000 {
        let (mut m1, mut m2, mut mass) = (0.0, 0.0, 0.0);
        for &(z, w) in &nodes {
            let p = w * expit(beta0 + b * z);
            let (p1, p2) = allocation(z, &icpt, cfg);
            m1 += p * p1;
            m2 += p * p2;
            mass += p;
        }
        let (e1, e2) = (m1 / mass, m2 / mass);
        if (e1 - third).abs() < 1e-13 && (e2 - third).abs() < 1e-13 {
            return Ok(icpt);
        }
        icpt.xi0 += (third / e1).ln();
        icpt.zeta0 += (third / e2).ln();
    }
    Err(Error::Config("allocation intercepts did not converge".into()))
}

/// Conditional treatment effect given the covariates (noise cancels).
pub fn individual_effect(x: [f64; 3], k: f64) -> f64 {
    -5.0 - 2.0 * x[0] - 2.0 * x[1] - 2.0 * k * x[2]
}

/// E(Y¹ − Y⁰ | R = 0) by quadrature, using E(Xʲ | Z) = Z/3.
pub fn exact_dgp_pate(cfg: &SimConfig) -> Result<f64> {
    let icpt = solve_intercepts(cfg)?;
    let (mut num, mut den) = (0.0, 0.0);
    for (z, w) in z_nodes(cfg.z_sd()) {
        let q = w * (1.0 - expit(icpt.beta0 + cfg.selection_log_or * z));
        num += q * z;
        den += q;
    }
    Ok(-5.0 - 2.0 * (2.0 + cfg.k) / 3.0 * (num / den))
}

fn covariate_factor(cfg: &SimConfig) -> Result<crate::linalg::Cholesky<f64>> {
    let r = cfg.correlation;
    SquareMatrix::from_rows(&[vec![1.0, r, r], vec![r, 1.0, r], vec![r, r, 1.0]]).cholesky()
}

/// Monte-Carlo check of [`exact_dgp_pate`]: (mean, standard error) over `draws` population units.
pub fn monte_carlo_dgp_pate(cfg: &SimConfig, draws: usize, seed: u64) -> Result<(f64, f64)> {
    let icpt = solve_intercepts(cfg)?;
    let chol = covariate_factor(cfg)?;
    let chunk = 100_000;
    let parts: Vec<(f64, f64, usize)> = (0..draws.div_ceil(chunk))
        .into_par_iter()
        .map(|c| {
            let mut rng = keyed_rng(seed, c as u64, streams::SIMULATION);
            let (mut s, mut s2, mut m) = (0.0, 0.0, 0usize);
            for _ in 0..chunk.min(draws - c * chunk) {
                let e: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let x = chol.lower_mul(&e);
                let z = x[0] + x[1] + x[2];
                if rng.random::<f64>() >= expit(icpt.beta0 + cfg.selection_log_or * z) {
                    let t = individual_effect([x[0], x[1], x[2]], cfg.k);
                    s += t;
                    s2 += t * t;
                    m += 1;
                }
            }
            (s, s2, m)
        })
        .collect();
    let (s, s2, m) = parts.iter().fold((0.0, 0.0, 0usize), |a, p| (a.0 + p.0, a.1 + p.1, a.2 + p.2));
    let mf = m as f64;
    let mean = s / mf;
    let var = (s2 - mf * mean * mean) / (mf - 1.0);
    Ok((mean, (var / mf).sqrt()))
}

#[derive(Debug, Clone)]
pub struct SimReplicate<T> {
    /// Observed data: X¹, X² (plus X³ only with `include_withheld`).
    pub dataset: PooledDataset<T>,
    pub truth: f64,
}

/// Draws replicate `rep`: a population of 4n units split into target and trials.
pub fn generate_replicate<T: Scalar>(cfg: &SimConfig, icpt: &Intercepts, rep: usize) -> Result<SimReplicate<T>> {
    cfg.validate()?;
    let chol = covariate_factor(cfg)?;
    let mut rng = keyed_rng(derive_seed(cfg.seed, cfg.n as u64, streams::SIMULATION), rep as u64, streams::SIMULATION);
    let n_pop = cfg.population_size();
    let mut records = Vec::with_capacity(n_pop);
    for _ in 0..n_pop {
        let e: [f64; 3] = [rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)];
        let x = chol.lower_mul(&e);
        let z = x[0] + x[1] + x[2];
        let selected = rng.random::<f64>() < expit(icpt.beta0 + cfg.selection_log_or * z);
        let u: f64 = rng.random();
        let a = rng.random::<f64>() < cfg.treatment_prob;
        let noise: f64 = cfg.noise_sd * rng.sample::<f64, _>(StandardNormal);
        let mut covariates = vec![T::lit(x[0]), T::lit(x[1])];
        if cfg.include_withheld {
            covariates.push(T::lit(x[2]));
        }
        if !selected {
            records.push(UnitRecord { study: 0, treatment: None, outcome: None, covariates });
            continue;
        }
        let (p1, p2) = allocation(z, icpt, cfg);
        let study = if u < p1 {
            1
        } else if u < p1 + p2 {
            2
        } else {
            3
        };
        let y0 = 5.0 + x[0] + x[1] + cfg.k * x[2] + noise;
        let y = if a { y0 + individual_effect([x[0], x[1], x[2]], cfg.k) } else { y0 };
        records.push(UnitRecord { study, treatment: Some(a), outcome: Some(T::lit(y)), covariates });
    }
    let mut names = vec!["x1".to_string(), "x2".to_string()];
    let mut modifiers = vec!["x1", "x2"];
    if cfg.include_withheld {
        names.push("x3".into());
        modifiers.push("x3");
    }
    let dataset = PooledDataset::from_records(records, names, &modifiers, &modifiers)?;
    Ok(SimReplicate { dataset, truth: exact_dgp_pate(cfg)? })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateOutcome<T> {
    pub truth: f64,
    pub wald: WaldResult<T>,
    /// Bootstrap replicates dropped per study.
    pub dropped: Vec<usize>,
}

/// Generalizes from each trial separately, bootstraps the sds and runs the Wald test.
pub fn analyze_replicate<T: Scalar>(sim: &SimReplicate<T>, cfg: &SimConfig, rep: usize) -> Result<ReplicateOutcome<T>> {
    let wcfg = cfg.weight_config();
    let mut estimates = Vec::new();
    let mut sds = Vec::new();
    let mut dropped = Vec::new();
    for s in sim.dataset.study_ids() {
        let (est, _, sub) = estimate_pate_single_study(&sim.dataset, s, &wcfg)?;
        let key = ((cfg.n as u64) << 40) | ((rep as u64) << 8) | s as u64;
        let plan = BootstrapPlan {
            replicates: cfg.bootstrap,
            seed: derive_seed(cfg.seed, key, streams::SIM_BOOTSTRAP),
            resample_target: false,
            stream: streams::SIM_BOOTSTRAP,
        };
        let boot = bootstrap_estimate(&sub, &plan, &wcfg, 0.05)?;
        estimates.push(est.tau_hat);
        sds.push(boot.sd);
        dropped.push(boot.dropped);
    }
    let wald = wald_test(&WaldInput { estimates, sds })?;
    Ok(ReplicateOutcome { truth: sim.truth, wald, dropped })
}

/// Wald p-value of replicate `rep`, or the error that stopped it.
pub fn replicate_p_value(cfg: &SimConfig, icpt: &Intercepts, rep: usize) -> Result<f64> {
    let sim = generate_replicate::<f64>(cfg, icpt, rep)?;
    Ok(analyze_replicate(&sim, cfg, rep)?.wald.p_value)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerRow {
    pub n: usize,
    pub k: f64,
    pub alpha: f64,
    /// Share of successful replicates with p < α.
    pub rejection_rate: f64,
    pub replicates: usize,
    pub failures: usize,
}

/// Rejection rates over the (n, k, α) grid. One set of replicates per (n, k)
/// serves every α. Replicates that fail are counted, not retried.
pub fn run_power_study(base: &SimConfig, ns: &[usize], ks: &[f64], alphas: &[f64]) -> Result<Vec<PowerRow>> {
    let mut rows = Vec::new();
    for &n in ns {
        for &k in ks {
            let cfg = SimConfig { n, k, ..*base };
            let icpt = solve_intercepts(&cfg)?;
            let ps: Vec<Option<f64>> =
                (0..cfg.replications).into_par_iter().map(|r| replicate_p_value(&cfg, &icpt, r).ok()).collect();
            let ok: Vec<f64> = ps.iter().flatten().copied().collect();
            let failures = ps.len() - ok.len();
            for &alpha in alphas {
                let rejected = ok.iter().filter(|&&p| p < alpha).count();
                rows.push(PowerRow {
                    n,
                    k,
                    alpha,
                    rejection_rate: if ok.is_empty() { f64::NAN } else { rejected as f64 / ok.len() as f64 },
                    replicates: cfg.replications,
                    failures,
                });
            }
        }
    }
    Ok(rows)
}

/// `n,k,alpha,rejection_rate,replicates,failures`
pub fn write_power_csv<W: std::io::Write>(rows: &[PowerRow], writer: W) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    out.write_record(["n", "k", "alpha", "rejection_rate", "replicates", "failures"])?;
    for r in rows {
        out.write_record([
            r.n.to_string(),
            r.k.to_string(),
            r.alpha.to_string(),
            format!("{:.6}", r.rejection_rate),
            r.replicates.to_string(),
            r.failures.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn effect_at_origin() {
        assert_eq!(individual_effect([0.0; 3], 1.0), -5.0);
    }

    #[test]
    fn intercepts_hit_targets() {
        let cfg = SimConfig::default();
        let icpt = solve_intercepts(&cfg).unwrap();
        let nodes = z_nodes(cfg.z_sd());
        let share: f64 = nodes.iter().map(|&(z, w)| w * expit(icpt.beta0 + cfg.selection_log_or * z)).sum();
        assert!((share - 0.75).abs() < 1e-12);
        // Study 1 is favoured less strongly by Z than study 2, so its intercept is larger.
        assert!(icpt.xi0 > icpt.zeta0);
    }

    #[test]
    fn no_selection_gives_minus_five() {
        let cfg = SimConfig { selection_log_or: 0.0, ..Default::default() };
        assert!((exact_dgp_pate(&cfg).unwrap() + 5.0).abs() < 1e-12);
    }

    #[test]
    fn pate_shift_is_linear_in_k() {
        let base = SimConfig { k: 1.0, ..Default::default() };
        let strong = SimConfig { k: 1.5, ..Default::default() };
        let icpt = solve_intercepts(&base).unwrap();
        let (mut num, mut den) = (0.0, 0.0);
        for (z, w) in z_nodes(base.z_sd()) {
            let q = w * (1.0 - expit(icpt.beta0 + base.selection_log_or * z));
            num += q * z / 3.0;
            den += q;
        }
        let ex3 = num / den;
        let d = exact_dgp_pate(&strong).unwrap() - exact_dgp_pate(&base).unwrap();
        assert!((d - (-2.0 * 0.5 * ex3)).abs() < 1e-12);
        // Target units have lower Z than average, so E(X³ | R = 0) < 0.
        assert!(ex3 < 0.0);
    }

    #[test]
    fn replicate_has_expected_shape_and_firewall() {
        let cfg = SimConfig { n: 500, ..Default::default() };
        let icpt = solve_intercepts(&cfg).unwrap();
        let a = generate_replicate::<f64>(&cfg, &icpt, 3).unwrap();
        let b = generate_replicate::<f64>(&cfg, &icpt, 3).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.dataset.covariate_names(), &["x1".to_string(), "x2".to_string()]);
        assert_eq!(a.dataset.n_units(), 2000);
        assert_eq!(a.dataset.study_ids(), vec![1, 2, 3]);
    }
}
