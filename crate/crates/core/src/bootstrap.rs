//! Stratified percentile bootstrap and the bias-adjusted grid built on it.

use std::collections::BTreeMap;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::PooledDataset;
use crate::error::{Error, Result};
use crate::estimators::weighted_contrast;
use crate::rng::{keyed_rng, streams};
use crate::scalar::{sample_variance, Scalar};
use crate::sensitivity::{bias_from_params, ContourGrid, SensitivityParams};
use crate::weights::{estimate_weights, WeightConfig};

/// Share of replicates that may be dropped before the bootstrap is unreliable.
pub const MAX_DROPPED_FRACTION: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BootstrapPlan {
    pub replicates: usize,
    pub seed: u64,
    /// Resample the target sample as its own stratum instead of holding it fixed.
    pub resample_target: bool,
    /// Random-stream label; distinct consumers use distinct streams.
    pub stream: u64,
}

impl BootstrapPlan {
    pub fn new(replicates: usize, seed: u64) -> Self {
        Self { replicates, seed, resample_target: false, stream: streams::BOOTSTRAP }
    }

    fn validate(&self) -> Result<()> {
        if self.replicates == 0 {
            return Err(Error::Config("bootstrap needs at least one replicate".into()));
        }
        Ok(())
    }
}

impl Default for BootstrapPlan {
    fn default() -> Self {
        Self::new(1000, 0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PercentileCi<T> {
    pub alpha: f64,
    pub lower: T,
    pub upper: T,
}

impl<T: Scalar> PercentileCi<T> {
    pub fn covers(&self, x: T) -> bool {
        self.lower <= x && x <= self.upper
    }
}

/// Type-7 (linear interpolation) quantile of sorted data.
pub fn quantile_sorted<T: Scalar>(sorted: &[T], p: f64) -> T {
    assert!(!sorted.is_empty(), "quantile of empty sample");
    let h = (sorted.len() - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    sorted[lo] + T::lit(h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn percentile_ci<T: Scalar>(values: &[T], alpha: f64) -> PercentileCi<T> {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite replicate"));
    PercentileCi { alpha, lower: quantile_sorted(&v, alpha / 2.0), upper: quantile_sorted(&v, 1.0 - alpha / 2.0) }
}

/// Units grouped by stratum: (study, arm) for study units, study 0 for the target.
fn strata<T: Scalar>(ds: &PooledDataset<T>) -> (Vec<usize>, Vec<Vec<usize>>) {
    let mut groups: BTreeMap<(u32, bool), Vec<usize>> = BTreeMap::new();
    for &i in ds.study_units() {
        groups.entry((ds.study_of(i), ds.treated(i))).or_default().push(i);
    }
    (ds.target_units().to_vec(), groups.into_values().collect())
}

/// Row indices of bootstrap replicate `b`. Stratum sizes are preserved.
pub fn resample_indices<T: Scalar>(ds: &PooledDataset<T>, plan: &BootstrapPlan, b: usize) -> Vec<usize> {
    let (target, groups) = strata(ds);
    let mut rng = keyed_rng(plan.seed, b as u64, plan.stream);
    let mut idx = Vec::with_capacity(ds.n_units());
    if plan.resample_target {
        idx.extend((0..target.len()).map(|_| target[rng.random_range(0..target.len())]));
    } else {
        idx.extend_from_slice(&target);
    }
    for g in &groups {
        idx.extend((0..g.len()).map(|_| g[rng.random_range(0..g.len())]));
    }
    idx
}

/// What each replicate contributes: the estimate and var(w) of its weights.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Replicate<T> {
    pub index: usize,
    pub tau: T,
    pub var_w: T,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult<T> {
    /// Surviving replicates in index order.
    pub replicates: Vec<Replicate<T>>,
    pub dropped: usize,
    pub ci: PercentileCi<T>,
    pub sd: T,
}

impl<T: Scalar> BootstrapResult<T> {
    pub fn taus(&self) -> Vec<T> {
        self.replicates.iter().map(|r| r.tau).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["replicate", "tau", "var_w"])?;
        for r in &self.replicates {
            out.write_record([r.index.to_string(), r.tau.to_string(), r.var_w.to_string()])?;
        }
        out.flush()?;
        Ok(())
    }
}

fn replicate<T: Scalar>(ds: &PooledDataset<T>, plan: &BootstrapPlan, cfg: &WeightConfig, b: usize) -> Result<Replicate<T>> {
    let sub = ds.subset(&resample_indices(ds, plan, b));
    let ws = estimate_weights(&sub, cfg)?;
    ws.ensure_usable()?;
    let tau = weighted_contrast(&sub, &ws.w, &ws.lambda, &ws.gamma)?;
    Ok(Replicate { index: b, tau, var_w: sample_variance(&ws.w) })
}

/// Re-estimates weights and τ̂ on each stratified resample.
///
/// Replicates whose weight fit fails are dropped; more than 5% dropped is an error.
pub fn bootstrap_estimate<T: Scalar>(
    ds: &PooledDataset<T>,
    plan: &BootstrapPlan,
    cfg: &WeightConfig,
    alpha: f64,
) -> Result<BootstrapResult<T>> {
    plan.validate()?;
    let outcomes: Vec<Result<Replicate<T>>> =
        (0..plan.replicates).into_par_iter().map(|b| replicate(ds, plan, cfg, b)).collect();
    let total = outcomes.len();
    let replicates: Vec<Replicate<T>> = outcomes.into_iter().filter_map(|r| r.ok()).collect();
    let dropped = total - replicates.len();
    if replicates.is_empty() || dropped as f64 > MAX_DROPPED_FRACTION * total as f64 {
        return Err(Error::Reliability { dropped, total });
    }
    let taus: Vec<T> = replicates.iter().map(|r| r.tau).collect();
    let sd = sample_variance(&taus).sqrt();
    Ok(BootstrapResult { ci: percentile_ci(&taus, alpha), sd, replicates, dropped })
}

/// Per-cell percentile CIs of the bias-adjusted replicate estimates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridCi<T> {
    pub lower: Vec<T>,
    pub upper: Vec<T>,
    pub covers_zero: Vec<bool>,
}

/// τ̂⁽ᵇ⁾ − bias(R², ρ, σ²_max | var(w⁽ᵇ⁾)) per cell, with σ²_max held fixed.
pub fn adjusted_ci_from_replicates<T: Scalar>(
    replicates: &[Replicate<T>],
    sigma2_tau_max: T,
    grid: &ContourGrid<T>,
    alpha: f64,
) -> Result<GridCi<T>> {
    if replicates.is_empty() {
        return Err(Error::InsufficientData("no bootstrap replicates".into()));
    }
    let cells: Vec<(T, T)> =
        grid.r2_axis.iter().flat_map(|&r2| grid.rho_axis.iter().map(move |&rho| (r2, rho))).collect();
    let cis = cells
        .par_iter()
        .map(|&(r2, rho)| {
            let p = SensitivityParams::new(r2, rho, sigma2_tau_max);
            let adj = replicates
                .iter()
                .map(|r| Ok(r.tau - bias_from_params(p, r.var_w)?))
                .collect::<Result<Vec<T>>>()?;
            Ok(percentile_ci(&adj, alpha))
        })
        .collect::<Result<Vec<PercentileCi<T>>>>()?;
    Ok(GridCi {
        lower: cis.iter().map(|c| c.lower).collect(),
        upper: cis.iter().map(|c| c.upper).collect(),
        covers_zero: cis.iter().map(|c| c.covers(T::zero())).collect(),
    })
}

pub fn adjusted_ci_grid<T: Scalar>(
    ds: &PooledDataset<T>,
    plan: &BootstrapPlan,
    cfg: &WeightConfig,
    sigma2_tau_max: T,
    grid: &ContourGrid<T>,
    alpha: f64,
) -> Result<(BootstrapResult<T>, GridCi<T>)> {
    let boot = bootstrap_estimate(ds, plan, cfg, alpha)?;
    let ci = adjusted_ci_from_replicates(&boot.replicates, sigma2_tau_max, grid, alpha)?;
    Ok((boot, ci))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdStatus {
    Found,
    /// The unadjusted CI already covers zero.
    AlreadyInsignificant,
    /// No grid cell's CI covers zero.
    NoBorder,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MinimalBiasThreshold<T> {
    pub threshold: T,
    pub status: ThresholdStatus,
}

/// Smallest |bias| over the significance-border cells of `grid`.
pub fn minimal_bias_threshold<T: Scalar>(grid: &ContourGrid<T>, unadjusted: &PercentileCi<T>) -> MinimalBiasThreshold<T> {
    if unadjusted.covers(T::zero()) {
        return MinimalBiasThreshold { threshold: T::zero(), status: ThresholdStatus::AlreadyInsignificant };
    }
    match grid.significance_border.iter().map(|&(_, _, b)| b.abs()).reduce(T::min) {
        Some(threshold) => MinimalBiasThreshold { threshold, status: ThresholdStatus::Found },
        None => MinimalBiasThreshold { threshold: T::zero(), status: ThresholdStatus::NoBorder },
    }
}
