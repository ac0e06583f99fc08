use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use gensens::bootstrap::{
    adjusted_ci_grid, bootstrap_estimate, minimal_bias_threshold, BootstrapPlan, BootstrapResult, PercentileCi,
    ThresholdStatus,
};
use gensens::data::{load_csv, max_abs_smd, summarize_smd, write_csv_to, PooledDataset, Schema};
use gensens::estimators::{estimate_pate_single_study, estimate_report, EstimateReport};
use gensens::oracle::{bundled_populations, check_population, DiscretePopulation, SuiteEntry};
use gensens::rng::{derive_seed, streams};
use gensens::scalar::sample_variance;
use gensens::sensitivity::{benchmark_modifiers, contour_grid, sigma2_tau_bound, summarize, ContourGrid};
use gensens::simulation::{
    exact_dgp_pate, generate_replicate, run_power_study, solve_intercepts, write_power_csv, SimConfig,
};
use gensens::testing::{wald_test, WaldInput, SUGGESTED_ALPHAS};
use gensens::weights::{estimate_weights, WeightSet};
use serde::Serialize;

use crate::args::*;

/// Warnings that downgrade an otherwise successful run to exit code 2.
pub type Flags = Vec<String>;

#[derive(Serialize)]
struct Software {
    name: &'static str,
    version: &'static str,
}

#[derive(Serialize)]
struct Report<'a, C, R> {
    software: Software,
    command: &'a str,
    config: &'a C,
    result: R,
    warnings: &'a [String],
}

fn write_report<C: Serialize, R: Serialize>(
    dir: &Path,
    file: &str,
    command: &str,
    config: &C,
    result: R,
    warnings: &[String],
) -> Result<PathBuf> {
    let report = Report {
        software: Software { name: "gensens", version: env!("CARGO_PKG_VERSION") },
        command,
        config,
        result,
        warnings,
    };
    let path = dir.join(file);
    let mut text = serde_json::to_string_pretty(&report)?;
    text.push('\n');
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn resolve_seed(seed: &mut Option<u64>) -> u64 {
    *seed.get_or_insert_with(|| {
        let s: u64 = rand::random();
        eprintln!("seed: {s}");
        s
    })
}

fn load_dataset(
    data: &Path,
    schema: Option<&Path>,
    modifiers: &[String],
    adjusters: Option<&[String]>,
) -> Result<PooledDataset<f64>> {
    let schema = match schema {
        Some(p) => Schema::from_json_file(p).with_context(|| format!("schema {}", p.display()))?,
        None => {
            ensure!(!modifiers.is_empty(), "give --schema or --modifiers");
            let m: Vec<&str> = modifiers.iter().map(String::as_str).collect();
            let mut s = Schema::new(&m, &[]);
            s.adjusters = adjusters.map(|a| a.to_vec());
            s
        }
    };
    load_csv(data, &schema).with_context(|| format!("data: loading {}", data.display()))
}

impl DataArgs {
    fn load(&self) -> Result<PooledDataset<f64>> {
        load_dataset(&self.data, self.schema.as_deref(), &self.modifiers, self.adjusters.as_deref())
    }
}

fn fit_weights(ds: &PooledDataset<f64>, wa: &WeightArgs) -> Result<WeightSet<f64>> {
    let ws = estimate_weights(ds, &wa.config()).context("weights")?;
    ws.ensure_usable().context("weights")?;
    Ok(ws)
}

#[derive(Serialize)]
struct BootSummary {
    requested: usize,
    kept: usize,
    dropped: usize,
    sd: f64,
    ci: PercentileCi<f64>,
}

impl BootSummary {
    fn new(b: &BootstrapResult<f64>, requested: usize, flags: &mut Flags) -> Self {
        if b.dropped > 0 {
            flags.push(format!("bootstrap: {} of {requested} replicates dropped", b.dropped));
        }
        Self { requested, kept: b.replicates.len(), dropped: b.dropped, sd: b.sd, ci: b.ci }
    }
}

#[derive(Serialize)]
struct EstimateOut<'a> {
    tau_hat: f64,
    study: Option<u32>,
    estimate: &'a EstimateReport<f64>,
    arm_counts: gensens::data::ArmCounts,
    weights: &'a gensens::weights::WeightMeta,
    var_w: f64,
    max_abs_smd: BTreeMap<u32, f64>,
    bootstrap: Option<BootSummary>,
}

pub fn estimate(mut a: EstimateArgs) -> Result<Flags> {
    let seed = resolve_seed(&mut a.common.seed);
    out_dir(&a.common.out)?;
    let full = a.data.load()?;
    let cfg = a.weights.config();
    let (ds, ws) = match a.single_study {
        Some(s) => {
            let (_, ws, sub) =
                estimate_pate_single_study(&full, s, &cfg).with_context(|| format!("estimators: study {s}"))?;
            ws.ensure_usable().context("weights")?;
            (sub, ws)
        }
        None => {
            let ws = fit_weights(&full, &a.weights)?;
            (full, ws)
        }
    };
    let report = estimate_report(&ds, &ws, a.variance.route()).context("estimators")?;
    let mut flags = ws.meta.warnings();

    let bootstrap = if a.boot > 0 {
        let b = bootstrap_estimate(&ds, &BootstrapPlan::new(a.boot, seed), &cfg, a.common.alpha)
            .context("bootstrap")?;
        if let Some(p) = &a.dump_replicates {
            b.write_csv(create(p)?)?;
        }
        Some(BootSummary::new(&b, a.boot, &mut flags))
    } else {
        None
    };
    if let Some(p) = &a.dump_weights {
        ws.write_csv(&ds, create(p)?)?;
    }

    let out = EstimateOut {
        tau_hat: report.tau_hat,
        study: a.single_study,
        estimate: &report,
        arm_counts: ds.arm_counts(),
        weights: &ws.meta,
        var_w: sample_variance(&ws.w),
        max_abs_smd: max_abs_smd(&summarize_smd(&ds)),
        bootstrap,
    };
    let path = write_report(&a.common.out, "estimate.json", "estimate", &a, &out, &flags)?;
    match &out.bootstrap {
        Some(b) => println!(
            "tau_hat = {:.6}  {:.0}% CI [{:.6}, {:.6}]  ({})",
            report.tau_hat,
            100.0 * (1.0 - a.common.alpha),
            b.ci.lower,
            b.ci.upper,
            path.display()
        ),
        None => println!("tau_hat = {:.6}  ({})", report.tau_hat, path.display()),
    }
    Ok(flags)
}

#[derive(Serialize)]
struct Threshold {
    /// Signed like the estimate, as used for MREMS_α.
    threshold: f64,
    status: ThresholdStatus,
}

#[derive(Serialize)]
struct GridOut<'a> {
    n_cells: usize,
    r2_points: usize,
    rho_points: usize,
    kill_curve: &'a [(f64, f64)],
    significance_border: &'a [(f64, f64, f64)],
    csv: &'a str,
    svg: &'a str,
}

impl<'a> GridOut<'a> {
    fn new(g: &'a ContourGrid<f64>) -> Self {
        Self {
            n_cells: g.n_cells(),
            r2_points: g.r2_axis.len(),
            rho_points: g.rho_axis.len(),
            kill_curve: &g.kill_curve,
            significance_border: &g.significance_border,
            csv: "contour.csv",
            svg: "contour.svg",
        }
    }
}

fn write_grid(dir: &Path, grid: &ContourGrid<f64>) -> Result<()> {
    grid.write_csv(create(&dir.join("contour.csv"))?)?;
    std::fs::write(dir.join("contour.svg"), grid.to_svg())?;
    Ok(())
}

#[derive(Serialize)]
struct SensitivityOut<'a> {
    estimate: &'a EstimateReport<f64>,
    summary: gensens::sensitivity::SensitivitySummary<f64>,
    bootstrap: Option<BootSummary>,
    minimal_bias_threshold: Option<Threshold>,
    benchmark: Vec<gensens::sensitivity::BenchmarkRow<f64>>,
    contour: GridOut<'a>,
}

pub fn sensitivity(mut a: SensitivityArgs) -> Result<Flags> {
    let seed = resolve_seed(&mut a.common.seed);
    out_dir(&a.common.out)?;
    let ds = a.data.load()?;
    let cfg = a.weights.config();
    let ws = fit_weights(&ds, &a.weights)?;
    let mut flags = ws.meta.warnings();

    // σ² bound, then the grid of bias-adjusted estimates
    let report = estimate_report(&ds, &ws, a.variance.route()).context("estimators")?;
    let tau = report.tau_hat;
    let mode = a.sigma_mode.into();
    let s2 = sigma2_tau_bound(report.var_y1, report.var_y0, mode).context("sensitivity")?;
    let var_w = sample_variance(&ws.w);
    let mut grid = contour_grid(tau, s2, var_w, &a.grid.spec()).context("sensitivity: contour")?;

    // bootstrap CIs per cell give the significance border and the threshold
    let (bootstrap, threshold) = if a.boot > 0 {
        let plan = BootstrapPlan::new(a.boot, seed);
        let (b, cis) = adjusted_ci_grid(&ds, &plan, &cfg, s2, &grid, a.common.alpha).context("bootstrap")?;
        if let Some(p) = &a.dump_replicates {
            b.write_csv(create(p)?)?;
        }
        grid = grid.with_coverage(cis.covers_zero, tau).context("bootstrap")?;
        let mbt = minimal_bias_threshold(&grid, &b.ci);
        (Some(BootSummary::new(&b, a.boot, &mut flags)), Some(Threshold { threshold: tau.signum() * mbt.threshold, status: mbt.status }))
    } else {
        (None, None)
    };
    let usable = threshold.as_ref().filter(|t| t.status == ThresholdStatus::Found).map(|t| t.threshold);

    let summary = summarize(&report, &ws.w, mode, &a.q, usable.map(f64::abs))
        .context("sensitivity (a bound violation under --sigma-mode conservative may need --sigma-mode sharp)")?;
    let benchmark = benchmark_modifiers(&ds, &ws, tau, s2, usable.unwrap_or(f64::NAN), &cfg).context("benchmark")?;
    write_grid(&a.common.out, &grid)?;
    benchmark_csv(&a.common.out, &benchmark)?;

    let out = SensitivityOut {
        estimate: &report,
        summary,
        bootstrap,
        minimal_bias_threshold: threshold,
        benchmark,
        contour: GridOut::new(&grid),
    };
    let path = write_report(&a.common.out, "sensitivity.json", "sensitivity", &a, &out, &flags)?;
    let rv1 = out.summary.rv.iter().map(|(q, r)| format!("RV_{q} = {r:.4}")).collect::<Vec<_>>().join("  ");
    println!(
        "tau_hat = {tau:.6}  sigma2_max = {s2:.6}  rho in [{:.4}, {:.4}]  {rv1}  ({})",
        out.summary.rho_bounds.0,
        out.summary.rho_bounds.1,
        path.display()
    );
    Ok(flags)
}

fn benchmark_csv(dir: &Path, rows: &[gensens::sensitivity::BenchmarkRow<f64>]) -> Result<()> {
    let mut w = create(&dir.join("benchmark.csv"))?;
    writeln!(w, "modifier,r2_minus_j,rho_minus_j,bias_est,mrems,mrems_alpha,tau_minus_j,informative,rho_out_of_range")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{}",
            r.modifier,
            r.r2_minus_j,
            r.rho_minus_j,
            r.bias_est,
            r.mrems,
            r.mrems_alpha,
            r.tau_minus_j,
            r.informative,
            r.rho_out_of_range
        )?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct BenchmarkOut<'a> {
    tau_hat: f64,
    sigma2_tau_max: f64,
    threshold: Option<f64>,
    rows: &'a [gensens::sensitivity::BenchmarkRow<f64>],
}

pub fn benchmark(a: BenchmarkArgs) -> Result<Flags> {
    out_dir(&a.common.out)?;
    let ds = a.data.load()?;
    let ws = fit_weights(&ds, &a.weights)?;
    let flags = ws.meta.warnings();
    let report = estimate_report(&ds, &ws, a.variance.route()).context("estimators")?;
    let s2 = sigma2_tau_bound(report.var_y1, report.var_y0, a.sigma_mode.into()).context("sensitivity")?;
    let rows = benchmark_modifiers(&ds, &ws, report.tau_hat, s2, a.threshold.unwrap_or(f64::NAN), &a.weights.config())
        .context("benchmark")?;
    benchmark_csv(&a.common.out, &rows)?;
    let out = BenchmarkOut { tau_hat: report.tau_hat, sigma2_tau_max: s2, threshold: a.threshold, rows: &rows };
    let path = write_report(&a.common.out, "benchmark.json", "benchmark", &a, &out, &flags)?;
    for r in &rows {
        println!("{:<20} MREMS = {:.4}  MREMS_alpha = {:.4}", r.modifier, r.mrems, r.mrems_alpha);
    }
    println!("({})", path.display());
    Ok(flags)
}

#[derive(Serialize)]
struct ContourOut<'a> {
    tau_hat: f64,
    sigma2_tau_max: f64,
    var_w: f64,
    bootstrap: Option<BootSummary>,
    contour: GridOut<'a>,
}

pub fn contour(mut a: ContourArgs) -> Result<Flags> {
    out_dir(&a.common.out)?;
    let mut flags = Flags::new();
    let spec = a.grid.spec();
    let (grid, tau, s2, var_w, bootstrap) = match (a.tau, &a.data) {
        (Some(tau), _) => {
            let (s2, var_w) = (a.sigma2.unwrap_or_default(), a.var_w.unwrap_or_default());
            (contour_grid(tau, s2, var_w, &spec).context("sensitivity: contour")?, tau, s2, var_w, None)
        }
        (None, Some(data)) => {
            let ds = load_dataset(data, a.schema.as_deref(), &a.modifiers, a.adjusters.as_deref())?;
            let ws = fit_weights(&ds, &a.weights)?;
            flags.extend(ws.meta.warnings());
            let report = estimate_report(&ds, &ws, a.variance.route()).context("estimators")?;
            let s2 = sigma2_tau_bound(report.var_y1, report.var_y0, a.sigma_mode.into()).context("sensitivity")?;
            let var_w = sample_variance(&ws.w);
            let mut grid = contour_grid(report.tau_hat, s2, var_w, &spec).context("sensitivity: contour")?;
            let mut boot = None;
            if a.boot > 0 {
                let plan = BootstrapPlan::new(a.boot, resolve_seed(&mut a.common.seed));
                let (b, cis) =
                    adjusted_ci_grid(&ds, &plan, &a.weights.config(), s2, &grid, a.common.alpha).context("bootstrap")?;
                grid = grid.with_coverage(cis.covers_zero, report.tau_hat).context("bootstrap")?;
                boot = Some(BootSummary::new(&b, a.boot, &mut flags));
            }
            (grid, report.tau_hat, s2, var_w, boot)
        }
        (None, None) => bail!("give --data or --tau/--sigma2/--var-w"),
    };
    write_grid(&a.common.out, &grid)?;
    let out = ContourOut { tau_hat: tau, sigma2_tau_max: s2, var_w, bootstrap, contour: GridOut::new(&grid) };
    let path = write_report(&a.common.out, "contour.json", "contour", &a, &out, &flags)?;
    println!("{} cells, {} kill-curve points  ({})", grid.n_cells(), grid.kill_curve.len(), path.display());
    Ok(flags)
}

#[derive(Serialize)]
struct StudyRow {
    study: u32,
    n: usize,
    max_abs_smd: f64,
    included: bool,
    reason: Option<String>,
    estimate: Option<f64>,
    sd: Option<f64>,
}

#[derive(Serialize)]
struct WaldOut {
    statistic: f64,
    df: usize,
    p_value: f64,
    estimates: Vec<f64>,
    sds: Vec<f64>,
    suggested_alphas: [f64; 3],
    studies: Vec<StudyRow>,
}

pub fn wald(mut a: WaldArgs) -> Result<Flags> {
    out_dir(&a.common.out)?;
    let mut flags = Flags::new();
    let mut studies = Vec::new();
    let input: WaldInput<f64> = if let Some(path) = &a.input {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).context("wald input")?
    } else if let Some(data) = &a.data {
        let seed = resolve_seed(&mut a.common.seed);
        let ds = load_dataset(data, a.schema.as_deref(), &a.modifiers, a.adjusters.as_deref())?;
        let smd = max_abs_smd(&summarize_smd(&ds));
        let cfg = a.weights.config();
        let (mut estimates, mut sds) = (Vec::new(), Vec::new());
        for s in ds.study_ids() {
            let n = ds.study_sizes()[&s];
            let m = smd.get(&s).copied().unwrap_or(0.0);
            let mut row = StudyRow { study: s, n, max_abs_smd: m, included: false, reason: None, estimate: None, sd: None };
            if n < a.min_n {
                row.reason = Some(format!("n = {n} < {}", a.min_n));
            } else if a.max_smd.is_some_and(|limit| m >= limit) {
                row.reason = Some(format!("max |SMD| = {m:.3} >= {}", a.max_smd.unwrap_or_default()));
            } else {
                let (est, ws, sub) =
                    estimate_pate_single_study(&ds, s, &cfg).with_context(|| format!("estimators: study {s}"))?;
                flags.extend(ws.meta.warnings().into_iter().map(|w| format!("study {s}: {w}")));
                let plan = BootstrapPlan::new(a.boot, derive_seed(seed, u64::from(s), streams::BOOTSTRAP));
                let b = bootstrap_estimate(&sub, &plan, &cfg, a.common.alpha)
                    .with_context(|| format!("bootstrap: study {s}"))?;
                if b.dropped > 0 {
                    flags.push(format!("bootstrap: study {s} dropped {} of {} replicates", b.dropped, a.boot));
                }
                estimates.push(est.tau_hat);
                sds.push(b.sd);
                row.included = true;
                row.estimate = Some(est.tau_hat);
                row.sd = Some(b.sd);
            }
            studies.push(row);
        }
        WaldInput { estimates, sds }
    } else {
        ensure!(!a.estimates.is_empty(), "give --estimates and --sds, --input, or --data");
        WaldInput { estimates: a.estimates.clone(), sds: a.sds.clone() }
    };
    let r = wald_test(&input).context("testing")?;
    let out = WaldOut {
        statistic: r.statistic,
        df: r.df,
        p_value: r.p_value,
        estimates: r.estimates,
        sds: r.sds,
        suggested_alphas: SUGGESTED_ALPHAS,
        studies,
    };
    let path = write_report(&a.common.out, "wald.json", "wald", &a, &out, &flags)?;
    println!("statistic = {:.4}  df = {}  p = {:.4}  ({})", out.statistic, out.df, out.p_value, path.display());
    Ok(flags)
}

fn sim_config(n: usize, k: f64, seed: u64, s: &SimArgs) -> SimConfig {
    SimConfig {
        n,
        k,
        seed,
        selection_log_or: s.selection_log_or,
        correlation: s.correlation,
        include_withheld: s.include_withheld,
        ..Default::default()
    }
}

#[derive(Serialize)]
struct SimulateOut {
    exact_pate: f64,
    intercepts: gensens::simulation::Intercepts,
    n_units: usize,
    n_target: usize,
    study_sizes: BTreeMap<u32, usize>,
    data: &'static str,
    schema: &'static str,
}

pub fn simulate(mut a: SimulateArgs) -> Result<Flags> {
    let seed = resolve_seed(&mut a.seed);
    out_dir(&a.out)?;
    let cfg = sim_config(a.n, a.k, seed, &a.sim);
    let icpt = solve_intercepts(&cfg).context("simulation")?;
    let rep = generate_replicate::<f64>(&cfg, &icpt, a.rep).context("simulation")?;
    let ds = &rep.dataset;
    write_csv_to(ds, create(&a.out.join("data.csv"))?)?;
    let mut schema = serde_json::to_string_pretty(&Schema::for_dataset(ds))?;
    schema.push('\n');
    std::fs::write(a.out.join("schema.json"), schema)?;
    let out = SimulateOut {
        exact_pate: exact_dgp_pate(&cfg).context("simulation")?,
        intercepts: icpt,
        n_units: ds.n_units(),
        n_target: ds.n_target(),
        study_sizes: ds.study_sizes().iter().filter(|(s, _)| **s > 0).map(|(s, n)| (*s, *n)).collect(),
        data: "data.csv",
        schema: "schema.json",
    };
    let path = write_report(&a.out, "truth.json", "simulate", &a, &out, &[])?;
    println!("{} units, exact PATE = {:.6}  ({})", out.n_units, out.exact_pate, path.display());
    Ok(Flags::new())
}

pub fn power(mut a: PowerArgs) -> Result<Flags> {
    let seed = resolve_seed(&mut a.seed);
    out_dir(&a.out)?;
    ensure!(a.reps > 0 && a.boot > 1, "need --reps >= 1 and --boot >= 2");
    let base = SimConfig { replications: a.reps, bootstrap: a.boot, ..sim_config(1000, 0.0, seed, &a.sim) };
    let rows = run_power_study(&base, &a.n, &a.k, &a.alpha).context("simulation")?;
    write_power_csv(&rows, create(&a.out.join("power.csv"))?)?;
    let mut flags = Flags::new();
    let mut seen = std::collections::BTreeSet::new();
    for r in &rows {
        if r.failures > 0 && seen.insert((r.n, r.k.to_bits())) {
            flags.push(format!("power: n = {}, k = {}: {} of {} replicates failed", r.n, r.k, r.failures, r.replicates));
        }
    }
    write_report(&a.out, "power.json", "power", &a, &rows, &flags)?;
    println!("{:>6} {:>6} {:>6} {:>10}", "n", "k", "alpha", "rate");
    for r in &rows {
        println!("{:>6} {:>6} {:>6} {:>10.4}", r.n, r.k, r.alpha, r.rejection_rate);
    }
    Ok(flags)
}

pub fn oracle(a: OracleArgs) -> Result<Flags> {
    out_dir(&a.out)?;
    let mut pops: Vec<DiscretePopulation> = match a.suite.as_str() {
        "default" => bundled_populations().context("oracle")?,
        "none" => Vec::new(),
        other => bail!("unknown suite `{other}` (use `default` or `none`)"),
    };
    for p in &a.population {
        let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        pops.push(DiscretePopulation::from_json(&text).with_context(|| format!("oracle: {}", p.display()))?);
    }
    ensure!(!pops.is_empty(), "no populations to check");
    let entries: Vec<SuiteEntry> =
        pops.iter().map(|p| check_population(p).with_context(|| format!("oracle: {}", p.name()))).collect::<Result<_>>()?;
    write_report(&a.out, "oracle.json", "oracle", &a, &entries, &[])?;
    for e in &entries {
        println!(
            "{} {:<28} bias = {:+.6e}  worst residual = {:.1e}  A5 {}",
            if e.passed { "PASS" } else { "FAIL" },
            e.report.name,
            e.report.exact_bias,
            e.report.worst_residual(),
            if e.expect_a5 { "holds" } else { "violated" }
        );
    }
    let failed: Vec<&str> = entries.iter().filter(|e| !e.passed).map(|e| e.report.name.as_str()).collect();
    ensure!(failed.is_empty(), "oracle checks failed for {}", failed.join(", "));
    Ok(Flags::new())
}
