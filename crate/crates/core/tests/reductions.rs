use gensens::data::{PooledDataset, UnitRecord};
use gensens::estimators::{hajek_moments, weighted_contrast};
use gensens::simulation::{generate_replicate, solve_intercepts, SimConfig};
use gensens::weights::{estimate_weights, DeconfoundingMethod, WeightConfig};
use proptest::prelude::*;

fn trial(ys: &[(bool, f64)], target: usize) -> PooledDataset<f64> {
    let mut records: Vec<UnitRecord<f64>> = ys
        .iter()
        .map(|&(a, y)| UnitRecord { study: 1, treatment: Some(a), outcome: Some(y), covariates: vec![0.0] })
        .collect();
    for _ in 0..target {
        records.push(UnitRecord { study: 0, treatment: None, outcome: None, covariates: vec![0.0] });
    }
    PooledDataset::from_records(records, vec!["x".into()], &[], &[]).unwrap()
}

#[test]
fn balanced_trial_with_unit_weights_is_difference_in_means() {
    let ys: Vec<(bool, f64)> = (0..200).map(|i| (i % 2 == 0, (i as f64 * 0.37).sin() * 10.0 + i as f64 / 7.0)).collect();
    let ds = trial(&ys, 50);
    let ones = vec![1.0; 200];
    let tau = weighted_contrast(&ds, &ones, &ones, &ones).unwrap();
    let mean = |a: bool| {
        let v: Vec<f64> = ys.iter().filter(|p| p.0 == a).map(|p| p.1).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert!((tau - (mean(true) - mean(false))).abs() < 1e-12);

    let cfg = WeightConfig { deconfounding: DeconfoundingMethod::Constant, ..Default::default() };
    let ws = estimate_weights(&ds, &cfg).unwrap();
    assert!(ws.w.iter().chain(&ws.lambda).chain(&ws.gamma).all(|&v| (v - 1.0).abs() < 1e-12));
}

#[test]
fn entropy_balancing_matches_target_means() {
    let cfg = SimConfig { n: 500, ..Default::default() };
    let icpt = solve_intercepts(&cfg).unwrap();
    for rep in 0..5 {
        let ds = generate_replicate::<f64>(&cfg, &icpt, rep).unwrap().dataset;
        let ws = estimate_weights(&ds, &WeightConfig::default()).unwrap();
        let total: f64 = ws.w.iter().sum();
        for j in ds.modifier_columns() {
            let target = ds.column(j, ds.target_units());
            let tm = target.iter().sum::<f64>() / target.len() as f64;
            let wm: f64 = ds.study_units().iter().zip(&ws.w).map(|(&i, w)| w * ds.value(i, j)).sum::<f64>() / total;
            assert!((wm - tm).abs() < 1e-8, "rep {rep} column {j}: {wm} vs {tm}");
        }
    }
}

fn plug_in_variance(ys: &[f64]) -> f64 {
    let m = ys.iter().sum::<f64>() / ys.len() as f64;
    ys.iter().map(|y| (y - m).powi(2)).sum::<f64>() / ys.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn hajek_variance_is_nonnegative(
        units in prop::collection::vec((any::<bool>(), -1e3f64..1e3, 0.01f64..0.99), 4..60),
    ) {
        let mut units = units;
        units[0].0 = true;
        units[1].0 = false;
        let ys: Vec<(bool, f64)> = units.iter().map(|u| (u.0, u.1)).collect();
        let ds = trial(&ys, 3);
        let prop: Vec<f64> = units.iter().map(|u| u.2).collect();
        let m = hajek_moments(&ds, &prop).unwrap();
        prop_assert!(m.var[0] >= 0.0 && m.var[1] >= 0.0);
    }

    #[test]
    fn hajek_under_constant_propensity_is_plug_in(
        units in prop::collection::vec((any::<bool>(), -1e3f64..1e3), 4..60),
        p in 0.05f64..0.95,
    ) {
        let mut units = units;
        units[0].0 = true;
        units[1].0 = false;
        let ds = trial(&units, 3);
        let m = hajek_moments(&ds, &vec![p; units.len()]).unwrap();
        for (arm, a) in [(0, false), (1, true)] {
            let ys: Vec<f64> = units.iter().filter(|u| u.0 == a).map(|u| u.1).collect();
            let want = plug_in_variance(&ys);
            prop_assert!((m.var[arm] - want).abs() <= 1e-10 * want.max(1.0), "{} vs {}", m.var[arm], want);
        }
    }
}
