use gensens::special::chi2_sf;
use statrs::distribution::{ChiSquared, ContinuousCDF};

#[test]
fn survival_matches_statrs() {
    let mut worst = (0.0f64, 0, 0.0);
    for df in 1..=200usize {
        let reference = ChiSquared::new(df as f64).unwrap();
        let mut x = 0.0;
        while x <= 1e4 {
            let err = (chi2_sf(x, df).unwrap() - reference.sf(x)).abs();
            if err > worst.0 {
                worst = (err, df, x);
            }
            x = if x < 50.0 { x + 0.37 } else if x < 500.0 { x + 3.1 } else { x * 1.07 };
        }
    }
    assert!(worst.0 < 1e-12, "max abs error {:e} at df {} x {}", worst.0, worst.1, worst.2);
}

#[test]
fn survival_matches_statrs_near_the_mode() {
    // the series / continued-fraction switch sits at x/2 = df/2 + 1
    for df in 1..=200usize {
        let reference = ChiSquared::new(df as f64).unwrap();
        for dx in [-2.0, -1e-9, 0.0, 1e-9, 2.0, 2.0 + 1e-9] {
            let x = (df as f64 + dx).max(0.0);
            let err = (chi2_sf(x, df).unwrap() - reference.sf(x)).abs();
            assert!(err < 1e-12, "df {df} x {x}: {err:e}");
        }
    }
}
