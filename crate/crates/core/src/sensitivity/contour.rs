//! Bias contour grid over (R², ρ), its kill curve and significance border.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{bias_from_params, SensitivityParams};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub r2_min: f64,
    pub r2_max: f64,
    pub r2_step: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub rho_step: f64,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { r2_min: 0.0, r2_max: 0.99, r2_step: 0.01, rho_min: -0.99, rho_max: 0.99, rho_step: 0.01 }
    }
}

fn axis<T: Scalar>(lo: f64, hi: f64, step: f64) -> Result<Vec<T>> {
    if !(step > 0.0) || !(hi >= lo) {
        return Err(Error::Config(format!("bad grid axis [{lo}, {hi}] step {step}")));
    }
    let n = ((hi - lo) / step + 1e-9).floor() as usize + 1;
    // Index times step, rounded to 12 digits, so 0.07 prints as 0.07.
    Ok((0..n).map(|i| T::lit(((lo + i as f64 * step) * 1e12).round() / 1e12)).collect())
}

impl GridSpec {
    pub fn r2_axis<T: Scalar>(&self) -> Result<Vec<T>> {
        let ax: Vec<T> = axis(self.r2_min, self.r2_max, self.r2_step)?;
        if self.r2_min < 0.0 || self.r2_max >= 1.0 {
            return Err(Error::Config("R² axis must lie in [0, 1)".into()));
        }
        Ok(ax)
    }

    pub fn rho_axis<T: Scalar>(&self) -> Result<Vec<T>> {
        if self.rho_min < -1.0 || self.rho_max > 1.0 {
            return Err(Error::Config("ρ axis must lie in [-1, 1]".into()));
        }
        axis(self.rho_min, self.rho_max, self.rho_step)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContourGrid<T> {
    pub r2_axis: Vec<T>,
    pub rho_axis: Vec<T>,
    /// Row-major, one row per R² value.
    pub bias_surface: Vec<T>,
    pub adjusted: Vec<T>,
    /// (R², ρ) points where the adjusted estimate is zero.
    pub kill_curve: Vec<(T, T)>,
    /// (R², ρ, bias) of the first cell per R² row whose CI covers zero.
    pub significance_border: Vec<(T, T, T)>,
    /// Per-cell coverage of zero by the bootstrap CI, when available.
    pub covers_zero: Option<Vec<bool>>,
}

impl<T: Scalar> ContourGrid<T> {
    pub fn n_cells(&self) -> usize {
        self.r2_axis.len() * self.rho_axis.len()
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        i * self.rho_axis.len() + j
    }

    /// Attaches per-cell CI coverage and derives the significance border.
    pub fn with_coverage(mut self, covers: Vec<bool>, tau_hat: T) -> Result<Self> {
        if covers.len() != self.n_cells() {
            return Err(Error::Alignment { expected: self.n_cells(), got: covers.len() });
        }
        self.significance_border = significance_border(&self, &covers, tau_hat)
            .into_iter()
            .map(|(i, j)| (self.r2_axis[i], self.rho_axis[j], self.bias_surface[self.cell(i, j)]))
            .collect();
        self.covers_zero = Some(covers);
        Ok(self)
    }

    /// `r2,rho,bias,adjusted,covers_zero`; the last column is empty without coverage.
    pub fn write_csv<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        out.write_record(["r2", "rho", "bias", "adjusted", "covers_zero"])?;
        for (i, r2) in self.r2_axis.iter().enumerate() {
            for (j, rho) in self.rho_axis.iter().enumerate() {
                let k = self.cell(i, j);
                let cov = self.covers_zero.as_ref().map(|c| c[k].to_string()).unwrap_or_default();
                out.write_record([
                    r2.to_string(),
                    rho.to_string(),
                    // + 0 turns -0 into 0
                    (self.bias_surface[k] + T::zero()).to_string(),
                    (self.adjusted[k] + T::zero()).to_string(),
                    cov,
                ])?;
            }
        }
        out.flush()?;
        Ok(())
    }

    /// Standalone SVG with the kill curve (solid) and significance border (dashed).
    pub fn to_svg(&self) -> String {
        let (w, h, m) = (640.0, 480.0, 60.0);
        let sx = |r2: f64| m + r2 * (w - 2.0 * m);
        let sy = |rho: f64| h - m - (rho + 1.0) / 2.0 * (h - 2.0 * m);
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{m}" y="{m}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            w - 2.0 * m,
            h - 2.0 * m
        );
        for k in 0..=4 {
            let t = k as f64 / 4.0;
            let (x, rho) = (sx(t), -1.0 + 2.0 * t);
            let y = sy(rho);
            let _ = writeln!(s, r#"<line x1="{x}" y1="{}" x2="{x}" y2="{}" stroke="black"/>"#, h - m, h - m + 5.0);
            let _ = writeln!(s, r#"<text x="{x}" y="{}" text-anchor="middle">{t:.2}</text>"#, h - m + 20.0);
            let _ = writeln!(s, r#"<line x1="{}" y1="{y}" x2="{m}" y2="{y}" stroke="black"/>"#, m - 5.0);
            let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{rho:.1}</text>"#, m - 8.0, y + 4.0);
        }
        let _ = writeln!(s, r#"<line x1="{m}" y1="{0}" x2="{1}" y2="{0}" stroke="gray" stroke-dasharray="2,3"/>"#, sy(0.0), w - m);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">R²_ε</text>"#, w / 2.0, h - 15.0);
        let _ = writeln!(
            s,
            r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">ρ_ετ</text>"#,
            h / 2.0
        );
        let poly = |pts: Vec<(f64, f64)>, style: &str, s: &mut String| {
            if pts.is_empty() {
                return;
            }
            let coords: Vec<String> = pts.iter().map(|&(a, b)| format!("{:.2},{:.2}", sx(a), sy(b))).collect();
            let _ = writeln!(s, r#"<polyline points="{}" fill="none" {style}/>"#, coords.join(" "));
        };
        poly(
            self.kill_curve.iter().map(|&(a, b)| (a.as_f64(), b.as_f64())).collect(),
            r#"stroke="blue" stroke-width="2""#,
            &mut s,
        );
        poly(
            self.significance_border.iter().map(|&(a, b, _)| (a.as_f64(), b.as_f64())).collect(),
            r#"stroke="red" stroke-width="2" stroke-dasharray="6,4""#,
            &mut s,
        );
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="blue">adjusted estimate = 0</text>"#, w - m - 170.0, m - 25.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" fill="red">CI covers 0</text>"#, w - m - 170.0, m - 10.0);
        s.push_str("</svg>\n");
        s
    }
}

/// Bias and adjusted estimates over the grid, with the kill curve refined by bisection.
pub fn contour_grid<T: Scalar>(tau_hat: T, sigma2_tau_max: T, var_w: T, spec: &GridSpec) -> Result<ContourGrid<T>> {
    let r2_axis: Vec<T> = spec.r2_axis()?;
    let rho_axis: Vec<T> = spec.rho_axis()?;
    let mut bias_surface = Vec::with_capacity(r2_axis.len() * rho_axis.len());
    for &r2 in &r2_axis {
        for &rho in &rho_axis {
            bias_surface.push(bias_from_params(SensitivityParams::new(r2, rho, sigma2_tau_max), var_w)?);
        }
    }
    let adjusted: Vec<T> = bias_surface.iter().map(|&b| tau_hat - b).collect();
    let mut kill_curve = Vec::new();
    let nr = rho_axis.len();
    for (i, &r2) in r2_axis.iter().enumerate() {
        let row = &adjusted[i * nr..(i + 1) * nr];
        if row.iter().all(|&a| a == T::zero()) {
            continue;
        }
        for j in 0..nr.saturating_sub(1) {
            let (a, b) = (row[j], row[j + 1]);
            if a == T::zero() {
                kill_curve.push((r2, rho_axis[j]));
                break;
            }
            if a * b < T::zero() {
                let adj = |rho: T| -> Result<T> {
                    Ok(tau_hat - bias_from_params(SensitivityParams::new(r2, rho, sigma2_tau_max), var_w)?)
                };
                let (mut lo, mut hi) = (rho_axis[j], rho_axis[j + 1]);
                let mut f_lo = a;
                for _ in 0..200 {
                    let mid = (lo + hi) / T::lit(2.0);
                    if mid == lo || mid == hi {
                        break;
                    }
                    let f_mid = adj(mid)?;
                    if f_mid == T::zero() {
                        lo = mid;
                        hi = mid;
                        break;
                    }
                    if (f_mid < T::zero()) == (f_lo < T::zero()) {
                        lo = mid;
                        f_lo = f_mid;
                    } else {
                        hi = mid;
                    }
                }
                kill_curve.push((r2, (lo + hi) / T::lit(2.0)));
                break;
            }
        }
        if nr > 0 && row[nr - 1] == T::zero() && kill_curve.last().map(|k| k.0) != Some(r2) {
            kill_curve.push((r2, rho_axis[nr - 1]));
        }
    }
    Ok(ContourGrid {
        r2_axis,
        rho_axis,
        bias_surface,
        adjusted,
        kill_curve,
        significance_border: Vec::new(),
        covers_zero: None,
    })
}

/// Per R² row, the first (i, j) cell moving from ρ = 0 toward sign(τ̂) whose CI covers zero.
pub fn significance_border<T: Scalar>(grid: &ContourGrid<T>, covers: &[bool], tau_hat: T) -> Vec<(usize, usize)> {
    if tau_hat == T::zero() || grid.rho_axis.is_empty() {
        return Vec::new();
    }
    let start = grid
        .rho_axis
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.abs().partial_cmp(&b.1.abs()).expect("finite axis"))
        .map(|(j, _)| j)
        .expect("non-empty axis");
    let nr = grid.rho_axis.len();
    let order: Vec<usize> = if tau_hat > T::zero() { (start..nr).collect() } else { (0..=start).rev().collect() };
    let mut out = Vec::new();
    for i in 0..grid.r2_axis.len() {
        if let Some(&j) = order.iter().find(|&&j| covers[grid.cell(i, j)]) {
            out.push((i, j));
        }
    }
    out
}
