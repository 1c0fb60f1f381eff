use serde::{Deserialize, Serialize};

use super::linalg::{Matrix, SymMatrix};
use crate::error::{Error, Result};

/// `Q(C^R, C)·‖C^R − C‖_HS` with
/// `Q = √d·min(‖(C^R)⁻¹‖_op‖C^R‖_op^{1/2}, ‖C⁻¹‖_op‖C‖_op^{1/2})`,
/// the Wasserstein distance bound between `N(0, C^R)` and `N(0, C)`.
pub fn gaussian_gap_bound(cr: &SymMatrix, c: &SymMatrix) -> Result<f64> {
    if cr.dim() != c.dim() {
        return Err(Error::config("covariance matrices have different dimensions"));
    }
    cr.check_psd("C^R")?;
    c.check_psd("C")?;
    let q_of = |a: &SymMatrix, name: &str| -> Result<f64> {
        let inv = a.inverse_checked(name)?;
        Ok(inv.op_norm() * a.op_norm().sqrt())
    };
    let q = (cr.dim() as f64).sqrt() * q_of(cr, "C^R")?.min(q_of(c, "C")?);
    Ok(q * cr.matrix().sub(c.matrix()).hs_norm())
}

/// Least-squares line through `(log R, log value)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

/// Fits `value ≈ e^{intercept}·R^{slope}` by ordinary least squares on logs.
pub fn rate_fit(points: &[(f64, f64)]) -> Result<RateFit> {
    if points.len() < 3 {
        return Err(Error::config(format!("rate fit needs at least 3 points, got {}", points.len())));
    }
    if let Some(p) = points.iter().find(|(r, v)| !(*r > 0.0) || !(*v > 0.0)) {
        return Err(Error::domain(format!("rate fit needs positive R and values, got {p:?}")));
    }
    let xs: Vec<f64> = points.iter().map(|p| p.0.ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::domain("rate fit needs at least two distinct R values"));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    // a flat series is fitted exactly by a zero slope; treat rounding-level spread as flat
    let scale: f64 = ys.iter().map(|y| y * y).sum::<f64>().max(1.0);
    let r2 = if ss_tot <= 1e-24 * scale { 1.0 } else { 1.0 - ss_res / ss_tot };
    Ok(RateFit { slope, intercept, r2 })
}

/// Smallest eigenvalue of a covariance matrix.
pub fn min_eigen_check(cr: &SymMatrix) -> f64 {
    cr.min_eigenvalue()
}

/// Entrywise `|A − B|` as a matrix (helper for tolerance tables).
pub fn abs_diff(a: &Matrix, b: &Matrix) -> Matrix {
    let mut d = a.sub(b);
    d.data.iter_mut().for_each(|v| *v = v.abs());
    d
}
