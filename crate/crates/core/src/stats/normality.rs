use serde::{Deserialize, Serialize};

use super::sample::SampleMatrix;
use crate::error::Result;
use crate::special::{chi_square_sf, normal_sf};

/// Mardia's multivariate skewness and kurtosis tests.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mardia {
    /// `b_{1,d}`
    pub b1: f64,
    /// `M·b_{1,d}/6`, asymptotically χ² with `d(d+1)(d+2)/6` degrees of freedom.
    pub skewness_stat: f64,
    /// `b_{2,d}`, asymptotically `N(d(d+2), 8d(d+2)/M)`.
    pub kurtosis_stat: f64,
    /// Standardized `b_{2,d}`.
    pub kurtosis_z: f64,
    pub skew_pvalue: f64,
    /// Two-sided.
    pub kurt_pvalue: f64,
}

impl Mardia {
    /// Both tests fail to reject at level `alpha`.
    pub fn passes(&self, alpha: f64) -> bool {
        self.skew_pvalue > alpha && self.kurt_pvalue > alpha
    }
}

/// Mardia's tests after whitening by the maximum-likelihood covariance.
///
/// `b_{1,d} = M⁻²Σ_{a,b}(z_a·z_b)³` is evaluated through the equivalent third
/// moment tensor `Σ_{ijk}(M⁻¹Σ_a z_ai z_aj z_ak)²`, which is linear in `M`.
pub fn mardia(samples: &SampleMatrix) -> Result<Mardia> {
    let d = samples.dim();
    let m = samples.len();
    let inv_root = samples
        .covariance_mle()
        .inverse_checked("sample covariance")?
        .sqrt_psd()?;
    let mu = samples.mean();
    let mut third = vec![0.0; d * d * d];
    let mut b2 = 0.0;
    let mut centered = vec![0.0; d];
    let mut z = vec![0.0; d];
    for row in samples.rows() {
        for i in 0..d {
            centered[i] = row[i] - mu[i];
        }
        for i in 0..d {
            z[i] = (0..d).map(|k| inv_root.get(i, k) * centered[k]).sum();
        }
        let r2: f64 = z.iter().map(|v| v * v).sum();
        b2 += r2 * r2;
        for i in 0..d {
            for j in 0..d {
                let zij = z[i] * z[j];
                for k in 0..d {
                    third[(i * d + j) * d + k] += zij * z[k];
                }
            }
        }
    }
    let mf = m as f64;
    let b1: f64 = third.iter().map(|t| (t / mf).powi(2)).sum();
    let b2 = b2 / mf;
    let df = (d * (d + 1) * (d + 2)) as f64 / 6.0;
    let dd2 = (d * (d + 2)) as f64;
    let skewness_stat = mf * b1 / 6.0;
    let kurtosis_z = (b2 - dd2) / (8.0 * dd2 / mf).sqrt();
    Ok(Mardia {
        b1,
        skewness_stat,
        kurtosis_stat: b2,
        kurtosis_z,
        skew_pvalue: chi_square_sf(skewness_stat, df),
        kurt_pvalue: (2.0 * normal_sf(kurtosis_z.abs())).min(1.0),
    })
}
