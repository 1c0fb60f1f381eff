use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::{Matrix, SymMatrix};
use crate::error::{Error, Result};

/// `M × d` array of replica vectors, one row per replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMatrix {
    m: usize,
    d: usize,
    data: Vec<f64>,
    pub t: f64,
    pub r: f64,
    pub seed: u64,
}

impl SampleMatrix {
    /// Wraps row-major data; requires at least two finite rows.
    pub fn new(d: usize, data: Vec<f64>) -> Result<Self> {
        if d == 0 || !data.len().is_multiple_of(d) {
            return Err(Error::config(format!(
                "sample data of length {} does not split into rows of {d}",
                data.len()
            )));
        }
        let m = data.len() / d;
        if m < 2 {
            return Err(Error::config(format!("need at least 2 samples, got {m}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("sample contains non-finite values"));
        }
        Ok(SampleMatrix {
            m,
            d,
            data,
            t: f64::NAN,
            r: f64::NAN,
            seed: 0,
        })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::config("sample rows have different lengths"));
        }
        Self::new(d, rows.concat())
    }

    pub fn with_meta(mut self, t: f64, r: f64, seed: u64) -> Self {
        self.t = t;
        self.r = r;
        self.seed = seed;
        self
    }

    pub fn len(&self) -> usize {
        self.m
    }

    pub fn is_empty(&self) -> bool {
        self.m == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.data[k * self.d..(k + 1) * self.d]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.rows().map(|r| r[i]).collect()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut mu = vec![0.0; self.d];
        for r in self.rows() {
            for (a, b) in mu.iter_mut().zip(r) {
                *a += b;
            }
        }
        mu.iter_mut().for_each(|v| *v /= self.m as f64);
        mu
    }

    /// Centered second moments divided by `M − ddof`.
    fn centered_cov(&self, ddof: usize) -> SymMatrix {
        let mu = self.mean();
        let d = self.d;
        let mut c = Matrix::zeros(d, d);
        for r in self.rows() {
            for i in 0..d {
                let di = r[i] - mu[i];
                for j in i..d {
                    c.data[i * d + j] += di * (r[j] - mu[j]);
                }
            }
        }
        let denom = (self.m - ddof) as f64;
        for i in 0..d {
            for j in i..d {
                let v = c.data[i * d + j] / denom;
                c.data[i * d + j] = v;
                c.data[j * d + i] = v;
            }
        }
        SymMatrix::symmetrized(&c)
    }

    /// Unbiased sample covariance.
    pub fn covariance(&self) -> SymMatrix {
        self.centered_cov(1)
    }

    /// Maximum-likelihood covariance (divisor `M`).
    pub fn covariance_mle(&self) -> SymMatrix {
        self.centered_cov(0)
    }

    /// Raw second moments `E[X_i X_j]` (no centering) with their standard errors.
    pub fn second_moments(&self) -> (Matrix, Matrix) {
        let d = self.d;
        let mut est = Matrix::zeros(d, d);
        let mut se = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let prods: Vec<f64> = self.rows().map(|r| r[i] * r[j]).collect();
                let (mu, s) = mean_se(&prods);
                est.set(i, j, mu);
                se.set(i, j, s);
            }
        }
        (est, se)
    }

    /// Projection `X·θ` of every row.
    pub fn project(&self, theta: &[f64]) -> Vec<f64> {
        self.rows().map(|r| r.iter().zip(theta).map(|(a, b)| a * b).sum()).collect()
    }
}

/// Sample mean and its standard error `s/√n` (zero SE for fewer than two values).
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

/// Unbiased sample variance and its standard error `√((m4 − s⁴(n−3)/(n−1))/n)`.
pub fn variance_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.len() < 2 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let m4 = values.iter().map(|v| (v - mean).powi(4)).sum::<f64>() / n;
    let se2 = (m4 - var * var * (n - 3.0) / (n - 1.0)) / n;
    (var, se2.max(0.0).sqrt())
}

/// Sample covariance `Ĉov(X_i, X_j)` with standard errors from the delta method
/// on the centered products.
pub fn covariance_se(samples: &SampleMatrix) -> (SymMatrix, Matrix) {
    let cov = samples.covariance();
    let mu = samples.mean();
    let d = samples.dim();
    let mut se = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = samples.rows().map(|r| (r[i] - mu[i]) * (r[j] - mu[j])).collect();
            se.set(i, j, mean_se(&prods).1);
        }
    }
    (cov, se)
}

/// `n` draws from `N(0, C)` as `C^{1/2}·z`.
pub fn gaussian_sample(c: &SymMatrix, n: usize, seed: u64) -> Result<SampleMatrix> {
    let root = c.sqrt_psd()?;
    let d = c.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut z = vec![0.0; d];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for v in z.iter_mut() {
            *v = rng.sample(StandardNormal);
        }
        for i in 0..d {
            data.push((0..d).map(|k| root.get(i, k) * z[k]).sum());
        }
    }
    Ok(SampleMatrix::new(d, data)?.with_meta(f64::NAN, f64::NAN, seed))
}
