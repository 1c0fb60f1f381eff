//! Functional-CLT diagnostics on per-replica paths of the spatial average.

use serde::{Deserialize, Serialize};

use super::linalg::Matrix;
use super::sample::{mean_se, SampleMatrix};
use crate::error::{Error, Result};

/// Per-replica values of a d-vector process at a fixed set of times.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PathSamples {
    pub times: Vec<f64>,
    pub d: usize,
    /// `values[(replica·times.len() + a)·d + i]`
    pub values: Vec<f64>,
}

impl PathSamples {
    pub fn replicas(&self) -> usize {
        self.values.len() / (self.times.len() * self.d).max(1)
    }

    fn time_index(&self, t: f64) -> Result<usize> {
        self.times
            .iter()
            .position(|&s| (s - t).abs() <= 1e-9 * t.abs().max(1.0))
            .ok_or_else(|| Error::config(format!("time {t} is not among the recorded path times")))
    }

    /// The replica vectors at time `t`.
    pub fn at(&self, t: f64) -> Result<SampleMatrix> {
        let a = self.time_index(t)?;
        let nt = self.times.len();
        let mut data = Vec::with_capacity(self.replicas() * self.d);
        for r in 0..self.replicas() {
            let base = (r * nt + a) * self.d;
            data.extend_from_slice(&self.values[base..base + self.d]);
        }
        Ok(SampleMatrix::new(self.d, data)?.with_meta(t, f64::NAN, 0))
    }
}

/// Empirical increment moment and its normalization by `(R(t − s))^{p/2}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementMoment {
    /// `max_i E|G_i(t) − G_i(s)|^p`
    pub moment: f64,
    pub se: f64,
    /// Component attaining the maximum.
    pub component: usize,
    pub ratio: f64,
}

/// `E|G^R(t) − G^R(s)|^p` per component, maximized over components.
/// The ratio is defined as 0 when `s = t`.
pub fn increment_moment(paths: &PathSamples, s: f64, t: f64, p: f64, r: f64) -> Result<IncrementMoment> {
    if !(p > 0.0) || !(r > 0.0) {
        return Err(Error::config("increment moment needs p > 0 and R > 0"));
    }
    if t < s {
        return Err(Error::config(format!("increment moment needs s ≤ t, got s={s}, t={t}")));
    }
    let gs = paths.at(s)?;
    let gt = paths.at(t)?;
    let mut best = IncrementMoment {
        moment: 0.0,
        se: 0.0,
        component: 0,
        ratio: 0.0,
    };
    for i in 0..paths.d {
        let inc: Vec<f64> = gs
            .rows()
            .zip(gt.rows())
            .map(|(a, b)| (b[i] - a[i]).abs().powf(p))
            .collect();
        let (mu, se) = mean_se(&inc);
        if i == 0 || mu > best.moment {
            best = IncrementMoment {
                moment: mu,
                se,
                component: i,
                ratio: 0.0,
            };
        }
    }
    if t > s {
        best.ratio = best.moment / (r * (t - s)).powf(0.5 * p);
    }
    Ok(best)
}

/// Correlations `corr(F_i(t) − F_i(s), F_j(s))` with standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Orthogonality {
    pub corr: Matrix,
    pub se: Matrix,
}

impl Orthogonality {
    /// Largest `|corr|/se` over entries with positive SE.
    pub fn max_z(&self) -> f64 {
        self.corr
            .data
            .iter()
            .zip(&self.se.data)
            .filter(|(_, s)| **s > 0.0)
            .map(|(c, s)| c.abs() / s)
            .fold(0.0, f64::max)
    }
}

/// Sample correlation of increments `F(t) − F(s)` against the past value
/// `F(s)`; entries involving a constant component are 0 with SE 0.
/// SEs use `√((1 − ρ²)/(M − 2))`.
pub fn increment_orthogonality(f_s: &SampleMatrix, f_t: &SampleMatrix) -> Result<Orthogonality> {
    if f_s.len() != f_t.len() || f_s.dim() != f_t.dim() {
        return Err(Error::config("increment samples must have matching shapes"));
    }
    let m = f_s.len();
    if m < 3 {
        return Err(Error::config("increment orthogonality needs at least 3 replicas"));
    }
    let d = f_s.dim();
    let mut corr = Matrix::zeros(d, d);
    let mut se = Matrix::zeros(d, d);
    let past: Vec<Vec<f64>> = (0..d).map(|j| f_s.column(j)).collect();
    for i in 0..d {
        let inc: Vec<f64> = f_s.rows().zip(f_t.rows()).map(|(a, b)| b[i] - a[i]).collect();
        for (j, x) in past.iter().enumerate() {
            let rho = correlation(&inc, x);
            corr.set(i, j, rho);
            se.set(i, j, if rho == 0.0 && is_constant(x) { 0.0 } else { ((1.0 - rho * rho) / (m as f64 - 2.0)).sqrt() });
        }
    }
    Ok(Orthogonality { corr, se })
}

fn is_constant(x: &[f64]) -> bool {
    x.iter().all(|v| *v == x[0])
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        0.0
    } else {
        (sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0)
    }
}
