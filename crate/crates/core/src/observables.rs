//! Spatial averages, η curves and the covariance quadratures built on them.
//!
//! All η-dependent integrals treat η as piecewise linear between its grid
//! times and integrate each piece against the kernel by Gauss–Legendre in the
//! variable `w = √(t − r)`. The substitution absorbs the `√(t − r)` behaviour of
//! the window kernels at `r = t`, and the rule is exact for the plain integral
//! `∫η dr` (trapezoid weights).

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{heat_kernel, window_deficit, DiffusionField};
use crate::solver::{FieldState, Grid};
use crate::stats::linalg::{Matrix, SymMatrix};

/// `F_i = (1/√R)(Σ_{|x_ℓ| ≤ R} u_i(x_ℓ)·dx − 2R)` for every component.
///
/// `R` must be a multiple of `dx` within the truncation margin; the window
/// then holds exactly `2R/dx` nodes and the sum is taken over `u − 1`.
pub fn spatial_average(state: &FieldState, grid: &Grid, r: f64) -> Result<Vec<f64>> {
    if state.nx != grid.nx() {
        return Err(Error::config("state does not live on this grid"));
    }
    let range = grid.window_range(r)?;
    let mut out = vec![0.0; state.d];
    average_into(&state.values, state.nx, range, grid.dx(), r, &mut out);
    Ok(out)
}

pub(crate) fn average_into(values: &[f64], nx: usize, range: std::ops::Range<usize>, dx: f64, r: f64, out: &mut [f64]) {
    let scale = dx / r.sqrt();
    for (i, o) in out.iter_mut().enumerate() {
        let comp = &values[i * nx..(i + 1) * nx];
        *o = scale * comp[range.clone()].iter().map(|v| v - 1.0).sum::<f64>();
    }
}

/// `F^R(t)` of one replica at every recorded time and radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AverageSample {
    pub replica_id: u64,
    pub times: Vec<f64>,
    pub radii: Vec<f64>,
    pub d: usize,
    /// `f[(a·radii.len() + b)·d + i]`
    pub f: Vec<f64>,
}

impl AverageSample {
    pub fn f(&self, a: usize, b: usize) -> &[f64] {
        let k = (a * self.radii.len() + b) * self.d;
        &self.f[k..k + self.d]
    }

    /// `G^R(t) = √R·F^R(t)`.
    pub fn g(&self, a: usize, b: usize) -> Vec<f64> {
        let s = self.radii[b].sqrt();
        self.f(a, b).iter().map(|v| v * s).collect()
    }
}

/// Where an η curve came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EtaProvenance {
    MonteCarlo,
    ClosedFormConstant,
    VolterraPam,
}

impl EtaProvenance {
    fn tag(self) -> &'static str {
        match self {
            EtaProvenance::MonteCarlo => "monte-carlo",
            EtaProvenance::ClosedFormConstant => "closed-form-constant",
            EtaProvenance::VolterraPam => "volterra-pam",
        }
    }
}

/// Tabulated `η^(k)_ij(r) = E[σ_ik(u(r,x))σ_jk(u(r,x))]` on a time grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EtaCurve {
    pub times: Vec<f64>,
    pub m: usize,
    pub d: usize,
    /// `values[((a·m + k)·d + i)·d + j]`
    pub values: Vec<f64>,
    /// Standard errors, same layout; zero for deterministic curves.
    pub se: Vec<f64>,
    pub provenance: EtaProvenance,
}

impl EtaCurve {
    pub fn new(
        times: Vec<f64>,
        m: usize,
        d: usize,
        values: Vec<f64>,
        se: Vec<f64>,
        provenance: EtaProvenance,
    ) -> Result<Self> {
        if times.is_empty() || times.windows(2).any(|w| !(w[1] > w[0])) || !(times[0] >= 0.0) {
            return Err(Error::config("η time grid must be nonempty, nonnegative and strictly increasing"));
        }
        let len = times.len() * m * d * d;
        if values.len() != len || se.len() != len {
            return Err(Error::config(format!(
                "η table has {} values and {} SEs, expected {len}",
                values.len(),
                se.len()
            )));
        }
        if values.iter().chain(&se).any(|v| !v.is_finite()) {
            return Err(Error::numerical("η table contains non-finite entries"));
        }
        Ok(EtaCurve {
            times,
            m,
            d,
            values,
            se,
            provenance,
        })
    }

    /// `η^(k)_ij = S_ik S_jk` at every time, for constant σ = S (d × m).
    pub fn constant(s: &Matrix, times: Vec<f64>) -> Result<Self> {
        let (d, m) = (s.rows, s.cols);
        let mut block = vec![0.0; m * d * d];
        for k in 0..m {
            for i in 0..d {
                for j in 0..d {
                    block[(k * d + i) * d + j] = s.get(i, k) * s.get(j, k);
                }
            }
        }
        let values = block.repeat(times.len());
        let se = vec![0.0; values.len()];
        Self::new(times, m, d, values, se, EtaProvenance::ClosedFormConstant)
    }

    /// Scalar curve `η(r) = f(r)` with d = m = 1.
    pub fn scalar(times: Vec<f64>, values: Vec<f64>, provenance: EtaProvenance) -> Result<Self> {
        let se = vec![0.0; values.len()];
        Self::new(times, 1, 1, values, se, provenance)
    }

    #[inline]
    pub fn index(&self, a: usize, k: usize, i: usize, j: usize) -> usize {
        ((a * self.m + k) * self.d + i) * self.d + j
    }

    pub fn value(&self, a: usize, k: usize, i: usize, j: usize) -> f64 {
        self.values[self.index(a, k, i, j)]
    }

    /// `Σ_k η^(k)_ij(r_a)` as a d × d matrix.
    pub fn channel_sum(&self, a: usize) -> Matrix {
        let d = self.d;
        let mut out = Matrix::zeros(d, d);
        for k in 0..self.m {
            for i in 0..d {
                for j in 0..d {
                    out.data[i * d + j] += self.value(a, k, i, j);
                }
            }
        }
        out
    }

    pub fn t_max(&self) -> f64 {
        *self.times.last().expect("nonempty")
    }

    /// Linear interpolation of `Σ_k η^(k)` at time `r`.
    pub fn interpolate_sum(&self, r: f64) -> Matrix {
        let n = self.times.len();
        if n == 1 || r <= self.times[0] {
            return self.channel_sum(0);
        }
        if r >= self.times[n - 1] {
            return self.channel_sum(n - 1);
        }
        let b = self.times.partition_point(|&s| s <= r).min(n - 1);
        let a = b - 1;
        let lam = (r - self.times[a]) / (self.times[b] - self.times[a]);
        let (lo, hi) = (self.channel_sum(a), self.channel_sum(b));
        let mut out = lo.clone();
        for (o, (x, y)) in out.data.iter_mut().zip(lo.data.iter().zip(&hi.data)) {
            *o = (1.0 - lam) * x + lam * y;
        }
        out
    }

    /// Checks the symmetry and positive semidefiniteness of every `(η^(k)_ij)`
    /// block, with tolerance `tol` on asymmetry and negative eigenvalues.
    pub fn check_structure(&self, tol: f64) -> Result<()> {
        let d = self.d;
        for a in 0..self.times.len() {
            for k in 0..self.m {
                let mut block = Matrix::zeros(d, d);
                for i in 0..d {
                    for j in 0..d {
                        let v = self.value(a, k, i, j);
                        if (v - self.value(a, k, j, i)).abs() > tol {
                            return Err(Error::numerical(format!(
                                "η^({k}) is not symmetric at r={}",
                                self.times[a]
                            )));
                        }
                        block.set(i, j, v);
                    }
                }
                let lmin = SymMatrix::symmetrized(&block).min_eigenvalue();
                if lmin < -tol {
                    return Err(Error::numerical(format!(
                        "η^({k}) at r={} has negative eigenvalue {lmin:e}",
                        self.times[a]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Columnar text: header `r,k,i,j,value,se`, one row per entry.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("r,k,i,j,value,se\n");
        for (a, &r) in self.times.iter().enumerate() {
            for k in 0..self.m {
                for i in 0..self.d {
                    for j in 0..self.d {
                        let idx = self.index(a, k, i, j);
                        let _ = writeln!(s, "{r:.16e},{k},{i},{j},{:.16e},{:.16e}", self.values[idx], self.se[idx]);
                    }
                }
            }
        }
        s
    }

    /// Parses the columnar text written by [`EtaCurve::to_csv`].
    pub fn from_csv(text: &str, provenance: EtaProvenance) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or_else(|| Error::config("empty η table"))?;
        if header.trim() != "r,k,i,j,value,se" {
            return Err(Error::config(format!("unexpected η table header '{header}'")));
        }
        let mut rows = Vec::new();
        for (n, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            if f.len() != 6 {
                return Err(Error::config(format!("η table row {} has {} fields", n + 2, f.len())));
            }
            let bad = || Error::config(format!("η table row {} does not parse", n + 2));
            let real = |s: &str| s.parse::<f64>().map_err(|_| bad());
            let index = |s: &str| s.parse::<usize>().map_err(|_| bad());
            rows.push((real(f[0])?, index(f[1])?, index(f[2])?, index(f[3])?, real(f[4])?, real(f[5])?));
        }
        let mut times: Vec<f64> = rows.iter().map(|r| r.0).collect();
        times.dedup();
        let m = rows.iter().map(|r| r.1).max().map_or(0, |v| v + 1);
        let d = rows.iter().map(|r| r.2.max(r.3)).max().map_or(0, |v| v + 1);
        if rows.len() != times.len() * m * d * d {
            return Err(Error::config("η table is not a complete (r, k, i, j) grid"));
        }
        let mut values = vec![f64::NAN; rows.len()];
        let mut se = vec![f64::NAN; rows.len()];
        for (a, chunk) in rows.chunks(m * d * d).enumerate() {
            for &(r, k, i, j, v, s) in chunk {
                if r != times[a] {
                    return Err(Error::config("η table rows are not grouped by time"));
                }
                let idx = ((a * m + k) * d + i) * d + j;
                values[idx] = v;
                se[idx] = s;
            }
        }
        Self::new(times, m, d, values, se, provenance)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?, EtaProvenance::MonteCarlo)
    }

    pub fn provenance_tag(&self) -> &'static str {
        self.provenance.tag()
    }
}

const GL_NODES: [f64; 8] = [
    -0.960_289_856_497_536_2,
    -0.796_666_477_413_626_7,
    -0.525_532_409_916_329,
    -0.183_434_642_495_649_8,
    0.183_434_642_495_649_8,
    0.525_532_409_916_329,
    0.796_666_477_413_626_7,
    0.960_289_856_497_536_2,
];
const GL_WEIGHTS: [f64; 8] = [
    0.101_228_536_290_376_26,
    0.222_381_034_453_374_47,
    0.313_706_645_877_887_3,
    0.362_683_783_378_362,
    0.362_683_783_378_362,
    0.313_706_645_877_887_3,
    0.222_381_034_453_374_47,
    0.101_228_536_290_376_26,
];

/// Weights `w_a` with `∫_0^t η(r)·g(t − r) dr = Σ_a w_a η(r_a)` for η
/// piecewise linear on `times` (held constant before the first time).
pub fn quadrature_weights(times: &[f64], t: f64, g: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
    let n = times.len();
    if n == 0 {
        return Err(Error::config("empty η time grid"));
    }
    let t_max = times[n - 1];
    if !(t >= 0.0) || t > t_max * (1.0 + 1e-12) + 1e-14 {
        return Err(Error::config(format!(
            "time {t} lies outside the η grid [0, {t_max}]"
        )));
    }
    let t = t.min(t_max);
    let mut w = vec![0.0; n];
    // ∫_lo^hi φ(r) g(t − r) dr with r = t − s², for a linear φ given by its
    // values at the interval ends.
    let piece = |lo: f64, hi: f64, basis: &dyn Fn(f64) -> (f64, f64)| -> (f64, f64) {
        let (s_lo, s_hi) = ((t - hi).max(0.0).sqrt(), (t - lo).max(0.0).sqrt());
        let (mid, half) = (0.5 * (s_lo + s_hi), 0.5 * (s_hi - s_lo));
        let mut acc = (0.0, 0.0);
        for (x, wt) in GL_NODES.iter().zip(GL_WEIGHTS) {
            let s = mid + half * x;
            let r = t - s * s;
            let jac = 2.0 * s * half * wt * g(s * s);
            let (pa, pb) = basis(r);
            acc.0 += jac * pa;
            acc.1 += jac * pb;
        }
        acc
    };
    if times[0] > 0.0 {
        let hi = times[0].min(t);
        w[0] += piece(0.0, hi, &|_| (1.0, 0.0)).0;
    }
    for a in 0..n - 1 {
        let (ra, rb) = (times[a], times[a + 1]);
        if ra >= t {
            break;
        }
        let h = rb - ra;
        let hi = rb.min(t);
        let (pa, pb) = piece(ra, hi, &|r| ((rb - r) / h, (r - ra) / h));
        w[a] += pa;
        w[a + 1] += pb;
    }
    Ok(w)
}

fn covariance_from_weights(eta: &EtaCurve, w: &[f64]) -> SymMatrix {
    let d = eta.d;
    let mut c = Matrix::zeros(d, d);
    for (a, wa) in w.iter().enumerate() {
        if *wa == 0.0 {
            continue;
        }
        let s = eta.channel_sum(a);
        for (o, v) in c.data.iter_mut().zip(&s.data) {
            *o += 2.0 * wa * v;
        }
    }
    SymMatrix::symmetrized(&c)
}

/// `C_ij(t) = 2Σ_k ∫_0^t η^(k)_ij(r) dr`.
pub fn limit_covariance(eta: &EtaCurve, t: f64) -> Result<SymMatrix> {
    let w = quadrature_weights(&eta.times, t, |_| 1.0)?;
    Ok(covariance_from_weights(eta, &w))
}

/// Kernel of the prelimit covariance: `∫_0^{2R} p_{2s}(z)(2 − z/R) dz` at lag `s = t − r`.
pub fn prelimit_kernel(s: f64, r: f64) -> f64 {
    1.0 - window_deficit(2.0 * s, r)
}

/// `C^R_ij(t) = 2Σ_k ∫_0^t η^(k)_ij(r) ∫_0^{2R} p_{2t−2r}(z)(2 − z/R) dz dr`,
/// the exact covariance of `F^R(t)`.
pub fn prelimit_covariance(eta: &EtaCurve, t: f64, r: f64) -> Result<SymMatrix> {
    if !(r > 0.0) {
        return Err(Error::config(format!("radius must be positive, got {r}")));
    }
    let w = quadrature_weights(&eta.times, t, |s| prelimit_kernel(s, r))?;
    Ok(covariance_from_weights(eta, &w))
}

/// `C(t) − C^R(t)`, computed from the window deficit without cancellation.
pub fn covariance_gap(eta: &EtaCurve, t: f64, r: f64) -> Result<Matrix> {
    if !(r > 0.0) {
        return Err(Error::config(format!("radius must be positive, got {r}")));
    }
    let w = quadrature_weights(&eta.times, t, |s| window_deficit(2.0 * s, r))?;
    Ok(covariance_from_weights(eta, &w).matrix().clone())
}

/// Weights for `C^R(t)` (or `C(t)` when `r` is `None`) applied to a single η record.
pub fn covariance_weights(times: &[f64], t: f64, r: Option<f64>) -> Result<Vec<f64>> {
    match r {
        Some(r) => quadrature_weights(times, t, |s| prelimit_kernel(s, r)),
        None => quadrature_weights(times, t, |_| 1.0),
    }
}

/// Weights for `E[F^R_i(s)F^R_j(t)]`, `s ≤ t`, applied to a single η record:
/// `2Σ_k ∫_0^s η^(k)_ij(r)·(1/2R)∫∫_{[−R,R]²} p_{t+s−2r}(x − y) dx dy dr`,
/// or its limit `C(s)` when `r` is `None`.
pub fn cross_covariance_weights(times: &[f64], s: f64, t: f64, r: Option<f64>) -> Result<Vec<f64>> {
    if !(s <= t) {
        return Err(Error::config(format!("cross covariance needs s ≤ t, got s={s}, t={t}")));
    }
    match r {
        Some(r) if r > 0.0 => quadrature_weights(times, s, |lag| 1.0 - window_deficit(t - s + 2.0 * lag, r)),
        Some(r) => Err(Error::config(format!("radius must be positive, got {r}"))),
        None => quadrature_weights(times, s, |_| 1.0),
    }
}

/// `E[F^R(s)F^R(t)ᵀ]` for `s ≤ t` (its limit `C(s)` when `r` is `None`).
pub fn cross_covariance(eta: &EtaCurve, s: f64, t: f64, r: Option<f64>) -> Result<SymMatrix> {
    let w = cross_covariance_weights(&eta.times, s, t, r)?;
    Ok(covariance_from_weights(eta, &w))
}

/// `E[u_i(t,x)u_j(s,x+h)] = 1 + Σ_k ∫_0^{t∧s} η^(k)_ij(r)·p_{t+s−2r}(h) dr`.
///
/// Composite Simpson in `w` after `r = t∧s − w²`; η is interpolated linearly.
pub fn two_point_cov(eta: &EtaCurve, t: f64, s: f64, h: f64) -> Result<SymMatrix> {
    let d = eta.d;
    let mut out = Matrix::from_rows(d, d, vec![1.0; d * d])?;
    if !(t >= 0.0 && s >= 0.0) {
        return Err(Error::domain(format!("two-point covariance needs t, s ≥ 0, got t={t}, s={s}")));
    }
    let tau = t.min(s);
    if tau == 0.0 {
        return Ok(SymMatrix::symmetrized(&out));
    }
    if tau > eta.t_max() * (1.0 + 1e-12) + 1e-14 {
        return Err(Error::config(format!("time {tau} lies outside the η grid")));
    }
    let gap = t + s - 2.0 * tau;
    let wmax = tau.sqrt();
    let n = 4096;
    let hw = wmax / n as f64;
    for q in 0..=n {
        let w = q as f64 * hw;
        let coef = if q == 0 || q == n {
            1.0
        } else if q % 2 == 1 {
            4.0
        } else {
            2.0
        };
        let lag = gap + 2.0 * w * w;
        // 2w·p_lag(h), with the w → 0 limit taken explicitly when lag → 0
        let kern = if lag > 0.0 {
            2.0 * w * heat_kernel(lag, h)?
        } else if h == 0.0 {
            1.0 / std::f64::consts::PI.sqrt()
        } else {
            0.0
        };
        if kern == 0.0 {
            continue;
        }
        let e = eta.interpolate_sum(tau - w * w);
        for (o, v) in out.data.iter_mut().zip(&e.data) {
            *o += coef * hw / 3.0 * kern * v;
        }
    }
    Ok(SymMatrix::symmetrized(&out))
}

/// Monte Carlo estimate of η at the given times; see [`crate::ensemble::estimate_eta`].
pub fn estimate_eta(field: &DiffusionField, grid: &Grid, times: &[f64], replicas: usize, seed: u64) -> Result<EtaCurve> {
    crate::ensemble::estimate_eta(field, grid, times, replicas, seed, 1)
}
