//! Deterministic reference values: the exactly Gaussian constant-σ case, the
//! second moment of the linear equation `σ(u) = λu`, and the exact second
//! moment of the discrete scheme for affine scalar σ.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::observables::{limit_covariance, prelimit_covariance, EtaCurve, EtaProvenance};
use crate::solver::Grid;
use crate::stats::linalg::{Matrix, SymMatrix};

/// Limit and prelimit covariances of the constant-σ system, whose averages
/// are Wiener integrals and hence exactly Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantSigmaLaw {
    pub c: SymMatrix,
    pub cr: SymMatrix,
    pub exact_gaussian: bool,
}

/// `C = 2t·SSᵀ` and `C^R` from the same quadrature used for simulated η.
pub fn constant_sigma_law(s: &Matrix, t: f64, r: f64) -> Result<ConstantSigmaLaw> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("t must be positive, got {t}")));
    }
    let eta = EtaCurve::constant(s, vec![0.0, t])?;
    Ok(ConstantSigmaLaw {
        c: limit_covariance(&eta, t)?,
        cr: prelimit_covariance(&eta, t, r)?,
        exact_gaussian: true,
    })
}

/// `Var u(t, x) = ∫_0^t (4π(t − r))^{-1/2} dr = √(t/π)` for σ ≡ 1.
pub fn additive_point_variance(t: f64) -> Result<f64> {
    if !(t >= 0.0) {
        return Err(Error::domain(format!("t must be nonnegative, got {t}")));
    }
    Ok((t / PI).sqrt())
}

/// Numerical solution of `f(t) = 1 + λ²∫_0^t f(r)(4π(t − r))^{-1/2} dr`,
/// the second moment `E[u(t,x)²]` of the scalar equation with `σ(u) = λu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VolterraSolution {
    pub lambda: f64,
    /// Graded mesh `t_j = T(j/N)²`.
    pub times: Vec<f64>,
    pub values: Vec<f64>,
    /// Largest change at common nodes between the last two refinements.
    pub error_estimate: f64,
}

const INV_SQRT_4PI: f64 = 0.282_094_791_773_878_14;
const MAX_STEPS: usize = 1 << 20;

/// Product-integration weights of one interval `[t_j, t_{j+1}]` against
/// `(t − r)^{-1/2}`, for `f` linear on the interval: returns the weights of
/// `f_j` and `f_{j+1}`. With `p = √(t − t_{j+1})`, `q = √(t − t_j)`:
/// `(2/3)(q − p)²(q + 2p)/h` and `(2/3)(q − p)²(2q + p)/h`, free of cancellation.
fn interval_weights(t: f64, lo: f64, hi: f64) -> (f64, f64) {
    let h = hi - lo;
    let p = (t - hi).max(0.0).sqrt();
    let q = (t - lo).max(0.0).sqrt();
    let diff = h / (p + q);
    let common = 2.0 / 3.0 * diff * diff / h;
    (common * (q + 2.0 * p), common * (2.0 * q + p))
}

fn solve_on_mesh(lambda: f64, t_final: f64, n: usize) -> (Vec<f64>, Vec<f64>) {
    let times: Vec<f64> = (0..=n).map(|j| t_final * (j as f64 / n as f64).powi(2)).collect();
    let l2 = lambda * lambda * INV_SQRT_4PI;
    let mut f = vec![1.0; n + 1];
    for k in 1..=n {
        let mut acc = 0.0;
        for j in 0..k - 1 {
            let (wl, wr) = interval_weights(times[k], times[j], times[j + 1]);
            acc += wl * f[j] + wr * f[j + 1];
        }
        let (wl, wr) = interval_weights(times[k], times[k - 1], times[k]);
        acc += wl * f[k - 1];
        f[k] = (1.0 + l2 * acc) / (1.0 - l2 * wr);
    }
    (times, f)
}

/// Solves the second-moment Volterra equation on `[0, T]`, doubling the
/// number of steps from `steps` until the largest change at common nodes is
/// below `tol`.
pub fn pam_second_moment(lambda: f64, t_final: f64, steps: usize, tol: f64) -> Result<VolterraSolution> {
    if steps < 16 {
        return Err(Error::config(format!("Volterra solver needs at least 16 steps, got {steps}")));
    }
    if !(t_final > 0.0) || !(tol > 0.0) || !lambda.is_finite() {
        return Err(Error::config("Volterra solver needs T > 0, tol > 0 and finite λ"));
    }
    let (_, mut values) = solve_on_mesh(lambda, t_final, steps);
    let mut n = steps;
    loop {
        if 2 * n > MAX_STEPS {
            return Err(Error::numerical(format!(
                "Volterra solver did not reach tolerance {tol:e} within {MAX_STEPS} steps"
            )));
        }
        let (ft, fv) = solve_on_mesh(lambda, t_final, 2 * n);
        let change = (0..=n).map(|j| (fv[2 * j] - values[j]).abs()).fold(0.0, f64::max);
        values = fv;
        n *= 2;
        if !change.is_finite() {
            return Err(Error::numerical("Volterra solution is not finite"));
        }
        if change < tol {
            return Ok(VolterraSolution {
                lambda,
                times: ft,
                values,
                error_estimate: change,
            });
        }
    }
}

impl VolterraSolution {
    /// `f(t)` by Nyström interpolation: the integral equation evaluated at `t`
    /// with the piecewise-linear solution inside.
    pub fn value_at(&self, t: f64) -> Result<f64> {
        let t_max = *self.times.last().expect("nonempty");
        if !(t >= 0.0) || t > t_max * (1.0 + 1e-12) {
            return Err(Error::domain(format!("time {t} lies outside [0, {t_max}]")));
        }
        let t = t.min(t_max);
        let mut acc = 0.0;
        for j in 0..self.times.len() - 1 {
            let (lo, hi) = (self.times[j], self.times[j + 1]);
            if lo >= t {
                break;
            }
            if hi <= t {
                let (wl, wr) = interval_weights(t, lo, hi);
                acc += wl * self.values[j] + wr * self.values[j + 1];
            } else {
                let b = t - lo;
                let slope = (self.values[j + 1] - self.values[j]) / (hi - lo);
                acc += 2.0 * self.values[j] * b.sqrt() + slope * (4.0 / 3.0) * b.powf(1.5);
            }
        }
        Ok(1.0 + self.lambda * self.lambda * INV_SQRT_4PI * acc)
    }

    /// `η(r) = λ²f(r)` on `times`.
    pub fn eta_curve(&self, times: &[f64]) -> Result<EtaCurve> {
        let values = times
            .iter()
            .map(|&r| Ok(self.lambda * self.lambda * self.value_at(r)?))
            .collect::<Result<Vec<_>>>()?;
        EtaCurve::scalar(times.to_vec(), values, EtaProvenance::VolterraPam)
    }
}

/// Exact `E[u^n(x)²]` of the finite-difference scheme on the infinite
/// lattice for `d = m = 1`, `σ(u) = a + b·u`, at grid time `t`.
///
/// With `K^n(h) = E[u^n(x)u^n(x + h)]` and the heat stencil
/// `A = [λ, 1 − 2λ, λ]`, `λ = dt/2dx²`, the scheme gives
/// `K^{n+1} = (A ⋆ A) * K^n + δ_0·(dt/dx)(a² + 2ab + b²K^n(0))`, `K^0 ≡ 1`.
/// The truncated interval of a simulation only differs from this through
/// boundary effects many heat lengths away from the pooled nodes.
pub fn scheme_point_second_moment(a: f64, b: f64, grid: &Grid, t: f64) -> Result<f64> {
    let steps = grid.step_of(t)?;
    let lam = grid.diffusion_number();
    let c = 1.0 - 2.0 * lam;
    // autocorrelation of the stencil, lags −2..=2
    let kern = [lam * lam, 2.0 * lam * c, 2.0 * lam * lam + c * c, 2.0 * lam * c, lam * lam];
    let q = grid.dt() / grid.dx();
    // D = K − 1 on lags −2·steps..=2·steps, centred at index `mid`
    let width = 4 * steps + 5;
    let mid = 2 * steps + 2;
    let mut dcur = vec![0.0; width];
    let mut dnext = vec![0.0; width];
    for n in 0..steps {
        let k0 = 1.0 + dcur[mid];
        let span = 2 * n + 2;
        for h in mid - span..=mid + span {
            let mut acc = 0.0;
            for (o, w) in kern.iter().enumerate() {
                let idx = h + o;
                if idx >= 2 && idx - 2 < width {
                    acc += w * dcur[idx - 2];
                }
            }
            dnext[h] = acc;
        }
        dnext[mid] += q * (a * a + 2.0 * a * b + b * b * k0);
        std::mem::swap(&mut dcur, &mut dnext);
    }
    Ok(1.0 + dcur[mid])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::special::erfc;

    fn closed_form(lambda: f64, t: f64) -> f64 {
        let l2 = lambda * lambda;
        (l2 * l2 * t / 4.0).exp() * erfc(-l2 * t.sqrt() / 2.0)
    }

    #[test]
    fn constant_law_examples() {
        let one = Matrix::from_rows(1, 1, vec![1.0]).unwrap();
        let law = constant_sigma_law(&one, 1.0, 5.0).unwrap();
        assert!((law.c.get(0, 0) - 2.0).abs() < 1e-14);
        assert!((law.cr.get(0, 0) - 1.849549444387267).abs() < 1e-11);
        assert!(law.exact_gaussian);
        let id = Matrix::identity(2);
        let law = constant_sigma_law(&id, 0.5, 4.0).unwrap();
        assert!((law.c.get(0, 0) - 1.0).abs() < 1e-14 && law.c.get(0, 1).abs() < 1e-15);
        // same code path as the pipeline quadrature
        let eta = EtaCurve::constant(&one, vec![0.0, 1.0]).unwrap();
        assert_eq!(
            prelimit_covariance(&eta, 1.0, 5.0).unwrap(),
            constant_sigma_law(&one, 1.0, 5.0).unwrap().cr
        );
    }

    #[test]
    fn additive_variance_examples() {
        assert!((additive_point_variance(1.0).unwrap() - 0.5641895835477563).abs() < 1e-15);
        assert_eq!(additive_point_variance(0.0).unwrap(), 0.0);
        let v = additive_point_variance(0.3).unwrap();
        assert!((additive_point_variance(1.2).unwrap() - 2.0 * v).abs() < 1e-15);
    }

    #[test]
    fn volterra_zero_coupling_is_one() {
        let s = pam_second_moment(0.0, 1.0, 16, 1e-8).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn volterra_matches_laplace_closed_form() {
        let s = pam_second_moment(1.0, 1.0, 64, 1e-8).unwrap();
        assert!(s.error_estimate < 1e-8);
        for &t in &[0.01, 0.25, 0.5, 1.0] {
            let v = s.value_at(t).unwrap();
            assert!((v - closed_form(1.0, t)).abs() < 1e-7, "t={t}: {v} vs {}", closed_form(1.0, t));
        }
        let s2 = pam_second_moment(1.7, 0.5, 64, 1e-8).unwrap();
        assert!((s2.value_at(0.5).unwrap() - closed_form(1.7, 0.5)).abs() < 1e-7);
    }

    #[test]
    fn volterra_small_time_picard_expansion() {
        // 1 + λ²√(t/π) + λ⁴t/4 + O(t^{3/2})
        let s = pam_second_moment(1.0, 0.01, 16, 1e-10).unwrap();
        let v = s.value_at(0.01).unwrap();
        assert!((v - (1.0 + (0.01 / PI).sqrt() + 0.0025)).abs() < 1e-3);
        assert!((v - 1.0564).abs() > 1e-3, "the first Picard term alone is off by t/4");
    }

    #[test]
    fn volterra_is_monotone_and_self_consistent() {
        let s = pam_second_moment(1.0, 1.0, 32, 1e-8).unwrap();
        assert_eq!(s.values[0], 1.0);
        assert!(s.values.windows(2).all(|w| w[1] >= w[0]));
        let half = pam_second_moment(1.0, 1.0, 2 * (s.times.len() - 1), 1e-8).unwrap();
        assert!((half.value_at(1.0).unwrap() - s.value_at(1.0).unwrap()).abs() < 1e-8);
        assert!(pam_second_moment(1.0, 1.0, 8, 1e-8).is_err());
        assert!(s.value_at(1.5).is_err());
    }

    #[test]
    fn scheme_moment_for_additive_noise_approaches_continuum() {
        let g = |dx: f64, dt: f64| {
            Grid::new(&crate::solver::GridSpec {
                t_final: 1.0,
                dt,
                dx,
                r_max: 0.0,
                padding: 0.0,
                output_times: vec![],
            })
            .unwrap()
        };
        let coarse = scheme_point_second_moment(1.0, 0.0, &g(0.05, 1e-3), 1.0).unwrap();
        let fine = scheme_point_second_moment(1.0, 0.0, &g(0.025, 2.5e-4), 1.0).unwrap();
        let exact = 1.0 + 1.0 / PI.sqrt();
        assert!((coarse - 1.57052).abs() < 1e-4, "{coarse}");
        assert!((fine - exact).abs() < (coarse - exact).abs());
    }

    #[test]
    fn scheme_moment_for_pam_approaches_volterra() {
        let g = Grid::new(&crate::solver::GridSpec {
            t_final: 1.0,
            dt: 1e-3,
            dx: 0.05,
            r_max: 0.0,
            padding: 0.0,
            output_times: vec![],
        })
        .unwrap();
        for (t, expect) in [(0.25, 1.36958), (0.5, 1.58149), (1.0, 1.97396)] {
            let v = scheme_point_second_moment(0.0, 1.0, &g, t).unwrap();
            assert!((v - expect).abs() < 1e-4, "t={t}: {v}");
            let rel = (v - closed_form(1.0, t)) / closed_form(1.0, t);
            assert!(rel > 0.0 && rel < 0.012, "t={t}: {rel}");
        }
    }

    #[test]
    fn one_step_scheme_moment() {
        let g = Grid::from_nodes(10, 0.01, 10, 0.1, 0.0, &[]).unwrap();
        let v = scheme_point_second_moment(2.0, 0.0, &g, 0.001).unwrap();
        assert!((v - (1.0 + 4.0 * g.dt() / g.dx())).abs() < 1e-15);
    }
}
