//! Malliavin pairings `⟨v^R_i(t), DF^R_j(t)⟩` on the discrete noise space.
//!
//! On the grid the noise is the array of cell increments `ΔW = √(dt·dx)·ξ`
//! and the inner product is `⟨a, b⟩ = Σ_{n,ℓ,k} a·b·dt·dx`. With the discrete
//! window `w(n, ℓ) = (A^{N−1−n} 1_{[−R,R]})(ℓ)`, `A` the heat step, the
//! scheme satisfies `F^R(t) = Σ v·ΔW` for
//!
//! ```text
//! v_{i,k}(n, ℓ) = R^{-1/2}·σ_ik(u^n(ℓ))·w(n, ℓ),
//! ```
//!
//! so `F^R = δ(v)` holds exactly and Gaussian integration by parts gives
//! `E[F_i F_j] = E[⟨v_i, DF_j⟩]` with no discretization error.
//!
//! The pairing is evaluated forward: perturbing the noise along `v_i` adds
//! `dt·Σ_k v_{i,k}σ_jk(u^n)` to component `j` after step `n`, and the resulting
//! tangent field `Y^{(i)}` gives `P_ij = R^{-1/2}Σ_{|x_ℓ|≤R} Y^{(i)}_j(N, ℓ)·dx`.

use serde::{Deserialize, Serialize};

use crate::ensemble::{run_replica, PairingPlan, ReplicaPlan};
use crate::error::{Error, Result};
use crate::model::{kernel_window, DiffusionField};
use crate::solver::{advance_primal, advance_tangent, heat_apply, FieldState, Grid, NodeCoefficients, NoiseStream, TangentState};
use crate::stats::linalg::{Matrix, SymMatrix};
use crate::stats::sample::{mean_se, variance_se};

/// Which window enters the pairing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum WindowKind {
    /// Backward heat steps of the indicator; exact duality on the grid.
    #[default]
    Scheme,
    /// The continuum window `∫_{−R}^{R} p_{t−s}(x − y)dx`, indicator on the last step.
    Continuum,
}

/// `w(n, ℓ)` for `n = 0..N`, the window seen by the noise increment of step `n`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowTable {
    pub steps: usize,
    pub nx: usize,
    pub r: f64,
    values: Vec<f64>,
}

impl WindowTable {
    pub fn new(grid: &Grid, steps: usize, r: f64, kind: WindowKind) -> Result<Self> {
        match kind {
            WindowKind::Scheme => Self::scheme(grid, steps, r),
            WindowKind::Continuum => Self::continuum(grid, steps, r),
        }
    }

    /// Discrete window `A^{N−1−n}1_W`, built by backward heat steps.
    pub fn scheme(grid: &Grid, steps: usize, r: f64) -> Result<Self> {
        let range = grid.window_range(r)?;
        let nx = grid.nx();
        let mut values = vec![0.0; steps * nx];
        if steps == 0 {
            return Ok(WindowTable { steps, nx, r, values });
        }
        let last = (steps - 1) * nx;
        values[last + range.start..last + range.end].iter_mut().for_each(|v| *v = 1.0);
        let lam = grid.diffusion_number();
        for n in (0..steps - 1).rev() {
            let (head, tail) = values.split_at_mut((n + 1) * nx);
            heat_apply(&tail[..nx], &mut head[n * nx..], lam, 0.0);
        }
        Ok(WindowTable { steps, nx, r, values })
    }

    /// Continuum window with lag `t − (n+1)·dt`; the last step uses the indicator.
    pub fn continuum(grid: &Grid, steps: usize, r: f64) -> Result<Self> {
        let range = grid.window_range(r)?;
        let nx = grid.nx();
        let mut values = vec![0.0; steps * nx];
        for n in 0..steps {
            let lag = (steps - 1 - n) as f64 * grid.dt();
            for l in 0..nx {
                values[n * nx + l] = if lag < 0.5 * grid.dt() {
                    if range.contains(&l) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    kernel_window(lag, grid.x(l), r)?
                };
            }
        }
        Ok(WindowTable { steps, nx, r, values })
    }

    #[inline]
    pub fn row(&self, n: usize) -> &[f64] {
        &self.values[n * self.nx..(n + 1) * self.nx]
    }

    /// `Σ_{n,ℓ} w(n, ℓ)²`.
    pub fn sum_squares(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Weights `v_{i,k}(n, ℓ) = R^{-1/2}σ_ik(u^n(x_ℓ))·kernel_window(t − (n+1)dt, x_ℓ, R)`
/// for the noise increment of step `n = u_state.step`, with the indicator of
/// `[−R, R]` on the last step before `t`. Returned as `d` blocks of `m × nx`
/// values, channel-major.
pub fn v_weight(u_state: &FieldState, field: &DiffusionField, grid: &Grid, t: f64, r: f64) -> Result<Vec<Vec<f64>>> {
    let n_end = grid.step_of(t)?;
    if u_state.step >= n_end {
        return Err(Error::config(format!(
            "weights need a step before t: step {} is not below {n_end}",
            u_state.step
        )));
    }
    let range = grid.window_range(r)?;
    let (d, m, nx) = (field.d(), field.m(), grid.nx());
    let lag = (n_end - 1 - u_state.step) as f64 * grid.dt();
    let scale = 1.0 / r.sqrt();
    let mut out = vec![vec![0.0; m * nx]; d];
    let mut sig = vec![0.0; d * m];
    for l in 0..nx {
        let win = if lag < 0.5 * grid.dt() {
            if range.contains(&l) {
                1.0
            } else {
                0.0
            }
        } else {
            kernel_window(lag, grid.x(l), r)?
        };
        field.sigma_into(&u_state.node(l), &mut sig);
        for (i, block) in out.iter_mut().enumerate() {
            for k in 0..m {
                block[k * nx + l] = scale * sig[i * m + k] * win;
            }
        }
    }
    Ok(out)
}

/// Pairing matrix `P_ij ≈ ⟨v^R_i(t), DF^R_j(t)⟩` of one replica.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingSample {
    pub replica_id: u64,
    pub p: Matrix,
}

/// Forward tangent evaluation of the pairing for one replica, with the
/// scheme window.
pub fn pairing_tangent(field: &DiffusionField, grid: &Grid, t: f64, r: f64, seed: u64, replica_id: u64) -> Result<PairingSample> {
    pairing_tangent_with(field, grid, t, r, seed, replica_id, WindowKind::Scheme)
}

pub fn pairing_tangent_with(
    field: &DiffusionField,
    grid: &Grid,
    t: f64,
    r: f64,
    seed: u64,
    replica_id: u64,
    window: WindowKind,
) -> Result<PairingSample> {
    let step = grid.step_of(t)?;
    let plan = ReplicaPlan {
        pairing: Some(PairingPlan {
            step,
            radii: vec![r],
            window,
        }),
        ..ReplicaPlan::default()
    };
    let tables = plan.window_tables(grid)?;
    let rec = run_replica(field, grid, &plan, &tables, seed, replica_id)?;
    let d = field.d();
    Ok(PairingSample {
        replica_id,
        p: Matrix::from_rows(d, d, rec.pairing[..d * d].to_vec())?,
    })
}

/// Largest grid accepted by [`pairing_bruteforce`].
pub const BRUTEFORCE_MAX_STEPS: usize = 16;
pub const BRUTEFORCE_MAX_NODES: usize = 32;

/// Pairing by explicit Malliavin derivatives: for every source point
/// `(n, ℓ, k)` the derivative field `D_{n,ℓ,k}u` starts at step `n+1` as
/// `σ_{·k}(u^n(x_ℓ))/dx` at node `ℓ`, is propagated by the homogeneous tangent
/// equation to `t`, averaged like `F`, and weighted by `v·dt·dx`.
pub fn pairing_bruteforce(field: &DiffusionField, grid: &Grid, t: f64, r: f64, seed: u64, replica_id: u64) -> Result<PairingSample> {
    pairing_bruteforce_with(field, grid, t, r, seed, replica_id, WindowKind::Scheme)
}

pub fn pairing_bruteforce_with(
    field: &DiffusionField,
    grid: &Grid,
    t: f64,
    r: f64,
    seed: u64,
    replica_id: u64,
    window: WindowKind,
) -> Result<PairingSample> {
    let steps = grid.step_of(t)?;
    let (d, m, nx) = (field.d(), field.m(), grid.nx());
    if steps > BRUTEFORCE_MAX_STEPS || nx > BRUTEFORCE_MAX_NODES {
        return Err(Error::config(format!(
            "brute-force pairing is limited to {BRUTEFORCE_MAX_STEPS} steps and {BRUTEFORCE_MAX_NODES} nodes, got {steps} and {nx}"
        )));
    }
    let table = WindowTable::new(grid, steps, r, window)?;
    let range = grid.window_range(r)?;
    let (dt, dx) = (grid.dt(), grid.dx());
    let scale = 1.0 / r.sqrt();

    // primal path with its noise and coefficients at every step
    let mut noise = NoiseStream::new(seed, replica_id, m, nx);
    let mut xis = Vec::with_capacity(steps);
    let mut coefs = Vec::with_capacity(steps);
    let mut u = FieldState::ones(d, nx);
    let mut next = u.clone();
    for _ in 0..steps {
        let mut xi = vec![0.0; m * nx];
        noise.next_step(&mut xi);
        let mut coef = NodeCoefficients::new(field, nx, true);
        coef.evaluate(field, &u);
        advance_primal(&u, &mut next, &coef, &xi, grid);
        std::mem::swap(&mut u, &mut next);
        xis.push(xi);
        coefs.push(coef);
    }

    let mut p = Matrix::zeros(d, d);
    let mut z = TangentState::zeros(0, d, nx);
    let mut z_next = z.clone();
    let mut df = vec![0.0; d];
    for n in 0..steps {
        let sig = &coefs[n].sigma;
        for l in 0..nx {
            for k in 0..m {
                z.values.iter_mut().for_each(|v| *v = 0.0);
                for j in 0..d {
                    z.values[j * nx + l] = sig[(j * m + k) * nx + l] / dx;
                }
                for q in n + 1..steps {
                    advance_tangent(&z, &mut z_next, &coefs[q], &xis[q], None, grid);
                    std::mem::swap(&mut z, &mut z_next);
                }
                for (j, dfj) in df.iter_mut().enumerate() {
                    *dfj = scale * dx * z.values[j * nx + range.start..j * nx + range.end].iter().sum::<f64>();
                }
                let w = table.row(n)[l];
                for i in 0..d {
                    let v = scale * sig[(i * m + k) * nx + l] * w;
                    for j in 0..d {
                        p.data[i * d + j] += v * dt * dx * df[j];
                    }
                }
            }
        }
    }
    Ok(PairingSample { replica_id, p })
}

/// Pairing of a constant σ = S: `SSᵀ·R⁻¹Σ_{n,ℓ} w(n,ℓ)²·dt·dx`, deterministic.
pub fn constant_pairing(s: &Matrix, table: &WindowTable, grid: &Grid) -> Matrix {
    let sst = s.matmul(&s.transpose());
    let factor = table.sum_squares() * grid.dt() * grid.dx() / table.r;
    let mut out = sst;
    out.data.iter_mut().for_each(|v| *v *= factor);
    out
}

/// Sample variances of the pairing entries and the resulting Stein bound
/// `√d·‖(C^R)⁻¹‖_op·‖C^R‖_op^{1/2}·(Σ_ij Var P_ij)^{1/2}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinEstimate {
    pub varhat: Matrix,
    pub varhat_se: Matrix,
    /// Entrywise mean of the pairings with SEs.
    pub mean: Matrix,
    pub mean_se: Matrix,
    pub var_sum: f64,
    pub var_sum_se: f64,
    pub bound: f64,
    pub cr_used: SymMatrix,
}

pub fn stein_bound(pairings: &[PairingSample], cr: &SymMatrix) -> Result<SteinEstimate> {
    if pairings.len() < 2 {
        return Err(Error::config("Stein bound needs at least 2 pairing samples"));
    }
    let d = cr.dim();
    if pairings.iter().any(|p| p.p.rows != d || p.p.cols != d) {
        return Err(Error::config("pairing matrices do not match the dimension of C^R"));
    }
    let inv = cr.inverse_checked("C^R")?;
    let mut varhat = Matrix::zeros(d, d);
    let mut varhat_se = Matrix::zeros(d, d);
    let mut mean = Matrix::zeros(d, d);
    let mut mse = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let x: Vec<f64> = pairings.iter().map(|p| p.p.get(i, j)).collect();
            let (v, vs) = variance_se(&x);
            let (mu, ms) = mean_se(&x);
            varhat.set(i, j, v);
            varhat_se.set(i, j, vs);
            mean.set(i, j, mu);
            mse.set(i, j, ms);
        }
    }
    let var_sum: f64 = varhat.data.iter().sum();
    let var_sum_se = varhat_se.data.iter().map(|s| s * s).sum::<f64>().sqrt();
    let bound = (d as f64).sqrt() * inv.op_norm() * cr.op_norm().sqrt() * var_sum.max(0.0).sqrt();
    Ok(SteinEstimate {
        varhat,
        varhat_se,
        mean,
        mean_se: mse,
        var_sum,
        var_sum_se,
        bound,
        cr_used: cr.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Grid {
        Grid::from_nodes(8, 8.0 * 4e-3, 16, 0.1, 0.0, &[]).unwrap()
    }

    fn nonlinear() -> DiffusionField {
        DiffusionField::bounded_smooth(1, 1, vec![1.0], vec![0.5], vec![1.0]).unwrap()
    }

    #[test]
    fn scheme_window_is_indicator_then_smoothed() {
        let g = tiny();
        let tab = WindowTable::scheme(&g, 8, 0.4).unwrap();
        let last = tab.row(7);
        assert_eq!(last.iter().filter(|&&v| v == 1.0).count(), 8);
        let first = tab.row(0);
        assert!(first.iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert!(first.iter().sum::<f64>() <= last.iter().sum::<f64>() + 1e-12);
        for l in 0..16 {
            assert!((first[l] - first[15 - l]).abs() < 1e-15);
        }
    }

    #[test]
    fn v_weight_examples() {
        let spec = crate::solver::GridSpec {
            t_final: 0.1,
            dt: 1e-3,
            dx: 0.05,
            r_max: 200.0,
            padding: 1.0,
            output_times: vec![],
        };
        let g = Grid::new(&spec).unwrap();
        let f = DiffusionField::constant(1, 2, vec![1.0, 0.0]).unwrap();
        let u = FieldState::ones(1, g.nx());
        let w = v_weight(&u, &f, &g, 0.1, 200.0).unwrap();
        let mid = g.nx() / 2;
        assert!((w[0][mid] - 1.0 / 200f64.sqrt()).abs() < 1e-12);
        assert!(w[0][g.nx()..].iter().all(|&v| v == 0.0));
        for l in 0..g.nx() {
            assert!((w[0][l] - w[0][g.nx() - 1 - l]).abs() < 1e-14);
        }
        assert!(v_weight(&FieldState { step: 100, ..u }, &f, &g, 0.1, 200.0).is_err());
    }

    #[test]
    fn zero_sigma_pairs_to_zero() {
        let g = tiny();
        let f = DiffusionField::constant(1, 1, vec![0.0]).unwrap();
        let p = pairing_bruteforce(&f, &g, g.t_final(), 0.4, 1, 0).unwrap();
        assert_eq!(p.p.get(0, 0), 0.0);
    }

    #[test]
    fn constant_sigma_matches_closed_form() {
        let g = tiny();
        let s = Matrix::from_rows(2, 2, vec![1.0, 0.3, -0.2, 0.7]).unwrap();
        let f = DiffusionField::constant(2, 2, s.data.clone()).unwrap();
        let tab = WindowTable::scheme(&g, g.nt(), 0.4).unwrap();
        let exact = constant_pairing(&s, &tab, &g);
        for rep in 0..3 {
            let bf = pairing_bruteforce(&f, &g, g.t_final(), 0.4, 5, rep).unwrap();
            let tg = pairing_tangent(&f, &g, g.t_final(), 0.4, 5, rep).unwrap();
            for k in 0..4 {
                let e = exact.data[k];
                assert!((bf.p.data[k] - e).abs() <= 1e-10 * e.abs().max(1e-300) + 1e-15);
                assert!((tg.p.data[k] - e).abs() <= 1e-10 * e.abs().max(1e-300) + 1e-15);
            }
        }
    }

    #[test]
    fn tangent_equals_bruteforce_for_nonlinear_sigma() {
        let g = tiny();
        for kind in [WindowKind::Scheme, WindowKind::Continuum] {
            for rep in 0..4 {
                let a = pairing_tangent_with(&nonlinear(), &g, g.t_final(), 0.4, 9, rep, kind).unwrap();
                let b = pairing_bruteforce_with(&nonlinear(), &g, g.t_final(), 0.4, 9, rep, kind).unwrap();
                let (x, y) = (a.p.get(0, 0), b.p.get(0, 0));
                assert!((x - y).abs() <= 1e-8 * y.abs(), "{x} vs {y}");
            }
        }
    }

    #[test]
    fn bruteforce_refuses_large_grids() {
        let g = Grid::from_nodes(20, 20.0 * 4e-3, 16, 0.1, 0.0, &[]).unwrap();
        assert!(pairing_bruteforce(&nonlinear(), &g, g.t_final(), 0.4, 1, 0).is_err());
    }

    #[test]
    fn stein_bound_reductions() {
        let cr = SymMatrix::diag(&[2.0]);
        let ps: Vec<PairingSample> = [1.0, 1.5, 0.5, 1.2]
            .iter()
            .enumerate()
            .map(|(k, &v)| PairingSample {
                replica_id: k as u64,
                p: Matrix::from_rows(1, 1, vec![v]).unwrap(),
            })
            .collect();
        let est = stein_bound(&ps, &cr).unwrap();
        assert!((est.bound - (est.varhat.get(0, 0) / 2.0).sqrt()).abs() < 1e-14);
        let same: Vec<PairingSample> = (0..3)
            .map(|k| PairingSample {
                replica_id: k,
                p: Matrix::from_rows(1, 1, vec![0.7]).unwrap(),
            })
            .collect();
        assert!(stein_bound(&same, &cr).unwrap().bound < 1e-12);
        match stein_bound(&ps, &SymMatrix::diag(&[0.0])) {
            Err(Error::Singular { matrix, .. }) => assert_eq!(matrix, "C^R"),
            other => panic!("{other:?}"),
        }
    }
}
