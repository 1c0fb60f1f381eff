//! Replica-parallel Monte Carlo driver and its fixed-order reductions.
//!
//! One replica walks the primal field (and, when pairings are requested, the
//! tangent fields) through every time step once, recording everything a plan
//! asks for. Replicas run on a private rayon pool; their records are collected
//! in replica order and all statistics are reduced sequentially from those
//! records, so results do not depend on the number of workers and merged
//! batches reproduce a single run exactly.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::malliavin::{WindowKind, WindowTable};
use crate::model::DiffusionField;
use crate::observables::{average_into, EtaCurve, EtaProvenance};
use crate::solver::{advance_primal, advance_tangent, check_finite, FieldState, Grid, NodeCoefficients, NoiseStream, TangentState};
use crate::stats::linalg::{Matrix, SymMatrix};
use crate::stats::sample::{mean_se, SampleMatrix};

/// Pairing request: radii evaluated at one time step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairingPlan {
    pub step: usize,
    pub radii: Vec<f64>,
    pub window: WindowKind,
}

/// What each replica records.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ReplicaPlan {
    /// Steps at which `F^R` (and pooled point moments) are recorded.
    pub output_steps: Vec<usize>,
    pub radii: Vec<f64>,
    /// Steps at which the pooled η is recorded.
    pub eta_steps: Vec<usize>,
    /// Record pooled `u_i u_j` at the output steps.
    pub point_moments: bool,
    pub pairing: Option<PairingPlan>,
}

impl ReplicaPlan {
    /// Last step any record needs.
    pub fn final_step(&self) -> usize {
        let a = self.output_steps.iter().chain(&self.eta_steps).copied().max().unwrap_or(0);
        a.max(self.pairing.as_ref().map_or(0, |p| p.step))
    }

    /// Window tables for the pairing radii (empty without pairings).
    pub fn window_tables(&self, grid: &Grid) -> Result<Vec<WindowTable>> {
        match &self.pairing {
            None => Ok(Vec::new()),
            Some(p) => p.radii.iter().map(|&r| WindowTable::new(grid, p.step, r, p.window)).collect(),
        }
    }

    fn validate(&self, grid: &Grid) -> Result<()> {
        if self.final_step() > grid.nt() {
            return Err(Error::config("plan records steps beyond the grid horizon"));
        }
        for &r in &self.radii {
            grid.window_range(r)?;
        }
        if let Some(p) = &self.pairing {
            if p.step == 0 {
                return Err(Error::config("pairings need a positive time"));
            }
            for &r in &p.radii {
                grid.window_range(r)?;
            }
        }
        Ok(())
    }
}

/// Raw per-replica observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicaRecord {
    pub replica_id: u64,
    /// `F^R`: `[output][radius][i]`
    pub f: Vec<f64>,
    /// Pooled η: `[eta step][k][i][j]`
    pub eta: Vec<f64>,
    /// Pooled `u_i u_j`: `[output][i][j]`
    pub u2: Vec<f64>,
    /// Pairing matrices: `[radius][i][j]`
    pub pairing: Vec<f64>,
}

fn pooled_eta(coef: &NodeCoefficients, pool: &std::ops::Range<usize>, out: &mut [f64]) {
    let (d, m) = (coef.d, coef.m);
    out.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..m {
        for i in 0..d {
            let si = &coef.sigma_entry(i, k)[pool.clone()];
            for j in 0..d {
                let sj = &coef.sigma_entry(j, k)[pool.clone()];
                out[(k * d + i) * d + j] = si.iter().zip(sj).map(|(a, b)| a * b).sum::<f64>();
            }
        }
    }
    let n = pool.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
}

fn pooled_u2(u: &FieldState, pool: &std::ops::Range<usize>, out: &mut [f64]) {
    let (d, nx) = (u.d, u.nx);
    out.iter_mut().for_each(|v| *v = 0.0);
    for l in pool.clone() {
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += u.values[i * nx + l] * u.values[j * nx + l];
            }
        }
    }
    let n = pool.len() as f64;
    out.iter_mut().for_each(|v| *v /= n);
}

/// Runs one replica under `plan`. `tables` must come from [`ReplicaPlan::window_tables`].
pub fn run_replica(
    field: &DiffusionField,
    grid: &Grid,
    plan: &ReplicaPlan,
    tables: &[WindowTable],
    seed: u64,
    replica_id: u64,
) -> Result<ReplicaRecord> {
    let (d, m, nx) = (field.d(), field.m(), grid.nx());
    let n_end = plan.final_step();
    let ranges: Vec<_> = plan.radii.iter().map(|&r| grid.window_range(r)).collect::<Result<_>>()?;
    let pool = grid.pool_range();
    let with_tangent = plan.pairing.is_some();

    let mut rec = ReplicaRecord {
        replica_id,
        f: Vec::with_capacity(plan.output_steps.len() * plan.radii.len() * d),
        eta: Vec::with_capacity(plan.eta_steps.len() * m * d * d),
        u2: Vec::new(),
        pairing: Vec::new(),
    };
    let mut noise = NoiseStream::new(seed, replica_id, m, nx);
    let mut xi = vec![0.0; m * nx];
    let mut coef = NodeCoefficients::new(field, nx, with_tangent);
    let mut u = FieldState::ones(d, nx);
    let mut next = u.clone();
    let mut fbuf = vec![0.0; d];
    let mut ebuf = vec![0.0; m * d * d];
    let mut ubuf = vec![0.0; d * d];

    let pairing_radii = plan.pairing.as_ref().map_or(&[][..], |p| &p.radii[..]);
    let mut tangents: Vec<Vec<TangentState>> = pairing_radii
        .iter()
        .map(|_| (0..d).map(|i| TangentState::zeros(i, d, nx)).collect())
        .collect();
    let mut tangent_next = TangentState::zeros(0, d, nx);
    let mut source = vec![0.0; d * nx];
    let mut sst = vec![0.0; nx * d * d];

    let mut outputs = plan.output_steps.iter().peekable();
    let mut etas = plan.eta_steps.iter().peekable();
    for n in 0..=n_end {
        while outputs.next_if(|&&s| s == n).is_some() {
            for (range, &r) in ranges.iter().zip(&plan.radii) {
                average_into(&u.values, nx, range.clone(), grid.dx(), r, &mut fbuf);
                rec.f.extend_from_slice(&fbuf);
            }
            if plan.point_moments {
                pooled_u2(&u, &pool, &mut ubuf);
                rec.u2.extend_from_slice(&ubuf);
            }
        }
        let need_eta = etas.peek().is_some_and(|&&s| s == n);
        if n == n_end && !need_eta {
            break;
        }
        coef.evaluate(field, &u);
        while etas.next_if(|&&s| s == n).is_some() {
            pooled_eta(&coef, &pool, &mut ebuf);
            rec.eta.extend_from_slice(&ebuf);
        }
        if n == n_end {
            break;
        }
        noise.next_step(&mut xi);

        if let Some(p) = &plan.pairing {
            if n < p.step {
                // (σσᵀ)_ij at every node
                for i in 0..d {
                    for j in 0..d {
                        let out = &mut sst[(i * d + j) * nx..(i * d + j + 1) * nx];
                        out.fill(0.0);
                        for k in 0..m {
                            for ((o, a), b) in out.iter_mut().zip(coef.sigma_entry(i, k)).zip(coef.sigma_entry(j, k)) {
                                *o += a * b;
                            }
                        }
                    }
                }
                for (b, table) in tables.iter().enumerate() {
                    let w = table.row(n);
                    let scale = grid.dt() / table.r.sqrt();
                    for i in 0..d {
                        for j in 0..d {
                            let q = &sst[(i * d + j) * nx..(i * d + j + 1) * nx];
                            for ((o, &wl), &ql) in source[j * nx..(j + 1) * nx].iter_mut().zip(w).zip(q) {
                                *o = scale * wl * ql;
                            }
                        }
                        let z = &mut tangents[b][i];
                        advance_tangent(z, &mut tangent_next, &coef, &xi, Some(&source), grid);
                        std::mem::swap(z, &mut tangent_next);
                    }
                }
                if (n + 1) % 64 == 0 || n + 1 == p.step {
                    for zs in &tangents {
                        for z in zs {
                            check_finite(&z.values, "tangent", n + 1)?;
                        }
                    }
                }
            }
        }

        advance_primal(&u, &mut next, &coef, &xi, grid);
        check_finite(&next.values, "field", n + 1)?;
        std::mem::swap(&mut u, &mut next);

        if let Some(p) = &plan.pairing {
            if n + 1 == p.step {
                for (b, &r) in pairing_radii.iter().enumerate() {
                    let range = grid.window_range(r)?;
                    let scale = grid.dx() / r.sqrt();
                    for z in &tangents[b] {
                        for j in 0..d {
                            let col = &z.values[j * nx + range.start..j * nx + range.end];
                            rec.pairing.push(scale * col.iter().sum::<f64>());
                        }
                    }
                }
            }
        }
    }
    Ok(rec)
}

/// Runs replicas `ids` on `workers` threads; records come back in id order.
pub fn run_replicas(
    field: &DiffusionField,
    grid: &Grid,
    plan: &ReplicaPlan,
    seed: u64,
    ids: std::ops::Range<u64>,
    workers: usize,
) -> Result<Vec<ReplicaRecord>> {
    plan.validate(grid)?;
    let tables = plan.window_tables(grid)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::config(format!("cannot start worker pool: {e}")))?;
    pool.install(|| {
        ids.into_par_iter()
            .map(|id| run_replica(field, grid, plan, &tables, seed, id))
            .collect()
    })
}

/// Fixed-order reductions over a set of replica records.
#[derive(Debug, Clone)]
pub struct Ensemble<'a> {
    pub plan: &'a ReplicaPlan,
    pub d: usize,
    pub m: usize,
    pub records: &'a [ReplicaRecord],
}

impl<'a> Ensemble<'a> {
    pub fn new(plan: &'a ReplicaPlan, d: usize, m: usize, records: &'a [ReplicaRecord]) -> Result<Self> {
        if records.len() < 2 {
            return Err(Error::config(format!("need at least 2 replicas, got {}", records.len())));
        }
        Ok(Ensemble { plan, d, m, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    fn output_index(&self, step: usize) -> Result<usize> {
        self.plan
            .output_steps
            .iter()
            .position(|&s| s == step)
            .ok_or_else(|| Error::config(format!("step {step} was not recorded")))
    }

    fn radius_index(&self, r: f64) -> Result<usize> {
        self.plan
            .radii
            .iter()
            .position(|&x| (x - r).abs() <= 1e-12 * r.max(1.0))
            .ok_or_else(|| Error::config(format!("radius {r} was not recorded")))
    }

    /// Samples of `F^R` at output step `step`.
    pub fn f_samples(&self, step: usize, r: f64) -> Result<SampleMatrix> {
        let (a, b) = (self.output_index(step)?, self.radius_index(r)?);
        let nb = self.plan.radii.len();
        let d = self.d;
        let mut data = Vec::with_capacity(self.len() * d);
        for rec in self.records {
            let k = (a * nb + b) * d;
            data.extend_from_slice(&rec.f[k..k + d]);
        }
        Ok(SampleMatrix::new(d, data)?.with_meta(f64::NAN, r, 0))
    }

    /// η estimated at the plan's η steps, with SEs across replicas.
    pub fn eta_curve(&self, grid: &Grid) -> Result<EtaCurve> {
        let len = self.m * self.d * self.d;
        let ne = self.plan.eta_steps.len();
        let mut values = Vec::with_capacity(ne * len);
        let mut se = Vec::with_capacity(ne * len);
        for e in 0..ne {
            for q in 0..len {
                let x: Vec<f64> = self.records.iter().map(|r| r.eta[e * len + q]).collect();
                let (mu, s) = mean_se(&x);
                values.push(mu);
                se.push(s);
            }
        }
        let times = self.plan.eta_steps.iter().map(|&n| grid.time_of(n)).collect();
        EtaCurve::new(times, self.m, self.d, values, se, EtaProvenance::MonteCarlo)
    }

    /// `2Σ_a w_a Σ_k η_r(a)` per replica, reduced to a mean matrix and its SE.
    pub fn quadrature(&self, weights: &[f64]) -> Result<(SymMatrix, Matrix)> {
        if weights.len() != self.plan.eta_steps.len() {
            return Err(Error::config("quadrature weights do not match the η steps"));
        }
        let (d, m) = (self.d, self.m);
        let len = m * d * d;
        let mut est = Matrix::zeros(d, d);
        let mut se = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let x: Vec<f64> = self
                    .records
                    .iter()
                    .map(|rec| {
                        let mut acc = 0.0;
                        for (a, w) in weights.iter().enumerate() {
                            for k in 0..m {
                                acc += w * rec.eta[a * len + (k * d + i) * d + j];
                            }
                        }
                        2.0 * acc
                    })
                    .collect();
                let (mu, s) = mean_se(&x);
                est.set(i, j, mu);
                se.set(i, j, s);
            }
        }
        Ok((SymMatrix::symmetrized(&est), se))
    }

    /// Pooled `E[u_i u_j]` at output step `step` with SEs across replicas.
    pub fn point_moment(&self, step: usize) -> Result<(Matrix, Matrix)> {
        if !self.plan.point_moments {
            return Err(Error::config("point moments were not recorded"));
        }
        let a = self.output_index(step)?;
        let d = self.d;
        let mut est = Matrix::zeros(d, d);
        let mut se = Matrix::zeros(d, d);
        for q in 0..d * d {
            let x: Vec<f64> = self.records.iter().map(|r| r.u2[a * d * d + q]).collect();
            let (mu, s) = mean_se(&x);
            est.data[q] = mu;
            se.data[q] = s;
        }
        Ok((est, se))
    }

    /// Per-replica pairing matrices for pairing radius `r`.
    pub fn pairings(&self, r: f64) -> Result<Vec<crate::malliavin::PairingSample>> {
        let p = self.plan.pairing.as_ref().ok_or_else(|| Error::config("pairings were not recorded"))?;
        let b = p
            .radii
            .iter()
            .position(|&x| (x - r).abs() <= 1e-12 * r.max(1.0))
            .ok_or_else(|| Error::config(format!("pairing radius {r} was not recorded")))?;
        let dd = self.d * self.d;
        self.records
            .iter()
            .map(|rec| {
                Ok(crate::malliavin::PairingSample {
                    replica_id: rec.replica_id,
                    p: Matrix::from_rows(self.d, self.d, rec.pairing[b * dd..(b + 1) * dd].to_vec())?,
                })
            })
            .collect()
    }
}

/// Monte Carlo η at `times`, pooled over nodes with `|x| ≤ L/2` and replicas.
pub fn estimate_eta(
    field: &DiffusionField,
    grid: &Grid,
    times: &[f64],
    replicas: usize,
    seed: u64,
    workers: usize,
) -> Result<EtaCurve> {
    let mut eta_steps = times.iter().map(|&t| grid.step_of(t)).collect::<Result<Vec<_>>>()?;
    eta_steps.sort_unstable();
    eta_steps.dedup();
    let plan = ReplicaPlan {
        eta_steps,
        ..ReplicaPlan::default()
    };
    let records = run_replicas(field, grid, &plan, seed, 0..replicas as u64, workers)?;
    Ensemble::new(&plan, field.d(), field.m(), &records)?.eta_curve(grid)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::observables::spatial_average;
    use crate::solver::{simulate, GridSpec};

    fn grid() -> Grid {
        Grid::new(&GridSpec {
            t_final: 0.05,
            dt: 1e-3,
            dx: 0.05,
            r_max: 1.0,
            padding: 6.0,
            output_times: vec![0.0, 0.02, 0.05],
        })
        .unwrap()
    }

    fn field() -> DiffusionField {
        DiffusionField::bounded_smooth(2, 2, vec![1.0, 0.3, 0.2, 1.0], vec![0.5, 0.0, 0.0, 0.5], vec![1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0])
            .unwrap()
    }

    #[test]
    fn records_agree_with_direct_simulation() {
        let g = grid();
        let plan = ReplicaPlan {
            output_steps: g.output_steps().to_vec(),
            radii: vec![0.5, 1.0],
            eta_steps: vec![0, 25, 50],
            point_moments: true,
            pairing: None,
        };
        let recs = run_replicas(&field(), &g, &plan, 3, 0..4, 1).unwrap();
        for rec in &recs {
            let states = simulate(&field(), &g, 3, rec.replica_id).unwrap();
            for (a, s) in states.iter().enumerate() {
                for (b, &r) in plan.radii.iter().enumerate() {
                    let f = spatial_average(s, &g, r).unwrap();
                    assert_eq!(&rec.f[(a * 2 + b) * 2..(a * 2 + b + 1) * 2], &f[..]);
                }
            }
        }
        // η at r = 0 is σσᵀ at the all-ones state
        let ens = Ensemble::new(&plan, 2, 2, &recs).unwrap();
        let eta = ens.eta_curve(&g).unwrap();
        let s = field().sigma_at_ones();
        for k in 0..2 {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((eta.value(0, k, i, j) - s.get(i, k) * s.get(j, k)).abs() < 1e-14);
                }
            }
        }
    }

    #[test]
    fn worker_count_does_not_change_records() {
        let g = grid();
        let plan = ReplicaPlan {
            output_steps: vec![50],
            radii: vec![1.0],
            eta_steps: vec![0, 50],
            point_moments: true,
            pairing: Some(PairingPlan {
                step: 50,
                radii: vec![1.0],
                window: WindowKind::Scheme,
            }),
        };
        let a = run_replicas(&field(), &g, &plan, 8, 0..6, 1).unwrap();
        let b = run_replicas(&field(), &g, &plan, 8, 0..6, 3).unwrap();
        assert_eq!(a, b);
        let c = run_replicas(&field(), &g, &plan, 8, 3..6, 2).unwrap();
        assert_eq!(&a[3..], &c[..]);
    }

    #[test]
    fn constant_sigma_eta_is_exact() {
        let g = grid();
        let f = DiffusionField::constant(1, 2, vec![0.6, 0.8]).unwrap();
        let eta = estimate_eta(&f, &g, &[0.0, 0.05], 5, 1, 1).unwrap();
        for a in 0..2 {
            assert!((eta.value(a, 0, 0, 0) - 0.36).abs() < 1e-15);
            assert!((eta.value(a, 1, 0, 0) - 0.64).abs() < 1e-15);
            assert!(eta.se.iter().all(|&s| s < 1e-15));
        }
    }
}
