//! Experiment kinds: what each one records, and how records become results.
//!
//! Every Monte Carlo experiment goes through the same three stages: a
//! [`ReplicaPlan`] derived from the configuration, a [`Batch`] of raw replica
//! records, and a fixed-order aggregation of those records. Merged batches
//! enter the same aggregation, so they reproduce a single run exactly.

use serde::{Deserialize, Serialize};
use std::time::Instant;

use crate::config::{ExperimentConfig, ExperimentKind, Prepared};
use crate::ensemble::{run_replicas, Ensemble, PairingPlan, ReplicaPlan, ReplicaRecord};
use crate::error::{Error, Result};
use crate::model::{check_h1, H1Check, SigmaFamily};
use crate::observables::{
    covariance_gap, covariance_weights, cross_covariance_weights, limit_covariance, prelimit_covariance, two_point_cov,
    EtaCurve,
};
use crate::oracles::{constant_sigma_law, pam_second_moment, scheme_point_second_moment};
use crate::report::{Batch, Cell, ExperimentReport, ReplicaSpan, RunMetadata, Table, SCHEMA_VERSION};
use crate::stats::{
    covariance_se, gaussian_gap_bound, gaussian_w2, increment_moment, increment_orthogonality, mardia, mean_se,
    min_eigen_check, rate_fit, sliced_w1, IncrementMoment, Mardia, Matrix, PathSamples, RateFit, SampleMatrix,
    SlicedW1, SymMatrix,
};

/// A matrix of Monte Carlo estimates with entrywise standard errors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixEstimate {
    pub value: Matrix,
    pub se: Matrix,
}

/// Sample against quadrature for one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceAtRadius {
    pub r: f64,
    pub sample: MatrixEstimate,
    /// `C^R(t)` from the Monte Carlo η.
    pub prelimit: MatrixEstimate,
    /// `C(t)` from the Monte Carlo η.
    pub limit: MatrixEstimate,
    /// `se_factor·√(se_sample² + se_quad²) + discretization·√|C^R_ii C^R_jj|`
    pub tolerance: Matrix,
    pub within_tolerance: bool,
    pub mardia: Option<Mardia>,
    pub mardia_passes: Option<bool>,
    /// Sliced W1 of the sample to `N(0, C(t))`.
    pub sliced_w1_limit: Option<SlicedW1>,
    /// Sliced W1 of the sample to `N(0, C^R(t))`.
    pub sliced_w1_prelimit: Option<SlicedW1>,
    /// Bures distance between the sample covariance and `C(t)`.
    pub gaussian_w2_limit: Option<f64>,
    /// Deterministic given η: `W2`-type bound between `N(0, C^R)` and `N(0, C)`.
    pub gaussian_gap_bound: Option<f64>,
    pub prelimit_min_eigenvalue: f64,
}

/// Pooled `E[u_i(t,x)u_j(t,x)]` against the two-point formula.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointMoment {
    pub t: f64,
    pub sample: MatrixEstimate,
    /// Two-point formula evaluated with the Monte Carlo η.
    pub two_point: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovarianceResult {
    pub t: f64,
    pub radii: Vec<CovarianceAtRadius>,
    pub point_moments: Vec<PointMoment>,
}

/// Deterministic covariance gap at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapAtRadius {
    pub r: f64,
    pub prelimit: SymMatrix,
    pub gap_hs: f64,
    pub gap_bound: Option<f64>,
    pub prelimit_min_eigenvalue: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateResult {
    pub t: f64,
    pub limit: SymMatrix,
    /// Whether η is exact (state-independent σ) or a Monte Carlo estimate.
    pub eta_exact: bool,
    pub radii: Vec<GapAtRadius>,
    pub gap_fit: Option<RateFit>,
    pub bound_fit: Option<RateFit>,
}

/// Cross-time statistics for one radius and one pair `s < t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTime {
    pub r: f64,
    pub s: f64,
    pub t: f64,
    /// `E[F_i(s)F_j(t)]`
    pub sample: MatrixEstimate,
    /// `C(s)`
    pub limit: MatrixEstimate,
    /// Exact prelimit cross covariance.
    pub prelimit: MatrixEstimate,
    /// Tolerance against the limit.
    pub tolerance: Matrix,
    pub within_tolerance: bool,
    /// `corr(F_j(s), F_i(t) − F_i(s))`
    pub increment_corr: MatrixEstimate,
    pub increment_max_z: f64,
    pub increment_moment: IncrementMoment,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FcltResult {
    pub times: Vec<f64>,
    pub moment_order: f64,
    pub pairs: Vec<CrossTime>,
}

/// Stein quantities at one radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SteinAtRadius {
    pub r: f64,
    pub prelimit: MatrixEstimate,
    /// Sample `Var(P_ij)`.
    pub pairing_variance: MatrixEstimate,
    pub var_sum: f64,
    pub var_sum_se: f64,
    pub bound: f64,
    /// `E[P_ij]`
    pub mean_pairing: MatrixEstimate,
    /// `E[F_i F_j]`
    pub second_moment: MatrixEstimate,
    /// Mean and SE of the per-replica differences `P_ij − F_i F_j`.
    pub duality_gap: MatrixEstimate,
    pub duality_max_z: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MalliavinResult {
    pub t: f64,
    pub radii: Vec<SteinAtRadius>,
    pub var_sum_fit: Option<RateFit>,
    pub bound_fit: Option<RateFit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstantLawAtRadius {
    pub r: f64,
    pub limit: SymMatrix,
    pub prelimit: SymMatrix,
}

/// Deterministic second moments `E[u(t,x)²]` for scalar affine σ.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointOracle {
    pub t: f64,
    /// Exact value of the finite-difference scheme on the configured grid.
    pub scheme: f64,
    /// Continuum value, when a closed form or the Volterra solution applies.
    pub continuum: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub t: f64,
    pub exact_gaussian: bool,
    pub constant_law: Vec<ConstantLawAtRadius>,
    pub volterra_lambda: Option<f64>,
    pub volterra_error_estimate: Option<f64>,
    pub point_moments: Vec<PointOracle>,
}

/// Results of one experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Outcome {
    H1(H1Check),
    Covariance(CovarianceResult),
    Rate(RateResult),
    Fclt(FcltResult),
    Malliavin(MalliavinResult),
    Oracle(OracleResult),
}

fn eta_steps(p: &Prepared, last: usize) -> Vec<usize> {
    let stride = ((p.config.experiment.eta_dt / p.grid.dt()).round() as usize).max(1);
    let mut steps: Vec<usize> = (0..=last).step_by(stride).collect();
    if *steps.last().unwrap() != last {
        steps.push(last);
    }
    steps
}

/// The replica plan of an experiment, or `None` when it is deterministic.
pub fn plan(p: &Prepared) -> Result<Option<ReplicaPlan>> {
    let e = &p.config.experiment;
    let grid = &p.grid;
    let t_step = grid.step_of(p.t)?;
    let last_output = *grid.output_steps().last().unwrap_or(&t_step);
    Ok(match e.kind {
        ExperimentKind::H1 | ExperimentKind::Oracle => None,
        ExperimentKind::Rate if p.field.is_state_independent() => None,
        ExperimentKind::Rate => Some(ReplicaPlan {
            eta_steps: eta_steps(p, t_step),
            ..ReplicaPlan::default()
        }),
        ExperimentKind::Covariance | ExperimentKind::Fclt => Some(ReplicaPlan {
            output_steps: grid.output_steps().to_vec(),
            radii: e.radii.clone(),
            eta_steps: eta_steps(p, last_output.max(t_step)),
            point_moments: true,
            pairing: None,
        }),
        ExperimentKind::Malliavin => Some(ReplicaPlan {
            output_steps: vec![t_step],
            radii: e.radii.clone(),
            eta_steps: eta_steps(p, t_step),
            point_moments: false,
            pairing: Some(PairingPlan {
                step: t_step,
                radii: e.radii.clone(),
                window: e.window,
            }),
        }),
    })
}

/// Simulates the configured replica range.
pub fn simulate(p: &Prepared) -> Result<Option<Batch>> {
    let Some(plan) = plan(p)? else {
        return Ok(None);
    };
    let e = &p.config.experiment;
    if e.replicas < 2 {
        return Err(Error::config(format!("experiment.replicas must be at least 2, got {}", e.replicas)));
    }
    let ids = e.replica_offset..e.replica_offset + e.replicas as u64;
    let records = run_replicas(&p.field, &p.grid, &plan, e.seed, ids, e.workers)?;
    Ok(Some(Batch {
        schema_version: SCHEMA_VERSION,
        config_hash: p.config.content_hash(),
        config: p.config.clone(),
        plan,
        records,
    }))
}

/// Runs an experiment end to end.
pub fn run(p: &Prepared) -> Result<(ExperimentReport, Option<Batch>)> {
    let start = Instant::now();
    let batch = simulate(p)?;
    let mut report = aggregate(p, batch.as_ref())?;
    report.metadata.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok((report, batch))
}

/// Combines batches of one configuration into a single batch covering all
/// their replicas, ordered by replica id.
pub fn merge(batches: Vec<Batch>) -> Result<Batch> {
    let mut it = batches.into_iter();
    let mut merged = it.next().ok_or_else(|| Error::config("nothing to merge: empty batch list"))?;
    for b in it {
        if b.config_hash != merged.config_hash {
            return Err(Error::config(format!(
                "config hash mismatch: {} vs {}",
                b.config_hash, merged.config_hash
            )));
        }
        if b.plan != merged.plan {
            return Err(Error::config("batches were recorded under different plans"));
        }
        merged.records.extend(b.records);
    }
    merged.records.sort_by_key(|r| r.replica_id);
    if let Some(w) = merged.records.windows(2).find(|w| w[0].replica_id == w[1].replica_id) {
        return Err(Error::config(format!(
            "replica {} appears in more than one batch; batches must cover disjoint id ranges",
            w[0].replica_id
        )));
    }
    let first = merged.records.first().map_or(0, |r| r.replica_id);
    merged.config.experiment.replicas = merged.records.len();
    merged.config.experiment.replica_offset = first;
    Ok(merged)
}

/// Turns records into results and tables.
pub fn aggregate(p: &Prepared, batch: Option<&Batch>) -> Result<ExperimentReport> {
    let kind = p.config.experiment.kind;
    let records: &[ReplicaRecord] = batch.map_or(&[], |b| &b.records);
    let ens = match batch {
        Some(b) => Some(Ensemble::new(&b.plan, p.field.d(), p.field.m(), &b.records)?),
        None => None,
    };
    let (results, tables) = match kind {
        ExperimentKind::H1 => h1(p),
        ExperimentKind::Covariance => covariance(p, need(&ens)?)?,
        ExperimentKind::Rate => rate(p, ens.as_ref())?,
        ExperimentKind::Fclt => fclt(p, need(&ens)?)?,
        ExperimentKind::Malliavin => malliavin(p, need(&ens)?)?,
        ExperimentKind::Oracle => oracle(p)?,
    };
    Ok(ExperimentReport {
        schema_version: SCHEMA_VERSION,
        kind,
        config_hash: p.config.content_hash(),
        config: p.config.clone(),
        replicas: ReplicaSpan::from_records(records),
        results,
        table_files: tables.iter().map(|t| t.file_name(kind)).collect(),
        metadata: RunMetadata {
            wall_clock_seconds: 0.0,
            workers: p.config.experiment.workers,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
        tables,
    })
}

/// Aggregates a merged batch under its own configuration.
pub fn aggregate_batch(batch: &Batch) -> Result<ExperimentReport> {
    let p = batch.config.prepare()?;
    if batch.config_hash != batch.config.content_hash() {
        return Err(Error::config("batch config does not match its recorded hash"));
    }
    aggregate(&p, Some(batch))
}

fn need<'a, 'b>(ens: &'b Option<Ensemble<'a>>) -> Result<&'b Ensemble<'a>> {
    ens.as_ref().ok_or_else(|| Error::config("this experiment needs replica records"))
}

fn estimate((value, se): (SymMatrix, Matrix)) -> MatrixEstimate {
    MatrixEstimate {
        value: value.matrix().clone(),
        se,
    }
}

/// Mean and SE of `x_i·y_j` over paired rows.
fn product_moment(x: &SampleMatrix, y: &SampleMatrix) -> MatrixEstimate {
    let d = x.dim();
    let mut value = Matrix::zeros(d, d);
    let mut se = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let v: Vec<f64> = x.rows().zip(y.rows()).map(|(a, b)| a[i] * b[j]).collect();
            let (mu, s) = mean_se(&v);
            value.set(i, j, mu);
            se.set(i, j, s);
        }
    }
    MatrixEstimate { value, se }
}

fn tolerance(p: &Prepared, a: &MatrixEstimate, b: &MatrixEstimate, scale: &Matrix) -> Matrix {
    let tol = &p.config.experiment.tolerances;
    let d = a.value.rows;
    let mut out = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let se = a.se.get(i, j).hypot(b.se.get(i, j));
            let allow = (scale.get(i, i) * scale.get(j, j)).abs().sqrt();
            out.set(i, j, tol.se_factor * se + tol.discretization * allow);
        }
    }
    out
}

fn within(a: &MatrixEstimate, b: &MatrixEstimate, tol: &Matrix) -> bool {
    a.value
        .data
        .iter()
        .zip(&b.value.data)
        .zip(&tol.data)
        .all(|((x, y), t)| (x - y).abs() <= *t)
}

fn fit(points: &[(f64, f64)]) -> Option<RateFit> {
    if points.len() < 3 || points.iter().any(|&(_, y)| !(y > 0.0)) {
        return None;
    }
    rate_fit(points).ok()
}

fn eta_table(eta: &EtaCurve) -> Table {
    let mut t = Table::new("eta", &["r", "k", "i", "j", "value", "se"]);
    for (a, &r) in eta.times.iter().enumerate() {
        for k in 0..eta.m {
            for i in 0..eta.d {
                for j in 0..eta.d {
                    let q = eta.index(a, k, i, j);
                    t.push(vec![r.into(), k.into(), i.into(), j.into(), eta.values[q].into(), eta.se[q].into()]);
                }
            }
        }
    }
    t
}

fn opt(v: Option<f64>) -> Cell {
    Cell::Float(v.unwrap_or(f64::NAN))
}

fn h1(p: &Prepared) -> (Outcome, Vec<Table>) {
    let c = check_h1(&p.field);
    let mut t = Table::new("check", &["d", "m", "rank", "holds"]);
    t.push(vec![p.field.d().into(), p.field.m().into(), c.rank.into(), c.holds.into()]);
    (Outcome::H1(c), vec![t])
}

fn covariance(p: &Prepared, ens: &Ensemble) -> Result<(Outcome, Vec<Table>)> {
    let e = &p.config.experiment;
    let grid = &p.grid;
    let t = p.t;
    let step = grid.step_of(t)?;
    let eta = ens.eta_curve(grid)?;
    let limit = estimate(ens.quadrature(&covariance_weights(&eta.times, t, None)?)?);
    let limit_sym = SymMatrix::symmetrized(&limit.value);
    let mut out = Vec::new();
    let mut entries = Table::new(
        "entries",
        &["r", "i", "j", "sample", "sample_se", "prelimit", "prelimit_se", "limit", "limit_se", "tolerance", "within"],
    );
    let mut normality = Table::new(
        "normality",
        &[
            "r",
            "mardia_skewness",
            "skew_pvalue",
            "mardia_kurtosis",
            "kurtosis_z",
            "kurt_pvalue",
            "sliced_w1_limit",
            "sliced_w1_limit_se",
            "sliced_w1_prelimit",
            "sliced_w1_prelimit_se",
            "gaussian_w2_limit",
            "gaussian_gap_bound",
            "prelimit_min_eigenvalue",
        ],
    );
    let mut samples = Table::new("samples", &["replica", "t", "r", "i", "value"]);
    for &r in &e.radii {
        let fs = ens.f_samples(step, r)?;
        let sample = estimate(covariance_se(&fs));
        let prelimit = estimate(ens.quadrature(&covariance_weights(&eta.times, t, Some(r))?)?);
        let cr = SymMatrix::symmetrized(&prelimit.value);
        let tol = tolerance(p, &sample, &prelimit, &prelimit.value);
        let ok = within(&sample, &prelimit, &tol);
        let m = mardia(&fs).ok();
        let sw_c = sliced_w1(&fs, &limit_sym, e.projections, e.seed).ok();
        let sw_cr = sliced_w1(&fs, &cr, e.projections, e.seed).ok();
        let w2 = gaussian_w2(&fs.covariance(), &limit_sym).ok();
        let gap = gaussian_gap_bound(&cr, &limit_sym).ok();
        let min_eig = min_eigen_check(&cr);
        let d = fs.dim();
        for i in 0..d {
            for j in 0..d {
                entries.push(vec![
                    r.into(),
                    i.into(),
                    j.into(),
                    sample.value.get(i, j).into(),
                    sample.se.get(i, j).into(),
                    prelimit.value.get(i, j).into(),
                    prelimit.se.get(i, j).into(),
                    limit.value.get(i, j).into(),
                    limit.se.get(i, j).into(),
                    tol.get(i, j).into(),
                    ((sample.value.get(i, j) - prelimit.value.get(i, j)).abs() <= tol.get(i, j)).into(),
                ]);
            }
        }
        normality.push(vec![
            r.into(),
            opt(m.map(|m| m.skewness_stat)),
            opt(m.map(|m| m.skew_pvalue)),
            opt(m.map(|m| m.kurtosis_stat)),
            opt(m.map(|m| m.kurtosis_z)),
            opt(m.map(|m| m.kurt_pvalue)),
            opt(sw_c.map(|s| s.mean)),
            opt(sw_c.map(|s| s.se)),
            opt(sw_cr.map(|s| s.mean)),
            opt(sw_cr.map(|s| s.se)),
            opt(w2),
            opt(gap),
            min_eig.into(),
        ]);
        for (rec, row) in ens.records.iter().zip(fs.rows()) {
            for (i, v) in row.iter().enumerate() {
                samples.push(vec![rec.replica_id.into(), t.into(), r.into(), i.into(), (*v).into()]);
            }
        }
        out.push(CovarianceAtRadius {
            r,
            sample,
            prelimit,
            limit: limit.clone(),
            tolerance: tol,
            within_tolerance: ok,
            mardia: m,
            mardia_passes: m.map(|m| m.passes(e.tolerances.alpha)),
            sliced_w1_limit: sw_c,
            sliced_w1_prelimit: sw_cr,
            gaussian_w2_limit: w2,
            gaussian_gap_bound: gap,
            prelimit_min_eigenvalue: min_eig,
        });
    }
    let mut moments = Vec::new();
    let mut mt = Table::new("point_moments", &["t", "i", "j", "sample", "sample_se", "two_point"]);
    for &s in grid.output_steps() {
        if s == 0 {
            continue;
        }
        let ts = grid.time_of(s);
        let (value, se) = ens.point_moment(s)?;
        let two = two_point_cov(&eta, ts, ts, 0.0)?.matrix().clone();
        let d = value.rows;
        for i in 0..d {
            for j in 0..d {
                mt.push(vec![
                    ts.into(),
                    i.into(),
                    j.into(),
                    value.get(i, j).into(),
                    se.get(i, j).into(),
                    two.get(i, j).into(),
                ]);
            }
        }
        moments.push(PointMoment {
            t: ts,
            sample: MatrixEstimate { value, se },
            two_point: two,
        });
    }
    let tables = vec![entries, normality, mt, eta_table(&eta), samples];
    Ok((
        Outcome::Covariance(CovarianceResult {
            t,
            radii: out,
            point_moments: moments,
        }),
        tables,
    ))
}

fn rate(p: &Prepared, ens: Option<&Ensemble>) -> Result<(Outcome, Vec<Table>)> {
    let t = p.t;
    let (eta, exact) = match ens {
        None => (EtaCurve::constant(&p.field.sigma_at_ones(), vec![0.0, t])?, true),
        Some(ens) => (ens.eta_curve(&p.grid)?, false),
    };
    let limit = limit_covariance(&eta, t)?;
    let mut rows = Vec::new();
    let mut table = Table::new("gap", &["r", "gap_hs", "gap_bound", "prelimit_min_eigenvalue"]);
    for &r in &p.config.experiment.radii {
        let cr = prelimit_covariance(&eta, t, r)?;
        let gap_hs = covariance_gap(&eta, t, r)?.hs_norm();
        let bound = gaussian_gap_bound(&cr, &limit).ok();
        let min_eig = min_eigen_check(&cr);
        table.push(vec![r.into(), gap_hs.into(), opt(bound), min_eig.into()]);
        rows.push(GapAtRadius {
            r,
            prelimit: cr,
            gap_hs,
            gap_bound: bound,
            prelimit_min_eigenvalue: min_eig,
        });
    }
    let gap_fit = fit(&rows.iter().map(|g| (g.r, g.gap_hs)).collect::<Vec<_>>());
    let bound_fit = rows
        .iter()
        .map(|g| g.gap_bound.map(|b| (g.r, b)))
        .collect::<Option<Vec<_>>>()
        .and_then(|pts| fit(&pts));
    let mut ft = Table::new("fit", &["quantity", "slope", "intercept", "r2"]);
    for (q, f) in [(0usize, gap_fit), (1, bound_fit)] {
        if let Some(f) = f {
            ft.push(vec![q.into(), f.slope.into(), f.intercept.into(), f.r2.into()]);
        }
    }
    let mut tables = vec![table, ft];
    if !exact {
        tables.push(eta_table(&eta));
    }
    Ok((
        Outcome::Rate(RateResult {
            t,
            limit,
            eta_exact: exact,
            radii: rows,
            gap_fit,
            bound_fit,
        }),
        tables,
    ))
}

fn fclt(p: &Prepared, ens: &Ensemble) -> Result<(Outcome, Vec<Table>)> {
    let e = &p.config.experiment;
    let grid = &p.grid;
    let eta = ens.eta_curve(grid)?;
    let steps: Vec<usize> = grid.output_steps().iter().copied().filter(|&s| s > 0).collect();
    let times: Vec<f64> = steps.iter().map(|&s| grid.time_of(s)).collect();
    if times.len() < 2 {
        return Err(Error::config("fclt experiments need at least two positive output times"));
    }
    let mut pairs = Vec::new();
    let mut cross = Table::new(
        "cross_covariance",
        &["r", "s", "t", "i", "j", "sample", "sample_se", "limit", "limit_se", "prelimit", "prelimit_se", "tolerance"],
    );
    let mut orth = Table::new("orthogonality", &["r", "s", "t", "i", "j", "corr", "se"]);
    let mut tight = Table::new("tightness", &["r", "s", "t", "p", "moment", "se", "ratio"]);
    let mut paths_t = Table::new("paths", &["replica", "r", "t", "i", "value"]);
    for &r in &e.radii {
        let per_time: Vec<SampleMatrix> = steps.iter().map(|&s| ens.f_samples(s, r)).collect::<Result<_>>()?;
        let d = per_time[0].dim();
        let mut values = Vec::with_capacity(ens.len() * times.len() * d);
        for k in 0..ens.len() {
            for (a, smp) in per_time.iter().enumerate() {
                // G^R = √R·F^R
                values.extend(smp.row(k).iter().map(|v| v * r.sqrt()));
                for (i, v) in smp.row(k).iter().enumerate() {
                    paths_t.push(vec![
                        ens.records[k].replica_id.into(),
                        r.into(),
                        times[a].into(),
                        i.into(),
                        (*v).into(),
                    ]);
                }
            }
        }
        let paths = PathSamples {
            times: times.clone(),
            d,
            values,
        };
        for a in 0..times.len() {
            for b in a + 1..times.len() {
                let (s, t) = (times[a], times[b]);
                let sample = product_moment(&per_time[a], &per_time[b]);
                let limit = estimate(ens.quadrature(&cross_covariance_weights(&eta.times, s, t, None)?)?);
                let prelimit = estimate(ens.quadrature(&cross_covariance_weights(&eta.times, s, t, Some(r))?)?);
                let tol = tolerance(p, &sample, &limit, &limit.value);
                let ok = within(&sample, &limit, &tol);
                let o = increment_orthogonality(&per_time[a], &per_time[b])?;
                let mom = increment_moment(&paths, s, t, e.moment_order, r)?;
                for i in 0..d {
                    for j in 0..d {
                        cross.push(vec![
                            r.into(),
                            s.into(),
                            t.into(),
                            i.into(),
                            j.into(),
                            sample.value.get(i, j).into(),
                            sample.se.get(i, j).into(),
                            limit.value.get(i, j).into(),
                            limit.se.get(i, j).into(),
                            prelimit.value.get(i, j).into(),
                            prelimit.se.get(i, j).into(),
                            tol.get(i, j).into(),
                        ]);
                        orth.push(vec![
                            r.into(),
                            s.into(),
                            t.into(),
                            i.into(),
                            j.into(),
                            o.corr.get(i, j).into(),
                            o.se.get(i, j).into(),
                        ]);
                    }
                }
                tight.push(vec![
                    r.into(),
                    s.into(),
                    t.into(),
                    e.moment_order.into(),
                    mom.moment.into(),
                    mom.se.into(),
                    mom.ratio.into(),
                ]);
                pairs.push(CrossTime {
                    r,
                    s,
                    t,
                    sample,
                    limit,
                    prelimit,
                    tolerance: tol,
                    within_tolerance: ok,
                    increment_max_z: o.max_z(),
                    increment_corr: MatrixEstimate { value: o.corr, se: o.se },
                    increment_moment: mom,
                });
            }
        }
    }
    Ok((
        Outcome::Fclt(FcltResult {
            times,
            moment_order: e.moment_order,
            pairs,
        }),
        vec![cross, orth, tight, eta_table(&eta), paths_t],
    ))
}

fn malliavin(p: &Prepared, ens: &Ensemble) -> Result<(Outcome, Vec<Table>)> {
    let e = &p.config.experiment;
    let grid = &p.grid;
    let t = p.t;
    let step = grid.step_of(t)?;
    let eta = ens.eta_curve(grid)?;
    let mut rows = Vec::new();
    let mut stein = Table::new(
        "stein",
        &["r", "var_sum", "var_sum_se", "bound", "bound_sqrt_r", "prelimit_min_eigenvalue"],
    );
    let mut duality = Table::new(
        "duality",
        &["r", "i", "j", "mean_pairing", "mean_pairing_se", "second_moment", "second_moment_se", "gap", "gap_se"],
    );
    for &r in &e.radii {
        let prelimit = estimate(ens.quadrature(&covariance_weights(&eta.times, t, Some(r))?)?);
        let cr = SymMatrix::symmetrized(&prelimit.value);
        let pairings = ens.pairings(r)?;
        let st = crate::malliavin::stein_bound(&pairings, &cr)?;
        let fs = ens.f_samples(step, r)?;
        let second = product_moment(&fs, &fs);
        let d = fs.dim();
        let mut gap = Matrix::zeros(d, d);
        let mut gap_se = Matrix::zeros(d, d);
        for i in 0..d {
            for j in 0..d {
                let diff: Vec<f64> = pairings
                    .iter()
                    .zip(fs.rows())
                    .map(|(pp, f)| pp.p.get(i, j) - f[i] * f[j])
                    .collect();
                let (mu, se) = mean_se(&diff);
                gap.set(i, j, mu);
                gap_se.set(i, j, se);
                duality.push(vec![
                    r.into(),
                    i.into(),
                    j.into(),
                    st.mean.get(i, j).into(),
                    st.mean_se.get(i, j).into(),
                    second.value.get(i, j).into(),
                    second.se.get(i, j).into(),
                    mu.into(),
                    se.into(),
                ]);
            }
        }
        let max_z = gap
            .data
            .iter()
            .zip(&gap_se.data)
            .map(|(g, s)| if *s > 0.0 { g.abs() / s } else if *g == 0.0 { 0.0 } else { f64::INFINITY })
            .fold(0.0, f64::max);
        let min_eig = min_eigen_check(&cr);
        stein.push(vec![
            r.into(),
            st.var_sum.into(),
            st.var_sum_se.into(),
            st.bound.into(),
            (st.bound * r.sqrt()).into(),
            min_eig.into(),
        ]);
        rows.push(SteinAtRadius {
            r,
            prelimit,
            pairing_variance: MatrixEstimate {
                value: st.varhat.clone(),
                se: st.varhat_se.clone(),
            },
            var_sum: st.var_sum,
            var_sum_se: st.var_sum_se,
            bound: st.bound,
            mean_pairing: MatrixEstimate {
                value: st.mean.clone(),
                se: st.mean_se.clone(),
            },
            second_moment: second,
            duality_gap: MatrixEstimate { value: gap, se: gap_se },
            duality_max_z: max_z,
        });
    }
    let var_sum_fit = fit(&rows.iter().map(|s| (s.r, s.var_sum)).collect::<Vec<_>>());
    let bound_fit = fit(&rows.iter().map(|s| (s.r, s.bound)).collect::<Vec<_>>());
    let mut ft = Table::new("fit", &["quantity", "slope", "intercept", "r2"]);
    for (q, f) in [(0usize, var_sum_fit), (1, bound_fit)] {
        if let Some(f) = f {
            ft.push(vec![q.into(), f.slope.into(), f.intercept.into(), f.r2.into()]);
        }
    }
    Ok((
        Outcome::Malliavin(MalliavinResult {
            t,
            radii: rows,
            var_sum_fit,
            bound_fit,
        }),
        vec![stein, duality, ft, eta_table(&eta)],
    ))
}

/// `(a, b)` of a scalar affine σ(u) = a + b·u, if the model is one.
fn scalar_affine(p: &Prepared) -> Option<(f64, f64)> {
    if p.field.d() != 1 || p.field.m() != 1 {
        return None;
    }
    match p.field.family() {
        SigmaFamily::Constant { s } => Some((s[0], 0.0)),
        SigmaFamily::Affine { a, b } => Some((a[0], b[0])),
        SigmaFamily::BoundedSmooth { .. } => None,
    }
}

fn oracle(p: &Prepared) -> Result<(Outcome, Vec<Table>)> {
    let e = &p.config.experiment;
    let t = p.t;
    let mut tables = Vec::new();
    let mut laws = Vec::new();
    if p.field.is_state_independent() {
        let s = p.field.sigma_at_ones();
        let mut table = Table::new("constant_law", &["r", "i", "j", "limit", "prelimit"]);
        for &r in &e.radii {
            let law = constant_sigma_law(&s, t, r)?;
            let d = law.c.dim();
            for i in 0..d {
                for j in 0..d {
                    table.push(vec![r.into(), i.into(), j.into(), law.c.get(i, j).into(), law.cr.get(i, j).into()]);
                }
            }
            laws.push(ConstantLawAtRadius {
                r,
                limit: law.c,
                prelimit: law.cr,
            });
        }
        tables.push(table);
    }
    let affine = scalar_affine(p);
    let mut volterra = None;
    if let Some((0.0, lambda)) = affine {
        let sol = pam_second_moment(lambda, p.grid.t_final(), crate::config::defaults::VOLTERRA_STEPS, e.volterra_tol)?;
        let mut table = Table::new("volterra", &["t", "f"]);
        for (tt, f) in sol.times.iter().zip(&sol.values) {
            table.push(vec![(*tt).into(), (*f).into()]);
        }
        tables.push(table);
        volterra = Some(sol);
    }
    let mut points = Vec::new();
    if let Some((a, b)) = affine {
        let mut table = Table::new("point_moments", &["t", "scheme", "continuum"]);
        for &s in p.grid.output_steps() {
            let ts = p.grid.time_of(s);
            let scheme = scheme_point_second_moment(a, b, &p.grid, ts)?;
            let continuum = if b == 0.0 {
                Some(1.0 + a * a * crate::oracles::additive_point_variance(ts)?)
            } else {
                volterra.as_ref().map(|v| v.value_at(ts)).transpose()?
            };
            table.push(vec![ts.into(), scheme.into(), opt(continuum)]);
            points.push(PointOracle { t: ts, scheme, continuum });
        }
        tables.push(table);
    }
    if tables.is_empty() {
        return Err(Error::config(
            "no oracle applies: needs state-independent σ or scalar affine σ(u) = a + b·u",
        ));
    }
    Ok((
        Outcome::Oracle(OracleResult {
            t,
            exact_gaussian: p.field.is_state_independent(),
            constant_law: laws,
            volterra_lambda: volterra.as_ref().map(|v| v.lambda),
            volterra_error_estimate: volterra.as_ref().map(|v| v.error_estimate),
            point_moments: points,
        }),
        tables,
    ))
}

/// Parses a config, applies overrides and runs it.
pub fn run_config(config: &ExperimentConfig) -> Result<(ExperimentReport, Option<Batch>)> {
    run(&config.prepare()?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(extra: &str, overrides: &[&str]) -> ExperimentConfig {
        let text = format!(
            "[model]\nd = 1\nm = 1\nfamily = \"constant\"\ns = [1.0]\n\n[grid]\ndx = 0.1\ndt = 0.004\nt_final = 0.2\npadding = 2.0\n\n{extra}"
        );
        let ov: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
        ExperimentConfig::from_toml_str(&text, &ov).unwrap()
    }

    const COV: &str = "[experiment]\nkind = \"covariance\"\nradii = [0.5, 1.0]\nreplicas = 40\neta_dt = 0.02\n";

    #[test]
    fn h1_identity_holds() {
        let c = cfg("[experiment]\nkind = \"h1\"\n", &[]);
        let (r, b) = run_config(&c).unwrap();
        assert!(b.is_none());
        match r.results {
            Outcome::H1(h) => assert!(h.holds && h.rank == 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn covariance_tables_and_shapes() {
        let (r, b) = run_config(&cfg(COV, &[])).unwrap();
        let b = b.unwrap();
        assert_eq!(b.records.len(), 40);
        let Outcome::Covariance(c) = &r.results else { panic!() };
        assert_eq!(c.radii.len(), 2);
        // constant σ: the quadrature is deterministic
        assert!(c.radii[0].prelimit.se.get(0, 0) < 1e-15);
        let names: Vec<&str> = r.tables.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, ["entries", "normality", "point_moments", "eta", "samples"]);
        assert_eq!(r.table_files[0], "covariance_entries.csv");
        assert_eq!(r.table("samples").unwrap().rows.len(), 80);
    }

    #[test]
    fn merge_reproduces_a_single_run() {
        let full = run_config(&cfg(COV, &[])).unwrap();
        let a = run_config(&cfg(COV, &["experiment.replicas=15"])).unwrap().1.unwrap();
        let b = run_config(&cfg(COV, &["experiment.replicas=25", "experiment.replica_offset=15"]))
            .unwrap()
            .1
            .unwrap();
        let merged = merge(vec![b, a]).unwrap();
        assert_eq!(&merged, full.1.as_ref().unwrap());
        let r = aggregate_batch(&merged).unwrap();
        for (x, y) in r.tables.iter().zip(&full.0.tables) {
            assert_eq!(x.to_csv(), y.to_csv());
        }
    }

    #[test]
    fn merge_refusals() {
        assert!(matches!(merge(vec![]), Err(Error::Config(_))));
        let a = run_config(&cfg(COV, &["experiment.replicas=5"])).unwrap().1.unwrap();
        let other = run_config(&cfg(COV, &["experiment.replicas=5", "experiment.seed=9"])).unwrap().1.unwrap();
        let e = merge(vec![a.clone(), other]).unwrap_err();
        assert!(e.to_string().contains("hash"), "{e}");
        let e = merge(vec![a.clone(), a]).unwrap_err();
        assert!(e.to_string().contains("disjoint"), "{e}");
    }

    #[test]
    fn rate_is_deterministic_for_constant_sigma() {
        let c = cfg(
            "[experiment]\nkind = \"rate\"\nradii = [2.0, 4.0, 8.0, 16.0, 32.0, 64.0]\n",
            &["grid.t_final=1.0", "grid.dt=0.001", "grid.dx=0.05"],
        );
        let (r, b) = run_config(&c).unwrap();
        assert!(b.is_none());
        let Outcome::Rate(rr) = r.results else { panic!() };
        assert!(rr.eta_exact);
        let f = rr.gap_fit.unwrap();
        assert!((f.slope + 1.0).abs() < 0.05, "{f:?}");
    }

    #[test]
    fn oracle_kinds() {
        let c = cfg("[experiment]\nkind = \"oracle\"\nradii = [5.0]\n", &["grid.t_final=1.0", "grid.dt=0.001", "grid.dx=0.05"]);
        let (r, _) = run_config(&c).unwrap();
        let Outcome::Oracle(o) = r.results else { panic!() };
        assert!((o.constant_law[0].prelimit.get(0, 0) - 1.849549444387267).abs() < 1e-11);
        assert!((o.point_moments[0].scheme - 1.57052).abs() < 1e-4);
        let pam = "[model]\nd = 1\nm = 1\nfamily = \"affine\"\na = [0.0]\nb = [1.0]\n\n[experiment]\nkind = \"oracle\"\n";
        let c = ExperimentConfig::from_toml_str(pam, &[]).unwrap();
        let (r, _) = run_config(&c).unwrap();
        let Outcome::Oracle(o) = r.results else { panic!() };
        assert_eq!(o.volterra_lambda, Some(1.0));
        assert!((o.point_moments[0].continuum.unwrap() - 1.95236).abs() < 1e-5);
        let bs = "[model]\nd = 1\nm = 1\nfamily = \"bounded-smooth\"\na = [1.0]\nc = [0.5]\nw = [1.0]\n\n[experiment]\nkind = \"oracle\"\n";
        let c = ExperimentConfig::from_toml_str(bs, &[]).unwrap();
        assert!(matches!(run_config(&c), Err(Error::Config(_))));
    }

    #[test]
    fn malliavin_constant_sigma_has_zero_stein_term() {
        let c = cfg("[experiment]\nkind = \"malliavin\"\nradii = [0.5, 1.0, 1.5]\nreplicas = 10\neta_dt = 0.02\n", &[]);
        let (r, _) = run_config(&c).unwrap();
        let Outcome::Malliavin(m) = r.results else { panic!() };
        for s in &m.radii {
            assert!(s.var_sum < 1e-20, "{}", s.var_sum);
        }
    }

    #[test]
    fn fclt_pairs_cover_all_time_pairs() {
        let c = cfg(
            "[experiment]\nkind = \"fclt\"\nradii = [0.5, 1.0]\nreplicas = 30\neta_dt = 0.02\n",
            &["grid.output_times=[0.08, 0.12, 0.2]"],
        );
        let (r, _) = run_config(&c).unwrap();
        let Outcome::Fclt(f) = &r.results else { panic!() };
        assert_eq!(f.pairs.len(), 6);
        let paths = r.table("paths").unwrap();
        assert_eq!(paths.rows.len(), 2 * 30 * 3);
        // tightness moments are taken on G^R = √R·F^R
        let col = |n| paths.column(n).unwrap();
        let (rr, tt, v) = (col("r"), col("t"), col("value"));
        let at = |t: f64| -> Vec<f64> { (0..v.len()).filter(|&k| rr[k] == 0.5 && tt[k] == t).map(|k| v[k]).collect() };
        let (fs, ft) = (at(0.08), at(0.2));
        let m4 = fs.iter().zip(&ft).map(|(a, b)| (b - a).powi(4)).sum::<f64>() / 30.0;
        let pair = f.pairs.iter().find(|x| x.r == 0.5 && x.s == 0.08 && x.t == 0.2).unwrap();
        assert!((pair.increment_moment.moment - 0.25 * m4).abs() < 1e-12 * m4);
        assert!((pair.increment_moment.ratio - m4 / (0.12f64).powi(2)).abs() < 1e-9 * pair.increment_moment.ratio);
    }
}
