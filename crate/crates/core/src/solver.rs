//! Explicit finite-difference scheme for the system on a truncated interval.
//!
//! One step of the primal field reads
//!
//! ```text
//! u_i^{n+1}(ℓ) = u_i^n(ℓ) + (dt / 2dx²)·(u_i^n(ℓ+1) − 2u_i^n(ℓ) + u_i^n(ℓ−1))
//!              + Σ_j σ_ij(u^n(ℓ))·√(dt/dx)·ξ^j_{n,ℓ}
//! ```
//!
//! The diffusion number `dt/2dx²` discretizes `½∂²ₓ`, whose fundamental
//! solution is the heat kernel `p_t` of the mild formulation. Boundary nodes are
//! clamped to 1 for the primal field and to 0 for tangent fields.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::ops::Range;

use crate::error::{Error, Result};
use crate::model::{DiffusionField, SigmaFamily};

/// Construction parameters for a [`Grid`] sized for a set of radii.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub t_final: f64,
    pub dt: f64,
    pub dx: f64,
    /// Largest averaging radius the grid must support.
    pub r_max: f64,
    /// Padding multiplier: the half-width is at least `r_max + padding·√(2T)`.
    pub padding: f64,
    pub output_times: Vec<f64>,
}

/// Space-time discretization.
///
/// Interior nodes sit at `x_ℓ = −L + ℓ·dx`, `ℓ = 1..=nx`, with `nx` even, so
/// nodes are half-integer multiples of `dx` and every radius that is a multiple
/// of `dx` is a cell edge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    t_final: f64,
    nt: usize,
    dt: f64,
    half_width: f64,
    nx: usize,
    dx: f64,
    padding: f64,
    output_steps: Vec<usize>,
}

fn steps_for(t_final: f64, dt: f64) -> Result<usize> {
    if !(t_final > 0.0) || !(dt > 0.0) {
        return Err(Error::config(format!(
            "T and dt must be positive (T={t_final}, dt={dt})"
        )));
    }
    let nt = (t_final / dt).round();
    if nt < 1.0 || (nt * dt - t_final).abs() > 1e-9 * t_final {
        return Err(Error::config(format!(
            "T={t_final} is not an integer multiple of dt={dt}"
        )));
    }
    Ok(nt as usize)
}

impl Grid {
    /// Builds the smallest grid whose half-width covers `r_max + padding·√(2T)`.
    pub fn new(spec: &GridSpec) -> Result<Grid> {
        if !(spec.dx > 0.0) {
            return Err(Error::config(format!("dx must be positive, got {}", spec.dx)));
        }
        if !(spec.r_max >= 0.0) || !(spec.padding >= 0.0) {
            return Err(Error::config("r_max and padding must be nonnegative"));
        }
        let l_min = spec.r_max + spec.padding * (2.0 * spec.t_final).sqrt();
        let mut nx = ((2.0 * l_min / spec.dx - 1.0) - 1e-9).ceil().max(2.0) as usize;
        if nx % 2 == 1 {
            nx += 1;
        }
        let nt = steps_for(spec.t_final, spec.dt)?;
        Self::build(nt, spec.t_final, nx, spec.dx, spec.padding, &spec.output_times)
    }

    /// Builds a grid with an explicit node count (used for tiny oracle grids).
    pub fn from_nodes(
        nt: usize,
        t_final: f64,
        nx: usize,
        dx: f64,
        padding: f64,
        output_times: &[f64],
    ) -> Result<Grid> {
        if nt == 0 {
            return Err(Error::config("nt must be positive"));
        }
        if nx < 2 || nx % 2 == 1 {
            return Err(Error::config(format!("nx must be even and at least 2, got {nx}")));
        }
        if !(dx > 0.0) {
            return Err(Error::config(format!("dx must be positive, got {dx}")));
        }
        Self::build(nt, t_final, nx, dx, padding, output_times)
    }

    fn build(nt: usize, t_final: f64, nx: usize, dx: f64, padding: f64, output_times: &[f64]) -> Result<Grid> {
        if !(t_final > 0.0) {
            return Err(Error::config(format!("T must be positive, got {t_final}")));
        }
        let dt = t_final / nt as f64;
        if dt > 0.5 * dx * dx * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "stability condition violated: dt={dt} exceeds dx²/2={}",
                0.5 * dx * dx
            )));
        }
        let mut output_steps = Vec::with_capacity(output_times.len());
        for &t in output_times {
            let n = (t / dt).round();
            if !(t >= 0.0) || n > nt as f64 || (n * dt - t).abs() > 1e-9 * t_final.max(1.0) {
                return Err(Error::config(format!(
                    "output time {t} is not a grid time in [0, {t_final}] with dt={dt}"
                )));
            }
            output_steps.push(n as usize);
        }
        output_steps.sort_unstable();
        output_steps.dedup();
        Ok(Grid {
            t_final,
            nt,
            dt,
            half_width: 0.5 * (nx + 1) as f64 * dx,
            nx,
            dx,
            padding,
            output_steps,
        })
    }

    pub fn t_final(&self) -> f64 {
        self.t_final
    }
    pub fn nt(&self) -> usize {
        self.nt
    }
    pub fn dt(&self) -> f64 {
        self.dt
    }
    /// Half-width `L` of the truncated interval.
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn nx(&self) -> usize {
        self.nx
    }
    pub fn dx(&self) -> f64 {
        self.dx
    }
    pub fn padding(&self) -> f64 {
        self.padding
    }
    pub fn output_steps(&self) -> &[usize] {
        &self.output_steps
    }

    pub fn output_times(&self) -> Vec<f64> {
        self.output_steps.iter().map(|&n| self.time_of(n)).collect()
    }

    /// Coordinate of interior node `i` (0-based).
    #[inline]
    pub fn x(&self, i: usize) -> f64 {
        -self.half_width + (i + 1) as f64 * self.dx
    }

    pub fn xs(&self) -> Vec<f64> {
        (0..self.nx).map(|i| self.x(i)).collect()
    }

    pub fn time_of(&self, n: usize) -> f64 {
        n as f64 * self.dt
    }

    /// Step index of a grid time.
    pub fn step_of(&self, t: f64) -> Result<usize> {
        let n = (t / self.dt).round();
        if !(t >= 0.0) || n > self.nt as f64 || (n * self.dt - t).abs() > 1e-9 * self.t_final.max(1.0) {
            return Err(Error::config(format!("time {t} is not on the time grid (dt={})", self.dt)));
        }
        Ok(n as usize)
    }

    /// `dt / (2dx²)`.
    #[inline]
    pub fn diffusion_number(&self) -> f64 {
        self.dt / (2.0 * self.dx * self.dx)
    }

    /// `√(dt/dx)`, the white-noise increment scale per cell.
    #[inline]
    pub fn noise_scale(&self) -> f64 {
        (self.dt / self.dx).sqrt()
    }

    /// Largest radius allowed by the truncation margin `L − padding·√(2T)`.
    pub fn max_radius(&self) -> f64 {
        self.half_width - self.padding * (2.0 * self.t_final).sqrt()
    }

    /// Interior node indices with `|x| ≤ R`, after checking the truncation
    /// margin and lattice alignment of `R`.
    pub fn window_range(&self, r: f64) -> Result<Range<usize>> {
        if !(r > 0.0) {
            return Err(Error::config(format!("radius must be positive, got {r}")));
        }
        if r > self.max_radius() * (1.0 + 1e-12) {
            return Err(Error::config(format!(
                "radius {r} exceeds the truncation margin: L={} leaves at most {} after padding {}·√(2T)",
                self.half_width,
                self.max_radius(),
                self.padding
            )));
        }
        let cells = r / self.dx;
        if (cells - cells.round()).abs() > 1e-6 {
            return Err(Error::config(format!(
                "radius {r} is not aligned to the node lattice (dx={})",
                self.dx
            )));
        }
        let half = cells.round() as usize;
        let mid = self.nx / 2;
        Ok(mid - half..mid + half)
    }

    /// Interior nodes with `|x| ≤ L/2`, used for spatial pooling.
    pub fn pool_range(&self) -> Range<usize> {
        let half = ((0.5 * self.half_width / self.dx) - 0.5).floor().max(0.0) as usize + 1;
        let mid = self.nx / 2;
        let half = half.min(mid);
        mid - half..mid + half
    }

    /// The calibration grid `(dx/2, dt/4)` over the same horizon and radius support.
    pub fn refined(&self) -> Result<Grid> {
        let spec = GridSpec {
            t_final: self.t_final,
            dt: self.dt / 4.0,
            dx: self.dx / 2.0,
            r_max: self.max_radius().max(0.0),
            padding: self.padding,
            output_times: self.output_times(),
        };
        Grid::new(&spec)
    }
}

/// Reproducible stream of standard normal variates for one replica.
///
/// A ChaCha8 generator keyed by `seed` with stream number `replica_id`, so each
/// replica draws from its own counter-based sequence. Variates are produced
/// step by step in channel-major order `ξ[j·nx + ℓ]`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha8Rng,
    channels: usize,
    nodes: usize,
}

impl NoiseStream {
    pub fn new(seed: u64, replica_id: u64, channels: usize, nodes: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(replica_id);
        NoiseStream { rng, channels, nodes }
    }

    /// Fills the `m × nx` slice of variates for the next time step.
    pub fn next_step(&mut self, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.channels * self.nodes);
        for v in out.iter_mut() {
            *v = self.rng.sample(StandardNormal);
        }
    }

    pub fn len_per_step(&self) -> usize {
        self.channels * self.nodes
    }
}

/// Solution values on the interior nodes at one time step, stored component-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldState {
    pub step: usize,
    pub d: usize,
    pub nx: usize,
    pub values: Vec<f64>,
}

impl FieldState {
    /// The constant initial condition `u ≡ 1`.
    pub fn ones(d: usize, nx: usize) -> Self {
        FieldState {
            step: 0,
            d,
            nx,
            values: vec![1.0; d * nx],
        }
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.values[i * self.nx..(i + 1) * self.nx]
    }

    #[inline]
    pub fn at(&self, i: usize, node: usize) -> f64 {
        self.values[i * self.nx + node]
    }

    /// The state vector `u(x_ℓ) ∈ ℝᵈ` at one node.
    pub fn node(&self, node: usize) -> Vec<f64> {
        (0..self.d).map(|i| self.at(i, node)).collect()
    }
}

/// Linearized field `Z^{(i)}` for source index `i`; zero at time 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TangentState {
    pub step: usize,
    pub source: usize,
    pub d: usize,
    pub nx: usize,
    pub values: Vec<f64>,
}

impl TangentState {
    pub fn zeros(source: usize, d: usize, nx: usize) -> Self {
        TangentState {
            step: 0,
            source,
            d,
            nx,
            values: vec![0.0; d * nx],
        }
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.values[i * self.nx..(i + 1) * self.nx]
    }
}

/// `dst = src + λ·Δsrc` with Dirichlet value `boundary` outside the interior.
#[inline]
pub(crate) fn heat_apply(src: &[f64], dst: &mut [f64], lam: f64, boundary: f64) {
    let n = src.len();
    if n == 1 {
        dst[0] = src[0] + lam * (2.0 * boundary - 2.0 * src[0]);
        return;
    }
    dst[0] = src[0] + lam * (boundary - 2.0 * src[0] + src[1]);
    for l in 1..n - 1 {
        dst[l] = src[l] + lam * (src[l - 1] - 2.0 * src[l] + src[l + 1]);
    }
    dst[n - 1] = src[n - 1] + lam * (src[n - 2] - 2.0 * src[n - 1] + boundary);
}

/// Per-replica scratch buffers: σ and its Jacobian evaluated at every node,
/// stored entry-major so that each entry is a contiguous run over nodes.
#[derive(Debug, Clone)]
pub(crate) struct NodeCoefficients {
    pub d: usize,
    pub m: usize,
    pub nx: usize,
    /// `sigma[(i·m + j)·nx + ℓ]`
    pub sigma: Vec<f64>,
    /// `jac[((i·m + j)·d + k)·nx + ℓ]`
    pub jac: Vec<f64>,
    /// σ does not depend on the state: evaluated once, Jacobian zero.
    frozen: bool,
    evaluated: bool,
    arg: Vec<f64>,
}

impl NodeCoefficients {
    pub fn new(field: &DiffusionField, nx: usize, with_jacobian: bool) -> Self {
        let (d, m) = (field.d(), field.m());
        NodeCoefficients {
            d,
            m,
            nx,
            sigma: vec![0.0; nx * d * m],
            jac: if with_jacobian { vec![0.0; nx * d * m * d] } else { Vec::new() },
            frozen: field.is_state_independent(),
            evaluated: false,
            arg: vec![0.0; nx],
        }
    }

    /// σ_ij over all nodes.
    #[inline]
    pub fn sigma_entry(&self, i: usize, j: usize) -> &[f64] {
        let e = i * self.m + j;
        &self.sigma[e * self.nx..(e + 1) * self.nx]
    }

    /// Whether the Jacobian may be nonzero.
    pub fn has_jacobian(&self) -> bool {
        !self.jac.is_empty() && !self.frozen
    }

    pub fn evaluate(&mut self, field: &DiffusionField, u: &FieldState) {
        if self.frozen && self.evaluated {
            return;
        }
        self.evaluated = true;
        let (d, nx) = (self.d, self.nx);
        let with_jac = !self.jac.is_empty();
        let entries = d * self.m;
        match field.family() {
            SigmaFamily::Constant { s } => {
                for (e, &se) in s.iter().enumerate() {
                    self.sigma[e * nx..(e + 1) * nx].fill(se);
                }
                self.jac.fill(0.0);
            }
            SigmaFamily::Affine { a, b } => {
                for e in 0..entries {
                    let row = &b[e * d..(e + 1) * d];
                    let arg = &mut self.arg;
                    arg.fill(0.0);
                    for (k, &bk) in row.iter().enumerate() {
                        for (g, &uk) in arg.iter_mut().zip(&u.values[k * nx..(k + 1) * nx]) {
                            *g += bk * uk;
                        }
                    }
                    for (s, &g) in self.sigma[e * nx..(e + 1) * nx].iter_mut().zip(arg.iter()) {
                        *s = a[e] + g;
                    }
                    if with_jac {
                        for (k, &bk) in row.iter().enumerate() {
                            self.jac[(e * d + k) * nx..(e * d + k + 1) * nx].fill(bk);
                        }
                    }
                }
            }
            SigmaFamily::BoundedSmooth { a, c, w } => {
                for e in 0..entries {
                    let sig = &mut self.sigma[e * nx..(e + 1) * nx];
                    if c[e] == 0.0 {
                        sig.fill(a[e]);
                        if with_jac {
                            self.jac[e * d * nx..(e + 1) * d * nx].fill(0.0);
                        }
                        continue;
                    }
                    let row = &w[e * d..(e + 1) * d];
                    let arg = &mut self.arg;
                    arg.fill(0.0);
                    for (k, &wk) in row.iter().enumerate() {
                        for (g, &uk) in arg.iter_mut().zip(&u.values[k * nx..(k + 1) * nx]) {
                            *g += wk * uk;
                        }
                    }
                    for (s, &g) in sig.iter_mut().zip(arg.iter()) {
                        *s = a[e] + c[e] * g.sin();
                    }
                    if with_jac {
                        for g in arg.iter_mut() {
                            *g = c[e] * g.cos();
                        }
                        for (k, &wk) in row.iter().enumerate() {
                            for (j, &g) in self.jac[(e * d + k) * nx..(e * d + k + 1) * nx].iter_mut().zip(arg.iter()) {
                                *j = g * wk;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Primal update given σ already evaluated at every node.
pub(crate) fn advance_primal(u: &FieldState, out: &mut FieldState, coef: &NodeCoefficients, xi: &[f64], grid: &Grid) {
    let (d, m, nx) = (u.d, coef.m, u.nx);
    let lam = grid.diffusion_number();
    let scale = grid.noise_scale();
    for i in 0..d {
        let src = &u.values[i * nx..(i + 1) * nx];
        let dst = &mut out.values[i * nx..(i + 1) * nx];
        heat_apply(src, dst, lam, 1.0);
        if m == 1 {
            for ((v, &s), &x) in dst.iter_mut().zip(coef.sigma_entry(i, 0)).zip(&xi[..nx]) {
                *v += scale * (s * x);
            }
            continue;
        }
        let rows: Vec<&[f64]> = (0..m).map(|j| coef.sigma_entry(i, j)).collect();
        for (l, v) in dst.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (j, row) in rows.iter().enumerate() {
                acc += row[l] * xi[j * nx + l];
            }
            *v += scale * acc;
        }
    }
    out.step = u.step + 1;
}

/// Tangent update `Z ← Z + λΔZ + Σ_j Σ_k ∂_kσ_ij Z_k √(dt/dx) ξ^j + source`.
pub(crate) fn advance_tangent(
    z: &TangentState,
    out: &mut TangentState,
    coef: &NodeCoefficients,
    xi: &[f64],
    source: Option<&[f64]>,
    grid: &Grid,
) {
    let (d, m, nx) = (z.d, coef.m, z.nx);
    let lam = grid.diffusion_number();
    let scale = grid.noise_scale();
    for i in 0..d {
        let src = &z.values[i * nx..(i + 1) * nx];
        let dst = &mut out.values[i * nx..(i + 1) * nx];
        heat_apply(src, dst, lam, 0.0);
        if coef.has_jacobian() {
            let base = i * m * d * nx;
            for (l, v) in dst.iter_mut().enumerate() {
                let mut acc = 0.0;
                for j in 0..m {
                    let mut lin = 0.0;
                    for k in 0..d {
                        lin += coef.jac[base + (j * d + k) * nx + l] * z.values[k * nx + l];
                    }
                    acc += lin * xi[j * nx + l];
                }
                *v += scale * acc;
            }
        }
        if let Some(s) = source {
            for (v, sv) in dst.iter_mut().zip(&s[i * nx..(i + 1) * nx]) {
                *v += sv;
            }
        }
    }
    out.step = z.step + 1;
}

pub(crate) fn check_finite(values: &[f64], what: &str, step: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::numerical(format!(
            "non-finite {what} value at step {step} (noise blow-up; reduce dt or the size of σ)"
        )))
    }
}

fn check_shapes(state_d: usize, state_nx: usize, field: &DiffusionField, grid: &Grid, noise: &[f64]) -> Result<()> {
    if state_d != field.d() || state_nx != grid.nx() {
        return Err(Error::config(format!(
            "state shape {state_d}x{state_nx} does not match d={} nx={}",
            field.d(),
            grid.nx()
        )));
    }
    if noise.len() != field.m() * grid.nx() {
        return Err(Error::config(format!(
            "noise slice has {} entries, expected m·nx = {}",
            noise.len(),
            field.m() * grid.nx()
        )));
    }
    Ok(())
}

/// One explicit step of the primal field.
pub fn step_explicit(state: &FieldState, field: &DiffusionField, grid: &Grid, noise: &[f64]) -> Result<FieldState> {
    check_shapes(state.d, state.nx, field, grid, noise)?;
    let mut coef = NodeCoefficients::new(field, grid.nx(), false);
    coef.evaluate(field, state);
    let mut out = state.clone();
    advance_primal(state, &mut out, &coef, noise, grid);
    check_finite(&out.values, "field", out.step)?;
    Ok(out)
}

/// One step of every tangent field, driven by the same noise as the primal
/// step taken from `u_state`. `sources[i]` is the `d × nx` increment added to
/// tangent `i` after the linear update.
pub fn step_tangent(
    u_state: &FieldState,
    tangents: &[TangentState],
    field: &DiffusionField,
    grid: &Grid,
    noise: &[f64],
    sources: &[Vec<f64>],
) -> Result<Vec<TangentState>> {
    if !field.has_jacobian() {
        return Err(Error::config("tangent fields need a differentiable σ family"));
    }
    check_shapes(u_state.d, u_state.nx, field, grid, noise)?;
    if sources.len() != tangents.len() {
        return Err(Error::config("one source increment is needed per tangent field"));
    }
    let mut coef = NodeCoefficients::new(field, grid.nx(), true);
    coef.evaluate(field, u_state);
    tangents
        .iter()
        .zip(sources)
        .map(|(z, s)| {
            if s.len() != z.values.len() {
                return Err(Error::config("source increment must be d × nx"));
            }
            let mut out = z.clone();
            advance_tangent(z, &mut out, &coef, noise, Some(s), grid);
            check_finite(&out.values, "tangent", out.step)?;
            Ok(out)
        })
        .collect()
}

/// Full trajectory at the grid's output times, driven by
/// `NoiseStream(seed, replica_id)`.
pub fn simulate(field: &DiffusionField, grid: &Grid, seed: u64, replica_id: u64) -> Result<Vec<FieldState>> {
    let (d, nx) = (field.d(), grid.nx());
    let mut noise = NoiseStream::new(seed, replica_id, field.m(), nx);
    let mut xi = vec![0.0; noise.len_per_step()];
    let mut coef = NodeCoefficients::new(field, nx, false);
    let mut u = FieldState::ones(d, nx);
    let mut next = u.clone();
    let mut out = Vec::with_capacity(grid.output_steps().len());
    let mut outputs = grid.output_steps().iter().peekable();
    for n in 0..=grid.nt() {
        while outputs.next_if(|&&s| s == n).is_some() {
            out.push(u.clone());
        }
        if n == grid.nt() {
            break;
        }
        noise.next_step(&mut xi);
        coef.evaluate(field, &u);
        advance_primal(&u, &mut next, &coef, &xi, grid);
        check_finite(&next.values, "field", next.step)?;
        std::mem::swap(&mut u, &mut next);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::heat_kernel;
    use proptest::prelude::*;

    fn small_grid(output_times: &[f64]) -> Grid {
        Grid::new(&GridSpec {
            t_final: 0.2,
            dt: 1e-3,
            dx: 0.05,
            r_max: 1.0,
            padding: 6.0,
            output_times: output_times.to_vec(),
        })
        .unwrap()
    }

    #[test]
    fn grid_layout_is_symmetric_and_padded() {
        let g = small_grid(&[0.1, 0.2]);
        assert_eq!(g.nx() % 2, 0);
        assert!(g.half_width() >= 1.0 + 6.0 * (0.4f64).sqrt());
        assert!((g.x(0) + g.x(g.nx() - 1)).abs() < 1e-12);
        assert!((g.x(g.nx() / 2) - 0.025).abs() < 1e-12);
        assert_eq!(g.output_steps(), &[100, 200]);
        let w = g.window_range(1.0).unwrap();
        assert_eq!(w.len(), 40);
        assert!(g.x(w.start) > -1.0 && g.x(w.start) - g.dx() < -1.0);
        assert!(g.window_range(1.0 + 0.01).is_err());
        assert!(g.window_range(50.0).is_err());
    }

    #[test]
    fn rejects_unstable_and_off_grid_configurations() {
        let bad = GridSpec {
            t_final: 1.0,
            dt: 2e-3,
            dx: 0.05,
            r_max: 1.0,
            padding: 6.0,
            output_times: vec![1.0],
        };
        let e = Grid::new(&bad).unwrap_err().to_string();
        assert!(e.contains("stability"), "{e}");
        let off = GridSpec { dt: 1e-3, output_times: vec![0.0005], ..bad };
        assert!(Grid::new(&off).is_err());
    }

    #[test]
    fn zero_sigma_keeps_ones_exactly() {
        let g = small_grid(&[0.0, 0.1, 0.2]);
        let f = DiffusionField::constant(2, 1, vec![0.0, 0.0]).unwrap();
        for s in simulate(&f, &g, 7, 3).unwrap() {
            assert!(s.values.iter().all(|&v| v == 1.0));
        }
    }

    #[test]
    fn simulate_is_deterministic_and_replicas_differ() {
        let g = small_grid(&[0.2]);
        let f = DiffusionField::bounded_smooth(1, 1, vec![1.0], vec![0.5], vec![1.0]).unwrap();
        let a = simulate(&f, &g, 11, 4).unwrap();
        let b = simulate(&f, &g, 11, 4).unwrap();
        let c = simulate(&f, &g, 11, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn one_step_variance_is_dt_over_dx() {
        let g = small_grid(&[]);
        let f = DiffusionField::constant(1, 1, vec![1.0]).unwrap();
        let u0 = FieldState::ones(1, g.nx());
        let node = g.nx() / 2;
        let reps = 4000;
        let mut vals = Vec::with_capacity(reps);
        for r in 0..reps {
            let mut ns = NoiseStream::new(99, r as u64, 1, g.nx());
            let mut xi = vec![0.0; g.nx()];
            ns.next_step(&mut xi);
            vals.push(step_explicit(&u0, &f, &g, &xi).unwrap().at(0, node));
        }
        let mean = vals.iter().sum::<f64>() / reps as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64;
        let expected = g.dt() / g.dx();
        // SE of a sample variance of Gaussian data is var·√(2/(n−1)).
        assert!((var - expected).abs() < 4.0 * expected * (2.0 / (reps as f64 - 1.0)).sqrt());
    }

    #[test]
    fn deterministic_bump_follows_heat_kernel() {
        // σ ≡ 0: the scheme is the explicit stencil for ½∂²ₓ; an initial
        // Gaussian bump of variance s0 spreads to variance s0 + t.
        let run = |dx: f64| -> f64 {
            let dt = 0.4 * dx * dx;
            let t_end = 0.5;
            let nt = (t_end / dt).round() as usize;
            let g = Grid::from_nodes(nt, t_end, 2 * (6.0 / dx).round() as usize, dx, 0.0, &[]).unwrap();
            let s0 = 0.1;
            let mut u = FieldState {
                step: 0,
                d: 1,
                nx: g.nx(),
                values: g.xs().iter().map(|&x| heat_kernel(s0, x).unwrap()).collect(),
            };
            let mut next = u.clone();
            let lam = g.diffusion_number();
            for _ in 0..g.nt() {
                heat_apply(&u.values, &mut next.values, lam, 0.0);
                std::mem::swap(&mut u, &mut next);
            }
            g.xs()
                .iter()
                .zip(&u.values)
                .map(|(&x, &v)| (v - heat_kernel(s0 + g.t_final(), x).unwrap()).abs())
                .fold(0.0, f64::max)
        };
        let coarse = run(0.1);
        let fine = run(0.05);
        assert!(coarse < 5e-3, "coarse error {coarse}");
        // second order in dx
        assert!(fine < coarse / 3.0, "coarse {coarse} fine {fine}");
    }

    #[test]
    fn maximum_principle_without_noise() {
        let g = Grid::from_nodes(50, 0.05, 20, 0.05, 0.0, &[]).unwrap();
        let mut u: Vec<f64> = (0..g.nx()).map(|i| if i % 3 == 0 { 2.0 } else { 0.5 }).collect();
        let mut next = u.clone();
        for _ in 0..g.nt() {
            heat_apply(&u, &mut next, g.diffusion_number(), 1.0);
            std::mem::swap(&mut u, &mut next);
            assert!(u.iter().all(|&v| (0.5..=2.0).contains(&v)));
        }
    }

    #[test]
    fn tangent_homogeneous_and_pure_heat_cases() {
        let g = Grid::from_nodes(4, 0.004, 8, 0.1, 0.0, &[]).unwrap();
        let f = DiffusionField::bounded_smooth(1, 1, vec![1.0], vec![0.3], vec![1.0]).unwrap();
        let u = FieldState::ones(1, g.nx());
        let xi = vec![0.7; g.nx()];
        let z = TangentState::zeros(0, 1, g.nx());
        let out = step_tangent(&u, std::slice::from_ref(&z), &f, &g, &xi, &[vec![0.0; g.nx()]]).unwrap();
        assert!(out[0].values.iter().all(|&v| v == 0.0));

        // constant σ: tangent is heat flow plus source
        let c = DiffusionField::constant(1, 1, vec![2.0]).unwrap();
        let z0 = TangentState {
            values: (0..g.nx()).map(|i| i as f64).collect(),
            ..z
        };
        let src: Vec<f64> = (0..g.nx()).map(|i| 0.1 * i as f64).collect();
        let out = step_tangent(&u, std::slice::from_ref(&z0), &c, &g, &xi, std::slice::from_ref(&src)).unwrap();
        let mut expect = vec![0.0; g.nx()];
        heat_apply(&z0.values, &mut expect, g.diffusion_number(), 0.0);
        for i in 0..g.nx() {
            assert!((out[0].values[i] - expect[i] - src[i]).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn noise_scaling_doubles_the_stochastic_part(seed in any::<u64>(), s0 in -2.0..2.0f64, s1 in -2.0..2.0f64) {
            let g = Grid::from_nodes(4, 0.004, 10, 0.1, 0.0, &[]).unwrap();
            let u = FieldState { step: 0, d: 2, nx: 10, values: (0..20).map(|i| 1.0 + 0.05 * i as f64).collect() };
            let f1 = DiffusionField::constant(2, 1, vec![s0, s1]).unwrap();
            let f2 = DiffusionField::constant(2, 1, vec![2.0 * s0, 2.0 * s1]).unwrap();
            let mut ns = NoiseStream::new(seed, 0, 1, 10);
            let mut xi = vec![0.0; 10];
            ns.next_step(&mut xi);
            let zero = DiffusionField::constant(2, 1, vec![0.0, 0.0]).unwrap();
            let heat = step_explicit(&u, &zero, &g, &xi).unwrap();
            let a = step_explicit(&u, &f1, &g, &xi).unwrap();
            let b = step_explicit(&u, &f2, &g, &xi).unwrap();
            for k in 0..20 {
                let da = a.values[k] - heat.values[k];
                let db = b.values[k] - heat.values[k];
                prop_assert!((db - 2.0 * da).abs() <= 1e-12 * (1.0 + db.abs()));
            }
        }

        #[test]
        fn tangent_superposition(seed in any::<u64>(), w in 0.1..2.0f64) {
            let g = Grid::from_nodes(6, 0.006, 8, 0.1, 0.0, &[]).unwrap();
            let f = DiffusionField::bounded_smooth(2, 2, vec![1.0, 0.2, 0.1, 1.0], vec![0.5, 0.0, 0.3, 0.4], vec![w, 0.2, 0.0, 0.0, 0.1, -w, 0.3, 0.5]).unwrap();
            let mut ns = NoiseStream::new(seed, 1, 2, 8);
            let mut xi = vec![0.0; 16];
            let mut u = FieldState::ones(2, 8);
            let zero = TangentState::zeros(0, 2, 8);
            let (mut z1, mut z2, mut z12) = (zero.clone(), zero.clone(), zero.clone());
            for n in 0..g.nt() {
                ns.next_step(&mut xi);
                let q1: Vec<f64> = (0..16).map(|i| ((i + n) as f64).sin()).collect();
                let q2: Vec<f64> = (0..16).map(|i| ((i * n) as f64).cos()).collect();
                let q12: Vec<f64> = q1.iter().zip(&q2).map(|(a, b)| a + b).collect();
                let out = step_tangent(&u, &[z1, z2, z12], &f, &g, &xi, &[q1, q2, q12]).unwrap();
                z1 = out[0].clone(); z2 = out[1].clone(); z12 = out[2].clone();
                u = step_explicit(&u, &f, &g, &xi).unwrap();
            }
            for k in 0..16 {
                let sum = z1.values[k] + z2.values[k];
                prop_assert!((z12.values[k] - sum).abs() <= 1e-12 * (1.0 + sum.abs()));
            }
        }
    }
}
