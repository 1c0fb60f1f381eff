//! Coefficient structure of the system, the non-degeneracy check and
//! heat-kernel primitives.

use serde::{Deserialize, Serialize};
use std::f64::consts::{PI, SQRT_2};

use crate::error::{Error, Result};
use crate::special::{erf, erfc};
use crate::stats::linalg::{Matrix, SymMatrix};

/// Declarative description of σ: ℝᵈ → ℝ^{d×m}.
///
/// Matrices are row-major: `s[i*m + j]`, slopes and weights are
/// `b[(i*m + j)*d + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum SigmaFamily {
    /// σ_ij(u) = S_ij.
    Constant { s: Vec<f64> },
    /// σ_ij(u) = a_ij + Σ_k b_ijk u_k.
    Affine { a: Vec<f64>, b: Vec<f64> },
    /// σ_ij(u) = a_ij + c_ij · sin(Σ_k w_ijk u_k).
    BoundedSmooth { a: Vec<f64>, c: Vec<f64>, w: Vec<f64> },
}

/// The diffusion coefficient of the system together with its Jacobian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffusionField {
    d: usize,
    m: usize,
    family: SigmaFamily,
    lipschitz_hint: f64,
}

fn check_len(name: &str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::config(format!(
            "{name} has {} entries, expected {expected}",
            v.len()
        )));
    }
    if let Some(bad) = v.iter().find(|x| !x.is_finite()) {
        return Err(Error::config(format!("{name} contains non-finite entry {bad}")));
    }
    Ok(())
}

impl DiffusionField {
    pub fn new(d: usize, m: usize, family: SigmaFamily) -> Result<Self> {
        if d == 0 || m == 0 {
            return Err(Error::config("d and m must be positive"));
        }
        let dm = d * m;
        let lipschitz_hint = match &family {
            SigmaFamily::Constant { s } => {
                check_len("s", s, dm)?;
                0.0
            }
            SigmaFamily::Affine { a, b } => {
                check_len("a", a, dm)?;
                check_len("b", b, dm * d)?;
                b.iter().map(|x| x * x).sum::<f64>().sqrt()
            }
            SigmaFamily::BoundedSmooth { a, c, w } => {
                check_len("a", a, dm)?;
                check_len("c", c, dm)?;
                check_len("w", w, dm * d)?;
                (0..dm)
                    .map(|e| {
                        let wn2: f64 = w[e * d..(e + 1) * d].iter().map(|x| x * x).sum();
                        c[e] * c[e] * wn2
                    })
                    .sum::<f64>()
                    .sqrt()
            }
        };
        Ok(DiffusionField {
            d,
            m,
            family,
            lipschitz_hint,
        })
    }

    pub fn constant(d: usize, m: usize, s: Vec<f64>) -> Result<Self> {
        Self::new(d, m, SigmaFamily::Constant { s })
    }

    pub fn affine(d: usize, m: usize, a: Vec<f64>, b: Vec<f64>) -> Result<Self> {
        Self::new(d, m, SigmaFamily::Affine { a, b })
    }

    pub fn bounded_smooth(d: usize, m: usize, a: Vec<f64>, c: Vec<f64>, w: Vec<f64>) -> Result<Self> {
        Self::new(d, m, SigmaFamily::BoundedSmooth { a, c, w })
    }

    /// Number of equations.
    pub fn d(&self) -> usize {
        self.d
    }

    /// Number of noise channels.
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn family(&self) -> &SigmaFamily {
        &self.family
    }

    /// Upper bound on the Lipschitz constant of σ in Frobenius norm.
    pub fn lipschitz_hint(&self) -> f64 {
        self.lipschitz_hint
    }

    /// All built-in families are continuously differentiable.
    pub fn has_jacobian(&self) -> bool {
        true
    }

    /// True when σ does not depend on the state (zero Jacobian).
    pub fn is_state_independent(&self) -> bool {
        match &self.family {
            SigmaFamily::Constant { .. } => true,
            SigmaFamily::Affine { b, .. } => b.iter().all(|&x| x == 0.0),
            SigmaFamily::BoundedSmooth { c, w, .. } => {
                let d = self.d;
                c.iter()
                    .enumerate()
                    .all(|(e, &ce)| ce == 0.0 || w[e * d..(e + 1) * d].iter().all(|&x| x == 0.0))
            }
        }
    }

    /// Writes σ(u) into `out` (length d·m, row-major).
    #[inline]
    pub fn sigma_into(&self, u: &[f64], out: &mut [f64]) {
        let d = self.d;
        match &self.family {
            SigmaFamily::Constant { s } => out.copy_from_slice(s),
            SigmaFamily::Affine { a, b } => {
                for (e, o) in out.iter_mut().enumerate() {
                    let row = &b[e * d..(e + 1) * d];
                    *o = a[e] + row.iter().zip(u).map(|(bk, uk)| bk * uk).sum::<f64>();
                }
            }
            SigmaFamily::BoundedSmooth { a, c, w } => {
                for (e, o) in out.iter_mut().enumerate() {
                    *o = if c[e] == 0.0 {
                        a[e]
                    } else {
                        let row = &w[e * d..(e + 1) * d];
                        let arg: f64 = row.iter().zip(u).map(|(wk, uk)| wk * uk).sum();
                        a[e] + c[e] * arg.sin()
                    };
                }
            }
        }
    }

    pub fn sigma(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.m];
        self.sigma_into(u, &mut out);
        out
    }

    /// Writes ∂σ_ij/∂u_k into `out[(i*m + j)*d + k]`.
    #[inline]
    pub fn jacobian_into(&self, u: &[f64], out: &mut [f64]) {
        let d = self.d;
        match &self.family {
            SigmaFamily::Constant { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            SigmaFamily::Affine { b, .. } => out.copy_from_slice(b),
            SigmaFamily::BoundedSmooth { c, w, .. } => {
                for (e, &ce) in c.iter().enumerate() {
                    let row = &w[e * d..(e + 1) * d];
                    let dst = &mut out[e * d..(e + 1) * d];
                    if ce == 0.0 {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let arg: f64 = row.iter().zip(u).map(|(wk, uk)| wk * uk).sum();
                    let g = ce * arg.cos();
                    for (dv, wk) in dst.iter_mut().zip(row) {
                        *dv = g * wk;
                    }
                }
            }
        }
    }

    pub fn jacobian(&self, u: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.d * self.m * self.d];
        self.jacobian_into(u, &mut out);
        out
    }

    /// σ evaluated at the all-ones state as a d×m matrix.
    pub fn sigma_at_ones(&self) -> Matrix {
        let ones = vec![1.0; self.d];
        Matrix {
            rows: self.d,
            cols: self.m,
            data: self.sigma(&ones),
        }
    }
}

/// Outcome of the non-degeneracy check at the all-ones state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct H1Check {
    pub holds: bool,
    pub rank: usize,
}

/// Relative singular-value threshold used for the numerical rank.
pub const H1_RANK_TOL: f64 = 1e-10;

/// Checks that the columns of σ(1̄) span ℝᵈ.
///
/// Singular values come from the eigenvalues of σ(1̄)σ(1̄)ᵀ; the rank counts
/// those above `1e-10` times the largest. Each singular value is taken as the
/// norm of `qᵀσ(1̄)` for the eigenvector `q`, which keeps small values accurate
/// to rounding relative to the largest one (square roots of tiny eigenvalues
/// would not be).
pub fn check_h1(field: &DiffusionField) -> H1Check {
    let s = field.sigma_at_ones();
    let gram = SymMatrix::symmetrized(&s.matmul(&s.transpose()));
    let q = &gram.eigen().vectors;
    let singular: Vec<f64> = (0..s.rows)
        .map(|k| {
            (0..s.cols)
                .map(|j| (0..s.rows).map(|i| q.get(i, k) * s.get(i, j)).sum::<f64>().powi(2))
                .sum::<f64>()
                .sqrt()
        })
        .collect();
    let smax = singular.iter().cloned().fold(0.0_f64, f64::max);
    let rank = if smax > 0.0 {
        singular.iter().filter(|&&v| v > H1_RANK_TOL * smax).count()
    } else {
        0
    };
    H1Check {
        holds: rank == field.d(),
        rank,
    }
}

/// Heat kernel `p_t(x) = (2πt)^{-1/2} exp(-x²/(2t))`.
pub fn heat_kernel(t: f64, x: f64) -> Result<f64> {
    if !(t > 0.0) {
        return Err(Error::domain(format!("heat kernel needs t > 0, got {t}")));
    }
    Ok((-x * x / (2.0 * t)).exp() / (2.0 * PI * t).sqrt())
}

/// `∫_{-R}^{R} p_τ(x − y) dx` in closed form via the error function.
pub fn kernel_window(tau: f64, y: f64, r: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::domain(format!("kernel window needs tau > 0, got {tau}")));
    }
    if !(r > 0.0) {
        return Err(Error::domain(format!("kernel window needs R > 0, got {r}")));
    }
    let s = (2.0 * tau).sqrt();
    let a = (r - y) / s;
    let b = (r + y) / s;
    let v = if a > 0.0 && b > 0.0 {
        1.0 - 0.5 * (erfc(a) + erfc(b))
    } else {
        0.5 * (erf(a) + erf(b))
    };
    Ok(v.clamp(0.0, 1.0))
}

/// `∫_0^{2R} p_s(z)(2 − z/R) dz`, the inner kernel of the prelimit covariance.
///
/// Bounded as `s → 0` (tends to 1); uses `s·p_s(0) = √(s/2π)`.
pub fn window_mass(s: f64, r: f64) -> f64 {
    1.0 - window_deficit(s, r)
}

/// `1 − ∫_0^{2R} p_s(z)(2 − z/R) dz`, computed without cancellation.
pub fn window_deficit(s: f64, r: f64) -> f64 {
    if s <= 0.0 {
        return 0.0;
    }
    let root = (s / (2.0 * PI)).sqrt();
    let arg = 2.0 * r / (SQRT_2 * s.sqrt());
    erfc(arg) + (root / r) * (-(2.0 * r * r) / s).exp_m1().abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn identity_field() -> DiffusionField {
        DiffusionField::constant(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap()
    }

    /// Adaptive Simpson, used as an independent quadrature oracle.
    fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
        fn rec(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                return left + right + (left + right - whole) / 15.0;
            }
            rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 50)
    }

    #[test]
    fn h1_examples() {
        assert_eq!(check_h1(&identity_field()), H1Check { holds: true, rank: 2 });
        let dup = DiffusionField::constant(2, 2, vec![1.0, 1.0, 1.0, 1.0]).unwrap();
        assert_eq!(check_h1(&dup), H1Check { holds: false, rank: 1 });
        let thin = DiffusionField::affine(2, 1, vec![1.0, 2.0], vec![0.3, 0.1, -0.2, 0.4]).unwrap();
        let h = check_h1(&thin);
        assert!(!h.holds && h.rank <= 1);
        let zero = DiffusionField::constant(1, 1, vec![0.0]).unwrap();
        assert_eq!(check_h1(&zero), H1Check { holds: false, rank: 0 });
    }

    #[test]
    fn heat_kernel_values_and_domain() {
        assert!((heat_kernel(1.0, 0.0).unwrap() - 0.3989422804014327).abs() < 1e-15);
        assert!(heat_kernel(0.0, 1.0).is_err());
        assert!(heat_kernel(-1.0, 1.0).is_err());
        for &t in &[0.1, 1.0, 4.0] {
            let f = |x: f64| heat_kernel(t, x).unwrap();
            let half = 40.0 * t.sqrt();
            let mass = adaptive_simpson(&f, -half, half, 1e-13);
            assert!((mass - 1.0).abs() < 1e-10, "t={t}: mass {mass}");
        }
    }

    #[test]
    fn kernel_window_reference_and_limits() {
        // ∫_{-1}^{1} standard normal density, 30-digit reference.
        assert!((kernel_window(1.0, 0.0, 1.0).unwrap() - 0.6826894921370859).abs() < 1e-14);
        let mut prev = 0.0;
        for k in 1..40 {
            let v = kernel_window(0.7, 0.3, k as f64 * 0.5).unwrap();
            assert!(v >= prev);
            prev = v;
        }
        assert!((prev - 1.0).abs() < 1e-14);
        assert!(kernel_window(0.0, 0.0, 1.0).is_err());
        assert!(kernel_window(1.0, 0.0, 0.0).is_err());
        // agrees with quadrature of the kernel
        let (tau, y, r) = (0.37, 0.8, 1.3);
        let q = adaptive_simpson(&|x| heat_kernel(tau, x - y).unwrap(), -r, r, 1e-14);
        assert!((kernel_window(tau, y, r).unwrap() - q).abs() < 1e-12);
    }

    #[test]
    fn window_deficit_matches_direct_mass() {
        for &(s, r) in &[(0.5, 1.0), (2.0, 5.0), (1e-6, 2.0), (1.9, 256.0)] {
            let q = adaptive_simpson(
                &|z| heat_kernel(s, z).unwrap() * (2.0 - z / r),
                0.0,
                2.0 * r,
                1e-15,
            );
            assert!((window_mass(s, r) - q).abs() < 1e-11, "s={s} r={r}");
        }
        assert_eq!(window_deficit(0.0, 3.0), 0.0);
    }

    #[test]
    fn constant_is_affine_with_zero_slope() {
        let s = vec![0.5, -1.0, 2.0, 0.25];
        let c = DiffusionField::constant(2, 2, s.clone()).unwrap();
        let a = DiffusionField::affine(2, 2, s, vec![0.0; 8]).unwrap();
        for u in [[0.0, 0.0], [1.0, -3.0], [7.5, 2.2]] {
            assert_eq!(c.sigma(&u), a.sigma(&u));
            assert_eq!(c.jacobian(&u), a.jacobian(&u));
        }
    }

    #[test]
    fn rejects_bad_dimensions() {
        assert!(DiffusionField::constant(2, 2, vec![1.0; 3]).is_err());
        assert!(DiffusionField::affine(1, 1, vec![1.0], vec![1.0, 2.0]).is_err());
        assert!(DiffusionField::constant(0, 1, vec![]).is_err());
        assert!(DiffusionField::constant(1, 1, vec![f64::NAN]).is_err());
    }

    fn arb_field() -> impl Strategy<Value = DiffusionField> {
        (1usize..4, 1usize..4).prop_flat_map(|(d, m)| {
            let dm = d * m;
            prop_oneof![
                proptest::collection::vec(-2.0..2.0f64, dm)
                    .prop_map(move |s| DiffusionField::constant(d, m, s).unwrap()),
                (proptest::collection::vec(-2.0..2.0f64, dm), proptest::collection::vec(-2.0..2.0f64, dm * d))
                    .prop_map(move |(a, b)| DiffusionField::affine(d, m, a, b).unwrap()),
                (
                    proptest::collection::vec(-2.0..2.0f64, dm),
                    proptest::collection::vec(-2.0..2.0f64, dm),
                    proptest::collection::vec(-2.0..2.0f64, dm * d)
                )
                    .prop_map(move |(a, c, w)| DiffusionField::bounded_smooth(d, m, a, c, w).unwrap()),
            ]
        })
    }

    proptest! {
        #[test]
        fn lipschitz_hint_bounds_increments(field in arb_field(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let d = field.d();
            for _ in 0..20 {
                let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let su = field.sigma(&u);
                let sv = field.sigma(&v);
                prop_assert!(su.iter().all(|x| x.is_finite()));
                let diff = su.iter().zip(&sv).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                let dist = u.iter().zip(&v).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                prop_assert!(diff <= field.lipschitz_hint() * dist * (1.0 + 1e-12) + 1e-12);
            }
        }

        #[test]
        fn jacobian_matches_finite_differences(field in arb_field(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (d, m) = (field.d(), field.m());
            let u: Vec<f64> = (0..d).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let jac = field.jacobian(&u);
            let h = 1e-5;
            for k in 0..d {
                let mut up = u.clone();
                let mut um = u.clone();
                up[k] += h;
                um[k] -= h;
                let (sp, sm) = (field.sigma(&up), field.sigma(&um));
                for e in 0..d * m {
                    let fd = (sp[e] - sm[e]) / (2.0 * h);
                    let exact = jac[e * d + k];
                    prop_assert!((fd - exact).abs() <= 1e-4 * exact.abs().max(1e-2), "fd {} exact {}", fd, exact);
                }
            }
        }

        #[test]
        fn h1_rank_invariant_under_column_ops(s in proptest::collection::vec(-2.0..2.0f64, 6), scale in 0.1..5.0f64) {
            // d = 2, m = 3
            let base = DiffusionField::constant(2, 3, s.clone()).unwrap();
            let permuted: Vec<f64> = (0..2).flat_map(|i| [s[i*3+2], s[i*3], s[i*3+1]]).collect();
            let mut scaled = s.clone();
            scaled[1] *= -scale;
            scaled[4] *= -scale;
            let r0 = check_h1(&base);
            prop_assert_eq!(r0, check_h1(&DiffusionField::constant(2, 3, permuted).unwrap()));
            prop_assert_eq!(r0, check_h1(&DiffusionField::constant(2, 3, scaled).unwrap()));
        }

        #[test]
        fn kernel_window_symmetric_and_bounded(tau in 0.001..10.0f64, y in -20.0..20.0f64, y2 in -20.0..20.0f64, r in 0.01..50.0f64) {
            let a = kernel_window(tau, y, r).unwrap();
            prop_assert!((0.0..=1.0).contains(&a));
            prop_assert!((a - kernel_window(tau, -y, r).unwrap()).abs() < 1e-15);
            prop_assert!(a + kernel_window(tau, y2, r).unwrap() <= 2.0);
        }

        #[test]
        fn affine_family_is_linear(a in proptest::collection::vec(-2.0..2.0f64, 4), b in proptest::collection::vec(-2.0..2.0f64, 8),
                                   u in proptest::collection::vec(-3.0..3.0f64, 2), v in proptest::collection::vec(-3.0..3.0f64, 2), alpha in 0.0..1.0f64) {
            let f = DiffusionField::affine(2, 2, a, b).unwrap();
            let mix: Vec<f64> = u.iter().zip(&v).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
            let lhs = f.sigma(&mix);
            let (su, sv) = (f.sigma(&u), f.sigma(&v));
            for e in 0..4 {
                prop_assert!((lhs[e] - (alpha * su[e] + (1.0 - alpha) * sv[e])).abs() < 1e-12);
            }
        }
    }
}
