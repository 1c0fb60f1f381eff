//! Wasserstein-type distances between empirical and Gaussian laws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::linalg::SymMatrix;
use super::sample::{mean_se, SampleMatrix};
use crate::error::{Error, Result};
use crate::special::{normal_cdf, normal_pdf, normal_quantile, normal_sf};

/// 2-Wasserstein (Bures) distance between `N(0, C1)` and `N(0, C2)`.
pub fn gaussian_w2(c1: &SymMatrix, c2: &SymMatrix) -> Result<f64> {
    if c1.dim() != c2.dim() {
        return Err(Error::config("covariance matrices have different dimensions"));
    }
    let r1 = c1.sqrt_psd()?;
    c2.check_psd("second covariance")?;
    let inner = SymMatrix::symmetrized(&r1.matrix().matmul(c2.matrix()).matmul(r1.matrix()));
    let cross: f64 = inner.eigen().values.iter().map(|l| l.max(0.0).sqrt()).sum();
    Ok((c1.trace() + c2.trace() - 2.0 * cross).max(0.0).sqrt())
}

/// `∫ Φ(x/σ) dx` antiderivative: `xΦ(x/σ) + σφ(x/σ)`.
fn cdf_primitive(x: f64, sigma: f64) -> f64 {
    x * normal_cdf(x / sigma) + sigma * normal_pdf(x / sigma)
}

/// `∫_x^∞ (1 − Φ(y/σ)) dy = σφ(x/σ) − x(1 − Φ(x/σ))`.
fn upper_tail_mass(x: f64, sigma: f64) -> f64 {
    sigma * normal_pdf(x / sigma) - x * normal_sf(x / sigma)
}

/// `∫_a^b |c − Φ(x/σ)| dx` for a constant level `c ∈ [0, 1]`.
fn level_gap(a: f64, b: f64, c: f64, sigma: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let signed = |lo: f64, hi: f64| c * (hi - lo) - (cdf_primitive(hi, sigma) - cdf_primitive(lo, sigma));
    let cross = if c <= 0.0 {
        f64::NEG_INFINITY
    } else if c >= 1.0 {
        f64::INFINITY
    } else {
        sigma * normal_quantile(c)
    };
    if cross <= a {
        -signed(a, b)
    } else if cross >= b {
        signed(a, b)
    } else {
        signed(a, cross) - signed(cross, b)
    }
}

/// Exact W1 distance between the empirical law of `x` and `N(0, σ²)`, as the
/// integral of the absolute CDF difference, summed piece by piece between
/// order statistics. `σ = 0` gives the distance to δ₀, the mean of `|x|`.
pub fn w1_to_gaussian(x: &[f64], sigma: f64) -> f64 {
    let n = x.len();
    if n == 0 {
        return f64::NAN;
    }
    if !(sigma > 0.0) {
        return x.iter().map(|v| v.abs()).sum::<f64>() / n as f64;
    }
    let mut s = x.to_vec();
    s.sort_by(f64::total_cmp);
    let mut total = cdf_primitive(s[0], sigma) + upper_tail_mass(s[n - 1], sigma);
    for k in 1..n {
        total += level_gap(s[k - 1], s[k], k as f64 / n as f64, sigma);
    }
    total
}

/// W1 distance between two empirical laws, `∫ |F_a − F_b| dx`.
pub fn w1_empirical(a: &[f64], b: &[f64]) -> f64 {
    if a.is_empty() || b.is_empty() {
        return f64::NAN;
    }
    let mut sa = a.to_vec();
    let mut sb = b.to_vec();
    sa.sort_by(f64::total_cmp);
    sb.sort_by(f64::total_cmp);
    let (na, nb) = (sa.len() as f64, sb.len() as f64);
    let (mut i, mut j) = (0usize, 0usize);
    let mut total = 0.0;
    let mut prev = sa[0].min(sb[0]);
    while i < sa.len() || j < sb.len() {
        let next = match (sa.get(i), sb.get(j)) {
            (Some(&x), Some(&y)) => x.min(y),
            (Some(&x), None) => x,
            (None, Some(&y)) => y,
            (None, None) => unreachable!(),
        };
        total += (i as f64 / na - j as f64 / nb).abs() * (next - prev);
        while i < sa.len() && sa[i] == next {
            i += 1;
        }
        while j < sb.len() && sb[j] == next {
            j += 1;
        }
        prev = next;
    }
    total
}

/// Sliced W1 summary over random directions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlicedW1 {
    pub mean: f64,
    pub max: f64,
    /// Standard error of `mean` across directions.
    pub se: f64,
}

/// Average and maximum over `nproj` uniform unit directions θ of
/// `W1(law of X·θ, N(0, θᵀCθ))`. Each projection is 1-Lipschitz, so every
/// value lower-bounds the W1 distance between the two d-dimensional laws.
pub fn sliced_w1(samples: &SampleMatrix, c: &SymMatrix, nproj: usize, seed: u64) -> Result<SlicedW1> {
    let d = samples.dim();
    if c.dim() != d {
        return Err(Error::config("reference covariance dimension does not match samples"));
    }
    if nproj == 0 {
        return Err(Error::config("nproj must be positive"));
    }
    c.check_psd("reference covariance")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(nproj);
    let mut theta = vec![0.0; d];
    for _ in 0..nproj {
        loop {
            for v in theta.iter_mut() {
                *v = rng.sample(StandardNormal);
            }
            let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 1e-12 {
                theta.iter_mut().for_each(|v| *v /= norm);
                break;
            }
        }
        let mut var = 0.0;
        for i in 0..d {
            for j in 0..d {
                var += theta[i] * c.get(i, j) * theta[j];
            }
        }
        values.push(w1_to_gaussian(&samples.project(&theta), var.max(0.0).sqrt()));
    }
    let (mean, se) = mean_se(&values);
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(SlicedW1 { mean, max, se })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::linalg::Matrix;
    use crate::stats::sample::gaussian_sample;
    use proptest::prelude::*;

    fn psd(a: f64, b: f64, c: f64) -> SymMatrix {
        // L·Lᵀ with L lower triangular
        SymMatrix::new(Matrix::from_rows(2, 2, vec![a * a, a * b, a * b, b * b + c * c]).unwrap()).unwrap()
    }

    #[test]
    fn bures_reference_values() {
        let c = psd(1.0, 0.3, 0.7);
        assert!(gaussian_w2(&c, &c).unwrap() < 1e-7);
        let one = SymMatrix::diag(&[1.0]);
        let four = SymMatrix::diag(&[4.0]);
        assert!((gaussian_w2(&one, &four).unwrap() - 1.0).abs() < 1e-12);
        let a = SymMatrix::diag(&[1.0, 4.0]);
        let b = SymMatrix::diag(&[4.0, 1.0]);
        assert!((gaussian_w2(&a, &b).unwrap() - 2f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn empirical_w1_by_quantile_coupling() {
        assert!((w1_empirical(&[-1.0, 1.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
        assert!((w1_empirical(&[0.0, 3.0, 1.0], &[1.0, 0.0, 3.0])).abs() < 1e-15);
        // different sizes: {0} vs {0, 2} moves half the mass by 2
        assert!((w1_empirical(&[0.0], &[0.0, 2.0]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn w1_to_gaussian_matches_brute_force_integration() {
        let x = [-1.3, -0.2, 0.05, 0.4, 2.2];
        let sigma = 0.8;
        let n = x.len() as f64;
        let (lo, hi, steps) = (-12.0, 12.0, 2_400_000);
        let h = (hi - lo) / steps as f64;
        let mut brute = 0.0;
        for k in 0..steps {
            let y = lo + (k as f64 + 0.5) * h;
            let fe = x.iter().filter(|&&v| v <= y).count() as f64 / n;
            brute += (fe - normal_cdf(y / sigma)).abs() * h;
        }
        assert!((w1_to_gaussian(&x, sigma) - brute).abs() < 1e-6);
    }

    #[test]
    fn translation_shifts_w1_by_delta() {
        let g = gaussian_sample(&SymMatrix::identity(1), 4000, 3).unwrap();
        let x = g.column(0);
        let delta = 0.7;
        let shifted: Vec<f64> = x.iter().map(|v| v + delta).collect();
        assert!((w1_empirical(&shifted, &x) - delta).abs() < 1e-12);
        // the exact Gaussian reference moves by at most the empirical error
        let base = w1_to_gaussian(&x, 1.0);
        let moved = w1_to_gaussian(&shifted, 1.0);
        assert!((moved - delta).abs() <= base + 2.0 / x.len() as f64);
    }

    #[test]
    fn degenerate_direction_uses_mean_absolute_value() {
        assert!((w1_to_gaussian(&[-1.0, 3.0], 0.0) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn sliced_null_calibration() {
        let c = psd(1.2, -0.4, 0.9);
        let s = gaussian_sample(&c, 100_000, 17).unwrap();
        let sw = sliced_w1(&s, &c, 16, 4).unwrap();
        assert!(sw.mean < 0.02 * c.op_norm().sqrt(), "{sw:?}");
        assert!(sw.max >= sw.mean);
        // lower bound for the Bures distance of the fitted Gaussian, up to noise
        let fitted = gaussian_w2(&s.covariance(), &c).unwrap();
        let wide = c.scale(2.0);
        let sw_wide = sliced_w1(&s, &wide, 16, 4).unwrap();
        let w2_wide = gaussian_w2(&s.covariance(), &wide).unwrap();
        assert!(sw_wide.mean <= w2_wide + fitted + 0.01);
    }

    #[test]
    fn permutation_invariance() {
        let c = psd(1.0, 0.5, 0.5);
        let s = gaussian_sample(&c, 300, 8).unwrap();
        let mut rows: Vec<Vec<f64>> = s.rows().map(|r| r.to_vec()).collect();
        rows.reverse();
        let p = SampleMatrix::from_rows(&rows).unwrap();
        let a = sliced_w1(&s, &c, 8, 1).unwrap();
        let b = sliced_w1(&p, &c, 8, 1).unwrap();
        assert!((a.mean - b.mean).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn bures_is_a_metric(p in proptest::collection::vec(-2.0..2.0f64, 9)) {
            // diagonal factors kept away from 0 so square roots stay well conditioned
            let f = |x: f64| 0.2 + x.abs();
            let a = psd(f(p[0]), p[1], f(p[2]));
            let b = psd(f(p[3]), p[4], f(p[5]));
            let c = psd(f(p[6]), p[7], f(p[8]));
            let ab = gaussian_w2(&a, &b).unwrap();
            let ba = gaussian_w2(&b, &a).unwrap();
            let bc = gaussian_w2(&b, &c).unwrap();
            let ac = gaussian_w2(&a, &c).unwrap();
            prop_assert!((ab - ba).abs() < 1e-8);
            prop_assert!(ac <= ab + bc + 1e-8);
        }
    }
}
