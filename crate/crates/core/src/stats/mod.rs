//! Matrix analysis, Gaussian distances, normality tests, rate fits and
//! path diagnostics.

pub mod distance;
pub mod linalg;
pub mod normality;
pub mod paths;
pub mod rates;
pub mod sample;

pub use distance::{gaussian_w2, sliced_w1, w1_empirical, w1_to_gaussian, SlicedW1};
pub use linalg::{hs_norm, op_norm, sym_eig, Eigen, Matrix, SymMatrix, INVERTIBLE_TOL, PSD_CLAMP};
pub use normality::{mardia, Mardia};
pub use paths::{increment_moment, increment_orthogonality, IncrementMoment, Orthogonality, PathSamples};
pub use rates::{gaussian_gap_bound, min_eigen_check, rate_fit, RateFit};
pub use sample::{covariance_se, gaussian_sample, mean_se, variance_se, SampleMatrix};
