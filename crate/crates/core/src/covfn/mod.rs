//! Stationary isotropic covariance functions.

mod bessel;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::geodata::{distance, DistanceMetric, Location};
use crate::linalg::Cholesky;

pub use bessel::{bessel_k, bessel_k_scaled, ln_bessel_k};

/// Relative diagonal jitter added by default (`1e-8 * variance`).
pub const DEFAULT_JITTER: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovFamily {
    Matern,
    Exponential,
    SquaredExponential,
}

/// Covariance family plus parameters.
///
/// `range` is the length scale `rho` in the units of `metric`. For the
/// Matern family the decay is `kappa = 1 / range`, so smoothness 1/2
/// reproduces the exponential `exp(-u / rho)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CovarianceSpec {
    pub family: CovFamily,
    pub variance: f64,
    pub range: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub smoothness: Option<f64>,
    #[serde(default)]
    pub metric: DistanceMetric,
}

impl CovarianceSpec {
    pub fn exponential(variance: f64, range: f64) -> Self {
        CovarianceSpec {
            family: CovFamily::Exponential,
            variance,
            range,
            smoothness: None,
            metric: DistanceMetric::Euclidean,
        }
    }

    pub fn squared_exponential(variance: f64, range: f64) -> Self {
        CovarianceSpec {
            family: CovFamily::SquaredExponential,
            ..Self::exponential(variance, range)
        }
    }

    /// Matern with decay `kappa` (range = 1 / kappa) and smoothness `lambda`.
    pub fn matern(variance: f64, kappa: f64, smoothness: f64) -> Self {
        CovarianceSpec {
            family: CovFamily::Matern,
            variance,
            range: 1.0 / kappa,
            smoothness: Some(smoothness),
            metric: DistanceMetric::Euclidean,
        }
    }

    pub fn with_metric(mut self, metric: DistanceMetric) -> Self {
        self.metric = metric;
        self
    }

    pub fn kappa(&self) -> f64 {
        1.0 / self.range
    }

    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.variance) {
            return Err(Error::invalid(format!("variance must be positive, got {}", self.variance)));
        }
        if !pos(self.range) {
            return Err(Error::invalid(format!("range must be positive, got {}", self.range)));
        }
        match (self.family, self.smoothness) {
            (CovFamily::Matern, Some(s)) if pos(s) => Ok(()),
            (CovFamily::Matern, _) => Err(Error::invalid("Matern needs a positive smoothness")),
            (_, None) => Ok(()),
            (_, Some(_)) => Err(Error::invalid("smoothness is only meaningful for Matern")),
        }
    }

    /// Correlation at lag `u` (no variance factor, no validation).
    pub fn correlation(&self, u: f64) -> f64 {
        if u == 0.0 {
            return 1.0;
        }
        let x = u / self.range;
        match self.family {
            CovFamily::Exponential => (-x).exp(),
            CovFamily::SquaredExponential => (-0.5 * x * x).exp(),
            CovFamily::Matern => matern_correlation(self.smoothness.unwrap_or(0.5), x),
        }
    }

    /// Derivative of the correlation at lag `u` with respect to `ln(range)`,
    /// i.e. `-x r'(x)` with `x = u / range`.
    pub fn dcorr_dlog_range(&self, u: f64) -> f64 {
        if u == 0.0 {
            return 0.0;
        }
        let x = u / self.range;
        match self.family {
            CovFamily::Exponential => x * (-x).exp(),
            CovFamily::SquaredExponential => x * x * (-0.5 * x * x).exp(),
            CovFamily::Matern => {
                let nu = self.smoothness.unwrap_or(0.5);
                if nu == 0.5 {
                    x * (-x).exp()
                } else if nu == 1.5 {
                    x * x * (-x).exp()
                } else if nu == 2.5 {
                    x * x * (1.0 + x) * (-x).exp() / 3.0
                } else {
                    // d/dx [x^nu K_nu(x)] = -x^nu K_{nu-1}(x)
                    let ln = (nu + 1.0) * x.ln() + ln_bessel_k(nu - 1.0, x)
                        - (nu - 1.0) * std::f64::consts::LN_2
                        - ln_gamma(nu);
                    ln.exp()
                }
            }
        }
    }
}

/// Matern correlation at scaled lag `x = kappa * u`, with closed forms for
/// half-integer smoothness.
pub fn matern_correlation(smoothness: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    if smoothness == 0.5 {
        (-x).exp()
    } else if smoothness == 1.5 {
        (1.0 + x) * (-x).exp()
    } else if smoothness == 2.5 {
        (1.0 + x + x * x / 3.0) * (-x).exp()
    } else {
        matern_correlation_general(smoothness, x)
    }
}

/// `x^nu K_nu(x) / (2^{nu-1} Gamma(nu))` through the general Bessel route.
pub fn matern_correlation_general(smoothness: f64, x: f64) -> f64 {
    if x == 0.0 {
        return 1.0;
    }
    let nu = smoothness;
    let ln = nu * x.ln() + ln_bessel_k(nu, x) - (nu - 1.0) * std::f64::consts::LN_2 - ln_gamma(nu);
    ln.exp().min(1.0)
}

pub fn cov_value(spec: &CovarianceSpec, u: f64) -> Result<f64> {
    if !u.is_finite() || u < 0.0 {
        return Err(Error::invalid(format!("distance must be finite and non-negative, got {u}")));
    }
    Ok(spec.variance * spec.correlation(u))
}

/// Covariance matrix without factorization check. `jitter` is absolute.
pub fn build_cov_matrix(pts: &[Location], spec: &CovarianceSpec, jitter: f64) -> DMatrix<f64> {
    let n = pts.len();
    let mut m = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        m[(j, j)] = spec.variance + jitter;
        for i in (j + 1)..n {
            let v = spec.variance * spec.correlation(distance(pts[i], pts[j], spec.metric));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    m
}

/// Covariance matrix with `jitter` added to the diagonal; fails if the
/// result cannot be Cholesky-factored.
pub fn cov_matrix(pts: &[Location], spec: &CovarianceSpec, jitter: f64) -> Result<DMatrix<f64>> {
    spec.validate()?;
    if !(jitter >= 0.0) {
        return Err(Error::invalid("jitter must be non-negative"));
    }
    let m = build_cov_matrix(pts, spec, jitter);
    Cholesky::factor(&m)?;
    Ok(m)
}

/// Cross-covariance `cov(S(a_i), S(b_j))`.
pub fn cross_cov(a: &[Location], b: &[Location], spec: &CovarianceSpec) -> DMatrix<f64> {
    DMatrix::from_fn(a.len(), b.len(), |i, j| {
        spec.variance * spec.correlation(distance(a[i], b[j], spec.metric))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loc(lon: f64, lat: f64) -> Location {
        Location { lon, lat }
    }

    #[test]
    fn zero_lag_is_variance() {
        for spec in [
            CovarianceSpec::exponential(2.5, 0.3),
            CovarianceSpec::squared_exponential(0.7, 1.0),
            CovarianceSpec::matern(1.3, 2.0, 1.0),
            CovarianceSpec::matern(1.3, 2.0, 0.37),
        ] {
            assert_eq!(cov_value(&spec, 0.0).unwrap(), spec.variance);
        }
    }

    #[test]
    fn exponential_at_range() {
        let v = cov_value(&CovarianceSpec::exponential(1.0, 2.0), 2.0).unwrap();
        assert!((v - (-1.0f64).exp()).abs() < 1e-15);
        assert!((v - 0.367879).abs() < 1e-6);
    }

    #[test]
    fn matern_half_matches_exponential_via_bessel() {
        for &u in &[0.5, 1.0, 2.0] {
            let oracle = (std::f64::consts::PI / (2.0 * u)).sqrt() * (-u).exp();
            // x^{1/2} K_{1/2}(x) / (2^{-1/2} Gamma(1/2)) with the oracle K
            let via_oracle = u.sqrt() * oracle / (2f64.powf(-0.5) * std::f64::consts::PI.sqrt());
            let general = matern_correlation_general(0.5, u);
            let expo = cov_value(&CovarianceSpec::exponential(1.0, 1.0), u).unwrap();
            assert!((general - expo).abs() < 1e-10);
            assert!((via_oracle - expo).abs() < 1e-10);
        }
    }

    #[test]
    fn matern_half_matches_exponential_over_range() {
        let rho = 0.8;
        let mut u = 1e-3;
        while u <= 10.0 * rho {
            let a = matern_correlation_general(0.5, u / rho);
            let b = (-u / rho).exp();
            assert!((a - b).abs() <= 1e-10 * b, "u={u}");
            u *= 1.07;
        }
    }

    #[test]
    fn half_integer_fast_paths_match_general() {
        for &nu in &[1.5, 2.5] {
            for &x in &[0.01, 0.3, 1.0, 3.0, 8.0] {
                let a = matern_correlation(nu, x);
                let b = matern_correlation_general(nu, x);
                assert!((a - b).abs() < 1e-12, "nu={nu} x={x}");
            }
        }
    }

    #[test]
    fn log_range_derivative_matches_finite_differences() {
        let specs = [
            CovarianceSpec::exponential(1.0, 0.7),
            CovarianceSpec::squared_exponential(1.0, 0.7),
            CovarianceSpec::matern(1.0, 1.0 / 0.7, 1.5),
            CovarianceSpec::matern(1.0, 1.0 / 0.7, 2.5),
            CovarianceSpec::matern(1.0, 1.0 / 0.7, 1.0),
            CovarianceSpec::matern(1.0, 1.0 / 0.7, 0.3),
        ];
        for spec in specs {
            for &u in &[0.05, 0.4, 1.3, 3.0] {
                let h: f64 = 1e-6;
                let mut up = spec;
                up.range = spec.range * h.exp();
                let mut dn = spec;
                dn.range = spec.range * (-h).exp();
                let fd = (up.correlation(u) - dn.correlation(u)) / (2.0 * h);
                let an = spec.dcorr_dlog_range(u);
                assert!((fd - an).abs() < 1e-7 * an.abs().max(1e-3), "{spec:?} u={u}: {fd} vs {an}");
            }
        }
    }

    #[test]
    fn rejects_bad_distance_and_params() {
        let spec = CovarianceSpec::exponential(1.0, 1.0);
        assert!(cov_value(&spec, f64::NAN).is_err());
        assert!(cov_value(&spec, f64::INFINITY).is_err());
        assert!(CovarianceSpec::exponential(0.0, 1.0).validate().is_err());
        let mut bad = CovarianceSpec::matern(1.0, 1.0, 1.0);
        bad.smoothness = None;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn cov_matrix_examples() {
        let spec = CovarianceSpec::exponential(2.0, 1.0);
        let m = cov_matrix(&[loc(1.0, 1.0)], &spec, 0.0).unwrap();
        assert_eq!(m[(0, 0)], 2.0);

        let dup = [loc(0.5, 0.5), loc(0.5, 0.5)];
        let m = cov_matrix(&dup, &spec, 1e-8).unwrap();
        assert_eq!(m[(0, 0)], 2.0 + 1e-8);
        assert_eq!(m[(0, 1)], 2.0);
    }

    #[test]
    fn duplicate_points_without_jitter_name_pivot() {
        let spec = CovarianceSpec::exponential(1.0, 1.0);
        match cov_matrix(&[loc(0.0, 0.0), loc(0.0, 0.0)], &spec, 0.0) {
            Err(Error::NotPositiveDefinite { index, .. }) => assert_eq!(index, 1),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn cov_matrix_matches_elementwise_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let pts: Vec<_> = (0..20).map(|_| loc(rng.random_range(0.0..5.0), rng.random_range(0.0..5.0))).collect();
        let spec = CovarianceSpec::matern(1.7, 0.9, 1.0);
        let m = cov_matrix(&pts, &spec, 1e-6).unwrap();
        for i in 0..20 {
            for j in 0..20 {
                let expect = cov_value(&spec, distance(pts[i], pts[j], spec.metric)).unwrap()
                    + if i == j { 1e-6 } else { 0.0 };
                assert_eq!(m[(i, j)], expect);
            }
        }
    }

    #[test]
    fn small_jitter_keeps_random_sets_positive_definite() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..100 {
            let n = rng.random_range(2..=200);
            let pts: Vec<_> = (0..n)
                .map(|_| {
                    // snap to a coarse grid so duplicates occur
                    let a: f64 = rng.random_range(0.0..3.0);
                    let b: f64 = rng.random_range(0.0..3.0);
                    loc((a * 4.0).round() / 4.0, (b * 4.0).round() / 4.0)
                })
                .collect();
            let spec = match trial % 3 {
                0 => CovarianceSpec::exponential(rng.random_range(0.1..3.0), rng.random_range(0.1..2.0)),
                1 => CovarianceSpec::matern(rng.random_range(0.1..3.0), rng.random_range(0.5..5.0), 1.0),
                _ => CovarianceSpec::matern(rng.random_range(0.1..3.0), rng.random_range(0.5..5.0), 0.5),
            };
            // duplicates are exactly singular; use the relative floor of 1e-10
            cov_matrix(&pts, &spec, 1e-10 * spec.variance).unwrap();
        }
    }

    proptest! {
        #[test]
        fn monotone_non_increasing(
            family in 0usize..4,
            var in 0.01f64..10.0,
            range in 0.01f64..10.0,
            u1 in 0.0f64..20.0,
            du in 0.0f64..20.0,
        ) {
            let spec = match family {
                0 => CovarianceSpec::exponential(var, range),
                1 => CovarianceSpec::squared_exponential(var, range),
                2 => CovarianceSpec::matern(var, 1.0 / range, 1.0),
                _ => CovarianceSpec::matern(var, 1.0 / range, 0.8),
            };
            let a = cov_value(&spec, u1).unwrap();
            let b = cov_value(&spec, u1 + du).unwrap();
            prop_assert!(b <= a * (1.0 + 1e-12));
        }
    }
}
