use std::sync::OnceLock;

use nalgebra::{DMatrix, SymmetricEigen};

use crate::simkit::inv_logit;

pub const GH_POINTS: usize = 512;

/// Gauss-Hermite nodes and weights for `int f(x) exp(-x^2) dx` by the
/// Golub-Welsch eigenvalue method, sorted by node.
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut j = DMatrix::zeros(n, n);
    for k in 1..n {
        let b = (k as f64 / 2.0).sqrt();
        j[(k, k - 1)] = b;
        j[(k - 1, k)] = b;
    }
    let eig = SymmetricEigen::new(j);
    let sqrt_pi = std::f64::consts::PI.sqrt();
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], sqrt_pi * eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

fn rule() -> &'static (Vec<f64>, Vec<f64>) {
    static RULE: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    RULE.get_or_init(|| {
        let (x, w) = gauss_hermite(GH_POINTS);
        let s = std::f64::consts::PI.sqrt();
        // normalised to a standard normal expectation
        (x.iter().map(|v| v * std::f64::consts::SQRT_2).collect(), w.iter().map(|v| v / s).collect())
    })
}

/// `E[g(Z)]` and `E[g(Z)^2]` for `Z ~ N(mean, sd^2)` and `g` the inverse logit.
pub fn logistic_normal_moments(mean: f64, sd: f64) -> (f64, f64) {
    if sd == 0.0 {
        let p = inv_logit(mean);
        return (p, p * p);
    }
    let (x, w) = rule();
    x.iter().zip(w).fold((0.0, 0.0), |(m1, m2), (xi, wi)| {
        let p = inv_logit(mean + sd * xi);
        (m1 + wi * p, m2 + wi * p * p)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal, Uniform};

    #[test]
    fn low_order_rule_integrates_polynomials() {
        let (x, w) = gauss_hermite(10);
        let pi = std::f64::consts::PI;
        let m = |k: i32| x.iter().zip(&w).map(|(a, b)| b * a.powi(k)).sum::<f64>();
        assert!((m(0) - pi.sqrt()).abs() < 1e-13);
        assert!(m(1).abs() < 1e-13);
        assert!((m(2) - pi.sqrt() / 2.0).abs() < 1e-13);
        assert!((m(4) - 3.0 * pi.sqrt() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn normalised_rule() {
        let (x, w) = rule();
        assert_eq!(x.len(), GH_POINTS);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        let var: f64 = x.iter().zip(w).map(|(a, b)| b * a * a).sum();
        assert!((var - 1.0).abs() < 1e-10);
    }

    #[test]
    fn symmetric_latent_gives_half() {
        for sd in [0.1, 1.0, 5.0] {
            assert!((logistic_normal_moments(0.0, sd).0 - 0.5).abs() < 1e-13);
        }
    }

    #[test]
    fn quadrature_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mode = Uniform::new(-3.0, 3.0).unwrap();
        let spread = Uniform::new(0.05, 2.5).unwrap();
        for _ in 0..20 {
            let (m, s) = (mode.sample(&mut rng), spread.sample(&mut rng));
            let nd = Normal::new(m, s).unwrap();
            let n = 1_000_000;
            let mc = (0..n).map(|_| inv_logit(nd.sample(&mut rng))).sum::<f64>() / n as f64;
            let q = logistic_normal_moments(m, s).0;
            assert!((q - mc).abs() < 1e-3, "({m}, {s}): {q} vs {mc}");
        }
    }
}
