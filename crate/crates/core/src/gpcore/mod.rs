//! Gaussian-process regression with a boosted mean function.
//!
//! The response is `y = F(X) + b + e` with `b ~ GP(0, sigma2 * r(u / rho))`
//! and `e ~ N(0, tau2)`. Hyperparameters `theta = (sigma2, rho, tau2)` are fit
//! by quasi-Newton on the negative log marginal likelihood, either exact or
//! Vecchia-approximated, alternating with boosting steps on `F`.

mod fit;
mod vecchia;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::covfn::{CovarianceSpec, DEFAULT_JITTER};
use crate::error::{Error, Result};
use crate::geodata::{distance, Location};
use crate::linalg::Cholesky;

pub use fit::{fit, fit_xy, GpFit, GpPrediction};
pub use vecchia::{gp_nll_vecchia, vecchia_neighbours, VecchiaFactor};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Covariance hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub sigma2: f64,
    pub range: f64,
    pub tau2: f64,
}

impl Theta {
    pub fn new(sigma2: f64, range: f64, tau2: f64) -> Self {
        Theta { sigma2, range, tau2 }
    }

    pub fn to_log(self) -> [f64; 3] {
        [self.sigma2.ln(), self.range.ln(), self.tau2.ln()]
    }

    pub fn from_log(x: &[f64]) -> Self {
        Theta {
            sigma2: x[0].exp(),
            range: x[1].exp(),
            tau2: x[2].exp(),
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v > 0.0 && v.is_finite();
        if ok(self.sigma2) && ok(self.range) && ok(self.tau2) {
            Ok(())
        } else {
            Err(Error::invalid(format!("theta must be positive, got {self:?}")))
        }
    }

    /// Covariance spec with this variance and range, family from `base`.
    pub fn cov(&self, base: &CovarianceSpec) -> CovarianceSpec {
        CovarianceSpec {
            variance: self.sigma2,
            range: self.range,
            ..*base
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VecchiaSpec {
    pub m_fit: usize,
    pub m_predict: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostingSpec {
    pub rounds: usize,
    pub learning_rate: f64,
    pub num_leaves: usize,
    pub max_depth: usize,
    pub min_data_in_leaf: usize,
}

impl Default for BoostingSpec {
    fn default() -> Self {
        BoostingSpec {
            rounds: 247,
            learning_rate: 0.01,
            num_leaves: 1024,
            max_depth: 6,
            min_data_in_leaf: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpModelSpec {
    /// Family, smoothness and metric. Variance and range are only used when
    /// `init` is absent and the data give no usable scale.
    pub cov: CovarianceSpec,
    #[serde(default)]
    pub noise_variance: Option<f64>,
    #[serde(default)]
    pub vecchia: Option<VecchiaSpec>,
    #[serde(default)]
    pub boosting: BoostingSpec,
    /// Stop boosting once a round improves the NLL by less than 1e-8.
    #[serde(default)]
    pub early_stop: bool,
    /// Starting hyperparameters; data-driven when absent.
    #[serde(default)]
    pub init: Option<Theta>,
}

impl Default for GpModelSpec {
    fn default() -> Self {
        GpModelSpec {
            cov: CovarianceSpec::exponential(1.0, 1.0),
            noise_variance: None,
            vecchia: None,
            boosting: BoostingSpec::default(),
            early_stop: false,
            init: None,
        }
    }
}

impl GpModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.cov.validate()?;
        if let Some(v) = self.vecchia {
            if v.m_fit == 0 || v.m_predict == 0 {
                return Err(Error::invalid("vecchia m_fit and m_predict must be at least 1"));
            }
        }
        let b = &self.boosting;
        if b.rounds == 0 {
            return Err(Error::invalid("boosting rounds must be positive"));
        }
        if !(b.learning_rate > 0.0 && b.learning_rate <= 1.0) {
            return Err(Error::invalid("learning_rate must lie in (0, 1]"));
        }
        if b.num_leaves == 0 || b.max_depth == 0 || b.min_data_in_leaf == 0 {
            return Err(Error::invalid("num_leaves, max_depth and min_data_in_leaf must be positive"));
        }
        if let Some(t) = self.noise_variance {
            if !(t >= 0.0) {
                return Err(Error::invalid("noise_variance must be non-negative"));
            }
        }
        Ok(())
    }
}

/// Entry `(i, j)` of `Psi = sigma2 (R + jitter I) + tau2 I`.
#[inline]
pub(crate) fn psi_entry(theta: &Theta, spec: &CovarianceSpec, d: f64, diag: bool) -> f64 {
    if diag {
        theta.sigma2 * (1.0 + DEFAULT_JITTER) + theta.tau2
    } else {
        theta.sigma2 * spec.correlation(d)
    }
}

/// Dense exact likelihood with cached pairwise distances.
pub(crate) struct ExactObjective {
    dist: DMatrix<f64>,
    spec: CovarianceSpec,
}

impl ExactObjective {
    pub fn new(pts: &[Location], spec: &CovarianceSpec) -> Self {
        let n = pts.len();
        let mut dist = DMatrix::zeros(n, n);
        for j in 0..n {
            for i in j + 1..n {
                let d = distance(pts[i], pts[j], spec.metric);
                dist[(i, j)] = d;
                dist[(j, i)] = d;
            }
        }
        ExactObjective { dist, spec: *spec }
    }

    pub fn psi(&self, theta: &Theta) -> DMatrix<f64> {
        let spec = theta.cov(&self.spec);
        let n = self.dist.nrows();
        let mut m = DMatrix::zeros(n, n);
        for j in 0..n {
            m[(j, j)] = psi_entry(theta, &spec, 0.0, true);
            for i in j + 1..n {
                let v = psi_entry(theta, &spec, self.dist[(i, j)], false);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        m
    }

    pub fn factor(&self, theta: &Theta) -> Result<Cholesky> {
        Cholesky::factor(&self.psi(theta))
    }

    pub fn nll(&self, theta: &Theta, r: &[f64]) -> Result<f64> {
        let chol = self.factor(theta)?;
        Ok(nll_from_factor(&chol, r))
    }

    /// NLL and its gradient with respect to `ln theta`.
    pub fn nll_grad(&self, theta: &Theta, r: &[f64]) -> Result<(f64, [f64; 3])> {
        let chol = self.factor(theta)?;
        let f = nll_from_factor(&chol, r);
        let alpha = chol.solve(r);
        let inv = chol.inverse();
        let spec = theta.cov(&self.spec);
        let n = r.len();
        // dNLL/dx = 0.5 * sum_ij (Psi^-1 - alpha alpha^T)_ij dPsi_ij
        let mut g = [0.0; 3];
        for j in 0..n {
            let w = inv[(j, j)] - alpha[j] * alpha[j];
            g[0] += 0.5 * w * theta.sigma2 * (1.0 + DEFAULT_JITTER);
            g[2] += 0.5 * w * theta.tau2;
            for i in j + 1..n {
                let w = inv[(i, j)] - alpha[i] * alpha[j];
                let d = self.dist[(i, j)];
                // off-diagonal pairs counted twice
                g[0] += w * theta.sigma2 * spec.correlation(d);
                g[1] += w * theta.sigma2 * spec.dcorr_dlog_range(d);
            }
        }
        Ok((f, g))
    }
}

pub(crate) fn nll_from_factor(chol: &Cholesky, r: &[f64]) -> f64 {
    let mut z = r.to_vec();
    chol.forward_in_place(&mut z);
    let quad: f64 = z.iter().map(|v| v * v).sum();
    0.5 * quad + 0.5 * chol.log_det() + 0.5 * r.len() as f64 * LN_2PI
}

fn residuals(y: &[f64], f: &[f64], n: usize) -> Result<Vec<f64>> {
    if y.len() != n || f.len() != n {
        return Err(Error::invalid(format!(
            "y ({}) and F ({}) must match the {n} locations",
            y.len(),
            f.len()
        )));
    }
    Ok(y.iter().zip(f).map(|(a, b)| a - b).collect())
}

/// Exact negative log marginal likelihood
/// `0.5 r' Psi^-1 r + 0.5 log|Psi| + n/2 log(2 pi)` with `r = y - F`.
pub fn gp_nll(y: &[f64], f: &[f64], theta: Theta, pts: &[Location], spec: &CovarianceSpec) -> Result<f64> {
    theta.validate()?;
    let r = residuals(y, f, pts.len())?;
    ExactObjective::new(pts, spec).nll(&theta, &r)
}

/// Exact NLL with its gradient with respect to `(ln sigma2, ln rho, ln tau2)`.
pub fn gp_nll_grad(
    y: &[f64],
    f: &[f64],
    theta: Theta,
    pts: &[Location],
    spec: &CovarianceSpec,
) -> Result<(f64, [f64; 3])> {
    theta.validate()?;
    let r = residuals(y, f, pts.len())?;
    ExactObjective::new(pts, spec).nll_grad(&theta, &r)
}
