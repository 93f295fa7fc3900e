use std::cell::RefCell;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{build_precision, interp_matrix, logistic_normal_moments, Lattice, LgmResponse, LgmSpec};
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::geodata::{BoundingBox, Location, SurveyRecord};
use crate::linalg::{CsrMatrix, SkylineCholesky};
use crate::optim::{minimize_fd, BfgsOptions, Bounds};
use crate::simkit::{inv_logit, logit};

const BETA0_PRECISION: f64 = 1e-6;
const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-8;

/// Hyperparameters on their natural scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgmHyper {
    pub kappa: f64,
    /// Marginal field variance `1 / (4 pi kappa^2 tau)`.
    pub field_variance: f64,
    /// Beta-binomial precision.
    pub phi: Option<f64>,
    /// Gaussian response noise variance.
    pub noise_variance: Option<f64>,
}

impl LgmHyper {
    pub fn tau(&self) -> f64 {
        1.0 / (4.0 * std::f64::consts::PI * self.kappa * self.kappa * self.field_variance)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RangeDiagnostic {
    /// `sqrt(8) / kappa`, where the correlation has fallen to about 0.13.
    pub practical_range: f64,
    pub field_variance: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LgmPrediction {
    pub median: f64,
    pub mean: f64,
    pub sd: f64,
    pub latent_mean: f64,
    pub latent_sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LgmFit {
    pub spec: LgmSpec,
    pub lattice: Lattice,
    pub hyper: LgmHyper,
    /// Optimizer coordinates: `(ln kappa, ln field_variance[, ln phi | ln noise_variance])`.
    pub theta_hat: Vec<f64>,
    pub field_mode: Vec<f64>,
    pub beta0: f64,
    /// Lower triangle of the posterior precision at the mode; the last
    /// latent is `beta0`.
    precision: Vec<(usize, usize, f64)>,
    pub log_marginal: f64,
    pub converged: bool,
    #[serde(skip)]
    chol: OnceLock<SkylineCholesky>,
}

struct Obs {
    h: f64,
    n: f64,
    log_choose: f64,
}

struct Problem {
    lat: Lattice,
    a: CsrMatrix,
    obs: Vec<Obs>,
    response: LgmResponse,
    eigs: Vec<f64>,
}

struct Mode {
    x: Vec<f64>,
    precision: CsrMatrix,
    log_marginal: f64,
}

impl Problem {
    fn new(records: &[SurveyRecord], lat: Lattice, response: LgmResponse) -> Result<Self> {
        let pts: Vec<Location> = records.iter().map(|r| r.loc).collect();
        let a = interp_matrix(&lat, &pts)?;
        let obs = records
            .iter()
            .map(|r| {
                let (n, h) = (f64::from(r.examined), f64::from(r.positive));
                Obs {
                    h,
                    n,
                    log_choose: ln_gamma(n + 1.0) - ln_gamma(h + 1.0) - ln_gamma(n - h + 1.0),
                }
            })
            .collect();
        Ok(Problem {
            eigs: lat.laplacian_eigenvalues(),
            lat,
            a,
            obs,
            response,
        })
    }

    fn dim(&self) -> usize {
        self.lat.len() + 1
    }

    fn q_log_det(&self, hyper: &LgmHyper) -> f64 {
        let h2 = self.lat.cell * self.lat.cell;
        let k2h2 = hyper.kappa * hyper.kappa * h2;
        self.lat.len() as f64 * (hyper.tau() / h2).ln() + 2.0 * self.eigs.iter().map(|l| (k2h2 + l).ln()).sum::<f64>()
    }

    /// Log-likelihood of one record and its first two derivatives in the
    /// linear predictor; the curvature is returned negated.
    fn lik(&self, o: &Obs, eta: f64, hyper: &LgmHyper) -> (f64, f64, f64) {
        match self.response {
            LgmResponse::Binomial => {
                let p = inv_logit(eta);
                let softplus = if eta > 0.0 { eta + (-eta).exp().ln_1p() } else { eta.exp().ln_1p() };
                (o.log_choose + o.h * eta - o.n * softplus, o.h - o.n * p, o.n * p * (1.0 - p))
            }
            LgmResponse::BetaBinomial => {
                let phi = hyper.phi.expect("phi");
                let p = inv_logit(eta);
                let s = p * (1.0 - p);
                let (a, b) = (p * phi, (1.0 - p) * phi);
                let (mut ll, mut d, mut t) = (o.log_choose, 0.0, 0.0);
                for k in 0..o.h as usize {
                    let v = a + k as f64;
                    ll += v.ln();
                    d += 1.0 / v;
                    t += 1.0 / (v * v);
                }
                for k in 0..(o.n - o.h) as usize {
                    let v = b + k as f64;
                    ll += v.ln();
                    d -= 1.0 / v;
                    t += 1.0 / (v * v);
                }
                for k in 0..o.n as usize {
                    ll -= (phi + k as f64).ln();
                }
                let g = phi * s;
                let d2 = g * (1.0 - 2.0 * p) * d - g * g * t;
                (ll, g * d, (-d2).max(1e-12))
            }
            LgmResponse::Gaussian => {
                let v = hyper.noise_variance.expect("noise variance");
                let e = o.h / o.n - eta;
                (-0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * e * e / v, e / v, 1.0 / v)
            }
        }
    }

    fn laplace(&self, hyper: &LgmHyper, start: Option<&[f64]>) -> Result<Mode> {
        let n = self.lat.len();
        let dim = self.dim();
        let q = build_precision(&self.lat, hyper.kappa, hyper.tau())?;
        let mut x = match start {
            Some(s) if s.len() == dim => s.to_vec(),
            _ => vec![0.0; dim],
        };

        let eval = |x: &[f64]| {
            let mut fitted = self.a.mul_vec(&x[..n]);
            fitted.iter_mut().for_each(|v| *v += x[n]);
            let mut ll = 0.0;
            let mut d1 = Vec::with_capacity(fitted.len());
            let mut w = Vec::with_capacity(fitted.len());
            for (o, eta) in self.obs.iter().zip(&fitted) {
                let (l, g, c) = self.lik(o, *eta, hyper);
                ll += l;
                d1.push(g);
                w.push(c);
            }
            let qx = q.mul_vec(&x[..n]);
            let obj = ll - 0.5 * dot(&x[..n], &qx) - 0.5 * BETA0_PRECISION * x[n] * x[n];
            let mut grad = self.a.tr_mul_vec(&d1);
            for (g, v) in grad.iter_mut().zip(&qx) {
                *g -= v;
            }
            grad.push(d1.iter().sum::<f64>() - BETA0_PRECISION * x[n]);
            (obj, grad, w)
        };

        let hessian = |w: &[f64]| {
            let mut trip = q.triplets();
            trip.push((n, n, BETA0_PRECISION));
            for (i, wi) in w.iter().enumerate() {
                let row: Vec<(usize, f64)> = self.a.row(i).collect();
                for &(j, aj) in &row {
                    for &(k, ak) in &row {
                        trip.push((j, k, wi * aj * ak));
                    }
                    trip.push((j, n, wi * aj));
                    trip.push((n, j, wi * aj));
                }
                trip.push((n, n, *wi));
            }
            CsrMatrix::from_triplets(dim, dim, trip)
        };

        let (mut obj, mut grad, mut w) = eval(&x);
        let mut converged = false;
        for _ in 0..NEWTON_MAX_ITER {
            let gnorm = grad.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            if gnorm < NEWTON_TOL {
                converged = true;
                break;
            }
            let chol = SkylineCholesky::factor(&hessian(&w))?;
            let step = chol.solve(&grad);
            let mut t = 1.0;
            let mut moved = false;
            for _ in 0..40 {
                let cand: Vec<f64> = x.iter().zip(&step).map(|(a, b)| a + t * b).collect();
                let next = eval(&cand);
                if next.0.is_finite() && next.0 >= obj - 1e-12 * obj.abs() {
                    x = cand;
                    (obj, grad, w) = next;
                    moved = true;
                    break;
                }
                t *= 0.5;
            }
            if !moved {
                converged = gnorm < 1e-5;
                break;
            }
        }
        if !converged {
            return Err(Error::fit(format!(
                "inner Newton did not converge in {NEWTON_MAX_ITER} iterations"
            )));
        }
        let precision = hessian(&w);
        let chol = SkylineCholesky::factor(&precision)?;
        let log_marginal = obj + 0.5 * self.q_log_det(hyper) + 0.5 * BETA0_PRECISION.ln() - 0.5 * chol.log_det();
        Ok(Mode {
            x,
            precision,
            log_marginal,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Laplace-approximated log marginal likelihood at fixed hyperparameters,
/// with the latent mode (field nodes then `beta0`).
pub fn laplace_log_marginal(
    records: &[SurveyRecord],
    response: LgmResponse,
    lattice: Lattice,
    hyper: &LgmHyper,
) -> Result<(f64, Vec<f64>)> {
    let m = Problem::new(records, lattice, response)?.laplace(hyper, None)?;
    Ok((m.log_marginal, m.x))
}

fn unpack(x: &[f64], response: LgmResponse) -> LgmHyper {
    LgmHyper {
        kappa: x[0].exp(),
        field_variance: x[1].exp(),
        phi: (response == LgmResponse::BetaBinomial).then(|| x[2].exp()),
        noise_variance: (response == LgmResponse::Gaussian).then(|| x[2].exp()),
    }
}

/// Empirical-Bayes fit on a lattice covering the data and `domain` plus
/// `spec.margin`.
pub fn fit(records: &[SurveyRecord], spec: &LgmSpec, domain: BoundingBox) -> Result<LgmFit> {
    spec.validate()?;
    if records.len() < 2 {
        return Err(Error::invalid("the lattice model needs at least 2 records"));
    }
    let data = BoundingBox::of_points(records.iter().map(|r| &r.loc)).expect("non-empty");
    let lattice = Lattice::covering(data.union(&domain).expanded(spec.margin), spec.lattice_cell)?;
    let problem = Problem::new(records, lattice, spec.response)?;

    let y: Vec<f64> = records.iter().map(SurveyRecord::prevalence).collect();
    let y_mean = y.iter().sum::<f64>() / y.len() as f64;
    let y_var = y.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / y.len() as f64;
    let (hs, ns) = records
        .iter()
        .fold((0.0, 0.0), |a, r| (a.0 + f64::from(r.positive), a.1 + f64::from(r.examined)));

    let (k_lo, k_hi) = spec.kappa_range();
    let diag = (data.width().powi(2) + data.height().powi(2)).sqrt().max(spec.lattice_cell);
    let kappa0 = (8f64.sqrt() * 4.0 / diag).clamp(k_lo * 1.5, k_hi / 1.5);
    let (v_lo, v_hi) = spec.field_variance_bounds;
    let mut x0 = vec![kappa0.ln()];
    let mut lower = vec![k_lo.ln()];
    let mut upper = vec![k_hi.ln()];
    let var0 = match spec.response {
        LgmResponse::Gaussian => y_var.max(1e-4),
        _ => 1.0,
    };
    x0.push(var0.clamp(v_lo * 1.5, v_hi / 1.5).ln());
    lower.push(v_lo.ln());
    upper.push(v_hi.ln());
    match spec.response {
        LgmResponse::Binomial => {}
        LgmResponse::BetaBinomial => {
            let (a, b) = spec.phi_bounds;
            x0.push(20f64.clamp(a * 1.5, b / 1.5).ln());
            lower.push(a.ln());
            upper.push(b.ln());
        }
        LgmResponse::Gaussian => {
            let (a, b) = spec.noise_variance_bounds;
            x0.push((0.5 * y_var).clamp(a * 1.5, b / 1.5).ln());
            lower.push(a.ln());
            upper.push(b.ln());
        }
    }
    let bounds = Bounds::new(lower, upper);

    let n = lattice.len();
    let mut start = vec![0.0; n + 1];
    start[n] = match spec.response {
        LgmResponse::Gaussian => y_mean,
        _ => logit((hs / ns).clamp(1e-4, 1.0 - 1e-4)),
    };
    let warm = RefCell::new(start);
    let objective = |x: &[f64]| {
        let hyper = unpack(x, spec.response);
        let s = warm.borrow().clone();
        match problem.laplace(&hyper, Some(&s)) {
            Ok(m) => {
                *warm.borrow_mut() = m.x;
                -m.log_marginal
            }
            Err(_) => f64::INFINITY,
        }
    };
    let opts = BfgsOptions {
        max_iter: 200,
        grad_tol: 1e-5,
        f_tol: 1e-10,
    };
    let result = minimize_fd(objective, &x0, &bounds, &opts, 1e-5)
        .map_err(|_| Error::fit("Laplace approximation failed at the starting hyperparameters"))?;
    let xk = result.x[0];
    for (bound, name) in [(bounds.lower[0], "lower"), (bounds.upper[0], "upper")] {
        if (xk - bound).abs() < 1e-6 {
            return Err(Error::Fit {
                message: format!("kappa reached its {name} bound {}", bound.exp()),
                last_valid: Some(result.x.clone()),
            });
        }
    }
    let hyper = unpack(&result.x, spec.response);
    let s = warm.borrow().clone();
    let mode = problem.laplace(&hyper, Some(&s))?;
    let chol = SkylineCholesky::factor(&mode.precision)?;
    let precision = mode.precision.triplets().into_iter().filter(|&(r, c, _)| c <= r).collect();
    let lock = OnceLock::new();
    let _ = lock.set(chol);
    Ok(LgmFit {
        spec: spec.clone(),
        lattice,
        hyper,
        theta_hat: result.x,
        beta0: mode.x[n],
        field_mode: mode.x[..n].to_vec(),
        precision,
        log_marginal: mode.log_marginal,
        converged: result.converged,
        chol: lock,
    })
}

impl LgmFit {
    pub fn range_diagnostic(&self) -> RangeDiagnostic {
        RangeDiagnostic {
            practical_range: 8f64.sqrt() / self.hyper.kappa,
            field_variance: self.hyper.field_variance,
        }
    }

    fn factor(&self) -> Result<&SkylineCholesky> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let dim = self.lattice.len() + 1;
        let mut trip = self.precision.clone();
        trip.extend(self.precision.iter().filter(|&&(r, c, _)| r != c).map(|&(r, c, v)| (c, r, v)));
        let c = SkylineCholesky::factor(&CsrMatrix::from_triplets(dim, dim, trip))?;
        Ok(self.chol.get_or_init(|| c))
    }

    /// Latent mean and sd of `beta0 + S(x)` at each point.
    pub fn predict_latent(&self, pts: &[Location]) -> Result<Vec<(f64, f64)>> {
        let a = interp_matrix(&self.lattice, pts)?;
        let chol = self.factor()?;
        let n = self.lattice.len();
        let rows: Vec<Vec<(usize, f64)>> = (0..pts.len())
            .map(|i| {
                let mut r: Vec<(usize, f64)> = a.row(i).collect();
                r.push((n, 1.0));
                r
            })
            .collect();
        Ok(par_map(rows, |r| {
            let m: f64 = r.iter().map(|&(j, w)| w * if j == n { self.beta0 } else { self.field_mode[j] }).sum();
            (m, chol.quad_inv_sparse(&r).max(0.0).sqrt())
        }))
    }

    pub fn predict(&self, pts: &[Location]) -> Result<Vec<LgmPrediction>> {
        let latent = self.predict_latent(pts)?;
        Ok(latent
            .into_iter()
            .map(|(m, s)| match self.spec.response {
                LgmResponse::Gaussian => {
                    let noise = self.hyper.noise_variance.unwrap_or(0.0);
                    let est = m.clamp(0.0, 1.0);
                    LgmPrediction {
                        median: est,
                        mean: est,
                        sd: (s * s + noise).sqrt(),
                        latent_mean: m,
                        latent_sd: s,
                    }
                }
                response => {
                    let (e1, e2) = logistic_normal_moments(m, s);
                    let mut var = (e2 - e1 * e1).max(0.0);
                    if response == LgmResponse::BetaBinomial {
                        var += (e1 - e2).max(0.0) / (1.0 + self.hyper.phi.unwrap_or(f64::INFINITY));
                    }
                    LgmPrediction {
                        median: inv_logit(m),
                        mean: e1,
                        sd: var.sqrt(),
                        latent_mean: m,
                        latent_sd: s,
                    }
                }
            })
            .collect())
    }
}
