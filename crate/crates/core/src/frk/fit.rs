use std::cell::RefCell;

use nalgebra::DMatrix;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use super::{place_basis, BasisSet, BauGrid, FrkResponse, FrkSpec};
use crate::error::{Error, Result};
use crate::exec::{par_map, stream_rng};
use crate::geodata::{BoundingBox, Location, SurveyRecord};
use crate::linalg::Cholesky;
use crate::optim::{minimize_fd, BfgsOptions, Bounds, OptimError};
use crate::simkit::{inv_logit, logit};

const NEWTON_MAX_ITER: usize = 100;
const NEWTON_TOL: f64 = 1e-8;
const MC_CHUNK: usize = 50;

/// Hyperparameters: intercept, per-resolution precision scale `tau_k` and
/// propriety `rho_k` of `K`, and fine-scale variance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrkParams {
    pub beta0: f64,
    pub tau: Vec<f64>,
    pub rho: Vec<f64>,
    pub sigma2_xi: f64,
}

/// Posterior mode and curvature at the fitted hyperparameters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrkFit {
    pub params: FrkParams,
    pub eta_mode: Vec<f64>,
    /// Fine-scale effect at each BAU holding data, aligned with `data_baus`.
    pub xi_mode: Vec<f64>,
    pub data_baus: Vec<usize>,
    /// Summed likelihood curvature per data BAU at the mode.
    pub bau_weight: Vec<f64>,
    /// Marginal precision of `eta` at the mode (row-major, r x r).
    pub eta_precision: Vec<f64>,
    pub log_marginal: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrkModel {
    pub spec: FrkSpec,
    pub basis: BasisSet,
    pub bau: BauGrid,
    pub fit: FrkFit,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrkPrediction {
    /// Monte Carlo mean of the prevalence process.
    pub mean: f64,
    /// Monte Carlo sd of the prevalence process.
    pub sd: f64,
    /// Inverse logit of the latent mode.
    pub mode: f64,
}

struct Obs {
    h: f64,
    n: f64,
    /// Local data-BAU index.
    bau: usize,
    log_choose: f64,
}

/// Everything the Laplace step needs that does not depend on hyperparameters.
struct Problem {
    r: usize,
    m: usize,
    /// Basis at each data BAU, row-major `m x r`.
    phi: Vec<f64>,
    obs: Vec<Obs>,
    response: FrkResponse,
    fine_scale: bool,
    /// `(range, laplacian eigenvalues, adjacency)` per resolution.
    blocks: Vec<(std::ops::Range<usize>, Vec<f64>, Vec<(usize, usize)>)>,
}

fn path_eigs(n: usize) -> Vec<f64> {
    (0..n)
        .map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos())
        .collect()
}

impl Problem {
    fn new(records: &[SurveyRecord], basis: &BasisSet, bau: &BauGrid, spec: &FrkSpec) -> Result<(Self, Vec<usize>)> {
        let mut data_baus: Vec<usize> = Vec::new();
        let mut local = std::collections::HashMap::new();
        let mut obs = Vec::with_capacity(records.len());
        for rec in records {
            let b = bau.bau_of(rec.loc)?;
            let li = *local.entry(b).or_insert_with(|| {
                data_baus.push(b);
                data_baus.len() - 1
            });
            let (n, h) = (f64::from(rec.examined), f64::from(rec.positive));
            obs.push(Obs {
                h,
                n,
                bau: li,
                log_choose: ln_gamma(n + 1.0) - ln_gamma(h + 1.0) - ln_gamma(n - h + 1.0),
            });
        }
        let r = basis.len();
        let mut phi = Vec::with_capacity(data_baus.len() * r);
        for &b in &data_baus {
            phi.extend(basis.eval_at(bau.centroid(b)));
        }
        let blocks = (0..basis.nres())
            .map(|k| {
                let (nx, ny) = basis.grids[k];
                let (ex, ey) = (path_eigs(nx), path_eigs(ny));
                let eigs = ey.iter().flat_map(|a| ex.iter().map(move |b| a + b)).collect();
                let mut adj = Vec::new();
                for j in 0..ny {
                    for i in 0..nx {
                        let id = j * nx + i;
                        if i + 1 < nx {
                            adj.push((id, id + 1));
                        }
                        if j + 1 < ny {
                            adj.push((id, id + nx));
                        }
                    }
                }
                (basis.range_of(k), eigs, adj)
            })
            .collect();
        Ok((
            Problem {
                r,
                m: data_baus.len(),
                phi,
                obs,
                response: spec.response,
                fine_scale: spec.fine_scale,
                blocks,
            },
            data_baus,
        ))
    }

    fn phi_row(&self, b: usize) -> &[f64] {
        &self.phi[b * self.r..(b + 1) * self.r]
    }

    fn k_matrix(&self, p: &FrkParams) -> DMatrix<f64> {
        let mut k = DMatrix::zeros(self.r, self.r);
        for (res, (range, _, adj)) in self.blocks.iter().enumerate() {
            let (tau, rho) = (p.tau[res], p.rho[res]);
            let off = range.start;
            let mut deg = vec![0.0; range.len()];
            for &(a, b) in adj {
                deg[a] += 1.0;
                deg[b] += 1.0;
                k[(off + a, off + b)] = -tau * rho;
                k[(off + b, off + a)] = -tau * rho;
            }
            for (i, d) in deg.iter().enumerate() {
                k[(off + i, off + i)] = tau * (rho * d + 1.0 - rho);
            }
        }
        k
    }

    fn k_log_det(&self, p: &FrkParams) -> f64 {
        self.blocks
            .iter()
            .enumerate()
            .map(|(res, (_, eigs, _))| {
                eigs.iter()
                    .map(|l| (p.tau[res] * (p.rho[res] * l + 1.0 - p.rho[res])).ln())
                    .sum::<f64>()
            })
            .sum()
    }

    /// Per-observation log-likelihood, first derivative and curvature in zeta.
    fn lik(&self, o: &Obs, zeta: f64) -> (f64, f64, f64) {
        match self.response {
            FrkResponse::Binomial => {
                let p = inv_logit(zeta);
                // log(1 + e^z) without overflow
                let softplus = if zeta > 0.0 { zeta + (-zeta).exp().ln_1p() } else { zeta.exp().ln_1p() };
                (o.log_choose + o.h * zeta - o.n * softplus, o.h - o.n * p, o.n * p * (1.0 - p))
            }
            FrkResponse::Gaussian { noise_variance: v } => {
                let e = o.h / o.n - zeta;
                (
                    -0.5 * (2.0 * std::f64::consts::PI * v).ln() - 0.5 * e * e / v,
                    e / v,
                    1.0 / v,
                )
            }
        }
    }
}

struct Mode {
    eta: Vec<f64>,
    xi: Vec<f64>,
    weight: Vec<f64>,
    s: DMatrix<f64>,
    log_marginal: f64,
}

/// Newton iterations for the joint mode of `(eta, xi)`, then the Laplace
/// approximation of the log marginal likelihood.
fn laplace(problem: &Problem, p: &FrkParams, start: Option<(&[f64], &[f64])>) -> Result<Mode> {
    let (r, m) = (problem.r, problem.m);
    let k = problem.k_matrix(p);
    let inv_s2 = if problem.fine_scale { 1.0 / p.sigma2_xi } else { 0.0 };
    let (mut eta, mut xi) = match start {
        Some((e, x)) if e.len() == r && x.len() == m => (e.to_vec(), x.to_vec()),
        _ => (vec![0.0; r], vec![0.0; m]),
    };

    // objective, gradient, per-BAU weights
    let eval = |eta: &[f64], xi: &[f64]| {
        let fitted: Vec<f64> = (0..m)
            .map(|b| p.beta0 + dot(problem.phi_row(b), eta) + if problem.fine_scale { xi[b] } else { 0.0 })
            .collect();
        let mut ll = 0.0;
        let mut g = vec![0.0; m];
        let mut w = vec![0.0; m];
        for o in &problem.obs {
            let (l, d1, d2) = problem.lik(o, fitted[o.bau]);
            ll += l;
            g[o.bau] += d1;
            w[o.bau] += d2;
        }
        let k_eta = &k * nalgebra::DVector::from_column_slice(eta);
        let mut obj = ll - 0.5 * dot(eta, k_eta.as_slice());
        let mut g_eta: Vec<f64> = k_eta.iter().map(|v| -v).collect();
        for b in 0..m {
            for (ge, ph) in g_eta.iter_mut().zip(problem.phi_row(b)) {
                *ge += ph * g[b];
            }
        }
        let g_xi: Vec<f64> = if problem.fine_scale {
            obj -= 0.5 * inv_s2 * xi.iter().map(|v| v * v).sum::<f64>();
            (0..m).map(|b| g[b] - inv_s2 * xi[b]).collect()
        } else {
            vec![0.0; m]
        };
        (obj, g_eta, g_xi, w)
    };

    // Schur complement on eta: S = K + sum_b c_b phi_b phi_b'
    let schur = |w: &[f64]| -> (DMatrix<f64>, Vec<f64>) {
        let mut s = k.clone();
        let mut d = vec![0.0; m];
        for b in 0..m {
            let c = if problem.fine_scale {
                d[b] = w[b] + inv_s2;
                w[b] * inv_s2 / d[b]
            } else {
                w[b]
            };
            if c == 0.0 {
                continue;
            }
            let ph = problem.phi_row(b);
            for j in 0..r {
                let cj = c * ph[j];
                if cj == 0.0 {
                    continue;
                }
                for i in j..r {
                    s[(i, j)] += cj * ph[i];
                }
            }
        }
        for j in 0..r {
            for i in j + 1..r {
                s[(j, i)] = s[(i, j)];
            }
        }
        (s, d)
    };

    let (mut obj, mut g_eta, mut g_xi, mut w) = eval(&eta, &xi);
    let mut converged = false;
    let mut grad_norm = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        grad_norm = g_eta.iter().chain(&g_xi).fold(0.0f64, |a, v| a.max(v.abs()));
        if grad_norm < NEWTON_TOL {
            converged = true;
            break;
        }
        let (s, d) = schur(&w);
        let chol = Cholesky::factor(&s)?;
        let mut rhs = g_eta.clone();
        if problem.fine_scale {
            for b in 0..m {
                let f = w[b] / d[b] * g_xi[b];
                for (rv, ph) in rhs.iter_mut().zip(problem.phi_row(b)) {
                    *rv -= ph * f;
                }
            }
        }
        let d_eta = chol.solve(&rhs);
        let d_xi: Vec<f64> = if problem.fine_scale {
            (0..m)
                .map(|b| (g_xi[b] - w[b] * dot(problem.phi_row(b), &d_eta)) / d[b])
                .collect()
        } else {
            vec![0.0; m]
        };
        let decrement = dot(&g_eta, &d_eta) + dot(&g_xi, &d_xi);
        if decrement.abs() < 1e-12 * (1.0 + obj.abs()) {
            // gain is below objective resolution; the full step still sharpens the mode
            for (a, b) in eta.iter_mut().zip(&d_eta) {
                *a += b;
            }
            for (a, b) in xi.iter_mut().zip(&d_xi) {
                *a += b;
            }
            (obj, g_eta, g_xi, w) = eval(&eta, &xi);
            converged = obj.is_finite();
            break;
        }
        let mut t = 1.0;
        let mut moved = false;
        for _ in 0..40 {
            let e2: Vec<f64> = eta.iter().zip(&d_eta).map(|(a, b)| a + t * b).collect();
            let x2: Vec<f64> = xi.iter().zip(&d_xi).map(|(a, b)| a + t * b).collect();
            let next = eval(&e2, &x2);
            if next.0.is_finite() && next.0 >= obj - 1e-12 * obj.abs() {
                eta = e2;
                xi = x2;
                (obj, g_eta, g_xi, w) = next;
                moved = true;
                break;
            }
            t *= 0.5;
        }
        if !moved {
            // at the limit of floating-point resolution
            converged = grad_norm < 1e-5;
            break;
        }
    }
    if !converged {
        let g = g_eta.iter().chain(&g_xi).fold(0.0f64, |a, v| a.max(v.abs()));
        return Err(Error::fit(format!(
            "inner Newton did not converge in {NEWTON_MAX_ITER} iterations (gradient norm {:e})",
            g.min(grad_norm)
        )));
    }

    let (s, d) = schur(&w);
    let s_chol = Cholesky::factor(&s)?;
    let mut log_marginal = obj + 0.5 * problem.k_log_det(p) - 0.5 * s_chol.log_det();
    if problem.fine_scale {
        log_marginal += 0.5 * m as f64 * inv_s2.ln() - 0.5 * d.iter().map(|v| v.ln()).sum::<f64>();
    }
    Ok(Mode {
        eta,
        xi,
        weight: w,
        s,
        log_marginal,
    })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Laplace-approximated log marginal likelihood at fixed hyperparameters.
pub fn laplace_log_marginal(
    records: &[SurveyRecord],
    spec: &FrkSpec,
    basis: &BasisSet,
    bau: &BauGrid,
    params: &FrkParams,
) -> Result<f64> {
    let (problem, _) = Problem::new(records, basis, bau, spec)?;
    Ok(laplace(&problem, params, None)?.log_marginal)
}

fn unpack(x: &[f64], nres: usize, fine_scale: bool) -> FrkParams {
    FrkParams {
        beta0: x[0],
        tau: x[1..1 + nres].iter().map(|v| v.exp()).collect(),
        rho: x[1 + nres..1 + 2 * nres].iter().map(|v| inv_logit(*v)).collect(),
        sigma2_xi: if fine_scale { x[1 + 2 * nres].exp() } else { 0.0 },
    }
}

/// Fits with a basis laid over the data and BAUs covering data and `domain`.
pub fn fit(records: &[SurveyRecord], spec: &FrkSpec, domain: BoundingBox) -> Result<FrkModel> {
    let data = BoundingBox::of_points(records.iter().map(|r| &r.loc)).ok_or_else(|| Error::invalid("no records"))?;
    let mut basis_box = data;
    if basis_box.is_degenerate() {
        basis_box = basis_box.union(&domain);
    }
    if basis_box.is_degenerate() {
        basis_box = basis_box.expanded(spec.bau_cell_size);
    }
    let basis = place_basis(basis_box, spec.nres, spec.regular, spec.scale_aperture)?;
    let bau = BauGrid::new(data.union(&domain), spec.bau_cell_size)?;
    fit_with_basis(records, spec, basis, bau)
}

pub fn fit_with_basis(records: &[SurveyRecord], spec: &FrkSpec, basis: BasisSet, bau: BauGrid) -> Result<FrkModel> {
    if records.is_empty() {
        return Err(Error::invalid("FRK needs at least one record"));
    }
    spec.validate()?;
    let (problem, data_baus) = Problem::new(records, &basis, &bau, spec)?;
    let nres = basis.nres();
    let (hs, ns) = records
        .iter()
        .fold((0.0, 0.0), |a, r| (a.0 + f64::from(r.positive), a.1 + f64::from(r.examined)));
    let beta_init = match spec.response {
        FrkResponse::Binomial => logit((hs / ns).clamp(1e-4, 1.0 - 1e-4)),
        FrkResponse::Gaussian { .. } => records.iter().map(SurveyRecord::prevalence).sum::<f64>() / records.len() as f64,
    };
    let mut x0 = vec![beta_init];
    x0.extend(std::iter::repeat_n(0.0, 2 * nres));
    let mut lower = vec![-30.0];
    let mut upper = vec![30.0];
    lower.extend(std::iter::repeat_n(-10.0, nres));
    upper.extend(std::iter::repeat_n(15.0, nres));
    lower.extend(std::iter::repeat_n(-6.0, nres));
    upper.extend(std::iter::repeat_n(6.0, nres));
    if spec.fine_scale {
        x0.push(0.1f64.ln());
        lower.push(1e-6f64.ln());
        upper.push(100f64.ln());
    }
    let bounds = Bounds::new(lower, upper);

    let warm: RefCell<Option<(Vec<f64>, Vec<f64>)>> = RefCell::new(None);
    let objective = |x: &[f64]| {
        let p = unpack(x, nres, spec.fine_scale);
        let start = warm.borrow().clone();
        match laplace(&problem, &p, start.as_ref().map(|(e, x)| (e.as_slice(), x.as_slice()))) {
            Ok(mode) => {
                *warm.borrow_mut() = Some((mode.eta, mode.xi));
                -mode.log_marginal
            }
            Err(_) => f64::INFINITY,
        }
    };
    let opts = BfgsOptions {
        max_iter: 200,
        grad_tol: 1e-6,
        f_tol: 1e-6,
    };
    let result = minimize_fd(objective, &x0, &bounds, &opts, 1e-5).map_err(|e| match e {
        OptimError::NonFiniteStart => Error::Fit {
            message: "Laplace approximation failed at the starting hyperparameters".into(),
            last_valid: None,
        },
    })?;
    let params = unpack(&result.x, nres, spec.fine_scale);
    let start = warm.borrow().clone();
    let mode = laplace(&problem, &params, start.as_ref().map(|(e, x)| (e.as_slice(), x.as_slice())))?;
    let r = basis.len();
    let eta_precision = (0..r * r).map(|i| mode.s[(i / r, i % r)]).collect();
    Ok(FrkModel {
        spec: spec.clone(),
        basis,
        bau,
        fit: FrkFit {
            params,
            eta_mode: mode.eta,
            xi_mode: mode.xi,
            data_baus,
            bau_weight: mode.weight,
            eta_precision,
            log_marginal: mode.log_marginal,
            converged: result.converged,
        },
    })
}

#[derive(Clone, Copy, Default)]
struct Welford {
    n: f64,
    mean: f64,
    m2: f64,
}

impl Welford {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        let d = x - self.mean;
        self.mean += d / self.n;
        self.m2 += d * (x - self.mean);
    }

    fn merge(self, o: Welford) -> Welford {
        if self.n == 0.0 {
            return o;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Welford {
            n,
            mean: self.mean + d * o.n / n,
            m2: self.m2 + o.m2 + d * d * self.n * o.n / n,
        }
    }
}

impl FrkModel {
    /// Monte Carlo summaries with `spec.n_mc` samples.
    pub fn predict(&self, pts: &[Location]) -> Result<Vec<FrkPrediction>> {
        self.predict_mc(pts, self.spec.n_mc, 1.0)
    }

    /// Monte Carlo summaries of `p` at the BAUs containing `pts`, with the
    /// Laplace covariance multiplied by `variance_scale`.
    pub fn predict_mc(&self, pts: &[Location], n_mc: usize, variance_scale: f64) -> Result<Vec<FrkPrediction>> {
        if n_mc == 0 || !(variance_scale >= 0.0) {
            return Err(Error::invalid("n_mc must be positive and variance_scale non-negative"));
        }
        let idx: Vec<usize> = pts.iter().map(|p| self.bau.bau_of(*p)).collect::<Result<_>>()?;
        let mut unique = idx.clone();
        unique.sort_unstable();
        unique.dedup();
        let per_bau = self.predict_baus(&unique, n_mc, variance_scale)?;
        Ok(idx
            .iter()
            .map(|b| per_bau[unique.binary_search(b).expect("present")])
            .collect())
    }

    /// Monte Carlo summaries at the given BAU indices (sorted, unique).
    pub fn predict_baus(&self, baus: &[usize], n_mc: usize, variance_scale: f64) -> Result<Vec<FrkPrediction>> {
        let f = &self.fit;
        let r = self.basis.len();
        let fine = self.spec.fine_scale;
        let s = DMatrix::from_row_slice(r, r, &f.eta_precision);
        let chol = Cholesky::factor(&s)?;
        let scale = variance_scale.sqrt();
        let sigma_xi = f.params.sigma2_xi.sqrt();
        let inv_s2 = if fine { 1.0 / f.params.sigma2_xi } else { 0.0 };

        // per BAU: basis row, latent mode, optional (xi mode, conditional terms)
        struct Target {
            phi: Vec<f64>,
            mode: f64,
            data: Option<(f64, f64, f64)>,
        }
        let targets: Vec<Target> = baus
            .iter()
            .map(|&b| {
                let phi = self.basis.eval_at(self.bau.centroid(b));
                let mut mode = f.params.beta0 + dot(&phi, &f.eta_mode);
                let data = f.data_baus.iter().position(|&d| d == b).map(|li| {
                    let w = f.bau_weight[li];
                    let d = w + inv_s2;
                    (f.xi_mode[li], w / d, 1.0 / d)
                });
                if let (true, Some((xi, _, _))) = (fine, data) {
                    mode += xi;
                }
                Target { phi, mode, data }
            })
            .collect();

        let chunks: Vec<usize> = (0..n_mc).step_by(MC_CHUNK).collect();
        let parts = par_map(chunks, |start| {
            let mut acc = vec![Welford::default(); targets.len()];
            for sample in start..(start + MC_CHUNK).min(n_mc) {
                let mut rng = stream_rng(self.spec.seed, sample as u64);
                let mut z: Vec<f64> = (0..r).map(|_| StandardNormal.sample(&mut rng)).collect();
                chol.backward_in_place(&mut z);
                let d_eta: Vec<f64> = z.iter().map(|v| v * scale).collect();
                for (t, a) in targets.iter().zip(acc.iter_mut()) {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let shift = dot(&t.phi, &d_eta);
                    let xi = match (fine, t.data) {
                        (false, _) => 0.0,
                        (true, Some((xi, gain, var))) => xi - gain * shift + scale * var.sqrt() * e,
                        (true, None) => scale * sigma_xi * e,
                    };
                    let base = t.mode - if let (true, Some((x, _, _))) = (fine, t.data) { x } else { 0.0 };
                    a.push(inv_logit(base + shift + xi));
                }
            }
            acc
        });
        let mut total = vec![Welford::default(); targets.len()];
        for part in parts {
            for (t, p) in total.iter_mut().zip(part) {
                *t = t.merge(p);
            }
        }
        Ok(total
            .iter()
            .zip(&targets)
            .map(|(w, t)| FrkPrediction {
                mean: w.mean,
                sd: if w.n > 1.0 { (w.m2 / (w.n - 1.0)).max(0.0).sqrt() } else { 0.0 },
                mode: inv_logit(t.mode),
            })
            .collect())
    }
}
