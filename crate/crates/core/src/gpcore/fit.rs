use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use super::vecchia::{conditional, nearest_among, vecchia_neighbours, VecchiaFactor};
use super::{nll_from_factor, ExactObjective, GpModelSpec, Theta};
use crate::cart::{FeatureMatrix, Tree, TreeParams};
use crate::covfn::CovarianceSpec;
use crate::error::{Error, Result};
use crate::exec::{par_map, stream_rng};
use crate::geodata::{distance, BoundingBox, Location, SurveyRecord};
use crate::linalg::Cholesky;
use crate::optim::{fd_gradient, minimize, BfgsOptions, Bounds, OptimError};

const LOG_LOWER: f64 = -23.025_850_929_940_457; // ln 1e-10
const LOG_UPPER: f64 = 23.025_850_929_940_457;
const EARLY_STOP_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpPrediction {
    pub mean: f64,
    pub sd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct BoostTree {
    tree: Tree,
    /// Leaf value per node id (zero for split nodes), already scaled.
    values: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpFit {
    spec: GpModelSpec,
    theta: Theta,
    theta_init: Theta,
    intercept: f64,
    trees: Vec<BoostTree>,
    pts: Vec<Location>,
    y: Vec<f64>,
    f_train: Vec<f64>,
    alpha: Vec<f64>,
    nll_init: f64,
    nll_trace: Vec<f64>,
    #[serde(skip)]
    chol: OnceLock<Cholesky>,
}

enum Backend {
    Exact(ExactObjective),
    Vecchia(Vec<Vec<u32>>),
}

enum Solver {
    Exact(Cholesky),
    Vecchia(VecchiaFactor),
}

impl Solver {
    fn nll(&self, r: &[f64]) -> f64 {
        match self {
            Solver::Exact(c) => nll_from_factor(c, r),
            Solver::Vecchia(v) => v.nll(r),
        }
    }

    fn inv_mul(&self, v: &[f64]) -> Vec<f64> {
        match self {
            Solver::Exact(c) => c.solve(v),
            Solver::Vecchia(f) => f.precision_mul(v),
        }
    }
}

impl Backend {
    fn solver(&self, pts: &[Location], theta: &Theta, spec: &CovarianceSpec) -> Result<Solver> {
        Ok(match self {
            Backend::Exact(o) => Solver::Exact(o.factor(theta)?),
            Backend::Vecchia(nb) => Solver::Vecchia(VecchiaFactor::new(pts, nb.clone(), theta, spec)?),
        })
    }

    fn nll(&self, pts: &[Location], theta: &Theta, spec: &CovarianceSpec, r: &[f64]) -> Result<f64> {
        Ok(self.solver(pts, theta, spec)?.nll(r))
    }

    fn nll_grad(&self, pts: &[Location], x: &[f64], spec: &CovarianceSpec, r: &[f64]) -> (f64, Vec<f64>) {
        let theta = Theta::from_log(x);
        match self {
            Backend::Exact(o) => match o.nll_grad(&theta, r) {
                Ok((f, g)) => (f, g.to_vec()),
                Err(_) => (f64::INFINITY, vec![0.0; 3]),
            },
            Backend::Vecchia(_) => {
                let mut f = |x: &[f64]| self.nll(pts, &Theta::from_log(x), spec, r).unwrap_or(f64::INFINITY);
                let v = f(x);
                if !v.is_finite() {
                    return (v, vec![0.0; 3]);
                }
                (v, fd_gradient(&mut f, x, None, 1e-5))
            }
        }
    }
}

fn variance(y: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    y.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n
}

fn initial_theta(pts: &[Location], y: &[f64], spec: &GpModelSpec) -> Theta {
    if let Some(t) = spec.init {
        return t;
    }
    let half = (variance(y) / 2.0).max(1e-6);
    let diag = BoundingBox::of_points(pts)
        .map(|b| distance(b.min, b.max, spec.cov.metric))
        .unwrap_or(0.0);
    let range = if diag > 0.0 { 0.2 * diag } else { spec.cov.range };
    Theta::new(half, range, spec.noise_variance.map_or(half, |t| t.max(1e-300)))
}

/// Fits the model to empirical prevalences `H/N` at the survey locations.
pub fn fit(records: &[SurveyRecord], spec: &GpModelSpec) -> Result<GpFit> {
    let pts: Vec<Location> = records.iter().map(|r| r.loc).collect();
    let y: Vec<f64> = records.iter().map(SurveyRecord::prevalence).collect();
    fit_xy(&pts, &y, None, spec)
}

/// Fits to arbitrary responses, with optional covariates driving the trees.
pub fn fit_xy(pts: &[Location], y: &[f64], covariates: Option<&FeatureMatrix>, spec: &GpModelSpec) -> Result<GpFit> {
    spec.validate()?;
    let n = pts.len();
    if n < 2 {
        return Err(Error::invalid("GP fit needs at least 2 records"));
    }
    if y.len() != n || covariates.is_some_and(|x| x.n_rows() != n) {
        return Err(Error::invalid("responses and covariates must match the locations"));
    }
    let cov = spec.cov;
    let backend = match spec.vecchia {
        Some(v) => Backend::Vecchia(vecchia_neighbours(pts, v.m_fit, cov.metric)),
        None => Backend::Exact(ExactObjective::new(pts, &cov)),
    };

    let theta_init = initial_theta(pts, y, spec);
    let mut x = theta_init.to_log().to_vec();
    let mut bounds = Bounds::new(vec![LOG_LOWER; 3], vec![LOG_UPPER; 3]);
    if let Some(t) = spec.noise_variance {
        let lt = t.max(1e-300).ln();
        bounds.lower[2] = lt;
        bounds.upper[2] = lt;
    }
    bounds.project(&mut x);

    let mut intercept = y.iter().sum::<f64>() / n as f64;
    let mut f_train = vec![intercept; n];
    let mut trees = Vec::new();
    let resid = |f: &[f64]| -> Vec<f64> { y.iter().zip(f).map(|(a, b)| a - b).collect() };

    let nll_init = backend.nll(pts, &Theta::from_log(&x), &cov, &resid(&f_train))?;
    let mut nll_trace = Vec::with_capacity(spec.boosting.rounds);
    let mut prev = nll_init;
    let opts = BfgsOptions::default();
    let lr = spec.boosting.learning_rate;
    let tree_params = TreeParams {
        mtry: usize::MAX,
        min_node_size: 1,
        min_leaf: spec.boosting.min_data_in_leaf,
        max_depth: Some(spec.boosting.max_depth),
        max_leaves: Some(spec.boosting.num_leaves),
    };

    for round in 0..spec.boosting.rounds {
        let r = resid(&f_train);
        let m = match minimize(|x| backend.nll_grad(pts, x, &cov, &r), &x, &bounds, &opts) {
            Ok(m) => m,
            Err(OptimError::NonFiniteStart) => {
                return Err(Error::Fit {
                    message: format!("non-finite likelihood in boosting round {round}"),
                    last_valid: Some(Theta::from_log(&x).to_log().to_vec()),
                })
            }
        };
        x = m.x;
        let theta = Theta::from_log(&x);
        let solver = backend.solver(pts, &theta, &cov)?;
        let nll_theta = m.f;

        // Newton-type step on F: leaf value sum(g_L) / (1_L' Psi^-1 1_L)
        let g = solver.inv_mul(&r);
        let (delta, tree) = match covariates {
            None => {
                let w = solver.inv_mul(&vec![1.0; n]).iter().sum::<f64>();
                let step = g.iter().sum::<f64>() / w;
                (vec![step; n], None)
            }
            Some(xm) => {
                let mut rng = stream_rng(round as u64, 0);
                let tree = Tree::grow(xm, &g, (0..n as u32).collect(), &tree_params, &mut rng);
                let mut values = vec![0.0; tree.nodes().len()];
                let mut delta = vec![0.0; n];
                for leaf in tree.leaves() {
                    let members = tree.leaf_samples(leaf);
                    let mut ind = vec![0.0; n];
                    for &i in members {
                        ind[i as usize] = 1.0;
                    }
                    let w: f64 = solver.inv_mul(&ind).iter().zip(&ind).map(|(a, b)| a * b).sum();
                    let v = members.iter().map(|&i| g[i as usize]).sum::<f64>() / w;
                    values[leaf] = v;
                    for &i in members {
                        delta[i as usize] = v;
                    }
                }
                (delta, Some(BoostTree { tree, values }))
            }
        };

        let mut t = lr;
        let mut accepted = None;
        for _ in 0..30 {
            let cand: Vec<f64> = f_train.iter().zip(&delta).map(|(f, d)| f + t * d).collect();
            let v = solver.nll(&resid(&cand));
            if v.is_finite() && v <= nll_theta {
                accepted = Some((cand, v));
                break;
            }
            t *= 0.5;
        }
        let nll = match accepted {
            Some((cand, v)) => {
                f_train = cand;
                match tree {
                    None => intercept += t * delta[0],
                    Some(mut bt) => {
                        bt.values.iter_mut().for_each(|v| *v *= t);
                        trees.push(bt);
                    }
                }
                v
            }
            None => nll_theta,
        };
        nll_trace.push(nll);
        if spec.early_stop && prev - nll < EARLY_STOP_TOL {
            break;
        }
        prev = nll;
    }

    let theta = Theta::from_log(&x);
    let r = resid(&f_train);
    let alpha = match &backend {
        Backend::Exact(o) => o.factor(&theta)?.solve(&r),
        Backend::Vecchia(_) => Vec::new(),
    };
    Ok(GpFit {
        spec: spec.clone(),
        theta,
        theta_init,
        intercept,
        trees,
        pts: pts.to_vec(),
        y: y.to_vec(),
        f_train,
        alpha,
        nll_init,
        nll_trace,
        chol: OnceLock::new(),
    })
}

impl GpFit {
    pub fn theta(&self) -> Theta {
        self.theta
    }

    pub fn theta_init(&self) -> Theta {
        self.theta_init
    }

    pub fn intercept(&self) -> f64 {
        self.intercept
    }

    pub fn nll_init(&self) -> f64 {
        self.nll_init
    }

    /// NLL after each boosting round.
    pub fn nll_trace(&self) -> &[f64] {
        &self.nll_trace
    }

    pub fn spec(&self) -> &GpModelSpec {
        &self.spec
    }

    pub fn training_points(&self) -> &[Location] {
        &self.pts
    }

    fn cov(&self) -> CovarianceSpec {
        self.theta.cov(&self.spec.cov)
    }

    fn factor(&self) -> Result<&Cholesky> {
        if let Some(c) = self.chol.get() {
            return Ok(c);
        }
        let c = ExactObjective::new(&self.pts, &self.spec.cov).factor(&self.theta)?;
        Ok(self.chol.get_or_init(|| c))
    }

    fn mean_function(&self, row: Option<(&FeatureMatrix, usize)>) -> f64 {
        let mut f = self.intercept;
        if let Some((x, i)) = row {
            for bt in &self.trees {
                f += bt.values[bt.tree.leaf_index(|j| x.get(i, j))];
            }
        }
        f
    }

    /// Latent conditional mean and response sd, unclipped.
    pub fn predict_latent(&self, pts: &[Location], covariates: Option<&FeatureMatrix>) -> Result<Vec<(f64, f64)>> {
        if !self.trees.is_empty() && covariates.is_none_or(|x| x.n_rows() != pts.len()) {
            return Err(Error::invalid("model was fit with covariates; supply them for every prediction point"));
        }
        let cov = self.cov();
        let theta = self.theta;
        let r: Vec<f64> = self.y.iter().zip(&self.f_train).map(|(a, b)| a - b).collect();
        let exact = match self.spec.vecchia {
            None => Some(self.factor()?),
            Some(_) => None,
        };
        let chunk = 256;
        let starts: Vec<usize> = (0..pts.len()).step_by(chunk).collect();
        let parts = par_map(starts, |s| -> Result<Vec<(f64, f64)>> {
            (s..(s + chunk).min(pts.len()))
                .map(|i| {
                    let q = pts[i];
                    let f = self.mean_function(covariates.map(|x| (x, i)));
                    let (mean, var) = match (exact, self.spec.vecchia) {
                        (Some(chol), _) => {
                            let mut k: Vec<f64> = self
                                .pts
                                .iter()
                                .map(|p| theta.sigma2 * cov.correlation(distance(q, *p, cov.metric)))
                                .collect();
                            let m: f64 = k.iter().zip(&self.alpha).map(|(a, b)| a * b).sum();
                            chol.forward_in_place(&mut k);
                            (f + m, theta.sigma2 - k.iter().map(|v| v * v).sum::<f64>())
                        }
                        (None, Some(v)) => {
                            let nb = nearest_among(&self.pts, 0..self.pts.len(), q, v.m_predict, cov.metric);
                            let (b, var) = conditional(&self.pts, &nb, q, theta.sigma2, &theta, &cov)?;
                            let m: f64 = nb.iter().zip(&b).map(|(&j, bj)| bj * r[j as usize]).sum();
                            (f + m, var)
                        }
                        (None, None) => unreachable!(),
                    };
                    Ok((mean, (var.max(0.0) + theta.tau2).sqrt()))
                })
                .collect()
        });
        let mut out = Vec::with_capacity(pts.len());
        for p in parts {
            out.extend(p?);
        }
        Ok(out)
    }

    /// Prevalence predictions: conditional mean clipped to [0, 1], response sd.
    pub fn predict(&self, pts: &[Location]) -> Result<Vec<GpPrediction>> {
        self.predict_with_covariates(pts, None)
    }

    pub fn predict_with_covariates(&self, pts: &[Location], covariates: Option<&FeatureMatrix>) -> Result<Vec<GpPrediction>> {
        Ok(self
            .predict_latent(pts, covariates)?
            .into_iter()
            .map(|(m, sd)| GpPrediction {
                mean: m.clamp(0.0, 1.0),
                sd,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{gp_nll, VecchiaSpec};
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pts_uniform(n: usize, seed: u64) -> Vec<Location> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Location {
                lon: rng.random_range(0.0..2.0),
                lat: rng.random_range(0.0..2.0),
            })
            .collect()
    }

    fn spec(rounds: usize) -> GpModelSpec {
        GpModelSpec {
            boosting: crate::gpcore::BoostingSpec {
                rounds,
                learning_rate: 0.1,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn constant_response() {
        let pts = pts_uniform(20, 1);
        let y = vec![0.3; 20];
        let fit = fit_xy(&pts, &y, None, &spec(3)).unwrap();
        assert!((fit.intercept() - 0.3).abs() < 1e-12);
        assert!(fit.theta().sigma2 < 1e-8, "{:?}", fit.theta());
    }

    #[test]
    fn trace_is_monotone_and_improves_on_start() {
        let pts = pts_uniform(60, 2);
        let y: Vec<f64> = pts.iter().map(|p| 0.3 + 0.2 * (p.lon * 2.0).sin() * p.lat.cos()).collect();
        let fit = fit_xy(&pts, &y, None, &spec(10)).unwrap();
        let tr = fit.nll_trace();
        assert!(tr[0] <= fit.nll_init());
        assert!(tr.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        let at_init = gp_nll(&y, &vec![y.iter().sum::<f64>() / 60.0; 60], fit.theta_init(), &pts, &fit.spec().cov).unwrap();
        assert!(*tr.last().unwrap() <= at_init);
    }

    #[test]
    fn interpolates_training_points_without_noise() {
        let pts = pts_uniform(15, 3);
        let y: Vec<f64> = pts.iter().map(|p| 0.5 + 0.1 * p.lon).collect();
        let mut s = spec(1);
        s.noise_variance = Some(0.0);
        s.init = Some(Theta::new(0.05, 1.0, 0.0));
        let fit = fit_xy(&pts, &y, None, &s).unwrap();
        for (p, (m, sd)) in fit.predict_latent(&pts, None).unwrap().iter().enumerate() {
            assert!((m - y[p]).abs() < 1e-5, "{m} vs {}", y[p]);
            assert!(*sd < 1e-3);
        }
    }

    #[test]
    fn reverts_to_prior_far_away() {
        let pts = pts_uniform(30, 4);
        let y: Vec<f64> = pts.iter().map(|p| 0.4 + 0.1 * p.lat.sin()).collect();
        let fit = fit_xy(&pts, &y, None, &spec(2)).unwrap();
        let t = fit.theta();
        let far = Location { lon: 2.0 + 50.0 * t.range, lat: 0.0 };
        let (m, sd) = fit.predict_latent(&[far], None).unwrap()[0];
        assert!((m - fit.intercept()).abs() < 1e-9);
        assert!((sd - (t.sigma2 + t.tau2).sqrt()).abs() < 1e-9);
    }

    #[test]
    fn vecchia_prediction_with_all_neighbours_is_exact() {
        let pts = pts_uniform(50, 5);
        let y: Vec<f64> = pts.iter().map(|p| 0.3 + 0.1 * (p.lon * 3.0).cos()).collect();
        let mut s = spec(1);
        s.init = Some(Theta::new(0.02, 0.5, 0.005));
        let exact = fit_xy(&pts, &y, None, &s).unwrap();
        // same hyperparameters, Vecchia prediction with every point as neighbour
        let mut vfit = exact.clone();
        vfit.spec.vecchia = Some(VecchiaSpec { m_fit: 10, m_predict: 50 });
        let test = pts_uniform(20, 6);
        let a = exact.predict_latent(&test, None).unwrap();
        let b = vfit.predict_latent(&test, None).unwrap();
        for (u, v) in a.iter().zip(&b) {
            assert!((u.0 - v.0).abs() < 1e-8 && (u.1 - v.1).abs() < 1e-8);
        }
    }

    #[test]
    fn sd_bounded_and_survives_serialization() {
        let pts = pts_uniform(40, 7);
        let y: Vec<f64> = pts.iter().map(|p| 0.2 + 0.1 * p.lon).collect();
        let mut s = spec(2);
        s.vecchia = Some(VecchiaSpec { m_fit: 10, m_predict: 15 });
        let fit = fit_xy(&pts, &y, None, &s).unwrap();
        let t = fit.theta();
        let q = pts_uniform(30, 8);
        let p = fit.predict(&q).unwrap();
        for v in &p {
            assert!(v.sd >= 0.0 && v.sd <= (t.sigma2 + t.tau2).sqrt() + 1e-9);
            assert!((0.0..=1.0).contains(&v.mean));
        }
    }

    #[test]
    fn covariate_trees_reduce_likelihood() {
        let pts = pts_uniform(80, 9);
        let xcol: Vec<f64> = (0..80).map(|i| (i % 2) as f64).collect();
        let y: Vec<f64> = xcol.iter().map(|v| 0.2 + 0.3 * v).collect();
        let x = FeatureMatrix::from_columns(80, vec![xcol]);
        let fit = fit_xy(&pts, &y, Some(&x), &spec(20)).unwrap();
        let tr = fit.nll_trace();
        assert!(tr.windows(2).all(|w| w[1] <= w[0] + 1e-12));
        assert!(fit.predict(&pts).is_err());
        let p = fit.predict_with_covariates(&pts[..2], Some(&FeatureMatrix::from_columns(2, vec![vec![0.0, 1.0]]))).unwrap();
        assert!(p[1].mean > p[0].mean);
    }
}
