//! Vecchia approximation: `p(y) ~ prod_i p(y_i | y_N(i))` where `N(i)` holds
//! the nearest previously-ordered points. Ordering is the input order.

use nalgebra::DMatrix;

use super::{psi_entry, residuals, Theta, LN_2PI};
use crate::covfn::CovarianceSpec;
use crate::error::{Error, Result};
use crate::exec::par_map;
use crate::geodata::{distance, DistanceMetric, Location};
use crate::linalg::Cholesky;

/// Indices of the `m` points nearest to `q` among `candidates`, ties broken
/// by index. Returned in ascending index order.
pub(crate) fn nearest_among(
    pts: &[Location],
    candidates: std::ops::Range<usize>,
    q: Location,
    m: usize,
    metric: DistanceMetric,
) -> Vec<u32> {
    let mut d: Vec<(f64, u32)> = candidates.map(|j| (distance(q, pts[j], metric), j as u32)).collect();
    if d.len() > m {
        d.select_nth_unstable_by(m - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        d.truncate(m);
    }
    let mut idx: Vec<u32> = d.into_iter().map(|(_, j)| j).collect();
    idx.sort_unstable();
    idx
}

/// Conditioning sets: the `m` nearest among points `0..i` for each `i`.
pub fn vecchia_neighbours(pts: &[Location], m: usize, metric: DistanceMetric) -> Vec<Vec<u32>> {
    (0..pts.len()).map(|i| nearest_among(pts, 0..i, pts[i], m, metric)).collect()
}

/// Solves the Gaussian conditional of `target` given the points `nb`:
/// returns `(Psi_NN^-1 c, Psi_tt - c' Psi_NN^-1 c)`.
pub(crate) fn conditional(
    pts: &[Location],
    nb: &[u32],
    target: Location,
    target_diag: f64,
    theta: &Theta,
    spec: &CovarianceSpec,
) -> Result<(Vec<f64>, f64)> {
    let k = nb.len();
    if k == 0 {
        return Ok((Vec::new(), target_diag));
    }
    let mut s = DMatrix::zeros(k, k);
    for a in 0..k {
        let pa = pts[nb[a] as usize];
        s[(a, a)] = psi_entry(theta, spec, 0.0, true);
        for b in a + 1..k {
            let v = psi_entry(theta, spec, distance(pa, pts[nb[b] as usize], spec.metric), false);
            s[(a, b)] = v;
            s[(b, a)] = v;
        }
    }
    let c: Vec<f64> = nb
        .iter()
        .map(|&j| psi_entry(theta, spec, distance(target, pts[j as usize], spec.metric), false))
        .collect();
    let chol = Cholesky::factor(&s)?;
    let b = chol.solve(&c);
    let var = target_diag - c.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>();
    Ok((b, var))
}

/// Sparse factor `Psi^-1 ~ (I - B)' D^-1 (I - B)` of the Vecchia approximation.
#[derive(Debug, Clone)]
pub struct VecchiaFactor {
    neighbours: Vec<Vec<u32>>,
    b: Vec<Vec<f64>>,
    d: Vec<f64>,
}

impl VecchiaFactor {
    pub fn new(pts: &[Location], neighbours: Vec<Vec<u32>>, theta: &Theta, base: &CovarianceSpec) -> Result<Self> {
        let spec = theta.cov(base);
        let diag = psi_entry(theta, &spec, 0.0, true);
        let n = pts.len();
        let chunk = 64;
        let starts: Vec<usize> = (0..n).step_by(chunk).collect();
        let parts = par_map(starts, |s| {
            (s..(s + chunk).min(n))
                .map(|i| conditional(pts, &neighbours[i], pts[i], diag, theta, &spec))
                .collect::<Result<Vec<_>>>()
        });
        let mut b = Vec::with_capacity(n);
        let mut d = Vec::with_capacity(n);
        for part in parts {
            for (bi, di) in part? {
                if !(di > 0.0) {
                    return Err(Error::Numerical(format!("non-positive Vecchia conditional variance {di:e}")));
                }
                b.push(bi);
                d.push(di);
            }
        }
        Ok(VecchiaFactor { neighbours, b, d })
    }

    /// `(I - B) v`
    fn whiten(&self, v: &[f64]) -> Vec<f64> {
        (0..v.len())
            .map(|i| {
                v[i] - self.neighbours[i]
                    .iter()
                    .zip(&self.b[i])
                    .map(|(&j, bij)| bij * v[j as usize])
                    .sum::<f64>()
            })
            .collect()
    }

    pub fn nll(&self, r: &[f64]) -> f64 {
        let u = self.whiten(r);
        0.5 * u
            .iter()
            .zip(&self.d)
            .map(|(ui, di)| (LN_2PI + di.ln()) + ui * ui / di)
            .sum::<f64>()
    }

    /// Approximate `Psi^-1 v`.
    pub fn precision_mul(&self, v: &[f64]) -> Vec<f64> {
        let u: Vec<f64> = self.whiten(v).iter().zip(&self.d).map(|(a, d)| a / d).collect();
        let mut out = u.clone();
        for i in 0..u.len() {
            for (&j, bij) in self.neighbours[i].iter().zip(&self.b[i]) {
                out[j as usize] -= bij * u[i];
            }
        }
        out
    }

    pub fn neighbours(&self) -> &[Vec<u32>] {
        &self.neighbours
    }
}

/// Vecchia negative log-likelihood with `m_fit` neighbours per conditional.
pub fn gp_nll_vecchia(
    y: &[f64],
    f: &[f64],
    theta: Theta,
    pts: &[Location],
    spec: &CovarianceSpec,
    m_fit: usize,
) -> Result<f64> {
    theta.validate()?;
    if m_fit == 0 {
        return Err(Error::invalid("m_fit must be at least 1"));
    }
    let r = residuals(y, f, pts.len())?;
    let nb = vecchia_neighbours(pts, m_fit, spec.metric);
    Ok(VecchiaFactor::new(pts, nb, &theta, spec)?.nll(&r))
}
