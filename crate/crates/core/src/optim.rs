//! Box-constrained BFGS used for every hyperparameter search.
//!
//! Steps are projected onto the box; coordinates pinned at a bound with the
//! gradient pointing outward are frozen for the iteration. The line search is
//! Armijo backtracking on the projected path.

use nalgebra::{DMatrix, DVector};

#[derive(Debug, Clone)]
pub struct BfgsOptions {
    pub max_iter: usize,
    /// Stop once the projected gradient infinity norm drops below this.
    pub grad_tol: f64,
    /// Stop once `|f_k - f_{k+1}| <= f_tol * max(1, |f_k|)`.
    pub f_tol: f64,
}

impl Default for BfgsOptions {
    fn default() -> Self {
        BfgsOptions {
            max_iter: 200,
            grad_tol: 1e-6,
            f_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Bounds {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Bounds {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        assert_eq!(lower.len(), upper.len());
        Bounds { lower, upper }
    }

    pub fn unbounded(n: usize) -> Self {
        Bounds {
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn project(&self, x: &mut [f64]) {
        for ((v, lo), hi) in x.iter_mut().zip(&self.lower).zip(&self.upper) {
            *v = v.clamp(*lo, *hi);
        }
    }

    /// Indices of coordinates sitting on a bound.
    pub fn active(&self, x: &[f64]) -> Vec<usize> {
        (0..x.len())
            .filter(|&i| x[i] <= self.lower[i] || x[i] >= self.upper[i])
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct Minimum {
    pub x: Vec<f64>,
    pub f: f64,
    pub grad: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OptimError {
    /// Objective was non-finite at the starting point.
    NonFiniteStart,
}

fn projected_grad_norm(x: &[f64], g: &[f64], b: &Bounds) -> f64 {
    x.iter()
        .zip(g)
        .enumerate()
        .map(|(i, (&xi, &gi))| {
            let blocked = (xi <= b.lower[i] && gi > 0.0) || (xi >= b.upper[i] && gi < 0.0);
            if blocked {
                0.0
            } else {
                gi.abs()
            }
        })
        .fold(0.0, f64::max)
}

/// Minimizes `fg`, which returns `(f(x), grad f(x))`. Non-finite values are
/// treated as infeasible and trigger backtracking.
pub fn minimize<F>(mut fg: F, x0: &[f64], bounds: &Bounds, opts: &BfgsOptions) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let n = x0.len();
    let mut x = x0.to_vec();
    bounds.project(&mut x);
    let (mut f, mut g) = fg(&x);
    let mut evals = 1;
    if !f.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::NonFiniteStart);
    }
    let mut h = DMatrix::<f64>::identity(n, n);
    let mut first_step = true;
    let mut converged = false;
    let mut iter = 0;

    while iter < opts.max_iter {
        if projected_grad_norm(&x, &g, bounds) < opts.grad_tol {
            converged = true;
            break;
        }
        iter += 1;

        let blocked: Vec<usize> = bounds
            .active(&x)
            .into_iter()
            .filter(|&i| (x[i] <= bounds.lower[i] && g[i] > 0.0) || (x[i] >= bounds.upper[i] && g[i] < 0.0))
            .collect();
        let gv = DVector::from_row_slice(&g);
        let mut hb = h.clone();
        for &i in &blocked {
            hb.row_mut(i).fill(0.0);
            hb.column_mut(i).fill(0.0);
        }
        let mut d = -(&hb * &gv);
        for &i in &blocked {
            d[i] = 0.0;
        }
        let mut slope = gv.dot(&d);
        if !(slope < 0.0) {
            // not a descent direction: restart from steepest descent
            h = DMatrix::identity(n, n);
            d = -gv.clone();
            for &i in &blocked {
                d[i] = 0.0;
            }
            slope = gv.dot(&d);
            if !(slope < 0.0) {
                converged = true;
                break;
            }
        }
        if first_step {
            // scale the first step to move at most one unit
            let dn = d.amax();
            if dn > 1.0 {
                d /= dn;
                slope /= dn;
            }
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let mut xn: Vec<f64> = x.iter().zip(d.iter()).map(|(a, b)| a + step * b).collect();
            bounds.project(&mut xn);
            let (fn_, gn) = fg(&xn);
            evals += 1;
            let finite = fn_.is_finite() && gn.iter().all(|v| v.is_finite());
            let actual: f64 = xn.iter().zip(&x).zip(g.iter()).map(|((a, b), gi)| (a - b) * gi).sum();
            if finite && fn_ <= f + 1e-4 * actual.min(step * slope).min(0.0) {
                accepted = Some((xn, fn_, gn));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fn_, gn)) = accepted else {
            break;
        };

        let s = DVector::from_iterator(n, xn.iter().zip(&x).map(|(a, b)| a - b));
        let y = DVector::from_iterator(n, gn.iter().zip(&g).map(|(a, b)| a - b));
        let sy = s.dot(&y);
        if first_step && sy > 0.0 {
            h *= sy / y.dot(&y);
        }
        first_step = false;
        if sy > 1e-12 * s.norm() * y.norm() {
            let rho = 1.0 / sy;
            let i = DMatrix::<f64>::identity(n, n);
            let left = &i - rho * &s * y.transpose();
            let right = &i - rho * &y * s.transpose();
            h = &left * &h * &right + rho * &s * s.transpose();
        }

        let df = (f - fn_).abs();
        let f_scale = f.abs().max(1.0);
        x = xn;
        f = fn_;
        g = gn;
        if df <= opts.f_tol * f_scale {
            converged = true;
            break;
        }
    }

    Ok(Minimum {
        x,
        f,
        grad: g,
        iterations: iter,
        evaluations: evals,
        converged,
    })
}

/// Central finite-difference gradient with step `h * max(1, |x_i|)`,
/// falling back to one-sided differences at the box edges.
pub fn fd_gradient<F>(f: &mut F, x: &[f64], bounds: Option<&Bounds>, h: f64) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut xp = x.to_vec();
    (0..x.len())
        .map(|i| {
            let step = h * x[i].abs().max(1.0);
            let (lo, hi) = bounds.map_or((f64::NEG_INFINITY, f64::INFINITY), |b| (b.lower[i], b.upper[i]));
            let up = (x[i] + step).min(hi);
            let dn = (x[i] - step).max(lo);
            xp[i] = up;
            let fu = f(&xp);
            xp[i] = dn;
            let fd = f(&xp);
            xp[i] = x[i];
            (fu - fd) / (up - dn)
        })
        .collect()
}

/// Wraps a value-only objective with finite-difference gradients.
pub fn minimize_fd<F>(mut f: F, x0: &[f64], bounds: &Bounds, opts: &BfgsOptions, h: f64) -> Result<Minimum, OptimError>
where
    F: FnMut(&[f64]) -> f64,
{
    minimize(
        |x| {
            let v = f(x);
            if !v.is_finite() {
                return (v, vec![0.0; x.len()]);
            }
            let g = fd_gradient(&mut f, x, Some(bounds), h);
            (v, g)
        },
        x0,
        bounds,
        opts,
    )
}
