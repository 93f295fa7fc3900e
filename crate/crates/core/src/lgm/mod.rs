//! Lattice GMRF with a Laplace approximation and empirical-Bayes
//! hyperparameters: `g(p(x)) = beta0 + S(x)`, `S` a Matérn-like field with
//! smoothness 1 discretised on a regular node lattice.

mod fit;
mod quad;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{BoundingBox, Location};
use crate::linalg::CsrMatrix;

pub use fit::{fit, laplace_log_marginal, LgmFit, LgmHyper, LgmPrediction, RangeDiagnostic};
pub use quad::{gauss_hermite, logistic_normal_moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LgmResponse {
    Binomial,
    /// Beta-binomial with precision `phi`:
    /// `Var H = N p (1-p) (1 + (N-1)/(1+phi))`.
    BetaBinomial,
    /// `H/N ~ N(beta0 + S(x), noise_variance)` on the prevalence scale.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LgmSpec {
    pub lattice_cell: f64,
    pub margin: f64,
    pub alpha: u32,
    pub response: LgmResponse,
    /// Defaults to `[2 / margin, 1e3]`.
    pub kappa_bounds: Option<(f64, f64)>,
    pub field_variance_bounds: (f64, f64),
    pub phi_bounds: (f64, f64),
    pub noise_variance_bounds: (f64, f64),
}

impl Default for LgmSpec {
    fn default() -> Self {
        LgmSpec {
            lattice_cell: 0.5,
            margin: 2.0,
            alpha: 2,
            response: LgmResponse::Binomial,
            kappa_bounds: None,
            field_variance_bounds: (1e-6, 1e4),
            phi_bounds: (1e-2, 1e4),
            noise_variance_bounds: (1e-8, 1.0),
        }
    }
}

impl LgmSpec {
    pub fn kappa_range(&self) -> (f64, f64) {
        self.kappa_bounds.unwrap_or((2.0 / self.margin, 1e3))
    }

    pub fn validate(&self) -> Result<()> {
        if self.alpha != 2 {
            return Err(Error::invalid("only alpha = 2 is supported"));
        }
        if !(self.lattice_cell > 0.0) || !(self.margin > 0.0) {
            return Err(Error::invalid("lattice_cell and margin must be positive"));
        }
        let (lo, hi) = self.kappa_range();
        if !(lo > 0.0 && lo < hi) {
            return Err(Error::invalid("kappa bounds must satisfy 0 < min < max"));
        }
        if self.margin < 2.0 / lo - 1e-12 {
            return Err(Error::invalid(format!("margin {} is below 2 / kappa_min = {}", self.margin, 2.0 / lo)));
        }
        for (name, (a, b)) in [
            ("field_variance_bounds", self.field_variance_bounds),
            ("phi_bounds", self.phi_bounds),
            ("noise_variance_bounds", self.noise_variance_bounds),
        ] {
            if !(a > 0.0 && a < b && b.is_finite()) {
                return Err(Error::invalid(format!("{name} must satisfy 0 < min < max")));
            }
        }
        Ok(())
    }
}

/// Regular node lattice, nodes stored row by row with longitude fastest.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lattice {
    pub origin: Location,
    pub cell: f64,
    pub nx: usize,
    pub ny: usize,
}

impl Lattice {
    /// Smallest lattice with spacing `cell` anchored at `bbox.min` covering `bbox`.
    pub fn covering(bbox: BoundingBox, cell: f64) -> Result<Self> {
        if !(cell > 0.0) {
            return Err(Error::invalid("lattice cell must be positive"));
        }
        let n = |len: f64| ((len / cell - 1e-9).ceil().max(0.0) as usize + 1).max(3);
        Ok(Lattice {
            origin: bbox.min,
            cell,
            nx: n(bbox.width()),
            ny: n(bbox.height()),
        })
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn node(&self, idx: usize) -> Location {
        Location {
            lon: self.origin.lon + (idx % self.nx) as f64 * self.cell,
            lat: self.origin.lat + (idx / self.nx) as f64 * self.cell,
        }
    }

    pub fn hull(&self) -> BoundingBox {
        BoundingBox::new(self.origin, self.node(self.len() - 1))
    }

    /// Eigenvalues of the 5-point graph Laplacian `G` (free boundary).
    pub fn laplacian_eigenvalues(&self) -> Vec<f64> {
        let path = |n: usize| -> Vec<f64> {
            (0..n)
                .map(|k| 2.0 - 2.0 * (std::f64::consts::PI * k as f64 / n as f64).cos())
                .collect()
        };
        let (ex, ey) = (path(self.nx), path(self.ny));
        ey.iter().flat_map(|a| ex.iter().map(move |b| a + b)).collect()
    }

    fn neighbours(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let (i, j) = (idx % self.nx, idx / self.nx);
        [
            (i > 0).then(|| idx - 1),
            (i + 1 < self.nx).then(|| idx + 1),
            (j > 0).then(|| idx - self.nx),
            (j + 1 < self.ny).then(|| idx + self.nx),
        ]
        .into_iter()
        .flatten()
    }
}

/// `Q = tau (kappa^2 C + G) C^{-1} (kappa^2 C + G)` with `C = h^2 I`.
pub fn build_precision(lat: &Lattice, kappa: f64, tau: f64) -> Result<CsrMatrix> {
    if !(kappa > 0.0) || !(tau > 0.0) || !kappa.is_finite() || !tau.is_finite() {
        return Err(Error::invalid("kappa and tau must be positive and finite"));
    }
    if lat.nx < 3 || lat.ny < 3 {
        return Err(Error::invalid("lattice must be at least 3 x 3"));
    }
    let h2 = lat.cell * lat.cell;
    let n = lat.len();
    let mut trip = Vec::with_capacity(n * 5);
    for i in 0..n {
        let mut deg = 0.0;
        for j in lat.neighbours(i) {
            trip.push((i, j, -1.0));
            deg += 1.0;
        }
        trip.push((i, i, kappa * kappa * h2 + deg));
    }
    let k = CsrMatrix::from_triplets(n, n, trip);
    Ok(k.matmul(&k).scale(tau / h2))
}

/// Bilinear interpolation weights from lattice nodes to `pts`.
pub fn interp_matrix(lat: &Lattice, pts: &[Location]) -> Result<CsrMatrix> {
    let mut trip = Vec::with_capacity(4 * pts.len());
    let tol = 1e-9 * lat.cell;
    let span = |n: usize| (n - 1) as f64;
    for (r, p) in pts.iter().enumerate() {
        let fx = (p.lon - lat.origin.lon) / lat.cell;
        let fy = (p.lat - lat.origin.lat) / lat.cell;
        if !(fx >= -tol && fy >= -tol && fx <= span(lat.nx) + tol && fy <= span(lat.ny) + tol) {
            return Err(Error::OutOfBounds {
                lon: p.lon,
                lat: p.lat,
                what: "lattice",
            });
        }
        let fx = fx.clamp(0.0, span(lat.nx));
        let fy = fy.clamp(0.0, span(lat.ny));
        let i = (fx.floor() as usize).min(lat.nx - 2);
        let j = (fy.floor() as usize).min(lat.ny - 2);
        let (tx, ty) = (fx - i as f64, fy - j as f64);
        let base = j * lat.nx + i;
        for (idx, w) in [
            (base, (1.0 - tx) * (1.0 - ty)),
            (base + 1, tx * (1.0 - ty)),
            (base + lat.nx, (1.0 - tx) * ty),
            (base + lat.nx + 1, tx * ty),
        ] {
            if w > 0.0 {
                trip.push((r, idx, w));
            }
        }
    }
    Ok(CsrMatrix::from_triplets(pts.len(), lat.len(), trip))
}
