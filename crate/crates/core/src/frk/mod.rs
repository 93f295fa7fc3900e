//! Fixed-rank kriging: `logit p(x) = beta0 + phi(x)' eta + xi(x)` with
//! multi-resolution Gaussian basis functions `phi`, coefficient precision `K`
//! and an uncorrelated fine-scale effect `xi` on basic areal units (BAUs).

mod fit;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{build_grid, BoundingBox, Location, Raster};

pub use fit::{fit, fit_with_basis, laplace_log_marginal, FrkFit, FrkModel, FrkParams, FrkPrediction};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrkResponse {
    Binomial,
    /// `H/N ~ N(zeta, noise_variance)`; used to check the Laplace step.
    Gaussian { noise_variance: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FrkSpec {
    pub nres: usize,
    pub regular: usize,
    pub scale_aperture: f64,
    pub bau_cell_size: f64,
    pub n_mc: usize,
    /// Include the fine-scale effect `xi`.
    pub fine_scale: bool,
    pub response: FrkResponse,
    pub seed: u64,
}

impl Default for FrkSpec {
    fn default() -> Self {
        FrkSpec {
            nres: 2,
            regular: 1,
            scale_aperture: 1.25,
            bau_cell_size: 0.1,
            n_mc: 400,
            fine_scale: true,
            response: FrkResponse::Binomial,
            seed: 0,
        }
    }
}

impl FrkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.nres == 0 || self.regular == 0 || !(self.scale_aperture > 0.0) {
            return Err(Error::invalid("nres, regular and scale_aperture must be positive"));
        }
        if self.n_mc == 0 || !(self.bau_cell_size > 0.0) {
            return Err(Error::invalid("n_mc and bau_cell_size must be positive"));
        }
        if let FrkResponse::Gaussian { noise_variance } = self.response {
            if !(noise_variance > 0.0) {
                return Err(Error::invalid("gaussian noise_variance must be positive"));
            }
        }
        Ok(())
    }
}

/// Gaussian basis functions grouped by resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSet {
    pub centres: Vec<Location>,
    pub apertures: Vec<f64>,
    /// Resolution index (0-based) per function.
    pub resolution: Vec<usize>,
    /// Lattice shape `(n_lon, n_lat)` per resolution; functions of one
    /// resolution are stored row by row (lon fastest).
    pub grids: Vec<(usize, usize)>,
}

impl BasisSet {
    /// A basis from explicit single-resolution lattice pieces.
    pub fn from_grid(centres: Vec<Location>, aperture: f64, n_lon: usize, n_lat: usize) -> Result<Self> {
        if centres.len() != n_lon * n_lat || centres.is_empty() || !(aperture > 0.0) {
            return Err(Error::invalid("basis lattice shape and aperture must be consistent and positive"));
        }
        Ok(BasisSet {
            apertures: vec![aperture; centres.len()],
            resolution: vec![0; centres.len()],
            centres,
            grids: vec![(n_lon, n_lat)],
        })
    }

    pub fn len(&self) -> usize {
        self.centres.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centres.is_empty()
    }

    pub fn nres(&self) -> usize {
        self.grids.len()
    }

    /// Index range of the functions of resolution `k`.
    pub fn range_of(&self, k: usize) -> std::ops::Range<usize> {
        let start: usize = self.grids[..k].iter().map(|(a, b)| a * b).sum();
        start..start + self.grids[k].0 * self.grids[k].1
    }

    /// `phi_l(x) = exp(-|x - c_l|^2 / (2 a_l^2))` for every function.
    pub fn eval_at(&self, p: Location) -> Vec<f64> {
        self.centres
            .iter()
            .zip(&self.apertures)
            .map(|(c, a)| {
                let d2 = (p.lon - c.lon).powi(2) + (p.lat - c.lat).powi(2);
                (-d2 / (2.0 * a * a)).exp()
            })
            .collect()
    }
}

/// Places `nres` lattices of Gaussian basis functions over `bbox`.
///
/// Resolution `k` (1-based) puts `regular * 3 * 2^(k-1)` centres along the
/// shorter side of the box expanded by one aperture, and a proportional
/// number along the longer side; the aperture is `scale_aperture` times the
/// centre spacing.
pub fn place_basis(bbox: BoundingBox, nres: usize, regular: usize, scale_aperture: f64) -> Result<BasisSet> {
    if bbox.is_degenerate() {
        return Err(Error::invalid("basis placement needs a non-degenerate bounding box"));
    }
    if nres == 0 || regular == 0 || !(scale_aperture > 0.0) {
        return Err(Error::invalid("nres, regular and scale_aperture must be positive"));
    }
    let (w, h) = (bbox.width(), bbox.height());
    let short = w.min(h);
    let mut out = BasisSet {
        centres: Vec::new(),
        apertures: Vec::new(),
        resolution: Vec::new(),
        grids: Vec::new(),
    };
    for k in 0..nres {
        let c = regular * 3 * (1 << k);
        let margin = scale_aperture * short / c as f64;
        let (ew, eh) = (w + 2.0 * margin, h + 2.0 * margin);
        let spacing = (short + 2.0 * margin) / c as f64;
        let count = |len: f64| ((len / spacing).round() as usize).max(1);
        let (nx, ny) = if w <= h { (c, count(eh)) } else { (count(ew), c) };
        let x0 = bbox.min.lon + 0.5 * w - 0.5 * (nx - 1) as f64 * spacing;
        let y0 = bbox.min.lat + 0.5 * h - 0.5 * (ny - 1) as f64 * spacing;
        for j in 0..ny {
            for i in 0..nx {
                out.centres.push(Location {
                    lon: x0 + i as f64 * spacing,
                    lat: y0 + j as f64 * spacing,
                });
                out.apertures.push(scale_aperture * spacing);
                out.resolution.push(k);
            }
        }
        out.grids.push((nx, ny));
    }
    Ok(out)
}

/// Basis matrix `Phi` (row per point).
pub fn basis_eval(b: &BasisSet, pts: &[Location]) -> Vec<Vec<f64>> {
    pts.iter().map(|p| b.eval_at(*p)).collect()
}

/// Regular BAU partition; cell centroids are the BAU locations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BauGrid {
    grid: Raster,
}

impl BauGrid {
    pub fn new(bbox: BoundingBox, cell: f64) -> Result<Self> {
        let bbox = if bbox.is_degenerate() { bbox.expanded(cell / 2.0) } else { bbox };
        Ok(BauGrid {
            grid: build_grid(bbox, cell)?,
        })
    }

    pub fn len(&self) -> usize {
        self.grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grid.is_empty()
    }

    pub fn raster(&self) -> &Raster {
        &self.grid
    }

    /// BAU index containing `p`.
    pub fn bau_of(&self, p: Location) -> Result<usize> {
        let (r, c) = self.grid.cell_of(p)?;
        Ok(self.grid.index(r, c))
    }

    pub fn centroid(&self, idx: usize) -> Location {
        self.grid.cell_centre(idx / self.grid.n_cols(), idx % self.grid.n_cols())
    }
}
