//! Synthetic surveys: binomial draws from a prevalence raster, optionally
//! with Gaussian noise added on the logit scale.

use rand::Rng;
use rand_distr::{Binomial, Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::stream_rng;
use crate::geodata::{Location, Raster, SurveyRecord};

/// Logits are clamped here so that p = 0 or 1 stay finite under noise.
pub const LOGIT_CLAMP: f64 = 36.7;

pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln().clamp(-LOGIT_CLAMP, LOGIT_CLAMP)
}

pub fn inv_logit(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteSpec {
    AtPoints(Vec<Location>),
    Uniform(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TestsPerSite {
    Constant(u32),
    PerSite(Vec<u32>),
}

#[derive(Debug, Clone)]
pub struct SimConfig {
    pub raster: Raster,
    pub locations: SiteSpec,
    pub tests_per_site: TestsPerSite,
    pub noise_sd: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimOutput {
    pub records: Vec<SurveyRecord>,
    /// Indices of requested sites dropped because they fell on nodata.
    pub dropped: Vec<usize>,
}

const STREAM_LOCATIONS: u64 = 1 << 40;

/// `count` locations drawn uniformly over the valid cells of `r`.
pub fn sample_uniform_locations(r: &Raster, count: usize, seed: u64) -> Result<Vec<Location>> {
    if count == 0 {
        return Err(Error::invalid("location count must be at least 1"));
    }
    let valid: Vec<usize> = (0..r.len()).filter(|&i| r.mask()[i]).collect();
    if valid.is_empty() {
        return Err(Error::invalid("raster has no valid cells"));
    }
    let mut rng = stream_rng(seed, STREAM_LOCATIONS);
    let cell = r.cell_size();
    let origin = r.origin();
    Ok((0..count)
        .map(|_| {
            let idx = valid[rng.random_range(0..valid.len())];
            let (row, col) = (idx / r.n_cols(), idx % r.n_cols());
            let fx: f64 = rng.random();
            let fy: f64 = rng.random();
            Location {
                lon: origin.lon + (col as f64 + fx) * cell,
                lat: origin.lat + ((r.n_rows() - 1 - row) as f64 + fy) * cell,
            }
        })
        .collect())
}

/// Draws `H ~ Binomial(N, p)` per site with per-site RNG streams.
pub fn simulate(cfg: &SimConfig) -> Result<SimOutput> {
    if !(cfg.noise_sd >= 0.0) || !cfg.noise_sd.is_finite() {
        return Err(Error::invalid("noise_sd must be finite and non-negative"));
    }
    let sites = match &cfg.locations {
        SiteSpec::AtPoints(p) => p.clone(),
        SiteSpec::Uniform(n) => sample_uniform_locations(&cfg.raster, *n, cfg.seed)?,
    };
    if let TestsPerSite::PerSite(v) = &cfg.tests_per_site {
        if v.len() != sites.len() {
            return Err(Error::invalid(format!("{} test counts for {} sites", v.len(), sites.len())));
        }
    }
    let noise = Normal::new(0.0, cfg.noise_sd).map_err(|e| Error::invalid(e.to_string()))?;
    let mut records = Vec::with_capacity(sites.len());
    let mut dropped = Vec::new();
    for (i, loc) in sites.iter().enumerate() {
        let n = match &cfg.tests_per_site {
            TestsPerSite::Constant(n) => *n,
            TestsPerSite::PerSite(v) => v[i],
        };
        if n == 0 {
            return Err(Error::Validation {
                row: i + 1,
                message: "tests per site must be at least 1".into(),
            });
        }
        let Some(p) = cfg.raster.sample(*loc)? else {
            dropped.push(i);
            continue;
        };
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Validation {
                row: i + 1,
                message: format!("raster prevalence {p} outside [0, 1]"),
            });
        }
        let mut rng = stream_rng(cfg.seed, i as u64);
        let p = if cfg.noise_sd > 0.0 {
            inv_logit(logit(p) + noise.sample(&mut rng))
        } else {
            p
        };
        let h = Binomial::new(u64::from(n), p)
            .map_err(|e| Error::Numerical(e.to_string()))?
            .sample(&mut rng) as u32;
        records.push(SurveyRecord {
            loc: *loc,
            examined: n,
            positive: h,
        });
    }
    Ok(SimOutput { records, dropped })
}
