//! Spatially blocked cross-validation and accuracy / interval metrics.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{par_map, stream_rng};
use crate::geodata::{BoundingBox, Location, SurveyRecord};
use crate::model::{ModelFitter, Prediction};

pub const ERROR_THRESHOLDS: [f64; 3] = [0.05, 0.1, 0.2];
const KMEANS_RESTARTS: u64 = 50;
const KMEANS_MAX_ITER: usize = 300;

/// Fold index per record (0-based; written 1-based) and the fold centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub folds: Vec<usize>,
    pub centroids: Vec<Location>,
}

impl FoldAssignment {
    pub fn k(&self) -> usize {
        self.centroids.len()
    }
}

fn sq_dist(a: Location, b: Location) -> f64 {
    (a.lon - b.lon).powi(2) + (a.lat - b.lat).powi(2)
}

/// Nearest centroid, ties to the lowest index.
fn nearest(p: Location, centroids: &[Location]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, &q) in centroids.iter().enumerate() {
        let d = sq_dist(p, q);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn lloyd(pts: &[Location], k: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<Location>, f64) {
    let n = pts.len();
    // k-means++ seeding
    let mut centroids = vec![pts[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(*p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut cum = 0.0;
            let last = (0..n).rev().find(|&i| d2[i] > 0.0).unwrap_or(0);
            (0..n)
                .find(|&i| {
                    cum += d2[i];
                    d2[i] > 0.0 && cum > target
                })
                .unwrap_or(last)
        } else {
            rng.random_range(0..n)
        };
        let c = pts[next];
        centroids.push(c);
        for (d, p) in d2.iter_mut().zip(pts) {
            *d = d.min(sq_dist(*p, c));
        }
    }

    let mut assign = vec![usize::MAX; n];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (i, p) in pts.iter().enumerate() {
            let c = nearest(*p, &centroids).0;
            if assign[i] != c {
                assign[i] = c;
                changed = true;
            }
        }
        let mut sums = vec![(0.0, 0.0, 0usize); k];
        for (i, p) in pts.iter().enumerate() {
            let s = &mut sums[assign[i]];
            s.0 += p.lon;
            s.1 += p.lat;
            s.2 += 1;
        }
        for c in 0..k {
            if sums[c].2 == 0 {
                // reseed an empty cluster at the point farthest from its centroid
                let far = (0..n)
                    .map(|i| (i, sq_dist(pts[i], centroids[assign[i]])))
                    .fold((0, -1.0), |b, x| if x.1 > b.1 { x } else { b })
                    .0;
                centroids[c] = pts[far];
                assign[far] = c;
                changed = true;
            } else {
                let m = sums[c].2 as f64;
                centroids[c] = Location {
                    lon: sums[c].0 / m,
                    lat: sums[c].1 / m,
                };
            }
        }
        if !changed {
            break;
        }
    }
    for (i, p) in pts.iter().enumerate() {
        assign[i] = nearest(*p, &centroids).0;
    }
    let wcss = pts.iter().zip(&assign).map(|(p, &c)| sq_dist(*p, centroids[c])).sum();
    (assign, centroids, wcss)
}

/// k-means on raw coordinates, best of 50 k-means++ restarts.
pub fn kmeans_folds(pts: &[Location], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    let mut distinct: Vec<(u64, u64)> = pts.iter().map(|p| (p.lon.to_bits(), p.lat.to_bits())).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if k > distinct.len() {
        return Err(Error::invalid(format!(
            "k = {k} exceeds the {} distinct locations",
            distinct.len()
        )));
    }
    let mut best: Option<(Vec<usize>, Vec<Location>, f64)> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = stream_rng(seed, r);
        let run = lloyd(pts, k, &mut rng);
        if best.as_ref().is_none_or(|b| run.2 < b.2) {
            best = Some(run);
        }
    }
    let (folds, centroids, _) = best.expect("at least one restart");
    Ok(FoldAssignment { folds, centroids })
}

/// Held-out predictions aligned with the input records.
#[derive(Debug, Clone)]
pub struct CvOutput {
    pub predictions: Vec<Option<Prediction>>,
    /// Folds whose fit or prediction failed, with the error message.
    pub failed_folds: Vec<(usize, String)>,
}

/// Fits on the complement of each fold and predicts the fold.
pub fn cv_run(records: &[SurveyRecord], model: &dyn ModelFitter, folds: &FoldAssignment) -> Result<CvOutput> {
    if folds.folds.len() != records.len() {
        return Err(Error::invalid("fold assignment does not match the records"));
    }
    let k = folds.k();
    if k < 2 {
        return Err(Error::invalid("cross-validation needs at least 2 folds"));
    }
    let domain = BoundingBox::of_points(records.iter().map(|r| &r.loc))
        .ok_or_else(|| Error::invalid("no records"))?;
    let results = par_map((0..k).collect(), |f| {
        let train: Vec<SurveyRecord> = records
            .iter()
            .zip(&folds.folds)
            .filter(|(_, &g)| g != f)
            .map(|(r, _)| *r)
            .collect();
        let test_idx: Vec<usize> = (0..records.len()).filter(|&i| folds.folds[i] == f).collect();
        let test: Vec<Location> = test_idx.iter().map(|&i| records[i].loc).collect();
        if test.is_empty() {
            return (f, test_idx, Ok(Vec::new()));
        }
        let out = model.fit_model(&train, domain).and_then(|m| m.predict(&test));
        (f, test_idx, out)
    });
    let mut predictions = vec![None; records.len()];
    let mut failed_folds = Vec::new();
    for (f, idx, out) in results {
        match out {
            Ok(p) => {
                for (i, v) in idx.into_iter().zip(p) {
                    predictions[i] = Some(v);
                }
            }
            Err(e) => failed_folds.push((f, e.to_string())),
        }
    }
    Ok(CvOutput {
        predictions,
        failed_folds,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Coverage {
    pub within1: bool,
    /// Outside 1 SD but inside 2 SD.
    pub within2_exclusive: bool,
    /// Inside 2 SD.
    pub within2_cumulative: bool,
}

fn inside(y: f64, yhat: f64, half: f64) -> bool {
    let lo = (yhat - half).max(0.0);
    let hi = (yhat + half).min(1.0);
    lo <= y && y <= hi
}

/// Interval membership with bounds trimmed to [0, 1].
pub fn interval_coverage(y: f64, yhat: f64, sd: f64) -> Coverage {
    let within1 = inside(y, yhat, sd);
    let within2 = inside(y, yhat, 2.0 * sd);
    Coverage {
        within1,
        within2_exclusive: !within1 && within2,
        within2_cumulative: within2,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stratum {
    Low,
    Medium,
    High,
}

impl Stratum {
    pub fn of(density: f64) -> Self {
        if density <= 0.2 {
            Stratum::Low
        } else if density <= 0.4 {
            Stratum::Medium
        } else {
            Stratum::High
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StratumReport {
    pub stratum: Stratum,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub rmse: f64,
    /// `None` when either series has zero variance.
    pub pearson_correlation: Option<f64>,
    /// Fraction of points with `|y - yhat| <` each of [`ERROR_THRESHOLDS`].
    pub prop_abs_error_below: Vec<(f64, f64)>,
    pub pct_within_1sd: f64,
    pub pct_within_2sd_exclusive: f64,
    pub pct_within_2sd_cumulative: f64,
    /// Mean and sd of the predicted standard deviations.
    pub width_mean: f64,
    pub width_sd: f64,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub strata: Vec<StratumReport>,
}

fn compute(y: &[f64], yhat: &[f64], sd: &[f64]) -> MetricsReport {
    let n = y.len();
    let nf = n as f64;
    let mse = y.iter().zip(yhat).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let mh = yhat.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        sxy += (a - my) * (b - mh);
        sxx += (a - my).powi(2);
        syy += (b - mh).powi(2);
    }
    let pearson_correlation = (sxx > 0.0 && syy > 0.0).then(|| sxy / (sxx * syy).sqrt());
    let prop_abs_error_below = ERROR_THRESHOLDS
        .iter()
        .map(|&t| (t, y.iter().zip(yhat).filter(|(a, b)| (*a - *b).abs() < t).count() as f64 / nf))
        .collect();
    let cov: Vec<Coverage> = (0..n).map(|i| interval_coverage(y[i], yhat[i], sd[i])).collect();
    let pct = |f: fn(&Coverage) -> bool| 100.0 * cov.iter().filter(|c| f(c)).count() as f64 / nf;
    let width_mean = sd.iter().sum::<f64>() / nf;
    let width_sd = if n > 1 {
        (sd.iter().map(|s| (s - width_mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt()
    } else {
        0.0
    };
    MetricsReport {
        n,
        rmse: mse.sqrt(),
        pearson_correlation,
        prop_abs_error_below,
        pct_within_1sd: pct(|c| c.within1),
        pct_within_2sd_exclusive: pct(|c| c.within2_exclusive),
        pct_within_2sd_cumulative: pct(|c| c.within2_cumulative),
        width_mean,
        width_sd,
        strata: Vec::new(),
    }
}

pub fn metrics(y: &[f64], yhat: &[f64], sd: &[f64]) -> Result<MetricsReport> {
    if y.len() != yhat.len() || y.len() != sd.len() {
        return Err(Error::invalid("y, yhat and sd must have equal lengths"));
    }
    if y.len() < 2 {
        return Err(Error::invalid("metrics need at least 2 points"));
    }
    if sd.iter().any(|s| !(*s >= 0.0)) {
        return Err(Error::invalid("sd must be non-negative"));
    }
    Ok(compute(y, yhat, sd))
}

/// [`metrics`] plus a breakdown per sampling-density stratum of `pts`.
pub fn metrics_with_strata(y: &[f64], yhat: &[f64], sd: &[f64], pts: &[Location]) -> Result<MetricsReport> {
    let mut report = metrics(y, yhat, sd)?;
    if pts.len() != y.len() {
        return Err(Error::invalid("one location per point is required"));
    }
    let dens = density_strata(pts)?;
    for s in [Stratum::Low, Stratum::Medium, Stratum::High] {
        let idx: Vec<usize> = (0..y.len()).filter(|&i| dens[i].stratum == s).collect();
        if idx.is_empty() {
            continue;
        }
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        report.strata.push(StratumReport {
            stratum: s,
            report: compute(&pick(y), &pick(yhat), &pick(sd)),
        });
    }
    Ok(report)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointDensity {
    pub density: f64,
    pub stratum: Stratum,
}

/// Scott's rule bandwidth `sd_d * n^(-1/6)` per coordinate.
pub fn scott_bandwidth(pts: &[Location]) -> (f64, f64) {
    let n = pts.len() as f64;
    let sd = |v: Vec<f64>| {
        let m = v.iter().sum::<f64>() / n;
        (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let f = n.powf(-1.0 / 6.0);
    let h = |s: f64| if s > 0.0 { s * f } else { 1.0 };
    (
        h(sd(pts.iter().map(|p| p.lon).collect())),
        h(sd(pts.iter().map(|p| p.lat).collect())),
    )
}

/// Product Gaussian KDE of the locations, rescaled so the maximum is 1.
pub fn density_strata(pts: &[Location]) -> Result<Vec<PointDensity>> {
    if pts.len() < 2 {
        return Err(Error::invalid("density needs at least 2 points"));
    }
    let (hx, hy) = scott_bandwidth(pts);
    let raw: Vec<f64> = pts
        .iter()
        .map(|p| {
            pts.iter()
                .map(|q| {
                    let u = (p.lon - q.lon) / hx;
                    let v = (p.lat - q.lat) / hy;
                    (-0.5 * (u * u + v * v)).exp()
                })
                .sum::<f64>()
        })
        .collect();
    let max = raw.iter().cloned().fold(0.0, f64::max);
    Ok(raw
        .into_iter()
        .map(|r| {
            let density = r / max;
            PointDensity {
                density,
                stratum: Stratum::of(density),
            }
        })
        .collect())
}
