//! Fit/predict timing sweeps over simulated datasets.

use std::time::Instant;

use prevmap::exec::{derive_seed, set_threads, threads};
use prevmap::geodata::{Location, Raster};
use prevmap::model::{FittedModel, ModelConfig};
use prevmap::simkit::{simulate, SimConfig, SiteSpec, TestsPerSite};
use serde::{Deserialize, Serialize};

use crate::rss::RssSampler;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status", content = "detail")]
pub enum RunStatus {
    Ok,
    Skipped(String),
    Failed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchRun {
    pub model: String,
    pub n_records: usize,
    #[serde(flatten)]
    pub status: RunStatus,
    pub wall_time_s: Option<f64>,
    pub peak_rss_bytes: Option<u64>,
    pub fit_time_s: Option<f64>,
    pub predict_time_s: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct BenchReport {
    pub runs: Vec<BenchRun>,
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub tests_per_site: u32,
    pub gp_exact_cap: Option<usize>,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions {
            tests_per_site: 85,
            gp_exact_cap: None,
        }
    }
}

impl BenchReport {
    /// Successful runs of `model`, in size order.
    pub fn runs_of<'a>(&'a self, model: &'a str) -> impl Iterator<Item = &'a BenchRun> + 'a {
        self.runs.iter().filter(move |r| r.model == model && r.status == RunStatus::Ok)
    }

    /// Least-squares slope of `ln fit_time` against `ln n` for `model`.
    pub fn fit_time_slope(&self, model: &str) -> Option<f64> {
        let pts: Vec<(f64, f64)> = self
            .runs_of(model)
            .filter_map(|r| Some(((r.n_records as f64).ln(), r.fit_time_s?.max(1e-9).ln())))
            .collect();
        log_log_slope(&pts)
    }

    /// Copy with the timing and memory fields cleared.
    pub fn without_timings(&self) -> BenchReport {
        BenchReport {
            runs: self
                .runs
                .iter()
                .map(|r| BenchRun {
                    wall_time_s: None,
                    peak_rss_bytes: None,
                    fit_time_s: None,
                    predict_time_s: None,
                    ..r.clone()
                })
                .collect(),
        }
    }
}

fn log_log_slope(pts: &[(f64, f64)]) -> Option<f64> {
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    (sxx > 0.0).then(|| sxy / sxx)
}

/// For each size, simulates one uniform dataset from `raster` and times every
/// model fitting it and predicting the valid raster cells, on one thread.
/// Failures are recorded per run and the sweep continues.
pub fn bench_scaling(
    models: &[ModelConfig],
    sizes: &[usize],
    raster: &Raster,
    seed: u64,
    opts: &BenchOptions,
) -> prevmap::Result<BenchReport> {
    if sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(prevmap::Error::invalid("bench sizes must be strictly ascending"));
    }
    let grid: Vec<Location> = raster
        .cell_centres()
        .into_iter()
        .zip(raster.mask())
        .filter(|(_, &m)| m)
        .map(|(l, _)| l)
        .collect();
    let domain = raster.bbox();
    let saved = threads();
    set_threads(1);
    let mut runs = Vec::new();
    for &n in sizes {
        let data = simulate(&SimConfig {
            raster: raster.clone(),
            locations: SiteSpec::Uniform(n),
            tests_per_site: TestsPerSite::Constant(opts.tests_per_site),
            noise_sd: 0.0,
            seed: derive_seed(seed, n as u64),
        });
        for m in models {
            let name = m.name().to_string();
            let mut run = BenchRun {
                model: name.clone(),
                n_records: n,
                status: RunStatus::Ok,
                wall_time_s: None,
                peak_rss_bytes: None,
                fit_time_s: None,
                predict_time_s: None,
            };
            let records = match &data {
                Ok(d) => &d.records,
                Err(e) => {
                    run.status = RunStatus::Failed(format!("simulate: {e}"));
                    runs.push(run);
                    continue;
                }
            };
            if name == "gp-exact" && opts.gp_exact_cap.is_some_and(|cap| n > cap) {
                run.status = RunStatus::Skipped(format!("above gp_exact_cap {}", opts.gp_exact_cap.unwrap_or(0)));
                runs.push(run);
                continue;
            }
            let sampler = RssSampler::start();
            let wall = Instant::now();
            let t = Instant::now();
            let fitted = m.fit(records, domain);
            run.fit_time_s = Some(t.elapsed().as_secs_f64());
            match fitted {
                Ok(f) => {
                    let t = Instant::now();
                    let pred = f.predict(&grid);
                    run.predict_time_s = Some(t.elapsed().as_secs_f64());
                    if let Err(e) = pred {
                        run.status = RunStatus::Failed(format!("predict: {e}"));
                    }
                }
                Err(e) => run.status = RunStatus::Failed(format!("fit: {e}")),
            }
            run.wall_time_s = Some(wall.elapsed().as_secs_f64());
            run.peak_rss_bytes = sampler.stop();
            runs.push(run);
        }
    }
    set_threads(saved);
    Ok(BenchReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = [500.0f64, 1000.0, 2000.0]
            .iter()
            .map(|n| (n.ln(), (3e-9 * n.powi(3)).ln()))
            .collect();
        assert!((log_log_slope(&pts).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(log_log_slope(&pts[..1]), None);
    }
}
