//! Subcommand implementations.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use prevmap::evalkit::{cv_run, interval_coverage, kmeans_folds, metrics_with_strata, MetricsReport};
use prevmap::exec::{parallel_dispatches, set_threads};
use prevmap::geodata::{parse_survey_csv, write_survey_csv, BoundingBox, Location, Raster, SurveyRecord};
use prevmap::model::{FittedAny, FittedModel, ModelConfig};
use prevmap::simkit::{simulate, SimConfig, SiteSpec, TestsPerSite};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bench::{bench_scaling, BenchOptions};
use crate::config::{Command, ResolvedRun};

pub const MODEL_FILE: &str = "model.json";

/// What `fit` writes: the config it ran with and the fitted state.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SavedModel {
    pub config: ModelConfig,
    pub domain: BoundingBox,
    pub fitted: FittedAny,
}

#[derive(Debug, Serialize)]
struct Provenance<'a> {
    command: &'a str,
    config_sha256: String,
    seed: u64,
    threads: usize,
    version: &'a str,
    parallel_dispatches: u64,
}

#[derive(Debug, Serialize)]
struct SimulateSidecar<'a> {
    seed: u64,
    raster: String,
    noise_sd: f64,
    tests_per_site: u32,
    n_records: usize,
    dropped_sites: &'a [usize],
}

#[derive(Debug, Serialize)]
struct FailedFold {
    fold: usize,
    error: String,
}

#[derive(Debug, Serialize)]
struct CvMetrics {
    model: String,
    k: usize,
    n_records: usize,
    n_predicted: usize,
    report: Option<MetricsReport>,
    failed_folds: Vec<FailedFold>,
}

#[derive(Debug, Serialize)]
struct CvRow {
    record_id: usize,
    fold: usize,
    y: f64,
    yhat: Option<f64>,
    sd: Option<f64>,
    within1: Option<bool>,
    within2: Option<bool>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn read_records(path: &Path) -> Result<Vec<SurveyRecord>> {
    parse_survey_csv(path).with_context(|| format!("reading {}", path.display()))
}

fn read_raster(path: &Path) -> Result<Raster> {
    Raster::read_ascii(path).with_context(|| format!("reading {}", path.display()))
}

/// Runs one subcommand and appends its provenance line. `config_bytes` is
/// the config file as read, for hashing.
pub fn run(cfg: &ResolvedRun, config_bytes: &[u8]) -> Result<()> {
    set_threads(cfg.threads);
    if cfg.threads > 1 {
        // the global pool can only be configured once per process
        let _ = rayon::ThreadPoolBuilder::new().num_threads(cfg.threads).build_global();
    }
    fs::create_dir_all(&cfg.out).with_context(|| format!("creating {}", cfg.out.display()))?;
    match cfg.command {
        Command::Fit => fit(cfg)?,
        Command::Predict => predict(cfg)?,
        Command::Simulate => simulate_cmd(cfg)?,
        Command::Cv => cv(cfg)?,
        Command::Bench => bench(cfg)?,
    }
    let line = Provenance {
        command: cfg.command.name(),
        config_sha256: hex::encode(Sha256::digest(config_bytes)),
        seed: cfg.seed,
        threads: cfg.threads,
        version: env!("CARGO_PKG_VERSION"),
        parallel_dispatches: parallel_dispatches(),
    };
    let path = cfg.out.join("provenance.jsonl");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .with_context(|| format!("opening {}", path.display()))?;
    writeln!(f, "{}", serde_json::to_string(&line)?)?;
    Ok(())
}

fn fit(cfg: &ResolvedRun) -> Result<()> {
    let model = cfg.model.clone().context("no model configured")?;
    let records = read_records(cfg.records.as_deref().context("no records")?)?;
    let mut domain = BoundingBox::of_points(records.iter().map(|r| &r.loc)).context("no records to fit")?;
    if let Some(g) = &cfg.grid {
        domain = domain.union(&g.build().context("building grid")?.bbox());
    }
    let fitted = model.fit(&records, domain).with_context(|| format!("fit {}", model.name()))?;
    write_json(
        &cfg.out.join(MODEL_FILE),
        &SavedModel {
            config: model,
            domain,
            fitted,
        },
    )
}

fn same_family(a: &ModelConfig, b: &ModelConfig) -> bool {
    std::mem::discriminant(a) == std::mem::discriminant(b)
}

fn predict(cfg: &ResolvedRun) -> Result<()> {
    let path = cfg.model_file.as_deref().context("no model file")?;
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let saved: SavedModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
    if let Some(m) = &cfg.model {
        if !same_family(m, &saved.config) {
            bail!("model block is {} but {} holds {}", m.name(), path.display(), saved.config.name());
        }
    }
    let template = cfg.grid.as_ref().context("no grid")?.build().context("building grid")?;
    let cells: Vec<usize> = (0..template.len()).filter(|&i| template.mask()[i]).collect();
    let centres = template.cell_centres();
    let pts: Vec<Location> = cells.iter().map(|&i| centres[i]).collect();
    let pred = saved
        .fitted
        .predict(&pts)
        .with_context(|| format!("predict {}", saved.config.name()))?;
    let mut mean = vec![0.0; template.len()];
    let mut sd = vec![0.0; template.len()];
    for (&i, p) in cells.iter().zip(&pred) {
        mean[i] = p.estimate;
        sd[i] = p.sd;
    }
    template.with_values(mean)?.write_ascii(cfg.out.join("mean.asc"))?;
    template.with_values(sd)?.write_ascii(cfg.out.join("sd.asc"))?;
    Ok(())
}

fn simulate_cmd(cfg: &ResolvedRun) -> Result<()> {
    let raster_path = cfg.raster.as_deref().context("no raster")?;
    let raster = read_raster(raster_path)?;
    let s = &cfg.simulate;
    let (locations, tests_per_site) = match &cfg.records {
        Some(p) => {
            let recs = read_records(p)?;
            (
                SiteSpec::AtPoints(recs.iter().map(|r| r.loc).collect()),
                TestsPerSite::PerSite(recs.iter().map(|r| r.examined).collect()),
            )
        }
        None => (SiteSpec::Uniform(s.sites), TestsPerSite::Constant(s.tests_per_site)),
    };
    let out = simulate(&SimConfig {
        raster,
        locations,
        tests_per_site,
        noise_sd: s.noise_sd,
        seed: cfg.seed,
    })
    .context("simulate")?;
    let f = File::create(cfg.out.join("survey.csv"))?;
    write_survey_csv(&out.records, BufWriter::new(f))?;
    write_json(
        &cfg.out.join("survey.json"),
        &SimulateSidecar {
            seed: cfg.seed,
            raster: raster_path.display().to_string(),
            noise_sd: s.noise_sd,
            tests_per_site: s.tests_per_site,
            n_records: out.records.len(),
            dropped_sites: &out.dropped,
        },
    )
}

fn cv(cfg: &ResolvedRun) -> Result<()> {
    let model = cfg.model.clone().context("no model configured")?;
    let records = read_records(cfg.records.as_deref().context("no records")?)?;
    let pts: Vec<Location> = records.iter().map(|r| r.loc).collect();
    let folds = kmeans_folds(&pts, cfg.cv.k, cfg.seed).context("fold assignment")?;
    let out = cv_run(&records, &model, &folds).with_context(|| format!("cv {}", model.name()))?;

    let mut w = csv::Writer::from_path(cfg.out.join("records.csv"))?;
    let (mut y, mut yhat, mut sd, mut at) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (i, (r, p)) in records.iter().zip(&out.predictions).enumerate() {
        let obs = r.prevalence();
        let cov = p.map(|p| interval_coverage(obs, p.estimate, p.sd));
        w.serialize(CvRow {
            record_id: i,
            fold: folds.folds[i],
            y: obs,
            yhat: p.map(|p| p.estimate),
            sd: p.map(|p| p.sd),
            within1: cov.map(|c| c.within1),
            within2: cov.map(|c| c.within2_cumulative),
        })?;
        if let Some(p) = p {
            y.push(obs);
            yhat.push(p.estimate);
            sd.push(p.sd);
            at.push(r.loc);
        }
    }
    w.flush()?;
    let report = if y.is_empty() {
        None
    } else {
        Some(metrics_with_strata(&y, &yhat, &sd, &at).context("metrics")?)
    };
    write_json(
        &cfg.out.join("metrics.json"),
        &CvMetrics {
            model: model.name().into(),
            k: cfg.cv.k,
            n_records: records.len(),
            n_predicted: y.len(),
            report,
            failed_folds: out
                .failed_folds
                .into_iter()
                .map(|(fold, error)| FailedFold { fold, error })
                .collect(),
        },
    )
}

fn bench(cfg: &ResolvedRun) -> Result<()> {
    let raster = read_raster(cfg.raster.as_deref().context("no raster")?)?;
    let b = &cfg.bench;
    let report = bench_scaling(
        &b.models,
        &b.sizes,
        &raster,
        cfg.seed,
        &BenchOptions {
            tests_per_site: b.tests_per_site,
            gp_exact_cap: b.gp_exact_cap,
        },
    )?;
    write_json(&cfg.out.join("bench.json"), &report)
}
