//! Run configuration: one JSON file per run.

use std::fmt;
use std::path::{Path, PathBuf};

use prevmap::frk::FrkSpec;
use prevmap::geodata::{build_grid, BoundingBox, Location, Raster};
use prevmap::gpcore::GpModelSpec;
use prevmap::lgm::LgmSpec;
use prevmap::model::ModelConfig;
use prevmap::sprf::SprfSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Command {
    Fit,
    Predict,
    Simulate,
    Cv,
    Bench,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Fit => "fit",
            Command::Predict => "predict",
            Command::Simulate => "simulate",
            Command::Cv => "cv",
            Command::Bench => "bench",
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputPaths {
    /// Survey CSV (`lon,lat,examined,positive`).
    pub records: Option<PathBuf>,
    /// Model file written by `fit`.
    pub model: Option<PathBuf>,
    /// ESRI ASCII prevalence surface for `simulate` and `bench`.
    pub raster: Option<PathBuf>,
}

/// Prediction grid: a template raster, or a bounding box and cell size.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub raster: Option<PathBuf>,
    /// `[min_lon, min_lat, max_lon, max_lat]`
    pub bbox: Option<[f64; 4]>,
    pub cell_size: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateSpec {
    /// Number of uniformly placed sites; ignored when `input.records` is set,
    /// in which case its locations and sample sizes are reused.
    pub sites: usize,
    pub tests_per_site: u32,
    pub noise_sd: f64,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        SimulateSpec {
            sites: 500,
            tests_per_site: 85,
            noise_sd: 0.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvSpec {
    pub k: usize,
}

impl Default for CvSpec {
    fn default() -> Self {
        CvSpec { k: 10 }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSpec {
    pub models: Vec<ModelConfig>,
    pub sizes: Vec<usize>,
    pub tests_per_site: u32,
    /// Exact GP runs above this many records are skipped.
    pub gp_exact_cap: Option<usize>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        BenchSpec {
            models: Vec::new(),
            sizes: Vec::new(),
            tests_per_site: 85,
            gp_exact_cap: None,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// `gp`, `sprf`, `frk`, `lgm` or `constant`; may be omitted when exactly
    /// one model block is present.
    pub model: Option<String>,
    pub gp: Option<GpModelSpec>,
    pub sprf: Option<SprfSpec>,
    pub frk: Option<FrkSpec>,
    pub lgm: Option<LgmSpec>,
    #[serde(default)]
    pub input: InputPaths,
    pub out: Option<PathBuf>,
    pub grid: Option<GridSpec>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub simulate: Option<SimulateSpec>,
    pub cv: Option<CvSpec>,
    pub bench: Option<BenchSpec>,
}

/// Every problem found in a config, each naming its field.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigErrors(pub Vec<String>);

impl fmt::Display for ConfigErrors {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "invalid config:")?;
        for e in &self.0 {
            writeln!(f, "  {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ConfigErrors {}

/// Config after validation, with paths resolved and overrides applied.
#[derive(Debug, Clone)]
pub struct ResolvedRun {
    pub command: Command,
    pub model: Option<ModelConfig>,
    pub records: Option<PathBuf>,
    pub model_file: Option<PathBuf>,
    pub raster: Option<PathBuf>,
    pub grid: Option<GridSpec>,
    pub out: PathBuf,
    pub seed: u64,
    pub threads: usize,
    pub simulate: SimulateSpec,
    pub cv: CvSpec,
    pub bench: BenchSpec,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<RunConfig, ConfigErrors> {
        serde_json::from_str(text).map_err(|e| ConfigErrors(vec![format!("config: {e}")]))
    }

    fn blocks(&self) -> Vec<&'static str> {
        let mut b = Vec::new();
        if self.gp.is_some() {
            b.push("gp");
        }
        if self.sprf.is_some() {
            b.push("sprf");
        }
        if self.frk.is_some() {
            b.push("frk");
        }
        if self.lgm.is_some() {
            b.push("lgm");
        }
        b
    }

    fn model_config(&self, errs: &mut Vec<String>, required: bool) -> Option<ModelConfig> {
        let blocks = self.blocks();
        match self.model.as_deref() {
            Some("constant") => {
                if !blocks.is_empty() {
                    errs.push(format!("{}: not allowed with model \"constant\"", blocks.join(", ")));
                }
                return Some(ModelConfig::ConstantMean);
            }
            Some(name) if !["gp", "sprf", "frk", "lgm"].contains(&name) => {
                errs.push(format!("model: unknown model \"{name}\" (expected gp, sprf, frk, lgm or constant)"));
                return None;
            }
            _ => {}
        }
        if blocks.len() > 1 {
            errs.push(format!("model: exactly one model block allowed, found {}", blocks.join(", ")));
            return None;
        }
        let name = match (self.model.as_deref(), blocks.first()) {
            (Some(m), Some(b)) if m != *b => {
                errs.push(format!("{b}: block does not match model \"{m}\""));
                return None;
            }
            (Some(m), _) => m,
            (None, Some(b)) => b,
            (None, None) => {
                if required {
                    errs.push("model: a model block (gp, sprf, frk or lgm) is required".into());
                }
                return None;
            }
        };
        let cfg = match name {
            "gp" => ModelConfig::Gp(self.gp.clone().unwrap_or_default()),
            "sprf" => ModelConfig::Sprf(self.sprf.clone().unwrap_or_default()),
            "frk" => ModelConfig::Frk(self.frk.clone().unwrap_or_default()),
            _ => ModelConfig::Lgm(self.lgm.clone().unwrap_or_default()),
        };
        if let Err(e) = validate_model(&cfg) {
            errs.push(format!("{name}: {e}"));
        }
        Some(cfg)
    }

    /// Validates for `command`, reporting all problems at once. Relative paths
    /// are taken relative to `base`.
    pub fn resolve(&self, command: Command, base: &Path, ov: &Overrides) -> Result<ResolvedRun, ConfigErrors> {
        let mut errs = Vec::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| if p.is_absolute() { p.clone() } else { base.join(p) });
        let records = path(&self.input.records);
        let model_file = path(&self.input.model);
        let raster = path(&self.input.raster);
        let grid = self.grid.clone().map(|g| GridSpec {
            raster: path(&g.raster),
            ..g
        });

        let need = |errs: &mut Vec<String>, field: &str, p: &Option<PathBuf>| match p {
            None => errs.push(format!("{field}: required for {}", command.name())),
            Some(p) if !p.exists() => errs.push(format!("{field}: {} does not exist", p.display())),
            _ => {}
        };
        let check = |errs: &mut Vec<String>, field: &str, p: &Option<PathBuf>| {
            if let Some(p) = p {
                if !p.exists() {
                    errs.push(format!("{field}: {} does not exist", p.display()));
                }
            }
        };

        let model = match command {
            Command::Fit | Command::Cv => self.model_config(&mut errs, true),
            Command::Predict => self.model_config(&mut errs, false),
            _ => None,
        };
        match command {
            Command::Fit | Command::Cv => need(&mut errs, "input.records", &records),
            Command::Predict => need(&mut errs, "input.model", &model_file),
            Command::Simulate | Command::Bench => {
                need(&mut errs, "input.raster", &raster);
                check(&mut errs, "input.records", &records);
            }
        }
        if command == Command::Predict && grid.is_none() {
            errs.push("grid: required for predict".into());
        }
        if let Some(g) = &grid {
            check(&mut errs, "grid.raster", &g.raster);
            match (&g.raster, g.bbox, g.cell_size) {
                (Some(_), None, None) => {}
                (Some(_), _, _) => errs.push("grid: give either raster or bbox with cell_size, not both".into()),
                (None, Some(b), Some(c)) => {
                    if !(b.iter().all(|v| v.is_finite()) && b[0] < b[2] && b[1] < b[3]) {
                        errs.push("grid.bbox: expected [min_lon, min_lat, max_lon, max_lat] with min < max".into());
                    }
                    if !(c > 0.0 && c.is_finite()) {
                        errs.push("grid.cell_size: must be positive".into());
                    }
                }
                (None, None, _) => errs.push("grid.bbox: required when grid.raster is absent".into()),
                (None, Some(_), None) => errs.push("grid.cell_size: required with grid.bbox".into()),
            }
        }

        let threads = ov.threads.or(self.threads).unwrap_or(1);
        if threads == 0 {
            errs.push("threads: must be a positive integer".into());
        }
        let out = ov.out.clone().or_else(|| path(&self.out));
        if out.is_none() {
            errs.push("out: required (config field or --out)".into());
        }

        let simulate = self.simulate.clone().unwrap_or_default();
        if command == Command::Simulate {
            if records.is_none() && simulate.sites == 0 {
                errs.push("simulate.sites: must be positive".into());
            }
            if simulate.tests_per_site == 0 {
                errs.push("simulate.tests_per_site: must be positive".into());
            }
            if !(simulate.noise_sd >= 0.0 && simulate.noise_sd.is_finite()) {
                errs.push("simulate.noise_sd: must be non-negative".into());
            }
        }
        let cv = self.cv.clone().unwrap_or_default();
        if command == Command::Cv && cv.k < 2 {
            errs.push("cv.k: must be at least 2".into());
        }
        let bench = self.bench.clone().unwrap_or_default();
        if command == Command::Bench {
            if bench.models.is_empty() {
                errs.push("bench.models: at least one model required".into());
            }
            for (i, m) in bench.models.iter().enumerate() {
                if let Err(e) = validate_model(m) {
                    errs.push(format!("bench.models[{i}]: {e}"));
                }
            }
            if bench.sizes.is_empty() || bench.sizes.contains(&0) {
                errs.push("bench.sizes: need at least one positive size".into());
            }
            if bench.sizes.windows(2).any(|w| w[0] >= w[1]) {
                errs.push("bench.sizes: must be strictly ascending".into());
            }
            if bench.tests_per_site == 0 {
                errs.push("bench.tests_per_site: must be positive".into());
            }
        }

        if !errs.is_empty() {
            return Err(ConfigErrors(errs));
        }
        let seed = ov.seed.or(self.seed).unwrap_or(0);
        Ok(ResolvedRun {
            command,
            model: model.map(|m| with_seed(m, seed)),
            records,
            model_file,
            raster,
            grid,
            out: out.unwrap_or_default(),
            seed,
            threads,
            simulate,
            cv,
            bench: BenchSpec {
                models: bench.models.into_iter().map(|m| with_seed(m, seed)).collect(),
                ..bench
            },
        })
    }
}

fn validate_model(m: &ModelConfig) -> prevmap::Result<()> {
    match m {
        ModelConfig::Gp(s) => s.validate(),
        ModelConfig::Frk(s) => s.validate(),
        ModelConfig::Lgm(s) => s.validate(),
        ModelConfig::Sprf(s) if s.num_trees == 0 || s.min_node_size == 0 => {
            Err(prevmap::Error::invalid("num_trees and min_node_size must be positive"))
        }
        _ => Ok(()),
    }
}

/// Puts the run seed into models that draw random numbers.
pub fn with_seed(m: ModelConfig, seed: u64) -> ModelConfig {
    match m {
        ModelConfig::Sprf(s) => ModelConfig::Sprf(SprfSpec { seed, ..s }),
        ModelConfig::Frk(s) => ModelConfig::Frk(FrkSpec { seed, ..s }),
        other => other,
    }
}

impl GridSpec {
    pub fn build(&self) -> prevmap::Result<Raster> {
        if let Some(p) = &self.raster {
            return Raster::read_ascii(p);
        }
        let b = self.bbox.unwrap_or_default();
        let bbox = BoundingBox::new(Location { lon: b[0], lat: b[1] }, Location { lon: b[2], lat: b[3] });
        build_grid(bbox, self.cell_size.unwrap_or(0.0))
    }
}
