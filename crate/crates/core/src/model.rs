//! Uniform fit/predict contract over all model families.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::geodata::{BoundingBox, Location, SurveyRecord};
use crate::{frk, gpcore, lgm, sprf};

/// Point estimate of prevalence and its standard deviation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub estimate: f64,
    pub sd: f64,
}

pub trait FittedModel: Send + Sync {
    fn predict(&self, pts: &[Location]) -> Result<Vec<Prediction>>;
}

pub trait ModelFitter: Sync {
    /// Fits to `train`; `domain` bounds every location later predicted.
    fn fit_model(&self, train: &[SurveyRecord], domain: BoundingBox) -> Result<Box<dyn FittedModel>>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelConfig {
    Gp(gpcore::GpModelSpec),
    Sprf(sprf::SprfSpec),
    Frk(frk::FrkSpec),
    Lgm(lgm::LgmSpec),
    /// Mean empirical prevalence of the training records everywhere.
    ConstantMean,
}

impl ModelConfig {
    pub fn name(&self) -> &'static str {
        match self {
            ModelConfig::Gp(s) if s.vecchia.is_some() => "gp-vecchia",
            ModelConfig::Gp(_) => "gp-exact",
            ModelConfig::Sprf(_) => "sprf",
            ModelConfig::Frk(_) => "frk",
            ModelConfig::Lgm(_) => "lgm",
            ModelConfig::ConstantMean => "constant",
        }
    }

    pub fn fit(&self, train: &[SurveyRecord], domain: BoundingBox) -> Result<FittedAny> {
        Ok(match self {
            ModelConfig::Gp(s) => FittedAny::Gp(gpcore::fit(train, s)?),
            ModelConfig::Sprf(s) => FittedAny::Sprf(sprf::fit(train, s)?),
            ModelConfig::Frk(s) => FittedAny::Frk(frk::fit(train, s, domain)?),
            ModelConfig::Lgm(s) => FittedAny::Lgm(lgm::fit(train, s, domain)?),
            ModelConfig::ConstantMean => {
                if train.is_empty() {
                    return Err(crate::Error::invalid("no training records"));
                }
                let y: Vec<f64> = train.iter().map(SurveyRecord::prevalence).collect();
                let n = y.len() as f64;
                let mean = y.iter().sum::<f64>() / n;
                let sd = (y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
                FittedAny::ConstantMean { mean, sd }
            }
        })
    }
}

impl ModelFitter for ModelConfig {
    fn fit_model(&self, train: &[SurveyRecord], domain: BoundingBox) -> Result<Box<dyn FittedModel>> {
        Ok(Box::new(self.fit(train, domain)?))
    }
}

/// Serializable fitted model of any family.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FittedAny {
    Gp(gpcore::GpFit),
    Sprf(sprf::SprfFit),
    Frk(frk::FrkModel),
    Lgm(lgm::LgmFit),
    ConstantMean { mean: f64, sd: f64 },
}

impl FittedModel for FittedAny {
    /// GP and FRK report the mean; the forest and the lattice model the median.
    fn predict(&self, pts: &[Location]) -> Result<Vec<Prediction>> {
        Ok(match self {
            FittedAny::Gp(f) => f
                .predict(pts)?
                .into_iter()
                .map(|p| Prediction { estimate: p.mean, sd: p.sd })
                .collect(),
            FittedAny::Sprf(f) => f
                .predict(pts)
                .into_iter()
                .map(|p| Prediction { estimate: p.median, sd: p.sd })
                .collect(),
            FittedAny::Frk(f) => f
                .predict(pts)?
                .into_iter()
                .map(|p| Prediction { estimate: p.mean, sd: p.sd })
                .collect(),
            FittedAny::Lgm(f) => f
                .predict(pts)?
                .into_iter()
                .map(|p| Prediction { estimate: p.median, sd: p.sd })
                .collect(),
            FittedAny::ConstantMean { mean, sd } => pts.iter().map(|_| Prediction { estimate: *mean, sd: *sd }).collect(),
        })
    }
}
