//! Run configuration: every module's settings in one serializable value, merged from a
//! JSON file and command-line overrides, and embedded in every artifact.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DataConfig;
use crate::denoiser::{DenoiserConfig, Head};
use crate::error::{invalid, io_err, Result};
use crate::numerics::DType;
use crate::schedule::{NoiseSchedule, ScheduleKind, ScheduleSpec};
use crate::training::{NoiseKind, TrainConfig};

pub const DEFAULT_STEPS: usize = 50;
pub const DEFAULT_COSINE_S: f64 = 0.008;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InferenceConfig {
    /// Ensemble size.
    pub members: usize,
    pub seed: u64,
    /// Largest number of states sent through the network at once.
    pub batch: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        InferenceConfig {
            members: 8,
            seed: 0,
            batch: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub schedule: ScheduleSpec,
    pub noise: NoiseKind,
    pub denoiser: DenoiserConfig,
    pub train: TrainConfig,
    pub inference: InferenceConfig,
    pub data: DataConfig,
    /// Fraction of a dataset used for training; the rest is held out.
    pub train_frac: f64,
    /// Seed of the frozen pyramid encoder.
    pub extractor_seed: u64,
    /// Seed of the denoiser's initial weights.
    pub init_seed: u64,
    pub dtype: DType,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schedule: ScheduleSpec {
                steps: DEFAULT_STEPS,
                kind: ScheduleKind::Cosine {
                    s: DEFAULT_COSINE_S,
                },
            },
            noise: NoiseKind::Bernoulli,
            denoiser: DenoiserConfig::default(),
            train: TrainConfig::default(),
            inference: InferenceConfig::default(),
            data: DataConfig::default(),
            train_frac: 0.75,
            extractor_seed: 0,
            init_seed: 0,
            dtype: DType::F32,
        }
    }
}

impl RunConfig {
    /// Reads a JSON file; missing fields take their defaults.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|e| crate::Error::Format {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }

    /// Copies the schedule length and noise type into the denoiser settings so the
    /// network matches the process it is trained for, then validates everything.
    pub fn resolve(mut self) -> Result<Self> {
        self.denoiser.steps = self.schedule.steps;
        self.denoiser.head = match self.noise {
            NoiseKind::Bernoulli => Head::Categorical,
            NoiseKind::Gaussian => Head::Noise,
        };
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.build_schedule()?;
        self.denoiser.validate()?;
        self.train.validate()?;
        if self.denoiser.steps != self.schedule.steps {
            return Err(invalid(format!(
                "denoiser expects T={} but the schedule has T={}",
                self.denoiser.steps, self.schedule.steps
            )));
        }
        let head = match self.noise {
            NoiseKind::Bernoulli => Head::Categorical,
            NoiseKind::Gaussian => Head::Noise,
        };
        if self.denoiser.head != head {
            return Err(invalid(format!(
                "{:?} noise needs the {head:?} head",
                self.noise
            )));
        }
        if self.inference.members == 0 || self.inference.batch == 0 {
            return Err(invalid(
                "inference needs at least one member and a positive batch",
            ));
        }
        if !(0.0..1.0).contains(&self.train_frac) || self.train_frac == 0.0 {
            return Err(invalid(format!(
                "train_frac {} outside (0, 1)",
                self.train_frac
            )));
        }
        Ok(())
    }

    pub fn build_schedule(&self) -> Result<NoiseSchedule> {
        self.schedule.build()
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("RunConfig serializes")
    }
}

/// Configuration plus build identifier, as embedded in artifacts.
pub fn provenance(cfg: &RunConfig) -> serde_json::Value {
    serde_json::json!({ "build": crate::BUILD_ID, "config": cfg.to_json() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve() {
        let cfg = RunConfig::default().resolve().unwrap();
        assert_eq!(cfg.denoiser.steps, 50);
        assert_eq!(cfg.schedule.kind, ScheduleKind::Cosine { s: 0.008 });
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.inference.members, 8);
    }

    #[test]
    fn partial_json_fills_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"schedule": {"steps": 10, "kind": "linear", "beta_start": 0.01, "beta_end": 0.2}, "noise": "gaussian"}"#).unwrap();
        let cfg = cfg.resolve().unwrap();
        assert_eq!(cfg.denoiser.steps, 10);
        assert_eq!(cfg.denoiser.head, Head::Noise);
        assert_eq!(cfg.train.lr_init, 1e-4);
    }

    #[test]
    fn json_round_trip() {
        let cfg = RunConfig::default().resolve().unwrap();
        let back: RunConfig = serde_json::from_value(cfg.to_json()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mismatched_head_is_rejected() {
        let mut cfg = RunConfig::default().resolve().unwrap();
        cfg.noise = NoiseKind::Gaussian;
        assert!(cfg.validate().is_err());
    }
}
