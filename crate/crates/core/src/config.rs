//! Run configuration shared by every command.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evalpipe::RolloutConfig;
use crate::integrator::ModelConfig;
use crate::numeric::AdamConfig;
use crate::synthgen::SynthConfig;
use crate::train::TrainConfig;

/// One JSON document that fixes a run. `seed` drives model initialization and
/// sampling; `data.seed` drives the synthetic benchmark.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: SynthConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: RolloutConfig,
    pub seed: u64,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let c: RunConfig = serde_json::from_str(text).map_err(|source| Error::Json {
            context: "parsing run config".into(),
            source,
        })?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        for p in self.data.observer_profiles() {
            p.validate()?;
        }
        self.model.validate()?;
        self.training().validate()?;
        self.eval.validate()?;
        if (self.model.height, self.model.width) != (self.data.height, self.data.width) {
            return Err(Error::Config(format!(
                "model resolution {}x{} differs from data resolution {}x{}",
                self.model.height, self.model.width, self.data.height, self.data.width
            )));
        }
        Ok(())
    }

    /// Training settings with the run seed applied.
    pub fn training(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Reduced widths and budget that train on one CPU core in minutes.
    pub fn desk() -> Self {
        let (h, w) = (12, 12);
        RunConfig {
            data: SynthConfig {
                height: h,
                width: w,
                ..SynthConfig::default()
            },
            model: ModelConfig {
                height: h,
                width: w,
                encoder_channels: (4, 8),
                hidden: 8,
                dam_head_channels: 8,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                batch_size: 8,
                adam: AdamConfig {
                    lr: 0.01,
                    accumulation: 1,
                    ..AdamConfig::default()
                },
                epochs: 40,
                samples_per_epoch: Some(256),
                val_samples: Some(32),
                deterministic_log: true,
                ..TrainConfig::default()
            },
            eval: RolloutConfig::default(),
            seed: 0,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_desk_validate() {
        RunConfig::default().validate().unwrap();
        RunConfig::desk().validate().unwrap();
        assert_eq!(RunConfig::default().train.batch_size, 48);
    }

    #[test]
    fn json_round_trip_and_unknown_keys() {
        let c = RunConfig::desk();
        let back = RunConfig::from_json(&c.to_json().to_string()).unwrap();
        assert_eq!(back, c);
        let partial = RunConfig::from_json(r#"{"seed": 3, "train": {"epochs": 2}}"#).unwrap();
        assert_eq!((partial.seed, partial.train.epochs, partial.training().seed), (3, 2, 3));
        assert!(RunConfig::from_json(r#"{"sed": 3}"#).is_err());
        assert!(RunConfig::from_json(r#"{"train": {"epoch": 3}}"#).is_err());
        assert!(RunConfig::from_json(r#"{"model": {"height": 12}}"#).is_err());
    }
}
