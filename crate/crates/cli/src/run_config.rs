//! The training configuration file.
//!
//! ```toml
//! format_version = 1
//!
//! [model]        # ModelConfig; omitted keys take their defaults
//! channels = 8
//! embed_dim = 16
//!
//! [train]        # TrainConfig
//! epochs = 50
//!
//! [degradation]  # DegradationSpec, tagged by `kind`
//! kind = "noise"
//! sigma = 30.0
//! seed = 1
//! ```

use hyper_restormer::degradations::{Degradation, DegradationSpec, NoiseLevel};
use hyper_restormer::model::ModelConfig;
use hyper_restormer::training::TrainConfig;
use hyper_restormer::Error;
use serde::{Deserialize, Serialize};

pub const RUN_CONFIG_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub format_version: u32,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_degradation")]
    pub degradation: DegradationSpec,
}

fn default_degradation() -> DegradationSpec {
    DegradationSpec {
        degradation: Degradation::Noise {
            sigma: NoiseLevel::Fixed(30.0),
            clip: false,
        },
        seed: 0,
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, Error> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))?;
        if cfg.format_version != RUN_CONFIG_VERSION {
            return Err(Error::Config(format!(
                "unsupported run config format_version {} (expected {RUN_CONFIG_VERSION})",
                cfg.format_version
            )));
        }
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.check_task()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, Error> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// The degradation must produce what the model expects as input.
    fn check_task(&self) -> Result<(), Error> {
        use hyper_restormer::model::Task;
        let ok = match (&self.model.task, &self.degradation.degradation) {
            (Task::Denoise, Degradation::Noise { .. }) => true,
            (Task::Inpaint, Degradation::Stripes(_)) => true,
            (Task::Superres { scale }, Degradation::Downsample { scale: s }) => scale == s,
            _ => false,
        };
        if !ok {
            return Err(Error::Config(format!(
                "degradation {:?} does not match model task {:?}",
                self.degradation.degradation, self.model.task
            )));
        }
        if self.model.mask_channel && self.model.task != Task::Inpaint {
            return Err(Error::Config(
                "mask_channel is only meaningful for the inpaint task".into(),
            ));
        }
        Ok(())
    }
}

/// Accepts either a run configuration or a bare model configuration.
pub fn model_config_from_text(text: &str) -> Result<ModelConfig, Error> {
    let value: toml::Table = toml::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
    let cfg = if value.contains_key("model") {
        RunConfig::parse(text)?.model
    } else {
        ModelConfig::from_toml(text)?
    };
    cfg.validate()?;
    Ok(cfg)
}
