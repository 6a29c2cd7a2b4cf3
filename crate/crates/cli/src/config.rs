use std::path::Path;

use molgnn::gnn2d::Model2DConfig;
use molgnn::gnn3d::Model3DConfig;
use molgnn::train::{ModelConfig, ModelKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Model and training settings of one run, as read from a TOML file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn defaults(kind: ModelKind) -> Self {
        let model = match kind {
            ModelKind::TwoD => ModelConfig::TwoD(Model2DConfig::default()),
            ModelKind::ThreeD => ModelConfig::ThreeD(Model3DConfig::default()),
        };
        RunConfig {
            model,
            train: TrainConfig::defaults(kind),
        }
    }

    pub fn parse(text: &str, origin: &str) -> CliResult<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| CliError::Config {
            path: origin.to_string(),
            msg: e.to_string(),
        })?;
        if cfg.model.kind() != cfg.train.kind {
            return Err(CliError::Config {
                path: origin.to_string(),
                msg: format!(
                    "[model] kind is {} but [train] kind is {}",
                    cfg.model.kind(),
                    cfg.train.kind
                ),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn kind(&self) -> ModelKind {
        self.model.kind()
    }
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub hidden_dim: Option<usize>,
    pub deterministic: bool,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let t = &mut cfg.train;
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.lr {
            t.lr0 = v;
        }
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if self.deterministic {
            t.deterministic = true;
        }
        if let Some(f) = self.hidden_dim {
            match &mut cfg.model {
                ModelConfig::TwoD(m) => m.hidden_dim = f,
                ModelConfig::ThreeD(m) => m.hidden_dim = f,
            }
        }
    }
}
