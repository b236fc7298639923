//! Experiment configuration files.
//!
//! A TOML file with the sections `[network]`, `[focal]`, `[train]`,
//! `[task]`, `[data]` and `[output]`. Every key is optional; missing keys
//! take the defaults below, unknown keys are rejected.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stfocal::train::{Precision, SyntheticTask, TrainConfig};
use stfocal::{Error, FocalConfig, ModelConfig, NetworkConfig, Result};

/// Name of the resolved config written to every output directory.
pub const CONFIG_ECHO: &str = "config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub network: NetworkConfig,
    pub focal: FocalConfig,
    pub train: TrainConfig,
    pub task: SyntheticTask,
    pub data: DataConfig,
    pub output: OutputConfig,
}

/// Optional on-disk dataset replacing the synthetic task.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Directory with `train/` and `test/` subdirectories, each holding
    /// `clips.tensor` and `labels.tensor`.
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("runs/default"),
        }
    }
}

impl Default for ExperimentConfig {
    /// The tiny network on the four-way motion task.
    fn default() -> Self {
        let mut model = ModelConfig::preset("tiny").expect("built-in preset");
        let task = SyntheticTask::default();
        let n = &mut model.network;
        n.in_channels = 1;
        n.num_classes = SyntheticTask::CLASSES;
        n.frames = task.frames;
        n.height = task.height;
        n.width = task.width;
        n.drop_path_rate = 0.0;
        ExperimentConfig {
            network: model.network,
            focal: model.focal,
            train: TrainConfig {
                base_lr: 0.05,
                label_smoothing: 0.0,
                precision: Precision::F32,
                ..Default::default()
            },
            task,
            data: DataConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

impl ExperimentConfig {
    /// Keys present in `text` override the defaults of
    /// [`ExperimentConfig::default`] one by one, also inside sections.
    pub fn parse(text: &str) -> Result<Self> {
        let user: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        let mut merged = toml::Table::try_from(Self::default()).expect("defaults serialise");
        overlay(&mut merged, user);
        let cfg: ExperimentConfig = merged
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// The file itself, or the defaults when no path is given.
    pub fn load_or_default(path: Option<&Path>) -> Result<Self> {
        path.map_or_else(|| Ok(Self::default()), Self::load)
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            network: self.network.clone(),
            focal: self.focal.clone(),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    /// Writes the resolved config as `config.toml` into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(CONFIG_ECHO);
        fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    pub fn validate(&self) -> Result<()> {
        self.model().validate()?;
        self.train.validate()?;
        if self.data.dir.is_some() {
            return Ok(());
        }
        self.task.validate()?;
        let (n, t) = (&self.network, &self.task);
        if (n.frames, n.height, n.width) != (t.frames, t.height, t.width) {
            return Err(Error::Config(format!(
                "task clips are {}x{}x{} but the network expects {}x{}x{}",
                t.frames, t.height, t.width, n.frames, n.height, n.width
            )));
        }
        if n.in_channels != 1 || n.num_classes != SyntheticTask::CLASSES {
            return Err(Error::Config(format!(
                "the synthetic task needs in_channels = 1 and num_classes = {}",
                SyntheticTask::CLASSES
            )));
        }
        Ok(())
    }
}

fn overlay(base: &mut toml::Table, user: toml::Table) {
    for (key, value) in user {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(u)) => overlay(b, u),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}
