//! Run configuration files (TOML).
//!
//! ```toml
//! [model]         # ViTConfig
//! [quantization]  # PolicySpec, optional (defaults to the ternary preset)
//! [schedule]      # TrainSchedule
//! [data]          # kind = "synthetic" | "idx"
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::idx::load_idx;
use crate::data::{Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::ViTConfig;
use crate::quantization::policy::{PolicySpec, QuantizationPolicy};
use crate::training::TrainSchedule;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdxSource {
    pub images: PathBuf,
    pub labels: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_images: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eval_labels: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx(IdxSource),
}

impl DataSource {
    pub fn validate(&self) -> Result<()> {
        match self {
            DataSource::Synthetic(s) => s.validate(),
            DataSource::Idx(s) => {
                if s.eval_images.is_some() != s.eval_labels.is_some() {
                    return Err(Error::config(
                        "data.eval_labels",
                        "eval_images and eval_labels must be given together",
                    ));
                }
                Ok(())
            }
        }
    }

    /// Training split and optional held-out split.
    pub fn load(&self, num_classes: usize) -> Result<(Dataset, Option<Dataset>)> {
        match self {
            DataSource::Synthetic(s) => {
                let eval = (s.eval_samples > 0)
                    .then(|| s.generate_eval(s.eval_samples))
                    .transpose()?;
                Ok((s.generate()?, eval))
            }
            DataSource::Idx(s) => {
                let train = load_idx(&s.images, &s.labels, Some(num_classes))?;
                let eval = match (&s.eval_images, &s.eval_labels) {
                    (Some(i), Some(l)) => Some(load_idx(i, l, Some(num_classes))?),
                    _ => None,
                };
                Ok((train, eval))
            }
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        if let DataSource::Idx(s) = self {
            let join = |p: &mut PathBuf| {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            };
            join(&mut s.images);
            join(&mut s.labels);
            s.eval_images.as_mut().map(join);
            s.eval_labels.as_mut().map(join);
        }
    }
}

/// Everything a training command needs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ViTConfig,
    #[serde(default)]
    pub quantization: PolicySpec,
    pub schedule: TrainSchedule,
    pub data: DataSource,
}

impl RunConfig {
    /// Parses and validates.
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| {
            let key = e
                .message()
                .split('`')
                .nth(1)
                .map(str::to_string)
                .unwrap_or_else(|| "<file>".into());
            Error::config(key, e.message().trim().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Relative IDX paths resolve against the file's directory.
    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        if let Some(dir) = path.parent() {
            cfg.data.resolve_paths(dir);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Contract(format!("config not serializable: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.schedule.validate()?;
        self.data.validate()?;
        if let DataSource::Synthetic(s) = &self.data {
            let pairs = [
                ("data.num_classes", s.num_classes, self.model.num_classes),
                ("data.image_size", s.image_size, self.model.image_size),
                ("data.channels", s.channels, self.model.in_channels),
            ];
            for (key, got, want) in pairs {
                if got != want {
                    return Err(Error::config(key, format!("is {got} but the model expects {want}")));
                }
            }
        }
        self.policy().map(|_| ())
    }

    pub fn policy(&self) -> Result<QuantizationPolicy> {
        self.model.policy(&self.quantization)
    }

    /// Loads the data and checks its geometry against the model.
    pub fn load_data(&self) -> Result<(Dataset, Option<Dataset>)> {
        let (train, eval) = self.data.load(self.model.num_classes)?;
        for d in std::iter::once(&train).chain(eval.as_ref()) {
            let want = [self.model.in_channels, self.model.image_size, self.model.image_size];
            if d.image_shape() != want {
                return Err(Error::config(
                    "data",
                    format!("images are {:?} but the model expects {want:?}", d.image_shape()),
                ));
            }
        }
        Ok((train, eval))
    }
}
