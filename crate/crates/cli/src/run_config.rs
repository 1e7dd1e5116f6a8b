//! The run configuration file: `[model]`, `[train]`, `[data]` and
//! `[synthetic]` tables, every key optional and unknown keys rejected.

use std::fs;
use std::path::{Path, PathBuf};

use roiformer::data::SyntheticSpec;
use roiformer::{Error, ModelConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub series_dir: PathBuf,
    pub phenotypic: PathBuf,
    pub out_dir: PathBuf,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            series_dir: PathBuf::from("data/series"),
            phenotypic: PathBuf::from("data/phenotypic.tsv"),
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub synthetic: SyntheticSpec,
}

impl RunConfig {
    /// Parses `path`; relative data paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let mut cfg = Self::parse(&text).map_err(|e| match e {
            Error::Config(msgs) => Error::Config(
                msgs.into_iter()
                    .map(|m| format!("{}: {m}", path.display()))
                    .collect(),
            ),
            e => e,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.data.series_dir,
            &mut cfg.data.phenotypic,
            &mut cfg.data.out_dir,
        ] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string().trim().to_string()]))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Every model/train constraint violation.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = self.model.validate();
        errs.extend(self.train.validate(&self.model));
        errs
    }
}
