//! Run configuration: one TOML file covering data, model, loss and
//! training, plus the desk-scale preset.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DeviceKind {
    #[default]
    Cpu,
    Gpu,
}

/// Annotation files; relative paths resolve against the config file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataPaths {
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds initialisation, shuffling and augmentation; copied into `train.seed`.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub device: DeviceKind,
    pub data: DataPaths,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs"),
            device: DeviceKind::Cpu,
            data: DataPaths::default(),
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Which data paths a command needs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Needs {
    pub train: bool,
    pub eval: bool,
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let mut cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.train.seed = cfg.seed;
        Ok(cfg)
    }

    /// Reads a config file, resolving relative data paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.data.train, &mut cfg.data.eval].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serialises")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section and that the data files a command needs exist.
    pub fn validate(&self, needs: Needs) -> Result<()> {
        if self.device == DeviceKind::Gpu {
            return Err(Error::config("device = \"gpu\" is not available in this build; use \"cpu\""));
        }
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        for (key, path, needed) in [
            ("data.train", &self.data.train, needs.train),
            ("data.eval", &self.data.eval, needs.eval),
        ] {
            match path {
                None if needed => return Err(Error::config(format!("{key} is required"))),
                Some(p) if needed && !p.is_file() => {
                    return Err(Error::config(format!("{key}: {} does not exist", p.display())));
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Small, fast configuration for CPU runs on synthetic data.
    pub fn desk() -> Self {
        Self {
            model: desk_model(),
            train: desk_train(),
            ..Self::default()
        }
    }
}

/// The default model shrunk to desk scale: HRNet-48-M layout with narrow
/// branches, one block per branch and one module per stage, at 64 px.
pub fn desk_model() -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            input_size: 64,
            width: 16,
            stem_width: 32,
            stem_blocks: 1,
            branch_blocks: 1,
            stage_modules: [1, 1, 1],
            ..BackboneConfig::new(BackboneKind::HrNet48M)
        },
        ..ModelConfig::default()
    }
}

/// Paper optimiser settings with a batch and decay interval sized for a
/// handful of images.
pub fn desk_train() -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        decay_every: 100,
        epochs: 300,
        augment: false,
        ..TrainConfig::default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_round_trip() {
        let cfg = RunConfig::from_toml_str("").unwrap();
        assert_eq!(cfg, RunConfig::default());
        assert_eq!(cfg.model.backbone.input_size, 320);
        let text = RunConfig::desk().to_toml();
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), RunConfig::desk());
    }

    #[test]
    fn seed_propagates() {
        let cfg = RunConfig::from_toml_str("seed = 9\n").unwrap();
        assert_eq!(cfg.train.seed, 9);
    }

    #[test]
    fn errors_name_the_key() {
        let err = RunConfig::default().validate(Needs { train: true, eval: false }).unwrap_err();
        assert!(err.to_string().contains("data.train"), "{err}");
        let cfg = RunConfig::from_toml_str("[data]\neval = \"/nonexistent/a.tsv\"\n").unwrap();
        let err = cfg.validate(Needs { train: false, eval: true }).unwrap_err();
        assert!(err.to_string().contains("data.eval"), "{err}");
        let err = RunConfig::from_toml_str("[model.backbone]\ninput_size = 100\n").unwrap_err();
        assert!(err.to_string().contains("input_size"), "{err}");
        let err = RunConfig::from_toml_str("[train]\nlr_rest = -1.0\n").unwrap().validate(Needs { train: false, eval: false });
        assert!(err.unwrap_err().to_string().contains("train.lr_rest"));
        assert!(RunConfig::from_toml_str("bogus = 1\n").is_err());
        let err = RunConfig::from_toml_str("device = \"gpu\"\n").unwrap().validate(Needs { train: false, eval: false });
        assert!(err.is_err());
    }

    #[test]
    fn relative_paths_resolve_against_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("run.toml");
        std::fs::write(&p, "[data]\ntrain = \"set/annotations.tsv\"\n").unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.data.train.unwrap(), dir.path().join("set/annotations.tsv"));
    }
}
