//! Run configuration. Values resolve in three layers: built-in defaults,
//! then the TOML file given with `--config`, then command-line flags.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use contour_spt::data::{EdgeConfig, Ingest, SynthConfig};
use contour_spt::network::NetworkConfig;
use contour_spt::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Manifest to train and evaluate on; `<out>/data/manifest.csv` if unset.
    pub manifest: Option<PathBuf>,
    /// Fraction of identities used for training; the rest are test identities.
    pub train_fraction: f64,
    pub split_seed: u64,
    pub ingest: Ingest,
    pub edges: EdgeConfig,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            manifest: None,
            train_fraction: 2.0 / 3.0,
            split_seed: 7,
            ingest: Ingest::Sketch,
            edges: EdgeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub trials: usize,
    pub seed: u64,
    pub svg: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            trials: 10,
            seed: 3,
            svg: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub out: PathBuf,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            out: PathBuf::from("runs/default"),
            network: NetworkConfig::default(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

/// Flag values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    /// Replaces every seed in the configuration.
    pub seed: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("cannot read config {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("invalid config {}", path.display()))
    }

    pub fn resolve(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(out) = &overrides.out {
            self.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            self.synth.seed = seed;
            self.data.split_seed = seed;
            self.train.model_seed = seed;
            self.train.sampler_seed = seed;
            self.eval.seed = seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    pub fn manifest(&self) -> PathBuf {
        self.data
            .manifest
            .clone()
            .unwrap_or_else(|| self.out.join("data").join("manifest.csv"))
    }

    /// Writes the resolved configuration as `<out>/config.<verb>.toml`.
    pub fn echo(&self, verb: &str) -> Result<PathBuf> {
        let path = self.out.join(format!("config.{verb}.toml"));
        fs::write(&path, self.to_toml()?).with_context(|| format!("cannot write {}", path.display()))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_roundtrips_through_toml() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }

    #[test]
    fn file_values_override_defaults_and_flags_override_file() {
        let text = "out = \"x\"\n[train]\nstage_epochs = [1, 2, 3]\nmodel_seed = 9\n[synth]\nidentities = 6\n";
        let mut cfg = RunConfig::from_toml(text).unwrap();
        assert_eq!(cfg.train.stage_epochs, [1, 2, 3]);
        assert_eq!(cfg.synth.identities, 6);
        assert_eq!(cfg.train.base_lr, 0.05);
        cfg.apply(&Overrides {
            out: Some("y".into()),
            seed: Some(4),
        });
        assert_eq!(cfg.out, PathBuf::from("y"));
        assert_eq!((cfg.train.model_seed, cfg.synth.seed, cfg.eval.seed), (4, 4, 4));
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train]\nepochs = 3\n").is_err());
        assert!(RunConfig::from_toml("colour = 1\n").is_err());
    }

    #[test]
    fn manifest_defaults_under_out() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.manifest(), PathBuf::from("runs/default/data/manifest.csv"));
    }
}
