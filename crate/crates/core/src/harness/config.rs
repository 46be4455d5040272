//! Experiment configuration, stored as TOML.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::{load_paired_dataset, split_dataset, synth_dataset, PairedDataset, SyntheticSpec};
use crate::losses::{ExtractorSpec, LossConfig, LossWeights};
use crate::metrics::SsimConfig;
use crate::network::UNetConfig;
use crate::optim::AdamConfig;
use crate::wiener::WienerInit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Tab-separated manifest; relative paths resolve against the config file.
    Manifest(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticSpec::default())
    }
}

impl DataSource {
    pub fn load(&self) -> Result<PairedDataset> {
        match self {
            DataSource::Synthetic(spec) => synth_dataset(spec),
            DataSource::Manifest(path) => load_paired_dataset(path),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossSpec {
    pub weights: LossWeights,
    pub ssim: SsimConfig,
    pub extractor: ExtractorSpec,
}

impl LossSpec {
    pub fn build(&self) -> Result<LossConfig> {
        self.weights.validate()?;
        self.ssim.validate()?;
        Ok(LossConfig {
            weights: self.weights,
            ssim: self.ssim,
            extractor: Arc::new(self.extractor.build()?),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimSpec {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub steps: u64,
    pub batch_size: usize,
}

impl Default for OptimSpec {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            steps: 500,
            batch_size: 4,
        }
    }
}

impl OptimSpec {
    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Everything needed to reproduce one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub with_wiener: bool,
    /// Where artifacts go. Not part of the config hash.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    /// Test samples shown in the ablation grid.
    #[serde(default = "default_grid_samples")]
    pub grid_samples: usize,
    #[serde(default)]
    pub data: DataSource,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub wiener: WienerInit,
    #[serde(default)]
    pub loss: LossSpec,
    #[serde(default)]
    pub optim: OptimSpec,
    #[serde(default)]
    pub split: SplitSpec,
}

fn default_true() -> bool {
    true
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("runs")
}

fn default_grid_samples() -> usize {
    3
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            with_wiener: true,
            out_dir: default_out_dir(),
            grid_samples: default_grid_samples(),
            data: DataSource::default(),
            unet: UNetConfig::default(),
            wiener: WienerInit::default(),
            loss: LossSpec::default(),
            optim: OptimSpec::default(),
            split: SplitSpec::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string().trim().replace('\n', " ")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| match e {
            Error::Config(d) => Error::Config(format!("{}: {d}", path.display())),
            e => e,
        })?;
        if let DataSource::Manifest(m) = &mut cfg.data {
            if m.is_relative() {
                if let Some(dir) = path.parent() {
                    *m = dir.join(&*m);
                }
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        self.wiener.build(1)?;
        self.loss.weights.validate_for_training()?;
        self.loss.ssim.validate()?;
        self.optim.adam().validate()?;
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be at least 1".into()));
        }
        if let DataSource::Synthetic(spec) = &self.data {
            spec.size
                .checked_rem(1 << self.unet.depth)
                .filter(|&r| r == 0)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "synthetic size {} must be divisible by 2^{} for a depth-{} U-Net",
                        spec.size, self.unet.depth, self.unet.depth
                    ))
                })?;
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON encoding (sorted keys), excluding the
    /// output directory.
    pub fn hash(&self) -> String {
        let mut value = serde_json::to_value(self).expect("config is always representable as JSON");
        if let Some(map) = value.as_object_mut() {
            map.remove("out_dir");
        }
        hex::encode(Sha256::digest(value.to_string().as_bytes()))
    }

    /// Seeded `(train, val, test)` partition of `data`.
    pub fn split(&self, data: &PairedDataset) -> Result<(PairedDataset, PairedDataset, PairedDataset)> {
        split_dataset(data, (self.split.train, self.split.val, self.split.test), self.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.optim.learning_rate, 1e-4);
        assert_eq!(cfg.loss.weights, LossWeights::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::default();
        cfg.loss.weights.perceptual = None;
        cfg.data = DataSource::Manifest("data/m.tsv".into());
        let back = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn hash_ignores_out_dir_only() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: "elsewhere".into(),
            ..a.clone()
        };
        let c = ExperimentConfig { seed: 1, ..a.clone() };
        assert_eq!(a.hash(), b.hash());
        assert_ne!(a.hash(), c.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn partial_tables_and_unknown_keys() {
        let cfg = ExperimentConfig::from_toml(
            "seed = 3\n[data.synthetic]\npairs = 8\n[optim]\nsteps = 10\n[loss.weights]\nmse = 1.0\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.optim.batch_size, 4);
        assert!(matches!(&cfg.data, DataSource::Synthetic(s) if s.pairs == 8 && s.size == 64));
        assert_eq!(cfg.loss.weights.ssim, None);
        let err = ExperimentConfig::from_toml("[optim]\nstep = 10\n").unwrap_err();
        assert!(err.to_string().contains("step"), "{err}");
    }

    #[test]
    fn invalid_settings_are_rejected() {
        for text in [
            "[optim]\nlearning_rate = -1.0",
            "[optim]\nbatch_size = 0",
            "[loss.weights]\nmse = 0.0",
            "[data.synthetic]\nsize = 60",
            "[unet]\ndepth = 0",
        ] {
            assert!(
                matches!(
                    ExperimentConfig::from_toml(text),
                    Err(Error::Config(_) | Error::Parameter(_))
                ),
                "{text}"
            );
        }
    }

    #[test]
    fn relative_manifest_resolves_against_config_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        fs::write(&path, "[data]\nmanifest = \"m.tsv\"\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.data, DataSource::Manifest(dir.path().join("m.tsv")));
    }
}
