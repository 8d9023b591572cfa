//! Experiment configuration: one file describes the whole pipeline run
//! (codebooks, channel, dataset, training, evaluation grid).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channel::ChannelParams;
use crate::error::{Error, Result};
use crate::nn::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodebookConfig {
    /// Spreading code length = number of radio resources.
    pub code_length: usize,
    /// Device counts to build codebooks for; each yields one overloading
    /// ratio `100 * N / L`.
    pub n_devices: Vec<usize>,
    pub m_ary: u8,
    pub rho: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub size: usize,
    pub fractions: [f64; 3],
    /// Training SNR is drawn uniformly from this range (dB).
    pub snr_lo_db: f64,
    pub snr_hi_db: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Detector names: `dnn`, `ls_bomp`, `camp`, `oracle`.
    pub detectors: Vec<String>,
    pub snr_db: Vec<f64>,
    pub n_active: Vec<usize>,
    pub snapshots_per_cell: usize,
    pub seed: u64,
    /// Threshold for the neural detector's blind mode.
    pub blind_threshold: f64,
    pub camp_iters: usize,
    pub camp_alpha: f64,
    pub oracle_subset_cap: u64,
    /// Also evaluate the neural detector in blind (thresholded) mode.
    pub dnn_blind: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub codebook: CodebookConfig,
    pub channel: ChannelParams<f64>,
    pub dataset: DatasetConfig,
    pub train: TrainConfig<f64>,
    pub eval: EvalConfig,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            codebook: CodebookConfig {
                code_length: 4,
                n_devices: vec![8, 12, 16],
                m_ary: 3,
                rho: 0.75,
                seed: 7,
            },
            channel: ChannelParams::default(),
            dataset: DatasetConfig {
                size: 1_000_000,
                fractions: [0.8, 0.1, 0.1],
                snr_lo_db: 0.0,
                snr_hi_db: 30.0,
                seed: 11,
            },
            train: TrainConfig::default(),
            eval: EvalConfig {
                detectors: vec!["dnn".into(), "ls_bomp".into(), "camp".into()],
                snr_db: (0..=15).map(|i| (i * 2) as f64).collect(),
                n_active: vec![1, 2, 3, 4],
                snapshots_per_cell: 10_000,
                seed: 13,
                blind_threshold: 0.5,
                camp_iters: crate::detect::DEFAULT_CAMP_ITERS,
                camp_alpha: crate::detect::DEFAULT_CAMP_ALPHA,
                oracle_subset_cap: 200_000,
                dnn_blind: true,
            },
            output_dir: PathBuf::from("runs/default"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.codebook.code_length == 0 {
            return Err(Error::Config("code_length must be >= 1".into()));
        }
        if self.codebook.n_devices.is_empty() {
            return Err(Error::Config("n_devices must be non-empty".into()));
        }
        if !(0.0 < self.codebook.rho && self.codebook.rho <= 1.0) {
            return Err(Error::Config(format!(
                "rho {} must lie in (0, 1]",
                self.codebook.rho
            )));
        }
        if self.dataset.snr_hi_db < self.dataset.snr_lo_db {
            return Err(Error::Config("snr_hi_db < snr_lo_db".into()));
        }
        let known = ["dnn", "ls_bomp", "camp", "oracle"];
        for d in &self.eval.detectors {
            if !known.contains(&d.as_str()) {
                return Err(Error::Config(format!(
                    "unknown detector '{d}' (expected one of {known:?})"
                )));
            }
        }
        if self.eval.snapshots_per_cell == 0 || self.eval.snr_db.is_empty() {
            return Err(Error::Config("evaluation grid is empty".into()));
        }
        for &n in &self.eval.n_active {
            for &nd in &self.codebook.n_devices {
                if n == 0 || n > nd {
                    return Err(Error::Config(format!(
                        "n_active {n} out of range for N = {nd}"
                    )));
                }
            }
        }
        self.train.validate()?;
        Ok(())
    }

    /// Overloading ratios in percent, one per configured device count.
    pub fn or_percents(&self) -> Vec<f64> {
        self.codebook
            .n_devices
            .iter()
            .map(|&n| 100.0 * n as f64 / self.codebook.code_length as f64)
            .collect()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(format!("serialize config: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(format!("parse config: {e}")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text)
    }

    /// Hash of the canonical serialization; keys pipeline stage outputs.
    pub fn hash(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml()?.as_bytes());
        Ok(hasher
            .finalize()
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect())
    }
}
