//! Run configuration: TOML or JSON (auto-detected by extension), namespaced
//! per subsystem, with a SHA-256 digest over the resolved form. The
//! `SEAMLESS_SEED` environment variable overrides `train.seed`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::{BackboneProfile, InputNorm};
use crate::cdp::CdpConfig;
use crate::data::DatasetSpec;
use crate::error::{Error, Result};
use crate::igc::DecoderConfig;
use crate::loss::LossConfig;
use crate::pseudo::PseudoConfig;

pub const SEED_ENV_VAR: &str = "SEAMLESS_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    Supervised,
    Unsupervised,
}

/// `train.*` config namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: u32,
    pub seed: u64,
    pub image_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Horizontal-flip augmentation; `None` resolves per mode (on when
    /// supervised, off when unsupervised so stored masks stay aligned).
    pub flip: Option<bool>,
    pub run_name: String,
    pub runs_dir: PathBuf,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            mode: TrainMode::Supervised,
            lr: 0.005,
            batch_size: 20,
            epochs: 50,
            seed: 0,
            image_size: 320,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            flip: None,
            run_name: "run".into(),
            runs_dir: PathBuf::from("runs"),
        }
    }
}

impl TrainSection {
    pub fn flip_enabled(&self) -> bool {
        self.flip.unwrap_or(self.mode == TrainMode::Supervised)
    }
}

/// `backbone.*` config namespace.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneSection {
    pub profile: BackboneProfile,
    pub weights_path: Option<PathBuf>,
    pub freeze: bool,
    /// Input statistics; `None` resolves to natural-image statistics when
    /// pretrained weights are configured, identity otherwise.
    pub input_norm: Option<InputNorm>,
}

impl Default for BackboneSection {
    fn default() -> Self {
        Self {
            profile: BackboneProfile::Full,
            weights_path: None,
            freeze: false,
            input_norm: None,
        }
    }
}

impl BackboneSection {
    pub fn resolved_input_norm(&self) -> InputNorm {
        self.input_norm.unwrap_or({
            if self.weights_path.is_some() {
                InputNorm::Natural
            } else {
                InputNorm::Identity
            }
        })
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct Config {
    pub train: TrainSection,
    pub backbone: BackboneSection,
    pub decoder: DecoderConfig,
    pub cdp: CdpConfig,
    pub loss: LossConfig,
    pub pseudo: PseudoConfig,
    pub datasets: Vec<DatasetSpec>,
}

impl Config {
    /// Loads a config file; format follows the extension (`.toml` / `.json`).
    /// Applies the `SEAMLESS_SEED` override and validates.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file not found: {}", path.display())));
        }
        let text = std::fs::read_to_string(path)?;
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .unwrap_or("")
            .to_lowercase();
        let mut cfg: Config = match ext.as_str() {
            "toml" => toml::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            "json" => serde_json::from_str(&text)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?,
            other => {
                return Err(Error::Config(format!(
                    "unsupported config extension '{other}' (expected toml or json)"
                )))
            }
        };
        if let Ok(seed) = std::env::var(SEED_ENV_VAR) {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV_VAR} must be an integer")))?;
            cfg.train.seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.train.lr <= 0.0 {
            return Err(Error::Config("train.lr must be positive".into()));
        }
        if !(0.0 < self.pseudo.lambda && self.pseudo.lambda < 1.0) {
            return Err(Error::Config("pseudo.lambda must lie in (0,1)".into()));
        }
        if self.train.epochs < 1 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.train.image_size == 0 || self.train.image_size % 32 != 0 {
            return Err(Error::Config(format!(
                "train.image_size must be a positive multiple of 32, got {}",
                self.train.image_size
            )));
        }
        if self.cdp.bg_level > 4 {
            return Err(Error::Config("cdp.bg_level must be 0..=4".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form of the resolved config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut hasher = Sha256::new();
        hasher.update(json.as_bytes());
        hex::encode(hasher.finalize())
    }

    pub fn run_dir(&self) -> PathBuf {
        self.train.runs_dir.join(&self.train.run_name)
    }
}
