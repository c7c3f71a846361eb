//! Run configuration.
//!
//! A flat `key = value` file in TOML syntax. Every key may be overridden by
//! an environment variable `REWEIGHT_<KEY>` (upper case), and command-line
//! flags override both. Unknown keys are rejected.
//!
//! | key | default | meaning |
//! |---|---|---|
//! | `seed` | 0 | seed for generation, initialization, shuffling and dropout |
//! | `hierarchy` | 1 | network depth, 1 to 3 |
//! | `input_size` | 64 | side of the square network input |
//! | `confidence` | false | train and use the confidence branch |
//! | `dropout` | 0.2 | dropout rate on hidden fully-connected layers |
//! | `epochs` | 20 | epochs per training phase |
//! | `batch_size` | 16 | |
//! | `learning_rate` | 0.002 | Nadam step size |
//! | `loss` | "mse" | naive-phase loss, `mse` or `cosine` |
//! | `beta` | 0.6 | regularization budget |
//! | `lambda_band` | 0.2 | lambda stays within `(1 +- band) * lambda0` |
//! | `lambda_step` | 0.05 | relative lambda change per epoch |
//! | `augment` | false | random crop, rotation and illuminant bias |
//! | `crop_min`, `crop_max` | 48, 96 | crop side range in pixels |
//! | `max_rotation` | 30 | degrees |
//! | `manifest` | | training or evaluation manifest |
//! | `validation_manifest` | | held-out set monitored during training |
//! | `out` | | output directory |
//! | `ccm` | | nine numbers, row-major, applied when loading manifests |
//! | `eval_patches` | "grid" | `grid` (4x3 patches) or `whole` (one resized image) |
//! | `workers` | 1 | threads for patch evaluation |
//! | `gen_count` | 100 | images written by `gen` |
//! | `gen_width`, `gen_height` | 64, 64 | generated image size |
//! | `gen_patches` | 48 | rectangles per generated scene |
//! | `gray_min`, `gray_max` | 0.0, 0.6 | per-image gray-surface fraction range |
//! | `dominant_hue_probability` | 0.2 | share of single-hue scenes |
//! | `training_count` | 2000 | synthetic images used when no manifest is given |
//! | `validation_count` | 200 | synthetic held-out images when no validation manifest is given |

use std::path::{Path, PathBuf};

use reweight_core::colorlib::Ccm;
use reweight_core::datagen::{AugmentConfig, DatasetConfig, MondrianConfig};
use reweight_core::network::NetworkSpec;
use reweight_core::trainer::{LossKind, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    Mse,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalPatches {
    Grid,
    Whole,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub hierarchy: usize,
    pub input_size: usize,
    pub confidence: bool,
    pub dropout: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss: LossName,
    pub beta: f64,
    pub lambda_band: f64,
    pub lambda_step: f64,
    pub augment: bool,
    pub crop_min: usize,
    pub crop_max: usize,
    pub max_rotation: f64,
    pub manifest: Option<PathBuf>,
    pub validation_manifest: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub ccm: Option<Vec<f64>>,
    pub eval_patches: EvalPatches,
    pub workers: usize,
    pub gen_count: usize,
    pub gen_width: usize,
    pub gen_height: usize,
    pub gen_patches: usize,
    pub gray_min: f64,
    pub gray_max: f64,
    pub dominant_hue_probability: f64,
    pub training_count: usize,
    pub validation_count: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let train = TrainConfig::desk(0);
        let aug = AugmentConfig::desk();
        let data = DatasetConfig::desk(64, 64);
        RunConfig {
            seed: 0,
            hierarchy: 1,
            input_size: 64,
            confidence: false,
            dropout: reweight_core::network::DEFAULT_DROPOUT,
            epochs: train.epochs,
            batch_size: train.batch_size,
            learning_rate: train.learning_rate,
            loss: LossName::Mse,
            beta: train.beta,
            lambda_band: train.lambda_band,
            lambda_step: train.lambda_step,
            augment: false,
            crop_min: aug.crop_min,
            crop_max: aug.crop_max,
            max_rotation: aug.max_rotation,
            manifest: None,
            validation_manifest: None,
            out: None,
            ccm: None,
            eval_patches: EvalPatches::Grid,
            workers: 1,
            gen_count: 100,
            gen_width: 64,
            gen_height: 64,
            gen_patches: data.scene.patch_count,
            gray_min: data.gray_fraction.0,
            gray_max: data.gray_fraction.1,
            dominant_hue_probability: data.dominant_hue_probability,
            training_count: 2000,
            validation_count: 200,
        }
    }
}

/// Every accepted key, in documentation order.
pub const KEYS: &[&str] = &[
    "seed",
    "hierarchy",
    "input_size",
    "confidence",
    "dropout",
    "epochs",
    "batch_size",
    "learning_rate",
    "loss",
    "beta",
    "lambda_band",
    "lambda_step",
    "augment",
    "crop_min",
    "crop_max",
    "max_rotation",
    "manifest",
    "validation_manifest",
    "out",
    "ccm",
    "eval_patches",
    "workers",
    "gen_count",
    "gen_width",
    "gen_height",
    "gen_patches",
    "gray_min",
    "gray_max",
    "dominant_hue_probability",
    "training_count",
    "validation_count",
];

/// An environment value is read as a TOML value when it parses as one and
/// as a bare string otherwise, so `REWEIGHT_OUT=runs/a` works unquoted.
fn env_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    /// File values (if any), then `REWEIGHT_*` variables from `env`.
    pub fn load(
        path: Option<&Path>,
        env: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                let t: toml::Table =
                    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                if let Some((k, _)) = t.iter().find(|(_, v)| v.is_table()) {
                    return Err(CliError::Config(format!("{}: sections are not allowed ({k})", p.display())));
                }
                t
            }
            None => toml::Table::new(),
        };
        for (k, v) in env {
            let Some(key) = k.strip_prefix("REWEIGHT_") else { continue };
            let key = key.to_ascii_lowercase();
            if !KEYS.contains(&key.as_str()) {
                return Err(CliError::Config(format!("unknown variable {k}")));
            }
            table.insert(key, env_value(&v));
        }
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.message().to_string()))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(1..=3).contains(&self.hierarchy) {
            return bad(format!("hierarchy must be 1, 2 or 3, got {}", self.hierarchy));
        }
        if self.workers == 0 {
            return bad("workers must be at least 1".into());
        }
        if self.crop_min == 0 || self.crop_min > self.crop_max {
            return bad(format!("crop range {}..{} is empty", self.crop_min, self.crop_max));
        }
        if !(0.0..=1.0).contains(&self.gray_min) || !(self.gray_min..=1.0).contains(&self.gray_max) {
            return bad(format!("gray fraction range {}..{} invalid", self.gray_min, self.gray_max));
        }
        if !(0.0..=1.0).contains(&self.dominant_hue_probability) {
            return bad("dominant_hue_probability must lie in [0, 1]".into());
        }
        for (key, p) in [("manifest", &self.manifest), ("validation_manifest", &self.validation_manifest)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return bad(format!("{key} {} does not exist", p.display()));
                }
            }
        }
        self.ccm()?;
        self.spec()?;
        validate_train(&self.train_config())?;
        Ok(())
    }

    pub fn spec(&self) -> Result<NetworkSpec> {
        let mut spec = NetworkSpec::new(self.hierarchy, self.confidence)?.with_input_size(self.input_size);
        spec.dropout_rate = self.dropout;
        spec.validate()?;
        Ok(spec)
    }

    pub fn ccm(&self) -> Result<Option<Ccm>> {
        self.ccm
            .as_deref()
            .map(|v| Ccm::from_row_major(v).map_err(|e| CliError::Config(format!("ccm: {e}"))))
            .transpose()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            crop_min: self.crop_min,
            crop_max: self.crop_max,
            output_size: self.input_size,
            max_rotation: self.max_rotation,
            ..AugmentConfig::desk()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            seed: self.seed,
            loss: match self.loss {
                LossName::Mse => LossKind::Mse,
                LossName::Cosine => LossKind::Cosine,
            },
            augment: self.augment.then(|| self.augment_config()),
            beta: self.beta,
            lambda_band: self.lambda_band,
            lambda_step: self.lambda_step,
        }
    }

    pub fn dataset_config(&self, width: usize, height: usize) -> DatasetConfig {
        DatasetConfig {
            scene: MondrianConfig::new(width, height, self.gen_patches),
            gray_fraction: (self.gray_min, self.gray_max),
            dominant_hue_probability: self.dominant_hue_probability,
            ..DatasetConfig::desk(width, height)
        }
    }
}

fn validate_train(t: &TrainConfig) -> Result<()> {
    if t.epochs == 0 || t.batch_size == 0 {
        return Err(CliError::Config("epochs and batch_size must be positive".into()));
    }
    if !(t.learning_rate > 0.0) {
        return Err(CliError::Config("learning_rate must be positive".into()));
    }
    if !(t.beta > 0.0 && t.beta < 1.0) {
        return Err(CliError::Config("beta must lie in (0, 1)".into()));
    }
    Ok(())
}
