//! Run configuration, loaded from JSON with per-field defaults.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use gradkit::{AdamConfig, Precision};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ablation variants plus the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Single category-name prompt, whole loss only.
    A,
    /// Part prompts with concatenated sparse and summed dense embeddings.
    B,
    /// B plus part losses.
    C,
    /// C plus category part attention (image part weights fixed to one).
    D,
    /// C plus image part attention (relation matrix fixed to ones).
    E,
    /// Full part-to-whole fusion.
    #[default]
    #[serde(alias = "full")]
    F,
    #[serde(rename = "sparse_only")]
    SparseOnly,
    #[serde(rename = "dense_only")]
    DenseOnly,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::A,
        Variant::B,
        Variant::C,
        Variant::D,
        Variant::E,
        Variant::F,
        Variant::SparseOnly,
        Variant::DenseOnly,
    ];

    /// Whether the part masks enter the loss.
    pub fn part_losses(self) -> bool {
        !matches!(self, Variant::A | Variant::B)
    }

    /// Whether the relation matrix weights the fusion.
    pub fn uses_relation(self) -> bool {
        matches!(self, Variant::D | Variant::E | Variant::F | Variant::SparseOnly | Variant::DenseOnly)
    }

    /// Whether image part weights (and the global CNN) are used.
    pub fn uses_image_weights(self) -> bool {
        matches!(self, Variant::E | Variant::F | Variant::DenseOnly)
    }

    pub fn uses_sparse(self) -> bool {
        self != Variant::DenseOnly
    }

    pub fn uses_dense(self) -> bool {
        self != Variant::SparseOnly
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::A => "A",
            Variant::B => "B",
            Variant::C => "C",
            Variant::D => "D",
            Variant::E => "E",
            Variant::F => "F",
            Variant::SparseOnly => "sparse_only",
            Variant::DenseOnly => "dense_only",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "A" | "a" => Variant::A,
            "B" | "b" => Variant::B,
            "C" | "c" => Variant::C,
            "D" | "d" => Variant::D,
            "E" | "e" => Variant::E,
            "F" | "f" | "full" => Variant::F,
            "sparse_only" => Variant::SparseOnly,
            "dense_only" => Variant::DenseOnly,
            other => return Err(Error::Config(format!("unknown variant `{other}`"))),
        })
    }
}

/// Network sizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelDims {
    pub height: usize,
    pub width: usize,
    pub stride: usize,
    pub d: usize,
    pub d_clip: usize,
    /// Sparse tokens per part.
    pub tokens: usize,
    pub transfer_hidden: usize,
    pub sparse_hidden: usize,
    pub dense_hidden: usize,
    pub global_hidden: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            stride: 4,
            d: 32,
            d_clip: 64,
            tokens: 2,
            transfer_hidden: 128,
            sparse_hidden: 64,
            dense_hidden: 32,
            global_hidden: 64,
        }
    }
}

impl ModelDims {
    pub fn feature_height(&self) -> usize {
        self.height / self.stride
    }

    pub fn feature_width(&self) -> usize {
        self.width / self.stride
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.height,
            self.width,
            self.stride,
            self.d,
            self.d_clip,
            self.tokens,
            self.transfer_hidden,
            self.sparse_hidden,
            self.dense_hidden,
            self.global_hidden,
        ];
        if all.contains(&0) {
            return Err(Error::Config("all model dimensions must be positive".into()));
        }
        if !self.height.is_multiple_of(self.stride) || !self.width.is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "image size {}x{} is not divisible by stride {}",
                self.height, self.width, self.stride
            )));
        }
        if self.feature_height() < 8 || self.feature_width() < 8 {
            return Err(Error::Config(format!(
                "feature map {}x{} is too small for three stride-2 layers (needs 8x8)",
                self.feature_height(),
                self.feature_width()
            )));
        }
        Ok(())
    }
}

/// Synthetic data settings, used when no dataset directory is given.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub categories: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub max_instruments: usize,
    pub occlusion_prob: f64,
    pub clutter_level: f64,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            categories: 4,
            train_samples: 200,
            eval_samples: 50,
            max_instruments: 3,
            occlusion_prob: 0.15,
            clutter_level: 0.5,
            seed: 2024,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Directory written by `gen` (with `train/` and `eval/`); synthetic
    /// data is generated in memory when absent.
    pub dataset_dir: Option<PathBuf>,
    pub data: DataConfig,
    pub dims: ModelDims,
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    /// Seed of the frozen image and text stubs.
    pub stub_seed: u64,
    pub precision: Precision,
    pub variant: Variant,
    /// Evaluate on the eval split every this many steps (0 = only at the end).
    pub eval_every: usize,
    pub checkpoint: Option<PathBuf>,
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset_dir: None,
            data: DataConfig::default(),
            dims: ModelDims::default(),
            optimizer: AdamConfig::default(),
            batch_size: 8,
            steps: 2000,
            seed: 0,
            stub_seed: 0x5eed,
            precision: Precision::F32,
            variant: Variant::F,
            eval_every: 0,
            checkpoint: None,
            init_checkpoint: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.data.categories < 2 {
            return Err(Error::Config("at least two categories are needed".into()));
        }
        if self.optimizer.lr.is_nan() || self.optimizer.lr <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}
