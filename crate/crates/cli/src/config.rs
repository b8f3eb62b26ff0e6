//! Run configuration: one JSON document holding every stage's settings.
//! Values resolve as defaults, then the `--config` file, then flags.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use mmcd_core::changemap::{KappaVariant, PixelDistance, DEFAULT_BINS, DEFAULT_FILTER_SIGMA};
use mmcd_core::synthgen::SynthConfig;
use mmcd_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub synth: SynthConfig,
    pub train: TrainConfig,
    pub detect: DetectSettings,
    pub paths: Paths,
}

/// Difference-image and thresholding settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DetectSettings {
    /// Gaussian smoothing of the difference image; 0 disables it.
    pub filter_sigma: f64,
    pub bins: usize,
    /// Unsquared per-pixel norms instead of squared ones.
    pub root: bool,
    /// Per-modality weights; `None` uses one over the channel count.
    pub weight_x: Option<f64>,
    pub weight_y: Option<f64>,
    pub kappa_variant: KappaVariant,
    /// Overrides the tile side stored in the checkpoint.
    pub tile_size: Option<usize>,
    pub tile_overlap: Option<usize>,
}

impl Default for DetectSettings {
    fn default() -> Self {
        Self {
            filter_sigma: DEFAULT_FILTER_SIGMA,
            bins: DEFAULT_BINS,
            root: false,
            weight_x: None,
            weight_y: None,
            kappa_variant: KappaVariant::default(),
            tile_size: None,
            tile_overlap: None,
        }
    }
}

impl DetectSettings {
    pub fn distance(&self) -> PixelDistance {
        if self.root {
            PixelDistance::Root
        } else {
            PixelDistance::Squared
        }
    }
}

/// Input and output locations; each has a matching flag.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub x: Option<PathBuf>,
    pub y: Option<PathBuf>,
    pub gt: Option<PathBuf>,
    pub map: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }
}

/// Replaces `slot` with `value` when the flag was given.
pub fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

/// Like [`set`] for optional settings.
pub fn set_some<T>(slot: &mut Option<T>, value: Option<T>) {
    if value.is_some() {
        *slot = value;
    }
}

/// Resolves a required path from its flag or the config file.
pub fn require(path: &Option<PathBuf>, flag: &str) -> Result<PathBuf> {
    path.clone()
        .with_context(|| format!("missing {flag} (pass the flag or set it under \"paths\" in the config)"))
}
