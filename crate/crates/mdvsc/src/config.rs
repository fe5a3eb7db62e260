//! TOML run configuration.
//!
//! ```toml
//! [data]
//! manifest = "clips.txt"      # required
//! heldout = "clips/heldout"   # optional; defaults to the last manifest clip
//!
//! [model]
//! channel_dim = 32
//! gop_size = 3
//! resblock_depth = 3
//!
//! [train]
//! steps = 2000
//! batch_size = 8
//! lr_init = 1e-4
//! seed = 0
//!
//! [output]
//! dir = "runs/toy"
//! ```
//!
//! Relative data paths resolve against the config file's directory. A
//! relative output directory resolves against `$MDVSC_OUTPUT_ROOT` when it
//! is set.

use std::fs;
use std::path::{Path, PathBuf};

use mdvsc_core::model::ModelConfig;
use mdvsc_core::train::{TrainConfig, DEFAULT_CBR_GRID};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const OUTPUT_ROOT_ENV: &str = "MDVSC_OUTPUT_ROOT";

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub manifest: Option<PathBuf>,
    pub heldout: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub channel_dim: usize,
    pub gop_size: usize,
    pub resblock_depth: usize,
    pub snr_train_db: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelConfig::desk().into()
    }
}

impl From<ModelConfig> for ModelSection {
    fn from(c: ModelConfig) -> Self {
        Self { channel_dim: c.channel_dim, gop_size: c.gop_size, resblock_depth: c.resblock_depth, snr_train_db: c.snr_train_db }
    }
}

impl From<ModelSection> for ModelConfig {
    fn from(s: ModelSection) -> Self {
        Self { channel_dim: s.channel_dim, gop_size: s.gop_size, resblock_depth: s.resblock_depth, snr_train_db: s.snr_train_db }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lambda_rd: f64,
    pub beta_rate: f64,
    pub lr_init: f64,
    pub batch_size: usize,
    pub steps: u64,
    pub crop: usize,
    pub cbr_grid: Vec<f64>,
    pub seed: u64,
    /// Steps between checkpoints; the final step always writes one.
    pub checkpoint_every: u64,
    /// Steps between held-out evaluations.
    pub eval_every: u64,
    /// Bandwidth ratio of held-out evaluations.
    pub eval_cbr: f64,
}

impl Default for TrainSection {
    fn default() -> Self {
        let t = TrainConfig::desk();
        Self {
            lambda_rd: t.lambda_rd,
            beta_rate: t.beta_rate,
            lr_init: t.lr_init,
            batch_size: t.batch_size,
            steps: t.steps,
            crop: t.crop,
            cbr_grid: DEFAULT_CBR_GRID.to_vec(),
            seed: t.seed,
            checkpoint_every: 500,
            eval_every: 100,
            eval_cbr: 0.015,
        }
    }
}

impl TrainSection {
    pub fn to_config(&self, model: &ModelSection) -> TrainConfig {
        TrainConfig {
            lambda_rd: self.lambda_rd,
            beta_rate: self.beta_rate,
            lr_init: self.lr_init,
            batch_size: self.batch_size,
            steps: self.steps,
            crop: self.crop,
            gop_size: model.gop_size,
            snr_train_db: model.snr_train_db,
            cbr_grid: self.cbr_grid.clone(),
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunFile {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub output: OutputSection,
}

/// Command-line values that replace file values.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub manifest: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub steps: Option<u64>,
    pub seed: Option<u64>,
    pub lr_init: Option<f64>,
    pub batch_size: Option<usize>,
}

/// Fully resolved training run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub heldout: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub checkpoint_every: u64,
    pub eval_every: u64,
    pub eval_cbr: f64,
}

pub fn output_root() -> Option<PathBuf> {
    std::env::var_os(OUTPUT_ROOT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

/// Resolves an output directory against `$MDVSC_OUTPUT_ROOT`.
pub fn resolve_output(dir: &Path) -> PathBuf {
    match output_root() {
        Some(root) if dir.is_relative() => root.join(dir),
        _ => dir.to_path_buf(),
    }
}

pub fn parse_run_file(text: &str) -> Result<RunFile> {
    toml::from_str(text).map_err(|e| Error::Usage(format!("invalid config: {e}")))
}

impl RunConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        let file = parse_run_file(&text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))?;
        Self::resolve(file, path.parent().unwrap_or(Path::new(".")), overrides)
    }

    pub fn resolve(file: RunFile, base: &Path, overrides: &Overrides) -> Result<Self> {
        let manifest = overrides
            .manifest
            .clone()
            .or_else(|| file.data.manifest.as_ref().map(|m| base.join(m)))
            .ok_or_else(|| Error::Usage("missing required field `data.manifest`".into()))?;
        let output = overrides
            .output
            .clone()
            .or_else(|| file.output.dir.clone())
            .ok_or_else(|| Error::Usage("missing required field `output.dir`".into()))?;
        let mut train_section = file.train.clone();
        if let Some(v) = overrides.steps {
            train_section.steps = v;
        }
        if let Some(v) = overrides.seed {
            train_section.seed = v;
        }
        if let Some(v) = overrides.lr_init {
            train_section.lr_init = v;
        }
        if let Some(v) = overrides.batch_size {
            train_section.batch_size = v;
        }
        let model: ModelConfig = file.model.into();
        let train = train_section.to_config(&file.model);
        model.validate().map_err(|e| Error::Usage(format!("[model]: {e}")))?;
        train.validate().map_err(|e| Error::Usage(format!("[train]: {e}")))?;
        if train_section.checkpoint_every == 0 || train_section.eval_every == 0 {
            return Err(Error::Usage("[train]: checkpoint_every and eval_every must be positive".into()));
        }
        if train_section.eval_cbr.is_nan() || train_section.eval_cbr <= 0.0 {
            return Err(Error::Usage("[train]: eval_cbr must be positive".into()));
        }
        Ok(Self {
            manifest,
            heldout: file.data.heldout.map(|h| base.join(h)),
            output_dir: resolve_output(&output),
            model,
            train,
            checkpoint_every: train_section.checkpoint_every,
            eval_every: train_section.eval_every,
            eval_cbr: train_section.eval_cbr,
        })
    }
}
