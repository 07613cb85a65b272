//! Declarative run configuration (TOML).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ResizePolicy;
use crate::error::{Error, Result};
use crate::flow::{validate_schedule, SubnetKind, DEFAULT_CLAMP};
use crate::prior::{PriorKind, WeightMode, DEFAULT_GRID_BOUND};
use crate::trainer::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Coupling stack with any prior.
    Realnvp,
    /// Coupling stack with the grid topic prior.
    Ldanf,
    /// Fractal block with any prior.
    Ldafnf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConfig {
    #[serde(default = "default_prior_kind")]
    pub kind: PriorKind,
    /// Outer topics (grid prior) or mixture components (diagonal mixture).
    #[serde(default = "default_topics")]
    pub topics: usize,
    /// Grid components per dimension.
    #[serde(default = "default_components")]
    pub components: usize,
    #[serde(default = "default_bound")]
    pub bound: f64,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            kind: default_prior_kind(),
            topics: default_topics(),
            components: default_components(),
            bound: default_bound(),
        }
    }
}

fn default_prior_kind() -> PriorKind {
    PriorKind::Gaussian
}
fn default_topics() -> usize {
    2
}
fn default_components() -> usize {
    10
}
fn default_bound() -> f64 {
    DEFAULT_GRID_BOUND
}
fn default_couplings() -> usize {
    5
}
fn default_steps() -> usize {
    2
}
fn default_clamp() -> f64 {
    DEFAULT_CLAMP
}
fn default_subnet() -> SubnetKind {
    SubnetKind::Mlp
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    /// Number of couplings for the stack variants.
    #[serde(default = "default_couplings")]
    pub couplings: usize,
    #[serde(default = "default_subnet")]
    pub subnet: SubnetKind,
    /// Hidden width (MLP) or channel count (conv). Defaults: 256 / 32.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub fractal_schedule: Vec<usize>,
    #[serde(default = "default_steps")]
    pub steps_per_level: usize,
    /// Insert a squeeze before this coupling index (stack variants).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub squeeze_after: Option<usize>,
    #[serde(default)]
    pub mix1x1: bool,
    #[serde(default = "default_clamp")]
    pub clamp: f64,
    #[serde(default)]
    pub prior: PriorConfig,
}

impl ModelConfig {
    pub fn width(&self) -> usize {
        self.width.unwrap_or(match self.subnet {
            SubnetKind::Mlp => 256,
            SubnetKind::Conv => 32,
        })
    }

    /// Checks variant constraints against a per-sample input shape.
    pub fn validate(&self, shape: [usize; 3]) -> Result<()> {
        if self.width() == 0 {
            return Err(Error::config("model.width", "must be positive"));
        }
        if !(self.clamp > 0.0 && self.clamp.is_finite()) {
            return Err(Error::config("model.clamp", "must be positive"));
        }
        match self.variant {
            Variant::Ldanf if self.prior.kind != PriorKind::GridGmmLda => {
                return Err(Error::config(
                    "model.prior.kind",
                    "variant ldanf requires the grid-gmm-lda prior",
                ));
            }
            Variant::Ldafnf => {
                if self.fractal_schedule.is_empty() {
                    return Err(Error::config(
                        "model.fractal_schedule",
                        "variant ldafnf requires a fractal schedule",
                    ));
                }
                validate_schedule(&self.fractal_schedule, shape)?;
                if self.steps_per_level == 0 {
                    return Err(Error::config("model.steps_per_level", "must be positive"));
                }
            }
            _ => {
                if let Some(k) = self.squeeze_after {
                    if k > self.couplings {
                        return Err(Error::config("model.squeeze_after", "exceeds the coupling count"));
                    }
                    if !shape[1].is_multiple_of(2) || !shape[2].is_multiple_of(2) {
                        return Err(Error::config("model.squeeze_after", "squeeze needs even H and W"));
                    }
                }
            }
        }
        let p = &self.prior;
        if p.kind != PriorKind::Gaussian && p.topics == 0 {
            return Err(Error::config("model.prior.topics", "must be positive"));
        }
        if p.kind == PriorKind::GridGmmLda {
            if p.components == 0 {
                return Err(Error::config("model.prior.components", "must be positive"));
            }
            if !(p.bound >= 0.0 && p.bound.is_finite()) {
                return Err(Error::config("model.prior.bound", "must be non-negative"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetKind {
    Mnist,
    Fashion,
    Moons,
    RawGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: DatasetKind,
    /// IDX images (mnist/fashion) or raw f32 grid (raw-grid).
    #[serde(default)]
    pub train_path: Option<PathBuf>,
    #[serde(default)]
    pub train_labels: Option<PathBuf>,
    /// Separate validation file; otherwise validation is split off the tail
    /// of the training file.
    #[serde(default)]
    pub val_path: Option<PathBuf>,
    #[serde(default)]
    pub val_labels: Option<PathBuf>,
    #[serde(default)]
    pub resize: ResizePolicy,
    #[serde(default)]
    pub train_count: Option<usize>,
    #[serde(default)]
    pub val_count: Option<usize>,
    /// `C×H×W` of each raw-grid sample.
    #[serde(default)]
    pub raw_shape: Option<[usize; 3]>,
    /// Number of samples in the raw-grid file.
    #[serde(default)]
    pub raw_count: Option<usize>,
    #[serde(default = "default_moons_n")]
    pub moons_n: usize,
    #[serde(default = "default_moons_noise")]
    pub moons_noise: f64,
}

fn default_moons_n() -> usize {
    2000
}
fn default_moons_noise() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(default = "default_dir")]
    pub dir: PathBuf,
    #[serde(default = "default_grid")]
    pub grid_rows: usize,
    #[serde(default = "default_grid")]
    pub grid_cols: usize,
    #[serde(default = "default_temperatures")]
    pub temperatures: Vec<f64>,
    #[serde(default = "default_weight_mode")]
    pub weight_mode: WeightMode,
    /// Epochs between checkpoints; the final epoch is always saved.
    #[serde(default = "default_ckpt_every")]
    pub checkpoint_every: usize,
}

fn default_dir() -> PathBuf {
    PathBuf::from("runs/default")
}
fn default_grid() -> usize {
    8
}
fn default_temperatures() -> Vec<f64> {
    vec![0.2, 0.5, 1.0]
}
fn default_weight_mode() -> WeightMode {
    WeightMode::Resampled
}
fn default_ckpt_every() -> usize {
    1
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: default_dir(),
            grid_rows: default_grid(),
            grid_cols: default_grid(),
            temperatures: default_temperatures(),
            weight_mode: default_weight_mode(),
            checkpoint_every: default_ckpt_every(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

fn require_file(field: &str, path: &Option<PathBuf>, base: &Path) -> Result<Option<PathBuf>> {
    match path {
        None => Ok(None),
        Some(p) => {
            let full = if p.is_absolute() { p.clone() } else { base.join(p) };
            if full.is_file() {
                Ok(Some(full))
            } else {
                Err(Error::config(field, format!("file not found: {}", full.display())))
            }
        }
    }
}

impl RunConfig {
    /// Parses TOML. Relative paths are resolved against `base`, and every
    /// referenced input file must exist.
    pub fn from_toml(text: &str, base: &Path) -> Result<Self> {
        let de =
            toml::Deserializer::parse(text).map_err(|e| Error::config("config", e.message().trim().to_string()))?;
        let mut cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let field = if path == "." { "config".to_string() } else { path };
            Error::config(field, e.inner().message().trim().to_string())
        })?;
        cfg.resolve(base)?;
        cfg.train.validate()?;
        cfg.validate_output()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::config("--config", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    fn resolve(&mut self, base: &Path) -> Result<()> {
        let d = &mut self.data;
        match d.dataset {
            DatasetKind::Moons => {
                if d.moons_n < 2 {
                    return Err(Error::config("data.moons_n", "needs at least 2 points"));
                }
                if !(d.moons_noise >= 0.0 && d.moons_noise.is_finite()) {
                    return Err(Error::config("data.moons_noise", "must be non-negative"));
                }
            }
            DatasetKind::Mnist | DatasetKind::Fashion | DatasetKind::RawGrid => {
                if d.train_path.is_none() {
                    return Err(Error::config("data.train_path", "required for image datasets"));
                }
            }
        }
        if d.dataset == DatasetKind::RawGrid {
            if d.raw_shape.is_none() {
                return Err(Error::config("data.raw_shape", "required for raw-grid"));
            }
            if d.raw_count.is_none() {
                return Err(Error::config("data.raw_count", "required for raw-grid"));
            }
        }
        d.train_path = require_file("data.train_path", &d.train_path, base)?;
        d.train_labels = require_file("data.train_labels", &d.train_labels, base)?;
        d.val_path = require_file("data.val_path", &d.val_path, base)?;
        d.val_labels = require_file("data.val_labels", &d.val_labels, base)?;
        if self.output.dir.is_relative() {
            self.output.dir = base.join(&self.output.dir);
        }
        Ok(())
    }

    fn validate_output(&self) -> Result<()> {
        let o = &self.output;
        if o.grid_rows == 0 || o.grid_cols == 0 {
            return Err(Error::config("output.grid_rows", "grid must be at least 1×1"));
        }
        if let Some(t) = o.temperatures.iter().find(|t| !(**t > 0.0 && t.is_finite())) {
            return Err(Error::config(
                "output.temperatures",
                format!("temperature {t} must be positive"),
            ));
        }
        if o.checkpoint_every == 0 {
            return Err(Error::config("output.checkpoint_every", "must be positive"));
        }
        Ok(())
    }
}
