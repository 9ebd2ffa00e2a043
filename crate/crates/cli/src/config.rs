//! Pipeline configuration: one JSON document, then flag overrides on top.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Result;
use serde::{Deserialize, Serialize};
use voxelseg::losses::{LossKind, TverskyParams};
use voxelseg::normalize::NormalizationSpec;
use voxelseg::patching::{PatchSpec, Window};
use voxelseg::phantom::PhantomConfig;
use voxelseg::trainer::{InferenceConfig, TrainConfig};
use voxelseg::VNetConfig;

use crate::CliError;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub normalization: NormalizationSpec,
    pub patch: PatchSection,
    pub model: VNetConfig,
    pub train: TrainSection,
    pub io: IoSection,
    pub phantom: PhantomConfig,
}

/// Patch geometry shared by sampling, training and tiled prediction. Sizes
/// are in volume axis order (i, j, k).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PatchSection {
    pub size: [usize; 3],
    pub fg_fraction: f64,
    pub pad_value_image: f64,
    pub pad_value_label: f64,
    /// Inference overlap; half the patch when absent.
    pub overlap: Option<[usize; 3]>,
    pub window: Window,
}

impl Default for PatchSection {
    fn default() -> Self {
        let spec = PatchSpec::default();
        Self {
            size: spec.size,
            fg_fraction: spec.fg_fraction,
            pad_value_image: spec.pad_value_image,
            pad_value_label: spec.pad_value_label,
            overlap: None,
            window: Window::default(),
        }
    }
}

impl PatchSection {
    pub fn spec(&self) -> PatchSpec {
        PatchSpec {
            size: self.size,
            fg_fraction: self.fg_fraction,
            pad_value_image: self.pad_value_image,
            pad_value_label: self.pad_value_label,
        }
    }

    pub fn inference(&self, threads: usize) -> InferenceConfig {
        InferenceConfig {
            patch_size: self.size,
            overlap: self.overlap,
            window: self.window,
            pad_value: self.pad_value_image,
            threads,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub loss: LossKind,
    /// Tversky false-positive weight; beta is `1 - alpha`.
    pub alpha: f64,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub seed: u64,
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        Self {
            loss: d.loss,
            alpha: d.tversky.alpha(),
            learning_rate: d.learning_rate,
            momentum: d.momentum,
            batch_size: d.batch_size,
            steps: d.steps,
            seed: d.seed,
            eval_every: d.eval_every,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub train_images: Vec<PathBuf>,
    pub train_labels: Vec<PathBuf>,
    pub held_out_images: Vec<PathBuf>,
    pub held_out_labels: Vec<PathBuf>,
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub patch_size: Option<[usize; 3]>,
    pub overlap: Option<[usize; 3]>,
    pub loss: Option<LossKind>,
    pub alpha: Option<f64>,
    pub window: Option<Window>,
}

impl PipelineConfig {
    /// Read `path` (or start from defaults), apply `overrides` and validate.
    /// Relative io paths resolve against the config file's directory.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            None => PipelineConfig::default(),
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|e| match e.kind() {
                    std::io::ErrorKind::NotFound => {
                        anyhow::Error::new(CliError::FileNotFound(p.to_path_buf()))
                    }
                    _ => anyhow::Error::new(e).context(format!("reading {}", p.display())),
                })?;
                let mut cfg: PipelineConfig = serde_json::from_str(&text)
                    .map_err(|e| CliError::ConfigInvalid(format!("{}: {e}", p.display())))?;
                if let Some(base) = p.parent() {
                    cfg.io.resolve_against(base);
                }
                cfg
            }
        };
        cfg.apply(overrides);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(seed) = o.seed {
            self.train.seed = seed;
            self.phantom.seed = seed;
        }
        if let Some(size) = o.patch_size {
            self.patch.size = size;
        }
        if o.overlap.is_some() {
            self.patch.overlap = o.overlap;
        }
        if let Some(loss) = o.loss {
            self.train.loss = loss;
        }
        if let Some(alpha) = o.alpha {
            self.train.alpha = alpha;
        }
        if let Some(window) = o.window {
            self.patch.window = window;
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| {
            CliError::ConfigInvalid(format!("{section}: {e}"))
        };
        self.normalization
            .validate()
            .map_err(|e| invalid("normalization", &e))?;
        self.patch
            .spec()
            .validate()
            .map_err(|e| invalid("patch", &e))?;
        let overlap = self.patch.inference(1).overlap();
        if (0..3).any(|a| overlap[a] >= self.patch.size[a]) {
            return Err(invalid(
                "patch",
                &format!(
                    "overlap {overlap:?} must be smaller than size {:?}",
                    self.patch.size
                ),
            ));
        }
        self.model.validate().map_err(|e| invalid("model", &e))?;
        self.train_config()?
            .validate()
            .map_err(|e| invalid("train", &e))?;
        self.phantom
            .validate()
            .map_err(|e| invalid("phantom", &e))?;
        let io = &self.io;
        if io.train_images.len() != io.train_labels.len()
            || io.held_out_images.len() != io.held_out_labels.len()
        {
            return Err(invalid("io", &"every image needs exactly one label"));
        }
        Ok(())
    }

    pub fn tversky(&self) -> Result<TverskyParams, CliError> {
        TverskyParams::from_alpha(self.train.alpha)
            .map_err(|e| CliError::ConfigInvalid(format!("train: {e}")))
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let t = &self.train;
        Ok(TrainConfig {
            loss: t.loss,
            tversky: self.tversky()?,
            learning_rate: t.learning_rate,
            momentum: t.momentum,
            batch_size: t.batch_size,
            steps: t.steps,
            patch: self.patch.spec(),
            seed: t.seed,
            eval_every: t.eval_every,
        })
    }
}

impl IoSection {
    fn resolve_against(&mut self, base: &Path) {
        for list in [
            &mut self.train_images,
            &mut self.train_labels,
            &mut self.held_out_images,
            &mut self.held_out_labels,
        ] {
            for p in list.iter_mut() {
                if p.is_relative() {
                    *p = base.join(&*p);
                }
            }
        }
    }
}

/// Parse `d,h,w` (slowest axis first) into volume axis order `[i, j, k]`.
pub fn parse_dhw(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [d, h, w] = parts.as_slice() else {
        return Err(format!("expected d,h,w but got {s:?}"));
    };
    let num = |x: &str| x.parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([num(w)?, num(h)?, num(d)?])
}

/// Tile-level worker count: the available cores, capped by
/// `VOXELSEG_THREADS` when set.
pub fn thread_budget() -> Result<usize> {
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    match std::env::var("VOXELSEG_THREADS") {
        Err(_) => Ok(cores),
        Ok(v) => {
            let cap: usize = v.parse().ok().filter(|&n| n > 0).ok_or_else(|| {
                CliError::ConfigInvalid(format!("VOXELSEG_THREADS={v:?} is not a positive integer"))
            })?;
            Ok(cap.min(cores))
        }
    }
}

/// Read an input file, reporting a missing path as `FileNotFound`.
pub fn read_input(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => CliError::FileNotFound(path.to_path_buf()).into(),
        _ => anyhow::Error::new(e).context(format!("reading {}", path.display())),
    })
}
