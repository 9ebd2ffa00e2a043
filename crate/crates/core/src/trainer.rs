//! Seeded patch-based training and tiled inference.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::Tape;
use crate::losses::{self, LossError, LossKind, TverskyParams};
use crate::patching::{self, PatchError, PatchSampler, PatchSpec, Window};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};
use crate::vnet::{Model, VNetConfig, VNetError};
use crate::volume::{Volume, VolumeError};

/// Substream ids derived from the training seed.
const INIT_STREAM: u64 = 0;
const SAMPLE_STREAM: u64 = 1;

/// Probabilities at or above this become foreground.
pub const THRESHOLD: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("no training volumes")]
    EmptyDataset,
    #[error("{what} became non-finite at step {step}")]
    NonFinite { step: usize, what: String },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Patch(#[from] PatchError),
    #[error(transparent)]
    Model(#[from] VNetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Volume(#[from] VolumeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub tversky: TverskyParams,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub steps: usize,
    pub patch: PatchSpec,
    pub seed: u64,
    /// Held-out evaluation period in steps; 0 disables periodic evaluation.
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Dice,
            tversky: TverskyParams::default(),
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 1,
            steps: 1000,
            patch: PatchSpec::default(),
            seed: 0,
            eval_every: 250,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.steps == 0 {
            return bad("steps must be at least 1");
        }
        self.patch.validate()?;
        Ok(())
    }
}

/// One SGD-with-momentum update: `v ← m·v + g`, `p ← p − lr·v`.
pub fn sgd_step(
    params: &mut [f64],
    grads: &[f64],
    velocity: &mut [f64],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if params.len() != grads.len() || params.len() != velocity.len() {
        return Err(TrainError::ShapeMismatch(format!(
            "params {}, grads {}, velocity {}",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LogRecord {
    Step { step: usize, loss: f64 },
    Eval { step: usize, dice: f64 },
}

impl fmt::Display for LogRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LogRecord::Step { step, loss } => write!(f, "step {step} loss {loss}"),
            LogRecord::Eval { step, dice } => write!(f, "eval {step} dice {dice}"),
        }
    }
}

impl FromStr for LogRecord {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let [kind, step, key, value] = parts[..] else {
            return Err(format!("malformed log line {s:?}"));
        };
        let step = step.parse().map_err(|_| format!("bad step in {s:?}"))?;
        let value: f64 = value.parse().map_err(|_| format!("bad value in {s:?}"))?;
        match (kind, key) {
            ("step", "loss") => Ok(LogRecord::Step { step, loss: value }),
            ("eval", "dice") => Ok(LogRecord::Eval { step, dice: value }),
            _ => Err(format!("unknown record {s:?}")),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub records: Vec<LogRecord>,
}

impl MetricLog {
    pub fn losses(&self) -> Vec<f64> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Step { loss, .. } => Some(*loss),
                _ => None,
            })
            .collect()
    }

    pub fn evals(&self) -> Vec<(usize, f64)> {
        self.records
            .iter()
            .filter_map(|r| match r {
                LogRecord::Eval { step, dice } => Some((*step, *dice)),
                _ => None,
            })
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(str::parse)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

impl fmt::Display for MetricLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.records {
            writeln!(f, "{r}")?;
        }
        Ok(())
    }
}

/// An image with its binary label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Volume,
    pub label: Volume,
}

/// Tiled inference settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    pub patch_size: [usize; 3],
    /// Defaults to half the patch when absent.
    pub overlap: Option<[usize; 3]>,
    pub window: Window,
    pub pad_value: f64,
    /// Worker threads evaluating tiles.
    pub threads: usize,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            patch_size: [32, 32, 32],
            overlap: None,
            window: Window::Hann,
            pad_value: 0.0,
            threads: 1,
        }
    }
}

impl InferenceConfig {
    pub fn overlap(&self) -> [usize; 3] {
        self.overlap
            .unwrap_or_else(|| patching::default_overlap(self.patch_size))
    }
}

/// Fresh model weights drawn from the training seed.
pub fn init_model(config: VNetConfig, seed: u64) -> Result<Model, TrainError> {
    Ok(Model::build(
        config,
        &mut RngStream::new(seed).split(INIT_STREAM),
    )?)
}

fn patch_tensor(data: Vec<f64>, size: [usize; 3]) -> Result<Tensor, TensorError> {
    // Volume axis 0 is fastest, so it maps onto the last tensor axis.
    Tensor::new(vec![1, 1, size[2], size[1], size[0]], data)
}

/// Per-voxel foreground probability for `image`, computed tile by tile and
/// blended with the configured window.
pub fn predict_volume(
    model: &Model,
    image: &Volume,
    cfg: &InferenceConfig,
) -> Result<Volume, TrainError> {
    let layout = patching::grid_tiles(image.extents(), cfg.patch_size, cfg.overlap())?
        .with_window(cfg.window);
    let run = |t: usize| -> Result<Vec<f64>, TrainError> {
        let tile = layout.extract(image.data(), t, cfg.pad_value);
        Ok(model
            .forward(&patch_tensor(tile, cfg.patch_size)?)?
            .into_data())
    };
    let threads = cfg.threads.clamp(1, layout.len().max(1));
    let preds: Vec<Vec<f64>> = if threads == 1 {
        (0..layout.len()).map(run).collect::<Result<_, _>>()?
    } else {
        let mut slots: Vec<Option<Result<Vec<f64>, TrainError>>> = vec![None; layout.len()];
        std::thread::scope(|s| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let run = &run;
                    let n = layout.len();
                    s.spawn(move || {
                        (w..n)
                            .step_by(threads)
                            .map(|t| (t, run(t)))
                            .collect::<Vec<_>>()
                    })
                })
                .collect();
            for h in handles {
                for (t, r) in h.join().expect("tile worker panicked") {
                    slots[t] = Some(r);
                }
            }
        });
        slots
            .into_iter()
            .map(|r| r.expect("every tile evaluated"))
            .collect::<Result<_, _>>()?
    };
    let probs = patching::stitch(&layout, &preds)?;
    Ok(image.with_data(probs)?)
}

pub fn threshold(probs: &Volume) -> Volume {
    probs.map_data(|p| if p >= THRESHOLD { 1.0 } else { 0.0 })
}

/// Hard Dice of the thresholded prediction against `label`.
pub fn hard_dice(model: &Model, sample: &Sample, cfg: &InferenceConfig) -> Result<f64, TrainError> {
    let mask = threshold(&predict_volume(model, &sample.image, cfg)?);
    let c = losses::counts(mask.data(), sample.label.data())?;
    Ok(losses::dice(&c))
}

pub fn mean_hard_dice(
    model: &Model,
    samples: &[Sample],
    cfg: &InferenceConfig,
) -> Result<f64, TrainError> {
    if samples.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut total = 0.0;
    for s in samples {
        total += hard_dice(model, s, cfg)?;
    }
    Ok(total / samples.len() as f64)
}

/// Optimise `model` on class-balanced patches drawn from `train_set`.
///
/// Each step samples `batch_size` patches from the seeded stream, takes the
/// soft overlap loss over the whole batch and applies one momentum SGD
/// update. When `held_out` is non-empty its mean hard Dice is logged every
/// `eval_every` steps and after the final step.
pub fn train(
    train_set: &[Sample],
    held_out: &[Sample],
    mut model: Model,
    cfg: &TrainConfig,
    inference: &InferenceConfig,
) -> Result<(Model, MetricLog), TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    if model.config().in_channels != 1 {
        return Err(TrainError::InvalidConfig(
            "model must take one input channel".into(),
        ));
    }
    let samplers = train_set
        .iter()
        .map(|s| PatchSampler::new(&s.image, &s.label, &cfg.patch))
        .collect::<Result<Vec<_>, _>>()?;
    let mut rng = RngStream::new(cfg.seed).split(SAMPLE_STREAM);
    let mut velocity: Vec<Vec<f64>> = model
        .parameters()
        .iter()
        .map(|p| vec![0.0; p.value.numel()])
        .collect();
    let size = cfg.patch.size;
    let voxels: usize = size.iter().product();
    let mut log = MetricLog::default();

    for step in 1..=cfg.steps {
        let mut images = Vec::with_capacity(cfg.batch_size * voxels);
        let mut truth = Vec::with_capacity(cfg.batch_size * voxels);
        for _ in 0..cfg.batch_size {
            let v = rng.below(samplers.len() as u64) as usize;
            let patch = samplers[v].sample(&mut rng)?;
            images.extend_from_slice(patch.image.data());
            truth.extend_from_slice(patch.label.data());
        }
        let batch = Tensor::new(vec![cfg.batch_size, 1, size[2], size[1], size[0]], images)?;

        let mut tape = Tape::new();
        let params = model.bind(&mut tape, true);
        let x = tape.constant(batch);
        let (pred, _) = model.forward_graph(&mut tape, &params, x)?;
        let loss_var = tape.soft_overlap_loss(pred, &truth, cfg.loss, &cfg.tversky)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "loss".into(),
            });
        }
        tape.backward(loss_var)?;

        for ((p, v), &var) in model
            .parameters_mut()
            .iter_mut()
            .zip(&mut velocity)
            .zip(&params)
        {
            let grad = tape.grad(var);
            let zeros;
            let g = match grad {
                Some(g) => g,
                None => {
                    zeros = vec![0.0; v.len()];
                    &zeros
                }
            };
            if g.iter().any(|x| !x.is_finite()) {
                return Err(TrainError::NonFinite {
                    step,
                    what: format!("gradient of {}", p.name),
                });
            }
            sgd_step(p.value.data_mut(), g, v, cfg.learning_rate, cfg.momentum)?;
        }
        if !model.all_finite() {
            return Err(TrainError::NonFinite {
                step,
                what: "parameters".into(),
            });
        }
        log.records.push(LogRecord::Step { step, loss });

        let due = cfg.eval_every > 0 && step % cfg.eval_every == 0;
        if !held_out.is_empty() && (due || step == cfg.steps) {
            let dice = mean_hard_dice(&model, held_out, inference)?;
            log.records.push(LogRecord::Eval { step, dice });
        }
    }
    Ok((model, log))
}
