//! A small 3D VNet.
//!
//! Encoder stages run `convs_per_stage` same-padded convolutions, each
//! followed by the nonlinearity, and add the stage input back onto the
//! result (through a learned 1×1×1 projection when the channel counts
//! differ). Stages are joined by 2×2×2 stride-2 convolutions. The decoder
//! mirrors this with 2×2×2 stride-2 transposed convolutions, concatenates
//! the matching encoder output, convolves, and adds the upsampled tensor
//! back as its residual. A final 1×1×1 convolution and a sigmoid produce a
//! per-voxel foreground probability.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Tape, Var};
use crate::rng::RngStream;
use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VNetError {
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("input shape {got:?} incompatible with model: {reason}")]
    ShapeMismatch { got: Vec<usize>, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Nonlinearity {
    Relu,
    Prelu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputHead {
    Sigmoid,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VNetConfig {
    pub in_channels: usize,
    pub stage_channels: Vec<usize>,
    pub convs_per_stage: usize,
    pub kernel: [usize; 3],
    pub nonlinearity: Nonlinearity,
    pub output: OutputHead,
}

impl Default for VNetConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            stage_channels: vec![8, 16, 32],
            convs_per_stage: 2,
            kernel: [3, 3, 3],
            nonlinearity: Nonlinearity::Prelu,
            output: OutputHead::Sigmoid,
        }
    }
}

impl VNetConfig {
    pub fn validate(&self) -> Result<(), VNetError> {
        let bad = |m: &str| Err(VNetError::InvalidConfig(m.to_string()));
        if self.stage_channels.len() < 2 {
            return bad("at least two stages are required");
        }
        if self.in_channels == 0 || self.stage_channels.contains(&0) {
            return bad("channel counts must be positive");
        }
        if self.convs_per_stage == 0 {
            return bad("convs_per_stage must be at least 1");
        }
        if self.kernel.iter().any(|&k| k == 0 || k % 2 == 0) {
            return bad("kernel extents must be odd for same padding");
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial extents must be multiples of this.
    pub fn divisor(&self) -> usize {
        1 << (self.stages() - 1)
    }

    fn padding(&self) -> [usize; 3] {
        [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2]
    }
}

/// One learned tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    weight: usize,
    bias: usize,
    slope: Option<usize>,
}

#[derive(Debug, Clone)]
struct StageIdx {
    convs: Vec<ConvIdx>,
    projection: Option<ConvIdx>,
}

#[derive(Debug, Clone)]
struct Layout {
    encoders: Vec<StageIdx>,
    downs: Vec<ConvIdx>,
    ups: Vec<ConvIdx>,
    decoders: Vec<StageIdx>,
    head: ConvIdx,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum InitKind {
    Weight { fan_in: usize },
    Zero,
    Slope,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: InitKind,
}

struct LayoutBuilder {
    specs: Vec<ParamSpec>,
    activation: Nonlinearity,
}

impl LayoutBuilder {
    fn push(&mut self, name: String, shape: Vec<usize>, init: InitKind) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    /// Convolution weight `[out, in, k]`, bias, and optional activation slope.
    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: [usize; 3], act: bool) -> ConvIdx {
        let fan_in = inp * k.iter().product::<usize>();
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![out, inp, k[0], k[1], k[2]],
            InitKind::Weight { fan_in },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![out], InitKind::Zero);
        let slope = (act && self.activation == Nonlinearity::Prelu)
            .then(|| self.push(format!("{prefix}.slope"), vec![1], InitKind::Slope));
        ConvIdx {
            weight,
            bias,
            slope,
        }
    }

    /// Transposed 2×2×2 convolution, weight layout `[in, out, 2, 2, 2]`.
    fn up(&mut self, prefix: &str, inp: usize, out: usize) -> ConvIdx {
        let weight = self.push(
            format!("{prefix}.weight"),
            vec![inp, out, 2, 2, 2],
            InitKind::Weight { fan_in: inp },
        );
        let bias = self.push(format!("{prefix}.bias"), vec![out], InitKind::Zero);
        let slope = (self.activation == Nonlinearity::Prelu)
            .then(|| self.push(format!("{prefix}.slope"), vec![1], InitKind::Slope));
        ConvIdx {
            weight,
            bias,
            slope,
        }
    }
}

fn layout(cfg: &VNetConfig) -> (Layout, Vec<ParamSpec>) {
    let mut b = LayoutBuilder {
        specs: Vec::new(),
        activation: cfg.nonlinearity,
    };
    let ch = &cfg.stage_channels;
    let s = ch.len();
    let mut encoders = Vec::with_capacity(s);
    let mut downs = Vec::with_capacity(s - 1);
    for stage in 0..s {
        let inp = if stage == 0 {
            cfg.in_channels
        } else {
            ch[stage]
        };
        let mut convs = Vec::with_capacity(cfg.convs_per_stage);
        for i in 0..cfg.convs_per_stage {
            let cin = if i == 0 { inp } else { ch[stage] };
            convs.push(b.conv(
                &format!("enc{stage}.conv{i}"),
                ch[stage],
                cin,
                cfg.kernel,
                true,
            ));
        }
        let projection = (inp != ch[stage]).then(|| {
            b.conv(
                &format!("enc{stage}.proj"),
                ch[stage],
                inp,
                [1, 1, 1],
                false,
            )
        });
        encoders.push(StageIdx { convs, projection });
        if stage + 1 < s {
            downs.push(b.conv(
                &format!("down{stage}"),
                ch[stage + 1],
                ch[stage],
                [2, 2, 2],
                true,
            ));
        }
    }
    let mut ups = Vec::with_capacity(s - 1);
    let mut decoders = Vec::with_capacity(s - 1);
    for stage in (0..s - 1).rev() {
        ups.push(b.up(&format!("up{stage}"), ch[stage + 1], ch[stage]));
        let mut convs = Vec::with_capacity(cfg.convs_per_stage);
        for i in 0..cfg.convs_per_stage {
            let cin = if i == 0 { 2 * ch[stage] } else { ch[stage] };
            convs.push(b.conv(
                &format!("dec{stage}.conv{i}"),
                ch[stage],
                cin,
                cfg.kernel,
                true,
            ));
        }
        decoders.push(StageIdx {
            convs,
            projection: None,
        });
    }
    let head = b.conv("head", 1, ch[0], [1, 1, 1], false);
    (
        Layout {
            encoders,
            downs,
            ups,
            decoders,
            head,
        },
        b.specs,
    )
}

/// Shapes and names of every parameter for `cfg`, in storage order.
pub fn parameter_shapes(cfg: &VNetConfig) -> Result<Vec<(String, Vec<usize>)>, VNetError> {
    cfg.validate()?;
    Ok(layout(cfg)
        .1
        .into_iter()
        .map(|p| (p.name, p.shape))
        .collect())
}

/// A VNet with its parameters.
#[derive(Debug, Clone)]
pub struct Model {
    config: VNetConfig,
    layout: Layout,
    params: Vec<Parameter>,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

pub const PRELU_INIT_SLOPE: f64 = 0.25;

impl Model {
    /// Initialise weights from N(0, 1/fan_in); biases start at zero and
    /// PReLU slopes at 0.25.
    pub fn build(config: VNetConfig, rng: &mut RngStream) -> Result<Self, VNetError> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        let params = specs
            .into_iter()
            .map(|spec| {
                let n: usize = spec.shape.iter().product();
                let data = match spec.init {
                    InitKind::Weight { fan_in } => {
                        let std = 1.0 / (fan_in as f64).sqrt();
                        (0..n).map(|_| std * rng.normal()).collect()
                    }
                    InitKind::Zero => vec![0.0; n],
                    InitKind::Slope => vec![PRELU_INIT_SLOPE; n],
                };
                Parameter {
                    name: spec.name,
                    value: Tensor::new(spec.shape, data).expect("spec shape"),
                }
            })
            .collect();
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    /// Assemble a model from named tensors; every expected parameter must be
    /// present exactly once with the expected shape.
    pub fn from_parameters(
        config: VNetConfig,
        mut tensors: Vec<(String, Tensor)>,
    ) -> Result<Self, VNetError> {
        config.validate()?;
        let (layout, specs) = layout(&config);
        if tensors.len() != specs.len() {
            return Err(VNetError::InvalidConfig(format!(
                "expected {} parameters, got {}",
                specs.len(),
                tensors.len()
            )));
        }
        let mut params = Vec::with_capacity(specs.len());
        for spec in specs {
            let pos = tensors
                .iter()
                .position(|(n, _)| *n == spec.name)
                .ok_or_else(|| VNetError::InvalidConfig(format!("missing {}", spec.name)))?;
            let (name, value) = tensors.swap_remove(pos);
            if value.shape() != spec.shape.as_slice() {
                return Err(VNetError::InvalidConfig(format!(
                    "{name}: shape {:?}, expected {:?}",
                    value.shape(),
                    spec.shape
                )));
            }
            params.push(Parameter { name, value });
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &VNetConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Parameter] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Parameter] {
        &mut self.params
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.all_finite())
    }

    /// Place every parameter on `tape`, tracked or not.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), VNetError> {
        let fail = |reason: String| {
            Err(VNetError::ShapeMismatch {
                got: shape.to_vec(),
                reason,
            })
        };
        if shape.len() != 5 {
            return fail("expected [N, C, D, H, W]".into());
        }
        if shape[1] != self.config.in_channels {
            return fail(format!(
                "expected {} input channels",
                self.config.in_channels
            ));
        }
        let div = self.config.divisor();
        if shape[2..].iter().any(|&e| e == 0 || e % div != 0) {
            return fail(format!(
                "spatial extents must be positive multiples of {div}"
            ));
        }
        Ok(())
    }

    fn conv(
        &self,
        tape: &mut Tape,
        p: &[Var],
        idx: ConvIdx,
        x: Var,
        padding: [usize; 3],
    ) -> Result<Var, VNetError> {
        let y = tape.conv3d(x, p[idx.weight], Some(p[idx.bias]), [1, 1, 1], padding)?;
        Ok(y)
    }

    fn activate(&self, tape: &mut Tape, p: &[Var], idx: ConvIdx, x: Var) -> Result<Var, VNetError> {
        Ok(match (self.config.nonlinearity, idx.slope) {
            (Nonlinearity::Prelu, Some(s)) => tape.prelu(x, p[s])?,
            _ => tape.relu(x),
        })
    }

    fn residual_stage(
        &self,
        tape: &mut Tape,
        p: &[Var],
        stage: &StageIdx,
        input: Var,
        residual: Var,
    ) -> Result<Var, VNetError> {
        let pad = self.config.padding();
        let mut h = input;
        for &c in &stage.convs {
            h = self.conv(tape, p, c, h, pad)?;
            h = self.activate(tape, p, c, h)?;
        }
        let skip = match stage.projection {
            Some(proj) => self.conv(tape, p, proj, residual, [0, 0, 0])?,
            None => residual,
        };
        Ok(tape.add(h, skip)?)
    }

    /// Run encoder stage `stage` alone (convolutions plus residual).
    pub fn encoder_stage(
        &self,
        tape: &mut Tape,
        params: &[Var],
        stage: usize,
        input: Var,
    ) -> Result<Var, VNetError> {
        let idx = self
            .layout
            .encoders
            .get(stage)
            .ok_or_else(|| VNetError::InvalidConfig(format!("no encoder stage {stage}")))?;
        self.residual_stage(tape, params, idx, input, input)
    }

    /// Build the forward graph on `tape`. Returns the probability map and
    /// the bottleneck activation.
    pub fn forward_graph(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
    ) -> Result<(Var, Var), VNetError> {
        self.check_input(tape.value(x).shape())?;
        let stages = self.config.stages();
        let mut skips = Vec::with_capacity(stages);
        let mut h = x;
        for s in 0..stages {
            h = self.residual_stage(tape, params, &self.layout.encoders[s], h, h)?;
            if s + 1 < stages {
                skips.push(h);
                let d = self.layout.downs[s];
                h = tape.conv3d_down(h, params[d.weight], Some(params[d.bias]))?;
                h = self.activate(tape, params, d, h)?;
            }
        }
        let bottleneck = h;
        for (i, (up, dec)) in self
            .layout
            .ups
            .iter()
            .zip(&self.layout.decoders)
            .enumerate()
        {
            let skip = skips[stages - 2 - i];
            let u = tape.conv_transpose3d_up(h, params[up.weight], Some(params[up.bias]))?;
            let u = self.activate(tape, params, *up, u)?;
            let cat = tape.concat_channels(u, skip)?;
            h = self.residual_stage(tape, params, dec, cat, u)?;
        }
        let head = self.layout.head;
        let logits = self.conv(tape, params, head, h, [0, 0, 0])?;
        Ok((tape.sigmoid(logits), bottleneck))
    }

    /// Inference: probability map with the same shape as `x`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor, VNetError> {
        let mut tape = Tape::new();
        let params = self.bind(&mut tape, false);
        let input = tape.constant(x.clone());
        let (out, _) = self.forward_graph(&mut tape, &params, input)?;
        Ok(tape.value(out).clone())
    }
}
