//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends a node to the [`Tape`] and returns a [`Var`]
//! handle. Nodes are stored in creation order, which is a topological order,
//! so [`Tape::backward`] sweeps the node list once in reverse.
//!
//! Gradients are kept for leaves created with `requires_grad = true`
//! (typically model parameters). Calling `backward` again without
//! [`Tape::zero_grad`] adds the new gradients to the stored ones.
//!
//! There is no implicit broadcasting: binary operations require equal
//! shapes, and only scalar constants combine with tensors.

use crate::conv::{self, ConvGeometry};
use crate::losses::{self, LossError, LossKind, TverskyParams};
use crate::tensor::{Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Relu(Var),
    Prelu(Var, Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatChannels(Var, Var),
    Conv {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    ConvTranspose {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        /// Geometry of the forward convolution this operator is adjoint to.
        geom: ConvGeometry,
    },
    SoftOverlap {
        pred: Var,
        grad: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Recording of a computation for reverse-mode differentiation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn five_d(op: &'static str, t: &Tensor) -> Result<[usize; 5], TensorError> {
    match *t.shape() {
        [a, b, c, d, e] => Ok([a, b, c, d, e]),
        _ => Err(TensorError::InvalidArgument {
            op,
            reason: format!("expected a 5-D tensor, got shape {:?}", t.shape()),
        }),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, delta: Vec<f64>) {
    match slot {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(delta) {
                *a += b;
            }
        }
        None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf whose gradient is tracked and stored.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a tracked leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        node: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(t, node, &[a, b]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, node: Op) -> Var {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| f(x)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        self.push(t, node, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::MulScalar(a, c))
    }

    /// `max(x, 0)`; the derivative at exactly 0 is taken as 0.
    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Parametric ReLU with a learned scalar slope for negative inputs.
    pub fn prelu(&mut self, a: Var, slope: Var) -> Result<Var, TensorError> {
        let s = self.value(slope);
        if !s.is_scalar() {
            return Err(TensorError::InvalidArgument {
                op: "prelu",
                reason: format!("slope must be scalar, got shape {:?}", s.shape()),
            });
        }
        let s = s.data()[0];
        Ok(self.unary(a, |x| if x > 0.0 { x } else { s * x }, Op::Prelu(a, slope)))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, TensorError> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    /// Concatenate two `[N, C, D, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let sa = five_d("concat", ta)?;
        let sb = five_d("concat", tb)?;
        if sa[0] != sb[0] || sa[2..] != sb[2..] {
            return Err(mismatch("concat", ta, tb));
        }
        let spatial: usize = sa[2..].iter().product();
        let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
        let mut data = Vec::with_capacity(ta.numel() + tb.numel());
        for n in 0..sa[0] {
            data.extend_from_slice(&ta.data()[n * ca..(n + 1) * ca]);
            data.extend_from_slice(&tb.data()[n * cb..(n + 1) * cb]);
        }
        let t = Tensor::new(vec![sa[0], sa[1] + sb[1], sa[2], sa[3], sa[4]], data)?;
        Ok(self.push(t, Op::ConcatChannels(a, b), &[a, b]))
    }

    fn conv_geometry(
        &self,
        op: &'static str,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<ConvGeometry, TensorError> {
        let (tx, tk) = (self.value(x), self.value(k));
        let sx = five_d(op, tx)?;
        let sk = five_d(op, tk)?;
        if sx[1] != sk[1] {
            return Err(mismatch(op, tx, tk));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [sk[0]] {
                return Err(mismatch(op, tk, tb));
            }
        }
        let g = ConvGeometry {
            batch: sx[0],
            in_channels: sx[1],
            out_channels: sk[0],
            input: [sx[2], sx[3], sx[4]],
            kernel: [sk[2], sk[3], sk[4]],
            stride,
            padding,
        };
        if g.output().is_none() {
            return Err(mismatch(op, tx, tk));
        }
        Ok(g)
    }

    /// 3D cross-correlation of `x [N, C, D, H, W]` with `k [F, C, kd, kh, kw]`,
    /// zero padding, optional per-channel bias `[F]`.
    pub fn conv3d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var, TensorError> {
        let g = self.conv_geometry("conv3d", x, k, bias, stride, padding)?;
        let out = g.output().expect("checked");
        let mut y = conv::conv3d_forward(self.value(x).data(), self.value(k).data(), &g);
        let spatial: usize = out.iter().product();
        if let Some(b) = bias {
            conv::add_channel_bias(&mut y, self.value(b).data(), g.batch, spatial);
        }
        let t = Tensor::new(vec![g.batch, g.out_channels, out[0], out[1], out[2]], y)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::Conv {
                input: x,
                kernel: k,
                bias,
                geom: g,
            },
            &inputs,
        ))
    }

    /// 2×2×2, stride-2 convolution that halves every spatial extent.
    pub fn conv3d_down(&mut self, x: Var, k: Var, bias: Option<Var>) -> Result<Var, TensorError> {
        let tx = self.value(x);
        let sx = five_d("conv3d_down", tx)?;
        if sx[2..].iter().any(|e| e % 2 != 0) {
            return Err(TensorError::OddExtent(sx[2..].to_vec()));
        }
        let sk = five_d("conv3d_down", self.value(k))?;
        if sk[2..] != [2, 2, 2] {
            return Err(TensorError::InvalidArgument {
                op: "conv3d_down",
                reason: format!("kernel must be 2x2x2, got {:?}", &sk[2..]),
            });
        }
        self.conv3d(x, k, bias, [2, 2, 2], [0, 0, 0])
    }

    /// Transposed convolution: the adjoint of `conv3d` with the same kernel,
    /// stride and padding. `k` has layout `[C_in, C_out, kd, kh, kw]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var, TensorError> {
        let (tx, tk) = (self.value(x), self.value(k));
        let sx = five_d("conv_transpose3d", tx)?;
        let sk = five_d("conv_transpose3d", tk)?;
        if sx[0] == 0 || sx[1] != sk[0] {
            return Err(mismatch("conv_transpose3d", tx, tk));
        }
        let mut out = [0usize; 3];
        for i in 0..3 {
            let span = (sx[2 + i] - 1) * stride[i] + sk[2 + i];
            if stride[i] == 0 || span < 2 * padding[i] + 1 {
                return Err(mismatch("conv_transpose3d", tx, tk));
            }
            out[i] = span - 2 * padding[i];
        }
        // Forward geometry of the convolution mapping `out` back to `x`.
        let g = ConvGeometry {
            batch: sx[0],
            in_channels: sk[1],
            out_channels: sk[0],
            input: out,
            kernel: [sk[2], sk[3], sk[4]],
            stride,
            padding,
        };
        if g.output() != Some([sx[2], sx[3], sx[4]]) {
            return Err(mismatch("conv_transpose3d", tx, tk));
        }
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [sk[1]] {
                return Err(mismatch("conv_transpose3d", tk, tb));
            }
        }
        let mut y = conv::conv3d_backward_input(tx.data(), tk.data(), &g);
        if let Some(b) = bias {
            conv::add_channel_bias(&mut y, self.value(b).data(), g.batch, out.iter().product());
        }
        let t = Tensor::new(vec![sx[0], sk[1], out[0], out[1], out[2]], y)?;
        let mut inputs = vec![x, k];
        inputs.extend(bias);
        Ok(self.push(
            t,
            Op::ConvTranspose {
                input: x,
                kernel: k,
                bias,
                geom: g,
            },
            &inputs,
        ))
    }

    /// 2×2×2, stride-2 transposed convolution that doubles every extent.
    pub fn conv_transpose3d_up(
        &mut self,
        x: Var,
        k: Var,
        bias: Option<Var>,
    ) -> Result<Var, TensorError> {
        let sk = five_d("conv_transpose3d", self.value(k))?;
        if sk[2..] != [2, 2, 2] {
            return Err(TensorError::InvalidArgument {
                op: "conv_transpose3d",
                reason: format!("kernel must be 2x2x2, got {:?}", &sk[2..]),
            });
        }
        self.conv_transpose3d(x, k, bias, [2, 2, 2], [0, 0, 0])
    }

    /// Scalar soft overlap loss `1 - coefficient(pred, truth)` with its
    /// analytic gradient recorded for the backward pass.
    pub fn soft_overlap_loss(
        &mut self,
        pred: Var,
        truth: &[f64],
        kind: LossKind,
        params: &TverskyParams,
    ) -> Result<Var, LossError> {
        let (loss, grad) = losses::soft_loss_grad(self.value(pred).data(), truth, kind, params)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftOverlap { pred, grad },
            &[pred],
        ))
    }

    /// Propagate d(root)/d(·) to every tracked leaf reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<(), TensorError> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            let val = |v: Var| &self.nodes[v.0].value;
            let send = |adj: &mut Vec<Option<Vec<f64>>>, v: Var, delta: Vec<f64>| {
                if self.nodes[v.0].requires_grad {
                    accumulate(&mut adj[v.0], delta);
                }
            };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                }
                Op::Add(a, b) => {
                    if needs(*b) {
                        send(&mut adj, *b, g.clone());
                    }
                    send(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        send(&mut adj, *b, g.iter().map(|x| -x).collect());
                    }
                    send(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let d = g.iter().zip(val(*b).data()).map(|(g, y)| g * y).collect();
                        send(&mut adj, *a, d);
                    }
                    if needs(*b) {
                        let d = g.iter().zip(val(*a).data()).map(|(g, x)| g * x).collect();
                        send(&mut adj, *b, d);
                    }
                }
                Op::AddScalar(a) => send(&mut adj, *a, g),
                Op::MulScalar(a, c) => send(&mut adj, *a, g.iter().map(|x| x * c).collect()),
                Op::Relu(a) => {
                    let d = g
                        .iter()
                        .zip(val(*a).data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    send(&mut adj, *a, d);
                }
                Op::Prelu(a, s) => {
                    let slope = val(*s).data()[0];
                    let x = val(*a).data();
                    if needs(*s) {
                        let ds: f64 = g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { 0.0 } else { g * x })
                            .sum();
                        let shape_len = val(*s).numel();
                        send(&mut adj, *s, vec![ds; shape_len]);
                    }
                    if needs(*a) {
                        let d = g
                            .iter()
                            .zip(x)
                            .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                            .collect();
                        send(&mut adj, *a, d);
                    }
                }
                Op::Sigmoid(a) => {
                    let d = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, &y)| g * y * (1.0 - y))
                        .collect();
                    send(&mut adj, *a, d);
                }
                Op::Sum(a) => send(&mut adj, *a, vec![g[0]; val(*a).numel()]),
                Op::Mean(a) => {
                    let n = val(*a).numel();
                    send(&mut adj, *a, vec![g[0] / n as f64; n]);
                }
                Op::Reshape(a) => send(&mut adj, *a, g),
                Op::ConcatChannels(a, b) => {
                    let (sa, sb) = (val(*a).shape(), val(*b).shape());
                    let spatial: usize = sa[2..].iter().product();
                    let (ca, cb) = (sa[1] * spatial, sb[1] * spatial);
                    let mut ga = Vec::with_capacity(val(*a).numel());
                    let mut gb = Vec::with_capacity(val(*b).numel());
                    for n in 0..sa[0] {
                        let base = n * (ca + cb);
                        ga.extend_from_slice(&g[base..base + ca]);
                        gb.extend_from_slice(&g[base + ca..base + ca + cb]);
                    }
                    if needs(*a) {
                        send(&mut adj, *a, ga);
                    }
                    if needs(*b) {
                        send(&mut adj, *b, gb);
                    }
                }
                Op::Conv {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let spatial: usize = geom.output().expect("checked").iter().product();
                    if let Some(b) = bias {
                        if needs(*b) {
                            let d = conv::channel_sums(&g, geom.out_channels, geom.batch, spatial);
                            send(&mut adj, *b, d);
                        }
                    }
                    if needs(*kernel) {
                        let d = conv::conv3d_backward_kernel(val(*input).data(), &g, geom);
                        send(&mut adj, *kernel, d);
                    }
                    if needs(*input) {
                        let d = conv::conv3d_backward_input(&g, val(*kernel).data(), geom);
                        send(&mut adj, *input, d);
                    }
                }
                Op::ConvTranspose {
                    input,
                    kernel,
                    bias,
                    geom,
                } => {
                    let spatial: usize = geom.input.iter().product();
                    if let Some(b) = bias {
                        if needs(*b) {
                            let d = conv::channel_sums(&g, geom.in_channels, geom.batch, spatial);
                            send(&mut adj, *b, d);
                        }
                    }
                    if needs(*kernel) {
                        // Roles swap: the upstream gradient plays the forward
                        // convolution's input.
                        let d = conv::conv3d_backward_kernel(&g, val(*input).data(), geom);
                        send(&mut adj, *kernel, d);
                    }
                    if needs(*input) {
                        let d = conv::conv3d_forward(&g, val(*kernel).data(), geom);
                        send(&mut adj, *input, d);
                    }
                }
                Op::SoftOverlap { pred, grad } => {
                    let d = grad.iter().map(|x| x * g[0]).collect();
                    send(&mut adj, *pred, d);
                }
            }
        }

        for (i, slot) in adj.into_iter().enumerate() {
            if let Some(g) = slot {
                if matches!(self.nodes[i].op, Op::Leaf) {
                    accumulate(&mut self.nodes[i].grad, g);
                }
            }
        }
        Ok(())
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
