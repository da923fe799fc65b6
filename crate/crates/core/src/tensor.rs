//! Minimal reverse-mode differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every call to an op method evaluates the op eagerly,
//! records it, and returns a [`NodeId`]. [`Graph::backward`] then walks the
//! tape once in reverse and returns the gradient of a scalar output with
//! respect to every node that requires one.
//!
//! Convolutions are cross-correlations with explicit zero padding, laid out
//! as `[batch, channels, height, width]` with weights `[out, in, kh, kw]`
//! (`[in, out, kh, kw]` for the transposed convolution). Apart from the bias
//! add in [`Graph::affine`] and the convolutions, no op broadcasts.

use std::fmt;
use std::str::FromStr;

use thiserror::Error;

pub type NodeId = usize;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("{op}: invalid attribute: {detail}")]
    InvalidAttr { op: &'static str, detail: String },
    #[error("backward needs a scalar output, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),
    #[error("graph was already consumed by a backward pass")]
    GraphConsumed,
    #[error("node {0} is not part of this graph")]
    UnknownNode(NodeId),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn mismatch(op: &'static str, detail: impl Into<String>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}

/// Dense row-major array with an optional gradient slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(mismatch("tensor", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(mismatch(
                "tensor",
                format!("shape {shape:?} needs {n} values, got {}", values.len()),
            ));
        }
        Ok(Self {
            shape,
            values,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let mut t = Self::zeros(shape);
        t.values.iter_mut().for_each(|v| *v = value);
        t
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            values: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
            requires_grad: false,
            grad: None,
        }
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        if !requires_grad {
            self.grad = None;
        }
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Mutable access for optimizers and initializers; never used on graph nodes.
    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the gradient slot. No-op unless `requires_grad`.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if !self.requires_grad {
            return Ok(());
        }
        if g.len() != self.values.len() {
            return Err(mismatch(
                "accumulate_grad",
                format!("gradient of length {} for shape {:?}", g.len(), self.shape),
            ));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// The single value of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.values.len() == 1).then(|| self.values[0])
    }
}

/// Operation vocabulary, used when ops are named in text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    Leaf,
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d,
    Conv2dTranspose,
    Relu,
    Sigmoid,
    AvgPool2d,
    Reshape,
    Sum,
    Mean,
    Exp,
    Log,
    Square,
    Concat,
    Affine,
    ScaleShift,
    Clamp,
    Narrow,
}

impl OpKind {
    pub fn name(self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Conv2d => "conv2d",
            OpKind::Conv2dTranspose => "conv2d_transpose",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::AvgPool2d => "avg_pool2d",
            OpKind::Reshape => "reshape",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Square => "square",
            OpKind::Concat => "concat",
            OpKind::Affine => "affine",
            OpKind::ScaleShift => "scale_shift",
            OpKind::Clamp => "clamp",
            OpKind::Narrow => "narrow",
        }
    }

    pub const ALL: [OpKind; 21] = [
        OpKind::Leaf,
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Matmul,
        OpKind::Conv2d,
        OpKind::Conv2dTranspose,
        OpKind::Relu,
        OpKind::Sigmoid,
        OpKind::AvgPool2d,
        OpKind::Reshape,
        OpKind::Sum,
        OpKind::Mean,
        OpKind::Exp,
        OpKind::Log,
        OpKind::Square,
        OpKind::Concat,
        OpKind::Affine,
        OpKind::ScaleShift,
        OpKind::Clamp,
        OpKind::Narrow,
    ];
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        OpKind::ALL
            .iter()
            .copied()
            .find(|k| k.name() == s)
            .ok_or_else(|| TensorError::UnknownOp(s.to_string()))
    }
}

/// Spatial geometry shared by both convolutions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub padding: usize,
    /// Extra rows/columns appended to a transposed convolution's output.
    pub output_padding: usize,
}

impl ConvGeometry {
    pub fn new(stride: usize, padding: usize) -> Self {
        Self {
            stride,
            padding,
            output_padding: 0,
        }
    }

    pub fn with_output_padding(mut self, output_padding: usize) -> Self {
        self.output_padding = output_padding;
        self
    }
}

/// A recorded operation together with its attributes.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    Leaf,
    Add,
    Sub,
    Mul,
    Matmul,
    Conv2d(ConvGeometry),
    Conv2dTranspose(ConvGeometry),
    Relu,
    Sigmoid,
    AvgPool2d { kernel: usize, stride: usize },
    Reshape(Vec<usize>),
    Sum,
    Mean,
    Exp,
    Log,
    Square,
    Concat { axis: usize },
    Affine,
    /// `scale * x + shift`
    ScaleShift { scale: f64, shift: f64 },
    Clamp { min: f64, max: f64 },
    Narrow { axis: usize, start: usize, len: usize },
}

impl Op {
    pub fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Add => OpKind::Add,
            Op::Sub => OpKind::Sub,
            Op::Mul => OpKind::Mul,
            Op::Matmul => OpKind::Matmul,
            Op::Conv2d(_) => OpKind::Conv2d,
            Op::Conv2dTranspose(_) => OpKind::Conv2dTranspose,
            Op::Relu => OpKind::Relu,
            Op::Sigmoid => OpKind::Sigmoid,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Sum => OpKind::Sum,
            Op::Mean => OpKind::Mean,
            Op::Exp => OpKind::Exp,
            Op::Log => OpKind::Log,
            Op::Square => OpKind::Square,
            Op::Concat { .. } => OpKind::Concat,
            Op::Affine => OpKind::Affine,
            Op::ScaleShift { .. } => OpKind::ScaleShift,
            Op::Clamp { .. } => OpKind::Clamp,
            Op::Narrow { .. } => OpKind::Narrow,
        }
    }
}

#[derive(Debug)]
struct Node {
    op: Op,
    inputs: Vec<NodeId>,
    value: Tensor,
}

/// Gradients produced by one backward pass, indexed by node.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&[f64]> {
        self.grads.get(id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Vec<f64>> {
        self.grads.get_mut(id).and_then(Option::take)
    }
}

/// Tape of eagerly evaluated operations.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input. Gradients are tracked iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> NodeId {
        let mut tensor = tensor;
        tensor.grad = None;
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: Vec::new(),
            value: tensor,
        });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, tensor: Tensor) -> NodeId {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].value.shape
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id].op
    }

    pub fn inputs(&self, id: NodeId) -> &[NodeId] {
        &self.nodes[id].inputs
    }

    pub fn scalar_value(&self, id: NodeId) -> Option<f64> {
        self.nodes.get(id).and_then(|n| n.value.item())
    }

    /// Evaluates `op` on `inputs` and records it on the tape.
    pub fn forward(&mut self, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if let Some(&bad) = inputs.iter().find(|&&i| i >= self.nodes.len()) {
            return Err(TensorError::UnknownNode(bad));
        }
        let (shape, values) = {
            let vals: Vec<&Tensor> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            eval(&op, &vals)?
        };
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].value.requires_grad);
        self.nodes.push(Node {
            op,
            inputs: inputs.to_vec(),
            value: Tensor {
                shape,
                values,
                requires_grad,
                grad: None,
            },
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Matmul, &[a, b])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        match bias {
            Some(b) => self.forward(Op::Conv2d(geometry), &[x, weight, b]),
            None => self.forward(Op::Conv2d(geometry), &[x, weight]),
        }
    }

    pub fn conv2d_transpose(
        &mut self,
        x: NodeId,
        weight: NodeId,
        bias: Option<NodeId>,
        geometry: ConvGeometry,
    ) -> Result<NodeId> {
        match bias {
            Some(b) => self.forward(Op::Conv2dTranspose(geometry), &[x, weight, b]),
            None => self.forward(Op::Conv2dTranspose(geometry), &[x, weight]),
        }
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Relu, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Sigmoid, &[x])
    }

    pub fn avg_pool2d(&mut self, x: NodeId, kernel: usize, stride: usize) -> Result<NodeId> {
        self.forward(Op::AvgPool2d { kernel, stride }, &[x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        self.forward(Op::Reshape(shape.to_vec()), &[x])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Sum, &[x])
    }

    pub fn mean(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Mean, &[x])
    }

    pub fn exp(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Exp, &[x])
    }

    pub fn log(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Log, &[x])
    }

    pub fn square(&mut self, x: NodeId) -> Result<NodeId> {
        self.forward(Op::Square, &[x])
    }

    pub fn concat(&mut self, xs: &[NodeId], axis: usize) -> Result<NodeId> {
        self.forward(Op::Concat { axis }, xs)
    }

    /// `x · wᵀ + b` for `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        self.forward(Op::Affine, &[x, w, b])
    }

    pub fn scale_shift(&mut self, x: NodeId, scale: f64, shift: f64) -> Result<NodeId> {
        self.forward(Op::ScaleShift { scale, shift }, &[x])
    }

    pub fn clamp(&mut self, x: NodeId, min: f64, max: f64) -> Result<NodeId> {
        self.forward(Op::Clamp { min, max }, &[x])
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.forward(Op::Narrow { axis, start, len }, &[x])
    }

    /// Reverse sweep from a scalar `output`.
    ///
    /// A graph supports one backward pass; a second call fails with
    /// [`TensorError::GraphConsumed`]. Leaves that require gradients also get
    /// the result written into their `grad` slot.
    pub fn backward(&mut self, output: NodeId) -> Result<Gradients> {
        if self.consumed {
            return Err(TensorError::GraphConsumed);
        }
        if output >= self.nodes.len() {
            return Err(TensorError::UnknownNode(output));
        }
        if self.nodes[output].value.numel() != 1 {
            return Err(TensorError::NonScalarOutput(
                self.nodes[output].value.shape.clone(),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[output] = Some(vec![1.0]);
        for id in (0..=output).rev() {
            let node = &self.nodes[id];
            if !node.value.requires_grad || node.inputs.is_empty() {
                continue;
            }
            let Some(upstream) = grads[id].take() else {
                continue;
            };
            let inputs: Vec<&Tensor> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let needs: Vec<bool> = inputs.iter().map(|t| t.requires_grad).collect();
            let local = vjp(&node.op, &inputs, &node.value, &upstream, &needs);
            for ((&input, need), g) in node.inputs.iter().zip(needs).zip(local) {
                if !need {
                    continue;
                }
                let Some(g) = g else { continue };
                match &mut grads[input] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(g),
                }
            }
            // Keep the upstream gradient around for callers inspecting interior nodes.
            grads[id] = Some(upstream);
        }
        for (id, node) in self.nodes.iter_mut().enumerate() {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                if let Some(g) = &grads[id] {
                    node.value.grad = Some(g.clone());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// ---------------------------------------------------------------------------
// Forward evaluation

fn expect_arity(op: &'static str, inputs: &[&Tensor], arity: &[usize]) -> Result<()> {
    if arity.contains(&inputs.len()) {
        Ok(())
    } else {
        Err(TensorError::InvalidAttr {
            op,
            detail: format!("expected {arity:?} inputs, got {}", inputs.len()),
        })
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape == b.shape {
        Ok(())
    } else {
        Err(mismatch(op, format!("{:?} vs {:?}", a.shape, b.shape)))
    }
}

fn map(x: &Tensor, f: impl Fn(f64) -> f64) -> (Vec<usize>, Vec<f64>) {
    (x.shape.clone(), x.values.iter().map(|&v| f(v)).collect())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `(outer, dim, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    h_out: usize,
    w_out: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
}

fn conv_dims(op: &'static str, x: &Tensor, w: &Tensor, g: ConvGeometry, transpose: bool) -> Result<ConvDims> {
    if x.shape.len() != 4 || w.shape.len() != 4 {
        return Err(mismatch(
            op,
            format!("input {:?} and weight {:?} must both be 4-d", x.shape, w.shape),
        ));
    }
    if g.stride == 0 {
        return Err(TensorError::InvalidAttr {
            op,
            detail: "stride must be positive".into(),
        });
    }
    let (batch, c_in, h_in, w_in) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
    let (kh, kw) = (w.shape[2], w.shape[3]);
    if w.shape[if transpose { 0 } else { 1 }] != c_in {
        return Err(mismatch(
            op,
            format!("input has {c_in} channels but weight is {:?}", w.shape),
        ));
    }
    let c_out = w.shape[if transpose { 1 } else { 0 }];
    let (h_out, w_out) = if transpose {
        if g.output_padding >= g.stride {
            return Err(TensorError::InvalidAttr {
                op,
                detail: format!(
                    "output_padding {} must be below stride {}",
                    g.output_padding, g.stride
                ),
            });
        }
        let full_h = (h_in - 1) * g.stride + kh + g.output_padding;
        let full_w = (w_in - 1) * g.stride + kw + g.output_padding;
        if full_h <= 2 * g.padding || full_w <= 2 * g.padding {
            return Err(mismatch(op, format!("padding {} consumes the whole output", g.padding)));
        }
        (full_h - 2 * g.padding, full_w - 2 * g.padding)
    } else {
        if h_in + 2 * g.padding < kh || w_in + 2 * g.padding < kw {
            return Err(mismatch(
                op,
                format!(
                    "kernel {kh}x{kw} larger than padded input {}x{}",
                    h_in + 2 * g.padding,
                    w_in + 2 * g.padding
                ),
            ));
        }
        (
            (h_in + 2 * g.padding - kh) / g.stride + 1,
            (w_in + 2 * g.padding - kw) / g.stride + 1,
        )
    };
    Ok(ConvDims {
        batch,
        c_in,
        h_in,
        w_in,
        c_out,
        h_out,
        w_out,
        kh,
        kw,
        stride: g.stride,
        padding: g.padding,
    })
}

fn check_bias(op: &'static str, bias: Option<&&Tensor>, channels: usize) -> Result<()> {
    if let Some(b) = bias {
        if b.shape != [channels] {
            return Err(mismatch(op, format!("bias {:?} for {channels} channels", b.shape)));
        }
    }
    Ok(())
}

fn eval(op: &Op, inputs: &[&Tensor]) -> Result<(Vec<usize>, Vec<f64>)> {
    let name = op.kind().name();
    match op {
        Op::Leaf => Err(TensorError::InvalidAttr {
            op: name,
            detail: "leaves are created with Graph::leaf".into(),
        }),
        Op::Add | Op::Sub | Op::Mul => {
            expect_arity(name, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            same_shape(name, a, b)?;
            let f: fn(f64, f64) -> f64 = match op {
                Op::Add => |x, y| x + y,
                Op::Sub => |x, y| x - y,
                _ => |x, y| x * y,
            };
            Ok((
                a.shape.clone(),
                a.values.iter().zip(&b.values).map(|(&x, &y)| f(x, y)).collect(),
            ))
        }
        Op::Matmul => {
            expect_arity(name, inputs, &[2])?;
            let (a, b) = (inputs[0], inputs[1]);
            if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
                return Err(mismatch(name, format!("{:?} x {:?}", a.shape, b.shape)));
            }
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let mut out = vec![0.0; m * n];
            gemm(m, k, n, &a.values, false, &b.values, false, &mut out, 0.0);
            Ok((vec![m, n], out))
        }
        Op::Affine => {
            expect_arity(name, inputs, &[3])?;
            let (x, w, b) = (inputs[0], inputs[1], inputs[2]);
            if x.shape.len() != 2 || w.shape.len() != 2 || x.shape[1] != w.shape[1] || b.shape != [w.shape[0]] {
                return Err(mismatch(
                    name,
                    format!("x {:?}, w {:?}, b {:?}", x.shape, w.shape, b.shape),
                ));
            }
            let (batch, din, dout) = (x.shape[0], x.shape[1], w.shape[0]);
            let mut out = Vec::with_capacity(batch * dout);
            for _ in 0..batch {
                out.extend_from_slice(&b.values);
            }
            gemm(batch, din, dout, &x.values, false, &w.values, true, &mut out, 1.0);
            Ok((vec![batch, dout], out))
        }
        Op::Conv2d(g) => {
            expect_arity(name, inputs, &[2, 3])?;
            let d = conv_dims(name, inputs[0], inputs[1], *g, false)?;
            check_bias(name, inputs.get(2), d.c_out)?;
            Ok((
                vec![d.batch, d.c_out, d.h_out, d.w_out],
                conv2d_forward(&d, &inputs[0].values, &inputs[1].values, inputs.get(2).map(|b| b.values.as_slice())),
            ))
        }
        Op::Conv2dTranspose(g) => {
            expect_arity(name, inputs, &[2, 3])?;
            let d = conv_dims(name, inputs[0], inputs[1], *g, true)?;
            check_bias(name, inputs.get(2), d.c_out)?;
            Ok((
                vec![d.batch, d.c_out, d.h_out, d.w_out],
                conv2d_transpose_forward(&d, &inputs[0].values, &inputs[1].values, inputs.get(2).map(|b| b.values.as_slice())),
            ))
        }
        Op::Relu => {
            expect_arity(name, inputs, &[1])?;
            // NaN passes through so non-finite values surface in the loss.
            Ok(map(inputs[0], |v| if v < 0.0 { 0.0 } else { v }))
        }
        Op::Sigmoid => {
            expect_arity(name, inputs, &[1])?;
            Ok(map(inputs[0], sigmoid))
        }
        Op::Exp => {
            expect_arity(name, inputs, &[1])?;
            Ok(map(inputs[0], f64::exp))
        }
        Op::Log => {
            expect_arity(name, inputs, &[1])?;
            Ok(map(inputs[0], f64::ln))
        }
        Op::Square => {
            expect_arity(name, inputs, &[1])?;
            Ok(map(inputs[0], |v| v * v))
        }
        Op::ScaleShift { scale, shift } => {
            expect_arity(name, inputs, &[1])?;
            Ok(map(inputs[0], |v| scale * v + shift))
        }
        Op::Clamp { min, max } => {
            expect_arity(name, inputs, &[1])?;
            if min > max {
                return Err(TensorError::InvalidAttr {
                    op: name,
                    detail: format!("min {min} > max {max}"),
                });
            }
            Ok(map(inputs[0], |v| v.clamp(*min, *max)))
        }
        Op::Sum | Op::Mean => {
            expect_arity(name, inputs, &[1])?;
            let s: f64 = inputs[0].values.iter().sum();
            let v = if matches!(op, Op::Mean) {
                s / inputs[0].numel() as f64
            } else {
                s
            };
            Ok((Vec::new(), vec![v]))
        }
        Op::Reshape(shape) => {
            expect_arity(name, inputs, &[1])?;
            let n: usize = shape.iter().product();
            if n != inputs[0].numel() || shape.iter().any(|&d| d == 0) {
                return Err(mismatch(name, format!("{:?} -> {:?}", inputs[0].shape, shape)));
            }
            Ok((shape.clone(), inputs[0].values.clone()))
        }
        Op::AvgPool2d { kernel, stride } => {
            expect_arity(name, inputs, &[1])?;
            let x = inputs[0];
            if *kernel == 0 || *stride == 0 {
                return Err(TensorError::InvalidAttr {
                    op: name,
                    detail: "kernel and stride must be positive".into(),
                });
            }
            if x.shape.len() != 4 || x.shape[2] < *kernel || x.shape[3] < *kernel {
                return Err(mismatch(name, format!("input {:?} with kernel {kernel}", x.shape)));
            }
            let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut out = vec![0.0; b * c * ho * wo];
            for plane in 0..b * c {
                let src = &x.values[plane * h * w..(plane + 1) * h * w];
                let dst = &mut out[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ky in 0..*kernel {
                            let row = (oy * stride + ky) * w + ox * stride;
                            acc += src[row..row + kernel].iter().sum::<f64>();
                        }
                        dst[oy * wo + ox] = acc * norm;
                    }
                }
            }
            Ok((vec![b, c, ho, wo], out))
        }
        Op::Concat { axis } => {
            if inputs.is_empty() {
                return Err(TensorError::InvalidAttr {
                    op: name,
                    detail: "needs at least one input".into(),
                });
            }
            let first = &inputs[0].shape;
            if *axis >= first.len() {
                return Err(mismatch(name, format!("axis {axis} for shape {first:?}")));
            }
            for t in &inputs[1..] {
                let ok = t.shape.len() == first.len()
                    && t.shape.iter().zip(first).enumerate().all(|(i, (a, b))| i == *axis || a == b);
                if !ok {
                    return Err(mismatch(name, format!("{:?} vs {:?} along axis {axis}", first, t.shape)));
                }
            }
            let mut shape = first.clone();
            shape[*axis] = inputs.iter().map(|t| t.shape[*axis]).sum();
            let (outer, _, inner) = axis_split(first, *axis);
            let mut out = Vec::with_capacity(shape.iter().product());
            for o in 0..outer {
                for t in inputs {
                    let chunk = t.shape[*axis] * inner;
                    out.extend_from_slice(&t.values[o * chunk..(o + 1) * chunk]);
                }
            }
            Ok((shape, out))
        }
        Op::Narrow { axis, start, len } => {
            expect_arity(name, inputs, &[1])?;
            let x = inputs[0];
            if *axis >= x.shape.len() || *len == 0 || start + len > x.shape[*axis] {
                return Err(mismatch(
                    name,
                    format!("[{start}, {}) on axis {axis} of {:?}", start + len, x.shape),
                ));
            }
            let (outer, dim, inner) = axis_split(&x.shape, *axis);
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                out.extend_from_slice(&x.values[base..base + len * inner]);
            }
            let mut shape = x.shape.clone();
            shape[*axis] = *len;
            Ok((shape, out))
        }
    }
}

// ---------------------------------------------------------------------------
// Vector-Jacobian products

fn vjp(op: &Op, inputs: &[&Tensor], out: &Tensor, up: &[f64], needs: &[bool]) -> Vec<Option<Vec<f64>>> {
    let elementwise = |f: &dyn Fn(usize) -> f64| -> Vec<Option<Vec<f64>>> {
        vec![Some((0..up.len()).map(|i| up[i] * f(i)).collect())]
    };
    match op {
        Op::Leaf => Vec::new(),
        Op::Add => vec![Some(up.to_vec()), Some(up.to_vec())],
        Op::Sub => vec![Some(up.to_vec()), Some(up.iter().map(|g| -g).collect())],
        Op::Mul => {
            let (a, b) = (&inputs[0].values, &inputs[1].values);
            vec![
                needs[0].then(|| up.iter().zip(b).map(|(g, y)| g * y).collect()),
                needs[1].then(|| up.iter().zip(a).map(|(g, x)| g * x).collect()),
            ]
        }
        Op::Matmul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
            let ga = needs[0].then(|| {
                let mut g = vec![0.0; m * k];
                gemm(m, n, k, up, false, &b.values, true, &mut g, 0.0);
                g
            });
            let gb = needs[1].then(|| {
                let mut g = vec![0.0; k * n];
                gemm(k, m, n, &a.values, true, up, false, &mut g, 0.0);
                g
            });
            vec![ga, gb]
        }
        Op::Affine => {
            let (x, w) = (inputs[0], inputs[1]);
            let (batch, din, dout) = (x.shape[0], x.shape[1], w.shape[0]);
            let gx = needs[0].then(|| {
                let mut g = vec![0.0; batch * din];
                gemm(batch, dout, din, up, false, &w.values, false, &mut g, 0.0);
                g
            });
            let gw = needs[1].then(|| {
                let mut g = vec![0.0; dout * din];
                gemm(dout, batch, din, up, true, &x.values, false, &mut g, 0.0);
                g
            });
            let gb = needs[2].then(|| {
                let mut g = vec![0.0; dout];
                for row in up.chunks_exact(dout) {
                    g.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                }
                g
            });
            vec![gx, gw, gb]
        }
        Op::Conv2d(g) => {
            let d = conv_dims("conv2d", inputs[0], inputs[1], *g, false).expect("validated in forward");
            let (gx, gw, gb) = conv2d_backward(&d, &inputs[0].values, &inputs[1].values, up, needs);
            let mut v = vec![gx, gw];
            if inputs.len() == 3 {
                v.push(gb);
            }
            v
        }
        Op::Conv2dTranspose(g) => {
            let d = conv_dims("conv2d_transpose", inputs[0], inputs[1], *g, true).expect("validated in forward");
            let (gx, gw, gb) = conv2d_transpose_backward(&d, &inputs[0].values, &inputs[1].values, up, needs);
            let mut v = vec![gx, gw];
            if inputs.len() == 3 {
                v.push(gb);
            }
            v
        }
        Op::Relu => {
            let x = &inputs[0].values;
            elementwise(&|i| if x[i] > 0.0 { 1.0 } else { 0.0 })
        }
        Op::Sigmoid => {
            let y = &out.values;
            elementwise(&|i| y[i] * (1.0 - y[i]))
        }
        Op::Exp => {
            let y = &out.values;
            elementwise(&|i| y[i])
        }
        Op::Log => {
            let x = &inputs[0].values;
            elementwise(&|i| 1.0 / x[i])
        }
        Op::Square => {
            let x = &inputs[0].values;
            elementwise(&|i| 2.0 * x[i])
        }
        Op::ScaleShift { scale, .. } => elementwise(&|_| *scale),
        Op::Clamp { min, max } => {
            let x = &inputs[0].values;
            elementwise(&|i| if x[i] >= *min && x[i] <= *max { 1.0 } else { 0.0 })
        }
        Op::Sum => vec![Some(vec![up[0]; inputs[0].numel()])],
        Op::Mean => {
            let n = inputs[0].numel();
            vec![Some(vec![up[0] / n as f64; n])]
        }
        Op::Reshape(_) => vec![Some(up.to_vec())],
        Op::AvgPool2d { kernel, stride } => {
            let x = inputs[0];
            let (b, c, h, w) = (x.shape[0], x.shape[1], x.shape[2], x.shape[3]);
            let (ho, wo) = (out.shape[2], out.shape[3]);
            let norm = 1.0 / (kernel * kernel) as f64;
            let mut g = vec![0.0; x.numel()];
            for plane in 0..b * c {
                let dst = &mut g[plane * h * w..(plane + 1) * h * w];
                let src = &up[plane * ho * wo..(plane + 1) * ho * wo];
                for oy in 0..ho {
                    for ox in 0..wo {
                        let v = src[oy * wo + ox] * norm;
                        for ky in 0..*kernel {
                            let row = (oy * stride + ky) * w + ox * stride;
                            dst[row..row + kernel].iter_mut().for_each(|d| *d += v);
                        }
                    }
                }
            }
            vec![Some(g)]
        }
        Op::Concat { axis } => {
            let (outer, _, inner) = axis_split(&inputs[0].shape, *axis);
            let total = out.shape[*axis] * inner;
            let mut offset = 0;
            inputs
                .iter()
                .zip(needs)
                .map(|(t, &need)| {
                    let chunk = t.shape[*axis] * inner;
                    let g = need.then(|| {
                        let mut g = Vec::with_capacity(t.numel());
                        for o in 0..outer {
                            let base = o * total + offset;
                            g.extend_from_slice(&up[base..base + chunk]);
                        }
                        g
                    });
                    offset += chunk;
                    g
                })
                .collect()
        }
        Op::Narrow { axis, start, len } => {
            let x = inputs[0];
            let (outer, dim, inner) = axis_split(&x.shape, *axis);
            let mut g = vec![0.0; x.numel()];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                let src = &up[o * len * inner..(o + 1) * len * inner];
                g[base..base + len * inner].copy_from_slice(src);
            }
            vec![Some(g)]
        }
    }
}

// ---------------------------------------------------------------------------
// Dense kernels

/// `c = op(a) · op(b) + beta · c` with `op(a): m×k`, `op(b): k×n`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the m×k, k×n and m×n index ranges
    // addressed by these strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Patch geometry connecting an image plane to a column matrix.
#[derive(Debug, Clone, Copy)]
struct Patches {
    channels: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    out_h: usize,
    out_w: usize,
}

impl Patches {
    fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    /// For kernel offset `k` along an axis, the output positions whose
    /// sampled input coordinate lands inside `[0, extent)`.
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        // input = o * stride + k - padding
        let lo = if k >= self.padding {
            0
        } else {
            (self.padding - k).div_ceil(self.stride)
        };
        let hi = if extent + self.padding > k {
            ((extent + self.padding - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

fn im2col(p: &Patches, img: &[f64], cols: &mut [f64]) {
    let ncols = p.cols();
    cols.iter_mut().for_each(|v| *v = 0.0);
    for c in 0..p.channels {
        let plane = &img[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ky in 0..p.kh {
            let (oy_lo, oy_hi) = p.valid_range(ky, p.h, p.out_h);
            for kx in 0..p.kw {
                let (ox_lo, ox_hi) = p.valid_range(kx, p.w, p.out_w);
                let row = ((c * p.kh + ky) * p.kw + kx) * ncols;
                for oy in oy_lo..oy_hi {
                    let iy = oy * p.stride + ky - p.padding;
                    let dst = &mut cols[row + oy * p.out_w..row + (oy + 1) * p.out_w];
                    let src = &plane[iy * p.w..(iy + 1) * p.w];
                    if p.stride == 1 {
                        let ix0 = ox_lo + kx - p.padding;
                        dst[ox_lo..ox_hi].copy_from_slice(&src[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = src[ox * p.stride + kx - p.padding];
                        }
                    }
                }
            }
        }
    }
}

fn col2im(p: &Patches, cols: &[f64], img: &mut [f64]) {
    let ncols = p.cols();
    for c in 0..p.channels {
        let plane = &mut img[c * p.h * p.w..(c + 1) * p.h * p.w];
        for ky in 0..p.kh {
            let (oy_lo, oy_hi) = p.valid_range(ky, p.h, p.out_h);
            for kx in 0..p.kw {
                let (ox_lo, ox_hi) = p.valid_range(kx, p.w, p.out_w);
                let row = ((c * p.kh + ky) * p.kw + kx) * ncols;
                for oy in oy_lo..oy_hi {
                    let iy = oy * p.stride + ky - p.padding;
                    let src = &cols[row + oy * p.out_w..row + (oy + 1) * p.out_w];
                    let dst = &mut plane[iy * p.w..(iy + 1) * p.w];
                    for ox in ox_lo..ox_hi {
                        dst[ox * p.stride + kx - p.padding] += src[ox];
                    }
                }
            }
        }
    }
}

fn add_channel_bias(out: &mut [f64], bias: &[f64], plane: usize) {
    for (chunk, &b) in out.chunks_exact_mut(plane).zip(bias.iter().cycle()) {
        chunk.iter_mut().for_each(|v| *v += b);
    }
}

fn channel_sums(up: &[f64], channels: usize, plane: usize) -> Vec<f64> {
    let mut g = vec![0.0; channels];
    for (i, chunk) in up.chunks_exact(plane).enumerate() {
        g[i % channels] += chunk.iter().sum::<f64>();
    }
    g
}

impl ConvDims {
    /// Patches over the convolution's input (for a transposed convolution,
    /// over its output), so both share the same column layout.
    fn patches(&self, transpose: bool) -> Patches {
        if transpose {
            Patches {
                channels: self.c_out,
                h: self.h_out,
                w: self.w_out,
                kh: self.kh,
                kw: self.kw,
                stride: self.stride,
                padding: self.padding,
                out_h: self.h_in,
                out_w: self.w_in,
            }
        } else {
            Patches {
                channels: self.c_in,
                h: self.h_in,
                w: self.w_in,
                kh: self.kh,
                kw: self.kw,
                stride: self.stride,
                padding: self.padding,
                out_h: self.h_out,
                out_w: self.w_out,
            }
        }
    }
}

fn conv2d_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = d.patches(false);
    let (in_sz, out_sz) = (d.c_in * d.h_in * d.w_in, d.c_out * d.h_out * d.w_out);
    let mut out = vec![0.0; d.batch * out_sz];
    let mut cols = vec![0.0; p.rows() * p.cols()];
    for b in 0..d.batch {
        im2col(&p, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
        gemm(d.c_out, p.rows(), p.cols(), w, false, &cols, false, &mut out[b * out_sz..(b + 1) * out_sz], 0.0);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, d.h_out * d.w_out);
    }
    out
}

type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

fn conv2d_backward(d: &ConvDims, x: &[f64], w: &[f64], up: &[f64], needs: &[bool]) -> ConvGrads {
    let p = d.patches(false);
    let (in_sz, out_sz) = (d.c_in * d.h_in * d.w_in, d.c_out * d.h_out * d.w_out);
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; p.rows() * p.cols()];
    for b in 0..d.batch {
        let up_b = &up[b * out_sz..(b + 1) * out_sz];
        if let Some(gw) = gw.as_mut() {
            im2col(&p, &x[b * in_sz..(b + 1) * in_sz], &mut cols);
            gemm(d.c_out, p.cols(), p.rows(), up_b, false, &cols, true, gw, 1.0);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(p.rows(), d.c_out, p.cols(), w, true, up_b, false, &mut cols, 0.0);
            col2im(&p, &cols, &mut gx[b * in_sz..(b + 1) * in_sz]);
        }
    }
    let gb = needs.get(2).copied().unwrap_or(false).then(|| channel_sums(up, d.c_out, d.h_out * d.w_out));
    (gx, gw, gb)
}

fn conv2d_transpose_forward(d: &ConvDims, x: &[f64], w: &[f64], bias: Option<&[f64]>) -> Vec<f64> {
    let p = d.patches(true);
    let (in_sz, out_sz) = (d.c_in * d.h_in * d.w_in, d.c_out * d.h_out * d.w_out);
    let mut out = vec![0.0; d.batch * out_sz];
    let mut cols = vec![0.0; p.rows() * p.cols()];
    for b in 0..d.batch {
        // cols[c_out·k·k, h_in·w_in] = W[c_in, c_out·k·k]ᵀ · x_b[c_in, h_in·w_in]
        gemm(p.rows(), d.c_in, p.cols(), w, true, &x[b * in_sz..(b + 1) * in_sz], false, &mut cols, 0.0);
        col2im(&p, &cols, &mut out[b * out_sz..(b + 1) * out_sz]);
    }
    if let Some(bias) = bias {
        add_channel_bias(&mut out, bias, d.h_out * d.w_out);
    }
    out
}

fn conv2d_transpose_backward(d: &ConvDims, x: &[f64], w: &[f64], up: &[f64], needs: &[bool]) -> ConvGrads {
    let p = d.patches(true);
    let (in_sz, out_sz) = (d.c_in * d.h_in * d.w_in, d.c_out * d.h_out * d.w_out);
    let mut gx = needs[0].then(|| vec![0.0; x.len()]);
    let mut gw = needs[1].then(|| vec![0.0; w.len()]);
    let mut cols = vec![0.0; p.rows() * p.cols()];
    for b in 0..d.batch {
        im2col(&p, &up[b * out_sz..(b + 1) * out_sz], &mut cols);
        if let Some(gx) = gx.as_mut() {
            gemm(d.c_in, p.rows(), p.cols(), w, false, &cols, false, &mut gx[b * in_sz..(b + 1) * in_sz], 0.0);
        }
        if let Some(gw) = gw.as_mut() {
            gemm(d.c_in, p.cols(), p.rows(), &x[b * in_sz..(b + 1) * in_sz], false, &cols, true, gw, 1.0);
        }
    }
    let gb = needs.get(2).copied().unwrap_or(false).then(|| channel_sums(up, d.c_out, d.h_out * d.w_out));
    (gx, gw, gb)
}

// ---------------------------------------------------------------------------
// Finite differences

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad<E>(
    mut f: impl FnMut(&Tensor) -> std::result::Result<f64, E>,
    x: &Tensor,
    epsilon: f64,
) -> std::result::Result<Vec<f64>, E> {
    assert!(epsilon > 0.0, "finite-difference step must be positive");
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for k in 0..x.numel() {
        let orig = x.values[k];
        probe.values[k] = orig + epsilon;
        let plus = f(&probe)?;
        probe.values[k] = orig - epsilon;
        let minus = f(&probe)?;
        probe.values[k] = orig;
        grad.push((plus - minus) / (2.0 * epsilon));
    }
    Ok(grad)
}

/// Outcome of comparing an analytic gradient against a numeric one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    /// Largest relative error among coordinates whose magnitude is at least `small`.
    pub max_rel_err: f64,
    /// Largest absolute error among coordinates smaller than `small`.
    pub max_abs_err_small: f64,
    pub coordinates: usize,
}

impl GradCheck {
    /// Magnitude below which coordinates are compared absolutely.
    pub const SMALL: f64 = 1e-3;

    pub fn compare(analytic: &[f64], numeric: &[f64]) -> Self {
        assert_eq!(analytic.len(), numeric.len());
        let mut check = GradCheck {
            max_rel_err: 0.0,
            max_abs_err_small: 0.0,
            coordinates: analytic.len(),
        };
        for (&a, &n) in analytic.iter().zip(numeric) {
            let scale = a.abs().max(n.abs());
            let diff = (a - n).abs();
            if !diff.is_finite() {
                check.max_rel_err = f64::INFINITY;
            } else if scale < Self::SMALL {
                check.max_abs_err_small = check.max_abs_err_small.max(diff);
            } else {
                check.max_rel_err = check.max_rel_err.max(diff / scale);
            }
        }
        check
    }

    pub fn passes(&self, rel_tol: f64, abs_tol: f64) -> bool {
        self.max_rel_err < rel_tol && self.max_abs_err_small < abs_tol
    }

    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            max_abs_err_small: self.max_abs_err_small.max(other.max_abs_err_small),
            coordinates: self.coordinates + other.coordinates,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn tensor_shape_must_match_values() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().numel(), 6);
    }

    #[test]
    fn grad_slot_respects_requires_grad() {
        let mut frozen = Tensor::vector(vec![1.0, 2.0]);
        frozen.accumulate_grad(&[1.0, 1.0]).unwrap();
        assert!(frozen.grad().is_none());

        let mut live = Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true);
        live.accumulate_grad(&[1.0, 2.0]).unwrap();
        live.accumulate_grad(&[1.0, 2.0]).unwrap();
        assert_eq!(live.grad(), Some(&[2.0, 4.0][..]));
        assert!(live.accumulate_grad(&[1.0]).is_err());
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let i = g.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let a = g.constant(t(&[2, 2], &[3.0, -1.0, 0.5, 7.0]));
        let out = g.matmul(i, a).unwrap();
        assert_eq!(g.value(out).values(), &[3.0, -1.0, 0.5, 7.0]);
    }

    #[test]
    fn relu_and_sigmoid_definitions() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(r).values(), &[0.0, 0.0, 2.0]);
        let z = g.constant(Tensor::scalar(0.0));
        let s = g.sigmoid(z).unwrap();
        assert_eq!(g.scalar_value(s), Some(0.5));
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]).with_requires_grad(true));
        let sq = g.square(x).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x), Some(&[2.0, 4.0, 6.0][..]));
        assert_eq!(g.value(x).grad(), Some(&[2.0, 4.0, 6.0][..]));
    }

    #[test]
    fn backward_of_matmul_sum_with_identities() {
        let eye = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut g = Graph::new();
        let a = g.leaf(eye.clone().with_requires_grad(true));
        let b = g.constant(eye.clone());
        let p = g.matmul(a, b).unwrap();
        let s = g.sum(p).unwrap();
        let analytic = g.backward(s).unwrap().get(a).unwrap().to_vec();

        let numeric = finite_diff_grad(
            |a: &Tensor| -> Result<f64> {
                let mut g = Graph::new();
                let a = g.constant(a.clone());
                let b = g.constant(eye.clone());
                let p = g.matmul(a, b)?;
                let s = g.sum(p)?;
                Ok(g.scalar_value(s).unwrap())
            },
            &eye,
            1e-5,
        )
        .unwrap();
        // d/dA sum(A·B) = 1·Bᵀ → every entry equals the matching row sum of B.
        for (x, y) in analytic.iter().zip(&numeric) {
            assert!((x - y).abs() < 1e-9);
        }
        assert_eq!(analytic, vec![1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn sigmoid_gradient_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0).with_requires_grad(true));
        let s = g.sigmoid(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x), Some(&[0.25][..]));
    }

    #[test]
    fn backward_rejects_non_scalar_and_reuse() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]).with_requires_grad(true));
        let y = g.square(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarOutput(_))));
        let s = g.sum(y).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.backward(s).unwrap_err(), TensorError::GraphConsumed);
    }

    #[test]
    fn fan_out_gradients_are_summed() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![3.0]).with_requires_grad(true));
        let y = g.mul(x, x).unwrap();
        let z = g.add(y, x).unwrap();
        let s = g.sum(z).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x), Some(&[7.0][..]));
    }

    #[test]
    fn constants_never_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let x = g.leaf(Tensor::vector(vec![0.5, 0.5]).with_requires_grad(true));
        let p = g.mul(c, x).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert!(g.value(c).grad().is_none());
        assert_eq!(grads.get(x), Some(&[1.0, 2.0][..]));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = g.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().starts_with("add: shape mismatch"), "{err}");
        let m = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(m, m).unwrap_err();
        assert!(err.to_string().contains("[2, 3] x [2, 3]"), "{err}");
        let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[3, 1, 3, 3]));
        assert!(g.conv2d(x, w, None, ConvGeometry::new(1, 1)).is_err());
    }

    #[test]
    fn op_names_round_trip_and_unknown_is_error() {
        for k in OpKind::ALL {
            assert_eq!(k.name().parse::<OpKind>().unwrap(), k);
        }
        assert_eq!(
            "softmax".parse::<OpKind>().unwrap_err(),
            TensorError::UnknownOp("softmax".into())
        );
    }

    #[test]
    fn conv2d_matches_direct_cross_correlation() {
        // 1x1x3x3 input, 1x1x2x2 kernel, stride 1, no padding.
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]));
        let w = g.constant(t(&[1, 1, 2, 2], &[1., 0., 0., -1.]));
        let b = g.constant(Tensor::vector(vec![0.5]));
        let y = g.conv2d(x, w, Some(b), ConvGeometry::new(1, 0)).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 2, 2]);
        assert_eq!(g.value(y).values(), &[-3.5, -3.5, -3.5, -3.5]);
    }

    #[test]
    fn conv2d_padding_and_stride_shapes() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[2, 3, 8, 8], 1.0));
        let w = g.constant(Tensor::full(&[4, 3, 3, 3], 1.0));
        let y = g.conv2d(x, w, None, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 4, 4]);
        // Corner output sees a 2x2 window of ones in each of 3 channels.
        assert_eq!(g.value(y).values()[0], 12.0);
        let wt = g.constant(Tensor::full(&[4, 2, 4, 4], 1.0));
        let up = g.conv2d_transpose(y, wt, None, ConvGeometry::new(2, 1)).unwrap();
        assert_eq!(g.shape(up), &[2, 2, 8, 8]);
    }

    #[test]
    fn avg_pool_concat_narrow() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 1, 2, 2], &[1., 2., 3., 4.]));
        let p = g.avg_pool2d(x, 2, 2).unwrap();
        assert_eq!(g.value(p).values(), &[2.5]);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let b = g.constant(t(&[2, 1], &[9., 8.]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).values(), &[1., 2., 9., 3., 4., 8.]);
        let n = g.narrow(c, 1, 1, 2).unwrap();
        assert_eq!(g.value(n).values(), &[2., 9., 4., 8.]);
        assert!(g.narrow(c, 1, 2, 2).is_err());
    }

    #[test]
    fn affine_broadcasts_bias_only() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let w = g.constant(t(&[1, 2], &[1., -1.]));
        let b = g.constant(Tensor::vector(vec![10.0]));
        let y = g.affine(x, w, b).unwrap();
        assert_eq!(g.value(y).values(), &[9.0, 9.0]);
        let bad = g.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(g.affine(x, w, bad).is_err());
    }

    #[test]
    fn finite_diff_quadratic_and_constant() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let g = finite_diff_grad(|t| Ok::<_, ()>(t.values().iter().map(|v| v * v).sum()), &x, 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);
        let g = finite_diff_grad(|_| Ok::<_, ()>(3.0), &x, 1e-5).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn grad_check_switches_to_absolute_for_small_entries() {
        let c = GradCheck::compare(&[1.0, 1e-5], &[1.00001, 1.5e-5]);
        assert!(c.max_rel_err < 2e-5);
        assert!((c.max_abs_err_small - 5e-6).abs() < 1e-12);
        assert!(!c.passes(1e-4, 1e-6));
    }
}
