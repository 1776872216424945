use std::collections::BTreeMap;
use std::sync::Arc;

use crate::attention::AttentionScores;
use crate::conv::{self, ConvParams};
use crate::error::{CraError, Result};
use crate::tensor::{self, Shape, Tensor};

use super::Params;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Scores for every batch item, shared between all transfer nodes.
pub type ScoreBatch = Arc<Vec<AttentionScores>>;

// Some payloads are only read through the Debug impl.
#[allow(dead_code)]
#[derive(Clone, Debug)]
pub(crate) enum Op {
    Constant,
    Variable,
    Param(String),
    Conv2d(ConvParams),
    ConvInputGrad { p: ConvParams, h: usize, w: usize },
    ConvWeightGrad { p: ConvParams, kh: usize, kw: usize },
    BiasAdd,
    ChannelSum,
    ChannelBroadcast(Shape),
    Elu,
    EluDeriv,
    EluSecond,
    Sigmoid,
    SigmoidDeriv,
    SigmoidSecond,
    Add,
    Sub,
    Mul,
    ReduceChannels,
    RepeatChannels(usize),
    Scale(f32),
    AddScalar(f32),
    Abs,
    Sign,
    Sqrt,
    SqrtDeriv,
    Sum,
    Fill(Shape),
    SumPerSample,
    BroadcastPerSample(Shape),
    Concat(Vec<usize>),
    SliceChannels { start: usize, len: usize },
    PadChannels { start: usize, total: usize },
    Clip { lo: f32, hi: f32 },
    ClipPass { lo: f32, hi: f32 },
    AvgPool(usize),
    NearestUp(usize),
    Transfer(ScoreBatch),
    TransferAdjoint(ScoreBatch),
    Dense,
    DenseInputGrad(Shape),
    DenseWeightGrad,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Variable => "variable",
            Op::Param(_) => "param",
            Op::Conv2d(_) => "conv2d",
            Op::ConvInputGrad { .. } => "conv2d_input_grad",
            Op::ConvWeightGrad { .. } => "conv2d_weight_grad",
            Op::BiasAdd => "bias_add",
            Op::ChannelSum => "channel_sum",
            Op::ChannelBroadcast(_) => "channel_broadcast",
            Op::Elu => "elu",
            Op::EluDeriv => "elu_deriv",
            Op::EluSecond => "elu_second",
            Op::Sigmoid => "sigmoid",
            Op::SigmoidDeriv => "sigmoid_deriv",
            Op::SigmoidSecond => "sigmoid_second",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::ReduceChannels => "reduce_channels",
            Op::RepeatChannels(_) => "repeat_channels",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Abs => "abs",
            Op::Sign => "sign",
            Op::Sqrt => "sqrt",
            Op::SqrtDeriv => "sqrt_deriv",
            Op::Sum => "sum",
            Op::Fill(_) => "fill",
            Op::SumPerSample => "sum_per_sample",
            Op::BroadcastPerSample(_) => "broadcast_per_sample",
            Op::Concat(_) => "concat",
            Op::SliceChannels { .. } => "slice_channels",
            Op::PadChannels { .. } => "pad_channels",
            Op::Clip { .. } => "clip",
            Op::ClipPass { .. } => "clip_pass",
            Op::AvgPool(_) => "avg_pool",
            Op::NearestUp(_) => "nearest_up",
            Op::Transfer(_) => "attention_transfer",
            Op::TransferAdjoint(_) => "attention_transfer_adjoint",
            Op::Dense => "dense",
            Op::DenseInputGrad(_) => "dense_input_grad",
            Op::DenseWeightGrad => "dense_weight_grad",
        }
    }
}

struct Node {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor,
    requires_grad: bool,
    /// Full-precision value of scalar reductions.
    exact: Option<f64>,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so insertion order is a
/// topological order. Gradients are themselves recorded as nodes, which
/// makes second-order terms (gradient penalties) differentiable.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    source: Option<&'s Params>,
    conv_macs: u64,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Graph::new()
    }
}

/// Gradient tensor per parameter name.
pub type GradMap = BTreeMap<String, Tensor>;

// Elementwise kernels shared by forward values and adjoints.
#[inline]
fn elu(v: f32) -> f32 {
    if v > 0.0 {
        v
    } else {
        ((v as f64).exp() - 1.0) as f32
    }
}
#[inline]
fn elu_deriv(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else {
        (v as f64).exp() as f32
    }
}
#[inline]
fn elu_second(v: f32) -> f32 {
    if v > 0.0 {
        0.0
    } else {
        (v as f64).exp() as f32
    }
}
#[inline]
fn sigmoid64(v: f32) -> f64 {
    1.0 / (1.0 + (-(v as f64)).exp())
}

pub(crate) fn elu_tensor(x: &Tensor) -> Tensor {
    x.map(elu)
}

pub(crate) fn sigmoid_tensor(x: &Tensor) -> Tensor {
    x.map(|v| sigmoid64(v) as f32)
}

fn reduce_channels(x: &Tensor) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s.with_channels(1));
    let plane = s.plane();
    let mut acc = vec![0.0f64; plane];
    for n in 0..s.n {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..s.c {
            for (a, &v) in acc.iter_mut().zip(x.plane(n, c)) {
                *a += v as f64;
            }
        }
        for (o, a) in out.plane_mut(n, 0).iter_mut().zip(&acc) {
            *o = *a as f32;
        }
    }
    out
}

fn repeat_channels(x: &Tensor, c: usize) -> Tensor {
    let s = x.shape();
    let mut out = Tensor::zeros(s.with_channels(c));
    for n in 0..s.n {
        for k in 0..c {
            out.plane_mut(n, k).copy_from_slice(x.plane(n, 0));
        }
    }
    out
}

fn channel_sum(x: &Tensor) -> Tensor {
    let s = x.shape();
    let data = (0..s.c)
        .map(|c| {
            (0..s.n)
                .map(|n| x.plane(n, c).iter().map(|&v| v as f64).sum::<f64>())
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::from_vec(Shape::new(1, s.c, 1, 1), data).expect("channel sum shape")
}

fn channel_broadcast(b: &Tensor, shape: Shape) -> Tensor {
    let mut out = Tensor::zeros(shape);
    for n in 0..shape.n {
        for c in 0..shape.c {
            let v = b.data()[c];
            out.plane_mut(n, c).iter_mut().for_each(|o| *o = v);
        }
    }
    out
}

fn avg_pool(x: &Tensor, f: usize) -> Result<Tensor> {
    let s = x.shape();
    if f == 0 || !s.h.is_multiple_of(f) || !s.w.is_multiple_of(f) {
        return Err(CraError::Shape(format!("avg_pool({f}) on {s}")));
    }
    let (oh, ow) = (s.h / f, s.w / f);
    let inv = 1.0 / (f * f) as f64;
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0f64;
                    for dy in 0..f {
                        for dx in 0..f {
                            acc += src[(oy * f + dy) * s.w + ox * f + dx] as f64;
                        }
                    }
                    dst[oy * ow + ox] = (acc * inv) as f32;
                }
            }
        }
    }
    Ok(out)
}

fn nearest_up(x: &Tensor, f: usize) -> Tensor {
    let s = x.shape();
    let (oh, ow) = (s.h * f, s.w * f);
    let mut out = Tensor::zeros(s.with_spatial(oh, ow));
    for n in 0..s.n {
        for c in 0..s.c {
            let src = x.plane(n, c);
            let dst = out.plane_mut(n, c);
            for y in 0..oh {
                for xx in 0..ow {
                    dst[y * ow + xx] = src[(y / f) * s.w + xx / f];
                }
            }
        }
    }
    out
}

fn per_batch_transfer(x: &Tensor, scores: &ScoreBatch, adjoint: bool) -> Result<Tensor> {
    let s = x.shape();
    if scores.len() != s.n {
        return Err(CraError::Shape(format!(
            "{} score sets for a batch of {}",
            scores.len(),
            s.n
        )));
    }
    let items = (0..s.n)
        .map(|n| {
            let item = x.batch_item(n);
            if adjoint {
                scores[n].transfer_map_adjoint(&item)
            } else {
                scores[n].transfer_map(&item, true)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::stack(&items)
}

fn flat_len(s: Shape) -> usize {
    s.c * s.h * s.w
}

fn dense(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let l = flat_len(s);
    if w.len() != l {
        return Err(CraError::Shape(format!(
            "dense weight {} for input {s}",
            w.shape()
        )));
    }
    let data = (0..s.n)
        .map(|n| {
            x.data()[n * l..(n + 1) * l]
                .iter()
                .zip(w.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data)
}

fn dense_input_grad(dy: &Tensor, w: &Tensor, shape: Shape) -> Result<Tensor> {
    let l = flat_len(shape);
    if dy.len() != shape.n || w.len() != l {
        return Err(CraError::Shape("dense input-grad operands".into()));
    }
    let mut out = Vec::with_capacity(shape.numel());
    for n in 0..shape.n {
        let g = dy.data()[n];
        out.extend(w.data().iter().map(|&v| g * v));
    }
    Tensor::from_vec(shape, out)
}

fn dense_weight_grad(x: &Tensor, dy: &Tensor) -> Result<Tensor> {
    let s = x.shape();
    let l = flat_len(s);
    if dy.len() != s.n {
        return Err(CraError::Shape("dense weight-grad operands".into()));
    }
    let data = (0..l)
        .map(|i| {
            (0..s.n)
                .map(|n| x.data()[n * l + i] as f64 * dy.data()[n] as f64)
                .sum::<f64>() as f32
        })
        .collect();
    Tensor::from_vec(Shape::new(1, l, 1, 1), data)
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            source: None,
            conv_macs: 0,
        }
    }

    /// A graph whose parameters are materialized on first use from `source`.
    pub fn with_params(source: &'s Params) -> Self {
        Graph {
            source: Some(source),
            ..Graph::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-accumulates spent in forward convolutions (adjoint
    /// convolutions are not counted).
    pub fn conv_macs(&self) -> u64 {
        self.conv_macs
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value, at full precision when the node is a reduction.
    pub fn scalar(&self, v: Var) -> Result<f64> {
        let node = &self.nodes[v.0];
        match node.exact {
            Some(x) => Ok(x),
            None => Ok(node.value.item()? as f64),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the parameters that appear in the graph.
    pub fn param_names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    fn push(
        &mut self,
        op: Op,
        inputs: Vec<usize>,
        value: Tensor,
        exact: Option<f64>,
    ) -> Result<Var> {
        if let Err(CraError::NonFinite(_)) = value.ensure_finite(op.name()) {
            return Err(CraError::NonFinite(op.name().to_string()));
        }
        let requires_grad = match op {
            Op::Constant => false,
            Op::Variable | Op::Param(_) => true,
            _ => inputs.iter().any(|&i| self.nodes[i].requires_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            value,
            requires_grad,
            exact,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, op: Op, x: Var, value: Tensor) -> Result<Var> {
        self.push(op, vec![x.0], value, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, vec![], t, None)
            .expect("finite constant")
    }

    /// An input that gradients can be taken with respect to.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(Op::Variable, vec![], t, None)
            .expect("finite variable")
    }

    /// Registers (or returns the existing) parameter `name`.
    pub fn param_with(&mut self, name: &str, t: Tensor) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let v = self.push(Op::Param(name.to_string()), vec![], t, None)?;
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    /// Parameter `name`, loaded from the bound source on first use.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = self
            .source
            .and_then(|p| p.get(name))
            .cloned()
            .ok_or_else(|| CraError::WeightMismatch(format!("missing parameter `{name}`")))?;
        self.param_with(name, t)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, p: ConvParams) -> Result<Var> {
        let value = conv::conv2d(self.value(x), self.value(w), p)?;
        self.conv_macs += conv::conv_macs(self.value(x).shape(), self.value(w).shape(), p);
        self.push(Op::Conv2d(p), vec![x.0, w.0], value, None)
    }

    fn conv_input_grad(
        &mut self,
        dy: Var,
        w: Var,
        p: ConvParams,
        h: usize,
        ww: usize,
    ) -> Result<Var> {
        let value = conv::conv2d_input_grad(self.value(dy), self.value(w), p, h, ww)?;
        self.push(
            Op::ConvInputGrad { p, h, w: ww },
            vec![dy.0, w.0],
            value,
            None,
        )
    }

    fn conv_weight_grad(
        &mut self,
        x: Var,
        dy: Var,
        p: ConvParams,
        kh: usize,
        kw: usize,
    ) -> Result<Var> {
        let value = conv::conv2d_weight_grad(self.value(x), self.value(dy), p, kh, kw)?;
        self.push(
            Op::ConvWeightGrad { p, kh, kw },
            vec![x.0, dy.0],
            value,
            None,
        )
    }

    /// Adds a per-channel bias of shape `(1, c, 1, 1)`.
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape();
        let bs = self.value(b).shape();
        if bs != Shape::new(1, xs.c, 1, 1) {
            return Err(CraError::Shape(format!("bias {bs} for input {xs}")));
        }
        let bb = channel_broadcast(self.value(b), xs);
        let value = self.value(x).add(&bb)?;
        self.push(Op::BiasAdd, vec![x.0, b.0], value, None)
    }

    fn channel_sum(&mut self, x: Var) -> Result<Var> {
        let value = channel_sum(self.value(x));
        self.unary(Op::ChannelSum, x, value)
    }

    fn channel_broadcast(&mut self, b: Var, shape: Shape) -> Result<Var> {
        let value = channel_broadcast(self.value(b), shape);
        self.unary(Op::ChannelBroadcast(shape), b, value)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let value = elu_tensor(self.value(x));
        self.unary(Op::Elu, x, value)
    }

    fn elu_deriv(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(elu_deriv);
        self.unary(Op::EluDeriv, x, value)
    }

    fn elu_second(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(elu_second);
        self.unary(Op::EluSecond, x, value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = sigmoid_tensor(self.value(x));
        self.unary(Op::Sigmoid, x, value)
    }

    fn sigmoid_deriv(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            let s = sigmoid64(v);
            (s * (1.0 - s)) as f32
        });
        self.unary(Op::SigmoidDeriv, x, value)
    }

    fn sigmoid_second(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            let s = sigmoid64(v);
            (s * (1.0 - s) * (1.0 - 2.0 * s)) as f32
        });
        self.unary(Op::SigmoidSecond, x, value)
    }

    /// Full-precision result when both operands are scalars.
    fn exact2(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Option<f64> {
        match (self.scalar(a), self.scalar(b)) {
            (Ok(x), Ok(y)) => Some(f(x, y)),
            _ => None,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let exact = self.exact2(a, b, |x, y| x + y);
        self.push(Op::Add, vec![a.0, b.0], value, exact)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        let exact = self.exact2(a, b, |x, y| x - y);
        self.push(Op::Sub, vec![a.0, b.0], value, exact)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let exact = self.exact2(a, b, |x, y| x * y);
        self.push(Op::Mul, vec![a.0, b.0], value, exact)
    }

    fn reduce_channels(&mut self, x: Var) -> Result<Var> {
        let value = reduce_channels(self.value(x));
        self.unary(Op::ReduceChannels, x, value)
    }

    fn repeat_channels(&mut self, x: Var, c: usize) -> Result<Var> {
        let value = repeat_channels(self.value(x), c);
        self.unary(Op::RepeatChannels(c), x, value)
    }

    pub fn scale(&mut self, x: Var, k: f32) -> Result<Var> {
        let value = self.value(x).scale(k);
        let exact = self.scalar(x).ok().map(|v| v * k as f64);
        self.push(Op::Scale(k), vec![x.0], value, exact)
    }

    pub fn add_scalar(&mut self, x: Var, k: f32) -> Result<Var> {
        let value = self.value(x).map(|v| v + k);
        let exact = self.scalar(x).ok().map(|v| v + k as f64);
        self.push(Op::AddScalar(k), vec![x.0], value, exact)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f32::abs);
        self.unary(Op::Abs, x, value)
    }

    fn sign(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v > 0.0 {
                1.0
            } else if v < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.unary(Op::Sign, x, value)
    }

    /// Elementwise square root of a non-negative tensor. The adjoint at zero
    /// is taken to be zero.
    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(CraError::InvalidArgument("sqrt of a negative value".into()));
        }
        let value = self.value(x).map(|v| (v as f64).sqrt() as f32);
        self.unary(Op::Sqrt, x, value)
    }

    fn sqrt_deriv(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| {
            if v > 0.0 {
                (0.5 / (v as f64).sqrt()) as f32
            } else {
                0.0
            }
        });
        self.unary(Op::SqrtDeriv, x, value)
    }

    /// Sum of all elements as a `(1, 1, 1, 1)` scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let exact = self.value(x).sum_f64();
        self.push(
            Op::Sum,
            vec![x.0],
            Tensor::scalar(exact as f32),
            Some(exact),
        )
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        let exact = self.scalar(s)? / n as f64;
        let k = 1.0 / n as f32;
        let value = Tensor::scalar(exact as f32);
        self.push(Op::Scale(k), vec![s.0], value, Some(exact))
    }

    fn fill(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let v = self.value(x).item()?;
        self.unary(Op::Fill(shape), x, Tensor::full(shape, v))
    }

    /// Per-sample sum, `(n, c, h, w) -> (n, 1, 1, 1)`.
    pub fn sum_per_sample(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).shape();
        let l = flat_len(s);
        let data = (0..s.n)
            .map(|n| {
                self.value(x).data()[n * l..(n + 1) * l]
                    .iter()
                    .map(|&v| v as f64)
                    .sum::<f64>() as f32
            })
            .collect();
        let value = Tensor::from_vec(Shape::new(s.n, 1, 1, 1), data)?;
        self.unary(Op::SumPerSample, x, value)
    }

    fn broadcast_per_sample(&mut self, x: Var, shape: Shape) -> Result<Var> {
        let l = flat_len(shape);
        let mut data = Vec::with_capacity(shape.numel());
        for n in 0..shape.n {
            let v = self.value(x).data()[n];
            data.extend(std::iter::repeat_n(v, l));
        }
        let value = Tensor::from_vec(shape, data)?;
        self.unary(Op::BroadcastPerSample(shape), x, value)
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|&v| self.value(v)).collect();
        let value = tensor::concat_channels(&tensors)?;
        let sizes = tensors.iter().map(|t| t.shape().c).collect();
        self.push(
            Op::Concat(sizes),
            parts.iter().map(|v| v.0).collect(),
            value,
            None,
        )
    }

    pub fn slice_channels(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = tensor::slice_channels(self.value(x), start, len)?;
        self.unary(Op::SliceChannels { start, len }, x, value)
    }

    fn pad_channels(&mut self, x: Var, start: usize, total: usize) -> Result<Var> {
        let value = tensor::pad_channels(self.value(x), start, total)?;
        self.unary(Op::PadChannels { start, total }, x, value)
    }

    pub fn clip(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let value = self.value(x).clip(lo, hi)?;
        self.unary(Op::Clip { lo, hi }, x, value)
    }

    fn clip_pass(&mut self, x: Var, lo: f32, hi: f32) -> Result<Var> {
        let value = self
            .value(x)
            .map(|v| if v > lo && v < hi { 1.0 } else { 0.0 });
        self.unary(Op::ClipPass { lo, hi }, x, value)
    }

    /// `f x f` block mean.
    pub fn avg_pool(&mut self, x: Var, f: usize) -> Result<Var> {
        let value = avg_pool(self.value(x), f)?;
        self.unary(Op::AvgPool(f), x, value)
    }

    /// Pixel replication by `f`.
    pub fn nearest_up(&mut self, x: Var, f: usize) -> Result<Var> {
        if f == 0 {
            return Err(CraError::InvalidArgument(
                "nearest_up factor must be positive".into(),
            ));
        }
        let value = nearest_up(self.value(x), f);
        self.unary(Op::NearestUp(f), x, value)
    }

    /// Attention transfer with fixed scores; gradients flow to the map only.
    pub fn transfer(&mut self, x: Var, scores: &ScoreBatch) -> Result<Var> {
        let value = per_batch_transfer(self.value(x), scores, false)?;
        self.unary(Op::Transfer(scores.clone()), x, value)
    }

    fn transfer_adjoint(&mut self, x: Var, scores: &ScoreBatch) -> Result<Var> {
        let value = per_batch_transfer(self.value(x), scores, true)?;
        self.unary(Op::TransferAdjoint(scores.clone()), x, value)
    }

    /// Fully connected map of each flattened sample to one value; `w` holds
    /// `c * h * w` weights.
    pub fn dense(&mut self, x: Var, w: Var) -> Result<Var> {
        let value = dense(self.value(x), self.value(w))?;
        self.push(Op::Dense, vec![x.0, w.0], value, None)
    }

    fn dense_input_grad(&mut self, dy: Var, w: Var, shape: Shape) -> Result<Var> {
        let value = dense_input_grad(self.value(dy), self.value(w), shape)?;
        self.push(Op::DenseInputGrad(shape), vec![dy.0, w.0], value, None)
    }

    fn dense_weight_grad(&mut self, x: Var, dy: Var) -> Result<Var> {
        let value = dense_weight_grad(self.value(x), self.value(dy))?;
        self.push(Op::DenseWeightGrad, vec![x.0, dy.0], value, None)
    }

    /// Sums `g` over broadcast channels so it matches `target` shape.
    fn unbroadcast(&mut self, g: Var, target: Shape) -> Result<Var> {
        if self.value(g).shape() == target {
            Ok(g)
        } else {
            self.reduce_channels(g)
        }
    }

    /// Vector-Jacobian products of node `id` for each of its inputs;
    /// `needs[i]` is false for inputs whose gradient is not wanted.
    fn vjp(&mut self, id: usize, dy: Var, needs: &[bool]) -> Result<Vec<Option<Var>>> {
        let op = self.nodes[id].op.clone();
        let ins: Vec<Var> = self.nodes[id].inputs.iter().map(|&i| Var(i)).collect();
        let shape_of = |g: &Self, v: Var| g.value(v).shape();
        let out = match op {
            Op::Constant | Op::Variable | Op::Param(_) => vec![],
            Op::Conv2d(p) => {
                let xs = shape_of(self, ins[0]);
                let ws = shape_of(self, ins[1]);
                let dx = if needs[0] {
                    Some(self.conv_input_grad(dy, ins[1], p, xs.h, xs.w)?)
                } else {
                    None
                };
                let dw = if needs[1] {
                    Some(self.conv_weight_grad(ins[0], dy, p, ws.h, ws.w)?)
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::ConvInputGrad { p, .. } => {
                let ws = shape_of(self, ins[1]);
                let d_dy = if needs[0] {
                    Some(self.conv2d(dy, ins[1], p)?)
                } else {
                    None
                };
                let dw = if needs[1] {
                    Some(self.conv_weight_grad(dy, ins[0], p, ws.h, ws.w)?)
                } else {
                    None
                };
                vec![d_dy, dw]
            }
            Op::ConvWeightGrad { p, .. } => {
                let xs = shape_of(self, ins[0]);
                let dx = if needs[0] {
                    Some(self.conv_input_grad(ins[1], dy, p, xs.h, xs.w)?)
                } else {
                    None
                };
                let d_dy = if needs[1] {
                    Some(self.conv2d(ins[0], dy, p)?)
                } else {
                    None
                };
                vec![dx, d_dy]
            }
            Op::BiasAdd => {
                let db = if needs[1] {
                    Some(self.channel_sum(dy)?)
                } else {
                    None
                };
                vec![Some(dy), db]
            }
            Op::ChannelSum => {
                let s = shape_of(self, ins[0]);
                vec![Some(self.channel_broadcast(dy, s)?)]
            }
            Op::ChannelBroadcast(_) => vec![Some(self.channel_sum(dy)?)],
            Op::Elu => {
                let d = self.elu_deriv(ins[0])?;
                vec![Some(self.mul(dy, d)?)]
            }
            Op::EluDeriv => {
                let d = self.elu_second(ins[0])?;
                vec![Some(self.mul(dy, d)?)]
            }
            Op::Sigmoid => {
                let d = self.sigmoid_deriv(ins[0])?;
                vec![Some(self.mul(dy, d)?)]
            }
            Op::SigmoidDeriv => {
                let d = self.sigmoid_second(ins[0])?;
                vec![Some(self.mul(dy, d)?)]
            }
            Op::EluSecond | Op::SigmoidSecond | Op::SqrtDeriv => {
                return Err(CraError::UnregisteredOp(op.name()))
            }
            Op::Add | Op::Sub => {
                let sa = shape_of(self, ins[0]);
                let sb = shape_of(self, ins[1]);
                let da = if needs[0] {
                    Some(self.unbroadcast(dy, sa)?)
                } else {
                    None
                };
                let db = if needs[1] {
                    let g = self.unbroadcast(dy, sb)?;
                    Some(if matches!(op, Op::Sub) {
                        self.scale(g, -1.0)?
                    } else {
                        g
                    })
                } else {
                    None
                };
                vec![da, db]
            }
            Op::Mul => {
                let sa = shape_of(self, ins[0]);
                let sb = shape_of(self, ins[1]);
                let da = if needs[0] {
                    let g = self.mul(dy, ins[1])?;
                    Some(self.unbroadcast(g, sa)?)
                } else {
                    None
                };
                let db = if needs[1] {
                    let g = self.mul(dy, ins[0])?;
                    Some(self.unbroadcast(g, sb)?)
                } else {
                    None
                };
                vec![da, db]
            }
            Op::ReduceChannels => {
                let c = shape_of(self, ins[0]).c;
                vec![Some(self.repeat_channels(dy, c)?)]
            }
            Op::RepeatChannels(_) => vec![Some(self.reduce_channels(dy)?)],
            Op::Scale(k) => vec![Some(self.scale(dy, k)?)],
            Op::AddScalar(_) => vec![Some(dy)],
            Op::Abs => {
                let s = self.sign(ins[0])?;
                vec![Some(self.mul(dy, s)?)]
            }
            // piecewise constant: zero derivative almost everywhere
            Op::Sign | Op::ClipPass { .. } => vec![None],
            Op::Sqrt => {
                let d = self.sqrt_deriv(ins[0])?;
                vec![Some(self.mul(dy, d)?)]
            }
            Op::Sum => {
                let s = shape_of(self, ins[0]);
                vec![Some(self.fill(dy, s)?)]
            }
            Op::Fill(_) => vec![Some(self.sum(dy)?)],
            Op::SumPerSample => {
                let s = shape_of(self, ins[0]);
                vec![Some(self.broadcast_per_sample(dy, s)?)]
            }
            Op::BroadcastPerSample(_) => vec![Some(self.sum_per_sample(dy)?)],
            Op::Concat(sizes) => {
                let mut start = 0;
                let mut grads = Vec::with_capacity(sizes.len());
                for (k, &len) in sizes.iter().enumerate() {
                    grads.push(if needs[k] {
                        Some(self.slice_channels(dy, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                grads
            }
            Op::SliceChannels { start, .. } => {
                let total = shape_of(self, ins[0]).c;
                vec![Some(self.pad_channels(dy, start, total)?)]
            }
            Op::PadChannels { start, .. } => {
                let len = shape_of(self, ins[0]).c;
                vec![Some(self.slice_channels(dy, start, len)?)]
            }
            Op::Clip { lo, hi } => {
                let pass = self.clip_pass(ins[0], lo, hi)?;
                vec![Some(self.mul(dy, pass)?)]
            }
            Op::AvgPool(f) => {
                let up = self.nearest_up(dy, f)?;
                vec![Some(self.scale(up, 1.0 / (f * f) as f32)?)]
            }
            Op::NearestUp(f) => {
                let pooled = self.avg_pool(dy, f)?;
                vec![Some(self.scale(pooled, (f * f) as f32)?)]
            }
            Op::Transfer(scores) => vec![Some(self.transfer_adjoint(dy, &scores)?)],
            Op::TransferAdjoint(scores) => vec![Some(self.transfer(dy, &scores)?)],
            Op::Dense => {
                let xs = shape_of(self, ins[0]);
                let dx = if needs[0] {
                    Some(self.dense_input_grad(dy, ins[1], xs)?)
                } else {
                    None
                };
                let dw = if needs[1] {
                    Some(self.dense_weight_grad(ins[0], dy)?)
                } else {
                    None
                };
                vec![dx, dw]
            }
            Op::DenseInputGrad(_) => {
                let d_dy = if needs[0] {
                    Some(self.dense(dy, ins[1])?)
                } else {
                    None
                };
                let dw = if needs[1] {
                    Some(self.dense_weight_grad(dy, ins[0])?)
                } else {
                    None
                };
                vec![d_dy, dw]
            }
            Op::DenseWeightGrad => {
                let xs = shape_of(self, ins[0]);
                let dx = if needs[0] {
                    Some(self.dense_input_grad(ins[1], dy, xs)?)
                } else {
                    None
                };
                let d_dy = if needs[1] {
                    Some(self.dense(ins[0], dy)?)
                } else {
                    None
                };
                vec![dx, d_dy]
            }
        };
        Ok(out)
    }

    /// Gradients of the scalar `loss` with respect to `wrt`. The gradient
    /// computation is recorded in the graph, so the results can be
    /// differentiated again. `None` means `loss` does not depend on that var.
    pub fn grad(&mut self, loss: Var, wrt: &[Var]) -> Result<Vec<Option<Var>>> {
        if self.value(loss).len() != 1 {
            return Err(CraError::NotScalar(self.value(loss).shape().to_string()));
        }
        let mut grads: Vec<Option<Var>> = vec![None; loss.0 + 1];
        let mut found: BTreeMap<usize, Var> = BTreeMap::new();
        let seed = self.constant(Tensor::full(self.value(loss).shape(), 1.0));
        grads[loss.0] = Some(seed);
        let wanted: std::collections::BTreeSet<usize> = wrt.iter().map(|v| v.0).collect();
        // nodes on some path to a requested var; everything else is skipped
        let mut reach = vec![false; loss.0 + 1];
        for id in 0..=loss.0 {
            let n = &self.nodes[id];
            reach[id] =
                n.requires_grad && (wanted.contains(&id) || n.inputs.iter().any(|&i| reach[i]));
        }
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if wanted.contains(&id) {
                found.insert(id, g);
            }
            if !reach[id] || self.nodes[id].inputs.is_empty() {
                continue;
            }
            let inputs = self.nodes[id].inputs.clone();
            let needs: Vec<bool> = inputs.iter().map(|&i| reach[i]).collect();
            if !needs.contains(&true) {
                continue;
            }
            let input_grads = self.vjp(id, g, &needs)?;
            for (inp, ig) in inputs.into_iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !reach[inp] {
                    continue;
                }
                grads[inp] = Some(match grads[inp] {
                    Some(prev) => self.add(prev, ig)?,
                    None => ig,
                });
            }
        }
        Ok(wrt.iter().map(|v| found.get(&v.0).copied()).collect())
    }

    /// Gradient of `loss` for every parameter in the graph. Parameters the
    /// loss does not depend on get zero gradients.
    pub fn backward(&mut self, loss: Var) -> Result<GradMap> {
        let names: Vec<(String, Var)> = self.params.iter().map(|(k, v)| (k.clone(), *v)).collect();
        let vars: Vec<Var> = names.iter().map(|(_, v)| *v).collect();
        let grads = self.grad(loss, &vars)?;
        Ok(names
            .into_iter()
            .zip(grads)
            .map(|((name, var), g)| {
                let t = match g {
                    Some(g) => self.value(g).clone(),
                    None => Tensor::zeros(self.value(var).shape()),
                };
                (name, t)
            })
            .collect())
    }

    /// Op names that appear in the graph, in first-use order.
    pub fn op_names(&self) -> Vec<&'static str> {
        let mut seen = Vec::new();
        for n in &self.nodes {
            let name = n.op.name();
            if !seen.contains(&name) {
                seen.push(name);
            }
        }
        seen
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::new();
        let x = g
            .param_with(
                "x",
                Tensor::from_fn(Shape::new(1, 2, 2, 2), |_, c, y, x| (c + y + x) as f32),
            )
            .unwrap();
        let l = g.sum(x).unwrap();
        let grads = g.backward(l).unwrap();
        assert!(grads["x"].data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn half_sum_of_squares_gradient_is_x() {
        let t = Tensor::from_fn(Shape::new(1, 1, 3, 3), |_, _, y, x| {
            y as f32 - x as f32 * 0.5
        });
        let mut g = Graph::new();
        let x = g.param_with("x", t.clone()).unwrap();
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        assert_eq!(grads["x"], t);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut g = Graph::new();
        let x = g
            .param_with("x", Tensor::zeros(Shape::new(1, 1, 2, 2)))
            .unwrap();
        assert!(matches!(g.backward(x), Err(CraError::NotScalar(_))));
    }

    #[test]
    fn third_order_is_unregistered() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::new(1, 1, 1, 2), -0.3));
        let e = g.elu(x).unwrap();
        let s = g.sum(e).unwrap();
        let d1 = g.grad(s, &[x]).unwrap()[0].unwrap();
        let s1 = g.sum(d1).unwrap();
        let d2 = g.grad(s1, &[x]).unwrap()[0].unwrap();
        let s2 = g.sum(d2).unwrap();
        assert!(matches!(
            g.grad(s2, &[x]),
            Err(CraError::UnregisteredOp("elu_second"))
        ));
    }

    #[test]
    fn second_derivative_of_elu() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::new(1, 1, 1, 1), -0.5));
        let e = g.elu(x).unwrap();
        let s = g.sum(e).unwrap();
        let d1 = g.grad(s, &[x]).unwrap()[0].unwrap();
        assert!((g.value(d1).data()[0] as f64 - (-0.5f64).exp()).abs() < 1e-7);
        let s1 = g.sum(d1).unwrap();
        let d2 = g.grad(s1, &[x]).unwrap()[0].unwrap();
        assert!((g.value(d2).data()[0] as f64 - (-0.5f64).exp()).abs() < 1e-7);
    }

    #[test]
    fn constants_do_not_receive_gradients() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(Shape::new(1, 1, 2, 2), 2.0));
        let x = g
            .param_with("x", Tensor::full(Shape::new(1, 1, 2, 2), 3.0))
            .unwrap();
        let y = g.mul(c, x).unwrap();
        let l = g.sum(y).unwrap();
        let r = g.grad(l, &[c, x]).unwrap();
        assert!(r[0].is_none());
        assert!(g.value(r[1].unwrap()).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn missing_param_is_reported() {
        let params = Params::new();
        let mut g = Graph::with_params(&params);
        assert!(matches!(g.param("nope"), Err(CraError::WeightMismatch(_))));
    }

    #[test]
    fn non_finite_values_are_errors() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(Shape::new(1, 1, 1, 1), f32::MAX));
        assert!(matches!(g.scale(x, 10.0), Err(CraError::NonFinite(_))));
    }
}
