//! Reverse-mode automatic differentiation over a linear record of executed
//! primitives.
//!
//! Every primitive appends one node holding its output value. `backward`
//! walks the record from the loss down to the first node, so adjoints are
//! replayed in exact reverse execution order, and a node consumed several
//! times accumulates the sum of its adjoints.
//!
//! Values are stored in `T`; reductions and convolution inner products
//! accumulate in `f64`.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self { stride, padding, dilation, groups }
    }

    /// Stride 1, no padding, dense.
    pub fn pointwise() -> Self {
        Self::new(1, 0, 1, 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

const POOL_KERNEL: usize = 3;
const POOL_PADDING: usize = 1;
const NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d { input: Var, weight: Var, spec: ConvSpec },
    Pool2d { input: Var, kind: PoolKind, stride: usize, argmax: Vec<usize> },
    Linear { input: Var, weight: Var, bias: Var },
    Softmax { input: Var, axis: usize },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Relu { input: Var },
    AddN { inputs: Vec<Var> },
    Mul { a: Var, b: Var },
    ScaleBy { input: Var, weights: Var, index: usize },
    Concat { inputs: Vec<Var> },
    Standardize { input: Var, inv_std: Vec<f64> },
    GlobalAvgPool { input: Var },
    Reshape { input: Var },
    Select { input: Var, index: usize },
    Subsample { input: Var, offset: usize, stride: usize },
    Sum { input: Var },
    Mean { input: Var },
    NormalizeSubset { input: Var, indices: Vec<usize>, total: f64 },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::Pool2d { .. } => "pool2d",
            Op::Linear { .. } => "fully_connected",
            Op::Softmax { .. } => "softmax",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Relu { .. } => "relu",
            Op::AddN { .. } => "add",
            Op::Mul { .. } => "mul",
            Op::ScaleBy { .. } => "scale_by",
            Op::Concat { .. } => "concat",
            Op::Standardize { .. } => "standardize",
            Op::GlobalAvgPool { .. } => "global_avg_pool",
            Op::Reshape { .. } => "reshape",
            Op::Select { .. } => "select",
            Op::Subsample { .. } => "subsample",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::NormalizeSubset { .. } => "normalize_subset",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    requires_grad: bool,
}

/// Adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    visited: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to `v`, or `None` when `v` is not
    /// reachable from the loss or does not require a gradient.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Nodes whose adjoint was propagated, in visiting order.
    pub fn visit_order(&self) -> &[Var] {
        &self.visited
    }
}

#[derive(Default)]
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [n, c, h, w] => Ok([n, c, h, w]),
        _ => Err(Error::shape(op, format!("expected a rank-4 tensor, got shape {shape:?}"))),
    }
}

/// Output indices `o` with `0 <= o*stride + offset - pad < extent`.
fn valid_range(offset: usize, pad: usize, stride: usize, extent: usize, out: usize) -> (usize, usize) {
    let offset = offset as i64;
    let pad = pad as i64;
    let stride = stride as i64;
    let lo = if pad > offset { (pad - offset + stride - 1) / stride } else { 0 };
    let hi_num = extent as i64 - 1 + pad - offset;
    if hi_num < 0 {
        return (0, 0);
    }
    let hi = (hi_num / stride + 1).min(out as i64);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn conv_out(extent: usize, kernel: usize, spec: &ConvSpec) -> Option<usize> {
    let span = spec.dilation * (kernel - 1) + 1;
    let padded = extent + 2 * spec.padding;
    (padded >= span).then(|| (padded - span) / spec.stride + 1)
}

fn pool_out(extent: usize, stride: usize) -> usize {
    (extent + 2 * POOL_PADDING - POOL_KERNEL) / stride + 1
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn f64s(&self, v: Var) -> Vec<f64> {
        self.data(v).iter().map(|x| x.as_f64()).collect()
    }

    fn output(shape: Vec<usize>, data: Vec<f64>) -> Tensor<T> {
        Tensor::new(shape, data.into_iter().map(T::from_f64).collect()).expect("output shape")
    }

    /// Records an input tensor. Its `requires_grad` flag decides whether
    /// gradients flow to it.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let rg = tensor.requires_grad();
        self.push(tensor, Op::Leaf, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, spec: ConvSpec) -> Result<Var> {
        let [n, c_in, h, w] = dims4("conv2d", self.shape(input))?;
        let [c_out, c_per_group, kh, kw] = dims4("conv2d", self.shape(weight))?;
        if spec.groups == 0 || spec.stride == 0 || spec.dilation == 0 {
            return Err(Error::invalid("conv2d groups, stride and dilation must be at least 1"));
        }
        if c_in % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("input channels {c_in} not divisible by groups {}", spec.groups),
            ));
        }
        if c_out % spec.groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("output channels {c_out} not divisible by groups {}", spec.groups),
            ));
        }
        if c_per_group != c_in / spec.groups {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight in-channel dimension is {c_per_group}, expected {} (input channels {c_in} / groups {})",
                    c_in / spec.groups,
                    spec.groups
                ),
            ));
        }
        let ho = conv_out(h, kh, &spec)
            .ok_or_else(|| Error::shape("conv2d", format!("height {h} too small for kernel {kh}")))?;
        let wo = conv_out(w, kw, &spec)
            .ok_or_else(|| Error::shape("conv2d", format!("width {w} too small for kernel {kw}")))?;

        let x = self.f64s(input);
        let wt = self.f64s(weight);
        let oc_per_group = c_out / spec.groups;
        let mut out = vec![0.0f64; n * c_out * ho * wo];
        let (s, d, p) = (spec.stride, spec.dilation, spec.padding);
        for b in 0..n {
            for oc in 0..c_out {
                let g = oc / oc_per_group;
                let acc = &mut out[(b * c_out + oc) * ho * wo..][..ho * wo];
                for icg in 0..c_per_group {
                    let ic = g * c_per_group + icg;
                    let plane = &x[(b * c_in + ic) * h * w..][..h * w];
                    for ky in 0..kh {
                        let (oy0, oy1) = valid_range(ky * d, p, s, h, ho);
                        for kx in 0..kw {
                            let wv = wt[((oc * c_per_group + icg) * kh + ky) * kw + kx];
                            let (ox0, ox1) = valid_range(kx * d, p, s, w, wo);
                            if ox0 == ox1 {
                                continue;
                            }
                            for oy in oy0..oy1 {
                                let iy = oy * s + ky * d - p;
                                let row = &plane[iy * w..][..w];
                                let orow = &mut acc[oy * wo..][..wo];
                                if s == 1 {
                                    let ix0 = ox0 + kx * d - p;
                                    for (o, xv) in orow[ox0..ox1].iter_mut().zip(&row[ix0..]) {
                                        *o += wv * xv;
                                    }
                                } else {
                                    for ox in ox0..ox1 {
                                        orow[ox] += wv * row[ox * s + kx * d - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input, weight]);
        Ok(self.push(Self::output(vec![n, c_out, ho, wo], out), Op::Conv2d { input, weight, spec }, rg))
    }

    pub fn pool2d(&mut self, input: Var, kind: PoolKind, stride: usize) -> Result<Var> {
        if stride < 1 {
            return Err(Error::invalid("pool2d stride must be at least 1"));
        }
        let [n, c, h, w] = dims4("pool2d", self.shape(input))?;
        let (ho, wo) = (pool_out(h, stride), pool_out(w, stride));
        let x = self.f64s(input);
        let mut out = vec![0.0f64; n * c * ho * wo];
        let mut argmax = Vec::new();
        if kind == PoolKind::Max {
            argmax.reserve(out.len());
        }
        for plane in 0..n * c {
            let xp = &x[plane * h * w..][..h * w];
            for oy in 0..ho {
                let y0 = (oy * stride).saturating_sub(POOL_PADDING);
                let y1 = (oy * stride + POOL_KERNEL - POOL_PADDING).min(h);
                for ox in 0..wo {
                    let x0 = (ox * stride).saturating_sub(POOL_PADDING);
                    let x1 = (ox * stride + POOL_KERNEL - POOL_PADDING).min(w);
                    let o = &mut out[(plane * ho + oy) * wo + ox];
                    match kind {
                        PoolKind::Max => {
                            let mut best = f64::NEG_INFINITY;
                            let mut at = 0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    let v = xp[iy * w + ix];
                                    if v > best {
                                        best = v;
                                        at = iy * w + ix;
                                    }
                                }
                            }
                            *o = best;
                            argmax.push(plane * h * w + at);
                        }
                        PoolKind::Avg => {
                            let mut sum = 0.0;
                            for iy in y0..y1 {
                                for ix in x0..x1 {
                                    sum += xp[iy * w + ix];
                                }
                            }
                            *o = sum / ((y1 - y0) * (x1 - x0)) as f64;
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(
            Self::output(vec![n, c, ho, wo], out),
            Op::Pool2d { input, kind, stride, argmax },
            rg,
        ))
    }

    /// `input [N, F_in] · weightᵀ [F_in, F_out] + bias`.
    pub fn fully_connected(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let (n, f_in) = match *self.shape(input) {
            [n, f] => (n, f),
            ref s => return Err(Error::shape("fully_connected", format!("input must be [N, F_in], got {s:?}"))),
        };
        let f_out = match *self.shape(weight) {
            [o, i] if i == f_in => o,
            ref s => {
                return Err(Error::shape(
                    "fully_connected",
                    format!("weight shape {s:?} does not accept F_in = {f_in}"),
                ))
            }
        };
        if self.shape(bias) != [f_out] {
            return Err(Error::shape(
                "fully_connected",
                format!("bias shape {:?}, expected [{f_out}]", self.shape(bias)),
            ));
        }
        let (x, wt, b) = (self.data(input), self.data(weight), self.data(bias));
        let mut out = vec![0.0f64; n * f_out];
        for r in 0..n {
            let xr = &x[r * f_in..][..f_in];
            for o in 0..f_out {
                let wr = &wt[o * f_in..][..f_in];
                let mut acc = b[o].as_f64();
                for (xv, wv) in xr.iter().zip(wr) {
                    acc += xv.as_f64() * wv.as_f64();
                }
                out[r * f_out + o] = acc;
            }
        }
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(Self::output(vec![n, f_out], out), Op::Linear { input, weight, bias }, rg))
    }

    pub fn softmax(&mut self, input: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(input).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("softmax", format!("axis {axis} out of range for shape {shape:?}")));
        }
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let x = self.data(input);
        let mut out = vec![T::zero(); x.len()];
        let mut lane = vec![T::zero(); len];
        for o in 0..outer {
            for i in 0..inner {
                for k in 0..len {
                    lane[k] = x[(o * len + k) * inner + i];
                }
                let probs = softmax_lane(&lane);
                for k in 0..len {
                    out[(o * len + k) * inner + i] = probs[k];
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax { input, axis }, rg))
    }

    /// Mean negative log-likelihood of `labels` under `logits [N, C]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = match *self.shape(logits) {
            [n, c] => (n, c),
            ref s => return Err(Error::shape("cross_entropy", format!("logits must be [N, C], got {s:?}"))),
        };
        if labels.len() != n {
            return Err(Error::shape("cross_entropy", format!("{} labels for batch of {n}", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
        }
        let x = self.f64s(logits);
        let mut probs = vec![0.0; n * c];
        let mut loss = 0.0;
        for r in 0..n {
            let row = &x[r * c..][..c];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            for k in 0..c {
                probs[r * c + k] = (row[k] - log_z).exp();
            }
            loss += log_z - row[labels[r]];
        }
        loss /= n as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("cross-entropy loss".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(T::from_f64(loss)),
            Op::CrossEntropy { logits, labels: labels.to_vec(), probs },
            rg,
        ))
    }

    pub fn relu(&mut self, input: Var) -> Var {
        let t = self.value(input);
        let out: Vec<T> = t.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[input]);
        self.push(Tensor::new(shape, out).expect("relu shape"), Op::Relu { input }, rg)
    }

    /// Elementwise sum of equally shaped tensors.
    pub fn add_n(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("add of zero tensors"))?;
        let shape = self.shape(first).to_vec();
        for v in &inputs[1..] {
            if self.shape(*v) != shape.as_slice() {
                return Err(Error::shape(
                    "add",
                    format!("operand shapes {shape:?} and {:?} differ", self.shape(*v)),
                ));
            }
        }
        let mut acc = vec![0.0f64; shape.iter().product()];
        for v in inputs {
            for (a, x) in acc.iter_mut().zip(self.data(*v)) {
                *a += x.as_f64();
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Self::output(shape, acc), Op::AddN { inputs: inputs.to_vec() }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.add_n(&[a, b])
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("operand shapes {:?} and {:?} differ", self.shape(a), self.shape(b)),
            ));
        }
        let out: Vec<T> = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul { a, b }, rg))
    }

    /// `weights[index] · input`, differentiable in both.
    pub fn scale_by(&mut self, input: Var, weights: Var, index: usize) -> Result<Var> {
        let n = self.value(weights).numel();
        if index >= n {
            return Err(Error::shape("scale_by", format!("index {index} out of range for {n} weights")));
        }
        let k = self.data(weights)[index];
        let out: Vec<T> = self.data(input).iter().map(|&v| v * k).collect();
        let shape = self.shape(input).to_vec();
        let rg = self.rg(&[input, weights]);
        Ok(self.push(Tensor::new(shape, out)?, Op::ScaleBy { input, weights, index }, rg))
    }

    /// Concatenates rank-4 tensors along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        if inputs.len() == 1 {
            return Ok(first);
        }
        let [n, _, h, w] = dims4("concat", self.shape(first))?;
        let mut channels = Vec::with_capacity(inputs.len());
        for v in inputs {
            let [nb, c, hb, wb] = dims4("concat", self.shape(*v))?;
            if (nb, hb, wb) != (n, h, w) {
                return Err(Error::shape(
                    "concat",
                    format!("operand shape {:?} incompatible with {:?}", self.shape(*v), self.shape(first)),
                ));
            }
            channels.push(c);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for b in 0..n {
            for (v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.data(*v)[b * c * plane..][..c * plane]);
            }
        }
        let rg = self.rg(inputs);
        Ok(self.push(Tensor::new(vec![n, total, h, w], out)?, Op::Concat { inputs: inputs.to_vec() }, rg))
    }

    /// Parameter-free per-channel standardization over the current minibatch.
    pub fn batch_standardize(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("standardize", self.shape(input))?;
        let plane = h * w;
        let count = (n * plane) as f64;
        let x = self.data(input);
        let mut out = vec![0.0f64; x.len()];
        let mut inv_std = Vec::with_capacity(c);
        for ch in 0..c {
            let mut mean = 0.0;
            for b in 0..n {
                for v in &x[(b * c + ch) * plane..][..plane] {
                    mean += v.as_f64();
                }
            }
            mean /= count;
            let mut var = 0.0;
            for b in 0..n {
                for v in &x[(b * c + ch) * plane..][..plane] {
                    let d = v.as_f64() - mean;
                    var += d * d;
                }
            }
            var /= count;
            let is = 1.0 / (var + NORM_EPS).sqrt();
            for b in 0..n {
                let base = (b * c + ch) * plane;
                for i in base..base + plane {
                    out[i] = (x[i].as_f64() - mean) * is;
                }
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Self::output(vec![n, c, h, w], out), Op::Standardize { input, inv_std }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let [n, c, h, w] = dims4("global_avg_pool", self.shape(input))?;
        let plane = h * w;
        let x = self.data(input);
        let out: Vec<f64> = (0..n * c)
            .map(|i| x[i * plane..][..plane].iter().map(|v| v.as_f64()).sum::<f64>() / plane as f64)
            .collect();
        let rg = self.rg(&[input]);
        Ok(self.push(Self::output(vec![n, c], out), Op::GlobalAvgPool { input }, rg))
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(input).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[input]);
        Ok(self.push(t.with_requires_grad(false), Op::Reshape { input }, rg))
    }

    /// Picks one element as a `[1, 1]` tensor.
    pub fn select(&mut self, input: Var, index: usize) -> Result<Var> {
        let n = self.value(input).numel();
        if index >= n {
            return Err(Error::shape("select", format!("index {index} out of range for {n} elements")));
        }
        let v = self.data(input)[index];
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![1, 1], vec![v])?, Op::Select { input, index }, rg))
    }

    /// Strided spatial subsampling `x[:, :, offset::stride, offset::stride]`.
    pub fn subsample(&mut self, input: Var, offset: usize, stride: usize) -> Result<Var> {
        let [n, c, h, w] = dims4("subsample", self.shape(input))?;
        if stride == 0 || offset >= h || offset >= w {
            return Err(Error::shape(
                "subsample",
                format!("offset {offset} / stride {stride} invalid for spatial {h}x{w}"),
            ));
        }
        let ho = (h - offset).div_ceil(stride);
        let wo = (w - offset).div_ceil(stride);
        let x = self.data(input);
        let mut out = Vec::with_capacity(n * c * ho * wo);
        for plane in 0..n * c {
            for oy in 0..ho {
                let row = &x[(plane * h + offset + oy * stride) * w..][..w];
                for ox in 0..wo {
                    out.push(row[offset + ox * stride]);
                }
            }
        }
        let rg = self.rg(&[input]);
        Ok(self.push(Tensor::new(vec![n, c, ho, wo], out)?, Op::Subsample { input, offset, stride }, rg))
    }

    pub fn sum(&mut self, input: Var) -> Var {
        let s: f64 = self.data(input).iter().map(|v| v.as_f64()).sum();
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Sum { input }, rg)
    }

    pub fn mean(&mut self, input: Var) -> Var {
        let x = self.data(input);
        let s: f64 = x.iter().map(|v| v.as_f64()).sum::<f64>() / x.len().max(1) as f64;
        let rg = self.rg(&[input]);
        self.push(Tensor::scalar(T::from_f64(s)), Op::Mean { input }, rg)
    }

    /// `input[indices] / Σ input[indices]`, a 1-D tensor of `indices.len()`.
    pub fn normalize_subset(&mut self, input: Var, indices: &[usize]) -> Result<Var> {
        let x = self.data(input);
        if indices.is_empty() {
            return Err(Error::invalid("normalize_subset over an empty index set"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::shape(
                "normalize_subset",
                format!("index {bad} out of range for {} elements", x.len()),
            ));
        }
        let total: f64 = indices.iter().map(|&i| x[i].as_f64()).sum();
        if total <= 0.0 || !total.is_finite() {
            return Err(Error::NonFinite(format!("normalize_subset total {total}")));
        }
        let out: Vec<f64> = indices.iter().map(|&i| x[i].as_f64() / total).collect();
        let rg = self.rg(&[input]);
        Ok(self.push(
            Self::output(vec![indices.len()], out),
            Op::NormalizeSubset { input, indices: indices.to_vec(), total },
            rg,
        ))
    }

    /// Back-propagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::shape("backward", format!("loss must be scalar, got shape {:?}", lt.shape())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut visited = Vec::new();
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            visited.push(Var(idx));
            self.propagate(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        let mut out = Vec::with_capacity(grads.len());
        for (i, g) in grads.into_iter().enumerate() {
            let g = match g {
                Some(g) if self.nodes[i].requires_grad => {
                    if g.iter().any(|v| !v.is_finite()) {
                        return Err(Error::NonFinite(format!(
                            "gradient of {} node {i}",
                            self.nodes[i].op.name()
                        )));
                    }
                    Some(g.into_iter().map(T::from_f64).collect())
                }
                _ => None,
            };
            out.push(g);
        }
        Ok(Gradients { grads: out, visited })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let n = self.nodes[v.0].value.numel();
        let g = grads[v.0].get_or_insert_with(|| vec![0.0; n]);
        f(g);
    }

    fn propagate(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, spec } => self.conv2d_backward(*input, *weight, spec, dy, grads),
            Op::Pool2d { input, kind, stride, argmax } => {
                let [n, c, h, w] = dims4("pool2d", self.shape(*input)).expect("rank 4");
                let (ho, wo) = (pool_out(h, *stride), pool_out(w, *stride));
                self.accumulate(grads, *input, |g| match kind {
                    PoolKind::Max => {
                        for (o, &at) in argmax.iter().enumerate() {
                            g[at] += dy[o];
                        }
                    }
                    PoolKind::Avg => {
                        for plane in 0..n * c {
                            for oy in 0..ho {
                                let y0 = (oy * stride).saturating_sub(POOL_PADDING);
                                let y1 = (oy * stride + POOL_KERNEL - POOL_PADDING).min(h);
                                for ox in 0..wo {
                                    let x0 = (ox * stride).saturating_sub(POOL_PADDING);
                                    let x1 = (ox * stride + POOL_KERNEL - POOL_PADDING).min(w);
                                    let share = dy[(plane * ho + oy) * wo + ox] / ((y1 - y0) * (x1 - x0)) as f64;
                                    for iy in y0..y1 {
                                        for ix in x0..x1 {
                                            g[(plane * h + iy) * w + ix] += share;
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
            }
            Op::Linear { input, weight, bias } => {
                let &[n, f_in] = self.shape(*input) else { unreachable!() };
                let f_out = self.shape(*bias)[0];
                let x = self.f64s(*input);
                let wt = self.f64s(*weight);
                self.accumulate(grads, *input, |g| {
                    for r in 0..n {
                        for o in 0..f_out {
                            let d = dy[r * f_out + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (gi, wv) in g[r * f_in..][..f_in].iter_mut().zip(&wt[o * f_in..][..f_in]) {
                                *gi += d * wv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *weight, |g| {
                    for o in 0..f_out {
                        let gr = &mut g[o * f_in..][..f_in];
                        for r in 0..n {
                            let d = dy[r * f_out + o];
                            if d == 0.0 {
                                continue;
                            }
                            for (gi, xv) in gr.iter_mut().zip(&x[r * f_in..][..f_in]) {
                                *gi += d * xv;
                            }
                        }
                    }
                });
                self.accumulate(grads, *bias, |g| {
                    for r in 0..n {
                        for o in 0..f_out {
                            g[o] += dy[r * f_out + o];
                        }
                    }
                });
            }
            Op::Softmax { input, axis } => {
                let shape = node.value.shape();
                let len = shape[*axis];
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let y = node.value.data();
                self.accumulate(grads, *input, |g| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |k: usize| (o * len + k) * inner + i;
                            let dot: f64 = (0..len).map(|k| dy[at(k)] * y[at(k)].as_f64()).sum();
                            for k in 0..len {
                                g[at(k)] += y[at(k)].as_f64() * (dy[at(k)] - dot);
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let n = labels.len();
                let c = probs.len() / n;
                let scale = dy[0] / n as f64;
                self.accumulate(grads, *logits, |g| {
                    for r in 0..n {
                        for k in 0..c {
                            let onehot = if k == labels[r] { 1.0 } else { 0.0 };
                            g[r * c + k] += (probs[r * c + k] - onehot) * scale;
                        }
                    }
                });
            }
            Op::Relu { input } => {
                let y = node.value.data();
                self.accumulate(grads, *input, |g| {
                    for ((gi, d), yv) in g.iter_mut().zip(dy).zip(y) {
                        if *yv > T::zero() {
                            *gi += d;
                        }
                    }
                });
            }
            Op::AddN { inputs } => {
                for v in inputs {
                    self.accumulate(grads, *v, |g| {
                        for (gi, d) in g.iter_mut().zip(dy) {
                            *gi += d;
                        }
                    });
                }
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.data(*a), self.data(*b));
                self.accumulate(grads, *a, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * bv[i].as_f64();
                    }
                });
                self.accumulate(grads, *b, |g| {
                    for i in 0..g.len() {
                        g[i] += dy[i] * av[i].as_f64();
                    }
                });
            }
            Op::ScaleBy { input, weights, index } => {
                let k = self.data(*weights)[*index].as_f64();
                self.accumulate(grads, *input, |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d * k;
                    }
                });
                let x = self.data(*input);
                self.accumulate(grads, *weights, |g| {
                    g[*index] += dy.iter().zip(x).map(|(d, v)| d * v.as_f64()).sum::<f64>();
                });
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = dims4("concat", node.value.shape()).expect("rank 4");
                let plane = h * w;
                let mut start = 0;
                for v in inputs {
                    let c = self.shape(*v)[1];
                    self.accumulate(grads, *v, |g| {
                        for b in 0..n {
                            let src = &dy[(b * total + start) * plane..][..c * plane];
                            for (gi, d) in g[b * c * plane..][..c * plane].iter_mut().zip(src) {
                                *gi += d;
                            }
                        }
                    });
                    start += c;
                }
            }
            Op::Standardize { input, inv_std } => {
                let [n, c, h, w] = dims4("standardize", node.value.shape()).expect("rank 4");
                let plane = h * w;
                let count = (n * plane) as f64;
                let y = node.value.data();
                self.accumulate(grads, *input, |g| {
                    for ch in 0..c {
                        let (mut mean_dy, mut mean_dyy) = (0.0, 0.0);
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                mean_dy += dy[i];
                                mean_dyy += dy[i] * y[i].as_f64();
                            }
                        }
                        mean_dy /= count;
                        mean_dyy /= count;
                        for b in 0..n {
                            let base = (b * c + ch) * plane;
                            for i in base..base + plane {
                                g[i] += inv_std[ch] * (dy[i] - mean_dy - y[i].as_f64() * mean_dyy);
                            }
                        }
                    }
                });
            }
            Op::GlobalAvgPool { input } => {
                let [_, _, h, w] = dims4("global_avg_pool", self.shape(*input)).expect("rank 4");
                let plane = h * w;
                self.accumulate(grads, *input, |g| {
                    for (i, d) in dy.iter().enumerate() {
                        let share = d / plane as f64;
                        for gi in &mut g[i * plane..][..plane] {
                            *gi += share;
                        }
                    }
                });
            }
            Op::Reshape { input } => {
                self.accumulate(grads, *input, |g| {
                    for (gi, d) in g.iter_mut().zip(dy) {
                        *gi += d;
                    }
                });
            }
            Op::Select { input, index } => {
                self.accumulate(grads, *input, |g| g[*index] += dy[0]);
            }
            Op::Subsample { input, offset, stride } => {
                let [n, c, h, w] = dims4("subsample", self.shape(*input)).expect("rank 4");
                let ho = (h - offset).div_ceil(*stride);
                let wo = (w - offset).div_ceil(*stride);
                self.accumulate(grads, *input, |g| {
                    for plane in 0..n * c {
                        for oy in 0..ho {
                            for ox in 0..wo {
                                let iy = offset + oy * stride;
                                let ix = offset + ox * stride;
                                g[(plane * h + iy) * w + ix] += dy[(plane * ho + oy) * wo + ox];
                            }
                        }
                    }
                });
            }
            Op::Sum { input } => {
                self.accumulate(grads, *input, |g| g.iter_mut().for_each(|gi| *gi += dy[0]));
            }
            Op::Mean { input } => {
                let n = self.value(*input).numel().max(1) as f64;
                self.accumulate(grads, *input, |g| g.iter_mut().for_each(|gi| *gi += dy[0] / n));
            }
            Op::NormalizeSubset { input, indices, total } => {
                let y = node.value.data();
                let dot: f64 = dy.iter().zip(y).map(|(d, v)| d * v.as_f64()).sum();
                self.accumulate(grads, *input, |g| {
                    for (k, &i) in indices.iter().enumerate() {
                        g[i] += (dy[k] - dot) / total;
                    }
                });
            }
        }
    }

    fn conv2d_backward(&self, input: Var, weight: Var, spec: &ConvSpec, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let [n, c_in, h, w] = dims4("conv2d", self.shape(input)).expect("rank 4");
        let [c_out, c_per_group, kh, kw] = dims4("conv2d", self.shape(weight)).expect("rank 4");
        let ho = conv_out(h, kh, spec).expect("validated in forward");
        let wo = conv_out(w, kw, spec).expect("validated in forward");
        let oc_per_group = c_out / spec.groups;
        let (s, d, p) = (spec.stride, spec.dilation, spec.padding);

        if self.nodes[input.0].requires_grad {
            let wt = self.f64s(weight);
            self.accumulate(grads, input, |g| {
                for b in 0..n {
                    for oc in 0..c_out {
                        let grp = oc / oc_per_group;
                        let dplane = &dy[(b * c_out + oc) * ho * wo..][..ho * wo];
                        for icg in 0..c_per_group {
                            let ic = grp * c_per_group + icg;
                            let gp = &mut g[(b * c_in + ic) * h * w..][..h * w];
                            for ky in 0..kh {
                                let (oy0, oy1) = valid_range(ky * d, p, s, h, ho);
                                for kx in 0..kw {
                                    let wv = wt[((oc * c_per_group + icg) * kh + ky) * kw + kx];
                                    let (ox0, ox1) = valid_range(kx * d, p, s, w, wo);
                                    if ox0 == ox1 {
                                        continue;
                                    }
                                    for oy in oy0..oy1 {
                                        let iy = oy * s + ky * d - p;
                                        let drow = &dplane[oy * wo..][..wo];
                                        let grow = &mut gp[iy * w..][..w];
                                        if s == 1 {
                                            let ix0 = ox0 + kx * d - p;
                                            for (gi, dv) in grow[ix0..].iter_mut().zip(&drow[ox0..ox1]) {
                                                *gi += wv * dv;
                                            }
                                        } else {
                                            for ox in ox0..ox1 {
                                                grow[ox * s + kx * d - p] += wv * drow[ox];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            });
        }

        if self.nodes[weight.0].requires_grad {
            let x = self.f64s(input);
            self.accumulate(grads, weight, |g| {
                for oc in 0..c_out {
                    let grp = oc / oc_per_group;
                    for icg in 0..c_per_group {
                        let ic = grp * c_per_group + icg;
                        for ky in 0..kh {
                            let (oy0, oy1) = valid_range(ky * d, p, s, h, ho);
                            for kx in 0..kw {
                                let (ox0, ox1) = valid_range(kx * d, p, s, w, wo);
                                if ox0 == ox1 {
                                    continue;
                                }
                                let mut acc = 0.0;
                                for b in 0..n {
                                    let dplane = &dy[(b * c_out + oc) * ho * wo..][..ho * wo];
                                    let plane = &x[(b * c_in + ic) * h * w..][..h * w];
                                    for oy in oy0..oy1 {
                                        let iy = oy * s + ky * d - p;
                                        let drow = &dplane[oy * wo..][..wo];
                                        let row = &plane[iy * w..][..w];
                                        if s == 1 {
                                            let ix0 = ox0 + kx * d - p;
                                            for (dv, xv) in drow[ox0..ox1].iter().zip(&row[ix0..]) {
                                                acc += dv * xv;
                                            }
                                        } else {
                                            for ox in ox0..ox1 {
                                                acc += drow[ox] * row[ox * s + kx * d - p];
                                            }
                                        }
                                    }
                                }
                                g[((oc * c_per_group + icg) * kh + ky) * kw + kx] += acc;
                            }
                        }
                    }
                }
            });
        }
    }
}

/// Max-subtracted softmax of one lane, shared by the graph op and the plain
/// probability encoders so both produce identical bits.
pub fn softmax_lane<T: Scalar>(lane: &[T]) -> Vec<T> {
    let max = lane.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = lane.iter().map(|v| (v.as_f64() - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| T::from_f64(e / z)).collect()
}
