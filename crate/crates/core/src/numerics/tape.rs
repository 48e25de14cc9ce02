//! Reverse-mode differentiation over a linear record of executed ops.
//!
//! Nodes are appended in execution order, so the record is topologically
//! sorted by construction and backward is a single reverse sweep.

use super::tensor::{Scalar, Tensor};
use super::NumericsError;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Floor applied to the input of `sqrt` before differentiating.
pub const SQRT_GRAD_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
        cols: Vec<T>,
    },
    MaxPool2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Dense {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    LeakyRelu {
        input: NodeId,
        slope: T,
    },
    Sigmoid(NodeId),
    Softmax(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Square(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Concat(Vec<NodeId>),
    Reshape(NodeId),
    CrossEntropy {
        logits: NodeId,
        label: usize,
        probs: Vec<T>,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool2 { .. } => "maxpool2",
            Op::Dense { .. } => "dense",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Concat(_) => "concat",
            Op::Reshape(_) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf => vec![],
            Op::Conv2d {
                input,
                kernel,
                bias,
                ..
            } => vec![*input, *kernel, *bias],
            Op::Dense {
                input,
                weight,
                bias,
            } => vec![*input, *weight, *bias],
            Op::MaxPool2 { input, .. } | Op::LeakyRelu { input, .. } => vec![*input],
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::Square(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::Reshape(a) => vec![*a],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Concat(xs) => xs.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// One entry of the computation record, as exposed for inspection.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RecordEntry {
    pub kind: &'static str,
    pub inputs: Vec<NodeId>,
    pub output: NodeId,
}

/// Computation record plus node storage. Confined to one thread at a time.
#[derive(Clone, Debug, Default)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Tracked leaf: receives a gradient on [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, true, Op::Leaf)
    }

    /// Untracked leaf: never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&[T]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Gradient as a tensor; zeros when the node received none.
    pub fn grad_tensor(&self, id: NodeId) -> Tensor<T> {
        let node = &self.nodes[id.0];
        match &node.grad {
            Some(g) => Tensor::new(node.value.shape(), g.clone()).expect("grad shape"),
            None => Tensor::zeros(node.value.shape()),
        }
    }

    pub fn record(&self) -> Vec<RecordEntry> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| !matches!(n.op, Op::Leaf))
            .map(|(i, n)| RecordEntry {
                kind: n.op.kind(),
                inputs: n.op.inputs(),
                output: NodeId(i),
            })
            .collect()
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    /// Cross-correlation of `input: [C_in,H,W]` with `kernel: [C_out,C_in,k,k]`.
    pub fn conv2d(
        &mut self,
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId, NumericsError> {
        let (x, w, b) = (self.value(input), self.value(kernel), self.value(bias));
        let geom = ConvGeometry::new(x.shape(), w.shape(), b.shape(), stride, pad)?;
        let cols = im2col(x.data(), &geom);
        let out = conv_forward(&cols, w.data(), b.data(), &geom);
        let value = Tensor::new(&[geom.c_out, geom.h_out, geom.w_out], out)?;
        let rg = self.needs(&[input, kernel, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
                cols,
            },
        ))
    }

    /// 2×2 max pooling with stride 2 over `[C,H,W]`.
    pub fn maxpool2(&mut self, input: NodeId) -> Result<NodeId, NumericsError> {
        let x = self.value(input);
        let (value, argmax) = maxpool2_forward(x)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    /// `weight · input + bias` with `weight: [m,n]`, `input: [n]`.
    pub fn dense(
        &mut self,
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    ) -> Result<NodeId, NumericsError> {
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let n = x.len();
        if w.rank() != 2 {
            return Err(NumericsError::dim("dense weight rank", 2, w.rank()));
        }
        let (m, wn) = (w.shape()[0], w.shape()[1]);
        if wn != n {
            return Err(NumericsError::dim("dense input features", wn, n));
        }
        if b.len() != m {
            return Err(NumericsError::dim("dense bias length", m, b.len()));
        }
        let mut out = b.data().to_vec();
        T::gemm(m, n, 1, w.data(), false, x.data(), false, T::one(), &mut out);
        let value = Tensor::new(&[m], out)?;
        let rg = self.needs(&[input, weight, bias]);
        Ok(self.push(
            value,
            rg,
            Op::Dense {
                input,
                weight,
                bias,
            },
        ))
    }

    pub fn leaky_relu(&mut self, input: NodeId, slope: T) -> NodeId {
        let value = self
            .value(input)
            .map(|v| if v > T::zero() { v } else { v * slope });
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(sigmoid);
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Sigmoid(input))
    }

    /// Softmax along the leading axis, independently at every trailing position.
    /// For a vector this is the ordinary softmax.
    pub fn softmax(&mut self, input: NodeId) -> NodeId {
        let value = softmax_axis0(self.value(input));
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Softmax(input))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<NodeId, NumericsError> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: op.kind(),
                left: x.shape().to_vec(),
                right: y.shape().to_vec(),
            });
        }
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| f(p, q))
            .collect();
        let value = Tensor::new(x.shape(), data)?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(value, rg, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, NumericsError> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn square(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v * v);
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Square(input))
    }

    /// Square root of `max(x, 0)`.
    pub fn sqrt(&mut self, input: NodeId) -> NodeId {
        let value = self.value(input).map(|v| v.max(T::zero()).sqrt());
        let rg = self.needs(&[input]);
        self.push(value, rg, Op::Sqrt(input))
    }

    pub fn sum(&mut self, input: NodeId) -> NodeId {
        let s = self
            .value(input)
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + v);
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Sum(input))
    }

    pub fn mean(&mut self, input: NodeId) -> NodeId {
        let x = self.value(input);
        let n = T::of_f64(x.len() as f64);
        let s = x.data().iter().fold(T::zero(), |acc, &v| acc + v) / n;
        let rg = self.needs(&[input]);
        self.push(Tensor::scalar(s), rg, Op::Mean(input))
    }

    /// Concatenation along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, inputs: &[NodeId]) -> Result<NodeId, NumericsError> {
        let first = inputs.first().ok_or(NumericsError::EmptyConcat)?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &id in inputs {
            let s = self.shape(id);
            if s[1..] != tail[..] {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            lead += s[0];
            data.extend_from_slice(self.value(id).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let value = Tensor::new(&shape, data)?;
        let rg = self.needs(inputs);
        Ok(self.push(value, rg, Op::Concat(inputs.to_vec())))
    }

    pub fn reshape(&mut self, input: NodeId, shape: &[usize]) -> Result<NodeId, NumericsError> {
        let value = self.value(input).clone().reshaped(shape)?;
        let rg = self.needs(&[input]);
        Ok(self.push(value, rg, Op::Reshape(input)))
    }

    /// `-log softmax(logits)[label]`, fused for numerical stability.
    pub fn cross_entropy(&mut self, logits: NodeId, label: usize) -> Result<NodeId, NumericsError> {
        let x = self.value(logits);
        if x.rank() != 1 {
            return Err(NumericsError::dim("cross_entropy logits rank", 1, x.rank()));
        }
        if label >= x.len() {
            return Err(NumericsError::dim("cross_entropy label", x.len(), label));
        }
        let probs = softmax_axis0(x).into_data();
        let max = x.data().iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = x
            .data()
            .iter()
            .fold(T::zero(), |acc, &v| acc + (v - max).exp())
            .ln()
            + max;
        let loss = lse - x.data()[label];
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            rg,
            Op::CrossEntropy {
                logits,
                label,
                probs,
            },
        ))
    }

    fn accumulate(&mut self, id: NodeId, delta: &[T]) {
        let node = &mut self.nodes[id.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, &d)| *a += d),
            None => node.grad = Some(delta.to_vec()),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Fills gradient buffers of every tracked node upstream of `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<(), NumericsError> {
        let n = self.value(loss).len();
        if n != 1 {
            return Err(NumericsError::NonScalarLoss(self.shape(loss).to_vec()));
        }
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(gy) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
            self.backprop_op(idx, &op, &gy);
            self.nodes[idx].op = op;
            self.nodes[idx].grad = Some(gy);
        }
        Ok(())
    }

    fn backprop_op(&mut self, idx: usize, op: &Op<T>, gy: &[T]) {
        match op {
            Op::Leaf => {}
            Op::Conv2d {
                input,
                kernel,
                bias,
                stride,
                pad,
                cols,
            } => {
                let geom = ConvGeometry::new(
                    self.shape(*input),
                    self.shape(*kernel),
                    self.shape(*bias),
                    *stride,
                    *pad,
                )
                .expect("validated in forward");
                let hw = geom.h_out * geom.w_out;
                let ckk = geom.c_in * geom.k * geom.k;
                if self.wants(*bias) {
                    let db: Vec<T> = gy
                        .chunks(hw)
                        .map(|row| row.iter().fold(T::zero(), |a, &v| a + v))
                        .collect();
                    self.accumulate(*bias, &db);
                }
                if self.wants(*kernel) {
                    let mut dk = vec![T::zero(); geom.c_out * ckk];
                    T::gemm(geom.c_out, hw, ckk, gy, false, cols, true, T::zero(), &mut dk);
                    self.accumulate(*kernel, &dk);
                }
                if self.wants(*input) {
                    let mut dcols = vec![T::zero(); ckk * hw];
                    let w = self.value(*kernel).data();
                    T::gemm(ckk, geom.c_out, hw, w, true, gy, false, T::zero(), &mut dcols);
                    let dx = col2im(&dcols, &geom);
                    self.accumulate(*input, &dx);
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] += gy[o];
                }
                self.accumulate(*input, &dx);
            }
            Op::Dense {
                input,
                weight,
                bias,
            } => {
                let m = gy.len();
                let n = self.value(*input).len();
                self.accumulate(*bias, gy);
                if self.wants(*weight) {
                    let mut dw = vec![T::zero(); m * n];
                    let x = self.value(*input).data();
                    T::gemm(m, 1, n, gy, false, x, false, T::zero(), &mut dw);
                    self.accumulate(*weight, &dw);
                }
                if self.wants(*input) {
                    let mut dx = vec![T::zero(); n];
                    let w = self.value(*weight).data();
                    T::gemm(n, m, 1, w, true, gy, false, T::zero(), &mut dx);
                    self.accumulate(*input, &dx);
                }
            }
            Op::LeakyRelu { input, slope } => {
                let dx: Vec<T> = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&x, &g)| if x > T::zero() { g } else { g * *slope })
                    .collect();
                self.accumulate(*input, &dx);
            }
            Op::Sigmoid(a) => {
                let dx: Vec<T> = self.nodes[idx]
                    .value
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&y, &g)| g * y * (T::one() - y))
                    .collect();
                self.accumulate(*a, &dx);
            }
            Op::Softmax(a) => {
                let y = &self.nodes[idx].value;
                let n = y.shape()[0];
                let rest = y.len() / n;
                let mut dx = vec![T::zero(); y.len()];
                for p in 0..rest {
                    let dot = (0..n).fold(T::zero(), |acc, i| {
                        acc + y.data()[i * rest + p] * gy[i * rest + p]
                    });
                    for i in 0..n {
                        let j = i * rest + p;
                        dx[j] = y.data()[j] * (gy[j] - dot);
                    }
                }
                self.accumulate(*a, &dx);
            }
            Op::Add(a, b) => {
                self.accumulate(*a, gy);
                self.accumulate(*b, gy);
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, gy);
                if self.wants(*b) {
                    let neg: Vec<T> = gy.iter().map(|&g| -g).collect();
                    self.accumulate(*b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    let da: Vec<T> = self
                        .value(*b)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&y, &g)| g * y)
                        .collect();
                    self.accumulate(*a, &da);
                }
                if self.wants(*b) {
                    let db: Vec<T> = self
                        .value(*a)
                        .data()
                        .iter()
                        .zip(gy)
                        .map(|(&x, &g)| g * x)
                        .collect();
                    self.accumulate(*b, &db);
                }
            }
            Op::Square(a) => {
                let two = T::of_f64(2.0);
                let dx: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&x, &g)| g * two * x)
                    .collect();
                self.accumulate(*a, &dx);
            }
            Op::Sqrt(a) => {
                let floor = T::of_f64(SQRT_GRAD_FLOOR);
                let half = T::of_f64(0.5);
                let dx: Vec<T> = self
                    .value(*a)
                    .data()
                    .iter()
                    .zip(gy)
                    .map(|(&x, &g)| g * half / x.max(floor).sqrt())
                    .collect();
                self.accumulate(*a, &dx);
            }
            Op::Sum(a) => {
                let dx = vec![gy[0]; self.value(*a).len()];
                self.accumulate(*a, &dx);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let dx = vec![gy[0] / T::of_f64(n as f64); n];
                self.accumulate(*a, &dx);
            }
            Op::Concat(inputs) => {
                let mut offset = 0;
                for &id in inputs {
                    let len = self.value(id).len();
                    self.accumulate(id, &gy[offset..offset + len]);
                    offset += len;
                }
            }
            Op::Reshape(a) => self.accumulate(*a, gy),
            Op::CrossEntropy {
                logits,
                label,
                probs,
            } => {
                let dx: Vec<T> = probs
                    .iter()
                    .enumerate()
                    .map(|(i, &p)| {
                        let t = if i == *label { T::one() } else { T::zero() };
                        gy[0] * (p - t)
                    })
                    .collect();
                self.accumulate(*logits, &dx);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_axis0<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let n = x.shape()[0];
    let rest = x.len() / n;
    let src = x.data();
    let mut out = vec![T::zero(); x.len()];
    for p in 0..rest {
        let max = (0..n).fold(T::neg_infinity(), |m, i| m.max(src[i * rest + p]));
        let mut total = T::zero();
        for i in 0..n {
            let e = (src[i * rest + p] - max).exp();
            out[i * rest + p] = e;
            total += e;
        }
        for i in 0..n {
            out[i * rest + p] = out[i * rest + p] / total;
        }
    }
    Tensor::new(x.shape(), out).expect("same shape")
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        kernel: &[usize],
        bias: &[usize],
        stride: usize,
        pad: usize,
    ) -> Result<Self, NumericsError> {
        if input.len() != 3 {
            return Err(NumericsError::dim("conv2d input rank", 3, input.len()));
        }
        if kernel.len() != 4 {
            return Err(NumericsError::dim("conv2d kernel rank", 4, kernel.len()));
        }
        let (c_in, h, w) = (input[0], input[1], input[2]);
        let (c_out, kc, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kc != c_in {
            return Err(NumericsError::dim("conv2d kernel input channels", c_in, kc));
        }
        if kh != kw {
            return Err(NumericsError::dim("conv2d kernel width", kh, kw));
        }
        if bias != [c_out] {
            return Err(NumericsError::dim(
                "conv2d bias length",
                c_out,
                bias.iter().product(),
            ));
        }
        if stride == 0 {
            return Err(NumericsError::dim("conv2d stride", 1, 0));
        }
        if kh > h + 2 * pad {
            return Err(NumericsError::dim("conv2d input height", kh, h + 2 * pad));
        }
        if kw > w + 2 * pad {
            return Err(NumericsError::dim("conv2d input width", kw, w + 2 * pad));
        }
        Ok(Self {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out: (h + 2 * pad - kh) / stride + 1,
            w_out: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Input offset for column row `r` at output pixel (`oy`,`ox`), if inside the image.
    #[inline]
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
        let ix = (ox * self.stride + kx) as isize - self.pad as isize;
        if iy < 0 || ix < 0 || iy >= self.h as isize || ix >= self.w as isize {
            None
        } else {
            Some((c * self.h + iy as usize) * self.w + ix as usize)
        }
    }
}

fn im2col<T: Scalar>(x: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut cols = vec![T::zero(); g.c_in * g.k * g.k * hw];
    let mut row = 0;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some(src) = g.source(c, ky, kx, oy, ox) {
                            dst[oy * g.w_out + ox] = x[src];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let mut dx = vec![T::zero(); g.c_in * g.h * g.w];
    let mut row = 0;
    for c in 0..g.c_in {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let src = &cols[row * hw..(row + 1) * hw];
                for oy in 0..g.h_out {
                    for ox in 0..g.w_out {
                        if let Some(dst) = g.source(c, ky, kx, oy, ox) {
                            dx[dst] += src[oy * g.w_out + ox];
                        }
                    }
                }
                row += 1;
            }
        }
    }
    dx
}

fn conv_forward<T: Scalar>(cols: &[T], w: &[T], b: &[T], g: &ConvGeometry) -> Vec<T> {
    let hw = g.h_out * g.w_out;
    let ckk = g.c_in * g.k * g.k;
    let mut out = Vec::with_capacity(g.c_out * hw);
    for &bias in b {
        out.extend(std::iter::repeat(bias).take(hw));
    }
    T::gemm(g.c_out, ckk, hw, w, false, cols, false, T::one(), &mut out);
    out
}

fn maxpool2_forward<T: Scalar>(x: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>), NumericsError> {
    if x.rank() != 3 {
        return Err(NumericsError::dim("maxpool2 input rank", 3, x.rank()));
    }
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if h % 2 != 0 {
        return Err(NumericsError::OddPoolExtent { dim: "height", extent: h });
    }
    if w % 2 != 0 {
        return Err(NumericsError::OddPoolExtent { dim: "width", extent: w });
    }
    let (ho, wo) = (h / 2, w / 2);
    let src = x.data();
    let mut out = Vec::with_capacity(c * ho * wo);
    let mut argmax = Vec::with_capacity(c * ho * wo);
    for ch in 0..c {
        for oy in 0..ho {
            for ox in 0..wo {
                let base = (ch * h + 2 * oy) * w + 2 * ox;
                let mut best = base;
                for cand in [base + 1, base + w, base + w + 1] {
                    if src[cand] > src[best] {
                        best = cand;
                    }
                }
                out.push(src[best]);
                argmax.push(best);
            }
        }
    }
    Ok((Tensor::new(&[c, ho, wo], out)?, argmax))
}
