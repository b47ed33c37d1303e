use crate::autodiff::{ParamId, ParamStore};
use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, matmul_dims, transpose_into, Tensor};
use crate::wavelet::{haar_analysis, haar_synthesis};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Cos,
    Sin,
    /// Subgradient at 0 is 0.
    Abs,
    Neg,
    Exp,
}

impl Unary {
    fn apply<T: Element>(self, x: T) -> T {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Cos => x.cos(),
            Unary::Sin => x.sin(),
            Unary::Abs => x.abs(),
            Unary::Neg => -x,
            Unary::Exp => x.exp(),
        }
    }

    /// d out / d x given the input `x` and output `y`.
    fn derivative<T: Element>(self, x: T, y: T) -> T {
        match self {
            Unary::Sigmoid => y * (T::one() - y),
            Unary::Relu => {
                if x > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Cos => -x.sin(),
            Unary::Sin => x.cos(),
            Unary::Abs => {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            }
            Unary::Neg => -T::one(),
            Unary::Exp => y,
        }
    }

    fn name(self) -> &'static str {
        match self {
            Unary::Sigmoid => "sigmoid",
            Unary::Relu => "relu",
            Unary::Cos => "cos",
            Unary::Sin => "sin",
            Unary::Abs => "abs",
            Unary::Neg => "neg",
            Unary::Exp => "exp",
        }
    }
}

/// `max(p, floor)` that lets NaN through.
fn floored<T: Element>(p: T, floor: T) -> T {
    if p.is_nan() {
        p
    } else {
        p.max(floor)
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Unary(Var, Unary),
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
        label: &'static str,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    },
    /// `b` indexed by the last axis of `x`.
    AddBias(Var, Var),
    /// `b` indexed by the first axis of `x`.
    AddChannelBias(Var, Var),
    ScaleChannels(Var, Var),
    ChannelMean(Var),
    Sum(Var),
    Mean(Var),
    Dwt2(Var),
    Idwt2([Var; 4]),
    Upsample {
        x: Var,
        factor: usize,
        gain: T,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
        floor: T,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Unary(_, u) => u.name(),
            Op::MatMul(..) => "matmul",
            Op::MatMulNt(..) => "matmul_nt",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::Gather { label, .. } => label,
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::AddBias(..) => "add_bias",
            Op::AddChannelBias(..) => "add_channel_bias",
            Op::ScaleChannels(..) => "scale_channels",
            Op::ChannelMean(_) => "channel_mean",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Dwt2(_) => "dwt2",
            Op::Idwt2(_) => "idwt2",
            Op::Upsample { .. } => "upsample_nearest",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::MatMul(a, b)
            | Op::MatMulNt(a, b)
            | Op::AddBias(a, b)
            | Op::AddChannelBias(a, b)
            | Op::ScaleChannels(a, b) => vec![*a, *b],
            Op::Scale(x, _)
            | Op::Unary(x, _)
            | Op::Transpose(x)
            | Op::Reshape(x)
            | Op::ChannelMean(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Dwt2(x) => vec![*x],
            Op::Gather { x, .. } | Op::Softmax { x, .. } | Op::Upsample { x, .. } => vec![*x],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Idwt2(parts) => parts.to_vec(),
            Op::CrossEntropy { p, .. } => vec![*p],
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Operation record for one forward pass.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients of a scalar with respect to every node that required one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation names in recording order.
    pub fn trace(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && !value.all_finite() {
            let finite_inputs = inputs.iter().all(|i| self.nodes[i.0].value.all_finite());
            assert!(
                !finite_inputs,
                "{} produced non-finite output from finite inputs",
                op.name()
            );
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool, param: Option<ParamId>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false, None)
    }

    /// A free input whose gradient is reported by [`Tape::gradients`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true, None)
    }

    /// Copies a parameter onto the tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.leaf(store.value(id).clone(), true, Some(id))
    }

    // ---- elementwise -------------------------------------------------

    fn broadcast_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.value(a), self.value(b));
        if sa.shape() == sb.shape() || sb.len() == 1 {
            Ok(sa.shape().to_vec())
        } else if sa.len() == 1 {
            Ok(sb.shape().to_vec())
        } else {
            Err(Error::dims(op, sa.shape(), sb.shape()))
        }
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Vec<T> {
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        match (va.len(), vb.len()) {
            (n, m) if n == m => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (_, 1) => va.iter().map(|&x| f(x, vb[0])).collect(),
            _ => vb.iter().map(|&y| f(va[0], y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("add", a, b)?;
        let data = self.binary(a, b, |x, y| x + y);
        Ok(self.push(Op::Add(a, b), Tensor::from_parts(shape, data)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("sub", a, b)?;
        let data = self.binary(a, b, |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), Tensor::from_parts(shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.broadcast_shape("mul", a, b)?;
        let data = self.binary(a, b, |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), Tensor::from_parts(shape, data)))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v * c);
        self.push(Op::Scale(x, c), value)
    }

    pub fn unary(&mut self, x: Var, f: Unary) -> Var {
        let value = self.value(x).map(|v| f.apply(v));
        self.push(Op::Unary(x, f), value)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Cos)
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sin)
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Abs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }

    // ---- linear algebra and layout ----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = matmul_dims(self.shape(a), self.shape(b))?;
        let mut out = vec![T::zero(); m * n];
        gemm(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dims("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![T::zero(); m * n];
        gemm_nt(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Op::MatMulNt(a, b), Tensor::from_parts(vec![m, n], out)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).t()?;
        Ok(self.push(Op::Transpose(x), value))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.push(Op::Reshape(x), value))
    }

    /// `out[i] = x[index[i]]` (flat indices), laid out with `shape`.
    /// Covers slicing, padding, cropping and permutations.
    pub fn gather(
        &mut self,
        x: Var,
        index: Vec<usize>,
        shape: impl Into<Vec<usize>>,
        label: &'static str,
    ) -> Result<Var> {
        let shape = shape.into();
        let src = self.value(x);
        if shape.iter().product::<usize>() != index.len() {
            return Err(Error::dims(label, &shape, &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::contract(format!(
                "{label}: index {bad} out of range for {:?}",
                src.shape()
            )));
        }
        let data = index.iter().map(|&i| src.data()[i]).collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(Op::Gather { x, index, label }, value))
    }

    /// Sub-tensor `i` along the first axis.
    pub fn select(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || i >= shape[0] {
            return Err(Error::contract(format!("select {i} from {shape:?}")));
        }
        let block: usize = shape[1..].iter().product();
        let index = (i * block..(i + 1) * block).collect();
        self.gather(x, index, shape[1..].to_vec(), "select")
    }

    // ---- normalization and reductions --------------------------------

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let max = (0..len).map(|a| src[at(a)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for a in 0..len {
                    let e = (src[at(a)] - max).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        Ok(self.push(
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Standardizes over the last axis, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::contract("layer_norm of scalar"))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dims("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = vec![T::zero(); src.len()];
        for (row, dst) in src.chunks(d).zip(out.chunks_mut(d)) {
            let (mean, inv) = row_stats(row, eps);
            for j in 0..d {
                dst[j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        Ok(self.push(
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            },
            Tensor::from_parts(shape, out),
        ))
    }

    /// Adds `b` (length = last extent) to every row.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&1);
        if self.shape(b) != [d] {
            return Err(Error::dims("add_bias", &shape, self.shape(b)));
        }
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(d)
            .flat_map(|row| row.iter().zip(bias).map(|(&v, &c)| v + c))
            .collect();
        Ok(self.push(Op::AddBias(x, b), Tensor::from_parts(shape, data)))
    }

    /// Adds `b[c]` to every element of channel `c` (first axis).
    pub fn add_channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(b) != [shape[0]] {
            return Err(Error::dims("add_channel_bias", &shape, self.shape(b)));
        }
        let block = self.value(x).len() / shape[0];
        let bias = self.value(b).data();
        let data = self
            .value(x)
            .data()
            .chunks(block)
            .zip(bias)
            .flat_map(|(ch, &c)| ch.iter().map(move |&v| v + c))
            .collect();
        Ok(self.push(Op::AddChannelBias(x, b), Tensor::from_parts(shape, data)))
    }

    /// Multiplies channel `c` (first axis) of `x` by `s[c]`.
    pub fn scale_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || self.shape(s) != [shape[0]] {
            return Err(Error::dims("scale_channels", &shape, self.shape(s)));
        }
        let block = self.value(x).len() / shape[0];
        let gate = self.value(s).data();
        let data = self
            .value(x)
            .data()
            .chunks(block)
            .zip(gate)
            .flat_map(|(ch, &g)| ch.iter().map(move |&v| v * g))
            .collect();
        Ok(self.push(Op::ScaleChannels(x, s), Tensor::from_parts(shape, data)))
    }

    /// Mean over every axis but the first: `[C×…] → [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::contract(format!("channel_mean of {shape:?}")));
        }
        let block = self.value(x).len() / shape[0];
        let denom = T::of(block as f64);
        let data = self
            .value(x)
            .data()
            .chunks(block)
            .map(|ch| ch.iter().copied().sum::<T>() / denom)
            .collect();
        Ok(self.push(Op::ChannelMean(x), Tensor::from_parts(vec![shape[0]], data)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Op::Sum(x), Tensor::scalar(s))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let m = v.sum() / T::of(v.len() as f64);
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    // ---- wavelet and resampling ---------------------------------------

    /// One level of the 2-D Haar analysis on `[C×H×W]`; the result is
    /// `[4×C×H/2×W/2]` stacked as ll, lh, hl, hh.
    pub fn dwt2(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, h, w) = chw(&shape, "dwt2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::contract(format!(
                "dwt2 needs even extents, got {h}×{w}"
            )));
        }
        let data = haar_analysis(self.value(x).data(), c, h, w);
        Ok(self.push(Op::Dwt2(x), Tensor::from_parts(vec![4, c, h / 2, w / 2], data)))
    }

    /// Inverse of [`Tape::dwt2`] from four equally shaped subbands.
    pub fn idwt2(&mut self, parts: [Var; 4]) -> Result<Var> {
        let shape = self.shape(parts[0]).to_vec();
        let (c, h, w) = chw(&shape, "idwt2")?;
        for p in &parts[1..] {
            if self.shape(*p) != shape.as_slice() {
                return Err(Error::dims("idwt2", &shape, self.shape(*p)));
            }
        }
        let mut stacked = Vec::with_capacity(4 * c * h * w);
        for p in &parts {
            stacked.extend_from_slice(self.value(*p).data());
        }
        let data = haar_synthesis(&stacked, c, h, w);
        Ok(self.push(
            Op::Idwt2(parts),
            Tensor::from_parts(vec![c, 2 * h, 2 * w], data),
        ))
    }

    /// Nearest-neighbour upsampling of `[C×H×W]` by `factor`, times `gain`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize, gain: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (c, h, w) = chw(&shape, "upsample_nearest")?;
        if factor == 0 {
            return Err(Error::contract("upsample factor must be positive"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); c * oh * ow];
        for ch in 0..c {
            for r in 0..oh {
                for col in 0..ow {
                    out[(ch * oh + r) * ow + col] = src[(ch * h + r / factor) * w + col / factor] * gain;
                }
            }
        }
        Ok(self.push(
            Op::Upsample { x, factor, gain },
            Tensor::from_parts(vec![c, oh, ow], out),
        ))
    }

    // ---- loss ---------------------------------------------------------

    /// Mean negative log-likelihood of `labels` under class probabilities
    /// `p: [K×…]` (class axis first). Probabilities are floored before the log.
    pub fn cross_entropy(&mut self, p: Var, labels: &[usize]) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        let k = *shape.first().ok_or_else(|| Error::contract("cross_entropy of scalar"))?;
        let n = self.value(p).len() / k;
        if labels.len() != n {
            return Err(Error::dims("cross_entropy", &shape, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::contract(format!("label {bad} outside {k} classes")));
        }
        let floor = T::of(1e-30);
        let probs = self.value(p).data();
        let total: f64 = labels
            .iter()
            .enumerate()
            .map(|(i, &l)| floored(probs[l * n + i], floor).ln().f64())
            .sum();
        let loss = T::of(-total / n as f64);
        Ok(self.push(
            Op::CrossEntropy {
                p,
                labels: labels.to_vec(),
                floor,
            },
            Tensor::scalar(loss),
        ))
    }

    // ---- reverse pass ------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every recorded value
    /// that depends on an input or parameter.
    pub fn gradients(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.needs_grad)
                    .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Runs the reverse pass and adds parameter gradients into `store`.
    /// Calling it twice without [`ParamStore::zero_grad`] accumulates.
    pub fn backward(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        let grads = self.gradients(loss)?;
        for (i, node) in self.nodes.iter().enumerate() {
            if let (Some(id), Some(g)) = (node.param, grads.get(Var(i))) {
                let acc = &mut store.get_mut(id).grad;
                if acc.shape() != g.shape() {
                    return Err(Error::dims("backward", acc.shape(), g.shape()));
                }
                for (a, &d) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a = *a + d;
                }
            }
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                if self.wants(*a) {
                    reduce_into(grads, *a, val(*a).len(), g, |d| d);
                }
                if self.wants(*b) {
                    reduce_into(grads, *b, val(*b).len(), g, |d| d * sign);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                if self.wants(*a) {
                    let prod = mul_broadcast(g, vb);
                    reduce_into(grads, *a, va.len(), &prod, |d| d);
                }
                if self.wants(*b) {
                    let prod = mul_broadcast(g, va);
                    reduce_into(grads, *b, vb.len(), &prod, |d| d);
                }
            }
            Op::Scale(x, c) => {
                let c = *c;
                accumulate(grads, *x, g.len(), |acc| {
                    for (a, &d) in acc.iter_mut().zip(g) {
                        *a = *a + d * c;
                    }
                });
            }
            Op::Unary(x, f) => {
                let (vx, vy) = (val(*x), node.value.data());
                accumulate(grads, *x, g.len(), |acc| {
                    for j in 0..g.len() {
                        acc[j] = acc[j] + g[j] * f.derivative(vx[j], vy[j]);
                    }
                });
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    // dA = G · Bᵀ
                    accumulate(grads, *a, m * k, |acc| gemm_nt(g, val(*b), acc, m, n, k));
                }
                if self.wants(*b) {
                    // dB = Aᵀ · G
                    accumulate(grads, *b, k * n, |acc| gemm_tn(val(*a), g, acc, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (sa, sb) = (self.nodes[a.0].value.shape(), self.nodes[b.0].value.shape());
                let (m, k, n) = (sa[0], sa[1], sb[0]);
                if self.wants(*a) {
                    // dA = G · B
                    accumulate(grads, *a, m * k, |acc| gemm(g, val(*b), acc, m, n, k));
                }
                if self.wants(*b) {
                    // dB = Gᵀ · A
                    accumulate(grads, *b, n * k, |acc| gemm_tn(g, val(*a), acc, n, m, k));
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let (r, c) = (s[0], s[1]);
                let mut t = vec![T::zero(); g.len()];
                transpose_into(g, &mut t, r, c);
                accumulate(grads, *x, g.len(), |acc| add_assign(acc, &t));
            }
            Op::Reshape(x) => accumulate(grads, *x, g.len(), |acc| add_assign(acc, g)),
            Op::Gather { x, index, .. } => {
                accumulate(grads, *x, val(*x).len(), |acc| {
                    for (&src, &d) in index.iter().zip(g) {
                        acc[src] = acc[src] + d;
                    }
                });
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let (outer, len, inner) = (*outer, *len, *inner);
                accumulate(grads, *x, g.len(), |acc| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |a: usize| (o * len + a) * inner + i;
                            let dot: T = (0..len).map(|a| g[at(a)] * y[at(a)]).sum();
                            for a in 0..len {
                                let j = at(a);
                                acc[j] = acc[j] + y[j] * (g[j] - dot);
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                eps,
            } => {
                let src = val(*x);
                let gam = val(*gamma);
                let d = gam.len();
                let rows = src.len() / d;
                let mut dx = vec![T::zero(); src.len()];
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                let inv_d = T::of(1.0 / d as f64);
                for r in 0..rows {
                    let row = &src[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let (mean, inv) = row_stats(row, *eps);
                    let mut sum_gh = T::zero();
                    let mut sum_ghx = T::zero();
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        dgamma[j] = dgamma[j] + gr[j] * xhat;
                        dbeta[j] = dbeta[j] + gr[j];
                        let gh = gr[j] * gam[j];
                        sum_gh = sum_gh + gh;
                        sum_ghx = sum_ghx + gh * xhat;
                    }
                    for j in 0..d {
                        let xhat = (row[j] - mean) * inv;
                        let gh = gr[j] * gam[j];
                        dx[r * d + j] = inv * (gh - inv_d * sum_gh - xhat * inv_d * sum_ghx);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx.len(), |acc| add_assign(acc, &dx));
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, d, |acc| add_assign(acc, &dgamma));
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, d, |acc| add_assign(acc, &dbeta));
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| add_assign(acc, g));
                }
                if self.wants(*b) {
                    let d = val(*b).len();
                    accumulate(grads, *b, d, |acc| {
                        for row in g.chunks(d) {
                            add_assign(acc, row);
                        }
                    });
                }
            }
            Op::AddChannelBias(x, b) => {
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| add_assign(acc, g));
                }
                if self.wants(*b) {
                    let c = val(*b).len();
                    let block = g.len() / c;
                    accumulate(grads, *b, c, |acc| {
                        for (a, ch) in acc.iter_mut().zip(g.chunks(block)) {
                            *a = *a + ch.iter().copied().sum();
                        }
                    });
                }
            }
            Op::ScaleChannels(x, s) => {
                let (vx, vs) = (val(*x), val(*s));
                let block = g.len() / vs.len();
                if self.wants(*x) {
                    accumulate(grads, *x, g.len(), |acc| {
                        for (j, a) in acc.iter_mut().enumerate() {
                            *a = *a + g[j] * vs[j / block];
                        }
                    });
                }
                if self.wants(*s) {
                    accumulate(grads, *s, vs.len(), |acc| {
                        for (c, a) in acc.iter_mut().enumerate() {
                            let range = c * block..(c + 1) * block;
                            *a = *a + g[range.clone()].iter().zip(&vx[range]).map(|(&d, &v)| d * v).sum();
                        }
                    });
                }
            }
            Op::ChannelMean(x) => {
                let n = val(*x).len();
                let block = n / g.len();
                let scale = T::of(1.0 / block as f64);
                accumulate(grads, *x, n, |acc| {
                    for (j, a) in acc.iter_mut().enumerate() {
                        *a = *a + g[j / block] * scale;
                    }
                });
            }
            Op::Sum(x) => {
                let n = val(*x).len();
                accumulate(grads, *x, n, |acc| acc.iter_mut().for_each(|a| *a = *a + g[0]));
            }
            Op::Mean(x) => {
                let n = val(*x).len();
                let d = g[0] / T::of(n as f64);
                accumulate(grads, *x, n, |acc| acc.iter_mut().for_each(|a| *a = *a + d));
            }
            Op::Dwt2(x) => {
                // orthonormal: the adjoint is the inverse
                let s = node.value.shape();
                let back = haar_synthesis(g, s[1], s[2], s[3]);
                accumulate(grads, *x, back.len(), |acc| add_assign(acc, &back));
            }
            Op::Idwt2(parts) => {
                let s = node.value.shape();
                let fwd = haar_analysis(g, s[0], s[1], s[2]);
                let block = fwd.len() / 4;
                for (k, p) in parts.iter().enumerate() {
                    if self.wants(*p) {
                        let chunk = &fwd[k * block..(k + 1) * block];
                        accumulate(grads, *p, block, |acc| add_assign(acc, chunk));
                    }
                }
            }
            Op::Upsample { x, factor, gain } => {
                let s = self.nodes[x.0].value.shape();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (oh, ow) = (h * factor, w * factor);
                accumulate(grads, *x, c * h * w, |acc| {
                    for ch in 0..c {
                        for r in 0..oh {
                            for col in 0..ow {
                                let j = (ch * h + r / factor) * w + col / factor;
                                acc[j] = acc[j] + g[(ch * oh + r) * ow + col] * *gain;
                            }
                        }
                    }
                });
            }
            Op::CrossEntropy { p, labels, floor } => {
                let probs = val(*p);
                let n = labels.len();
                let scale = g[0] / T::of(n as f64);
                accumulate(grads, *p, probs.len(), |acc| {
                    for (i, &l) in labels.iter().enumerate() {
                        let j = l * n + i;
                        if probs[j] > *floor {
                            acc[j] = acc[j] - scale / probs[j];
                        }
                    }
                });
            }
        }
    }
}

fn chw(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match shape {
        [c, h, w] => Ok((*c, *h, *w)),
        _ => Err(Error::contract(format!("{op} needs [C×H×W], got {shape:?}"))),
    }
}

fn row_stats<T: Element>(row: &[T], eps: T) -> (T, T) {
    let n = T::of(row.len() as f64);
    let mean = row.iter().copied().sum::<T>() / n;
    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn accumulate<T: Element>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    f: impl FnOnce(&mut [T]),
) {
    let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_assign<T: Element>(acc: &mut [T], g: &[T]) {
    for (a, &d) in acc.iter_mut().zip(g) {
        *a = *a + d;
    }
}

/// Adds `g` (already in the output shape) into the gradient of `v`, summing
/// when `v` was a broadcast scalar.
fn reduce_into<T: Element>(
    grads: &mut [Option<Vec<T>>],
    v: Var,
    len: usize,
    g: &[T],
    f: impl Fn(T) -> T,
) {
    accumulate(grads, v, len, |acc| {
        if len == g.len() {
            for (a, &d) in acc.iter_mut().zip(g) {
                *a = *a + f(d);
            }
        } else {
            acc[0] = acc[0] + f(g.iter().copied().sum());
        }
    });
}

fn mul_broadcast<T: Element>(g: &[T], other: &[T]) -> Vec<T> {
    if other.len() == g.len() {
        g.iter().zip(other).map(|(&a, &b)| a * b).collect()
    } else {
        g.iter().map(|&a| a * other[0]).collect()
    }
}
