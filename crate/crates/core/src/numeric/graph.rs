//! Tensor-level tape for reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value and the parent
//! indices it needs for the backward pass. Nodes are created in topological
//! order, so the backward sweep simply walks the node list in reverse.
//!
//! Constants and frozen parameters enter the tape as plain leaves: nothing
//! derived only from them requires a gradient, and the backward sweep never
//! visits them.

use std::sync::atomic::{AtomicU64, Ordering};

use super::conv::{self, ConvSaved};
use super::param::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

static NEXT_GRAPH: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    graph: u64,
    index: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

enum Op {
    Leaf,
    Param(ParamId),
    Conv {
        input: usize,
        kernel: usize,
        bias: Option<usize>,
        saved: ConvSaved,
    },
    MaxPool {
        input: usize,
        argmax: Vec<usize>,
    },
    SpatialSoftmax(usize),
    Pointwise(usize, Activation),
    Linear {
        input: usize,
        weight: usize,
        bias: Option<usize>,
    },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    ChannelScale {
        input: usize,
        gains: usize,
    },
    SpatialMean(usize),
    Concat(Vec<usize>),
    Slice {
        input: usize,
        start: usize,
    },
    Sum(usize),
    Log(usize),
    Clamp {
        input: usize,
        lo: f64,
        hi: f64,
    },
    NormalizeMass(usize),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A recorded computation. One graph per forward/backward pass.
pub struct Graph {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            id: NEXT_GRAPH.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.graph != self.id || v.index >= self.nodes.len() {
            return Err(Error::Backward("value was not recorded on this graph".into()));
        }
        Ok(v.index)
    }

    fn node(&self, v: Var) -> &Node {
        debug_assert_eq!(v.graph, self.id, "var from a different graph");
        &self.nodes[v.index]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            graph: self.id,
            index: self.nodes.len() - 1,
        })
    }

    fn any_grad(&self, vars: &[usize]) -> bool {
        vars.iter().any(|&i| self.nodes[i].requires_grad)
    }

    /// Records a constant. It never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push("constant", value, Op::Leaf, false)
    }

    /// Records a parameter leaf. Frozen or untrainable parameters become
    /// constants and are excluded from the backward traversal.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let p = store.get(id);
        if p.receives_grad() {
            self.push("param", p.value.clone(), Op::Param(id), true)
        } else {
            self.push("param", p.value.clone(), Op::Leaf, false)
        }
    }

    /// Copies the current value of `v` into a fresh constant.
    pub fn detach(&mut self, v: Var) -> Result<Var> {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>, padding: usize) -> Result<Var> {
        let (i, k) = (self.idx(input)?, self.idx(kernel)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let (value, saved) = conv::conv2d_forward(
            &self.nodes[i].value,
            &self.nodes[k].value,
            b.map(|b| &self.nodes[b].value),
            padding,
        )?;
        let mut parents = vec![i, k];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        self.push(
            "conv2d",
            value,
            Op::Conv {
                input: i,
                kernel: k,
                bias: b,
                saved,
            },
            rg,
        )
    }

    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let (value, argmax) = conv::maxpool2_forward(&self.nodes[i].value)?;
        let rg = self.nodes[i].requires_grad;
        self.push("maxpool2", value, Op::MaxPool { input: i, argmax }, rg)
    }

    /// Per-channel softmax over all spatial positions of a `[C, H, W]` tensor.
    pub fn spatial_softmax(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let (c, h, w) = x.chw("spatial_softmax")?;
        let n = h * w;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            let block = &mut out[ch * n..(ch + 1) * n];
            let m = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in block.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            block.iter_mut().for_each(|v| *v /= s);
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.nodes[i].requires_grad;
        self.push("spatial_softmax", value, Op::SpatialSoftmax(i), rg)
    }

    pub fn pointwise(&mut self, input: Var, kind: Activation) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let value = match kind {
            Activation::Sigmoid => x.map(sigmoid),
            Activation::Tanh => x.map(f64::tanh),
            Activation::Relu => x.map(|v| v.max(0.0)),
        };
        let rg = self.nodes[i].requires_grad;
        self.push("pointwise", value, Op::Pointwise(i, kind), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.pointwise(x, Activation::Relu)
    }

    /// Affine map `weight · input + bias` of a vector.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (i, wi) = (self.idx(input)?, self.idx(weight)?);
        let b = bias.map(|b| self.idx(b)).transpose()?;
        let x = &self.nodes[i].value;
        let w = &self.nodes[wi].value;
        let &[m, n] = w.shape() else {
            return Err(Error::shape("linear", "weight rank", 2, w.rank()));
        };
        if x.shape() != [n] {
            return Err(Error::shape("linear", "input (axis 0)", n, format!("{:?}", x.shape())));
        }
        let mut out: Vec<f64> = match b {
            Some(b) => {
                let bv = &self.nodes[b].value;
                if bv.shape() != [m] {
                    return Err(Error::shape("linear", "bias (axis 0)", m, format!("{:?}", bv.shape())));
                }
                bv.data().to_vec()
            }
            None => vec![0.0; m],
        };
        for (r, o) in out.iter_mut().enumerate() {
            *o += w.data()[r * n..(r + 1) * n].iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>();
        }
        let value = Tensor::new(&[m], out)?;
        let mut parents = vec![i, wi];
        parents.extend(b);
        let rg = self.any_grad(&parents);
        self.push(
            "linear",
            value,
            Op::Linear {
                input: i,
                weight: wi,
                bias: b,
            },
            rg,
        )
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let value = {
            let (x, y) = (&self.nodes[ai].value, &self.nodes[bi].value);
            x.expect_same_shape(name, y)?;
            x.zip_map(y, f)?
        };
        let rg = self.any_grad(&[ai, bi]);
        self.push(name, value, op(ai, bi), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes[i].value.scale(s);
        let rg = self.nodes[i].requires_grad;
        self.push("scale", value, Op::Scale(i, s), rg)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let i = self.idx(a)?;
        let value = self.nodes[i].value.map(|v| v + s);
        let rg = self.nodes[i].requires_grad;
        self.push("add_scalar", value, Op::AddScalar(i), rg)
    }

    /// Scales channel `c` of a `[C, H, W]` tensor by `gains[c]`.
    pub fn channel_scale(&mut self, input: Var, gains: Var) -> Result<Var> {
        let (i, gi) = (self.idx(input)?, self.idx(gains)?);
        let x = &self.nodes[i].value;
        let g = &self.nodes[gi].value;
        let (c, h, w) = x.chw("channel_scale")?;
        if g.shape() != [c] {
            return Err(Error::shape("channel_scale", "gains (axis 0)", c, format!("{:?}", g.shape())));
        }
        let n = h * w;
        let mut out = x.data().to_vec();
        for ch in 0..c {
            out[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= g.data()[ch]);
        }
        let value = Tensor::new(&[c, h, w], out)?;
        let rg = self.any_grad(&[i, gi]);
        self.push("channel_scale", value, Op::ChannelScale { input: i, gains: gi }, rg)
    }

    /// Per-channel spatial mean of a `[C, H, W]` tensor, giving `[C]`.
    pub fn spatial_mean(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let (c, h, w) = x.chw("spatial_mean")?;
        let n = h * w;
        let out = (0..c).map(|ch| x.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64).collect();
        let value = Tensor::new(&[c], out)?;
        let rg = self.nodes[i].requires_grad;
        self.push("spatial_mean", value, Op::SpatialMean(i), rg)
    }

    /// Concatenates along the leading axis; trailing extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let idx: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect::<Result<_>>()?;
        let first = &self.nodes[idx[0]].value;
        let tail = first.shape()[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &i in &idx {
            let v = &self.nodes[i].value;
            if v.shape().get(1..) != Some(&tail[..]) {
                return Err(Error::shape("concat", "trailing axes", format!("{tail:?}"), format!("{:?}", v.shape())));
            }
            lead += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let value = Tensor::new(&shape, data)?;
        let rg = self.any_grad(&idx);
        self.push("concat", value, Op::Concat(idx), rg)
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn slice(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let lead = *x.shape().first().ok_or_else(|| Error::InvalidArgument("slice of scalar".into()))?;
        if start + len > lead || len == 0 {
            return Err(Error::shape("slice", "axis 0", format!("range within 0..{lead}"), format!("{start}..{}", start + len)));
        }
        let block: usize = x.shape()[1..].iter().product();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        let value = Tensor::new(&shape, x.data()[start * block..(start + len) * block].to_vec())?;
        let rg = self.nodes[i].requires_grad;
        self.push("slice", value, Op::Slice { input: i, start }, rg)
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = Tensor::scalar(self.nodes[i].value.sum());
        let rg = self.nodes[i].requires_grad;
        self.push("sum", value, Op::Sum(i), rg)
    }

    pub fn log(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.map(f64::ln);
        let rg = self.nodes[i].requires_grad;
        self.push("log", value, Op::Log(i), rg)
    }

    /// Clips into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, input: Var, lo: f64, hi: f64) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.map(|v| v.clamp(lo, hi));
        let rg = self.nodes[i].requires_grad;
        self.push("clamp", value, Op::Clamp { input: i, lo, hi }, rg)
    }

    /// `x / sum(x)`.
    pub fn normalize_mass(&mut self, input: Var) -> Result<Var> {
        let i = self.idx(input)?;
        let x = &self.nodes[i].value;
        let s = x.sum();
        if s <= 0.0 {
            return Err(Error::InvalidArgument(format!("normalize_mass: total mass {s} is not positive")));
        }
        let value = x.scale(1.0 / s);
        let rg = self.nodes[i].requires_grad;
        self.push("normalize_mass", value, Op::NormalizeMass(i), rg)
    }

    pub fn reshape(&mut self, input: Var, shape: &[usize]) -> Result<Var> {
        let i = self.idx(input)?;
        let value = self.nodes[i].value.clone().reshape(shape)?;
        let rg = self.nodes[i].requires_grad;
        self.push("reshape", value, Op::Reshape(i), rg)
    }

    /// Back-propagates from a scalar `loss`, adding (`+=`) into the gradient
    /// buffers of every reachable trainable parameter.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let root = self.idx(loss)?;
        if self.nodes[root].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[root].value.shape()
            )));
        }
        if !self.nodes[root].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root).map(|_| None).collect();
        grads[root] = Some(Tensor::full(self.nodes[root].value.shape(), 1.0));

        for n in (0..=root).rev() {
            let Some(g) = grads[n].take() else { continue };
            let node = &self.nodes[n];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store)?;
        }
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |i: usize| nodes[i].requires_grad;
        let mut send = |i: usize, t: Tensor| {
            if !nodes[i].requires_grad {
                return;
            }
            match &mut grads[i] {
                Some(acc) => acc.add_assign(&t),
                slot => *slot = Some(t),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Conv {
                input,
                kernel,
                bias,
                saved,
            } => {
                let r = conv::conv2d_backward(
                    g,
                    &nodes[*input].value,
                    &nodes[*kernel].value,
                    saved,
                    (wants(*input), wants(*kernel), bias.is_some_and(|b| wants(b))),
                )?;
                if let Some(dx) = r.input {
                    send(*input, dx);
                }
                if let Some(dk) = r.kernel {
                    send(*kernel, dk);
                }
                if let (Some(b), Some(db)) = (bias, r.bias) {
                    send(*b, db);
                }
            }
            Op::MaxPool { input, argmax } => {
                let mut dx = Tensor::zeros(nodes[*input].value.shape());
                for (o, &src) in argmax.iter().enumerate() {
                    dx.data_mut()[src] += g.data()[o];
                }
                send(*input, dx);
            }
            Op::SpatialSoftmax(input) => {
                let y = &node.value;
                let (c, h, w) = y.chw("spatial_softmax")?;
                let n = h * w;
                let mut dx = vec![0.0; c * n];
                for ch in 0..c {
                    let ys = &y.data()[ch * n..(ch + 1) * n];
                    let gs = &g.data()[ch * n..(ch + 1) * n];
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for p in 0..n {
                        dx[ch * n + p] = ys[p] * (gs[p] - dot);
                    }
                }
                send(*input, Tensor::new(y.shape(), dx)?);
            }
            Op::Pointwise(input, kind) => {
                let y = &node.value;
                let local = match kind {
                    Activation::Sigmoid => y.map(|s| s * (1.0 - s)),
                    Activation::Tanh => y.map(|t| 1.0 - t * t),
                    Activation::Relu => nodes[*input].value.map(|x| if x > 0.0 { 1.0 } else { 0.0 }),
                };
                send(*input, local.zip_map(g, |a, b| a * b)?);
            }
            Op::Linear { input, weight, bias } => {
                let x = &nodes[*input].value;
                let w = &nodes[*weight].value;
                let (m, n) = (w.shape()[0], w.shape()[1]);
                if wants(*input) {
                    let dx = (0..n).map(|c| (0..m).map(|r| w.data()[r * n + c] * g.data()[r]).sum()).collect();
                    send(*input, Tensor::new(&[n], dx)?);
                }
                if wants(*weight) {
                    let dw = Tensor::from_fn(&[m, n], |k| g.data()[k / n] * x.data()[k % n]);
                    send(*weight, dw);
                }
                if let Some(b) = bias {
                    send(*b, g.clone());
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    send(*a, g.zip_map(&nodes[*b].value, |x, y| x * y)?);
                }
                if wants(*b) {
                    send(*b, g.zip_map(&nodes[*a].value, |x, y| x * y)?);
                }
            }
            Op::Scale(a, s) => send(*a, g.scale(*s)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::ChannelScale { input, gains } => {
                let x = &nodes[*input].value;
                let gain = &nodes[*gains].value;
                let (c, h, w) = x.chw("channel_scale")?;
                let n = h * w;
                if wants(*input) {
                    let mut dx = g.data().to_vec();
                    for ch in 0..c {
                        dx[ch * n..(ch + 1) * n].iter_mut().for_each(|v| *v *= gain.data()[ch]);
                    }
                    send(*input, Tensor::new(x.shape(), dx)?);
                }
                if wants(*gains) {
                    let dg = (0..c)
                        .map(|ch| {
                            let r = ch * n..(ch + 1) * n;
                            g.data()[r.clone()].iter().zip(&x.data()[r]).map(|(a, b)| a * b).sum()
                        })
                        .collect();
                    send(*gains, Tensor::new(&[c], dg)?);
                }
            }
            Op::SpatialMean(input) => {
                let shape = nodes[*input].value.shape();
                let n = shape[1] * shape[2];
                let dx = Tensor::from_fn(shape, |k| g.data()[k / n] / n as f64);
                send(*input, dx);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p].value.len();
                    if wants(p) {
                        let part = Tensor::new(nodes[p].value.shape(), g.data()[offset..offset + len].to_vec())?;
                        send(p, part);
                    }
                    offset += len;
                }
            }
            Op::Slice { input, start } => {
                let x = &nodes[*input].value;
                let block: usize = x.shape()[1..].iter().product();
                let mut dx = Tensor::zeros(x.shape());
                dx.data_mut()[start * block..start * block + g.len()].copy_from_slice(g.data());
                send(*input, dx);
            }
            Op::Sum(input) => {
                send(*input, Tensor::full(nodes[*input].value.shape(), g.item()));
            }
            Op::Log(input) => {
                send(*input, g.zip_map(&nodes[*input].value, |a, x| a / x)?);
            }
            Op::Clamp { input, lo, hi } => {
                let x = &nodes[*input].value;
                send(*input, g.zip_map(x, |a, v| if v >= *lo && v <= *hi { a } else { 0.0 })?);
            }
            Op::NormalizeMass(input) => {
                let y = &node.value;
                let s = nodes[*input].value.sum();
                let dot: f64 = y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum();
                send(*input, g.map(|a| (a - dot) / s));
            }
            Op::Reshape(input) => {
                send(*input, g.clone().reshape(nodes[*input].value.shape())?);
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::param::ParamGroup;

    fn store_with(values: &[(&str, Tensor)]) -> (ParamStore, Vec<ParamId>) {
        let mut s = ParamStore::new();
        let ids = values
            .iter()
            .map(|(n, v)| s.add(*n, v.clone(), ParamGroup::Integration).unwrap())
            .collect();
        (s, ids)
    }

    #[test]
    fn conv_scaling_kernel() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0)).unwrap();
        let k = g.constant(Tensor::full(&[1, 1, 1, 1], 2.0)).unwrap();
        let b = g.constant(Tensor::zeros(&[1])).unwrap();
        let y = g.conv2d(x, k, Some(b), 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 3, 3]);
        assert!(g.value(y).data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_window_sum() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let k = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        let y = g.conv2d(x, k, None, 0).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 1]);
        assert_eq!(g.value(y).data(), &[10.0]);
    }

    #[test]
    fn conv_zero_kernel_gives_bias() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_fn(&[2, 4, 5], |i| i as f64)).unwrap();
        let k = g.constant(Tensor::zeros(&[3, 2, 3, 3])).unwrap();
        let b = g.constant(Tensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap()).unwrap();
        let y = g.conv2d(x, k, Some(b), 1).unwrap();
        for (c, expect) in [0.5, -1.0, 2.0].into_iter().enumerate() {
            let ch = g.value(y).index_first(c).unwrap();
            assert!(ch.data().iter().all(|&v| v == expect));
        }
    }

    #[test]
    fn maxpool_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[4.0]);
        let c = g.constant(Tensor::full(&[2, 4, 4], 3.5)).unwrap();
        let y = g.maxpool2(c).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 3.5));
        let odd = g.constant(Tensor::zeros(&[1, 3, 4])).unwrap();
        assert!(g.maxpool2(odd).is_err());
    }

    #[test]
    fn maxpool_tie_routes_to_first_in_row_major_order() {
        let (mut store, ids) = store_with(&[("x", Tensor::new(&[1, 2, 2], vec![0.0, 5.0, 5.0, 0.0]).unwrap())]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]).unwrap();
        let y = g.maxpool2(x).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let l = g.sum(y).unwrap();
        g.backward(l, &mut store).unwrap();
        assert_eq!(store.get(ids[0]).grad.data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let u = g.constant(Tensor::full(&[1, 3, 4], 0.7)).unwrap();
        let y = g.spatial_softmax(u).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 1.0 / 12.0).abs() < 1e-15));
        let x = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 3f64.ln()]).unwrap()).unwrap();
        let y = g.spatial_softmax(x).unwrap();
        assert!((g.value(y).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(y).data()[1] - 0.75).abs() < 1e-15);
        let shifted = g.add_scalar(x, 42.0).unwrap();
        let y2 = g.spatial_softmax(shifted).unwrap();
        for (a, b) in g.value(y).data().iter().zip(g.value(y2).data()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![0.0, -2.0, 2.0]).unwrap()).unwrap();
        let s = g.sigmoid(x).unwrap();
        let t = g.tanh(x).unwrap();
        let r = g.relu(x).unwrap();
        assert_eq!(g.value(s).data()[0], 0.5);
        assert_eq!(g.value(t).data()[0], 0.0);
        assert_eq!(&g.value(r).data()[1..], &[0.0, 2.0]);
    }

    #[test]
    fn linear_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![2.0, 3.0]).unwrap()).unwrap();
        let eye = g.constant(Tensor::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap()).unwrap();
        let zb = g.constant(Tensor::zeros(&[2])).unwrap();
        let y = g.linear(x, eye, Some(zb)).unwrap();
        assert_eq!(g.value(y).data(), &[2.0, 3.0]);
        let ones = g.constant(Tensor::full(&[1, 2], 1.0)).unwrap();
        let y = g.linear(x, ones, None).unwrap();
        assert_eq!(g.value(y).data(), &[5.0]);
        let zw = g.constant(Tensor::zeros(&[2, 2])).unwrap();
        let b = g.constant(Tensor::new(&[2], vec![4.0, -1.0]).unwrap()).unwrap();
        let y = g.linear(x, zw, Some(b)).unwrap();
        assert_eq!(g.value(y).data(), &[4.0, -1.0]);
        let bad = g.constant(Tensor::zeros(&[3])).unwrap();
        assert!(g.linear(bad, eye, None).is_err());
    }

    #[test]
    fn sigmoid_sum_gradient_is_quarter() {
        let (mut store, ids) = store_with(&[("x", Tensor::zeros(&[5]))]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]).unwrap();
        let s = g.sigmoid(x).unwrap();
        let l = g.sum(s).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(store.get(ids[0]).grad.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn constant_loss_leaves_grads_zero() {
        let (mut store, ids) = store_with(&[("x", Tensor::full(&[3], 1.0))]);
        let mut g = Graph::new();
        let _x = g.param(&store, ids[0]).unwrap();
        let c = g.constant(Tensor::scalar(3.0)).unwrap();
        g.backward(c, &mut store).unwrap();
        assert!(store.get(ids[0]).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fan_out_sums_both_paths() {
        let (mut store, ids) = store_with(&[("x", Tensor::new(&[2], vec![0.3, -0.7]).unwrap())]);
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]).unwrap();
        let y = g.tanh(x).unwrap();
        let y2 = g.mul(y, y).unwrap();
        let z = g.add(y2, y).unwrap();
        let l = g.sum(z).unwrap();
        g.backward(l, &mut store).unwrap();
        for (i, &x0) in [0.3f64, -0.7].iter().enumerate() {
            let t = x0.tanh();
            let expect = (2.0 * t + 1.0) * (1.0 - t * t);
            assert!((store.get(ids[0]).grad.data()[i] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_rejects_foreign_and_non_scalar_values() {
        let (mut store, ids) = store_with(&[("x", Tensor::zeros(&[2]))]);
        let mut g1 = Graph::new();
        let x = g1.param(&store, ids[0]).unwrap();
        let l = g1.sum(x).unwrap();
        let g2 = Graph::new();
        assert!(matches!(g2.backward(l, &mut store), Err(Error::Backward(_))));
        assert!(matches!(g1.backward(x, &mut store), Err(Error::Backward(_))));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let (mut store, ids) = store_with(&[("x", Tensor::full(&[2], 1.0))]);
        store.get_mut(ids[0]).frozen = true;
        let mut g = Graph::new();
        let x = g.param(&store, ids[0]).unwrap();
        assert!(!g.requires_grad(x));
        let l = g.sum(x).unwrap();
        g.backward(l, &mut store).unwrap();
        assert!(store.get(ids[0]).grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn log_of_zero_is_reported() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2])).unwrap();
        assert!(matches!(g.log(x), Err(Error::NonFinite { .. })));
    }
}
