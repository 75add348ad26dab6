//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive in creation order, which is already a
//! topological order. [`Graph::backward`] walks the tape once in reverse.

use super::kernels;
use super::special;
use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    MatMul(Var, Var),
    Conv2d { input: Var, weight: Var, stride: usize, pad: usize },
    Exp(Var),
    Log(Var),
    Erf(Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LogNormCdf(Var),
    Sum(Var),
    Mean(Var),
    Broadcast(Var),
    SumTo(Var),
    Reshape(Var),
    Slice { input: Var, axis: usize, start: usize },
    Concat { inputs: Vec<Var>, axis: usize },
    Upsample2x(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not
    /// influence the output.
    pub fn take_or_zeros(&mut self, v: Var, like: &[usize]) -> Tensor {
        self.grads
            .get_mut(v.0)
            .and_then(Option::take)
            .unwrap_or_else(|| Tensor::zeros(like.to_vec()))
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf that is not differentiated.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64 + Send + Sync, op: Op) -> Var {
        let value = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(name, format!("{:?} vs {:?}", va.shape(), vb.shape())));
        }
        let value = va.zip_map(vb, f)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, |x| -x, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| c * x, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, move |x| x + c, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn erf(&mut self, a: Var) -> Var {
        self.unary(a, special::erf, Op::Erf(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, special::gelu, Op::Gelu(a))
    }

    /// Elementwise `ln Φ(u)`.
    pub fn log_std_normal_cdf(&mut self, a: Var) -> Var {
        self.unary(a, special::log_std_normal_cdf, Op::LogNormCdf(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(s, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(s, Op::Mean(a), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = kernels::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// Cross-correlation of `[N, C, H, W]` input with `[O, C, kh, kw]`
    /// weights and zero padding.
    pub fn conv2d(&mut self, input: Var, weight: Var, stride: usize, pad: usize) -> Result<Var> {
        let value = kernels::conv2d(self.value(input), self.value(weight), stride, pad)?;
        let rg = self.rg(input) || self.rg(weight);
        Ok(self.push(value, Op::Conv2d { input, weight, stride, pad }, rg))
    }

    /// Halves spatial resolution with a 2×2, stride-2 convolution.
    pub fn downsample2x(&mut self, input: Var, weight: Var) -> Result<Var> {
        match self.shape(weight) {
            [_, _, 2, 2] => self.conv2d(input, weight, 2, 0),
            s => Err(shape_err("downsample2x", format!("weight {s:?} is not 2x2"))),
        }
    }

    /// Broadcast to `shape` (same rank, source axes of size 1 expand).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = kernels::broadcast(self.value(a), shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Broadcast(a), rg))
    }

    /// Sum over the axes where `shape` has size 1.
    pub fn sum_to(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = kernels::sum_to(self.value(a), shape)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::SumTo(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = kernels::slice_axis(self.value(a), axis, start, len)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Slice { input: a, axis, start }, rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let parts: Vec<&Tensor> = inputs.iter().map(|&v| self.value(v)).collect();
        let value = kernels::concat_axis(&parts, axis)?;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), axis }, rg))
    }

    /// Nearest-neighbour ×2 upsampling of a `[N, C, H, W]` tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let value = kernels::upsample2x(self.value(a))?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Upsample2x(a), rg))
    }

    /// `a * b` where `b` is broadcast to the shape of `a`.
    pub fn mul_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.mul(a, bb)
    }

    /// `a + b` where `b` is broadcast to the shape of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let bb = self.broadcast(b, &shape)?;
        self.add(a, bb)
    }

    /// Reverse pass from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).len() != 1 {
            return Err(shape_err("backward", format!("root has shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::full(self.shape(root).to_vec(), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.rg(parent) {
                    continue;
                }
                accumulate(&mut grads[parent.0], pg)?;
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        let val = |v: Var| &self.nodes[v.0].value;
        let out = &node.value;
        Ok(match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|x| -x))],
            Op::Mul(a, b) => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*a) {
                    v.push((*a, g.zip_map(val(*b), |x, y| x * y)?));
                }
                if self.rg(*b) {
                    v.push((*b, g.zip_map(val(*a), |x, y| x * y)?));
                }
                v
            }
            Op::Neg(a) => vec![(*a, g.map(|x| -x))],
            Op::Scale(a, c) => {
                let c = *c;
                vec![(*a, g.map(move |x| c * x))]
            }
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::Square(a) => vec![(*a, g.zip_map(val(*a), |x, y| 2.0 * x * y)?)],
            Op::Exp(a) => vec![(*a, g.zip_map(out, |x, y| x * y)?)],
            Op::Log(a) => vec![(*a, g.zip_map(val(*a), |x, y| x / y)?)],
            Op::Erf(a) => vec![(*a, g.zip_map(val(*a), |x, y| x * special::erf_grad(y))?)],
            Op::Tanh(a) => vec![(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))?)],
            Op::Relu(a) => vec![(*a, g.zip_map(val(*a), |x, y| if y > 0.0 { x } else { 0.0 })?)],
            Op::Gelu(a) => vec![(*a, g.zip_map(val(*a), |x, y| x * special::gelu_grad(y))?)],
            Op::LogNormCdf(a) => vec![(*a, g.zip_map(val(*a), |x, y| x * special::normal_hazard(y))?)],
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item()))],
            Op::Mean(a) => {
                let n = val(*a).len() as f64;
                vec![(*a, Tensor::full(val(*a).shape().to_vec(), g.item() / n))]
            }
            Op::MatMul(a, b) => {
                let (ga, gb) = kernels::matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Conv2d { input, weight, stride, pad } => {
                let mut v = Vec::with_capacity(2);
                if self.rg(*input) {
                    v.push((*input, kernels::conv2d_backward_input(val(*input).shape(), val(*weight), g, *stride, *pad)?));
                }
                if self.rg(*weight) {
                    v.push((*weight, kernels::conv2d_backward_weight(val(*input), val(*weight).shape(), g, *stride, *pad)?));
                }
                v
            }
            Op::Broadcast(a) => vec![(*a, kernels::sum_to(g, val(*a).shape())?)],
            Op::SumTo(a) => vec![(*a, kernels::broadcast(g, val(*a).shape())?)],
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape().to_vec())?)],
            Op::Slice { input, axis, start } => {
                let src = val(*input).shape();
                let mut full = Tensor::zeros(src.to_vec());
                let outer: usize = src[..*axis].iter().product();
                let inner: usize = src[axis + 1..].iter().product();
                let len = g.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * src[*axis] + start) * inner;
                    full.data_mut()[dst..dst + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*input, full)]
            }
            Op::Concat { inputs, axis } => {
                let mut start = 0;
                let mut v = Vec::with_capacity(inputs.len());
                for &p in inputs {
                    let len = val(p).shape()[*axis];
                    v.push((p, kernels::slice_axis(g, *axis, start, len)?));
                    start += len;
                }
                v
            }
            Op::Upsample2x(a) => vec![(*a, kernels::upsample2x_backward(g)?)],
        })
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(shape_err("accumulate", format!("{:?} vs {:?}", acc.shape(), g.shape())));
            }
            acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
        }
        None => *slot = Some(g),
    }
    Ok(())
}
