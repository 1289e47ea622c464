//! Reverse-mode differentiation over a linear tape.
//!
//! A [`Tape`] lives for one forward/backward pass. Every op appends a node
//! holding its output value; [`Tape::backward`] walks the nodes in reverse
//! and accumulates vector-Jacobian products.

use std::collections::HashMap;

use super::conv::{self, ConvSpec, Geometry};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
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
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: Geometry,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Vec<f64>),
    ScalarMul { scalar: Var, x: Var },
    Concat(Vec<Var>),
    Reshape(Var),
    Transpose(Var),
    MatMul(Var, Var),
    Softmax { x: Var, axis: usize },
    Upsample { x: Var, factor: usize },
    Sum(Var),
    SumSquares(Var),
    Bce { u: Var, target: Vec<f64>, eps: f64 },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LeafKind {
    Constant,
    Input,
    Param,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    kinds: Vec<Option<LeafKind>>,
    params: HashMap<String, Var>,
    param_order: Vec<(String, Var)>,
}

/// Leaf gradients produced by [`Tape::backward`]; `None` for leaves the
/// loss does not depend on and for every interior node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(String, Var)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Parameter names registered on the tape with their gradients.
    pub fn param_grads(&self) -> impl Iterator<Item = (&str, Option<&[f64]>)> {
        self.params
            .iter()
            .map(move |(name, v)| (name.as_str(), self.get(*v)))
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.params
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
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

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        self.kinds.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        let v = self.push(value, Op::Leaf);
        self.kinds[v.0] = Some(kind);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.with_requires_grad(false), LeafKind::Constant)
    }

    /// A differentiable leaf that is not a named parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push_leaf(t.with_requires_grad(true), LeafKind::Input)
    }

    /// Registers a named parameter. Registering the same name twice returns
    /// the first handle, so shared weights accumulate into one gradient.
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        if let Some(v) = self.params.get(name) {
            return *v;
        }
        let mut value = Tensor::from_parts(t.shape().to_vec(), t.data().to_vec());
        value.requires_grad = true;
        let v = self.push_leaf(value, LeafKind::Param);
        self.params.insert(name.to_string(), v);
        self.param_order.push((name.to_string(), v));
        v
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let x = self.value(input);
        let (c, h, w) = x.dims3("conv2d")?;
        if c != spec.in_channels {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "input channels: expected {}, got {c} (input shape {:?})",
                    spec.in_channels,
                    x.shape()
                ),
            ));
        }
        let ws = spec.weight_shape();
        if self.shape(weight) != ws {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight shape: expected {:?}, got {:?}",
                    ws,
                    self.shape(weight)
                ),
            ));
        }
        if let Some(b) = bias {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape(
                    "conv2d",
                    format!(
                        "bias length: expected [{}], got {:?}",
                        spec.out_channels,
                        self.shape(b)
                    ),
                ));
            }
        }
        let geom = Geometry::new(spec, h, w)?;
        let out = conv::forward(
            &geom,
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
        );
        let value = Tensor::from_parts(vec![geom.c_out, geom.oh, geom.ow], out);
        let y = self.push(
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
        );
        if spec.has_relu {
            Ok(self.relu(y))
        } else {
            Ok(y)
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v.max(0.0)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(value, Op::Sigmoid(x))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let av = self.value(a);
        let bv = self.value(b);
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| f(*x, *y)).collect();
        let value = Tensor::from_parts(av.shape().to_vec(), data);
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let value = self.value(x).scaled(factor);
        self.push(value, Op::Scale(x, factor))
    }

    /// Elementwise product with a non-differentiable mask (dropout).
    pub fn mul_const(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.len() {
            return Err(Error::shape(
                "mul_const",
                format!("mask has {} elements, input has {}", mask.len(), xv.len()),
            ));
        }
        let data = xv.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let value = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(value, Op::MulConst(x, mask)))
    }

    /// Multiplies every element of `x` by the single-element `scalar`.
    pub fn scalar_mul(&mut self, scalar: Var, x: Var) -> Result<Var> {
        if self.value(scalar).len() != 1 {
            return Err(Error::shape(
                "scalar_mul",
                format!("scalar operand has shape {:?}", self.shape(scalar)),
            ));
        }
        let s = self.value(scalar).item();
        let value = self.value(x).scaled(s);
        Ok(self.push(value, Op::ScalarMul { scalar, x }))
    }

    /// Concatenates along the leading axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::shape(
                    "concat",
                    format!("trailing dims {:?} vs {:?}", &s[1.min(s.len())..], tail),
                ));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Concat(parts.to_vec())))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(x), shape),
            )
        })?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (m, n) = match self.shape(x) {
            [m, n] => (*m, *n),
            s => {
                return Err(Error::shape(
                    "transpose",
                    format!("expected a matrix, got {s:?}"),
                ))
            }
        };
        let src = self.value(x).data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![n, m], data), Op::Transpose(x)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, n) = match (self.shape(a), self.shape(b)) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => {
                return Err(Error::shape(
                    "matmul",
                    format!("cannot multiply {sa:?} by {sb:?}"),
                ))
            }
        };
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        Ok(self.push(Tensor::from_parts(vec![m, n], data), Op::MatMul(a, b)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::invalid(
                "softmax",
                format!("axis {axis} out of range for rank {}", shape.len()),
            ));
        }
        let (outer, n, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * n + k) * inner + i;
                let max = (0..n).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for k in 0..n {
                    let e = (src[idx(k)] - max).exp();
                    data[idx(k)] = e;
                    total += e;
                }
                for k in 0..n {
                    data[idx(k)] /= total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, data), Op::Softmax { x, axis }))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        if factor < 1 {
            return Err(Error::invalid("upsample_nearest", "factor must be at least 1"));
        }
        let (c, h, w) = self.value(x).dims3("upsample_nearest")?;
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                let row_in = &src[(ch * h + y / factor) * w..(ch * h + y / factor + 1) * w];
                let row_out = &mut data[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                for (xo, v) in row_out.iter_mut().enumerate() {
                    *v = row_in[xo / factor];
                }
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![c, oh, ow], data),
            Op::Upsample { x, factor },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().map(|v| v * v).sum();
        self.push(Tensor::scalar(s), Op::SumSquares(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean binary cross-entropy of probabilities `u` against a fixed
    /// target; `u` is clamped to `[eps, 1 - eps]` before the logs.
    pub fn bce_mean(&mut self, u: Var, target: &[f64], eps: f64) -> Result<Var> {
        let uv = self.value(u);
        if uv.len() != target.len() {
            return Err(Error::shape(
                "bce_mean",
                format!("prediction has {} elements, target {}", uv.len(), target.len()),
            ));
        }
        let n = uv.len() as f64;
        let total: f64 = uv
            .data()
            .iter()
            .zip(target)
            .map(|(&p, &k)| {
                let p = p.clamp(eps, 1.0 - eps);
                -(k * p.ln() + (1.0 - k) * (1.0 - p).ln())
            })
            .sum();
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::Bce {
                u,
                target: target.to_vec(),
                eps,
            },
        ))
    }

    /// Runs reverse accumulation from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                }
                Op::Conv2d {
                    input,
                    weight,
                    bias,
                    geom,
                } => {
                    let (di, dw, db) = conv::backward(
                        geom,
                        self.value(*input).data(),
                        self.value(*weight).data(),
                        &g,
                    );
                    self.accumulate(&mut grads, *input, di);
                    self.accumulate(&mut grads, *weight, dw);
                    if let Some(b) = bias {
                        self.accumulate(&mut grads, *b, db);
                    }
                }
                Op::Relu(x) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(y, gv)| if *y > 0.0 { *gv } else { 0.0 })
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = node
                        .value
                        .data()
                        .iter()
                        .zip(&g)
                        .map(|(y, gv)| gv * y * (1.0 - y))
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, g.clone());
                    self.accumulate(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    let neg = g.iter().map(|v| -v).collect();
                    self.accumulate(&mut grads, *a, g);
                    self.accumulate(&mut grads, *b, neg);
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let da = g.iter().zip(bv).map(|(gv, y)| gv * y).collect();
                    let db = g.iter().zip(av).map(|(gv, x)| gv * x).collect();
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Scale(x, f) => {
                    let d = g.iter().map(|v| v * f).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::MulConst(x, mask) => {
                    let d = g.iter().zip(mask).map(|(gv, m)| gv * m).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::ScalarMul { scalar, x } => {
                    let s = self.value(*scalar).item();
                    let xv = self.value(*x).data();
                    let ds: f64 = g.iter().zip(xv).map(|(gv, v)| gv * v).sum();
                    let dx = g.iter().map(|gv| gv * s).collect();
                    self.accumulate(&mut grads, *scalar, vec![ds]);
                    self.accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        self.accumulate(&mut grads, p, g[offset..offset + n].to_vec());
                        offset += n;
                    }
                }
                Op::Reshape(x) => self.accumulate(&mut grads, *x, g),
                Op::Transpose(x) => {
                    let (n, m) = (node.value.shape()[0], node.value.shape()[1]);
                    // node is [n, m]; input was [m, n]
                    let mut d = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            d[i * n + j] = g[j * m + i];
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    let av = self.value(*a).data();
                    let bv = self.value(*b).data();
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let a_ip = av[i * k + p];
                            for (d, gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *d += a_ip * gv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *a, da);
                    self.accumulate(&mut grads, *b, db);
                }
                Op::Softmax { x, axis } => {
                    let y = node.value.data();
                    let (outer, n, inner) = split_axis(node.value.shape(), *axis);
                    let mut d = vec![0.0; y.len()];
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * n + k) * inner + i;
                            let dot: f64 = (0..n).map(|k| g[idx(k)] * y[idx(k)]).sum();
                            for k in 0..n {
                                d[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Upsample { x, factor } => {
                    let shape = self.shape(*x);
                    let (c, h, w) = (shape[0], shape[1], shape[2]);
                    let (oh, ow) = (h * factor, w * factor);
                    let mut d = vec![0.0; c * h * w];
                    for ch in 0..c {
                        for y in 0..oh {
                            let base = (ch * h + y / factor) * w;
                            let grow = &g[(ch * oh + y) * ow..(ch * oh + y + 1) * ow];
                            for (xo, gv) in grow.iter().enumerate() {
                                d[base + xo / factor] += gv;
                            }
                        }
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    self.accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::SumSquares(x) => {
                    let d = self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Bce { u, target, eps } => {
                    let uv = self.value(*u).data();
                    let n = uv.len() as f64;
                    let d = uv
                        .iter()
                        .zip(target)
                        .map(|(&p, &k)| {
                            if p < *eps || p > 1.0 - eps {
                                0.0
                            } else {
                                g[0] * (p - k) / (p * (1.0 - p)) / n
                            }
                        })
                        .collect();
                    self.accumulate(&mut grads, *u, d);
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self.param_order.clone(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, d: Vec<f64>) {
        if self.kinds[v.0] == Some(LeafKind::Constant) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.iter_mut().zip(&d) {
                    *e += x;
                }
            }
            slot @ None => *slot = Some(d),
        }
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += a_ip * bv;
            }
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
