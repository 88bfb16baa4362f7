//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a
//! node holding its output value and enough context to run its backward
//! rule; nodes are appended in creation order, so the node list is already
//! topologically sorted and [`Graph::backward`] is a single reverse sweep.
//!
//! Parameters enter the graph through [`Graph::param`], which shares the
//! stored tensor instead of copying it. After [`Graph::backward`] the
//! resulting [`Gradients`] can be folded into a [`ParamStore`] or a
//! [`GradBuffer`].
//!
//! Broadcasting is limited to [`Graph::add_bias`]; every other shape
//! mismatch is an error.

use std::collections::HashMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{GradBuffer, ParamId, ParamStore};
use crate::tensor::{split_axis, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LogSoftmax {
        x: Var,
        axis: usize,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Sum(Var),
    Mean(Var),
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    requires_grad: bool,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, requires_grad: bool, op: Op) -> Var {
        self.push_shared(Arc::new(value), requires_grad, op)
    }

    fn push_shared(&mut self, value: Arc<Tensor>, requires_grad: bool, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Sign pattern (`x > 0`) of every ReLU input, in creation order.
    ///
    /// Two evaluations with equal patterns lie on the same linear piece of
    /// every ReLU, which is what finite differences need.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::Relu(x) => Some(x),
                _ => None,
            })
            .flat_map(|x| self.nodes[x.0].value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Leaf whose gradient is reported by [`Gradients::get`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Brings a stored parameter into the graph. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push_shared(store.shared_value(id), true, Op::Param(id));
        self.params.insert(id, v);
        v
    }

    /// `[m x k] . [k x n] -> [m x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = av.dims2()?;
        let (k2, n) = bv.dims2()?;
        if k != k2 {
            return Err(Error::shape("matmul", av.shape(), bv.shape()));
        }
        let out = matmul_raw(av.data(), bv.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::matrix(m, n, out)?, rg, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        let (r, c) = av.dims2()?;
        let out = transpose_raw(av.data(), r, c);
        let rg = self.any_grad(&[a]);
        Ok(self.push(Tensor::matrix(c, r, out)?, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Add(a, b)))
    }

    /// Elementwise product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, rg, Op::Mul(a, b)))
    }

    /// Adds a `[n]` bias to every trailing-axis vector of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.shape() != [n] {
            return Err(Error::shape("add_bias", xv.shape(), bv.shape()));
        }
        let b = bv.data();
        let data = xv
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Scale(x, factor))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::tanh);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(out, rg, Op::Relu(x))
    }

    /// Softmax along `axis`, stabilised by subtracting the slice maximum.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(x), axis, false)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Softmax { x, axis }))
    }

    /// `x - logsumexp(x)` along `axis`.
    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = softmax_along(self.value(x), axis, true)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::LogSoftmax { x, axis }))
    }

    /// Joins tensors that agree on every extent except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidShape(format!(
                "concat axis {axis} out of range for {base:?}"
            )));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.value(*v).shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for v in inputs {
                let t = self.value(*v);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let out = Tensor::new(shape, data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            out,
            rg,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }

    /// Sub-range `[start, end)` of `x` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Error::InvalidShape(format!(
                "narrow [{start}, {end}) on axis {axis} of {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&xv.data()[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = end - start;
        let out = Tensor::new(out_shape, data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, rg, Op::Narrow { x, axis, start }))
    }

    /// Row `i` of a matrix, kept as a `[1 x cols]` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.narrow(x, 0, i, i + 1)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(s), rg, Op::Mean(x))
    }

    /// Picks entries at flat row-major positions into a 1-D tensor.
    pub fn gather(&mut self, x: Var, index: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if index.is_empty() {
            return Err(Error::Contract("gather with no indices".into()));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::InvalidShape(format!(
                "gather index {bad} out of range for {:?}",
                xv.shape()
            )));
        }
        let data = index.iter().map(|&i| xv.data()[i]).collect();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Tensor::vector(data), rg, Op::Gather { x, index }))
    }

    /// Standardises each trailing-axis vector (population variance, `eps`
    /// inside the square root) and applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().unwrap_or(&1);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != [d] || bv.shape() != [d] {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let rows = xv.len() / d;
        let mut normalized = Vec::with_capacity(xv.len());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.len());
        for row in xv.data().chunks(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, v) in row.iter().enumerate() {
                let n = (v - mean) * inv;
                normalized.push(n);
                out.push(n * gv.data()[j] + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.any_grad(&[x, gamma, beta]);
        Ok(self.push(
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
        ))
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::shape(op, av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let fault = fault::active();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(idx);
            let Some(gout) = upper[0].as_deref() else {
                continue;
            };
            let out = &node.value;
            let nodes = &self.nodes;
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, k) = av.dims2()?;
                    let n = bv.shape()[1];
                    let scale = if fault == Some(Fault::MatMul) { 1.01 } else { 1.0 };
                    if let Some(ga) = slot(lower, nodes, *a) {
                        // dA = dC . B^T
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let brow = &bv.data()[kk * n..(kk + 1) * n];
                                ga[i * k + kk] +=
                                    scale * grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    }
                    if let Some(gb) = slot(lower, nodes, *b) {
                        // dB = A^T . dC
                        for i in 0..m {
                            let grow = &gout[i * n..(i + 1) * n];
                            for kk in 0..k {
                                let a_ik = av.data()[i * k + kk];
                                if a_ik == 0.0 {
                                    continue;
                                }
                                let dst = &mut gb[kk * n..(kk + 1) * n];
                                for (d, g) in dst.iter_mut().zip(grow) {
                                    *d += a_ik * g;
                                }
                            }
                        }
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = out.dims2()?;
                    if let Some(ga) = slot(lower, nodes, *a) {
                        // out is [r x c], input is [c x r]
                        for i in 0..r {
                            for j in 0..c {
                                ga[j * r + i] += gout[i * c + j];
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(g) = slot(lower, nodes, *v) {
                            add_into(g, gout);
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        add_into(g, gout);
                    }
                    if let Some(g) = slot(lower, nodes, *bias) {
                        let n = g.len();
                        for row in gout.chunks(n) {
                            add_into(g, row);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                    if let Some(g) = slot(lower, nodes, *a) {
                        for ((d, go), y) in g.iter_mut().zip(gout).zip(bv) {
                            *d += go * y;
                        }
                    }
                    if let Some(g) = slot(lower, nodes, *b) {
                        for ((d, go), x) in g.iter_mut().zip(gout).zip(av) {
                            *d += go * x;
                        }
                    }
                }
                Op::Scale(x, factor) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        for (d, go) in g.iter_mut().zip(gout) {
                            *d += go * factor;
                        }
                    }
                }
                Op::Tanh(x) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        for ((d, go), y) in g.iter_mut().zip(gout).zip(out.data()) {
                            *d += go * (1.0 - y * y);
                        }
                    }
                }
                Op::Sigmoid(x) => {
                    let scale = if fault == Some(Fault::Sigmoid) { 1.5 } else { 1.0 };
                    if let Some(g) = slot(lower, nodes, *x) {
                        for ((d, go), y) in g.iter_mut().zip(gout).zip(out.data()) {
                            *d += scale * go * y * (1.0 - y);
                        }
                    }
                }
                Op::Relu(x) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        for ((d, go), y) in g.iter_mut().zip(gout).zip(out.data()) {
                            if *y > 0.0 {
                                *d += go;
                            }
                        }
                    }
                }
                Op::Softmax { x, axis } => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        let (outer, len, inner) = split_axis(out.shape(), *axis);
                        let y = out.data();
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let dot: f64 = (0..len).map(|k| gout[at(k)] * y[at(k)]).sum();
                                for k in 0..len {
                                    g[at(k)] += y[at(k)] * (gout[at(k)] - dot);
                                }
                            }
                        }
                    }
                }
                Op::LogSoftmax { x, axis } => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        let (outer, len, inner) = split_axis(out.shape(), *axis);
                        let y = out.data();
                        for o in 0..outer {
                            for i in 0..inner {
                                let at = |k: usize| (o * len + k) * inner + i;
                                let total: f64 = (0..len).map(|k| gout[at(k)]).sum();
                                for k in 0..len {
                                    g[at(k)] += gout[at(k)] - y[at(k)].exp() * total;
                                }
                            }
                        }
                    }
                }
                Op::Concat { inputs, axis } => {
                    let (outer, total, inner) = split_axis(out.shape(), *axis);
                    let mut offset = 0;
                    for v in inputs {
                        let len = nodes[v.0].value.shape()[*axis];
                        if let Some(g) = slot(lower, nodes, *v) {
                            for o in 0..outer {
                                let src = (o * total + offset) * inner;
                                let dst = o * len * inner;
                                add_into(&mut g[dst..dst + len * inner], &gout[src..src + len * inner]);
                            }
                        }
                        offset += len;
                    }
                }
                Op::Narrow { x, axis, start } => {
                    let full = nodes[x.0].value.shape();
                    let (outer, len, inner) = split_axis(full, *axis);
                    let width = out.shape()[*axis];
                    if let Some(g) = slot(lower, nodes, *x) {
                        for o in 0..outer {
                            let dst = (o * len + start) * inner;
                            let src = o * width * inner;
                            add_into(&mut g[dst..dst + width * inner], &gout[src..src + width * inner]);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        g.iter_mut().for_each(|d| *d += gout[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        let share = gout[0] / g.len() as f64;
                        g.iter_mut().for_each(|d| *d += share);
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(g) = slot(lower, nodes, *x) {
                        for (&i, go) in index.iter().zip(gout) {
                            g[i] += go;
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let gam = nodes[gamma.0].value.data();
                    let d = gam.len();
                    if let Some(g) = slot(lower, nodes, *gamma) {
                        for (go_row, n_row) in gout.chunks(d).zip(normalized.chunks(d)) {
                            for j in 0..d {
                                g[j] += go_row[j] * n_row[j];
                            }
                        }
                    }
                    if let Some(g) = slot(lower, nodes, *beta) {
                        for go_row in gout.chunks(d) {
                            add_into(g, go_row);
                        }
                    }
                    let skew = if fault == Some(Fault::LayerNorm) { 1e-3 } else { 0.0 };
                    if let Some(g) = slot(lower, nodes, *x) {
                        let dn = d as f64;
                        for (r, (go_row, n_row)) in
                            gout.chunks(d).zip(normalized.chunks(d)).enumerate()
                        {
                            let dxhat: Vec<f64> =
                                go_row.iter().zip(gam).map(|(go, ga)| go * ga).collect();
                            let sum_d: f64 = dxhat.iter().sum();
                            let sum_dn: f64 =
                                dxhat.iter().zip(n_row).map(|(a, b)| a * b).sum();
                            let inv = inv_std[r];
                            for j in 0..d {
                                g[r * d + j] += inv / dn
                                    * (dn * dxhat[j] - sum_d - n_row[j] * (sum_dn + skew));
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients {
            grads,
            params: self
                .nodes
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n.op {
                    Op::Param(id) => Some((id, Var(i))),
                    _ => None,
                })
                .collect(),
        })
    }
}

/// Result of a backward sweep: one optional gradient per graph node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` took part in it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds parameter gradients into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                add_into(store.grad_mut(id), g);
            }
        }
    }

    pub fn accumulate_into_buffer(&self, buffer: &mut GradBuffer) {
        for &(id, v) in &self.params {
            if let Some(g) = self.get(v) {
                add_into(&mut buffer.0[id.index()], g);
            }
        }
    }
}

/// Lazily materialises the accumulator of an input that wants a gradient.
fn slot<'a>(
    lower: &'a mut [Option<Vec<f64>>],
    nodes: &[Node],
    v: Var,
) -> Option<&'a mut Vec<f64>> {
    let n = &nodes[v.0];
    if !n.requires_grad {
        return None;
    }
    Some(lower[v.0].get_or_insert_with(|| vec![0.0; n.value.len()]))
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
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

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == 0.0 {
                continue;
            }
            for (o, bv) in orow.iter_mut().zip(&b[kk * n..(kk + 1) * n]) {
                *o += a_ik * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn softmax_along(x: &Tensor, axis: usize, log: bool) -> Result<Tensor> {
    if axis >= x.ndim() {
        return Err(Error::InvalidShape(format!(
            "softmax axis {axis} out of range for {:?}",
            x.shape()
        )));
    }
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let src = x.data();
    let mut out = vec![0.0; src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| (o * len + k) * inner + i;
            let max = (0..len).map(|k| src[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = (0..len).map(|k| (src[at(k)] - max).exp()).sum();
            for k in 0..len {
                let shifted = src[at(k)] - max;
                out[at(k)] = if log {
                    shifted - total.ln()
                } else {
                    shifted.exp() / total
                };
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Backward-rule corruption for mutation tests of the gradient checker.
///
/// Faults are thread-local and only affect [`Graph::backward`] calls made on
/// the thread that holds the guard.
#[doc(hidden)]
pub mod fault {
    use std::cell::Cell;

    #[derive(Clone, Copy, Debug, PartialEq, Eq)]
    pub enum Fault {
        Sigmoid,
        MatMul,
        LayerNorm,
    }

    impl std::str::FromStr for Fault {
        type Err = String;

        fn from_str(s: &str) -> Result<Self, Self::Err> {
            match s {
                "sigmoid" => Ok(Fault::Sigmoid),
                "matmul" => Ok(Fault::MatMul),
                "layer-norm" => Ok(Fault::LayerNorm),
                other => Err(format!("unknown fault {other}")),
            }
        }
    }

    thread_local! {
        static ACTIVE: Cell<Option<Fault>> = const { Cell::new(None) };
    }

    pub struct FaultGuard(Option<Fault>);

    impl Drop for FaultGuard {
        fn drop(&mut self) {
            ACTIVE.with(|a| a.set(self.0));
        }
    }

    pub fn inject(fault: Fault) -> FaultGuard {
        FaultGuard(ACTIVE.with(|a| a.replace(Some(fault))))
    }

    pub(crate) fn active() -> Option<Fault> {
        ACTIVE.with(|a| a.get())
    }
}

use fault::Fault;

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn m(rows: usize, cols: usize, data: &[f64]) -> Tensor {
        Tensor::matrix(rows, cols, data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut g = Graph::new();
        let a = g.input(Tensor::eye(2));
        let b = g.input(m(2, 2, &[7.0, 8.0, 9.0, 10.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[7.0, 8.0, 9.0, 10.0]);
    }

    #[test]
    fn matmul_hand_expansion() {
        let mut g = Graph::new();
        let a = g.input(m(2, 2, &[1.0, 2.0, 3.0, 4.0]));
        let b = g.input(m(2, 1, &[5.0, 6.0]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).shape(), &[2, 1]);
        assert_eq!(g.value(c).data(), &[17.0, 39.0]);
    }

    #[test]
    fn matmul_zero_annihilates() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[3, 2]));
        let b = g.input(m(2, 2, &[1.5, -2.0, 3.0, 4.0]));
        let c = g.matmul(a, b).unwrap();
        assert!(g.value(c).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3] vs [2, 3]"), "{err}");
    }

    #[test]
    fn softmax_uniform_and_direct_exponentiation() {
        let mut g = Graph::new();
        let z = g.input(Tensor::vector(vec![0.0; 3]));
        let s = g.softmax(z, 0).unwrap();
        for &p in g.value(s).data() {
            assert_abs_diff_eq!(p, 1.0 / 3.0, epsilon = 1e-15);
        }

        // independent oracle: plain exponentiation and normalisation
        let x = [1.0f64, 2.0, 3.0];
        let total: f64 = x.iter().map(|v| v.exp()).sum();
        let oracle: Vec<f64> = x.iter().map(|v| v.exp() / total).collect();
        let xv = g.input(Tensor::vector(x.to_vec()));
        let s = g.softmax(xv, 0).unwrap();
        for (p, o) in g.value(s).data().iter().zip(&oracle) {
            assert_abs_diff_eq!(p, o, epsilon = 1e-15);
        }
        let expected = [0.09003, 0.24473, 0.66524];
        for (p, e) in g.value(s).data().iter().zip(expected) {
            assert_abs_diff_eq!(*p, e, epsilon = 1e-5);
        }
    }

    #[test]
    fn softmax_extreme_logits_stay_finite() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![1000.0, -1e9, 999.0]));
        let s = g.softmax(x, 0).unwrap();
        assert!(g.value(s).is_finite());
        assert_eq!(g.value(s).data()[1], 0.0);
    }

    #[test]
    fn pointwise_examples() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = g.relu(x);
        assert_eq!(g.value(r).data(), &[0.0, 0.0, 2.0]);

        let z = g.input(Tensor::scalar(0.0));
        let s = g.sigmoid(z);
        let t = g.tanh(z);
        assert_eq!(g.value(s).item().unwrap(), 0.5);
        assert_eq!(g.value(t).item().unwrap(), 0.0);

        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 5]));
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.shape(c), &[2, 8]);
    }

    #[test]
    fn broadcasting_only_for_bias() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[3]));
        assert!(g.add(a, b).is_err());
        assert!(g.mul(a, b).is_err());
        assert!(g.add_bias(a, b).is_ok());
        let wrong = g.input(Tensor::zeros(&[2]));
        assert!(g.add_bias(a, wrong).is_err());
    }

    #[test]
    fn identity_gradient_is_one() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(4.2));
        let y = g.sum(x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = g.mul(x, x).unwrap();
        let y = g.sum(sq);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::vector(vec![1.0, 2.0]));
        let err = g.backward(x).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn param_nodes_are_shared() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, 2.0])).unwrap();
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let b = g.param(&store, id);
        assert_eq!(a, b);
        let y = g.mul(a, b).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        grads.accumulate_into(&mut store);
        grads.accumulate_into(&mut store);
        assert_eq!(store.grad(id), &[4.0, 8.0]);
        store.zero_grad();
        assert_eq!(store.grad(id), &[0.0, 0.0]);
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g = Graph::new();
        let c = g.input(Tensor::vector(vec![1.0]));
        let x = g.leaf(Tensor::vector(vec![2.0]));
        let y = g.mul(c, x).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0]);
    }
}
