//! Eager tape for reverse-mode differentiation.
//!
//! Every operation computes its value immediately and appends a node to the
//! tape. [`Graph::backward`] walks the tape in reverse, accumulating
//! vector-Jacobian products into every node that depends on a leaf created
//! with `requires_grad`. Gradients are kept only for leaves.

use std::collections::HashMap;

use super::params::{Gradients, ParamSet};
use super::tensor::{Scalar, Tensor};
use crate::error::{invalid, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Geometry of a (possibly degenerate-in-time) 3-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct ConvGeom {
    c_in: usize,
    t_in: usize,
    h_in: usize,
    w_in: usize,
    c_out: usize,
    kt: usize,
    kh: usize,
    kw: usize,
    stride: [usize; 3],
    pad: [usize; 3],
    t_out: usize,
    h_out: usize,
    w_out: usize,
    spatial_only: bool,
}

fn out_len(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(invalid!("convolution stride must be positive"));
    }
    let padded = input + 2 * pad;
    if padded < k {
        return Err(invalid!("kernel {k} larger than padded input {padded}"));
    }
    Ok((padded - k) / stride + 1)
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.c_in * self.kt * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.t_out * self.h_out * self.w_out
    }

    fn out_shape(&self) -> Vec<usize> {
        if self.spatial_only {
            vec![self.c_out, self.h_out, self.w_out]
        } else {
            vec![self.c_out, self.t_out, self.h_out, self.w_out]
        }
    }

    /// Walks every (patch row, output position, input offset) triple.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let p = self.positions();
        let [st, sh, sw] = self.stride;
        let [pt, ph, pw] = self.pad;
        let mut row = 0;
        for ci in 0..self.c_in {
            for dt in 0..self.kt {
                for dy in 0..self.kh {
                    for dx in 0..self.kw {
                        for ot in 0..self.t_out {
                            let it = (ot * st + dt) as isize - pt as isize;
                            if it < 0 || it >= self.t_in as isize {
                                continue;
                            }
                            for oy in 0..self.h_out {
                                let iy = (oy * sh + dy) as isize - ph as isize;
                                if iy < 0 || iy >= self.h_in as isize {
                                    continue;
                                }
                                let in_base = ((ci * self.t_in + it as usize) * self.h_in
                                    + iy as usize)
                                    * self.w_in;
                                let col_base = row * p + (ot * self.h_out + oy) * self.w_out;
                                for ox in 0..self.w_out {
                                    let ix = (ox * sw + dx) as isize - pw as isize;
                                    if ix >= 0 && ix < self.w_in as isize {
                                        f(col_base + ox, in_base + ix as usize, row);
                                    }
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
    }

    fn im2col<T: Scalar>(&self, x: &[T]) -> Vec<T> {
        let mut cols = vec![T::zero(); self.patch() * self.positions()];
        self.for_each_tap(|c, i, _| cols[c] = x[i]);
        cols
    }

    fn col2im<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        self.for_each_tap(|c, i, _| dx[i] = dx[i] + cols[c]);
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Scale(NodeId, T),
    Shift(NodeId),
    Relu(NodeId),
    Softplus(NodeId),
    Exp(NodeId),
    Ln(NodeId),
    Sqrt(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    AvgPool {
        x: NodeId,
        channels: usize,
    },
    StdPool {
        x: NodeId,
        channels: usize,
    },
    Concat(Vec<NodeId>),
    Select(NodeId, usize),
    MeanOf(Vec<NodeId>),
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single forward/backward computation.
///
/// Graphs are cheap to build and are meant to be thrown away after one
/// backward pass.
#[derive(Debug)]
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, NodeId>,
    trainable: Vec<(String, NodeId)>,
    frozen_prefixes: Vec<String>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            trainable: Vec::new(),
            frozen_prefixes: Vec::new(),
            grads: Vec::new(),
        }
    }

    /// Parameters whose names start with `prefix` enter the graph as constants.
    pub fn freeze_prefix(&mut self, prefix: impl Into<String>) {
        self.frozen_prefixes.push(prefix.into());
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn scalar_value(&self, id: NodeId) -> T {
        self.nodes[id.0].value.item()
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> NodeId {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.leaf(value, false)
    }

    pub fn scalar(&mut self, v: T) -> NodeId {
        self.constant(Tensor::scalar(v))
    }

    /// Inserts a named parameter once per graph; later calls reuse the node.
    pub fn param(&mut self, params: &ParamSet<T>, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = params.require(name)?.clone();
        let frozen = self.frozen_prefixes.iter().any(|p| name.starts_with(p.as_str()));
        let id = self.leaf(value, !frozen);
        if !frozen {
            self.trainable.push((name.to_string(), id));
        }
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        f: impl Fn(T, T) -> T,
        op: fn(NodeId, NodeId) -> Op<T>,
    ) -> Result<NodeId> {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let data: Vec<T> = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else if vb.len() == 1 {
            let y = vb.item();
            va.data().iter().map(|&x| f(x, y)).collect()
        } else {
            return Err(invalid!(
                "elementwise op on shapes {:?} and {:?}",
                va.shape(),
                vb.shape()
            ));
        };
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, op(a, b), rg))
    }

    /// `a + b`; `b` may be a one-element tensor broadcast over `a`.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary(a, b, |x, y| x / y, Op::Div)
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(T) -> T, op: Op<T>) -> NodeId {
        let va = &self.nodes[a.0].value;
        let value = Tensor::new(va.shape().to_vec(), va.data().iter().map(|&x| f(x)).collect())
            .expect("same shape");
        let rg = self.rg(&[a]);
        self.push(value, op, rg)
    }

    pub fn scale(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn shift(&mut self, a: NodeId, c: T) -> NodeId {
        self.unary(a, |x| x + c, Op::Shift(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.max(T::zero()), Op::Relu(a))
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: NodeId) -> NodeId {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.exp(), Op::Exp(a))
    }

    pub fn ln(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.ln(), Op::Ln(a))
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| x.sqrt(), Op::Sqrt(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.len() as f64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// `w · x + b` for `x: [in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (vx, vw, vb) = (self.value(x), self.value(w), self.value(b));
        let (n_out, n_in) = match *vw.shape() {
            [o, i] => (o, i),
            _ => return Err(invalid!("linear weight must be 2-D, got {:?}", vw.shape())),
        };
        if vx.len() != n_in || vb.len() != n_out {
            return Err(invalid!(
                "linear {n_in}->{n_out} got input {:?} and bias {:?}",
                vx.shape(),
                vb.shape()
            ));
        }
        let mut out = vb.data().to_vec();
        T::gemm(n_out, n_in, 1, vw.data(), false, vx.data(), false, T::one(), &mut out);
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::from_vec(out), Op::Linear { x, w, b }, rg))
    }

    /// 2-D convolution of `x: [C, H, W]` with `w: [O, C, kh, kw]` and `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let [c, h, wd] = <[usize; 3]>::try_from(xs.as_slice())
            .map_err(|_| invalid!("conv2d input must be [C,H,W], got {xs:?}"))?;
        let [o, ci, kh, kw] = <[usize; 4]>::try_from(ws.as_slice())
            .map_err(|_| invalid!("conv2d weight must be [O,C,kh,kw], got {ws:?}"))?;
        if ci != c {
            return Err(invalid!("conv2d weight expects {ci} channels, input has {c}"));
        }
        let geom = ConvGeom {
            c_in: c,
            t_in: 1,
            h_in: h,
            w_in: wd,
            c_out: o,
            kt: 1,
            kh,
            kw,
            stride: [1, stride, stride],
            pad: [0, pad, pad],
            t_out: 1,
            h_out: out_len(h, kh, stride, pad)?,
            w_out: out_len(wd, kw, stride, pad)?,
            spatial_only: true,
        };
        self.conv(x, w, b, geom)
    }

    /// 3-D convolution of `x: [C, T, H, W]` with `w: [O, C, kt, kh, kw]`.
    pub fn conv3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: [usize; 3],
        pad: [usize; 3],
    ) -> Result<NodeId> {
        let (xs, ws) = (self.value(x).shape().to_vec(), self.value(w).shape().to_vec());
        let [c, t, h, wd] = <[usize; 4]>::try_from(xs.as_slice())
            .map_err(|_| invalid!("conv3d input must be [C,T,H,W], got {xs:?}"))?;
        let [o, ci, kt, kh, kw] = <[usize; 5]>::try_from(ws.as_slice())
            .map_err(|_| invalid!("conv3d weight must be [O,C,kt,kh,kw], got {ws:?}"))?;
        if ci != c {
            return Err(invalid!("conv3d weight expects {ci} channels, input has {c}"));
        }
        let geom = ConvGeom {
            c_in: c,
            t_in: t,
            h_in: h,
            w_in: wd,
            c_out: o,
            kt,
            kh,
            kw,
            stride,
            pad,
            t_out: out_len(t, kt, stride[0], pad[0])?,
            h_out: out_len(h, kh, stride[1], pad[1])?,
            w_out: out_len(wd, kw, stride[2], pad[2])?,
            spatial_only: false,
        };
        self.conv(x, w, b, geom)
    }

    fn conv(&mut self, x: NodeId, w: NodeId, b: NodeId, geom: ConvGeom) -> Result<NodeId> {
        if self.value(b).len() != geom.c_out {
            return Err(invalid!(
                "conv bias has {} entries, expected {}",
                self.value(b).len(),
                geom.c_out
            ));
        }
        let cols = geom.im2col(self.value(x).data());
        let p = geom.positions();
        let mut out = vec![T::zero(); geom.c_out * p];
        for (row, &bias) in out.chunks_mut(p).zip(self.value(b).data()) {
            row.fill(bias);
        }
        T::gemm(
            geom.c_out,
            geom.patch(),
            p,
            self.value(w).data(),
            false,
            &cols,
            false,
            T::one(),
            &mut out,
        );
        let rg = self.rg(&[x, w, b]);
        // Columns are only needed for the weight gradient.
        let cols = if self.requires_grad(w) { cols } else { Vec::new() };
        let value = Tensor::new(geom.out_shape(), out)?;
        Ok(self.push(
            value,
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            },
            rg,
        ))
    }

    /// Mean over all trailing axes of `x: [C, ...]`, giving `[C]`.
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let channels = *v.shape().first().ok_or_else(|| invalid!("pool on 0-d tensor"))?;
        let s = v.len() / channels;
        if s == 0 {
            return Err(invalid!("pool over empty spatial extent"));
        }
        let inv = T::lit(1.0 / s as f64);
        let out = v
            .data()
            .chunks(s)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::AvgPool { x, channels }, rg))
    }

    /// Population standard deviation per channel, `sqrt(var + STD_POOL_EPS)`.
    pub fn global_std_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.value(x);
        let channels = *v.shape().first().ok_or_else(|| invalid!("pool on 0-d tensor"))?;
        let s = v.len() / channels;
        if s == 0 {
            return Err(invalid!("pool over empty spatial extent"));
        }
        let out = v
            .data()
            .chunks(s)
            .map(|c| (mean_var(c).1 + T::lit(STD_POOL_EPS)).sqrt())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::from_vec(out), Op::StdPool { x, channels }, rg))
    }

    /// Per-channel means followed by per-channel standard deviations: `[2C]`.
    pub fn avg_std_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let avg = self.global_avg_pool(x)?;
        let std = self.global_std_pool(x)?;
        self.concat(&[avg, std])
    }

    /// Flattens and joins the inputs end to end.
    pub fn concat(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        if ids.is_empty() {
            return Err(invalid!("concat of nothing"));
        }
        let mut out = Vec::with_capacity(ids.iter().map(|&i| self.value(i).len()).sum());
        for &i in ids {
            out.extend_from_slice(self.value(i).data());
        }
        let rg = self.rg(ids);
        Ok(self.push(Tensor::from_vec(out), Op::Concat(ids.to_vec()), rg))
    }

    pub fn select(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let v = self.value(x);
        let e = *v
            .data()
            .get(index)
            .ok_or_else(|| invalid!("select {index} from tensor of length {}", v.len()))?;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(e), Op::Select(x, index), rg))
    }

    /// Elementwise mean of equally shaped tensors.
    pub fn mean_of(&mut self, ids: &[NodeId]) -> Result<NodeId> {
        let first = ids.first().ok_or_else(|| invalid!("mean of nothing"))?;
        let shape = self.value(*first).shape().to_vec();
        let mut acc = vec![T::zero(); self.value(*first).len()];
        for &i in ids {
            let v = self.value(i);
            if v.shape() != shape.as_slice() {
                return Err(invalid!("mean_of shape {:?} vs {shape:?}", v.shape()));
            }
            for (a, &x) in acc.iter_mut().zip(v.data()) {
                *a = *a + x;
            }
        }
        let inv = T::lit(1.0 / ids.len() as f64);
        acc.iter_mut().for_each(|a| *a = *a * inv);
        let rg = self.rg(ids);
        Ok(self.push(Tensor::new(shape, acc)?, Op::MeanOf(ids.to_vec()), rg))
    }

    /// Backpropagates from a one-element `loss`.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let v = self.value(loss);
        if v.len() != 1 {
            return Err(invalid!("loss must be a scalar, got shape {:?}", v.shape()));
        }
        self.backward_seeded(&[(loss, Tensor::scalar(T::one()))])
    }

    /// Backpropagates the given output cotangents.
    ///
    /// Previous gradients are discarded, so repeated calls are idempotent.
    pub fn backward_seeded(&mut self, seeds: &[(NodeId, Tensor<T>)]) -> Result<()> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        for (id, seed) in seeds {
            if seed.len() != self.value(*id).len() {
                return Err(invalid!(
                    "seed of length {} for node of shape {:?}",
                    seed.len(),
                    self.value(*id).shape()
                ));
            }
            accumulate(&mut grads, *id, self.value(*id).len(), |g| {
                add_into(g, seed.data())
            });
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        self.grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(
                    Tensor::new(
                        node.value.shape().to_vec(),
                        g.unwrap_or_else(|| vec![T::zero(); node.value.len()]),
                    )
                    .expect("gradient shape"),
                ),
                _ => None,
            })
            .collect();
        Ok(())
    }

    /// Gradient of a leaf after [`Graph::backward`]; absent unless the leaf requires grad.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients of every trainable parameter inserted with [`Graph::param`].
    pub fn param_grads(&self) -> Gradients<T> {
        let mut out = Gradients::new();
        for (name, id) in &self.trainable {
            if let Some(g) = self.grad(*id) {
                out.insert(name.clone(), g.clone());
            }
        }
        out
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let val = |id: NodeId| self.nodes[id.0].value.data();
        let len = |id: NodeId| self.nodes[id.0].value.len();
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        // Adds `f(k)` into the gradient of `id` at every index `k`.
        let mut send = |id: NodeId, f: &dyn Fn(usize) -> T| {
            if needs(id) {
                accumulate(grads, id, len(id), |acc| {
                    acc.iter_mut().enumerate().for_each(|(k, a)| *a = *a + f(k))
                });
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -T::one() } else { T::one() };
                send(*a, &|k| g[k]);
                if len(*b) == g.len() {
                    send(*b, &|k| sign * g[k]);
                } else {
                    let total: T = g.iter().copied().sum();
                    send(*b, &|_| sign * total);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let bc = |k: usize| if vb.len() == 1 { vb[0] } else { vb[k] };
                send(*a, &|k| g[k] * bc(k));
                if vb.len() == g.len() {
                    send(*b, &|k| g[k] * va[k]);
                } else {
                    let total: T = g.iter().zip(va).map(|(&x, &y)| x * y).sum();
                    send(*b, &|_| total);
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let bc = |k: usize| if vb.len() == 1 { vb[0] } else { vb[k] };
                send(*a, &|k| g[k] / bc(k));
                let term = |k: usize| -g[k] * va[k] / (bc(k) * bc(k));
                if vb.len() == g.len() {
                    send(*b, &term);
                } else {
                    let total: T = (0..g.len()).map(term).sum();
                    send(*b, &|_| total);
                }
            }
            Op::Scale(a, c) => send(*a, &|k| g[k] * *c),
            Op::Shift(a) => send(*a, &|k| g[k]),
            Op::Relu(a) => {
                let out = node.value.data();
                send(*a, &|k| if out[k] > T::zero() { g[k] } else { T::zero() })
            }
            Op::Softplus(a) => {
                let x = val(*a);
                send(*a, &|k| g[k] * sigmoid(x[k]))
            }
            Op::Exp(a) => {
                let out = node.value.data();
                send(*a, &|k| g[k] * out[k])
            }
            Op::Ln(a) => {
                let x = val(*a);
                send(*a, &|k| g[k] / x[k])
            }
            Op::Sqrt(a) => {
                let out = node.value.data();
                send(*a, &|k| g[k] / (T::lit(2.0) * out[k]))
            }
            Op::Sum(a) => send(*a, &|_| g[0]),
            Op::Mean(a) => {
                let inv = T::lit(1.0 / len(*a) as f64);
                send(*a, &|_| g[0] * inv)
            }
            Op::Linear { x, w, b } => {
                let (vx, vw) = (val(*x), val(*w));
                let (n_out, n_in) = (g.len(), vx.len());
                send(*b, &|k| g[k]);
                send(*w, &|k| g[k / n_in] * vx[k % n_in]);
                if needs(*x) {
                    let mut gx = vec![T::zero(); n_in];
                    T::gemm(n_in, n_out, 1, vw, true, g, false, T::zero(), &mut gx);
                    send(*x, &|k| gx[k]);
                }
            }
            Op::Conv {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let p = geom.positions();
                if needs(*b) {
                    let gb: Vec<T> = g.chunks(p).map(|r| r.iter().copied().sum()).collect();
                    send(*b, &|k| gb[k]);
                }
                if needs(*w) {
                    let mut gw = vec![T::zero(); geom.c_out * geom.patch()];
                    T::gemm(geom.c_out, p, geom.patch(), g, false, cols, true, T::zero(), &mut gw);
                    send(*w, &|k| gw[k]);
                }
                if needs(*x) {
                    let mut gcols = vec![T::zero(); geom.patch() * p];
                    T::gemm(geom.patch(), geom.c_out, p, val(*w), true, g, false, T::zero(), &mut gcols);
                    let mut gx = vec![T::zero(); len(*x)];
                    geom.col2im(&gcols, &mut gx);
                    send(*x, &|k| gx[k]);
                }
            }
            Op::AvgPool { x, channels } => {
                let s = len(*x) / channels;
                let inv = T::lit(1.0 / s as f64);
                send(*x, &|k| g[k / s] * inv)
            }
            Op::StdPool { x, channels } => {
                let vx = val(*x);
                let s = len(*x) / channels;
                let means: Vec<T> = vx.chunks(s).map(|c| mean_var(c).0).collect();
                let std = node.value.data();
                let inv = T::lit(1.0 / s as f64);
                send(*x, &|k| {
                    let c = k / s;
                    g[c] * (vx[k] - means[c]) * inv / std[c]
                })
            }
            Op::Concat(ids) => {
                let mut offset = 0;
                for &id in ids {
                    let n = len(id);
                    let o = offset;
                    send(id, &|k| g[o + k]);
                    offset += n;
                }
            }
            Op::Select(x, index) => {
                let idx = *index;
                send(*x, &|k| if k == idx { g[0] } else { T::zero() })
            }
            Op::MeanOf(ids) => {
                let inv = T::lit(1.0 / ids.len() as f64);
                for &id in ids {
                    send(id, &|k| g[k] * inv);
                }
            }
        }
    }
}

/// Variance floor inside the standard-deviation pool.
pub const STD_POOL_EPS: f64 = 1e-8;

fn mean_var<T: Scalar>(c: &[T]) -> (T, T) {
    let n = T::lit(c.len() as f64);
    let mean = c.iter().copied().sum::<T>() / n;
    let var = c.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
    (mean, var)
}

pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn accumulate<T: Scalar>(
    grads: &mut [Option<Vec<T>>],
    id: NodeId,
    len: usize,
    f: impl FnOnce(&mut Vec<T>),
) {
    let slot = grads[id.0].get_or_insert_with(|| vec![T::zero(); len]);
    f(slot);
}

fn add_into<T: Scalar>(acc: &mut [T], src: &[T]) {
    for (a, &s) in acc.iter_mut().zip(src) {
        *a = *a + s;
    }
}
