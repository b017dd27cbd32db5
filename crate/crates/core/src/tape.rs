//! Reverse-mode differentiation over a linear operation record.
//!
//! A [`Tape`] owns every value produced during a forward pass. Operations
//! append a node and return a [`Var`] handle; [`Tape::backward`] walks the
//! record in reverse and accumulates adjoints into the leaves that were
//! registered with [`Tape::param`].
//!
//! Gradient contract: `backward` **accumulates** into leaf gradients. Two
//! calls without an intervening [`Tape::zero_grad`] yield twice the gradient.

use crate::error::{Error, Result};
use crate::kernels::{self, Conv1dGeom, Conv2dGeom, Conv3dGeom};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_offset, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise activations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Relu,
    Sigmoid,
    Tanh,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Sqrt(Var),
    MatMul(Var, Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Narrow { x: Var, axis: usize, start: usize },
    Concat { xs: Vec<Var>, axis: usize },
    Sum(Var),
    SumAxis { x: Var, axis: usize },
    Softmax(Var),
    LogSoftmax(Var),
    Gather { x: Var, index: Vec<usize> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: Conv1dGeom },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: Conv2dGeom },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: Conv3dGeom },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::Offset(..) => "offset",
            Op::Relu(..) => "relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Sqrt(..) => "sqrt",
            Op::MatMul(..) => "matmul",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Narrow { .. } => "narrow",
            Op::Concat { .. } => "concat",
            Op::Sum(..) => "sum",
            Op::SumAxis { .. } => "sum_axis",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Gather { .. } => "gather",
            Op::Conv1d { .. } => "conv1d",
            Op::Conv2d { .. } => "conv2d",
            Op::Conv3d { .. } => "conv3d",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    label: Option<String>,
}

/// Ordered record of executed operations. Confined to one thread.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            label: None,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, op, rg)
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that collects gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Named gradient-collecting leaf; the name shows up in diagnostics.
    pub fn param_named(&mut self, value: Tensor, name: &str) -> Var {
        let v = self.param(value);
        self.nodes[v.0].label = Some(name.to_string());
        v
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

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    /// First recorded value containing NaN or infinity, described by op
    /// name, node index and label.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find(|(_, n)| !n.value.all_finite()).map(|(i, n)| {
            format!(
                "node {i} ({}{}) shape {:?}",
                n.op.name(),
                n.label.as_deref().map(|l| format!(" `{l}`")).unwrap_or_default(),
                n.value.shape()
            )
        })
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data: Vec<f64> = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let oa = offsets(&sa, &out_shape);
            let ob = offsets(&sb, &out_shape);
            oa.iter().zip(&ob).map(|(&i, &j)| f(da[i], db[j])).collect()
        };
        Tensor::new(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push_op(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push_op(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push_op(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary(a, b, "div", |x, y| x / y)?;
        Ok(self.push_op(t, Op::Div(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        self.push_op(t, Op::Scale(x, s), &[x])
    }

    /// `x + c`
    pub fn offset(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v + c);
        self.push_op(t, Op::Offset(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push_op(t, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        self.push_op(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        self.push_op(t, Op::Tanh(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::sqrt);
        self.push_op(t, Op::Sqrt(x), &[x])
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Var {
        match act {
            Activation::Identity => x,
            Activation::Relu => self.relu(x),
            Activation::Sigmoid => self.sigmoid(x),
            Activation::Tanh => self.tanh(x),
        }
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product `[.., M, K] x [.., K, P] -> [.., M, P]` with
    /// broadcasting over the leading batch axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let plan = MatmulPlan::new(&sa, &sb)?;
        let mut out = vec![0.0; plan.batch_len() * plan.m * plan.p];
        let (da, db) = (self.value(a).data(), self.value(b).data());
        for (i, (&ia, &ib)) in plan.a_idx.iter().zip(&plan.b_idx).enumerate() {
            kernels::gemm_acc(
                &da[ia * plan.m * plan.k..(ia + 1) * plan.m * plan.k],
                &db[ib * plan.k * plan.p..(ib + 1) * plan.k * plan.p],
                &mut out[i * plan.m * plan.p..(i + 1) * plan.m * plan.p],
                plan.m,
                plan.k,
                plan.p,
            );
        }
        let t = Tensor::new(&plan.out_shape(), out)?;
        Ok(self.push_op(t, Op::MatMul(a, b), &[a, b]))
    }

    // ---- shape --------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        Ok(self.push_op(t, Op::Permute(x, perm.to_vec()), &[x]))
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow axis {axis} range {start}..{} out of bounds for {shape:?}",
                start + len
            )));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * ext + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*xs.first().ok_or_else(|| Error::Usage("concat of zero tensors".into()))?)
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Shape(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let ext = self.shape(v)[axis];
                let src = self.value(v).data();
                data.extend_from_slice(&src[o * ext * inner..(o + 1) * ext * inner]);
            }
        }
        let mut out_shape = first;
        out_shape[axis] = total;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::Concat { xs: xs.to_vec(), axis }, xs))
    }

    // ---- reductions ----------------------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let t = Tensor::scalar(self.value(x).sum());
        self.push_op(t, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Sum along `axis`, keeping it with extent 1.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum axis {axis} out of range for {shape:?}")));
        }
        let (outer, ext, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            let dst = &mut data[o * inner..(o + 1) * inner];
            for e in 0..ext {
                let base = (o * ext + e) * inner;
                for (d, s) in dst.iter_mut().zip(&src[base..base + inner]) {
                    *d += s;
                }
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = 1;
        let t = Tensor::new(&out_shape, data)?;
        Ok(self.push_op(t, Op::SumAxis { x, axis }, &[x]))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let mut shape = self.shape(x).to_vec();
        let n = *shape
            .get(axis)
            .ok_or_else(|| Error::Shape(format!("mean axis {axis} out of range for {shape:?}")))?;
        let s = self.sum_axis(x, axis)?;
        let s = self.scale(s, 1.0 / n as f64);
        shape.remove(axis);
        self.reshape(s, &shape)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = softmax_last(self.value(x))?;
        Ok(self.push_op(t, Op::Softmax(x), &[x]))
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let c = *v.shape().last().ok_or_else(|| Error::Shape("log_softmax of a scalar".into()))?;
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&r| (r - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|r| *r -= lse);
        }
        let t = Tensor::new(v.shape(), data)?;
        Ok(self.push_op(t, Op::LogSoftmax(x), &[x]))
    }

    /// `out.flat[i] = x.flat[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::Shape(format!("gather index {bad} out of range for {} values", src.len())));
        }
        let data = index.iter().map(|&i| src[i]).collect();
        let t = Tensor::new(shape, data)?;
        Ok(self.push_op(t, Op::Gather { x, index }, &[x]))
    }

    // ---- convolutions --------------------------------------------------

    /// Dilated, same-length temporal convolution.
    /// `x: [B, C, T]`, `w: [C_out, C, k]`, `b: [C_out]`, `k` odd.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>, dilation: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 3 || sw.len() != 3 || sx[1] != sw[1] {
            return Err(Error::dim("conv1d", &sx, &sw));
        }
        if sw[2] % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel width {} must be odd", sw[2])));
        }
        if dilation == 0 {
            return Err(Error::Config("conv1d dilation must be positive".into()));
        }
        self.check_bias(b, sw[0])?;
        let geom = Conv1dGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            len: sx[2],
            k: sw[2],
            dilation,
        };
        let out = geom.forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(&[sx[0], sw[0], sx[2]], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(t, Op::Conv1d { x, w, b, geom }, &inputs))
    }

    /// Strided 2-D convolution with `k/2` zero padding.
    /// `x: [B, C, H, W]`, `w: [C_out, C, kh, kw]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 4 || sw.len() != 4 || sx[1] != sw[1] {
            return Err(Error::dim("conv2d", &sx, &sw));
        }
        if sw[2] % 2 == 0 || sw[3] % 2 == 0 {
            return Err(Error::Config(format!("conv2d kernel {:?} must have odd extents", &sw[2..])));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        self.check_bias(b, sw[0])?;
        let geom = Conv2dGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            h: sx[2],
            w: sx[3],
            kh: sw[2],
            kw: sw[3],
            stride,
        };
        let (ho, wo) = geom.out_hw();
        let out = geom.forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(&[sx[0], sw[0], ho, wo], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(t, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Same-padded 3-D convolution preserving `(T, H, W)`.
    /// `x: [B, C, T, H, W]`, `w: [C_out, C, kt, kh, kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 5 || sw.len() != 5 || sx[1] != sw[1] {
            return Err(Error::dim("conv3d", &sx, &sw));
        }
        if sw[2..].iter().any(|k| k % 2 == 0) {
            return Err(Error::Config(format!("conv3d kernel {:?} must have odd extents", &sw[2..])));
        }
        self.check_bias(b, sw[0])?;
        let geom = Conv3dGeom {
            batch: sx[0],
            cin: sx[1],
            cout: sw[0],
            t: sx[2],
            h: sx[3],
            w: sx[4],
            kt: sw[2],
            kh: sw[3],
            kw: sw[4],
        };
        let out = geom.forward(self.value(x).data(), self.value(w).data(), b.map(|b| self.value(b).data()));
        let t = Tensor::new(&[sx[0], sw[0], sx[2], sx[3], sx[4]], out)?;
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        Ok(self.push_op(t, Op::Conv3d { x, w, b, geom }, &inputs))
    }

    fn check_bias(&self, b: Option<Var>, cout: usize) -> Result<()> {
        match b {
            Some(b) if self.shape(b) != [cout] => Err(Error::dim("conv bias", self.shape(b), &[cout])),
            _ => Ok(()),
        }
    }

    // ---- reverse pass --------------------------------------------------

    /// Propagates adjoints from a scalar `loss` back to every reachable
    /// gradient-collecting leaf, adding into their stored gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let slot = &mut self.grads[i];
                match slot {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => *slot = Some(Tensor::new(node.value.shape(), g)?),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = node.value.data();
        let mut send = |v: Var, contrib: Vec<f64>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, self.reduce_to(g, node.value.shape(), *a));
                send(*b, self.reduce_to(g, node.value.shape(), *b));
            }
            Op::Sub(a, b) => {
                send(*a, self.reduce_to(g, node.value.shape(), *a));
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                send(*b, self.reduce_to(&neg, node.value.shape(), *b));
            }
            Op::Mul(a, b) | Op::Div(a, b) => {
                let shape = node.value.shape();
                let (va, vb) = (self.value(*a), self.value(*b));
                let oa = offsets(va.shape(), shape);
                let ob = offsets(vb.shape(), shape);
                let (da, db) = (va.data(), vb.data());
                let is_div = matches!(node.op, Op::Div(..));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; da.len()];
                    for (k, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        ga[ia] += if is_div { g[k] / db[ib] } else { g[k] * db[ib] };
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; db.len()];
                    for (k, (&ia, &ib)) in oa.iter().zip(&ob).enumerate() {
                        gb[ib] += if is_div {
                            -g[k] * da[ia] / (db[ib] * db[ib])
                        } else {
                            g[k] * da[ia]
                        };
                    }
                    send(*b, gb);
                }
            }
            Op::Scale(x, s) => send(*x, g.iter().map(|v| v * s).collect()),
            Op::Offset(x) | Op::Reshape(x) => send(*x, g.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                send(*x, g.iter().zip(xv).map(|(&gi, &xi)| if xi > 0.0 { gi } else { 0.0 }).collect());
            }
            Op::Sigmoid(x) => send(*x, g.iter().zip(out).map(|(&gi, &y)| gi * y * (1.0 - y)).collect()),
            Op::Tanh(x) => send(*x, g.iter().zip(out).map(|(&gi, &y)| gi * (1.0 - y * y)).collect()),
            Op::Sqrt(x) => send(*x, g.iter().zip(out).map(|(&gi, &y)| gi / (2.0 * y)).collect()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let plan = MatmulPlan::new(va.shape(), vb.shape())?;
                let (m, k, p) = (plan.m, plan.k, plan.p);
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![0.0; va.len()];
                    for (bi, &ia) in plan.a_idx.iter().enumerate() {
                        let ib = plan.b_idx[bi];
                        kernels::gemm_abt_acc(
                            &g[bi * m * p..(bi + 1) * m * p],
                            &vb.data()[ib * k * p..(ib + 1) * k * p],
                            &mut ga[ia * m * k..(ia + 1) * m * k],
                            m,
                            p,
                            k,
                        );
                    }
                    send(*a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![0.0; vb.len()];
                    for (bi, &ib) in plan.b_idx.iter().enumerate() {
                        let ia = plan.a_idx[bi];
                        kernels::gemm_atb_acc(
                            &va.data()[ia * m * k..(ia + 1) * m * k],
                            &g[bi * m * p..(bi + 1) * m * p],
                            &mut gb[ib * k * p..(ib + 1) * k * p],
                            m,
                            k,
                            p,
                        );
                    }
                    send(*b, gb);
                }
            }
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let gt = Tensor::new(node.value.shape(), g.to_vec())?.permute(&inv)?;
                send(*x, gt.into_data());
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let (outer, ext, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; self.value(*x).len()];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    gx[dst..dst + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                send(*x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut start = 0;
                for &v in xs {
                    let ext = self.shape(v)[*axis];
                    let mut gv = Vec::with_capacity(outer * ext * inner);
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gv.extend_from_slice(&g[base..base + ext * inner]);
                    }
                    start += ext;
                    send(v, gv);
                }
            }
            Op::Sum(x) => send(*x, vec![g[0]; self.value(*x).len()]),
            Op::SumAxis { x, axis } => {
                let (outer, ext, inner) = split_axis(self.shape(*x), *axis);
                let mut gx = vec![0.0; outer * ext * inner];
                for o in 0..outer {
                    for e in 0..ext {
                        let dst = (o * ext + e) * inner;
                        gx[dst..dst + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                send(*x, gx);
            }
            Op::Softmax(x) => {
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yi * (gi - s);
                    }
                }
                send(*x, gx);
            }
            Op::LogSoftmax(x) => {
                let c = *node.value.shape().last().unwrap_or(&1);
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(c).zip(out.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().sum();
                    for ((d, &gi), &yi) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = gi - yi.exp() * s;
                    }
                }
                send(*x, gx);
            }
            Op::Gather { x, index } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (&ix, &gi) in index.iter().zip(g) {
                    gx[ix] += gi;
                }
                send(*x, gx);
            }
            Op::Conv1d { x, w, b, geom } => {
                let need_x = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) = geom.backward(self.value(*x).data(), self.value(*w).data(), g, need_x);
                self.send_conv(&mut send, *x, *w, *b, gx, gw, gb);
            }
            Op::Conv2d { x, w, b, geom } => {
                let need_x = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) = geom.backward(self.value(*x).data(), self.value(*w).data(), g, need_x);
                self.send_conv(&mut send, *x, *w, *b, gx, gw, gb);
            }
            Op::Conv3d { x, w, b, geom } => {
                let need_x = self.nodes[x.0].requires_grad;
                let (gx, gw, gb) = geom.backward(self.value(*x).data(), self.value(*w).data(), g, need_x);
                self.send_conv(&mut send, *x, *w, *b, gx, gw, gb);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn send_conv(
        &self,
        send: &mut impl FnMut(Var, Vec<f64>),
        x: Var,
        w: Var,
        b: Option<Var>,
        gx: Option<Vec<f64>>,
        gw: Vec<f64>,
        gb: Vec<f64>,
    ) {
        if let Some(gx) = gx {
            send(x, gx);
        }
        send(w, gw);
        if let Some(b) = b {
            send(b, gb);
        }
    }

    /// Sums a broadcast gradient back down to the shape of `target`.
    fn reduce_to(&self, g: &[f64], out_shape: &[usize], target: Var) -> Vec<f64> {
        let ts = self.shape(target);
        if ts == out_shape {
            return g.to_vec();
        }
        let mut r = vec![0.0; self.value(target).len()];
        for (k, o) in offsets(ts, out_shape).into_iter().enumerate() {
            r[o] += g[k];
        }
        r
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Softmax over the last axis of a plain tensor.
pub fn softmax_last(v: &Tensor) -> Result<Tensor> {
    let c = *v.shape().last().ok_or_else(|| Error::Shape("softmax of a scalar".into()))?;
    let mut data = v.data().to_vec();
    for row in data.chunks_mut(c) {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.iter_mut().for_each(|r| *r = (*r - m).exp());
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|r| *r /= s);
    }
    Tensor::new(v.shape(), data)
}

/// `(outer, extent, inner)` element counts around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

/// Flat input offset for every element of the broadcast output.
fn offsets(input: &[usize], out: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    let in_n: usize = input.iter().product();
    let pad = out.len() - input.len();
    // suffix broadcast (e.g. bias over leading axes) is a plain modulo
    if input.iter().zip(&out[pad..]).all(|(a, b)| a == b) {
        return (0..n).map(|i| i % in_n.max(1)).collect();
    }
    let st = broadcast_strides(input, out);
    let mut v = Vec::with_capacity(n);
    for_each_offset(out, &st, |o| v.push(o));
    v
}

struct MatmulPlan {
    batch: Vec<usize>,
    m: usize,
    k: usize,
    p: usize,
    a_idx: Vec<usize>,
    b_idx: Vec<usize>,
}

impl MatmulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (ba, bb) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        let batch = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", sa, sb))?;
        let index_into = |own: &[usize]| {
            let st = broadcast_strides(own, &batch);
            let mut v = Vec::new();
            for_each_offset(&batch, &st, |o| v.push(o));
            v
        };
        // offsets count whole matrices, not elements
        let a_idx = index_into(ba);
        let b_idx = index_into(bb);
        Ok(Self {
            m: sa[sa.len() - 2],
            k: sa[sa.len() - 1],
            p: sb[sb.len() - 1],
            batch,
            a_idx,
            b_idx,
        })
    }

    fn batch_len(&self) -> usize {
        self.batch.iter().product()
    }

    fn out_shape(&self) -> Vec<usize> {
        let mut s = self.batch.clone();
        s.extend([self.m, self.p]);
        s
    }
}
