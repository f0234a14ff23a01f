//! Tape-based reverse-mode differentiation.
//!
//! Every op evaluates eagerly and appends a node holding its value and the
//! indices of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints into every node that requires a gradient. Parameters
//! enter the tape through [`Tape::param`]; frozen ones are constants.

use std::collections::HashMap;
use std::sync::Arc;

use super::conv::{self, gemm, ConvGeom};
use super::{ParamId, ParamStore, Tensor};
use crate::dsp::stft;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Log,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Binary(BinaryOp, Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddChannel { x: Var, v: Var },
    Matmul(Var, Var),
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv1d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Act(Activation, Var),
    Reshape(Var),
    Narrow { x: Var, axis: usize, start: usize },
    Shift { x: Var, delay: usize },
    Mean { x: Var, axes: Vec<usize> },
    Sum(Var),
    L1(Var, Var),
    Bce { logits: Var, targets: Tensor },
    StftMag { x: Var, window_len: usize, hop: usize },
    ProjectLast { x: Var, matrix: Arc<Tensor> },
    Upsample { x: Var, factor: usize },
    Gate { x: Var, sig: Tensor, tanh: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded recording of one forward computation.
pub struct Tape<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`]: one per leaf input that requires
/// a gradient and one per trainable parameter reached from the loss.
#[derive(Debug, Default)]
pub struct Gradients {
    inputs: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Tensor> {
        self.inputs.get(&var)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(p, g)| (*p, g))
    }

    /// Adds parameter gradients onto `store`'s `grad` buffers. Frozen
    /// parameters never appear here, so their buffers are left untouched.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            debug_assert!(p.trainable);
            match p.grad.as_mut() {
                Some(acc) => acc.add_assign(g),
                None => p.grad = Some(g.clone()),
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `tanh` through a single `exp`; defers to the library near zero where
/// `1 - e` would cancel.
fn tanh(v: f64) -> f64 {
    let a = v.abs();
    if a < 0.02 {
        return v.tanh();
    }
    let e = (-2.0 * a).exp();
    ((1.0 - e) / (1.0 + e)).copysign(v)
}

/// `(outer, dim, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'s> Tape<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf holding data; `requires_grad` makes its adjoint available via
    /// [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.input(value, false)
    }

    /// Node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("elementwise", ta, tb)?;
        let data = match op {
            BinaryOp::Add => ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect(),
            BinaryOp::Sub => ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect(),
            BinaryOp::Mul => ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect(),
        };
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|v| v * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, factor), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|v| v + c);
        let rg = self.rg(a);
        self.push(value, Op::AddScalar(a), rg)
    }

    /// `x[B, C, L] + v`, with `v` shaped `[C]` or `[B, C]` and broadcast over time.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (tx, tv) = (self.value(x), self.value(v));
        let s = tx.shape();
        if s.len() != 3 {
            return Err(Error::shape("add_channel", format!("input {s:?} is not [B, C, L]")));
        }
        let (b, c, l) = (s[0], s[1], s[2]);
        let per_batch = match tv.shape() {
            [cc] if *cc == c => false,
            [bb, cc] if *bb == b && *cc == c => true,
            other => {
                return Err(Error::shape("add_channel", format!("vector {other:?} for input {s:?}")))
            }
        };
        let mut out = tx.clone();
        let od = out.data_mut();
        for bi in 0..b {
            for ci in 0..c {
                let add = if per_batch { tv.data()[bi * c + ci] } else { tv.data()[ci] };
                for v in &mut od[(bi * c + ci) * l..(bi * c + ci + 1) * l] {
                    *v += add;
                }
            }
        }
        let rg = self.rg(x) || self.rg(v);
        Ok(self.push(out, Op::AddChannel { x, v }, rg))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k, n) = match (ta.shape(), tb.shape()) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            (sa, sb) => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let mut out = Tensor::zeros([m, n]);
        gemm(m, k, n, ta.data(), k, 1, tb.data(), n, 1, 0.0, out.data_mut());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Matmul(a, b), rg))
    }

    /// `y = x W^T + bias` for `x: [B, n]`, `W: [m, n]`, `bias: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (bsz, n, m) = match (tx.shape(), tw.shape()) {
            ([bsz, n], [m, n2]) if n == n2 => (*bsz, *n, *m),
            (sx, sw) => return Err(Error::shape("linear", format!("input {sx:?}, weight {sw:?}"))),
        };
        let mut out = Tensor::zeros([bsz, m]);
        gemm(bsz, n, m, tx.data(), n, 1, tw.data(), 1, n, 0.0, out.data_mut());
        if let Some(b) = bias {
            let tb = self.value(b);
            if tb.shape() != [m] {
                return Err(Error::shape("linear", format!("bias {:?} for {m} outputs", tb.shape())));
            }
            for row in out.data_mut().chunks_mut(m) {
                for (o, bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b: bias }, rg))
    }

    pub fn conv1d(&mut self, x: Var, w: Var, bias: Option<Var>, geom: ConvGeom) -> Result<Var> {
        let out = conv::conv1d_forward(
            self.value(x),
            self.value(w),
            bias.map(|b| self.value(b)),
            geom,
        )?;
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv1d { x, w, b: bias, geom }, rg))
    }

    pub fn activation(&mut self, act: Activation, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let value = match act {
            Activation::Relu => tx.map(|v| v.max(0.0)),
            Activation::Sigmoid => tx.map(sigmoid),
            Activation::Tanh => tx.map(tanh),
            Activation::Log => {
                if let Some(bad) = tx.data().iter().find(|v| !(**v > 0.0)) {
                    return Err(Error::domain("log", format!("input {bad} is not strictly positive")));
                }
                tx.map(f64::ln)
            }
        };
        let rg = self.rg(x);
        Ok(self.push(value, Op::Act(act, x), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(Activation::Relu, x).expect("relu is total")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(Activation::Sigmoid, x).expect("sigmoid is total")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(Activation::Tanh, x).expect("tanh is total")
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.activation(Activation::Log, x)
    }

    /// Gated activation `sigmoid(x[:, ..C]) * tanh(x[:, C..])` for
    /// `x: [B, 2C, L]`, giving `[B, C, L]`.
    pub fn gated_tanh(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, c2, l) = match tx.shape() {
            [b, c2, l] if c2 % 2 == 0 => (*b, *c2, *l),
            s => return Err(Error::shape("gated_tanh", format!("input {s:?} is not [B, 2C, L]"))),
        };
        let half = c2 / 2 * l;
        let mut sig = Vec::with_capacity(b * half);
        let mut th = Vec::with_capacity(b * half);
        for chunk in tx.data().chunks(2 * half) {
            sig.extend(chunk[..half].iter().map(|&v| sigmoid(v)));
            th.extend(chunk[half..].iter().map(|&v| tanh(v)));
        }
        let out: Vec<f64> = sig.iter().zip(&th).map(|(s, t)| s * t).collect();
        let shape = vec![b, c2 / 2, l];
        let value = Tensor::new(shape.clone(), out)?;
        let rg = self.rg(x);
        let op = Op::Gate {
            x,
            sig: Tensor::new(shape.clone(), sig)?,
            tanh: Tensor::new(shape, th)?,
        };
        Ok(self.push(value, op, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(Error::shape(
                "narrow",
                format!("axis {axis} range {start}..{} of {shape:?}", start + len),
            ));
        }
        let (outer, dim, inner) = split_axis(shape, axis);
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            data.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let value = Tensor::new(out_shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Narrow { x, axis, start }, rg))
    }

    /// Delays the last axis by `delay` samples, filling with zeros.
    pub fn shift(&mut self, x: Var, delay: usize) -> Var {
        let tx = self.value(x);
        let l = *tx.shape().last().unwrap_or(&1);
        let mut out = Tensor::zeros(tx.shape().to_vec());
        if delay < l {
            for (src, dst) in tx.data().chunks(l).zip(out.data_mut().chunks_mut(l)) {
                dst[delay..].copy_from_slice(&src[..l - delay]);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::Shift { x, delay }, rg)
    }

    /// Arithmetic mean over `axes` (removed from the output shape).
    pub fn mean(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape();
        let mut axes = axes.to_vec();
        axes.sort_unstable();
        axes.dedup();
        if axes.iter().any(|&a| a >= shape.len() || shape[a] == 0) || axes.is_empty() {
            return Err(Error::shape("reduce_mean", format!("axes {axes:?} of {shape:?}")));
        }
        let out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|(i, _)| !axes.contains(i))
            .map(|(_, &d)| d)
            .collect();
        let count: usize = axes.iter().map(|&a| shape[a]).product();
        let mut out = Tensor::zeros(out_shape);
        let map = ReduceMap::new(shape, &axes);
        let od = out.data_mut();
        for (i, v) in tx.data().iter().enumerate() {
            od[map.out_index(i)] += v;
        }
        let inv = 1.0 / count as f64;
        for v in od.iter_mut() {
            *v *= inv;
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Mean { x, axes }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    /// Sum of absolute differences; the subgradient at a tie is 0.
    pub fn l1_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("l1_distance", ta, tb)?;
        let s = ta.data().iter().zip(tb.data()).map(|(x, y)| (x - y).abs()).sum();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(s), Op::L1(a, b), rg))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against binary targets,
    /// evaluated as `max(z, 0) - z*y + ln(1 + exp(-|z|))`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let tz = self.value(logits);
        same_shape("bce_with_logits", tz, targets)?;
        if let Some(bad) = targets.data().iter().find(|&&y| y != 0.0 && y != 1.0) {
            return Err(Error::domain("bce_with_logits", format!("target {bad} is not binary")));
        }
        let n = tz.numel() as f64;
        let s: f64 = tz
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&z, &y)| z.max(0.0) - z * y + (-z.abs()).exp().ln_1p())
            .sum();
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(s / n),
            Op::Bce {
                logits,
                targets: targets.clone(),
            },
            rg,
        ))
    }

    /// Hann-windowed STFT magnitude of the flattened signal; `[frames, bins]`.
    pub fn stft_magnitude(&mut self, x: Var, window_len: usize, hop: usize) -> Result<Var> {
        let spec = stft::stft_complex(self.value(x).data(), window_len, hop)?;
        let value = spec.magnitudes();
        let rg = self.rg(x);
        Ok(self.push(value, Op::StftMag { x, window_len, hop }, rg))
    }

    /// `x[.., K] -> x M^T` with a constant `M: [N, K]`.
    pub fn project_last(&mut self, x: Var, matrix: Arc<Tensor>) -> Result<Var> {
        let tx = self.value(x);
        let (n, k) = match matrix.shape() {
            [n, k] => (*n, *k),
            s => return Err(Error::shape("project_last", format!("matrix {s:?}"))),
        };
        if tx.shape().last() != Some(&k) {
            return Err(Error::shape(
                "project_last",
                format!("input {:?} against matrix [{n}, {k}]", tx.shape()),
            ));
        }
        let rows = tx.numel() / k;
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let mut out = Tensor::zeros(shape);
        gemm(rows, k, n, tx.data(), k, 1, matrix.data(), 1, k, 0.0, out.data_mut());
        let rg = self.rg(x);
        Ok(self.push(out, Op::ProjectLast { x, matrix }, rg))
    }

    /// Nearest-neighbour upsampling of `[B, C, F]` to `[B, C, len]`: sample
    /// `n` reads frame `min(n / factor, F - 1)`.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, f) = match tx.shape() {
            [b, c, f] => (*b, *c, *f),
            s => return Err(Error::shape("upsample_nearest", format!("input {s:?}"))),
        };
        if factor == 0 || f == 0 || f * factor < len {
            return Err(Error::shape(
                "upsample_nearest",
                format!("{f} frames at hop {factor} do not cover {len} samples"),
            ));
        }
        let mut out = Tensor::zeros([b, c, len]);
        for (src, dst) in tx.data().chunks(f).zip(out.data_mut().chunks_mut(len)) {
            for (n, d) in dst.iter_mut().enumerate() {
                *d = src[(n / factor).min(f - 1)];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample { x, factor }, rg))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", lv.shape()),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.rg(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::full(lv.shape().to_vec(), 1.0));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    out.inputs.insert(Var(i), g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                _ => self.propagate(node, &g, &mut grads),
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.rg(v) {
            return;
        }
        match grads[v.0].as_mut() {
            Some(acc) => acc.add_assign(&g),
            None => grads[v.0] = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::Binary(op, a, b) => match op {
                BinaryOp::Add => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.clone());
                }
                BinaryOp::Sub => {
                    self.accumulate(grads, *a, g.clone());
                    self.accumulate(grads, *b, g.map(|v| -v));
                }
                BinaryOp::Mul => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.rg(*a) {
                        let d = gd.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                        self.accumulate(grads, *a, Tensor::new(g.shape().to_vec(), d).unwrap());
                    }
                    if self.rg(*b) {
                        let d = gd.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                        self.accumulate(grads, *b, Tensor::new(g.shape().to_vec(), d).unwrap());
                    }
                }
            },
            Op::Scale(a, f) => self.accumulate(grads, *a, g.map(|v| v * f)),
            Op::AddScalar(a) | Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.accumulate(grads, *a, g.clone().reshape(shape).unwrap());
            }
            Op::AddChannel { x, v } => {
                self.accumulate(grads, *x, g.clone());
                if self.rg(*v) {
                    let s = g.shape();
                    let (b, c, l) = (s[0], s[1], s[2]);
                    let vshape = self.shape(*v).to_vec();
                    let per_batch = vshape.len() == 2;
                    let mut gv = Tensor::zeros(vshape);
                    for bi in 0..b {
                        for ci in 0..c {
                            let sum: f64 = gd[(bi * c + ci) * l..(bi * c + ci + 1) * l].iter().sum();
                            let idx = if per_batch { bi * c + ci } else { ci };
                            gv.data_mut()[idx] += sum;
                        }
                    }
                    self.accumulate(grads, *v, gv);
                }
            }
            Op::Matmul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.rg(*a) {
                    let mut ga = Tensor::zeros([m, k]);
                    gemm(m, n, k, gd, n, 1, tb.data(), 1, n, 0.0, ga.data_mut());
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let mut gb = Tensor::zeros([k, n]);
                    gemm(k, m, n, ta.data(), 1, k, gd, n, 1, 0.0, gb.data_mut());
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (bsz, n, m) = (tx.shape()[0], tx.shape()[1], tw.shape()[0]);
                if self.rg(*x) {
                    let mut gx = Tensor::zeros([bsz, n]);
                    gemm(bsz, m, n, gd, m, 1, tw.data(), n, 1, 0.0, gx.data_mut());
                    self.accumulate(grads, *x, gx);
                }
                if self.rg(*w) {
                    let mut gw = Tensor::zeros([m, n]);
                    gemm(m, bsz, n, gd, 1, m, tx.data(), n, 1, 0.0, gw.data_mut());
                    self.accumulate(grads, *w, gw);
                }
                if let Some(b) = b {
                    if self.rg(*b) {
                        let mut gb = vec![0.0; m];
                        for row in gd.chunks(m) {
                            for (acc, v) in gb.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        self.accumulate(grads, *b, Tensor::from_vec(gb));
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let need_b = b.is_some_and(|b| self.rg(b));
                let cg = conv::conv1d_backward(
                    self.value(*x),
                    self.value(*w),
                    g,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                    need_b,
                );
                if let Some(gx) = cg.x {
                    self.accumulate(grads, *x, gx);
                }
                if let Some(gw) = cg.w {
                    self.accumulate(grads, *w, gw);
                }
                if let (Some(b), Some(gb)) = (b, cg.bias) {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Act(act, x) => {
                let tx = self.value(*x);
                let y = &node.value;
                let d: Vec<f64> = match act {
                    Activation::Relu => gd
                        .iter()
                        .zip(tx.data())
                        .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                        .collect(),
                    Activation::Sigmoid => gd
                        .iter()
                        .zip(y.data())
                        .map(|(g, s)| g * s * (1.0 - s))
                        .collect(),
                    Activation::Tanh => gd
                        .iter()
                        .zip(y.data())
                        .map(|(g, t)| g * (1.0 - t * t))
                        .collect(),
                    Activation::Log => gd.iter().zip(tx.data()).map(|(g, v)| g / v).collect(),
                };
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), d).unwrap());
            }
            Op::Narrow { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&shape, *axis);
                let len = g.shape()[*axis];
                let mut gx = Tensor::zeros(shape);
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    let src = o * len * inner;
                    gx.data_mut()[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Shift { x, delay } => {
                let l = *g.shape().last().unwrap_or(&1);
                let mut gx = Tensor::zeros(g.shape().to_vec());
                if *delay < l {
                    for (src, dst) in gd.chunks(l).zip(gx.data_mut().chunks_mut(l)) {
                        dst[..l - delay].copy_from_slice(&src[*delay..]);
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Mean { x, axes } => {
                let shape = self.shape(*x).to_vec();
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let inv = 1.0 / count as f64;
                let map = ReduceMap::new(&shape, axes);
                let n = shape.iter().product();
                let d = (0..n).map(|i| gd[map.out_index(i)] * inv).collect();
                self.accumulate(grads, *x, Tensor::new(shape, d).unwrap());
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]));
            }
            Op::L1(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let sign: Vec<f64> = ta
                    .data()
                    .iter()
                    .zip(tb.data())
                    .map(|(x, y)| {
                        let d = x - y;
                        if d > 0.0 {
                            gd[0]
                        } else if d < 0.0 {
                            -gd[0]
                        } else {
                            0.0
                        }
                    })
                    .collect();
                let shape = ta.shape().to_vec();
                if self.rg(*b) {
                    let neg = Tensor::new(shape.clone(), sign.iter().map(|v| -v).collect()).unwrap();
                    self.accumulate(grads, *b, neg);
                }
                self.accumulate(grads, *a, Tensor::new(shape, sign).unwrap());
            }
            Op::Bce { logits, targets } => {
                let tz = self.value(*logits);
                let n = tz.numel() as f64;
                let d = tz
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&z, &y)| gd[0] * (sigmoid(z) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, Tensor::new(tz.shape().to_vec(), d).unwrap());
            }
            Op::StftMag { x, window_len, hop } => {
                let tx = self.value(*x);
                let spec = stft::stft_complex(tx.data(), *window_len, *hop).expect("validated in forward");
                let gx = spec.magnitude_vjp(gd, tx.numel());
                self.accumulate(grads, *x, Tensor::new(tx.shape().to_vec(), gx).unwrap());
            }
            Op::ProjectLast { x, matrix } => {
                let (n, k) = (matrix.shape()[0], matrix.shape()[1]);
                let shape = self.shape(*x).to_vec();
                let rows = g.numel() / n;
                let mut gx = Tensor::zeros(shape);
                gemm(rows, n, k, gd, n, 1, matrix.data(), k, 1, 0.0, gx.data_mut());
                self.accumulate(grads, *x, gx);
            }
            Op::Upsample { x, factor } => {
                let shape = self.shape(*x).to_vec();
                let f = shape[2];
                let len = *g.shape().last().unwrap();
                let mut gx = Tensor::zeros(shape);
                for (src, dst) in gd.chunks(len).zip(gx.data_mut().chunks_mut(f)) {
                    for (n, v) in src.iter().enumerate() {
                        dst[(n / factor).min(f - 1)] += v;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Gate { x, sig, tanh } => {
                let half = sig.numel() / sig.shape()[0];
                let mut gx = Vec::with_capacity(2 * sig.numel());
                let parts = gd.chunks(half).zip(sig.data().chunks(half)).zip(tanh.data().chunks(half));
                for ((g, s), t) in parts {
                    gx.extend(g.iter().zip(s).zip(t).map(|((g, s), t)| g * t * s * (1.0 - s)));
                    gx.extend(g.iter().zip(s).zip(t).map(|((g, s), t)| g * s * (1.0 - t * t)));
                }
                let gx = Tensor::new(self.shape(*x).to_vec(), gx).expect("gate shape");
                self.accumulate(grads, *x, gx);
            }
        }
    }
}

/// Maps flat input indices to flat indices of a reduced tensor.
struct ReduceMap {
    in_strides: Vec<usize>,
    dims: Vec<usize>,
    out_strides: Vec<usize>,
}

impl ReduceMap {
    fn new(shape: &[usize], axes: &[usize]) -> Self {
        let nd = shape.len();
        let mut in_strides = vec![1; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let mut out_strides = vec![0; nd];
        let mut acc = 1;
        for i in (0..nd).rev() {
            if !axes.contains(&i) {
                out_strides[i] = acc;
                acc *= shape[i];
            }
        }
        Self {
            in_strides,
            dims: shape.to_vec(),
            out_strides,
        }
    }

    fn out_index(&self, flat: usize) -> usize {
        let mut idx = 0;
        for ((s, d), o) in self.in_strides.iter().zip(&self.dims).zip(&self.out_strides) {
            idx += (flat / s) % d * o;
        }
        idx
    }
}
