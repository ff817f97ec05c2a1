use std::cell::RefCell;
use std::sync::Arc;

use super::{shape_err, Tensor, TensorError};

type NodeId = usize;

/// Deliberate gradient corruption, used to confirm that gradient checks
/// actually detect wrong derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InjectedFault {
    FlipTanhGradient,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TapeOptions {
    /// Reject NaN/Inf at every op boundary.
    pub checked: bool,
    pub fault: Option<InjectedFault>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    BiasAdd(NodeId, NodeId),
    Tanh(NodeId),
    Relu(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        bias: NodeId,
    },
    MaxPool2x2 {
        input: NodeId,
        argmax: Vec<usize>,
    },
    Reshape(NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    Extremum {
        input: NodeId,
        index: usize,
    },
    Inner(NodeId, NodeId),
    Softmax(NodeId),
    L2Norm(NodeId),
    Clamp {
        input: NodeId,
        passes: Vec<bool>,
    },
    Gather {
        input: NodeId,
        indices: Vec<usize>,
    },
    GroupedLinear {
        input: NodeId,
        weight: NodeId,
    },
    ConcatCols(Vec<NodeId>),
    CrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Records operations for one forward pass.
///
/// A tape is single-threaded; independent tapes may share parameter tensors
/// through `Arc` and run on different threads.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    options: TapeOptions,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var({}, {:?})", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient for `var`, or zeros when no path reaches it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }

    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        self.grads[var.id]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[var.id].clone()))
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<(), TensorError> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn rows_cols(t: &Tensor) -> (usize, usize) {
    let cols = t.shape().last().copied().unwrap_or(1);
    (if cols == 0 { 0 } else { t.len() / cols }, cols)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_options(options: TapeOptions) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            options,
        }
    }

    pub fn checked() -> Self {
        Self::with_options(TapeOptions {
            checked: true,
            fault: None,
        })
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Leaf that receives a gradient.
    pub fn var(&self, value: impl Into<Arc<Tensor>>) -> Result<Var<'_>, TensorError> {
        self.push("var", Op::Leaf, value.into(), true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: impl Into<Arc<Tensor>>) -> Result<Var<'_>, TensorError> {
        self.push("constant", Op::Leaf, value.into(), false)
    }

    fn push(
        &self,
        name: &'static str,
        op: Op,
        value: Arc<Tensor>,
        requires_grad: bool,
    ) -> Result<Var<'_>, TensorError> {
        if self.options.checked && !value.all_finite() {
            return Err(TensorError::NonFinite(name));
        }
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    fn value(&self, id: NodeId) -> Arc<Tensor> {
        Arc::clone(&self.nodes.borrow()[id].value)
    }

    fn requires(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    fn record(
        &self,
        name: &'static str,
        op: Op,
        inputs: &[NodeId],
        value: Tensor,
    ) -> Result<Var<'_>, TensorError> {
        let requires = self.requires(inputs);
        self.push(name, op, Arc::new(value), requires)
    }

    /// Reverse accumulation from `output`, seeded with `seed`.
    pub fn backward(&self, output: Var<'_>, seed: Tensor) -> Result<Gradients, TensorError> {
        if !std::ptr::eq(output.tape, self) {
            return Err(TensorError::ForeignVar);
        }
        let nodes = self.nodes.borrow();
        let out_shape = nodes[output.id].value.shape();
        if seed.shape() != out_shape && !(seed.len() == 1 && nodes[output.id].value.len() == 1) {
            return Err(TensorError::SeedShape {
                seed: seed.shape().to_vec(),
                output: out_shape.to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        let seed = seed.reshape(out_shape.to_vec())?;
        grads[output.id] = Some(seed);

        for id in (0..=output.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if node.requires_grad {
                self.propagate(&nodes, node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Backward pass from a scalar output with seed 1.
    pub fn gradients(&self, output: Var<'_>) -> Result<Gradients, TensorError> {
        self.backward(output, Tensor::scalar(1.0))
    }

    fn propagate(&self, nodes: &[Node], node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let wants = |id: NodeId| nodes[id].requires_grad;
        let val = |id: NodeId| nodes[id].value.as_ref();
        let mut acc = |id: NodeId, t: Tensor| match &mut grads[id] {
            Some(existing) => existing.axpy(1.0, &t),
            slot @ None => *slot = Some(t),
        };
        let out = node.value.as_ref();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                if wants(*a) {
                    let mut da = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    acc(*a, Tensor::new(vec![m, k], da).expect("shape"));
                }
                if wants(*b) {
                    let mut db = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let s = ad[i * k + p];
                            if s != 0.0 {
                                for (d, x) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *d += s * x;
                                }
                            }
                        }
                    }
                    acc(*b, Tensor::new(vec![k, n], db).expect("shape"));
                }
            }
            Op::BiasAdd(x, b) => {
                if wants(*x) {
                    acc(*x, g.clone());
                }
                if wants(*b) {
                    let (_, cols) = rows_cols(g);
                    let mut db = vec![0.0; cols];
                    for row in g.data().chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::new(val(*b).shape().to_vec(), db).expect("shape"));
                }
            }
            Op::Tanh(x) => {
                let sign = match self.options.fault {
                    Some(InjectedFault::FlipTanhGradient) => -1.0,
                    None => 1.0,
                };
                let data = out
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(y, gy)| sign * gy * (1.0 - y * y))
                    .collect();
                acc(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Relu(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gy)| if *v > 0.0 { *gy } else { 0.0 })
                    .collect();
                acc(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Exp(x) => {
                let data = out.data().iter().zip(g.data()).map(|(y, gy)| y * gy).collect();
                acc(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Softplus(x) => {
                let data = val(*x)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(v, gy)| gy * sigmoid(*v))
                    .collect();
                acc(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
            } => {
                let (iv, kv) = (val(*input), val(*kernel));
                let geo = ConvGeometry::of(iv.shape(), kv.shape());
                if wants(*input) {
                    acc(*input, conv2d_input_grad(&geo, kv.data(), g.data()));
                }
                if wants(*kernel) {
                    acc(*kernel, conv2d_kernel_grad(&geo, iv.data(), g.data()));
                }
                if wants(*bias) {
                    let mut db = vec![0.0; geo.out_ch];
                    let plane = geo.h * geo.w;
                    for (idx, chunk) in g.data().chunks(plane).enumerate() {
                        db[idx % geo.out_ch] += chunk.iter().sum::<f64>();
                    }
                    acc(*bias, Tensor::vector(db));
                }
            }
            Op::MaxPool2x2 { input, argmax } => {
                let mut d = Tensor::zeros(val(*input).shape().to_vec());
                let dd = d.data_mut();
                for (&src, gy) in argmax.iter().zip(g.data()) {
                    dd[src] += gy;
                }
                acc(*input, d);
            }
            Op::Reshape(x) => {
                let shape = val(*x).shape().to_vec();
                acc(*x, g.clone().reshape(shape).expect("shape"));
            }
            Op::Add(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    acc(*a, g.clone());
                }
                if wants(*b) {
                    acc(*b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    let data = bv.data().iter().zip(g.data()).map(|(y, gy)| y * gy).collect();
                    acc(*a, Tensor::new(av.shape().to_vec(), data).expect("shape"));
                }
                if wants(*b) {
                    let data = av.data().iter().zip(g.data()).map(|(y, gy)| y * gy).collect();
                    acc(*b, Tensor::new(bv.shape().to_vec(), data).expect("shape"));
                }
            }
            Op::Scale(x, s) => acc(*x, g.map(|v| v * s)),
            Op::AddScalar(x) => acc(*x, g.clone()),
            Op::Sum(x) => {
                acc(*x, Tensor::full(val(*x).shape().to_vec(), g.item()));
            }
            Op::Extremum { input, index } => {
                let mut d = Tensor::zeros(val(*input).shape().to_vec());
                d.data_mut()[*index] = g.item();
                acc(*input, d);
            }
            Op::Inner(a, b) => {
                let s = g.item();
                let (av, bv) = (val(*a), val(*b));
                if wants(*a) {
                    acc(*a, bv.map(|v| v * s).reshape(av.shape().to_vec()).expect("shape"));
                }
                if wants(*b) {
                    acc(*b, av.map(|v| v * s).reshape(bv.shape().to_vec()).expect("shape"));
                }
            }
            Op::Softmax(x) => {
                let (_, cols) = rows_cols(out);
                let mut data = Vec::with_capacity(out.len());
                for (srow, grow) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                    let dot: f64 = srow.iter().zip(grow).map(|(s, gy)| s * gy).sum();
                    data.extend(srow.iter().zip(grow).map(|(s, gy)| s * (gy - dot)));
                }
                acc(*x, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::L2Norm(x) => {
                let norm = out.item();
                let xv = val(*x);
                if norm > 0.0 {
                    let s = g.item() / norm;
                    acc(*x, xv.map(|v| v * s));
                } else {
                    acc(*x, Tensor::zeros(xv.shape().to_vec()));
                }
            }
            Op::Clamp { input, passes } => {
                let data = passes
                    .iter()
                    .zip(g.data())
                    .map(|(p, gy)| if *p { *gy } else { 0.0 })
                    .collect();
                acc(*input, Tensor::new(out.shape().to_vec(), data).expect("shape"));
            }
            Op::Gather { input, indices } => {
                let mut d = Tensor::zeros(val(*input).shape().to_vec());
                let dd = d.data_mut();
                for (&i, gy) in indices.iter().zip(g.data()) {
                    dd[i] += gy;
                }
                acc(*input, d);
            }
            Op::GroupedLinear { input, weight } => {
                let (xv, wv) = (val(*input), val(*weight));
                let (groups, width) = (wv.shape()[0], wv.shape()[1]);
                let batch = xv.shape()[0];
                let (xd, wd, gd) = (xv.data(), wv.data(), g.data());
                if wants(*input) {
                    let mut dx = vec![0.0; xd.len()];
                    for b in 0..batch {
                        for gi in 0..groups {
                            let gy = gd[b * groups + gi];
                            let base = b * groups * width + gi * width;
                            for j in 0..width {
                                dx[base + j] = gy * wd[gi * width + j];
                            }
                        }
                    }
                    acc(*input, Tensor::new(xv.shape().to_vec(), dx).expect("shape"));
                }
                if wants(*weight) {
                    let mut dw = vec![0.0; wd.len()];
                    for b in 0..batch {
                        for gi in 0..groups {
                            let gy = gd[b * groups + gi];
                            let base = b * groups * width + gi * width;
                            for j in 0..width {
                                dw[gi * width + j] += gy * xd[base + j];
                            }
                        }
                    }
                    acc(*weight, Tensor::new(wv.shape().to_vec(), dw).expect("shape"));
                }
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(out);
                let mut offset = 0;
                for &p in parts {
                    let pv = val(p);
                    let (_, cols) = rows_cols(pv);
                    if wants(p) {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + offset..r * total + offset + cols]);
                        }
                        acc(p, Tensor::new(pv.shape().to_vec(), d).expect("shape"));
                    }
                    offset += cols;
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let lv = val(*logits);
                let (rows, cols) = rows_cols(lv);
                let s = g.item() / rows as f64;
                let mut d = probs.clone();
                for (r, &y) in labels.iter().enumerate() {
                    d[r * cols + y] -= 1.0;
                }
                for v in &mut d {
                    *v *= s;
                }
                acc(*logits, Tensor::new(lv.shape().to_vec(), d).expect("shape"));
            }
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + exp(v))` without overflow.
pub(crate) fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

struct ConvGeometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    h: usize,
    w: usize,
    k: usize,
    pad: usize,
}

impl ConvGeometry {
    fn of(input: &[usize], kernel: &[usize]) -> Self {
        Self {
            batch: input[0],
            in_ch: input[1],
            h: input[2],
            w: input[3],
            out_ch: kernel[0],
            k: kernel[2],
            pad: kernel[2] / 2,
        }
    }

    /// Valid output range along one axis for kernel offset `off`.
    fn span(&self, off: usize, extent: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(off);
        let hi = (extent + self.pad).saturating_sub(off).min(extent);
        (lo, hi.max(lo))
    }
}

fn conv2d_forward(geo: &ConvGeometry, input: &[f64], kernel: &[f64], bias: &[f64]) -> Vec<f64> {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let plane = h * w;
    let mut out = vec![0.0; geo.batch * geo.out_ch * plane];
    for b in 0..geo.batch {
        for o in 0..geo.out_ch {
            let dst = &mut out[(b * geo.out_ch + o) * plane..(b * geo.out_ch + o + 1) * plane];
            dst.fill(bias[o]);
            for c in 0..geo.in_ch {
                let src = &input[(b * geo.in_ch + c) * plane..(b * geo.in_ch + c + 1) * plane];
                for ky in 0..k {
                    let (y0, y1) = geo.span(ky, h);
                    for kx in 0..k {
                        let wv = kernel[((o * geo.in_ch + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = geo.span(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - geo.pad;
                            let drow = &mut dst[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - geo.pad..sy * w + x1 + kx - geo.pad];
                            for (d, s) in drow.iter_mut().zip(srow) {
                                *d += wv * s;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv2d_input_grad(geo: &ConvGeometry, kernel: &[f64], gout: &[f64]) -> Tensor {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let plane = h * w;
    let mut din = vec![0.0; geo.batch * geo.in_ch * plane];
    for b in 0..geo.batch {
        for o in 0..geo.out_ch {
            let go = &gout[(b * geo.out_ch + o) * plane..(b * geo.out_ch + o + 1) * plane];
            for c in 0..geo.in_ch {
                let dst = &mut din[(b * geo.in_ch + c) * plane..(b * geo.in_ch + c + 1) * plane];
                for ky in 0..k {
                    let (y0, y1) = geo.span(ky, h);
                    for kx in 0..k {
                        let wv = kernel[((o * geo.in_ch + c) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let (x0, x1) = geo.span(kx, w);
                        for y in y0..y1 {
                            let sy = y + ky - geo.pad;
                            let grow = &go[y * w + x0..y * w + x1];
                            let drow = &mut dst[sy * w + x0 + kx - geo.pad..sy * w + x1 + kx - geo.pad];
                            for (d, gy) in drow.iter_mut().zip(grow) {
                                *d += wv * gy;
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![geo.batch, geo.in_ch, h, w], din).expect("shape")
}

fn conv2d_kernel_grad(geo: &ConvGeometry, input: &[f64], gout: &[f64]) -> Tensor {
    let (h, w, k) = (geo.h, geo.w, geo.k);
    let plane = h * w;
    let mut dk = vec![0.0; geo.out_ch * geo.in_ch * k * k];
    for b in 0..geo.batch {
        for o in 0..geo.out_ch {
            let go = &gout[(b * geo.out_ch + o) * plane..(b * geo.out_ch + o + 1) * plane];
            for c in 0..geo.in_ch {
                let src = &input[(b * geo.in_ch + c) * plane..(b * geo.in_ch + c + 1) * plane];
                for ky in 0..k {
                    let (y0, y1) = geo.span(ky, h);
                    for kx in 0..k {
                        let (x0, x1) = geo.span(kx, w);
                        let mut s = 0.0;
                        for y in y0..y1 {
                            let sy = y + ky - geo.pad;
                            let grow = &go[y * w + x0..y * w + x1];
                            let srow = &src[sy * w + x0 + kx - geo.pad..sy * w + x1 + kx - geo.pad];
                            s += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dk[((o * geo.in_ch + c) * k + ky) * k + kx] += s;
                    }
                }
            }
        }
    }
    Tensor::new(vec![geo.out_ch, geo.in_ch, k, k], dk).expect("shape")
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Arc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.tape.nodes.borrow()[self.id].value.item()
    }

    fn same_tape(&self, other: &Var<'_>) -> Result<(), TensorError> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(TensorError::ForeignVar)
        }
    }

    fn unary(
        self,
        name: &'static str,
        op: impl FnOnce(NodeId) -> Op,
        f: impl Fn(f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        let v = self.value().map(f);
        self.tape.record(name, op(self.id), &[self.id], v)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        op: impl FnOnce(NodeId, NodeId) -> Op,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var<'t>, TensorError> {
        self.same_tape(&other)?;
        let (a, b) = (self.value(), other.value());
        same_shape(name, &a, &b)?;
        let data = a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect();
        let v = Tensor::new(a.shape().to_vec(), data)?;
        self.tape.record(name, op(self.id, other.id), &[self.id, other.id], v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", a.shape(), b.shape())));
        }
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let (ad, bd) = (a.data(), b.data());
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let s = ad[i * k + p];
                if s == 0.0 {
                    continue;
                }
                for (o, x) in orow.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += s * x;
                }
            }
        }
        let v = Tensor::new(vec![m, n], out)?;
        self.tape.record("matmul", Op::MatMul(self.id, rhs.id), &[self.id, rhs.id], v)
    }

    /// Adds a length-`n` bias to every row of a `[.., n]` tensor.
    pub fn bias_add(self, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&bias)?;
        let (x, b) = (self.value(), bias.value());
        let (_, cols) = rows_cols(&x);
        if b.len() != cols {
            return Err(shape_err("bias_add", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut data = x.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (d, bv) in row.iter_mut().zip(b.data()) {
                *d += bv;
            }
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.record("bias_add", Op::BiasAdd(self.id, bias.id), &[self.id, bias.id], v)
    }

    pub fn tanh(self) -> Result<Var<'t>, TensorError> {
        self.unary("tanh", Op::Tanh, f64::tanh)
    }

    pub fn relu(self) -> Result<Var<'t>, TensorError> {
        self.unary("relu", Op::Relu, |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn exp(self) -> Result<Var<'t>, TensorError> {
        self.unary("exp", Op::Exp, f64::exp)
    }

    /// Elementwise `log(1 + exp(x))`.
    pub fn softplus(self) -> Result<Var<'t>, TensorError> {
        self.unary("softplus", Op::Softplus, softplus)
    }

    /// Stride-1, zero-padded ("same") convolution.
    /// Input `[B, C, H, W]`, kernel `[O, C, K, K]` with odd `K`, bias `[O]`.
    pub fn conv2d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&kernel)?;
        self.same_tape(&bias)?;
        let (x, kv, bv) = (self.value(), kernel.value(), bias.value());
        let (xs, ks) = (x.shape(), kv.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] || ks[2] != ks[3] || ks[2] % 2 == 0 || bv.len() != ks[0] {
            return Err(shape_err(
                "conv2d",
                format!("input {xs:?}, kernel {ks:?}, bias {:?}", bv.shape()),
            ));
        }
        let geo = ConvGeometry::of(xs, ks);
        let out = conv2d_forward(&geo, x.data(), kv.data(), bv.data());
        let v = Tensor::new(vec![geo.batch, geo.out_ch, geo.h, geo.w], out)?;
        self.tape.record(
            "conv2d",
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            &[self.id, kernel.id, bias.id],
            v,
        )
    }

    /// 2x2 max pooling with stride 2 over `[B, C, H, W]`; odd edges are dropped.
    pub fn maxpool2x2(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[2] < 2 || s[3] < 2 {
            return Err(shape_err("maxpool2x2", format!("{s:?}")));
        }
        let (bc, h, w) = (s[0] * s[1], s[2], s[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(bc * oh * ow);
        let mut argmax = Vec::with_capacity(bc * oh * ow);
        let d = x.data();
        for p in 0..bc {
            let base = p * h * w;
            for y in 0..oh {
                for xx in 0..ow {
                    let mut best = base + 2 * y * w + 2 * xx;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                    out.push(d[best]);
                    argmax.push(best);
                }
            }
        }
        let v = Tensor::new(vec![s[0], s[1], oh, ow], out)?;
        self.tape.record(
            "maxpool2x2",
            Op::MaxPool2x2 {
                input: self.id,
                argmax,
            },
            &[self.id],
            v,
        )
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>, TensorError> {
        let v = (*self.value()).clone().reshape(shape)?;
        self.tape.record("reshape", Op::Reshape(self.id), &[self.id], v)
    }

    /// `[B, ...] -> [B, product of the rest]`.
    pub fn flatten(self) -> Result<Var<'t>, TensorError> {
        let shape = self.shape();
        let batch = shape.first().copied().unwrap_or(1);
        let rest = shape.iter().skip(1).product();
        self.reshape(vec![batch, rest])
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "add", Op::Add, |a, b| a + b)
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "sub", Op::Sub, |a, b| a - b)
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.binary(rhs, "mul", Op::Mul, |a, b| a * b)
    }

    pub fn scale(self, factor: f64) -> Result<Var<'t>, TensorError> {
        self.unary("scale", |id| Op::Scale(id, factor), |v| v * factor)
    }

    pub fn add_scalar(self, offset: f64) -> Result<Var<'t>, TensorError> {
        self.unary("add_scalar", Op::AddScalar, |v| v + offset)
    }

    pub fn reduce_sum(self) -> Result<Var<'t>, TensorError> {
        let s = self.value().data().iter().sum();
        self.tape.record("reduce_sum", Op::Sum(self.id), &[self.id], Tensor::scalar(s))
    }

    /// Largest element; ties resolve to the first index.
    pub fn reduce_max(self) -> Result<Var<'t>, TensorError> {
        self.extremum("reduce_max", |a, b| a > b)
    }

    /// Smallest element; ties resolve to the first index.
    pub fn reduce_min(self) -> Result<Var<'t>, TensorError> {
        self.extremum("reduce_min", |a, b| a < b)
    }

    fn extremum(self, name: &'static str, better: fn(f64, f64) -> bool) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if x.is_empty() {
            return Err(shape_err(name, "empty input"));
        }
        let d = x.data();
        let mut index = 0;
        for (i, &v) in d.iter().enumerate().skip(1) {
            if better(v, d[index]) {
                index = i;
            }
        }
        self.tape.record(
            name,
            Op::Extremum {
                input: self.id,
                index,
            },
            &[self.id],
            Tensor::scalar(d[index]),
        )
    }

    /// Sum of elementwise products of two equally sized tensors.
    pub fn inner_product(self, rhs: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&rhs)?;
        let (a, b) = (self.value(), rhs.value());
        if a.len() != b.len() {
            return Err(shape_err("inner_product", format!("{:?} . {:?}", a.shape(), b.shape())));
        }
        let s = a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum();
        self.tape.record("inner_product", Op::Inner(self.id, rhs.id), &[self.id, rhs.id], Tensor::scalar(s))
    }

    /// Row-wise softmax over the last axis, max-shifted.
    pub fn softmax(self) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (_, cols) = rows_cols(&x);
        let mut data = Vec::with_capacity(x.len());
        for row in x.data().chunks(cols.max(1)) {
            data.extend(softmax_row(row));
        }
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.record("softmax", Op::Softmax(self.id), &[self.id], v)
    }

    /// Euclidean norm over all elements; the subgradient at zero is zero.
    pub fn l2_norm(self) -> Result<Var<'t>, TensorError> {
        let n = self.value().l2_norm();
        self.tape.record("l2_norm", Op::L2Norm(self.id), &[self.id], Tensor::scalar(n))
    }

    /// Elementwise `max(x, threshold)`; at ties the gradient flows to `x`.
    pub fn max_scalar(self, threshold: f64) -> Result<Var<'t>, TensorError> {
        self.clamp("max_scalar", threshold, |v, t| v >= t)
    }

    /// Elementwise `min(x, threshold)`; at ties the gradient flows to `x`.
    pub fn min_scalar(self, threshold: f64) -> Result<Var<'t>, TensorError> {
        self.clamp("min_scalar", threshold, |v, t| v <= t)
    }

    fn clamp(self, name: &'static str, threshold: f64, keep: fn(f64, f64) -> bool) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let passes: Vec<bool> = x.data().iter().map(|&v| keep(v, threshold)).collect();
        let data = x
            .data()
            .iter()
            .zip(&passes)
            .map(|(&v, &p)| if p { v } else { threshold })
            .collect();
        let v = Tensor::new(x.shape().to_vec(), data)?;
        self.tape.record(name, Op::Clamp { input: self.id, passes }, &[self.id], v)
    }

    /// Selects elements by flat index into a 1-D result.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(shape_err("gather", format!("index {bad} out of {}", x.len())));
        }
        let data = indices.iter().map(|&i| x.data()[i]).collect();
        self.tape.record(
            "gather",
            Op::Gather {
                input: self.id,
                indices: indices.to_vec(),
            },
            &[self.id],
            Tensor::vector(data),
        )
    }

    /// Block-diagonal product: `[B, G*h]` with weights `[G, h]` gives `[B, G]`,
    /// where output `g` only sees input block `g`.
    pub fn grouped_linear(self, weight: Var<'t>) -> Result<Var<'t>, TensorError> {
        self.same_tape(&weight)?;
        let (x, w) = (self.value(), weight.value());
        if x.shape().len() != 2 || w.shape().len() != 2 || x.shape()[1] != w.len() {
            return Err(shape_err("grouped_linear", format!("{:?} with {:?}", x.shape(), w.shape())));
        }
        let (batch, groups, width) = (x.shape()[0], w.shape()[0], w.shape()[1]);
        let mut out = vec![0.0; batch * groups];
        for b in 0..batch {
            for g in 0..groups {
                let xs = &x.data()[b * groups * width + g * width..b * groups * width + (g + 1) * width];
                let ws = &w.data()[g * width..(g + 1) * width];
                out[b * groups + g] = xs.iter().zip(ws).map(|(a, c)| a * c).sum();
            }
        }
        let v = Tensor::new(vec![batch, groups], out)?;
        self.tape.record(
            "grouped_linear",
            Op::GroupedLinear {
                input: self.id,
                weight: weight.id,
            },
            &[self.id, weight.id],
            v,
        )
    }

    /// Column-wise concatenation of `[B, n_i]` tensors.
    pub fn concat_cols(parts: &[Var<'t>]) -> Result<Var<'t>, TensorError> {
        let first = parts.first().ok_or_else(|| shape_err("concat_cols", "no inputs"))?;
        let tape = first.tape;
        let values: Vec<Arc<Tensor>> = parts.iter().map(Var::value).collect();
        let rows = values[0].shape()[0];
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p)?;
            if v.shape().len() != 2 || v.shape()[0] != rows {
                return Err(shape_err("concat_cols", format!("{:?}", v.shape())));
            }
        }
        let total: usize = values.iter().map(|v| v.shape()[1]).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[r * c..(r + 1) * c]);
            }
        }
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let v = Tensor::new(vec![rows, total], data)?;
        tape.record("concat_cols", Op::ConcatCols(ids.clone()), &ids, v)
    }

    /// Mean softmax cross-entropy of `[B, M]` logits against integer labels.
    pub fn softmax_cross_entropy(self, labels: &[usize]) -> Result<Var<'t>, TensorError> {
        let x = self.value();
        let (rows, cols) = rows_cols(&x);
        if x.shape().len() != 2 || labels.len() != rows || labels.iter().any(|&y| y >= cols) {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?}, {} labels", x.shape(), labels.len()),
            ));
        }
        let mut probs = Vec::with_capacity(x.len());
        let mut loss = 0.0;
        for (row, &y) in x.data().chunks(cols).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[y];
            probs.extend(softmax_row(row));
        }
        self.tape.record(
            "softmax_cross_entropy",
            Op::CrossEntropy {
                logits: self.id,
                labels: labels.to_vec(),
                probs,
            },
            &[self.id],
            Tensor::scalar(loss / rows as f64),
        )
    }
}

pub(crate) fn softmax_row(row: &[f64]) -> impl Iterator<Item = f64> + '_ {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = row.iter().map(|v| (v - m).exp()).sum();
    row.iter().map(move |v| (v - m).exp() / total)
}
