//! Reverse-mode automatic differentiation over 5-D tensors.
//!
//! Every forward op appends a node whose parents already exist, so the node
//! list is a topological order and `backward` is a single reverse sweep.
//! Ops refuse to record non-finite results.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{Shape, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Bucket that executed FLOPs are charged to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CostKind {
    Conv,
    Adapter,
    Attention,
    AttentionPooling,
    Classifier,
    Other,
}

impl CostKind {
    pub const ALL: [CostKind; 6] = [
        CostKind::Conv,
        CostKind::Adapter,
        CostKind::Attention,
        CostKind::AttentionPooling,
        CostKind::Classifier,
        CostKind::Other,
    ];

    fn slot(self) -> usize {
        self as usize
    }
}

/// FLOPs executed so far, by bucket. One multiply-accumulate counts as 2.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter([u64; 6]);

impl FlopCounter {
    pub fn get(&self, kind: CostKind) -> u64 {
        self.0[kind.slot()]
    }

    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    fn add(&mut self, kind: CostKind, flops: u64) {
        self.0[kind.slot()] += flops;
    }
}

/// Geometry of a same-padded convolution: temporal dilation (temporal stride
/// is always 1) and spatial stride.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeometry {
    pub const UNIT: ConvGeometry = ConvGeometry { dilation: 1, stride: 1 };
}

/// Output spatial extent of a same-padded op with the given stride.
pub fn same_extent(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

fn same_pad(input: usize, kernel: usize, stride: usize) -> usize {
    let out = same_extent(input, stride);
    ((out - 1) * stride + kernel).saturating_sub(input) / 2
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    AddN(Vec<Var>),
    Scale { x: Var, s: Var },
    Sigmoid(Var),
    Relu(Var),
    ChannelScale { x: Var, a: Var },
    Gap(Var),
    Linear { x: Var, w: Var, b: Var },
    Conv { x: Var, w: Var, b: Var, geom: ConvGeometry, pads: [usize; 3] },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var },
    Softmax(Var),
    WeightedSum { weights: Var, xs: Vec<Var> },
    TemporalMax { x: Var, argmax: Vec<usize> },
    SumAll(Var),
    SoftmaxCe { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    SigmoidBce { logits: Var, targets: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddN(_) => "add_n",
            Op::Scale { .. } => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::ChannelScale { .. } => "channel_scale",
            Op::Gap(_) => "gap_spatial",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv",
            Op::MaxPool { .. } => "max_pool",
            Op::AvgPool { .. } => "avg_pool",
            Op::Softmax(_) => "softmax",
            Op::WeightedSum { .. } => "weighted_sum",
            Op::TemporalMax { .. } => "temporal_max",
            Op::SumAll(_) => "sum",
            Op::SoftmaxCe { .. } => "softmax_ce",
            Op::SigmoidBce { .. } => "sigmoid_bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<usize, Var>,
    flops: FlopCounter,
    kind: Option<CostKind>,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of a parameter registered via [`Tape::param`]. Parameters
    /// that never reached the loss get `None`, meaning zero.
    pub fn param(&self, id: usize) -> Option<&[f64]> {
        self.params.get(&id).and_then(|v| self.wrt(*v))
    }
}

fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].value.shape()
    }

    pub fn flops(&self) -> &FlopCounter {
        &self.flops
    }

    /// Sets the bucket that subsequent ops charge FLOPs to; returns the old one.
    pub fn set_cost_kind(&mut self, kind: Option<CostKind>) -> Option<CostKind> {
        std::mem::replace(&mut self.kind, kind)
    }

    /// Ops recorded while no bucket is set are not counted.
    fn charge(&mut self, flops: u64) {
        if let Some(kind) = self.kind {
            self.flops.add(kind, flops);
        }
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let id = self.nodes.len();
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op.name(), node: id });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(id))
    }

    /// Records a constant.
    pub fn leaf(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf)
    }

    /// Records parameter `id`, reusing the node if it is already on the tape.
    pub fn param(&mut self, id: usize, value: &Tensor) -> Result<Var> {
        if let Some(v) = self.params.get(&id) {
            return Ok(*v);
        }
        let v = self.leaf(value.clone())?;
        self.params.insert(id, v);
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Shape> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape { op, detail: format!("{sa:?} vs {sb:?}") });
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let shape = self.same_shape("add", a, b)?;
        let data = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        self.push(Tensor::from_vec(shape, data)?, Op::Add(a, b))
    }

    pub fn add_n(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or(Error::Empty("add_n"))?;
        let shape = self.shape(first);
        let mut data = vec![0.0; shape.numel()];
        for &x in xs {
            self.same_shape("add_n", first, x)?;
            for (d, v) in data.iter_mut().zip(self.value(x).data()) {
                *d += v;
            }
        }
        self.push(Tensor::from_vec(shape, data)?, Op::AddN(xs.to_vec()))
    }

    /// Multiplies every element of `x` by the scalar node `s`.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        if !self.shape(s).is_scalar() {
            return Err(Error::Shape { op: "scale", detail: format!("scale factor {:?}", self.shape(s)) });
        }
        let k = self.value(s).item();
        let value = self.value(x);
        let data = value.data().iter().map(|v| v * k).collect();
        self.push(Tensor::from_vec(value.shape(), data)?, Op::Scale { x, s })
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let shape = value.shape();
        let data = value.data().iter().map(|&v| sigmoid_scalar(v)).collect();
        self.charge(4 * shape.numel() as u64);
        self.push(Tensor::from_vec(shape, data)?, Op::Sigmoid(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x);
        let data = value.data().iter().map(|&v| v.max(0.0)).collect();
        self.push(Tensor::from_vec(value.shape(), data)?, Op::Relu(x))
    }

    /// `out[n,t,h,w,c] = a[n,t,0,0,c] * x[n,t,h,w,c]`. A `(1,1,1,1,c)` vector
    /// `a` is applied to every frame.
    pub fn channel_scale(&mut self, x: Var, a: Var) -> Result<Var> {
        let (sx, sa) = (self.shape(x), self.shape(a));
        let per_frame = sa == Shape::new(sx.n(), sx.t(), 1, 1, sx.c());
        if !per_frame && sa != Shape::vector(sx.c()) {
            return Err(Error::Shape { op: "channel_scale", detail: format!("x {sx:?}, a {sa:?}") });
        }
        let (xv, av) = (self.value(x).data(), self.value(a).data());
        let c = sx.c();
        let frame_len = sx.h() * sx.w() * c;
        let mut out = Vec::with_capacity(xv.len());
        for (f, frame) in xv.chunks_exact(frame_len.max(1)).enumerate() {
            let scale = if per_frame { &av[f * c..(f + 1) * c] } else { av };
            for row in frame.chunks_exact(c) {
                out.extend(row.iter().zip(scale).map(|(p, q)| p * q));
            }
        }
        self.push(Tensor::from_vec(sx, out)?, Op::ChannelScale { x, a })
    }

    /// Global average pooling over the spatial axes, per frame.
    pub fn gap_spatial(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.h() == 0 || s.w() == 0 {
            return Err(Error::Empty("gap_spatial"));
        }
        let c = s.c();
        let hw = s.h() * s.w();
        let inv = 1.0 / hw as f64;
        let xv = self.value(x).data();
        let mut out = vec![0.0; s.n() * s.t() * c];
        for (frame, acc) in out.chunks_exact_mut(c).enumerate() {
            for row in xv[frame * hw * c..(frame + 1) * hw * c].chunks_exact(c) {
                for (a, v) in acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        self.charge(s.numel() as u64);
        self.push(Tensor::from_vec(Shape::new(s.n(), s.t(), 1, 1, c), out)?, Op::Gap(x))
    }

    /// Fully connected layer over the channel axis: `x · w + b` at every
    /// position. `w` has shape `(1,1,1,c_in,c_out)`, `b` is `(1,1,1,1,c_out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let (ci, co) = (sw.w(), sw.c());
        if sx.c() != ci || sw.0[..3] != [1, 1, 1] || sb != Shape::vector(co) {
            return Err(Error::Shape { op: "linear", detail: format!("x {sx:?}, w {sw:?}, b {sb:?}") });
        }
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let rows = sx.rows();
        let mut out = Vec::with_capacity(rows * co);
        for row in xv.chunks_exact(ci) {
            let start = out.len();
            out.extend_from_slice(bv);
            let acc = &mut out[start..];
            for (k, &v) in row.iter().enumerate() {
                for (a, wk) in acc.iter_mut().zip(&wv[k * co..(k + 1) * co]) {
                    *a += v * wk;
                }
            }
        }
        self.charge(2 * (rows * ci * co) as u64);
        self.push(Tensor::from_vec(sx.with_c(co), out)?, Op::Linear { x, w, b })
    }

    /// Same-padded convolution. `w` has shape `(kt, kh, kw, c_in, c_out)`;
    /// taps along time are `geom.dilation` apart and the spatial stride is
    /// `geom.stride`. Time length is preserved.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let [kt, kh, kw, ci, co] = sw.0;
        if sx.c() != ci || sb != Shape::vector(co) || geom.dilation == 0 || geom.stride == 0 {
            return Err(Error::Shape { op: "conv", detail: format!("x {sx:?}, w {sw:?}, b {sb:?}, {geom:?}") });
        }
        let [n, t, h, wd, _] = sx.0;
        let (ho, wo) = (same_extent(h, geom.stride), same_extent(wd, geom.stride));
        let pads = [(kt - 1) * geom.dilation / 2, same_pad(h, kh, geom.stride), same_pad(wd, kw, geom.stride)];
        let out_shape = Shape::new(n, t, ho, wo, co);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; out_shape.numel()];
        for_each_tap(sx, out_shape, [kt, kh, kw], geom, pads, |o, i, k| {
            if k == usize::MAX {
                out[o..o + co].copy_from_slice(bv);
                return;
            }
            let acc = &mut out[o..o + co];
            for (&v, wrow) in xv[i..i + ci].iter().zip(wv[k..k + ci * co].chunks_exact(co)) {
                for (a, q) in acc.iter_mut().zip(wrow) {
                    *a += v * q;
                }
            }
        });
        self.charge(2 * (kt * kh * kw * ci * co) as u64 * out_shape.rows() as u64);
        self.push(Tensor::from_vec(out_shape, out)?, Op::Conv { x, w, b, geom, pads })
    }

    /// Spatial max pooling with window and stride `k`; edge windows are clipped.
    pub fn max_pool(&mut self, x: Var, k: usize) -> Result<Var> {
        let s = self.shape(x);
        if k == 0 || s.h() == 0 || s.w() == 0 {
            return Err(Error::Shape { op: "max_pool", detail: format!("window {k} on {s:?}") });
        }
        let [n, t, h, w, c] = s.0;
        let (ho, wo) = (same_extent(h, k), same_extent(w, k));
        let out_shape = Shape::new(n, t, ho, wo, c);
        let xv = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; out_shape.numel()];
        let mut argmax = vec![0usize; out_shape.numel()];
        for f in 0..n * t {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((f * h + y) * w + xx) * c;
                    let dst = ((f * ho + y / k) * wo + xx / k) * c;
                    for ch in 0..c {
                        if xv[src + ch] > out[dst + ch] {
                            out[dst + ch] = xv[src + ch];
                            argmax[dst + ch] = src + ch;
                        }
                    }
                }
            }
        }
        self.push(Tensor::from_vec(out_shape, out)?, Op::MaxPool { x, argmax })
    }

    /// Adaptive average pooling to `(ho, wo)`; only downsampling is allowed.
    pub fn avg_pool_to(&mut self, x: Var, ho: usize, wo: usize) -> Result<Var> {
        let s = self.shape(x);
        if ho == 0 || wo == 0 || ho > s.h() || wo > s.w() {
            return Err(Error::Upsample { from: (s.h(), s.w()), to: (ho, wo) });
        }
        let out_shape = s.with_hw(ho, wo);
        let xv = self.value(x).data();
        let mut out = vec![0.0; out_shape.numel()];
        for_each_pool_cell(s, ho, wo, |dst, src, inv| {
            for ch in 0..s.c() {
                out[dst + ch] += xv[src + ch] * inv;
            }
        });
        self.push(Tensor::from_vec(out_shape, out)?, Op::AvgPool { x })
    }

    /// Softmax over the channel axis at every position.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.c() == 0 {
            return Err(Error::Empty("softmax"));
        }
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_exact_mut(s.c()) {
            softmax_in_place(row);
        }
        self.charge(4 * s.numel() as u64);
        self.push(Tensor::from_vec(s, out)?, Op::Softmax(x))
    }

    /// `Σ_k weights[k] · xs[k]` where `weights` is a `(1,1,1,1,m)` vector.
    pub fn weighted_sum(&mut self, weights: Var, xs: &[Var]) -> Result<Var> {
        let m = xs.len();
        if m == 0 {
            return Err(Error::Empty("weighted_sum"));
        }
        if self.shape(weights) != Shape::vector(m) {
            return Err(Error::Shape {
                op: "weighted_sum",
                detail: format!("{m} inputs, weights {:?}", self.shape(weights)),
            });
        }
        let shape = self.shape(xs[0]);
        let mut out = vec![0.0; shape.numel()];
        for (k, &x) in xs.iter().enumerate() {
            self.same_shape("weighted_sum", xs[0], x)?;
            let wk = self.value(weights).data()[k];
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += wk * v;
            }
        }
        self.push(Tensor::from_vec(shape, out)?, Op::WeightedSum { weights, xs: xs.to_vec() })
    }

    /// Max over the time axis; `(n,t,h,w,c) -> (n,1,h,w,c)`.
    pub fn temporal_max(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let [n, t, h, w, c] = s.0;
        if t == 0 {
            return Err(Error::Empty("temporal_max"));
        }
        let frame = h * w * c;
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * frame);
        let mut argmax = Vec::with_capacity(n * frame);
        for b in 0..n {
            for e in 0..frame {
                let mut best = b * t * frame + e;
                for tt in 1..t {
                    let i = (b * t + tt) * frame + e;
                    if xv[i] > xv[best] {
                        best = i;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        self.push(Tensor::from_vec(Shape::new(n, 1, h, w, c), out)?, Op::TemporalMax { x, argmax })
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(total), Op::SumAll(x))
    }

    /// Mean softmax cross-entropy; one label per row of `logits`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits);
        let k = s.c();
        if labels.len() != s.rows() {
            return Err(Error::Shape {
                op: "softmax_cross_entropy",
                detail: format!("{} labels for logits {s:?}", labels.len()),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label: bad, classes: k });
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &label) in probs.chunks_exact_mut(k).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[label];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, labels: labels.to_vec(), probs })
    }

    /// Mean binary cross-entropy of sigmoid(logits) against `targets` in [0,1].
    pub fn sigmoid_bce(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let xv = self.value(logits).data();
        if targets.len() != xv.len() {
            return Err(Error::Shape {
                op: "sigmoid_bce",
                detail: format!("{} targets for {} logits", targets.len(), xv.len()),
            });
        }
        let loss = xv
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / xv.len() as f64;
        self.push(Tensor::scalar(loss), Op::SigmoidBce { logits, targets: targets.to_vec() })
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let shape = self.shape(loss);
        if !shape.is_scalar() {
            return Err(Error::NonScalarLoss(shape.0));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.backprop_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads, params: self.params.clone() })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = node.value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let len = self.nodes[v.0].value.len();
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::AddN(xs) => {
                for &v in xs {
                    acc(v, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += g));
                }
            }
            Op::Scale { x, s } => {
                let k = self.value(*s).item();
                let xv = self.value(*x).data();
                acc(*x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += k * g));
                let dk: f64 = xv.iter().zip(g).map(|(x, g)| x * g).sum();
                acc(*s, &mut |d| d[0] += dk);
            }
            Op::Sigmoid(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    *d += g * y * (1.0 - y);
                }
            }),
            Op::Relu(x) => acc(*x, &mut |d| {
                for ((d, g), y) in d.iter_mut().zip(g).zip(out) {
                    if *y > 0.0 {
                        *d += g;
                    }
                }
            }),
            Op::ChannelScale { x, a } => {
                let s = self.shape(*x);
                let (c, hw) = (s.c(), s.h() * s.w());
                let per_frame = self.shape(*a) != Shape::vector(c);
                let slot = |i: usize| if per_frame { (i / (hw * c)) * c + i % c } else { i % c };
                let (xv, av) = (self.value(*x).data(), self.value(*a).data());
                acc(*x, &mut |d| {
                    for (i, (d, g)) in d.iter_mut().zip(g).enumerate() {
                        *d += g * av[slot(i)];
                    }
                });
                acc(*a, &mut |d| {
                    for (i, (x, g)) in xv.iter().zip(g).enumerate() {
                        d[slot(i)] += x * g;
                    }
                });
            }
            Op::Gap(x) => {
                let s = self.shape(*x);
                let (c, hw) = (s.c(), s.h() * s.w());
                let inv = 1.0 / hw as f64;
                acc(*x, &mut |d| {
                    for (i, d) in d.iter_mut().enumerate() {
                        *d += g[(i / (hw * c)) * c + i % c] * inv;
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (ci, co) = (sw.w(), sw.c());
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |d| {
                    for (drow, grow) in d.chunks_exact_mut(ci).zip(g.chunks_exact(co)) {
                        for (k, dk) in drow.iter_mut().enumerate() {
                            *dk += wv[k * co..(k + 1) * co].iter().zip(grow).map(|(w, g)| w * g).sum::<f64>();
                        }
                    }
                });
                acc(*w, &mut |d| {
                    for (xrow, grow) in xv.chunks_exact(ci).zip(g.chunks_exact(co)) {
                        for (k, &xk) in xrow.iter().enumerate() {
                            for (dw, gg) in d[k * co..(k + 1) * co].iter_mut().zip(grow) {
                                *dw += xk * gg;
                            }
                        }
                    }
                });
                acc(*b, &mut |d| {
                    for grow in g.chunks_exact(co) {
                        d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::Conv { x, w, b, geom, pads } => {
                let sx = self.shape(*x);
                let sw = self.shape(*w);
                let [kt, kh, kw, ci, co] = sw.0;
                let out_shape = node.value.shape();
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &mut |d| {
                    for_each_tap(sx, out_shape, [kt, kh, kw], *geom, *pads, |o, i, k| {
                        if k == usize::MAX {
                            return;
                        }
                        let go = &g[o..o + co];
                        for (dx, wrow) in d[i..i + ci].iter_mut().zip(wv[k..k + ci * co].chunks_exact(co)) {
                            *dx += wrow.iter().zip(go).map(|(w, g)| w * g).sum::<f64>();
                        }
                    });
                });
                acc(*w, &mut |d| {
                    for_each_tap(sx, out_shape, [kt, kh, kw], *geom, *pads, |o, i, k| {
                        if k == usize::MAX {
                            return;
                        }
                        let go = &g[o..o + co];
                        for (&v, dwrow) in xv[i..i + ci].iter().zip(d[k..k + ci * co].chunks_exact_mut(co)) {
                            for (dw, gg) in dwrow.iter_mut().zip(go) {
                                *dw += v * gg;
                            }
                        }
                    });
                });
                acc(*b, &mut |d| {
                    for grow in g.chunks_exact(co) {
                        d.iter_mut().zip(grow).for_each(|(d, g)| *d += g);
                    }
                });
            }
            Op::MaxPool { x, argmax } | Op::TemporalMax { x, argmax } => acc(*x, &mut |d| {
                for (&src, gg) in argmax.iter().zip(g) {
                    d[src] += gg;
                }
            }),
            Op::AvgPool { x } => {
                let s = self.shape(*x);
                let so = node.value.shape();
                acc(*x, &mut |d| {
                    for_each_pool_cell(s, so.h(), so.w(), |dst, src, inv| {
                        for ch in 0..s.c() {
                            d[src + ch] += g[dst + ch] * inv;
                        }
                    });
                });
            }
            Op::Softmax(x) => {
                let c = node.value.shape().c();
                acc(*x, &mut |d| {
                    for ((drow, grow), yrow) in d.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(out.chunks_exact(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(g, y)| g * y).sum();
                        for ((dd, gg), y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dd += y * (gg - dot);
                        }
                    }
                });
            }
            Op::WeightedSum { weights, xs } => {
                let wv = self.value(*weights).data();
                for (k, &x) in xs.iter().enumerate() {
                    let wk = wv[k];
                    acc(x, &mut |d| d.iter_mut().zip(g).for_each(|(d, g)| *d += wk * g));
                }
                let dots: Vec<f64> =
                    xs.iter().map(|&x| self.value(x).data().iter().zip(g).map(|(x, g)| x * g).sum()).collect();
                acc(*weights, &mut |d| d.iter_mut().zip(&dots).for_each(|(d, v)| *d += v));
            }
            Op::SumAll(x) => acc(*x, &mut |d| d.iter_mut().for_each(|d| *d += g[0])),
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = self.shape(*logits).c();
                let scale = g[0] / labels.len() as f64;
                acc(*logits, &mut |d| {
                    for (r, (drow, prow)) in d.chunks_exact_mut(k).zip(probs.chunks_exact(k)).enumerate() {
                        for (c, (dd, p)) in drow.iter_mut().zip(prow).enumerate() {
                            let y = if c == labels[r] { 1.0 } else { 0.0 };
                            *dd += scale * (p - y);
                        }
                    }
                });
            }
            Op::SigmoidBce { logits, targets } => {
                let xv = self.value(*logits).data();
                let scale = g[0] / xv.len() as f64;
                acc(*logits, &mut |d| {
                    for ((dd, &x), y) in d.iter_mut().zip(xv).zip(targets) {
                        *dd += scale * (sigmoid_scalar(x) - y);
                    }
                });
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

/// Visits every (output position, input position, weight offset) triple of a
/// same-padded convolution. Before the taps of each output position the
/// callback is invoked once with `k == usize::MAX` (bias initialisation).
fn for_each_tap(
    sx: Shape,
    so: Shape,
    kernel: [usize; 3],
    geom: ConvGeometry,
    pads: [usize; 3],
    mut f: impl FnMut(usize, usize, usize),
) {
    let [n, t, h, w, ci] = sx.0;
    let [_, _, ho, wo, co] = so.0;
    let [kt, kh, kw] = kernel;
    for b in 0..n {
        for tt in 0..t {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = so.offset(b, tt, oy, ox, 0);
                    f(o, 0, usize::MAX);
                    for a in 0..kt {
                        let ti = (tt + a * geom.dilation) as isize - pads[0] as isize;
                        if ti < 0 || ti >= t as isize {
                            continue;
                        }
                        for dy in 0..kh {
                            let yi = (oy * geom.stride + dy) as isize - pads[1] as isize;
                            if yi < 0 || yi >= h as isize {
                                continue;
                            }
                            for dx in 0..kw {
                                let xi = (ox * geom.stride + dx) as isize - pads[2] as isize;
                                if xi < 0 || xi >= w as isize {
                                    continue;
                                }
                                let i = (((b * t + ti as usize) * h + yi as usize) * w + xi as usize) * ci;
                                let k = ((a * kh + dy) * kw + dx) * ci * co;
                                f(o, i, k);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Visits every (output cell, input cell, 1/area) triple of adaptive average
/// pooling from `s` to `(ho, wo)`; offsets point at channel 0.
fn for_each_pool_cell(s: Shape, ho: usize, wo: usize, mut f: impl FnMut(usize, usize, f64)) {
    let [n, t, h, w, c] = s.0;
    for frame in 0..n * t {
        for oy in 0..ho {
            let (y0, y1) = (oy * h / ho, ((oy + 1) * h).div_ceil(ho));
            for ox in 0..wo {
                let (x0, x1) = (ox * w / wo, ((ox + 1) * w).div_ceil(wo));
                let inv = 1.0 / ((y1 - y0) * (x1 - x0)) as f64;
                let dst = ((frame * ho + oy) * wo + ox) * c;
                for y in y0..y1 {
                    for x in x0..x1 {
                        f(dst, ((frame * h + y) * w + x) * c, inv);
                    }
                }
            }
        }
    }
}
