//! Recorded computation graph with reverse-mode gradients.
//!
//! A [`Graph`] is built for one forward pass and consumed by one
//! backward pass; training rebuilds the graph every step instead of
//! mutating it in place. Nodes are appended in topological order, so the
//! backward walk is a single reverse scan. Gradients of intermediate
//! nodes are dropped as soon as their producers have consumed them; only
//! leaf gradients survive for the caller.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{CoreError, Result};
use crate::mask::IGNORE;
use crate::tensor::Tensor;

/// Probability floor used inside logarithms.
pub const PROB_EPS: f64 = 1e-12;

/// Identity of a node within one [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Relu(NodeId),
    Sigmoid(NodeId),
    SoftmaxChannels(NodeId),
    Gap(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    },
    BilinearUpsample(NodeId),
    SquaredLabelLoss {
        logits: NodeId,
        targets: Vec<f64>,
    },
    MaskedCrossEntropy {
        scores: NodeId,
        labels: Vec<u8>,
        labeled: usize,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Topologically ordered operation records for one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Leaf that does not need a gradient (images, constant targets).
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Leaf, value, false)
    }

    /// Leaf whose gradient is accumulated during backward (parameters).
    pub fn param(&mut self, value: &Tensor) -> NodeId {
        self.push(Op::Leaf, value.clone(), true)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient buffer of `id`, present after backward for leaves that
    /// required one.
    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            grad: None,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn push_op(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires = inputs.iter().any(|id| self.nodes[id.0].requires_grad);
        self.push(op, value, requires)
    }

    fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    // ---- elementwise and reduction ops ----

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("add", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push_op(Op::Add(a, b), value, &[a, b]))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err("mul", self.shape(a), self.shape(b)));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let value = Tensor::from_vec(self.shape(a), data)?;
        Ok(self.push_op(Op::Mul(a, b), value, &[a, b]))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::from_vec(self.shape(a), data).expect("same shape");
        self.push_op(Op::Scale(a, factor), value, &[a])
    }

    /// Sum of all elements, as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        self.push_op(Op::Sum(a), Tensor::scalar(s), &[a])
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::from_vec(self.shape(a), data).expect("same shape");
        self.push_op(Op::Relu(a), value, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| sigmoid(x)).collect();
        let value = Tensor::from_vec(self.shape(a), data).expect("same shape");
        self.push_op(Op::Sigmoid(a), value, &[a])
    }

    /// Per-pixel softmax over the channel axis of a (K,H,W) tensor,
    /// computed with max-subtraction.
    pub fn softmax_channels(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(CoreError::Shape {
                op: "softmax_channels",
                detail: format!("want (K,H,W), got {:?}", t.shape()),
            });
        }
        let (k, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
        let value = Tensor::from_vec(t.shape(), softmax_channels(t.data(), k, h * w))?;
        Ok(self.push_op(Op::SoftmaxChannels(a), value, &[a]))
    }

    // ---- spatial ops ----

    /// Global average pooling: (C,H,W) -> (C,), each entry the spatial
    /// mean of its channel.
    pub fn gap(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(CoreError::Shape {
                op: "global_average_pool",
                detail: format!("want (C,H,W), got {:?}", t.shape()),
            });
        }
        let (c, plane) = (t.shape()[0], t.shape()[1] * t.shape()[2]);
        let mut out = Vec::with_capacity(c);
        for ch in 0..c {
            out.push(t.data()[ch * plane..(ch + 1) * plane].iter().sum::<f64>() / plane as f64);
        }
        let value = Tensor::from_vec(&[c], out)?;
        Ok(self.push_op(Op::Gap(a), value, &[a]))
    }

    /// Fully connected layer: y = W·x + b with W:(out,in), x:(in,), b:(out,).
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || bs.len() != 1 || ws[1] != xs[0] || ws[0] != bs[0] {
            return Err(CoreError::Shape {
                op: "linear",
                detail: format!("x {xs:?}, w {ws:?}, b {bs:?}"),
            });
        }
        let (n_out, n_in) = (ws[0], ws[1]);
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(n_out);
        for o in 0..n_out {
            let row = &wv[o * n_in..(o + 1) * n_in];
            let dot: f64 = row.iter().zip(xv).map(|(a, b)| a * b).sum();
            out.push(dot + bv[o]);
        }
        let value = Tensor::from_vec(&[n_out], out)?;
        Ok(self.push_op(Op::Linear { x, w, b }, value, &[x, w, b]))
    }

    /// 2D convolution with zero padding.
    ///
    /// x:(Cin,H,W), w:(Cout,Cin,kh,kw), b:(Cout,); output spatial size is
    /// floor((H+2·pad−kh)/stride)+1 and analogously for width.
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let bad = |detail: alloc::string::String| CoreError::Shape { op: "conv2d", detail };
        if xs.len() != 3 || ws.len() != 4 || bs.len() != 1 {
            return Err(bad(format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (cin, h, wd) = (xs[0], xs[1], xs[2]);
        let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wcin != cin || bs[0] != cout {
            return Err(bad(format!("x {xs:?} incompatible with w {ws:?}, b {bs:?}")));
        }
        if stride == 0 {
            return Err(bad(format!("stride must be >= 1, got {stride}")));
        }
        if kh > h + 2 * pad || kw > wd + 2 * pad {
            return Err(bad(format!(
                "kernel ({kh},{kw}) larger than padded input ({},{})",
                h + 2 * pad,
                wd + 2 * pad
            )));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let y = conv2d_forward(
            self.value(x).data(),
            (cin, h, wd),
            self.value(w).data(),
            (cout, kh, kw),
            self.value(b).data(),
            stride,
            pad,
            (oh, ow),
        );
        let value = Tensor::from_vec(&[cout, oh, ow], y)?;
        Ok(self.push_op(Op::Conv2d { x, w, b, stride, pad }, value, &[x, w, b]))
    }

    /// Bilinear upsampling of a (C,h,w) tensor to (C,out_h,out_w) under
    /// the align-corners convention. Degenerate h==1 or w==1 axes are
    /// replicated.
    pub fn bilinear_upsample(&mut self, x: NodeId, out_h: usize, out_w: usize) -> Result<NodeId> {
        let xs = self.shape(x);
        if xs.len() != 3 {
            return Err(CoreError::Shape {
                op: "bilinear_upsample",
                detail: format!("want (C,h,w), got {xs:?}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        if out_h < h || out_w < w || out_h == 0 || out_w == 0 {
            return Err(CoreError::Shape {
                op: "bilinear_upsample",
                detail: format!("({h},{w}) -> ({out_h},{out_w}) is not an upsample"),
            });
        }
        let y = bilinear_upsample_values(self.value(x).data(), c, h, w, out_h, out_w);
        let value = Tensor::from_vec(&[c, out_h, out_w], y)?;
        Ok(self.push_op(Op::BilinearUpsample(x), value, &[x]))
    }

    // ---- losses ----

    /// Mean over classes of the squared sigmoid error:
    /// (1/C)·Σ_c (sigmoid(z_c) − y_c)².
    pub fn squared_label_loss(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let zs = self.shape(logits);
        if zs.len() != 1 || zs[0] != targets.len() {
            return Err(CoreError::Shape {
                op: "squared_label_loss",
                detail: format!("logits {zs:?} vs {} targets", targets.len()),
            });
        }
        let c = targets.len();
        let loss = self
            .value(logits)
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| {
                let d = sigmoid(z) - y;
                d * d
            })
            .sum::<f64>()
            / c as f64;
        let op = Op::SquaredLabelLoss {
            logits,
            targets: targets.to_vec(),
        };
        Ok(self.push_op(op, Tensor::scalar(loss), &[logits]))
    }

    /// Ignore-aware cross-entropy over per-pixel probabilities.
    ///
    /// `scores` is a (K,H,W) tensor of probabilities (already softmaxed);
    /// `labels` has H·W entries in {0..K−1} ∪ {IGNORE}. The loss is
    /// −(1/N)·Σ log max(p[label_u, u], ε) over the N labeled pixels; a
    /// mask with no labeled pixel yields an exact 0 with no gradient.
    pub fn masked_cross_entropy(&mut self, scores: NodeId, labels: &[u8]) -> Result<NodeId> {
        let ss = self.shape(scores);
        if ss.len() != 3 || ss[1] * ss[2] != labels.len() {
            return Err(CoreError::Shape {
                op: "masked_cross_entropy",
                detail: format!("scores {ss:?} vs {} labels", labels.len()),
            });
        }
        let k = ss[0];
        if let Some(&l) = labels.iter().find(|&&l| l != IGNORE && l as usize >= k) {
            return Err(CoreError::Shape {
                op: "masked_cross_entropy",
                detail: format!("label {l} out of range for {k} classes"),
            });
        }
        let plane = labels.len();
        let data = self.value(scores).data();
        let mut labeled = 0usize;
        let mut acc = 0.0;
        for (u, &l) in labels.iter().enumerate() {
            if l == IGNORE {
                continue;
            }
            labeled += 1;
            acc -= libm::log(data[l as usize * plane + u].max(PROB_EPS));
        }
        let loss = if labeled == 0 { 0.0 } else { acc / labeled as f64 };
        let op = Op::MaskedCrossEntropy {
            scores,
            labels: labels.to_vec(),
            labeled,
        };
        Ok(self.push_op(op, Tensor::scalar(loss), &[scores]))
    }

    // ---- backward ----

    /// Reverse-mode sweep seeding ∂loss/∂loss = 1.
    ///
    /// After this call, [`Graph::grad`] yields ∂loss/∂leaf for every
    /// parameter leaf; intermediate gradients are discarded.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(CoreError::Usage {
                detail: "backward on a graph with no recorded forward pass".into(),
            });
        }
        if self.backward_done {
            return Err(CoreError::Usage {
                detail: "backward called twice on one graph".into(),
            });
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(CoreError::Usage {
                detail: format!(
                    "backward needs a scalar loss, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            });
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.backward_op(i, &g);
            for (target, contribution) in contributions {
                self.accumulate(target, contribution);
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, id: NodeId, contribution: Vec<f64>) {
        match &mut self.nodes[id.0].grad {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(&contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn val(&self, id: NodeId) -> &[f64] {
        self.nodes[id.0].value.data()
    }

    /// Gradient contributions of node `i` to its inputs, given the
    /// output gradient `g`. Inputs that do not require a gradient are
    /// skipped entirely.
    fn backward_op(&self, i: usize, g: &[f64]) -> Vec<(NodeId, Vec<f64>)> {
        let mut out = Vec::new();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.to_vec()));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, zip_map(g, self.val(*b), |gv, bv| gv * bv)));
                }
                if self.needs(*b) {
                    out.push((*b, zip_map(g, self.val(*a), |gv, av| gv * av)));
                }
            }
            Op::Scale(a, k) => {
                if self.needs(*a) {
                    out.push((*a, g.iter().map(|gv| gv * k).collect()));
                }
            }
            Op::Sum(a) => {
                if self.needs(*a) {
                    out.push((*a, vec![g[0]; self.val(*a).len()]));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let dx = zip_map(g, self.val(*a), |gv, x| if x > 0.0 { gv } else { 0.0 });
                    out.push((*a, dx));
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(*a) {
                    let y = self.nodes[i].value.data();
                    out.push((*a, zip_map(g, y, |gv, s| gv * s * (1.0 - s))));
                }
            }
            Op::SoftmaxChannels(a) => {
                if self.needs(*a) {
                    let p = self.nodes[i].value.data();
                    let shape = self.nodes[i].value.shape();
                    let (k, plane) = (shape[0], shape[1] * shape[2]);
                    let mut dx = vec![0.0; p.len()];
                    for u in 0..plane {
                        let mut dot = 0.0;
                        for c in 0..k {
                            dot += g[c * plane + u] * p[c * plane + u];
                        }
                        for c in 0..k {
                            let idx = c * plane + u;
                            dx[idx] = p[idx] * (g[idx] - dot);
                        }
                    }
                    out.push((*a, dx));
                }
            }
            Op::Gap(a) => {
                if self.needs(*a) {
                    let shape = self.nodes[a.0].value.shape();
                    let plane = shape[1] * shape[2];
                    let mut dx = Vec::with_capacity(shape[0] * plane);
                    for c in 0..shape[0] {
                        let per = g[c] / plane as f64;
                        dx.extend(core::iter::repeat(per).take(plane));
                    }
                    out.push((*a, dx));
                }
            }
            Op::Linear { x, w, b } => {
                let (n_out, n_in) = {
                    let ws = self.nodes[w.0].value.shape();
                    (ws[0], ws[1])
                };
                let (xv, wv) = (self.val(*x), self.val(*w));
                if self.needs(*x) {
                    let mut dx = vec![0.0; n_in];
                    for o in 0..n_out {
                        let row = &wv[o * n_in..(o + 1) * n_in];
                        for (d, wr) in dx.iter_mut().zip(row) {
                            *d += g[o] * wr;
                        }
                    }
                    out.push((*x, dx));
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; n_out * n_in];
                    for o in 0..n_out {
                        let row = &mut dw[o * n_in..(o + 1) * n_in];
                        for (d, xv) in row.iter_mut().zip(xv) {
                            *d = g[o] * xv;
                        }
                    }
                    out.push((*w, dw));
                }
                if self.needs(*b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let xs: Vec<usize> = self.nodes[x.0].value.shape().to_vec();
                let ws: Vec<usize> = self.nodes[w.0].value.shape().to_vec();
                let os: Vec<usize> = self.nodes[i].value.shape().to_vec();
                let geom = ConvGeom {
                    cin: xs[0],
                    h: xs[1],
                    w: xs[2],
                    cout: ws[0],
                    kh: ws[2],
                    kw: ws[3],
                    stride: *stride,
                    pad: *pad,
                    oh: os[1],
                    ow: os[2],
                };
                if self.needs(*x) {
                    out.push((*x, conv2d_backward_input(g, self.val(*w), &geom)));
                }
                if self.needs(*w) {
                    out.push((*w, conv2d_backward_weight(g, self.val(*x), &geom)));
                }
                if self.needs(*b) {
                    let plane = geom.oh * geom.ow;
                    let db = (0..geom.cout)
                        .map(|o| g[o * plane..(o + 1) * plane].iter().sum())
                        .collect();
                    out.push((*b, db));
                }
            }
            Op::BilinearUpsample(a) => {
                if self.needs(*a) {
                    let xs = self.nodes[a.0].value.shape();
                    let os = self.nodes[i].value.shape();
                    let dx =
                        bilinear_upsample_backward(g, xs[0], xs[1], xs[2], os[1], os[2]);
                    out.push((*a, dx));
                }
            }
            Op::SquaredLabelLoss { logits, targets } => {
                if self.needs(*logits) {
                    let c = targets.len() as f64;
                    let dz = zip_map(self.val(*logits), targets, |z, y| {
                        let s = sigmoid(z);
                        g[0] * (2.0 / c) * (s - y) * s * (1.0 - s)
                    });
                    out.push((*logits, dz));
                }
            }
            Op::MaskedCrossEntropy {
                scores,
                labels,
                labeled,
            } => {
                if self.needs(*scores) && *labeled > 0 {
                    let p = self.val(*scores);
                    let plane = labels.len();
                    let mut dp = vec![0.0; p.len()];
                    let inv = g[0] / *labeled as f64;
                    for (u, &l) in labels.iter().enumerate() {
                        if l == IGNORE {
                            continue;
                        }
                        let idx = l as usize * plane + u;
                        if p[idx] > PROB_EPS {
                            dp[idx] = -inv / p[idx];
                        }
                    }
                    out.push((*scores, dp));
                }
            }
        }
        out
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> CoreError {
    CoreError::Shape {
        op,
        detail: format!("operands {a:?} vs {b:?}"),
    }
}

pub(crate) fn softmax_channels(data: &[f64], k: usize, plane: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for u in 0..plane {
        let mut m = f64::NEG_INFINITY;
        for c in 0..k {
            m = m.max(data[c * plane + u]);
        }
        let mut total = 0.0;
        for c in 0..k {
            let e = libm::exp(data[c * plane + u] - m);
            out[c * plane + u] = e;
            total += e;
        }
        for c in 0..k {
            out[c * plane + u] /= total;
        }
    }
    out
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// Output-column range [lo,hi) whose input column j·stride+kx−pad is
    /// in bounds, for a fixed kernel column kx.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = if self.pad > kx {
            (self.pad - kx).div_ceil(self.stride)
        } else {
            0
        };
        let hi_num = self.w as isize - 1 - kx as isize + self.pad as isize;
        if hi_num < 0 {
            return (0, 0);
        }
        let hi = (hi_num as usize / self.stride + 1).min(self.ow);
        (lo, hi.max(lo))
    }

    /// Input row index for output row i and kernel row ky, if in bounds.
    fn row(&self, i: usize, ky: usize) -> Option<usize> {
        let xi = (i * self.stride + ky) as isize - self.pad as isize;
        (xi >= 0 && xi < self.h as isize).then_some(xi as usize)
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_forward(
    x: &[f64],
    (cin, h, w): (usize, usize, usize),
    wt: &[f64],
    (cout, kh, kw): (usize, usize, usize),
    bias: &[f64],
    stride: usize,
    pad: usize,
    (oh, ow): (usize, usize),
) -> Vec<f64> {
    let geom = ConvGeom {
        cin,
        h,
        w,
        cout,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    let mut y = vec![0.0; cout * oh * ow];
    for o in 0..cout {
        let yo = &mut y[o * oh * ow..(o + 1) * oh * ow];
        yo.fill(bias[o]);
        for c in 0..cin {
            let xc = &x[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = wt[((o * cin + c) * kh + ky) * kw + kx];
                    let (jlo, jhi) = geom.col_range(kx);
                    for i in 0..oh {
                        let Some(xi) = geom.row(i, ky) else { continue };
                        let xrow = &xc[xi * w..(xi + 1) * w];
                        let yrow = &mut yo[i * ow..(i + 1) * ow];
                        if stride == 1 {
                            let off = kx as isize - pad as isize;
                            for j in jlo..jhi {
                                yrow[j] += wv * xrow[(j as isize + off) as usize];
                            }
                        } else {
                            for j in jlo..jhi {
                                yrow[j] += wv * xrow[j * stride + kx - pad];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

fn conv2d_backward_input(g: &[f64], wt: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut dx = vec![0.0; geom.cin * geom.h * geom.w];
    for o in 0..geom.cout {
        let go = &g[o * geom.oh * geom.ow..(o + 1) * geom.oh * geom.ow];
        for c in 0..geom.cin {
            let dxc = &mut dx[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let wv = wt[((o * geom.cin + c) * geom.kh + ky) * geom.kw + kx];
                    let (jlo, jhi) = geom.col_range(kx);
                    for i in 0..geom.oh {
                        let Some(xi) = geom.row(i, ky) else { continue };
                        let grow = &go[i * geom.ow..(i + 1) * geom.ow];
                        let dxrow = &mut dxc[xi * geom.w..(xi + 1) * geom.w];
                        for j in jlo..jhi {
                            dxrow[j * geom.stride + kx - geom.pad] += wv * grow[j];
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv2d_backward_weight(g: &[f64], x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let mut dw = vec![0.0; geom.cout * geom.cin * geom.kh * geom.kw];
    for o in 0..geom.cout {
        let go = &g[o * geom.oh * geom.ow..(o + 1) * geom.oh * geom.ow];
        for c in 0..geom.cin {
            let xc = &x[c * geom.h * geom.w..(c + 1) * geom.h * geom.w];
            for ky in 0..geom.kh {
                for kx in 0..geom.kw {
                    let (jlo, jhi) = geom.col_range(kx);
                    let mut acc = 0.0;
                    for i in 0..geom.oh {
                        let Some(xi) = geom.row(i, ky) else { continue };
                        let grow = &go[i * geom.ow..(i + 1) * geom.ow];
                        let xrow = &xc[xi * geom.w..(xi + 1) * geom.w];
                        for j in jlo..jhi {
                            acc += grow[j] * xrow[j * geom.stride + kx - geom.pad];
                        }
                    }
                    dw[((o * geom.cin + c) * geom.kh + ky) * geom.kw + kx] = acc;
                }
            }
        }
    }
    dw
}

/// Axis sampling for align-corners interpolation: source indices and the
/// fractional weight of the upper neighbour.
fn axis_samples(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    (0..dst_len)
        .map(|i| {
            if dst_len == 1 || src_len == 1 {
                return (0, 0, 0.0);
            }
            // Exact at the corners: the integer product is formed first.
            let pos = (i * (src_len - 1)) as f64 / (dst_len - 1) as f64;
            let lo = (pos as usize).min(src_len - 1);
            let hi = (lo + 1).min(src_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

pub(crate) fn bilinear_upsample_values(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let rows = axis_samples(h, oh);
    let cols = axis_samples(w, ow);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let xc = &x[ch * h * w..(ch + 1) * h * w];
        let yc = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                let top = xc[y0 * w + x0] * (1.0 - wx) + xc[y0 * w + x1] * wx;
                let bot = xc[y1 * w + x0] * (1.0 - wx) + xc[y1 * w + x1] * wx;
                yc[i * ow + j] = top * (1.0 - wy) + bot * wy;
            }
        }
    }
    y
}

fn bilinear_upsample_backward(
    g: &[f64],
    c: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let rows = axis_samples(h, oh);
    let cols = axis_samples(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let gc = &g[ch * oh * ow..(ch + 1) * oh * ow];
        let dxc = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, wy)) in rows.iter().enumerate() {
            for (j, &(x0, x1, wx)) in cols.iter().enumerate() {
                let gv = gc[i * ow + j];
                dxc[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                dxc[y0 * w + x1] += gv * (1.0 - wy) * wx;
                dxc[y1 * w + x0] += gv * wy * (1.0 - wx);
                dxc[y1 * w + x1] += gv * wy * wx;
            }
        }
    }
    dx
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn identity_loss_gradient_is_one() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(3.0));
        g.backward(x).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0]);
    }

    #[test]
    fn sum_of_params_gradient_is_all_ones() {
        let mut g = Graph::new();
        let p = g.param(&Tensor::from_vec(&[4], vec![1.0, -2.0, 0.5, 7.0]).unwrap());
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(p).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn backward_twice_is_a_usage_error() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::scalar(1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(CoreError::Usage { .. })));
    }

    #[test]
    fn backward_without_forward_is_a_usage_error() {
        let mut g = Graph::new();
        assert!(matches!(
            g.backward(NodeId(0)),
            Err(CoreError::Usage { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(&Tensor::zeros(&[3]));
        assert!(matches!(g.backward(x), Err(CoreError::Usage { .. })));
    }

    #[test]
    fn conv2d_identity_kernel() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 3, 3], (1..=9).map(f64::from).collect()).unwrap());
        let w = g.input(Tensor::from_vec(&[1, 1, 1, 1], vec![1.0]).unwrap());
        let b = g.input(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn conv2d_zero_kernel_yields_bias() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[2, 3, 3], vec![0.7; 18]).unwrap());
        let w = g.input(Tensor::zeros(&[1, 2, 3, 3]));
        let b = g.input(Tensor::from_vec(&[1], vec![-1.25]).unwrap());
        let y = g.conv2d(x, w, b, 1, 1).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == -1.25));
    }

    #[test]
    fn conv2d_shape_errors_name_shapes() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 4, 4]));
        let w = g.input(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.input(Tensor::zeros(&[1]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err();
        let msg = alloc::format!("{err}");
        assert!(msg.contains("conv2d") && msg.contains('3'), "{msg}");
    }

    #[test]
    fn gap_means_channels() {
        let mut g = Graph::new();
        let x = g
            .input(Tensor::from_vec(&[2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 3.5, 3.5, 3.5, 3.5]).unwrap());
        let y = g.gap(x).unwrap();
        assert_eq!(g.value(y).data(), &[2.5, 3.5]);
    }

    #[test]
    fn upsample_constant_plane_stays_constant() {
        let mut g = Graph::new();
        let x = g.input(Tensor::filled(&[1, 2, 2], 0.4));
        let y = g.bilinear_upsample(x, 7, 5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.4));
    }

    #[test]
    fn upsample_midpoint_row() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let y = g.bilinear_upsample(x, 3, 3).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[3..6], &[0.5, 0.5, 0.5]);
        // corners exact
        assert_eq!(v[0], 0.0);
        assert_eq!(v[8], 1.0);
    }

    #[test]
    fn upsample_replicates_degenerate_axis() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2], vec![1.0, 3.0]).unwrap());
        let y = g.bilinear_upsample(x, 3, 3).unwrap();
        let v = g.value(y).data();
        assert_eq!(&v[0..3], &v[3..6]);
        assert_eq!(&v[0..3], &v[6..9]);
        assert_eq!(v[0], 1.0);
        assert_eq!(v[2], 3.0);
    }

    #[test]
    fn softmax_channels_sums_to_one() {
        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[3, 1, 2], vec![1.0, -2.0, 0.0, 3.0, 800.0, -5.0]).unwrap());
        let y = g.softmax_channels(x).unwrap();
        let v = g.value(y).data();
        for u in 0..2 {
            let s: f64 = (0..3).map(|c| v[c * 2 + u]).sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        // max-subtraction keeps the huge logit finite
        assert!(v.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn squared_label_loss_half_case() {
        // all logits 0 => sigmoid 0.5; single positive among C=4
        let mut g = Graph::new();
        let z = g.input(Tensor::zeros(&[4]));
        let l = g
            .squared_label_loss(z, &[1.0, 0.0, 0.0, 0.0])
            .unwrap();
        assert!((g.value(l).item() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn masked_cross_entropy_uniform_and_empty() {
        let mut g = Graph::new();
        let s = g.input(Tensor::filled(&[4, 2, 2], 0.25));
        let labels = vec![0u8, 1, 2, 3];
        let l = g.masked_cross_entropy(s, &labels).unwrap();
        assert!((g.value(l).item() - libm::log(4.0)).abs() < 1e-12);

        let mut g2 = Graph::new();
        let s2 = g2.input(Tensor::filled(&[4, 2, 2], 0.25));
        let l2 = g2.masked_cross_entropy(s2, &[IGNORE; 4]).unwrap();
        assert_eq!(g2.value(l2).item(), 0.0);
    }

    #[test]
    fn mul_routes_gradients_to_both_factors() {
        let mut g = Graph::new();
        let a = g.param(&Tensor::from_vec(&[2], vec![2.0, 3.0]).unwrap());
        let b = g.param(&Tensor::from_vec(&[2], vec![5.0, 7.0]).unwrap());
        let m = g.mul(a, b).unwrap();
        let s = g.sum(m);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap(), &[5.0, 7.0]);
        assert_eq!(g.grad(b).unwrap(), &[2.0, 3.0]);
    }
}
