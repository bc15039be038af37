//! Network definitions, initialization, and supervised training.
//!
//! Two models share one convolutional backbone shape:
//!
//! * [`ClassifierModel`] — backbone, global average pooling, one fully
//!   connected layer to image-label logits. Used for mining.
//! * [`SegModel`] — backbone plus two heads: a segmentation head giving
//!   per-pixel class scores (background + C classes, softmaxed at input
//!   resolution) and a classification head (pooling + FC) whose sigmoid
//!   outputs weight the segmentation scores during training.
//!
//! Parameters live in plain tensors ordered deterministically, so runs
//! with equal seeds are bit-identical.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::ImageSet;
use crate::error::{CoreError, Result};
use crate::graph::{Graph, NodeId};
use crate::tensor::Tensor;

/// One convolution layer of the backbone or a head.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvSpec {
    fn out_size(&self, h: usize, w: usize) -> Option<(usize, usize)> {
        let oh = (h + 2 * self.pad).checked_sub(self.kernel)? / self.stride + 1;
        let ow = (w + 2 * self.pad).checked_sub(self.kernel)? / self.stride + 1;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }
}

/// Backbone shape shared by both models.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Topology {
    pub input_channels: usize,
    pub convs: Vec<ConvSpec>,
    pub num_classes: usize,
}

impl Topology {
    /// Compact desk-scale backbone for 64×64 inputs: three 3×3 layers,
    /// two of them strided, ending at 1/4 resolution.
    pub fn desk(num_classes: usize) -> Self {
        let layer = |out_channels, stride| ConvSpec {
            out_channels,
            kernel: 3,
            stride,
            pad: 1,
        };
        Topology {
            input_channels: 3,
            convs: alloc::vec![layer(12, 2), layer(24, 2), layer(32, 1)],
            num_classes,
        }
    }

    /// Channel count of the final backbone feature map.
    pub fn feature_channels(&self) -> usize {
        self.convs
            .last()
            .map_or(self.input_channels, |c| c.out_channels)
    }

    /// Spatial size of the backbone output for an (h,w) input.
    pub fn feature_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let mut cur = (h, w);
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.out_size(cur.0, cur.1).ok_or_else(|| CoreError::Config {
                detail: format!(
                    "conv layer {i} ({conv:?}) collapses a {h}x{w} input to an empty map"
                ),
            })?;
        }
        Ok(cur)
    }
}

/// Draws from N(0,1) via Box–Muller.
fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * core::f64::consts::PI * u2)
}

/// Weight tensor drawn from N(0, 2/fan_in), the scaling that keeps
/// activations stable under ReLU.
fn he_weights<R: Rng + ?Sized>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    let std = libm::sqrt(2.0 / fan_in as f64);
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| standard_normal(rng) * std).collect();
    Tensor::from_vec(shape, data).expect("consistent shape")
}

fn conv_params<R: Rng + ?Sized>(rng: &mut R, cin: usize, spec: &ConvSpec) -> (Tensor, Tensor) {
    let k = spec.kernel;
    let w = he_weights(rng, &[spec.out_channels, cin, k, k], cin * k * k);
    (w, Tensor::zeros(&[spec.out_channels]))
}

fn backbone_params<R: Rng + ?Sized>(rng: &mut R, topology: &Topology) -> Vec<Tensor> {
    let mut params = Vec::new();
    let mut cin = topology.input_channels;
    for spec in &topology.convs {
        let (w, b) = conv_params(rng, cin, spec);
        params.push(w);
        params.push(b);
        cin = spec.out_channels;
    }
    params
}

/// Runs the backbone convolutions (each followed by ReLU) over `x`,
/// reading weights from `ids` in layer order. Inputs are centered
/// around mid-gray first, so pooled features respond to scene content
/// rather than overall brightness.
fn backbone_forward(
    g: &mut Graph,
    ids: &[NodeId],
    topology: &Topology,
    x: NodeId,
) -> Result<NodeId> {
    let shape = g.value(x).shape().to_vec();
    let offset = g.input(Tensor::filled(&shape, -0.5));
    let mut cur = g.add(x, offset)?;
    for (k, spec) in topology.convs.iter().enumerate() {
        cur = g.conv2d(cur, ids[2 * k], ids[2 * k + 1], spec.stride, spec.pad)?;
        cur = g.relu(cur);
    }
    Ok(cur)
}

// ---------------------------------------------------------------- classifier

/// Image-label classifier: backbone → global average pooling → FC.
#[derive(Debug, Clone)]
pub struct ClassifierModel {
    pub topology: Topology,
    /// Backbone (w,b) pairs in layer order, then FC weight and bias.
    pub params: Vec<Tensor>,
}

/// Node handles from one classifier forward pass.
pub struct ClassifierForward {
    /// Backbone feature map (F, fh, fw), after the final ReLU.
    pub features: NodeId,
    /// Image-label logits (C,).
    pub logits: NodeId,
}

impl ClassifierModel {
    /// Deterministic initialization from `seed`.
    pub fn init(topology: Topology, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = backbone_params(&mut rng, &topology);
        let f = topology.feature_channels();
        params.push(he_weights(&mut rng, &[topology.num_classes, f], f));
        params.push(Tensor::zeros(&[topology.num_classes]));
        ClassifierModel { topology, params }
    }

    pub fn fc_weight(&self) -> &Tensor {
        &self.params[self.params.len() - 2]
    }

    pub fn fc_bias(&self) -> &Tensor {
        &self.params[self.params.len() - 1]
    }

    /// Registers all parameters as graph leaves, in storage order.
    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        image: NodeId,
    ) -> Result<ClassifierForward> {
        let features = backbone_forward(g, ids, &self.topology, image)?;
        let pooled = g.gap(features)?;
        let n = ids.len();
        let logits = g.linear(pooled, ids[n - 2], ids[n - 1])?;
        Ok(ClassifierForward { features, logits })
    }

    /// Inference pass returning the feature map and logits as plain
    /// tensors.
    pub fn features_and_logits(&self, image: &Tensor) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|t| g.param(t)).collect();
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, &ids, x)?;
        Ok((g.value(fwd.features).clone(), g.value(fwd.logits).clone()))
    }
}

// ------------------------------------------------------------ seg model

/// Segmentation network with an auxiliary classification head.
#[derive(Debug, Clone)]
pub struct SegModel {
    pub topology: Topology,
    /// Hidden channels of the segmentation head.
    pub seg_hidden: usize,
    /// Backbone pairs, then seg-head conv pairs (3×3 then 1×1), then the
    /// classification FC pair.
    pub params: Vec<Tensor>,
}

/// Node handles from one seg-model forward pass.
pub struct SegForward {
    /// Softmaxed per-pixel scores (C+1, H, W) at input resolution;
    /// channel 0 is background.
    pub scores: NodeId,
    /// Image-label logits (C,), present when the classification head was
    /// requested.
    pub cls_logits: Option<NodeId>,
}

impl SegModel {
    pub fn init(topology: Topology, seg_hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = backbone_params(&mut rng, &topology);
        let f = topology.feature_channels();
        let head1 = ConvSpec {
            out_channels: seg_hidden,
            kernel: 3,
            stride: 1,
            pad: 1,
        };
        let head2 = ConvSpec {
            out_channels: topology.num_classes + 1,
            kernel: 1,
            stride: 1,
            pad: 0,
        };
        let (w, b) = conv_params(&mut rng, f, &head1);
        params.push(w);
        params.push(b);
        let (w, b) = conv_params(&mut rng, seg_hidden, &head2);
        params.push(w);
        params.push(b);
        params.push(he_weights(&mut rng, &[topology.num_classes, f], f));
        params.push(Tensor::zeros(&[topology.num_classes]));
        SegModel {
            topology,
            seg_hidden,
            params,
        }
    }

    pub fn register(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|t| g.param(t)).collect()
    }

    /// Forward pass to (C+1,H,W) probabilities; builds the
    /// classification head only when `with_cls` is set.
    pub fn forward(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        image: NodeId,
        with_cls: bool,
    ) -> Result<SegForward> {
        let (h, w) = {
            let s = g.value(image).shape();
            (s[1], s[2])
        };
        let features = backbone_forward(g, ids, &self.topology, image)?;
        let nb = 2 * self.topology.convs.len();
        let hidden = g.conv2d(features, ids[nb], ids[nb + 1], 1, 1)?;
        let hidden = g.relu(hidden);
        let score_logits = g.conv2d(hidden, ids[nb + 2], ids[nb + 3], 1, 0)?;
        let up = g.bilinear_upsample(score_logits, h, w)?;
        let scores = g.softmax_channels(up)?;
        let cls_logits = if with_cls {
            let pooled = g.gap(features)?;
            let n = ids.len();
            Some(g.linear(pooled, ids[n - 2], ids[n - 1])?)
        } else {
            None
        };
        Ok(SegForward { scores, cls_logits })
    }

    /// Inference pass returning per-pixel probabilities (C+1,H,W) and
    /// the sigmoid of the classification logits (C,).
    pub fn infer(&self, image: &Tensor) -> Result<(Tensor, Vec<f64>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|t| g.param(t)).collect();
        let x = g.input(image.clone());
        let fwd = self.forward(&mut g, &ids, x, true)?;
        let scores = g.value(fwd.scores).clone();
        let v = g
            .value(fwd.cls_logits.expect("requested"))
            .data()
            .iter()
            .map(|&z| crate::graph::sigmoid(z))
            .collect();
        Ok((scores, v))
    }
}

// ---------------------------------------------------------------- optimizer

/// Stochastic gradient descent with classical momentum:
/// v ← μ·v + g, p ← p − lr·v.
#[derive(Debug)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl Sgd {
    pub fn new(params: &[Tensor], lr: f64, momentum: f64) -> Self {
        Sgd {
            lr,
            momentum,
            velocity: params.iter().map(|t| alloc::vec![0.0; t.len()]).collect(),
        }
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Vec<f64>]) {
        debug_assert_eq!(params.len(), grads.len());
        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv;
                *pv -= self.lr * *vv;
            }
        }
    }
}

/// Zeroed gradient accumulators shaped like `params`.
pub fn zero_grads(params: &[Tensor]) -> Vec<Vec<f64>> {
    params.iter().map(|t| alloc::vec![0.0; t.len()]).collect()
}

/// Adds each graph gradient (where present) into `acc`, scaled by `k`.
pub fn accumulate_grads(acc: &mut [Vec<f64>], g: &Graph, ids: &[NodeId], k: f64) {
    for (slot, &id) in acc.iter_mut().zip(ids) {
        if let Some(grad) = g.grad(id) {
            for (a, &gv) in slot.iter_mut().zip(grad) {
                *a += k * gv;
            }
        }
    }
}

// ---------------------------------------------------------------- training

/// Hyperparameters shared by classifier and segmentation training.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epoch (0-based) at which the learning rate is multiplied by
    /// `lr_decay_factor`; `usize::MAX` disables decay.
    pub lr_decay_epoch: usize,
    pub lr_decay_factor: f64,
    /// Arms the decay once an epoch's mean loss reaches this level, so
    /// runs that converge fast do not sit at a high learning rate long
    /// enough to destabilize. `0.0` disables the loss trigger.
    pub lr_decay_loss: f64,
    /// Epochs to keep the high learning rate after the loss trigger
    /// arms; this settling phase at high rate is what drives weights
    /// for uninformative features toward zero.
    pub decay_hold_epochs: usize,
    /// Train this many more epochs after the decay fires, then stop.
    /// `0` means run out the full `epochs` budget.
    pub post_decay_epochs: usize,
    /// Seed for shuffling and augmentation draws.
    pub seed: u64,
    /// Mirror images horizontally with probability 1/2 during training.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.25,
            momentum: 0.9,
            batch_size: 8,
            epochs: 48,
            lr_decay_epoch: 40,
            lr_decay_factor: 0.1,
            lr_decay_loss: 0.12,
            decay_hold_epochs: 18,
            post_decay_epochs: 8,
            seed: 42,
            hflip: false,
        }
    }
}

/// Per-epoch record of one training run.
#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    /// Mean per-image loss of each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainLog {
    /// Loss level the run settled at: mean of the last three (or fewer)
    /// epoch losses.
    pub fn converged_loss(&self) -> f64 {
        let n = self.epoch_losses.len().min(3);
        if n == 0 {
            return f64::NAN;
        }
        let tail = &self.epoch_losses[self.epoch_losses.len() - n..];
        tail.iter().sum::<f64>() / n as f64
    }
}

/// Trains the classifier on image-level labels with the squared sigmoid
/// label loss. Deterministic for a fixed config and dataset.
pub fn train_classifier(
    model: &mut ClassifierModel,
    set: &ImageSet,
    cfg: &TrainConfig,
) -> Result<TrainLog> {
    if set.is_empty() {
        return Err(CoreError::Config {
            detail: "cannot train on an empty image set".into(),
        });
    }
    let c = model.topology.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut sgd = Sgd::new(&model.params, cfg.lr, cfg.momentum);
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..set.len()).collect();

    let mut decayed_at: Option<usize> = None;
    let mut armed_at: Option<usize> = None;
    for epoch in 0..cfg.epochs {
        if decayed_at.is_none() {
            if armed_at.is_none()
                && cfg.lr_decay_loss > 0.0
                && log
                    .epoch_losses
                    .last()
                    .is_some_and(|&l| l <= cfg.lr_decay_loss)
            {
                armed_at = Some(epoch);
            }
            let armed_due = armed_at.is_some_and(|a| epoch >= a + cfg.decay_hold_epochs);
            if epoch >= cfg.lr_decay_epoch || armed_due {
                sgd.lr *= cfg.lr_decay_factor;
                decayed_at = Some(epoch);
            }
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size.max(1)) {
            let mut grads = zero_grads(&model.params);
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let sample = &set.samples[si];
                let flip = cfg.hflip && rng.random::<f64>() < 0.5;
                let tensor = if flip {
                    sample.image.hflipped().to_tensor()
                } else {
                    sample.image.to_tensor()
                };
                let mut g = Graph::new();
                let ids = model.register(&mut g);
                let x = g.input(tensor);
                let fwd = model.forward(&mut g, &ids, x)?;
                let loss = g.squared_label_loss(fwd.logits, &sample.labels.to_targets(c))?;
                let loss_value = g.value(loss).item();
                if !loss_value.is_finite() {
                    return Err(CoreError::Diverged {
                        context: "classifier training loss",
                        index: si,
                    });
                }
                epoch_loss += loss_value;
                g.backward(loss)?;
                accumulate_grads(&mut grads, &g, &ids, scale);
            }
            sgd.step(&mut model.params, &grads);
        }
        log.epoch_losses.push(epoch_loss / set.len() as f64);
        if let Some(d) = decayed_at {
            if cfg.post_decay_epochs > 0 && epoch + 1 >= d + cfg.post_decay_epochs {
                break;
            }
        }
    }
    Ok(log)
}
