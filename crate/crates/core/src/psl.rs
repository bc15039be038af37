//! Online prohibitive segmentation learning.
//!
//! The segmentation network trains on mined masks `S` plus a second,
//! self-generated target `Ŝ` that is rebuilt from the network's own
//! current predictions on every visit of every image. `Ŝ` at a pixel is
//! the argmax over classes of the score weighted by the classification
//! head's confidence `v` (background is pinned at weight 1), so classes
//! the classifier disbelieves are prohibited from entering the target.
//! At inference the same weighting is applied with small confidences
//! zeroed out.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImageSet, LabelSet};
use crate::error::{CoreError, Result};
use crate::graph::Graph;
use crate::mask::{SegMask, IGNORE};
use crate::models::{accumulate_grads, zero_grads, SegModel, Sgd, Topology, TrainConfig};
use crate::tensor::Tensor;

/// Where the class-confidence vector `v` comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightSource {
    /// No auxiliary target at all: train on `S` only, classification
    /// head untouched (the baseline).
    None,
    /// `v` = sigmoid of the network's own classification head.
    Predicted,
    /// `v` = 1 for image-level labels, 0 otherwise (the oracle bound).
    GroundTruth,
}

/// Segmentation training configuration.
#[derive(Debug, Clone)]
pub struct PslConfig {
    pub train: TrainConfig,
    pub init_seed: u64,
    /// Hidden channels of the segmentation head.
    pub seg_hidden: usize,
    pub weight_source: WeightSource,
    /// Weight of the auxiliary `Ŝ` cross-entropy term.
    pub aux_weight: f64,
    /// Confidences below this are zeroed at inference.
    pub prohibit_p: f64,
}

impl Default for PslConfig {
    fn default() -> Self {
        PslConfig {
            train: TrainConfig::default(),
            init_seed: 42,
            seg_hidden: 24,
            weight_source: WeightSource::Predicted,
            aux_weight: 1.0,
            prohibit_p: 0.1,
        }
    }
}

/// Per-run record of segmentation training.
#[derive(Debug, Clone, Default)]
pub struct PslTrainLog {
    /// Mean per-image total loss of each epoch.
    pub epoch_losses: Vec<f64>,
    /// How many (image, epoch) visits found a supervision mask with no
    /// labeled pixel and therefore contributed no mask loss.
    pub empty_mask_skips: usize,
}

/// Per-pixel argmax over `weights[c] * scores[c]` with one weight per
/// score channel. Ties resolve to the smaller index, so background wins
/// an all-zero pixel.
pub fn weighted_argmax_mask(scores: &Tensor, weights: &[f64]) -> Result<SegMask> {
    let s = scores.shape();
    if s.len() != 3 || s[0] != weights.len() {
        return Err(CoreError::Shape {
            op: "weighted_argmax_mask",
            detail: alloc::format!("scores {s:?} vs {} weights", weights.len()),
        });
    }
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let data = scores.data();
    let mut labels = Vec::with_capacity(plane);
    for u in 0..plane {
        let mut best = 0usize;
        let mut best_val = weights[0] * data[u];
        for c in 1..k {
            let val = weights[c] * data[c * plane + u];
            if val > best_val {
                best = c;
                best_val = val;
            }
        }
        labels.push(best as u8);
    }
    Ok(SegMask::from_labels(h, w, labels).expect("sized above"))
}

/// Confidence-weighted argmax target: per pixel, argmax over the
/// augmented weights [1, v₁..v_C] times the (C+1)-channel scores.
pub fn weighted_auxiliary_mask(scores: &Tensor, v: &[f64]) -> Result<SegMask> {
    let s = scores.shape();
    if s.len() != 3 || s[0] != v.len() + 1 {
        return Err(CoreError::Shape {
            op: "weighted_auxiliary_mask",
            detail: alloc::format!("scores {s:?} vs {} confidences", v.len()),
        });
    }
    let mut weights = Vec::with_capacity(v.len() + 1);
    weights.push(1.0);
    weights.extend_from_slice(v);
    weighted_argmax_mask(scores, &weights)
}

/// Replaces object labels of classes absent from `labels` with IGNORE.
/// Background pixels are kept.
pub fn restrict_to_image_labels(mask: &mut SegMask, labels: LabelSet) {
    for l in mask.labels_mut() {
        if *l != 0 && *l != IGNORE && !labels.contains(*l - 1) {
            *l = IGNORE;
        }
    }
}

/// Plain per-pixel argmax over the score channels.
pub fn argmax_inference(scores: &Tensor) -> SegMask {
    let s = scores.shape();
    let (k, h, w) = (s[0], s[1], s[2]);
    let plane = h * w;
    let data = scores.data();
    let mut labels = Vec::with_capacity(plane);
    for u in 0..plane {
        let mut best = 0usize;
        for c in 1..k {
            if data[c * plane + u] > data[best * plane + u] {
                best = c;
            }
        }
        labels.push(best as u8);
    }
    SegMask::from_labels(h, w, labels).expect("consistent")
}

/// Prohibitive inference: confidences below `p` are zeroed, then the
/// weighted argmax of [`weighted_auxiliary_mask`] decides each pixel.
pub fn prohibitive_inference(model: &SegModel, image: &Tensor, p: f64) -> Result<SegMask> {
    let (scores, mut v) = model.infer(image)?;
    for x in &mut v {
        if *x < p {
            *x = 0.0;
        }
    }
    weighted_auxiliary_mask(&scores, &v)
}

/// Trains a fresh [`SegModel`] on `set` with supervision masks `masks`
/// (parallel to `set.samples`). The auxiliary target is recomputed from
/// the live network on every image visit.
pub fn train_psl(
    set: &ImageSet,
    masks: &[SegMask],
    topology: &Topology,
    cfg: &PslConfig,
) -> Result<(SegModel, PslTrainLog)> {
    if masks.len() != set.len() {
        return Err(CoreError::Config {
            detail: alloc::format!(
                "{} supervision masks for {} samples",
                masks.len(),
                set.len()
            ),
        });
    }
    if set.is_empty() {
        return Err(CoreError::Config {
            detail: "cannot train on an empty image set".into(),
        });
    }
    for (i, (m, s)) in masks.iter().zip(&set.samples).enumerate() {
        if (m.h(), m.w()) != (s.image.h(), s.image.w()) {
            return Err(CoreError::Shape {
                op: "train_psl",
                detail: alloc::format!("mask {i} is {}x{}", m.h(), m.w()),
            });
        }
    }

    let c = topology.num_classes;
    let mut model = SegModel::init(topology.clone(), cfg.seg_hidden, cfg.init_seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let mut sgd = Sgd::new(&model.params, cfg.train.lr, cfg.train.momentum);
    let mut log = PslTrainLog::default();
    let mut order: Vec<usize> = (0..set.len()).collect();
    let with_cls = cfg.weight_source != WeightSource::None;

    for epoch in 0..cfg.train.epochs {
        if epoch == cfg.train.lr_decay_epoch {
            sgd.lr *= cfg.train.lr_decay_factor;
        }
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.train.batch_size.max(1)) {
            let mut grads = zero_grads(&model.params);
            let scale = 1.0 / batch.len() as f64;
            for &si in batch {
                let sample = &set.samples[si];
                if masks[si].labeled_fraction() == 0.0 {
                    log.empty_mask_skips += 1;
                }
                let mut g = Graph::new();
                let ids = model.register(&mut g);
                let x = g.input(sample.image.to_tensor());
                let fwd = model.forward(&mut g, &ids, x, with_cls)?;
                let mask_loss = g.masked_cross_entropy(fwd.scores, masks[si].labels())?;

                let total = if with_cls {
                    let cls_logits = fwd.cls_logits.expect("requested");
                    let targets = sample.labels.to_targets(c);
                    let label_loss = g.squared_label_loss(cls_logits, &targets)?;
                    // v is read as a constant: the auxiliary target is a
                    // hard label map, not a differentiable weighting.
                    let v: Vec<f64> = match cfg.weight_source {
                        WeightSource::Predicted => g
                            .value(cls_logits)
                            .data()
                            .iter()
                            .map(|&z| crate::graph::sigmoid(z))
                            .collect(),
                        WeightSource::GroundTruth => targets.clone(),
                        WeightSource::None => unreachable!(),
                    };
                    let mut aux = weighted_auxiliary_mask(g.value(fwd.scores), &v)?;
                    restrict_to_image_labels(&mut aux, sample.labels);
                    let aux_loss = g.masked_cross_entropy(fwd.scores, aux.labels())?;
                    let sum = g.add(mask_loss, label_loss)?;
                    let weighted_aux = g.scale(aux_loss, cfg.aux_weight);
                    g.add(sum, weighted_aux)?
                } else {
                    mask_loss
                };

                let loss_value = g.value(total).item();
                if !loss_value.is_finite() {
                    return Err(CoreError::Diverged {
                        context: "segmentation training loss",
                        index: si,
                    });
                }
                epoch_loss += loss_value;
                g.backward(total)?;
                accumulate_grads(&mut grads, &g, &ids, scale);
            }
            sgd.step(&mut model.params, &grads);
        }
        log.epoch_losses.push(epoch_loss / set.len() as f64);
    }
    Ok((model, log))
}

/// Outcome of the extra self-training round.
#[derive(Debug)]
pub struct PslPlusPlusOutcome {
    /// Model and log of the first (ordinary) training round.
    pub first: (SegModel, PslTrainLog),
    /// Fully labeled masks predicted by the first model on the training
    /// split — the supervision for the second round.
    pub regenerated: Vec<SegMask>,
    /// Model and log of the retrained round.
    pub second: (SegModel, PslTrainLog),
}

/// Trains once, regenerates training masks by prohibitive inference
/// (full coverage, no IGNORE pixels), and trains a fresh model on them.
pub fn psl_plus_plus(
    set: &ImageSet,
    masks: &[SegMask],
    topology: &Topology,
    cfg: &PslConfig,
) -> Result<PslPlusPlusOutcome> {
    let first = train_psl(set, masks, topology, cfg)?;
    let regenerated: Vec<SegMask> = set
        .samples
        .iter()
        .map(|s| prohibitive_inference(&first.0, &s.image.to_tensor(), cfg.prohibit_p))
        .collect::<Result<_>>()?;
    let second = train_psl(set, &regenerated, topology, cfg)?;
    Ok(PslPlusPlusOutcome {
        first,
        regenerated,
        second,
    })
}
