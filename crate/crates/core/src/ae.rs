//! Adversarial-erasing region mining.
//!
//! Each mining step retrains the classifier from the same initialization
//! on the current (progressively erased) images, extracts one region per
//! present class from that classifier's activation maps, merges the
//! regions into the per-image record, and erases them from the working
//! images by overwriting with the dataset mean pixel. Later classifiers
//! are thereby forced onto new evidence; the training loss they settle
//! at rises as that evidence runs out.

use alloc::vec::Vec;

use crate::cam::{compute_cam, extract_region, ThresholdMode};
use crate::dataset::ImageSet;
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::mask::RegionMask;
use crate::models::{train_classifier, ClassifierModel, Topology, TrainConfig};

/// Optional early-stop rule for degenerate steps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossGuard {
    /// Stop before merging any step whose converged loss exceeds this
    /// value.
    Absolute(f64),
    /// Stop before merging a later step whose converged loss exceeds
    /// `factor × (first step's converged loss)`; the first step is
    /// always accepted.
    FactorOfFirst(f64),
}

/// Mining configuration.
#[derive(Debug, Clone)]
pub struct AeConfig {
    /// Number of train-mine-erase rounds.
    pub steps: usize,
    /// Binarization of normalized activation maps.
    pub threshold: ThresholdMode,
    /// Classifier training schedule, reused identically at every step.
    pub train: TrainConfig,
    /// Every step reinitializes the classifier from this seed.
    pub init_seed: u64,
    /// Run one extra train+mine round after the last step without
    /// merging or erasing, to probe what the next step would find.
    pub probe_extra_step: bool,
    /// Early stop when a step no longer converges; off by default.
    pub loss_guard: Option<LossGuard>,
}

impl Default for AeConfig {
    fn default() -> Self {
        AeConfig {
            steps: 3,
            threshold: ThresholdMode::FractionOfMax(0.2),
            train: TrainConfig::default(),
            init_seed: 42,
            probe_extra_step: false,
            loss_guard: None,
        }
    }
}

/// True iff training converged: the mean of the last three (or fewer)
/// epoch losses is at or below `threshold`.
pub fn check_convergence(loss_history: &[f64], threshold: f64) -> bool {
    debug_assert!(!loss_history.is_empty());
    tail_mean(loss_history) <= threshold
}

/// Per-step mining record.
#[derive(Debug, Clone)]
pub struct AeStepStats {
    /// 1-based step number.
    pub step: usize,
    /// Mean per-image loss of each training epoch at this step.
    pub epoch_losses: Vec<f64>,
    /// Loss level the classifier settled at (tail mean).
    pub converged_loss: f64,
    /// Mean fraction of image pixels claimed by this step's regions.
    pub mined_fraction: f64,
    /// Mean fraction of pixels this step added to the cumulative record.
    pub new_fraction: f64,
    /// Mean cumulative erased fraction after this step's merge.
    pub merged_fraction: f64,
}

/// Callback invoked after every merged mining step, for streaming
/// artifacts (erased snapshots, step masks) out of the loop.
pub trait AeObserver {
    /// `working` is the image set after this step's erase;
    /// `step_regions[i][c]` is the region mined this step for image `i`,
    /// class `c`.
    fn after_step(&mut self, stats: &AeStepStats, working: &ImageSet, step_regions: &[Vec<RegionMask>]);
}

/// Observer that drops everything.
pub struct NullObserver;

impl AeObserver for NullObserver {
    fn after_step(&mut self, _: &AeStepStats, _: &ImageSet, _: &[Vec<RegionMask>]) {}
}

/// Full mining outcome.
#[derive(Debug, Clone)]
pub struct AeOutcome {
    /// `merged[i][c]`: union over all merged steps of class `c` regions
    /// for image `i`.
    pub merged: Vec<Vec<RegionMask>>,
    /// `per_step[t][i][c]`: what step `t+1` mined before merging.
    pub per_step: Vec<Vec<Vec<RegionMask>>>,
    /// One record per merged step.
    pub stats: Vec<AeStepStats>,
    /// Record of the optional probe round (trained and mined, never
    /// merged).
    pub probe: Option<AeStepStats>,
    /// Step at which the loss guard refused to merge, if it fired.
    pub guard_stop: Option<usize>,
    /// Images in their final erased state.
    pub erased_images: Vec<Image>,
}

impl AeOutcome {
    /// Union of the first `k` steps' regions, per image and class — the
    /// mining record an AE run stopped after `k` steps would have
    /// produced.
    pub fn prefix_union(&self, k: usize) -> Vec<Vec<RegionMask>> {
        let steps = &self.per_step[..k.min(self.per_step.len())];
        let mut out: Vec<Vec<RegionMask>> = match steps.first() {
            Some(first) => first.clone(),
            None => return Vec::new(),
        };
        for step in &steps[1..] {
            for (acc_img, step_img) in out.iter_mut().zip(step) {
                for (acc, r) in acc_img.iter_mut().zip(step_img) {
                    acc.union_with(r);
                }
            }
        }
        out
    }
}

/// Erases `region` from `img` by writing the dataset mean pixel.
pub fn erase_region(img: &mut Image, region: &RegionMask, mean_pixel: [f64; 3]) {
    for y in 0..img.h() {
        for x in 0..img.w() {
            if region.get(y, x) {
                img.set_pixel(y, x, mean_pixel);
            }
        }
    }
}

struct MinedStep {
    regions: Vec<Vec<RegionMask>>,
    mined_fraction: f64,
}

/// Trains a fresh classifier on `working` and mines one region per
/// image-level class from its activation maps.
fn train_and_mine(
    working: &ImageSet,
    topology: &Topology,
    cfg: &AeConfig,
    step: usize,
) -> Result<(MinedStep, Vec<f64>)> {
    let mut model = ClassifierModel::init(topology.clone(), cfg.init_seed);
    let log = train_classifier(&mut model, working, &cfg.train)?;

    let c = topology.num_classes;
    let mut regions = Vec::with_capacity(working.len());
    let mut mined_px = 0usize;
    let mut total_px = 0usize;
    for sample in &working.samples {
        let (h, w) = (sample.image.h(), sample.image.w());
        let (features, _) = model.features_and_logits(&sample.image.to_tensor())?;
        let mut per_class = Vec::with_capacity(c);
        let mut claimed = RegionMask::new(h, w);
        for class in 0..c as u8 {
            let region = if sample.labels.contains(class) {
                let cam = compute_cam(&features, model.fc_weight(), class as usize, h, w)?;
                extract_region(&cam, cfg.threshold)?
            } else {
                RegionMask::new(h, w)
            };
            claimed.union_with(&region);
            per_class.push(region);
        }
        mined_px += claimed.count();
        total_px += h * w;
        regions.push(per_class);
    }
    let mined = MinedStep {
        regions,
        mined_fraction: mined_px as f64 / total_px as f64,
    };
    let _ = step;
    Ok((mined, log.epoch_losses))
}

fn tail_mean(losses: &[f64]) -> f64 {
    let n = losses.len().min(3);
    losses[losses.len() - n..].iter().sum::<f64>() / n as f64
}

/// Runs the mining loop over the training split.
pub fn run_ae(
    set: &ImageSet,
    topology: &Topology,
    cfg: &AeConfig,
    observer: &mut dyn AeObserver,
) -> Result<AeOutcome> {
    if cfg.steps == 0 {
        return Err(CoreError::Config {
            detail: "mining needs at least one step".into(),
        });
    }
    if set.is_empty() {
        return Err(CoreError::Config {
            detail: "cannot mine an empty image set".into(),
        });
    }
    let c = topology.num_classes;
    let mut working = set.clone();
    let mut merged: Vec<Vec<RegionMask>> = set
        .samples
        .iter()
        .map(|s| alloc::vec![RegionMask::new(s.image.h(), s.image.w()); c])
        .collect();
    let mut erase_union: Vec<RegionMask> = set
        .samples
        .iter()
        .map(|s| RegionMask::new(s.image.h(), s.image.w()))
        .collect();

    let mut outcome = AeOutcome {
        merged: Vec::new(),
        per_step: Vec::new(),
        stats: Vec::new(),
        probe: None,
        guard_stop: None,
        erased_images: Vec::new(),
    };

    for step in 1..=cfg.steps {
        let (mined, epoch_losses) = train_and_mine(&working, topology, cfg, step)?;
        let converged = tail_mean(&epoch_losses);

        let guard_threshold = match cfg.loss_guard {
            Some(LossGuard::Absolute(t)) => Some(t),
            Some(LossGuard::FactorOfFirst(f)) if step > 1 => {
                Some(f * outcome.stats[0].converged_loss)
            }
            _ => None,
        };
        if let Some(threshold) = guard_threshold {
            if !check_convergence(&epoch_losses, threshold) {
                outcome.guard_stop = Some(step);
                break;
            }
        }

        // Merge and erase.
        let mut new_px = 0usize;
        let mut merged_px = 0usize;
        let mut total_px = 0usize;
        for (i, per_class) in mined.regions.iter().enumerate() {
            let before = erase_union[i].count();
            for (c, region) in per_class.iter().enumerate() {
                merged[i][c].union_with(region);
                erase_union[i].union_with(region);
                erase_region(
                    &mut working.samples[i].image,
                    region,
                    working.mean_pixel,
                );
            }
            new_px += erase_union[i].count() - before;
            merged_px += erase_union[i].count();
            total_px += erase_union[i].h() * erase_union[i].w();
        }

        let stats = AeStepStats {
            step,
            converged_loss: converged,
            epoch_losses,
            mined_fraction: mined.mined_fraction,
            new_fraction: new_px as f64 / total_px as f64,
            merged_fraction: merged_px as f64 / total_px as f64,
        };
        observer.after_step(&stats, &working, &mined.regions);
        outcome.stats.push(stats);
        outcome.per_step.push(mined.regions);
    }

    if cfg.probe_extra_step && outcome.guard_stop.is_none() {
        let step = cfg.steps + 1;
        let (mined, epoch_losses) = train_and_mine(&working, topology, cfg, step)?;
        let merged_fraction = outcome
            .stats
            .last()
            .map_or(0.0, |s| s.merged_fraction);
        outcome.probe = Some(AeStepStats {
            step,
            converged_loss: tail_mean(&epoch_losses),
            epoch_losses,
            mined_fraction: mined.mined_fraction,
            new_fraction: 0.0,
            merged_fraction,
        });
    }

    outcome.merged = merged;
    outcome.erased_images = working.samples.into_iter().map(|s| s.image).collect();
    Ok(outcome)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{LabelSet, Sample};
    use crate::mask::SegMask;
    use crate::models::ConvSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_topology(c: usize) -> Topology {
        Topology {
            input_channels: 3,
            convs: alloc::vec![ConvSpec {
                out_channels: 6,
                kernel: 3,
                stride: 2,
                pad: 1,
            }],
            num_classes: c,
        }
    }

    /// 12×12 images: class 0 has a bright red patch, class 1 a bright
    /// green patch, on dark noise.
    fn tiny_set(n: usize) -> ImageSet {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let samples = (0..n)
            .map(|i| {
                let mut img = Image::new(12, 12);
                for v in img.data_mut() {
                    *v = 0.1 + 0.05 * rng.random::<f64>();
                }
                let class = (i % 2) as u8;
                let (y0, x0) = (rng.random_range(2..7), rng.random_range(2..7));
                for y in y0..y0 + 4 {
                    for x in x0..x0 + 4 {
                        let color = if class == 0 {
                            [0.9, 0.1, 0.1]
                        } else {
                            [0.1, 0.9, 0.1]
                        };
                        img.set_pixel(y, x, color);
                    }
                }
                Sample {
                    id: i as u32,
                    image: img,
                    labels: LabelSet::from_classes(&[class]),
                    gt: SegMask::filled(12, 12, 0),
                }
            })
            .collect();
        ImageSet {
            samples,
            num_classes: 2,
            mean_pixel: [0.125, 0.125, 0.125],
        }
    }

    fn quick_cfg(steps: usize) -> AeConfig {
        AeConfig {
            steps,
            train: TrainConfig {
                epochs: 4,
                batch_size: 4,
                lr: 0.05,
                lr_decay_epoch: usize::MAX,
                ..TrainConfig::default()
            },
            ..AeConfig::default()
        }
    }

    #[test]
    fn erase_region_writes_mean_pixel() {
        let mut img = Image::new(2, 2);
        for v in img.data_mut() {
            *v = 0.9;
        }
        let mut r = RegionMask::new(2, 2);
        r.set(0, 1, true);
        erase_region(&mut img, &r, [0.1, 0.2, 0.3]);
        assert_eq!(img.pixel(0, 1), [0.1, 0.2, 0.3]);
        assert_eq!(img.pixel(0, 0), [0.9, 0.9, 0.9]);
    }

    #[test]
    fn mining_merges_and_erases() {
        let set = tiny_set(6);
        let outcome = run_ae(&set, &tiny_topology(2), &quick_cfg(2), &mut NullObserver).unwrap();
        assert_eq!(outcome.stats.len(), 2);
        assert_eq!(outcome.per_step.len(), 2);
        assert_eq!(outcome.merged.len(), 6);

        // cumulative fractions never shrink
        assert!(outcome.stats[1].merged_fraction >= outcome.stats[0].merged_fraction);

        // every erased pixel carries exactly the mean pixel
        for (i, img) in outcome.erased_images.iter().enumerate() {
            let mut union = RegionMask::new(12, 12);
            for r in &outcome.merged[i] {
                union.union_with(r);
            }
            for y in 0..12 {
                for x in 0..12 {
                    if union.get(y, x) {
                        assert_eq!(img.pixel(y, x), set.mean_pixel);
                    }
                }
            }
        }

        // regions are mined only for present labels
        for (i, per_class) in outcome.merged.iter().enumerate() {
            for (c, r) in per_class.iter().enumerate() {
                if !set.samples[i].labels.contains(c as u8) {
                    assert!(r.is_empty(), "image {i} class {c}");
                }
            }
        }
    }

    #[test]
    fn prefix_union_of_all_steps_is_merged() {
        let set = tiny_set(4);
        let outcome = run_ae(&set, &tiny_topology(2), &quick_cfg(2), &mut NullObserver).unwrap();
        let prefix = outcome.prefix_union(2);
        assert_eq!(prefix, outcome.merged);
        // one-step prefix is exactly step one
        assert_eq!(outcome.prefix_union(1), outcome.per_step[0]);
    }

    #[test]
    fn mining_is_deterministic() {
        let set = tiny_set(4);
        let a = run_ae(&set, &tiny_topology(2), &quick_cfg(2), &mut NullObserver).unwrap();
        let b = run_ae(&set, &tiny_topology(2), &quick_cfg(2), &mut NullObserver).unwrap();
        assert_eq!(a.merged, b.merged);
        for (sa, sb) in a.stats.iter().zip(&b.stats) {
            assert_eq!(sa.epoch_losses, sb.epoch_losses);
        }
    }

    #[test]
    fn probe_round_does_not_merge() {
        let set = tiny_set(4);
        let mut cfg = quick_cfg(1);
        cfg.probe_extra_step = true;
        let outcome = run_ae(&set, &tiny_topology(2), &cfg, &mut NullObserver).unwrap();
        assert_eq!(outcome.stats.len(), 1);
        let probe = outcome.probe.as_ref().expect("probe requested");
        assert_eq!(probe.step, 2);
        // merged record must equal the single merged step
        assert_eq!(outcome.prefix_union(1), outcome.merged);
    }

    #[test]
    fn loss_guard_stops_merging() {
        let set = tiny_set(4);
        let mut cfg = quick_cfg(3);
        // Impossible bar: any second step trips the guard.
        cfg.loss_guard = Some(LossGuard::FactorOfFirst(0.0));
        let outcome = run_ae(&set, &tiny_topology(2), &cfg, &mut NullObserver).unwrap();
        assert_eq!(outcome.guard_stop, Some(2));
        assert_eq!(outcome.stats.len(), 1);
        assert_eq!(outcome.per_step.len(), 1);
    }

    #[test]
    fn check_convergence_tail_mean_rule() {
        assert!(check_convergence(&[0.5, 0.01, 0.01, 0.01], 0.05));
        assert!(!check_convergence(&[0.2, 0.2, 0.2], 0.05));
        assert!(check_convergence(&[0.04], 0.05));
    }

    #[test]
    fn observer_sees_each_step() {
        struct Counter(usize);
        impl AeObserver for Counter {
            fn after_step(&mut self, stats: &AeStepStats, working: &ImageSet, regions: &[Vec<RegionMask>]) {
                self.0 += 1;
                assert_eq!(stats.step, self.0);
                assert_eq!(working.len(), regions.len());
            }
        }
        let set = tiny_set(4);
        let mut counter = Counter(0);
        run_ae(&set, &tiny_topology(2), &quick_cfg(2), &mut counter).unwrap();
        assert_eq!(counter.0, 2);
    }

    #[test]
    fn zero_steps_is_config_error() {
        let set = tiny_set(2);
        let err = run_ae(&set, &tiny_topology(2), &quick_cfg(0), &mut NullObserver).unwrap_err();
        assert!(matches!(err, CoreError::Config { .. }));
    }
}
