//! Property-based invariants for thresholding, fusion, evaluation,
//! saliency, CAM scaling, and the weighted-argmax inference rules.

use erasemine_core::cam::{compute_cam, extract_region, raw_cam, ThresholdMode};
use erasemine_core::dataset::LabelSet;
use erasemine_core::eval::ConfusionMatrix;
use erasemine_core::fusion::fuse_regions;
use erasemine_core::image::{Image, Plane};
use erasemine_core::mask::{RegionMask, SegMask, IGNORE};
use erasemine_core::psl::{restrict_to_image_labels, weighted_argmax_mask, weighted_auxiliary_mask};
use erasemine_core::saliency::{background_cues, color_contrast_saliency};
use erasemine_core::tensor::Tensor;
use proptest::prelude::*;

fn plane_strategy(lo: usize, hi: usize) -> impl Strategy<Value = Plane> {
    (lo..hi, lo..hi).prop_flat_map(|(h, w)| {
        proptest::collection::vec(0.0f64..1.0, h * w)
            .prop_map(move |data| Plane::from_vec(h, w, data).unwrap())
    })
}

fn subset_of(inner: &RegionMask, outer: &RegionMask) -> bool {
    inner
        .bits()
        .iter()
        .zip(outer.bits())
        .all(|(a, b)| !a || *b)
}

proptest! {
    #[test]
    fn fraction_threshold_is_monotone_in_delta(
        map in plane_strategy(3, 12),
        d1 in 0.05f64..0.95,
        gap in 0.01f64..0.5,
    ) {
        let d2 = (d1 + gap).min(0.99);
        let wide = extract_region(&map, ThresholdMode::FractionOfMax(d1)).unwrap();
        let tight = extract_region(&map, ThresholdMode::FractionOfMax(d2)).unwrap();
        prop_assert!(subset_of(&tight, &wide));
    }

    #[test]
    fn quantile_threshold_is_monotone_in_q(
        map in plane_strategy(3, 12),
        q1 in 0.0f64..0.9,
        gap in 0.0f64..0.5,
    ) {
        let q2 = (q1 + gap).min(1.0);
        let wide = extract_region(&map, ThresholdMode::Quantile(q1)).unwrap();
        let tight = extract_region(&map, ThresholdMode::Quantile(q2)).unwrap();
        prop_assert!(subset_of(&tight, &wide));
    }

    #[test]
    fn background_cues_monotone_in_threshold(
        sal in plane_strategy(3, 12),
        t1 in 0.0f64..1.0,
        gap in 0.0f64..0.5,
    ) {
        let small = background_cues(&sal, t1);
        let large = background_cues(&sal, t1 + gap);
        prop_assert!(subset_of(&small, &large));
    }
}

// ------------------------------------------------------------------ fusion

#[derive(Debug, Clone)]
struct FusionCase {
    regions: Vec<RegionMask>,
    background: RegionMask,
    saliency: Plane,
    thresholds: Vec<f64>,
}

fn fusion_case() -> impl Strategy<Value = FusionCase> {
    (2usize..5, 3usize..8, 3usize..8).prop_flat_map(|(c, h, w)| {
        let n = h * w;
        (
            proptest::collection::vec(proptest::collection::vec(any::<bool>(), n), c),
            proptest::collection::vec(any::<bool>(), n),
            proptest::collection::vec(0.0f64..1.0, n),
            proptest::collection::vec(0.0f64..1.0, c),
        )
            .prop_map(move |(region_bits, bg_bits, sal, thresholds)| FusionCase {
                regions: region_bits
                    .into_iter()
                    .map(|bits| RegionMask::from_bits(h, w, bits).unwrap())
                    .collect(),
                background: RegionMask::from_bits(h, w, bg_bits).unwrap(),
                saliency: Plane::from_vec(h, w, sal).unwrap(),
                thresholds,
            })
    })
}

proptest! {
    /// Renaming the classes renames the fused labels and changes nothing
    /// else.
    #[test]
    fn fusion_is_equivariant_under_class_permutation(case in fusion_case(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let c = case.regions.len();
        let mut perm: Vec<usize> = (0..c).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let mut inverse = vec![0usize; c];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }

        let base = fuse_regions(&case.regions, &case.background, &case.saliency, &case.thresholds).unwrap();
        let permuted_regions: Vec<RegionMask> = perm.iter().map(|&p| case.regions[p].clone()).collect();
        let permuted_thresholds: Vec<f64> = perm.iter().map(|&p| case.thresholds[p]).collect();
        let permuted = fuse_regions(&permuted_regions, &case.background, &case.saliency, &permuted_thresholds).unwrap();

        for (a, b) in base.labels().iter().zip(permuted.labels()) {
            let expect = if *a == 0 || *a == IGNORE {
                *a
            } else {
                inverse[(*a - 1) as usize] as u8 + 1
            };
            prop_assert_eq!(expect, *b);
        }
    }

    /// Emptying one class's mined mask only affects pixels that class
    /// had claimed.
    #[test]
    fn fusion_is_local_to_claimed_pixels(case in fusion_case(), victim_pick in any::<u32>()) {
        let c = case.regions.len();
        let victim = victim_pick as usize % c;
        let base = fuse_regions(&case.regions, &case.background, &case.saliency, &case.thresholds).unwrap();
        let mut altered = case.regions.clone();
        altered[victim] = RegionMask::new(altered[victim].h(), altered[victim].w());
        let after = fuse_regions(&altered, &case.background, &case.saliency, &case.thresholds).unwrap();
        for (i, claimed) in case.regions[victim].bits().iter().enumerate() {
            if !claimed {
                prop_assert_eq!(base.labels()[i], after.labels()[i], "pixel {} changed", i);
            }
        }
    }
}

// ------------------------------------------------------------------- eval

fn mask_pair() -> impl Strategy<Value = (usize, SegMask, SegMask)> {
    (2usize..5, 3usize..8, 3usize..8).prop_flat_map(|(c, h, w)| {
        let n = h * w;
        let gt_label = prop_oneof![Just(IGNORE), (0u8..=c as u8)];
        (
            Just(c),
            proptest::collection::vec(gt_label, n),
            proptest::collection::vec(0u8..=c as u8, n),
        )
            .prop_map(move |(c, gt, pred)| {
                (
                    c,
                    SegMask::from_labels(h, w, gt).unwrap(),
                    SegMask::from_labels(h, w, pred).unwrap(),
                )
            })
    })
}

proptest! {
    /// Consistently renaming object classes in both masks leaves mIoU
    /// unchanged.
    #[test]
    fn miou_is_equivariant_under_relabeling((c, gt, pred) in mask_pair(), seed in any::<u64>()) {
        use rand::seq::SliceRandom;
        use rand::SeedableRng;
        let mut perm: Vec<u8> = (1..=c as u8).collect();
        perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
        let rename = |m: &SegMask| {
            let labels = m
                .labels()
                .iter()
                .map(|&l| if l == 0 || l == IGNORE { l } else { perm[(l - 1) as usize] })
                .collect();
            SegMask::from_labels(m.h(), m.w(), labels).unwrap()
        };

        let mut base = ConfusionMatrix::new(c);
        base.accumulate_strict(&gt, &pred).unwrap();
        let mut renamed = ConfusionMatrix::new(c);
        renamed.accumulate_strict(&rename(&gt), &rename(&pred)).unwrap();
        prop_assert!((base.miou() - renamed.miou()).abs() <= 1e-12);
        prop_assert!((base.pixel_accuracy() - renamed.pixel_accuracy()).abs() <= 1e-12);
    }

    /// Accumulating two batches into one matrix equals merging two
    /// separately accumulated matrices.
    #[test]
    fn confusion_accumulation_is_additive(
        (c, gt1, pred1) in mask_pair(),
        flip in any::<bool>(),
    ) {
        // second batch derived from the first so shapes and class count
        // agree; predictions may not carry IGNORE under strict scoring
        let strip = |m: &SegMask| {
            SegMask::from_labels(
                m.h(),
                m.w(),
                m.labels().iter().map(|&l| if l == IGNORE { 0 } else { l }).collect(),
            )
            .unwrap()
        };
        let gt2 = if flip { pred1.clone() } else { gt1.clone() };
        let pred2 = if flip { strip(&gt1) } else { pred1.clone() };

        let mut joint = ConfusionMatrix::new(c);
        joint.accumulate_strict(&gt1, &pred1).unwrap();
        joint.accumulate_strict(&gt2, &pred2).unwrap();

        let mut a = ConfusionMatrix::new(c);
        a.accumulate_strict(&gt1, &pred1).unwrap();
        let mut b = ConfusionMatrix::new(c);
        b.accumulate_strict(&gt2, &pred2).unwrap();
        a.merge(&b).unwrap();

        for g in 0..=c {
            for p in 0..=c {
                prop_assert_eq!(joint.count(g, p), a.count(g, p));
            }
        }
    }
}

// ---------------------------------------------------------------- saliency

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn saliency_commutes_with_horizontal_flip(
        (h, w) in (8usize..16, 8usize..16),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f64> = (0..3 * h * w).map(|_| rng.random::<f64>()).collect();
        let img = Image::from_planar(h, w, data).unwrap();

        let flipped_first = color_contrast_saliency(&img.hflipped());
        let flipped_after = {
            let s = color_contrast_saliency(&img);
            let mut out = Plane::new(h, w);
            for y in 0..h {
                for x in 0..w {
                    out.set(y, x, s.get(y, w - 1 - x));
                }
            }
            out
        };
        for (a, b) in flipped_first.data().iter().zip(flipped_after.data()) {
            prop_assert!((a - b).abs() <= 1e-9, "{} vs {}", a, b);
        }
    }
}

// --------------------------------------------------------------------- cam

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    /// Scaling one class's fc row by a power of two scales the raw map
    /// exactly and leaves the normalized heatmap and region bit-identical.
    #[test]
    fn cam_is_invariant_to_positive_weight_scaling(
        seed in any::<u64>(),
        exp in -6i32..7,
        delta in 0.05f64..0.95,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (c, f, h, w) = (3usize, 4usize, 5usize, 6usize);
        let feats = Tensor::from_vec(
            &[f, h, w],
            (0..f * h * w).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        ).unwrap();
        let mut fc = Tensor::from_vec(
            &[c, f],
            (0..c * f).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect(),
        ).unwrap();
        let class = (seed % c as u64) as usize;

        let raw_before = raw_cam(&feats, &fc, class).unwrap();
        let cam_before = compute_cam(&feats, &fc, class, 2 * h, 2 * w).unwrap();
        let region_before = extract_region(&cam_before, ThresholdMode::FractionOfMax(delta)).unwrap();

        let k = (2.0f64).powi(exp);
        for i in 0..f {
            let idx = class * f + i;
            fc.data_mut()[idx] *= k;
        }
        let raw_after = raw_cam(&feats, &fc, class).unwrap();
        let cam_after = compute_cam(&feats, &fc, class, 2 * h, 2 * w).unwrap();
        let region_after = extract_region(&cam_after, ThresholdMode::FractionOfMax(delta)).unwrap();

        for (a, b) in raw_before.data().iter().zip(raw_after.data()) {
            prop_assert_eq!(a * k, *b);
        }
        prop_assert_eq!(cam_before.data(), cam_after.data());
        prop_assert_eq!(region_before.bits(), region_after.bits());
    }
}

// ------------------------------------------------------- weighted argmax

fn positive_scores() -> impl Strategy<Value = (Tensor, Vec<f64>)> {
    (2usize..5, 2usize..6, 2usize..6).prop_flat_map(|(c, h, w)| {
        (
            proptest::collection::vec(0.001f64..1.0, (c + 1) * h * w),
            proptest::collection::vec(
                prop_oneof![Just(0.0f64), 0.05f64..1.0],
                c,
            ),
        )
            .prop_map(move |(data, v)| {
                (Tensor::from_vec(&[c + 1, h, w], data).unwrap(), v)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]
    #[test]
    fn zero_weight_classes_never_appear((scores, v) in positive_scores()) {
        let mask = weighted_auxiliary_mask(&scores, &v).unwrap();
        for &l in mask.labels() {
            if l != 0 {
                prop_assert!(v[(l - 1) as usize] > 0.0, "class {} has zero weight", l);
            }
        }
    }

    #[test]
    fn weighted_argmax_invariant_to_positive_scaling(
        (scores, v) in positive_scores(),
        exp in -8i32..9,
    ) {
        let mut weights = vec![1.0];
        weights.extend_from_slice(&v);
        let base = weighted_argmax_mask(&scores, &weights).unwrap();
        let k = (2.0f64).powi(exp);
        let scaled: Vec<f64> = weights.iter().map(|x| x * k).collect();
        let after = weighted_argmax_mask(&scores, &scaled).unwrap();
        prop_assert_eq!(base.labels(), after.labels());
    }

    #[test]
    fn restriction_only_rewrites_absent_object_classes(
        (scores, v) in positive_scores(),
        keep_bits in any::<u8>(),
    ) {
        let c = v.len();
        let mut keep = LabelSet::empty();
        for cls in 0..c {
            if keep_bits & (1 << cls) != 0 {
                keep.insert(cls as u8);
            }
        }
        let base = weighted_auxiliary_mask(&scores, &v).unwrap();
        let mut restricted = base.clone();
        restrict_to_image_labels(&mut restricted, keep);
        for (&before, &after) in base.labels().iter().zip(restricted.labels()) {
            if before == 0 || (before != IGNORE && keep.contains(before - 1)) {
                prop_assert_eq!(before, after);
            } else {
                prop_assert_eq!(after, IGNORE);
            }
        }
    }
}
