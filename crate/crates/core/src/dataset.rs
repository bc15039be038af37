//! In-memory datasets of weakly labeled images.
//!
//! Supervision for training is the image-level [`LabelSet`] only; every
//! sample also carries its ground-truth segmentation so evaluation code
//! can score mined masks. Training code never reads the ground truth.

use alloc::vec::Vec;

use crate::image::Image;
use crate::mask::SegMask;

/// Set of object classes present in one image, stored as a bitmask.
/// Class ids are 0-based and must be below 32.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct LabelSet {
    bits: u32,
}

impl LabelSet {
    pub const MAX_CLASSES: usize = 32;

    pub fn empty() -> Self {
        LabelSet::default()
    }

    pub fn from_classes(classes: &[u8]) -> Self {
        let mut s = LabelSet::empty();
        for &c in classes {
            s.insert(c);
        }
        s
    }

    pub fn insert(&mut self, class: u8) {
        debug_assert!((class as usize) < Self::MAX_CLASSES);
        self.bits |= 1 << class;
    }

    pub fn contains(&self, class: u8) -> bool {
        (class as usize) < Self::MAX_CLASSES && self.bits & (1 << class) != 0
    }

    pub fn len(&self) -> usize {
        self.bits.count_ones() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    /// Present classes in ascending order.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        (0..Self::MAX_CLASSES as u8).filter(|&c| self.contains(c))
    }

    /// 0/1 target vector of length `num_classes`.
    pub fn to_targets(&self, num_classes: usize) -> Vec<f64> {
        (0..num_classes as u8)
            .map(|c| if self.contains(c) { 1.0 } else { 0.0 })
            .collect()
    }
}

/// One weakly labeled sample.
#[derive(Debug, Clone)]
pub struct Sample {
    /// Stable identifier, unique within a split.
    pub id: u32,
    pub image: Image,
    /// Image-level supervision.
    pub labels: LabelSet,
    /// Ground truth segmentation (labels 0..=C), used only by evaluation.
    pub gt: SegMask,
}

/// A split of samples plus dataset-level constants.
#[derive(Debug, Clone)]
pub struct ImageSet {
    pub samples: Vec<Sample>,
    pub num_classes: usize,
    /// Frozen per-channel mean of the training split, the fill value for
    /// erased pixels.
    pub mean_pixel: [f64; 3],
}

impl ImageSet {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_set_round_trip() {
        let s = LabelSet::from_classes(&[4, 0, 2, 4]);
        assert_eq!(s.len(), 3);
        assert!(s.contains(0) && s.contains(2) && s.contains(4));
        assert!(!s.contains(1));
        assert_eq!(s.iter().collect::<Vec<_>>(), alloc::vec![0, 2, 4]);
        assert_eq!(s.to_targets(5), alloc::vec![1.0, 0.0, 1.0, 0.0, 1.0]);
    }

    #[test]
    fn empty_label_set() {
        let s = LabelSet::empty();
        assert!(s.is_empty());
        assert_eq!(s.to_targets(3), alloc::vec![0.0; 3]);
    }
}
