//! Binary region masks and semantic segmentation masks.

use alloc::vec;
use alloc::vec::Vec;

/// Sentinel label for pixels excluded from supervision and scoring.
pub const IGNORE: u8 = 255;

/// Binary per-pixel mask marking one mined region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RegionMask {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl RegionMask {
    pub fn new(h: usize, w: usize) -> Self {
        RegionMask {
            h,
            w,
            bits: vec![false; h * w],
        }
    }

    pub fn from_bits(h: usize, w: usize, bits: Vec<bool>) -> Option<Self> {
        (bits.len() == h * w).then_some(RegionMask { h, w, bits })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.w + x] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    /// Fraction of all pixels that are set.
    pub fn fraction(&self) -> f64 {
        self.count() as f64 / (self.h * self.w) as f64
    }

    /// In-place union with another mask of the same size.
    pub fn union_with(&mut self, other: &RegionMask) {
        debug_assert_eq!((self.h, self.w), (other.h, other.w));
        for (a, b) in self.bits.iter_mut().zip(&other.bits) {
            *a |= b;
        }
    }

    /// Number of pixels set in both masks.
    pub fn intersection_count(&self, other: &RegionMask) -> usize {
        self.bits
            .iter()
            .zip(&other.bits)
            .filter(|(&a, &b)| a && b)
            .count()
    }
}

/// Per-pixel semantic labels: 0 is background, 1..=C are object classes,
/// [`IGNORE`] marks unsupervised pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegMask {
    h: usize,
    w: usize,
    labels: Vec<u8>,
}

impl SegMask {
    /// All-pixels-`fill` mask.
    pub fn filled(h: usize, w: usize, fill: u8) -> Self {
        SegMask {
            h,
            w,
            labels: vec![fill; h * w],
        }
    }

    pub fn from_labels(h: usize, w: usize, labels: Vec<u8>) -> Option<Self> {
        (labels.len() == h * w).then_some(SegMask { h, w, labels })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.labels[y * self.w + x] = v;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    /// Fraction of pixels that carry a real label (not [`IGNORE`]).
    pub fn labeled_fraction(&self) -> f64 {
        let labeled = self.labels.iter().filter(|&&l| l != IGNORE).count();
        labeled as f64 / self.labels.len() as f64
    }

    /// Distinct non-ignore labels present, ascending.
    pub fn present_labels(&self) -> Vec<u8> {
        let mut seen = [false; 256];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..=254u8).filter(|&l| seen[l as usize]).collect()
    }
}
