//! Planar RGB images and single-channel planes.
//!
//! Pixel values are `f64` in [0,1]. Storage is channel-planar (all of
//! red, then green, then blue), matching the (C,H,W) tensor layout so an
//! image feeds the network without a repack.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::Tensor;

/// RGB image, planar layout, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    /// Builds from planar data of length 3·h·w.
    pub fn from_planar(h: usize, w: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == 3 * h * w).then_some(Image { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f64; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f64; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    /// Per-channel mean over all pixels.
    pub fn channel_means(&self) -> [f64; 3] {
        let plane = self.h * self.w;
        let mut m = [0.0; 3];
        for (c, out) in m.iter_mut().enumerate() {
            *out = self.data[c * plane..(c + 1) * plane].iter().sum::<f64>() / plane as f64;
        }
        m
    }

    /// (3,H,W) tensor view (copies).
    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[3, self.h, self.w], self.data.clone()).expect("consistent image")
    }

    /// Horizontally mirrored copy.
    pub fn hflipped(&self) -> Image {
        let mut out = Image::new(self.h, self.w);
        for c in 0..3 {
            for y in 0..self.h {
                for x in 0..self.w {
                    out.set(c, y, x, self.get(c, y, self.w - 1 - x));
                }
            }
        }
        out
    }
}

/// Single-channel float map (heatmaps, saliency).
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(h: usize, w: usize) -> Self {
        Plane {
            h,
            w,
            data: vec![0.0; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<f64>) -> Option<Self> {
        (data.len() == h * w).then_some(Plane { h, w, data })
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: f64) {
        self.data[y * self.w + x] = v;
    }

    pub fn max_value(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Rescales values to [0,1] by (v−min)/(max−min). A constant map
    /// becomes all zeros rather than dividing by zero; ranges below
    /// 1e-12 count as constant so accumulated rounding crumbs are not
    /// stretched into a full-scale map.
    pub fn normalize_min_max(&mut self) {
        let min = self.data.iter().copied().fold(f64::INFINITY, f64::min);
        let max = self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max - min > 1e-12 {
            let inv = 1.0 / (max - min);
            for v in &mut self.data {
                *v = (*v - min) * inv;
            }
        } else {
            self.data.fill(0.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn planar_indexing_round_trips() {
        let mut img = Image::new(4, 5);
        img.set_pixel(2, 3, [0.1, 0.2, 0.3]);
        assert_eq!(img.pixel(2, 3), [0.1, 0.2, 0.3]);
        assert_eq!(img.get(1, 2, 3), 0.2);
    }

    #[test]
    fn hflip_mirrors_columns() {
        let mut img = Image::new(1, 3);
        img.set_pixel(0, 0, [1.0, 0.0, 0.0]);
        img.set_pixel(0, 2, [0.0, 0.0, 1.0]);
        let f = img.hflipped();
        assert_eq!(f.pixel(0, 0), [0.0, 0.0, 1.0]);
        assert_eq!(f.pixel(0, 2), [1.0, 0.0, 0.0]);
        assert_eq!(f.hflipped(), img);
    }

    #[test]
    fn normalize_min_max_constant_becomes_zero() {
        let mut p = Plane::from_vec(2, 2, alloc::vec![3.0; 4]).unwrap();
        p.normalize_min_max();
        assert_eq!(p.data(), &[0.0; 4]);
    }

    #[test]
    fn normalize_min_max_hits_unit_range() {
        let mut p = Plane::from_vec(1, 3, alloc::vec![2.0, 4.0, 6.0]).unwrap();
        p.normalize_min_max();
        assert_eq!(p.data(), &[0.0, 0.5, 1.0]);
    }
}
