//! Color-contrast saliency against the image border.
//!
//! Stand-in for an off-the-shelf saliency detector: pixels are scored by
//! their color distance to the mean color of a thin border ring (the
//! ring is assumed to be background), smoothed with a 3×3 box filter,
//! and min-max normalized. High values mark likely foreground.

use crate::image::{Image, Plane};
use crate::mask::RegionMask;

/// Border ring width: 5% of the shorter side, at least one pixel.
pub fn ring_width(h: usize, w: usize) -> usize {
    let r = libm::round(0.05 * h.min(w) as f64) as usize;
    r.max(1)
}

/// Saliency in [0,1]: distance to the border-ring mean color, box-blurred
/// and normalized. A constant image yields an all-zero map.
pub fn color_contrast_saliency(img: &Image) -> Plane {
    let (h, w) = (img.h(), img.w());
    let r = ring_width(h, w);

    // Mean color over the ring.
    let mut mean = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            if y < r || y >= h - r || x < r || x >= w - r {
                let p = img.pixel(y, x);
                for c in 0..3 {
                    mean[c] += p[c];
                }
                count += 1;
            }
        }
    }
    for m in &mut mean {
        *m /= count as f64;
    }

    // Euclidean color distance to the ring mean.
    let mut dist = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let p = img.pixel(y, x);
            let d2: f64 = (0..3).map(|c| (p[c] - mean[c]) * (p[c] - mean[c])).sum();
            dist.set(y, x, libm::sqrt(d2));
        }
    }

    // 3×3 box blur, averaging only in-bounds neighbours.
    let mut blurred = Plane::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            let mut n = 0usize;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny >= 0 && ny < h as i64 && nx >= 0 && nx < w as i64 {
                        acc += dist.get(ny as usize, nx as usize);
                        n += 1;
                    }
                }
            }
            blurred.set(y, x, acc / n as f64);
        }
    }

    blurred.normalize_min_max();
    blurred
}

/// Background cues: pixels whose saliency falls below `threshold`.
pub fn background_cues(saliency: &Plane, threshold: f64) -> RegionMask {
    let mut mask = RegionMask::new(saliency.h(), saliency.w());
    for y in 0..saliency.h() {
        for x in 0..saliency.w() {
            mask.set(y, x, saliency.get(y, x) < threshold);
        }
    }
    mask
}
