//! Class activation maps and heat-driven region extraction.
//!
//! A classification activation map for class `c` weights every channel
//! of the final feature map by that class's FC weight and sums; because
//! the classifier pools those same features, the spatial mean of the raw
//! map equals the class logit minus its bias. Maps are upsampled to
//! image resolution, clamped at zero, and min-max normalized before
//! thresholding.

use alloc::format;

use crate::error::{CoreError, Result};
use crate::graph::bilinear_upsample_values;
use crate::image::Plane;
use crate::mask::RegionMask;
use crate::tensor::Tensor;

/// How a heat map is binarized into a region.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdMode {
    /// Keep pixels with value ≥ delta · max(map).
    FractionOfMax(f64),
    /// Keep pixels at or above the q-quantile (nearest rank) of the map.
    Quantile(f64),
}

/// Raw activation map at feature resolution:
/// cam[i,j] = Σ_k fc_weight[class,k] · features[k,i,j]. No bias term.
pub fn raw_cam(features: &Tensor, fc_weight: &Tensor, class: usize) -> Result<Plane> {
    let fs = features.shape();
    let ws = fc_weight.shape();
    if fs.len() != 3 || ws.len() != 2 || ws[1] != fs[0] || class >= ws[0] {
        return Err(CoreError::Shape {
            op: "raw_cam",
            detail: format!("features {fs:?}, fc weight {ws:?}, class {class}"),
        });
    }
    let (k, h, w) = (fs[0], fs[1], fs[2]);
    let plane = h * w;
    let mut out = alloc::vec![0.0; plane];
    let row = &fc_weight.data()[class * k..(class + 1) * k];
    for (ch, &wv) in row.iter().enumerate() {
        let f = &features.data()[ch * plane..(ch + 1) * plane];
        for (o, &fv) in out.iter_mut().zip(f) {
            *o += wv * fv;
        }
    }
    Plane::from_vec(h, w, out).ok_or(CoreError::Shape {
        op: "raw_cam",
        detail: format!("internal plane {h}x{w}"),
    })
}

/// Full activation-map pipeline: raw map, bilinear upsample to
/// (out_h, out_w), clamp negatives to zero, min-max normalize. A map
/// that is constant after clamping comes back all zeros.
pub fn compute_cam(
    features: &Tensor,
    fc_weight: &Tensor,
    class: usize,
    out_h: usize,
    out_w: usize,
) -> Result<Plane> {
    let raw = raw_cam(features, fc_weight, class)?;
    if out_h < raw.h() || out_w < raw.w() {
        return Err(CoreError::Shape {
            op: "compute_cam",
            detail: format!(
                "target ({out_h},{out_w}) below feature resolution ({},{})",
                raw.h(),
                raw.w()
            ),
        });
    }
    let up = bilinear_upsample_values(raw.data(), 1, raw.h(), raw.w(), out_h, out_w);
    let mut plane = Plane::from_vec(out_h, out_w, up).expect("sized above");
    for v in plane.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    plane.normalize_min_max();
    Ok(plane)
}

/// Binarizes a non-negative heat map. An all-zero map yields an empty
/// region under either mode.
pub fn extract_region(map: &Plane, mode: ThresholdMode) -> Result<RegionMask> {
    let max = map.max_value();
    let mut region = RegionMask::new(map.h(), map.w());
    if max <= 0.0 {
        return Ok(region);
    }
    let threshold = match mode {
        ThresholdMode::FractionOfMax(delta) => {
            if !(0.0..=1.0).contains(&delta) {
                return Err(CoreError::Config {
                    detail: format!("fraction-of-max delta must be in [0,1], got {delta}"),
                });
            }
            delta * max
        }
        ThresholdMode::Quantile(q) => {
            if !(0.0..=1.0).contains(&q) {
                return Err(CoreError::Config {
                    detail: format!("quantile must be in [0,1], got {q}"),
                });
            }
            let mut sorted = map.data().to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite map"));
            let idx = ((q * (sorted.len() - 1) as f64) as usize).min(sorted.len() - 1);
            sorted[idx]
        }
    };
    for y in 0..map.h() {
        for x in 0..map.w() {
            if map.get(y, x) >= threshold {
                region.set(y, x, true);
            }
        }
    }
    Ok(region)
}
