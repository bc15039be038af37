//! Fusing mined per-class regions with background cues into training
//! masks.
//!
//! Every pixel gets exactly one of: an object label (1..=C), background
//! (0), or [`IGNORE`]. Rules, applied in order:
//!
//! 1. two or more classes claim the pixel → IGNORE (conflict);
//! 2. exactly one class claims it, but its saliency is below that
//!    class's threshold → IGNORE (low saliency inside an object);
//! 3. no class claims it: background cue set → 0, otherwise IGNORE
//!    (unassigned).

use alloc::format;

use crate::error::{CoreError, Result};
use crate::image::Plane;
use crate::mask::{RegionMask, SegMask, IGNORE};

/// Builds the supervision mask for one image.
///
/// `regions[c]` is the mined region of class `c`; `background` holds the
/// low-saliency background cues; `class_thresholds[c]` is the saliency
/// level below which a pixel claimed by class `c` is distrusted
/// (per-class so low-contrast classes can use a softer cutoff).
pub fn fuse_regions(
    regions: &[RegionMask],
    background: &RegionMask,
    saliency: &Plane,
    class_thresholds: &[f64],
) -> Result<SegMask> {
    let (h, w) = (saliency.h(), saliency.w());
    if regions.len() > (IGNORE as usize) - 1 {
        return Err(CoreError::Config {
            detail: format!("{} classes exceed the label range", regions.len()),
        });
    }
    if class_thresholds.len() != regions.len() {
        return Err(CoreError::Config {
            detail: format!(
                "{} thresholds for {} classes",
                class_thresholds.len(),
                regions.len()
            ),
        });
    }
    if (background.h(), background.w()) != (h, w) {
        return Err(CoreError::Shape {
            op: "fuse_regions",
            detail: format!(
                "background cues are {}x{}, saliency is {h}x{w}",
                background.h(),
                background.w()
            ),
        });
    }
    for (c, r) in regions.iter().enumerate() {
        if (r.h(), r.w()) != (h, w) {
            return Err(CoreError::Shape {
                op: "fuse_regions",
                detail: format!(
                    "class {c} region is {}x{}, saliency is {h}x{w}",
                    r.h(),
                    r.w()
                ),
            });
        }
    }

    let mut mask = SegMask::filled(h, w, IGNORE);
    for y in 0..h {
        for x in 0..w {
            let mut claim: Option<usize> = None;
            let mut conflict = false;
            for (c, r) in regions.iter().enumerate() {
                if r.get(y, x) {
                    if claim.is_some() {
                        conflict = true;
                        break;
                    }
                    claim = Some(c);
                }
            }
            let label = if conflict {
                IGNORE
            } else {
                match claim {
                    Some(c) if saliency.get(y, x) < class_thresholds[c] => IGNORE,
                    Some(c) => c as u8 + 1,
                    None if background.get(y, x) => 0,
                    None => IGNORE,
                }
            };
            mask.set(y, x, label);
        }
    }
    Ok(mask)
}
