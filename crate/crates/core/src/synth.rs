//! Deterministic synthetic scenes for weakly supervised mining.
//!
//! Every object is a composite: a large, muted **body** whose base color
//! is shared across classes (with a faint per-class tint), plus a small,
//! saturated, class-unique **marker** sitting inside it. A freshly
//! trained classifier keys on the marker; only after the marker is
//! erased does the body become the discriminative evidence. The last
//! class is deliberately low-contrast: its body sits close to the
//! background color so its saliency lands between the strict and soft
//! background thresholds.
//!
//! Generation is deterministic per (seed, image id): each image draws
//! from its own RNG stream, so splits and parallel generation cannot
//! perturb each other.

use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{ImageSet, LabelSet, Sample};
use crate::error::{CoreError, Result};
use crate::image::Image;
use crate::mask::SegMask;

/// Scene recipe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SceneSpec {
    pub h: usize,
    pub w: usize,
    pub num_classes: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            h: 64,
            w: 64,
            num_classes: 5,
            min_objects: 1,
            max_objects: 3,
            seed: 42,
        }
    }
}

impl SceneSpec {
    fn validate(&self) -> Result<()> {
        let body_max = BODY_MAX + 2 * BORDER_MARGIN;
        if self.h < body_max || self.w < body_max {
            return Err(CoreError::Config {
                detail: alloc::format!(
                    "scene {}x{} too small for {BODY_MAX}px bodies with a {BORDER_MARGIN}px border",
                    self.h,
                    self.w
                ),
            });
        }
        if self.num_classes == 0 || self.num_classes > LabelSet::MAX_CLASSES {
            return Err(CoreError::Config {
                detail: alloc::format!("class count {} out of range", self.num_classes),
            });
        }
        if self.min_objects == 0
            || self.min_objects > self.max_objects
            || self.max_objects > self.num_classes
        {
            return Err(CoreError::Config {
                detail: alloc::format!(
                    "object count range {}..={} invalid for {} classes",
                    self.min_objects,
                    self.max_objects,
                    self.num_classes
                ),
            });
        }
        Ok(())
    }

    /// The designated low-contrast class (the highest class id).
    pub fn low_contrast_class(&self) -> u8 {
        (self.num_classes - 1) as u8
    }
}

const BORDER_MARGIN: usize = 4;
const BODY_MIN: usize = 28;
const BODY_MAX: usize = 36;
const MARKER_MIN: usize = 10;
const MARKER_MAX: usize = 14;
const SUB_MIN: usize = 11;
const SUB_MAX: usize = 14;
const TERT_MIN: usize = 9;
const TERT_MAX: usize = 11;
/// Amplitude of the per-class body tint. Calibrated so a fresh
/// classifier's activation map stays below 0.2×peak over bodies while
/// markers are present (step 1 mines markers), yet bodies alone still
/// carry enough signal to train on once markers are erased.
const BODY_TINT: f64 = 0.10;
/// Fraction of an earlier object's marker a later body may cover.
const MARKER_OCCLUSION_LIMIT: f64 = 0.2;

/// Mid-saturation secondary glyph colors, one per class: the body patch
/// a retrained classifier discovers once the primary marker is erased.
fn sub_color(class: u8) -> [f64; 3] {
    match class % 5 {
        0 => [0.24, 0.72, 0.26], // green
        1 => [0.32, 0.30, 0.62], // slate blue
        2 => [0.70, 0.42, 0.10], // orange
        3 => [0.58, 0.08, 0.58], // purple
        _ => [0.10, 0.50, 0.52], // teal
    }
}

/// Tertiary glyph colors, one per class: the third-round discovery once
/// both stronger glyphs are erased. Hues are kept away from every
/// marker and secondary color so detectors for one tier do not fire on
/// another.
fn tert_color(class: u8) -> [f64; 3] {
    match class % 5 {
        0 => [0.06, 0.08, 0.46], // navy
        1 => [0.36, 0.03, 0.30], // dark magenta
        2 => [0.08, 0.48, 0.08], // dark green
        3 => [0.48, 0.05, 0.05], // dark red
        _ => [0.40, 0.36, 0.05], // mustard
    }
}

/// Axis-aligned box (y0, x0, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Bbox {
    pub y0: usize,
    pub x0: usize,
    pub h: usize,
    pub w: usize,
}

impl Bbox {
    fn overlap_area(&self, other: &Bbox) -> usize {
        let y = (self.y0 + self.h).min(other.y0 + other.h).saturating_sub(self.y0.max(other.y0));
        let x = (self.x0 + self.w).min(other.x0 + other.w).saturating_sub(self.x0.max(other.x0));
        y * x
    }

    fn area(&self) -> usize {
        self.h * self.w
    }
}

/// Per-object diagnostics recorded for the dataset manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ObjectInfo {
    pub class: u8,
    pub body_bbox: Bbox,
    pub marker_bbox: Bbox,
    pub sub_marker_bbox: Bbox,
    pub tert_marker_bbox: Bbox,
}

/// One generated image plus its diagnostics.
#[derive(Debug, Clone)]
pub struct GeneratedScene {
    pub sample: Sample,
    pub objects: Vec<ObjectInfo>,
}

struct PlacedObject {
    class: u8,
    body: Vec<(usize, usize)>,
    marker: Vec<(usize, usize)>,
    sub: Vec<(usize, usize)>,
    tert: Vec<(usize, usize)>,
    body_bbox: Bbox,
    marker_bbox: Bbox,
    sub_bbox: Bbox,
    tert_bbox: Bbox,
    body_color: [f64; 3],
    marker_color: [f64; 3],
    sub_color: [f64; 3],
    tert_color: [f64; 3],
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

/// Saturated, class-unique marker colors (cycled beyond five classes).
fn marker_color(class: u8) -> [f64; 3] {
    match class % 5 {
        0 => [0.88, 0.10, 0.10], // red
        1 => [0.92, 0.86, 0.10], // yellow
        2 => [0.85, 0.15, 0.80], // magenta
        3 => [0.10, 0.80, 0.85], // cyan
        _ => [0.15, 0.20, 0.95], // blue
    }
}

/// Faint per-class tint direction added to the shared body base color.
fn body_tint(class: u8) -> [f64; 3] {
    match class % 5 {
        0 => [1.0, -0.5, -0.5],
        1 => [-0.5, 1.0, -0.5],
        2 => [0.8, -0.8, 0.8],
        3 => [-0.6, 0.8, 0.6],
        _ => [0.0, 0.0, 0.0],
    }
}

/// Glyph silhouettes by tier, deliberately class-independent: after a
/// glyph is erased, the mean-pixel patch left behind must carry no
/// class information, or retrained classifiers would key on patch
/// outlines instead of remaining object evidence.
#[derive(Clone, Copy)]
enum GlyphTier {
    Marker, // square
    Sub,    // disc
    Tert,   // diamond
}

/// Pixels of a glyph silhouette within an m×m box at (y0, x0).
fn glyph_pixels(tier: GlyphTier, y0: usize, x0: usize, m: usize) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let c = (m - 1) as f64 / 2.0;
    for dy in 0..m {
        for dx in 0..m {
            let (fy, fx) = (dy as f64 - c, dx as f64 - c);
            let inside = match tier {
                GlyphTier::Marker => true,
                GlyphTier::Sub => fy * fy + fx * fx <= c * c + 0.5,
                GlyphTier::Tert => fy.abs() + fx.abs() <= c + 0.25,
            };
            if inside {
                px.push((y0 + dy, x0 + dx));
            }
        }
    }
    px
}

/// Body silhouette style: 0 keeps every body a filled rectangle or
/// ellipse (by class parity); 1 gives each class its own silhouette.
const BODY_SHAPE_MODE: u8 = 0;

/// Pixels of a body within its bounding box.
fn body_pixels(bbox: Bbox, class: u8) -> Vec<(usize, usize)> {
    let mut px = Vec::new();
    let (ry, rx) = ((bbox.h - 1) as f64 / 2.0, (bbox.w - 1) as f64 / 2.0);
    for dy in 0..bbox.h {
        for dx in 0..bbox.w {
            let (fy, fx) = (dy as f64 - ry, dx as f64 - rx);
            let ellipse = (fy / ry) * (fy / ry) + (fx / rx) * (fx / rx) <= 1.0;
            let keep = if BODY_SHAPE_MODE == 0 {
                class % 2 == 0 || ellipse
            } else {
                match class % 5 {
                    0 => true,                                              // rectangle
                    1 => ellipse,                                           // ellipse
                    2 => fx.abs() / rx <= dy as f64 / (bbox.h - 1) as f64 + 0.02, // triangle
                    3 => fy.abs() <= ry / 2.0 || fx.abs() <= rx / 2.0,      // cross
                    _ => fy.abs() / ry + fx.abs() / rx <= 1.0,              // diamond
                }
            };
            if keep {
                px.push((bbox.y0 + dy, bbox.x0 + dx));
            }
        }
    }
    px
}

/// Background: smooth two-color gradient plus low-amplitude noise.
/// Returns the image and the gradient midpoint color.
fn paint_background<R: Rng + ?Sized>(rng: &mut R, h: usize, w: usize) -> (Image, [f64; 3]) {
    // Dark and hue-neutral: per-image luminance varies but the channel
    // spread stays tiny, so every saturated glyph color keeps a large
    // margin over the background in at least one channel and no class
    // palette direction aligns with background pixels.
    let lum = uniform(rng, 0.14, 0.26);
    let base = [
        lum + uniform(rng, -0.02, 0.02),
        lum + uniform(rng, -0.02, 0.02),
        lum + uniform(rng, -0.02, 0.02),
    ];
    // Mostly-luminance gradient: the chromatic component is kept well
    // below the low-contrast body offset so that offset never looks like
    // plain background shading.
    let dlum = uniform(rng, -0.04, 0.04);
    let delta: [f64; 3] = core::array::from_fn(|_| dlum + uniform(rng, -0.015, 0.015));
    // gradient axis: horizontal, vertical, or one of the diagonals
    let (gy, gx): (f64, f64) = match rng.random_range(0..4u8) {
        0 => (0.0, 1.0),
        1 => (1.0, 0.0),
        2 => (1.0, 1.0),
        _ => (1.0, -1.0),
    };
    let span = gy * (h - 1) as f64 + gx.abs() * (w - 1) as f64;
    let mut img = Image::new(h, w);
    for y in 0..h {
        for x in 0..w {
            let raw = gy * y as f64 + if gx >= 0.0 { gx * x as f64 } else { -gx * (w - 1 - x) as f64 };
            let t = raw / span;
            let mut rgb = [0.0; 3];
            for (c, out) in rgb.iter_mut().enumerate() {
                *out = base[c] + delta[c] * t + uniform(rng, -0.01, 0.01);
            }
            img.set_pixel(y, x, rgb);
        }
    }
    let mid = core::array::from_fn(|c| base[c] + delta[c] * 0.5);
    (img, mid)
}

fn try_scene(spec: &SceneSpec, rng: &mut ChaCha8Rng, id: u32) -> Option<GeneratedScene> {
    let (h, w) = (spec.h, spec.w);
    let (mut img, bg_mid) = paint_background(rng, h, w);

    let count = rng.random_range(spec.min_objects..=spec.max_objects);
    let mut classes: Vec<u8> = (0..spec.num_classes as u8).collect();
    rand::seq::SliceRandom::shuffle(classes.as_mut_slice(), rng);
    classes.truncate(count);

    // Place objects, protecting earlier markers from occlusion.
    let mut placed: Vec<PlacedObject> = Vec::with_capacity(count);
    'class_loop: for &class in &classes {
        for _attempt in 0..100 {
            let bh = rng.random_range(BODY_MIN..=BODY_MAX);
            let bw = rng.random_range(BODY_MIN..=BODY_MAX);
            let body_bbox = Bbox {
                y0: rng.random_range(BORDER_MARGIN..=h - BORDER_MARGIN - bh),
                x0: rng.random_range(BORDER_MARGIN..=w - BORDER_MARGIN - bw),
                h: bh,
                w: bw,
            };
            let occludes_a_marker = placed.iter().any(|p| {
                body_bbox.overlap_area(&p.marker_bbox) as f64
                    > MARKER_OCCLUSION_LIMIT * p.marker_bbox.area() as f64
                    || body_bbox.overlap_area(&p.sub_bbox) as f64
                        > MARKER_OCCLUSION_LIMIT * p.sub_bbox.area() as f64
                    || body_bbox.overlap_area(&p.tert_bbox) as f64
                        > MARKER_OCCLUSION_LIMIT * p.tert_bbox.area() as f64
            });
            if occludes_a_marker {
                continue;
            }

            let body = body_pixels(body_bbox, class);

            // Marker small relative to the actual body pixel count.
            let mut m = rng.random_range(MARKER_MIN..=MARKER_MAX);
            while m > MARKER_MIN && m * m * 4 > body.len() {
                m -= 1;
            }
            let m2 = rng.random_range(SUB_MIN..=SUB_MAX);
            let m3 = rng.random_range(TERT_MIN..=TERT_MAX);
            // The three glyphs land on random body spots, forced apart
            // so erasing one leaves the others intact.
            let mut glyphs = None;
            for _ in 0..30 {
                let my = rng.random_range(body_bbox.y0..=body_bbox.y0 + bh - m);
                let mx = rng.random_range(body_bbox.x0..=body_bbox.x0 + bw - m);
                let sy = rng.random_range(body_bbox.y0..=body_bbox.y0 + bh - m2);
                let sx = rng.random_range(body_bbox.x0..=body_bbox.x0 + bw - m2);
                let ty = rng.random_range(body_bbox.y0..=body_bbox.y0 + bh - m3);
                let tx = rng.random_range(body_bbox.x0..=body_bbox.x0 + bw - m3);
                let marker_bbox = Bbox { y0: my, x0: mx, h: m, w: m };
                let sub_bbox = Bbox { y0: sy, x0: sx, h: m2, w: m2 };
                let tert_bbox = Bbox { y0: ty, x0: tx, h: m3, w: m3 };
                let centers = [
                    (my + m / 2, mx + m / 2),
                    (sy + m2 / 2, sx + m2 / 2),
                    (ty + m3 / 2, tx + m3 / 2),
                ];
                let spread_ok = centers.iter().enumerate().all(|(i, a)| {
                    centers[i + 1..]
                        .iter()
                        .all(|b| a.0.abs_diff(b.0) + a.1.abs_diff(b.1) >= (bh + bw) / 4)
                });
                let disjoint = marker_bbox.overlap_area(&sub_bbox) == 0
                    && marker_bbox.overlap_area(&tert_bbox) == 0
                    && sub_bbox.overlap_area(&tert_bbox) == 0;
                if !spread_ok || !disjoint {
                    continue;
                }
                let marker = glyph_pixels(GlyphTier::Marker, my, mx, m);
                let sub = glyph_pixels(GlyphTier::Sub, sy, sx, m2);
                let tert = glyph_pixels(GlyphTier::Tert, ty, tx, m3);
                if marker
                    .iter()
                    .chain(sub.iter())
                    .chain(tert.iter())
                    .all(|p| body.binary_search(p).is_ok())
                {
                    glyphs = Some((marker, sub, tert, marker_bbox, sub_bbox, tert_bbox));
                    break;
                }
            }
            let Some((marker, sub, tert, marker_bbox, sub_bbox, tert_bbox)) = glyphs else {
                continue;
            };

            // Colors: shared muted base plus a faint class tint; the
            // low-contrast class hugs the background instead, shifted
            // along a fixed hue direction of the same small magnitude
            // so it stays classifiable while staying dim.
            let body_color: [f64; 3] = if class == spec.low_contrast_class() {
                let dir = [-0.02, 0.03, 0.10];
                core::array::from_fn(|c| bg_mid[c] + dir[c] + uniform(rng, -0.01, 0.01))
            } else {
                // Neutral gray base: luminance alone separates bodies from
                // the dark background but carries no class signal; only the
                // faint tint is discriminative, keeping body evidence far
                // weaker than any glyph.
                let base = [0.52, 0.52, 0.52];
                let tint = body_tint(class);
                core::array::from_fn(|c| base[c] + BODY_TINT * tint[c] + uniform(rng, -0.02, 0.02))
            };
            let mc = marker_color(class);
            let marker_color: [f64; 3] =
                core::array::from_fn(|c| mc[c] + uniform(rng, -0.03, 0.03));
            let sc = sub_color(class);
            let sub_color: [f64; 3] = core::array::from_fn(|c| sc[c] + uniform(rng, -0.03, 0.03));
            let tc = tert_color(class);
            let tert_color: [f64; 3] =
                core::array::from_fn(|c| tc[c] + uniform(rng, -0.03, 0.03));

            placed.push(PlacedObject {
                class,
                body,
                marker,
                sub,
                tert,
                body_bbox,
                marker_bbox,
                sub_bbox,
                tert_bbox,
                body_color,
                marker_color,
                sub_color,
                tert_color,
            });
            continue 'class_loop;
        }
        return None; // placement failed; caller retries on a new stream
    }

    // Paint in placement order (later objects on top) and build GT.
    let mut gt = SegMask::filled(h, w, 0);
    for p in &placed {
        for &(y, x) in &p.body {
            let rgb = core::array::from_fn(|c| {
                (p.body_color[c] + uniform(rng, -0.01, 0.01)).clamp(0.02, 0.98)
            });
            img.set_pixel(y, x, rgb);
            gt.set(y, x, p.class + 1);
        }
        for &(y, x) in &p.tert {
            let rgb = core::array::from_fn(|c| p.tert_color[c].clamp(0.02, 0.98));
            img.set_pixel(y, x, rgb);
            gt.set(y, x, p.class + 1);
        }
        for &(y, x) in &p.sub {
            let rgb = core::array::from_fn(|c| p.sub_color[c].clamp(0.02, 0.98));
            img.set_pixel(y, x, rgb);
            gt.set(y, x, p.class + 1);
        }
        for &(y, x) in &p.marker {
            let rgb = core::array::from_fn(|c| p.marker_color[c].clamp(0.02, 0.98));
            img.set_pixel(y, x, rgb);
            gt.set(y, x, p.class + 1);
        }
    }
    for v in img.data_mut() {
        *v = v.clamp(0.02, 0.98);
    }

    // Visibility checks against the final (occluded) ground truth.
    for p in &placed {
        let owner = p.class + 1;
        // `body` covers the marker footprint, so it is the whole object.
        let total: usize = p.body.len();
        let visible_total = p
            .body
            .iter()
            .filter(|&&(y, x)| gt.get(y, x) == owner)
            .count();
        let marker_visible = p
            .marker
            .iter()
            .filter(|&&(y, x)| gt.get(y, x) == owner)
            .count();
        let sub_visible = p
            .sub
            .iter()
            .filter(|&&(y, x)| gt.get(y, x) == owner)
            .count();
        let tert_visible = p
            .tert
            .iter()
            .filter(|&&(y, x)| gt.get(y, x) == owner)
            .count();
        let ok = marker_visible as f64 >= 0.8 * p.marker.len() as f64
            && sub_visible as f64 >= 0.7 * p.sub.len() as f64
            && tert_visible as f64 >= 0.7 * p.tert.len() as f64
            && visible_total as f64 >= 0.5 * total as f64
            && (marker_visible as f64) <= 0.22 * visible_total as f64;
        if !ok {
            return None;
        }
    }

    let labels = LabelSet::from_classes(&classes);
    debug_assert_eq!(
        labels,
        LabelSet::from_classes(
            &gt.present_labels()
                .iter()
                .filter(|&&l| l != 0)
                .map(|&l| l - 1)
                .collect::<Vec<_>>()
        ),
        "label set must equal the classes visible in ground truth"
    );

    let objects = placed
        .iter()
        .map(|p| ObjectInfo {
            class: p.class,
            body_bbox: p.body_bbox,
            marker_bbox: p.marker_bbox,
            sub_marker_bbox: p.sub_bbox,
            tert_marker_bbox: p.tert_bbox,
        })
        .collect();
    Some(GeneratedScene {
        sample: Sample {
            id,
            image: img,
            labels,
            gt,
        },
        objects,
    })
}

/// Generates the scene for one image id, retrying failed placements on
/// fresh RNG streams.
pub fn generate_scene(spec: &SceneSpec, id: u32) -> Result<GeneratedScene> {
    spec.validate()?;
    for attempt in 0..64u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(id as u64 * 64 + attempt);
        if let Some(scene) = try_scene(spec, &mut rng, id) {
            return Ok(scene);
        }
    }
    Err(CoreError::Config {
        detail: alloc::format!("could not place objects for image {id} after 64 scene attempts"),
    })
}

/// Per-channel mean over all pixels of all samples.
pub fn mean_pixel(samples: &[Sample]) -> [f64; 3] {
    let mut sums = [0.0f64; 3];
    let mut n = 0usize;
    for s in samples {
        let plane = s.image.h() * s.image.w();
        for c in 0..3 {
            sums[c] += s.image.data()[c * plane..(c + 1) * plane].iter().sum::<f64>();
        }
        n += plane;
    }
    core::array::from_fn(|c| sums[c] / n as f64)
}

/// Generates `count` scenes with ids starting at `start_id`.
pub fn generate_scenes(spec: &SceneSpec, start_id: u32, count: usize) -> Result<Vec<GeneratedScene>> {
    (0..count)
        .map(|i| generate_scene(spec, start_id + i as u32))
        .collect()
}

/// Convenience: a self-contained split with ids 0..count and its own
/// mean pixel.
pub fn generate_set(spec: &SceneSpec, count: usize) -> Result<ImageSet> {
    let samples: Vec<Sample> = generate_scenes(spec, 0, count)?
        .into_iter()
        .map(|s| s.sample)
        .collect();
    let mean = mean_pixel(&samples);
    Ok(ImageSet {
        samples,
        num_classes: spec.num_classes,
        mean_pixel: mean,
    })
}
