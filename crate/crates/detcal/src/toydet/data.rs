//! Synthetic dense-detection scenes.
//!
//! A scene is a 16x16 grid of 3-channel cells. Cells covered by an object
//! carry a class-dependent intensity in channel 0 and the offset of the
//! object center from the cell center in channels 1 and 2; background cells
//! carry zeros. Gaussian noise is added everywhere, so classification and
//! localization both have irreducible error. The shift knob scales noise up
//! and signal contrast down to emulate out-of-domain evaluation.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{GroundTruthObject, NormBox};

pub const GRID_H: usize = 16;
pub const GRID_W: usize = 16;
pub const CHANNELS: usize = 3;

/// Base per-channel noise level at shift 0.
const BASE_NOISE: f64 = 0.05;
/// Noise grows linearly with shift: sigma = BASE * (1 + NOISE_GAIN * shift).
const NOISE_GAIN: f64 = 0.8;
/// Signal contrast shrinks with shift: contrast = 1 / (1 + FADE * shift).
const CONTRAST_FADE: f64 = 0.3;

const MIN_OBJ_SIZE: f64 = 0.30;
const MAX_OBJ_SIZE: f64 = 0.40;
/// New objects are resampled while overlapping an existing one above this.
const MAX_OBJ_OVERLAP: f64 = 0.2;

/// One synthetic scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticScene {
    pub image_id: i64,
    /// Row-major H x W x C features.
    pub features: Vec<f64>,
    pub objects: Vec<GroundTruthObject>,
    pub seed: u64,
}

impl SyntheticScene {
    pub fn feature(&self, row: usize, col: usize, ch: usize) -> f64 {
        self.features[(row * GRID_W + col) * CHANNELS + ch]
    }
}

/// Center of a grid cell in normalized coordinates.
pub fn cell_center(row: usize, col: usize) -> (f64, f64) {
    (
        (col as f64 + 0.5) / GRID_W as f64,
        (row as f64 + 0.5) / GRID_H as f64,
    )
}

/// Class frequencies fall off geometrically (each class roughly 60% as
/// frequent as the previous), mirroring the long-tailed occupancy that
/// real detection datasets have.
fn sample_label(rng: &mut Rng, num_classes: usize) -> usize {
    let weights: Vec<f64> = (0..num_classes).map(|k| 0.6f64.powi(k as i32)).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.uniform() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    num_classes - 1
}

fn point_in_box(x: f64, y: f64, b: &NormBox) -> bool {
    let (x1, y1, x2, y2) = b.corners();
    x >= x1 && x <= x2 && y >= y1 && y <= y2
}

/// Object covering a point, smallest area first; ties keep the earlier
/// object.
pub(crate) fn covering_object(objects: &[GroundTruthObject], x: f64, y: f64) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, obj) in objects.iter().enumerate() {
        if !point_in_box(x, y, &obj.box_) {
            continue;
        }
        best = match best {
            None => Some(i),
            Some(j) if obj.box_.area() < objects[j].box_.area() => Some(i),
            keep => keep,
        };
    }
    best
}

/// Class intensity for channel 0 before contrast scaling. The offset
/// keeps background (signal 0) separable from every class even under
/// domain shift; the step between classes is what shift erodes first.
pub(crate) fn class_signal(label: usize, _num_classes: usize) -> f64 {
    0.55 + 0.25 * label as f64
}

/// Generate a reproducible dataset. Scene i depends only on (seed, i), so
/// prefixes of a larger dataset are stable. shift_level 0 is in-domain;
/// larger values raise the noise floor and fade the signal.
pub fn generate_dataset(
    n_scenes: usize,
    num_classes: usize,
    shift_level: f64,
    seed: u64,
) -> Result<Vec<SyntheticScene>> {
    if n_scenes == 0 {
        return Err(Error::InvalidParam("n_scenes must be positive".into()));
    }
    if num_classes == 0 {
        return Err(Error::InvalidParam("need at least one class".into()));
    }
    if !(shift_level.is_finite() && shift_level >= 0.0) {
        return Err(Error::InvalidParam(format!(
            "shift level {shift_level} must be finite and >= 0"
        )));
    }
    Ok((0..n_scenes)
        .map(|i| generate_scene(i as i64, num_classes, shift_level, seed))
        .collect())
}

fn generate_scene(
    image_id: i64,
    num_classes: usize,
    shift_level: f64,
    seed: u64,
) -> SyntheticScene {
    let mut rng = Rng::derive(seed, image_id as u64);
    let sigma = BASE_NOISE * (1.0 + NOISE_GAIN * shift_level);
    let contrast = 1.0 / (1.0 + CONTRAST_FADE * shift_level);

    let n_objects = 1 + rng.below(3);
    let mut objects: Vec<GroundTruthObject> = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        for _attempt in 0..20 {
            let w = rng.range(MIN_OBJ_SIZE, MAX_OBJ_SIZE);
            let h = rng.range(MIN_OBJ_SIZE, MAX_OBJ_SIZE);
            let cx = rng.range(w / 2.0, 1.0 - w / 2.0);
            let cy = rng.range(h / 2.0, 1.0 - h / 2.0);
            let box_ = NormBox::new(cx, cy, w, h).expect("sampled box in range");
            let crowded = objects
                .iter()
                .any(|o| crate::types::iou(&o.box_, &box_) > MAX_OBJ_OVERLAP);
            if !crowded {
                objects.push(GroundTruthObject::new(
                    image_id,
                    sample_label(&mut rng, num_classes),
                    box_,
                ));
                break;
            }
        }
    }
    debug_assert!(!objects.is_empty());

    let mut features = vec![0.0; GRID_H * GRID_W * CHANNELS];
    for row in 0..GRID_H {
        for col in 0..GRID_W {
            let (x, y) = cell_center(row, col);
            let (signal, dx, dy) = match covering_object(&objects, x, y) {
                Some(i) => {
                    let obj = &objects[i];
                    (
                        class_signal(obj.label, num_classes),
                        obj.box_.cx - x,
                        obj.box_.cy - y,
                    )
                }
                None => (0.0, 0.0, 0.0),
            };
            let base = (row * GRID_W + col) * CHANNELS;
            // Offset channels carry half the noise of the class channel:
            // localization stays learnable while classification keeps
            // irreducible error.
            features[base] = signal * contrast + sigma * rng.normal();
            features[base + 1] = dx * contrast + 0.5 * sigma * rng.normal();
            features[base + 2] = dy * contrast + 0.5 * sigma * rng.normal();
        }
    }

    SyntheticScene {
        image_id,
        features,
        objects,
        seed,
    }
}

/// Target for one positive cell.
#[derive(Debug, Clone, PartialEq)]
pub struct CellTarget {
    pub class: usize,
    pub box_: NormBox,
    pub object_index: usize,
}

/// Per-cell assignment: a cell is positive iff its center lies inside a
/// ground-truth box, with overlaps resolved to the smallest-area box.
/// Everything else is background.
pub fn assign_positives(scene: &SyntheticScene) -> Vec<Option<CellTarget>> {
    (0..GRID_H * GRID_W)
        .map(|cell| {
            let (row, col) = (cell / GRID_W, cell % GRID_W);
            let (x, y) = cell_center(row, col);
            covering_object(&scene.objects, x, y).map(|i| CellTarget {
                class: scene.objects[i].label,
                box_: scene.objects[i].box_,
                object_index: i,
            })
        })
        .collect()
}
