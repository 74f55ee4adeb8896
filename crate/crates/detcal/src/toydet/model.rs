//! Desk-scale dense detector.
//!
//! Each grid cell feeds its 3 features plus its own center coordinates
//! through a shared one-hidden-layer trunk; a classification head emits
//! K+1 logits (class K is background) and a regression head emits 4 raw
//! box parameters decoded into a normalized box anchored at the cell.
//! Dropout sits between the trunk and each head, so MC passes recompute
//! only the heads while the trunk is built once per scene.

use serde::{Deserialize, Serialize};

use crate::autodiff::{mean, Tape, Value};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::types::{Detection, NormBox};
use crate::uncertainty::McSamples;
use crate::util::{argmax, softmax_f64};

use super::data::{assign_positives, cell_center, CellTarget, SyntheticScene, CHANNELS, GRID_H, GRID_W};

/// Trunk input: the cell's feature channels. Position enters only through
/// the decode anchor, so no spatial prior can leak into the classifier.
pub const INPUT_DIM: usize = CHANNELS;
pub const DEFAULT_HIDDEN_DIM: usize = 16;

/// Box decode: w/h = sigmoid * SIZE_SPAN + SIZE_FLOOR keeps sizes in
/// (SIZE_FLOOR, SIZE_FLOOR + SIZE_SPAN), bounded away from degenerate 0.
/// The ranges are deliberately narrow around plausible object geometry;
/// wide ranges turn weight jitter into box jumps that destabilize the
/// IoU loss.
const SIZE_FLOOR: f64 = 0.15;
const SIZE_SPAN: f64 = 0.5;
/// Center offset reach: cx = cell_cx + tanh(t) * OFFSET_REACH, clamped.
/// A covering cell is never more than half an object away from the center.
const OFFSET_REACH: f64 = 0.25;

/// Dense detector parameters, stored flat for checkpointing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDetector {
    pub num_classes: usize,
    pub hidden_dim: usize,
    pub dropout_rate: f64,
    /// INPUT_DIM x hidden, row-major by input.
    pub w_trunk: Vec<f64>,
    pub b_trunk: Vec<f64>,
    /// hidden x (K+1), row-major by hidden unit.
    pub w_cls: Vec<f64>,
    pub b_cls: Vec<f64>,
    /// hidden x 4, row-major by hidden unit.
    pub w_reg: Vec<f64>,
    pub b_reg: Vec<f64>,
}

impl ToyDetector {
    /// Xavier-uniform initialization, deterministic in the seed.
    pub fn init(num_classes: usize, hidden_dim: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::InvalidParam("need at least one class".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidParam(format!(
                "dropout rate {dropout_rate} outside [0, 1)"
            )));
        }
        let mut rng = Rng::derive(seed, 0x6d6f64656c);
        let mut layer = |fan_in: usize, fan_out: usize| -> (Vec<f64>, Vec<f64>) {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = (0..fan_in * fan_out)
                .map(|_| rng.range(-limit, limit))
                .collect();
            (w, vec![0.0; fan_out])
        };
        let (w_trunk, b_trunk) = layer(INPUT_DIM, hidden_dim);
        let (w_cls, b_cls) = layer(hidden_dim, num_classes + 1);
        let (w_reg, b_reg) = layer(hidden_dim, 4);
        Ok(ToyDetector {
            num_classes,
            hidden_dim,
            dropout_rate,
            w_trunk,
            b_trunk,
            w_cls,
            b_cls,
            w_reg,
            b_reg,
        })
    }

    pub fn n_params(&self) -> usize {
        self.w_trunk.len()
            + self.b_trunk.len()
            + self.w_cls.len()
            + self.b_cls.len()
            + self.w_reg.len()
            + self.b_reg.len()
    }

    fn param_slices_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.w_trunk,
            &mut self.b_trunk,
            &mut self.w_cls,
            &mut self.b_cls,
            &mut self.w_reg,
            &mut self.b_reg,
        ]
    }

    /// Put every parameter on a tape as a leaf.
    pub fn lift<'t>(&self, tape: &'t Tape) -> ModelValues<'t> {
        ModelValues {
            w_trunk: tape.values(&self.w_trunk),
            b_trunk: tape.values(&self.b_trunk),
            w_cls: tape.values(&self.w_cls),
            b_cls: tape.values(&self.b_cls),
            w_reg: tape.values(&self.w_reg),
            b_reg: tape.values(&self.b_reg),
        }
    }

    /// SGD step: p -= lr * d(loss)/dp, using the handles from `lift`.
    pub fn apply_gradients(
        &mut self,
        handles: &ModelValues<'_>,
        grads: &crate::autodiff::Gradients,
        lr: f64,
    ) {
        let handle_groups = [
            &handles.w_trunk,
            &handles.b_trunk,
            &handles.w_cls,
            &handles.b_cls,
            &handles.w_reg,
            &handles.b_reg,
        ];
        for (params, values) in self.param_slices_mut().into_iter().zip(handle_groups) {
            for (p, &v) in params.iter_mut().zip(values.iter()) {
                *p -= lr * grads.wrt(v);
            }
        }
    }

    fn cell_input(scene: &SyntheticScene, cell: usize) -> [f64; INPUT_DIM] {
        let (row, col) = (cell / GRID_W, cell % GRID_W);
        [
            scene.feature(row, col, 0),
            scene.feature(row, col, 1),
            scene.feature(row, col, 2),
        ]
    }

    /// Forward one scene on a tape. `n_passes` MC passes run when a dropout
    /// stream is supplied and the dropout rate is positive; otherwise one
    /// deterministic pass stands in for all of them, which keeps the p = 0
    /// forward bit-identical to the baseline forward.
    pub fn forward_scene<'t>(
        &self,
        mv: &ModelValues<'t>,
        scene: &SyntheticScene,
        targets: &[Option<CellTarget>],
        n_passes: usize,
        mut dropout_rng: Option<&mut Rng>,
    ) -> SceneForward<'t> {
        assert!(n_passes >= 1);
        let k = self.num_classes;
        let hidden_dim = self.hidden_dim;
        let stochastic = self.dropout_rate > 0.0 && dropout_rng.is_some();
        let physical_passes = if stochastic { n_passes } else { 1 };
        let keep = 1.0 - self.dropout_rate;

        let mut mean_cls_logits = Vec::with_capacity(GRID_H * GRID_W);
        let mut positives = Vec::new();

        for cell in 0..GRID_H * GRID_W {
            let x = Self::cell_input(scene, cell);
            let (_, _) = (cell / GRID_W, cell % GRID_W);
            let (cell_cx, cell_cy) = cell_center(cell / GRID_W, cell % GRID_W);

            // Shared trunk, one evaluation per cell regardless of pass count.
            let hidden: Vec<Value<'t>> = (0..hidden_dim)
                .map(|j| {
                    let mut acc = mv.b_trunk[j];
                    for (i, &xi) in x.iter().enumerate() {
                        acc = acc + mv.w_trunk[i * hidden_dim + j] * xi;
                    }
                    acc.tanh()
                })
                .collect();

            let mut pass_logits: Vec<Vec<Value<'t>>> = Vec::with_capacity(physical_passes);
            let mut pass_boxes: Vec<[Value<'t>; 4]> = Vec::with_capacity(physical_passes);
            let is_positive = targets[cell].is_some();

            for _pass in 0..physical_passes {
                let (cls_in, reg_in) = if stochastic {
                    let rng = dropout_rng.as_deref_mut().expect("stochastic implies rng");
                    let mask = |rng: &mut Rng| -> Vec<f64> {
                        (0..hidden_dim)
                            .map(|_| if rng.bernoulli(keep) { 1.0 / keep } else { 0.0 })
                            .collect()
                    };
                    let m_cls = mask(rng);
                    let m_reg = mask(rng);
                    let apply = |m: &[f64]| -> Vec<Value<'t>> {
                        hidden.iter().zip(m).map(|(&h, &f)| h * f).collect()
                    };
                    (apply(&m_cls), apply(&m_reg))
                } else {
                    (hidden.clone(), hidden.clone())
                };

                let logits: Vec<Value<'t>> = (0..k + 1)
                    .map(|c| {
                        let mut acc = mv.b_cls[c];
                        for (j, &hj) in cls_in.iter().enumerate() {
                            acc = acc + hj * mv.w_cls[j * (k + 1) + c];
                        }
                        acc
                    })
                    .collect();
                pass_logits.push(logits);

                if is_positive {
                    let raw: Vec<Value<'t>> = (0..4)
                        .map(|c| {
                            let mut acc = mv.b_reg[c];
                            for (j, &hj) in reg_in.iter().enumerate() {
                                acc = acc + hj * mv.w_reg[j * 4 + c];
                            }
                            acc
                        })
                        .collect();
                    pass_boxes.push(decode_box(&raw, cell_cx, cell_cy));
                }
            }

            // Logical passes: replicate the single deterministic pass.
            if physical_passes == 1 && n_passes > 1 {
                pass_logits = vec![pass_logits[0].clone(); n_passes];
                if is_positive {
                    pass_boxes = vec![pass_boxes[0]; n_passes];
                }
            }

            let mean_logits: Vec<Value<'t>> = (0..k + 1)
                .map(|c| mean(&pass_logits.iter().map(|p| p[c]).collect::<Vec<_>>()))
                .collect();
            mean_cls_logits.push(mean_logits);

            if let Some(target) = &targets[cell] {
                let fg_logits: Vec<Vec<Value<'t>>> = pass_logits
                    .iter()
                    .map(|p| p[..k].to_vec())
                    .collect();
                let mean_box = [
                    mean(&pass_boxes.iter().map(|b| b[0]).collect::<Vec<_>>()),
                    mean(&pass_boxes.iter().map(|b| b[1]).collect::<Vec<_>>()),
                    mean(&pass_boxes.iter().map(|b| b[2]).collect::<Vec<_>>()),
                    mean(&pass_boxes.iter().map(|b| b[3]).collect::<Vec<_>>()),
                ];
                positives.push(ScenePositive {
                    cell,
                    gt_class: target.class,
                    gt_box: target.box_,
                    fg_logits,
                    boxes: pass_boxes,
                    mean_box,
                });
            }
        }

        SceneForward {
            mean_cls_logits,
            positives,
        }
    }

    /// MC-dropout samples for every positive cell of a scene, as plain
    /// numbers. The trunk is evaluated once; only head inputs are resampled.
    /// With dropout disabled all passes coincide.
    pub fn mc_forward(
        &self,
        scene: &SyntheticScene,
        n_passes: usize,
        seed: u64,
    ) -> Result<Vec<(usize, McSamples)>> {
        if n_passes < 2 {
            return Err(Error::TooFewPasses(n_passes));
        }
        let targets = assign_positives(scene);
        let tape = Tape::with_capacity(512 * 1024);
        let mv = self.lift(&tape);
        let mut rng = Rng::derive(seed, 0x6d63666f72 ^ scene.image_id as u64);
        let fwd = self.forward_scene(&mv, scene, &targets, n_passes, Some(&mut rng));
        fwd.positives
            .iter()
            .map(|p| {
                let logits: Vec<Vec<f64>> = p
                    .fg_logits
                    .iter()
                    .map(|row| row.iter().map(|v| v.value()).collect())
                    .collect();
                let boxes: Vec<[f64; 4]> = p
                    .boxes
                    .iter()
                    .map(|b| [b[0].value(), b[1].value(), b[2].value(), b[3].value()])
                    .collect();
                Ok((p.cell, McSamples::new(logits, boxes)?))
            })
            .collect()
    }

    /// Deterministic f64 forward for one cell (dropout off). Mirrors the
    /// tape arithmetic operation for operation so values agree bitwise.
    pub fn forward_cell_f64(&self, x: &[f64; INPUT_DIM]) -> (Vec<f64>, [f64; 4]) {
        let k = self.num_classes;
        let hidden: Vec<f64> = (0..self.hidden_dim)
            .map(|j| {
                let mut acc = self.b_trunk[j];
                for (i, &xi) in x.iter().enumerate() {
                    acc += self.w_trunk[i * self.hidden_dim + j] * xi;
                }
                acc.tanh()
            })
            .collect();
        let logits: Vec<f64> = (0..k + 1)
            .map(|c| {
                let mut acc = self.b_cls[c];
                for (j, &hj) in hidden.iter().enumerate() {
                    acc += hj * self.w_cls[j * (k + 1) + c];
                }
                acc
            })
            .collect();
        let mut raw = [0.0; 4];
        for (c, r) in raw.iter_mut().enumerate() {
            let mut acc = self.b_reg[c];
            for (j, &hj) in hidden.iter().enumerate() {
                acc += hj * self.w_reg[j * 4 + c];
            }
            *r = acc;
        }
        (logits, raw)
    }

    /// Detections from a deterministic single pass (dropout off): per-cell
    /// argmax over foreground classes, scored by the full softmax over all
    /// K+1 logits so that background mass discounts the confidence.
    /// Background and sub-threshold cells are dropped, then per-class NMS
    /// at IoU 0.5.
    pub fn infer(&self, scene: &SyntheticScene, score_threshold: f64) -> Vec<Detection> {
        let k = self.num_classes;
        let mut dets = Vec::new();
        for cell in 0..GRID_H * GRID_W {
            let x = Self::cell_input(scene, cell);
            let (logits, raw) = self.forward_cell_f64(&x);
            if argmax(&logits) == k {
                continue; // predicted background
            }
            let probs = softmax_f64(&logits);
            let label = argmax(&probs[..k]);
            let score = probs[label];
            if score < score_threshold {
                continue;
            }
            let (cell_cx, cell_cy) = cell_center(cell / GRID_W, cell % GRID_W);
            let b = decode_box_f64(&raw, cell_cx, cell_cy);
            let box_ = NormBox {
                cx: b[0],
                cy: b[1],
                w: b[2],
                h: b[3],
            };
            let mut det = Detection::new(scene.image_id, label, score, box_);
            det.logits = Some(logits);
            dets.push(det);
        }
        nms(dets, 0.5)
    }
}

/// Greedy per-class non-maximum suppression: keep by descending score
/// (ties keep earlier candidates) and suppress same-class boxes whose IoU
/// with a kept box strictly exceeds the threshold.
pub fn nms(mut detections: Vec<Detection>, iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&a, &b| {
        detections[b]
            .score
            .partial_cmp(&detections[a].score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut suppressed = vec![false; detections.len()];
    let mut kept_idx = Vec::new();
    for &i in &order {
        if suppressed[i] {
            continue;
        }
        kept_idx.push(i);
        for &j in &order {
            if j == i || suppressed[j] {
                continue;
            }
            if detections[j].label == detections[i].label
                && crate::types::iou(&detections[j].box_, &detections[i].box_) > iou_threshold
            {
                suppressed[j] = true;
            }
        }
    }
    kept_idx.sort_unstable();
    let mut kept: Vec<Detection> = Vec::with_capacity(kept_idx.len());
    for i in kept_idx.into_iter().rev() {
        kept.push(detections.swap_remove(i));
    }
    kept.reverse();
    kept
}

/// Parameter handles on a tape, mirroring [`ToyDetector`]'s layout.
pub struct ModelValues<'t> {
    pub w_trunk: Vec<Value<'t>>,
    pub b_trunk: Vec<Value<'t>>,
    pub w_cls: Vec<Value<'t>>,
    pub b_cls: Vec<Value<'t>>,
    pub w_reg: Vec<Value<'t>>,
    pub b_reg: Vec<Value<'t>>,
}

/// One positive cell of a scene forward pass.
pub struct ScenePositive<'t> {
    pub cell: usize,
    pub gt_class: usize,
    pub gt_box: NormBox,
    /// pass -> K foreground logits (background excluded).
    pub fg_logits: Vec<Vec<Value<'t>>>,
    /// pass -> decoded normalized box.
    pub boxes: Vec<[Value<'t>; 4]>,
    /// Per-parameter mean over passes.
    pub mean_box: [Value<'t>; 4],
}

/// Scene forward pass: per-cell mean logits plus per-positive MC samples.
pub struct SceneForward<'t> {
    /// cell -> K+1 mean logits over passes.
    pub mean_cls_logits: Vec<Vec<Value<'t>>>,
    pub positives: Vec<ScenePositive<'t>>,
}

/// Decode raw regression outputs into a normalized box anchored at the
/// cell center: center offsets reach +-OFFSET_REACH through tanh and are
/// clamped into the unit interval; sizes map through a sigmoid into
/// (SIZE_FLOOR, SIZE_FLOOR + SIZE_SPAN).
pub fn decode_box<'t>(raw: &[Value<'t>], cell_cx: f64, cell_cy: f64) -> [Value<'t>; 4] {
    let cx = (raw[0].tanh() * OFFSET_REACH + cell_cx).clamp(0.0, 1.0);
    let cy = (raw[1].tanh() * OFFSET_REACH + cell_cy).clamp(0.0, 1.0);
    let w = raw[2].sigmoid() * SIZE_SPAN + SIZE_FLOOR;
    let h = raw[3].sigmoid() * SIZE_SPAN + SIZE_FLOOR;
    [cx, cy, w, h]
}

/// f64 twin of [`decode_box`], same operations in the same order.
pub fn decode_box_f64(raw: &[f64; 4], cell_cx: f64, cell_cy: f64) -> [f64; 4] {
    let sigmoid = |x: f64| (x * 0.5).tanh() * 0.5 + 0.5;
    [
        (raw[0].tanh() * OFFSET_REACH + cell_cx).max(0.0).min(1.0),
        (raw[1].tanh() * OFFSET_REACH + cell_cy).max(0.0).min(1.0),
        sigmoid(raw[2]) * SIZE_SPAN + SIZE_FLOOR,
        sigmoid(raw[3]) * SIZE_SPAN + SIZE_FLOOR,
    ]
}

/// Serialized checkpoint: flat parameters, shape metadata, and the train
/// configuration that produced them.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: super::train::TrainConfig,
    pub input_dim: usize,
    pub grid: [usize; 3],
    pub model: ToyDetector,
}

impl Checkpoint {
    pub fn new(model: ToyDetector, config: super::train::TrainConfig) -> Self {
        Checkpoint {
            config,
            input_dim: INPUT_DIM,
            grid: [GRID_H, GRID_W, CHANNELS],
            model,
        }
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        crate::formats::write_atomic(path, json.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = crate::formats::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
        ckpt.validate()?;
        Ok(ckpt)
    }

    fn validate(&self) -> Result<()> {
        let m = &self.model;
        let k = m.num_classes;
        let checks = [
            (m.w_trunk.len(), INPUT_DIM * m.hidden_dim, "w_trunk"),
            (m.b_trunk.len(), m.hidden_dim, "b_trunk"),
            (m.w_cls.len(), m.hidden_dim * (k + 1), "w_cls"),
            (m.b_cls.len(), k + 1, "b_cls"),
            (m.w_reg.len(), m.hidden_dim * 4, "w_reg"),
            (m.b_reg.len(), 4, "b_reg"),
        ];
        for (got, want, name) in checks {
            if got != want {
                return Err(Error::InvalidValue(format!(
                    "checkpoint {name} has {got} values, expected {want}"
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toydet::data::generate_dataset;

    fn scene() -> SyntheticScene {
        generate_dataset(1, 3, 0.0, 77).unwrap().pop().unwrap()
    }

    #[test]
    fn init_is_deterministic() {
        let a = ToyDetector::init(3, 16, 0.1, 5).unwrap();
        let b = ToyDetector::init(3, 16, 0.1, 5).unwrap();
        assert_eq!(a, b);
        let c = ToyDetector::init(3, 16, 0.1, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tape_forward_matches_f64_forward_bitwise() {
        let model = ToyDetector::init(3, 16, 0.0, 5).unwrap();
        let scene = scene();
        let targets = assign_positives(&scene);
        let tape = Tape::new();
        let mv = model.lift(&tape);
        let fwd = model.forward_scene(&mv, &scene, &targets, 1, None);
        for cell in 0..GRID_H * GRID_W {
            let x = ToyDetector::cell_input(&scene, cell);
            let (logits, raw) = model.forward_cell_f64(&x);
            for (c, &l) in logits.iter().enumerate() {
                assert_eq!(fwd.mean_cls_logits[cell][c].value(), l);
            }
            if targets[cell].is_some() {
                let (ccx, ccy) = cell_center(cell / GRID_W, cell % GRID_W);
                let decoded = decode_box_f64(&raw, ccx, ccy);
                let p = fwd.positives.iter().find(|p| p.cell == cell).unwrap();
                for j in 0..4 {
                    assert_eq!(p.mean_box[j].value(), decoded[j]);
                }
            }
        }
    }

    #[test]
    fn zero_dropout_mc_passes_equal_single_pass_bitwise() {
        let model = ToyDetector::init(3, 16, 0.0, 9).unwrap();
        let scene = scene();
        let targets = assign_positives(&scene);

        let tape_multi = Tape::new();
        let mv = model.lift(&tape_multi);
        let mut rng = Rng::new(1);
        let multi = model.forward_scene(&mv, &scene, &targets, 5, Some(&mut rng));

        let tape_single = Tape::new();
        let mv1 = model.lift(&tape_single);
        let single = model.forward_scene(&mv1, &scene, &targets, 1, None);

        for cell in 0..GRID_H * GRID_W {
            for c in 0..4 {
                assert_eq!(
                    multi.mean_cls_logits[cell][c].value(),
                    single.mean_cls_logits[cell][c].value()
                );
            }
        }
        // All logical passes carry identical samples.
        for p in &multi.positives {
            assert_eq!(p.fg_logits.len(), 5);
            for pass in &p.fg_logits {
                for (a, b) in pass.iter().zip(&p.fg_logits[0]) {
                    assert_eq!(a.value(), b.value());
                }
            }
        }
    }

    #[test]
    fn dropout_spread_grows_with_rate() {
        let scene = scene();
        let spread = |p: f64| {
            let model = ToyDetector::init(3, 16, p, 9).unwrap();
            let samples = model.mc_forward(&scene, 8, 123).unwrap();
            let mut total = 0.0;
            let mut count = 0;
            for (_, mc) in &samples {
                for c in 0..mc.n_classes() {
                    let col: Vec<f64> = mc.logits.iter().map(|row| row[c]).collect();
                    let m = col.iter().sum::<f64>() / col.len() as f64;
                    total += col.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / col.len() as f64;
                    count += 1;
                }
            }
            total / count as f64
        };
        let s05 = spread(0.05);
        let s10 = spread(0.1);
        let s30 = spread(0.3);
        assert!(s05 < s10 && s10 < s30, "spreads {s05} {s10} {s30}");
    }

    #[test]
    fn mc_forward_deterministic_and_needs_two_passes() {
        let model = ToyDetector::init(3, 16, 0.1, 4).unwrap();
        let scene = scene();
        let a = model.mc_forward(&scene, 5, 42).unwrap();
        let b = model.mc_forward(&scene, 5, 42).unwrap();
        assert_eq!(a.len(), b.len());
        for ((ca, ma), (cb, mb)) in a.iter().zip(&b) {
            assert_eq!(ca, cb);
            assert_eq!(ma, mb);
        }
        assert!(model.mc_forward(&scene, 1, 42).is_err());
    }

    #[test]
    fn zero_dropout_mc_samples_have_unit_class_certainty() {
        // With dropout off all passes coincide: per-class logit variance is
        // exactly zero, so class certainty is exactly 1. Box certainty keeps
        // the dispersion of the four (unequal) box parameters around their
        // combined mean, so it is < 1 but must match the dispersion-only
        // joint uncertainty exactly.
        let model = ToyDetector::init(3, 16, 0.0, 4).unwrap();
        let scene = scene();
        for (_, mc) in model.mc_forward(&scene, 5, 42).unwrap() {
            let c = crate::uncertainty::classwise_certainty(&mc.logits).unwrap();
            assert!(c.iter().all(|&ci| ci == 1.0));
            let b = mc.boxes[0];
            let com = b.iter().sum::<f64>() / 4.0;
            let dispersion = b.iter().map(|&p| (p - com) * (p - com)).sum::<f64>() / 4.0;
            let g = crate::uncertainty::box_certainty(&mc.boxes).unwrap();
            assert!((g - (1.0 - dispersion.tanh())).abs() < 1e-12);
        }
    }

    #[test]
    fn decoded_boxes_always_valid() {
        for &t in &[-50.0, -3.0, 0.0, 3.0, 50.0] {
            let decoded = decode_box_f64(&[t, -t, t, -t], 0.03125, 0.96875);
            let b = NormBox {
                cx: decoded[0],
                cy: decoded[1],
                w: decoded[2],
                h: decoded[3],
            };
            b.validate().unwrap();
        }
    }

    #[test]
    fn infer_drops_background_and_applies_nms() {
        let model = ToyDetector::init(3, 16, 0.0, 11).unwrap();
        let scene = scene();
        let dets = model.infer(&scene, 0.0);
        // every emitted detection is a valid foreground prediction carrying
        // the full K+1 logit vector with its argmax at the label
        for d in &dets {
            assert!(d.label < 3);
            d.validate().unwrap();
            let logits = d.logits.as_ref().unwrap();
            assert_eq!(logits.len(), 4);
            assert_eq!(crate::util::argmax(logits), d.label);
        }
        // NMS: no same-class pair above 0.5 IoU survives
        for (i, a) in dets.iter().enumerate() {
            for b in &dets[i + 1..] {
                if a.label == b.label {
                    assert!(crate::types::iou(&a.box_, &b.box_) <= 0.5);
                }
            }
        }
    }

    #[test]
    fn nms_suppresses_lower_scored_overlap() {
        let b1 = NormBox::new(0.5, 0.5, 0.3, 0.3).unwrap();
        let b2 = NormBox::new(0.52, 0.5, 0.3, 0.3).unwrap();
        let far = NormBox::new(0.1, 0.1, 0.15, 0.15).unwrap();
        let dets = vec![
            Detection::new(0, 0, 0.6, b2),
            Detection::new(0, 0, 0.9, b1),
            Detection::new(0, 0, 0.5, far),
            Detection::new(0, 1, 0.4, b1), // other class survives
        ];
        let kept = nms(dets, 0.5);
        assert_eq!(kept.len(), 3);
        assert!(kept.iter().any(|d| d.score == 0.9));
        assert!(!kept.iter().any(|d| d.score == 0.6));
        assert!(kept.iter().any(|d| d.label == 1));
    }

    #[test]
    fn checkpoint_round_trip() {
        let model = ToyDetector::init(3, 16, 0.1, 21).unwrap();
        let config = super::super::train::TrainConfig::default();
        let dir = std::env::temp_dir().join(format!("detcal-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.json");
        Checkpoint::new(model.clone(), config).save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded.model, model);
        std::fs::remove_dir_all(&dir).ok();
    }
}
