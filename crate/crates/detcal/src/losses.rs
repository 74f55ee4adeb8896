//! Train-time auxiliary calibration losses, differentiable end to end.
//!
//! The multiclass confidence loss (MCC) pulls the minibatch mean of the
//! fused confidence/certainty vector toward the minibatch mean of the
//! one-hot ground-truth occurrence per class. The localization loss (LC)
//! pulls the joint box certainty toward the actual overlap of the mean box
//! with its ground truth. MCC normalizes by the global positive count M;
//! LC averages per sample first — each exactly as defined, even though the
//! two normalizations differ.
//!
//! Samples that contribute no positive locations never appear in a batch,
//! so the per-sample average in LC runs over samples with at least one
//! positive.

use crate::autodiff::{mean, softmax, sum, Tape, Value};
use crate::error::{Error, Result};
use crate::types::NormBox;
use crate::uncertainty::McSamples;

/// One positive dense-prediction location, lifted onto a tape.
pub struct PositiveLocation<'t> {
    /// Minibatch sample this location belongs to.
    pub sample_index: usize,
    /// Location index within the sample (bookkeeping only).
    pub location_index: usize,
    /// N passes x K foreground class logits.
    pub logits: Vec<Vec<Value<'t>>>,
    /// N passes x decoded normalized (cx, cy, w, h).
    pub boxes: Vec<[Value<'t>; 4]>,
    /// Ground-truth class, an index into 0..K.
    pub gt_class: usize,
    pub gt_box: NormBox,
}

/// Plain-data twin of [`PositiveLocation`] for callers that only need the
/// loss values, not gradients.
#[derive(Debug, Clone)]
pub struct PositiveSample {
    pub sample_index: usize,
    pub location_index: usize,
    pub mc: McSamples,
    pub gt_class: usize,
    pub gt_box: NormBox,
}

impl<'t> PositiveLocation<'t> {
    /// Lift f64 samples onto a tape.
    pub fn from_sample(tape: &'t Tape, s: &PositiveSample) -> Self {
        PositiveLocation {
            sample_index: s.sample_index,
            location_index: s.location_index,
            logits: s.mc.logits.iter().map(|row| tape.values(row)).collect(),
            boxes: s
                .mc
                .boxes
                .iter()
                .map(|b| [tape.value(b[0]), tape.value(b[1]), tape.value(b[2]), tape.value(b[3])])
                .collect(),
            gt_class: s.gt_class,
            gt_box: s.gt_box,
        }
    }

    fn n_classes(&self) -> usize {
        self.logits[0].len()
    }

    fn validate(&self) -> Result<()> {
        let k = self.n_classes();
        if self.logits.iter().any(|row| row.len() != k) {
            return Err(Error::LengthMismatch("ragged logit matrix".into()));
        }
        if self.logits.len() != self.boxes.len() {
            return Err(Error::LengthMismatch(format!(
                "{} logit rows vs {} box rows",
                self.logits.len(),
                self.boxes.len()
            )));
        }
        if self.logits.len() < 2 {
            return Err(Error::TooFewPasses(self.logits.len()));
        }
        if self.gt_class >= k {
            return Err(Error::ClassOutOfRange {
                label: self.gt_class,
                num_classes: k,
            });
        }
        Ok(())
    }
}

/// Combined auxiliary loss, still attached to the tape.
pub struct AuxLossOutput<'t> {
    pub l_mcc: Value<'t>,
    pub l_lc: Value<'t>,
    /// l_mcc + beta * l_lc.
    pub total: Value<'t>,
    pub beta: f64,
}

/// Element-wise fusion (mean_conf + certainty) / 2.
pub fn fuse<'t>(mean_conf: &[Value<'t>], certainty: &[Value<'t>]) -> Result<Vec<Value<'t>>> {
    if mean_conf.len() != certainty.len() {
        return Err(Error::LengthMismatch(format!(
            "{} confidences vs {} certainties",
            mean_conf.len(),
            certainty.len()
        )));
    }
    Ok(mean_conf
        .iter()
        .zip(certainty)
        .map(|(&s, &c)| (s + c) * 0.5)
        .collect())
}

/// Per-class mean logits -> softmax, on tape values.
fn mean_confidence_values<'t>(logits: &[Vec<Value<'t>>]) -> Vec<Value<'t>> {
    let k = logits[0].len();
    let mean_logits: Vec<Value<'t>> = (0..k)
        .map(|c| mean(&logits.iter().map(|row| row[c]).collect::<Vec<_>>()))
        .collect();
    softmax(&mean_logits)
}

/// Per-class 1 - tanh(population variance), on tape values.
fn classwise_certainty_values<'t>(logits: &[Vec<Value<'t>>]) -> Vec<Value<'t>> {
    let n = logits.len();
    let k = logits[0].len();
    (0..k)
        .map(|c| {
            let col: Vec<Value<'t>> = logits.iter().map(|row| row[c]).collect();
            let m = mean(&col);
            let var = sum(&col.iter().map(|&z| (z - m).powi(2)).collect::<Vec<_>>())
                / n as f64;
            1.0 - var.tanh()
        })
        .collect()
}

/// Fused confidence/certainty vector for one location.
fn fused_vector<'t>(loc: &PositiveLocation<'t>) -> Vec<Value<'t>> {
    let s = mean_confidence_values(&loc.logits);
    let c = classwise_certainty_values(&loc.logits);
    fuse(&s, &c).expect("same class count by construction")
}

/// MCC aggregation over already-fused vectors. `M` is the number of fused
/// vectors; the ground truth enters as per-class occurrence counts.
pub(crate) fn mcc_from_fused<'t>(
    fused: &[Vec<Value<'t>>],
    gt_classes: &[usize],
    n_classes: usize,
) -> Value<'t> {
    let m = fused.len() as f64;
    let mut class_terms = Vec::with_capacity(n_classes);
    for k in 0..n_classes {
        let v_sum = sum(&fused.iter().map(|v| v[k]).collect::<Vec<_>>());
        let q_count = gt_classes.iter().filter(|&&g| g == k).count() as f64;
        class_terms.push((v_sum / m - q_count / m).abs());
    }
    sum(&class_terms) / n_classes as f64
}

/// Multiclass confidence calibration loss over a minibatch of positive
/// locations. M is the total positive count across the batch.
pub fn mcc_loss<'t>(batch: &[PositiveLocation<'t>]) -> Result<Value<'t>> {
    if batch.is_empty() {
        return Err(Error::NoPositiveLocations);
    }
    let k = batch[0].n_classes();
    for loc in batch {
        loc.validate()?;
        if loc.n_classes() != k {
            return Err(Error::LengthMismatch(
                "locations disagree on class count".into(),
            ));
        }
    }
    let fused: Vec<Vec<Value<'t>>> = batch.iter().map(fused_vector).collect();
    let gt: Vec<usize> = batch.iter().map(|l| l.gt_class).collect();
    Ok(mcc_from_fused(&fused, &gt, k))
}

/// Differentiable IoU of a predicted box (tape values) against a fixed
/// ground-truth box. Gradient flows through min/max; the ground-truth
/// area keeps the union strictly positive.
pub fn iou_value<'t>(pred: &[Value<'t>; 4], gt: &NormBox) -> Value<'t> {
    let (gx1, gy1, gx2, gy2) = gt.corners();
    let half_w = pred[2] * 0.5;
    let half_h = pred[3] * 0.5;
    let ax1 = pred[0] - half_w;
    let ax2 = pred[0] + half_w;
    let ay1 = pred[1] - half_h;
    let ay2 = pred[1] + half_h;
    let iw = (ax2.minimum_c(gx2) - ax1.maximum_c(gx1)).maximum_c(0.0);
    let ih = (ay2.minimum_c(gy2) - ay1.maximum_c(gy1)).maximum_c(0.0);
    let inter = iw * ih;
    let union = pred[2] * pred[3] + gt.area() - inter;
    inter / union
}

/// Joint box certainty on tape values (mirrors `uncertainty::box_certainty`).
pub fn box_certainty_value<'t>(boxes: &[[Value<'t>; 4]]) -> Result<Value<'t>> {
    if boxes.len() < 2 {
        return Err(Error::TooFewPasses(boxes.len()));
    }
    let n = boxes.len() as f64;
    let means: Vec<Value<'t>> = (0..4)
        .map(|j| mean(&boxes.iter().map(|b| b[j]).collect::<Vec<_>>()))
        .collect();
    let mu_com = sum(&means) / 4.0;
    let mut terms = Vec::with_capacity(4);
    for j in 0..4 {
        let var = sum(
            &boxes
                .iter()
                .map(|b| (b[j] - means[j]).powi(2))
                .collect::<Vec<_>>(),
        ) / n;
        let dev = means[j] - mu_com;
        terms.push(var + dev.powi(2));
    }
    let u = sum(&terms) / 4.0;
    Ok(1.0 - u.tanh())
}

/// Mean box (per-parameter mean over passes) on tape values.
pub fn box_mean_value<'t>(boxes: &[[Value<'t>; 4]]) -> [Value<'t>; 4] {
    let col = |j: usize| mean(&boxes.iter().map(|b| b[j]).collect::<Vec<_>>());
    [col(0), col(1), col(2), col(3)]
}

/// LC aggregation: per-sample mean of the gaps, then mean over samples.
/// `sample_indices[i]` tags which sample gap i belongs to.
pub(crate) fn lc_aggregate<'t>(sample_indices: &[usize], gaps: &[Value<'t>]) -> Value<'t> {
    use std::collections::BTreeMap;
    let mut by_sample: BTreeMap<usize, Vec<Value<'t>>> = BTreeMap::new();
    for (&s, &g) in sample_indices.iter().zip(gaps) {
        by_sample.entry(s).or_default().push(g);
    }
    let per_sample: Vec<Value<'t>> = by_sample
        .values()
        .map(|gaps| sum(gaps) / gaps.len() as f64)
        .collect();
    sum(&per_sample) / per_sample.len() as f64
}

/// Localization calibration loss: |IoU(mean box, gt box) - box certainty|,
/// averaged within each sample and then across samples.
pub fn lc_loss<'t>(batch: &[PositiveLocation<'t>]) -> Result<Value<'t>> {
    if batch.is_empty() {
        return Err(Error::NoPositiveLocations);
    }
    let mut sample_indices = Vec::with_capacity(batch.len());
    let mut gaps = Vec::with_capacity(batch.len());
    for loc in batch {
        loc.validate()?;
        let mean_box = box_mean_value(&loc.boxes);
        let overlap = iou_value(&mean_box, &loc.gt_box);
        let certainty = box_certainty_value(&loc.boxes)?;
        sample_indices.push(loc.sample_index);
        gaps.push((overlap - certainty).abs());
    }
    Ok(lc_aggregate(&sample_indices, &gaps))
}

/// Combined auxiliary loss: MCC plus beta-weighted LC.
pub fn mccl_aux<'t>(batch: &[PositiveLocation<'t>], beta: f64) -> Result<AuxLossOutput<'t>> {
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::InvalidParam(format!("beta {beta} must be >= 0")));
    }
    let l_mcc = mcc_loss(batch)?;
    let l_lc = lc_loss(batch)?;
    let total = l_mcc + l_lc * beta;
    Ok(AuxLossOutput {
        l_mcc,
        l_lc,
        total,
        beta,
    })
}

/// Forward-only evaluation from plain samples: (l_mcc, l_lc, total).
pub fn mccl_aux_values(batch: &[PositiveSample], beta: f64) -> Result<(f64, f64, f64)> {
    let tape = Tape::new();
    let lifted: Vec<PositiveLocation<'_>> = batch
        .iter()
        .map(|s| PositiveLocation::from_sample(&tape, s))
        .collect();
    let out = mccl_aux(&lifted, beta)?;
    Ok((out.l_mcc.value(), out.l_lc.value(), out.total.value()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;

    fn sample(
        sample_index: usize,
        logits: Vec<Vec<f64>>,
        boxes: Vec<[f64; 4]>,
        gt_class: usize,
        gt_box: NormBox,
    ) -> PositiveSample {
        PositiveSample {
            sample_index,
            location_index: 0,
            mc: McSamples::new(logits, boxes).unwrap(),
            gt_class,
            gt_box,
        }
    }

    fn nb(cx: f64, cy: f64, w: f64, h: f64) -> NormBox {
        NormBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn fuse_is_idempotent_on_equal_inputs() {
        let tape = Tape::new();
        let s = tape.values(&[0.2, 0.8]);
        let v = fuse(&s, &s).unwrap();
        assert_eq!(v[0].value(), 0.2);
        assert_eq!(v[1].value(), 0.8);
    }

    #[test]
    fn fuse_direct_formula() {
        let tape = Tape::new();
        let s = tape.values(&[1.0, 0.0]);
        let c = tape.values(&[1.0, 1.0]);
        let v = fuse(&s, &c).unwrap();
        assert_eq!(v[0].value(), 1.0);
        assert_eq!(v[1].value(), 0.5);
    }

    #[test]
    fn fuse_rejects_length_mismatch() {
        let tape = Tape::new();
        let s = tape.values(&[1.0, 0.0]);
        let c = tape.values(&[1.0]);
        assert!(fuse(&s, &c).is_err());
    }

    #[test]
    fn mcc_hand_case_from_fused_vectors() {
        // v1 = [0.7, 0.3], v2 = [0.4, 0.6], q1 = [1, 0], q2 = [0, 1]
        // means [0.55, 0.45] vs [0.5, 0.5] -> (0.05 + 0.05) / 2 = 0.05
        let tape = Tape::new();
        let fused = vec![tape.values(&[0.7, 0.3]), tape.values(&[0.4, 0.6])];
        let loss = mcc_from_fused(&fused, &[0, 1], 2);
        assert!((loss.value() - 0.05).abs() < 1e-12, "loss {}", loss.value());
    }

    #[test]
    fn mcc_zero_when_fused_matches_occurrences() {
        let tape = Tape::new();
        let fused = vec![tape.values(&[1.0, 0.0]), tape.values(&[0.0, 1.0])];
        let loss = mcc_from_fused(&fused, &[0, 1], 2);
        assert!(loss.value().abs() < 1e-15);
    }

    #[test]
    fn mcc_penalizes_growing_overconfidence() {
        // With q fixed, pushing v[0] further above the occurrence rate must
        // strictly increase the loss once the gap is positive.
        let tape = Tape::new();
        let mut prev = None;
        for bump in [0.0, 0.1, 0.2] {
            let fused = vec![
                tape.values(&[0.6 + bump, 0.4 - bump]),
                tape.values(&[0.6 + bump, 0.4 - bump]),
            ];
            let loss = mcc_from_fused(&fused, &[0, 1], 2).value();
            if let Some(p) = prev {
                assert!(loss > p, "loss {loss} not above {p}");
            }
            prev = Some(loss);
        }
    }

    #[test]
    fn mcc_invariant_to_location_permutation() {
        let a = sample(
            0,
            vec![vec![1.0, -0.5, 0.2], vec![0.8, -0.2, 0.1]],
            vec![[0.5, 0.5, 0.3, 0.3], [0.52, 0.5, 0.28, 0.3]],
            0,
            nb(0.5, 0.5, 0.3, 0.3),
        );
        let b = sample(
            0,
            vec![vec![-0.3, 0.9, 0.0], vec![-0.1, 1.2, 0.3]],
            vec![[0.3, 0.4, 0.2, 0.2], [0.31, 0.42, 0.22, 0.19]],
            1,
            nb(0.3, 0.4, 0.2, 0.2),
        );
        let fwd = |order: &[&PositiveSample]| {
            let tape = Tape::new();
            let lifted: Vec<_> = order
                .iter()
                .map(|s| PositiveLocation::from_sample(&tape, s))
                .collect();
            mcc_loss(&lifted).unwrap().value()
        };
        assert!((fwd(&[&a, &b]) - fwd(&[&b, &a])).abs() < 1e-12);
    }

    #[test]
    fn mcc_rejects_empty_batch() {
        let batch: Vec<PositiveLocation<'_>> = Vec::new();
        assert!(matches!(mcc_loss(&batch), Err(Error::NoPositiveLocations)));
    }

    #[test]
    fn lc_hand_case_aggregation() {
        // One sample, two locations with gaps 0.3 and 0.0 -> 0.15.
        let tape = Tape::new();
        let gaps = vec![tape.value(0.3), tape.value(0.0)];
        let loss = lc_aggregate(&[0, 0], &gaps);
        assert!((loss.value() - 0.15).abs() < 1e-15);
    }

    #[test]
    fn lc_per_sample_normalization() {
        // Sample 0 contributes mean(0.4), sample 1 contributes mean(0.1, 0.3)
        // -> (0.4 + 0.2) / 2 = 0.3, not the global mean 0.2666...
        let tape = Tape::new();
        let gaps = vec![tape.value(0.4), tape.value(0.1), tape.value(0.3)];
        let loss = lc_aggregate(&[0, 1, 1], &gaps);
        assert!((loss.value() - 0.3).abs() < 1e-15);
    }

    #[test]
    fn lc_duplicating_identical_locations_keeps_inner_mean() {
        let tape = Tape::new();
        let single = lc_aggregate(&[0], &[tape.value(0.25)]);
        let doubled = lc_aggregate(&[0, 0], &[tape.value(0.25), tape.value(0.25)]);
        assert_eq!(single.value(), doubled.value());
    }

    #[test]
    fn lc_zero_when_overlap_equals_certainty() {
        // Identical passes with all four parameters equal: certainty is 1
        // and IoU of the mean box with an identical ground truth is 1.
        let s = sample(
            0,
            vec![vec![2.0, 0.0], vec![2.0, 0.0]],
            vec![[0.5, 0.5, 0.5, 0.5], [0.5, 0.5, 0.5, 0.5]],
            0,
            nb(0.5, 0.5, 0.5, 0.5),
        );
        let tape = Tape::new();
        let lifted = vec![PositiveLocation::from_sample(&tape, &s)];
        let loss = lc_loss(&lifted).unwrap();
        assert!(loss.value().abs() < 1e-15, "loss {}", loss.value());
    }

    #[test]
    fn mccl_composes_components_exactly() {
        let a = sample(
            0,
            vec![vec![1.3, -0.2], vec![0.9, 0.1]],
            vec![[0.5, 0.5, 0.3, 0.3], [0.48, 0.52, 0.31, 0.29]],
            0,
            nb(0.5, 0.5, 0.3, 0.3),
        );
        let tape = Tape::new();
        let lifted = vec![PositiveLocation::from_sample(&tape, &a)];
        let out = mccl_aux(&lifted, 0.7).unwrap();
        assert_eq!(
            out.total.value(),
            out.l_mcc.value() + out.l_lc.value() * 0.7
        );

        let zero_beta = mccl_aux(&lifted, 0.0).unwrap();
        assert_eq!(zero_beta.total.value(), zero_beta.l_mcc.value());
    }

    #[test]
    fn mccl_rejects_negative_beta() {
        let tape = Tape::new();
        let a = sample(
            0,
            vec![vec![1.0], vec![0.5]],
            vec![[0.5, 0.5, 0.3, 0.3], [0.5, 0.5, 0.3, 0.3]],
            0,
            nb(0.5, 0.5, 0.3, 0.3),
        );
        let lifted = vec![PositiveLocation::from_sample(&tape, &a)];
        assert!(mccl_aux(&lifted, -0.1).is_err());
    }

    #[test]
    fn losses_bounded_in_unit_interval() {
        let a = sample(
            0,
            vec![vec![5.0, -5.0], vec![4.0, -3.0], vec![6.0, -4.0]],
            vec![
                [0.2, 0.2, 0.1, 0.1],
                [0.9, 0.9, 0.6, 0.6],
                [0.5, 0.1, 0.3, 0.9],
            ],
            1,
            nb(0.8, 0.8, 0.1, 0.1),
        );
        let tape = Tape::new();
        let lifted = vec![PositiveLocation::from_sample(&tape, &a)];
        let out = mccl_aux(&lifted, 1.0).unwrap();
        assert!((0.0..=1.0).contains(&out.l_mcc.value()));
        assert!((0.0..=1.0).contains(&out.l_lc.value()));
    }

    #[test]
    fn gradient_matches_finite_differences_small_batch() {
        // Two locations, N = 2 passes, K = 2 classes: 8 logits + 16 box
        // params as leaves, checked against central differences.
        let gt_a = nb(0.5, 0.5, 0.3, 0.3);
        let gt_b = nb(0.3, 0.6, 0.2, 0.25);
        // Box values picked so no mean corner coincides with a ground-truth
        // corner: min/max kinks sit well away from the evaluation point.
        let params = [
            0.7, -0.3, 0.5, -0.1, -0.4, 0.9, -0.2, 1.1, // logits
            0.52, 0.47, 0.28, 0.33, 0.55, 0.51, 0.30, 0.27, // boxes a
            0.327, 0.641, 0.233, 0.266, 0.281, 0.573, 0.172, 0.221, // boxes b
        ];
        let report = grad_check(move |_t, p| {
            let loc_a = PositiveLocation {
                sample_index: 0,
                location_index: 0,
                logits: vec![vec![p[0], p[1]], vec![p[2], p[3]]],
                boxes: vec![[p[8], p[9], p[10], p[11]], [p[12], p[13], p[14], p[15]]],
                gt_class: 0,
                gt_box: gt_a,
            };
            let loc_b = PositiveLocation {
                sample_index: 1,
                location_index: 0,
                logits: vec![vec![p[4], p[5]], vec![p[6], p[7]]],
                boxes: vec![[p[16], p[17], p[18], p[19]], [p[20], p[21], p[22], p[23]]],
                gt_class: 1,
                gt_box: gt_b,
            };
            mccl_aux(&[loc_a, loc_b], 1.0).unwrap().total
        }, &params, 1e-5, 1e-5);
        assert!(report.passed(), "max rel error {}", report.max_rel_error);
    }
}
