//! Greedy prediction-to-ground-truth matching.
//!
//! A detection is correct when its class matches an annotated object of the
//! same image and their IoU exceeds the threshold; each ground truth can back
//! at most one detection, so duplicates of an already-claimed object count as
//! incorrect (COCO convention).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{iou, Detection, GroundTruthObject};

/// A detection joined with its correctness flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedDetection {
    pub detection: Detection,
    /// True iff the class matches and IoU with the claimed ground truth
    /// exceeds the matching threshold.
    pub correct: bool,
    /// Index into the ground-truth slice that was claimed, when correct.
    pub matched_gt: Option<usize>,
    /// IoU with the claimed ground truth; 0 when unmatched.
    pub iou: f64,
}

/// Matching configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MatchParams {
    /// IoU threshold; a match requires IoU strictly greater than this.
    pub iou_threshold: f64,
    /// When set, detections and annotations must carry labels < num_classes.
    pub num_classes: Option<usize>,
    /// Detections scoring below this are dropped before matching.
    pub min_score: f64,
}

impl Default for MatchParams {
    fn default() -> Self {
        MatchParams {
            iou_threshold: 0.5,
            num_classes: None,
            min_score: 0.0,
        }
    }
}

impl MatchParams {
    pub fn with_iou(iou_threshold: f64) -> Self {
        MatchParams {
            iou_threshold,
            ..Default::default()
        }
    }
}

/// Match detections against ground truth, class-aware and greedy by score.
///
/// Per image and class, detections are visited in descending score order
/// (ties keep input order) and each claims the unclaimed same-class ground
/// truth with the highest IoU, provided that IoU exceeds the threshold.
/// Every input detection appears exactly once in the output, in input order.
pub fn match_detections(
    detections: &[Detection],
    ground_truth: &[GroundTruthObject],
    params: &MatchParams,
) -> Result<Vec<MatchedDetection>> {
    if !(params.iou_threshold > 0.0 && params.iou_threshold < 1.0) {
        return Err(Error::InvalidParam(format!(
            "iou threshold {} outside (0, 1)",
            params.iou_threshold
        )));
    }
    if let Some(k) = params.num_classes {
        for d in detections {
            if d.label >= k {
                return Err(Error::ClassOutOfRange {
                    label: d.label,
                    num_classes: k,
                });
            }
        }
        for g in ground_truth {
            if g.label >= k {
                return Err(Error::ClassOutOfRange {
                    label: g.label,
                    num_classes: k,
                });
            }
        }
    }

    let kept: Vec<usize> = (0..detections.len())
        .filter(|&i| detections[i].score >= params.min_score)
        .collect();

    // Group ground truths and kept detections by (image, class).
    let mut gt_groups: HashMap<(i64, usize), Vec<usize>> = HashMap::new();
    for (gi, g) in ground_truth.iter().enumerate() {
        gt_groups.entry((g.image_id, g.label)).or_default().push(gi);
    }
    let mut det_groups: HashMap<(i64, usize), Vec<usize>> = HashMap::new();
    for &di in &kept {
        let d = &detections[di];
        det_groups.entry((d.image_id, d.label)).or_default().push(di);
    }

    let mut gt_claimed = vec![false; ground_truth.len()];
    let mut results: HashMap<usize, MatchedDetection> = HashMap::with_capacity(kept.len());

    for (key, mut dis) in det_groups {
        // Descending score; equal scores keep original input order.
        dis.sort_by(|&a, &b| {
            detections[b]
                .score
                .partial_cmp(&detections[a].score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        let candidates = gt_groups.get(&key).map(Vec::as_slice).unwrap_or(&[]);
        for di in dis {
            let det = &detections[di];
            let mut best: Option<(usize, f64)> = None;
            for &gi in candidates {
                if gt_claimed[gi] {
                    continue;
                }
                let overlap = iou(&det.box_, &ground_truth[gi].box_);
                let better = match best {
                    None => true,
                    Some((_, b)) => overlap > b,
                };
                if better {
                    best = Some((gi, overlap));
                }
            }
            let matched = match best {
                Some((gi, overlap)) if overlap > params.iou_threshold => {
                    gt_claimed[gi] = true;
                    MatchedDetection {
                        detection: det.clone(),
                        correct: true,
                        matched_gt: Some(gi),
                        iou: overlap,
                    }
                }
                _ => MatchedDetection {
                    detection: det.clone(),
                    correct: false,
                    matched_gt: None,
                    iou: 0.0,
                },
            };
            results.insert(di, matched);
        }
    }

    Ok(kept
        .into_iter()
        .map(|di| results.remove(&di).expect("every kept detection matched"))
        .collect())
}
