//! Domain types: normalized boxes, detections, ground-truth objects.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized image coordinates, stored as
/// (center-x, center-y, width, height) with cx, cy in [0, 1] and
/// w, h in (0, 1]. Edges may extend past the unit square; clipping
/// happens only when converting at I/O boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    /// Validating constructor.
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let b = NormBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.cx.is_finite()
            && self.cy.is_finite()
            && self.w.is_finite()
            && self.h.is_finite()
            && (0.0..=1.0).contains(&self.cx)
            && (0.0..=1.0).contains(&self.cy)
            && self.w > 0.0
            && self.w <= 1.0
            && self.h > 0.0
            && self.h <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidValue(format!(
                "box (cx={}, cy={}, w={}, h={}) outside normalized domain",
                self.cx, self.cy, self.w, self.h
            )))
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Corner coordinates (x1, y1, x2, y2).
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        )
    }

    /// Intersection-over-Union with another box.
    pub fn iou(&self, other: &NormBox) -> f64 {
        iou(self, other)
    }
}

/// Intersection-over-Union of two normalized boxes. Symmetric, in [0, 1],
/// and 1 exactly when the boxes coincide. Union is computed as
/// area(a) + area(b) - intersection. The intersection is capped at both
/// areas: corner arithmetic can otherwise overshoot by an ulp and push
/// the ratio past 1.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    if a == b {
        return 1.0;
    }
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = (iw * ih).min(a.area()).min(b.area());
    let union = a.area() + b.area() - inter;
    inter / union
}

/// One prediction from a detector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: i64,
    /// Predicted class index in 0..K.
    pub label: usize,
    /// Confidence of the predicted class, in [0, 1].
    pub score: f64,
    #[serde(rename = "box")]
    pub box_: NormBox,
    /// Full K-class confidence vector, when the producer keeps one.
    /// Must sum to 1 and have its max at `label` equal to `score`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_vector: Option<Vec<f64>>,
    /// Raw pre-softmax class logits, kept so post-hoc temperature
    /// scaling stays applicable downstream.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

impl Detection {
    pub fn new(image_id: i64, label: usize, score: f64, box_: NormBox) -> Self {
        Detection {
            image_id,
            label,
            score,
            box_,
            score_vector: None,
            logits: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.box_.validate()?;
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidValue(format!(
                "score {} outside [0, 1]",
                self.score
            )));
        }
        if let Some(sv) = &self.score_vector {
            let sum: f64 = sv.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidValue(format!(
                    "score vector sums to {sum}, expected 1"
                )));
            }
            let max = sv.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let at_label = *sv.get(self.label).ok_or_else(|| {
                Error::InvalidValue("label outside score vector".into())
            })?;
            if (at_label - self.score).abs() > 1e-6 || (at_label - max).abs() > 1e-6 {
                return Err(Error::InvalidValue(
                    "score, score_vector[label], and max(score_vector) disagree".into(),
                ));
            }
        }
        Ok(())
    }
}

/// One annotated object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub image_id: i64,
    /// Annotated class index in 0..K.
    pub label: usize,
    #[serde(rename = "box")]
    pub box_: NormBox,
}

impl GroundTruthObject {
    pub fn new(image_id: i64, label: usize, box_: NormBox) -> Self {
        GroundTruthObject {
            image_id,
            label,
            box_,
        }
    }
}
