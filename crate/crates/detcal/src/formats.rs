//! On-disk formats: COCO-results-style detections, ground-truth annotation
//! files, calibration report JSON, diagram CSV tables, and atomic writes.
//!
//! Boxes on disk are absolute pixels with a top-left origin; conversion to
//! normalized center/size form (and any clipping) happens here and only
//! here. Category ids map to contiguous class indices by ascending id.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::MatchedDetection;
use crate::metrics::{
    CalibrationReport, ConfidenceHistogram, PropertyCurveRow, ReliabilityRow,
};
use crate::types::{Detection, GroundTruthObject, NormBox};

/// One row of a detections file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: i64,
    pub category_id: i64,
    /// [x, y, w, h] in absolute pixels, top-left origin.
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logits: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: i64,
    pub width: f64,
    pub height: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: i64,
    pub image_id: i64,
    pub category_id: i64,
    /// [x, y, w, h] in absolute pixels, top-left origin.
    pub bbox: [f64; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: i64,
    pub name: String,
}

/// Ground-truth file: images with sizes, annotations, categories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthFile {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

pub(crate) fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))
}

/// Write via a temp file in the same directory plus rename, so readers
/// never observe a half-written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let tmp = match dir {
        Some(d) => d.join(format!(
            ".{}.tmp-{}",
            path.file_name().and_then(|n| n.to_str()).unwrap_or("out"),
            std::process::id()
        )),
        None => Path::new(&format!(".{}.tmp-{}", path.display(), std::process::id())).to_path_buf(),
    };
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_detection_records(path: &Path) -> Result<Vec<DetectionRecord>> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))
}

pub fn save_detection_records(path: &Path, records: &[DetectionRecord]) -> Result<()> {
    write_atomic(path, serde_json::to_string_pretty(records)?.as_bytes())
}

pub fn load_ground_truth_file(path: &Path) -> Result<GroundTruthFile> {
    let text = read_to_string(path)?;
    let file: GroundTruthFile = serde_json::from_str(&text)
        .map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))?;
    file.validate()?;
    Ok(file)
}

impl GroundTruthFile {
    pub fn validate(&self) -> Result<()> {
        for img in &self.images {
            if !(img.width > 0.0 && img.height > 0.0) {
                return Err(Error::InvalidValue(format!(
                    "image {} has non-positive size {}x{}",
                    img.id, img.width, img.height
                )));
            }
        }
        let image_ids: std::collections::HashSet<i64> =
            self.images.iter().map(|i| i.id).collect();
        for ann in &self.annotations {
            if !image_ids.contains(&ann.image_id) {
                return Err(Error::InvalidValue(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                )));
            }
        }
        Ok(())
    }
}

/// Category-id to class-index mapping (ascending id order).
#[derive(Debug, Clone)]
pub struct CategoryMap {
    by_id: BTreeMap<i64, usize>,
    ids: Vec<i64>,
}

impl CategoryMap {
    pub fn from_categories(categories: &[CategoryRecord]) -> Self {
        let mut ids: Vec<i64> = categories.iter().map(|c| c.id).collect();
        ids.sort_unstable();
        ids.dedup();
        let by_id = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
        CategoryMap { by_id, ids }
    }

    pub fn num_classes(&self) -> usize {
        self.ids.len()
    }

    pub fn label_of(&self, category_id: i64) -> Result<usize> {
        self.by_id.get(&category_id).copied().ok_or_else(|| {
            Error::InvalidValue(format!("unknown category id {category_id}"))
        })
    }

    pub fn id_of(&self, label: usize) -> i64 {
        self.ids[label]
    }
}

fn normalize_bbox(bbox: &[f64; 4], img: &ImageRecord) -> Result<NormBox> {
    let [x, y, w, h] = *bbox;
    if !(w > 0.0 && h > 0.0) {
        return Err(Error::InvalidValue(format!(
            "bbox [{x}, {y}, {w}, {h}] has non-positive size"
        )));
    }
    // clip at the I/O boundary: centers into [0,1], sizes into (0,1]
    let cx = ((x + w / 2.0) / img.width).clamp(0.0, 1.0);
    let cy = ((y + h / 2.0) / img.height).clamp(0.0, 1.0);
    let wn = (w / img.width).min(1.0);
    let hn = (h / img.height).min(1.0);
    NormBox::new(cx, cy, wn, hn)
}

/// A parsed evaluation input: normalized detections and ground truth with
/// contiguous class labels.
#[derive(Debug, Clone)]
pub struct EvalInput {
    pub detections: Vec<Detection>,
    pub ground_truth: Vec<GroundTruthObject>,
    pub categories: CategoryMap,
}

/// Join a detections file with its ground-truth file: resolve categories
/// and image sizes, validate scores, and normalize all boxes.
pub fn resolve_eval_input(
    records: &[DetectionRecord],
    gt_file: &GroundTruthFile,
) -> Result<EvalInput> {
    let categories = CategoryMap::from_categories(&gt_file.categories);
    let images: BTreeMap<i64, &ImageRecord> =
        gt_file.images.iter().map(|i| (i.id, i)).collect();

    let mut ground_truth = Vec::with_capacity(gt_file.annotations.len());
    for ann in &gt_file.annotations {
        let img = images[&ann.image_id];
        ground_truth.push(GroundTruthObject::new(
            ann.image_id,
            categories.label_of(ann.category_id)?,
            normalize_bbox(&ann.bbox, img)?,
        ));
    }

    let mut detections = Vec::with_capacity(records.len());
    for rec in records {
        let img = images.get(&rec.image_id).ok_or_else(|| {
            Error::InvalidValue(format!(
                "detection references unknown image {}",
                rec.image_id
            ))
        })?;
        if !(0.0..=1.0).contains(&rec.score) || !rec.score.is_finite() {
            return Err(Error::InvalidValue(format!(
                "score {} outside [0, 1]",
                rec.score
            )));
        }
        let mut det = Detection::new(
            rec.image_id,
            categories.label_of(rec.category_id)?,
            rec.score,
            normalize_bbox(&rec.bbox, img)?,
        );
        det.logits = rec.logits.clone();
        detections.push(det);
    }

    Ok(EvalInput {
        detections,
        ground_truth,
        categories,
    })
}

/// JSON shape of a calibration report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub dece: f64,
    pub ece: f64,
    pub n_detections: usize,
    pub iou_threshold: f64,
    pub dims: Vec<String>,
    pub bins: Vec<ReportBin>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportBin {
    pub index: Vec<usize>,
    pub count: usize,
    pub conf: f64,
    pub prec: f64,
}

impl From<&CalibrationReport> for ReportFile {
    fn from(report: &CalibrationReport) -> Self {
        ReportFile {
            dece: report.dece,
            ece: report.ece,
            n_detections: report.n_detections,
            iou_threshold: report.iou_threshold,
            dims: report
                .grid
                .dims()
                .iter()
                .map(|d| d.as_str().to_string())
                .collect(),
            bins: report
                .bins
                .iter()
                .map(|b| ReportBin {
                    index: b.index.clone(),
                    count: b.count,
                    conf: b.conf(),
                    prec: b.precision(),
                })
                .collect(),
        }
    }
}

pub fn report_to_json(report: &CalibrationReport) -> Result<String> {
    Ok(serde_json::to_string_pretty(&ReportFile::from(report))?)
}

fn fmt_cell(x: f64) -> String {
    format!("{x:.6}")
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_cell).unwrap_or_default()
}

/// CSV table for a reliability diagram: bin_center,conf,acc,count.
/// Empty bins keep their row with empty conf/acc fields.
pub fn reliability_csv(rows: &[ReliabilityRow]) -> String {
    let mut out = String::from("bin_center,conf,acc,count\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_cell(r.bin_center),
            fmt_opt(r.conf),
            fmt_opt(r.acc),
            r.count
        ));
    }
    out
}

/// CSV table for a confidence histogram. The global averages repeat on
/// every row so the table stays rectangular.
pub fn histogram_csv(h: &ConfidenceHistogram) -> String {
    let mut out = String::from("bin_center,count,avg_confidence,avg_precision\n");
    for (center, count) in h.bin_centers.iter().zip(&h.counts) {
        out.push_str(&format!(
            "{},{},{},{}\n",
            fmt_cell(*center),
            count,
            fmt_cell(h.avg_confidence),
            fmt_cell(h.avg_precision)
        ));
    }
    out
}

/// CSV table for a per-property calibration curve.
pub fn curve_csv(rows: &[PropertyCurveRow]) -> String {
    let mut out = String::from("bin_center,conf,prec,count,partial_dece\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            fmt_cell(r.bin_center),
            fmt_opt(r.conf),
            fmt_opt(r.prec),
            r.count,
            fmt_cell(r.partial_dece)
        ));
    }
    out
}

/// CSV table for a 2-D calibration heatmap: row,col,value with empty
/// value fields for empty cells.
pub fn heatmap_csv(cells: &[Vec<Option<f64>>]) -> String {
    let mut out = String::from("row,col,value\n");
    for (i, row) in cells.iter().enumerate() {
        for (j, cell) in row.iter().enumerate() {
            out.push_str(&format!("{},{},{}\n", i, j, fmt_opt(*cell)));
        }
    }
    out
}

/// Render matched detections back into normalized-space records for
/// debugging; exact field names match the report conventions.
pub fn matched_summary(matched: &[MatchedDetection]) -> Vec<(f64, bool)> {
    matched.iter().map(|m| (m.detection.score, m.correct)).collect()
}

/// Logits file: JSON array of K-length float arrays.
pub fn load_logits(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))
}

/// Labels file: JSON array of class indices.
pub fn load_labels(path: &Path) -> Result<Vec<usize>> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidValue(format!("{}: {e}", path.display())))
}
