//! Confidence calibration for object detectors.
//!
//! The crate has three layers:
//!
//! - **Measurement**: IoU-based prediction/ground-truth matching
//!   ([`matching`]) and calibration-error metrics over the matches
//!   ([`metrics`]) — ECE over confidence bins and D-ECE over joint
//!   confidence x box-property grids, plus reliability, histogram, curve,
//!   and heatmap tables.
//! - **Train-time calibration**: a scalar reverse-mode tape ([`autodiff`]),
//!   MC-dropout aggregation ([`uncertainty`]), and the auxiliary losses
//!   ([`losses`]) that pull fused confidence/certainty toward empirical
//!   accuracy and box certainty toward box overlap. A desk-scale dense
//!   detector on synthetic scenes ([`toydet`]) trains end to end with them.
//! - **Post-hoc baseline**: temperature scaling ([`posthoc`]).
//!
//! File formats for the CLI live in [`formats`].

pub mod autodiff;
pub mod error;
pub mod formats;
pub mod losses;
pub mod matching;
pub mod metrics;
pub mod posthoc;
pub mod rng;
pub mod toydet;
pub mod types;
pub mod uncertainty;
mod util;

pub use error::{Error, Result};
pub use matching::{match_detections, MatchParams, MatchedDetection};
pub use metrics::{
    compute_dece, compute_ece, confidence_histogram, heatmap_2d, property_curve,
    reliability_table, BinGrid, BinStats, CalibrationReport, Dimension,
};
pub use types::{iou, Detection, GroundTruthObject, NormBox};
