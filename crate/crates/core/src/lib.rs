//! Core algorithms for human-in-the-loop refinement of robotic grasp datasets.
//!
//! The pipeline is: load a Jacquard-style dataset ([`dataset`]), triage model
//! predictions against ground truth by rotated-rectangle IOU ([`geometry`],
//! [`triage`]), record operator verdicts as an append-only event chain
//! ([`ledger`]) and replay that chain into the next [`DatasetVersion`].
//! [`sim`] closes the loop with a synthetic corpus and a scripted operator.

pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod heatmap;
pub mod ledger;
pub mod sim;
pub mod triage;

pub use dataset::{
    AnnotationSource, DatasetVersion, Diagnostic, DiagnosticKind, GraspAnnotation, ImageRecord, Manifest, ManifestEntry,
};
pub use geometry::{
    angle_distance, canonical_angle, grasp_success, intersection_area, iou, max_iou, GraspPose, GraspRectangle, Point,
    SuccessCriteria,
};
pub use heatmap::{HeatmapSet, LossBreakdown};
pub use ledger::{EventPayload, Ledger, LedgerEvent, ReviewDecision, Verdict};
pub use triage::{
    Candidate, Prediction, PredictionSet, QueueStatus, ReviewQueueItem, StatsRow, StatsSeries, TriageReport,
    TriageVerdict,
};
