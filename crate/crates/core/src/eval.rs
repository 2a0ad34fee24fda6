//! Rectangle-metric accuracy of a prediction set against a dataset version.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::DatasetVersion;
use crate::geometry::{grasp_success, SuccessCriteria};
use crate::triage::PredictionSet;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("predictions cover no image of the version")]
    NoCoverage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub evaluated: usize,
    pub successes: usize,
    pub iou_min: f64,
    pub angle_max_deg: f64,
}

/// Fraction of covered images whose top-ranked prediction succeeds.
/// Images without ground truth count as failures.
pub fn evaluate(
    version: &DatasetVersion,
    preds: &PredictionSet,
    criteria: SuccessCriteria,
) -> Result<Evaluation, EvalError> {
    let mut evaluated = 0;
    let mut successes = 0;
    for rec in version.records() {
        let Some(top) = preds.top(&rec.image_id) else {
            continue;
        };
        evaluated += 1;
        if grasp_success(&top.pose, &rec.poses(), criteria).unwrap_or(false) {
            successes += 1;
        }
    }
    if evaluated == 0 {
        return Err(EvalError::NoCoverage);
    }
    Ok(Evaluation {
        accuracy: successes as f64 / evaluated as f64,
        evaluated,
        successes,
        iou_min: criteria.iou_min,
        angle_max_deg: criteria.angle_max.to_degrees(),
    })
}
