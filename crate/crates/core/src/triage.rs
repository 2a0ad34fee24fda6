//! Prediction ingest and IOU triage.
//!
//! An image is flagged ("False") when its top-ranked prediction overlaps every
//! ground-truth grasp with IOU strictly below the threshold. Flagged images
//! become review queue items.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{DatasetVersion, GraspAnnotation, ImageRecord};
use crate::geometry::{max_iou, GraspPose};

pub const DEFAULT_THRESHOLD: f64 = 0.2;
/// Ingest aborts when more than this fraction of lines is malformed.
pub const MAX_REJECT_FRACTION: f64 = 0.10;

#[derive(Debug, Error)]
pub enum TriageError {
    #[error("duplicate prediction_id {0:?}")]
    DuplicatePrediction(String),
    #[error("{rejected} of {total} prediction lines malformed (first: line {first_line}: {first_reason})")]
    TooManyRejects {
        rejected: usize,
        total: usize,
        first_line: usize,
        first_reason: String,
    },
    #[error("predictions reference images absent from the dataset: {0:?}")]
    OrphanImages(Vec<String>),
    #[error("no ground truth for image {0}")]
    EmptyGroundTruth(String),
    #[error("invalid threshold {0}")]
    Threshold(f64),
    #[error("reading predictions: {0}")]
    Io(#[from] std::io::Error),
}

/// One line of the prediction stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionLine {
    pub image_id: String,
    pub x: f64,
    pub y: f64,
    pub theta_deg: f64,
    pub opening: f64,
    pub jaw_size: f64,
    pub confidence: f64,
    pub prediction_id: String,
}

impl PredictionLine {
    pub fn from_prediction(image_id: &str, p: &Prediction) -> Self {
        Self {
            image_id: image_id.to_string(),
            x: p.pose.center_x,
            y: p.pose.center_y,
            theta_deg: p.pose.angle.to_degrees(),
            opening: p.pose.opening,
            jaw_size: p.pose.jaw_size,
            confidence: p.confidence,
            prediction_id: p.prediction_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub pose: GraspPose,
    pub confidence: f64,
    pub prediction_id: String,
}

/// Confidence descending, then prediction_id; makes ranking independent of input order.
fn rank(a: &Prediction, b: &Prediction) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then_with(|| a.prediction_id.cmp(&b.prediction_id))
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PredictionSet {
    pub model_tag: String,
    pub iteration: u32,
    /// Per image, ranked best first.
    pub entries: BTreeMap<String, Vec<Prediction>>,
}

impl PredictionSet {
    pub fn new(model_tag: impl Into<String>, iteration: u32) -> Self {
        Self {
            model_tag: model_tag.into(),
            iteration,
            entries: BTreeMap::new(),
        }
    }

    /// Inserts a prediction, keeping the image's list ranked.
    pub fn insert(&mut self, image_id: &str, p: Prediction) -> Result<(), TriageError> {
        if self
            .entries
            .values()
            .flatten()
            .any(|q| q.prediction_id == p.prediction_id)
        {
            return Err(TriageError::DuplicatePrediction(p.prediction_id));
        }
        let list = self.entries.entry(image_id.to_string()).or_default();
        let pos = list.partition_point(|q| rank(q, &p).is_lt());
        list.insert(pos, p);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.entries.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top(&self, image_id: &str) -> Option<&Prediction> {
        self.entries.get(image_id).and_then(|v| v.first())
    }

    pub fn check_against(&self, version: &DatasetVersion) -> Result<(), TriageError> {
        let orphans: Vec<String> = self
            .entries
            .keys()
            .filter(|id| !version.contains(id))
            .cloned()
            .collect();
        if orphans.is_empty() {
            Ok(())
        } else {
            Err(TriageError::OrphanImages(orphans))
        }
    }

    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for (id, preds) in &self.entries {
            for p in preds {
                out.push_str(&serde_json::to_string(&PredictionLine::from_prediction(id, p)).expect("serializable"));
                out.push('\n');
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reject {
    pub line: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    pub set: PredictionSet,
    pub rejects: Vec<Reject>,
    pub lines: usize,
}

fn parse_prediction(text: &str) -> Result<(String, Prediction), String> {
    let l: PredictionLine = serde_json::from_str(text).map_err(|e| e.to_string())?;
    if !(0.0..=1.0).contains(&l.confidence) {
        return Err(format!("confidence {} outside [0, 1]", l.confidence));
    }
    if l.prediction_id.is_empty() {
        return Err("empty prediction_id".into());
    }
    let pose = GraspPose::new(l.x, l.y, l.theta_deg.to_radians(), l.opening, l.jaw_size).map_err(|e| e.to_string())?;
    Ok((
        l.image_id,
        Prediction {
            pose,
            confidence: l.confidence,
            prediction_id: l.prediction_id,
        },
    ))
}

/// Reads newline-delimited JSON predictions. Blank lines are ignored.
pub fn ingest_predictions(reader: impl BufRead, model_tag: &str, iteration: u32) -> Result<IngestOutcome, TriageError> {
    let mut parsed = Vec::new();
    let mut rejects = Vec::new();
    let mut lines = 0;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        lines += 1;
        match parse_prediction(&line) {
            Ok(p) => parsed.push(p),
            Err(reason) => rejects.push(Reject { line: i + 1, reason }),
        }
    }
    if lines > 0 && rejects.len() as f64 > MAX_REJECT_FRACTION * lines as f64 {
        return Err(TriageError::TooManyRejects {
            rejected: rejects.len(),
            total: lines,
            first_line: rejects[0].line,
            first_reason: rejects[0].reason.clone(),
        });
    }

    let mut seen = HashSet::new();
    let mut set = PredictionSet::new(model_tag, iteration);
    for (image_id, p) in parsed {
        if !seen.insert(p.prediction_id.clone()) {
            return Err(TriageError::DuplicatePrediction(p.prediction_id));
        }
        set.entries.entry(image_id).or_default().push(p);
    }
    for list in set.entries.values_mut() {
        list.sort_by(rank);
    }
    Ok(IngestOutcome { set, rejects, lines })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageVerdict {
    pub image_id: String,
    /// `None` when the image had no prediction.
    pub best_iou: Option<f64>,
    pub matched_gt_index: Option<usize>,
    pub flagged: bool,
    pub evaluated_prediction: Option<String>,
}

impl TriageVerdict {
    pub fn prediction_missing(&self) -> bool {
        self.evaluated_prediction.is_none()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TriageConfig {
    pub threshold: f64,
    /// Number of top-ranked predictions tested; any one at or above the
    /// threshold clears the image.
    pub top_k: usize,
}

impl Default for TriageConfig {
    fn default() -> Self {
        Self {
            threshold: DEFAULT_THRESHOLD,
            top_k: 1,
        }
    }
}

/// Verdict for one image. `preds` must be ranked best first.
pub fn triage_image(
    image_id: &str,
    preds: &[Prediction],
    gts: &[GraspPose],
    cfg: &TriageConfig,
) -> Result<TriageVerdict, TriageError> {
    if gts.is_empty() {
        return Err(TriageError::EmptyGroundTruth(image_id.to_string()));
    }
    if preds.is_empty() {
        return Ok(TriageVerdict {
            image_id: image_id.to_string(),
            best_iou: None,
            matched_gt_index: None,
            flagged: true,
            evaluated_prediction: None,
        });
    }
    let mut best: Option<(f64, usize, &Prediction)> = None;
    for p in preds.iter().take(cfg.top_k.max(1)) {
        let (v, idx) = max_iou(&p.pose, gts).expect("ground truth is non-empty");
        if best.is_none_or(|(b, _, _)| v > b) {
            best = Some((v, idx, p));
        }
    }
    let (v, idx, p) = best.expect("at least one prediction");
    Ok(TriageVerdict {
        image_id: image_id.to_string(),
        best_iou: Some(v),
        matched_gt_index: Some(idx),
        flagged: v < cfg.threshold,
        evaluated_prediction: Some(p.prediction_id.clone()),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub pose: GraspPose,
    pub prediction_id: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueueStatus {
    Pending,
    Leased,
    Decided,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lease {
    pub operator_id: String,
    pub expiry: chrono::DateTime<chrono::Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewQueueItem {
    /// Position in the queue, starting at 1.
    pub item_id: u64,
    pub iteration: u32,
    pub image_id: String,
    /// Absent for prediction-missing items.
    pub candidate: Option<Candidate>,
    pub best_iou: Option<f64>,
    pub gt_snapshot: Vec<GraspAnnotation>,
    pub status: QueueStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lease: Option<Lease>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TriageReport {
    pub iteration: u32,
    pub model_tag: String,
    pub threshold: f64,
    pub evaluated: usize,
    pub flagged: usize,
    pub unflagged: usize,
    pub prediction_missing: usize,
    /// Flagged counts of this and all earlier iterations, oldest first.
    pub flagged_history: Vec<usize>,
    pub verdicts: Vec<TriageVerdict>,
}

impl TriageReport {
    /// Prepends the flagged counts of earlier reports.
    pub fn with_history(mut self, earlier: &[TriageReport]) -> Self {
        let mut hist: Vec<(u32, usize)> = earlier
            .iter()
            .filter(|r| r.iteration < self.iteration)
            .map(|r| (r.iteration, r.flagged))
            .collect();
        hist.sort();
        self.flagged_history = hist.into_iter().map(|(_, f)| f).chain([self.flagged]).collect();
        self
    }
}

fn record_verdict(rec: &ImageRecord, preds: &PredictionSet, cfg: &TriageConfig) -> Result<TriageVerdict, TriageError> {
    let gts = rec.poses();
    let list = preds.entries.get(&rec.image_id).map(Vec::as_slice).unwrap_or(&[]);
    if gts.is_empty() {
        // nothing to match: every prediction has zero overlap
        return Ok(TriageVerdict {
            image_id: rec.image_id.clone(),
            best_iou: list.first().map(|_| 0.0),
            matched_gt_index: None,
            flagged: true,
            evaluated_prediction: list.first().map(|p| p.prediction_id.clone()),
        });
    }
    triage_image(&rec.image_id, list, &gts, cfg)
}

/// Triages every image of `version`; images without predictions are flagged
/// as prediction-missing. Queue items are numbered in image_id order.
pub fn run_triage(
    version: &DatasetVersion,
    preds: &PredictionSet,
    cfg: &TriageConfig,
) -> Result<(TriageReport, Vec<ReviewQueueItem>), TriageError> {
    if !cfg.threshold.is_finite() || cfg.threshold < 0.0 {
        return Err(TriageError::Threshold(cfg.threshold));
    }
    preds.check_against(version)?;
    let records: Vec<&ImageRecord> = version.records().collect();
    let verdicts = records
        .par_iter()
        .map(|rec| record_verdict(rec, preds, cfg))
        .collect::<Result<Vec<_>, _>>()?;

    let mut queue = Vec::new();
    for (rec, v) in records.iter().zip(&verdicts) {
        if !v.flagged {
            continue;
        }
        let candidate = v.evaluated_prediction.as_ref().and_then(|pid| {
            preds.entries[&rec.image_id]
                .iter()
                .find(|p| &p.prediction_id == pid)
                .map(|p| Candidate {
                    pose: p.pose,
                    prediction_id: p.prediction_id.clone(),
                })
        });
        queue.push(ReviewQueueItem {
            item_id: queue.len() as u64 + 1,
            iteration: preds.iteration,
            image_id: rec.image_id.clone(),
            candidate,
            best_iou: v.best_iou,
            gt_snapshot: rec.annotations.clone(),
            status: QueueStatus::Pending,
            lease: None,
        });
    }

    let flagged = verdicts.iter().filter(|v| v.flagged).count();
    let report = TriageReport {
        iteration: preds.iteration,
        model_tag: preds.model_tag.clone(),
        threshold: cfg.threshold,
        evaluated: verdicts.len(),
        flagged,
        unflagged: verdicts.len() - flagged,
        prediction_missing: verdicts.iter().filter(|v| v.prediction_missing()).count(),
        flagged_history: vec![flagged],
        verdicts,
    };
    Ok((report, queue))
}

/// Decision counts for one iteration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DecisionTally {
    pub iteration: u32,
    pub labels_added: usize,
    pub images_removed: usize,
    pub tn_count: usize,
}

impl DecisionTally {
    pub fn fn_count(&self) -> usize {
        self.labels_added + self.images_removed
    }

    pub fn actions(&self) -> usize {
        self.fn_count() + self.tn_count
    }
}

pub const STATS_CSV_HEADER: &str = "iteration,false_count,fn_count,tn_count,fn_proportion,labels_added,images_removed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsRow {
    pub iteration: u32,
    pub false_count: usize,
    pub fn_count: usize,
    pub tn_count: usize,
    pub fn_proportion: Option<f64>,
    pub labels_added: usize,
    pub images_removed: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StatsSeries {
    pub rows: Vec<StatsRow>,
    pub iterations: usize,
    /// Total review decisions across all iterations.
    pub review_actions: usize,
    pub false_count_strictly_decreasing: bool,
    pub false_count_non_increasing: bool,
}

impl StatsSeries {
    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
        let mut out = String::from(STATS_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            w.serialize(r).expect("in-memory csv write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flush")).expect("utf-8"));
        out
    }
}

/// Joins per-iteration triage reports with decision tallies.
pub fn triage_stats(reports: &[TriageReport], decisions: &[DecisionTally]) -> StatsSeries {
    let mut rows: Vec<StatsRow> = reports
        .iter()
        .map(|rep| {
            let t = decisions
                .iter()
                .find(|d| d.iteration == rep.iteration)
                .copied()
                .unwrap_or_default();
            let fn_count = t.fn_count();
            let denom = fn_count + t.tn_count;
            StatsRow {
                iteration: rep.iteration,
                false_count: rep.flagged,
                fn_count,
                tn_count: t.tn_count,
                fn_proportion: (denom > 0).then(|| fn_count as f64 / denom as f64),
                labels_added: t.labels_added,
                images_removed: t.images_removed,
            }
        })
        .collect();
    rows.sort_by_key(|r| r.iteration);
    let fc: Vec<usize> = rows.iter().map(|r| r.false_count).collect();
    StatsSeries {
        iterations: rows.len(),
        review_actions: rows.iter().map(|r| r.fn_count + r.tn_count).sum(),
        false_count_strictly_decreasing: fc.windows(2).all(|w| w[1] < w[0]),
        false_count_non_increasing: fc.windows(2).all(|w| w[1] <= w[0]),
        rows,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    const L1: &str = r#"{"image_id":"a","x":10,"y":10,"theta_deg":0,"opening":20,"jaw_size":10,"confidence":0.9,"prediction_id":"p1"}"#;
    const L2: &str = r#"{"image_id":"a","x":12,"y":10,"theta_deg":5,"opening":20,"jaw_size":10,"confidence":0.95,"prediction_id":"p2"}"#;
    const L3: &str = r#"{"image_id":"b","x":30,"y":10,"theta_deg":0,"opening":20,"jaw_size":10,"confidence":0.5,"prediction_id":"p3"}"#;

    #[test]
    fn ingest_groups_and_ranks() {
        let text = format!("{L1}\n{L2}\n\n{L3}\n");
        let out = ingest_predictions(Cursor::new(text), "m", 1).unwrap();
        assert_eq!(out.set.entries.len(), 2);
        assert_eq!(out.set.top("a").unwrap().prediction_id, "p2");
        assert!(out.rejects.is_empty());
        assert_eq!(out.lines, 3);
    }

    #[test]
    fn missing_confidence_is_rejected_not_fatal() {
        let mut lines: Vec<String> = (0..10)
            .map(|i| {
                format!(
                    r#"{{"image_id":"a","x":1,"y":1,"theta_deg":0,"opening":2,"jaw_size":1,"confidence":0.5,"prediction_id":"q{i}"}}"#
                )
            })
            .collect();
        lines.push(
            r#"{"image_id":"a","x":1,"y":1,"theta_deg":0,"opening":2,"jaw_size":1,"prediction_id":"bad"}"#.into(),
        );
        let out = ingest_predictions(Cursor::new(lines.join("\n")), "m", 1).unwrap();
        assert_eq!(out.rejects.len(), 1);
        assert_eq!(out.rejects[0].line, 11);
        assert_eq!(out.set.len(), 10);
    }

    #[test]
    fn too_many_rejects_abort() {
        let text = format!("{L1}\nnot json\n");
        assert!(matches!(
            ingest_predictions(Cursor::new(text), "m", 1),
            Err(TriageError::TooManyRejects {
                rejected: 1,
                total: 2,
                ..
            })
        ));
    }

    #[test]
    fn duplicate_prediction_id_is_an_error() {
        let text = format!("{L1}\n{}\n", L3.replace("p3", "p1"));
        match ingest_predictions(Cursor::new(text), "m", 1) {
            Err(TriageError::DuplicatePrediction(id)) => assert_eq!(id, "p1"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn stats_examples() {
        let rep = |it, flagged| TriageReport {
            iteration: it,
            model_tag: String::new(),
            threshold: 0.2,
            evaluated: flagged,
            flagged,
            unflagged: 0,
            prediction_missing: 0,
            flagged_history: vec![],
            verdicts: vec![],
        };
        let s = triage_stats(
            &[rep(1, 4)],
            &[DecisionTally {
                iteration: 1,
                labels_added: 2,
                images_removed: 1,
                tn_count: 1,
            }],
        );
        assert_eq!(s.rows[0].fn_proportion, Some(0.75));

        let s = triage_stats(&[rep(1, 0)], &[]);
        assert_eq!(s.rows[0].fn_proportion, None);
        assert!(s.to_csv().lines().nth(1).unwrap().contains(",,"));

        let s = triage_stats(&[rep(1, 10), rep(2, 6), rep(3, 4)], &[]);
        assert!(s.false_count_strictly_decreasing);
        assert!(s.false_count_non_increasing);
        assert!(s.to_csv().starts_with(STATS_CSV_HEADER));
        assert_eq!(s.to_csv().lines().count(), 4);
    }

    #[test]
    fn history_is_ordered() {
        let mk = |it, f| TriageReport {
            iteration: it,
            model_tag: String::new(),
            threshold: 0.2,
            evaluated: f,
            flagged: f,
            unflagged: 0,
            prediction_missing: 0,
            flagged_history: vec![f],
            verdicts: vec![],
        };
        let r = mk(3, 2).with_history(&[mk(2, 5), mk(1, 9)]);
        assert_eq!(r.flagged_history, vec![9, 5, 2]);
    }
}
