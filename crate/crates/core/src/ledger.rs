//! Append-only, checksum-chained log of dataset mutations.
//!
//! Every operator verdict becomes exactly one event: a missing label adds the
//! reviewed candidate as a pseudo-label, an annotation error removes the
//! image, and a true negative is recorded as a no-op. An
//! `iteration_boundary` event closes each refinement iteration; replaying the
//! log over version 0 materializes any later version.
//!
//! On disk the log is newline-delimited JSON. Each line carries the SHA-256
//! of the previous line's bytes, so any edit breaks the chain at the next
//! event.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{sha256_hex, AnnotationSource, DatasetVersion, GraspAnnotation, ImageRecord};
use crate::triage::{Candidate, DecisionTally, QueueStatus, ReviewQueueItem};

/// `prev_checksum` of the first event.
pub const GENESIS_CHECKSUM: &str = "0000000000000000000000000000000000000000000000000000000000000000";

#[derive(Debug, Error)]
pub enum LedgerError {
    #[error("item {item_id} is {status:?}, not leased")]
    NotLeased { item_id: u64, status: QueueStatus },
    #[error("item {item_id} is leased by {holder}, not {operator}")]
    WrongOperator {
        item_id: u64,
        holder: String,
        operator: String,
    },
    #[error("lease on item {0} has expired")]
    LeaseExpired(u64),
    #[error("decision does not match item: {0}")]
    Mismatch(String),
    #[error("fn_missing_label requires a candidate")]
    MissingCandidate,
    #[error("checksum chain broken at seq {seq}")]
    ChainBroken { seq: u64 },
    #[error("event {seq} is malformed: {message}")]
    Corrupt { seq: u64, message: String },
    #[error("sequence gap: expected {expected}, found {found}")]
    SequenceGap { expected: u64, found: u64 },
    #[error("replay failed at seq {seq}: {message}")]
    Replay { seq: u64, message: String },
    #[error("iteration {0} not found in ledger")]
    UnknownIteration(u32),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    TrueNegative,
    FnMissingLabel,
    FnAnnotationError,
}

impl Verdict {
    pub fn is_false_negative(self) -> bool {
        !matches!(self, Verdict::TrueNegative)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub image_id: String,
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidate: Option<Candidate>,
    pub operator_id: String,
    pub decided_at: DateTime<Utc>,
    pub iteration: u32,
}

/// Audit trail attached to every decision event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionMeta {
    pub item_id: u64,
    pub iteration: u32,
    pub verdict: Verdict,
    pub operator_id: String,
    pub decided_at: DateTime<Utc>,
    /// Client idempotency token, when submitted over the review API.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub token: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    AnnotationError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum EventPayload {
    AddGrasp {
        image_id: String,
        annotation: GraspAnnotation,
        decision: DecisionMeta,
    },
    RemoveImage {
        image_id: String,
        reason: RemovalReason,
        decision: DecisionMeta,
    },
    NoOp {
        image_id: String,
        decision: DecisionMeta,
    },
    IterationBoundary {
        iteration: u32,
    },
}

impl EventPayload {
    pub fn decision(&self) -> Option<&DecisionMeta> {
        match self {
            EventPayload::AddGrasp { decision, .. }
            | EventPayload::RemoveImage { decision, .. }
            | EventPayload::NoOp { decision, .. } => Some(decision),
            EventPayload::IterationBoundary { .. } => None,
        }
    }

    pub fn image_id(&self) -> Option<&str> {
        match self {
            EventPayload::AddGrasp { image_id, .. }
            | EventPayload::RemoveImage { image_id, .. }
            | EventPayload::NoOp { image_id, .. } => Some(image_id),
            EventPayload::IterationBoundary { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub seq: u64,
    #[serde(flatten)]
    pub payload: EventPayload,
    pub prev_checksum: String,
}

/// Turns a verdict on a leased item into the event payload and marks the
/// item decided. Nothing is appended; the caller owns the ledger.
pub fn decide(
    item: &mut ReviewQueueItem,
    decision: &ReviewDecision,
    now: DateTime<Utc>,
    token: Option<String>,
) -> Result<EventPayload, LedgerError> {
    let lease = match (&item.status, &item.lease) {
        (QueueStatus::Leased, Some(lease)) => lease,
        (status, _) => {
            return Err(LedgerError::NotLeased {
                item_id: item.item_id,
                status: *status,
            })
        }
    };
    if lease.operator_id != decision.operator_id {
        return Err(LedgerError::WrongOperator {
            item_id: item.item_id,
            holder: lease.operator_id.clone(),
            operator: decision.operator_id.clone(),
        });
    }
    if lease.expiry <= now {
        return Err(LedgerError::LeaseExpired(item.item_id));
    }
    if decision.image_id != item.image_id {
        return Err(LedgerError::Mismatch(format!(
            "decision for {} on item for {}",
            decision.image_id, item.image_id
        )));
    }

    let meta = DecisionMeta {
        item_id: item.item_id,
        iteration: decision.iteration,
        verdict: decision.verdict,
        operator_id: decision.operator_id.clone(),
        decided_at: decision.decided_at,
        token,
    };
    let payload = match decision.verdict {
        Verdict::FnMissingLabel => {
            let cand = decision.candidate.as_ref().ok_or(LedgerError::MissingCandidate)?;
            EventPayload::AddGrasp {
                image_id: item.image_id.clone(),
                annotation: GraspAnnotation::pseudo_label(cand.pose, cand.prediction_id.clone()),
                decision: meta,
            }
        }
        Verdict::FnAnnotationError => EventPayload::RemoveImage {
            image_id: item.image_id.clone(),
            reason: RemovalReason::AnnotationError,
            decision: meta,
        },
        Verdict::TrueNegative => EventPayload::NoOp {
            image_id: item.image_id.clone(),
            decision: meta,
        },
    };
    item.status = QueueStatus::Decided;
    item.lease = None;
    Ok(payload)
}

/// In-memory event chain, optionally mirrored to an append-only file.
#[derive(Debug)]
pub struct Ledger {
    events: Vec<LedgerEvent>,
    last_checksum: String,
    sink: Option<(PathBuf, BufWriter<File>)>,
}

impl Default for Ledger {
    fn default() -> Self {
        Self::new()
    }
}

impl Ledger {
    pub fn new() -> Self {
        Self {
            events: Vec::new(),
            last_checksum: GENESIS_CHECKSUM.to_string(),
            sink: None,
        }
    }

    /// Verifies and loads `text`. Every line must end with a newline.
    pub fn parse(text: &str) -> Result<Self, LedgerError> {
        let mut ledger = Self::new();
        let mut rest = text;
        let mut expected: u64 = 0;
        while !rest.is_empty() {
            let Some(nl) = rest.find('\n') else {
                return Err(LedgerError::Corrupt {
                    seq: expected,
                    message: "truncated line (no terminating newline)".into(),
                });
            };
            let line = &rest[..nl];
            rest = &rest[nl + 1..];
            let ev: LedgerEvent = serde_json::from_str(line).map_err(|e| LedgerError::Corrupt {
                seq: expected,
                message: e.to_string(),
            })?;
            if ev.seq != expected {
                return Err(LedgerError::SequenceGap {
                    expected,
                    found: ev.seq,
                });
            }
            if ev.prev_checksum != ledger.last_checksum {
                return Err(LedgerError::ChainBroken { seq: ev.seq });
            }
            ledger.last_checksum = sha256_hex(line.as_bytes());
            ledger.events.push(ev);
            expected += 1;
        }
        Ok(ledger)
    }

    /// Opens (creating if absent) a file-backed ledger after verifying it.
    pub fn open(path: &Path) -> Result<Self, LedgerError> {
        let io_err = |source| LedgerError::Io {
            path: path.to_path_buf(),
            source,
        };
        let text = match fs::read_to_string(path) {
            Ok(t) => t,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => String::new(),
            Err(e) => return Err(io_err(e)),
        };
        let mut ledger = Self::parse(&text)?;
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err)?;
        ledger.sink = Some((path.to_path_buf(), BufWriter::new(file)));
        Ok(ledger)
    }

    pub fn append(&mut self, payload: EventPayload) -> Result<&LedgerEvent, LedgerError> {
        let ev = LedgerEvent {
            seq: self.events.len() as u64,
            payload,
            prev_checksum: self.last_checksum.clone(),
        };
        let line = serde_json::to_string(&ev).expect("ledger events serialize");
        if let Some((path, w)) = &mut self.sink {
            let res = w
                .write_all(line.as_bytes())
                .and_then(|_| w.write_all(b"\n"))
                .and_then(|_| w.flush());
            res.map_err(|source| LedgerError::Io {
                path: path.clone(),
                source,
            })?;
        }
        self.last_checksum = sha256_hex(line.as_bytes());
        self.events.push(ev);
        Ok(self.events.last().expect("just pushed"))
    }

    pub fn events(&self) -> &[LedgerEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// The serialized log, byte-identical to what a file-backed ledger writes.
    pub fn to_ndjson(&self) -> String {
        let mut s = String::new();
        for ev in &self.events {
            s.push_str(&serde_json::to_string(ev).expect("ledger events serialize"));
            s.push('\n');
        }
        s
    }

    pub fn last_boundary(&self) -> Option<u32> {
        self.events.iter().rev().find_map(|e| match e.payload {
            EventPayload::IterationBoundary { iteration } => Some(iteration),
            _ => None,
        })
    }
}

/// Applies events after `base.created_from()` up to and including the
/// boundary closing iteration `up_to`. Without that boundary, replay stops at
/// the first decision belonging to a later iteration or at the end of the log.
pub fn replay(base: &DatasetVersion, events: &[LedgerEvent], up_to: u32) -> Result<DatasetVersion, LedgerError> {
    let mut records: BTreeMap<String, ImageRecord> = base.records().map(|r| (r.image_id.clone(), r.clone())).collect();
    let before: usize = base.annotation_count();
    let mut added = 0usize;
    let mut lost = 0usize;
    let mut consumed = base.created_from();

    for ev in events.iter().skip(base.created_from() as usize) {
        let fail = |message: String| LedgerError::Replay { seq: ev.seq, message };
        if ev.payload.decision().is_some_and(|d| d.iteration > up_to) {
            break;
        }
        consumed = ev.seq + 1;
        match &ev.payload {
            EventPayload::AddGrasp {
                image_id, annotation, ..
            } => {
                if annotation.source != AnnotationSource::PseudoLabel || !annotation.is_consistent() {
                    return Err(fail("add_grasp must carry a valid pseudo-label".into()));
                }
                let rec = records
                    .get_mut(image_id)
                    .ok_or_else(|| fail(format!("add_grasp targets missing image {image_id}")))?;
                rec.annotations.push(annotation.clone());
                added += 1;
            }
            EventPayload::RemoveImage { image_id, .. } => {
                let rec = records
                    .remove(image_id)
                    .ok_or_else(|| fail(format!("remove_image targets missing image {image_id}")))?;
                lost += rec.annotations.len();
            }
            EventPayload::NoOp { .. } => {}
            EventPayload::IterationBoundary { iteration } => {
                if *iteration >= up_to {
                    break;
                }
            }
        }
    }

    let after: usize = records.values().map(|r| r.annotations.len()).sum();
    if after != before + added - lost {
        return Err(LedgerError::Replay {
            seq: consumed,
            message: format!("annotation count {after} != {before} + {added} - {lost}"),
        });
    }
    let parent = if up_to == 0 { None } else { Some(up_to - 1) };
    DatasetVersion::new(up_to, parent, consumed, records.into_values()).map_err(|e| LedgerError::Replay {
        seq: consumed,
        message: e.to_string(),
    })
}

fn tally(events: &[LedgerEvent], iteration: u32) -> DecisionTally {
    let mut t = DecisionTally {
        iteration,
        ..Default::default()
    };
    for e in events {
        match e.payload {
            EventPayload::AddGrasp { .. } => t.labels_added += 1,
            EventPayload::RemoveImage { .. } => t.images_removed += 1,
            EventPayload::NoOp { .. } => t.tn_count += 1,
            EventPayload::IterationBoundary { .. } => {}
        }
    }
    t
}

/// Event counts between the boundary before `iteration` and its own boundary.
pub fn iteration_summary(events: &[LedgerEvent], iteration: u32) -> Result<DecisionTally, LedgerError> {
    let end = events
        .iter()
        .position(|e| matches!(e.payload, EventPayload::IterationBoundary { iteration: i } if i == iteration))
        .ok_or(LedgerError::UnknownIteration(iteration))?;
    let start = events[..end]
        .iter()
        .rposition(|e| matches!(e.payload, EventPayload::IterationBoundary { .. }))
        .map_or(0, |i| i + 1);
    Ok(tally(&events[start..end], iteration))
}

/// Counts for decisions after the last boundary (the iteration in progress).
pub fn open_iteration_tally(events: &[LedgerEvent], iteration: u32) -> DecisionTally {
    let start = events
        .iter()
        .rposition(|e| matches!(e.payload, EventPayload::IterationBoundary { .. }))
        .map_or(0, |i| i + 1);
    tally(&events[start..], iteration)
}

/// Whole-ledger counts, ignoring boundaries.
pub fn total_tally(events: &[LedgerEvent]) -> DecisionTally {
    tally(events, 0)
}

/// Summaries of every closed iteration, in ledger order.
pub fn all_summaries(events: &[LedgerEvent]) -> Vec<DecisionTally> {
    events
        .iter()
        .filter_map(|e| match e.payload {
            EventPayload::IterationBoundary { iteration } => iteration_summary(events, iteration).ok(),
            _ => None,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GraspPose;
    use crate::triage::Lease;
    use chrono::TimeZone;

    fn t0() -> DateTime<Utc> {
        Utc.with_ymd_and_hms(2024, 1, 1, 0, 0, 0).unwrap()
    }

    fn pose(x: f64) -> GraspPose {
        GraspPose::new(x, 10.0, 0.0, 20.0, 8.0).unwrap()
    }

    fn leased_item(id: u64, image: &str, op: &str) -> ReviewQueueItem {
        ReviewQueueItem {
            item_id: id,
            iteration: 1,
            image_id: image.into(),
            candidate: Some(Candidate {
                pose: pose(30.0),
                prediction_id: format!("pred-{id}"),
            }),
            best_iou: Some(0.0),
            gt_snapshot: vec![],
            status: QueueStatus::Leased,
            lease: Some(Lease {
                operator_id: op.into(),
                expiry: t0() + chrono::Duration::minutes(10),
            }),
        }
    }

    fn decision(item: &ReviewQueueItem, verdict: Verdict, op: &str) -> ReviewDecision {
        ReviewDecision {
            image_id: item.image_id.clone(),
            verdict,
            candidate: item.candidate.clone(),
            operator_id: op.into(),
            decided_at: t0(),
            iteration: 1,
        }
    }

    fn fixture() -> DatasetVersion {
        DatasetVersion::original(["a", "b", "c"].iter().map(|id| ImageRecord {
            image_id: id.to_string(),
            rgb_path: PathBuf::new(),
            annotations: vec![
                GraspAnnotation::original(pose(10.0)),
                GraspAnnotation::original(pose(50.0)),
            ],
            width: 100,
            height: 100,
        }))
        .unwrap()
    }

    #[test]
    fn verdicts_map_to_event_kinds() {
        let mut it = leased_item(1, "a", "op");
        let d = decision(&it, Verdict::FnMissingLabel, "op");
        match decide(&mut it, &d, t0(), None).unwrap() {
            EventPayload::AddGrasp { annotation, .. } => {
                assert_eq!(annotation.source, AnnotationSource::PseudoLabel);
                assert_eq!(annotation.origin_id.as_deref(), Some("pred-1"));
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(it.status, QueueStatus::Decided);

        let mut it = leased_item(2, "b", "op");
        let d = decision(&it, Verdict::FnAnnotationError, "op");
        assert!(matches!(
            decide(&mut it, &d, t0(), None).unwrap(),
            EventPayload::RemoveImage {
                reason: RemovalReason::AnnotationError,
                ..
            }
        ));

        let mut it = leased_item(3, "c", "op");
        let d = decision(&it, Verdict::TrueNegative, "op");
        assert!(matches!(
            decide(&mut it, &d, t0(), None).unwrap(),
            EventPayload::NoOp { .. }
        ));
    }

    #[test]
    fn decide_state_errors() {
        let mut it = leased_item(1, "a", "op");
        let d = decision(&it, Verdict::TrueNegative, "op");
        decide(&mut it, &d, t0(), None).unwrap();
        assert!(matches!(
            decide(&mut it, &d, t0(), None),
            Err(LedgerError::NotLeased { .. })
        ));

        let mut it = leased_item(1, "a", "op");
        let d = decision(&it, Verdict::TrueNegative, "other");
        assert!(matches!(
            decide(&mut it, &d, t0(), None),
            Err(LedgerError::WrongOperator { .. })
        ));

        let mut it = leased_item(1, "a", "op");
        let mut d = decision(&it, Verdict::FnMissingLabel, "op");
        d.candidate = None;
        assert!(matches!(
            decide(&mut it, &d, t0(), None),
            Err(LedgerError::MissingCandidate)
        ));
        assert_eq!(it.status, QueueStatus::Leased);

        let later = t0() + chrono::Duration::minutes(11);
        let d = decision(&it, Verdict::TrueNegative, "op");
        assert!(matches!(
            decide(&mut it, &d, later, None),
            Err(LedgerError::LeaseExpired(1))
        ));
    }

    #[test]
    fn empty_ledger_replay_is_identity() {
        let base = fixture();
        let v = replay(&base, &[], 0).unwrap();
        assert_eq!(v.manifest().digest, base.manifest().digest);
        assert_eq!(v.annotation_count(), base.annotation_count());
    }

    #[test]
    fn add_and_remove_on_fixture() {
        let base = fixture();
        let mut ledger = Ledger::new();
        let mut a = leased_item(1, "a", "op");
        let d = decision(&a, Verdict::FnMissingLabel, "op");
        let p = decide(&mut a, &d, t0(), None).unwrap();
        ledger.append(p).unwrap();
        let mut b = leased_item(2, "b", "op");
        let d = decision(&b, Verdict::FnAnnotationError, "op");
        let p = decide(&mut b, &d, t0(), None).unwrap();
        ledger.append(p).unwrap();
        ledger.append(EventPayload::IterationBoundary { iteration: 1 }).unwrap();

        let v1 = replay(&base, ledger.events(), 1).unwrap();
        assert_eq!(v1.len(), 2);
        assert_eq!(v1.get("a").unwrap().annotations.len(), 3);
        assert!(v1.get("b").is_none());
        assert_eq!(v1.version_id(), 1);
        assert_eq!(v1.parent(), Some(0));
        assert_eq!(v1.created_from(), 3);
        assert_eq!(v1.manifest().totals.grasps_pseudo, 1);

        let again = replay(&base, ledger.events(), 1).unwrap();
        assert_eq!(again.manifest().digest, v1.manifest().digest);

        // incremental replay from the sealed ancestor gives the same result
        ledger.append(EventPayload::IterationBoundary { iteration: 2 }).unwrap();
        let v2a = replay(&v1, ledger.events(), 2).unwrap();
        let v2b = replay(&base, ledger.events(), 2).unwrap();
        assert_eq!(v2a, v2b);
    }

    #[test]
    fn add_after_remove_is_corrupt() {
        let base = fixture();
        let mut ledger = Ledger::new();
        let mut b = leased_item(1, "b", "op");
        let d = decision(&b, Verdict::FnAnnotationError, "op");
        let p = decide(&mut b, &d, t0(), None).unwrap();
        ledger.append(p).unwrap();
        let mut b2 = leased_item(2, "b", "op");
        let d = decision(&b2, Verdict::FnMissingLabel, "op");
        let p = decide(&mut b2, &d, t0(), None).unwrap();
        ledger.append(p).unwrap();
        assert!(matches!(
            replay(&base, ledger.events(), 1),
            Err(LedgerError::Replay { seq: 1, .. })
        ));
    }

    #[test]
    fn parse_detects_tampering() {
        let mut ledger = Ledger::new();
        for i in 1..=3 {
            ledger.append(EventPayload::IterationBoundary { iteration: i }).unwrap();
        }
        let text = ledger.to_ndjson();
        assert_eq!(Ledger::parse(&text).unwrap().len(), 3);
        let tampered = text.replacen("\"iteration\":2", "\"iteration\":7", 1);
        assert!(matches!(
            Ledger::parse(&tampered),
            Err(LedgerError::ChainBroken { seq: 2 })
        ));
        let cut = &text[..text.len() - 1];
        assert!(matches!(Ledger::parse(cut), Err(LedgerError::Corrupt { seq: 2, .. })));
    }

    #[test]
    fn summaries() {
        let mut ledger = Ledger::new();
        let push = |l: &mut Ledger, v: Verdict, id: u64| {
            let mut it = leased_item(id, "a", "op");
            let d = decision(&it, v, "op");
            let p = decide(&mut it, &d, t0(), None).unwrap();
            l.append(p).unwrap();
        };
        for i in 0..5 {
            push(&mut ledger, Verdict::FnMissingLabel, i);
        }
        for i in 5..7 {
            push(&mut ledger, Verdict::FnAnnotationError, i);
        }
        for i in 7..10 {
            push(&mut ledger, Verdict::TrueNegative, i);
        }
        ledger.append(EventPayload::IterationBoundary { iteration: 1 }).unwrap();
        ledger.append(EventPayload::IterationBoundary { iteration: 2 }).unwrap();

        let s1 = iteration_summary(ledger.events(), 1).unwrap();
        assert_eq!((s1.labels_added, s1.images_removed, s1.tn_count), (5, 2, 3));
        let s2 = iteration_summary(ledger.events(), 2).unwrap();
        assert_eq!((s2.labels_added, s2.images_removed, s2.tn_count), (0, 0, 0));
        assert!(matches!(
            iteration_summary(ledger.events(), 9),
            Err(LedgerError::UnknownIteration(9))
        ));
        let total = total_tally(ledger.events());
        let sum: usize = all_summaries(ledger.events()).iter().map(|t| t.actions()).sum();
        assert_eq!(sum, total.actions());
    }

    #[test]
    fn file_backed_ledger_matches_in_memory() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ledger.ndjson");
        {
            let mut l = Ledger::open(&path).unwrap();
            l.append(EventPayload::IterationBoundary { iteration: 1 }).unwrap();
        }
        let mut l = Ledger::open(&path).unwrap();
        assert_eq!(l.len(), 1);
        l.append(EventPayload::IterationBoundary { iteration: 2 }).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert_eq!(text, l.to_ndjson());
        assert!(text.contains("\"kind\":\"iteration_boundary\""));
        assert!(text.starts_with("{\"seq\":0,"));
    }
}
