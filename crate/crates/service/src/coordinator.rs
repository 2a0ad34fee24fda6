//! Queue state machine. Every lease and decision goes through one
//! [`Coordinator`]; the HTTP layer only translates.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Duration, Utc};
use refinery_core::ledger::{self, decide, LedgerError};
use refinery_core::triage::{triage_stats, Lease, QueueStatus, ReviewQueueItem, StatsSeries, TriageReport};
use refinery_core::{Ledger, ReviewDecision, Verdict};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub const DEFAULT_LEASE_MINUTES: i64 = 10;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("no queue item {0}")]
    UnknownItem(u64),
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("{0}")]
    Conflict(String),
    #[error("{0}")]
    Validation(String),
    #[error("queue file {path}: {message}")]
    Queue { path: PathBuf, message: String },
    #[error(transparent)]
    Ledger(#[from] LedgerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRequest {
    pub item_id: u64,
    pub operator_id: String,
    pub verdict: Verdict,
    /// Prediction id of the candidate the operator judged.
    #[serde(default)]
    pub candidate: Option<String>,
    pub token: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ack {
    pub seq: u64,
    pub item_id: u64,
    pub iteration: u32,
    pub kind: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeasedItem {
    pub item: ReviewQueueItem,
    pub lease: Lease,
    /// Pending items left after this lease.
    pub remaining: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueueCounts {
    pub pending: usize,
    pub leased: usize,
    pub decided: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationInfo {
    pub iteration: u32,
    pub evaluated: usize,
    pub flagged: usize,
    pub closed: bool,
    pub labels_added: usize,
    pub images_removed: usize,
    pub tn_count: usize,
    /// Queue counts; present only for the iteration under review.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub queue: Option<QueueCounts>,
}

pub struct Coordinator {
    iteration: u32,
    items: Vec<ReviewQueueItem>,
    ledger: Ledger,
    tokens: HashMap<String, (DecisionRequest, Ack)>,
    reports: Vec<TriageReport>,
    lease_for: Duration,
    clock: Clock,
}

fn kind_of(v: Verdict) -> &'static str {
    match v {
        Verdict::TrueNegative => "no_op",
        Verdict::FnMissingLabel => "add_grasp",
        Verdict::FnAnnotationError => "remove_image",
    }
}

pub fn read_queue(path: &Path) -> Result<Vec<ReviewQueueItem>, ServiceError> {
    let err = |message: String| ServiceError::Queue {
        path: path.to_path_buf(),
        message,
    };
    let text = fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
    serde_json::from_str(&text).map_err(|e| err(e.to_string()))
}

impl Coordinator {
    /// Rebuilds queue state from the triaged queue and the decisions already
    /// in the ledger. Leases do not survive a restart.
    pub fn new(
        mut items: Vec<ReviewQueueItem>,
        ledger: Ledger,
        reports: Vec<TriageReport>,
        clock: Clock,
    ) -> Result<Self, ServiceError> {
        let iteration = items
            .first()
            .map(|i| i.iteration)
            .or_else(|| reports.iter().map(|r| r.iteration).max())
            .unwrap_or(0);
        for (i, item) in items.iter_mut().enumerate() {
            if item.item_id != i as u64 + 1 || item.iteration != iteration {
                return Err(ServiceError::Validation(format!(
                    "queue item {} out of order or from another iteration",
                    item.item_id
                )));
            }
            item.status = QueueStatus::Pending;
            item.lease = None;
        }
        let mut tokens = HashMap::new();
        for ev in ledger.events() {
            let Some(meta) = ev.payload.decision() else {
                continue;
            };
            if meta.iteration != iteration {
                continue;
            }
            let item = items
                .get_mut((meta.item_id as usize).wrapping_sub(1))
                .filter(|it| Some(it.image_id.as_str()) == ev.payload.image_id())
                .ok_or_else(|| ServiceError::Validation(format!("ledger event {} does not match the queue", ev.seq)))?;
            item.status = QueueStatus::Decided;
            if let Some(token) = &meta.token {
                let req = DecisionRequest {
                    item_id: meta.item_id,
                    operator_id: meta.operator_id.clone(),
                    verdict: meta.verdict,
                    candidate: item.candidate.as_ref().map(|c| c.prediction_id.clone()),
                    token: token.clone(),
                };
                let ack = Ack {
                    seq: ev.seq,
                    item_id: meta.item_id,
                    iteration,
                    kind: kind_of(meta.verdict).into(),
                };
                tokens.insert(token.clone(), (req, ack));
            }
        }
        Ok(Self {
            iteration,
            items,
            ledger,
            tokens,
            reports,
            lease_for: Duration::minutes(DEFAULT_LEASE_MINUTES),
            clock,
        })
    }

    pub fn with_lease_duration(mut self, d: Duration) -> Self {
        self.lease_for = d;
        self
    }

    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn items(&self) -> &[ReviewQueueItem] {
        &self.items
    }

    pub fn ledger(&self) -> &Ledger {
        &self.ledger
    }

    fn expire_leases(&mut self, now: DateTime<Utc>) {
        for it in &mut self.items {
            if it.status == QueueStatus::Leased && it.lease.as_ref().is_none_or(|l| l.expiry <= now) {
                it.status = QueueStatus::Pending;
                it.lease = None;
            }
        }
    }

    pub fn counts(&self) -> QueueCounts {
        let n = |s| self.items.iter().filter(|i| i.status == s).count();
        QueueCounts {
            pending: n(QueueStatus::Pending),
            leased: n(QueueStatus::Leased),
            decided: n(QueueStatus::Decided),
        }
    }

    /// Leases the lowest-numbered pending item.
    pub fn lease_next(&mut self, operator_id: &str) -> Result<Option<LeasedItem>, ServiceError> {
        if operator_id.trim().is_empty() {
            return Err(ServiceError::Validation("operator id must not be empty".into()));
        }
        let now = (self.clock)();
        self.expire_leases(now);
        let Some(item) = self.items.iter_mut().find(|i| i.status == QueueStatus::Pending) else {
            return Ok(None);
        };
        let lease = Lease {
            operator_id: operator_id.to_string(),
            expiry: now + self.lease_for,
        };
        item.status = QueueStatus::Leased;
        item.lease = Some(lease.clone());
        let item = item.clone();
        Ok(Some(LeasedItem {
            item,
            lease,
            remaining: self.counts().pending,
        }))
    }

    /// Returns a leased item to the queue without deciding it.
    pub fn release(&mut self, item_id: u64, operator_id: &str) -> Result<(), ServiceError> {
        let now = (self.clock)();
        self.expire_leases(now);
        let item = self.item_mut(item_id)?;
        match &item.lease {
            Some(l) if item.status == QueueStatus::Leased && l.operator_id == operator_id => {
                item.status = QueueStatus::Pending;
                item.lease = None;
                Ok(())
            }
            _ => Err(ServiceError::Conflict(format!(
                "item {item_id} is not leased by {operator_id}"
            ))),
        }
    }

    fn item_mut(&mut self, item_id: u64) -> Result<&mut ReviewQueueItem, ServiceError> {
        self.items
            .get_mut((item_id as usize).wrapping_sub(1))
            .ok_or(ServiceError::UnknownItem(item_id))
    }

    /// Records a verdict. A retry with the same token returns the original
    /// acknowledgment without appending.
    pub fn submit(&mut self, req: &DecisionRequest) -> Result<Ack, ServiceError> {
        if req.token.trim().is_empty() {
            return Err(ServiceError::Validation("token must not be empty".into()));
        }
        if let Some((first, ack)) = self.tokens.get(&req.token) {
            if first.item_id == req.item_id && first.verdict == req.verdict && first.operator_id == req.operator_id {
                return Ok(ack.clone());
            }
            return Err(ServiceError::Conflict(format!(
                "token {} was already used for another decision",
                req.token
            )));
        }
        let now = (self.clock)();
        let iteration = self.iteration;
        let mut item = self.item_mut(req.item_id)?.clone();

        let item_candidate = item.candidate.as_ref().map(|c| c.prediction_id.as_str());
        match (&req.candidate, item_candidate) {
            (Some(sent), Some(held)) if sent != held => {
                return Err(ServiceError::Validation(format!(
                    "candidate {sent} does not belong to item {}",
                    req.item_id
                )))
            }
            (Some(sent), None) => {
                return Err(ServiceError::Validation(format!(
                    "item {} has no candidate, got {sent}",
                    req.item_id
                )))
            }
            (None, _) if req.verdict == Verdict::FnMissingLabel => {
                return Err(ServiceError::Validation(
                    "fn_missing_label requires the candidate's prediction_id".into(),
                ))
            }
            _ => {}
        }
        if item.status == QueueStatus::Leased && item.lease.as_ref().is_some_and(|l| l.expiry <= now) {
            let stored = self.item_mut(req.item_id)?;
            stored.status = QueueStatus::Pending;
            stored.lease = None;
            return Err(ServiceError::Conflict(format!("lease on item {} expired", req.item_id)));
        }

        let decision = ReviewDecision {
            image_id: item.image_id.clone(),
            verdict: req.verdict,
            candidate: item.candidate.clone(),
            operator_id: req.operator_id.clone(),
            decided_at: now,
            iteration,
        };
        let payload = decide(&mut item, &decision, now, Some(req.token.clone())).map_err(|e| match e {
            LedgerError::MissingCandidate => ServiceError::Validation(e.to_string()),
            LedgerError::NotLeased { .. } | LedgerError::WrongOperator { .. } | LedgerError::LeaseExpired(_) => {
                ServiceError::Conflict(e.to_string())
            }
            other => ServiceError::Ledger(other),
        })?;
        let seq = self.ledger.append(payload)?.seq;
        *self.item_mut(req.item_id)? = item;
        let ack = Ack {
            seq,
            item_id: req.item_id,
            iteration,
            kind: kind_of(req.verdict).into(),
        };
        self.tokens.insert(req.token.clone(), (req.clone(), ack.clone()));
        Ok(ack)
    }

    pub fn stats(&self) -> StatsSeries {
        let mut tallies = ledger::all_summaries(self.ledger.events());
        if !tallies.iter().any(|t| t.iteration == self.iteration) {
            tallies.push(ledger::open_iteration_tally(self.ledger.events(), self.iteration));
        }
        triage_stats(&self.reports, &tallies)
    }

    pub fn iterations(&self) -> Vec<IterationInfo> {
        let closed = ledger::all_summaries(self.ledger.events());
        let mut reports: Vec<&TriageReport> = self.reports.iter().collect();
        reports.sort_by_key(|r| r.iteration);
        reports
            .into_iter()
            .map(|r| {
                let done = closed.iter().find(|t| t.iteration == r.iteration);
                let tally = done
                    .copied()
                    .unwrap_or_else(|| ledger::open_iteration_tally(self.ledger.events(), r.iteration));
                IterationInfo {
                    iteration: r.iteration,
                    evaluated: r.evaluated,
                    flagged: r.flagged,
                    closed: done.is_some(),
                    labels_added: tally.labels_added,
                    images_removed: tally.images_removed,
                    tn_count: tally.tn_count,
                    queue: (r.iteration == self.iteration).then(|| self.counts()),
                }
            })
            .collect()
    }
}
