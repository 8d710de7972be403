//! Event-sourced review queue for curating generated pairs.
//!
//! Every mutation is expressed as a [`ReviewEvent`] and applied through
//! [`ReviewState::apply`], so replaying the log rebuilds the state exactly.
//! Time is passed in by the caller as milliseconds since the Unix epoch.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::manifest::{DefectTag, ReviewStatus, SampleRecord, Source};
use crate::pair::{QaReport, Verdict};

pub const DEFAULT_LEASE_MS: u64 = 10 * 60 * 1000;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ReviewError {
    #[error("item '{0}' not found")]
    NotFound(String),
    #[error("item '{0}' is already decided")]
    AlreadyDecided(String),
    #[error("item '{id}' is leased by '{holder}'")]
    LeaseHeld { id: String, holder: String },
    #[error("item '{0}' already exists")]
    Duplicate(String),
    #[error("a rejected item needs at least one defect tag")]
    RejectWithoutTags,
    #[error("an accepted item cannot carry tag '{0}'")]
    ForbiddenAcceptTag(&'static str),
    #[error("auto-rejected entries cannot be enqueued for review")]
    AutoRejectedEntry,
}

impl ReviewError {
    /// Conflicts with the current state rather than malformed input.
    pub fn is_conflict(&self) -> bool {
        matches!(
            self,
            ReviewError::AlreadyDecided(_) | ReviewError::LeaseHeld { .. } | ReviewError::Duplicate(_)
        )
    }
}

/// An extracted pair offered to the queue.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct QueueEntry {
    pub id: String,
    pub photo_path: String,
    pub mask_path: String,
    pub qa: QaReport,
}

#[derive(Clone, PartialEq, Eq, Debug, Serialize, Deserialize)]
pub struct Lease {
    pub reviewer: String,
    pub served_at_ms: u64,
    pub expires_at_ms: u64,
}

impl Lease {
    pub fn is_active(&self, now_ms: u64) -> bool {
        now_ms < self.expires_at_ms
    }
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ReviewItem {
    pub id: String,
    pub photo_path: String,
    pub mask_path: String,
    pub qa: QaReport,
    pub status: ReviewStatus,
    pub defect_tags: Vec<DefectTag>,
    pub note: String,
    pub decided_at_ms: Option<u64>,
    pub review_duration_ms: Option<u64>,
    pub reviewer: Option<String>,
    pub lease: Option<Lease>,
    /// Enqueue order, used to break severity ties.
    pub seq: u64,
}

#[derive(Clone, Copy, PartialEq, Eq, Debug, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct DecisionInput {
    #[serde(default)]
    pub tags: Vec<DefectTag>,
    #[serde(default)]
    pub note: String,
    /// Overrides the measured serve-to-decide delta.
    #[serde(default)]
    pub duration_ms: Option<u64>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum ReviewEvent {
    Enqueued {
        entry: QueueEntry,
        at_ms: u64,
    },
    AutoRejected {
        id: String,
        tags: Vec<DefectTag>,
        at_ms: u64,
    },
    Leased {
        id: String,
        reviewer: String,
        at_ms: u64,
        expires_at_ms: u64,
    },
    Decided {
        id: String,
        reviewer: String,
        decision: Decision,
        tags: Vec<DefectTag>,
        note: String,
        duration_ms: Option<u64>,
        at_ms: u64,
    },
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct ReviewState {
    items: BTreeMap<String, ReviewItem>,
    auto_rejected: BTreeMap<String, Vec<DefectTag>>,
    next_seq: u64,
}

fn normalise_tags(tags: &[DefectTag]) -> Vec<DefectTag> {
    let mut t = tags.to_vec();
    t.sort();
    t.dedup();
    t
}

fn check_decision(decision: Decision, tags: &[DefectTag]) -> Result<(), ReviewError> {
    match decision {
        Decision::Reject if tags.is_empty() => Err(ReviewError::RejectWithoutTags),
        Decision::Accept => {
            for forbidden in [DefectTag::MissingMask, DefectTag::SizeMismatch] {
                if tags.contains(&forbidden) {
                    return Err(ReviewError::ForbiddenAcceptTag(forbidden.as_str()));
                }
            }
            Ok(())
        }
        Decision::Reject => Ok(()),
    }
}

impl ReviewState {
    pub fn items(&self) -> impl Iterator<Item = &ReviewItem> {
        self.items.values()
    }

    pub fn get(&self, id: &str) -> Option<&ReviewItem> {
        self.items.get(id)
    }

    pub fn auto_rejected(&self) -> &BTreeMap<String, Vec<DefectTag>> {
        &self.auto_rejected
    }

    fn known(&self, id: &str) -> bool {
        self.items.contains_key(id) || self.auto_rejected.contains_key(id)
    }

    fn pending(&self, id: &str) -> Result<&ReviewItem, ReviewError> {
        let item = self.items.get(id).ok_or_else(|| ReviewError::NotFound(id.into()))?;
        if item.status != ReviewStatus::Pending {
            return Err(ReviewError::AlreadyDecided(id.into()));
        }
        Ok(item)
    }

    fn check_lease(item: &ReviewItem, reviewer: &str, now_ms: u64) -> Result<(), ReviewError> {
        match &item.lease {
            Some(l) if l.is_active(now_ms) && l.reviewer != reviewer => Err(ReviewError::LeaseHeld {
                id: item.id.clone(),
                holder: l.reviewer.clone(),
            }),
            _ => Ok(()),
        }
    }

    /// The only state transition. Rejects events that would break an
    /// invariant, leaving the state unchanged.
    pub fn apply(&mut self, event: &ReviewEvent) -> Result<(), ReviewError> {
        match event {
            ReviewEvent::Enqueued { entry, .. } => {
                if entry.qa.verdict == Verdict::AutoReject {
                    return Err(ReviewError::AutoRejectedEntry);
                }
                if self.known(&entry.id) {
                    return Err(ReviewError::Duplicate(entry.id.clone()));
                }
                let item = ReviewItem {
                    id: entry.id.clone(),
                    photo_path: entry.photo_path.clone(),
                    mask_path: entry.mask_path.clone(),
                    qa: entry.qa.clone(),
                    status: ReviewStatus::Pending,
                    defect_tags: Vec::new(),
                    note: String::new(),
                    decided_at_ms: None,
                    review_duration_ms: None,
                    reviewer: None,
                    lease: None,
                    seq: self.next_seq,
                };
                self.next_seq += 1;
                self.items.insert(entry.id.clone(), item);
            }
            ReviewEvent::AutoRejected { id, tags, .. } => {
                if self.known(id) {
                    return Err(ReviewError::Duplicate(id.clone()));
                }
                self.auto_rejected.insert(id.clone(), normalise_tags(tags));
            }
            ReviewEvent::Leased {
                id,
                reviewer,
                at_ms,
                expires_at_ms,
            } => {
                let item = self.pending(id)?;
                Self::check_lease(item, reviewer, *at_ms)?;
                let item = self.items.get_mut(id).expect("checked above");
                item.lease = Some(Lease {
                    reviewer: reviewer.clone(),
                    served_at_ms: *at_ms,
                    expires_at_ms: *expires_at_ms,
                });
            }
            ReviewEvent::Decided {
                id,
                reviewer,
                decision,
                tags,
                note,
                duration_ms,
                at_ms,
            } => {
                let item = self.pending(id)?;
                Self::check_lease(item, reviewer, *at_ms)?;
                let tags = normalise_tags(tags);
                check_decision(*decision, &tags)?;
                let item = self.items.get_mut(id).expect("checked above");
                item.status = match decision {
                    Decision::Accept => ReviewStatus::Accepted,
                    Decision::Reject => ReviewStatus::Rejected,
                };
                item.defect_tags = tags;
                item.note = note.clone();
                item.decided_at_ms = Some(*at_ms);
                item.review_duration_ms = *duration_ms;
                item.reviewer = Some(reviewer.clone());
                item.lease = None;
            }
        }
        Ok(())
    }

    /// Checks the item invariants. Holds after any sequence of `apply` calls.
    pub fn check_invariants(&self) -> bool {
        self.items.values().all(|item| match item.status {
            ReviewStatus::Rejected => !item.defect_tags.is_empty() && item.lease.is_none(),
            ReviewStatus::Accepted => {
                item.lease.is_none()
                    && !item.defect_tags.contains(&DefectTag::MissingMask)
                    && !item.defect_tags.contains(&DefectTag::SizeMismatch)
            }
            ReviewStatus::Pending => item.decided_at_ms.is_none(),
        }) && self.items.keys().all(|k| !self.auto_rejected.contains_key(k))
    }
}

#[derive(Clone, PartialEq, Eq, Debug, Default, Serialize, Deserialize)]
pub struct EnqueueOutcome {
    pub enqueued: usize,
    pub auto_rejected: usize,
    pub duplicates: Vec<String>,
}

#[derive(Clone, PartialEq, Debug, Default, Serialize, Deserialize)]
pub struct ReviewStats {
    pub total: usize,
    pub pending: usize,
    pub leased: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub auto_rejected: usize,
    /// accepted / (accepted + rejected); 0 when nothing is decided.
    pub acceptance_rate_reviewed: f64,
    /// accepted / (accepted + rejected + auto_rejected).
    pub acceptance_rate_generated: f64,
    pub mean_duration_ms: Option<f64>,
    pub median_duration_ms: Option<f64>,
    pub tag_counts: BTreeMap<DefectTag, u64>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ExportSummary {
    pub records: Vec<SampleRecord>,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// State plus the event log that produced it.
#[derive(Clone, PartialEq, Debug)]
pub struct ReviewQueue {
    state: ReviewState,
    log: Vec<ReviewEvent>,
    lease_ms: u64,
}

impl Default for ReviewQueue {
    fn default() -> Self {
        Self::new(DEFAULT_LEASE_MS)
    }
}

impl ReviewQueue {
    pub fn new(lease_ms: u64) -> Self {
        ReviewQueue {
            state: ReviewState::default(),
            log: Vec::new(),
            lease_ms,
        }
    }

    /// Rebuilds a queue from a log. Fails on the first invalid event.
    pub fn replay(events: Vec<ReviewEvent>, lease_ms: u64) -> Result<Self, (usize, ReviewError)> {
        let mut state = ReviewState::default();
        for (i, e) in events.iter().enumerate() {
            state.apply(e).map_err(|err| (i, err))?;
        }
        Ok(ReviewQueue {
            state,
            log: events,
            lease_ms,
        })
    }

    pub fn state(&self) -> &ReviewState {
        &self.state
    }

    pub fn log(&self) -> &[ReviewEvent] {
        &self.log
    }

    pub fn lease_ms(&self) -> u64 {
        self.lease_ms
    }

    fn record(&mut self, event: ReviewEvent) -> Result<(), ReviewError> {
        self.state.apply(&event)?;
        self.log.push(event);
        Ok(())
    }

    /// Queues pending items. Auto-rejected entries are logged for the
    /// acceptance denominators but never queued. Known ids are skipped.
    pub fn enqueue(&mut self, entries: impl IntoIterator<Item = QueueEntry>, now_ms: u64) -> EnqueueOutcome {
        let mut out = EnqueueOutcome::default();
        for entry in entries {
            if self.state.known(&entry.id) {
                out.duplicates.push(entry.id);
                continue;
            }
            if entry.qa.verdict == Verdict::AutoReject {
                let event = ReviewEvent::AutoRejected {
                    id: entry.id,
                    tags: entry.qa.tags,
                    at_ms: now_ms,
                };
                if self.record(event).is_ok() {
                    out.auto_rejected += 1;
                }
            } else if self.record(ReviewEvent::Enqueued { entry, at_ms: now_ms }).is_ok() {
                out.enqueued += 1;
            }
        }
        out
    }

    /// Leases the next pending item to `reviewer`. An item the reviewer
    /// already holds comes back first; otherwise the worst QA severity wins,
    /// ties going to the earliest enqueued.
    pub fn next(&mut self, reviewer: &str, now_ms: u64) -> Option<ReviewItem> {
        let mut best: Option<&ReviewItem> = None;
        for item in self.state.items.values() {
            if item.status != ReviewStatus::Pending {
                continue;
            }
            match &item.lease {
                Some(l) if l.is_active(now_ms) && l.reviewer == reviewer => {
                    return Some(item.clone());
                }
                Some(l) if l.is_active(now_ms) => continue,
                _ => {}
            }
            let better = match best {
                None => true,
                Some(b) => {
                    let (s, bs) = (item.qa.severity(), b.qa.severity());
                    s > bs || (s == bs && item.seq < b.seq)
                }
            };
            if better {
                best = Some(item);
            }
        }
        let id = best?.id.clone();
        let event = ReviewEvent::Leased {
            id: id.clone(),
            reviewer: reviewer.into(),
            at_ms: now_ms,
            expires_at_ms: now_ms.saturating_add(self.lease_ms),
        };
        self.record(event).ok()?;
        self.state.items.get(&id).cloned()
    }

    /// Records a decision. Without an explicit duration the serve-to-decide
    /// delta of the caller's lease is used.
    pub fn decide(
        &mut self,
        id: &str,
        reviewer: &str,
        decision: Decision,
        input: DecisionInput,
        now_ms: u64,
    ) -> Result<ReviewItem, ReviewError> {
        let item = self.state.pending(id)?;
        let measured = item
            .lease
            .as_ref()
            .filter(|l| l.reviewer == reviewer)
            .map(|l| now_ms.saturating_sub(l.served_at_ms));
        let event = ReviewEvent::Decided {
            id: id.into(),
            reviewer: reviewer.into(),
            decision,
            tags: input.tags,
            note: input.note,
            duration_ms: input.duration_ms.or(measured),
            at_ms: now_ms,
        };
        self.record(event)?;
        Ok(self.state.items[id].clone())
    }

    pub fn stats(&self, now_ms: u64) -> ReviewStats {
        let mut s = ReviewStats {
            auto_rejected: self.state.auto_rejected.len(),
            ..ReviewStats::default()
        };
        let mut durations = Vec::new();
        for item in self.state.items.values() {
            s.total += 1;
            match item.status {
                ReviewStatus::Pending => {
                    s.pending += 1;
                    if item.lease.as_ref().is_some_and(|l| l.is_active(now_ms)) {
                        s.leased += 1;
                    }
                }
                ReviewStatus::Accepted => s.accepted += 1,
                ReviewStatus::Rejected => s.rejected += 1,
            }
            if let Some(d) = item.review_duration_ms {
                durations.push(d);
            }
            for t in &item.defect_tags {
                *s.tag_counts.entry(*t).or_insert(0) += 1;
            }
        }
        s.acceptance_rate_reviewed = ratio(s.accepted, s.accepted + s.rejected);
        s.acceptance_rate_generated = ratio(s.accepted, s.accepted + s.rejected + s.auto_rejected);
        if !durations.is_empty() {
            durations.sort_unstable();
            let n = durations.len();
            s.mean_duration_ms = Some(durations.iter().map(|&d| d as f64).sum::<f64>() / n as f64);
            s.median_duration_ms = Some(if n % 2 == 1 {
                durations[n / 2] as f64
            } else {
                (durations[n / 2 - 1] + durations[n / 2]) as f64 / 2.0
            });
        }
        s
    }

    /// Accepted items as synthetic manifest records, sorted by id.
    pub fn export_accepted(&self) -> ExportSummary {
        let mut accepted = 0;
        let mut rejected = 0;
        let mut records = Vec::new();
        for item in self.state.items.values() {
            match item.status {
                ReviewStatus::Accepted => {
                    accepted += 1;
                    let mut r = SampleRecord::new(item.id.clone(), Source::Synthetic, item.photo_path.clone())
                        .with_mask(item.mask_path.clone());
                    r.review_status = ReviewStatus::Accepted;
                    records.push(r);
                }
                ReviewStatus::Rejected => rejected += 1,
                ReviewStatus::Pending => {}
            }
        }
        ExportSummary {
            records,
            accepted,
            rejected,
            acceptance_rate: ratio(accepted, accepted + rejected),
        }
    }
}
