//! Review service: durable event log, serialised state and the HTTP API.
//!
//! The log is a single file of records, each a little-endian `u32` byte
//! length followed by one JSON-encoded event. A torn final record from a
//! crash is dropped on open.

use std::fs::{File, OpenOptions};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, MutexGuard};

use axum::body::{Body, Bytes};
use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use regenforge_core::review::{
    Decision, DecisionInput, EnqueueOutcome, ExportSummary, QueueEntry, ReviewError, ReviewEvent, ReviewItem,
    ReviewQueue, ReviewStats,
};
use regenforge_core::{encode_mask, ClassId, ClassTaxonomy, DatasetManifest, DefectTag, Rgb};

use crate::error::{Error, Result};
use crate::io;

/// Header naming the reviewer on API calls.
pub const REVIEWER_HEADER: &str = "x-reviewer";
pub const DEFAULT_REVIEWER: &str = "anonymous";

pub trait Clock: Send + Sync {
    fn now_ms(&self) -> u64;
}

pub struct SystemClock;

impl Clock for SystemClock {
    fn now_ms(&self) -> u64 {
        chrono::Utc::now().timestamp_millis().max(0) as u64
    }
}

/// Clock that only moves when told to.
#[derive(Default)]
pub struct ManualClock(AtomicU64);

impl ManualClock {
    pub fn new(start_ms: u64) -> Self {
        ManualClock(AtomicU64::new(start_ms))
    }

    pub fn advance(&self, ms: u64) {
        self.0.fetch_add(ms, Ordering::SeqCst);
    }
}

impl Clock for ManualClock {
    fn now_ms(&self) -> u64 {
        self.0.load(Ordering::SeqCst)
    }
}

/// Append-only event file.
pub struct EventLog {
    path: PathBuf,
    file: File,
}

impl EventLog {
    /// Opens or creates the log and returns the events it holds.
    pub fn open(path: &Path) -> Result<(Self, Vec<ReviewEvent>)> {
        io::create_parent(path)?;
        let mut file = OpenOptions::new()
            .read(true)
            .append(true)
            .create(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
        let (events, good) = decode_records(&bytes, path)?;
        if good < bytes.len() {
            log::warn!(
                "{}: dropping {} bytes of incomplete trailing record",
                path.display(),
                bytes.len() - good
            );
            file.set_len(good as u64).map_err(|e| Error::io(path, e))?;
        }
        Ok((
            EventLog {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, events: &[ReviewEvent]) -> Result<()> {
        if events.is_empty() {
            return Ok(());
        }
        let mut buf = Vec::new();
        for e in events {
            encode_record(e, &mut buf);
        }
        self.file
            .write_all(&buf)
            .and_then(|_| self.file.sync_data())
            .map_err(|e| Error::io(&self.path, e))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

pub fn encode_record(event: &ReviewEvent, buf: &mut Vec<u8>) {
    let json = serde_json::to_vec(event).expect("event serialises");
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
}

/// Decodes complete records. Returns the events and the byte length they
/// occupy; anything after that is a torn tail.
pub fn decode_records(bytes: &[u8], path: &Path) -> Result<(Vec<ReviewEvent>, usize)> {
    let mut events = Vec::new();
    let mut pos = 0;
    while bytes.len() - pos >= 4 {
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().expect("4 bytes")) as usize;
        let Some(body) = bytes.get(pos + 4..pos + 4 + len) else {
            break;
        };
        let event = serde_json::from_slice(body)
            .map_err(|e| Error::format(path, format!("record at byte {pos}: {e}")))?;
        events.push(event);
        pos += 4 + len;
    }
    Ok((events, pos))
}

pub fn read_log(path: &Path) -> Result<Vec<ReviewEvent>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(decode_records(&bytes, path)?.0)
}

struct Inner {
    queue: ReviewQueue,
    log: EventLog,
}

/// Review state behind a single writer lock. Every mutation is written to
/// the log before the call returns; a failed write rolls the state back.
pub struct ReviewService {
    inner: Mutex<Inner>,
    clock: Arc<dyn Clock>,
    taxonomy: ClassTaxonomy,
    export_path: PathBuf,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct ExportResult {
    pub path: String,
    pub accepted: usize,
    pub rejected: usize,
    pub acceptance_rate: f64,
}

impl ReviewService {
    pub fn open(
        log_path: &Path,
        lease_ms: u64,
        taxonomy: ClassTaxonomy,
        export_path: PathBuf,
        clock: Arc<dyn Clock>,
    ) -> Result<Self> {
        let (log, events) = EventLog::open(log_path)?;
        let n = events.len();
        let queue = ReviewQueue::replay(events, lease_ms).map_err(|(i, e)| {
            Error::format(log_path, format!("event {i} of {n} does not apply: {e}"))
        })?;
        Ok(ReviewService {
            inner: Mutex::new(Inner { queue, log }),
            clock,
            taxonomy,
            export_path,
        })
    }

    fn lock(&self) -> MutexGuard<'_, Inner> {
        self.inner.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn mutate<T>(&self, f: impl FnOnce(&mut ReviewQueue, u64) -> T) -> Result<T> {
        let mut inner = self.lock();
        let before = inner.queue.log().len();
        let out = f(&mut inner.queue, self.clock.now_ms());
        let fresh = inner.queue.log()[before..].to_vec();
        if let Err(e) = inner.log.append(&fresh) {
            let lease = inner.queue.lease_ms();
            let kept = inner.queue.log()[..before].to_vec();
            inner.queue = ReviewQueue::replay(kept, lease).expect("prefix of a valid log replays");
            return Err(e);
        }
        Ok(out)
    }

    pub fn enqueue(&self, entries: Vec<QueueEntry>) -> Result<EnqueueOutcome> {
        let out = self.mutate(|q, now| q.enqueue(entries, now))?;
        if !out.duplicates.is_empty() {
            log::warn!("skipped {} already known ids", out.duplicates.len());
        }
        Ok(out)
    }

    pub fn next(&self, reviewer: &str) -> Result<Option<ReviewItem>> {
        self.mutate(|q, now| q.next(reviewer, now))
    }

    pub fn decide(&self, id: &str, reviewer: &str, decision: Decision, input: DecisionInput) -> Result<ReviewItem> {
        Ok(self.mutate(|q, now| q.decide(id, reviewer, decision, input, now))??)
    }

    pub fn item(&self, id: &str) -> Option<ReviewItem> {
        self.lock().queue.state().get(id).cloned()
    }

    pub fn stats(&self) -> ReviewStats {
        self.lock().queue.stats(self.clock.now_ms())
    }

    pub fn export_summary(&self) -> ExportSummary {
        self.lock().queue.export_accepted()
    }

    /// Writes the accepted manifest to `path`, or to the configured path.
    pub fn export(&self, path: Option<&Path>) -> Result<ExportResult> {
        let path = path.unwrap_or(&self.export_path);
        let summary = self.export_summary();
        write_export(path, &self.taxonomy, &summary)
    }

    /// Current queue and log, for tests and tooling.
    pub fn snapshot(&self) -> ReviewQueue {
        self.lock().queue.clone()
    }

    pub fn log_path(&self) -> PathBuf {
        self.lock().log.path().to_path_buf()
    }

    pub fn taxonomy(&self) -> &ClassTaxonomy {
        &self.taxonomy
    }
}

pub fn write_export(path: &Path, taxonomy: &ClassTaxonomy, summary: &ExportSummary) -> Result<ExportResult> {
    let manifest = DatasetManifest::new(taxonomy.schema_digest(), summary.records.clone())?;
    io::write_manifest(path, &manifest)?;
    log::info!(
        "exported {} accepted of {} reviewed ({:.1}% acceptance)",
        summary.accepted,
        summary.accepted + summary.rejected,
        100.0 * summary.acceptance_rate
    );
    Ok(ExportResult {
        path: path.display().to_string(),
        accepted: summary.accepted,
        rejected: summary.rejected,
        acceptance_rate: summary.acceptance_rate,
    })
}

#[derive(Serialize, Deserialize)]
struct ErrorBody {
    error: &'static str,
    message: String,
}

pub struct ApiError {
    status: StatusCode,
    code: &'static str,
    message: String,
}

impl ApiError {
    fn new(status: StatusCode, code: &'static str, message: impl Into<String>) -> Self {
        ApiError {
            status,
            code,
            message: message.into(),
        }
    }
}

impl From<Error> for ApiError {
    fn from(e: Error) -> Self {
        match &e {
            Error::Review(r) => match r {
                ReviewError::NotFound(_) => ApiError::new(StatusCode::NOT_FOUND, "not_found", e.to_string()),
                _ if r.is_conflict() => ApiError::new(StatusCode::CONFLICT, "conflict", e.to_string()),
                _ => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", e.to_string()),
            },
            _ => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "internal", e.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let body = ErrorBody {
            error: self.code,
            message: self.message,
        };
        (self.status, Json(body)).into_response()
    }
}

type ApiResult<T> = std::result::Result<T, ApiError>;

fn reviewer(headers: &HeaderMap) -> String {
    headers
        .get(REVIEWER_HEADER)
        .and_then(|v| v.to_str().ok())
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .unwrap_or(DEFAULT_REVIEWER)
        .to_string()
}

#[derive(Serialize, Deserialize)]
pub struct NextResponse {
    pub item: Option<ReviewItem>,
}

/// Body of `POST /api/items/{id}/decision`.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecisionBody {
    pub verdict: Decision,
    #[serde(default)]
    pub tags: Vec<DefectTag>,
    #[serde(default)]
    pub note: String,
    #[serde(default)]
    pub duration_ms: Option<u64>,
}

#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct LegendEntry {
    pub id: ClassId,
    pub name: String,
    pub colour: Rgb,
}

/// Body of `GET /api/items/{id}/mask`: raw class ids, row-major, base64.
#[derive(Clone, PartialEq, Debug, Serialize, Deserialize)]
pub struct MaskBody {
    pub width: usize,
    pub height: usize,
    pub ignore_index: ClassId,
    pub ids: String,
    pub legend: Vec<LegendEntry>,
}

#[derive(Deserialize)]
struct OverlayQuery {
    alpha: Option<String>,
}

type Shared = Arc<ReviewService>;

async fn next_item(State(s): State<Shared>, headers: HeaderMap) -> ApiResult<Json<NextResponse>> {
    let item = s.next(&reviewer(&headers))?;
    Ok(Json(NextResponse { item }))
}

async fn decide(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    headers: HeaderMap,
    body: Bytes,
) -> ApiResult<Json<ReviewItem>> {
    let body: DecisionBody = serde_json::from_slice(&body)
        .map_err(|e| ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "validation", format!("decision body: {e}")))?;
    let input = DecisionInput {
        tags: body.tags,
        note: body.note,
        duration_ms: body.duration_ms,
    };
    Ok(Json(s.decide(&id, &reviewer(&headers), body.verdict, input)?))
}

fn find(s: &ReviewService, id: &str) -> ApiResult<ReviewItem> {
    s.item(id)
        .ok_or_else(|| ApiError::new(StatusCode::NOT_FOUND, "not_found", format!("no item '{id}'")))
}

fn png(bytes: Vec<u8>) -> Response {
    ([(header::CONTENT_TYPE, "image/png")], Body::from(bytes)).into_response()
}

async fn photo(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Response> {
    let item = find(&s, &id)?;
    let raster = io::read_raster(Path::new(&item.photo_path))?;
    Ok(png(io::raster_png_bytes(&raster)))
}

async fn mask(State(s): State<Shared>, UrlPath(id): UrlPath<String>) -> ApiResult<Json<MaskBody>> {
    let item = find(&s, &id)?;
    let tax = s.taxonomy();
    let m = io::read_id_mask(Path::new(&item.mask_path), tax.ignore_index())?;
    let legend = m
        .distinct_classes()
        .into_iter()
        .filter_map(|c| tax.get(c))
        .map(|c| LegendEntry {
            id: c.id,
            name: c.name.clone(),
            colour: c.colour,
        })
        .collect();
    Ok(Json(MaskBody {
        width: m.width(),
        height: m.height(),
        ignore_index: m.ignore_index(),
        ids: B64.encode(m.data()),
        legend,
    }))
}

async fn overlay(
    State(s): State<Shared>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<OverlayQuery>,
) -> ApiResult<Response> {
    let alpha = match q.alpha.as_deref() {
        None | Some("") => 0.5,
        Some(a) => a
            .parse::<f64>()
            .ok()
            .filter(|a| (0.0..=1.0).contains(a))
            .ok_or_else(|| ApiError::new(StatusCode::BAD_REQUEST, "bad_request", format!("alpha '{a}' is not in [0, 1]")))?,
    };
    let item = find(&s, &id)?;
    let tax = s.taxonomy();
    let photo = io::read_raster(Path::new(&item.photo_path))?;
    let m = io::read_id_mask(Path::new(&item.mask_path), tax.ignore_index())?;
    let colours = encode_mask(&m, tax).map_err(Error::from)?;
    Ok(png(io::raster_png_bytes(&io::overlay(&photo, &colours, alpha))))
}

async fn stats(State(s): State<Shared>) -> Json<ReviewStats> {
    Json(s.stats())
}

async fn export(State(s): State<Shared>) -> ApiResult<Json<ExportResult>> {
    Ok(Json(s.export(None)?))
}

async fn fallback() -> ApiError {
    ApiError::new(StatusCode::NOT_FOUND, "not_found", "no such endpoint")
}

pub fn router(service: Shared) -> Router {
    Router::new()
        .route("/api/items/next", get(next_item))
        .route("/api/items/{id}/decision", post(decide))
        .route("/api/items/{id}/photo", get(photo))
        .route("/api/items/{id}/mask", get(mask))
        .route("/api/items/{id}/overlay", get(overlay))
        .route("/api/stats", get(stats))
        .route("/api/export", post(export))
        .fallback(fallback)
        .with_state(service)
}

/// Serves until interrupted.
pub fn serve(service: Shared, addr: &str) -> Result<()> {
    let rt = tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Error::Server(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(addr)
            .await
            .map_err(|e| Error::Server(format!("cannot bind {addr}: {e}")))?;
        let local = listener.local_addr().map_err(|e| Error::Server(e.to_string()))?;
        log::info!("review service listening on http://{local}");
        axum::serve(listener, router(service))
            .with_graceful_shutdown(async {
                let _ = tokio::signal::ctrl_c().await;
            })
            .await
            .map_err(|e| Error::Server(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use regenforge_core::pair::{QaReport, Verdict};

    fn entry(id: &str) -> QueueEntry {
        QueueEntry {
            id: id.into(),
            photo_path: String::new(),
            mask_path: String::new(),
            qa: QaReport {
                size_mismatch: false,
                photo_dims: (8, 8),
                mask_dims: (8, 8),
                palette_leakage_fraction: 0.0,
                unmapped_fraction: 0.0,
                misalignment_score: 0.0,
                watermark_cropped: false,
                verdict: Verdict::AutoPass,
                tags: vec![],
                seam_column: None,
                error: None,
            },
        }
    }

    #[test]
    fn torn_tail_is_dropped_and_log_stays_appendable() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.log");
        let mut buf = Vec::new();
        encode_record(&ReviewEvent::Enqueued { entry: entry("a"), at_ms: 1 }, &mut buf);
        let full = buf.len();
        encode_record(&ReviewEvent::Enqueued { entry: entry("b"), at_ms: 2 }, &mut buf);
        std::fs::write(&path, &buf[..full + 7]).unwrap();
        let (mut log, events) = EventLog::open(&path).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), full as u64);
        log.append(&[ReviewEvent::Enqueued { entry: entry("c"), at_ms: 3 }]).unwrap();
        assert_eq!(read_log(&path).unwrap().len(), 2);
    }

    #[test]
    fn reopened_service_replays_to_the_same_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.log");
        let clock = Arc::new(ManualClock::new(1000));
        let open = || {
            ReviewService::open(
                &path,
                60_000,
                ClassTaxonomy::forest_regeneration_generation(),
                dir.path().join("export.jsonl"),
                clock.clone(),
            )
            .unwrap()
        };
        let s = open();
        s.enqueue(vec![entry("a"), entry("b")]).unwrap();
        let item = s.next("r1").unwrap().unwrap();
        clock.advance(4000);
        s.decide(&item.id, "r1", Decision::Accept, DecisionInput::default()).unwrap();
        assert_eq!(s.item(&item.id).unwrap().review_duration_ms, Some(4000));
        let before = s.snapshot();
        drop(s);
        let again = open();
        assert_eq!(again.snapshot(), before);
        assert_eq!(again.enqueue(vec![entry("a")]).unwrap().enqueued, 0);
    }

    #[test]
    fn corrupt_record_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("review.log");
        let mut buf = 5u32.to_le_bytes().to_vec();
        buf.extend_from_slice(b"nope!");
        std::fs::write(&path, buf).unwrap();
        assert!(matches!(EventLog::open(&path), Err(Error::Format { .. })));
    }

    proptest::proptest! {
        #[test]
        fn any_prefix_decodes_to_the_complete_records(n in 0usize..8, cut in 0.0f64..=1.0) {
            let mut buf = Vec::new();
            let mut ends = vec![0];
            for i in 0..n {
                encode_record(&ReviewEvent::Enqueued { entry: entry(&format!("e{i}")), at_ms: i as u64 }, &mut buf);
                ends.push(buf.len());
            }
            let cut = (cut * buf.len() as f64) as usize;
            let (events, used) = decode_records(&buf[..cut], Path::new("log")).unwrap();
            let whole = ends.iter().rposition(|&e| e <= cut).unwrap();
            proptest::prop_assert_eq!(events.len(), whole);
            proptest::prop_assert_eq!(used, ends[whole]);
        }
    }
}
