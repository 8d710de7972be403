mod common;

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use regenforge::io;
use regenforge::service::{router, ManualClock, MaskBody, ReviewService, REVIEWER_HEADER};
use regenforge_core::pair::Verdict;
use regenforge_core::review::QueueEntry;
use regenforge_core::ClassTaxonomy;

struct Harness {
    _dir: tempfile::TempDir,
    service: Arc<ReviewService>,
    clock: Arc<ManualClock>,
    export: std::path::PathBuf,
    reviewable: usize,
}

fn harness() -> Harness {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("extracted");
    let records = common::extract_fixtures(&out);
    let entries: Vec<QueueEntry> = records.iter().map(|r| r.queue_entry(&out)).collect();
    let reviewable = records.iter().filter(|r| r.report.verdict != Verdict::AutoReject).count();
    let clock = Arc::new(ManualClock::new(1_000));
    let export = dir.path().join("accepted.jsonl");
    let service = ReviewService::open(
        &dir.path().join("review.log"),
        60_000,
        ClassTaxonomy::forest_regeneration(),
        export.clone(),
        clock.clone(),
    )
    .unwrap();
    service.enqueue(entries).unwrap();
    Harness {
        _dir: dir,
        service: Arc::new(service),
        clock,
        export,
        reviewable,
    }
}

async fn call(h: &Harness, method: &str, uri: &str, reviewer: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri).header(REVIEWER_HEADER, reviewer);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = router(h.service.clone()).oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, bytes)
}

fn json_of(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

async fn next_id(h: &Harness, reviewer: &str) -> Option<String> {
    let (status, body) = call(h, "GET", "/api/items/next", reviewer, None).await;
    assert_eq!(status, StatusCode::OK);
    json_of(&body)["item"]["id"].as_str().map(String::from)
}

#[tokio::test]
async fn decision_flow_and_error_statuses() {
    let h = harness();
    let id = next_id(&h, "ana").await.expect("an item");
    let uri = format!("/api/items/{id}/decision");

    let (status, body) = call(&h, "POST", &uri, "ana", Some(json!({"verdict": "reject"}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["error"], "validation");

    let (status, body) = call(&h, "POST", &uri, "ana", Some(json!({"verdict": "accept", "bogus": 1}))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(json_of(&body)["error"], "validation");

    let (status, body) = call(&h, "POST", &uri, "ben", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(status, StatusCode::CONFLICT, "lease held by another reviewer");
    assert_eq!(json_of(&body)["error"], "conflict");

    h.clock.advance(4_200);
    let (status, body) = call(&h, "POST", &uri, "ana", Some(json!({"verdict": "accept", "note": "fine"}))).await;
    assert_eq!(status, StatusCode::OK);
    let item = json_of(&body);
    assert_eq!(item["status"], "accepted");
    assert_eq!(item["review_duration_ms"], 4_200);

    let (status, _) = call(&h, "POST", &uri, "ana", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(status, StatusCode::CONFLICT);

    let (status, body) = call(&h, "POST", "/api/items/nope/decision", "ana", Some(json!({"verdict": "accept"}))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["error"], "not_found");

    let (status, body) = call(&h, "GET", "/api/nothing", "ana", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(json_of(&body)["error"], "not_found");
}

#[tokio::test]
async fn photo_mask_and_overlay_endpoints() {
    let h = harness();
    let id = next_id(&h, "ana").await.unwrap();
    let item = h.service.item(&id).unwrap();

    let (status, png) = call(&h, "GET", &format!("/api/items/{id}/photo"), "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    let photo = image::load_from_memory(&png).unwrap().to_rgb8();
    let on_disk = io::read_raster(Path::new(&item.photo_path)).unwrap();
    assert_eq!((photo.width() as usize, photo.height() as usize), (on_disk.width(), on_disk.height()));

    let (status, body) = call(&h, "GET", &format!("/api/items/{id}/mask"), "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    let mask: MaskBody = serde_json::from_slice(&body).unwrap();
    let expected = io::read_id_mask(Path::new(&item.mask_path), 255).unwrap();
    assert_eq!(B64.decode(&mask.ids).unwrap(), expected.data());
    assert_eq!((mask.width, mask.height), (expected.width(), expected.height()));
    let legend: BTreeSet<u8> = mask.legend.iter().map(|l| l.id).collect();
    assert_eq!(legend, expected.distinct_classes().into_iter().collect());

    let (status, png) = call(&h, "GET", &format!("/api/items/{id}/overlay?alpha=0"), "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(image::load_from_memory(&png).unwrap().to_rgb8(), photo, "alpha 0 shows the photo");

    let (status, _) = call(&h, "GET", &format!("/api/items/{id}/overlay"), "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    for bad in ["2", "-0.1", "x"] {
        let (status, body) = call(&h, "GET", &format!("/api/items/{id}/overlay?alpha={bad}"), "ana", None).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "alpha={bad}");
        assert_eq!(json_of(&body)["error"], "bad_request");
    }
    let (status, _) = call(&h, "GET", "/api/items/nope/photo", "ana", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn stats_and_export_after_a_session() {
    let h = harness();
    let mut decided = 0;
    while let Some(id) = next_id(&h, "ana").await {
        let body = if decided % 3 == 2 {
            json!({"verdict": "reject", "tags": ["hallucination"], "duration_ms": 1000})
        } else {
            json!({"verdict": "accept", "duration_ms": 3000})
        };
        let (status, _) = call(&h, "POST", &format!("/api/items/{id}/decision"), "ana", Some(body)).await;
        assert_eq!(status, StatusCode::OK);
        decided += 1;
    }
    assert_eq!(decided, h.reviewable);
    let rejected = decided / 3;
    let accepted = decided - rejected;

    let (status, body) = call(&h, "GET", "/api/stats", "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    let s = json_of(&body);
    assert_eq!(s["accepted"], accepted);
    assert_eq!(s["rejected"], rejected);
    assert_eq!(s["pending"], 0);
    assert_eq!(s["auto_rejected"], 13 - h.reviewable);
    let rate = s["acceptance_rate_reviewed"].as_f64().unwrap();
    assert!((rate - accepted as f64 / decided as f64).abs() < 1e-12);
    assert_eq!(s["tag_counts"]["hallucination"], rejected);

    let (status, body) = call(&h, "POST", "/api/export", "ana", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(json_of(&body)["accepted"], accepted);
    let manifest = io::read_manifest(&h.export).unwrap();
    assert_eq!(manifest.records.len(), accepted);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 8)]
async fn concurrent_next_callers_never_share_an_item() {
    let h = Arc::new(harness());
    let mut tasks = Vec::new();
    for i in 0..16 {
        let h = h.clone();
        tasks.push(tokio::spawn(async move { next_id(&h, &format!("reviewer-{i}")).await }));
    }
    let mut got = Vec::new();
    for t in tasks {
        if let Some(id) = t.await.unwrap() {
            got.push(id);
        }
    }
    let distinct: BTreeSet<&String> = got.iter().collect();
    assert_eq!(got.len(), h.reviewable);
    assert_eq!(distinct.len(), got.len());
}
