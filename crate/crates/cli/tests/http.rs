use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use maskprop::engine::checkpoint::RunCheckpoint;
use maskprop::hac::{cluster_dataset, DEFAULT_MASK_CAP};
use maskprop::service::{QuestionKind, SessionStore, StoreOptions};
use maskprop::synth::{generate, Scenario};
use maskprop::{EngineConfig, MaskRecord, Strategy};
use serde_json::{json, Value};
use tower::ServiceExt;

fn checkpoint() -> RunCheckpoint {
    let masks = generate(&Scenario { classes: 2, ..Scenario::default() }, 60, 9).unwrap();
    let trees = cluster_dataset(&masks, 1.0, DEFAULT_MASK_CAP).unwrap();
    RunCheckpoint::start(trees, masks, Strategy::Selection, EngineConfig::default()).unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let request = Request::builder().method(method).uri(uri).header("content-type", "application/json");
    let request = match body {
        Some(b) => request.body(Body::from(b.to_string())).unwrap(),
        None => request.body(Body::empty()).unwrap(),
    };
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = response.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

/// Truthful label for an open question, read from the store's side.
fn truth(store: &SessionStore, session: &str, token: &str) -> bool {
    let state = store.state(session).unwrap();
    let q = state.outstanding().find(|q| q.token == token).unwrap();
    let mask: &MaskRecord = match &q.kind {
        QuestionKind::Engine { mask_id, .. } => state.checkpoint.masks.iter().find(|m| &m.id == mask_id).unwrap(),
        QuestionKind::Gold { gold_index } => &state.spec.gold[*gold_index].mask,
    };
    mask.is_correct(state.checkpoint.config.k_iou).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(SessionStore::open(dir.path(), StoreOptions::default()).unwrap());
    let app = maskprop_cli::server::router(store.clone(), None);
    let create = json!({ "session_id": "s1", "checkpoint": checkpoint() });

    let (status, body) = call(&app, "POST", "/sessions", Some(create.clone())).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(body["session_id"], "s1");
    let (status, body) = call(&app, "POST", "/sessions", Some(create)).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "session_exists");

    let (status, body) = call(&app, "GET", "/sessions/nope/next", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["kind"], "unknown_session");

    let (status, first) = call(&app, "GET", "/sessions/s1/next", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(first["status"], "question");
    assert_eq!(first["version"], 1);
    let token = first["token"].as_str().unwrap().to_string();
    assert_eq!(token.len(), 16);
    assert!(first.get("mask_id").is_none() && first.get("gt_iou").is_none());
    // asking again without answering returns the same question
    let (_, again) = call(&app, "GET", "/sessions/s1/next", None).await;
    assert_eq!(again["token"], first["token"]);

    let (status, body) = call(&app, "POST", "/sessions/s1/answers", Some(json!({ "token": "0000000000000000", "label": true }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(body["kind"], "unknown_token");
    let (status, _) = call(&app, "POST", "/sessions/s1/answers", Some(json!({ "token": token, "label": 7 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);

    let label = truth(&store, "s1", &token) as u8;
    let (status, ack) = call(&app, "POST", "/sessions/s1/answers", Some(json!({ "token": token, "label": label, "response_ms": 1500 }))).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(ack["answered"], 1);
    let (status, body) = call(&app, "POST", "/sessions/s1/answers", Some(json!({ "token": token, "label": label }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_eq!(body["kind"], "duplicate_answer");

    let mut answered = 1;
    loop {
        let (_, next) = call(&app, "GET", "/sessions/s1/next", None).await;
        if next["status"] == "drained" {
            assert_eq!(next["finished"], true);
            break;
        }
        let token = next["token"].as_str().unwrap().to_string();
        let label = truth(&store, "s1", &token);
        let (status, _) = call(&app, "POST", "/sessions/s1/answers", Some(json!({ "token": token, "label": label, "response_ms": 1500 }))).await;
        assert_eq!(status, StatusCode::OK);
        answered += 1;
    }

    let (status, progress) = call(&app, "GET", "/sessions/s1/progress", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(progress["answered"], answered);
    assert_eq!(progress["outstanding"], 0);
    assert_eq!(progress["finished"], true);
    assert_eq!(progress["flagged"], false);

    let (status, export) = call(&app, "GET", "/sessions/s1/export", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(export["flagged"], false);
    let labels = export["labels"].as_array().unwrap();
    assert_eq!(labels.len() as u64, progress["quantity"].as_u64().unwrap());
    assert!(labels.iter().all(|l| l["trusted"] == true));

    // a restarted store serves the same export
    drop(app);
    let reopened = Arc::new(SessionStore::open(dir.path(), StoreOptions::default()).unwrap());
    let app = maskprop_cli::server::router(reopened, None);
    let (_, export_again) = call(&app, "GET", "/sessions/s1/export", None).await;
    assert_eq!(export_again, export);
}

#[tokio::test]
async fn images_are_served_when_configured() {
    let dir = tempfile::tempdir().unwrap();
    let images = dir.path().join("images");
    std::fs::create_dir_all(&images).unwrap();
    std::fs::write(images.join("a.png"), b"png").unwrap();
    let store = Arc::new(SessionStore::open(dir.path().join("store"), StoreOptions::default()).unwrap());
    let app = maskprop_cli::server::router(store, Some(&images));
    let response = app
        .clone()
        .oneshot(Request::builder().uri("/images/a.png").body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(response.status(), StatusCode::OK);
    assert_eq!(&response.into_body().collect().await.unwrap().to_bytes()[..], b"png");
    let response = app.oneshot(Request::builder().uri("/images/missing.png").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(response.status(), StatusCode::NOT_FOUND);
}
