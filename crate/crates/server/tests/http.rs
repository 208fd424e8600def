use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use flintlet_core::harness::FlintConfig;
use flintlet_core::store::ObjectStore;
use flintlet_server::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn app() -> axum::Router {
    let mut cfg = FlintConfig::default();
    cfg.harness.partitions = 4;
    cfg.limits.time_scale = 1e-3;
    router(AppState::new(Arc::new(ObjectStore::in_memory()), cfg))
}

async fn call(
    app: &axum::Router,
    method: &str,
    path: &str,
    body: Option<Value>,
) -> (StatusCode, Value) {
    let req = Request::builder()
        .method(method)
        .uri(path)
        .header("content-type", "application/json")
        .body(match body {
            Some(b) => Body::from(b.to_string()),
            None => Body::empty(),
        })
        .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (
        status,
        serde_json::from_slice(&bytes).unwrap_or(Value::Null),
    )
}

async fn generated() -> axum::Router {
    let app = app();
    let (s, v) = call(
        &app,
        "POST",
        "/v1/datasets",
        Some(json!({"records": 1500, "seed": 7, "out": "flint-data/taxi", "parts": 3})),
    )
    .await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    assert_eq!(v["parts"].as_array().unwrap().len(), 3);
    app
}

#[tokio::test]
async fn health_and_config() {
    let app = app();
    let (s, v) = call(&app, "GET", "/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["status"], "ok");
    let (_, v) = call(&app, "GET", "/v1/config", None).await;
    assert_eq!(v["harness"]["partitions"], 4);
}

#[tokio::test]
async fn count_query_over_http() {
    let app = generated().await;
    let (s, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q0", "mode": "flint"})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["answer"], 1500);
    assert_eq!(v["verdict"], "OK");
    assert!(v["invocations"].as_u64().unwrap() >= 1);

    let (_, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q0", "mode": "local"})),
    )
    .await;
    assert_eq!(v["answer"], 1500);
    assert!(v.get("verdict").is_none());
}

#[tokio::test]
async fn bench_subset_and_explain() {
    let app = generated().await;
    let (s, v) = call(
        &app,
        "POST",
        "/v1/bench",
        Some(json!({"queries": ["q1", "q4"]})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let qs = v["queries"].as_array().unwrap();
    assert_eq!(qs.len(), 2);
    assert!(qs.iter().all(|q| q["verdict"] == "OK"));

    let (s, v) = call(
        &app,
        "POST",
        "/v1/explain",
        Some(json!({"query": "q1", "partitions": 9})),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let stages = v["stages"].as_array().unwrap();
    assert_eq!(stages.len(), 2);
    assert_eq!(stages[1]["num_tasks"], 9);
}

#[tokio::test]
async fn errors_are_json() {
    let app = app();
    let (s, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q0", "mode": "flint"})),
    )
    .await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["error"], "no_dataset");

    let (s, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q8", "mode": "flint"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_request");

    let (s, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q0", "mode": "flint", "input": "/"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(v["error"], "bad_config");
}

#[tokio::test]
async fn forced_failure_is_reported() {
    let app = generated().await;
    let mut cfg = FlintConfig::default();
    cfg.harness.faults.crash_probability = 1.0;
    cfg.limits.time_scale = 1e-3;
    let (s, v) = call(
        &app,
        "POST",
        "/v1/runs",
        Some(json!({"query": "q0", "mode": "flint", "config": cfg})),
    )
    .await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["error"], "run_failed");
}
