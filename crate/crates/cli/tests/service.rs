use std::path::Path;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use http_body_util::BodyExt;
use tower::ServiceExt;

use pdas_cli::service::{router, AppState, MaskPayload, SegmentResponse, ServiceConfig};
use pdas_core::data::{generate_domain, DomainSpec, LabelOptions};
use pdas_core::dataset::{image_from_png_bytes, image_to_png_bytes, write_dataset};
use pdas_core::infer::interactive_predict;
use pdas_core::metrics::Rle;
use pdas_core::model::{ModelConfig, ModelState};
use pdas_core::Grid;

fn small_spec() -> DomainSpec {
    DomainSpec {
        image_size: 32,
        instances_per_image: (2, 3),
        instance_radius: (3.0, 5.0),
        ..DomainSpec::source()
    }
}

fn write_small_dataset(dir: &Path, n: usize) {
    let labels = LabelOptions::default();
    let samples = generate_domain(&small_spec(), n, &labels).unwrap();
    write_dataset(dir, &small_spec(), &labels, &samples).unwrap();
}

fn config(root: Option<&Path>) -> ServiceConfig {
    ServiceConfig {
        port: 8080,
        checkpoint: "unused.ckpt".into(),
        dataset_root: root.map(Path::to_path_buf),
        max_concurrent: 2,
        max_image_side: pdas_cli::service::MAX_IMAGE_SIDE,
    }
}

fn model() -> ModelState {
    ModelState::new(ModelConfig::tiny(), 5).unwrap()
}

async fn call(state: &AppState, req: Request<Body>) -> (StatusCode, serde_json::Value) {
    let resp = router(state.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap())
}

async fn get(state: &AppState, uri: &str) -> (StatusCode, serde_json::Value) {
    call(state, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post_raw(state: &AppState, body: impl Into<Body>) -> (StatusCode, serde_json::Value) {
    let req = Request::post("/v1/segment")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap();
    call(state, req).await
}

async fn post(state: &AppState, body: serde_json::Value) -> (StatusCode, serde_json::Value) {
    post_raw(state, body.to_string()).await
}

fn rle_of(v: &serde_json::Value) -> Rle {
    let r: SegmentResponse = serde_json::from_value(v.clone()).unwrap();
    match r.mask {
        MaskPayload::Rle(r) => r,
        MaskPayload::Png(_) => panic!("expected rle"),
    }
}

#[tokio::test]
async fn health_reports_loading_then_ok() {
    let state = AppState::loading(&config(None));
    assert_eq!(get(&state, "/v1/health").await.1["status"], "loading");
    state.set_model(model());
    let (status, body) = get(&state, "/v1/health").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
}

#[tokio::test]
async fn segment_is_unavailable_while_loading() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let state = AppState::loading(&config(Some(dir.path())));
    let (status, body) = post(&state, serde_json::json!({ "image_id": "0000" })).await;
    assert_eq!(status, StatusCode::SERVICE_UNAVAILABLE);
    assert!(body["error"].is_string());
}

#[tokio::test]
async fn image_listing() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::with_model(&config(Some(dir.path())), model());
    assert_eq!(
        get(&state, "/v1/images").await.1,
        serde_json::json!({ "images": [] })
    );

    write_small_dataset(dir.path(), 40);
    let (status, body) = get(&state, "/v1/images").await;
    assert_eq!(status, StatusCode::OK);
    let images = body["images"].as_array().unwrap();
    assert_eq!(images.len(), 40);
    assert_eq!(
        images[0],
        serde_json::json!({ "id": "0000", "height": 32, "width": 32, "has_labels": true })
    );

    let id = images[7]["id"].as_str().unwrap();
    let (status, _) = post(&state, serde_json::json!({ "image_id": id })).await;
    assert_eq!(status, StatusCode::OK);

    let unconfigured = AppState::with_model(&config(None), model());
    assert_eq!(
        get(&unconfigured, "/v1/images").await.1,
        serde_json::json!({ "images": [] })
    );
}

#[tokio::test]
async fn missing_dataset_root_is_a_server_error() {
    let dir = tempfile::tempdir().unwrap();
    let state = AppState::with_model(&config(Some(&dir.path().join("absent"))), model());
    let (status, body) = get(&state, "/v1/images").await;
    assert_eq!(status, StatusCode::INTERNAL_SERVER_ERROR);
    assert!(body["error"].as_str().unwrap().contains("does not exist"));
}

#[tokio::test]
async fn segment_matches_direct_inference() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 2);
    let m = model();
    let state = AppState::with_model(&config(Some(dir.path())), m.clone());
    let ds = pdas_core::dataset::Dataset::open(dir.path()).unwrap();
    let image = ds.image("0001").unwrap();
    let sample = ds.sample("0001").unwrap();
    let p = sample.centers[0];

    let (status, body) = post(
        &state,
        serde_json::json!({ "image_id": "0001", "points": [] }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let direct = interactive_predict(&m, &image, &[]).unwrap();
    assert_eq!(rle_of(&body), Rle::encode(&direct.mask));
    assert_eq!(body["instances"], direct.num_instances);
    assert!(body["latency_ms"].as_f64().unwrap() >= 0.0);

    let prompted = interactive_predict(&m, &image, &[p]).unwrap();
    let pt = serde_json::json!({ "row": p.row, "col": p.col });
    let b64 = BASE64.encode(image_to_png_bytes(&image).unwrap());
    let (_, by_upload) = post(&state, serde_json::json!({ "image": b64, "points": [pt] })).await;
    assert_eq!(rle_of(&by_upload), Rle::encode(&prompted.mask));
}

#[tokio::test]
async fn duplicate_points_are_deduplicated() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let state = AppState::with_model(&config(Some(dir.path())), model());
    let pt = serde_json::json!({ "row": 10, "col": 12 });
    let (_, once) = post(
        &state,
        serde_json::json!({ "image_id": "0000", "points": [pt] }),
    )
    .await;
    let (_, twice) = post(
        &state,
        serde_json::json!({ "image_id": "0000", "points": [pt, pt] }),
    )
    .await;
    assert_eq!(once["mask"], twice["mask"]);
    assert_eq!(once["instances"], twice["instances"]);
}

#[tokio::test]
async fn identical_requests_are_byte_identical_under_concurrency() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let state = AppState::with_model(&config(Some(dir.path())), model());
    let body = serde_json::json!({ "image_id": "0000", "points": [{ "row": 3, "col": 30 }] });
    let handles: Vec<_> = (0..4)
        .map(|_| {
            let (s, b) = (state.clone(), body.clone());
            tokio::spawn(async move { post(&s, b).await.1["mask"].to_string() })
        })
        .collect();
    let mut masks = Vec::new();
    for h in handles {
        masks.push(h.await.unwrap());
    }
    assert!(masks.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test]
async fn out_of_bounds_point_is_rejected_with_index() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let state = AppState::with_model(&config(Some(dir.path())), model());
    let (status, body) = post(
        &state,
        serde_json::json!({ "image_id": "0000", "points": [{ "row": -1, "col": 0 }] }),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(
        body,
        serde_json::json!({ "error": "point 0 out of bounds" })
    );

    let pts = serde_json::json!([{ "row": 0, "col": 0 }, { "row": 5, "col": 32 }]);
    let (status, body) = post(
        &state,
        serde_json::json!({ "image_id": "0000", "points": pts }),
    )
    .await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(
        body,
        serde_json::json!({ "error": "point 1 out of bounds" })
    );
}

#[tokio::test]
async fn malformed_bodies_are_bad_requests() {
    let state = AppState::with_model(&config(None), model());
    for body in [
        "not json".to_string(),
        serde_json::json!({ "points": [] }).to_string(),
        serde_json::json!({ "image": "@@@" }).to_string(),
        serde_json::json!({ "image": BASE64.encode(b"not a png") }).to_string(),
        serde_json::json!({ "image": "", "return": "gif" }).to_string(),
        serde_json::json!({ "image_id": "0000" }).to_string(),
    ] {
        let (status, resp) = post_raw(&state, body.clone()).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        assert!(resp["error"].is_string());
    }
}

#[tokio::test]
async fn unknown_image_id_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let state = AppState::with_model(&config(Some(dir.path())), model());
    let (status, _) = post(&state, serde_json::json!({ "image_id": "9999" })).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn oversized_image_is_rejected() {
    let state = AppState::with_model(&config(None), model());
    let big = Grid::<f64>::new(16, 1025);
    let b64 = BASE64.encode(image_to_png_bytes(&big).unwrap());
    let (status, _) = post(&state, serde_json::json!({ "image": b64 })).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
}

#[tokio::test]
async fn png_mask_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    write_small_dataset(dir.path(), 1);
    let m = model();
    let state = AppState::with_model(&config(Some(dir.path())), m.clone());
    let (status, body) = post(
        &state,
        serde_json::json!({ "image_id": "0000", "return": "png" }),
    )
    .await;
    assert_eq!(status, StatusCode::OK);
    let png = BASE64.decode(body["mask"].as_str().unwrap()).unwrap();
    let decoded = image_from_png_bytes(&png).unwrap();
    let image = pdas_core::dataset::Dataset::open(dir.path())
        .unwrap()
        .image("0000")
        .unwrap();
    let direct = interactive_predict(&m, &image, &[]).unwrap();
    let mask: Vec<bool> = decoded.data().iter().map(|&v| v > 0.5).collect();
    assert_eq!(mask, direct.mask.data());
}

#[tokio::test]
async fn cors_headers_are_present() {
    let state = AppState::with_model(&config(None), model());
    let req = Request::get("/v1/health")
        .header("origin", "http://localhost:5173")
        .body(Body::empty())
        .unwrap();
    let resp = router(state).oneshot(req).await.unwrap();
    assert!(resp.headers().contains_key("access-control-allow-origin"));
}
