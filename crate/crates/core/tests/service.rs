mod support;

use std::path::PathBuf;
use std::sync::Arc;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use http_body_util::BodyExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};
use tower::ServiceExt;

use viscode::corpus::{generate_chart, random_spec, ChartType};
use viscode::importance::{ImportanceModel, ImportanceNetConfig};
use viscode::models::ModelSet;
use viscode::raster::ChartImage;
use viscode::service::{router, ServiceConfig};
use viscode::stegonet::{StegoConfig, StegoModel};

fn untrained() -> ModelSet {
    let net = ImportanceNetConfig { depth: 3, base_width: 8, refinement: true, input_size: 32 };
    ModelSet {
        dir: PathBuf::from("untrained"),
        importance: ImportanceModel::new(net, 1).unwrap(),
        stego: StegoModel::new(StegoConfig::desk(), 1),
    }
}

fn app(models: ModelSet, config: ServiceConfig) -> Router {
    router(Arc::new(models), config)
}

fn chart_png(w: usize, h: usize) -> Vec<u8> {
    let spec = random_spec(ChartType::Bar, w, h, &mut ChaCha8Rng::seed_from_u64(3));
    generate_chart(&spec, 3).unwrap().image.encode_png().unwrap()
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    (status, resp.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

#[tokio::test]
async fn health_reports_models() {
    let app = app(untrained(), ServiceConfig::default());
    let (s, v) = call_json(&app, "GET", "/api/health", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["ok"], true);
    assert!(v["models"].is_object());
}

#[tokio::test]
async fn malformed_requests_get_structured_errors() {
    let app = app(untrained(), ServiceConfig::default());
    let req = Request::post("/api/encode").header(header::CONTENT_TYPE, "application/json").body(Body::from("{nope")).unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::BAD_REQUEST);
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    assert_eq!(v["ok"], false);
    assert_eq!(v["error"]["code"], "malformed");
    assert!(v["error"]["correlation_id"].is_string());

    let (s, v) = call_json(&app, "POST", "/api/encode", Some(json!({ "payload": "x" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    let (s, v) = call_json(&app, "POST", "/api/decode", Some(json!({ "image": B64.encode(b"not an image") }))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("bad_image")));
    let (s, _) = call_json(&app, "GET", "/api/nothing", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn capacity_and_size_limits() {
    let cfg = ServiceConfig { max_payload_bytes: 4096, ..ServiceConfig::default() };
    let app = app(untrained(), cfg);
    let image = B64.encode(chart_png(320, 320));
    let (s, v) = call_json(&app, "POST", "/api/encode", Some(json!({ "image": image, "payload": "y".repeat(3000) }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"]["code"], "capacity_exceeded");
    assert!(v["error"]["details"]["max_chars"].is_number());

    let (s, v) = call_json(&app, "POST", "/api/encode", Some(json!({ "image": image, "payload": "y".repeat(5000) }))).await;
    assert_eq!(s, StatusCode::PAYLOAD_TOO_LARGE, "{v}");

    let (s, v) = call_json(&app, "POST", "/api/encode", Some(json!({ "image": image, "payload": "hi", "format": "jpeg" }))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::BAD_REQUEST, Some("lossy_refused")));
}

#[tokio::test]
async fn decode_of_plain_chart_is_unprocessable() {
    let app = app(untrained(), ServiceConfig::default());
    let (s, v) = call_json(&app, "POST", "/api/decode", Some(json!({ "image": B64.encode(chart_png(400, 300)) }))).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY, "{v}");
    assert_eq!(v["error"]["code"], "no_position_code");
}

#[tokio::test]
async fn retarget_from_spec() {
    let app = app(untrained(), ServiceConfig::default());
    let spec = random_spec(ChartType::Bar, 400, 300, &mut ChaCha8Rng::seed_from_u64(4)).to_json();
    let (s, v) = call_json(&app, "POST", "/api/retarget", Some(json!({ "spec": spec, "chart_type": "line" }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let img = ChartImage::decode(&B64.decode(v["data"]["image"].as_str().unwrap()).unwrap()).unwrap();
    assert_eq!(img.dims(), (400, 300));
    assert_eq!(v["data"]["spec"]["chart_type"], "line");

    let (s, v) = call_json(&app, "POST", "/api/retarget", Some(json!({ "spec": spec, "theme": "no-such-theme" }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST, "{v}");
    let (s, _) = call_json(&app, "POST", "/api/retarget", Some(json!({ "spec": spec, "bandwidth": -1 }))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn ui_is_served_from_the_bundle() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("index.html"), "<h1>ui</h1>").unwrap();
    std::fs::create_dir(dir.path().join("assets")).unwrap();
    std::fs::write(dir.path().join("assets/app.js"), "1").unwrap();
    let cfg = ServiceConfig { ui_dir: Some(dir.path().to_path_buf()), ..ServiceConfig::default() };
    let app = app(untrained(), cfg);

    let (s, _) = call(&app, "GET", "/ui", None).await;
    assert!(s.is_redirection());
    let (s, b) = call(&app, "GET", "/ui/", None).await;
    assert_eq!((s, b.as_slice()), (StatusCode::OK, b"<h1>ui</h1>".as_slice()));
    let resp = app.clone().oneshot(Request::get("/ui/assets/app.js").body(Body::empty()).unwrap()).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()[header::CONTENT_TYPE].to_str().unwrap().starts_with("text/javascript"));
    let (s, _) = call(&app, "GET", "/ui/../Cargo.toml", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = call(&app, "GET", "/ui/missing.css", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 1)]
async fn encode_then_decode_round_trip() {
    let models = tokio::task::spawn_blocking(|| ModelSet::load(&support::model_dir()).unwrap()).await.unwrap();
    let app = app(models, ServiceConfig::default());
    let payload = "region,sales\nnorth,12\nsouth,7\n";
    let (s, v) = call_json(
        &app,
        "POST",
        "/api/encode",
        Some(json!({ "image": B64.encode(chart_png(500, 400)), "payload": payload, "kind": "source" })),
    )
    .await;
    assert_eq!(s, StatusCode::OK, "{v}");
    let data = &v["data"];
    assert_eq!(data["format"], "png");
    assert!(data["psnr"].as_f64().unwrap() > 25.0);
    assert_eq!(data["blocks"], 1);

    let (s, v) = call_json(&app, "POST", "/api/decode", Some(json!({ "image": data["image"] }))).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["data"]["kind"], "source");
    assert_eq!(v["data"]["body"], payload);
    assert_eq!(v["data"]["utf8"], true);

    // Only spec payloads can be retargeted.
    let (s, v) = call_json(&app, "POST", "/api/retarget", Some(json!({ "image": data["image"], "chart_type": "line" }))).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNPROCESSABLE_ENTITY, Some("wrong_payload_kind")), "{v}");
}
