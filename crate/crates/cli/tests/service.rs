use std::process::Command;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use stylemap::flow::{build_model, FlowConfig, FlowModel, Variant};
use stylemap::imaging::{decode_image, encode_png, psnr, BitDepth, ImageBuffer, ImagePair};
use stylemap::style::{apply_style, StyleMapEntry};
use stylemap::training::reconstruct;
use stylemap::{ModelContainer, StyleRecord, StyleVector};
use stylemap_cli::service::{router, AppState, SessionInfo, DEFAULT_UPLOAD_LIMIT};
use tower::ServiceExt;

fn model(variant: Variant) -> FlowModel<f32> {
    let mut m = build_model(FlowConfig::new(variant, 3, 8, 1)).unwrap();
    m.jitter_params(0.05, 4);
    m.mark_actnorm_ready();
    m
}

fn frame(w: usize, h: usize, phase: f32) -> ImageBuffer {
    ImageBuffer::from_fn(w, h, |x, y| {
        let u = x as f32 / w as f32;
        let v = y as f32 / h as f32;
        [0.1 + 0.8 * u, 0.2 + 0.6 * v, (0.5 + 0.4 * (phase + 3.0 * u * v).sin()).clamp(0.0, 1.0)]
    })
    .unwrap()
}

fn graded(src: &ImageBuffer) -> ImageBuffer {
    let px = src.pixels().iter().map(|p| [p[0].powf(0.8), p[1] * 0.9 + 0.05, p[2].powf(1.2)]).collect();
    ImageBuffer::from_pixels(src.width(), src.height(), px).unwrap()
}

fn png(img: &ImageBuffer) -> Vec<u8> {
    encode_png(img, BitDepth::Sixteen).unwrap()
}

fn app(m: FlowModel<f32>, limit: usize) -> (Router, AppState) {
    let styles = vec![StyleMapEntry {
        id: "p0".into(),
        values: vec![0.1; m.latent_dim()],
    }];
    let state = AppState::new(m, "abc123".into(), styles);
    (router(state.clone(), limit), state)
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Vec<u8>) {
    send(app, Request::get(uri).body(Body::empty()).unwrap()).await
}

async fn post(app: &Router, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    send(app, Request::post(uri).header("content-type", "image/png").body(Body::from(body)).unwrap()).await
}

async fn open_session(app: &Router, img: &ImageBuffer) -> SessionInfo {
    let (status, body) = post(app, "/sessions", png(img)).await;
    assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&body));
    serde_json::from_slice(&body).unwrap()
}

#[tokio::test]
async fn healthz_reports_model() {
    let (app, _) = app(model(Variant::Dim3), DEFAULT_UPLOAD_LIMIT);
    let (status, body) = get(&app, "/healthz").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["status"], "ok");
    assert_eq!(v["model_id"], "abc123");
    assert_eq!(v["dims"], 3);
}

#[tokio::test]
async fn map_is_pure_and_matches_apply() {
    let m = model(Variant::Dim3);
    let (app, state) = app(m.clone(), DEFAULT_UPLOAD_LIMIT);
    let src = frame(40, 30, 0.0);
    let info = open_session(&app, &src).await;
    assert_eq!((info.width, info.height, info.dims), (40, 30, 3));
    assert_eq!(state.session_count(), 1);

    let uri = format!("/sessions/{}/map?z=0,0,0", info.session_id);
    let (status, first) = get(&app, &uri).await;
    assert_eq!(status, StatusCode::OK);
    let (_, second) = get(&app, &uri).await;
    assert_eq!(first, second);

    // The upload is 16-bit, so the session sees the same pixels as a direct load.
    let src = decode_image(&png(&src)).unwrap();
    let expected = encode_png(&apply_style(&m, &src, &StyleVector::zero(3).unwrap()).unwrap(), BitDepth::Eight).unwrap();
    assert_eq!(first, expected);

    let (_, moved) = get(&app, &format!("/sessions/{}/map?z=1.5,-1,0.5", info.session_id)).await;
    assert_ne!(moved, first);
    let styled = apply_style(&m, &src, &StyleVector::manual(vec![1.5, -1.0, 0.5]).unwrap()).unwrap();
    assert_eq!(moved, encode_png(&styled, BitDepth::Eight).unwrap());
}

#[tokio::test]
async fn preview_is_jpeg() {
    let (app, _) = app(model(Variant::Dim2Split), DEFAULT_UPLOAD_LIMIT);
    let info = open_session(&app, &frame(16, 16, 1.0)).await;
    let resp = app
        .clone()
        .oneshot(Request::get(format!("/sessions/{}/map?z=0,0&preview=1", info.session_id)).body(Body::empty()).unwrap())
        .await
        .unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert_eq!(resp.headers()["content-type"], "image/jpeg");
    let body = resp.into_body().collect().await.unwrap().to_bytes();
    assert_eq!(&body[..2], &[0xFF, 0xD8]);
}

#[tokio::test]
async fn errors_have_the_documented_statuses() {
    let (app, _) = app(model(Variant::Dim3), 4096);
    let info = open_session(&app, &frame(8, 8, 0.0)).await;

    let missing = "00000000-0000-4000-8000-000000000000";
    assert_eq!(get(&app, &format!("/sessions/{missing}/map?z=0,0,0")).await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&app, "/sessions/not-a-uuid/map?z=0,0,0").await.0, StatusCode::NOT_FOUND);
    assert_eq!(post(&app, &format!("/sessions/{missing}/extract"), png(&frame(8, 8, 0.0))).await.0, StatusCode::NOT_FOUND);

    let map = |z: &str| format!("/sessions/{}/map?z={z}", info.session_id);
    let (status, body) = get(&app, &map("0,0")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert!(String::from_utf8_lossy(&body).contains("3 style dimensions"));
    assert_eq!(get(&app, &map("0,0,0,0")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, &map("a,b,c")).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(get(&app, &map("0,nan,0")).await.0, StatusCode::BAD_REQUEST);

    let big = png(&frame(64, 64, 0.0));
    assert!(big.len() > 4096);
    assert_eq!(post(&app, "/sessions", big).await.0, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(post(&app, "/sessions", b"garbage".to_vec()).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(post(&app, "/sessions", Vec::new()).await.0, StatusCode::BAD_REQUEST);

    let wrong_size = post(&app, &format!("/sessions/{}/extract", info.session_id), png(&frame(9, 8, 0.0))).await;
    assert_eq!(wrong_size.0, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn extract_then_map_reproduces_target() {
    let m = model(Variant::Dim3);
    let (app, _) = app(m.clone(), DEFAULT_UPLOAD_LIMIT);
    let src = frame(48, 32, 0.5);
    let tgt = graded(&src);
    let info = open_session(&app, &src).await;
    let (status, body) = post(&app, &format!("/sessions/{}/extract", info.session_id), png(&tgt)).await;
    assert_eq!(status, StatusCode::OK);
    let record: StyleRecord = serde_json::from_slice(&body).unwrap();
    assert_eq!(record.model_id, "abc123");
    assert_eq!(record.dims, 3);

    let z: Vec<String> = record.values.iter().map(|v| format!("{v:?}")).collect();
    let (_, rendered) = get(&app, &format!("/sessions/{}/map?z={}", info.session_id, z.join(","))).await;
    let rendered = decode_image(&rendered).unwrap();

    let pair = ImagePair::new("p", decode_image(&png(&src)).unwrap(), decode_image(&png(&tgt)).unwrap()).unwrap();
    let reference = psnr(&reconstruct(&m, &pair).unwrap(), &pair.target, 1.0).unwrap().db();
    let served = psnr(&rendered, &pair.target, 1.0).unwrap().db();
    // The service renders 8-bit PNGs; allow for the quantization.
    assert!((served - reference).abs() < 0.5, "served {served} dB vs evaluate {reference} dB");
}

#[tokio::test]
async fn styles_are_served_for_the_loaded_model_only() {
    let (app, _) = app(model(Variant::Dim4Augmented), DEFAULT_UPLOAD_LIMIT);
    let (status, body) = get(&app, "/models/abc123/styles").await;
    assert_eq!(status, StatusCode::OK);
    let v: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(v["dims"], 4);
    assert_eq!(v["entries"][0]["id"], "p0");
    assert_eq!(get(&app, "/models/other/styles").await.0, StatusCode::NOT_FOUND);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_sessions_stay_isolated() {
    let m = model(Variant::Dim3);
    let (app, _) = app(m.clone(), DEFAULT_UPLOAD_LIMIT);
    let frames: Vec<ImageBuffer> = (0..4).map(|i| frame(24 + i, 20, i as f32)).collect();
    let mut sessions = Vec::new();
    for f in &frames {
        sessions.push(open_session(&app, f).await.session_id);
    }
    let mut tasks = Vec::new();
    for round in 0..3 {
        for (i, id) in sessions.iter().enumerate() {
            let app = app.clone();
            let uri = format!("/sessions/{id}/map?z={},{},0", i as f64 * 0.5 - 1.0, round as f64 * 0.3);
            tasks.push(tokio::spawn(async move { (i, round, get(&app, &uri).await) }));
        }
    }
    for t in tasks {
        let (i, round, (status, body)) = t.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let src = decode_image(&png(&frames[i])).unwrap();
        let style = StyleVector::manual(vec![i as f64 * 0.5 - 1.0, round as f64 * 0.3, 0.0]).unwrap();
        assert_eq!(body, encode_png(&apply_style(&m, &src, &style).unwrap(), BitDepth::Eight).unwrap());
    }
}

#[tokio::test]
async fn map_at_zero_matches_cli_apply() {
    let m = model(Variant::Dim3);
    let dir = tempfile::tempdir().unwrap();
    let model_path = dir.path().join("m.bin");
    let container = ModelContainer::new(m.clone());
    container.save(&model_path).unwrap();
    let src = frame(33, 21, 2.0);
    let src_path = dir.path().join("src.png");
    std::fs::write(&src_path, png(&src)).unwrap();
    let out_path = dir.path().join("zero.png");
    let status = Command::new(env!("CARGO_BIN_EXE_stylemap"))
        .args(["apply", "--zero", "--model"])
        .arg(&model_path)
        .arg("--source")
        .arg(&src_path)
        .arg("--out")
        .arg(&out_path)
        .status()
        .unwrap();
    assert!(status.success());

    let (app, _) = app(ModelContainer::load(&model_path).unwrap().model, DEFAULT_UPLOAD_LIMIT);
    let info = open_session(&app, &src).await;
    let (_, served) = get(&app, &format!("/sessions/{}/map?z=0,0,0", info.session_id)).await;
    assert_eq!(served, std::fs::read(&out_path).unwrap());
}
