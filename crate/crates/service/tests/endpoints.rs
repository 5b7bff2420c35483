use std::sync::{Arc, OnceLock};

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tower::ServiceExt;

use rigfield::dataio::{synth_scene, ParamRanges, SceneDataset, SynthSpec};
use rigfield::model::NetworkConfig;
use rigfield::training::{train, TrainConfig};
use rigfield_service::{router, CameraSpec, MapFlags, OrbitSpec, RenderRequest, Session, MILLIS_HEADER, WARNING_HEADER};

fn fixture() -> &'static (SceneDataset, Arc<Session>) {
    static FIXTURE: OnceLock<(SceneDataset, Arc<Session>)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let ds = synth_scene(&SynthSpec { n_frames: 4, width: 16, height: 16, num_expressions: 3, ..Default::default() })
            .unwrap();
        let cfg = TrainConfig {
            rays_per_batch: 32,
            samples_per_ray: 16,
            coarse_samples: 8,
            total_steps: 3,
            lr0: 5e-3,
            lr1: 5e-4,
            network: NetworkConfig::tiny(0, 16, 16),
            holdout: 1,
            eval_every: 0,
            ..Default::default()
        };
        let out = train(&ds, &cfg, 5, None, |_| {}).unwrap();
        let session = Session::new(out.checkpoint, ds.model.clone()).unwrap();
        (ds, Arc::new(session))
    })
}

fn app() -> Router {
    router(fixture().1.clone())
}

async fn call(app: Router, method: &str, uri: &str, body: Option<String>) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or(Body::empty(), Body::from))
        .unwrap();
    let resp = app.oneshot(req).await.unwrap();
    let status = resp.status();
    let headers = resp.headers().clone();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, headers, bytes)
}

async fn post_render(req: &RenderRequest) -> (StatusCode, axum::http::HeaderMap, Vec<u8>) {
    call(app(), "POST", "/render", Some(serde_json::to_string(req).unwrap())).await
}

fn png_size(png: &[u8]) -> (u32, u32) {
    assert_eq!(&png[..8], b"\x89PNG\r\n\x1a\n");
    (u32::from_be_bytes(png[16..20].try_into().unwrap()), u32::from_be_bytes(png[20..24].try_into().unwrap()))
}

fn error_field(body: &[u8]) -> String {
    let v: serde_json::Value = serde_json::from_slice(body).unwrap();
    v["field"].as_str().unwrap_or_default().to_string()
}

#[tokio::test]
async fn health_reports_ok() {
    let (status, _, body) = call(app(), "GET", "/health", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("ok"));
}

#[tokio::test]
async fn meta_matches_dataset_statistics() {
    let (ds, session) = fixture();
    let (status, _, body) = call(app(), "GET", "/meta", None).await;
    assert_eq!(status, StatusCode::OK);
    let meta: serde_json::Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(meta["num_expressions"], 3);
    assert_eq!(meta["pose_dim"], 7);
    let ranges: ParamRanges = serde_json::from_value(meta["param_ranges"].clone()).unwrap();
    assert_eq!(ranges, ParamRanges::from_params(3, ds.frames.iter().map(|f| &f.params)));
    let cam: rigfield::rendering::Camera = serde_json::from_value(meta["default_camera"].clone()).unwrap();
    assert_eq!(&cam, session.default_camera());
}

#[tokio::test]
async fn render_returns_png_with_timing() {
    let session = &fixture().1;
    let req = RenderRequest::neutral(3, 0);
    let (status, headers, body) = post_render(&req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(headers["content-type"], "image/png");
    headers[MILLIS_HEADER].to_str().unwrap().parse::<u64>().unwrap();
    assert!(headers.get(WARNING_HEADER).is_none());
    assert_eq!(png_size(&body), (16, 16));
    assert_eq!(body, session.render(&req).unwrap().png);
    let (_, _, again) = post_render(&req).await;
    assert_eq!(again, body);
}

#[tokio::test]
async fn wrong_expression_dimension_names_the_field() {
    let req = RenderRequest { beta_exp: vec![0.0; 5], ..RenderRequest::neutral(3, 0) };
    let (status, _, body) = post_render(&req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_field(&body), "beta_exp");

    let req = RenderRequest { beta_pose: vec![0.0; 6], ..RenderRequest::neutral(3, 0) };
    let (status, _, body) = post_render(&req).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(error_field(&body), "beta_pose");
}

#[tokio::test]
async fn malformed_bodies_are_rejected_with_field() {
    let cases = [
        (r#"{"beta_exp":[0,0,"x"],"beta_pose":[0,0,0,0,0,0,0],"camera":{"frame":0}}"#, "beta_exp[2]"),
        (r#"{"beta_exp":[0,0,0],"beta_pose":[0,0,0,0,0,0,0],"camera":{"frame":0},"colour":1}"#, ""),
        (r#"{"beta_exp":[0,0,0],"beta_pose":[0,0,0,0,0,0,0],"camera":{"orbit":{"azimuth":0}}}"#, "camera.orbit"),
        (r#"{"beta_exp":[0,0,0],"beta_pose":[0,0,0,0,0,0,0],"camera":{"frame":9}}"#, "camera.frame"),
        (r#"{"beta_exp":[0,0,0],"beta_pose":[0,0,0,0,0,0,3],"camera":{"frame":0}}"#, "beta_pose"),
        ("not json", ""),
    ];
    for (body, field) in cases {
        let (status, _, resp) = call(app(), "POST", "/render", Some(body.to_string())).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{body}");
        if !field.is_empty() {
            assert_eq!(error_field(&resp), field, "{body}");
        }
    }
}

#[tokio::test]
async fn oversized_resolution_is_clamped_with_warning() {
    let req = RenderRequest { resolution: Some(1000), ..RenderRequest::neutral(3, 0) };
    let (status, headers, body) = post_render(&req).await;
    assert_eq!(status, StatusCode::OK);
    assert!(headers[WARNING_HEADER].to_str().unwrap().contains("256"));
    assert_eq!(png_size(&body), (256, 256));
    let req = RenderRequest { resolution: Some(2), ..RenderRequest::neutral(3, 0) };
    let (_, headers, body) = post_render(&req).await;
    assert!(headers.get(WARNING_HEADER).is_some());
    assert_eq!(png_size(&body), (16, 16));
}

#[tokio::test]
async fn maps_are_appended_side_by_side() {
    let req = RenderRequest {
        maps: MapFlags::ALL,
        camera: CameraSpec::Orbit(OrbitSpec { azimuth: 0.3, elevation: 0.1, radius: 3.0, look_at: [0.0; 3] }),
        ..RenderRequest::neutral(3, 0)
    };
    let (status, _, body) = post_render(&req).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(png_size(&body), (64, 16));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn concurrent_requests_match_sequential() {
    let session = fixture().1.clone();
    let requests: Vec<RenderRequest> = (0..10)
        .map(|i| RenderRequest {
            seed: i,
            beta_exp: vec![0.1 * i as f64, 0.0, -0.05 * i as f64],
            camera: if i % 2 == 0 { CameraSpec::Frame(i as usize % 4) } else { CameraSpec::Frame(0) },
            ..RenderRequest::neutral(3, 0)
        })
        .collect();
    let app = app();
    let handles: Vec<_> = requests
        .iter()
        .map(|r| {
            let app = app.clone();
            let body = serde_json::to_string(r).unwrap();
            tokio::spawn(async move { call(app, "POST", "/render", Some(body)).await })
        })
        .collect();
    for (h, r) in handles.into_iter().zip(&requests) {
        let (status, _, body) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        assert_eq!(body, session.render(r).unwrap().png);
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn serves_over_a_socket() {
    let session = fixture().1.clone();
    let (tx, rx) = tokio::sync::oneshot::channel();
    tokio::spawn(rigfield_service::serve(session, "127.0.0.1:0".parse().unwrap(), move |addr| {
        tx.send(addr).unwrap();
    }));
    let addr = rx.await.unwrap();
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    stream.write_all(b"GET /health HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n\r\n").await.unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 200"), "{resp}");
}
