use std::time::Duration;

use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

use ami_core::engine::{Engine, EngineConfig};
use ami_core::fixtures::{self, FixtureNight};
use ami_core::pipeline::JobSpec;
use ami_service::{router, AppState, MAX_LIMIT};

const SID: &str = "trap1_2023-06-01";

struct Fx {
    _dir: tempfile::TempDir,
    engine: Engine,
    night: FixtureNight,
    app: Router,
}

fn fixture(frames: usize) -> Fx {
    let dir = tempfile::tempdir().unwrap();
    let night = fixtures::write_night(&dir.path().join("data"), "trap1", frames, &[]).unwrap();
    let cfg = EngineConfig { backbone: Some(night.backbone_path.clone()), ..EngineConfig::default() };
    let engine = Engine::init(dir.path().join("home"), cfg).unwrap().without_fsync();
    engine.discover(&night.root).unwrap();
    let state = AppState::new(engine.clone()).with_poll_interval(Duration::from_millis(10));
    Fx { _dir: dir, engine, night, app: router(state) }
}

async fn send(app: &Router, req: Request<Body>) -> (StatusCode, Vec<u8>, Option<String>) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let ct = resp.headers().get(header::CONTENT_TYPE).map(|v| v.to_str().unwrap().to_string());
    let body = resp.into_body().collect().await.unwrap().to_bytes().to_vec();
    (status, body, ct)
}

async fn get(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (s, b, _) = send(app, Request::get(uri).body(Body::empty()).unwrap()).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn post(app: &Router, uri: &str, body: Value) -> (StatusCode, Value) {
    let req = Request::post(uri).header(header::CONTENT_TYPE, "application/json").body(Body::from(body.to_string())).unwrap();
    let (s, b, _) = send(app, req).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

fn job_body(fx: &Fx, session: &str) -> Value {
    let mut v = serde_json::to_value(JobSpec::new(fx.night.specs.clone())).unwrap();
    v["session_id"] = json!(session);
    v
}

#[tokio::test]
async fn error_mapping() {
    let fx = fixture(3);
    let (s, v) = get(&fx.app, "/api/jobs/0000000000000000").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");

    let (s, v) = post(&fx.app, "/api/jobs", job_body(&fx, "nope")).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "invalid_input");

    let req = Request::post("/api/jobs").header(header::CONTENT_TYPE, "application/json").body(Body::from("{")).unwrap();
    assert_eq!(send(&fx.app, req).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, _) = get(&fx.app, &format!("/api/sessions/{SID}/counts")).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _) = get(&fx.app, "/api/sessions?limit=0").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = get(&fx.app, "/api/jobs?state=sleeping").await;
    assert_eq!((s, v["code"].clone()), (StatusCode::UNPROCESSABLE_ENTITY, json!("invalid_input")));
}

#[tokio::test]
async fn jobs_are_idempotent_and_shared_with_the_engine() {
    let fx = fixture(3);
    let (s1, a) = post(&fx.app, "/api/jobs", job_body(&fx, SID)).await;
    let (s2, b) = post(&fx.app, "/api/jobs", job_body(&fx, SID)).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(a["existing"], false);
    assert_eq!(b["existing"], true);
    assert_eq!(a["job"]["job_id"], b["job"]["job_id"]);
    let id = a["job"]["job_id"].as_str().unwrap().to_string();

    // the CLI path sees the same job and returns the same id
    let (cli_id, created) = fx.engine.enqueue(SID, JobSpec::new(fx.night.specs.clone())).unwrap();
    assert_eq!((cli_id.as_str(), created), (id.as_str(), false));

    let (_, list) = get(&fx.app, "/api/jobs?state=queued").await;
    assert_eq!(list["total"], 1);

    let (s, v) = post(&fx.app, &format!("/api/jobs/{id}/cancel"), json!({})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(v["state"], "cancelled");
    let (s, v) = post(&fx.app, &format!("/api/jobs/{id}/cancel"), json!({})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["code"], "conflict");
    assert_eq!(post(&fx.app, &format!("/api/jobs/{id}/retry"), json!({})).await.0, StatusCode::CONFLICT);
    assert_eq!(get(&fx.app, &format!("/api/jobs/{id}")).await.1["state"], "cancelled");
}

#[tokio::test]
async fn results_and_rollup_levels() {
    let fx = fixture(5);
    let (_, created) = post(&fx.app, "/api/jobs", job_body(&fx, SID)).await;
    let e = fx.engine.clone();
    tokio::task::spawn_blocking(move || e.run_workers(1, &|_| {}).unwrap()).await.unwrap();
    assert_eq!(get(&fx.app, &format!("/api/jobs/{}", created["job"]["job_id"].as_str().unwrap())).await.1["state"], "completed");

    let (_, d) = get(&fx.app, &format!("/api/sessions/{SID}/detections?limit=2")).await;
    assert_eq!(d["items"].as_array().unwrap().len(), 2);
    assert_eq!(d["total"], 5);
    let (_, d2) = get(&fx.app, &format!("/api/sessions/{SID}/detections?limit=2&cursor={}", d["next_cursor"].as_str().unwrap())).await;
    assert_eq!(d2["items"][0]["frame_index"], 2);

    let (_, t) = get(&fx.app, &format!("/api/sessions/{SID}/tracks")).await;
    assert_eq!(t["total"], 3);

    let mut totals = Vec::new();
    for level in ["species", "genus", "family"] {
        let (s, c) = get(&fx.app, &format!("/api/sessions/{SID}/counts?level={level}")).await;
        assert_eq!(s, StatusCode::OK);
        totals.push(c["total"].as_u64().unwrap());
    }
    assert_eq!(totals, vec![3, 3, 3]);
    let (_, g) = get(&fx.app, &format!("/api/sessions/{SID}/counts?level=genus")).await;
    assert_eq!(g["counts"], json!({"110": 2, "120": 1}));
    assert_eq!(get(&fx.app, &format!("/api/sessions/{SID}/counts?level=order")).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, frames) = get(&fx.app, &format!("/api/sessions/{SID}/frames?limit=100000")).await;
    assert_eq!(frames["items"][4]["frame_id"], format!("{SID}:4"));
    let (_, sessions) = get(&fx.app, "/api/sessions?deployment=trap1").await;
    assert_eq!(sessions["items"][0]["frames"], 5);
    assert_eq!(get(&fx.app, "/api/deployments").await.1[0]["deployment_id"], "trap1");

    // images
    let (s, body, ct) = send(&fx.app, Request::get(format!("/api/frames/{SID}:0/image")).body(Body::empty()).unwrap()).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("image/png")));
    assert_eq!(image::load_from_memory(&body).unwrap().width(), fixtures::FRAME_W);
    let req = Request::get(format!("/api/frames/{SID}:0/image")).header(header::ACCEPT, "image/jpeg").body(Body::empty()).unwrap();
    let (s, body, ct) = send(&fx.app, req).await;
    assert_eq!((s, ct.as_deref()), (StatusCode::OK, Some("image/jpeg")));
    assert_eq!(image::guess_format(&body).unwrap(), image::ImageFormat::Jpeg);
    assert_eq!(send(&fx.app, Request::get(format!("/api/frames/{SID}:99/image")).body(Body::empty()).unwrap()).await.0, StatusCode::NOT_FOUND);
    assert_eq!(send(&fx.app, Request::get("/api/frames/garbage/image").body(Body::empty()).unwrap()).await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (s, body, _) = send(&fx.app, Request::get(format!("/api/detections/{SID}:1:0/crop")).body(Body::empty()).unwrap()).await;
    assert_eq!(s, StatusCode::OK);
    let crop = image::load_from_memory(&body).unwrap();
    assert!(crop.width() >= 12 && crop.width() <= 24);
    assert_eq!(send(&fx.app, Request::get(format!("/api/detections/{SID}:1:9/crop")).body(Body::empty()).unwrap()).await.0, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn event_stream_follows_a_job_to_completion() {
    let fx = fixture(4);
    let (_, created) = post(&fx.app, "/api/jobs", job_body(&fx, SID)).await;
    let id = created["job"]["job_id"].as_str().unwrap().to_string();
    let e = fx.engine.clone();
    let worker = tokio::task::spawn_blocking(move || {
        std::thread::sleep(Duration::from_millis(50));
        e.run_workers(1, &|_| std::thread::sleep(Duration::from_millis(15))).unwrap()
    });
    let req = Request::get(format!("/api/jobs/{id}/events")).body(Body::empty()).unwrap();
    let (s, body, ct) = tokio::time::timeout(Duration::from_secs(30), send(&fx.app, req)).await.unwrap();
    worker.await.unwrap();
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ct.as_deref(), Some("text/event-stream"));
    let text = String::from_utf8(body).unwrap();
    let events: Vec<Value> = text
        .lines()
        .filter_map(|l| l.strip_prefix("data: "))
        .map(|d| serde_json::from_str(d).unwrap())
        .collect();
    assert!(text.contains("event: progress"));
    assert_eq!(events.first().unwrap()["state"], "queued");
    assert_eq!(events.last().unwrap()["state"], "completed");
    assert_eq!(events.last().unwrap()["progress"]["frames_done"], 4);
    let done: Vec<u64> = events.iter().map(|e| e["progress"]["frames_done"].as_u64().unwrap()).collect();
    assert!(done.windows(2).all(|w| w[0] <= w[1]));

    let (s, _) = get(&fx.app, "/api/jobs/ffffffffffffffff/events").await;
    assert_eq!(s, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn crops_taxa_models() {
    let fx = fixture(1);
    let crops = fx.engine.crops().unwrap();
    for id in ["c1", "c2"] {
        image::RgbaImage::from_pixel(8, 6, image::Rgba([10, 10, 10, 255])).save(crops.dir().join(format!("{id}.png"))).unwrap();
    }
    let (s, c) = get(&fx.app, "/api/crops/c1").await;
    assert_eq!((s, c["review_state"].clone()), (StatusCode::OK, json!("unreviewed")));
    let req = Request::patch("/api/crops/c1")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({"review_state": "approved"}).to_string()))
        .unwrap();
    let (s, b, _) = send(&fx.app, req).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&b).unwrap()["review_state"], "approved");
    // read-your-writes
    assert_eq!(get(&fx.app, "/api/crops/c1").await.1["review_state"], "approved");
    assert_eq!(get(&fx.app, "/api/crops?review_state=unreviewed").await.1["items"][0]["id"], "c2");
    let bad = Request::patch("/api/crops/c1")
        .header(header::CONTENT_TYPE, "application/json")
        .body(Body::from(json!({"review_state": "maybe"}).to_string()))
        .unwrap();
    assert_eq!(send(&fx.app, bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(get(&fx.app, "/api/crops/zzz").await.0, StatusCode::NOT_FOUND);

    let (s, t) = get(&fx.app, "/api/taxa/1101").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(t["names"], json!({"species": "Agrotis ipsilon", "genus": "Agrotis", "family": "Noctuidae"}));
    assert_eq!(get(&fx.app, "/api/taxa/4242").await.0, StatusCode::NOT_FOUND);
    assert_eq!(get(&fx.app, "/api/taxa/abc").await.0, StatusCode::UNPROCESSABLE_ENTITY);

    let (_, m) = get(&fx.app, "/api/models").await;
    assert_eq!(m[0]["backend"], "blob");
}

#[tokio::test]
async fn limit_is_capped() {
    let fx = fixture(1);
    let crops = fx.engine.crops().unwrap();
    for i in 0..MAX_LIMIT + 20 {
        image::RgbaImage::from_pixel(2, 2, image::Rgba([0, 0, 0, 255])).save(crops.dir().join(format!("c{i:04}.png"))).unwrap();
    }
    let (_, p) = get(&fx.app, "/api/crops?limit=100000").await;
    assert_eq!(p["items"].as_array().unwrap().len(), MAX_LIMIT);
    assert_eq!(p["next_cursor"], MAX_LIMIT.to_string());
    let (_, rest) = get(&fx.app, &format!("/api/crops?cursor={MAX_LIMIT}")).await;
    assert_eq!(rest["items"].as_array().unwrap().len(), 20);
    assert!(rest["next_cursor"].is_null());
}
