use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use moarm::acquisition::{draw_samples, rank_candidates, AcquisitionOptions, AcquisitionState};
use moarm::mask::Mechanism;
use moarm::model::{ModelBundle, ModelConfig, MoArm};
use moarm::nn::Params;
use moarm::rng::Stream;
use moarm::tabular::{encode_bits, FeatureSchema, FeatureSpec, Standardization};
use moarm_service::{router, AppState, ServiceConfig};
use serde_json::{json, Value};
use tempfile::TempDir;
use tower::ServiceExt;

/// Features: a, b (numeric), color (3 categories), y (target). Numeric
/// columns come first, so a numeric y sits at index 2.
fn schema(categorical_target: bool) -> FeatureSchema {
    let colors = vec!["red".to_string(), "green".to_string(), "blue".to_string()];
    let target = if categorical_target {
        FeatureSpec::categorical("y", vec!["no".into(), "yes".into()], 3, true).unwrap()
    } else {
        FeatureSpec::numeric("y", 3, true)
    };
    FeatureSchema::new(vec![
        FeatureSpec::numeric("a", 0, false),
        FeatureSpec::numeric("b", 1, false),
        FeatureSpec::categorical("color", colors, 2, false).unwrap(),
        target,
    ])
    .unwrap()
}

fn write_bundle(dir: &TempDir, categorical_target: bool) -> PathBuf {
    let schema = schema(categorical_target);
    let cfg = ModelConfig { dim: schema.dim, hidden: vec![16, 16], time_dim: 8, head_hidden: vec![], mode: Mechanism::Mcar };
    let mut model = MoArm::new(cfg, 3).unwrap();
    let mut rng = Stream::new(4);
    for t in model.backbone.tensors_mut() {
        for v in t.iter_mut() {
            *v = 0.4 * rng.normal();
        }
    }
    let stz = Standardization::identity(&schema);
    let path = dir.path().join(if categorical_target { "cat.ckpt" } else { "num.ckpt" });
    ModelBundle::save(&path, &model, &model, &schema, &stz).unwrap();
    path
}

fn config() -> ServiceConfig {
    ServiceConfig {
        acquisition: AcquisitionOptions { samples: 32, ..Default::default() },
        seed: 11,
        idle_ttl: Duration::from_secs(60),
    }
}

async fn call(app: &Router, method: Method, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())).unwrap(),
        None => req.body(Body::empty()).unwrap(),
    };
    let res = app.clone().oneshot(req).await.unwrap();
    let status = res.status();
    let bytes = axum::body::to_bytes(res.into_body(), usize::MAX).await.unwrap();
    let v = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
    (status, v)
}

struct Fixture {
    _dir: TempDir,
    app: Router,
    state: Arc<AppState>,
    model_id: String,
}

async fn fixture(categorical_target: bool) -> Fixture {
    fixture_with(categorical_target, config()).await
}

async fn fixture_with(categorical_target: bool, cfg: ServiceConfig) -> Fixture {
    let dir = TempDir::new().unwrap();
    let path = write_bundle(&dir, categorical_target);
    let state = AppState::new(cfg);
    let app = router(Arc::clone(&state));
    let (status, v) = call(&app, Method::POST, "/models", Some(json!({ "path": path }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    let model_id = v["model_id"].as_str().unwrap().to_string();
    Fixture { _dir: dir, app, state, model_id }
}

async fn open_session(f: &Fixture) -> (String, Value) {
    let (status, v) = call(&f.app, Method::POST, "/sessions", Some(json!({ "model_id": f.model_id }))).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    (v["session_id"].as_str().unwrap().to_string(), v)
}

#[tokio::test]
async fn model_load_reports_features() {
    let f = fixture(false).await;
    let (status, v) = call(&f.app, Method::POST, "/models", Some(json!({ "path": f._dir.path().join("num.ckpt") }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!(v["model_id"], "m2");
    let names: Vec<&str> = v["features"].as_array().unwrap().iter().map(|x| x["name"].as_str().unwrap()).collect();
    assert_eq!(names, ["a", "b", "y", "color"]);
    assert_eq!(v["features"][3]["categories"], json!(["red", "green", "blue"]));
    assert_eq!(v["features"][2]["target"], true);
}

#[tokio::test]
async fn unreadable_checkpoint_is_rejected() {
    let f = fixture(false).await;
    let (status, v) = call(&f.app, Method::POST, "/models", Some(json!({ "path": "/nonexistent/model.ckpt" }))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    assert_eq!(v["code"], "bad_checkpoint");
    assert!(v["message"].as_str().unwrap().contains("nonexistent"));
}

#[tokio::test]
async fn unknown_model_is_not_found() {
    let f = fixture(false).await;
    let (status, v) = call(&f.app, Method::POST, "/sessions", Some(json!({ "model_id": "m99" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "unknown_model");
}

#[tokio::test]
async fn malformed_bodies_get_json_errors() {
    let f = fixture(false).await;
    let (status, v) = call(&f.app, Method::POST, "/sessions", Some(json!({ "model": "m1" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(v["code"], "bad_request");
    let (status, v) = call(&f.app, Method::GET, "/nowhere", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_eq!(v["code"], "not_found");
}

#[tokio::test]
async fn fresh_session_has_prior_prediction() {
    let f = fixture(false).await;
    let (id, v) = open_session(&f).await;
    assert_eq!(v["observed_count"], 0);
    assert_eq!(v["prediction"]["kind"], "continuous");
    let (status, p) = call(&f.app, Method::GET, &format!("/sessions/{id}/prediction"), None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(p["prediction"], v["prediction"]);
    assert_eq!(p["history"], json!([]));
}

#[tokio::test]
async fn suggestions_match_offline_ranking_and_are_cached() {
    let f = fixture(false).await;
    let (id, created) = open_session(&f).await;
    let uri = format!("/sessions/{id}/suggestions");
    let (status, first) = call(&f.app, Method::GET, &uri, None).await;
    assert_eq!(status, StatusCode::OK, "{first}");
    let (_, second) = call(&f.app, Method::GET, &uri, None).await;
    assert_eq!(first, second);
    let listed: Vec<u64> = first["suggestions"].as_array().unwrap().iter().map(|s| s["feature"].as_u64().unwrap()).collect();
    assert_eq!(listed.len(), 3);

    let bundle = ModelBundle::load(&f._dir.path().join("num.ckpt"), None).unwrap();
    let seed = created["seed"].as_u64().unwrap();
    let opts = f.state.config.acquisition;
    let state = AcquisitionState::empty(&bundle.schema);
    let res = draw_samples(&bundle.model, &bundle.schema, &state, &opts, seed, 0).unwrap();
    let offline = rank_candidates(&bundle.schema, &state, &res.samples, &opts.binning).unwrap();
    for (s, m) in first["suggestions"].as_array().unwrap().iter().zip(&offline) {
        assert_eq!(s["feature"].as_u64().unwrap() as usize, m.feature);
        assert_eq!(s["mi"].as_f64().unwrap(), m.value);
    }

    let (_, top) = call(&f.app, Method::GET, &format!("{uri}?top_n=1"), None).await;
    assert_eq!(top["suggestions"].as_array().unwrap().len(), 1);
    assert_eq!(top["suggestions"][0], first["suggestions"][0]);
    let (status, v) = call(&f.app, Method::GET, &format!("{uri}?top_n=0"), None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
}

#[tokio::test]
async fn observations_update_state_and_validate() {
    let f = fixture(false).await;
    let (id, created) = open_session(&f).await;
    let obs = format!("/sessions/{id}/observations");
    let (status, v) = call(&f.app, Method::POST, &obs, Some(json!({ "feature": "a", "value": 1.5 }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["observed_count"], 1);
    assert_eq!(v["observation"]["value"], 1.5);
    assert_ne!(v["prediction"], created["prediction"]);

    let (_, s) = call(&f.app, Method::GET, &format!("/sessions/{id}/suggestions"), None).await;
    let listed: Vec<u64> = s["suggestions"].as_array().unwrap().iter().map(|x| x["feature"].as_u64().unwrap()).collect();
    assert!(!listed.contains(&0));
    assert_eq!(listed.len(), 2);

    let cases = [
        (json!({ "feature": "a", "value": 2.0 }), StatusCode::CONFLICT, "already_observed"),
        (json!({ "feature": "y", "value": 2.0 }), StatusCode::UNPROCESSABLE_ENTITY, "target_feature"),
        (json!({ "feature": "color", "value": 3 }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
        (json!({ "feature": "color", "value": "purple" }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
        (json!({ "feature": "b", "value": "tall" }), StatusCode::UNPROCESSABLE_ENTITY, "invalid_value"),
        (json!({ "feature": "zzz", "value": 1 }), StatusCode::UNPROCESSABLE_ENTITY, "unknown_feature"),
        (json!({ "feature": 9, "value": 1 }), StatusCode::UNPROCESSABLE_ENTITY, "unknown_feature"),
    ];
    for (body, status, code) in cases {
        let (got, v) = call(&f.app, Method::POST, &obs, Some(body.clone())).await;
        assert_eq!((got, v["code"].as_str().unwrap()), (status, code), "{body}");
    }

    // by index and by label
    let (status, v) = call(&f.app, Method::POST, &obs, Some(json!({ "feature": 3, "value": "blue" }))).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    assert_eq!(v["observation"]["value"]["label"], "blue");
    let (_, p) = call(&f.app, Method::GET, &format!("/sessions/{id}/prediction"), None).await;
    assert_eq!(p["history"].as_array().unwrap().len(), 2);
    assert_eq!(p["observed_count"], 2);

    let (status, _) = call(&f.app, Method::POST, &obs, Some(json!({ "feature": "b", "value": -0.5 }))).await;
    assert_eq!(status, StatusCode::OK);
    let (status, v) = call(&f.app, Method::GET, &format!("/sessions/{id}/suggestions"), None).await;
    assert_eq!((status, v["code"].as_str().unwrap()), (StatusCode::CONFLICT, "no_candidates"));
}

#[tokio::test]
async fn categorical_target_frequencies_sum_to_one() {
    let f = fixture(true).await;
    let (id, v) = open_session(&f).await;
    assert_eq!(v["prediction"]["kind"], "categorical");
    let (_, v) = call(&f.app, Method::POST, &format!("/sessions/{id}/observations"), Some(json!({ "feature": "color", "value": 0 }))).await;
    let total: f64 = v["prediction"]["frequencies"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
}

#[tokio::test]
async fn sessions_are_isolated() {
    let f = fixture(false).await;
    let (a, _) = open_session(&f).await;
    let (b, _) = open_session(&f).await;
    assert_ne!(a, b);
    call(&f.app, Method::POST, &format!("/sessions/{a}/observations"), Some(json!({ "feature": "a", "value": 0.3 }))).await;
    let (_, pb) = call(&f.app, Method::GET, &format!("/sessions/{b}/prediction"), None).await;
    assert_eq!(pb["observed_count"], 0);
    let (status, _) = call(&f.app, Method::POST, &format!("/sessions/{b}/observations"), Some(json!({ "feature": "a", "value": 0.3 }))).await;
    assert_eq!(status, StatusCode::OK);
}

#[tokio::test]
async fn replay_reproduces_payloads() {
    let run = || async {
        let f = fixture(false).await;
        let (id, created) = open_session(&f).await;
        let mut out = vec![created];
        for (feature, value) in [("b", json!(0.7)), ("color", json!("green"))] {
            out.push(call(&f.app, Method::GET, &format!("/sessions/{id}/suggestions"), None).await.1);
            out.push(call(&f.app, Method::POST, &format!("/sessions/{id}/observations"), Some(json!({ "feature": feature, "value": value }))).await.1);
        }
        out.push(call(&f.app, Method::GET, &format!("/sessions/{id}/prediction"), None).await.1);
        out
    };
    assert_eq!(run().await, run().await);
}

#[tokio::test]
async fn delete_and_expiry_remove_sessions() {
    let f = fixture(false).await;
    let (a, _) = open_session(&f).await;
    let (status, _) = call(&f.app, Method::DELETE, &format!("/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::NO_CONTENT);
    let (status, v) = call(&f.app, Method::GET, &format!("/sessions/{a}/prediction"), None).await;
    assert_eq!((status, v["code"].as_str().unwrap()), (StatusCode::NOT_FOUND, "unknown_session"));
    let (status, _) = call(&f.app, Method::DELETE, &format!("/sessions/{a}"), None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);

    open_session(&f).await;
    assert_eq!(f.state.expire_idle(Instant::now()), 0);
    assert_eq!(f.state.expire_idle(Instant::now() + Duration::from_secs(61)), 1);
    assert_eq!(f.state.session_count(), 0);
}

#[tokio::test]
async fn serves_over_tcp() {
    let dir = TempDir::new().unwrap();
    let path = write_bundle(&dir, false);
    let state = AppState::new(config());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    let server = tokio::spawn(moarm_service::serve(listener, state));
    let mut stream = tokio::net::TcpStream::connect(addr).await.unwrap();
    let body = json!({ "path": path }).to_string();
    let req = format!(
        "POST /models HTTP/1.1\r\nhost: localhost\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    stream.write_all(req.as_bytes()).await.unwrap();
    let mut resp = String::new();
    stream.read_to_string(&mut resp).await.unwrap();
    assert!(resp.starts_with("HTTP/1.1 201"), "{resp}");
    assert!(resp.contains("\"model_id\":\"m1\""));
    server.abort();
}

#[tokio::test]
async fn fully_observed_spread_matches_model_sigma() {
    let k = 400;
    let cfg = ServiceConfig { acquisition: AcquisitionOptions { samples: k, ..Default::default() }, ..config() };
    let f = fixture_with(false, cfg).await;
    let (id, _) = open_session(&f).await;
    let obs = format!("/sessions/{id}/observations");
    let mut last = Value::Null;
    for (feature, value) in [("a", json!(0.5)), ("b", json!(-1.0)), ("color", json!("green"))] {
        let (status, v) = call(&f.app, Method::POST, &obs, Some(json!({ "feature": feature, "value": value }))).await;
        assert_eq!(status, StatusCode::OK, "{v}");
        last = v;
    }

    // Oracle: one forward pass with only y hidden, at time 1.
    let bundle = ModelBundle::load(&f._dir.path().join("num.ckpt"), None).unwrap();
    let schema = &bundle.schema;
    let mut x = vec![0.0; schema.dim];
    let mut m = vec![1.0; schema.dim];
    x[schema.elements(0).start] = 0.5;
    x[schema.elements(1).start] = -1.0;
    let y = schema.elements(2).start;
    m[y] = 0.0;
    let colour = schema.elements(3);
    x[colour.clone()].copy_from_slice(&encode_bits(1, colour.len()));
    let out = bundle.model.backbone.forward_batch(&x, &m, &[1.0], None);
    let (mu, sigma) = (out.mu[y], out.log_sigma[y].exp());

    let p = &last["prediction"];
    let mean = p["mean_standardized"].as_f64().unwrap();
    let std = p["std_standardized"].as_f64().unwrap();
    assert!((mean - mu).abs() < 1e-12, "mean {mean} vs mu {mu}");
    // sample std of k normal draws: relative sd about 1/sqrt(2k)
    let tol = 4.0 / (2.0 * k as f64).sqrt();
    assert!((std / sigma - 1.0).abs() < tol, "std {std} vs sigma {sigma}");
}
