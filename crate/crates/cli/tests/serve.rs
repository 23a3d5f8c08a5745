use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use lightsq::metrics::EvalOptions;
use lightsq::pipeline::run;
use lightsq::{shapes, Abstraction, Normalization, RunConfig, TsdfGrid};
use lightsq_cli::server::{router, AppState};
use lightsq_cli::session::SessionState;
use serde_json::Value;
use tower::ServiceExt;

fn fixture() -> (AppState, Abstraction) {
    let grid = TsdfGrid::from_sdf(32, 1.0, shapes::l_shape(0.6, 0.2, 0.25));
    let mut config = RunConfig {
        resolution: 32,
        ..RunConfig::default()
    };
    config.multiscale.local_resolution = 24;
    let a = run(&grid, &config, Normalization::identity()).abstraction;
    assert!(!a.primitives.is_empty());
    let eval = EvalOptions {
        skip_emd: true,
        scan_points: 2000,
        seed: 0,
    };
    (AppState::new(SessionState::new(grid, a.clone(), config), eval), a)
}

async fn call(app: &AppState, method: &str, uri: &str, body: Option<&str>) -> (StatusCode, Vec<u8>) {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(body.map_or_else(Body::empty, |b| Body::from(b.to_string())))
        .unwrap();
    let res = router(app.clone()).oneshot(req).await.unwrap();
    let status = res.status();
    (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
}

fn abstraction_of(bytes: &[u8]) -> Abstraction {
    Abstraction::from_json(std::str::from_utf8(bytes).unwrap()).unwrap()
}

fn runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread().enable_all().build().unwrap()
}

#[test]
fn abstraction_endpoint_returns_the_loaded_state() {
    let (app, a) = fixture();
    runtime().block_on(async {
        let (status, body) = call(&app, "GET", "/abstraction", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(abstraction_of(&body), a);
        assert_eq!(body, a.to_json().into_bytes());
    });
}

#[test]
fn mesh_endpoints() {
    let (app, a) = fixture();
    runtime().block_on(async {
        let id = a.primitives[0].id;
        let (status, body) = call(&app, "GET", &format!("/mesh/{id}"), None).await;
        assert_eq!(status, StatusCode::OK);
        let mesh: Value = serde_json::from_slice(&body).unwrap();
        assert!(!mesh["vertices"].as_array().unwrap().is_empty());
        assert!(!mesh["triangles"].as_array().unwrap().is_empty());

        assert_eq!(call(&app, "GET", "/mesh/9999", None).await.0, StatusCode::NOT_FOUND);
        assert_eq!(call(&app, "GET", "/mesh/abc", None).await.0, StatusCode::BAD_REQUEST);

        let (status, body) = call(&app, "GET", "/reference-mesh", None).await;
        assert_eq!(status, StatusCode::OK);
        let reference: Value = serde_json::from_slice(&body).unwrap();
        assert!(reference["triangles"].as_array().unwrap().len() > 100);
        assert_eq!(call(&app, "GET", "/reference-mesh", None).await.1, body);
    });
}

#[test]
fn refine_rejects_bad_requests() {
    let (app, a) = fixture();
    runtime().block_on(async {
        let (status, body) = call(&app, "POST", "/refine", Some(r#"{"id": 9999, "splits": 2}"#)).await;
        assert_eq!(status, StatusCode::NOT_FOUND);
        assert!(serde_json::from_slice::<Value>(&body).unwrap()["error"].is_string());
        for bad in [r#"{"id": 0"#, r#"{"id": "x", "splits": 2}"#, r#"{"splits": 2}"#, "", r#"{"id": 0, "splits": 0}"#] {
            assert_eq!(call(&app, "POST", "/refine", Some(bad)).await.0, StatusCode::BAD_REQUEST, "{bad}");
        }
        assert_eq!(app.snapshot(), a);
    });
}

#[test]
fn mutations_are_serialized() {
    let (app, a) = fixture();
    runtime().block_on(async {
        let guard = app.try_begin_mutation().unwrap();
        assert!(app.try_begin_mutation().is_none());
        let body = format!(r#"{{"id": {}, "splits": 2}}"#, a.primitives[0].id);
        assert_eq!(call(&app, "POST", "/refine", Some(&body)).await.0, StatusCode::CONFLICT);
        assert_eq!(call(&app, "POST", "/undo", None).await.0, StatusCode::CONFLICT);
        // Reads stay available.
        assert_eq!(call(&app, "GET", "/abstraction", None).await.0, StatusCode::OK);
        drop(guard);
        assert!(app.try_begin_mutation().is_some());
        assert_eq!(app.snapshot(), a);
    });
}

#[test]
fn refine_then_undo_restores_the_original() {
    let (app, a) = fixture();
    runtime().block_on(async {
        assert_eq!(call(&app, "POST", "/undo", None).await.0, StatusCode::CONFLICT);

        let target = a.primitives[0].id;
        let body = format!(r#"{{"id": {target}, "splits": 2}}"#);
        let (status, refined) = call(&app, "POST", "/refine", Some(&body)).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&refined));
        let refined = abstraction_of(&refined);
        assert!(refined.get(target).is_none());
        assert!(refined.primitives.iter().any(|p| p.parent == Some(target)));
        assert_eq!(abstraction_of(&call(&app, "GET", "/abstraction", None).await.1), refined);

        let (status, undone) = call(&app, "POST", "/undo", None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(abstraction_of(&undone), a);
        assert_eq!(abstraction_of(&call(&app, "GET", "/abstraction", None).await.1), a);
        assert_eq!(call(&app, "POST", "/undo", None).await.0, StatusCode::CONFLICT);
    });
}

#[test]
fn metrics_endpoint_reports_against_the_grid() {
    let (app, a) = fixture();
    runtime().block_on(async {
        let (status, body) = call(&app, "GET", "/metrics", None).await;
        assert_eq!(status, StatusCode::OK);
        let report: Value = serde_json::from_slice(&body).unwrap();
        let iou = report["voxel_iou"].as_f64().unwrap();
        assert!(iou > 0.5 && iou <= 1.0, "{iou}");
        assert_eq!(report["n_primitives"].as_u64().unwrap() as usize, a.primitives.len());
        assert!(report["emd"].is_null());
    });
}
