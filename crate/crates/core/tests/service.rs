mod common;

use std::sync::Arc;

use axum::body::{Body, Bytes};
use axum::http::{header, Request, StatusCode};
use axum::Router;
use gridpulse::config::ApiConfig;
use gridpulse::ingest::LifecycleStage;
use gridpulse::pipeline::{Inputs, Models};
use gridpulse::service::{router, Engine};
use gridpulse::store::{QueryFilter, Page, Store, CSV_HEADER};
use gridpulse::synth::FixtureConfig;
use gridpulse::time;
use http_body_util::BodyExt;
use serde_json::Value;
use tower::ServiceExt;

use common::{check_schema, FixtureDir};

async fn fetch(app: &Router, uri: &str) -> (StatusCode, Option<String>, Bytes) {
    let response = app
        .clone()
        .oneshot(Request::builder().uri(uri).body(Body::empty()).unwrap())
        .await
        .unwrap();
    let status = response.status();
    let content_type = response
        .headers()
        .get(header::CONTENT_TYPE)
        .map(|v| v.to_str().unwrap().to_string());
    (status, content_type, response.into_body().collect().await.unwrap().to_bytes())
}

async fn fetch_json(app: &Router, uri: &str) -> (StatusCode, Value) {
    let (status, _, body) = fetch(app, uri).await;
    (status, serde_json::from_slice(&body).unwrap_or_else(|e| panic!("{uri}: {e}")))
}

fn config_for(fx: &FixtureDir) -> ApiConfig {
    ApiConfig {
        data_dir: fx.path().to_path_buf(),
        ..Default::default()
    }
}

/// Fixture with snapshots ingested, an index built, and a model fitted.
fn fitted() -> (FixtureDir, Arc<Engine>) {
    let fx = FixtureDir::new(&FixtureConfig::default());
    let snapshots = fx.snapshots().display().to_string();
    for args in [&["ingest-replay", &snapshots][..], &["index"], &["fit", "--seed", "3"]] {
        assert_eq!(fx.run(args), 0, "gridpulse {args:?}");
    }
    let cfg = config_for(&fx);
    let store = Arc::new(Store::open(&cfg.database_path()).unwrap());
    let now = fx.fixture.end().unwrap() + chrono::Duration::minutes(1);
    let engine = Engine::new(
        store,
        Inputs::load(&cfg).unwrap(),
        Models::load(&cfg).unwrap(),
        cfg,
        now,
    );
    (fx, Arc::new(engine))
}

#[tokio::test]
async fn every_endpoint_matches_its_schema() {
    let (_fx, engine) = fitted();
    let app = router(engine);
    for (uri, schema) in [
        ("/api/outages/current", "current_outages"),
        ("/api/outages/historical", "historical_page"),
        ("/api/outages/historical?stage=processed&limit=3", "historical_page"),
        ("/api/analytics/per-capita", "per_capita"),
        ("/api/analytics/trend", "trend"),
        ("/api/analytics/trend?x=nonwhite", "trend"),
        ("/api/analytics/causes", "causes"),
        ("/api/analytics/transition-bins", "transition_bins"),
        ("/api/predictions/next", "prediction"),
        ("/api/config", "config"),
    ] {
        let (status, body) = fetch_json(&app, uri).await;
        assert_eq!(status, StatusCode::OK, "{uri}: {body}");
        check_schema(schema, &body).unwrap_or_else(|e| panic!("{uri}: {e}"));
    }
}

#[tokio::test]
async fn repeated_reads_are_identical() {
    let (_fx, engine) = fitted();
    let app = router(engine);
    for uri in [
        "/api/outages/current",
        "/api/analytics/per-capita",
        "/api/analytics/transition-bins",
        "/api/predictions/next",
        "/api/downloads/historical.csv",
    ] {
        let (_, _, first) = fetch(&app, uri).await;
        let (_, _, second) = fetch(&app, uri).await;
        assert_eq!(first, second, "{uri}");
    }
}

#[tokio::test]
async fn downloads_are_the_store_exports() {
    let (_fx, engine) = fitted();
    let store = engine.store.clone();
    let app = router(engine);
    for (file, stage) in [("processed.csv", LifecycleStage::Processed), ("historical.csv", LifecycleStage::Historical)] {
        let (status, content_type, body) = fetch(&app, &format!("/api/downloads/{file}")).await;
        assert_eq!(status, StatusCode::OK);
        assert!(content_type.unwrap().starts_with("text/csv"));
        assert_eq!(body.as_ref(), store.export_csv(stage).unwrap().as_slice());
        let header_line = std::str::from_utf8(&body).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header_line, CSV_HEADER.join(","));
    }
    let (status, _, body) = fetch(&app, "/api/downloads/crawled.csv").await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    check_schema("error", &serde_json::from_slice(&body).unwrap()).unwrap();
}

#[tokio::test]
async fn historical_pages_follow_the_store() {
    let (_fx, engine) = fitted();
    let store = engine.store.clone();
    let app = router(engine);
    let all = store.query(LifecycleStage::Historical, &QueryFilter::default(), Page::default()).unwrap();
    assert!(all.len() > 20, "fixture yields {} historical outages", all.len());

    let mut paged = Vec::new();
    let mut offset = 0;
    loop {
        let (status, body) = fetch_json(&app, &format!("/api/outages/historical?offset={offset}&limit=7")).await;
        assert_eq!(status, StatusCode::OK);
        let items = body["items"].as_array().unwrap().clone();
        if items.is_empty() {
            break;
        }
        assert!(items.len() <= 7);
        offset += items.len();
        paged.extend(items);
    }
    assert_eq!(paged, serde_json::to_value(&all).unwrap().as_array().unwrap().clone());

    let zip = all[0].zip.clone().unwrap();
    let (_, body) = fetch_json(&app, &format!("/api/outages/historical?zip={zip}&limit=10000")).await;
    let items = body["items"].as_array().unwrap();
    assert!(!items.is_empty());
    assert!(items.iter().all(|o| o["zip"] == zip.as_str()));

    let from = time::format(&all[all.len() / 2].reported_at);
    let (_, body) = fetch_json(&app, &format!("/api/outages/historical?from={from}&limit=10000")).await;
    let expected = all.iter().filter(|o| time::format(&o.reported_at) >= from).count();
    assert_eq!(body["items"].as_array().unwrap().len(), expected);
}

#[tokio::test]
async fn malformed_queries_are_rejected() {
    let (_fx, engine) = fitted();
    let app = router(engine);
    for uri in [
        "/api/outages/historical?from=yesterday",
        "/api/outages/historical?from=2021-07-03T00:00:00Z&to=2021-07-01T00:00:00Z",
        "/api/outages/historical?stage=crawled",
        "/api/outages/historical?borough=atlantis",
        "/api/outages/historical?limit=0",
        "/api/outages/historical?limit=10001",
        "/api/outages/historical?offset=-1",
        "/api/analytics/trend?x=age",
    ] {
        let (status, _, body) = fetch(&app, uri).await;
        assert_eq!(status, StatusCode::BAD_REQUEST, "{uri}");
        if let Ok(v) = serde_json::from_slice::<Value>(&body) {
            check_schema("error", &v).unwrap_or_else(|e| panic!("{uri}: {e}"));
        }
    }
}

#[tokio::test]
async fn missing_inputs_are_reported() {
    let fx = FixtureDir::new(&FixtureConfig::default());
    let cfg = config_for(&fx);
    let full = Inputs::load(&cfg).unwrap();
    let inputs = Inputs {
        zips: full.zips,
        index: None,
        demographics: None,
    };
    let engine = Engine::new(
        Arc::new(Store::in_memory().unwrap()),
        inputs,
        Models::default(),
        cfg,
        time::parse("2021-07-02T00:00:00Z").unwrap(),
    );
    let app = router(Arc::new(engine));
    for (uri, status, kind) in [
        ("/api/outages/current", StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
        ("/api/analytics/trend", StatusCode::SERVICE_UNAVAILABLE, "unavailable"),
        ("/api/predictions/next", StatusCode::CONFLICT, "not_fitted"),
        ("/api/analytics/transition-bins", StatusCode::CONFLICT, "insufficient_data"),
    ] {
        let (got, body) = fetch_json(&app, uri).await;
        assert_eq!(got, status, "{uri}: {body}");
        assert_eq!(body["error"], kind, "{uri}");
        check_schema("error", &body).unwrap();
    }
    let (status, body) = fetch_json(&app, "/api/analytics/causes").await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, serde_json::json!([]));
}
