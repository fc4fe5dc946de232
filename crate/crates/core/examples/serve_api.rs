//! Serves the API over a synthetic data directory and queries it once.
//!
//! Pass `--forever` to keep the server up on 127.0.0.1:8080.

use std::sync::Arc;

use gridpulse::config::ApiConfig;
use gridpulse::geo::OfflineGeocoder;
use gridpulse::ingest::process_snapshot;
use gridpulse::pipeline::{cluster_zips, fit_model, Inputs, Models};
use gridpulse::service::{router, Engine};
use gridpulse::store::Store;
use gridpulse::synth::{Fixture, FixtureConfig};
use gridpulse::Error;

#[tokio::main]
async fn main() -> gridpulse::Result<()> {
    let forever = std::env::args().any(|a| a == "--forever");
    let dir = std::env::temp_dir().join("gridpulse-serve-example");
    let fixture = Fixture::generate(&FixtureConfig::default())?;
    fixture.write_reference(&dir)?;
    let cfg = ApiConfig {
        data_dir: dir,
        clusters: 4,
        samples: 10_000,
        ..Default::default()
    };

    let zips = Arc::new(fixture.zips.clone());
    let geocoder = OfflineGeocoder::new(fixture.geocoder.clone(), zips.clone())?;
    let store = Arc::new(Store::in_memory()?);
    for s in &fixture.snapshots {
        process_snapshot(s, &store, &geocoder, s.captured_at);
    }
    let clusters = cluster_zips(&zips, &cfg, 5)?;
    let model = fit_model(&store.history()?, &clusters, &cfg, 5)?;
    let models = Models {
        clusters: Some(clusters),
        model: Some(model),
    };
    let now = fixture.end().expect("fixture has snapshots") + chrono::Duration::minutes(1);
    let engine = Arc::new(Engine::new(store, Inputs::load(&cfg)?, models, cfg.clone(), now));

    let addr = if forever { "127.0.0.1:8080" } else { "127.0.0.1:0" };
    let listener = tokio::net::TcpListener::bind(addr).await.map_err(|e| Error::io(addr, e))?;
    let local = listener.local_addr().map_err(|e| Error::io(addr, e))?;
    println!("listening on http://{local}");
    let server = tokio::spawn(async move { axum::serve(listener, router(engine)).await });
    if forever {
        server.await.ok();
        return Ok(());
    }

    for path in ["/api/outages/current", "/api/analytics/per-capita", "/api/predictions/next"] {
        let url = format!("http://{local}{path}");
        let body = tokio::task::spawn_blocking(move || ureq::get(&url).call().map(|r| r.into_string()))
            .await
            .expect("request task");
        match body {
            Ok(Ok(text)) => println!("GET {path}\n{}\n", &text[..text.len().min(400)]),
            Ok(Err(e)) => println!("GET {path}: unreadable body: {e}"),
            Err(e) => println!("GET {path}: {e}"),
        }
    }
    server.abort();
    Ok(())
}
