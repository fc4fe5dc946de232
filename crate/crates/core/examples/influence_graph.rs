//! Clusters zip codes, fits the cluster transition matrix by random search
//! and by least squares, and prints the strongest influence edges.

use std::sync::Arc;

use gridpulse::config::ApiConfig;
use gridpulse::geo::OfflineGeocoder;
use gridpulse::influence::{fit_transition_matrix, fit_transition_matrix_exact, prediction_mse, top_k_edges, SamplingConfig};
use gridpulse::ingest::process_snapshot;
use gridpulse::pipeline::{cluster_summaries, cluster_zips, prediction_payload, training_vectors};
use gridpulse::store::Store;
use gridpulse::synth::{Fixture, FixtureConfig};

fn main() -> gridpulse::Result<()> {
    let fixture = Fixture::generate(&FixtureConfig {
        days: 7,
        ..Default::default()
    })?;
    let zips = Arc::new(fixture.zips.clone());
    let geocoder = OfflineGeocoder::new(fixture.geocoder.clone(), zips.clone())?;
    let store = Store::in_memory()?;
    for s in &fixture.snapshots {
        process_snapshot(s, &store, &geocoder, s.captured_at);
    }
    let history = store.history()?;

    let cfg = ApiConfig {
        clusters: 4,
        samples: 20_000,
        ..Default::default()
    };
    let clusters = cluster_zips(&zips, &cfg, 11)?;
    for c in cluster_summaries(&clusters) {
        println!("cluster {} at ({:.3}, {:.3}): {}", c.cluster, c.centroid.lat, c.centroid.lon, c.zips.join(" "));
    }

    let vectors = training_vectors(&history, &clusters, cfg.step())?;
    let sampled = fit_transition_matrix(&vectors, &SamplingConfig::new(cfg.samples, 11))?;
    let exact = fit_transition_matrix_exact(&vectors)?;
    println!(
        "\n{} steps; one-step MSE: random search {:.3}, least squares {:.3} ({} entries clamped at 0)",
        vectors.len(),
        prediction_mse(&sampled.matrix, &vectors),
        prediction_mse(&exact.matrix, &vectors),
        exact.clamped
    );
    println!("transition matrix (row = next step cluster, column = current):");
    for row in sampled.matrix.rows() {
        println!("  {}", row.iter().map(|v| format!("{v:.3} ")).collect::<String>());
    }
    println!("strongest edges:");
    for e in top_k_edges(&sampled.matrix, 5) {
        println!("  {} -> {}  {:.3}", e.from_cluster, e.to_cluster, e.weight);
    }

    let now = fixture.end().expect("fixture has snapshots") + chrono::Duration::minutes(1);
    let p = prediction_payload(&history, &clusters, &sampled.matrix, cfg.step(), now)?;
    println!("\nlast complete step {}: {:?}", p.step_index, p.o_now);
    println!("next step predicted:  {:?}", p.o_predicted.iter().map(|v| (v * 10.0).round() / 10.0).collect::<Vec<_>>());
    Ok(())
}
