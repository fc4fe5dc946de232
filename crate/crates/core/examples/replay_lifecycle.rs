//! Replays synthetic snapshots through the poll cycle and shows how outages
//! move from processed to historical.

use std::sync::Arc;

use gridpulse::geo::OfflineGeocoder;
use gridpulse::ingest::{process_snapshot, LifecycleStage};
use gridpulse::store::Store;
use gridpulse::synth::{Fixture, FixtureConfig};
use gridpulse::time;

fn main() -> gridpulse::Result<()> {
    let fixture = Fixture::generate(&FixtureConfig {
        days: 1,
        ..Default::default()
    })?;
    let zips = Arc::new(fixture.zips.clone());
    let geocoder = OfflineGeocoder::new(fixture.geocoder.clone(), zips)?;
    let store = Store::in_memory()?;

    println!("{:<22} {:>8} {:>8} {:>8} {:>6}", "captured_at", "promoted", "retired", "updated", "live");
    for snapshot in &fixture.snapshots {
        let report = process_snapshot(snapshot, &store, &geocoder, snapshot.captured_at);
        for e in &report.errors {
            eprintln!("  {:?}: {}", e.kind, e.message);
        }
        println!(
            "{:<22} {:>8} {:>8} {:>8} {:>6}",
            time::format(&snapshot.captured_at),
            report.promoted,
            report.retired,
            report.updated,
            store.count(LifecycleStage::Processed)?
        );
    }

    let history = store.history()?;
    let unmapped = history.iter().filter(|o| o.zip.is_none()).count();
    let minutes: i64 = history
        .iter()
        .filter_map(|o| o.ended_at.map(|end| (end - o.first_seen_at).num_minutes()))
        .sum();
    println!();
    println!("historical outages: {} ({unmapped} without a zip)", history.len());
    if !history.is_empty() {
        println!("mean observed duration: {} min", minutes / history.len() as i64);
    }
    println!("\n{}", String::from_utf8_lossy(&store.export_csv(LifecycleStage::Processed)?));
    Ok(())
}
