//! Generates the synthetic city and writes a ready-to-use data directory.
//!
//! ```text
//! cargo run --example synthetic_fixture -- /tmp/gridpulse-data
//! gridpulse --data-dir /tmp/gridpulse-data ingest-replay /tmp/gridpulse-data/snapshots
//! ```

use std::path::PathBuf;

use gridpulse::synth::{Fixture, FixtureConfig};

fn main() -> gridpulse::Result<()> {
    let dir = std::env::args_os()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("gridpulse-fixture"));
    let cfg = FixtureConfig {
        days: 7,
        ..Default::default()
    };
    let fixture = Fixture::generate(&cfg)?;
    fixture.write_reference(&dir)?;
    fixture.write_snapshots(&dir.join("snapshots"))?;

    let reports: usize = fixture.snapshots.iter().map(|s| s.reports.len()).sum();
    println!("data directory: {}", dir.display());
    println!("  zips:       {}", fixture.zips.len());
    println!("  addresses:  {}", fixture.geocoder.len());
    println!("  snapshots:  {} ({} reports)", fixture.snapshots.len(), reports);

    let mut busiest: Vec<_> = fixture.outages_per_zip().into_iter().collect();
    busiest.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    println!("busiest zips:");
    for (zip, n) in busiest.iter().take(5) {
        println!("  {zip}  {n} outages");
    }
    Ok(())
}
