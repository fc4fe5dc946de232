//! Builds the electricity vulnerability index from a feature table and ranks
//! the outages that are live at the end of the synthetic day.

use gridpulse::pipeline::current_outages;
use gridpulse::geo::OfflineGeocoder;
use gridpulse::ingest::{process_snapshot, LifecycleStage};
use gridpulse::store::Store;
use gridpulse::synth::{Fixture, FixtureConfig};
use gridpulse::vulnerability::{Feature, VulnerabilityIndex};

fn main() -> gridpulse::Result<()> {
    let fixture = Fixture::generate(&FixtureConfig {
        days: 1,
        ..Default::default()
    })?;
    let index = VulnerabilityIndex::build(&fixture.features)?;

    println!("{:>4}  {:<6} {:>6}  {:<7} imputed", "zcr", "zip", "score", "color");
    for r in index.rankings.iter().take(10) {
        let imputed: Vec<&str> = r.imputed.iter().map(|f| f.column()).collect();
        println!("{:>4}  {:<6} {:>6.3}  {:<7} {}", r.zcr, r.zip, r.score, r.color.as_str(), imputed.join(" "));
    }
    println!("features: {}", Feature::ALL.map(Feature::column).join(", "));

    let zips = std::sync::Arc::new(fixture.zips.clone());
    let geocoder = OfflineGeocoder::new(fixture.geocoder.clone(), zips.clone())?;
    let store = Store::in_memory()?;
    for s in &fixture.snapshots {
        process_snapshot(s, &store, &geocoder, s.captured_at);
    }
    let live = store.all(LifecycleStage::Processed)?;
    println!("\n{} live outages by severity:", live.len());
    for o in current_outages(&live, &index, &zips)? {
        println!("  osr {:>2}  zcr {:>3}  {:<7} {}", o.osr, o.zcr, o.color.as_str(), o.address);
    }
    Ok(())
}
