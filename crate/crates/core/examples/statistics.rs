//! Descriptive statistics over three synthetic days of outage history.

use std::sync::Arc;

use gridpulse::analytics::TrendAxis;
use gridpulse::geo::OfflineGeocoder;
use gridpulse::ingest::process_snapshot;
use gridpulse::pipeline::{
    causes_payload, history_series, outage_events, per_capita_payload, transition_bins_payload, trend_payload,
};
use gridpulse::store::Store;
use gridpulse::synth::{Fixture, FixtureConfig};

fn main() -> gridpulse::Result<()> {
    let fixture = Fixture::generate(&FixtureConfig::default())?;
    let zips = Arc::new(fixture.zips.clone());
    let geocoder = OfflineGeocoder::new(fixture.geocoder.clone(), zips.clone())?;
    let store = Store::in_memory()?;
    for s in &fixture.snapshots {
        process_snapshot(s, &store, &geocoder, s.captured_at);
    }
    let history = store.history()?;

    println!("outages per 1000 residents:");
    for row in per_capita_payload(&history, &zips)? {
        println!("  {:<14} {:>4} / {:>7}  {:.3}", row.borough.name(), row.count, row.population, row.per_capita * 1000.0);
    }

    for axis in [TrendAxis::Income, TrendAxis::Nonwhite] {
        let t = trend_payload(&history, &fixture.demographics, axis)?;
        println!("trend vs {axis:?}: slope {:.3e}, intercept {:.3}, r {:.3} over {} zips", t.slope, t.intercept, t.r, t.n);
    }

    println!("causes:");
    for c in causes_payload(&history) {
        println!("  {:<22} {}", c.cause, c.count);
    }

    let series = history_series(&outage_events(&history), chrono::Duration::hours(2))?;
    let bins = transition_bins_payload(&series)?;
    println!("bin transitions over {} two-hour steps (row = now, column = next):", bins.steps);
    println!("{:>6} {}", "", bins.bins.iter().map(|b| format!("{b:>6}")).collect::<String>());
    for (label, row) in bins.bins.iter().zip(bins.probabilities.iter()) {
        println!("{label:>6} {}", row.iter().map(|p| format!("{p:>6.2}")).collect::<String>());
    }
    Ok(())
}
