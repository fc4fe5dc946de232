//! Deterministic synthetic fixture: zip table, geocoder entries, feature
//! and demographic tables, and a run of snapshots from a simulated outage
//! feed.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::{Duration, Timelike};
use rand::distributions::WeightedIndex;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::Poisson;

use crate::analytics::DemographicRow;
use crate::geo::{Borough, ZipInfo, ZipTable};
use crate::ingest::{OutageReport, Snapshot};
use crate::time::{self, Timestamp};
use crate::vulnerability::{Feature, ZipFeatureRow, FEATURE_COUNT};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct FixtureConfig {
    pub seed: u64,
    pub start: Timestamp,
    pub days: u32,
    pub snapshot_minutes: i64,
    pub zips_per_borough: usize,
    /// Mean new outages per snapshot, before the time-of-day swing.
    pub arrival_rate: f64,
    /// Longest outage, in snapshots.
    pub max_duration: u32,
    /// Share of feature cells left empty.
    pub missing_rate: f64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            start: time::parse("2021-07-01T00:00:00Z").expect("valid literal"),
            days: 3,
            snapshot_minutes: 30,
            zips_per_borough: 6,
            arrival_rate: 1.5,
            max_duration: 12,
            missing_rate: 0.05,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Fixture {
    pub zips: ZipTable,
    /// `(address, zip)`; a few fixture addresses are deliberately absent.
    pub geocoder: Vec<(String, String)>,
    pub features: Vec<ZipFeatureRow>,
    pub demographics: Vec<DemographicRow>,
    pub snapshots: Vec<Snapshot>,
}

/// `(first zip, lat range, lon range)` per borough.
fn borough_extent(b: Borough) -> (u32, (f64, f64), (f64, f64)) {
    match b {
        Borough::Bronx => (10451, (40.81, 40.90), (-73.92, -73.80)),
        Borough::Brooklyn => (11201, (40.58, 40.70), (-74.02, -73.86)),
        Borough::Manhattan => (10001, (40.71, 40.86), (-74.01, -73.93)),
        Borough::Queens => (11354, (40.60, 40.78), (-73.86, -73.72)),
        Borough::StatenIsland => (10301, (40.50, 40.64), (-74.24, -74.07)),
    }
}

const STREETS: [&str; 8] = [
    "Main St", "Broadway", "Park Ave", "Ocean Pkwy", "Grand Concourse", "Union Tpke", "Victory Blvd", "Atlantic Ave",
];

const CAUSES: [Option<&str>; 6] = [
    Some("equipment failure"),
    Some("tree contact"),
    Some("weather"),
    Some("overload"),
    Some("vehicle accident"),
    None,
];

struct Live {
    id: String,
    address: String,
    reported_at: Timestamp,
    cause: Option<String>,
    customers: u64,
    born: usize,
    last: usize,
}

impl Fixture {
    pub fn generate(cfg: &FixtureConfig) -> Result<Self> {
        if cfg.snapshot_minutes <= 0 || cfg.days == 0 || cfg.zips_per_borough == 0 || cfg.max_duration == 0 {
            return Err(Error::Validation("fixture sizes must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

        let mut infos = Vec::new();
        for b in Borough::ALL {
            let (base, (lat_lo, lat_hi), (lon_lo, lon_hi)) = borough_extent(b);
            for i in 0..cfg.zips_per_borough {
                infos.push(ZipInfo {
                    zip: format!("{:05}", base + i as u32),
                    borough: b,
                    centroid_lat: rng.gen_range(lat_lo..lat_hi),
                    centroid_lon: rng.gen_range(lon_lo..lon_hi),
                    population: rng.gen_range(15_000..110_000),
                });
            }
        }

        let mut features = Vec::new();
        let mut demographics = Vec::new();
        let mut weights = Vec::new();
        for z in &infos {
            let poverty: f64 = rng.gen_range(0.05..0.40);
            let raw: [f64; FEATURE_COUNT] = [
                rng.gen_range(0.05..0.25),
                rng.gen_range(0..7) as f64,
                rng.gen_range(0..40) as f64,
                rng.gen_range(0..2000) as f64,
                poverty,
                rng.gen_range(200..3000) as f64,
                (rng.gen_range(0.5..3.0) * 100.0_f64).round() / 100.0,
            ];
            let values = raw.map(|v| (!rng.gen_bool(cfg.missing_rate)).then_some(v));
            features.push(ZipFeatureRow::new(z.zip.clone(), values));
            demographics.push(DemographicRow {
                zip: z.zip.clone(),
                median_family_income: Some((rng.gen_range(25_000.0..150_000.0) * (1.0 - poverty)).round()),
                pct_nonwhite: Some((rng.gen_range(0.1..0.6) + poverty).min(1.0)),
            });
            weights.push(0.5 + 3.0 * poverty);
        }

        let mut geocoder = Vec::new();
        let mut addresses: Vec<Vec<String>> = Vec::new();
        for z in &infos {
            let list: Vec<String> = (0..5)
                .map(|_| {
                    format!(
                        "{} {}, {}, NY {}",
                        rng.gen_range(1..2000),
                        STREETS[rng.gen_range(0..STREETS.len())],
                        z.borough,
                        z.zip
                    )
                })
                .collect();
            geocoder.extend(list.iter().map(|a| (a.clone(), z.zip.clone())));
            addresses.push(list);
        }
        geocoder.sort();
        geocoder.dedup_by(|a, b| a.0 == b.0);
        let unmapped: Vec<String> = (1..=3).map(|i| format!("Unmapped location {i}")).collect();

        let step = Duration::minutes(cfg.snapshot_minutes);
        let count = (cfg.days as i64 * 24 * 60 / cfg.snapshot_minutes) as usize;
        let zip_pick = WeightedIndex::new(&weights).expect("positive weights");
        let mut live: Vec<Live> = Vec::new();
        let mut finished: Vec<(String, usize)> = Vec::new();
        let mut next_id = 1u32;
        let mut snapshots = Vec::with_capacity(count);

        for k in 0..count {
            let captured_at = cfg.start + step * k as i32;
            for o in live.iter().filter(|o| o.last < k) {
                finished.push((o.id.clone(), o.last));
            }
            live.retain(|o| o.last >= k);

            let hour = captured_at.time().num_seconds_from_midnight() as f64 / 3600.0;
            let rate = cfg.arrival_rate * (1.0 + 0.8 * (std::f64::consts::TAU * (hour - 9.0) / 24.0).sin());
            let arrivals = Poisson::new(rate.max(1e-3)).expect("positive rate").sample(&mut rng) as u64;
            for _ in 0..arrivals {
                // occasionally an old id comes back after a gap
                let reusable = finished.iter().position(|(id, last)| {
                    *last + 1 < k && !live.iter().any(|l| &l.id == id)
                });
                let id = match reusable {
                    Some(i) if rng.gen_bool(0.05) => finished.swap_remove(i).0,
                    _ => {
                        next_id += 1;
                        format!("CE-{:06}", next_id - 1)
                    }
                };
                let address = if rng.gen_bool(0.03) {
                    unmapped[rng.gen_range(0..unmapped.len())].clone()
                } else {
                    let z = zip_pick.sample(&mut rng);
                    addresses[z][rng.gen_range(0..addresses[z].len())].clone()
                };
                let lag = Duration::minutes(rng.gen_range(0..cfg.snapshot_minutes));
                let duration = rng.gen_range(1..=cfg.max_duration) as usize;
                live.push(Live {
                    id,
                    address,
                    reported_at: (captured_at - lag).max(cfg.start),
                    cause: CAUSES[rng.gen_range(0..CAUSES.len())].map(str::to_string),
                    customers: rng.gen_range(1..500),
                    born: k,
                    last: k + duration - 1,
                });
            }
            // a cause discovered after the first report
            for o in live.iter_mut().filter(|o| o.cause.is_none() && o.born + 2 == k) {
                if rng.gen_bool(0.5) {
                    o.cause = Some("equipment failure".into());
                }
            }

            let mut reports: Vec<OutageReport> = live
                .iter()
                .map(|o| OutageReport {
                    source_id: o.id.clone(),
                    address: o.address.clone(),
                    reported_at: o.reported_at,
                    cause: o.cause.clone(),
                    customers_affected: Some(o.customers),
                })
                .collect();
            reports.sort_by(|a, b| a.source_id.cmp(&b.source_id));
            let snapshot = Snapshot { captured_at, reports };
            snapshot.validate()?;
            snapshots.push(snapshot);
        }

        Ok(Self {
            zips: ZipTable::new(infos)?,
            geocoder,
            features,
            demographics,
            snapshots,
        })
    }

    /// Capture time of the last snapshot.
    pub fn end(&self) -> Option<Timestamp> {
        self.snapshots.last().map(|s| s.captured_at)
    }

    /// Writes `zips.csv`, `geocoder.csv`, `features.csv` and
    /// `demographics.csv` into `data_dir`.
    pub fn write_reference(&self, data_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(data_dir).map_err(|e| Error::io(data_dir, e))?;
        write(&data_dir.join("zips.csv"), &self.zips.to_csv()?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["address", "zip"]).map_err(csv_err)?;
        for (a, z) in &self.geocoder {
            w.write_record([a, z]).map_err(csv_err)?;
        }
        write(&data_dir.join("geocoder.csv"), &w.into_inner().map_err(|e| Error::Validation(e.to_string()))?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        let header: Vec<&str> = std::iter::once("zip").chain(Feature::ALL.iter().map(|f| f.column())).collect();
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.features {
            let cells: Vec<String> = std::iter::once(row.zip.clone())
                .chain(row.values.iter().map(|v| v.map(|x| x.to_string()).unwrap_or_default()))
                .collect();
            w.write_record(&cells).map_err(csv_err)?;
        }
        write(&data_dir.join("features.csv"), &w.into_inner().map_err(|e| Error::Validation(e.to_string()))?)?;

        let mut w = csv::Writer::from_writer(Vec::new());
        for row in &self.demographics {
            w.serialize(row).map_err(csv_err)?;
        }
        write(&data_dir.join("demographics.csv"), &w.into_inner().map_err(|e| Error::Validation(e.to_string()))?)
    }

    /// One JSON file per snapshot, named by capture time so that file
    /// order is capture order.
    pub fn write_snapshots(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.snapshots {
            let name = format!("{}.json", time::format(&s.captured_at).replace(':', "-"));
            write(&dir.join(name), &s.to_json())?;
        }
        Ok(())
    }

    /// Outages per zip over the whole feed, counting each appearance of an
    /// id once.
    pub fn outages_per_zip(&self) -> BTreeMap<String, usize> {
        let by_address: BTreeMap<&str, &str> = self.geocoder.iter().map(|(a, z)| (a.as_str(), z.as_str())).collect();
        let mut counts = BTreeMap::new();
        let mut previous: Option<&Snapshot> = None;
        for s in &self.snapshots {
            for r in &s.reports {
                let continuing = previous.is_some_and(|p| p.reports.iter().any(|q| q.source_id == r.source_id));
                if let (false, Some(zip)) = (continuing, by_address.get(r.address.as_str())) {
                    *counts.entry(zip.to_string()).or_insert(0) += 1;
                }
            }
            previous = Some(s);
        }
        counts
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Validation(format!("csv write failed: {e}"))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
