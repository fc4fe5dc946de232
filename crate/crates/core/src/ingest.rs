//! Snapshot ingestion and the crawled → processed → historical lifecycle.
//!
//! A source publishes the set of outages that are live right now. Each poll
//! cycle compares that set against the processed table: new ids are
//! enriched and promoted, processed ids that vanished are retired into the
//! historical table with the snapshot's capture time as their end time.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use tracing::{debug, warn};

use crate::geo::{resolve_address, Borough, Geocoder, Resolution};
use crate::store::Store;
use crate::time::{self, Timestamp};
use crate::{Error, Result};

/// Default cadence between poll cycles.
pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_secs(30 * 60);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageReport {
    pub source_id: String,
    pub address: String,
    #[serde(with = "time::rfc3339")]
    pub reported_at: Timestamp,
    pub cause: Option<String>,
    pub customers_affected: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Snapshot {
    #[serde(with = "time::rfc3339")]
    pub captured_at: Timestamp,
    pub reports: Vec<OutageReport>,
}

impl Snapshot {
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for r in &self.reports {
            if r.source_id.is_empty() {
                return Err(Error::Validation("report with empty source_id".into()));
            }
            if r.reported_at > self.captured_at {
                return Err(Error::Validation(format!(
                    "report {} reported_at {} is after capture time {}",
                    r.source_id,
                    time::format(&r.reported_at),
                    time::format(&self.captured_at)
                )));
            }
            if !seen.insert(r.source_id.as_str()) {
                return Err(Error::Validation(format!("duplicate source_id {:?}", r.source_id)));
            }
        }
        Ok(())
    }

    pub fn ids(&self) -> BTreeSet<String> {
        self.reports.iter().map(|r| r.source_id.clone()).collect()
    }

    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("snapshot serializes")
    }

    /// CSV body; the capture time is not part of the CSV schema.
    pub fn to_csv(&self) -> Vec<u8> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(CSV_HEADER).expect("in-memory write");
        for r in &self.reports {
            w.write_record([
                r.source_id.clone(),
                r.address.clone(),
                time::format(&r.reported_at),
                r.cause.clone().unwrap_or_default(),
                r.customers_affected.map(|n| n.to_string()).unwrap_or_default(),
            ])
            .expect("in-memory write");
        }
        w.into_inner().expect("in-memory flush")
    }
}

const CSV_HEADER: [&str; 5] = ["source_id", "address", "reported_at", "cause", "customers_affected"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifecycleStage {
    Crawled,
    Processed,
    Historical,
}

impl LifecycleStage {
    pub fn can_transition_to(self, next: LifecycleStage) -> bool {
        matches!(
            (self, next),
            (LifecycleStage::Crawled, LifecycleStage::Processed)
                | (LifecycleStage::Processed, LifecycleStage::Historical)
        )
    }

    pub fn as_str(self) -> &'static str {
        match self {
            LifecycleStage::Crawled => "crawled",
            LifecycleStage::Processed => "processed",
            LifecycleStage::Historical => "historical",
        }
    }
}

impl fmt::Display for LifecycleStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for LifecycleStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crawled" => Ok(LifecycleStage::Crawled),
            "processed" => Ok(LifecycleStage::Processed),
            "historical" => Ok(LifecycleStage::Historical),
            _ => Err(Error::Validation(format!("unknown lifecycle stage {s:?}"))),
        }
    }
}

/// Wire format of a raw snapshot. CSV bodies carry no capture time, so the
/// caller supplies it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SnapshotFormat {
    Json,
    Csv { captured_at: Timestamp },
}

#[derive(Deserialize)]
struct JsonSnapshot {
    captured_at: String,
    reports: Vec<Value>,
}

#[derive(Deserialize)]
struct JsonReport {
    source_id: String,
    address: String,
    reported_at: String,
    #[serde(default)]
    cause: Option<String>,
    #[serde(default)]
    customers_affected: Option<u64>,
}

pub fn parse_snapshot(raw: &[u8], format: SnapshotFormat) -> Result<Snapshot> {
    let snapshot = match format {
        SnapshotFormat::Json => parse_json(raw)?,
        SnapshotFormat::Csv { captured_at } => parse_csv(raw, time::truncate(captured_at))?,
    };
    snapshot.validate()?;
    Ok(snapshot)
}

fn parse_json(raw: &[u8]) -> Result<Snapshot> {
    let doc: JsonSnapshot =
        serde_json::from_slice(raw).map_err(|e| Error::parse("snapshot", e))?;
    let captured_at = time::parse(&doc.captured_at)
        .map_err(|e| Error::parse("snapshot.captured_at", e))?;
    let mut reports = Vec::with_capacity(doc.reports.len());
    for (i, value) in doc.reports.into_iter().enumerate() {
        let label = value
            .get("source_id")
            .and_then(Value::as_str)
            .map_or_else(|| format!("reports[{i}]"), |id| format!("reports[{i}] ({id})"));
        let r: JsonReport = serde_json::from_value(value).map_err(|e| Error::parse(label.clone(), e))?;
        let reported_at = time::parse(&r.reported_at).map_err(|e| Error::parse(label, e))?;
        reports.push(OutageReport {
            source_id: r.source_id,
            address: r.address,
            reported_at,
            cause: r.cause.filter(|c| !c.trim().is_empty()),
            customers_affected: r.customers_affected,
        });
    }
    Ok(Snapshot { captured_at, reports })
}

fn parse_csv(raw: &[u8], captured_at: Timestamp) -> Result<Snapshot> {
    let mut rdr = csv::Reader::from_reader(raw);
    let headers = rdr.headers().map_err(|e| Error::parse("csv header", e))?.clone();
    let col = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| Error::parse("csv header", format!("missing column {name}")))
    };
    let (c_id, c_addr, c_rep) = (col("source_id")?, col("address")?, col("reported_at")?);
    let c_cause = headers.iter().position(|h| h.trim() == "cause");
    let c_cust = headers.iter().position(|h| h.trim() == "customers_affected");

    let mut reports = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let label = format!("row {}", i + 2);
        let rec = rec.map_err(|e| Error::parse(label.clone(), e))?;
        let field = |c: usize| rec.get(c).unwrap_or("");
        let optional = |c: Option<usize>| c.map(field).filter(|s| !s.trim().is_empty());
        let customers_affected = optional(c_cust)
            .map(|s| s.trim().parse::<u64>())
            .transpose()
            .map_err(|e| Error::parse(label.clone(), format!("customers_affected: {e}")))?;
        reports.push(OutageReport {
            source_id: field(c_id).to_string(),
            address: field(c_addr).to_string(),
            reported_at: time::parse(field(c_rep)).map_err(|e| Error::parse(label, e))?,
            cause: optional(c_cause).map(str::to_string),
            customers_affected,
        });
    }
    Ok(Snapshot { captured_at, reports })
}

/// The table mutations one snapshot implies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReconcilePlan {
    pub captured_at: Timestamp,
    /// Processed ids the plan was computed against.
    pub basis: BTreeSet<String>,
    /// The crawled table: everything in the snapshot.
    pub to_insert_crawled: BTreeMap<String, OutageReport>,
    pub to_promote_processed: BTreeSet<String>,
    /// Retired with `ended_at = captured_at`.
    pub to_retire_historical: BTreeSet<String>,
}

impl ReconcilePlan {
    pub fn is_noop(&self) -> bool {
        self.to_promote_processed.is_empty() && self.to_retire_historical.is_empty()
    }
}

pub fn reconcile(snapshot: &Snapshot, processed_ids: &BTreeSet<String>) -> ReconcilePlan {
    let crawled: BTreeMap<String, OutageReport> = snapshot
        .reports
        .iter()
        .map(|r| (r.source_id.clone(), r.clone()))
        .collect();
    let to_promote_processed = crawled
        .keys()
        .filter(|id| !processed_ids.contains(*id))
        .cloned()
        .collect();
    let to_retire_historical = processed_ids
        .iter()
        .filter(|id| !crawled.contains_key(*id))
        .cloned()
        .collect();
    ReconcilePlan {
        captured_at: snapshot.captured_at,
        basis: processed_ids.clone(),
        to_insert_crawled: crawled,
        to_promote_processed,
        to_retire_historical,
    }
}

/// Zip and borough attached to an outage when it is promoted. Both are
/// `None` when the geocoder does not know the address.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Enrichment {
    pub zip: Option<String>,
    pub borough: Option<Borough>,
}

/// Raw bytes from a source plus how to read them.
#[derive(Debug, Clone)]
pub struct Fetched {
    pub bytes: Vec<u8>,
    pub format: SnapshotFormat,
}

pub trait SourceAdapter: Send {
    fn fetch(&mut self) -> Result<Fetched>;
}

/// Polls a URL serving the snapshot JSON (or CSV, when `csv` is set).
#[derive(Debug, Clone)]
pub struct HttpSource {
    url: String,
    csv: bool,
    agent: ureq::Agent,
}

impl HttpSource {
    pub fn new(url: impl Into<String>) -> Self {
        let url = url.into();
        let csv = url.ends_with(".csv");
        Self {
            url,
            csv,
            agent: ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build(),
        }
    }
}

impl SourceAdapter for HttpSource {
    fn fetch(&mut self) -> Result<Fetched> {
        let fetched_at = time::truncate(chrono::Utc::now());
        let resp = self
            .agent
            .get(&self.url)
            .call()
            .map_err(|e| Error::Backend(format!("GET {} failed: {e}", self.url)))?;
        let mut bytes = Vec::new();
        std::io::Read::read_to_end(&mut resp.into_reader(), &mut bytes)
            .map_err(|e| Error::Backend(format!("reading {} failed: {e}", self.url)))?;
        let format = if self.csv {
            SnapshotFormat::Csv { captured_at: fetched_at }
        } else {
            SnapshotFormat::Json
        };
        Ok(Fetched { bytes, format })
    }
}

/// Replays `*.json` / `*.csv` snapshot files from a directory in filename
/// order. CSV files take their capture time from the file stem, written
/// either as RFC3339 or with `-` in place of the time colons
/// (`2021-07-01T00-30-00Z.csv`).
#[derive(Debug, Clone)]
pub struct ReplaySource {
    files: VecDeque<PathBuf>,
}

impl ReplaySource {
    pub fn open(dir: &Path) -> Result<Self> {
        let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && matches!(p.extension().and_then(|e| e.to_str()), Some("json" | "csv"))
            })
            .collect();
        files.sort();
        Ok(Self { files: files.into() })
    }

    pub fn remaining(&self) -> usize {
        self.files.len()
    }
}

fn capture_time_from_stem(path: &Path) -> Result<Timestamp> {
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::parse(path.display().to_string(), "unreadable file name"))?;
    if let Ok(ts) = time::parse(stem) {
        return Ok(ts);
    }
    // 2021-07-01T00-30-00Z -> 2021-07-01T00:30:00Z
    if let Some((date, clock)) = stem.split_once('T') {
        if let Ok(ts) = time::parse(&format!("{date}T{}", clock.replace('-', ":"))) {
            return Ok(ts);
        }
    }
    Err(Error::parse(
        path.display().to_string(),
        "CSV snapshot file name must encode its capture time",
    ))
}

impl SourceAdapter for ReplaySource {
    fn fetch(&mut self) -> Result<Fetched> {
        let path = self
            .files
            .pop_front()
            .ok_or_else(|| Error::Backend("replay directory exhausted".into()))?;
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let format = if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            SnapshotFormat::Csv {
                captured_at: capture_time_from_stem(&path)?,
            }
        } else {
            SnapshotFormat::Json
        };
        Ok(Fetched { bytes, format })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CycleErrorKind {
    Source,
    Parse,
    Ordering,
    /// The snapshot is not newer than the last one applied.
    Stale,
    Enrichment,
    Store,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleError {
    pub kind: CycleErrorKind,
    pub source_id: Option<String>,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CycleReport {
    #[serde(with = "time::rfc3339::option")]
    pub captured_at: Option<Timestamp>,
    pub inserted: usize,
    pub promoted: usize,
    pub retired: usize,
    pub updated: usize,
    pub errors: Vec<CycleError>,
}

impl CycleReport {
    fn fail(kind: CycleErrorKind, err: &Error) -> Self {
        Self {
            errors: vec![CycleError {
                kind,
                source_id: None,
                message: err.to_string(),
            }],
            ..Self::default()
        }
    }

    /// The cycle did not touch the store.
    pub fn skipped(&self) -> bool {
        self.captured_at.is_none()
    }
}

/// One fetch → parse → reconcile → enrich → apply round.
///
/// Failures before the store is touched abort the cycle and are reported.
/// A retryable geocoder failure only holds back that outage: it is left out
/// of the promotion set and gets promoted by a later cycle.
pub fn run_poll_cycle(
    source: &mut dyn SourceAdapter,
    store: &Store,
    geocoder: &dyn Geocoder,
    now: Timestamp,
) -> CycleReport {
    let fetched = match source.fetch() {
        Ok(f) => f,
        Err(e) => {
            warn!(error = %e, "snapshot source unavailable");
            return CycleReport::fail(CycleErrorKind::Source, &e);
        }
    };
    let snapshot = match parse_snapshot(&fetched.bytes, fetched.format) {
        Ok(s) => s,
        Err(e) => {
            warn!(error = %e, "snapshot rejected");
            return CycleReport::fail(CycleErrorKind::Parse, &e);
        }
    };
    process_snapshot(&snapshot, store, geocoder, now)
}

/// The part of [`run_poll_cycle`] after a snapshot has been parsed.
pub fn process_snapshot(
    snapshot: &Snapshot,
    store: &Store,
    geocoder: &dyn Geocoder,
    now: Timestamp,
) -> CycleReport {
    if snapshot.captured_at > now {
        let e = Error::Validation(format!(
            "snapshot captured at {} is in the future",
            time::format(&snapshot.captured_at)
        ));
        return CycleReport::fail(CycleErrorKind::Ordering, &e);
    }
    let state = match store.processed_state() {
        Ok(s) => s,
        Err(e) => return CycleReport::fail(CycleErrorKind::Store, &e),
    };
    if let Some(last) = state.last_captured_at {
        if snapshot.captured_at <= last {
            let e = Error::Validation(format!(
                "snapshot captured at {} is not after the last processed snapshot {}",
                time::format(&snapshot.captured_at),
                time::format(&last)
            ));
            return CycleReport::fail(CycleErrorKind::Stale, &e);
        }
    }

    let mut plan = reconcile(snapshot, &state.processed_ids);
    let mut errors = Vec::new();
    let mut enrichments = BTreeMap::new();
    let mut held_back = Vec::new();
    for id in &plan.to_promote_processed {
        let report = &plan.to_insert_crawled[id];
        match resolve_address(&report.address, geocoder) {
            Ok(Resolution::Found(info)) => {
                enrichments.insert(
                    id.clone(),
                    Enrichment {
                        zip: Some(info.zip),
                        borough: Some(info.borough),
                    },
                );
            }
            Ok(Resolution::NotFound) | Err(Error::Validation(_)) => {
                debug!(source_id = %id, address = %report.address, "address not geocodable");
                enrichments.insert(id.clone(), Enrichment::default());
            }
            Err(e) => {
                held_back.push(id.clone());
                errors.push(CycleError {
                    kind: CycleErrorKind::Enrichment,
                    source_id: Some(id.clone()),
                    message: e.to_string(),
                });
            }
        }
    }
    for id in held_back {
        plan.to_promote_processed.remove(&id);
    }

    match store.apply_plan(&plan, &enrichments) {
        Ok(applied) => CycleReport {
            captured_at: Some(snapshot.captured_at),
            inserted: plan.to_insert_crawled.len(),
            promoted: applied.promoted,
            retired: applied.retired,
            updated: applied.updated,
            errors,
        },
        Err(e) => {
            warn!(error = %e, "applying reconcile plan failed");
            errors.push(CycleError {
                kind: CycleErrorKind::Store,
                source_id: None,
                message: e.to_string(),
            });
            CycleReport {
                errors,
                ..CycleReport::default()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ts(s: &str) -> Timestamp {
        time::parse(s).unwrap()
    }

    fn snap(at: &str, ids: &[&str]) -> Snapshot {
        Snapshot {
            captured_at: ts(at),
            reports: ids
                .iter()
                .map(|id| OutageReport {
                    source_id: id.to_string(),
                    address: format!("{id} Main St"),
                    reported_at: ts("2021-01-01T00:00:00Z"),
                    cause: None,
                    customers_affected: None,
                })
                .collect(),
        }
    }

    fn set(ids: &[&str]) -> BTreeSet<String> {
        ids.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn parse_empty_json() {
        let raw = br#"{"captured_at":"2021-01-01T00:00:00Z","reports":[]}"#;
        let s = parse_snapshot(raw, SnapshotFormat::Json).unwrap();
        assert!(s.reports.is_empty());
    }

    #[test]
    fn parse_single_record_ignores_unknown_fields() {
        let raw = br#"{"captured_at":"2021-01-01T00:30:00Z","extra":1,"reports":[
            {"source_id":"a","address":"1 Main St","reported_at":"2021-01-01T00:00:00Z",
             "cause":null,"customers_affected":null,"icon":"blue"}]}"#;
        let s = parse_snapshot(raw, SnapshotFormat::Json).unwrap();
        assert_eq!(s.reports.len(), 1);
        assert_eq!(s.reports[0].address, "1 Main St");
        assert_eq!(s.reports[0].reported_at, ts("2021-01-01T00:00:00Z"));
        assert_eq!(s.reports[0].cause, None);
    }

    #[test]
    fn parse_duplicate_ids_rejected() {
        let raw = br#"{"captured_at":"2021-01-01T00:30:00Z","reports":[
            {"source_id":"x","address":"1 Main St","reported_at":"2021-01-01T00:00:00Z"},
            {"source_id":"x","address":"2 Main St","reported_at":"2021-01-01T00:00:00Z"}]}"#;
        let err = parse_snapshot(raw, SnapshotFormat::Json).unwrap_err();
        assert!(matches!(err, Error::Validation(ref m) if m.contains("duplicate")), "{err}");
    }

    #[test]
    fn parse_error_names_record() {
        let raw = br#"{"captured_at":"2021-01-01T00:30:00Z","reports":[
            {"source_id":"ok","address":"1 Main St","reported_at":"2021-01-01T00:00:00Z"},
            {"source_id":"bad","address":"2 Main St","reported_at":"tuesday"}]}"#;
        match parse_snapshot(raw, SnapshotFormat::Json).unwrap_err() {
            Error::Parse { record, .. } => assert!(record.contains("bad"), "{record}"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn parse_rejects_future_report() {
        let raw = br#"{"captured_at":"2021-01-01T00:00:00Z","reports":[
            {"source_id":"a","address":"1 Main St","reported_at":"2021-01-01T01:00:00Z"}]}"#;
        assert!(parse_snapshot(raw, SnapshotFormat::Json).is_err());
    }

    #[test]
    fn parse_rejects_empty_source_id() {
        let raw = br#"{"captured_at":"2021-01-01T00:30:00Z","reports":[
            {"source_id":"","address":"1 Main St","reported_at":"2021-01-01T00:00:00Z"}]}"#;
        assert!(parse_snapshot(raw, SnapshotFormat::Json).is_err());
    }

    #[test]
    fn csv_round_trip_with_quoting() {
        let mut s = snap("2021-01-01T01:00:00Z", &["a", "b"]);
        s.reports[0].address = "1 Main St, Apt 2".into();
        s.reports[1].cause = Some("weather".into());
        s.reports[1].customers_affected = Some(12);
        let raw = s.to_csv();
        assert!(String::from_utf8_lossy(&raw).contains("\"1 Main St, Apt 2\""));
        let back = parse_snapshot(&raw, SnapshotFormat::Csv { captured_at: s.captured_at }).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn reconcile_examples() {
        let p = reconcile(&snap("2021-01-01T00:30:00Z", &["A"]), &set(&[]));
        assert_eq!(p.to_promote_processed, set(&["A"]));
        assert!(p.to_retire_historical.is_empty());

        let p = reconcile(&snap("2021-01-01T00:30:00Z", &[]), &set(&["A"]));
        assert!(p.to_promote_processed.is_empty());
        assert_eq!(p.to_retire_historical, set(&["A"]));

        let p = reconcile(&snap("2021-01-01T00:30:00Z", &["A"]), &set(&["A"]));
        assert!(p.is_noop());
        assert_eq!(p.to_insert_crawled.len(), 1);
    }

    #[test]
    fn lifecycle_transitions() {
        use LifecycleStage::*;
        assert!(Crawled.can_transition_to(Processed));
        assert!(Processed.can_transition_to(Historical));
        assert!(!Crawled.can_transition_to(Historical));
        assert!(!Historical.can_transition_to(Processed));
        assert!(!Processed.can_transition_to(Crawled));
    }

    #[test]
    fn replay_capture_time_from_stem() {
        let t = capture_time_from_stem(Path::new("/x/2021-07-01T00-30-00Z.csv")).unwrap();
        assert_eq!(t, ts("2021-07-01T00:30:00Z"));
        assert!(capture_time_from_stem(Path::new("/x/snapshot.csv")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn reconcile_sets_are_disjoint_and_complete(
            snapshot_ids in proptest::collection::btree_set("[a-e]{1,2}", 0..12),
            processed in proptest::collection::btree_set("[a-e]{1,2}", 0..12),
        ) {
            let ids: Vec<&str> = snapshot_ids.iter().map(String::as_str).collect();
            let plan = reconcile(&snap("2021-01-01T00:30:00Z", &ids), &processed);
            proptest::prop_assert!(plan.to_promote_processed.is_disjoint(&plan.to_retire_historical));
            let after: BTreeSet<String> = processed
                .difference(&plan.to_retire_historical)
                .chain(plan.to_promote_processed.iter())
                .cloned()
                .collect();
            proptest::prop_assert_eq!(&after, &snapshot_ids);
            // replaying against the post-state is a no-op
            let again = reconcile(&snap("2021-01-01T01:00:00Z", &ids), &after);
            proptest::prop_assert!(again.is_noop());
        }
    }
}
