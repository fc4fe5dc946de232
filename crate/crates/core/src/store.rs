//! Embedded SQLite store for the processed and historical outage tables.
//!
//! The crawled table is not persisted: it is exactly the latest snapshot and
//! lives inside the [`ReconcilePlan`]. Each applied cycle is logged in the
//! `cycles` table instead.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::{Mutex, MutexGuard};

use rusqlite::{params, Connection, OptionalExtension, Row, TransactionBehavior};
use serde::{Deserialize, Serialize};

use crate::geo::Borough;
use crate::ingest::{Enrichment, LifecycleStage, ReconcilePlan};
use crate::time::{self, Timestamp};
use crate::{Error, Result};

pub const CSV_HEADER: [&str; 10] = [
    "internal_id",
    "source_id",
    "address",
    "zip",
    "borough",
    "cause",
    "reported_at",
    "first_seen_at",
    "ended_at",
    "stage",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StoredOutage {
    pub internal_id: i64,
    pub source_id: String,
    pub address: String,
    pub zip: Option<String>,
    pub borough: Option<Borough>,
    pub cause: Option<String>,
    #[serde(with = "time::rfc3339")]
    pub reported_at: Timestamp,
    #[serde(with = "time::rfc3339")]
    pub first_seen_at: Timestamp,
    #[serde(with = "time::rfc3339::option")]
    pub ended_at: Option<Timestamp>,
    pub stage: LifecycleStage,
}

impl StoredOutage {
    pub fn validate(&self) -> Result<()> {
        match (self.stage, self.ended_at) {
            (LifecycleStage::Historical, Some(end)) if end >= self.first_seen_at => Ok(()),
            (LifecycleStage::Historical, Some(_)) => Err(Error::Validation(format!(
                "outage {} ends before it was first seen",
                self.internal_id
            ))),
            (LifecycleStage::Historical, None) => Err(Error::Validation(format!(
                "historical outage {} has no end time",
                self.internal_id
            ))),
            (LifecycleStage::Processed, None) => Ok(()),
            (LifecycleStage::Processed, Some(_)) => Err(Error::Validation(format!(
                "processed outage {} has an end time",
                self.internal_id
            ))),
            (LifecycleStage::Crawled, _) => Err(Error::Validation(
                "crawled outages are not stored".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QueryFilter {
    /// Inclusive lower bound on `reported_at`.
    pub from: Option<Timestamp>,
    /// Exclusive upper bound on `reported_at`.
    pub to: Option<Timestamp>,
    pub zip: Option<String>,
    pub borough: Option<Borough>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Page {
    pub offset: usize,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Applied {
    pub promoted: usize,
    pub retired: usize,
    pub updated: usize,
}

/// What a poll cycle needs to know before reconciling.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessedState {
    pub processed_ids: BTreeSet<String>,
    pub last_captured_at: Option<Timestamp>,
}

/// Single-writer, many-reader store. All access goes through one
/// connection; every mutation batch is one transaction, so readers observe
/// either the state before or after a batch.
pub struct Store {
    conn: Mutex<Connection>,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store").finish_non_exhaustive()
    }
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS outages (
    internal_id   INTEGER PRIMARY KEY AUTOINCREMENT,
    source_id     TEXT NOT NULL,
    address       TEXT NOT NULL,
    zip           TEXT,
    borough       TEXT,
    cause         TEXT,
    reported_at   TEXT NOT NULL,
    first_seen_at TEXT NOT NULL,
    ended_at      TEXT,
    stage         TEXT NOT NULL CHECK (stage IN ('processed', 'historical'))
);
CREATE UNIQUE INDEX IF NOT EXISTS outages_live_source
    ON outages (source_id) WHERE stage = 'processed';
CREATE INDEX IF NOT EXISTS outages_stage_order
    ON outages (stage, reported_at, internal_id);
CREATE TABLE IF NOT EXISTS cycles (
    captured_at TEXT PRIMARY KEY,
    crawled     INTEGER NOT NULL,
    promoted    INTEGER NOT NULL,
    retired     INTEGER NOT NULL
);
CREATE TABLE IF NOT EXISTS meta (
    key   TEXT PRIMARY KEY,
    value TEXT NOT NULL
);
";

const SELECT_COLUMNS: &str = "internal_id, source_id, address, zip, borough, cause, \
                              reported_at, first_seen_at, ended_at, stage";

impl Store {
    pub fn open(path: &Path) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        Self::init(Connection::open(path)?)
    }

    pub fn in_memory() -> Result<Self> {
        Self::init(Connection::open_in_memory()?)
    }

    fn init(conn: Connection) -> Result<Self> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
        })
    }

    fn conn(&self) -> MutexGuard<'_, Connection> {
        // a panic while holding the lock cannot leave a half-applied
        // transaction behind, so a poisoned lock is still usable
        self.conn.lock().unwrap_or_else(|p| p.into_inner())
    }

    pub fn processed_state(&self) -> Result<ProcessedState> {
        let conn = self.conn();
        Ok(ProcessedState {
            processed_ids: processed_ids(&conn)?,
            last_captured_at: last_captured_at(&conn)?,
        })
    }

    pub fn processed_ids(&self) -> Result<BTreeSet<String>> {
        processed_ids(&self.conn())
    }

    /// Applies a reconcile plan in one transaction.
    ///
    /// Fails with [`Error::Conflict`] when the processed set no longer matches
    /// the plan's basis, and with a validation error when the plan is not
    /// newer than the last applied snapshot. Every promoted id needs an
    /// entry in `enrichments`.
    pub fn apply_plan(
        &self,
        plan: &ReconcilePlan,
        enrichments: &BTreeMap<String, Enrichment>,
    ) -> Result<Applied> {
        let mut conn = self.conn();
        let tx = conn.transaction_with_behavior(TransactionBehavior::Immediate)?;

        if processed_ids(&tx)? != plan.basis {
            return Err(Error::Conflict(
                "processed table changed since the plan was computed".into(),
            ));
        }
        if let Some(last) = last_captured_at(&tx)? {
            if plan.captured_at <= last {
                return Err(Error::Validation(format!(
                    "plan for {} is not newer than last applied snapshot {}",
                    time::format(&plan.captured_at),
                    time::format(&last)
                )));
            }
        }
        let captured = time::format(&plan.captured_at);
        let mut applied = Applied::default();

        {
            let mut insert = tx.prepare(
                "INSERT INTO outages (source_id, address, zip, borough, cause, reported_at, first_seen_at, stage)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, 'processed')",
            )?;
            for id in &plan.to_promote_processed {
                let report = plan.to_insert_crawled.get(id).ok_or_else(|| {
                    Error::Validation(format!("promoted id {id} is not in the crawled set"))
                })?;
                let enrichment = enrichments
                    .get(id)
                    .ok_or_else(|| Error::Validation(format!("no enrichment for {id}")))?;
                insert.execute(params![
                    id,
                    report.address,
                    enrichment.zip,
                    enrichment.borough.map(Borough::name),
                    report.cause,
                    time::format(&report.reported_at),
                    captured,
                ])?;
                applied.promoted += 1;
            }

            let mut retire = tx.prepare(
                "UPDATE outages SET stage = 'historical', ended_at = ?2
                 WHERE source_id = ?1 AND stage = 'processed'",
            )?;
            for id in &plan.to_retire_historical {
                applied.retired += retire.execute(params![id, captured])?;
            }

            // address and cause are mutable metadata keyed by source_id
            let mut refresh = tx.prepare(
                "UPDATE outages SET address = ?2, cause = ?3
                 WHERE source_id = ?1 AND stage = 'processed'
                   AND (address IS NOT ?2 OR cause IS NOT ?3)",
            )?;
            for (id, report) in &plan.to_insert_crawled {
                if plan.basis.contains(id) {
                    applied.updated += refresh.execute(params![id, report.address, report.cause])?;
                }
            }
        }

        tx.execute(
            "INSERT INTO cycles (captured_at, crawled, promoted, retired) VALUES (?1, ?2, ?3, ?4)",
            params![
                captured,
                plan.to_insert_crawled.len() as i64,
                applied.promoted as i64,
                applied.retired as i64
            ],
        )?;
        tx.execute(
            "INSERT INTO meta (key, value) VALUES ('last_captured_at', ?1)
             ON CONFLICT (key) DO UPDATE SET value = excluded.value",
            params![captured],
        )?;
        tx.commit()?;
        Ok(applied)
    }

    pub fn query(&self, stage: LifecycleStage, filter: &QueryFilter, page: Page) -> Result<Vec<StoredOutage>> {
        if stage == LifecycleStage::Crawled {
            return Err(Error::Validation("the crawled table is not queryable".into()));
        }
        if let (Some(from), Some(to)) = (filter.from, filter.to) {
            if from > to {
                return Err(Error::Validation(format!(
                    "invalid range: from {} is after to {}",
                    time::format(&from),
                    time::format(&to)
                )));
            }
        }
        let from = filter.from.map(|t| time::format(&t));
        let to = filter.to.map(|t| time::format(&t));
        let borough = filter.borough.map(Borough::name);
        let limit = page.limit.map_or(-1, |l| l as i64);

        let conn = self.conn();
        let mut stmt = conn.prepare(&format!(
            "SELECT {SELECT_COLUMNS} FROM outages
             WHERE stage = ?1
               AND (?2 IS NULL OR reported_at >= ?2)
               AND (?3 IS NULL OR reported_at < ?3)
               AND (?4 IS NULL OR zip = ?4)
               AND (?5 IS NULL OR borough = ?5)
             ORDER BY reported_at, internal_id
             LIMIT ?6 OFFSET ?7"
        ))?;
        let rows = stmt.query_map(
            params![stage.as_str(), from, to, filter.zip, borough, limit, page.offset as i64],
            read_row,
        )?;
        rows.map(|r| r?).collect()
    }

    pub fn all(&self, stage: LifecycleStage) -> Result<Vec<StoredOutage>> {
        self.query(stage, &QueryFilter::default(), Page::default())
    }

    /// Processed followed by historical outages.
    pub fn history(&self) -> Result<Vec<StoredOutage>> {
        let mut out = self.all(LifecycleStage::Processed)?;
        out.extend(self.all(LifecycleStage::Historical)?);
        Ok(out)
    }

    pub fn count(&self, stage: LifecycleStage) -> Result<usize> {
        let n: i64 = self.conn().query_row(
            "SELECT COUNT(*) FROM outages WHERE stage = ?1",
            params![stage.as_str()],
            |r| r.get(0),
        )?;
        Ok(n as usize)
    }

    pub fn cycle_count(&self) -> Result<usize> {
        let n: i64 = self
            .conn()
            .query_row("SELECT COUNT(*) FROM cycles", [], |r| r.get(0))?;
        Ok(n as usize)
    }

    pub fn last_captured_at(&self) -> Result<Option<Timestamp>> {
        last_captured_at(&self.conn())
    }

    pub fn export_csv(&self, stage: LifecycleStage) -> Result<Vec<u8>> {
        write_csv(&self.all(stage)?)
    }

    /// Inserts previously exported rows, keeping their internal ids.
    pub fn import(&self, rows: &[StoredOutage]) -> Result<()> {
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        {
            let mut stmt = tx.prepare(&format!(
                "INSERT INTO outages ({SELECT_COLUMNS}) VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10)"
            ))?;
            for row in rows {
                row.validate()?;
                stmt.execute(params![
                    row.internal_id,
                    row.source_id,
                    row.address,
                    row.zip,
                    row.borough.map(Borough::name),
                    row.cause,
                    time::format(&row.reported_at),
                    time::format(&row.first_seen_at),
                    row.ended_at.as_ref().map(time::format),
                    row.stage.as_str(),
                ])
                .map_err(|e| match e {
                    rusqlite::Error::SqliteFailure(f, _)
                        if f.code == rusqlite::ErrorCode::ConstraintViolation =>
                    {
                        Error::Conflict(format!("outage {} clashes with an existing row", row.internal_id))
                    }
                    e => e.into(),
                })?;
            }
        }
        tx.commit()?;
        Ok(())
    }
}

fn processed_ids(conn: &Connection) -> Result<BTreeSet<String>> {
    let mut stmt = conn.prepare_cached("SELECT source_id FROM outages WHERE stage = 'processed'")?;
    let ids = stmt.query_map([], |r| r.get::<_, String>(0))?;
    Ok(ids.collect::<rusqlite::Result<_>>()?)
}

fn last_captured_at(conn: &Connection) -> Result<Option<Timestamp>> {
    let raw: Option<String> = conn
        .query_row("SELECT value FROM meta WHERE key = 'last_captured_at'", [], |r| r.get(0))
        .optional()?;
    raw.map(|s| time::parse(&s)).transpose()
}

fn read_row(row: &Row<'_>) -> rusqlite::Result<Result<StoredOutage>> {
    let borough: Option<String> = row.get(4)?;
    let reported: String = row.get(6)?;
    let first_seen: String = row.get(7)?;
    let ended: Option<String> = row.get(8)?;
    let stage: String = row.get(9)?;
    let internal_id: i64 = row.get(0)?;
    let source_id: String = row.get(1)?;
    let address: String = row.get(2)?;
    let zip: Option<String> = row.get(3)?;
    let cause: Option<String> = row.get(5)?;
    Ok((|| {
        Ok(StoredOutage {
            internal_id,
            source_id,
            address,
            zip,
            borough: borough.map(|b| b.parse()).transpose()?,
            cause,
            reported_at: time::parse(&reported)?,
            first_seen_at: time::parse(&first_seen)?,
            ended_at: ended.map(|e| time::parse(&e)).transpose()?,
            stage: stage.parse()?,
        })
    })())
}

pub fn write_csv(rows: &[StoredOutage]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let write_err = |e: csv::Error| Error::Validation(format!("csv write failed: {e}"));
    w.write_record(CSV_HEADER).map_err(write_err)?;
    for r in rows {
        w.write_record([
            r.internal_id.to_string(),
            r.source_id.clone(),
            r.address.clone(),
            r.zip.clone().unwrap_or_default(),
            r.borough.map(|b| b.name().to_string()).unwrap_or_default(),
            r.cause.clone().unwrap_or_default(),
            time::format(&r.reported_at),
            time::format(&r.first_seen_at),
            r.ended_at.as_ref().map(time::format).unwrap_or_default(),
            r.stage.as_str().to_string(),
        ])
        .map_err(write_err)?;
    }
    w.into_inner().map_err(|e| Error::Validation(e.to_string()))
}

/// Parses an export produced by [`Store::export_csv`].
pub fn parse_csv(raw: &[u8]) -> Result<Vec<StoredOutage>> {
    let mut rdr = csv::Reader::from_reader(raw);
    let headers = rdr.headers().map_err(|e| Error::parse("csv header", e))?;
    if headers.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::parse("csv header", "unexpected columns"));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let label = format!("row {}", i + 2);
        let rec = rec.map_err(|e| Error::parse(label.clone(), e))?;
        let opt = |c: usize| Some(rec[c].to_string()).filter(|s| !s.is_empty());
        let wrap = |e: Error| Error::parse(label.clone(), e);
        let row = StoredOutage {
            internal_id: rec[0]
                .parse()
                .map_err(|e| Error::parse(label.clone(), format!("internal_id: {e}")))?,
            source_id: rec[1].to_string(),
            address: rec[2].to_string(),
            zip: opt(3),
            borough: opt(4).map(|b| b.parse()).transpose().map_err(wrap)?,
            cause: opt(5),
            reported_at: time::parse(&rec[6]).map_err(wrap)?,
            first_seen_at: time::parse(&rec[7]).map_err(wrap)?,
            ended_at: opt(8).map(|t| time::parse(&t)).transpose().map_err(wrap)?,
            stage: rec[9].parse().map_err(wrap)?,
        };
        row.validate().map_err(wrap)?;
        out.push(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{reconcile, OutageReport, Snapshot};

    fn ts(s: &str) -> Timestamp {
        time::parse(s).unwrap()
    }

    fn report(id: &str, reported: &str, zip_hint: &str) -> OutageReport {
        OutageReport {
            source_id: id.into(),
            address: format!("{zip_hint} {id} St"),
            reported_at: ts(reported),
            cause: None,
            customers_affected: None,
        }
    }

    fn enrich_all(plan: &ReconcilePlan) -> BTreeMap<String, Enrichment> {
        plan.to_promote_processed
            .iter()
            .map(|id| {
                let zip = plan.to_insert_crawled[id].address[..5].to_string();
                (
                    id.clone(),
                    Enrichment {
                        zip: Some(zip),
                        borough: Some(Borough::Manhattan),
                    },
                )
            })
            .collect()
    }

    fn cycle(store: &Store, snapshot: &Snapshot) -> Applied {
        let plan = reconcile(snapshot, &store.processed_ids().unwrap());
        store.apply_plan(&plan, &enrich_all(&plan)).unwrap()
    }

    #[test]
    fn empty_plan_is_noop() {
        let store = Store::in_memory().unwrap();
        let snap = Snapshot {
            captured_at: ts("2021-01-01T00:00:00Z"),
            reports: vec![],
        };
        assert_eq!(cycle(&store, &snap), Applied::default());
        assert!(store.all(LifecycleStage::Processed).unwrap().is_empty());
    }

    #[test]
    fn promote_then_retire() {
        let store = Store::in_memory().unwrap();
        let a = report("A", "2021-01-01T00:00:00Z", "10001");
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T00:30:00Z"),
                reports: vec![a],
            },
        );
        let applied = cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T01:00:00Z"),
                reports: vec![],
            },
        );
        assert_eq!(applied.retired, 1);
        let hist = store.all(LifecycleStage::Historical).unwrap();
        assert_eq!(hist.len(), 1);
        assert_eq!(hist[0].stage, LifecycleStage::Historical);
        assert_eq!(hist[0].ended_at, Some(ts("2021-01-01T01:00:00Z")));
        assert_eq!(hist[0].first_seen_at, ts("2021-01-01T00:30:00Z"));
        assert!(store.processed_ids().unwrap().is_empty());
    }

    #[test]
    fn stale_plan_conflicts_and_exactly_one_wins() {
        let store = std::sync::Arc::new(Store::in_memory().unwrap());
        let basis = store.processed_ids().unwrap();
        let plans: Vec<ReconcilePlan> = ["A", "B"]
            .iter()
            .enumerate()
            .map(|(i, id)| {
                reconcile(
                    &Snapshot {
                        captured_at: ts(&format!("2021-01-01T0{}:00:00Z", i + 1)),
                        reports: vec![report(id, "2021-01-01T00:00:00Z", "10001")],
                    },
                    &basis,
                )
            })
            .collect();
        let handles: Vec<_> = plans
            .into_iter()
            .map(|plan| {
                let store = store.clone();
                std::thread::spawn(move || store.apply_plan(&plan, &enrich_all(&plan)))
            })
            .collect();
        let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
        let ok = results.iter().filter(|r| r.is_ok()).count();
        assert_eq!(ok, 1, "{results:?}");
        assert!(results
            .iter()
            .any(|r| matches!(r, Err(Error::Conflict(_)) | Err(Error::Validation(_)))));
    }

    #[test]
    fn out_of_order_plan_rejected() {
        let store = Store::in_memory().unwrap();
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T01:00:00Z"),
                reports: vec![],
            },
        );
        let plan = reconcile(
            &Snapshot {
                captured_at: ts("2021-01-01T01:00:00Z"),
                reports: vec![],
            },
            &BTreeSet::new(),
        );
        assert!(matches!(
            store.apply_plan(&plan, &BTreeMap::new()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn metadata_refresh_keeps_internal_id() {
        let store = Store::in_memory().unwrap();
        let mut a = report("A", "2021-01-01T00:00:00Z", "10001");
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T00:30:00Z"),
                reports: vec![a.clone()],
            },
        );
        let before = store.all(LifecycleStage::Processed).unwrap();
        a.address = "10001 A St, rear".into();
        a.cause = Some("weather".into());
        let applied = cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T01:00:00Z"),
                reports: vec![a],
            },
        );
        assert_eq!(applied.updated, 1);
        let after = store.all(LifecycleStage::Processed).unwrap();
        assert_eq!(after[0].internal_id, before[0].internal_id);
        assert_eq!(after[0].address, "10001 A St, rear");
        assert_eq!(after[0].zip.as_deref(), Some("10001"));
    }

    fn seeded_store() -> Store {
        let store = Store::in_memory().unwrap();
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T12:00:00Z"),
                reports: vec![
                    report("a", "2021-01-01T09:00:00Z", "10001"),
                    report("b", "2021-01-01T08:00:00Z", "10002"),
                    report("c", "2021-01-01T10:00:00Z", "10001"),
                ],
            },
        );
        store
    }

    #[test]
    fn query_filters_and_pages() {
        let empty = Store::in_memory().unwrap();
        assert!(empty.all(LifecycleStage::Historical).unwrap().is_empty());

        let store = seeded_store();
        let all = store.all(LifecycleStage::Processed).unwrap();
        let ids: Vec<&str> = all.iter().map(|o| o.source_id.as_str()).collect();
        assert_eq!(ids, ["b", "a", "c"]);

        let f = QueryFilter {
            zip: Some("10001".into()),
            ..Default::default()
        };
        let rows = store.query(LifecycleStage::Processed, &f, Page::default()).unwrap();
        assert!(rows.iter().all(|r| r.zip.as_deref() == Some("10001")));
        assert_eq!(rows.len(), 2);

        let p1 = store
            .query(LifecycleStage::Processed, &QueryFilter::default(), Page { offset: 0, limit: Some(2) })
            .unwrap();
        let p2 = store
            .query(LifecycleStage::Processed, &QueryFilter::default(), Page { offset: 2, limit: Some(2) })
            .unwrap();
        assert_eq!(p1.len(), 2);
        assert_eq!(p2.len(), 1);
        assert!(p1.iter().all(|r| !p2.contains(r)));

        let bad = QueryFilter {
            from: Some(ts("2021-01-02T00:00:00Z")),
            to: Some(ts("2021-01-01T00:00:00Z")),
            ..Default::default()
        };
        assert!(store.query(LifecycleStage::Processed, &bad, Page::default()).is_err());
        let empty_range = QueryFilter {
            from: Some(ts("2021-01-01T09:00:00Z")),
            to: Some(ts("2021-01-01T09:00:00Z")),
            ..Default::default()
        };
        assert!(store
            .query(LifecycleStage::Processed, &empty_range, Page::default())
            .unwrap()
            .is_empty());
        assert!(store.all(LifecycleStage::Crawled).is_err());
    }

    #[test]
    fn export_header_only_and_quoting() {
        let store = Store::in_memory().unwrap();
        let csv = String::from_utf8(store.export_csv(LifecycleStage::Historical).unwrap()).unwrap();
        assert_eq!(csv, format!("{}\n", CSV_HEADER.join(",")));

        let store = Store::in_memory().unwrap();
        let mut r = report("a", "2021-01-01T09:00:00Z", "10001");
        r.address = "1 Main St, Apt 4".into();
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T12:00:00Z"),
                reports: vec![r],
            },
        );
        let csv = String::from_utf8(store.export_csv(LifecycleStage::Processed).unwrap()).unwrap();
        assert!(csv.contains("\"1 Main St, Apt 4\""), "{csv}");
    }

    #[test]
    fn export_import_export_identical() {
        let store = seeded_store();
        cycle(
            &store,
            &Snapshot {
                captured_at: ts("2021-01-01T13:00:00Z"),
                reports: vec![report("a", "2021-01-01T09:00:00Z", "10001")],
            },
        );
        let copy = Store::in_memory().unwrap();
        for stage in [LifecycleStage::Processed, LifecycleStage::Historical] {
            let first = store.export_csv(stage).unwrap();
            copy.import(&parse_csv(&first).unwrap()).unwrap();
            assert_eq!(copy.export_csv(stage).unwrap(), first);
        }
    }

    #[test]
    fn import_rejects_duplicate_ids() {
        let store = seeded_store();
        let rows = store.all(LifecycleStage::Processed).unwrap();
        assert!(matches!(store.import(&rows), Err(Error::Conflict(_))));
    }

    #[test]
    fn persists_across_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db/gridpulse.db");
        {
            let store = Store::open(&path).unwrap();
            cycle(
                &store,
                &Snapshot {
                    captured_at: ts("2021-01-01T12:00:00Z"),
                    reports: vec![report("a", "2021-01-01T09:00:00Z", "10001")],
                },
            );
        }
        let store = Store::open(&path).unwrap();
        assert_eq!(store.count(LifecycleStage::Processed).unwrap(), 1);
        assert_eq!(store.last_captured_at().unwrap(), Some(ts("2021-01-01T12:00:00Z")));
        assert_eq!(store.cycle_count().unwrap(), 1);
    }
}
