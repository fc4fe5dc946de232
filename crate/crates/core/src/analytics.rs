//! Statistics over the outage archive: time-step bucketing, binned
//! transition counts, borough rates, demographic trend lines and the cause
//! histogram.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use chrono::Duration;
use serde::{Deserialize, Serialize};

use crate::geo::{Borough, ZipTable};
use crate::time::{self, Timestamp};
use crate::{Error, Result};

pub const DEFAULT_STEP_HOURS: i64 = 2;

/// Upper limit of each outage-count bin; the last bin is unbounded.
pub const BIN_UPPER_LIMITS: [Option<u64>; BIN_COUNT] =
    [Some(1), Some(2), Some(4), Some(8), Some(16), Some(32), None];
pub const BIN_COUNT: usize = 7;

/// Label for outages reported without a cause.
pub const UNKNOWN_CAUSE: &str = "under investigation";

/// An outage as seen by the time-step bucketing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OutageEvent {
    pub zip: String,
    pub start: Timestamp,
    pub end: Option<Timestamp>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CountMode {
    /// Each outage counts once, in the step holding its start.
    Start,
    /// Each outage counts in every step its `[start, end)` interval touches.
    /// Outages still open are treated as ending at `open_until`.
    Active { open_until: Timestamp },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeStep {
    pub index: i64,
    pub zips: BTreeMap<String, u64>,
    pub total: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeStepSeries {
    pub step_seconds: i64,
    #[serde(with = "time::rfc3339")]
    pub origin: Timestamp,
    pub steps: Vec<TimeStep>,
}

impl TimeStepSeries {
    pub fn step_duration(&self) -> Duration {
        Duration::seconds(self.step_seconds)
    }

    pub fn totals(&self) -> Vec<u64> {
        self.steps.iter().map(|s| s.total).collect()
    }

    pub fn nonempty_steps(&self) -> usize {
        self.steps.iter().filter(|s| s.total > 0).count()
    }

    /// Start of the step with the given index.
    pub fn step_start(&self, index: i64) -> Timestamp {
        self.origin + Duration::seconds(self.step_seconds * index)
    }

    pub fn index_of(&self, at: Timestamp) -> i64 {
        (at - self.origin).num_seconds().div_euclid(self.step_seconds)
    }
}

/// Groups outages into half-open `[origin + iΔ, origin + (i+1)Δ)` steps.
///
/// `origin` must sit on a UTC midnight. Steps between the first and last
/// non-empty step are materialised even when empty.
pub fn bucket_by_timestep(
    events: &[OutageEvent],
    step: Duration,
    origin: Timestamp,
    mode: CountMode,
) -> Result<TimeStepSeries> {
    let step_seconds = step.num_seconds();
    if step_seconds <= 0 {
        return Err(Error::Validation("step duration must be positive".into()));
    }
    if time::midnight_of(&origin) != origin {
        return Err(Error::Validation(format!(
            "series origin {} is not a UTC midnight",
            time::format(&origin)
        )));
    }
    let index = |t: &Timestamp| (*t - origin).num_seconds().div_euclid(step_seconds);

    let mut buckets: BTreeMap<i64, BTreeMap<String, u64>> = BTreeMap::new();
    for e in events {
        if e.start < origin {
            return Err(Error::Validation(format!(
                "outage at {} precedes series origin {}",
                time::format(&e.start),
                time::format(&origin)
            )));
        }
        let first = index(&e.start);
        let last = match mode {
            CountMode::Start => first,
            CountMode::Active { open_until } => {
                let end = e.end.unwrap_or(open_until);
                if end <= e.start {
                    first
                } else {
                    // the end instant itself is excluded
                    index(&(end - Duration::seconds(1))).max(first)
                }
            }
        };
        for i in first..=last {
            *buckets.entry(i).or_default().entry(e.zip.clone()).or_insert(0) += 1;
        }
    }

    let steps = match (buckets.keys().next().copied(), buckets.keys().last().copied()) {
        (Some(lo), Some(hi)) => (lo..=hi)
            .map(|i| {
                let zips = buckets.remove(&i).unwrap_or_default();
                TimeStep {
                    index: i,
                    total: zips.values().sum(),
                    zips,
                }
            })
            .collect(),
        _ => Vec::new(),
    };
    Ok(TimeStepSeries {
        step_seconds,
        origin,
        steps,
    })
}

/// Midnight of the earliest start, or `None` without events.
pub fn default_origin(events: &[OutageEvent]) -> Option<Timestamp> {
    events.iter().map(|e| e.start).min().map(|t| time::midnight_of(&t))
}

pub fn bin_index(total: u64) -> usize {
    match total {
        0..=1 => 0,
        2 => 1,
        3..=4 => 2,
        5..=8 => 3,
        9..=16 => 4,
        17..=32 => 5,
        _ => 6,
    }
}

/// Raw counts of bin-to-bin moves of the per-step total.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BinnedTransitionCounts {
    pub counts: [[u64; BIN_COUNT]; BIN_COUNT],
}

impl BinnedTransitionCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Empirical transition probabilities; rows without observations stay 0.
    pub fn row_normalized(&self) -> [[f64; BIN_COUNT]; BIN_COUNT] {
        let mut out = [[0.0; BIN_COUNT]; BIN_COUNT];
        for (row, counts) in out.iter_mut().zip(&self.counts) {
            let sum: u64 = counts.iter().sum();
            if sum > 0 {
                for (p, c) in row.iter_mut().zip(counts) {
                    *p = *c as f64 / sum as f64;
                }
            }
        }
        out
    }

    /// 7×7 CSV under a header of the bin upper limits.
    pub fn to_csv(&self) -> String {
        let header: Vec<String> = BIN_UPPER_LIMITS
            .iter()
            .map(|l| l.map_or_else(|| "inf".to_string(), |v| v.to_string()))
            .collect();
        let mut out = header.join(",");
        out.push('\n');
        for row in &self.counts {
            let cells: Vec<String> = row.iter().map(u64::to_string).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn transition_counts(series: &TimeStepSeries) -> Result<BinnedTransitionCounts> {
    if series.steps.len() < 2 {
        return Err(Error::InsufficientData {
            what: "time steps",
            required: 2,
            actual: series.steps.len(),
        });
    }
    let mut out = BinnedTransitionCounts::default();
    for pair in series.steps.windows(2) {
        out.counts[bin_index(pair[0].total)][bin_index(pair[1].total)] += 1;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoroughRate {
    pub count: u64,
    pub population: u64,
    pub per_capita: f64,
}

/// Outage counts and rates per borough, over all five boroughs.
pub fn outages_per_capita(
    boroughs: impl IntoIterator<Item = Borough>,
    zips: &ZipTable,
) -> Result<BTreeMap<Borough, BoroughRate>> {
    let populations = zips.borough_populations();
    let mut counts: BTreeMap<Borough, u64> = BTreeMap::new();
    for b in boroughs {
        *counts.entry(b).or_insert(0) += 1;
    }
    Borough::ALL
        .into_iter()
        .map(|b| {
            let population = populations.get(&b).copied().unwrap_or(0);
            if population == 0 {
                return Err(Error::Validation(format!("{b} has zero population in the zip table")));
            }
            let count = counts.get(&b).copied().unwrap_or(0);
            Ok((
                b,
                BoroughRate {
                    count,
                    population,
                    per_capita: count as f64 / population as f64,
                },
            ))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrendFit {
    pub slope: f64,
    pub intercept: f64,
    /// Pearson correlation; 0 when `y` has no spread.
    pub r: f64,
    pub n: usize,
}

/// Ordinary least-squares line through the points.
pub fn linear_trend(points: &[(f64, f64)]) -> Result<TrendFit> {
    let n = points.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            what: "trend points",
            required: 2,
            actual: n,
        });
    }
    let nf = n as f64;
    let mean_x = points.iter().map(|p| p.0).sum::<f64>() / nf;
    let mean_y = points.iter().map(|p| p.1).sum::<f64>() / nf;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for &(x, y) in points {
        let (dx, dy) = (x - mean_x, y - mean_y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0.0 {
        return Err(Error::Validation("all x values are equal".into()));
    }
    let slope = sxy / sxx;
    let r = if syy == 0.0 {
        0.0
    } else {
        (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(TrendFit {
        slope,
        intercept: mean_y - slope * mean_x,
        r,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CauseCount {
    pub cause: String,
    pub count: u64,
}

/// Outages per cause label, most frequent first, ties alphabetical.
pub fn cause_histogram<'a>(causes: impl IntoIterator<Item = Option<&'a str>>) -> Vec<CauseCount> {
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for cause in causes {
        let label = cause
            .map(str::trim)
            .filter(|c| !c.is_empty())
            .unwrap_or(UNKNOWN_CAUSE);
        *counts.entry(label.to_string()).or_insert(0) += 1;
    }
    let mut out: Vec<CauseCount> = counts
        .into_iter()
        .map(|(cause, count)| CauseCount { cause, count })
        .collect();
    // BTreeMap order is alphabetical; a stable sort keeps it within ties
    out.sort_by(|a, b| b.count.cmp(&a.count));
    out
}

/// Per-zip demographics for the trend lines:
/// `zip,median_family_income,pct_nonwhite`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemographicRow {
    pub zip: String,
    pub median_family_income: Option<f64>,
    pub pct_nonwhite: Option<f64>,
}

pub fn read_demographics_csv<R: Read>(reader: R) -> Result<Vec<DemographicRow>> {
    let mut rdr = csv::Reader::from_reader(reader);
    let mut rows = Vec::new();
    for (i, rec) in rdr.deserialize::<DemographicRow>().enumerate() {
        let row = rec.map_err(|e| Error::parse(format!("demographics row {}", i + 2), e))?;
        if let Some(p) = row.pct_nonwhite {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Validation(format!("zip {}: pct_nonwhite {p} out of [0,1]", row.zip)));
            }
        }
        rows.push(row);
    }
    Ok(rows)
}

pub fn load_demographics_csv(path: &Path) -> Result<Vec<DemographicRow>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_demographics_csv(file)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrendAxis {
    Income,
    Nonwhite,
}

impl std::str::FromStr for TrendAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "income" => Ok(TrendAxis::Income),
            "nonwhite" => Ok(TrendAxis::Nonwhite),
            _ => Err(Error::Validation(format!("unknown trend axis {s:?}"))),
        }
    }
}

/// `(demographic value, outage count)` for every zip with a value on the
/// chosen axis; zips without outages contribute a zero count.
pub fn trend_points(
    demographics: &[DemographicRow],
    outages_per_zip: &BTreeMap<String, u64>,
    axis: TrendAxis,
) -> Vec<(f64, f64)> {
    demographics
        .iter()
        .filter_map(|d| {
            let x = match axis {
                TrendAxis::Income => d.median_family_income,
                TrendAxis::Nonwhite => d.pct_nonwhite,
            }?;
            Some((x, outages_per_zip.get(&d.zip).copied().unwrap_or(0) as f64))
        })
        .collect()
}
