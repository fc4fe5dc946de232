//! Derived artifacts: rankings of live outages, analytics payloads and the
//! next-step prediction. The service rebuilds them after every poll cycle
//! and swaps the whole set at once; the CLI writes the same payloads to
//! disk.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::analytics::{
    self, bucket_by_timestep, cause_histogram, default_origin, linear_trend, outages_per_capita, trend_points,
    CauseCount, CountMode, DemographicRow, OutageEvent, TimeStepSeries, TrendAxis, BIN_COUNT,
};
use crate::config::ApiConfig;
use crate::geo::{Borough, Geocoder, HttpGeocoder, LatLon, OfflineGeocoder, ZipTable};
use crate::influence::{
    self, build_outage_vectors, kmeans_cluster_with, predict_next, top_k_edges, ClusterAssignment, InfluenceEdge,
    KMeansConfig, SamplingConfig, TransitionMatrix,
};
use crate::ingest::LifecycleStage;
use crate::store::{Store, StoredOutage};
use crate::time::{self, Timestamp};
use crate::vulnerability::{color_band, load_feature_csv, rank_current_outages, Color, LiveOutage, VulnerabilityIndex};
use crate::{Error, Result};

/// Static reference data read from the data directory.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub zips: Arc<ZipTable>,
    pub index: Option<VulnerabilityIndex>,
    pub demographics: Option<Vec<DemographicRow>>,
}

impl Inputs {
    /// `zips.csv` is required. The index comes from `rankings.json` when
    /// present, otherwise from `features.csv`; demographics are optional.
    pub fn load(cfg: &ApiConfig) -> Result<Self> {
        let zips = Arc::new(ZipTable::load(&cfg.zips_path())?);
        let index = if cfg.rankings_path().exists() {
            Some(read_json(&cfg.rankings_path())?)
        } else if cfg.features_path().exists() {
            Some(VulnerabilityIndex::build(&load_feature_csv(&cfg.features_path())?)?)
        } else {
            None
        };
        let demographics = if cfg.demographics_path().exists() {
            Some(analytics::load_demographics_csv(&cfg.demographics_path())?)
        } else {
            None
        };
        Ok(Self {
            zips,
            index,
            demographics,
        })
    }
}

/// Fitted influence artifacts, if any.
#[derive(Debug, Clone, Default)]
pub struct Models {
    pub clusters: Option<ClusterAssignment>,
    pub model: Option<TransitionMatrix>,
}

impl Models {
    pub fn load(cfg: &ApiConfig) -> Result<Self> {
        let clusters: Option<ClusterAssignment> = cfg
            .clusters_path()
            .exists()
            .then(|| read_json(&cfg.clusters_path()))
            .transpose()?;
        if let Some(c) = &clusters {
            c.validate()?;
        }
        let model = cfg
            .model_path()
            .exists()
            .then(|| read_json(&cfg.model_path()))
            .transpose()?;
        Ok(Self { clusters, model })
    }
}

/// The HTTP geocoder when configured, else `geocoder.csv`, else a lookup
/// that knows no addresses.
pub fn open_geocoder(cfg: &ApiConfig, zips: Arc<ZipTable>) -> Result<Box<dyn Geocoder>> {
    if let Some(url) = &cfg.geocoder_url {
        return Ok(Box::new(HttpGeocoder::new(url.clone(), zips)));
    }
    let path = cfg.geocoder_path();
    if path.exists() {
        Ok(Box::new(OfflineGeocoder::load(&path, zips)?))
    } else {
        warn!(path = %path.display(), "no geocoder configured; new outages will have no zip");
        Ok(Box::new(OfflineGeocoder::new(Vec::new(), zips)?))
    }
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_slice(&raw).map_err(|e| Error::parse(path.display().to_string(), e))
}

/// Pretty JSON with a trailing newline; parent directories are created.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("artifact serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurrentOutage {
    pub internal_id: i64,
    pub source_id: String,
    pub address: String,
    pub zip: String,
    pub borough: Option<Borough>,
    pub cause: Option<String>,
    #[serde(with = "time::rfc3339")]
    pub reported_at: Timestamp,
    pub location: LatLon,
    pub zcr: u32,
    pub osr: u32,
    pub color: Color,
}

/// Live outages whose zip is ranked, ordered by OSR. Outages without a
/// ranked zip are left out so that OSR stays a bijection onto 1..N.
pub fn current_outages(
    processed: &[StoredOutage],
    index: &VulnerabilityIndex,
    zips: &ZipTable,
) -> Result<Vec<CurrentOutage>> {
    let zcr = index.zcr_map();
    let rankable: Vec<&StoredOutage> = processed
        .iter()
        .filter(|o| o.zip.as_deref().is_some_and(|z| zcr.contains_key(z) && zips.get(z).is_some()))
        .collect();
    let skipped = processed.len() - rankable.len();
    if skipped > 0 {
        warn!(skipped, "live outages without a ranked zip left off the current list");
    }
    let live: Vec<LiveOutage> = rankable
        .iter()
        .map(|o| LiveOutage {
            id: o.internal_id,
            zip: o.zip.clone().expect("filtered"),
            reported_at: o.reported_at,
        })
        .collect();
    let osr = rank_current_outages(&live, &zcr)?;
    let mut out = rankable
        .into_iter()
        .map(|o| {
            let zip = o.zip.clone().expect("filtered");
            let zip_rank = zcr[&zip];
            Ok(CurrentOutage {
                internal_id: o.internal_id,
                source_id: o.source_id.clone(),
                address: o.address.clone(),
                location: zips.get(&zip).expect("filtered").centroid(),
                borough: o.borough,
                cause: o.cause.clone(),
                reported_at: o.reported_at,
                zcr: zip_rank,
                osr: osr[&o.internal_id],
                color: color_band(zip_rank)?,
                zip,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|o| o.osr);
    Ok(out)
}

/// Outages with a known zip as time-step events, by report time.
pub fn outage_events(outages: &[StoredOutage]) -> Vec<OutageEvent> {
    outages
        .iter()
        .filter_map(|o| {
            Some(OutageEvent {
                zip: o.zip.clone()?,
                start: o.reported_at,
                end: o.ended_at,
            })
        })
        .collect()
}

/// Start-count series over all events, from the midnight before the
/// earliest one.
pub fn history_series(events: &[OutageEvent], step: chrono::Duration) -> Result<TimeStepSeries> {
    let origin = default_origin(events).unwrap_or_else(|| time::midnight_of(&chrono::DateTime::UNIX_EPOCH));
    bucket_by_timestep(events, step, origin, CountMode::Start)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerCapitaRow {
    pub borough: Borough,
    pub count: u64,
    pub population: u64,
    pub per_capita: f64,
}

pub fn per_capita_payload(history: &[StoredOutage], zips: &ZipTable) -> Result<Vec<PerCapitaRow>> {
    let rates = outages_per_capita(history.iter().filter_map(|o| o.borough), zips)?;
    Ok(rates
        .into_iter()
        .map(|(borough, r)| PerCapitaRow {
            borough,
            count: r.count,
            population: r.population,
            per_capita: r.per_capita,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrendPayload {
    pub axis: TrendAxis,
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
    pub n: usize,
    /// `[demographic value, outage count]` per zip.
    pub points: Vec<[f64; 2]>,
}

pub fn trend_payload(history: &[StoredOutage], demographics: &[DemographicRow], axis: TrendAxis) -> Result<TrendPayload> {
    if history.is_empty() {
        return Err(Error::InsufficientData {
            what: "outages in history",
            required: 1,
            actual: 0,
        });
    }
    let mut per_zip: BTreeMap<String, u64> = BTreeMap::new();
    for zip in history.iter().filter_map(|o| o.zip.as_ref()) {
        *per_zip.entry(zip.clone()).or_insert(0) += 1;
    }
    let points = trend_points(demographics, &per_zip, axis);
    let fit = linear_trend(&points)?;
    Ok(TrendPayload {
        axis,
        slope: fit.slope,
        intercept: fit.intercept,
        r: fit.r,
        n: fit.n,
        points: points.into_iter().map(|(x, y)| [x, y]).collect(),
    })
}

pub fn causes_payload(history: &[StoredOutage]) -> Vec<CauseCount> {
    cause_histogram(history.iter().map(|o| o.cause.as_deref()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionBinsPayload {
    pub step_hours: f64,
    pub steps: usize,
    /// Upper limit of each bin; `"inf"` for the open last bin.
    pub bins: Vec<String>,
    /// `counts[i][j]`: steps in bin `i` followed by a step in bin `j`.
    pub counts: [[u64; BIN_COUNT]; BIN_COUNT],
    pub probabilities: [[f64; BIN_COUNT]; BIN_COUNT],
}

pub fn transition_bins_payload(series: &TimeStepSeries) -> Result<TransitionBinsPayload> {
    let counts = analytics::transition_counts(series)?;
    Ok(TransitionBinsPayload {
        step_hours: series.step_seconds as f64 / 3600.0,
        steps: series.steps.len(),
        bins: analytics::BIN_UPPER_LIMITS
            .iter()
            .map(|l| l.map_or_else(|| "inf".to_string(), |v| v.to_string()))
            .collect(),
        counts: counts.counts,
        probabilities: counts.row_normalized(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSummary {
    pub cluster: usize,
    pub centroid: LatLon,
    pub zips: Vec<String>,
}

pub fn cluster_summaries(clusters: &ClusterAssignment) -> Vec<ClusterSummary> {
    let mut out: Vec<ClusterSummary> = clusters
        .centroids
        .iter()
        .enumerate()
        .map(|(cluster, centroid)| ClusterSummary {
            cluster,
            centroid: *centroid,
            zips: Vec::new(),
        })
        .collect();
    for (zip, c) in &clusters.assignment {
        out[*c].zips.push(zip.clone());
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// The latest complete time step, whose counts are `o_now`.
    pub step_index: i64,
    #[serde(with = "time::rfc3339")]
    pub step_start: Timestamp,
    #[serde(with = "time::rfc3339")]
    pub step_end: Timestamp,
    pub clusters: Vec<ClusterSummary>,
    pub o_now: Vec<u64>,
    pub o_predicted: Vec<f64>,
    pub top_edges: Vec<InfluenceEdge>,
    pub model_seed: u64,
    pub model_samples: u64,
}

/// Events in clustered zips only.
fn clustered_events(history: &[StoredOutage], clusters: &ClusterAssignment) -> Vec<OutageEvent> {
    outage_events(history)
        .into_iter()
        .filter(|e| clusters.cluster_of(&e.zip).is_some())
        .collect()
}

/// Per-cluster outage vectors of the whole history, one per time step.
pub fn training_vectors(
    history: &[StoredOutage],
    clusters: &ClusterAssignment,
    step: chrono::Duration,
) -> Result<Vec<Vec<f64>>> {
    let series = history_series(&clustered_events(history, clusters), step)?;
    Ok(build_outage_vectors(&series, clusters)?
        .iter()
        .map(|v| v.to_f64())
        .collect())
}

/// `T·o_now` for the latest step that has fully elapsed at `now`.
pub fn prediction_payload(
    history: &[StoredOutage],
    clusters: &ClusterAssignment,
    model: &TransitionMatrix,
    step: chrono::Duration,
    now: Timestamp,
) -> Result<Prediction> {
    if model.k() != clusters.k {
        return Err(Error::Validation(format!(
            "model has {} clusters but the cluster assignment has {}",
            model.k(),
            clusters.k
        )));
    }
    let events = clustered_events(history, clusters);
    let origin = default_origin(&events).unwrap_or_else(|| time::midnight_of(&now));
    let step_seconds = step.num_seconds();
    let latest = (now - origin).num_seconds().div_euclid(step_seconds) - 1;
    let step_start = origin + chrono::Duration::seconds(step_seconds * latest);
    let step_end = step_start + step;

    let mut o_now = vec![0u64; clusters.k];
    for e in events.iter().filter(|e| e.start >= step_start && e.start < step_end) {
        o_now[clusters.cluster_of(&e.zip).expect("filtered")] += 1;
    }
    let o_f64: Vec<f64> = o_now.iter().map(|c| *c as f64).collect();
    Ok(Prediction {
        step_index: latest,
        step_start,
        step_end,
        clusters: cluster_summaries(clusters),
        o_predicted: predict_next(model, &o_f64)?,
        o_now,
        top_edges: top_k_edges(model, influence::DEFAULT_EDGES),
        model_seed: model.seed,
        model_samples: model.samples,
    })
}

pub fn cluster_zips(zips: &ZipTable, cfg: &ApiConfig, seed: u64) -> Result<ClusterAssignment> {
    let kc = KMeansConfig {
        restarts: cfg.kmeans_restarts,
        ..KMeansConfig::new(cfg.clusters, seed)
    };
    kmeans_cluster_with(&zips.centroids(), &kc)
}

pub fn fit_model(
    history: &[StoredOutage],
    clusters: &ClusterAssignment,
    cfg: &ApiConfig,
    seed: u64,
) -> Result<TransitionMatrix> {
    let vectors = training_vectors(history, clusters, cfg.step())?;
    let sc = SamplingConfig::new(cfg.samples, seed).with_range(cfg.entry_min, cfg.entry_max);
    Ok(influence::fit_transition_matrix(&vectors, &sc)?.matrix)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// A prerequisite artifact is missing (e.g. no vulnerability index).
    Unavailable,
    InsufficientData,
    NotFitted,
    Invalid,
    Internal,
}

/// Machine-readable reason a payload could not be produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Failure {
    pub error: FailureKind,
    pub reason: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub required: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub actual: Option<usize>,
}

impl Failure {
    pub fn new(error: FailureKind, reason: impl Into<String>) -> Self {
        Self {
            error,
            reason: reason.into(),
            required: None,
            actual: None,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let kind = match &e {
            Error::InsufficientData { .. } => FailureKind::InsufficientData,
            Error::NotFound(_) => FailureKind::Unavailable,
            e if e.is_io() => FailureKind::Internal,
            _ => FailureKind::Invalid,
        };
        let mut f = Failure::new(kind, e.to_string());
        if let Error::InsufficientData { required, actual, .. } = e {
            f.required = Some(required);
            f.actual = Some(actual);
        }
        f
    }
}

/// Serialized payload, or why there is none.
pub type Payload = std::result::Result<Arc<str>, Failure>;

fn payload<T: Serialize>(r: Result<T>) -> Payload {
    r.map(|v| Arc::from(serde_json::to_string(&v).expect("payload serializes")))
        .map_err(Failure::from)
}

/// One consistent set of API payloads.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub built_at: Timestamp,
    pub current: Payload,
    pub per_capita: Payload,
    pub trend_income: Payload,
    pub trend_nonwhite: Payload,
    pub causes: Payload,
    pub transition_bins: Payload,
    pub prediction: Payload,
}

impl Artifacts {
    pub fn trend(&self, axis: TrendAxis) -> &Payload {
        match axis {
            TrendAxis::Income => &self.trend_income,
            TrendAxis::Nonwhite => &self.trend_nonwhite,
        }
    }
}

pub fn build_artifacts(store: &Store, inputs: &Inputs, models: &Models, cfg: &ApiConfig, now: Timestamp) -> Artifacts {
    let loaded = store
        .all(LifecycleStage::Processed)
        .and_then(|p| Ok((p, store.history()?)));
    let (processed, history) = match loaded {
        Ok(v) => v,
        Err(e) => {
            let f = Failure::from(e);
            return Artifacts {
                built_at: now,
                current: Err(f.clone()),
                per_capita: Err(f.clone()),
                trend_income: Err(f.clone()),
                trend_nonwhite: Err(f.clone()),
                causes: Err(f.clone()),
                transition_bins: Err(f.clone()),
                prediction: Err(f),
            };
        }
    };

    let current = match &inputs.index {
        Some(index) => payload(current_outages(&processed, index, &inputs.zips)),
        None => Err(Failure::new(
            FailureKind::Unavailable,
            "vulnerability index not computed: provide features.csv or rankings.json",
        )),
    };
    let trend = |axis| match &inputs.demographics {
        Some(d) => payload(trend_payload(&history, d, axis)),
        None => Err(Failure::new(FailureKind::Unavailable, "demographics.csv not loaded")),
    };
    let series = history_series(&outage_events(&history), cfg.step());
    let prediction = match (&models.clusters, &models.model) {
        (Some(c), Some(m)) => payload(prediction_payload(&history, c, m, cfg.step(), now)),
        _ => Err(Failure::new(FailureKind::NotFitted, "transition model not yet fitted")),
    };
    Artifacts {
        built_at: now,
        current,
        per_capita: payload(per_capita_payload(&history, &inputs.zips)),
        trend_income: trend(TrendAxis::Income),
        trend_nonwhite: trend(TrendAxis::Nonwhite),
        causes: payload(Ok(causes_payload(&history))),
        transition_bins: payload(series.and_then(|s| transition_bins_payload(&s))),
        prediction,
    }
}

/// Latest artifact set; readers clone the `Arc` and never wait on a rebuild.
#[derive(Debug)]
pub struct ArtifactCell {
    inner: RwLock<Arc<Artifacts>>,
}

impl ArtifactCell {
    pub fn new(initial: Artifacts) -> Self {
        Self {
            inner: RwLock::new(Arc::new(initial)),
        }
    }

    pub fn current(&self) -> Arc<Artifacts> {
        self.inner.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    pub fn replace(&self, next: Artifacts) {
        *self.inner.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(next);
    }
}
