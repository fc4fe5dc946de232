//! Read-only HTTP API under `/api`, plus the background poller and nightly
//! refit that keep its artifacts current.

use std::sync::{Arc, Mutex, RwLock};

use axum::extract::{Path as UrlPath, Query, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use chrono::{Timelike, Utc};
use serde::{Deserialize, Serialize};
use tracing::{error, info, warn};

use crate::analytics::TrendAxis;
use crate::config::ApiConfig;
use crate::geo::{Borough, Geocoder};
use crate::ingest::{run_poll_cycle, HttpSource, LifecycleStage, ReplaySource, SourceAdapter};
use crate::pipeline::{
    self, build_artifacts, ArtifactCell, Artifacts, Failure, FailureKind, Inputs, Models, Payload,
};
use crate::store::{Page, QueryFilter, Store, StoredOutage};
use crate::time::{self, Timestamp};
use crate::{Error, Result};

pub const DEFAULT_PAGE_LIMIT: usize = 1000;
pub const MAX_PAGE_LIMIT: usize = 10_000;

/// Shared state behind the API: the store, reference inputs, fitted models
/// and the current artifact set.
pub struct Engine {
    pub store: Arc<Store>,
    pub inputs: Arc<Inputs>,
    models: RwLock<Arc<Models>>,
    pub config: ApiConfig,
    artifacts: ArtifactCell,
}

impl Engine {
    pub fn new(store: Arc<Store>, inputs: Inputs, models: Models, config: ApiConfig, now: Timestamp) -> Self {
        let artifacts = ArtifactCell::new(build_artifacts(&store, &inputs, &models, &config, now));
        Self {
            store,
            inputs: Arc::new(inputs),
            models: RwLock::new(Arc::new(models)),
            config,
            artifacts,
        }
    }

    pub fn artifacts(&self) -> Arc<Artifacts> {
        self.artifacts.current()
    }

    pub fn models(&self) -> Arc<Models> {
        self.models.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    /// Recomputes every payload and swaps them in together.
    pub fn rebuild(&self, now: Timestamp) {
        let models = self.models();
        self.artifacts
            .replace(build_artifacts(&self.store, &self.inputs, &models, &self.config, now));
    }

    /// Refits the transition matrix on the full history, clustering first
    /// if no assignment exists, and persists the results.
    pub fn refit(&self, now: Timestamp) -> Result<()> {
        let seed = self.config.seed.unwrap_or_else(rand::random);
        let current = self.models();
        let clusters = match &current.clusters {
            Some(c) => c.clone(),
            None => {
                let c = pipeline::cluster_zips(&self.inputs.zips, &self.config, seed)?;
                pipeline::write_json(&self.config.clusters_path(), &c)?;
                c
            }
        };
        let history = self.store.history()?;
        let model = pipeline::fit_model(&history, &clusters, &self.config, seed)?;
        pipeline::write_json(&self.config.model_path(), &model)?;
        info!(seed, k = clusters.k, steps = model.training_steps, "transition matrix refitted");
        *self.models.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(Models {
            clusters: Some(clusters),
            model: Some(model),
        });
        self.rebuild(now);
        Ok(())
    }
}

pub fn router(engine: Arc<Engine>) -> Router {
    Router::new()
        .route("/api/outages/current", get(current))
        .route("/api/outages/historical", get(historical))
        .route("/api/analytics/per-capita", get(per_capita))
        .route("/api/analytics/trend", get(trend))
        .route("/api/analytics/causes", get(causes))
        .route("/api/analytics/transition-bins", get(transition_bins))
        .route("/api/predictions/next", get(prediction))
        .route("/api/downloads/:file", get(download))
        .route("/api/config", get(config))
        .with_state(engine)
}

fn failure_status(kind: FailureKind) -> StatusCode {
    match kind {
        FailureKind::Unavailable => StatusCode::SERVICE_UNAVAILABLE,
        FailureKind::InsufficientData | FailureKind::NotFitted | FailureKind::Invalid => StatusCode::CONFLICT,
        FailureKind::Internal => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

fn failure_response(f: Failure) -> Response {
    (failure_status(f.error), Json(f)).into_response()
}

fn bad_request(reason: impl Into<String>) -> Response {
    (StatusCode::BAD_REQUEST, Json(Failure::new(FailureKind::Invalid, reason))).into_response()
}

fn payload_response(p: &Payload) -> Response {
    match p {
        Ok(body) => ([(header::CONTENT_TYPE, "application/json")], body.to_string()).into_response(),
        Err(f) => failure_response(f.clone()),
    }
}

async fn current(State(e): State<Arc<Engine>>) -> Response {
    payload_response(&e.artifacts().current)
}

async fn per_capita(State(e): State<Arc<Engine>>) -> Response {
    payload_response(&e.artifacts().per_capita)
}

async fn causes(State(e): State<Arc<Engine>>) -> Response {
    payload_response(&e.artifacts().causes)
}

async fn transition_bins(State(e): State<Arc<Engine>>) -> Response {
    payload_response(&e.artifacts().transition_bins)
}

async fn prediction(State(e): State<Arc<Engine>>) -> Response {
    payload_response(&e.artifacts().prediction)
}

#[derive(Deserialize)]
struct TrendQuery {
    x: Option<String>,
}

async fn trend(State(e): State<Arc<Engine>>, Query(q): Query<TrendQuery>) -> Response {
    let axis: TrendAxis = match q.x.as_deref().unwrap_or("income").parse() {
        Ok(a) => a,
        Err(err) => return bad_request(err.to_string()),
    };
    payload_response(e.artifacts().trend(axis))
}

#[derive(Debug, Default, Deserialize)]
pub struct HistoricalQuery {
    pub from: Option<String>,
    pub to: Option<String>,
    pub zip: Option<String>,
    pub borough: Option<String>,
    pub stage: Option<String>,
    pub offset: Option<usize>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoricalPage {
    pub stage: LifecycleStage,
    pub offset: usize,
    pub limit: usize,
    pub items: Vec<StoredOutage>,
}

fn parse_historical(q: &HistoricalQuery) -> Result<(LifecycleStage, QueryFilter, Page)> {
    let ts = |s: &Option<String>| s.as_deref().map(time::parse).transpose();
    let filter = QueryFilter {
        from: ts(&q.from)?,
        to: ts(&q.to)?,
        zip: q.zip.clone(),
        borough: q.borough.as_deref().map(str::parse::<Borough>).transpose()?,
    };
    if let (Some(f), Some(t)) = (filter.from, filter.to) {
        if f > t {
            return Err(Error::Validation("from must not be after to".into()));
        }
    }
    let stage = match q.stage.as_deref() {
        None => LifecycleStage::Historical,
        Some(s) => match s.parse()? {
            LifecycleStage::Crawled => return Err(Error::Validation("crawled outages are not stored".into())),
            s => s,
        },
    };
    let limit = q.limit.unwrap_or(DEFAULT_PAGE_LIMIT);
    if limit == 0 || limit > MAX_PAGE_LIMIT {
        return Err(Error::Validation(format!("limit must be 1..={MAX_PAGE_LIMIT}")));
    }
    Ok((
        stage,
        filter,
        Page {
            offset: q.offset.unwrap_or(0),
            limit: Some(limit),
        },
    ))
}

async fn historical(State(e): State<Arc<Engine>>, Query(q): Query<HistoricalQuery>) -> Response {
    let (stage, filter, page) = match parse_historical(&q) {
        Ok(v) => v,
        Err(err) => return bad_request(err.to_string()),
    };
    let store = e.store.clone();
    let rows = tokio::task::spawn_blocking(move || store.query(stage, &filter, page)).await;
    match rows {
        Ok(Ok(items)) => Json(HistoricalPage {
            stage,
            offset: page.offset,
            limit: page.limit.unwrap_or(DEFAULT_PAGE_LIMIT),
            items,
        })
        .into_response(),
        Ok(Err(err @ Error::Validation(_))) => bad_request(err.to_string()),
        Ok(Err(err)) => failure_response(err.into()),
        Err(join) => failure_response(Failure::new(FailureKind::Internal, join.to_string())),
    }
}

async fn download(State(e): State<Arc<Engine>>, UrlPath(file): UrlPath<String>) -> Response {
    let stage = match file.as_str() {
        "processed.csv" => LifecycleStage::Processed,
        "historical.csv" => LifecycleStage::Historical,
        _ => {
            return (
                StatusCode::NOT_FOUND,
                Json(Failure::new(FailureKind::Unavailable, format!("no table named {file}"))),
            )
                .into_response()
        }
    };
    let store = e.store.clone();
    match tokio::task::spawn_blocking(move || store.export_csv(stage)).await {
        Ok(Ok(bytes)) => (
            [
                (header::CONTENT_TYPE, "text/csv; charset=utf-8".to_string()),
                (header::CONTENT_DISPOSITION, format!("attachment; filename=\"{file}\"")),
            ],
            bytes,
        )
            .into_response(),
        Ok(Err(err)) => failure_response(err.into()),
        Err(join) => failure_response(Failure::new(FailureKind::Internal, join.to_string())),
    }
}

/// Read-only settings for clients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PublicConfig {
    pub poll_interval_minutes: u64,
    pub step_hours: i64,
    pub clusters: usize,
    pub samples: u64,
    pub seed: Option<u64>,
    #[serde(with = "time::rfc3339")]
    pub built_at: Timestamp,
}

async fn config(State(e): State<Arc<Engine>>) -> Json<PublicConfig> {
    let c = &e.config;
    Json(PublicConfig {
        poll_interval_minutes: c.poll_interval_minutes,
        step_hours: c.step_hours,
        clusters: c.clusters,
        samples: c.samples,
        seed: c.seed,
        built_at: e.artifacts().built_at,
    })
}

fn open_source(cfg: &ApiConfig) -> Result<Option<Box<dyn SourceAdapter>>> {
    if let Some(url) = &cfg.source_url {
        return Ok(Some(Box::new(HttpSource::new(url.clone()))));
    }
    if let Some(dir) = &cfg.replay_dir {
        return Ok(Some(Box::new(ReplaySource::open(dir)?)));
    }
    Ok(None)
}

async fn poll_loop(engine: Arc<Engine>, source: Box<dyn SourceAdapter>, geocoder: Arc<dyn Geocoder>) {
    let source = Arc::new(Mutex::new(source));
    let mut ticker = tokio::time::interval(engine.config.poll_interval());
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        ticker.tick().await;
        let (engine, source, geocoder) = (engine.clone(), source.clone(), geocoder.clone());
        let done = tokio::task::spawn_blocking(move || {
            let mut source = source.lock().unwrap_or_else(|p| p.into_inner());
            let report = run_poll_cycle(source.as_mut(), &engine.store, geocoder.as_ref(), Utc::now());
            for err in &report.errors {
                warn!(kind = ?err.kind, source_id = ?err.source_id, "{}", err.message);
            }
            if !report.skipped() {
                info!(promoted = report.promoted, retired = report.retired, "poll cycle applied");
            }
            engine.rebuild(time::truncate(Utc::now()));
        })
        .await;
        if let Err(e) = done {
            error!(error = %e, "poll cycle panicked");
        }
    }
}

fn until_next_refit(hour: u32, now: Timestamp) -> std::time::Duration {
    let today = time::midnight_of(&now) + chrono::Duration::hours(hour as i64);
    let next = if today > now { today } else { today + chrono::Duration::days(1) };
    debug_assert!(next.hour() == hour);
    (next - now).to_std().unwrap_or_default()
}

async fn refit_loop(engine: Arc<Engine>) {
    loop {
        tokio::time::sleep(until_next_refit(engine.config.refit_hour_utc, Utc::now())).await;
        let e = engine.clone();
        match tokio::task::spawn_blocking(move || e.refit(time::truncate(Utc::now()))).await {
            Ok(Ok(())) => {}
            Ok(Err(err)) => warn!(error = %err, "nightly refit failed"),
            Err(join) => error!(error = %join, "nightly refit panicked"),
        }
    }
}

/// Loads everything from the data directory, starts the poller and the
/// nightly refit, and serves until Ctrl-C.
pub async fn serve(cfg: ApiConfig) -> Result<()> {
    let store = Arc::new(Store::open(&cfg.database_path())?);
    let inputs = Inputs::load(&cfg)?;
    let geocoder: Arc<dyn Geocoder> = Arc::from(pipeline::open_geocoder(&cfg, inputs.zips.clone())?);
    let models = Models::load(&cfg)?;
    let source = open_source(&cfg)?;
    let engine = Arc::new(Engine::new(store, inputs, models, cfg.clone(), time::truncate(Utc::now())));

    match source {
        Some(s) => {
            tokio::spawn(poll_loop(engine.clone(), s, geocoder));
        }
        None => info!("no snapshot source configured; serving the stored archive only"),
    }
    tokio::spawn(refit_loop(engine.clone()));

    let listener = tokio::net::TcpListener::bind(&cfg.listen)
        .await
        .map_err(|e| Error::io(&cfg.listen, e))?;
    info!(addr = %cfg.listen, "listening");
    axum::serve(listener, router(engine))
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
        .map_err(|e| Error::io(&cfg.listen, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn next_refit_is_within_a_day() {
        let now = time::parse("2021-07-01T05:30:00Z").unwrap();
        assert_eq!(until_next_refit(3, now).as_secs(), (21 * 60 + 30) * 60);
        assert_eq!(until_next_refit(6, now).as_secs(), 30 * 60);
        let at = time::parse("2021-07-01T03:00:00Z").unwrap();
        assert_eq!(until_next_refit(3, at).as_secs(), 24 * 3600);
    }

    #[test]
    fn historical_query_validation() {
        let q = HistoricalQuery {
            from: Some("2021-07-02T00:00:00Z".into()),
            to: Some("2021-07-01T00:00:00Z".into()),
            ..Default::default()
        };
        assert!(parse_historical(&q).is_err());
        let q = HistoricalQuery {
            stage: Some("crawled".into()),
            ..Default::default()
        };
        assert!(parse_historical(&q).is_err());
        let q = HistoricalQuery {
            borough: Some("staten island".into()),
            limit: Some(5),
            ..Default::default()
        };
        let (stage, f, p) = parse_historical(&q).unwrap();
        assert_eq!(stage, LifecycleStage::Historical);
        assert_eq!(f.borough, Some(Borough::StatenIsland));
        assert_eq!(p.limit, Some(5));
    }
}
