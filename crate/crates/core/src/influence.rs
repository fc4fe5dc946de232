//! Markov influence graph over zip-code clusters.
//!
//! Zips are grouped by k-means on their centroids. Outages per cluster and
//! time step form outage vectors `o_t`; a nonnegative `k×k` transition
//! matrix `T` with `o_{t+1} ≈ T·o_t` is estimated by random search: for each
//! consecutive pair, `s` candidate matrices are drawn, the one with the
//! smallest squared prediction error wins, and the per-pair winners are
//! averaged. [`fit_transition_matrix_exact`] solves the same objective by
//! least squares and serves as the reference the sampled fit is measured
//! against. The largest entries of `T` are the edges of the influence graph.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::distributions::{Distribution, Uniform};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::analytics::TimeStepSeries;
use crate::geo::{haversine_km, LatLon};
use crate::{Error, Result};

pub const DEFAULT_CLUSTERS: usize = 11;
pub const DEFAULT_SAMPLES: u64 = 100_000;
pub const DEFAULT_EDGES: usize = 10;
pub const MAX_KMEANS_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KMeansMode {
    /// Seeded initial zips, then one insertion pass in zip order.
    SinglePass,
    /// The insertion pass followed by reassignment rounds until stable.
    Refined,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KMeansConfig {
    pub k: usize,
    pub seed: u64,
    pub mode: KMeansMode,
    /// Independent initialisations; the lowest-cost result is kept.
    pub restarts: usize,
}

impl KMeansConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            mode: KMeansMode::Refined,
            restarts: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub k: usize,
    pub seed: u64,
    pub assignment: BTreeMap<String, usize>,
    pub centroids: Vec<LatLon>,
}

impl ClusterAssignment {
    pub fn cluster_of(&self, zip: &str) -> Option<usize> {
        self.assignment.get(zip).copied()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.k];
        for c in self.assignment.values() {
            sizes[*c] += 1;
        }
        sizes
    }

    /// Sum of squared great-circle distances (km²) from each zip to its
    /// cluster centroid.
    pub fn cost(&self, points: &BTreeMap<String, LatLon>) -> f64 {
        self.assignment
            .iter()
            .map(|(zip, c)| haversine_km(points[zip], self.centroids[*c]).powi(2))
            .sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.centroids.len() != self.k {
            return Err(Error::Validation(format!(
                "{} centroids for k = {}",
                self.centroids.len(),
                self.k
            )));
        }
        if let Some((zip, c)) = self.assignment.iter().find(|(_, c)| **c >= self.k) {
            return Err(Error::Validation(format!("zip {zip} assigned to cluster {c} ≥ k")));
        }
        if self.sizes().contains(&0) {
            return Err(Error::Validation("cluster assignment has an empty cluster".into()));
        }
        Ok(())
    }
}

fn nearest(p: LatLon, centroids: &[LatLon]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (c, centroid) in centroids.iter().enumerate() {
        let d = haversine_km(p, *centroid);
        if d < best_d {
            best = c;
            best_d = d;
        }
    }
    best
}

fn means(points: &[LatLon], assign: &[usize], k: usize) -> Vec<LatLon> {
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (p, c) in points.iter().zip(assign) {
        let s = &mut sums[*c];
        s.0 += p.lat;
        s.1 += p.lon;
        s.2 += 1;
    }
    sums.into_iter()
        .map(|(lat, lon, n)| {
            let n = n.max(1) as f64;
            LatLon::new(lat / n, lon / n)
        })
        .collect()
}

/// Gives every empty cluster the point farthest from its own centroid,
/// taken from a cluster that can spare it.
fn repair_empty(points: &[LatLon], assign: &mut [usize], centroids: &mut [LatLon], k: usize) {
    loop {
        let mut sizes = vec![0usize; k];
        for c in assign.iter() {
            sizes[*c] += 1;
        }
        let Some(empty) = sizes.iter().position(|s| *s == 0) else {
            return;
        };
        let donor = (0..points.len())
            .filter(|i| sizes[assign[*i]] > 1)
            .max_by(|a, b| {
                let da = haversine_km(points[*a], centroids[assign[*a]]);
                let db = haversine_km(points[*b], centroids[assign[*b]]);
                // prefer the lower index among equals
                da.total_cmp(&db).then(b.cmp(a))
            })
            .expect("k ≤ n guarantees a cluster with two members");
        assign[donor] = empty;
        centroids[empty] = points[donor];
    }
}

fn single_run(points: &[LatLon], k: usize, rng: &mut ChaCha8Rng, mode: KMeansMode) -> Vec<usize> {
    let n = points.len();
    let initial = sample(rng, n, k).into_vec();
    let mut assign = vec![usize::MAX; n];
    let mut sums: Vec<(f64, f64, usize)> = Vec::with_capacity(k);
    let mut centroids = Vec::with_capacity(k);
    for (c, &i) in initial.iter().enumerate() {
        assign[i] = c;
        sums.push((points[i].lat, points[i].lon, 1));
        centroids.push(points[i]);
    }
    for i in 0..n {
        if assign[i] != usize::MAX {
            continue;
        }
        let c = nearest(points[i], &centroids);
        assign[i] = c;
        let s = &mut sums[c];
        s.0 += points[i].lat;
        s.1 += points[i].lon;
        s.2 += 1;
        centroids[c] = LatLon::new(s.0 / s.2 as f64, s.1 / s.2 as f64);
    }
    if mode == KMeansMode::SinglePass {
        return assign;
    }

    for _ in 0..MAX_KMEANS_ITERATIONS {
        let mut centroids = means(points, &assign, k);
        let mut next: Vec<usize> = points.iter().map(|p| nearest(*p, &centroids)).collect();
        repair_empty(points, &mut next, &mut centroids, k);
        if next == assign {
            break;
        }
        assign = next;
    }
    assign
}

/// k-means over zip centroids with the default refined mode.
pub fn kmeans_cluster(points: &BTreeMap<String, LatLon>, k: usize, seed: u64) -> Result<ClusterAssignment> {
    kmeans_cluster_with(points, &KMeansConfig::new(k, seed))
}

/// Seeded k-means over zip centroids using great-circle distance.
///
/// Initial centres are `k` zips drawn with the seeded RNG; the rest join
/// their nearest centre one at a time in ascending zip order, each join
/// moving that centre to the mean of its members. In refined mode,
/// reassignment rounds follow until nothing moves (at most
/// [`MAX_KMEANS_ITERATIONS`]).
pub fn kmeans_cluster_with(points: &BTreeMap<String, LatLon>, cfg: &KMeansConfig) -> Result<ClusterAssignment> {
    let n = points.len();
    if cfg.k == 0 {
        return Err(Error::Validation("k must be at least 1".into()));
    }
    if cfg.k > n {
        return Err(Error::Validation(format!("k = {} exceeds the {n} available zips", cfg.k)));
    }
    let zips: Vec<&String> = points.keys().collect();
    let coords: Vec<LatLon> = points.values().copied().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut best: Option<(f64, Vec<usize>)> = None;
    for _ in 0..cfg.restarts.max(1) {
        let assign = single_run(&coords, cfg.k, &mut rng, cfg.mode);
        let centroids = means(&coords, &assign, cfg.k);
        let cost: f64 = coords
            .iter()
            .zip(&assign)
            .map(|(p, c)| haversine_km(*p, centroids[*c]).powi(2))
            .sum();
        if best.as_ref().map_or(true, |(b, _)| cost < *b) {
            best = Some((cost, assign));
        }
    }
    let (_, assign) = best.expect("at least one run");
    let centroids = means(&coords, &assign, cfg.k);
    Ok(ClusterAssignment {
        k: cfg.k,
        seed: cfg.seed,
        assignment: zips.into_iter().cloned().zip(assign).collect(),
        centroids,
    })
}

/// Outage counts per cluster for one time step.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OutageVector {
    pub step_index: i64,
    pub counts: Vec<u64>,
}

impl OutageVector {
    pub fn to_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|c| *c as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

pub fn build_outage_vectors(series: &TimeStepSeries, assignment: &ClusterAssignment) -> Result<Vec<OutageVector>> {
    series
        .steps
        .iter()
        .map(|step| {
            let mut counts = vec![0u64; assignment.k];
            for (zip, n) in &step.zips {
                let c = assignment
                    .cluster_of(zip)
                    .ok_or_else(|| Error::NotFound(format!("zip {zip} has no cluster")))?;
                counts[c] += n;
            }
            Ok(OutageVector {
                step_index: step.index,
                counts,
            })
        })
        .collect()
}

/// Nonnegative `k×k` matrix mapping `o_t` to the expected `o_{t+1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TransitionMatrixJson", into = "TransitionMatrixJson")]
pub struct TransitionMatrix {
    k: usize,
    /// Row-major.
    entries: Vec<f64>,
    pub seed: u64,
    /// Candidates drawn per pair; 0 for the least-squares fit.
    pub samples: u64,
    pub training_steps: usize,
}

#[derive(Serialize, Deserialize)]
struct TransitionMatrixJson {
    k: usize,
    seed: u64,
    samples: u64,
    #[serde(default)]
    training_steps: usize,
    matrix: Vec<Vec<f64>>,
}

impl TryFrom<TransitionMatrixJson> for TransitionMatrix {
    type Error = Error;

    fn try_from(j: TransitionMatrixJson) -> Result<Self> {
        if j.matrix.len() != j.k || j.matrix.iter().any(|r| r.len() != j.k) {
            return Err(Error::Validation(format!("matrix is not {0}×{0}", j.k)));
        }
        let mut m = TransitionMatrix::from_rows(j.matrix)?;
        m.seed = j.seed;
        m.samples = j.samples;
        m.training_steps = j.training_steps;
        Ok(m)
    }
}

impl From<TransitionMatrix> for TransitionMatrixJson {
    fn from(m: TransitionMatrix) -> Self {
        TransitionMatrixJson {
            k: m.k,
            seed: m.seed,
            samples: m.samples,
            training_steps: m.training_steps,
            matrix: m.rows(),
        }
    }
}

impl TransitionMatrix {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let k = rows.len();
        if k == 0 || rows.iter().any(|r| r.len() != k) {
            return Err(Error::Validation("transition matrix must be square and non-empty".into()));
        }
        let entries: Vec<f64> = rows.into_iter().flatten().collect();
        if entries.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Validation("transition matrix entries must be finite and ≥ 0".into()));
        }
        Ok(Self {
            k,
            entries,
            seed: 0,
            samples: 0,
            training_steps: 0,
        })
    }

    pub fn identity(k: usize) -> Self {
        let rows = (0..k)
            .map(|i| (0..k).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        Self::from_rows(rows).expect("identity is valid")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.entries[row * self.k + col]
    }

    pub fn entries(&self) -> &[f64] {
        &self.entries
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries.chunks(self.k).map(<[f64]>::to_vec).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("matrix serializes")
    }
}

/// Expected outages per cluster at the next step: `T·o_now`.
pub fn predict_next(matrix: &TransitionMatrix, o_now: &[f64]) -> Result<Vec<f64>> {
    if o_now.len() != matrix.k {
        return Err(Error::Validation(format!(
            "outage vector has {} entries, matrix is {}×{}",
            o_now.len(),
            matrix.k,
            matrix.k
        )));
    }
    Ok(matrix
        .entries
        .chunks(matrix.k)
        .map(|row| row.iter().zip(o_now).map(|(a, b)| a * b).sum())
        .collect())
}

fn pair_sse(entries: &[f64], k: usize, x: &[f64], y: &[f64]) -> f64 {
    entries
        .chunks(k)
        .zip(y)
        .map(|(row, yi)| {
            let pred: f64 = row.iter().zip(x).map(|(a, b)| a * b).sum();
            (yi - pred).powi(2)
        })
        .sum()
}

/// `Σ_t ‖o_{t+1} − T·o_t‖²` over consecutive pairs.
pub fn sum_squared_error(matrix: &TransitionMatrix, vectors: &[Vec<f64>]) -> f64 {
    vectors
        .windows(2)
        .map(|w| pair_sse(&matrix.entries, matrix.k, &w[0], &w[1]))
        .sum()
}

/// Mean squared error per predicted component over consecutive pairs.
pub fn prediction_mse(matrix: &TransitionMatrix, vectors: &[Vec<f64>]) -> f64 {
    let pairs = vectors.len().saturating_sub(1);
    if pairs == 0 {
        return 0.0;
    }
    sum_squared_error(matrix, vectors) / (pairs * matrix.k) as f64
}

fn check_vectors(vectors: &[Vec<f64>]) -> Result<usize> {
    if vectors.len() < 2 {
        return Err(Error::InsufficientData {
            what: "outage vectors",
            required: 2,
            actual: vectors.len(),
        });
    }
    let k = vectors[0].len();
    if k == 0 || vectors.iter().any(|v| v.len() != k) {
        return Err(Error::Validation("outage vectors must share one non-zero length".into()));
    }
    Ok(k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub samples: u64,
    pub seed: u64,
    /// Candidate entries are drawn uniformly from `[lo, hi)`.
    pub entry_range: (f64, f64),
    /// Leave out pairs where both vectors are all zero.
    pub skip_zero_pairs: bool,
}

impl SamplingConfig {
    pub fn new(samples: u64, seed: u64) -> Self {
        Self {
            samples,
            seed,
            entry_range: (0.0, 1.0),
            skip_zero_pairs: false,
        }
    }

    pub fn with_range(mut self, lo: f64, hi: f64) -> Self {
        self.entry_range = (lo, hi);
        self
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampledFit {
    pub matrix: TransitionMatrix,
    /// Step index (position in the input) of each pair used.
    pub pairs: Vec<usize>,
    /// Mean squared error of each pair's winning candidate.
    pub pair_mse: Vec<f64>,
}

impl SampledFit {
    pub fn mean_pair_mse(&self) -> f64 {
        if self.pair_mse.is_empty() {
            0.0
        } else {
            self.pair_mse.iter().sum::<f64>() / self.pair_mse.len() as f64
        }
    }
}

/// RNG for the candidates of pair `t`. Independent of evaluation order,
/// so serial and parallel fits agree bit for bit.
fn pair_rng(seed: u64, t: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(t as u64);
    rng
}

/// Best of `samples` uniform candidates for one pair: `(entries, sse)`.
fn best_candidate(x: &[f64], y: &[f64], samples: u64, dist: &Uniform<f64>, rng: &mut ChaCha8Rng) -> (Vec<f64>, f64) {
    let k = x.len();
    let mut candidate = vec![0.0; k * k];
    let mut best = vec![0.0; k * k];
    let mut best_sse = f64::INFINITY;
    for _ in 0..samples {
        let mut sse = 0.0;
        for (row, yi) in candidate.chunks_mut(k).zip(y) {
            let mut pred = 0.0;
            for (slot, xj) in row.iter_mut().zip(x) {
                *slot = dist.sample(rng);
                pred += *slot * xj;
            }
            sse += (yi - pred) * (yi - pred);
        }
        // strict: the first of equal candidates wins
        if sse < best_sse {
            best_sse = sse;
            best.copy_from_slice(&candidate);
        }
    }
    (best, best_sse)
}

/// Random-search estimate of the transition matrix.
///
/// For every consecutive pair `(o_t, o_{t+1})`, `samples` candidates with
/// i.i.d. entries uniform on `entry_range` are drawn and the one minimising
/// `‖o_{t+1} − T·o_t‖²` is kept. The result is the element-wise mean of the
/// kept candidates. Deterministic in `(vectors, samples, seed, range)`.
pub fn fit_transition_matrix(vectors: &[Vec<f64>], cfg: &SamplingConfig) -> Result<SampledFit> {
    let k = check_vectors(vectors)?;
    if cfg.samples == 0 {
        return Err(Error::Validation("at least one candidate per pair is required".into()));
    }
    let (lo, hi) = cfg.entry_range;
    if !(lo.is_finite() && hi.is_finite() && lo >= 0.0 && hi > lo) {
        return Err(Error::Validation(format!("invalid candidate entry range [{lo}, {hi})")));
    }
    let dist = Uniform::new(lo, hi);

    let pairs: Vec<usize> = (0..vectors.len() - 1)
        .filter(|&t| {
            !(cfg.skip_zero_pairs
                && vectors[t].iter().all(|v| *v == 0.0)
                && vectors[t + 1].iter().all(|v| *v == 0.0))
        })
        .collect();
    if pairs.is_empty() {
        return Err(Error::InsufficientData {
            what: "active vector pairs",
            required: 1,
            actual: 0,
        });
    }

    let winners: Vec<(Vec<f64>, f64)> = pairs
        .par_iter()
        .map(|&t| {
            let mut rng = pair_rng(cfg.seed, t);
            best_candidate(&vectors[t], &vectors[t + 1], cfg.samples, &dist, &mut rng)
        })
        .collect();

    let mut mean = vec![0.0; k * k];
    for (entries, _) in &winners {
        for (m, e) in mean.iter_mut().zip(entries) {
            *m += e;
        }
    }
    let count = winners.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);

    Ok(SampledFit {
        matrix: TransitionMatrix {
            k,
            entries: mean,
            seed: cfg.seed,
            samples: cfg.samples,
            training_steps: vectors.len(),
        },
        pair_mse: winners.iter().map(|(_, sse)| sse / k as f64).collect(),
        pairs,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExactFit {
    /// The least-squares solution with negative entries set to 0.
    pub matrix: TransitionMatrix,
    /// The unclamped least-squares solution, row-major.
    pub unclamped: Vec<f64>,
    /// Entries that were negative and clamped.
    pub clamped: usize,
    /// `Σ_t ‖o_{t+1} − T·o_t‖²` of the unclamped solution.
    pub residual: f64,
}

/// Least-squares transition matrix: minimises `Σ_t ‖o_{t+1} − T·o_t‖²`
/// over all real `T` as `T = Y·X⁺` (minimum-norm when `X` is rank
/// deficient), then clamps negative entries to 0.
pub fn fit_transition_matrix_exact(vectors: &[Vec<f64>]) -> Result<ExactFit> {
    let k = check_vectors(vectors)?;
    let n = vectors.len() - 1;
    let x = DMatrix::from_fn(k, n, |i, t| vectors[t][i]);
    let y = DMatrix::from_fn(k, n, |i, t| vectors[t + 1][i]);

    let svd = x.svd(true, true);
    let max_sv = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let tol = max_sv * k.max(n) as f64 * f64::EPSILON;
    let pinv = svd
        .pseudo_inverse(tol)
        .map_err(|e| Error::Validation(format!("pseudo-inverse failed: {e}")))?;
    let t = y * pinv;

    let unclamped: Vec<f64> = (0..k).flat_map(|i| (0..k).map(move |j| (i, j))).map(|(i, j)| t[(i, j)]).collect();
    let residual: f64 = vectors
        .windows(2)
        .map(|w| pair_sse(&unclamped, k, &w[0], &w[1]))
        .sum();
    let clamped = unclamped.iter().filter(|v| **v < 0.0).count();
    Ok(ExactFit {
        matrix: TransitionMatrix {
            k,
            entries: unclamped.iter().map(|v| v.max(0.0)).collect(),
            seed: 0,
            samples: 0,
            training_steps: vectors.len(),
        },
        unclamped,
        clamped,
        residual,
    })
}

/// Directed edge of the influence graph: outages in `from_cluster` at step
/// `t` feeding `to_cluster` at `t+1`, i.e. the entry `T[to][from]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InfluenceEdge {
    pub from_cluster: usize,
    pub to_cluster: usize,
    pub weight: f64,
}

/// The `k_edges` heaviest entries (self-influence included), heaviest first,
/// ties by `(from, to)`.
pub fn top_k_edges(matrix: &TransitionMatrix, k_edges: usize) -> Vec<InfluenceEdge> {
    let k = matrix.k;
    let limit = if k_edges > k * k {
        warn!(requested = k_edges, available = k * k, "clipping influence edge count");
        k * k
    } else {
        k_edges
    };
    let mut edges: Vec<InfluenceEdge> = (0..k)
        .flat_map(|from| (0..k).map(move |to| (from, to)))
        .map(|(from, to)| InfluenceEdge {
            from_cluster: from,
            to_cluster: to,
            weight: matrix.get(to, from),
        })
        .collect();
    edges.sort_by(|a, b| {
        b.weight
            .total_cmp(&a.weight)
            .then(a.from_cluster.cmp(&b.from_cluster))
            .then(a.to_cluster.cmp(&b.to_cluster))
    });
    edges.truncate(limit);
    edges
}
