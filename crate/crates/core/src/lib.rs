//! Outage tracking and decision support.
//!
//! The crate is organised as a pipeline:
//!
//! - [`ingest`] pulls outage snapshots from a [`ingest::SourceAdapter`] and
//!   drives every outage through the crawled, processed and historical stages.
//! - [`geo`] enriches addresses with zip code and borough and supplies zip
//!   centroids and great-circle distances.
//! - [`store`] persists the processed and historical tables in an embedded
//!   SQLite file and exports them as CSV.
//! - [`vulnerability`] turns per-zip socio-demographic features into the
//!   electricity vulnerability index (zip ranking, per-outage severity
//!   ranking and colour bands).
//! - [`analytics`] computes borough rates, demographic trend lines, the cause
//!   histogram and the binned transition counts of total outages per step.
//! - [`influence`] clusters zips with k-means, builds per-cluster outage
//!   vectors, fits a transition matrix by random search (with an exact
//!   least-squares oracle) and extracts the influence graph.
//! - [`service`] serves all of the above over HTTP; [`cli`] drives it from
//!   the command line.
//!
//! Runnable walkthroughs live in `examples/`.

pub mod analytics;
pub mod cli;
pub mod config;
pub mod error;
pub mod geo;
pub mod influence;
pub mod ingest;
pub mod pipeline;
pub mod service;
pub mod store;
pub mod synth;
pub mod time;
pub mod vulnerability;

pub use error::{Error, Result};
