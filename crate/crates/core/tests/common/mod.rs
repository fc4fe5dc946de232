#![allow(dead_code)]

use std::collections::VecDeque;
use std::path::{Path, PathBuf};

use gridpulse::ingest::{Fetched, Snapshot, SnapshotFormat, SourceAdapter};
use gridpulse::synth::{Fixture, FixtureConfig};
use gridpulse::{Error, Result};
use jsonschema::{Draft, JSONSchema};
use serde_json::Value;

/// Serves in-memory snapshots, alternating JSON and CSV bodies when asked.
pub struct VecSource {
    queue: VecDeque<(Snapshot, bool)>,
}

impl VecSource {
    pub fn json(snapshots: impl IntoIterator<Item = Snapshot>) -> Self {
        Self {
            queue: snapshots.into_iter().map(|s| (s, false)).collect(),
        }
    }

    pub fn mixed(snapshots: impl IntoIterator<Item = (Snapshot, bool)>) -> Self {
        Self {
            queue: snapshots.into_iter().collect(),
        }
    }

    pub fn remaining(&self) -> usize {
        self.queue.len()
    }
}

impl SourceAdapter for VecSource {
    fn fetch(&mut self) -> Result<Fetched> {
        let (s, csv) = self
            .queue
            .pop_front()
            .ok_or_else(|| Error::Backend("no more snapshots".into()))?;
        Ok(if csv {
            Fetched {
                bytes: s.to_csv(),
                format: SnapshotFormat::Csv {
                    captured_at: s.captured_at,
                },
            }
        } else {
            Fetched {
                bytes: s.to_json(),
                format: SnapshotFormat::Json,
            }
        })
    }
}

pub fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas")
}

/// Validates `instance` against `schemas/<name>.schema.json`, returning
/// every violation.
pub fn check_schema(name: &str, instance: &Value) -> std::result::Result<(), String> {
    let path = schema_dir().join(format!("{name}.schema.json"));
    let raw = std::fs::read(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let schema: Value = serde_json::from_slice(&raw).map_err(|e| e.to_string())?;
    let compiled = JSONSchema::options()
        .with_draft(Draft::Draft7)
        .compile(&schema)
        .map_err(|e| format!("schema {name}: {e}"))?;
    let result = compiled.validate(instance);
    match result {
        Ok(()) => Ok(()),
        Err(errors) => Err(errors
            .map(|e| format!("{name}: {e} at {}", e.instance_path))
            .collect::<Vec<_>>()
            .join("; ")),
    }
}

pub fn check_schema_file(name: &str, path: &Path) -> std::result::Result<(), String> {
    let raw = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let v: Value = serde_json::from_slice(&raw).map_err(|e| format!("{}: {e}", path.display()))?;
    check_schema(name, &v)
}

/// A data directory with the default synthetic fixture's reference tables
/// and its snapshots under `snapshots/`.
pub struct FixtureDir {
    pub dir: tempfile::TempDir,
    pub fixture: Fixture,
}

impl FixtureDir {
    pub fn new(cfg: &FixtureConfig) -> Self {
        let dir = tempfile::tempdir().expect("temp dir");
        let fixture = Fixture::generate(cfg).expect("fixture");
        fixture.write_reference(dir.path()).expect("reference tables");
        fixture.write_snapshots(&dir.path().join("snapshots")).expect("snapshots");
        Self { dir, fixture }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn snapshots(&self) -> PathBuf {
        self.dir.path().join("snapshots")
    }

    /// `gridpulse <args> --data-dir <dir>` in-process.
    pub fn run(&self, args: &[&str]) -> i32 {
        let mut argv = vec!["gridpulse".to_string()];
        argv.extend(args.iter().map(|s| s.to_string()));
        argv.push("--data-dir".into());
        argv.push(self.path().display().to_string());
        gridpulse::cli::run(argv)
    }
}
