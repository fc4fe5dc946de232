mod common;

use gridpulse::geo::ZipTable;
use gridpulse::ingest::{OutageReport, Snapshot};
use gridpulse::store::CSV_HEADER;
use gridpulse::synth::FixtureConfig;
use gridpulse::time;

use common::FixtureDir;

fn small() -> FixtureDir {
    FixtureDir::new(&FixtureConfig {
        days: 1,
        ..Default::default()
    })
}

fn report(id: &str, address: &str, reported_at: &str, cause: Option<&str>) -> OutageReport {
    OutageReport {
        source_id: id.into(),
        address: address.into(),
        reported_at: time::parse(reported_at).unwrap(),
        cause: cause.map(str::to_string),
        customers_affected: None,
    }
}

#[test]
fn help_and_bad_flags() {
    assert_eq!(gridpulse::cli::run(["gridpulse", "--help"]), 0);
    assert_eq!(gridpulse::cli::run(["gridpulse", "--version"]), 0);
    assert_eq!(gridpulse::cli::run(["gridpulse", "--no-such-flag", "analyze"]), 1);
    assert_eq!(gridpulse::cli::run(["gridpulse", "export", "crawled"]), 1);
    assert_eq!(gridpulse::cli::run(["gridpulse"]), 1);
}

#[test]
fn predict_before_fit_is_a_usage_error() {
    let fx = small();
    assert_eq!(fx.run(&["predict"]), 1);
    assert!(!fx.path().join("prediction.json").exists());
}

#[test]
fn missing_replay_directory_is_an_io_error() {
    let fx = small();
    let missing = fx.path().join("does-not-exist").display().to_string();
    assert_eq!(fx.run(&["ingest-replay", &missing]), 2);
}

#[test]
fn seeded_fit_is_reproducible() {
    let fx = small();
    let snapshots = fx.snapshots().display().to_string();
    assert_eq!(fx.run(&["ingest-replay", &snapshots]), 0);
    let a = fx.path().join("a.json").display().to_string();
    let b = fx.path().join("b.json").display().to_string();
    assert_eq!(fx.run(&["fit", "--seed", "7", "--samples", "2000", "--out", &a]), 0);
    assert_eq!(fx.run(&["fit", "--seed", "7", "--samples", "2000", "--out", &b]), 0);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let c = fx.path().join("c.json").display().to_string();
    assert_eq!(fx.run(&["cluster", "--seed", "7", "--out", &c]), 0);
    let d = fx.path().join("d.json").display().to_string();
    assert_eq!(fx.run(&["cluster", "--seed", "7", "--out", &d]), 0);
    assert_eq!(std::fs::read(&c).unwrap(), std::fs::read(&d).unwrap());
}

#[test]
fn replay_and_export_follow_a_hand_trace() {
    let fx = small();
    let zips = ZipTable::load(&fx.path().join("zips.csv")).unwrap();
    let (a1, z1) = fx.fixture.geocoder[0].clone();
    let (a2, z2) = fx.fixture.geocoder[1].clone();
    let b1 = zips.get(&z1).unwrap().borough.name();
    let b2 = zips.get(&z2).unwrap().borough.name();
    let nowhere = "1 Nowhere Rd";

    let dir = fx.path().join("trace");
    std::fs::create_dir(&dir).unwrap();
    let s1 = Snapshot {
        captured_at: time::parse("2021-07-01T00:00:00Z").unwrap(),
        reports: vec![
            report("A", &a1, "2021-06-30T23:50:00Z", None),
            report("B", &a2, "2021-06-30T23:55:00Z", Some("weather")),
        ],
    };
    let s2 = Snapshot {
        captured_at: time::parse("2021-07-01T00:30:00Z").unwrap(),
        reports: vec![
            report("A", &a1, "2021-06-30T23:50:00Z", Some("tree contact")),
            report("C", nowhere, "2021-07-01T00:20:00Z", None),
        ],
    };
    let s3 = Snapshot {
        captured_at: time::parse("2021-07-01T01:00:00Z").unwrap(),
        reports: vec![report("C", nowhere, "2021-07-01T00:20:00Z", None)],
    };
    std::fs::write(dir.join("2021-07-01T00-00-00Z.json"), s1.to_json()).unwrap();
    std::fs::write(dir.join("2021-07-01T00-30-00Z.csv"), s2.to_csv()).unwrap();
    std::fs::write(dir.join("2021-07-01T01-00-00Z.json"), s3.to_json()).unwrap();

    assert_eq!(fx.run(&["ingest-replay", &dir.display().to_string()]), 0);
    let hist = fx.path().join("historical.csv");
    let proc = fx.path().join("processed.csv");
    assert_eq!(fx.run(&["export", "historical", "--out", &hist.display().to_string()]), 0);
    assert_eq!(fx.run(&["export", "processed", "--out", &proc.display().to_string()]), 0);

    let header = CSV_HEADER.join(",");
    let expected_hist = format!(
        "{header}\n\
         1,A,\"{a1}\",{z1},{b1},tree contact,2021-06-30T23:50:00Z,2021-07-01T00:00:00Z,2021-07-01T01:00:00Z,historical\n\
         2,B,\"{a2}\",{z2},{b2},weather,2021-06-30T23:55:00Z,2021-07-01T00:00:00Z,2021-07-01T00:30:00Z,historical\n"
    );
    let expected_proc = format!(
        "{header}\n\
         3,C,{nowhere},,,,2021-07-01T00:20:00Z,2021-07-01T00:30:00Z,,processed\n"
    );
    assert_eq!(std::fs::read_to_string(&hist).unwrap(), expected_hist);
    assert_eq!(std::fs::read_to_string(&proc).unwrap(), expected_proc);

    // replaying the same directory again changes nothing
    assert_eq!(fx.run(&["ingest-replay", &dir.display().to_string()]), 0);
    assert_eq!(fx.run(&["export", "historical", "--out", &hist.display().to_string()]), 0);
    assert_eq!(std::fs::read_to_string(&hist).unwrap(), expected_hist);
}
