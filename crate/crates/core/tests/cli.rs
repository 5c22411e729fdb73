// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::Path;
use std::process::{Command, Output};

use attnedit::harness::report::{parse_csv, Report};
use attnedit::harness::suite::Suite;

fn attnedit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attnedit")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = attnedit(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: &str = "# small model for fast tests\nnum_layers = 4\nsteps = 6\n";

#[test]
fn exit_codes() {
    assert_eq!(attnedit(&["--help"]).status.code(), Some(0));
    assert_eq!(attnedit(&[]).status.code(), Some(1));
    assert_eq!(attnedit(&["sweep", "--axis", "nope", "--suite", "x", "--out", "y"]).status.code(), Some(1));
    assert_eq!(attnedit(&["run", "--op", "kvinject:alpha=2", "--suite", "x", "--out", "y"]).status.code(), Some(1));
    let missing = attnedit(&["report", "--in", "definitely-missing.json", "--format", "text"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("definitely-missing.json"));
}

#[test]
fn bad_config_is_a_run_failure() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "num_layers = 4\nwarp_factor = 9\n").unwrap();
    let suite = dir.path().join("s.json");
    ok(&["suite", "gen", "--n", "6", "--out", p(&suite)]);
    let out = attnedit(&["run", "--op", "baseline", "--suite", p(&suite), "--out", "o.json", "--model-cfg", p(&cfg)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("warp_factor"));
}

#[test]
fn suite_run_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let (suite, cfg) = (dir.path().join("suite.json"), dir.path().join("small.cfg"));
    let (json, csv) = (dir.path().join("run.json"), dir.path().join("run.csv"));
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&["suite", "gen", "--n", "12", "--seed", "5", "--out", p(&suite)]);
    let s = Suite::load(&suite).unwrap();
    assert_eq!((s.len(), s.master_seed), (12, 5));

    let op = "kvinject:alpha=0.3,layers=frac:0.5-0.75";
    let base = ["run", "--op", op, "--suite", p(&suite), "--model-cfg", p(&cfg)];
    ok(&[&base[..], &["--out", p(&json)]].concat());
    ok(&[&base[..], &["--out", p(&csv), "--format", "csv"]].concat());

    let report: Report = serde_json::from_str(&std::fs::read_to_string(&json).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].variant, "baseline");
    assert!(report.rows[1].variant.starts_with(op));
    assert!(report.rows[0].delta_vs_baseline.is_none() && report.rows[1].delta_vs_baseline.is_some());
    assert!(report.rows.iter().all(|r| r.clip_d.is_some()));

    let from_csv = parse_csv(&std::fs::read_to_string(&csv).unwrap()).unwrap();
    assert_eq!(from_csv, report.rows);
    let rendered = ok(&["report", "--in", p(&json), "--format", "csv"]);
    assert_eq!(parse_csv(&rendered).unwrap(), report.rows);
    let text = ok(&["report", "--in", p(&csv), "--format", "text"]);
    assert!(text.contains("baseline") && text.contains("composite"));
}

#[test]
fn route_reports_accuracy_and_per_case_categories() {
    let dir = tempfile::tempdir().unwrap();
    let (suite, cfg, out) = (dir.path().join("s.json"), dir.path().join("c.cfg"), dir.path().join("r.json"));
    std::fs::write(&cfg, SMALL).unwrap();
    ok(&["suite", "gen", "--n", "6", "--out", p(&suite)]);
    ok(&["route", "--mode", "auto", "--suite", p(&suite), "--out", p(&out), "--model-cfg", p(&cfg)]);
    let report: Report = serde_json::from_str(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[1].variant, "router_auto");
    assert_eq!(report.cases.len(), 6);
    assert!(report.header.iter().any(|h| h.starts_with("routing_accuracy[router_auto]=")));
}

#[test]
fn probe_writes_a_dump() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, out) = (dir.path().join("c.cfg"), dir.path().join("probe.csv"));
    std::fs::write(&cfg, SMALL).unwrap();
    let stdout = ok(&[
        "probe", "--op", "kvinject:alpha=1,layers=1-3", "--case", "replace-000", "--out", p(&out), "--model-cfg", p(&cfg),
    ]);
    let means: Vec<(usize, f64)> = stdout
        .lines()
        .filter(|l| !l.starts_with('#') && !l.starts_with("layer"))
        .map(|l| {
            let (a, b) = l.split_once(',').unwrap();
            (a.parse().unwrap(), b.parse().unwrap())
        })
        .collect();
    assert_eq!(means.len(), 4);
    for (layer, m) in means {
        assert!((-1.0..=1.0).contains(&m));
        if (1..3).contains(&layer) {
            assert_eq!(m, 1.0, "layer {layer}");
        }
    }
    assert!(!std::fs::read_to_string(&out).unwrap().is_empty());
    let bad = attnedit(&["probe", "--op", "baseline", "--case", "nope-999", "--out", p(&out), "--model-cfg", p(&cfg)]);
    assert_eq!(bad.status.code(), Some(2));
}
