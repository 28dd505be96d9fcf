mod common;

use std::collections::HashSet;
use std::path::Path;
use std::process::Command;

use circuitscope::experiment::{read_report, verify_report, Pipeline, Report, Stage};
use circuitscope::metrics::MetricValue;
use common::{smoke_config, SMOKE_CONFIG};

fn run(out: &Path) -> Report {
    Pipeline::new(smoke_config(), out, false).unwrap().run_all().unwrap()
}

fn csv_rows(path: &Path) -> HashSet<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|rec| rec.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn run_all_is_deterministic_and_round_trips() {
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let report = run(d1.path());
    run(d2.path());
    let bytes = std::fs::read(d1.path().join("report.json")).unwrap();
    assert_eq!(bytes, std::fs::read(d2.path().join("report.json")).unwrap());
    assert_eq!(read_report(d1.path()).unwrap(), report);
    for arm in ["A", "B"] {
        let trace = format!("traces/{arm}.dtrc");
        assert_eq!(std::fs::read(d1.path().join(&trace)).unwrap(), std::fs::read(d2.path().join(&trace)).unwrap());
    }

    let top: serde_json::Value = serde_json::from_slice(&bytes).unwrap();
    let keys = |v: &serde_json::Value| -> HashSet<String> { v.as_object().unwrap().keys().cloned().collect() };
    let set = |k: &[&str]| -> HashSet<String> { k.iter().map(|s| s.to_string()).collect() };
    assert_eq!(keys(&top), set(&["provenance", "arms", "tables", "divergence", "phases"]));
    assert_eq!(keys(&top["arms"]), set(&["A", "B"]));
    assert_eq!(
        keys(&top["tables"]),
        set(&["complexity_ratio", "head_specialization", "ablation", "cross_arm_stats"])
    );
    let t = &report.provenance.analysis_timesteps;
    assert_eq!(report.tables.complexity_ratio.len(), t.len());
    for row in &report.tables.complexity_ratio {
        assert_eq!(row.ratio, Some(row.complexity_b / row.complexity_a));
    }
}

#[test]
fn plotdata_covers_every_metric_value() {
    let dir = tempfile::tempdir().unwrap();
    let report = run(dir.path());
    let plot = dir.path().join("plotdata");
    let mut rows = HashSet::new();
    for f in ["complexity_evolution", "entropy_heads", "information_flow", "divergence"] {
        rows.extend(csv_rows(&plot.join(format!("{f}.csv"))));
    }
    let d = &report.divergence;
    let values: Vec<&MetricValue> = report
        .arms
        .values()
        .flat_map(|a| a.metrics.iter())
        .chain(d.entropy.iter().chain(&d.specialization).chain(&d.complexity))
        .collect();
    assert!(!values.is_empty());
    for v in values {
        assert!(rows.contains(&v.csv_row().to_vec()), "missing from plotdata: {:?}", v.csv_row());
    }
    for arm in ["A", "B"] {
        assert!(plot.join(format!("ablation_impacts_{arm}.csv")).exists());
        let losses = csv_rows(&plot.join(format!("loss_curve_{arm}.csv")));
        assert_eq!(losses.len(), report.arms[arm].training.as_ref().unwrap().steps);
    }
}

#[test]
fn disabled_interventions_leave_header_only_ablation_csv() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = smoke_config();
    cfg.interventions.ablation = false;
    cfg.interventions.heads = false;
    cfg.interventions.robustness = false;
    let report = Pipeline::new(cfg, dir.path(), false).unwrap().run_all().unwrap();
    assert!(report.tables.ablation.is_empty());
    for arm in ["A", "B"] {
        let text = std::fs::read_to_string(dir.path().join(format!("ablation_{arm}.csv"))).unwrap();
        assert_eq!(text.lines().count(), 1, "{text}");
    }
}

#[test]
fn resume_skips_completed_stages_and_verify_catches_tampering() {
    let dir = tempfile::tempdir().unwrap();
    let first = std::fs::read(dir.path().join("report.json")).ok();
    assert!(first.is_none());
    run(dir.path());
    let marker = dir.path().join("stages").join(format!("{}.done", Stage::Train.name()));
    let before = std::fs::metadata(&marker).unwrap().modified().unwrap();
    let report_bytes = std::fs::read(dir.path().join("report.json")).unwrap();
    Pipeline::new(smoke_config(), dir.path(), true).unwrap().run_all().unwrap();
    assert_eq!(std::fs::metadata(&marker).unwrap().modified().unwrap(), before);
    assert_eq!(std::fs::read(dir.path().join("report.json")).unwrap(), report_bytes);

    let checks = verify_report(dir.path(), 40, 1).unwrap();
    assert!(!checks.is_empty());

    let trace = dir.path().join("traces/A.dtrc");
    let mut bytes = std::fs::read(&trace).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    std::fs::write(&trace, bytes).unwrap();
    let err = verify_report(dir.path(), 3, 1).unwrap_err();
    assert_eq!(err.exit_code(), 4);
}

fn cli(args: &[&str], out: &Path) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_circuitscope"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn cli_exit_codes_and_error_lines() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");

    let single = dir.path().join("single.json");
    let mut v: serde_json::Value = serde_json::from_str(SMOKE_CONFIG).unwrap();
    v["arm_b"] = serde_json::Value::Null;
    std::fs::write(&single, v.to_string()).unwrap();
    let o = cli(&["run-all", "--config", single.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("kind=single_arm"), "{err}");

    assert_eq!(cli(&["run-all", "--bogus"], &out).status.code(), Some(2));
    assert_eq!(cli(&["run-all", "--config", "/nonexistent/cfg.json"], &out).status.code(), Some(2));

    let smoke = dir.path().join("smoke.json");
    std::fs::write(&smoke, SMOKE_CONFIG).unwrap();
    let o = cli(&["trace", "--config", smoke.to_str().unwrap()], &out);
    assert_eq!(o.status.code(), Some(3));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("error: stage=trace kind="), "{err}");

    let o = cli(&["run-all", "--config", smoke.to_str().unwrap()], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let o = cli(&["report", "--verify", "--checks", "10", "--verify-seed", "3"], &out);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("verified"));

    let o = cli(&["analyze", "--trace", out.join("traces/B.dtrc").to_str().unwrap()], &dir.path().join("single_trace"));
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("single_trace/trace_metrics.csv").exists());
}
