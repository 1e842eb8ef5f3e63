use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_claimrisk"));
    c.env("RUST_LOG", "warn");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    let out = bin().current_dir(dir).args(args).output().expect("spawn claimrisk");
    assert!(
        out.status.success(),
        "claimrisk {} failed:\n{}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn json(path: impl AsRef<Path>) -> Value {
    let text = std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()));
    serde_json::from_str(&text).unwrap()
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path)
        .unwrap()
        .records()
        .map(|r| r.unwrap())
        .collect()
}

/// Simulated inputs shared by the scenarios below.
fn simulate(dir: &Path, n: usize) {
    run_in(dir, &["--seed", "4", "simulate", "--n-persons", &n.to_string()]);
}

const DATA: [&str; 4] = ["--taxonomy", "taxonomy.tsv", "--cohort", "cohort.jsonl"];
const GRID: [&str; 2] = ["--lambda-grid", "8:1e-2"];

fn with<'a>(extra: &[&'a str]) -> Vec<&'a str> {
    DATA.iter()
        .chain(GRID.iter())
        .copied()
        .chain(extra.iter().copied())
        .collect()
}

#[test]
fn full_workflow_writes_artifacts_and_manifests() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, 2_000);
    for f in [
        "taxonomy.tsv",
        "cohort.jsonl",
        "truth.csv",
        "generator_spec.json",
        "manifest_simulate.json",
    ] {
        assert!(d.join(f).exists(), "missing {f}");
    }

    run_in(d, &with(&["validate-taxonomy"]));
    let summary = json(d.join("taxonomy_summary.json"));
    assert_eq!(summary["codes"], 406);

    run_in(d, &with(&["featurize"]));
    assert!(d.join("design.bin").exists());
    assert!(d.join("feature_space.json").exists());

    run_in(d, &with(&["cv-fit"]));
    let report = csv_rows(d.join("cv_report.csv"));
    // One row per fold plus a mean row, for each lambda.
    assert_eq!(report.len(), 8 * 6);
    assert_eq!(report.iter().filter(|r| &r[1] == "mean").count(), 8);
    let oof = csv_rows(d.join("oof.csv"));
    assert_eq!(oof.len(), 2_000);

    run_in(d, &with(&["predict", "--model", "model.json"]));
    let preds = csv_rows(d.join("predictions.csv"));
    assert_eq!(preds.len(), 2_000);
    for r in &preds {
        let (logit, prob): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!((prob - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-9);
    }

    run_in(d, &with(&["metrics", "--predictions", "predictions.csv", "--adjust"]));
    let metrics = json(d.join("metrics.json"));
    let auc = metrics["auc"].as_f64().expect("auc in metrics.json");
    assert!(auc > 0.5 && auc <= 1.0);

    run_in(
        d,
        &with(&["aggregate", "--model", "model.json", "--min-group-size", "50"]),
    );
    assert!(!csv_rows(d.join("effects.csv")).is_empty());

    run_in(
        d,
        &with(&[
            "risk-index",
            "--cv-model",
            "cv_model.json",
            "--cancel-feature",
            "age_group,gender",
        ]),
    );
    assert_eq!(csv_rows(d.join("index.csv")).len(), 2_000);

    run_in(d, &with(&["profile", "--index", "index.csv"]));
    assert!(!csv_rows(d.join("profile.csv")).is_empty());

    run_in(
        d,
        &with(&["report", "--roc", "model=predictions.csv", "--index", "index.csv"]),
    );
    let roc = csv_rows(d.join("roc_model.csv"));
    let pts: Vec<(f64, f64)> = roc
        .iter()
        .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    let area: f64 = pts
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum();
    assert!((area - auc).abs() < 1e-9, "roc area {area} vs auc {auc}");

    for cmd in [
        "validate_taxonomy",
        "featurize",
        "cv_fit",
        "predict",
        "metrics",
        "aggregate",
        "risk_index",
        "profile",
        "report",
    ] {
        let m = json(d.join(format!("manifest_{cmd}.json")));
        assert_eq!(m["command"].as_str().unwrap().replace('-', "_"), cmd);
        assert!(!m["outputs"].as_array().unwrap().is_empty(), "{cmd} lists no outputs");
        let inputs = m["inputs"].as_object().unwrap();
        assert!(inputs.values().all(|v| v.as_str().unwrap().len() == 64));
    }
    assert!(json(d.join("manifest_cv_fit.json"))["selected_lambda"]
        .as_f64()
        .is_some());
}

#[test]
fn cv_fit_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, 1_500);
    let outputs: Vec<PathBuf> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = d.join(name);
            std::fs::create_dir(&out).unwrap();
            run_in(d, &with(&["--seed", "9", "--out-dir", out.to_str().unwrap(), "cv-fit"]));
            out
        })
        .collect();
    for f in ["oof.csv", "cv_report.csv", "model.json"] {
        let a = std::fs::read(outputs[0].join(f)).unwrap();
        let b = std::fs::read(outputs[1].join(f)).unwrap();
        assert!(a == b, "{f} differs between identical runs");
    }
}

#[test]
fn holdout_and_benchmark() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    simulate(d, 1_500);
    run_in(d, &with(&["cv-fit"]));

    // Scoring the training cohort itself reproduces in-sample metrics.
    run_in(d, &with(&["holdout-eval", "--model", "model.json"]));
    let h = json(d.join("holdout_metrics.json"));
    assert!(h.to_string().contains("auc"));
    assert_eq!(csv_rows(d.join("holdout_predictions.csv")).len(), 1_500);

    let ids: Vec<String> = csv_rows(d.join("oof.csv"))
        .iter()
        .take(100)
        .map(|r| r[0].to_string())
        .collect();
    std::fs::write(d.join("exclude.txt"), ids.join("\n")).unwrap();
    run_in(
        d,
        &with(&["holdout-eval", "--model", "model.json", "--exclude-ids", "exclude.txt"]),
    );
    let kept = csv_rows(d.join("holdout_predictions.csv"));
    assert_eq!(kept.len(), 1_400);
    assert!(kept.iter().all(|r| !ids.contains(&r[0].to_string())));

    // The out-of-fold logits double as an external score.
    let mut ext = csv::Writer::from_path(d.join("ext.csv")).unwrap();
    ext.write_record(["id", "logit"]).unwrap();
    for r in csv_rows(d.join("oof.csv")) {
        ext.write_record([&r[0], &r[3]]).unwrap();
    }
    ext.flush().unwrap();
    std::fs::write(d.join("full.json"), r#"{"name": "full"}"#).unwrap();
    run_in(
        d,
        &with(&["benchmark", "--configs", "full.json", "--external", "ext.csv"]),
    );
    let rows = csv_rows(d.join("benchmark.csv"));
    assert_eq!(rows.len(), 2, "one config row and one external row");
    assert!(rows.iter().all(|r| &r[2] == "cv"));
    let aucs: Vec<f64> = rows.iter().map(|r| r[3].parse().unwrap()).collect();
    // The external is the config's own out-of-fold score.
    assert!((aucs[0] - aucs[1]).abs() < 1e-12, "{aucs:?}");
}

#[test]
fn errors_are_reported_as_json() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();

    let out = bin()
        .current_dir(d)
        .args(["--taxonomy", "missing.tsv", "validate-taxonomy"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err: Value = serde_json::from_slice(last_line(&out.stderr)).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("missing.tsv"));

    let out = bin().current_dir(d).args(["no-such-command"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err: Value = serde_json::from_slice(last_line(&out.stderr)).unwrap();
    assert_eq!(err["error"], "usage");

    let out = bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("cv-fit"));
}

fn last_line(bytes: &[u8]) -> &[u8] {
    let trimmed = bytes.trim_ascii_end();
    match trimmed.iter().rposition(|&b| b == b'\n') {
        Some(i) => &trimmed[i + 1..],
        None => trimmed,
    }
}
