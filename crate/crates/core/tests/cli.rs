use std::fs;
use std::path::Path;

use bflo::cli::cli_main;

fn write_toy_libsvm(path: &Path) {
    let mut text = String::new();
    for i in 0..120 {
        let a = (i % 7) as f64 / 7.0;
        let b = (i % 5) as f64 / 5.0;
        let y = if a + 0.3 * b > 0.5 { "+1" } else { "-1" };
        text.push_str(&format!("{y} 1:{a} 2:{b} 3:1\n"));
    }
    fs::write(path, text).unwrap();
}

fn config(data: &Path, algorithm: &str, variant: &str) -> String {
    format!(
        r#"{{
  "dataset": {{ "name": "toy", "format": "libsvm", "path": "{}" }},
  "model": {{ "kind": "logistic" }},
  "learner": {{ "algorithm": "{algorithm}", "variant": "{variant}", "eta": 0.5 }},
  "runs": 3,
  "base_seed": 4
}}"#,
        data.display()
    )
}

fn run(args: &[&str]) -> i32 {
    cli_main(std::iter::once("bflo").chain(args.iter().copied()))
}

#[test]
fn run_then_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.libsvm");
    write_toy_libsvm(&data);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, config(&data, "bflo", "full")).unwrap();
    let out = dir.path().join("out");
    assert_eq!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);

    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["schema_version"], 1);
    assert_eq!(summary["aggregate"]["runs"], 3);
    let curve = fs::read_to_string(out.join("curve.csv")).unwrap();
    assert!(curve.starts_with("round,cum_mistakes,entropy\n"));

    let trace = dir.path().join("trace.csv");
    let snaps = out.join("run_0/snapshots.bin");
    assert_eq!(run(&["trace", "--snapshots", snaps.to_str().unwrap(), "--out", trace.to_str().unwrap()]), 0);
    let text = fs::read_to_string(trace).unwrap();
    assert!(text.starts_with("round,kind,x,r_eigenvalues,rho,cum_rho\n"));
    assert!(text.lines().count() > 2);
}

#[test]
fn missing_data_fails_without_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, config(&dir.path().join("absent.libsvm"), "sgd", "diagonal")).unwrap();
    let out = dir.path().join("out");
    assert_ne!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    assert!(!out.exists());
}

#[test]
fn bad_arguments_and_configs_are_rejected() {
    assert_ne!(run(&["frobnicate"]), 0);
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"dataset": {"name": "x"}}"#).unwrap();
    assert_ne!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", "unused"]), 0);
    assert_ne!(run(&["run", "--config", cfg.with_extension("nope").to_str().unwrap()]), 0);
}

#[test]
fn verify_passes_on_small_sweep() {
    assert_eq!(run(&["verify", "--dims", "1,2", "--cases", "20", "--seed", "3"]), 0);
}

#[test]
fn suite_writes_ranked_table() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.libsvm");
    write_toy_libsvm(&data);
    let suite = format!(
        r#"{{
  "name": "toy-suite",
  "datasets": [ {{ "dataset": {{ "name": "toy", "format": "libsvm", "path": "{}" }}, "model": {{ "kind": "logistic" }} }} ],
  "learners": [ {{ "algorithm": "sgd", "eta": 0.5 }}, {{ "algorithm": "arow" }}, {{ "algorithm": "blang", "eta": 0.01 }},
                {{ "algorithm": "bflo", "variant": "diagonal", "eta": 0.5 }}, {{ "algorithm": "dropout" }} ],
  "noise_levels": [0.0, 0.2],
  "runs": 2
}}"#,
        data.display()
    );
    let cfg = dir.path().join("suite.json");
    fs::write(&cfg, suite).unwrap();
    let out = dir.path().join("suite");
    assert_eq!(run(&["suite", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
    let table = fs::read_to_string(out.join("table.csv")).unwrap();
    // Dropout needs a hidden layer, so it is skipped for the logistic model.
    assert_eq!(table.lines().count(), 1 + 2 * 4);
    assert!(out.join("toy/noise_0.2/bflo-diagonal/summary.json").exists());
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        if name.ends_with("_suite.json") {
            let s = bflo::harness::SuiteConfig::load(&path).unwrap();
            assert!(!s.experiments().is_empty(), "{name}");
        } else {
            bflo::harness::ExperimentConfig::load(&path).unwrap();
        }
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn repeated_runs_are_identical() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("toy.libsvm");
    write_toy_libsvm(&data);
    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, config(&data, "bflo", "diagonal")).unwrap();
    let mut seen = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("out{k}"));
        assert_eq!(run(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]), 0);
        let mut v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
        bflo::harness::strip_wall_time(&mut v);
        seen.push((v.to_string(), fs::read(out.join("run_1/snapshots.bin")).unwrap()));
    }
    assert_eq!(seen[0], seen[1]);
}
