use std::path::Path;

use maskprop::metrics::read_curve;
use maskprop_cli::experiment::run_experiment_file;
use maskprop_cli::CliError;

fn setup(dir: &Path, extra: &str) -> std::path::PathBuf {
    let masks = maskprop::synth::generate(&maskprop::synth::Scenario { classes: 2, ..Default::default() }, 600, 11).unwrap();
    maskprop::io::write_masks(dir.join("masks.jsonl"), &masks).unwrap();
    let config = dir.join("exp.toml");
    std::fs::write(
        &config,
        format!("masks = \"masks.jsonl\"\ncomponents = 4\nper_class = 800\nseeds = [5]\n{extra}\n[engine]\nn_s = 15\n"),
    )
    .unwrap();
    config
}

fn files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(root).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn same_config_gives_identical_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "strategies = [\"selection\", \"bfs\"]\nkpa_epsilon = 0.01");
    run_experiment_file(&config, &dir.path().join("a"), false).unwrap();
    run_experiment_file(&config, &dir.path().join("b"), false).unwrap();
    let a = files(&dir.path().join("a"));
    let b = files(&dir.path().join("b"));
    assert_eq!(a.len(), b.len());
    assert!(a.iter().any(|p| p.ends_with("report.json")));
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.strip_prefix(dir.path().join("a")).unwrap(), y.strip_prefix(dir.path().join("b")).unwrap());
        assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{}", x.display());
    }
    // the run directory carries the config that produced it
    let resolved = std::fs::read_to_string(dir.path().join("a/config.toml")).unwrap();
    assert!(resolved.contains("kpa_epsilon = 0.01"));
    assert!(resolved.contains("[engine]"));
}

#[test]
fn existing_directory_is_left_alone_unless_resuming() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "");
    let out = dir.path().join("run");
    run_experiment_file(&config, &out, false).unwrap();
    assert!(matches!(run_experiment_file(&config, &out, false), Err(CliError::Usage(_))));
    let report = out.join("seed-5/lambda-1/selection/report.json");
    let before = std::fs::read(&report).unwrap();
    run_experiment_file(&config, &out, true).unwrap();
    assert_eq!(std::fs::read(&report).unwrap(), before);
}

#[test]
fn missing_dataset_fails_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("exp.toml");
    std::fs::write(&config, "masks = \"nowhere.jsonl\"\n").unwrap();
    let out = dir.path().join("run");
    let err = run_experiment_file(&config, &out, false).unwrap_err();
    assert!(matches!(err, CliError::Data(_)), "{err}");
    assert!(!out.exists());
}

/// Quantity reached by the last row within `budget` annotated clusters.
fn quantity_at(rows: &[maskprop::metrics::CurveRow], budget: u64) -> u64 {
    rows.iter().filter(|r| r.clusters_annotated <= budget).map(|r| r.quantity).max().unwrap_or(0)
}

#[test]
fn score_in_the_feature_helps_at_equal_budget() {
    let dir = tempfile::tempdir().unwrap();
    let config = setup(dir.path(), "lambdas = [0.0, 1.0]");
    let out = dir.path().join("run");
    run_experiment_file(&config, &out, false).unwrap();
    let without = read_curve(out.join("seed-5/lambda-0/selection/curve.csv")).unwrap();
    let with = read_curve(out.join("seed-5/lambda-1/selection/curve.csv")).unwrap();
    let budget = without.last().unwrap().clusters_annotated.min(with.last().unwrap().clusters_annotated);
    let (q0, q1) = (quantity_at(&without, budget), quantity_at(&with, budget));
    assert!(q1 >= q0, "lambda 1: {q1}, lambda 0: {q0} at {budget} clusters");
}
