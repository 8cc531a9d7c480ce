use std::fs;
use std::path::PathBuf;

use bmsfed_cli::runner::{load_config, metrics_csv, run_dir_name, METRICS_HEADER};
use bmsfed_cli::{run_experiment, ExperimentConfig};

const SMALL: &str = "method = bmsfed\nseed = 4\nrounds = 3\nclients = 4\nbudget = 2\nclasses = 3\nper_class = 20\n\
                     test_per_class = 10\ndim_a = 4\ndim_i = 4\nhidden = 8\nembedding_dim = 4\nbatch_size = 8\n";

fn small(extra: &str) -> ExperimentConfig {
    ExperimentConfig::parse(&format!("{SMALL}{extra}")).unwrap()
}

fn repo_path(rel: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(rel)
}

#[test]
fn one_round_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&SMALL.replace("rounds = 3", "rounds = 1")).unwrap();
    let run = run_experiment(&cfg, dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(lines[0], METRICS_HEADER);
    assert!(lines[1].starts_with("1,"));
    assert_eq!(run.metrics.len(), 1);
    // the bootstrap trains every client multi-modally
    assert_eq!((run.last().n_multi, run.last().n_uni), (4, 0));
}

#[test]
fn rows_have_the_documented_format() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&small(""), dir.path()).unwrap();
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv, metrics_csv(&run.metrics));
    for (k, line) in csv.lines().skip(1).enumerate() {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols.len(), 8);
        assert_eq!(cols[0], (k + 1).to_string());
        for &c in [cols[1], cols[2], cols[3], cols[4], cols[7]].iter() {
            assert_eq!(c.split('.').nth(1).map(str::len), Some(6), "{c}");
        }
        let accs: Vec<f64> = cols[1..4].iter().map(|c| c.parse().unwrap()).collect();
        assert!(accs.iter().all(|a| (0.0..=1.0).contains(a)));
        let (n_multi, n_uni): (usize, usize) = (cols[5].parse().unwrap(), cols[6].parse().unwrap());
        let expected = if k == 0 { 4 } else { 2 };
        assert_eq!(n_multi + n_uni, expected);
    }
}

#[test]
fn same_config_twice_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::parse(&SMALL.replace("bmsfed", "fedavg_drop")).unwrap();
    run_experiment(&cfg, &dir.path().join("a")).unwrap();
    run_experiment(&cfg, &dir.path().join("b")).unwrap();
    for name in ["metrics.csv", "summary.json", "config.cfg"] {
        let a = fs::read(dir.path().join("a").join(name)).unwrap();
        let b = fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn summary_is_flat_and_picks_final_and_best_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let run = run_experiment(&small(""), dir.path()).unwrap();
    let text = fs::read_to_string(dir.path().join("summary.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let map = value.as_object().unwrap();
    assert!(map.values().all(|v| !v.is_object() && !v.is_array()));
    assert_eq!(map["method"], "bmsfed");
    assert_eq!(map["seed"], 4);
    assert_eq!(map["final_round"], 3);
    let best = run
        .metrics
        .iter()
        .fold(&run.metrics[0], |b, m| if m.acc_multi > b.acc_multi { m } else { b });
    assert_eq!(map["best_round"], best.round);
    let rounded = (run.last().acc_uni_i * 1e6).round() / 1e6;
    assert_eq!(map["final_acc_uni_i"].as_f64().unwrap(), rounded);
}

#[test]
fn saved_config_reloads_to_the_same_value() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small("alpha = 0.5\nlabel = mine\n");
    assert_eq!(run_dir_name(&cfg), "mine-seed4");
    run_experiment(&cfg, dir.path()).unwrap();
    assert_eq!(load_config(&dir.path().join("config.cfg")).unwrap(), cfg);
}

#[test]
fn reference_config_matches_golden_metrics() {
    let cfg = load_config(&repo_path("../../configs/reference.cfg")).unwrap();
    let dir = tempfile::tempdir().unwrap();
    run_experiment(&cfg, dir.path()).unwrap();
    let got = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let want = fs::read_to_string(repo_path("tests/golden/reference_metrics.csv")).unwrap();
    assert_eq!(got, want);
}

#[test]
fn unreadable_config_reports_the_path() {
    let err = load_config(&repo_path("no/such.cfg")).unwrap_err();
    assert!(err.to_string().contains("such.cfg"), "{err}");
}
