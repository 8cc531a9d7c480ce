use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use bmsfed::federation::{RoundMetrics, Simulation};
use serde_json::{json, Map, Value};

use crate::{CliError, ExperimentConfig};

pub const METRICS_HEADER: &str = "round,acc_multi,acc_uni_a,acc_uni_i,global_ratio,n_multi,n_uni,train_loss";

/// Result of one run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub dir: PathBuf,
    pub metrics: Vec<RoundMetrics>,
}

impl RunOutput {
    pub fn last(&self) -> &RoundMetrics {
        self.metrics.last().expect("a run has at least one round")
    }
}

/// Directory name of one run under an output root.
pub fn run_dir_name(cfg: &ExperimentConfig) -> String {
    format!("{}-seed{}", cfg.label, cfg.seed)
}

/// Runs the bootstrap and the remaining rounds without touching disk.
pub fn simulate(cfg: &ExperimentConfig) -> Result<Vec<RoundMetrics>, CliError> {
    let mut sim = Simulation::new(cfg.simulation())?;
    Ok(sim.run()?)
}

pub fn metrics_csv(metrics: &[RoundMetrics]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.6},{},{},{:.6}",
            m.round, m.acc_multi, m.acc_uni_a, m.acc_uni_i, m.global_ratio, m.n_multi, m.n_uni, m.train_loss
        );
    }
    out
}

fn round6(x: f64) -> Value {
    // keep the json consistent with the 6-decimal csv
    json!((x * 1e6).round() / 1e6)
}

fn put_round(map: &mut Map<String, Value>, prefix: &str, m: &RoundMetrics) {
    map.insert(format!("{prefix}_round"), json!(m.round));
    map.insert(format!("{prefix}_acc_multi"), round6(m.acc_multi));
    map.insert(format!("{prefix}_acc_uni_a"), round6(m.acc_uni_a));
    map.insert(format!("{prefix}_acc_uni_i"), round6(m.acc_uni_i));
    map.insert(format!("{prefix}_global_ratio"), round6(m.global_ratio));
    map.insert(format!("{prefix}_n_multi"), json!(m.n_multi));
    map.insert(format!("{prefix}_n_uni"), json!(m.n_uni));
    map.insert(format!("{prefix}_train_loss"), round6(m.train_loss));
}

/// Flat summary: run identity, final round and the round with the best
/// multi-modal accuracy (earliest on ties).
pub fn summary_json(cfg: &ExperimentConfig, metrics: &[RoundMetrics]) -> Result<String, CliError> {
    let last = metrics.last().expect("a run has at least one round");
    let best = metrics.iter().fold(last, |b, m| {
        if m.acc_multi > b.acc_multi || (m.acc_multi == b.acc_multi && m.round < b.round) {
            m
        } else {
            b
        }
    });
    let mut map = Map::new();
    map.insert("method".into(), json!(cfg.method.name()));
    map.insert("label".into(), json!(cfg.label));
    map.insert("seed".into(), json!(cfg.seed));
    map.insert("rounds".into(), json!(metrics.len()));
    put_round(&mut map, "final", last);
    put_round(&mut map, "best", best);
    let mut text = serde_json::to_string_pretty(&Value::Object(map))?;
    text.push('\n');
    Ok(text)
}

/// Runs `cfg` and writes `metrics.csv`, `summary.json` and the canonical
/// `config.cfg` into `dir`.
pub fn run_experiment(cfg: &ExperimentConfig, dir: &Path) -> Result<RunOutput, CliError> {
    cfg.validate()?;
    let metrics = simulate(cfg)?;
    fs::create_dir_all(dir).map_err(CliError::io(dir))?;
    let write = |name: &str, body: &str| {
        let path = dir.join(name);
        fs::write(&path, body).map_err(CliError::io(path))
    };
    write("metrics.csv", &metrics_csv(&metrics))?;
    write("summary.json", &summary_json(cfg, &metrics)?)?;
    write("config.cfg", &cfg.to_canonical())?;
    Ok(RunOutput {
        dir: dir.to_path_buf(),
        metrics,
    })
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path).map_err(CliError::io(path))?;
    ExperimentConfig::parse(&text)
}
