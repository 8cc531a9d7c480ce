use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use bmsfed::federation::{Method, RoundMetrics};
use rayon::prelude::*;

use crate::config::{KEYS, METHOD_SPECIFIC};
use crate::runner::{run_dir_name, run_experiment, simulate};
use crate::{CliError, ExperimentConfig};

pub const COMPARISON_HEADER: &str =
    "label,method,runs,acc_multi_median,acc_multi_iqr,acc_uni_a_median,acc_uni_a_iqr,acc_uni_i_median,acc_uni_i_iqr";

/// Median and interquartile range.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Spread {
    pub median: f64,
    pub iqr: f64,
}

/// Linear-interpolation quantile of an ascending slice.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty(), "quantile of an empty sample");
    let pos = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

impl Spread {
    pub fn of(values: &[f64]) -> Spread {
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        Spread {
            median: quantile(&v, 0.5),
            iqr: quantile(&v, 0.75) - quantile(&v, 0.25),
        }
    }
}

/// One method's final-round accuracies across seeds.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub label: String,
    pub method: Method,
    /// Final-round metrics, one per seed in the order given.
    pub finals: Vec<RoundMetrics>,
    pub acc_multi: Spread,
    pub acc_uni_a: Spread,
    pub acc_uni_i: Spread,
}

impl ComparisonRow {
    fn new(cfg: &ExperimentConfig, finals: Vec<RoundMetrics>) -> Self {
        let col = |f: fn(&RoundMetrics) -> f64| Spread::of(&finals.iter().map(f).collect::<Vec<_>>());
        ComparisonRow {
            label: cfg.label.clone(),
            method: cfg.method,
            acc_multi: col(|m| m.acc_multi),
            acc_uni_a: col(|m| m.acc_uni_a),
            acc_uni_i: col(|m| m.acc_uni_i),
            finals,
        }
    }
}

/// Configs in one comparison may differ only in method-specific keys, and
/// their labels must be distinct.
pub fn check_consistency(configs: &[ExperimentConfig]) -> Result<(), CliError> {
    let Some(first) = configs.first() else {
        return Err(CliError::Consistency("no configs given".into()));
    };
    let mut labels = BTreeSet::new();
    for cfg in configs {
        if !labels.insert(cfg.label.as_str()) {
            return Err(CliError::Consistency(format!(
                "label `{}` used twice; set `label` to tell them apart",
                cfg.label
            )));
        }
        for key in KEYS.iter().filter(|k| !METHOD_SPECIFIC.contains(k)) {
            let (a, b) = (first.value_of(key), cfg.value_of(key));
            if a != b {
                return Err(CliError::Consistency(format!(
                    "`{key}` is {} in `{}` but {} in `{}`",
                    a.unwrap_or_default(),
                    first.label,
                    b.unwrap_or_default(),
                    cfg.label
                )));
            }
        }
    }
    Ok(())
}

/// Runs every config under every seed (the configs' own `seed` values are
/// replaced). With `out`, each run writes its files to
/// `out/<label>-seed<seed>/` and the table goes to `out/comparison.csv`.
pub fn compare_methods(
    configs: &[ExperimentConfig],
    seeds: &[u64],
    out: Option<&Path>,
) -> Result<Vec<ComparisonRow>, CliError> {
    check_consistency(configs)?;
    if seeds.is_empty() {
        return Err(CliError::Consistency("no seeds given".into()));
    }
    let jobs: Vec<ExperimentConfig> = configs
        .iter()
        .flat_map(|c| seeds.iter().map(move |&seed| ExperimentConfig { seed, ..c.clone() }))
        .collect();
    let finals: Vec<RoundMetrics> = jobs
        .par_iter()
        .map(|cfg| {
            let metrics = match out {
                Some(root) => run_experiment(cfg, &root.join(run_dir_name(cfg)))?.metrics,
                None => simulate(cfg)?,
            };
            Ok(*metrics.last().expect("a run has at least one round"))
        })
        .collect::<Result<_, CliError>>()?;
    let rows: Vec<ComparisonRow> = configs
        .iter()
        .zip(finals.chunks(seeds.len()))
        .map(|(cfg, f)| ComparisonRow::new(cfg, f.to_vec()))
        .collect();
    if let Some(root) = out {
        fs::create_dir_all(root).map_err(CliError::io(root))?;
        let path = root.join("comparison.csv");
        fs::write(&path, comparison_csv(&rows)).map_err(CliError::io(path))?;
    }
    Ok(rows)
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> String {
    let mut out = String::from(COMPARISON_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            r.label,
            r.method,
            r.finals.len(),
            r.acc_multi.median,
            r.acc_multi.iqr,
            r.acc_uni_a.median,
            r.acc_uni_a.iqr,
            r.acc_uni_i.median,
            r.acc_uni_i.iqr
        );
    }
    out
}
