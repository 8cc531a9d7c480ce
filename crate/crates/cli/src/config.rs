//! Flat `key = value` experiment configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use bmsfed::data::DataSpec;
use bmsfed::federation::{FederationConfig, Method, SimulationConfig};

use crate::CliError;

/// A validated experiment description. Every field has a value; omitted
/// optional keys are filled with defaults at parse time.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub method: Method,
    /// Row name used by `compare`; defaults to the method name.
    pub label: String,
    pub seed: u64,
    pub rounds: usize,
    pub clients: usize,
    pub budget: usize,
    pub s_sample: usize,
    pub chi: f64,
    /// `None` means an IID split.
    pub alpha: Option<f64>,
    pub fraction_uni: f64,
    pub drop_prob: f64,
    pub lr: f64,
    pub lr_decay_round: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub classes: usize,
    pub per_class: usize,
    pub test_per_class: usize,
    pub dim_a: usize,
    pub dim_i: usize,
    pub snr_a: f64,
    pub snr_i: f64,
    pub scale: f64,
    pub hidden: Vec<usize>,
    pub embedding_dim: usize,
}

const REQUIRED: [&str; 5] = ["method", "seed", "rounds", "clients", "budget"];

/// Canonical key order.
pub const KEYS: [&str; 26] = [
    "method",
    "label",
    "seed",
    "rounds",
    "clients",
    "budget",
    "s_sample",
    "chi",
    "alpha",
    "fraction_uni",
    "drop_prob",
    "lr",
    "lr_decay_round",
    "local_epochs",
    "batch_size",
    "classes",
    "per_class",
    "test_per_class",
    "dim_a",
    "dim_i",
    "snr_a",
    "snr_i",
    "scale",
    "hidden",
    "embedding_dim",
    "iid",
];

/// Keys whose value may differ between configs in one comparison.
pub const METHOD_SPECIFIC: [&str; 6] = ["method", "label", "seed", "s_sample", "chi", "drop_prob"];

/// Default stochastic-greedy pool: enough draws for a `1 − 1/e − 0.1`
/// style guarantee, capped at the client count.
pub fn default_s_sample(clients: usize, budget: usize) -> usize {
    if budget == 0 {
        return clients;
    }
    let s = (clients as f64 / budget as f64 * 10f64.ln()).ceil() as usize;
    s.clamp(1, clients.max(1))
}

struct Entry {
    line: usize,
    value: String,
}

struct Reader {
    entries: BTreeMap<String, Entry>,
}

impl Reader {
    fn line(&self, key: &str) -> usize {
        self.entries.get(key).map_or(0, |e| e.line)
    }

    fn fail(&self, key: &str, msg: impl Into<String>) -> CliError {
        CliError::Config {
            line: self.line(key),
            key: key.to_string(),
            msg: msg.into(),
        }
    }

    fn get<T: FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        match self.entries.get(key) {
            None => Ok(default),
            Some(e) => e.value.parse().map_err(|_| {
                self.fail(
                    key,
                    format!("cannot parse '{}' as {}", e.value, std::any::type_name::<T>()),
                )
            }),
        }
    }

    fn required<T: FromStr>(&self, key: &str) -> Result<T, CliError> {
        let e = self
            .entries
            .get(key)
            .ok_or_else(|| self.fail(key, "required key missing"))?;
        e.value.parse().map_err(|_| {
            self.fail(
                key,
                format!("cannot parse '{}' as {}", e.value, std::any::type_name::<T>()),
            )
        })
    }

    fn finite(&self, key: &str, default: f64) -> Result<f64, CliError> {
        let v: f64 = self.get(key, default)?;
        if v.is_nan() {
            return Err(self.fail(key, "NaN is not allowed"));
        }
        Ok(v)
    }
}

fn parse_hidden(text: &str) -> Option<Vec<usize>> {
    let text = text.trim();
    if text == "none" {
        return Some(Vec::new());
    }
    text.split(',')
        .map(|p| p.trim().parse().ok().filter(|&w| w > 0))
        .collect()
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, Entry> = BTreeMap::new();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| CliError::Config {
                line,
                key: content.to_string(),
                msg: "expected `key = value`".into(),
            })?;
            let (key, value) = (key.trim(), value.trim());
            if !KEYS.contains(&key) {
                return Err(CliError::Config {
                    line,
                    key: key.to_string(),
                    msg: "unknown key".into(),
                });
            }
            if value.is_empty() {
                return Err(CliError::Config {
                    line,
                    key: key.to_string(),
                    msg: "empty value".into(),
                });
            }
            if let Some(prev) = entries.get(key) {
                return Err(CliError::Config {
                    line,
                    key: key.to_string(),
                    msg: format!("duplicate key (first set on line {})", prev.line),
                });
            }
            entries.insert(
                key.to_string(),
                Entry {
                    line,
                    value: value.to_string(),
                },
            );
        }
        let r = Reader { entries };
        for key in REQUIRED {
            if !r.entries.contains_key(key) {
                return Err(r.fail(key, "required key missing"));
            }
        }

        let method: Method = {
            let text: String = r.required("method")?;
            text.parse().map_err(|_| {
                let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
                r.fail(
                    "method",
                    format!("unknown method '{text}', expected one of {}", names.join(", ")),
                )
            })?
        };
        let clients: usize = r.required("clients")?;
        let budget: usize = r.required("budget")?;

        let iid: bool = r.get("iid", false)?;
        let alpha = match r.entries.get("alpha") {
            None => None,
            Some(e) if e.value == "iid" => None,
            Some(_) => Some(r.finite("alpha", 1.0)?),
        };
        if iid && alpha.is_some() {
            return Err(r.fail("iid", "conflicts with a numeric alpha"));
        }

        let hidden = match r.entries.get("hidden") {
            None => vec![48],
            Some(e) => parse_hidden(&e.value).ok_or_else(|| {
                r.fail(
                    "hidden",
                    format!(
                        "expected positive widths like `48` or `64,32` or `none`, got '{}'",
                        e.value
                    ),
                )
            })?,
        };

        let cfg = ExperimentConfig {
            method,
            label: r.get("label", method.name().to_string())?,
            seed: r.required("seed")?,
            rounds: r.required("rounds")?,
            clients,
            budget,
            s_sample: r.get("s_sample", default_s_sample(clients, budget))?,
            chi: r.finite("chi", 1.5)?,
            alpha,
            fraction_uni: r.finite("fraction_uni", 0.0)?,
            drop_prob: r.finite("drop_prob", 0.5)?,
            lr: r.finite("lr", 0.3)?,
            lr_decay_round: r.get("lr_decay_round", 0)?,
            local_epochs: r.get("local_epochs", 2)?,
            batch_size: r.get("batch_size", 32)?,
            classes: r.get("classes", 6)?,
            per_class: r.get("per_class", 200)?,
            test_per_class: r.get("test_per_class", 100)?,
            dim_a: r.get("dim_a", 16)?,
            dim_i: r.get("dim_i", 16)?,
            snr_a: r.finite("snr_a", 4.0)?,
            snr_i: r.finite("snr_i", 1.0)?,
            scale: r.finite("scale", 1.0)?,
            hidden,
            embedding_dim: r.get("embedding_dim", 16)?,
        };
        cfg.validate_with(&r)?;
        Ok(cfg)
    }

    fn validate_with(&self, r: &Reader) -> Result<(), CliError> {
        let check = |ok: bool, key: &str, msg: String| if ok { Ok(()) } else { Err(r.fail(key, msg)) };
        check(
            self.label
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c)),
            "label",
            format!("'{}' may only contain [A-Za-z0-9._-]", self.label),
        )?;
        check(self.rounds >= 1, "rounds", "must be >= 1".into())?;
        check(self.clients >= 1, "clients", "must be >= 1".into())?;
        check(
            self.budget >= 1 && self.budget <= self.clients,
            "budget",
            format!("must be in 1..={} (clients), got {}", self.clients, self.budget),
        )?;
        check(self.s_sample >= 1, "s_sample", "must be >= 1".into())?;
        check(
            self.chi >= 1.0 && self.chi.is_finite(),
            "chi",
            format!("must be >= 1, got {}", self.chi),
        )?;
        if let Some(a) = self.alpha {
            check(
                a > 0.0 && a.is_finite(),
                "alpha",
                format!("must be > 0 or `iid`, got {a}"),
            )?;
        }
        check(
            (0.0..=1.0).contains(&self.fraction_uni),
            "fraction_uni",
            format!("must be in [0,1], got {}", self.fraction_uni),
        )?;
        check(
            (0.0..=1.0).contains(&self.drop_prob),
            "drop_prob",
            format!("must be in [0,1], got {}", self.drop_prob),
        )?;
        check(
            self.lr > 0.0 && self.lr.is_finite(),
            "lr",
            format!("must be > 0, got {}", self.lr),
        )?;
        check(self.local_epochs >= 1, "local_epochs", "must be >= 1".into())?;
        check(self.batch_size >= 1, "batch_size", "must be >= 1".into())?;
        check(
            self.classes >= 2,
            "classes",
            format!("must be >= 2, got {}", self.classes),
        )?;
        check(self.per_class >= 1, "per_class", "must be >= 1".into())?;
        check(self.test_per_class >= 1, "test_per_class", "must be >= 1".into())?;
        check(
            self.dim_a >= self.classes,
            "dim_a",
            format!("must be >= classes ({})", self.classes),
        )?;
        check(
            self.dim_i >= self.classes,
            "dim_i",
            format!("must be >= classes ({})", self.classes),
        )?;
        check(
            self.snr_a > 0.0,
            "snr_a",
            format!("must be > 0 (inf for noiseless), got {}", self.snr_a),
        )?;
        check(
            self.snr_i > 0.0,
            "snr_i",
            format!("must be > 0 (inf for noiseless), got {}", self.snr_i),
        )?;
        check(
            self.scale > 0.0 && self.scale.is_finite(),
            "scale",
            format!("must be > 0, got {}", self.scale),
        )?;
        check(self.embedding_dim >= 1, "embedding_dim", "must be >= 1".into())?;
        check(
            self.clients <= self.classes * self.per_class,
            "clients",
            format!(
                "more clients than the {} training samples",
                self.classes * self.per_class
            ),
        )?;
        Ok(())
    }

    /// Checks the invariants again on a value built in code.
    pub fn validate(&self) -> Result<(), CliError> {
        Self::parse(&self.to_canonical()).map(|_| ())
    }

    /// Every key in canonical order, one `key = value` per line.
    pub fn to_canonical(&self) -> String {
        let mut out = String::new();
        for key in KEYS {
            if let Some(value) = self.value_of(key) {
                let _ = writeln!(out, "{key} = {value}");
            }
        }
        out
    }

    /// Canonical text of one key, `None` for aliases that are never emitted.
    pub fn value_of(&self, key: &str) -> Option<String> {
        Some(match key {
            "method" => self.method.name().to_string(),
            "label" => self.label.clone(),
            "seed" => self.seed.to_string(),
            "rounds" => self.rounds.to_string(),
            "clients" => self.clients.to_string(),
            "budget" => self.budget.to_string(),
            "s_sample" => self.s_sample.to_string(),
            "chi" => self.chi.to_string(),
            "alpha" => self.alpha.map_or_else(|| "iid".to_string(), |a| a.to_string()),
            "fraction_uni" => self.fraction_uni.to_string(),
            "drop_prob" => self.drop_prob.to_string(),
            "lr" => self.lr.to_string(),
            "lr_decay_round" => self.lr_decay_round.to_string(),
            "local_epochs" => self.local_epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "classes" => self.classes.to_string(),
            "per_class" => self.per_class.to_string(),
            "test_per_class" => self.test_per_class.to_string(),
            "dim_a" => self.dim_a.to_string(),
            "dim_i" => self.dim_i.to_string(),
            "snr_a" => self.snr_a.to_string(),
            "snr_i" => self.snr_i.to_string(),
            "scale" => self.scale.to_string(),
            "hidden" => {
                if self.hidden.is_empty() {
                    "none".to_string()
                } else {
                    self.hidden.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
                }
            }
            "embedding_dim" => self.embedding_dim.to_string(),
            _ => return None,
        })
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            data: DataSpec {
                num_classes: self.classes,
                per_class: self.per_class,
                dim_a: self.dim_a,
                dim_i: self.dim_i,
                snr_a: self.snr_a,
                snr_i: self.snr_i,
                scale: self.scale,
            },
            test_per_class: self.test_per_class,
            clients: self.clients,
            alpha: self.alpha,
            fraction_uni: self.fraction_uni,
            hidden: self.hidden.clone(),
            embedding_dim: self.embedding_dim,
            rounds: self.rounds,
            federation: FederationConfig {
                method: self.method,
                seed: self.seed,
                budget: self.budget,
                s_sample: self.s_sample,
                chi: self.chi,
                drop_prob: self.drop_prob,
                lr: self.lr,
                lr_decay_round: self.lr_decay_round,
                local_epochs: self.local_epochs,
                batch_size: self.batch_size,
            },
        }
    }
}
