//! Per-epoch metric tables (`metrics.csv`) and run manifests
//! (`run_manifest.txt`).

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use introprior_core::{EpochRecord, PlayerLosses, TrainConfig, TrainState};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult, IoContext};

pub const METRICS_FILE: &str = "metrics.csv";
pub const RUN_MANIFEST: &str = "run_manifest.txt";

const LEADING: [&str; 2] = ["epoch", "phase"];
const TRAILING: [&str; 8] = [
    "warmup_rec",
    "warmup_kl",
    "warmup_loss",
    "resp_entropy_norm",
    "inactive_modes",
    "max_prior_log_var",
    "prior_max_weight",
    "optimizer_updates",
];

/// Modes whose largest responsibility in an epoch stays below this count as
/// inactive in the table.
pub const INACTIVE_THRESHOLD: f64 = 1e-3;

pub fn header() -> Vec<String> {
    let losses = PlayerLosses::default().components();
    LEADING
        .iter()
        .copied()
        .chain(losses.iter().map(|(k, _)| *k))
        .chain(TRAILING)
        .map(String::from)
        .collect()
}

fn fmt(v: f64) -> String {
    v.to_string()
}

/// One table row for `record`, read against the state right after the epoch.
pub fn row(record: &EpochRecord, state: &TrainState) -> Vec<String> {
    let mut out = vec![record.epoch.to_string(), record.phase.name().to_string()];
    let losses = record.losses.clone().unwrap_or_default();
    let has_losses = record.losses.is_some();
    for (_, v) in losses.components() {
        out.push(if has_losses { fmt(v) } else { fmt(f64::NAN) });
    }
    let w = record.warmup.unwrap_or_default();
    let has_warm = record.warmup.is_some();
    for v in [w.rec, w.kl, w.loss] {
        out.push(if has_warm { fmt(v) } else { fmt(f64::NAN) });
    }
    out.push(fmt(record.resp_entropy_norm));
    out.push(record.inactive_modes(INACTIVE_THRESHOLD).len().to_string());
    let prior = state.current_prior().unwrap_or_else(|_| state.prior.clone());
    let max_lv = prior.max_log_var().into_iter().fold(f64::NEG_INFINITY, f64::max);
    out.push(fmt(max_lv));
    out.push(fmt(record.weights_end.iter().copied().fold(0.0, f64::max)));
    out.push(record.optimizer_updates.to_string());
    out
}

/// Append-only writer for `metrics.csv`.
pub struct MetricsWriter {
    path: PathBuf,
}

impl MetricsWriter {
    /// Opens `path`, writing the header if the file is new and checking it
    /// otherwise.
    pub fn open(path: &Path) -> CliResult<Self> {
        let expected = header().join(",");
        if path.exists() {
            let text = fs::read_to_string(path).at(path)?;
            let first = text.lines().next().unwrap_or("");
            if first != expected {
                return Err(CliError::Metrics(format!(
                    "{} has a different header; refusing to append",
                    path.display()
                )));
            }
        } else {
            fs::write(path, format!("{expected}\n")).at(path)?;
        }
        Ok(MetricsWriter {
            path: path.to_path_buf(),
        })
    }

    pub fn append(&mut self, cells: &[String]) -> CliResult<()> {
        let mut f = OpenOptions::new().append(true).open(&self.path).at(&self.path)?;
        writeln!(f, "{}", cells.join(",")).at(&self.path)
    }
}

/// A parsed `metrics.csv`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> CliResult<Self> {
        let text = fs::read_to_string(path).at(path)?;
        let mut lines = text.lines();
        let header: Vec<String> = lines
            .next()
            .ok_or_else(|| CliError::Metrics(format!("{} is empty", path.display())))?
            .split(',')
            .map(String::from)
            .collect();
        let mut rows = Vec::new();
        for (i, l) in lines.enumerate() {
            let r: Vec<String> = l.split(',').map(String::from).collect();
            if r.len() != header.len() {
                return Err(CliError::Metrics(format!(
                    "{} row {} has {} cells, header has {}",
                    path.display(),
                    i + 1,
                    r.len(),
                    header.len()
                )));
            }
            rows.push(r);
        }
        Ok(MetricsTable { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let i = self.header.iter().position(|h| h == name)?;
        Some(self.rows.iter().map(|r| r[i].parse().unwrap_or(f64::NAN)).collect())
    }
}

/// Everything needed to rerun an experiment.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub status: String,
    pub metrics: String,
    pub checkpoints: Vec<String>,
    pub resumed_at_epochs: Vec<usize>,
    pub config: TrainConfig,
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

impl RunManifest {
    pub fn new(config: &TrainConfig) -> Self {
        RunManifest {
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: config.seed,
            started_unix: unix_now(),
            finished_unix: None,
            status: "running".into(),
            metrics: METRICS_FILE.into(),
            checkpoints: vec!["checkpoint".into()],
            resumed_at_epochs: Vec::new(),
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> CliResult<()> {
        let path = dir.join(RUN_MANIFEST);
        let text = toml::to_string(self).map_err(|e| CliError::Metrics(e.to_string()))?;
        fs::write(&path, text).at(&path)
    }

    pub fn read(dir: &Path) -> CliResult<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = fs::read_to_string(&path).at(&path)?;
        toml::from_str(&text).map_err(|e| CliError::Metrics(format!("{}: {e}", path.display())))
    }
}
