//! One training run in its own directory: config snapshot, manifest, metric
//! table and a checkpoint refreshed after every epoch.

use std::fs;
use std::path::Path;

use introprior_core::evalsuite::evaluate;
use introprior_core::{EvalConfig, EvalReport, TrainConfig, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::config_to_toml;
use crate::error::{CliError, CliResult, IoContext};
use crate::metrics::{row, unix_now, MetricsWriter, RunManifest, METRICS_FILE};

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const REPORT_FILE: &str = "report.txt";

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct RunOptions {
    /// Continue from the checkpoint in the output directory.
    pub resume: bool,
    /// Stop once this many epochs are complete.
    pub max_epochs: Option<usize>,
    pub quiet: bool,
}

/// Trains into `out`. A fresh run needs `config` and an output directory
/// without a previous run; a resumed run reads both from `out`.
pub fn run_training(config: Option<TrainConfig>, out: &Path, opts: RunOptions) -> CliResult<TrainState> {
    let ckpt = out.join(CHECKPOINT_DIR);
    let (mut state, mut manifest) = if opts.resume {
        let state = load_checkpoint(&ckpt)?;
        let mut m = RunManifest::read(out)?;
        m.resumed_at_epochs.push(state.epoch);
        m.status = "running".into();
        m.finished_unix = None;
        (state, m)
    } else {
        let config = config.ok_or_else(|| CliError::Usage("a fresh run needs a config".into()))?;
        if out.join(METRICS_FILE).exists() || ckpt.exists() {
            return Err(CliError::Usage(format!(
                "{} already holds a run; pass --resume to continue it",
                out.display()
            )));
        }
        fs::create_dir_all(out).at(out)?;
        let path = out.join("config.toml");
        fs::write(&path, config_to_toml(&config)).at(&path)?;
        let state = TrainState::new(config)?;
        let m = RunManifest::new(&state.config);
        (state, m)
    };
    manifest.write(out)?;
    let mut metrics = MetricsWriter::open(&out.join(METRICS_FILE))?;

    while !state.finished() && opts.max_epochs.is_none_or(|m| state.epoch < m) {
        let record = match state.run_epoch() {
            Ok(r) => r,
            Err(e) => {
                manifest.status = format!("failed: {e}");
                manifest.finished_unix = Some(unix_now());
                manifest.write(out)?;
                return Err(e.into());
            }
        };
        let cells = row(&record, &state);
        metrics.append(&cells)?;
        save_checkpoint(&state, &ckpt)?;
        if !opts.quiet {
            println!(
                "epoch {:>4} {:<11} l_e={} l_d={} l_p={} resp_entropy={:.4}",
                record.epoch, cells[1], cells[2], cells[3], cells[4], record.resp_entropy_norm
            );
        }
    }
    if state.finished() {
        manifest.status = "completed".into();
        manifest.finished_unix = Some(unix_now());
    } else {
        manifest.status = format!("stopped after epoch {}", state.epoch);
    }
    manifest.write(out)?;
    Ok(state)
}

/// Evaluates `state` on its training dataset and writes the report.
pub fn evaluate_state(state: &TrainState, cfg: &EvalConfig, out_file: Option<&Path>) -> CliResult<EvalReport> {
    let prior = state.current_prior()?;
    let models = introprior_core::Models {
        encoder: &state.encoder,
        decoder: &state.decoder,
        prior: &prior,
    };
    let report = evaluate(&models, state.config.dataset(), cfg)?;
    if let Some(p) = out_file {
        if let Some(parent) = p.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent).at(parent)?;
        }
        fs::write(p, report.to_kv()).at(p)?;
    }
    Ok(report)
}
