//! Grid search over the Cartesian product of configuration axes.
//!
//! A grid file is TOML with an optional `target` metric and an `[axes]`
//! table whose leaves are arrays of candidate values:
//!
//! ```toml
//! target = "hist_kl"
//! [axes]
//! hyper.beta_rec = [0.1, 0.2]
//! hyper.beta_kl = [0.3, 1.0]
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use introprior_core::{EvalConfig, EvalReport, TrainConfig};
use rayon::prelude::*;
use serde::Serialize;
use toml::{Table, Value};

use crate::config::with_overrides;
use crate::error::{CliError, CliResult, IoContext};
use crate::run::{evaluate_state, run_training, RunOptions, REPORT_FILE};

pub const SUMMARY_FILE: &str = "summary.csv";
pub const CELL_MANIFEST: &str = "cell_manifest.txt";

/// Metric a search minimizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Gnelbo,
    HistKl,
    HistJsd,
}

impl Target {
    pub fn parse(s: &str) -> CliResult<Self> {
        match s {
            "gnelbo" => Ok(Target::Gnelbo),
            "hist_kl" => Ok(Target::HistKl),
            "hist_jsd" => Ok(Target::HistJsd),
            other => Err(CliError::Config(format!(
                "unknown target `{other}` (expected gnelbo, hist_kl or hist_jsd)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Target::Gnelbo => "gnelbo",
            Target::HistKl => "hist_kl",
            Target::HistJsd => "hist_jsd",
        }
    }

    pub fn of(self, r: &EvalReport) -> f64 {
        match self {
            Target::Gnelbo => r.gnelbo,
            Target::HistKl => r.hist_kl,
            Target::HistJsd => r.hist_jsd,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub target: Target,
    /// Sorted by key.
    pub axes: Vec<(String, Vec<Value>)>,
}

fn flatten(prefix: &str, table: &Table, out: &mut Vec<(String, Vec<Value>)>) -> CliResult<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Table(t) => flatten(&key, t, out)?,
            Value::Array(a) if !a.is_empty() => out.push((key, a.clone())),
            Value::Array(_) => return Err(CliError::Config(format!("axis `{key}` has no values"))),
            _ => return Err(CliError::Config(format!("axis `{key}` must be an array of values"))),
        }
    }
    Ok(())
}

impl GridSpec {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut table: Table = text.parse().map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        let target = match table.remove("target") {
            Some(Value::String(s)) => Target::parse(&s)?,
            Some(_) => return Err(CliError::Config("`target` must be a string".into())),
            None => Target::HistKl,
        };
        let axes = match table.remove("axes") {
            Some(Value::Table(t)) => t,
            Some(_) => return Err(CliError::Config("`axes` must be a table".into())),
            None => return Err(CliError::Config("grid file has no [axes] table".into())),
        };
        if let Some(k) = table.keys().next() {
            return Err(CliError::Config(format!("unknown grid key `{k}`")));
        }
        let mut out = Vec::new();
        flatten("", &axes, &mut out)?;
        if out.is_empty() {
            return Err(CliError::Config("grid has no axes".into()));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        Ok(GridSpec { target, axes: out })
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        Self::parse(&fs::read_to_string(path).at(path)?)
    }

    /// β_rec × β_kl × β_neg for the standard-Gaussian 8Gaussian search.
    pub fn default_8gaussian() -> Self {
        let vals = |v: &[f64]| v.iter().map(|&x| Value::Float(x)).collect::<Vec<_>>();
        GridSpec {
            target: Target::HistKl,
            axes: vec![
                ("hyper.beta_kl".into(), vals(&[0.1, 0.3, 0.5, 1.0])),
                ("hyper.beta_neg".into(), vals(&[0.5, 0.9, 1.0])),
                ("hyper.beta_rec".into(), vals(&[0.1, 0.2, 0.5, 1.0])),
            ],
        }
    }

    /// Every combination, the last axis varying fastest.
    pub fn cells(&self) -> Vec<Vec<(String, Value)>> {
        let mut cells = vec![Vec::new()];
        for (k, values) in &self.axes {
            let mut next = Vec::with_capacity(cells.len() * values.len());
            for c in &cells {
                for v in values {
                    let mut c = c.clone();
                    c.push((k.clone(), v.clone()));
                    next.push(c);
                }
            }
            cells = next;
        }
        cells
    }
}

/// Outcome of one seed of one cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub report: Result<EvalReport, String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub index: usize,
    pub overrides: Vec<(String, Value)>,
    pub runs: Vec<SeedOutcome>,
}

impl CellResult {
    fn ok(&self) -> Vec<&EvalReport> {
        self.runs.iter().filter_map(|r| r.report.as_ref().ok()).collect()
    }

    /// Mean of `f` over the seeds that finished, or `None` if none did.
    pub fn mean(&self, f: impl Fn(&EvalReport) -> f64) -> Option<f64> {
        let ok = self.ok();
        (!ok.is_empty()).then(|| ok.iter().map(|r| f(r)).sum::<f64>() / ok.len() as f64)
    }
}

/// Cell indices, best first: ascending mean target, then cell index; cells
/// without a finished seed come last.
pub fn rank_cells(cells: &[CellResult], target: Target) -> Vec<usize> {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| {
        let (ma, mb) = (cells[a].mean(|r| target.of(r)), cells[b].mean(|r| target.of(r)));
        match (ma, mb) {
            (Some(x), Some(y)) => x.total_cmp(&y).then(cells[a].index.cmp(&cells[b].index)),
            (Some(_), None) => std::cmp::Ordering::Less,
            (None, Some(_)) => std::cmp::Ordering::Greater,
            (None, None) => cells[a].index.cmp(&cells[b].index),
        }
    });
    order
}

fn value_text(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

pub fn summary_csv(spec: &GridSpec, cells: &[CellResult]) -> String {
    let mut s = String::from("rank,cell");
    for (k, _) in &spec.axes {
        let _ = write!(s, ",{k}");
    }
    s.push_str(",seeds_ok,seeds_failed,gnelbo,hist_kl,hist_jsd,target_metric,target_value\n");
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NaN".into());
    for (rank, &i) in rank_cells(cells, spec.target).iter().enumerate() {
        let c = &cells[i];
        let _ = write!(s, "{},{}", rank + 1, c.index);
        for (_, v) in &c.overrides {
            let _ = write!(s, ",{}", value_text(v));
        }
        let ok = c.ok().len();
        let _ = writeln!(
            s,
            ",{ok},{},{},{},{},{},{}",
            c.runs.len() - ok,
            cell(c.mean(|r| r.gnelbo)),
            cell(c.mean(|r| r.hist_kl)),
            cell(c.mean(|r| r.hist_jsd)),
            spec.target.name(),
            cell(c.mean(|r| spec.target.of(r))),
        );
    }
    s
}

#[derive(Serialize)]
struct CellManifest<'a> {
    cell: usize,
    target: &'a str,
    overrides: Table,
    runs: Vec<RunEntry>,
}

#[derive(Serialize)]
struct RunEntry {
    seed: u64,
    dir: String,
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    gnelbo: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hist_kl: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hist_jsd: Option<f64>,
}

fn write_cell_manifest(dir: &Path, spec: &GridSpec, c: &CellResult) -> CliResult<()> {
    let mut overrides = Table::new();
    for (k, v) in &c.overrides {
        overrides.insert(k.clone(), v.clone());
    }
    let m = CellManifest {
        cell: c.index,
        target: spec.target.name(),
        overrides,
        runs: c
            .runs
            .iter()
            .map(|r| RunEntry {
                seed: r.seed,
                dir: r.dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default(),
                status: match &r.report {
                    Ok(_) => "ok".into(),
                    Err(e) => format!("failed: {e}"),
                },
                gnelbo: r.report.as_ref().ok().map(|x| x.gnelbo),
                hist_kl: r.report.as_ref().ok().map(|x| x.hist_kl),
                hist_jsd: r.report.as_ref().ok().map(|x| x.hist_jsd),
            })
            .collect(),
    };
    let path = dir.join(CELL_MANIFEST);
    let text = toml::to_string(&m).map_err(|e| CliError::Config(e.to_string()))?;
    fs::write(&path, text).at(&path)
}

pub fn cell_dir(out: &Path, index: usize) -> PathBuf {
    out.join(format!("cell-{index:03}"))
}

/// Trains and evaluates every cell for `seeds` seeds starting at the base
/// config's seed. A failing run is recorded and the search goes on.
pub fn grid_search(
    base: &TrainConfig,
    spec: &GridSpec,
    seeds: usize,
    eval: &EvalConfig,
    out: &Path,
    quiet: bool,
) -> CliResult<Vec<CellResult>> {
    if seeds == 0 {
        return Err(CliError::Usage("--seeds must be >= 1".into()));
    }
    let cells = spec.cells();
    let configs: Vec<TrainConfig> = cells
        .iter()
        .map(|o| with_overrides(base, o))
        .collect::<CliResult<_>>()?;
    fs::create_dir_all(out).at(out)?;
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| (0..seeds as u64).map(move |s| (c, s)))
        .collect();
    let outcomes: Vec<SeedOutcome> = jobs
        .par_iter()
        .map(|&(c, s)| {
            let mut cfg = configs[c].clone();
            cfg.seed = base.seed + s;
            let dir = cell_dir(out, c).join(format!("seed-{}", cfg.seed));
            let report = run_training(Some(cfg), &dir, RunOptions { quiet: true, ..Default::default() })
                .and_then(|state| evaluate_state(&state, eval, Some(&dir.join(REPORT_FILE))))
                .map_err(|e| e.to_string());
            if !quiet {
                match &report {
                    Ok(r) => eprintln!("cell {c} seed {s}: {}={}", spec.target.name(), spec.target.of(r)),
                    Err(e) => eprintln!("cell {c} seed {s}: failed: {e}"),
                }
            }
            SeedOutcome {
                seed: base.seed + s,
                dir,
                report,
            }
        })
        .collect();
    let mut results: Vec<CellResult> = cells
        .into_iter()
        .enumerate()
        .map(|(index, overrides)| CellResult {
            index,
            overrides,
            runs: Vec::new(),
        })
        .collect();
    for ((c, _), o) in jobs.into_iter().zip(outcomes) {
        results[c].runs.push(o);
    }
    for r in &results {
        write_cell_manifest(&cell_dir(out, r.index), spec, r)?;
    }
    let path = out.join(SUMMARY_FILE);
    fs::write(&path, summary_csv(spec, &results)).at(&path)?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_expand() {
        let g = GridSpec::parse(
            "target = \"hist_jsd\"\n[axes]\nhyper.beta_rec = [0.1, 0.2]\n\"hyper.beta_kl\" = [1.0]\nprior.kind = [\"sg\", \"mog\", \"vamp-to-mog\"]\n",
        )
        .unwrap();
        assert_eq!(g.target, Target::HistJsd);
        let keys: Vec<&str> = g.axes.iter().map(|(k, _)| k.as_str()).collect();
        assert_eq!(keys, ["hyper.beta_kl", "hyper.beta_rec", "prior.kind"]);
        let cells = g.cells();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[1][2].1, Value::String("mog".into()));
        assert_eq!(cells[3][1].1, Value::Float(0.2));
    }

    #[test]
    fn bad_grids() {
        for text in [
            "[axes]\nhyper.beta_rec = []",
            "[axes]\nhyper.beta_rec = 0.2",
            "target = \"fid\"\n[axes]\nseed = [1]",
            "bogus = 1\n[axes]\nseed = [1]",
            "target = \"hist_kl\"",
        ] {
            assert!(GridSpec::parse(text).is_err(), "{text}");
        }
    }

    #[test]
    fn default_grid_contains_the_reported_optimum() {
        let g = GridSpec::default_8gaussian();
        let hit = g.cells().iter().any(|c| {
            let get = |k: &str| c.iter().find(|(n, _)| n == k).unwrap().1.as_float().unwrap();
            (get("hyper.beta_rec"), get("hyper.beta_kl"), get("hyper.beta_neg")) == (0.2, 0.3, 0.9)
        });
        assert!(hit);
        let base = TrainConfig::default();
        for c in g.cells() {
            with_overrides(&base, &c).unwrap();
        }
    }

    fn report(kl: f64) -> EvalReport {
        EvalReport {
            gnelbo: 1.0,
            hist_kl: kl,
            hist_jsd: kl / 2.0,
            resp_entropy_norm: 0.0,
            resp_applicable: false,
            ce_diag: 0.0,
            ce_stderr: 0.0,
            real_samples: 1,
            gen_samples: 1,
            heldout: 1,
            grid_bins: 50,
            hist_bins: 10,
            epsilon: 1e-10,
            t_eval: 1,
        }
    }

    #[test]
    fn ranking_puts_failures_last_and_breaks_ties_by_index() {
        let cell = |index, kls: &[Option<f64>]| CellResult {
            index,
            overrides: Vec::new(),
            runs: kls
                .iter()
                .enumerate()
                .map(|(s, k)| SeedOutcome {
                    seed: s as u64,
                    dir: PathBuf::new(),
                    report: k.map(report).ok_or_else(|| "boom".to_string()),
                })
                .collect(),
        };
        let cells = vec![
            cell(0, &[None, None]),
            cell(1, &[Some(0.5), Some(0.9)]),
            cell(2, &[Some(0.6), None]),
            cell(3, &[Some(0.2)]),
            cell(4, &[Some(0.6)]),
        ];
        assert_eq!(rank_cells(&cells, Target::HistKl), vec![3, 2, 4, 1, 0]);
        let csv = summary_csv(&GridSpec { target: Target::HistKl, axes: Vec::new() }, &cells);
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].starts_with("1,3,1,0,"));
        assert!(lines[5].starts_with("5,0,0,2,NaN"));
    }
}
