//! Argument parsing and subcommand dispatch.

use std::ffi::OsString;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use introprior_core::evalsuite::emit_plots;
use introprior_core::theory::{run_theory_suite, TheorySuiteConfig};
use introprior_core::trainer::{probe_encoder_overfit, probe_samples, ProbeConfig, ProbeSets, ProbeSetup};
use introprior_core::{Dataset, EvalConfig, Models, TrainConfig};

use crate::checkpoint::{load_checkpoint, resolve_checkpoint_dir};
use crate::config::{load_config, parse_override, with_overrides};
use crate::error::{CliError, CliResult, IoContext};
use crate::grid::{grid_search, rank_cells, GridSpec};
use crate::run::{evaluate_state, run_training, RunOptions};

/// Exit status for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "INTROPRIOR_THREADS";

#[derive(Debug, Parser)]
#[command(name = "introprior", version, about = "Soft-IntroVAE with a learnable MoG prior on 2D densities")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model and write metrics, a manifest and checkpoints to DIR.
    Train(TrainArgs),
    /// Evaluate a checkpoint on its dataset.
    Eval(EvalArgs),
    /// Train and evaluate every cell of a hyperparameter grid.
    GridSearch(GridArgs),
    /// Check the analytic results against finite differences and oracles.
    VerifyTheory(TheoryArgs),
    /// Overfit the encoder of a checkpoint against fixed real and fake sets.
    ProbeEncoder(ProbeArgs),
    /// Draw data, generated samples and the latent prior of a checkpoint.
    Plot(PlotArgs),
    /// Write samples from a benchmark dataset as CSV.
    DumpData(DumpArgs),
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// `key=value` config override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Continue the run already in --out.
    #[arg(long)]
    resume: bool,
    /// Stop once this many epochs are complete.
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args, Clone)]
struct EvalFlags {
    #[arg(long, default_value_t = EvalConfig::default().grid_bins)]
    grid_bins: usize,
    #[arg(long, default_value_t = EvalConfig::default().hist_bins)]
    hist_bins: usize,
    #[arg(long, default_value_t = EvalConfig::default().hist_samples)]
    hist_samples: usize,
    #[arg(long, default_value_t = EvalConfig::default().heldout)]
    heldout: usize,
    #[arg(long, default_value_t = EvalConfig::default().t_eval)]
    t_eval: usize,
    #[arg(long, default_value_t = EvalConfig::default().epsilon)]
    epsilon: f64,
    #[arg(long = "eval-seed", default_value_t = EvalConfig::default().seed)]
    eval_seed: u64,
}

impl EvalFlags {
    fn config(&self) -> EvalConfig {
        EvalConfig {
            grid_bins: self.grid_bins,
            hist_bins: self.hist_bins,
            hist_samples: self.hist_samples,
            heldout: self.heldout,
            t_eval: self.t_eval,
            epsilon: self.epsilon,
            seed: self.eval_seed,
            ..EvalConfig::default()
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
    #[command(flatten)]
    eval: EvalFlags,
}

#[derive(Debug, Args)]
struct GridArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Grid file; the default is the 8Gaussian β grid.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    seeds: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(flatten)]
    eval: EvalFlags,
    #[arg(long)]
    quiet: bool,
}

#[derive(Debug, Args)]
struct TheoryArgs {
    #[arg(long, default_value_t = 1e-6)]
    tolerance: f64,
    #[arg(long, default_value_t = 50)]
    instances: usize,
    #[arg(long, default_value_t = 1000)]
    triples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum ProbeMode {
    Equal,
    SingleReal,
    SingleFake,
}

#[derive(Debug, Args)]
struct ProbeArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long, value_enum)]
    mode: ProbeMode,
    #[arg(long, default_value_t = 1.0)]
    beta_neg: f64,
    #[arg(long, default_value_t = ProbeConfig::default().steps)]
    steps: usize,
    #[arg(long, default_value_t = ProbeConfig::default().lr)]
    lr: f64,
    #[arg(long, default_value_t = ProbeConfig::default().t)]
    t: usize,
    #[arg(long, default_value_t = ProbeConfig::default().record_every)]
    record_every: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV of the recorded curves.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PlotArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DumpArgs {
    #[arg(long, value_parser = parse_dataset)]
    name: Dataset,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn parse_dataset(s: &str) -> Result<Dataset, String> {
    s.parse().map_err(|e: introprior_core::Error| e.to_string())
}

/// Parses `argv` (program name first), runs the subcommand and returns the
/// process exit status.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return EXIT_USAGE;
    }
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn configure_threads() -> CliResult<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n >= 1)
        .ok_or_else(|| CliError::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`")))?;
    // A pool configured earlier in the same process stays in place.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> CliResult<i32> {
    match cmd {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::GridSearch(a) => grid(a),
        Command::VerifyTheory(a) => verify_theory(a),
        Command::ProbeEncoder(a) => probe(a),
        Command::Plot(a) => plot(a),
        Command::DumpData(a) => dump_data(a),
    }
}

fn base_config(path: Option<&Path>, overrides: &[String]) -> CliResult<TrainConfig> {
    let cfg = match path {
        Some(p) => load_config(p)?,
        None => TrainConfig::default(),
    };
    let o = overrides.iter().map(|s| parse_override(s)).collect::<CliResult<Vec<_>>>()?;
    with_overrides(&cfg, &o)
}

fn train(a: TrainArgs) -> CliResult<i32> {
    let opts = RunOptions {
        resume: a.resume,
        max_epochs: a.max_epochs,
        quiet: a.quiet,
    };
    let config = if a.resume {
        if a.config.is_some() || a.seed.is_some() || !a.overrides.is_empty() {
            return Err(CliError::Usage("--resume takes its config from the run directory".into()));
        }
        None
    } else {
        let mut cfg = base_config(a.config.as_deref(), &a.overrides)?;
        if let Some(s) = a.seed {
            cfg.seed = s;
        }
        Some(cfg)
    };
    let state = run_training(config, &a.out, opts)?;
    if !a.quiet {
        println!("{} epochs complete; run in {}", state.epoch, a.out.display());
    }
    Ok(0)
}

fn eval(a: EvalArgs) -> CliResult<i32> {
    let state = load_checkpoint(&resolve_checkpoint_dir(&a.ckpt))?;
    let report = evaluate_state(&state, &a.eval.config(), a.out.as_deref())?;
    print!("{}", report.to_kv());
    Ok(0)
}

fn grid(a: GridArgs) -> CliResult<i32> {
    let base = base_config(a.config.as_deref(), &a.overrides)?;
    let spec = match &a.grid {
        Some(p) => GridSpec::load(p)?,
        None => GridSpec::default_8gaussian(),
    };
    let results = grid_search(&base, &spec, a.seeds, &a.eval.config(), &a.out, a.quiet)?;
    let order = rank_cells(&results, spec.target);
    if let Some(&best) = order.first() {
        let c = &results[best];
        let desc: Vec<String> = c.overrides.iter().map(|(k, v)| format!("{k}={v}")).collect();
        match c.mean(|r| spec.target.of(r)) {
            Some(v) => println!("best cell {}: {} ({} = {v})", c.index, desc.join(" "), spec.target.name()),
            None => println!("no cell finished"),
        }
    }
    println!("summary in {}", a.out.join(crate::grid::SUMMARY_FILE).display());
    Ok(0)
}

fn verify_theory(a: TheoryArgs) -> CliResult<i32> {
    if !(a.tolerance > 0.0) {
        return Err(CliError::Usage("--tolerance must be > 0".into()));
    }
    let report = run_theory_suite(&TheorySuiteConfig {
        tolerance: a.tolerance,
        instances: a.instances,
        triples: a.triples,
        seed: a.seed,
    });
    print!("{}", report.table());
    Ok(if report.passed() { 0 } else { 1 })
}

fn probe(a: ProbeArgs) -> CliResult<i32> {
    let state = load_checkpoint(&resolve_checkpoint_dir(&a.ckpt))?;
    let setup = match a.mode {
        ProbeMode::Equal => ProbeSetup::Equal,
        ProbeMode::SingleReal => ProbeSetup::SingleReal,
        ProbeMode::SingleFake => ProbeSetup::SingleFake,
    };
    let samples = probe_samples(state.config.dataset(), 10_000, a.seed);
    let prior = state.current_prior()?;
    let cfg = ProbeConfig {
        beta_neg: a.beta_neg,
        steps: a.steps,
        lr: a.lr,
        t: a.t,
        record_every: a.record_every,
        seed: a.seed,
    };
    let curves = probe_encoder_overfit(
        &state.encoder,
        &state.decoder,
        &prior,
        &ProbeSets::build(setup, &samples),
        &state.config.hyper,
        &cfg,
    )?;
    let mut csv = String::from("step,set,sample,rec,kl,neg_elbo\n");
    for (k, step) in curves.steps.iter().enumerate() {
        for (set, rows) in [("real", &curves.real), ("fake", &curves.fake)] {
            for (i, c) in rows.iter().enumerate() {
                let p = c[k];
                csv.push_str(&format!("{step},{set},{i},{},{},{}\n", p.rec, p.kl, p.neg_elbo()));
            }
        }
    }
    match &a.out {
        Some(p) => fs::write(p, &csv).at(p)?,
        None => print!("{csv}"),
    }
    if let ProbeSetup::SingleReal = setup {
        if let Some(d) = curves.single_real_direction() {
            println!(
                "single-real: fake-only KL {:.4} -> {:.4}, enclosed negative ELBO {:.4} -> {:.4}: {}",
                d.fake_kl.0,
                d.fake_kl.1,
                d.enclosed_neg_elbo.0,
                d.enclosed_neg_elbo.1,
                if d.passed() { "PASS" } else { "FAIL" }
            );
        }
    }
    Ok(0)
}

fn plot(a: PlotArgs) -> CliResult<i32> {
    let state = load_checkpoint(&resolve_checkpoint_dir(&a.ckpt))?;
    let prior = state.current_prior()?;
    let models = Models {
        encoder: &state.encoder,
        decoder: &state.decoder,
        prior: &prior,
    };
    let files = emit_plots(&models, state.config.dataset(), &a.out, a.n, a.seed)?;
    for p in [&files.real, &files.generated, &files.latent, &files.markers] {
        println!("{}", p.display());
    }
    Ok(0)
}

fn dump_data(a: DumpArgs) -> CliResult<i32> {
    let x = introprior_core::data2d::sample_dataset(a.name.name(), a.n, a.seed)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).at(parent)?;
    }
    let mut f = std::io::BufWriter::new(fs::File::create(&a.out).at(&a.out)?);
    writeln!(f, "x,y").at(&a.out)?;
    for r in 0..x.rows() {
        writeln!(f, "{},{}", x.get(r, 0), x.get(r, 1)).at(&a.out)?;
    }
    f.flush().at(&a.out)?;
    Ok(0)
}
