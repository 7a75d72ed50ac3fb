//! Experiment harness behind the `chansparse` binary.

pub mod commands;
pub mod config;
pub mod output;

use std::ffi::OsString;
use std::path::PathBuf;

use chansparse::connectivity::{ArchSpec, TransformKind, TransformSpec};
use chansparse::training::Precision;
use clap::{Args, Parser, Subcommand, ValueEnum};

use commands::{Overrides, VerifyOptions, VerifySource};
use config::{load_arch, ArchSource, ExperimentConfig};

/// Failure classes; each maps to a process exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("runtime error: {0}")]
    Runtime(String),
    #[error("artifact error: {0}")]
    Artifact(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Runtime(_) => 1,
            CliError::Config(_) => 2,
            CliError::Artifact(_) => 3,
        }
    }
}

#[derive(Debug, Parser)]
#[command(
    name = "chansparse",
    version,
    about = "Channel-sparse convnet experiments"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one network per seed.
    Train(RunArgs),
    /// Budget-matched sweep of depth multiplier against sparse random.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Overrides the config's sweep budgets.
        #[arg(long, value_delimiter = ',')]
        budgets: Option<Vec<f64>>,
    },
    /// Train with incremental densification.
    Incremental(RunArgs),
    /// Check that a randomly permuted twin computes the same function.
    Verify(VerifyArgs),
    /// Print parameter and multiply-add counts.
    Cost(CostArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long)]
    pub threads: Option<usize>,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
}

#[derive(Debug, Args)]
pub struct VerifyArgs {
    /// Network to verify; otherwise a fresh one is built from --config.
    #[arg(long, conflicts_with = "config")]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub trials: usize,
    #[arg(long, default_value_t = 1e-5)]
    pub tol: f64,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_parser = parse_precision)]
    pub precision: Option<Precision>,
    /// Also write the report to DIR/verify.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum KindArg {
    DepthMultiplier,
    SparseRandom,
    Hybrid,
}

impl From<KindArg> for TransformKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::DepthMultiplier => TransformKind::DepthMultiplier,
            KindArg::SparseRandom => TransformKind::SparseRandom,
            KindArg::Hybrid => TransformKind::Hybrid,
        }
    }
}

#[derive(Debug, Args)]
pub struct CostArgs {
    /// Architecture JSON file.
    #[arg(long, conflicts_with = "config")]
    pub arch: Option<PathBuf>,
    /// Take architecture and transform from an experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Transform JSON file.
    #[arg(long, conflicts_with_all = ["kind", "alpha"])]
    pub transform: Option<PathBuf>,
    #[arg(long, value_enum, requires = "alpha")]
    pub kind: Option<KindArg>,
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Connection fraction for the hybrid kind.
    #[arg(long)]
    pub sparsity: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Print only JSON.
    #[arg(long)]
    pub json: bool,
    /// Also write the report to DIR/cost.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_precision(s: &str) -> Result<Precision, String> {
    s.parse::<u32>()
        .map_err(|e| e.to_string())
        .and_then(Precision::try_from)
}

fn load_config(run: &RunArgs) -> Result<ExperimentConfig, CliError> {
    let mut cfg = ExperimentConfig::load(&run.config)?;
    Overrides {
        out: run.out.clone(),
        seeds: run.seeds.clone(),
        threads: run.threads,
        precision: run.precision,
    }
    .apply(&mut cfg);
    Ok(cfg)
}

/// Writes to stdout; a closed pipe (`| head`) is not an error.
fn emit(text: &str) {
    use std::io::Write;
    let _ = std::io::stdout().lock().write_all(text.as_bytes());
}

fn print_json<S: serde::Serialize>(v: &S) {
    emit(&format!(
        "{}\n",
        serde_json::to_string_pretty(v).expect("report serializes")
    ));
}

fn cost_inputs(a: &CostArgs) -> Result<(ArchSpec, TransformSpec), CliError> {
    let (arch, mut transform) = match (&a.arch, &a.config) {
        (Some(p), None) => (
            load_arch(&ArchSource::Path(p.clone()))?,
            TransformSpec::dense(),
        ),
        (None, Some(c)) => {
            let cfg = ExperimentConfig::load(c)?;
            (cfg.arch()?, cfg.transform)
        }
        _ => return Err(CliError::Config("cost needs --arch or --config".into())),
    };
    if let Some(p) = &a.transform {
        let text = std::fs::read_to_string(p)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
        transform = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
    }
    if let (Some(kind), Some(alpha)) = (a.kind, a.alpha) {
        transform = TransformSpec {
            kind: kind.into(),
            alpha,
            sparsity: a.sparsity,
            seed: a.seed,
            ..TransformSpec::dense()
        };
    }
    transform
        .validate()
        .map_err(|e| CliError::Config(e.to_string()))?;
    Ok((arch, transform))
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Train(run) => {
            let cfg = load_config(&run)?;
            let out = commands::cmd_train(&cfg)?;
            for o in &out {
                emit(&format!(
                    "{}\taccuracy={:.4}\n",
                    o.name,
                    o.record.final_accuracy()
                ));
            }
        }
        Command::Incremental(run) => {
            let cfg = load_config(&run)?;
            let out = commands::cmd_incremental(&cfg)?;
            for o in &out {
                emit(&format!(
                    "{}\taccuracy={:.4}\n",
                    o.name,
                    o.record.final_accuracy()
                ));
            }
        }
        Command::Sweep { run, budgets } => {
            let mut cfg = load_config(&run)?;
            if let Some(b) = budgets {
                cfg.sweep.get_or_insert_with(|| config::SweepSpec {
                    budgets: Vec::new(),
                    kinds: vec![TransformKind::DepthMultiplier, TransformKind::SparseRandom],
                });
                if let Some(s) = cfg.sweep.as_mut() {
                    s.budgets = b;
                }
            }
            let out = commands::cmd_sweep(&cfg)?;
            let bytes = output::csv_bytes(&out.rows);
            emit(&String::from_utf8_lossy(&bytes));
        }
        Command::Verify(v) => {
            let opts = VerifyOptions {
                trials: v.trials,
                tol: v.tol,
                batch: v.batch,
                seed: v.seed,
                precision: v.precision.unwrap_or_default(),
            };
            let report = match (&v.checkpoint, &v.config) {
                (Some(p), _) => commands::cmd_verify(&VerifySource::Checkpoint(p), &opts)?,
                (None, Some(c)) => {
                    let cfg = ExperimentConfig::load(c)?;
                    let arch = cfg.arch()?;
                    let seed = cfg.seeds.first().copied().unwrap_or(0);
                    let transform = TransformSpec {
                        seed,
                        ..cfg.transform.clone()
                    };
                    commands::cmd_verify(
                        &VerifySource::Fresh {
                            arch: &arch,
                            transform: &transform,
                            seed,
                        },
                        &opts,
                    )?
                }
                (None, None) => {
                    return Err(CliError::Config(
                        "verify needs --checkpoint or --config".into(),
                    ))
                }
            };
            print_json(&report);
            if let Some(dir) = &v.out {
                output::write_json(&dir.join("verify.json"), &report)?;
            }
            if !report.pass {
                return Err(CliError::Runtime(format!(
                    "permuted twin differs by {:.3e} (tolerance {:.1e})",
                    report.max_abs_diff, report.tol
                )));
            }
        }
        Command::Cost(a) => {
            let (arch, transform) = cost_inputs(&a)?;
            let report = commands::cmd_cost(&arch, &transform)?;
            if !a.json {
                emit(&report.to_table());
            }
            print_json(&report);
            if let Some(dir) = &a.out {
                output::write_json(&dir.join("cost.json"), &report)?;
            }
        }
    }
    Ok(())
}

/// Parses `args` (including the program name) and runs the command.
/// Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
