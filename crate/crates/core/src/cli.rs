//! Command-line front end.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, parse_grid, ExperimentConfig};
use crate::error::{Error, Result};
use crate::metrics::{summary_table, MetricReport};
use crate::pipeline::{load_inputs, run_grid, stage_downstream, stage_evaluate, stage_upstream, transfer_run};
use crate::synthetic::{prepare_fixtures, PretrainSettings, SuiteConfig};

pub const RUNS_ENV: &str = "PEFT_DEBIAS_RUNS";

#[derive(Debug, Parser)]
#[command(name = "peft-debias", version, about = "Axis-specific debiasing with frozen PEFT modules")]
pub struct Cli {
    /// Root directory for run directories.
    #[arg(long, global = true, env = RUNS_ENV, default_value = "runs")]
    pub runs_dir: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    pub config: PathBuf,

    /// Override a config value, e.g. `--set upstream.lr=1e-4`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic planted-bias suite, pretrain a desk backbone
    /// and write task and grid configs.
    PrepareData {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SuiteConfig::default().seed)]
        seed: u64,
        #[arg(long, default_value_t = PretrainSettings::default().steps)]
        pretrain_steps: usize,
    },
    /// Upstream stage: train the module (or debiased backbone) of a run.
    TrainUpstream(RunArgs),
    /// Downstream stage: fine-tune from the run's upstream result.
    TrainDownstream(RunArgs),
    /// Full run reusing a module trained elsewhere.
    Transfer {
        #[command(flatten)]
        run: RunArgs,
        /// Module checkpoint from the source run.
        #[arg(long)]
        peft: PathBuf,
        /// Accept a module trained for a different bias axis.
        #[arg(long)]
        allow_axis_mismatch: bool,
    },
    /// Score a trained run and write its report.
    Evaluate(RunArgs),
    /// Print the reports of one or more run directories.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
    /// Run every method x seed x experiment of a grid file.
    Grid {
        #[arg(short, long)]
        config: PathBuf,
        /// Experiments run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

fn load(args: &RunArgs) -> Result<ExperimentConfig> {
    parse_config(&args.config, &args.overrides)
}

/// Writes to stdout. A closed pipe (`| head`) ends output quietly.
fn say(text: std::fmt::Arguments) -> Result<()> {
    use std::io::Write;
    match std::io::stdout().lock().write_fmt(text) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_report(dir: &Path) -> Result<MetricReport> {
    let r = MetricReport::load(dir)?;
    say(format_args!("{}", r.render()))?;
    Ok(r)
}

pub fn execute(cli: Cli) -> Result<()> {
    let root = cli.runs_dir.as_path();
    match cli.command {
        Command::PrepareData {
            out,
            seed,
            pretrain_steps,
        } => {
            let suite = SuiteConfig {
                seed,
                ..SuiteConfig::default()
            };
            let pre = PretrainSettings {
                steps: pretrain_steps,
                ..PretrainSettings::default()
            };
            let f = prepare_fixtures(&out, &suite, &pre)?;
            let (first, last) = (f.pretrain_curve.first(), f.pretrain_curve.last());
            if let (Some(a), Some(b)) = (first, last) {
                say(format_args!("pretraining held-out loss {:.4} -> {:.4}\n", a.1, b.1))?;
            }
            say(format_args!("grid config: {}\n", f.grid.display()))?;
        }
        Command::TrainUpstream(args) => {
            let cfg = load(&args)?;
            let inputs = load_inputs(&cfg)?;
            match stage_upstream(&cfg, &inputs, root)? {
                (Some(path), _) => say(format_args!("{}\n", path.display()))?,
                (None, _) => say(format_args!("{}: no upstream phase\n", cfg.method))?,
            }
        }
        Command::TrainDownstream(args) => {
            let cfg = load(&args)?;
            let inputs = load_inputs(&cfg)?;
            let (path, _, warnings) = stage_downstream(&cfg, &inputs, root)?;
            for w in warnings {
                eprintln!("warning: {w}");
            }
            say(format_args!("{}\n", path.display()))?;
        }
        Command::Transfer {
            run,
            peft,
            allow_axis_mismatch,
        } => {
            let mut cfg = load(&run)?;
            cfg.transfer.allow_axis_mismatch |= allow_axis_mismatch;
            let a = transfer_run(&peft, &cfg, root)?;
            for w in &a.warnings {
                eprintln!("warning: {w}");
            }
            print_report(&a.dir)?;
        }
        Command::Evaluate(args) => {
            let cfg = load(&args)?;
            let inputs = load_inputs(&cfg)?;
            let r = stage_evaluate(&cfg, &inputs, root)?;
            say(format_args!("{}", r.render()))?;
        }
        Command::Report { runs } => {
            let mut reports = Vec::new();
            for dir in &runs {
                reports.push(print_report(dir)?);
            }
            if reports.len() > 1 {
                say(format_args!("\n{}", summary_table(&reports)))?;
            }
        }
        Command::Grid { config, jobs } => {
            if jobs == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            let grid = parse_grid(&config)?;
            let out = run_grid(&grid, root, jobs)?;
            let table = std::fs::read_to_string(&out.table_path).map_err(|e| Error::io(&out.table_path, e))?;
            say(format_args!("{table}"))?;
            eprintln!(
                "{} runs; per-run summary {}, per-occupation gaps {}",
                out.cells.len(),
                out.summary_path.display(),
                out.occupations_path.display()
            );
        }
    }
    Ok(())
}

/// Parses `argv` and runs it. Exit codes: 0 success, 1 runtime failure,
/// 2 usage error.
pub fn main<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            1
        }
    }
}
