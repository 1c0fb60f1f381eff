use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use shefluct::config::ExperimentConfig;
use shefluct::experiments::{aggregate_batch, merge, run};
use shefluct::report::{write_outputs, Batch, REPLICAS_FILE};
use shefluct::Error;

#[derive(Parser)]
#[command(name = "shefluct", version, about = "Spatial-average fluctuations of stochastic heat equation systems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Merge replica batches of one configuration and recompute the report.
    Merge {
        /// Run directories (or replicas.json files) to merge.
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a config file without running it.
    Validate(ConfigArgs),
}

#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: PathBuf,
    /// `KEY=VALUE` on a dotted path, e.g. `experiment.radii=[2.0, 4.0]`.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    replicas: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(args: &ConfigArgs) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(&args.config, &args.overrides)
}

fn cmd_run(args: RunArgs) -> Result<(), Error> {
    let mut cfg = load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.experiment.seed = s;
    }
    if let Some(n) = args.replicas {
        cfg.experiment.replicas = n;
    }
    if let Some(w) = args.workers {
        cfg.experiment.workers = w;
    }
    if let Some(o) = args.out {
        cfg.output.directory = o;
    }
    let prepared = cfg.prepare()?;
    let (report, batch) = run(&prepared)?;
    let written = write_outputs(&cfg.output.directory, &report, batch.as_ref(), &cfg.output.formats)?;
    eprintln!(
        "{} experiment finished in {:.1}s; wrote {} files to {}",
        report.kind.name(),
        report.metadata.wall_clock_seconds,
        written.len(),
        cfg.output.directory.display()
    );
    Ok(())
}

fn cmd_merge(inputs: Vec<PathBuf>, out: PathBuf) -> Result<(), Error> {
    let batches = inputs
        .iter()
        .map(|p| {
            let file = if p.is_dir() { p.join(REPLICAS_FILE) } else { p.clone() };
            Batch::read(&file)
        })
        .collect::<Result<Vec<_>, _>>()?;
    let mut merged = merge(batches)?;
    merged.config.output.directory = out.clone();
    let report = aggregate_batch(&merged)?;
    let formats = merged.config.output.formats.clone();
    let written = write_outputs(&out, &report, Some(&merged), &formats)?;
    eprintln!(
        "merged {} replicas from {} batches; wrote {} files to {}",
        merged.records.len(),
        inputs.len(),
        written.len(),
        out.display()
    );
    Ok(())
}

fn cmd_validate(args: ConfigArgs) -> Result<(), Error> {
    let cfg = load(&args)?;
    let p = cfg.prepare()?;
    println!(
        "ok: {} experiment, d={}, m={}, nt={}, nx={}, L={:.4}, hash {}",
        cfg.experiment.kind.name(),
        p.field.d(),
        p.field.m(),
        p.grid.nt(),
        p.grid.nx(),
        p.grid.half_width(),
        cfg.content_hash()
    );
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Merge { inputs, out } => cmd_merge(inputs, out),
        Command::Validate(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
