//! `sieve` command line: stage runners over run directories.
//!
//! A run directory holds `inputs/`, one directory per stage (`select/`,
//! `hypothesize/`, `verify/`, `report/`) each with a `manifest.json`, and
//! `generate/` for generator output. Exit codes are listed in [`error`].

pub mod config;
pub mod error;
pub mod rundir;
pub mod stages;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use sieve_core::synth::SyntheticWorldSpec;
use sieve_core::tensor::jsonio::read_json;
use sieve_core::Stage;

use config::{Overrides, PipelineConfig};
use error::{CliError, CliResult, EXIT_OK};
use rundir::RunLock;
use stages::Context;

#[derive(Debug, Parser)]
#[command(
    name = "sieve",
    version,
    about = "Select, hypothesize and verify neuron concepts"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Per-neuron statistics, discriminative filter and top samples.
    Select(StageArgs),
    /// Cluster selected patches and score concepts; writes the generation plan.
    Hypothesize(StageArgs),
    /// Activation rates on generated inputs and the mean-AR filter.
    Verify(StageArgs),
    /// Assemble report.json and summary.md.
    Report(StageArgs),
    /// All four stages in order.
    Run(StageArgs),
    /// Write a synthetic world as a run directory's inputs.
    Synth(SynthArgs),
}

#[derive(Debug, Clone, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub run_dir: PathBuf,
    /// JSON config; defaults to <run-dir>/config.json when present.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads for per-neuron work.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    /// Concepts kept per cluster.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Concept set file (.json or one concept per line).
    #[arg(long)]
    pub concepts: Option<PathBuf>,
    #[arg(long)]
    pub n_images: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Skip verification; every hypothesis is retained.
    #[arg(long)]
    pub no_verify: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// World spec JSON.
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the seed in the --spec file.
    #[arg(long)]
    pub seed: Option<u64>,
}

impl StageArgs {
    fn overrides(&self) -> Overrides {
        Overrides {
            beta: self.beta,
            top_k: self.top_k,
            concepts: self.concepts.clone(),
            n_images: self.n_images,
            seed: self.seed,
            no_verify: self.no_verify,
        }
    }
}

fn with_jobs<T>(jobs: Option<usize>, f: impl FnOnce() -> CliResult<T> + Send) -> CliResult<T>
where
    T: Send,
{
    match jobs {
        None => f(),
        Some(0) => Err(CliError::Config("--jobs must be >= 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Config(e.to_string()))?
            .install(f),
    }
}

fn stages_for(command: &Command) -> &'static [Stage] {
    match command {
        Command::Select(_) => &[Stage::Select],
        Command::Hypothesize(_) => &[Stage::Hypothesize],
        Command::Verify(_) => &[Stage::Verify],
        Command::Report(_) => &[Stage::Report],
        Command::Run(_) => &Stage::ALL,
        Command::Synth(_) => &[],
    }
}

/// Runs a parsed command, passing each human-readable summary line to `emit`.
pub fn execute(cli: &Cli, emit: &mut (dyn FnMut(&str) + Send)) -> CliResult<()> {
    match &cli.command {
        Command::Synth(a) => {
            let mut spec: SyntheticWorldSpec = read_json(&a.spec)?;
            if let Some(seed) = a.seed {
                spec.seed = seed;
            }
            let _lock = RunLock::acquire(&a.out)?;
            emit(&stages::write_synth_run(&spec, &a.out)?);
            Ok(())
        }
        Command::Select(a)
        | Command::Hypothesize(a)
        | Command::Verify(a)
        | Command::Report(a)
        | Command::Run(a) => {
            let config = PipelineConfig::load(a.config.as_deref(), &a.run_dir, &a.overrides())?;
            let ctx = Context::new(&a.run_dir, config);
            let _lock = RunLock::acquire(&a.run_dir)?;
            with_jobs(a.jobs, || {
                for stage in stages_for(&cli.command) {
                    emit(&stages::run_stage(&ctx, *stage)?);
                }
                Ok(())
            })
        }
    }
}

/// Entry point shared by the binary and tests; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match execute(&cli, &mut |line| println!("{line}")) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("sieve: {e}");
            e.exit_code()
        }
    }
}
