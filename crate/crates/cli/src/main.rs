use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{anyhow, Context, Result};
use clap::{Args, Parser, Subcommand};
use priorfuse::experiments::{
    cmd_analyze_phi, cmd_evaluate, cmd_invert, cmd_prepare, cmd_report, cmd_train, run_all, RunDir, RunManifest, Stage,
    MANIFEST_PRESETS,
};

/// Desk-scale restoration experiments with a learned fusion map.
#[derive(Parser)]
#[command(name = "priorfuse", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// Run manifest (TOML).
    #[arg(long)]
    manifest: PathBuf,
    /// Run directory; defaults to the manifest's output_dir.
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Overrides the manifest seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    run_dir: Option<PathBuf>,
    /// Accepted for symmetry with the other verbs; the report only reads.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Materialize the train/test split and the degraded observations.
    Prepare(RunArgs),
    /// Compute the prior projection of every observation.
    Invert(RunArgs),
    /// Train the fusion-map network.
    Train(RunArgs),
    /// Fuse, score and store outputs for the test split.
    Evaluate(RunArgs),
    /// Correlate mean fusion weights with noise level and prior quality.
    AnalyzePhi(RunArgs),
    /// Write report.md for a run directory.
    Report(ReportArgs),
    /// Every stage in order.
    Run(RunArgs),
    /// Print a named manifest preset.
    Preset {
        /// One of the known preset names; omit to list them.
        name: Option<String>,
    },
}

fn load(args: &RunArgs) -> Result<(RunManifest, RunDir)> {
    let mut m =
        RunManifest::load(&args.manifest).with_context(|| format!("reading manifest {}", args.manifest.display()))?;
    if let Some(seed) = args.seed {
        m.seed = seed;
    }
    let dir = args
        .run_dir
        .clone()
        .or_else(|| m.output_dir.clone())
        .ok_or_else(|| anyhow!("no --run-dir given and the manifest has no output_dir"))?;
    Ok((m, RunDir::new(dir)))
}

fn stage(name: &str, args: &RunArgs, f: impl FnOnce(&RunManifest, &RunDir) -> priorfuse::Result<()>) -> Result<()> {
    let (m, run) = load(args).with_context(|| format!("{name} failed"))?;
    f(&m, &run).with_context(|| format!("{name} failed"))
}

fn report_dir(args: &ReportArgs) -> Result<PathBuf> {
    if let Some(d) = &args.run_dir {
        return Ok(d.clone());
    }
    let path = args.manifest.as_ref().ok_or_else(|| anyhow!("report needs --run-dir or --manifest"))?;
    RunManifest::load(path)?.output_dir.ok_or_else(|| anyhow!("no --run-dir given and the manifest has no output_dir"))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Prepare(a) => stage(Stage::Prepare.name(), &a, cmd_prepare),
        Command::Invert(a) => stage(Stage::Invert.name(), &a, cmd_invert),
        Command::Train(a) => stage(Stage::Train.name(), &a, cmd_train),
        Command::Evaluate(a) => stage(Stage::Evaluate.name(), &a, |m, r| {
            let table = cmd_evaluate(m, r)?;
            print!("{}", table.to_tsv());
            Ok(())
        }),
        Command::AnalyzePhi(a) => stage(Stage::AnalyzePhi.name(), &a, |m, r| {
            let an = cmd_analyze_phi(m, r)?;
            println!("r_phi_sigma = {:.6}", an.r_phi_sigma);
            println!("r_phi_priorpsnr = {:.6}", an.r_phi_priorpsnr);
            Ok(())
        }),
        Command::Report(a) => {
            let dir = report_dir(&a).context("report failed")?;
            let path = cmd_report(&RunDir::new(dir)).context("report failed")?;
            println!("{}", path.display());
            Ok(())
        }
        Command::Run(a) => stage("run", &a, |m, r| {
            print!("{}", run_all(m, r)?.to_tsv());
            Ok(())
        }),
        Command::Preset { name: None } => {
            for n in MANIFEST_PRESETS {
                println!("{n}");
            }
            Ok(())
        }
        Command::Preset { name: Some(n) } => {
            print!("{}", RunManifest::preset(&n)?.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
