//! Thin command-line front end: one subcommand per experiment, a TOML config
//! mirrored by `--override` flags, seeded determinism, run manifests.

use clap::{Parser, Subcommand};
use nvarray::config::{apply_overrides, Experiment, RunConfig};
use nvarray::{pipeline, report};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "nvarray",
    version,
    about = "Simulator and analysis toolkit for laser-written 3D NV-centre arrays"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML run configuration; defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed override.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for run artifacts.
    #[arg(long, global = true, default_value = "runs/out")]
    out: PathBuf,

    /// Worker threads (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    parallelism: usize,

    /// Config overrides as dotted KEY=VALUE pairs, e.g. plan.nx=25.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Expand the array plan into a site list.
    Plan,
    /// Monte-Carlo write + anneal of the planned array.
    Fabricate,
    /// Render and localise single NVCs (runs fabricate first).
    Image,
    /// HBT photon statistics and multiplicity classification.
    Hbt,
    /// Spin-echo survey, XY8 decoupling and T1 reference.
    Coherence,
    /// Depth-dependent aberration phases, Strehl ratios and focal widths.
    Aberration,
    /// Everything, ending with a summary report.
    FullPipeline,
    /// Regenerate report.txt from a run directory's persisted outputs.
    Report,
}

fn experiment_of(command: &Command) -> Option<Experiment> {
    match command {
        Command::Plan => Some(Experiment::Plan),
        Command::Fabricate => Some(Experiment::Fabricate),
        Command::Image => Some(Experiment::Image),
        Command::Hbt => Some(Experiment::Hbt),
        Command::Coherence => Some(Experiment::Coherence),
        Command::Aberration => Some(Experiment::Aberration),
        Command::FullPipeline => Some(Experiment::FullPipeline),
        Command::Report => None,
    }
}

fn load_config(cli: &Cli) -> nvarray::Result<RunConfig> {
    let base = match &cli.config {
        Some(path) => std::fs::read_to_string(path)?,
        None => RunConfig::default().to_toml_string()?,
    };
    let text = if cli.overrides.is_empty() {
        base
    } else {
        apply_overrides(&base, &cli.overrides)?
    };
    let mut config = RunConfig::from_toml_str(&text)?;
    if let Some(seed) = cli.seed {
        config.master_seed = seed;
    }
    Ok(config)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: &Cli) -> nvarray::Result<()> {
    match experiment_of(&cli.command) {
        Some(experiment) => {
            let mut config = load_config(cli)?;
            config.experiment = experiment;
            let manifest = pipeline::run(&config, &cli.out, cli.parallelism)?;
            println!(
                "{}: seed {}, {} output file(s) in {}",
                manifest.experiment,
                manifest.master_seed,
                manifest.outputs.len(),
                cli.out.display()
            );
            for stage in &manifest.stages {
                println!("  {:<12} {:>9.1} ms", stage.name, stage.wall_ms);
            }
            if matches!(cli.command, Command::FullPipeline) {
                println!("\n{}", report::build(&cli.out));
            }
            Ok(())
        }
        None => {
            let path = report::generate(&cli.out)?;
            println!("{}", report::build(&cli.out));
            println!("written to {}", path.display());
            Ok(())
        }
    }
}
