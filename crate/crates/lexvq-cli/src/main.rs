//! `lexvq` command-line interface: ingestion, training, evaluation, and
//! analysis as batch commands over a key=value config.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use lexvq::config::ConfigMap;
use lexvq::Error;

const EXIT_DOC: &str = "\
Exit codes:
  0  success
  2  usage error (unknown flag or subcommand)
  3  configuration error (bad key, bad value, invalid combination)
  4  missing input file
  5  input data format error (reported with file and line)
  6  runtime failure (non-finite loss, internal error)

Failures print one machine-parsable line to stderr:
  error: category=<usage|config|missing-file|data-format|runtime> msg=\"...\"";

#[derive(Parser)]
#[command(name = "lexvq", version, about = "Vector-quantized image modeling with word-prior codebooks", after_help = EXIT_DOC)]
struct Cli {
    /// Path to a key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Random seed; overrides the config's `seed` key.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory all outputs are written under.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,

    /// Override any config key, e.g. --set epochs=50 (repeatable; wins
    /// over the config file).
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build the adjective/noun prior codebooks and the modifying graph,
    /// exporting them as TSV.
    Ingest,
    /// Train a model; writes metrics.csv and checkpoints.
    Train,
    /// Reconstruction metrics and token grids over a directory of PPMs.
    Eval {
        /// Checkpoint to evaluate (overrides config key `eval_checkpoint`).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Image directory (overrides config key `eval_images`).
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Codebook utilization and similarity drift over a finished run.
    Analyze {
        /// A train command's output directory (checkpoints are read there).
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Two-dimensional toy comparison of direct vs generative codebook
    /// optimization; writes trajectory and selection CSVs.
    Toy2d {
        /// Number of optimization steps.
        #[arg(long, default_value_t = 50)]
        steps: usize,
    },
    /// Export the current codebooks of a checkpoint as binary + TSV.
    ExportCodebook {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let (category, code) = categorize(&err);
            let msg = err.to_string().replace('"', "'").replace('\n', " ");
            eprintln!("error: category={category} msg=\"{msg}\"");
            ExitCode::from(code)
        }
    }
}

fn categorize(err: &Error) -> (&'static str, u8) {
    match err {
        Error::Config(_) => ("config", 3),
        Error::Io { .. } if err.is_not_found() => ("missing-file", 4),
        Error::Io { .. } => ("missing-file", 4),
        Error::Parse { .. } => ("data-format", 5),
        _ => ("runtime", 6),
    }
}

fn resolve_config(cli: &Cli) -> Result<ConfigMap, Error> {
    let mut map = match &cli.config {
        Some(path) => ConfigMap::from_file(path)?,
        None => ConfigMap::new(),
    };
    for pair in &cli.set {
        let (key, value) = pair
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set needs KEY=VALUE, got '{pair}'")))?;
        map.set(key.trim(), value.trim());
    }
    if let Some(seed) = cli.seed {
        map.set("seed", &seed.to_string());
    }
    Ok(map)
}

fn run(cli: Cli) -> Result<(), Error> {
    let map = resolve_config(&cli)?;
    let out_dir = cli.out_dir.clone();
    match &cli.command {
        Command::Ingest => commands::ingest(&map, &out_dir),
        Command::Train => commands::train(&map, &out_dir),
        Command::Eval { checkpoint, images } => {
            commands::eval(&map, &out_dir, checkpoint.as_deref(), images.as_deref())
        }
        Command::Analyze { run_dir } => commands::analyze(&map, &out_dir, run_dir),
        Command::Toy2d { steps } => commands::toy2d(&map, &out_dir, *steps),
        Command::ExportCodebook { checkpoint } => {
            commands::export_codebook(&map, &out_dir, checkpoint)
        }
    }
}
