use std::io::Write as _;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use picotag::commands::{self, render_stats};
use picotag::{CliError, RunConfig};
use picotag_core::evaluation::{export_metrics, render_report};
use picotag_core::synthetic::SyntheticConfig;

/// Rhetorical sentence labeling for medical abstracts.
#[derive(Parser)]
#[command(name = "picotag", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct RunArgs {
    /// Key-value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    seed: u64,
    /// Override a config key, e.g. `--set perturb.lambda_adv=0`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Parse a labeled dataset and print its statistics.
    Validate { dataset: PathBuf },
    /// Train one model with a held-out development fold.
    Train(RunArgs),
    /// k-fold cross-validation.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Score a checkpoint on a labeled dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Write the metrics export here.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Label the sentences of a dataset (labels optional).
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        embeddings: PathBuf,
        #[arg(long)]
        input: PathBuf,
        /// Defaults to standard output.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Generate a synthetic dataset and word vectors.
    Synth {
        #[arg(long)]
        output: PathBuf,
        #[arg(long, default_value_t = 300)]
        abstracts: usize,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 16)]
        dim: usize,
        /// Write word2vec binary instead of text.
        #[arg(long)]
        binary: bool,
    },
}

fn run_config(args: &RunArgs) -> Result<RunConfig, CliError> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
            RunConfig::parse(&text).map_err(|e| e.in_file(path))?
        }
        None => RunConfig::default(),
    };
    for o in &args.overrides {
        cfg.set_pair(o)?;
    }
    if let Some(p) = &args.dataset {
        cfg.dataset = Some(p.clone());
    }
    if let Some(p) = &args.embeddings {
        cfg.embeddings = Some(p.clone());
    }
    if let Some(p) = &args.output {
        cfg.output = Some(p.clone());
    }
    cfg.train.seed = args.seed;
    Ok(cfg)
}

/// Runs a command and returns what it prints on standard output.
fn run(cli: Cli) -> Result<String, CliError> {
    let mut out = String::new();
    match cli.command {
        Command::Validate { dataset } => out = render_stats(&commands::cmd_validate(&dataset)?),
        Command::Train(args) => {
            let s = commands::cmd_train(&run_config(&args)?)?;
            out = format!("best epoch {} of {}; artifacts in {}\n", s.best_epoch, s.epochs, s.output.display());
            out.push_str(&render_report(&s.dev));
        }
        Command::Crossval { run, jobs } => {
            let cfg = run_config(&run)?;
            let report = commands::cmd_crossval(&cfg, jobs)?;
            out = format!("mean over {} folds\n", report.folds.len());
            out.push_str(&render_report(&report.mean));
        }
        Command::Evaluate { checkpoint, embeddings, dataset, metrics } => {
            let report = commands::cmd_evaluate(&checkpoint, &embeddings, &dataset)?;
            out.push_str(&render_report(&report));
            if let Some(path) = metrics {
                std::fs::write(&path, export_metrics(&[("test".into(), report)])).map_err(|e| CliError::io(&path, e))?;
            }
        }
        Command::Predict { checkpoint, embeddings, input, output } => {
            let text = commands::cmd_predict(&checkpoint, &embeddings, &input)?;
            match output {
                Some(path) => std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?,
                None => out = text,
            }
        }
        Command::Synth { output, abstracts, seed, dim, binary } => {
            let cfg = SyntheticConfig { abstracts, seed, ..SyntheticConfig::default() };
            let (d, e) = commands::cmd_synth(&output, &cfg, dim, binary)?;
            out = format!("{}\n{}\n", d.display(), e.display());
        }
    }
    Ok(out)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(text) => {
            // A closed pipe on stdout (`picotag ... | head`) is not an error.
            let mut stdout = std::io::stdout().lock();
            match stdout.write_all(text.as_bytes()).and_then(|()| stdout.flush()) {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => {
                    eprintln!("error: writing output: {e}");
                    ExitCode::from(2)
                }
                _ => ExitCode::SUCCESS,
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
