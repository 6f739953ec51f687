//! `unetdr`: phantom generation, training, prediction and evaluation.

mod config;
mod train;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use unetdr::metrics::evaluate_volume;
use unetdr::phantom::{generate_dataset, PhantomSpec};
use unetdr::preprocess::{read_case, read_labels, read_volume, write_labels};
use unetdr::trainer::{load_checkpoint, predict_raw_volume};
use unetdr::volume::Dims;

use config::Settings;

#[derive(Debug, Parser)]
#[command(name = "unetdr", version, about = "U-Net with dilated residual bottleneck for thoracic organ segmentation")]
struct Cli {
    /// Settings file of `key = value` lines; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic labelled dataset.
    Phantom(PhantomArgs),
    /// Run stage 1 or stage 2 training on one or all cross-validation folds.
    Train(train::TrainArgs),
    /// Label a volume with a trained checkpoint.
    Predict(PredictArgs),
    /// Compare a predicted label volume with ground truth.
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct PhantomArgs {
    /// Number of cases.
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    cases: u64,
    /// Output directory; cases go to `case_000`, `case_001`, ...
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    /// Seed of the first case; case i uses seed + i.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Volume size as DxHxW.
    #[arg(long, value_parser = parse_dims, default_value = "32x96x96")]
    dims: Dims,
    /// Standard deviation of the additive image noise.
    #[arg(long, default_value_t = 10.0)]
    noise: f64,
}

#[derive(Debug, Args)]
struct PredictArgs {
    /// Trained checkpoint.
    #[arg(long, value_name = "FILE")]
    ckpt: PathBuf,
    /// Input image volume (NIfTI-1).
    #[arg(long = "in", value_name = "VOLUME")]
    input: PathBuf,
    /// Output label volume (NIfTI-1, uint8).
    #[arg(long, value_name = "VOLUME")]
    out: PathBuf,
    /// Keep every predicted component instead of only the largest per class.
    #[arg(long)]
    no_postprocess: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    /// Ground-truth label volume.
    #[arg(long, value_name = "VOLUME")]
    gt: PathBuf,
    /// Predicted label volume.
    #[arg(long, value_name = "VOLUME")]
    pred: PathBuf,
    /// Also write a machine-readable report here.
    #[arg(long, value_name = "PATH")]
    report: Option<PathBuf>,
    /// Number of classes including background.
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

fn parse_dims(s: &str) -> Result<Dims, String> {
    let parts: Vec<&str> = s.split('x').collect();
    let parsed: Result<Vec<usize>, _> = parts.iter().map(|p| p.parse::<usize>()).collect();
    match parsed {
        Ok(v) if v.len() == 3 => Ok([v[0], v[1], v[2]]),
        _ => Err(format!("expected DxHxW such as 32x96x96, got {s:?}")),
    }
}

fn phantom(args: &PhantomArgs) -> Result<()> {
    let template = PhantomSpec {
        dims: args.dims,
        noise_std: args.noise,
        ..PhantomSpec::default()
    };
    let dirs = generate_dataset(args.cases as usize, &template, args.seed, &args.out)?;
    for dir in &dirs {
        let case = read_case(dir)?;
        let counts = case.labels().expect("cases are labelled").counts(5);
        let [d, h, w] = case.dims();
        println!(
            "{}\t{d}x{h}x{w}\tvoxels per class {:?}",
            dir.file_name().unwrap_or_default().to_string_lossy(),
            counts
        );
    }
    eprintln!("wrote {} cases to {}", dirs.len(), args.out.display());
    Ok(())
}

fn predict(args: &PredictArgs) -> Result<()> {
    let ckpt = load_checkpoint(&args.ckpt)?;
    let volume = read_volume(&args.input)?;
    let labels = predict_raw_volume(&ckpt, &volume, !args.no_postprocess)?;
    write_labels(&labels, volume.spacing, &args.out)?;
    eprintln!("wrote labels to {}", args.out.display());
    Ok(())
}

fn evaluate(args: &EvaluateArgs) -> Result<()> {
    let header = read_volume(&args.gt)?;
    let gt = read_labels(&args.gt)?;
    let pred = read_labels(&args.pred)?;
    if gt.dims() != pred.dims() {
        bail!("ground truth is {:?} but prediction is {:?}", gt.dims(), pred.dims());
    }
    let report = evaluate_volume(&gt, &pred, header.spacing, args.classes)?;
    print!("{}", report.table());
    if let Some(path) = &args.report {
        std::fs::write(path, report.to_text()).with_context(|| format!("writing report {}", path.display()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut settings = Settings::default();
    if let Some(path) = &cli.config {
        settings.apply_file(path)?;
    }
    match &cli.command {
        Command::Phantom(a) => phantom(a),
        Command::Train(a) => train::train(a, settings),
        Command::Predict(a) => predict(a),
        Command::Evaluate(a) => evaluate(a),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<train::UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
