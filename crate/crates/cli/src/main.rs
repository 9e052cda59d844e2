use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ecm_cli::commands::{self, CurveEdit, EvaluateArgs, GenerateArgs};
use ecm_cli::{CliError, RunConfig};

#[derive(Parser)]
#[command(name = "ecm", version, about = "Curve-guided phantom echo video generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a phantom dataset.
    MakeData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the frame autoencoder.
    TrainCodec {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// CSV loss log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the video denoiser.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        codec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
        /// Overrides `train.lr`.
        #[arg(long)]
        lr: Option<f64>,
        /// Overrides `train.steps`.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Sample a clip from an initial frame and motion curves.
    Generate(GenerateCmd),
    /// Write the motion curves of a stored clip.
    ExtractCurves {
        #[arg(long)]
        clip: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Scale, replace or resample motion curves.
    EditCurves(EditCmd),
    /// Score generated clips against targets.
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        generated: Vec<PathBuf>,
        #[arg(long, num_args = 1.., required = true)]
        targets: Vec<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Denoiser checkpoint supplying features for the Fréchet distance.
        #[arg(long)]
        features: Option<PathBuf>,
    },
    /// Plot motion curves, optionally against a generated clip.
    Plot {
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        generated: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct GenerateCmd {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    codec: PathBuf,
    /// ECMV clip holding the initial frame.
    #[arg(long)]
    frame: PathBuf,
    #[arg(long, default_value_t = 0)]
    frame_index: usize,
    #[arg(long)]
    curves: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Defaults to `sample.seed` of the config, else 0.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<usize>,
    /// The denoiser must have been trained with this config.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    png_dir: Option<PathBuf>,
    #[arg(long)]
    plot: Option<PathBuf>,
}

#[derive(Args)]
struct EditCmd {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// `category:factor`
    #[arg(long)]
    scale: Option<String>,
    /// `category:curves.json`
    #[arg(long)]
    replace: Option<String>,
    /// Target frame count.
    #[arg(long)]
    resample: Option<usize>,
}

fn check_deterministic_env() -> Result<(), CliError> {
    // Every kernel is single-threaded with fixed reduction order, so runs are
    // reproducible regardless; the flag is only validated.
    match std::env::var("ECM_DETERMINISTIC") {
        Ok(v) if !matches!(v.as_str(), "0" | "1" | "") => {
            Err(CliError::Config(format!("ECM_DETERMINISTIC must be 0 or 1, got {v:?}")))
        }
        _ => Ok(()),
    }
}

fn load_opt(path: &Option<PathBuf>) -> Result<Option<RunConfig>, CliError> {
    path.as_deref().map(RunConfig::load).transpose()
}

fn parse_edit(cmd: &EditCmd) -> Result<CurveEdit, CliError> {
    let given = [cmd.scale.is_some(), cmd.replace.is_some(), cmd.resample.is_some()];
    if given.iter().filter(|&&b| b).count() != 1 {
        return Err(CliError::Usage("exactly one of --scale, --replace, --resample is required".into()));
    }
    if let Some(s) = &cmd.scale {
        let (category, v) = commands::parse_pair(s)?;
        let factor = v.parse().map_err(|_| CliError::Usage(format!("bad scale factor {v:?}")))?;
        return Ok(CurveEdit::Scale { category, factor });
    }
    if let Some(s) = &cmd.replace {
        let (category, v) = commands::parse_pair(s)?;
        return Ok(CurveEdit::Replace { category, other: PathBuf::from(v) });
    }
    Ok(CurveEdit::Resample { frames: cmd.resample.expect("checked above") })
}

fn run(cli: Cli) -> Result<(), CliError> {
    check_deterministic_env()?;
    match cli.command {
        Command::MakeData { config, out } => commands::make_data(&RunConfig::load(&config)?, &out),
        Command::TrainCodec { config, data, out, log } => {
            let mae = commands::train_codec(&RunConfig::load(&config)?, &data, &out, log.as_deref())?;
            println!("codec reconstruction_mae={mae:.6}");
            Ok(())
        }
        Command::Train { config, data, codec, out, log, checkpoint_dir, lr, steps } => {
            let mut cfg = RunConfig::load(&config)?;
            if let Some(lr) = lr {
                cfg.train.lr = lr;
            }
            if let Some(steps) = steps {
                cfg.train.steps = steps;
            }
            let losses = commands::train(&cfg, &data, &codec, &out, log.as_deref(), checkpoint_dir.as_deref())?;
            if let Some(last) = losses.last() {
                println!("denoiser steps={} final_loss={last:.6}", losses.len());
            }
            Ok(())
        }
        Command::Generate(g) => {
            let cfg = load_opt(&g.config)?;
            let sample = cfg.as_ref().map(|c| c.sample.clone()).unwrap_or_default();
            commands::generate(&GenerateArgs {
                checkpoint: &g.checkpoint,
                codec: &g.codec,
                frame: &g.frame,
                frame_index: g.frame_index,
                curves: &g.curves,
                out: &g.out,
                seed: g.seed.unwrap_or(sample.seed),
                steps: g.steps.unwrap_or(sample.steps),
                config: cfg.as_ref(),
                png_dir: g.png_dir.as_deref(),
                plot: g.plot.as_deref(),
            })?;
            Ok(())
        }
        Command::ExtractCurves { clip, out } => commands::extract_curves(&clip, &out),
        Command::EditCurves(e) => {
            let clamped = commands::edit_curves(&e.input, &e.out, &parse_edit(&e)?)?;
            if clamped > 0 {
                eprintln!("warning: {clamped} coordinates clamped to the frame");
            }
            Ok(())
        }
        Command::Evaluate { generated, targets, out_dir, config, features } => {
            let cfg = load_opt(&config)?;
            let report = commands::evaluate(&EvaluateArgs {
                generated: &generated,
                targets: &targets,
                out_dir: &out_dir,
                config: cfg.as_ref(),
                features: features.as_deref(),
            })?;
            let a = &report.aggregates;
            println!("ssim={:.4} psnr={:.3} mae={:.5}", a.ssim, a.psnr, a.mae);
            Ok(())
        }
        Command::Plot { curves, generated, out } => commands::plot_cmd(&curves, generated.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
