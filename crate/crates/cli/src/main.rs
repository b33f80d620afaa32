use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use tmlab_cli::commands::{self, AdaptArgs, EstimateArgs, EvaluateArgs, GenerateArgs, PretrainArgs, Preset};
use tmlab_core::adapt::Method;
use tmlab_core::model::DomainTag;
use tmlab_core::shift::Metric;

/// Temporal shift estimation and self-training adaptation for crop-type
/// time series.
#[derive(Parser)]
#[command(name = "tmlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic domains from a scenario file.
    Generate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print a built-in scenario as JSON.
    Preset {
        #[command(subcommand)]
        kind: PresetKind,
        #[arg(long, default_value_t = 1000, global = true)]
        samples: usize,
        /// Write to this file instead of stdout.
        #[arg(long, global = true)]
        out: Option<PathBuf>,
    },
    /// Train a classifier on labeled source data.
    Pretrain {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Domain directory (uses train.jsonl and val.jsonl) or a dataset file.
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Random temporal shifts as augmentation.
        #[arg(long)]
        shiftaug: bool,
        /// Per-epoch log; defaults to `<out>.log.jsonl`.
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Estimate the temporal shift of a target domain.
    EstimateShift {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        target: PathBuf,
        #[arg(long, default_value = "am", value_parser = parse::<Metric>)]
        metric: Metric,
        /// At most this many target samples are scored.
        #[arg(long, default_value_t = tmlab_core::shift::DEFAULT_SAMPLE_CAP)]
        cap: usize,
        /// Defaults to the range the model was built for.
        #[arg(long)]
        max_shift: Option<u32>,
        #[arg(long, default_value = "shift_curve.csv")]
        curve: PathBuf,
        #[arg(long, default_value = "target", value_parser = parse::<DomainTag>)]
        domain: DomainTag,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Adapt a pretrained model to an unlabeled target domain.
    Adapt {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source: Option<PathBuf>,
        #[arg(long)]
        target: Option<PathBuf>,
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long, value_parser = parse::<Method>)]
        method: Option<Method>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Defaults to `<out>.report.jsonl`.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        teacher_out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Accuracy and F1 scores of a model on labeled data.
    Evaluate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, default_value_t = 0, allow_hyphen_values = true)]
        shift: i32,
        /// One line per shift over the model's full range.
        #[arg(long, conflicts_with = "shift")]
        sweep: bool,
        #[arg(long, default_value = "target", value_parser = parse::<DomainTag>)]
        domain: DomainTag,
        #[arg(long)]
        confusion: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum PresetKind {
    /// One source and a target per shift.
    Standard {
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [-35, -20, 20, 32])]
        shifts: Vec<i32>,
    },
    /// Two domains whose classes are easy to confuse without shift correction.
    Confusable {
        #[arg(long, default_value_t = 20, allow_hyphen_values = true)]
        shift: i32,
    },
    /// Two domains `a` and `b`, with `b` displaced by the shift.
    Mirrored {
        #[arg(long, default_value_t = 15, allow_hyphen_values = true)]
        shift: i32,
    },
}

fn parse<T>(s: &str) -> Result<T, String>
where
    T: std::str::FromStr,
    T::Err: std::fmt::Display,
{
    s.parse().map_err(|e: T::Err| e.to_string())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("TMLAB_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| tmlab_core::Error::InvalidInput(format!("TMLAB_THREADS={v:?} is not a number")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    match cli.command {
        Command::Generate { scenario, out: dir, seed } => commands::generate(
            &GenerateArgs {
                scenario,
                out: dir,
                seed,
            },
            &mut out,
        )?,
        Command::Preset { kind, samples, out: file } => {
            let kind = match kind {
                PresetKind::Standard { shifts } => Preset::Standard { shifts },
                PresetKind::Confusable { shift } => Preset::Confusable { shift },
                PresetKind::Mirrored { shift } => Preset::Mirrored { shift },
            };
            match file {
                Some(p) => {
                    let mut buf = Vec::new();
                    commands::preset(&kind, samples, &mut buf)?;
                    std::fs::write(&p, buf).map_err(|e| tmlab_core::Error::Io { path: p, source: e })?;
                }
                None => commands::preset(&kind, samples, &mut out)?,
            }
        }
        Command::Pretrain {
            config,
            source,
            out: ckpt,
            shiftaug,
            log,
            seed,
        } => commands::pretrain(
            &PretrainArgs {
                config,
                source,
                out: ckpt,
                shiftaug,
                log,
                seed,
            },
            &mut out,
        )?,
        Command::EstimateShift {
            model,
            target,
            metric,
            cap,
            max_shift,
            curve,
            domain,
            seed,
        } => commands::estimate_shift(
            &EstimateArgs {
                model,
                target,
                metric,
                cap,
                max_shift,
                curve,
                domain,
                seed,
            },
            &mut out,
        )?,
        Command::Adapt {
            config,
            source,
            target,
            init,
            method,
            out: ckpt,
            report,
            teacher_out,
            seed,
        } => commands::adapt_cmd(
            &AdaptArgs {
                config,
                source,
                target,
                init,
                method,
                out: ckpt,
                report,
                teacher_out,
                seed,
            },
            &mut out,
        )?,
        Command::Evaluate {
            model,
            data,
            split,
            shift,
            sweep,
            domain,
            confusion,
        } => commands::evaluate_cmd(
            &EvaluateArgs {
                model,
                data,
                split,
                shift,
                sweep,
                domain,
                confusion,
            },
            &mut out,
        )?,
    }
    out.flush()?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(tmlab_cli::exit_code(&e) as u8)
        }
    }
}
