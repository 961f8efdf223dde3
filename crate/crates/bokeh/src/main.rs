use std::path::PathBuf;
use std::process::ExitCode;

use bokeh::dataset::{write_pairs, DatasetSpec, Split};
use bokeh::eval::{evaluate_dir, infer};
use bokeh::train::{run_train, TrainArgs};
use bokeh::{selftest, AppError};
use bokeh_core::data::synth_bokeh_dataset;
use clap::{Parser, Subcommand};

const EXIT_USAGE: u8 = 1;
const EXIT_RUNTIME: u8 = 2;
const EXIT_SELFTEST: u8 = 3;

#[derive(Parser)]
#[command(name = "bokeh", version, about = "Two-stage GAN bokeh rendering: train, infer, evaluate")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one stage, from scratch or from a checkpoint.
    Train {
        #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
        stage: u8,
        /// Flat TOML config; ignored when resuming.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset root containing <split>/source and <split>/target.
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "train")]
        split: Split,
        /// Text file of ids to exclude, one per line.
        #[arg(long)]
        cleaning: Option<PathBuf>,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Render one image.
    Infer {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// PSNR/SSIM over a dataset split; writes a JSON report.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        report: PathBuf,
    },
    /// Built-in consistency checks and a short training run.
    Selftest,
    /// Write a synthetic paired dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long, default_value_t = 64)]
        height: usize,
        #[arg(long, default_value_t = 96)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "train")]
        split: Split,
    },
}

fn run(cmd: Command) -> Result<u8, AppError> {
    match cmd {
        Command::Train { stage, config, data, split, cleaning, resume, out } => {
            let args = TrainArgs { stage, config, data, split, cleaning, resume, out };
            let steps = run_train(&args, &mut std::io::stderr())?;
            println!("trained {steps} steps; checkpoint at {}", args.out.display());
        }
        Command::Infer { ckpt, input, output } => {
            infer(&ckpt, &input, &output)?;
            println!("wrote {}", output.display());
        }
        Command::Eval { ckpt, data, split, report } => {
            let r = evaluate_dir(&ckpt, &DatasetSpec::new(data, split))?;
            std::fs::write(&report, r.to_json()).map_err(|e| AppError::io(&report, e))?;
            println!("{} images: PSNR {:.3} dB, SSIM {:.4}", r.count, r.mean_psnr, r.mean_ssim);
        }
        Command::Selftest => {
            let checks = selftest::run();
            for c in &checks {
                println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
            }
            if checks.iter().any(|c| !c.passed) {
                return Ok(EXIT_SELFTEST);
            }
        }
        Command::Synth { out, count, height, width, seed, split } => {
            let pairs: Vec<_> = synth_bokeh_dataset(count, (height, width), seed)?.into_iter().map(|s| s.pair).collect();
            write_pairs(&out, split, &pairs)?;
            println!("wrote {count} pairs under {}", out.join(split.to_string()).display());
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if matches!(e, AppError::Usage(_)) { EXIT_USAGE } else { EXIT_RUNTIME })
        }
    }
}
