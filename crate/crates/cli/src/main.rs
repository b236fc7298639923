use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stfocal::{exec, train::Dataset, Error, Result};
use stfocal_cli::*;

#[derive(Parser)]
#[command(name = "stfocal", version, about = "Spatio-temporal focal modulation experiments")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; overrides `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `train.seed` (network init, shuffling, augmentation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for the data-parallel kernels.
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train on the configured task and save a checkpoint.
    Train,
    /// Top-1 accuracy of a checkpoint with multi-view averaging.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory (`clips.tensor`, `labels.tensor`); the
        /// configured test split when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Temporal windows per clip.
        #[arg(long, default_value_t = 1)]
        views: usize,
        /// Spatial crops per window (1 or 3).
        #[arg(long, default_value_t = 1)]
        crops: usize,
    },
    /// Parameter and operation counts. Without --config, one row per preset.
    Flops {
        /// Input as T,H,W,C.
        #[arg(long, value_parser = parse_input)]
        input: Option<[usize; 4]>,
    },
    /// Finite-difference gradient check of the configured network.
    Gradcheck {
        /// Coordinates checked per parameter tensor.
        #[arg(long, default_value_t = 4)]
        samples: usize,
    },
    /// Export modulator magnitude maps as PGM images.
    Visualize {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Clip tensor file; a synthetic clip of --class when omitted.
        #[arg(long)]
        clip: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        class: usize,
        #[arg(long, default_value_t = 0)]
        stage: usize,
    },
    /// Train all five design variants under one budget and tabulate them.
    CompareDesigns,
}

fn parse_input(s: &str) -> std::result::Result<[usize; 4], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|d| d.trim().parse().map_err(|e| format!("'{d}': {e}")))
        .collect::<std::result::Result<_, _>>()?;
    dims.try_into().map_err(|_| "expected T,H,W,C".to_string())
}

fn run(cli: Cli) -> Result<()> {
    exec::init_threads(cli.threads);
    exec::set_parallel(cli.threads > 1);
    let mut cfg = ExperimentConfig::load_or_default(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.output.dir = out.clone();
    }
    let out = cfg.output.dir.clone();
    match cli.command {
        Command::Train => {
            let run = run_training(&cfg, &out)?;
            for m in &run.metrics {
                println!("{m}");
            }
            println!("top1 {:.4}", run.final_accuracy());
            println!("checkpoint {}", out.join(CHECKPOINT).display());
        }
        Command::Eval {
            checkpoint,
            data,
            views,
            crops,
        } => {
            let data = match data {
                Some(dir) => Dataset::load(&dir)?,
                None => datasets::<f64>(&cfg)?.1,
            };
            let acc = evaluate_checkpoint(&checkpoint, &data, views, crops)?;
            println!("top1 {acc:.4} clips {} views {}", data.len(), views * crops);
        }
        Command::Flops { input } => {
            let text = match (&cli.config, input) {
                (None, input) => preset_table(input.unwrap_or([8, 224, 224, 3]))?,
                (Some(_), input) => cost_report(&cfg, input)?.to_csv(),
            };
            print!("{text}");
            if cli.out.is_some() {
                write_file(&out.join(FLOPS_CSV), &text)?;
            }
        }
        Command::Gradcheck { samples } => {
            let report = check_gradients(&cfg, samples)?;
            print!("{}", report.summary());
            if !report.passed() {
                return Err(Error::Numeric(format!(
                    "gradient check failed: max relative error {:.3e} > {:.1e}",
                    report.max_rel_err(),
                    report.tolerance
                )));
            }
        }
        Command::Visualize {
            checkpoint,
            clip,
            class,
            stage,
        } => {
            let clip = visualization_clip(&cfg, clip.as_deref(), class)?;
            for path in visualize(&checkpoint, &clip, stage, &out)? {
                println!("{}", path.display());
            }
        }
        Command::CompareDesigns => {
            let rows = compare_designs(&cfg, &out)?;
            print!("{}", designs_csv(&rows));
        }
    }
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
