use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use psb_cli::{
    exit_code, run_attention, run_convert, run_gen_data, run_stats, run_sweep, AttentionRequest,
    ConvertRequest, GenDataRequest, StatsRequest, SweepRequest,
};
use psb_core::Result;

#[derive(Parser)]
#[command(
    name = "psb",
    about = "Progressive stochastic binarization inference engine",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Convert a float model container to the PSB number system.
    Convert {
        /// Input float model (.psbm).
        input: PathBuf,
        /// Output PSB model (.psbm).
        #[arg(short, long)]
        output: PathBuf,
        /// Fold batch-norm layers into their preceding linear layers first.
        #[arg(long)]
        fold_bn: bool,
        /// Zero this fraction of the smallest-magnitude weights before encoding.
        #[arg(long)]
        prune: Option<f64>,
        /// Probability grid width in bits.
        #[arg(long, default_value_t = 10)]
        prob_bits: u32,
        /// Exponent field width in bits.
        #[arg(long, default_value_t = 4)]
        exp_bits: u32,
    },
    /// Evaluate a PSB model over a range of sample counts; emits CSV.
    Sweep {
        /// PSB model (.psbm).
        model: PathBuf,
        /// IDX image file.
        #[arg(long)]
        images: PathBuf,
        /// IDX label file.
        #[arg(long)]
        labels: PathBuf,
        /// Comma-separated sample counts (powers of two).
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16,32,64")]
        samples: Vec<u32>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Sampling mode: per-call, per-position, deterministic, mean-oracle.
        #[arg(long, default_value = "per-call")]
        mode: String,
        /// Worker threads for batch evaluation (does not change results).
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// Float model for reference logits (defaults to the expectation path).
        #[arg(long)]
        reference: Option<PathBuf>,
        /// Output CSV path.
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Two-pass entropy-guided adaptive run; emits a CSV summary.
    Attention {
        /// PSB model (.psbm).
        model: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        /// Sample budget outside the attended regions.
        #[arg(long)]
        n_low: u32,
        /// Sample budget inside the attended regions.
        #[arg(long)]
        n_high: u32,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Directory for per-image budget masks as PGM files.
        #[arg(long)]
        dump_masks: Option<PathBuf>,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Per-layer weight statistics, variance bounds and memory footprints.
    Stats {
        /// PSB model (.psbm).
        model: PathBuf,
        /// Optional CSV output path (report always goes to stdout).
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Generate a deterministic synthetic blob dataset as IDX files.
    GenData {
        #[arg(long, default_value_t = 4)]
        classes: usize,
        #[arg(long, default_value_t = 500)]
        per_class: usize,
        #[arg(long, default_value_t = 16)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(short, long)]
        out_dir: PathBuf,
        /// File name prefix (<prefix>-images.idx, <prefix>-labels.idx).
        #[arg(long, default_value = "data")]
        prefix: String,
    },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Convert { input, output, fold_bn, prune, prob_bits, exp_bits } => {
            let summary = run_convert(&ConvertRequest {
                input,
                output: output.clone(),
                fold_bn,
                prune,
                prob_bits,
                exp_bits,
            })?;
            println!(
                "wrote {}: {} weights, {} zero codes, {} bytes",
                output.display(),
                summary.weight_count,
                summary.zero_count,
                summary.file_bytes
            );
        }
        Command::Sweep {
            model,
            images,
            labels,
            samples,
            seed,
            mode,
            workers,
            reference,
            output,
        } => {
            let csv = run_sweep(&SweepRequest {
                model,
                images,
                labels,
                samples,
                seed,
                mode,
                workers,
                reference,
            })?;
            std::fs::write(&output, &csv)?;
            print!("{csv}");
        }
        Command::Attention {
            model,
            images,
            labels,
            n_low,
            n_high,
            seed,
            dump_masks,
            output,
        } => {
            let csv = run_attention(&AttentionRequest {
                model,
                images,
                labels,
                n_low,
                n_high,
                seed,
                dump_masks,
            })?;
            std::fs::write(&output, &csv)?;
            print!("{csv}");
        }
        Command::Stats { model, output } => {
            let csv = run_stats(&StatsRequest { model })?;
            if let Some(path) = output {
                std::fs::write(&path, &csv)?;
            }
            print!("{csv}");
        }
        Command::GenData { classes, per_class, size, seed, out_dir, prefix } => {
            let (images, labels) = run_gen_data(&GenDataRequest {
                classes,
                per_class,
                size,
                seed,
                out_dir,
                prefix,
            })?;
            println!(
                "wrote {} and {} ({} samples)",
                images.display(),
                labels.display(),
                classes * per_class
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
