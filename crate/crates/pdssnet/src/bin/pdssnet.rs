//! Command-line front end. All logic lives in the library (`pdssnet::cli`);
//! this file only declares flags and maps errors to exit codes:
//! 0 success, 2 validation failure, 3 i/o failure, 4 numeric failure.

use clap::{Parser, Subcommand};
use pdssnet::cli;
use pdssnet::error::PdssError;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "pdssnet",
    about = "Selective-scan segmentation toolkit: fixtures, training, inference, checks",
    version
)]
struct Cli {
    /// Seed override; wins over the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads for chunked scans (0 = library default).
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,

    /// JSON run config; unset fields take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory for commands that write files.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a deterministic synthetic tile dataset.
    GenFixtures {
        /// Number of tiles to generate.
        #[arg(long, default_value_t = 64)]
        tiles: usize,
    },
    /// Run one inference forward pass from a checkpoint.
    Forward {
        /// Checkpoint directory (manifest.json + tensors/).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input image tensor file ([3, tile, tile]).
        #[arg(long)]
        input: PathBuf,
    },
    /// Train on a fixture directory and write a checkpoint plus loss CSV.
    TrainToy {
        /// Fixture directory produced by gen-fixtures.
        #[arg(long)]
        data: PathBuf,
    },
    /// Finite-difference gradient verification.
    Gradcheck {
        /// Which suite: "scan", "network", or "all".
        #[arg(long, default_value = "all")]
        scale: String,
    },
    /// Measure sequential vs chunked scan throughput.
    BenchScan {
        /// Sequence length.
        #[arg(long, default_value_t = 16384)]
        len: usize,
        /// Independent channels.
        #[arg(long, default_value_t = 4)]
        d_ch: usize,
        /// Chunk length for the parallel kernel.
        #[arg(long, default_value_t = 256)]
        chunk: usize,
        /// Comma-separated worker counts to try.
        #[arg(long, default_value = "1,2,4")]
        thread_counts: String,
    },
    /// Score predicted label maps against ground truth.
    Metrics {
        /// Directory of predicted label maps (*.pdst).
        #[arg(long)]
        pred: PathBuf,
        /// Directory of ground-truth label maps (*.pdst).
        #[arg(long)]
        gt: PathBuf,
    },
}

fn require_out(out: &Option<PathBuf>) -> pdssnet::Result<&PathBuf> {
    out.as_ref().ok_or_else(|| {
        PdssError::InvalidArgument("this command writes files; pass --out <dir>".into())
    })
}

fn run(args: Cli) -> pdssnet::Result<()> {
    let cfg = cli::resolve_config(args.config.as_deref(), args.seed)?;
    let threads = args.threads;
    match args.command {
        Command::GenFixtures { tiles } => {
            let out = require_out(&args.out)?;
            cli::cmd_gen_fixtures(&cfg, tiles, out)
        }
        Command::Forward { checkpoint, input } => {
            let out = require_out(&args.out)?;
            cli::with_thread_pool(threads, || cli::cmd_forward(&checkpoint, &input, out))?
        }
        Command::TrainToy { data } => {
            let out = require_out(&args.out)?;
            println!("config: {}", cli::describe(&cfg));
            cli::with_thread_pool(threads, || cli::cmd_train_toy(&cfg, &data, out).map(|_| ()))?
        }
        Command::Gradcheck { scale } => {
            cli::with_thread_pool(threads, || cli::cmd_gradcheck(&scale, cfg.seed))?
        }
        Command::BenchScan {
            len,
            d_ch,
            chunk,
            thread_counts,
        } => {
            let counts: Vec<usize> = thread_counts
                .split(',')
                .map(|s| {
                    s.trim().parse::<usize>().map_err(|_| {
                        PdssError::InvalidArgument(format!(
                            "bad thread count {s:?} in --thread-counts"
                        ))
                    })
                })
                .collect::<pdssnet::Result<_>>()?;
            cli::cmd_bench_scan(len, d_ch, chunk, &counts)
        }
        Command::Metrics { pred, gt } => {
            cli::cmd_metrics(&pred, &gt, cfg.n_cls, args.out.as_deref()).map(|_| ())
        }
    }
}

fn main() -> ExitCode {
    let args = Cli::parse();
    match run(args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
