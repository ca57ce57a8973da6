use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use augeq::harness::{self, Command, ExperimentConfig};

#[derive(Parser)]
#[command(
    name = "augeq",
    version,
    about = "Augmented ridge regression experiments with deterministic-equivalent risk predictions"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// JSON experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Master seed; overrides the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (0 uses every core).
    #[arg(long, default_value_t = 0)]
    workers: usize,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full grid, rows ordered with λ fastest.
    SweepLambda(Common),
    /// Full grid, rows ordered with α fastest.
    SweepAlpha(Common),
    /// Full grid, rows ordered with n fastest.
    SweepAspect(Common),
    /// Grid sweep with the empirical bias–variance split (R >= 10).
    BiasVariance(Common),
    /// Decay-rate and concentration checks at n and 4n.
    Validate(Common),
    /// Inpainting sweep on IDX image files.
    Mnist(Common),
}

fn run(cmd: Command, args: &Common) -> augeq::Result<()> {
    let mut cfg = ExperimentConfig::load(&args.config)?;
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    let out = args
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("."));
    let paths = harness::with_workers(args.workers, || harness::execute(cmd, &cfg, &out))??;
    for p in paths {
        println!("{}", p.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let (cmd, args) = match &cli.cmd {
        Cmd::SweepLambda(a) => (Command::SweepLambda, a),
        Cmd::SweepAlpha(a) => (Command::SweepAlpha, a),
        Cmd::SweepAspect(a) => (Command::SweepAspect, a),
        Cmd::BiasVariance(a) => (Command::BiasVariance, a),
        Cmd::Validate(a) => (Command::Validate, a),
        Cmd::Mnist(a) => (Command::Mnist, a),
    };
    match run(cmd, args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
