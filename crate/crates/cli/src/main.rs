use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use genhead::datasets::Split;
use genhead_cli::commands::{self, OUT_ENV};
use genhead_cli::config::{apply_overrides, parse_config, Config};

#[derive(Parser)]
#[command(
    name = "genhead",
    version,
    about = "Generative classification heads for semi-supervised learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// key=value configuration file; absent keys take their defaults
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Extra key=value settings applied after the file
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output root directory
    #[arg(short, long, env = OUT_ENV)]
    out: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<Config> {
        let mut cfg = match &self.config {
            Some(p) => parse_config(p)?,
            None => Config::default(),
        };
        apply_overrides(&mut cfg, &self.set)?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Train one configuration and write its run directory
    Train(ConfigArgs),
    /// Evaluate a checkpoint on the test split it was trained against
    Eval { checkpoint: PathBuf },
    /// Finite-difference check of every differentiable operation
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print moment class sizes, targets and Monte-Carlo bounds
    MomentsSelftest {
        #[arg(long, default_value_t = 8)]
        dim: usize,
        #[arg(long, default_value_t = 50_000)]
        samples: usize,
        #[arg(long, default_value_t = 20)]
        repeats: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Write latent coordinates of a split to CSV
    ExportEmbeddings {
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(short, long)]
        output: PathBuf,
    },
    /// Train the cartesian product of grid axes in parallel
    Sweep {
        #[command(flatten)]
        base: ConfigArgs,
        /// Axis as key=v1,v2,... (repeatable)
        #[arg(short, long, value_name = "KEY=VALUES")]
        grid: Vec<String>,
        /// Worker threads; defaults to available cores
        #[arg(short, long)]
        jobs: Option<usize>,
    },
}

fn run(cli: Cli) -> Result<bool> {
    let mut stdout = std::io::stdout().lock();
    match cli.command {
        Command::Train(args) => {
            let cfg = args.load()?;
            let s = commands::train(&cfg, &commands::output_root(args.out.as_deref()))?;
            println!(
                "{} accuracy={:.4} compactness={:.4} wall={:.1}s",
                s.dir.display(),
                s.accuracy,
                s.compactness,
                s.wall_secs
            );
            Ok(true)
        }
        Command::Eval { checkpoint } => {
            let s = commands::eval(&checkpoint)?;
            println!(
                "accuracy={:.4} compactness={:.4}",
                s.accuracy, s.compactness
            );
            let per: Vec<String> = s.per_class.iter().map(|a| format!("{a:.3}")).collect();
            println!("per_class={}", per.join(","));
            if let Some((flag, p, r)) = s.gate {
                println!("gate labeled_flag_rate={flag:.4} precision={p:.4} recall={r:.4}");
            }
            Ok(true)
        }
        Command::Gradcheck { seed } => commands::gradcheck(seed, &mut stdout),
        Command::MomentsSelftest {
            dim,
            samples,
            repeats,
            seed,
        } => commands::moments_selftest(dim, samples, repeats, seed, &mut stdout),
        Command::ExportEmbeddings {
            checkpoint,
            split,
            output,
        } => {
            let n = commands::export_embeddings(&checkpoint, split, &output)?;
            println!("wrote {n} rows to {}", output.display());
            Ok(true)
        }
        Command::Sweep { base, grid, jobs } => {
            let cfg = base.load()?;
            let configs = commands::expand_grid(&cfg, &grid)?;
            let jobs =
                jobs.unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
            let root = commands::output_root(base.out.as_deref());
            let mut ok = true;
            for (cfg, r) in configs.iter().zip(commands::sweep(&configs, &root, jobs)) {
                match r {
                    Ok(s) => println!(
                        "{} accuracy={:.4} compactness={:.4}",
                        s.dir.display(),
                        s.accuracy,
                        s.compactness
                    ),
                    Err(e) => {
                        ok = false;
                        eprintln!("{}: {e:#}", cfg.run_name());
                    }
                }
            }
            Ok(ok)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
