//! Command-line front end: `prune`, `eval`, and `report`.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fang_core::pipeline::{cmd_eval, cmd_prune_resolved, cmd_report, RunConfig};

#[derive(Parser)]
#[command(name = "fang", about = "Function-aware structured pruning toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Prune a model per a JSON config, writing the pruned archive and report.
    Prune(PruneArgs),
    /// Evaluate perplexity of a checkpoint archive on a corpus.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        corpus: PathBuf,
        /// Non-overlapping evaluation window in tokens.
        #[arg(long, default_value_t = 128)]
        window: usize,
    },
    /// Render a report JSON as a table.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Args)]
struct PruneArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Override the configured global sparsity.
    #[arg(long)]
    sparsity: Option<f64>,
    /// obc | obc-traditional | flap | fang-obc | fang-flap
    #[arg(long)]
    method: Option<String>,
    #[arg(long = "k-groups")]
    k_groups: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "pca-dim")]
    pca_dim: Option<usize>,
    /// uniform | fc | taylor
    #[arg(long)]
    alloc: Option<String>,
    /// ours | reverse | uniform | only_matched
    #[arg(long)]
    reweight: Option<String>,
    /// fang | random
    #[arg(long)]
    grouping: Option<String>,
    /// Disable the shared-group exemption.
    #[arg(long = "no-shared-group")]
    no_shared_group: bool,
    /// sequential | oneshot
    #[arg(long)]
    propagation: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

fn init_threads() {
    if let Ok(v) = std::env::var("FANG_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn run() -> Result<(), fang_core::Error> {
    match Cli::parse().command {
        Command::Prune(args) => {
            let mut cfg = RunConfig::from_path(&args.config)?;
            let p = &mut cfg.prune;
            if let Some(v) = args.sparsity {
                p.sparsity = v;
            }
            if let Some(v) = &args.method {
                p.method = v.parse()?;
            }
            if let Some(v) = args.k_groups {
                p.k_groups = v;
            }
            if let Some(v) = args.tau {
                p.tau = v;
            }
            if let Some(v) = args.pca_dim {
                p.pca_dim = v;
            }
            if let Some(v) = &args.alloc {
                p.alloc = v.parse()?;
            }
            if let Some(v) = &args.reweight {
                p.reweight = v.parse()?;
            }
            if let Some(v) = &args.grouping {
                p.grouping = v.parse()?;
            }
            if args.no_shared_group {
                p.shared_group = false;
            }
            if let Some(v) = &args.propagation {
                p.propagation = v.parse()?;
            }
            if let Some(v) = args.seed {
                p.seed = v;
            }
            let report = cmd_prune_resolved(&cfg, &args.out)?;
            println!(
                "pruned: realized sparsity {:.4}, perplexity {:.4} -> {:.4}",
                report.realized_sparsity, report.dense_perplexity, report.pruned_perplexity
            );
            println!("wrote {}", args.out.join("report.json").display());
            Ok(())
        }
        Command::Eval { ckpt, corpus, window } => {
            let (ppl, tokens) = cmd_eval(&ckpt, &corpus, window)?;
            println!("perplexity {ppl:.6} over {tokens} tokens");
            Ok(())
        }
        Command::Report { input } => {
            print!("{}", cmd_report(&input)?);
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
