use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use hgot::objective::AblationMode;
use hgot::HgotError;
use hgot_cli::config::RunConfig;
use hgot_cli::{
    cmd_bench, cmd_eval, cmd_generate, cmd_sweep, cmd_train, exit_code, load_bench_config, load_run_config,
    load_sweep_spec, BenchConfig,
};

#[derive(Parser)]
#[command(name = "hgot", version, about = "Heterogeneous graph representation learning with optimal transport")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run config.
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `out_dir`.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated seeds; overrides `seeds`.
    #[arg(long, value_delimiter = ',')]
    seed: Option<Vec<u64>>,
    /// Overrides `train.ablation`.
    #[arg(long, value_parser = parse_ablation)]
    ablation: Option<AblationMode>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per seed and score the embeddings.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Also write the graph-space transport plans of the final model.
        #[arg(long)]
        dump_plans: bool,
    },
    /// Train and score over a grid of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the transport solvers on random instances.
    Bench {
        /// JSON bench config; defaults apply when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic graph as a dataset directory.
    Generate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Score a saved checkpoint.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn parse_ablation(s: &str) -> Result<AblationMode, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| format!("unknown ablation {s:?}; expected full, no_agg, no_str, distance_only or contrastive"))
}

fn run_config(args: &RunArgs) -> Result<RunConfig, HgotError> {
    let mut cfg = load_run_config(&args.config)?;
    if let Some(out) = &args.out {
        cfg.out_dir = Some(out.clone());
    }
    if let Some(seeds) = &args.seed {
        cfg.seeds = seeds.clone();
    }
    if let Some(mode) = args.ablation {
        cfg.train.ablation = mode;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<(), HgotError> {
    match cli.command {
        Command::Train { run, dump_plans } => {
            let cfg = run_config(&run)?;
            for s in cmd_train(&cfg, dump_plans)? {
                let loss = s.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"));
                match &s.scores {
                    Some(sc) => println!(
                        "seed {}: {} epochs, loss {loss}, macro-F1 {:.4}, micro-F1 {:.4}, NMI {:.4}",
                        s.seed,
                        s.epochs_run,
                        sc.macro_f1(),
                        sc.micro_f1(),
                        sc.nmi()
                    ),
                    None => println!("seed {}: {} epochs, loss {loss}", s.seed, s.epochs_run),
                }
            }
        }
        Command::Sweep { config, out } => {
            let mut spec = load_sweep_spec(&config)?;
            if let Some(out) = out {
                spec.base.out_dir = Some(out);
            }
            for row in cmd_sweep(&spec)? {
                match &row.macro_f1 {
                    Some(m) => println!("{} = {}: macro-F1 {:.4} ± {:.4}", spec.parameter.as_str(), row.value, m.mean, m.std),
                    None => println!("{} = {}: all runs failed", spec.parameter.as_str(), row.value),
                }
            }
        }
        Command::Bench { config, out } => {
            let cfg = match config {
                Some(path) => load_bench_config(&path)?,
                None => BenchConfig::default(),
            };
            let report = cmd_bench(&cfg, out.as_deref())?;
            for t in &report.timings {
                println!("{:<8} n={:<5} {:.3e} s/iter", t.solver, t.n, t.seconds_per_iteration);
            }
            println!("slopes: cg {:.2}, sinkhorn {:.2}", report.cg_slope, report.sinkhorn_slope);
            for w in &report.warnings {
                eprintln!("warning: {w}");
            }
        }
        Command::Generate { config, out } => {
            let mut cfg = load_run_config(&config)?;
            if let Some(out) = out {
                cfg.out_dir = Some(out);
            }
            let g = cmd_generate(&cfg)?;
            println!("wrote {} target nodes", g.target_count());
        }
        Command::Eval { run, checkpoint } => {
            let cfg = run_config(&run)?;
            match cmd_eval(&cfg, &checkpoint)? {
                Some(sc) => println!(
                    "macro-F1 {:.4}, micro-F1 {:.4}, NMI {:.4}",
                    sc.macro_f1(),
                    sc.micro_f1(),
                    sc.nmi()
                ),
                None => println!("graph has no labels; wrote embeddings only"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
