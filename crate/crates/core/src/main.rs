use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use entmerge::data::{write_csv, StreamKind};
use entmerge::diagnostics::export_heatmap_csv;
use entmerge::harness::checkpoint::{load_pool, save_pool};
use entmerge::harness::{
    emit_report, leave_out, load_domains, prepare_seed, run_leave_one_out, ExperimentConfig, Method, Summary,
};
use entmerge::{Error, Result};

#[derive(Parser)]
#[command(name = "entmerge", version, about = "Entropy-adaptive test-time merging of domain experts")]
struct Cli {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Replaces the configured seed list with this single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file or directory, depending on the subcommand.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write one CSV per synthetic domain.
    GenData,
    /// Train one expert per domain and save the pool checkpoint.
    Train {
        /// Leave this domain's expert out of the saved pool.
        #[arg(long)]
        held_out: Option<usize>,
    },
    /// Leave-one-domain-out stream evaluation; writes results.csv, summary.json, coeffs.csv.
    Eval {
        /// Evaluate only this method (repeatable).
        #[arg(long)]
        method: Vec<Method>,
        /// Stream kind: iid, dirichlet:<alpha> or temporal:<stickiness>.
        #[arg(long)]
        stream: Option<StreamKind>,
    },
    /// Pairwise layer angles of a pool; writes the heatmap CSV.
    Diagnose {
        /// Pool checkpoint; trained from the config when omitted.
        #[arg(long)]
        pool: Option<PathBuf>,
    },
    /// Print the per-method table of a summary.json.
    Report {
        /// Directory holding summary.json (defaults to --out or the configured output_dir).
        #[arg(long)]
        input: Option<PathBuf>,
    },
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn out_path(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData => {
            let cfg = config(cli)?;
            let dir = out_path(cli, "data");
            create_dir(&dir)?;
            for d in load_domains(&cfg, cfg.seeds[0])? {
                let path = dir.join(format!("{}.csv", d.domain_id));
                write_csv(&d, &path)?;
                println!("{} ({} rows)", path.display(), d.len());
            }
        }
        Command::Train { held_out } => {
            let cfg = config(cli)?;
            let art = prepare_seed(&cfg, cfg.seeds[0])?;
            let pool = match held_out {
                Some(h) if *h >= art.domains.len() => {
                    return Err(Error::Config(format!("held-out index {h} but only {} domains", art.domains.len())))
                }
                Some(h) => leave_out(&art.pool, *h)?,
                None => art.pool,
            };
            let path = out_path(cli, "pool.emrg");
            save_pool(&pool, &path)?;
            for e in &pool.experts {
                println!("{}: val_loss {:.4} val_acc {:.4}", e.domain_id, e.val_loss, e.val_accuracy);
            }
            println!("saved {} experts to {}", pool.len(), path.display());
        }
        Command::Eval { method, stream } => {
            let mut cfg = config(cli)?;
            if !method.is_empty() {
                cfg.methods = method.clone();
            }
            if let Some(kind) = stream {
                cfg.stream.kind = *kind;
            }
            cfg.validate()?;
            let report = run_leave_one_out(&cfg)?;
            emit_report(&report, &cfg.output_dir)?;
            print_summary(&Summary::from_report(&report));
            println!("wrote {}", cfg.output_dir.display());
        }
        Command::Diagnose { pool } => {
            let pool = match pool {
                Some(p) => load_pool(p)?,
                None => {
                    let cfg = config(cli)?;
                    prepare_seed(&cfg, cfg.seeds[0])?.pool
                }
            };
            let path = out_path(cli, "heatmap.csv");
            let report = export_heatmap_csv(&pool.params(), &path)?;
            println!("{}", report.pair_convention);
            println!("{:<10} {:>14} {:>14}", "layer", "mean_angle_deg", "signal_loss_%");
            for d in &report.depths {
                println!("{:<10} {:>14.3} {:>14.3}", d.layer, d.mean_angle_deg, d.signal_loss_percent);
            }
            println!("wrote {}", path.display());
        }
        Command::Report { input } => {
            let dir = match (input, &cli.out) {
                (Some(d), _) | (None, Some(d)) => d.clone(),
                (None, None) => config(cli)?.output_dir,
            };
            print_summary(&Summary::load(&dir.join("summary.json"))?);
        }
    }
    Ok(())
}

fn print_summary(s: &Summary) {
    println!("stream {} ({} batches of {})", s.stream, s.num_batches, s.batch_size);
    println!("{:<22} {:>9} {:>9} {:>6}", "method", "accuracy", "std", "cells");
    for m in &s.methods {
        println!("{:<22} {:>9.4} {:>9.4} {:>6}", m.method.to_string(), m.mean_accuracy, m.std_accuracy, m.cells);
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}: {e}", e.category());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
