use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use memlab::lab::{self, FigureInputs, LabConfig, SEED_ENV};

/// Gaussian-mixture diffusion memorization lab.
#[derive(Parser, Debug)]
#[command(name = "memlab", version)]
struct Cli {
    /// JSON configuration; defaults apply to missing fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed (overrides the config and MEMLAB_SEED).
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Worker threads; defaults to all cores.
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Use the full training budget (50000 epochs, 100 draws per sample).
    #[arg(long, global = true)]
    paper_scale: bool,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample the target and write training and holdout sets.
    GenData,
    /// Train one partially memorizing model of size `m`.
    Train,
    /// Loss curves and memorization of a trained model.
    Eval {
        /// Trace written by `train`; trains afresh when omitted.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Two-stage sweep over model size for every configured cell.
    Sweep,
    /// Fit the loss weighting to the transitions of a sweep.
    FitWeighting {
        #[arg(long)]
        sweep: PathBuf,
    },
    /// Predicted transition point for the configured cell.
    Predict {
        /// Weighting CSV from `fit-weighting`; noise-prediction weighting when omitted.
        #[arg(long)]
        weighting: Option<PathBuf>,
    },
    /// Monte Carlo checks of the concentration bounds.
    VerifyTheory,
    /// Plot data for one figure (fig1, fig3, fig4, fig6, fig7).
    Figure {
        name: String,
        #[arg(long)]
        sweep: Option<PathBuf>,
        #[arg(long)]
        weighting: Option<PathBuf>,
    },
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();

    if let Some(n) = cli.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("building worker pool")?;
    }

    let env_seed = std::env::var(SEED_ENV).ok();
    let cfg = LabConfig::load(cli.config.as_deref())
        .and_then(|c| c.resolve(env_seed.as_deref(), cli.seed, cli.paper_scale))
        .context("loading configuration")?;
    log::info!("root seed {}", cfg.root_seed);

    let out = &cli.out;
    let written = match &cli.cmd {
        Cmd::GenData => lab::cmd_gen_data(&cfg, out)?,
        Cmd::Train => lab::cmd_train(&cfg, out)?,
        Cmd::Eval { trace } => lab::cmd_eval(&cfg, trace.as_deref(), out)?,
        Cmd::Sweep => {
            let (files, outcome) = lab::cmd_sweep(&cfg, out)?;
            for (cell, pt) in &outcome.transitions {
                println!(
                    "N={} d={} K={}: start {:?} M_pt {:?} end {:?}",
                    cell.n, cell.d, cell.k, pt.start, pt.pt, pt.end
                );
            }
            let failed = outcome.records.iter().filter(|r| !r.is_ok()).count();
            if failed > 0 {
                log::warn!("{failed} models failed; see the error column");
            }
            files
        }
        Cmd::FitWeighting { sweep } => lab::cmd_fit_weighting(&cfg, sweep, out)?,
        Cmd::Predict { weighting } => {
            let (files, p) = lab::cmd_predict(&cfg, weighting.as_deref(), out)?;
            println!("M* = {:.3}, M_pt = {} ({} weighting)", p.m_star, p.m_pt, p.weighting);
            files
        }
        Cmd::VerifyTheory => lab::cmd_verify_theory(&cfg, out)?,
        Cmd::Figure { name, sweep, weighting } => {
            let inputs = FigureInputs {
                sweep_csv: sweep.clone(),
                weighting_csv: weighting.clone(),
            };
            lab::cmd_figure(&cfg, name, &inputs, out)?
        }
    };
    for p in written {
        println!("wrote {}", p.display());
    }
    Ok(())
}
