use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use fedbev::runner::{
    cmd_eval, cmd_gen_data, cmd_pretrain_ae, cmd_report, cmd_sweep, cmd_train, ExperimentConfig, Layout,
};
use fedbev::{Error, ErrorKind};

/// Desk-scale federated multimodal vehicle detection experiments.
#[derive(Debug, Parser)]
#[command(name = "fedbev", version)]
struct Cli {
    /// Experiment config (TOML). Must carry `version`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads; results do not depend on it.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// Named preset the config file is laid over.
    #[arg(long, global = true)]
    preset: Option<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate client datasets, the test set and pretraining pairs.
    GenData,
    /// Pretrain both cross-modal autoencoders.
    PretrainAe,
    /// Run federated training (resumes a matching interrupted run).
    Train,
    /// Evaluate a detector checkpoint under each sensor combination.
    Eval {
        /// Defaults to the trained model in the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Retrain for every value of the config's sweep.
    Sweep,
    /// Merge the round logs of finished runs.
    Report {
        /// Output directories of the runs to merge.
        #[arg(required = true)]
        runs: Vec<PathBuf>,
    },
}

const EXIT_CONFIG: u8 = 2;
const EXIT_INVARIANT: u8 = 3;
const EXIT_IO: u8 = 4;

fn load(cli: &Cli) -> Result<ExperimentConfig> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path, cli.preset.as_deref())
        .with_context(|| format!("loading {}", path.display()))?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output.dir = o.clone();
    }
    if let Some(w) = cli.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load(cli)?;
    let layout = Layout::of(&cfg);
    match &cli.command {
        Command::GenData => {
            let manifest = cmd_gen_data(&cfg)?;
            println!("wrote {} datasets to {}", manifest.len(), layout.root.display());
            for (file, hash) in manifest {
                println!("{hash}  {file}");
            }
        }
        Command::PretrainAe => {
            for r in cmd_pretrain_ae(&cfg)? {
                println!(
                    "{:?}: held-out mse {:.6} (zero-fill {:.6}) after {} epochs",
                    r.direction, r.held_out_mse, r.zero_fill_mse, r.epochs
                );
            }
        }
        Command::Train => {
            let out = cmd_train(&cfg)?;
            for r in out.reports.iter().filter(|r| r.eval.is_some()) {
                let e = r.eval.expect("filtered");
                println!(
                    "round {:4}  ap50 {:.4}  ap_mean {:.4}  ar100 {:.4}  selected {:?}",
                    r.round, e.ap50, e.ap_mean, e.ar100, r.selected
                );
            }
            println!("logs in {}", layout.rounds_csv().display());
        }
        Command::Eval { checkpoint } => {
            println!("mask,ap50,ap65,ap80,ap_mean,ar1,ar10,ar100");
            for row in cmd_eval(&cfg, checkpoint.as_deref())? {
                let v: Vec<String> = row.summary.values().iter().map(|x| format!("{x:.4}")).collect();
                println!("{},{}", mask_name(&row.mask), v.join(","));
            }
        }
        Command::Sweep => {
            let table = cmd_sweep(&cfg)?;
            print!("{}", table.to_csv());
        }
        Command::Report { runs } => {
            let summary = cmd_report(runs, &layout.root)?;
            println!("run,rounds,ap50,bytes_model_up,bytes_model_down,bytes_raw_data,model_to_raw_ratio");
            for r in summary.runs {
                let opt = |v: Option<f64>| v.map_or_else(|| fedbev::runner::GAP.to_string(), |x| format!("{x:.4}"));
                println!(
                    "{},{},{},{},{},{},{}",
                    r.run,
                    r.rounds,
                    opt(r.final_eval.map(|e| e.ap50)),
                    r.bytes_model_up,
                    r.bytes_model_down,
                    r.bytes_raw_data,
                    opt(r.model_to_raw_ratio)
                );
            }
        }
    }
    Ok(())
}

fn mask_name(m: &fedbev::eval::ModalityMask) -> &'static str {
    use fedbev::eval::ModalityMask::*;
    match m {
        Both => "lidar+radar",
        WithoutRadar => "without-radar",
        WithoutLidar => "without-lidar",
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()).map(Error::kind) {
        Some(ErrorKind::Invariant) => EXIT_INVARIANT,
        Some(ErrorKind::Io) => EXIT_IO,
        Some(ErrorKind::Config) | None => EXIT_CONFIG,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
