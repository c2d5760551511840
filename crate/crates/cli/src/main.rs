use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use mbores::train::{
    best_checkpoint, cmd_eval, cmd_generate, cmd_train, gradcheck, prepare_out_dir, split_file, write_eval_outputs,
    Dataset, GradcheckOptions, RunConfig, TrainOptions, CONFIG_FILE,
};
use mbores::graph::read_graphs;
use mbores::synth::Split;
use mbores::{Error, Result};

#[derive(Parser)]
#[command(name = "mbores", version, about = "Proposal-graph grounding: data generation, training, evaluation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(clap::Args)]
struct Common {
    /// Flat key/value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    multi_branch: Option<Switch>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train/val/test proposal-graph files and a manifest.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints, a log and a run manifest.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset directory from `generate`; scenes are generated in memory
        /// from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
        /// Continue from the trainer state in the output directory.
        #[arg(long)]
        resume: bool,
        /// Proposals kept per graph during training.
        #[arg(long)]
        top_n: Option<usize>,
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a checkpoint on a split, one report per --top-n value.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_delimiter = ',')]
        top_n: Vec<usize>,
        /// Directory for report and per-sample dump files.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Compare analytic gradients with central finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        /// Check this many seeded entries per parameter instead of all.
        #[arg(long)]
        sample: Option<usize>,
    },
}

fn load_config(common: &Common, fallback: RunConfig) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => fallback,
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(m) = common.multi_branch {
        cfg.multi_branch = matches!(m, Switch::On);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn parse_split(s: &str) -> Result<Split> {
    match s {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        _ => Err(Error::Usage(format!("unknown split `{s}` (expected train, val or test)"))),
    }
}

/// Config stored beside a checkpoint by `train`, if any.
fn sibling_config(checkpoint: &Path) -> Option<PathBuf> {
    let p = checkpoint.parent()?.join(CONFIG_FILE);
    p.exists().then_some(p)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { common, out, force } => {
            let cfg = load_config(&common, RunConfig::default())?;
            let m = cmd_generate(&cfg, &out, force)?;
            println!(
                "wrote {} train, {} val, {} test graphs to {}",
                m.counts.train,
                m.counts.val,
                m.counts.test,
                out.display()
            );
        }
        Command::Train {
            common,
            data,
            out,
            force,
            resume,
            top_n,
            quiet,
        } => {
            let mut cfg = load_config(&common, RunConfig::default())?;
            if let Some(n) = top_n {
                cfg.top_n = n;
                cfg.validate()?;
            }
            if resume {
                std::fs::create_dir_all(&out).map_err(|e| Error::Io {
                    path: out.clone(),
                    source: e,
                })?;
            } else {
                prepare_out_dir(&out, force)?;
            }
            let dataset = match &data {
                Some(d) => Dataset::load(d, &cfg)?,
                None => Dataset::generate(&cfg)?,
            };
            let state = out.join(mbores::train::trainer::STATE_FILE);
            let opts = TrainOptions {
                resume_from: resume.then_some(state),
                verbose: !quiet,
                ..Default::default()
            };
            let run = cmd_train(&cfg, &dataset, Some(&out), opts)?;
            let m = &run.manifest;
            println!("parameters: {} in {} tensors", m.parameter_count, m.parameter_tensors);
            println!(
                "epochs run: {}, best epoch: {}",
                m.epochs_run.unwrap_or(0),
                m.best_epoch.map_or("-".to_string(), |e| e.to_string())
            );
            if let Some(t) = &m.test {
                println!("test metrics (top_n={}):\n{}", cfg.top_n, t.table());
            }
            println!("best checkpoint: {}", best_checkpoint(&out).display());
        }
        Command::Eval {
            common,
            checkpoint,
            data,
            split,
            top_n,
            out,
            force,
        } => {
            let base = match (&common.config, sibling_config(&checkpoint)) {
                (None, Some(p)) => RunConfig::load(&p)?,
                _ => RunConfig::default(),
            };
            let cfg = load_config(&common, base)?;
            let graphs = read_graphs(&split_file(&data, parse_split(&split)?))?.collect::<Result<Vec<_>>>()?;
            let top_ns = if top_n.is_empty() { vec![cfg.top_n] } else { top_n };
            if let Some(dir) = &out {
                prepare_out_dir(dir, force)?;
            }
            for (n, report, dump) in cmd_eval(&cfg, &checkpoint, &graphs, &top_ns)? {
                println!("top_n={n}\n{}", report.table());
                if let Some(dir) = &out {
                    write_eval_outputs(dir, n, &report, &dump)?;
                }
            }
        }
        Command::Gradcheck { common, sample } => {
            let cfg = load_config(&common, RunConfig::gradcheck_default())?;
            let opts = GradcheckOptions {
                max_entries: sample,
                ..Default::default()
            };
            let report = gradcheck(&cfg, &opts)?;
            print!("{}", report.table());
            if !report.all_passed() {
                let names: Vec<&str> = report.failures().iter().map(|r| r.name.as_str()).collect();
                return Err(Error::Check(format!("gradient check failed for {}", names.join(", "))));
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
