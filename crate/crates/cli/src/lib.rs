// SPDX-License-Identifier: MIT OR Apache-2.0

//! The `mipc` command line: experiment configs, training runs, analysis
//! grids, run manifests and heatmap export.

pub mod commands;
pub mod config;
pub mod error;
pub mod export;
pub mod manifest;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "mipc", version, about = "Train, obfuscate and take apart a tiny IOI transformer")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Experiment config (TOML).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Output directory, overriding the config's `out_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Overrides the training and initialization seeds.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Run the model in 64-bit floating point.
    #[arg(long = "f64", global = true)]
    pub use_f64: bool,
    /// Suppress progress output on stderr.
    #[arg(long, short, global = true)]
    pub quiet: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train, or derive, every run in the config.
    Train,
    /// Attribution and patching grids for every run's checkpoint.
    Analyze,
    /// Write the vocabulary and the datasets each run sees.
    GenData,
    /// Build or inspect permutation caches.
    #[command(subcommand)]
    Perm(PermCommand),
    /// Rank multiple-choice completions by likelihood.
    EvalMcq(EvalMcqArgs),
    /// Print a summary of a checkpoint.
    InspectCheckpoint {
        path: PathBuf,
    },
}

#[derive(Debug, Subcommand)]
pub enum PermCommand {
    /// Write `perm-<seed>.json` into `--out`, or print it with no `--out`.
    Build {
        /// Permutation size; defaults to the config's vocabulary size.
        #[arg(long)]
        size: Option<usize>,
    },
    Inspect {
        path: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct EvalMcqArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// JSON lines of `{context, completions, gold}`. Without it, four-way
    /// items are built from the config's held-out prompts in the token
    /// space of `--run`.
    #[arg(long)]
    pub items: Option<PathBuf>,
    #[arg(long)]
    pub run: Option<String>,
    /// Divide each completion's loss by its length.
    #[arg(long)]
    pub normalize: bool,
}

fn print_json<S: Serialize>(value: &S) -> CliResult<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_config(g: &GlobalArgs) -> CliResult<ExperimentConfig> {
    let path = g
        .config
        .as_deref()
        .ok_or_else(|| CliError::Usage("--config PATH is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(out) = &g.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = g.seed {
        cfg.override_seed(seed);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn relative<'a>(path: &'a Path, root: &Path) -> &'a Path {
    path.strip_prefix(root).unwrap_or(path)
}

pub fn run(cli: Cli) -> CliResult<()> {
    let g = &cli.global;
    match &cli.command {
        Command::Train => {
            let cfg = load_config(g)?;
            for r in commands::cmd_train(&cfg, g.quiet)? {
                println!(
                    "{}\t{}\t{}\t{:.1}s\tlogit diff {:.3}\tIO preferred {:.1}%",
                    r.name,
                    r.provenance,
                    r.checkpoint.display(),
                    r.train_seconds,
                    r.held_out.mean_logit_diff,
                    100.0 * r.held_out.io_preference
                );
            }
        }
        Command::Analyze => {
            let cfg = load_config(g)?;
            let runs = commands::cmd_analyze(&cfg, g.use_f64)?;
            for r in &runs {
                println!("{}\t{}\t{} files", r.name, r.provenance, r.files.len());
            }
            for (stem, rows) in commands::comparison(&runs) {
                let cells: Vec<String> = rows
                    .iter()
                    .map(|d| match d.normalized {
                        Some(v) => format!("{}={v:.4}", d.run),
                        None => format!("{}=n/a", d.run),
                    })
                    .collect();
                println!("diffuseness {stem}\t{}", cells.join("\t"));
            }
        }
        Command::GenData => {
            let cfg = load_config(g)?;
            for f in commands::cmd_gen_data(&cfg)? {
                println!("{}", relative(&f, &cfg.out_dir).display());
            }
        }
        Command::Perm(PermCommand::Build { size }) => {
            let seed = g.seed.ok_or_else(|| CliError::Usage("perm build needs --seed N".into()))?;
            let (size, dir) = match (size, &g.config) {
                (Some(s), _) => (*s, g.out.clone()),
                (None, Some(_)) => {
                    let cfg = load_config(g)?;
                    (cfg.task(None)?.vocab_size(), Some(cfg.out_dir.join("perm")))
                }
                (None, None) => return Err(CliError::Usage("perm build needs --size or --config".into())),
            };
            match dir {
                Some(dir) => print_json(&commands::cmd_perm_build(seed, size, &dir)?)?,
                None => {
                    let map = mipc_core::tokenizer::build_permutation_map(seed, size)?;
                    print_json(&map.forward)?;
                }
            }
        }
        Command::Perm(PermCommand::Inspect { path }) => print_json(&commands::cmd_perm_inspect(path)?)?,
        Command::EvalMcq(a) => {
            let items = match &a.items {
                Some(p) => commands::read_mcq_items(p)?,
                None => {
                    let cfg = load_config(g)?;
                    let name = a
                        .run
                        .as_deref()
                        .ok_or_else(|| CliError::Usage("eval-mcq needs --items or --run".into()))?;
                    let run = cfg.run(name)?;
                    let layout = commands::Layout::new(&cfg.out_dir);
                    let map = match run.obfuscation.seed() {
                        Some(s) => Some(commands::permutation(&cfg, &layout, s)?),
                        None => None,
                    };
                    let task = cfg.task(map)?;
                    let d = &cfg.dataset;
                    let corpus = task.training_corpus(d.corpus_size, d.corpus_seed, d.filler_fraction)?;
                    let held = task.held_out_dataset(d.held_out_size, d.held_out_seed, &corpus)?;
                    commands::ioi_mcq_items(&task, &held, d.held_out_seed)?
                }
            };
            let report = commands::cmd_eval_mcq(&a.checkpoint, &items, a.normalize, g.use_f64)?;
            if let Some(dir) = &g.out {
                std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
                let p = dir.join("mcq.json");
                std::fs::write(&p, serde_json::to_string_pretty(&report)?).map_err(|e| CliError::io(&p, e))?;
            }
            println!(
                "accuracy {:.4} on {} items (chance {:.4})",
                report.accuracy,
                items.len(),
                items.iter().map(|i| 1.0 / i.completions.len() as f64).sum::<f64>() / items.len() as f64
            );
        }
        Command::InspectCheckpoint { path } => print_json(&commands::cmd_inspect_checkpoint(path)?)?,
    }
    Ok(())
}
