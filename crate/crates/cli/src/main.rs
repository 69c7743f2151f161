use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::{Args, Parser, Subcommand};
use lssl_cli::checks::all_checks;
use lssl_cli::commands::{cmd_evaluate, cmd_generate, cmd_pretrain, cmd_reproduce, grid_tasks};
use lssl_cli::config::{ConfigPatch, ExperimentConfig};
use lssl_cli::results::Pretraining;
use lssl_core::eval::Task;
use lssl_core::models::Mode;
use lssl_core::odesolve::GradientMode;

#[derive(Parser)]
#[command(name = "lssl", version, about = "Longitudinal self-supervised pretraining on a synthetic cohort")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write cohort.jsonl, splits.csv and manifest.json.
    Generate(Common),
    /// Pretrain one mode; writes train_log.csv and last/best/final checkpoints.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Directory holding the generated cohort (default: --out).
        #[arg(long)]
        cohort: Option<PathBuf>,
        /// Continue from pretrain/<mode>/last.ckpt if present.
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune and evaluate a checkpoint (or the scratch baseline).
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cohort: Option<PathBuf>,
        #[arg(long, conflicts_with = "scratch")]
        checkpoint: Option<PathBuf>,
        /// Evaluate freshly initialized weights instead of a checkpoint.
        #[arg(long)]
        scratch: bool,
        /// age, next_visit, norms, node_cls or all.
        #[arg(long, default_value = "all")]
        task: String,
    },
    /// Generate, pretrain every mode, evaluate every task; writes results.csv and summary.md.
    Reproduce {
        #[command(flatten)]
        common: Common,
        /// Grid cells run in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

#[derive(Args)]
struct Common {
    /// Flat TOML file; flags win over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    mode: Option<Mode>,
    #[arg(long)]
    lambda_dir: Option<f64>,
    #[arg(long)]
    lambda_recon: Option<f64>,
    /// Use the NODE variant (`--node` or `--node false`).
    #[arg(long, num_args = 0..=1, default_missing_value = "true")]
    node: Option<bool>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    rtol: Option<f64>,
    #[arg(long)]
    atol: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    n_subjects: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    finetune_epochs: Option<usize>,
    /// adjoint or direct.
    #[arg(long, value_parser = parse_gradient)]
    gradient: Option<GradientMode>,
}

fn parse_gradient(s: &str) -> Result<GradientMode, String> {
    match s {
        "adjoint" => Ok(GradientMode::Adjoint),
        "direct" => Ok(GradientMode::Direct),
        _ => Err(format!("expected adjoint or direct, got '{s}'")),
    }
}

impl Common {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let file = match &self.config {
            Some(p) => ConfigPatch::from_file(p)?,
            None => ConfigPatch::default(),
        };
        let flags = ConfigPatch {
            mode: self.mode,
            lambda_dir: self.lambda_dir,
            lambda_recon: self.lambda_recon,
            node: self.node,
            seed: self.seed,
            epochs: self.epochs,
            rtol: self.rtol,
            atol: self.atol,
            out: self.out.clone(),
            n_subjects: self.n_subjects,
            batch_size: self.batch_size,
            finetune_epochs: self.finetune_epochs,
            gradient: self.gradient,
            ..Default::default()
        };
        file.overlay(flags).resolve()
    }
}

fn parse_tasks(list: &str, model: Pretraining) -> Result<Vec<Task>> {
    if list == "all" {
        return Ok(grid_tasks(model));
    }
    list.split(',').map(|t| t.trim().parse::<Task>().map_err(|e| anyhow::anyhow!("{e}"))).collect()
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Generate(c) => {
            let cfg = c.resolve()?;
            let m = cmd_generate(&cfg)?;
            println!("wrote {} subjects, {} visits, {} pairs to {}", m.n_subjects, m.n_visits, m.pairs, cfg.out.display());
        }
        Command::Pretrain { common, cohort, resume } => {
            let cfg = common.resolve()?;
            let dir = cohort.unwrap_or_else(|| cfg.out.clone());
            let o = cmd_pretrain(&cfg, &dir, resume)?;
            println!("{} pretrained for {} epochs (best val at epoch {})", cfg.mode, o.records.len(), o.best_epoch);
        }
        Command::Evaluate { common, cohort, checkpoint, scratch, task } => {
            let cfg = common.resolve()?;
            if checkpoint.is_none() && !scratch {
                bail!("pass --checkpoint PATH or --scratch");
            }
            let model = match &checkpoint {
                Some(p) => Pretraining::Mode(lssl_cli::checkpoint::Checkpoint::load(p)?.mode),
                None => Pretraining::Scratch,
            };
            let tasks = parse_tasks(&task, model)?;
            let dir = cohort.unwrap_or_else(|| cfg.out.clone());
            let reports = cmd_evaluate(&cfg, &dir, checkpoint.as_deref(), &tasks)?;
            for r in reports {
                let shown: Vec<String> = r.metrics.iter().map(|(k, v)| format!("{k}={v}")).collect();
                println!("{model} {}: {}", r.task, shown.join(" "));
            }
        }
        Command::Reproduce { common, jobs } => {
            let cfg = common.resolve()?;
            let o = cmd_reproduce(&cfg, jobs)?;
            for c in all_checks(&o.rows) {
                println!("{} {}: {}", if c.pass { "PASS" } else { "FAIL" }, c.title, c.detail);
            }
            println!("wrote {} and {}", o.results.display(), o.summary.display());
        }
    }
    Ok(())
}
