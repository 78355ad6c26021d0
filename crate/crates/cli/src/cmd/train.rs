use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, ValueEnum};

use tea_core::io::save_checkpoint;
use tea_core::model::{train_toy, ModelConfig, Task, TrainSettings, Variant};
use tea_core::TeaError;

use crate::{header, CliError, CliResult, Outcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum VariantArg {
    Tea,
    Wa,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Denoise,
    Identity,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[arg(long, value_enum, default_value = "tea")]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 500)]
    pub steps: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Checkpoint path
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curve path [default: <out>.loss.csv when --out is given]
    #[arg(long)]
    pub curve: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "denoise")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 2)]
    pub batch: usize,
    /// Model config file (key=value); its variant is overridden by --variant
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// One `step,loss` line per step with losses printed exactly.
pub fn curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        let _ = writeln!(s, "{i},{l:.17e}");
    }
    s
}

pub fn run(args: &TrainArgs, out: &mut dyn Write) -> CliResult {
    if args.steps == 0 {
        return Err(CliError::Usage("--steps must be at least 1".into()));
    }
    let variant = match args.variant {
        VariantArg::Tea => Variant::Tea,
        VariantArg::Wa => Variant::Wa,
    };
    let cfg = match &args.config {
        Some(path) => ModelConfig {
            variant,
            ..ModelConfig::from_kv(&fs::read_to_string(path)?)?
        },
        None => ModelConfig::convergence(variant),
    };
    let settings = TrainSettings {
        task: match args.task {
            TaskArg::Denoise => Task::Denoise,
            TaskArg::Identity => Task::Identity,
        },
        lr: args.lr,
        batch: args.batch,
        ..TrainSettings::default()
    };
    header(
        out,
        "train-toy",
        Some(args.seed),
        &format!(
            " variant={variant} task={} steps={} lr={:e} batch={} params={}",
            settings.task.name(),
            args.steps,
            settings.lr,
            settings.batch,
            cfg.count_params()
        ),
    )?;
    let trained = match train_toy::<f64>(&cfg, &settings, args.steps, args.seed) {
        Ok(t) => t,
        Err(TeaError::Diverged { step, loss }) => {
            writeln!(out, "diverged at step {step}: loss {loss}")?;
            return Err(CliError::Failed(format!("training diverged at step {step} (loss {loss})")));
        }
        Err(e) => return Err(e.into()),
    };
    let losses = &trained.losses;
    let every = (args.steps / 10).max(1);
    for (i, l) in losses.iter().enumerate() {
        if i % every == 0 || i + 1 == losses.len() {
            writeln!(out, "step {i:>5} loss {l:.6e}")?;
        }
    }
    writeln!(out, "final_loss {:.17e}", losses[losses.len() - 1])?;
    let curve_path = args
        .curve
        .clone()
        .or_else(|| args.out.as_ref().map(|p| p.with_extension("loss.csv")));
    if let Some(path) = &curve_path {
        fs::write(path, curve_csv(losses))?;
    }
    if let Some(path) = &args.out {
        save_checkpoint(path, &trained.model)?;
    }
    Ok(Outcome::Pass)
}
