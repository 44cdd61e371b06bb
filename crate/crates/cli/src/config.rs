use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::{Args, ValueEnum};
use clara_core::datagen::PoolMode;
use clara_core::trainer::{OptimizerKind, RunConfig};
use serde_json::{Map, Value};

use crate::Failure;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Mode {
    Normal,
    Oracle,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Opt {
    Sgd,
    Adam,
}

/// Run hyperparameters. Unset flags fall back to the config file, then to
/// the checkpoint's snapshot when there is one, then to built-in defaults.
#[derive(Args, Debug, Default)]
pub struct RunArgs {
    /// JSON file with any subset of the run configuration
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Compression ratio; memory tokens = 256 / rho
    #[arg(long)]
    pub rho: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    /// Candidate pool size per query
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub temperature: Option<f64>,
    /// Weight of the hidden-state alignment term in pretraining
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub pretrain_lr: Option<f64>,
    /// Query reasoner learning rate
    #[arg(long)]
    pub joint_lr: Option<f64>,
    #[arg(long)]
    pub generator_lr: Option<f64>,
    #[arg(long, value_enum)]
    pub optimizer: Option<Opt>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_batch_size: Option<usize>,
    #[arg(long)]
    pub pretrain_distractors: Option<usize>,
    #[arg(long)]
    pub pretrain_steps: Option<usize>,
    /// Joint training steps
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long)]
    pub hidden: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
}

fn overlay_file(base: RunConfig, path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read config file {}", path.display()))?;
    let file: Map<String, Value> = serde_json::from_str(&text)
        .map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())))?;
    let mut merged = match serde_json::to_value(base)? {
        Value::Object(m) => m,
        _ => unreachable!("run config serializes to an object"),
    };
    for (key, value) in file {
        if !merged.contains_key(&key) {
            return Err(Failure::Usage(format!("config file {}: unknown key `{key}`", path.display())).into());
        }
        merged.insert(key, value);
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| Failure::Usage(format!("config file {}: {e}", path.display())).into())
}

impl RunArgs {
    /// Resolves flags over the config file over `base`.
    pub fn resolve(&self, base: RunConfig) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(path) => overlay_file(base, path)?,
            None => base,
        };
        macro_rules! set {
            ($($field:ident),*) => {
                $(if let Some(v) = self.$field { c.$field = v; })*
            };
        }
        set!(
            rho, k, pool_size, temperature, lambda, pretrain_lr, joint_lr, generator_lr, batch_size,
            pretrain_batch_size, pretrain_distractors, pretrain_steps, steps, seed, hidden, layers
        );
        if let Some(o) = self.optimizer {
            c.optimizer = match o {
                Opt::Sgd => OptimizerKind::Sgd,
                Opt::Adam => OptimizerKind::Adam,
            };
        }
        if let Some(m) = self.mode {
            c.mode = match m {
                Mode::Normal => PoolMode::Normal,
                Mode::Oracle => PoolMode::Oracle,
            };
        }
        c.validate().map_err(|e| Failure::Usage(e.to_string()))?;
        Ok(c)
    }
}
