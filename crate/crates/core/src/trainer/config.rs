use serde::{Deserialize, Serialize};

use crate::datagen::PoolMode;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::topk::DEFAULT_EPSILON;

/// Token budget a compression ratio divides: `l = 256 / ρ`.
pub const BASE_TOKEN_BUDGET: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Compression ratio ρ.
    pub rho: usize,
    pub k: usize,
    pub pool_size: usize,
    pub temperature: f64,
    pub epsilon: f64,
    pub lambda: f64,
    pub pretrain_lr: f64,
    /// Query reasoner learning rate in joint training.
    pub joint_lr: f64,
    /// Generator learning rate in joint training.
    pub generator_lr: f64,
    pub optimizer: OptimizerKind,
    /// Joint and contrastive batch size.
    pub batch_size: usize,
    pub pretrain_batch_size: usize,
    /// Distractor documents appended to QA pretraining contexts.
    pub pretrain_distractors: usize,
    pub pretrain_steps: usize,
    pub steps: usize,
    pub seed: u64,
    pub mode: PoolMode,
    pub hidden: usize,
    pub layers: usize,
    pub ff_mult: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rho: 64,
            k: 5,
            pool_size: 20,
            temperature: 0.1,
            epsilon: DEFAULT_EPSILON,
            lambda: 0.1,
            pretrain_lr: 3e-3,
            joint_lr: 5e-3,
            generator_lr: 1e-4,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            pretrain_batch_size: 16,
            pretrain_distractors: 4,
            pretrain_steps: 1500,
            steps: 500,
            seed: 0,
            mode: PoolMode::Oracle,
            hidden: 32,
            layers: 1,
            ff_mult: 2,
        }
    }
}

impl RunConfig {
    /// `l = 256 / ρ`.
    pub fn memory_tokens(&self) -> usize {
        BASE_TOKEN_BUDGET / self.rho.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rho == 0 || BASE_TOKEN_BUDGET % self.rho != 0 {
            return Err(Error::Config(format!(
                "compression ratio {} must divide {BASE_TOKEN_BUDGET}",
                self.rho
            )));
        }
        if self.k == 0 || self.k > self.pool_size {
            return Err(Error::Capacity {
                k: self.k,
                available: self.pool_size,
            });
        }
        if !(self.temperature > 0.0) || !(self.epsilon > 0.0) {
            return Err(Error::Config("temperature and epsilon must be positive".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config(format!("alignment weight {} must be nonnegative", self.lambda)));
        }
        if !(self.pretrain_lr > 0.0) || !(self.joint_lr > 0.0) || !(self.generator_lr >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.pretrain_batch_size == 0 || self.hidden == 0 || self.layers == 0 {
            return Err(Error::Config("batch size, hidden width and depth must be positive".into()));
        }
        Ok(())
    }

    /// Model skeleton for a vocabulary of `vocab_size` symbols. Positions
    /// cover the longest document plus its memory tokens, and `k` memories
    /// followed by a query and answer.
    pub fn model(&self, vocab_size: usize) -> ModelConfig {
        let l = self.memory_tokens();
        ModelConfig {
            vocab_size,
            hidden: self.hidden,
            layers: self.layers,
            memory_tokens: l,
            max_positions: (crate::model::MAX_DOC_TOKENS + l).max(self.k * l + 64),
            ff_mult: self.ff_mult,
        }
    }
}
