//! Bi-level meta-training (KM-MAML, MAML, MMAML) and joint training, plus
//! test-time adaptation and evaluation.
//!
//! One epoch is one meta-step over a task mini-batch. Inner loops run
//! sequentially in task order so every run is reproducible bit for bit.

mod adam;
mod adapt;
mod train;

use std::fmt;
use std::str::FromStr;

pub use adam::{Adam, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use adapt::{evaluate, finetune, Adapted, TaskEvaluation};
pub use train::{
    inner_adapt, loss_and_grads, loss_value, meta_gradient, meta_train_epoch, select_batches, EpochReport, InnerResult,
    LogRecord, LossGrads, MetaGradient, TaskBatch, TaskData, TrainState,
};

use crate::error::{Error, Result};
use crate::model::{Group, LossKind, Modulation};

/// Training rule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Strategy {
    /// Single-level training on pooled support and query samples.
    Joint,
    /// Inner loop adapts the base network; no conditioning.
    Maml,
    /// Inner loop adapts the base network; per-layer activation scales
    /// from the embedding are learned in the outer loop only.
    Mmaml,
    /// Inner loop adapts the hypernetworks that modulate every kernel.
    KmMaml,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Joint, Strategy::Maml, Strategy::Mmaml, Strategy::KmMaml];

    pub fn modulation(self) -> Modulation {
        match self {
            Strategy::Joint | Strategy::Maml => Modulation::None,
            Strategy::Mmaml => Modulation::Scalar,
            Strategy::KmMaml => Modulation::Kernel,
        }
    }

    /// Group updated by the inner loop; `None` for single-level training.
    pub fn inner_group(self) -> Option<Group> {
        match self {
            Strategy::Joint => None,
            Strategy::Maml | Strategy::Mmaml => Some(Group::Theta),
            Strategy::KmMaml => Some(Group::Omega),
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Strategy::Joint => "joint",
            Strategy::Maml => "maml",
            Strategy::Mmaml => "mmaml",
            Strategy::KmMaml => "km_maml",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|v| v.tag() == s)
            .ok_or_else(|| Error::Parameter(format!("unknown strategy `{s}` (joint, maml, mmaml, km_maml)")))
    }
}

/// How the outer gradient treats the inner updates.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum InnerMode {
    /// Query gradient at the adapted point, assigned to the initialization.
    #[default]
    FirstOrder,
    /// Exact differentiation through every inner step.
    Unrolled,
}

impl InnerMode {
    pub fn tag(self) -> &'static str {
        match self {
            InnerMode::FirstOrder => "first_order",
            InnerMode::Unrolled => "unrolled",
        }
    }
}

impl FromStr for InnerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first_order" => Ok(InnerMode::FirstOrder),
            "unrolled" => Ok(InnerMode::Unrolled),
            _ => Err(Error::Parameter(format!(
                "unknown inner mode `{s}` (first_order, unrolled)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    /// Adam learning rate of the outer update.
    pub outer_lr: f64,
    /// Plain gradient step size of the inner loop.
    pub inner_lr: f64,
    pub inner_steps: usize,
    pub task_batch: usize,
    pub support_batch: usize,
    pub query_batch: usize,
    pub epochs: usize,
    pub inner_mode: InnerMode,
    pub seed: u64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            strategy: Strategy::KmMaml,
            outer_lr: 0.001,
            inner_lr: 0.001,
            inner_steps: 1,
            task_batch: 3,
            support_batch: 10,
            query_batch: 10,
            epochs: 200,
            inner_mode: InnerMode::FirstOrder,
            seed: 0,
            loss: LossKind::Complex,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.outer_lr >= 0.0) || !self.outer_lr.is_finite() {
            return Err(Error::Parameter(format!(
                "outer learning rate must be >= 0, got {}",
                self.outer_lr
            )));
        }
        if !(self.inner_lr >= 0.0) || !self.inner_lr.is_finite() {
            return Err(Error::Parameter(format!(
                "inner learning rate must be >= 0, got {}",
                self.inner_lr
            )));
        }
        if self.task_batch == 0 || self.support_batch == 0 || self.query_batch == 0 {
            return Err(Error::Parameter(
                "task, support and query batch sizes must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

/// Test-time adaptation mode.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AdaptMode {
    /// Modulation only; no gradient steps.
    #[default]
    OnTheFly,
    /// Gradient steps on the modulated base weights, modulation frozen.
    AdaptBase,
    /// Gradient steps on the modulation networks, base network frozen.
    AdaptHypernet,
}

impl AdaptMode {
    pub fn tag(self) -> &'static str {
        match self {
            AdaptMode::OnTheFly => "on_the_fly",
            AdaptMode::AdaptBase => "adapt_base",
            AdaptMode::AdaptHypernet => "adapt_hypernet",
        }
    }
}

impl FromStr for AdaptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "on_the_fly" => Ok(AdaptMode::OnTheFly),
            "adapt_base" => Ok(AdaptMode::AdaptBase),
            "adapt_hypernet" => Ok(AdaptMode::AdaptHypernet),
            _ => Err(Error::Parameter(format!(
                "unknown adapt mode `{s}` (on_the_fly, adapt_base, adapt_hypernet)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdaptConfig {
    pub mode: AdaptMode,
    pub steps: usize,
    pub lr: f64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            mode: AdaptMode::OnTheFly,
            steps: 10,
            lr: 0.001,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::Parameter(format!(
                "adaptation learning rate must be >= 0, got {}",
                self.lr
            )));
        }
        Ok(())
    }
}

/// Prefixes a numeric failure with where it happened; other errors pass
/// through unchanged.
pub(crate) fn locate(e: Error, at: impl FnOnce() -> String) -> Error {
    match e {
        Error::NonFinite { context } => Error::non_finite(format!("{}: {context}", at())),
        other => other,
    }
}

#[cfg(test)]
mod tests;
