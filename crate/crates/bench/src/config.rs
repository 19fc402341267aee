//! Training configuration.

use std::path::PathBuf;

use serde_json::json;

use ekfac_core::net::Loss;
use ekfac_core::precond::{Hyperparams, PreconditionerKind};

use crate::data::{DatasetSpec, SyntheticSpec};
use crate::error::BenchError;

/// Desk-scale auto-encoder: small enough that the 30-unit bottleneck layers can be traced.
pub const DESK_ARCH: [usize; 7] = [784, 200, 100, 30, 100, 200, 784];
/// The full-size MNIST auto-encoder.
pub const FULL_ARCH: [usize; 9] = [784, 1000, 500, 250, 30, 250, 500, 1000, 784];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every_epochs` epochs.
    StepDecay { factor: f64, every_epochs: usize },
}

impl LrSchedule {
    /// Rate for zero-based `epoch`.
    pub fn rate(&self, base: f64, epoch: usize) -> f64 {
        match *self {
            LrSchedule::Constant => base,
            LrSchedule::StepDecay { factor, every_epochs } => {
                base * factor.powi((epoch / every_epochs) as i32)
            }
        }
    }

    /// Parses `FACTOR,EVERY`.
    pub fn parse_step_decay(s: &str) -> Result<Self, BenchError> {
        let bad = || BenchError::Config(format!("expected FACTOR,EVERY for lr decay, got '{s}'"));
        let (f, e) = s.split_once(',').ok_or_else(bad)?;
        Ok(LrSchedule::StepDecay {
            factor: f.trim().parse().map_err(|_| bad())?,
            every_epochs: e.trim().parse().map_err(|_| bad())?,
        })
    }
}

pub fn parse_loss(s: &str) -> Result<Loss, BenchError> {
    match s {
        "mse" => Ok(Loss::Mse),
        "bce" => Ok(Loss::Bce),
        _ => Err(BenchError::Config(format!("unknown loss '{s}'"))),
    }
}

pub fn loss_tag(l: Loss) -> &'static str {
    match l {
        Loss::Mse => "mse",
        Loss::Bce => "bce",
    }
}

/// `desk`, `full`, or comma-separated layer widths.
pub fn parse_arch(s: &str) -> Result<Vec<usize>, BenchError> {
    match s {
        "desk" => return Ok(DESK_ARCH.to_vec()),
        "full" => return Ok(FULL_ARCH.to_vec()),
        _ => {}
    }
    s.split(',')
        .map(|w| {
            w.trim()
                .parse()
                .map_err(|_| BenchError::Config(format!("bad layer width '{w}' in '{s}'")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub optimizer: PreconditionerKind,
    /// Includes the refresh interval of the eigenbasis.
    pub hyper: Hyperparams,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub dataset: DatasetSpec,
    /// Layer widths from input to reconstruction; all layers are sigmoid.
    pub arch: Vec<usize>,
    pub loss: Loss,
    pub lr_schedule: LrSchedule,
    /// JSON Lines metrics; the checkpoint goes next to it with a `.ckpt` extension.
    pub metrics_out: Option<PathBuf>,
    pub validation: bool,
    /// Report the minibatch loss every this many iterations in addition to the epoch records.
    pub log_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: PreconditionerKind::Ekfac,
            hyper: Hyperparams::default(),
            batch_size: 200,
            epochs: 30,
            seed: 0,
            dataset: DatasetSpec::Synthetic(SyntheticSpec { n: 5000, dim: 784, latent_dim: 10, seed: 0 }),
            arch: DESK_ARCH.to_vec(),
            loss: Loss::Mse,
            lr_schedule: LrSchedule::Constant,
            metrics_out: None,
            validation: false,
            log_every: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), BenchError> {
        let fail = |m: String| Err(BenchError::Config(m));
        if self.batch_size == 0 {
            return fail("batch size must be at least 1".into());
        }
        if self.epochs == 0 {
            return fail("epochs must be at least 1".into());
        }
        if self.arch.len() < 2 || self.arch.contains(&0) {
            return fail(format!("architecture {:?} needs at least two positive widths", self.arch));
        }
        if self.arch.first() != self.arch.last() {
            return fail(format!(
                "an auto-encoder reconstructs its input; widths {:?} do not start and end equal",
                self.arch
            ));
        }
        if let LrSchedule::StepDecay { factor, every_epochs } = self.lr_schedule {
            if !(factor > 0.0 && factor.is_finite()) || every_epochs == 0 {
                return fail(format!("invalid lr decay {factor},{every_epochs}"));
            }
        }
        if self.log_every == Some(0) {
            return fail("log interval must be at least 1".into());
        }
        self.hyper.validate()?;
        Ok(())
    }

    pub fn describe(&self) -> serde_json::Value {
        json!({
            "optimizer": self.optimizer.tag(),
            "lr": self.hyper.learning_rate,
            "damping": self.hyper.damping,
            "refresh_every": self.hyper.refresh_every,
            "batch_size": self.batch_size,
            "epochs": self.epochs,
            "seed": self.seed,
            "dataset": self.dataset.to_string(),
            "arch": self.arch,
            "loss": loss_tag(self.loss),
        })
    }
}
