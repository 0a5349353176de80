//! Alternating discriminator / encoder-decoder-Siamese optimization.

mod adam;
mod fit;
mod state;
mod step;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentPolicy, DataError};
use crate::eval::EvalError;
use crate::losses::{LossError, LossWeights};
use crate::model::ModelError;

pub use adam::{Adam, AdamConfig};
pub use fit::{fit, FitOptions, FitOutcome, Trainer};
pub use state::{BestModel, EpochRecord, TrainState};
pub use step::{train_step, StepRates, StepStats};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss term {term} at epoch {epoch}, step {step}")]
    NonFiniteLoss { term: &'static str, epoch: usize, step: usize },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("io error on {path}: {reason}")]
    Io { path: String, reason: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Learning rate of the encoders, decoders and Siamese network.
    pub lr_main: f64,
    /// Learning rate of the discriminators.
    pub lr_disc: f64,
    /// Multiplier applied every `decay_every` epochs.
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Class-paired (M1, M2) couples per step.
    pub pairs_per_step: usize,
    /// Steps per epoch; when absent, one pass over the training M1 spectra.
    pub steps_per_epoch: Option<usize>,
    pub weights: LossWeights,
    /// Also train on triplets anchored in M2, averaging both directions.
    pub symmetric_triplets: bool,
    /// Evaluate zero-weighted translation and adversarial terms anyway, for reporting.
    pub compute_inactive_terms: bool,
    pub augment: AugmentPolicy,
    pub adam: AdamConfig,
    pub bn_momentum: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 600,
            lr_main: 1e-4,
            lr_disc: 1e-3,
            lr_decay: 0.75,
            decay_every: 10,
            pairs_per_step: 16,
            steps_per_epoch: None,
            weights: LossWeights::default(),
            symmetric_triplets: true,
            compute_inactive_terms: false,
            augment: AugmentPolicy::default(),
            adam: AdamConfig::default(),
            bn_momentum: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if !(self.lr_main > 0.0 && self.lr_disc > 0.0 && self.lr_main.is_finite() && self.lr_disc.is_finite()) {
            return bad(format!("learning rates {} and {} must be positive", self.lr_main, self.lr_disc));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("decay {} outside (0, 1]", self.lr_decay));
        }
        if self.decay_every == 0 || self.pairs_per_step == 0 || self.steps_per_epoch == Some(0) {
            return bad("decay interval, batch size and steps per epoch must be positive".into());
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return bad(format!("adam parameters {a:?}"));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return bad(format!("batch-norm momentum {}", self.bn_momentum));
        }
        self.weights.validate()?;
        self.augment.validate()?;
        Ok(())
    }

    pub fn lr_main_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr_main, self)
    }

    pub fn lr_disc_at(&self, epoch: usize) -> f64 {
        lr_at(epoch, self.lr_disc, self)
    }
}

/// Step decay: `base · decay^⌊epoch / decay_every⌋`.
pub fn lr_at(epoch: usize, base: f64, cfg: &TrainConfig) -> f64 {
    base * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, 1e-4, &c), 1e-4);
        assert!((lr_at(10, 1e-4, &c) - 7.5e-5).abs() < 1e-12 * 7.5e-5);
        assert!((lr_at(25, 1e-3, &c) - 5.625e-4).abs() < 1e-12 * 5.625e-4);
        assert_eq!(lr_at(9, 1e-3, &c), 1e-3);
    }

    #[test]
    fn schedule_matches_closed_form_for_every_epoch() {
        let c = TrainConfig::default();
        let mut expected = c.lr_main;
        for e in 0..=600 {
            if e > 0 && e % 10 == 0 {
                expected *= 0.75;
            }
            let got = c.lr_main_at(e);
            assert!((got - expected).abs() <= 1e-12 * expected, "epoch {e}");
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig { lr_decay: 1.5, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { lr_main: 0.0, ..Default::default() }.validate().is_err());
        assert!(TrainConfig { max_epochs: 0, ..Default::default() }.validate().is_err());
        let w = LossWeights { gamma7: 0.0, ..Default::default() };
        assert!(TrainConfig { weights: w, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn config_toml_round_trip() {
        let c = TrainConfig { steps_per_epoch: Some(3), lr_main: 0.1 + 0.2, ..Default::default() };
        let text = toml::to_string(&c).unwrap();
        assert_eq!(toml::from_str::<TrainConfig>(&text).unwrap(), c);
        let partial: TrainConfig = toml::from_str("max_epochs = 5").unwrap();
        assert_eq!(partial.max_epochs, 5);
        assert_eq!(partial.lr_disc, 1e-3);
    }
}
