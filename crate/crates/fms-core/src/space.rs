//! The hyperparameter search space: configuration type, sampling, and the
//! raw encoding fed to the surrogate's feature extractor.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FmsError, Result};

/// One hyperparameter configuration. The model index selects a pretrained
/// model / architecture from the hub roster.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperparameterConfig {
    pub model_index: usize,
    pub dropout: f64,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Domains for every hyperparameter. Learning rate and weight decay are
/// sampled log-uniformly; the rest uniformly over their listed values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub n_models: usize,
    pub dropout_range: (f64, f64),
    pub batch_sizes: Vec<usize>,
    pub learning_rate_range: (f64, f64),
    pub momenta: Vec<f64>,
    pub weight_decay_range: (f64, f64),
}

impl SearchSpace {
    /// Desk-scale defaults: dropout [0,1], batch sizes {8,16,32,64},
    /// learning rate [1e-4, 1e-1] log, momentum {0.1, 0.5, 0.9},
    /// weight decay [1e-5, 1e-1] log.
    pub fn desk_scale(n_models: usize) -> Self {
        SearchSpace {
            n_models,
            dropout_range: (0.0, 1.0),
            batch_sizes: vec![8, 16, 32, 64],
            learning_rate_range: (1e-4, 1e-1),
            momenta: vec![0.1, 0.5, 0.9],
            weight_decay_range: (1e-5, 1e-1),
        }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> HyperparameterConfig {
        let log_uniform = |rng: &mut dyn rand::RngCore, (lo, hi): (f64, f64)| {
            let u = rng.random_range(lo.log10()..hi.log10());
            10f64.powf(u)
        };
        HyperparameterConfig {
            model_index: rng.random_range(0..self.n_models),
            dropout: rng.random_range(self.dropout_range.0..=self.dropout_range.1),
            batch_size: self.batch_sizes[rng.random_range(0..self.batch_sizes.len())],
            learning_rate: log_uniform(rng, self.learning_rate_range),
            momentum: self.momenta[rng.random_range(0..self.momenta.len())],
            weight_decay: log_uniform(rng, self.weight_decay_range),
        }
    }

    pub fn validate(&self, cfg: &HyperparameterConfig) -> Result<()> {
        let fail = |what: &str| {
            Err(FmsError::InvalidArgument(format!(
                "configuration outside search space: {what}"
            )))
        };
        if cfg.model_index >= self.n_models {
            return fail("model_index");
        }
        if !(self.dropout_range.0..=self.dropout_range.1).contains(&cfg.dropout) {
            return fail("dropout");
        }
        if !self.batch_sizes.contains(&cfg.batch_size) {
            return fail("batch_size");
        }
        if !(self.learning_rate_range.0..=self.learning_rate_range.1).contains(&cfg.learning_rate)
        {
            return fail("learning_rate");
        }
        if !self.momenta.iter().any(|&m| m == cfg.momentum) {
            return fail("momentum");
        }
        if !(self.weight_decay_range.0..=self.weight_decay_range.1).contains(&cfg.weight_decay) {
            return fail("weight_decay");
        }
        Ok(())
    }

    /// Width of [`encode`](Self::encode) output.
    pub fn encoded_dim(&self, include_model_onehot: bool) -> usize {
        5 + if include_model_onehot { self.n_models } else { 0 }
    }

    /// Raw encoding for the feature extractor: optional one-hot model index,
    /// then dropout, batch size, log10 learning rate, momentum, and log10
    /// weight decay. Only the log-domain values are transformed; everything
    /// else is fed unnormalized.
    pub fn encode(&self, cfg: &HyperparameterConfig, include_model_onehot: bool) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.encoded_dim(include_model_onehot));
        if include_model_onehot {
            for i in 0..self.n_models {
                out.push(if i == cfg.model_index { 1.0 } else { 0.0 });
            }
        }
        out.push(cfg.dropout);
        out.push(cfg.batch_size as f64);
        out.push(cfg.learning_rate.log10());
        out.push(cfg.momentum);
        out.push(cfg.weight_decay.log10());
        out
    }
}

/// Budget-indexed validation-accuracy values `Y₁..Y_j`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve(pub Vec<f64>);

impl LearningCurve {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.0.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(FmsError::InvalidArgument(
                "learning-curve accuracy outside [0, 1]".into(),
            ));
        }
        Ok(())
    }

    /// Zero-pad on the left to `len` values (truncating oldest first if the
    /// curve is longer).
    pub fn padded_left(&self, len: usize) -> Vec<f64> {
        let mut out = vec![0.0; len];
        let take = self.0.len().min(len);
        out[len - take..].copy_from_slice(&self.0[self.0.len() - take..]);
        out
    }
}
