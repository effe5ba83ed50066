//! Controllable-prior feature attention.
//!
//! One [`CpfaModel`] is trained per target feature. Each of its heads attends
//! over the source-feature tokens with a learned query; the batch mean of every
//! head's attention is pulled toward the correlation prior with a learnable
//! confidence `λ_h = softplus(θ_h)`.

mod loss;
mod model;
mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use loss::{
    gamma_regularizer, gamma_schedule, prior_penalty, recon_loss_classification,
    recon_loss_regression, record_total_loss, BatchTarget, LossBreakdown, LossVars, LossWeights,
    GAMMA_ANNEAL_EPOCHS,
};
pub use model::{
    argmax, AttentionOutput, CpfaModel, ForwardVars, InputLayout, ModelShape, OutputKind,
    Prediction, THETA_LAMBDA_INIT,
};
pub use train::{train_feature, EpochLog, FeatureTask, ModelSummary, TargetValues, TrainedFeature};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpfaConfig {
    pub heads: usize,
    pub hidden_dims: Vec<usize>,
    pub embed_dim: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    pub epochs: usize,
    pub patience: usize,
    pub label_smoothing: f64,
    pub focal_gamma: f64,
    pub gamma_prior_enabled: bool,
}

impl Default for CpfaConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            hidden_dims: vec![64, 32],
            embed_dim: 32,
            lr: 1e-3,
            min_lr: 1e-6,
            weight_decay: 1e-4,
            batch: 128,
            epochs: 50,
            patience: 10,
            label_smoothing: 0.1,
            focal_gamma: 2.0,
            gamma_prior_enabled: true,
        }
    }
}

impl CpfaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 {
            return Err(Error::invalid("heads must be at least 1"));
        }
        if self.embed_dim == 0 || self.hidden_dims.is_empty() || self.hidden_dims.contains(&0) {
            return Err(Error::invalid("model dimensions must be positive"));
        }
        if self.batch == 0 || self.epochs == 0 {
            return Err(Error::invalid("batch and epochs must be positive"));
        }
        if self.patience == 0 || self.patience > self.epochs {
            return Err(Error::invalid("patience must be in 1..=epochs"));
        }
        if !(self.lr > 0.0) || self.min_lr > self.lr || self.min_lr < 0.0 {
            return Err(Error::invalid("need 0 <= min_lr <= lr and lr > 0"));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) || self.focal_gamma < 0.0 {
            return Err(Error::invalid(
                "label smoothing must be in [0, 1) and focal gamma >= 0",
            ));
        }
        Ok(())
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            heads: self.heads,
            embed_dim: self.embed_dim,
            hidden_dims: self.hidden_dims.clone(),
        }
    }
}
