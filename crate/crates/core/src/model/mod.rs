//! Model assembly: learnable per-bus positional encoding, ARMA graph
//! filter stacks, an encoder-only transformer, and the per-bus sigmoid
//! classification head — plus the per-node MLP and ARMA-only baselines
//! trained for comparison.

mod build;
mod forward;

pub use build::*;
pub use forward::*;

use crate::autodiff::{AdError, ParamSet, Tensor};
use crate::train::TrainError;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Which architecture a model instance is.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Aceot,
    ArmaOnly,
    Mlp,
}

impl ModelKind {
    pub fn parse(name: &str) -> Option<Self> {
        Some(match name {
            "aceot" => ModelKind::Aceot,
            "arma" | "arma_only" | "armaconv" => ModelKind::ArmaOnly,
            "mlp" => ModelKind::Mlp,
            _ => return None,
        })
    }

    pub fn label(&self) -> &'static str {
        match self {
            ModelKind::Aceot => "aceot",
            ModelKind::ArmaOnly => "arma",
            ModelKind::Mlp => "mlp",
        }
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("d_model {d_model} is not divisible by heads {heads}")]
    HeadSplit { d_model: usize, heads: usize },
    #[error("{0} must be at least 1")]
    ZeroCount(&'static str),
    #[error("dropout {0} outside [0, 1)")]
    BadDropout(f64),
    #[error("unknown model kind {0:?}")]
    UnknownKind(String),
}

/// ACEOT hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AceotConfig {
    pub n_buses: usize,
    /// Hidden width of the graph-filter stage.
    pub h_c: usize,
    pub arma_layers: usize,
    /// Parallel filter stacks per layer.
    pub stacks: usize,
    /// Recursive propagation steps per stack.
    pub iterations: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub dropout: f64,
    pub pos_weight: f64,
}

impl AceotConfig {
    /// Tuned values for the 14-bus system.
    pub fn ieee14(n_buses: usize) -> Self {
        AceotConfig {
            n_buses,
            h_c: 64,
            arma_layers: 3,
            stacks: 2,
            iterations: 3,
            heads: 4,
            enc_layers: 1,
            d_model: 64,
            d_ff: 128,
            dropout: 0.25,
            pos_weight: 8.5,
        }
    }

    /// Tuned values for the 300-bus system.
    pub fn ieee300(n_buses: usize) -> Self {
        AceotConfig {
            n_buses,
            h_c: 32,
            arma_layers: 3,
            stacks: 3,
            iterations: 5,
            heads: 4,
            enc_layers: 2,
            d_model: 256,
            d_ff: 512,
            dropout: 0.20,
            pos_weight: 9.0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.d_model % self.heads != 0 {
            return Err(ConfigError::HeadSplit {
                d_model: self.d_model,
                heads: self.heads,
            });
        }
        for (name, v) in [
            ("n_buses", self.n_buses),
            ("h_c", self.h_c),
            ("arma_layers", self.arma_layers),
            ("stacks", self.stacks),
            ("iterations", self.iterations),
            ("heads", self.heads),
            ("enc_layers", self.enc_layers),
            ("d_model", self.d_model),
            ("d_ff", self.d_ff),
        ] {
            if v == 0 {
                return Err(ConfigError::ZeroCount(match name {
                    "n_buses" => "n_buses",
                    "h_c" => "h_c",
                    "arma_layers" => "arma_layers",
                    "stacks" => "stacks",
                    "iterations" => "iterations",
                    "heads" => "heads",
                    "enc_layers" => "enc_layers",
                    "d_model" => "d_model",
                    _ => "d_ff",
                }));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ConfigError::BadDropout(self.dropout));
        }
        Ok(())
    }
}

/// ARMA-only baseline hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmaOnlyConfig {
    pub n_buses: usize,
    pub h_c: usize,
    pub arma_layers: usize,
    pub stacks: usize,
    pub iterations: usize,
    pub dropout: f64,
    pub pos_weight: f64,
}

impl ArmaOnlyConfig {
    pub fn ieee14(n_buses: usize) -> Self {
        ArmaOnlyConfig {
            n_buses,
            h_c: 32,
            arma_layers: 3,
            stacks: 2,
            iterations: 3,
            dropout: 0.10,
            pos_weight: 3.0,
        }
    }

    pub fn ieee300(n_buses: usize) -> Self {
        ArmaOnlyConfig {
            n_buses,
            h_c: 64,
            arma_layers: 3,
            stacks: 3,
            iterations: 5,
            dropout: 0.20,
            pos_weight: 1.5,
        }
    }
}

/// Per-node MLP baseline hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub n_buses: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub pos_weight: f64,
}

impl MlpConfig {
    pub fn ieee14(n_buses: usize) -> Self {
        MlpConfig {
            n_buses,
            hidden: 64,
            layers: 3,
            dropout: 0.20,
            pos_weight: 1.0,
        }
    }

    pub fn ieee300(n_buses: usize) -> Self {
        MlpConfig {
            n_buses,
            hidden: 128,
            layers: 3,
            dropout: 0.30,
            pos_weight: 1.0,
        }
    }
}

/// The kind-tagged configuration, also the checkpoint `config` payload.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    Aceot(AceotConfig),
    ArmaOnly(ArmaOnlyConfig),
    Mlp(MlpConfig),
}

impl ModelConfig {
    /// Tuned defaults for a model kind on a system, selected by size.
    pub fn defaults(kind: ModelKind, n_buses: usize) -> Self {
        let large = n_buses >= 100;
        match kind {
            ModelKind::Aceot => ModelConfig::Aceot(if large {
                AceotConfig::ieee300(n_buses)
            } else {
                AceotConfig::ieee14(n_buses)
            }),
            ModelKind::ArmaOnly => ModelConfig::ArmaOnly(if large {
                ArmaOnlyConfig::ieee300(n_buses)
            } else {
                ArmaOnlyConfig::ieee14(n_buses)
            }),
            ModelKind::Mlp => ModelConfig::Mlp(if large {
                MlpConfig::ieee300(n_buses)
            } else {
                MlpConfig::ieee14(n_buses)
            }),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            ModelConfig::Aceot(_) => ModelKind::Aceot,
            ModelConfig::ArmaOnly(_) => ModelKind::ArmaOnly,
            ModelConfig::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn n_buses(&self) -> usize {
        match self {
            ModelConfig::Aceot(c) => c.n_buses,
            ModelConfig::ArmaOnly(c) => c.n_buses,
            ModelConfig::Mlp(c) => c.n_buses,
        }
    }

    pub fn pos_weight(&self) -> f64 {
        match self {
            ModelConfig::Aceot(c) => c.pos_weight,
            ModelConfig::ArmaOnly(c) => c.pos_weight,
            ModelConfig::Mlp(c) => c.pos_weight,
        }
    }

    pub fn dropout(&self) -> f64 {
        match self {
            ModelConfig::Aceot(c) => c.dropout,
            ModelConfig::ArmaOnly(c) => c.dropout,
            ModelConfig::Mlp(c) => c.dropout,
        }
    }

    /// Tuned peak learning rate for the kind/system pair.
    pub fn default_peak_lr(&self) -> f64 {
        match (self.kind(), self.n_buses() >= 100) {
            (ModelKind::ArmaOnly, false) => 2e-3,
            _ => 1e-3,
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        match self {
            ModelConfig::Aceot(c) => c.validate(),
            ModelConfig::ArmaOnly(c) => {
                if c.n_buses == 0 || c.h_c == 0 || c.arma_layers == 0 || c.stacks == 0
                    || c.iterations == 0
                {
                    return Err(ConfigError::ZeroCount("arma baseline sizes"));
                }
                if !(0.0..1.0).contains(&c.dropout) {
                    return Err(ConfigError::BadDropout(c.dropout));
                }
                Ok(())
            }
            ModelConfig::Mlp(c) => {
                if c.n_buses == 0 || c.hidden == 0 || c.layers == 0 {
                    return Err(ConfigError::ZeroCount("mlp sizes"));
                }
                if !(0.0..1.0).contains(&c.dropout) {
                    return Err(ConfigError::BadDropout(c.dropout));
                }
                Ok(())
            }
        }
    }
}

/// A model instance: its config, the normalized adjacency it runs on,
/// and the parameter set.
pub struct Model {
    pub config: ModelConfig,
    pub adj_norm: Tensor,
    params: ParamSet,
}

impl Model {
    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    /// Forward + loss; in training mode also accumulates gradients.
    pub fn loss(
        &mut self,
        features: &Tensor,
        targets: &Tensor,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64, TrainError> {
        let mut tape = crate::autodiff::Tape::new();
        let logits = self.forward_on(&mut tape, features, training, rng)?;
        let loss = tape.bce_with_logits(logits, targets, self.config.pos_weight())?;
        let value = tape.value(loss).scalar_value();
        if training {
            tape.backward_into(loss, &mut self.params)?;
        }
        Ok(value)
    }

    /// Eval-mode node probabilities, shape (batch, n) row-major.
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>, AdError> {
        let mut tape = crate::autodiff::Tape::new();
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let logits = self.forward_on(&mut tape, features, false, &mut rng)?;
        let probs = tape.sigmoid(logits);
        Ok(tape.value(probs).data().to_vec())
    }
}

/// Graph-level decision from node probabilities: the maximum, with an
/// attack declared above 0.5.
pub fn detect(node_probs: &[f64]) -> (f64, bool) {
    let p = node_probs.iter().cloned().fold(0.0f64, f64::max);
    (p, p > 0.5)
}

#[cfg(test)]
mod tests;
