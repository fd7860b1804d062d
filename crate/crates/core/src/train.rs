//! Optimization: AdamW with decoupled weight decay, the warmup + cosine
//! learning rate schedule, mini-batch training with early stopping, and
//! training reports.

use crate::autodiff::{AdError, ParamSet};
use crate::datagen::Dataset;
use crate::model::Model;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Adam moment hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay coefficient (lambda).
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (NaN) at epoch {0}")]
    DivergedLoss(usize),
    #[error(transparent)]
    Ad(#[from] AdError),
    #[error("optimizer state length {state} does not match parameters {params}")]
    ShapeMismatch { state: usize, params: usize },
}

/// AdamW state over one flat value vector. Decay is applied first
/// (`w -= lr * lambda * w`), then the bias-corrected Adam update.
#[derive(Debug, Clone)]
pub struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
    pub hyper: AdamHyper,
}

impl AdamW {
    pub fn new(len: usize, hyper: AdamHyper) -> Self {
        AdamW {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
            hyper,
        }
    }

    /// One update step. `decay` switches weight decay off for values
    /// that should not be regularized (biases, norms, embeddings).
    pub fn step(
        &mut self,
        values: &mut [f64],
        grads: &[f64],
        lr: f64,
        decay: bool,
    ) -> Result<(), TrainError> {
        if values.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TrainError::ShapeMismatch {
                state: self.m.len(),
                params: values.len(),
            });
        }
        self.t += 1;
        let h = self.hyper;
        let bc1 = 1.0 - h.beta1.powi(self.t as i32);
        let bc2 = 1.0 - h.beta2.powi(self.t as i32);
        for i in 0..values.len() {
            if decay {
                values[i] -= lr * h.weight_decay * values[i];
            }
            self.m[i] = h.beta1 * self.m[i] + (1.0 - h.beta1) * grads[i];
            self.v[i] = h.beta2 * self.v[i] + (1.0 - h.beta2) * grads[i] * grads[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            values[i] -= lr * m_hat / (v_hat.sqrt() + h.eps);
        }
        Ok(())
    }
}

/// AdamW over a whole parameter set, one moment pair per parameter.
pub struct ParamOptimizer {
    slots: Vec<AdamW>,
}

impl ParamOptimizer {
    pub fn new(set: &ParamSet, hyper: AdamHyper) -> Self {
        ParamOptimizer {
            slots: set
                .params
                .iter()
                .map(|p| AdamW::new(p.value.numel(), hyper))
                .collect(),
        }
    }

    pub fn step(&mut self, set: &mut ParamSet, lr: f64) -> Result<(), TrainError> {
        for (slot, p) in self.slots.iter_mut().zip(&mut set.params) {
            let decay = p.decay;
            let grads = p.grad.data().to_vec();
            slot.step(p.value.data_mut(), &grads, lr, decay)?;
        }
        Ok(())
    }
}

/// Training loop configuration. Defaults follow the training recipe:
/// batches of 256 for at most 256 epochs, 500 warmup steps, early
/// stopping after 16 epochs without a 1e-4 improvement.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_steps: usize,
    pub peak_lr: f64,
    pub min_lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub patience: usize,
    pub min_delta: f64,
    pub seed: u64,
    /// Print per-epoch progress lines to stdout.
    #[serde(default)]
    pub verbose: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            max_epochs: 256,
            warmup_steps: 500,
            peak_lr: 1e-3,
            min_lr: 0.0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            patience: 16,
            min_delta: 1e-4,
            seed: 0,
            verbose: false,
        }
    }
}

impl TrainConfig {
    pub fn adam_hyper(&self) -> AdamHyper {
        AdamHyper {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

/// Learning rate at a global step: linear ramp reaching `peak_lr` at the
/// end of warmup, then cosine decay to `min_lr` at `total_steps`,
/// clamped beyond.
pub fn lr_at(step: usize, total_steps: usize, cfg: &TrainConfig) -> f64 {
    let warm = cfg.warmup_steps;
    if step < warm {
        return cfg.peak_lr * (step + 1) as f64 / warm as f64;
    }
    if total_steps <= warm || step >= total_steps {
        return cfg.min_lr;
    }
    let progress = (step - warm) as f64 / (total_steps - warm) as f64;
    cfg.min_lr + (cfg.peak_lr - cfg.min_lr) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Per-epoch record and the final outcome of a fit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub wall_seconds: f64,
}

/// Early-stopping rule: stop after `patience` consecutive epochs whose
/// validation loss fails to undercut the best seen so far by more than
/// `min_delta`.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    best: f64,
    stall: usize,
    patience: usize,
    min_delta: f64,
}

impl EarlyStopper {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        EarlyStopper {
            best: f64::INFINITY,
            stall: 0,
            patience,
            min_delta,
        }
    }

    /// Feed one epoch's validation loss; true means stop now.
    pub fn observe(&mut self, val_loss: f64) -> bool {
        if val_loss < self.best - self.min_delta {
            self.best = val_loss;
            self.stall = 0;
            false
        } else {
            self.stall += 1;
            self.stall >= self.patience
        }
    }
}

/// Train a model on the dataset's train split with per-epoch validation
/// and early stopping. The model is left holding the parameters of the
/// best validation epoch.
pub fn fit(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, TrainError> {
    let start_time = std::time::Instant::now();
    let n_train = data.train.len();
    assert!(n_train > 0, "empty training split");
    let batches_per_epoch = n_train.div_ceil(cfg.batch_size);
    // The schedule spans the configured maximum, whether or not early
    // stopping truncates the run.
    let total_steps = cfg.max_epochs * batches_per_epoch;

    let mut optimizer = ParamOptimizer::new(model.params(), cfg.adam_hyper());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5f));
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0xd0));

    let mut report = TrainReport {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
        wall_seconds: 0.0,
    };
    let mut best_params: Option<ParamSet> = None;
    let mut stopper = EarlyStopper::new(cfg.patience, cfg.min_delta);
    let mut step = 0usize;

    let mut order: Vec<usize> = (0..n_train).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let (features, targets) = data.train.batch(chunk);
            let lr = lr_at(step, total_steps, cfg);
            model.params_mut().zero_grads();
            let loss = model.loss(&features, &targets, true, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss(epoch));
            }
            epoch_loss += loss * chunk.len() as f64;
            optimizer.step(model.params_mut(), lr)?;
            step += 1;
        }
        let train_loss = epoch_loss / n_train as f64;
        let val_loss = validation_loss(model, data)?;
        if !val_loss.is_finite() {
            return Err(TrainError::DivergedLoss(epoch));
        }
        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        if cfg.verbose {
            let lr_now = lr_at(step.saturating_sub(1), total_steps, cfg);
            println!("epoch {epoch:4}  train {train_loss:.6}  val {val_loss:.6}  lr {lr_now:.3e}");
        }

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            best_params = Some(model.params().clone());
        }
        if stopper.observe(val_loss) {
            report.stopped_early = true;
            break;
        }
    }

    if let Some(best) = best_params {
        *model.params_mut() = best;
    }
    report.wall_seconds = start_time.elapsed().as_secs_f64();
    Ok(report)
}

fn validation_loss(model: &mut Model, data: &Dataset) -> Result<f64, TrainError> {
    let n = data.val.len();
    assert!(n > 0, "empty validation split");
    // Eval mode ignores the RNG; any seed works.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let idx: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(512) {
        let (features, targets) = data.val.batch(chunk);
        let loss = model.loss(&features, &targets, false, &mut rng)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_step_is_pure_decay() {
        let mut opt = AdamW::new(3, AdamHyper::default());
        let mut w = vec![1.0, -2.0, 0.5];
        let g = vec![0.0; 3];
        opt.step(&mut w, &g, 0.1, true).unwrap();
        assert_eq!(w, vec![0.999, -1.998, 0.4995]);
    }

    #[test]
    fn first_step_is_bias_corrected_unit_step() {
        let mut opt = AdamW::new(
            1,
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
        );
        let mut w = vec![0.0];
        opt.step(&mut w, &[1.0], 0.1, true).unwrap();
        // m_hat = 1, v_hat = 1 => delta = -lr / (1 + eps)
        let expected = -0.1 / (1.0 + 1e-8);
        assert!((w[0] - expected).abs() < 1e-15, "w = {}", w[0]);
    }

    #[test]
    fn constant_gradient_reaches_unit_step_size() {
        let mut opt = AdamW::new(
            1,
            AdamHyper {
                weight_decay: 0.0,
                ..AdamHyper::default()
            },
        );
        let mut w = vec![0.0];
        let mut prev = w[0];
        let mut last_delta = 0.0;
        for _ in 0..1000 {
            opt.step(&mut w, &[1.0], 0.01, true).unwrap();
            last_delta = prev - w[0];
            prev = w[0];
        }
        assert!((last_delta - 0.01).abs() < 1e-4, "step size {last_delta}");
    }

    #[test]
    fn adamw_with_zero_decay_is_plain_adam() {
        let hyper = AdamHyper {
            weight_decay: 0.0,
            ..AdamHyper::default()
        };
        let mut a = AdamW::new(2, hyper);
        let mut b = AdamW::new(2, hyper);
        let mut wa = vec![0.3, -0.7];
        let mut wb = wa.clone();
        for k in 0..50 {
            let g = vec![(k as f64 * 0.1).sin(), (k as f64 * 0.2).cos()];
            a.step(&mut wa, &g, 0.01, true).unwrap(); // decay flag on, lambda 0
            b.step(&mut wb, &g, 0.01, false).unwrap(); // decay off entirely
        }
        assert_eq!(wa, wb);
    }

    #[test]
    fn mismatched_lengths_are_rejected() {
        let mut opt = AdamW::new(2, AdamHyper::default());
        let mut w = vec![0.0; 3];
        assert!(matches!(
            opt.step(&mut w, &[0.0; 3], 0.1, true),
            Err(TrainError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn lr_schedule_shape() {
        let cfg = TrainConfig {
            peak_lr: 1e-3,
            min_lr: 0.0,
            warmup_steps: 500,
            ..TrainConfig::default()
        };
        let total = 2000;
        // Ramp end hits the peak exactly.
        assert!((lr_at(499, total, &cfg) - 1e-3).abs() < 1e-18);
        // Continuity at the warmup boundary.
        assert!((lr_at(500, total, &cfg) - 1e-3).abs() <= 1e-12 * 1e-3);
        // Cosine midpoint.
        let mid = 500 + (total - 500) / 2;
        assert!((lr_at(mid, total, &cfg) - 0.5e-3).abs() < 1e-12);
        // End and beyond clamp to min_lr.
        assert_eq!(lr_at(total, total, &cfg), 0.0);
        assert_eq!(lr_at(total + 100, total, &cfg), 0.0);
        // First step is nonzero.
        assert!(lr_at(0, total, &cfg) > 0.0);
    }

    #[test]
    fn lr_schedule_with_min_lr_midpoint() {
        let cfg = TrainConfig {
            peak_lr: 1e-2,
            min_lr: 2e-3,
            ..TrainConfig::default()
        };
        let total = 1500;
        let mid = 500 + (total - 500) / 2;
        assert!((lr_at(mid, total, &cfg) - (1e-2 + 2e-3) / 2.0).abs() < 1e-15);
    }
}
