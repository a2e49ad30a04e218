//! Mini-batch Adam training of a freshly initialised model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamConfig, AdamState, Tape, Tensor};
use crate::model::{
    init_params, loss_and_grads, Dropout, Labels, ModelConfig, ModelError, ModelParams,
};
use crate::sequence::EpisodeSequence;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    /// Inverted-dropout rate on attention/FFN outputs; 0 disables it.
    pub dropout: f64,
    /// Rescale gradients whose global L2 norm exceeds this value.
    pub grad_clip: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let adam = AdamConfig::default();
        Self {
            epochs: 100,
            batch_size: 16,
            learning_rate: adam.learning_rate,
            beta1: adam.beta1,
            beta2: adam.beta2,
            epsilon: adam.epsilon,
            dropout: 0.0,
            grad_clip: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be positive".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            ));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0 && c.is_finite()) {
                return bad(format!("grad_clip must be positive, got {c}"));
            }
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights after the final epoch.
    pub params: ModelParams<f32>,
    /// Mean mini-batch loss per epoch.
    pub epoch_losses: Vec<f64>,
}

fn clip_global_norm(grads: &mut [Tensor<f32>], max_norm: f64) {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&x| (x as f64) * (x as f64))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads {
            g.data_mut().iter_mut().for_each(|x| *x *= s);
        }
    }
}

/// Train on `episodes` with per-question class `labels`. Initialisation,
/// batch order and dropout masks all derive from `seed`.
pub fn train_model(
    model: &ModelConfig,
    cfg: &TrainConfig,
    episodes: &[&EpisodeSequence],
    labels: &[Labels],
    seed: u64,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if episodes.is_empty() || episodes.len() != labels.len() {
        return Err(ModelError::Config(format!(
            "{} training episodes with {} label rows",
            episodes.len(),
            labels.len()
        )));
    }
    let mut params = init_params(model, seed)?;
    let mut adam = AdamState::new(cfg.adam(), params.tensors());
    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut drop_rng = ChaCha8Rng::seed_from_u64(seed);
    drop_rng.set_stream(2);

    let mut order: Vec<usize> = (0..episodes.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        let (mut total, mut batches) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&EpisodeSequence> = chunk.iter().map(|&i| episodes[i]).collect();
            let batch_labels: Vec<Labels> = chunk.iter().map(|&i| labels[i]).collect();
            let drop = (cfg.dropout > 0.0).then_some(Dropout {
                rate: cfg.dropout,
                rng: &mut drop_rng,
            });
            let (loss, mut grads) =
                loss_and_grads(&params, &batch, &batch_labels, drop, Tape::new())?;
            if !loss.is_finite() {
                return Err(ModelError::Config(format!(
                    "training diverged at epoch {epoch}: loss {loss}"
                )));
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            let grad_refs: Vec<&Tensor<f32>> = grads.iter().collect();
            let mut param_refs: Vec<&mut Tensor<f32>> = params.tensors_mut().iter_mut().collect();
            adam.step(&mut param_refs, &grad_refs)?;
            total += loss;
            batches += 1;
        }
        let mean = total / batches as f64;
        on_epoch(epoch, mean);
        epoch_losses.push(mean);
    }
    Ok(TrainOutcome {
        params,
        epoch_losses,
    })
}
