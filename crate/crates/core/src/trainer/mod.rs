//! Desk-scale models, synthetic data and local SGD.

mod data;
mod model;

pub use data::{dirichlet_partition, synth_task, Concentration, DataShard, Dataset, SynthSpec};
pub use model::{softmax_cross_entropy, DenseLayer, LayerGrad, LayerWeight, ToyModel};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Minibatch size; 0 means full batch.
    pub batch_size: usize,
}

impl Default for LocalTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            lr: 0.1,
            batch_size: 0,
        }
    }
}

/// Result of local training on one shard.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    /// `(θ_before − θ_after) / lr` over the model's flat trainable layout.
    pub grad: Vec<f64>,
    /// Mean minibatch loss seen during training.
    pub loss: f64,
    /// Samples processed, counting repeats across epochs.
    pub samples: usize,
}

/// Runs minibatch SGD on a copy of `model` and returns the trained copy with
/// the mean minibatch loss and the number of samples processed. Batches are
/// taken in data order, so the result is deterministic.
pub fn fit(model: &ToyModel, shard: &DataShard, cfg: &LocalTrainConfig) -> Result<(ToyModel, f64, usize)> {
    let data = &shard.data;
    if data.dim() != model.input_dim() {
        return Err(Error::shape(
            "fit",
            format!("features of width {} for a model expecting {}", data.dim(), model.input_dim()),
        ));
    }
    if !(cfg.lr.is_finite() && cfg.lr >= 0.0) {
        return Err(Error::Parameter(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    if data.is_empty() {
        return Err(Error::Parameter(format!("client {} has an empty shard", shard.owner)));
    }
    let batch = if cfg.batch_size == 0 { data.len() } else { cfg.batch_size.min(data.len()) };
    let mut work = model.clone();
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    let mut samples = 0usize;
    for epoch in 0..cfg.epochs {
        for start in (0..data.len()).step_by(batch) {
            let idx: Vec<usize> = (start..(start + batch).min(data.len())).collect();
            let mb = if idx.len() == data.len() { data.clone() } else { data.subset(&idx) };
            let step = |work: &mut ToyModel| -> Result<f64> {
                let (loss, grads) = work.loss_and_gradients(mb.features(), mb.labels())?;
                let g = work.trainable_gradient(&grads)?;
                work.apply_update(&g, cfg.lr)?;
                Ok(loss)
            };
            let loss = step(&mut work).map_err(|e| match e {
                Error::Numerical(msg) => Error::Numerical(format!(
                    "client {} epoch {epoch} batch at {start}: {msg}",
                    shard.owner
                )),
                other => other,
            })?;
            loss_sum += loss;
            steps += 1;
            samples += idx.len();
        }
    }
    let loss = if steps > 0 { loss_sum / steps as f64 } else { 0.0 };
    Ok((work, loss, samples))
}

/// Local training in difference form: `(θ_before − θ_after) / lr`.
pub fn local_train(model: &ToyModel, shard: &DataShard, cfg: &LocalTrainConfig) -> Result<LocalUpdate> {
    let (trained, loss, samples) = fit(model, shard, cfg)?;
    let grad = if cfg.lr == 0.0 {
        vec![0.0; model.trainable_len()]
    } else {
        model
            .trainable_vector()
            .iter()
            .zip(trained.trainable_vector())
            .map(|(b, a)| (b - a) / cfg.lr)
            .collect()
    };
    Ok(LocalUpdate { grad, loss, samples })
}
