//! Supervised training of the reference network.

use alloc::{format, vec::Vec};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{ann_gradients, Checkpoint};
use crate::data::{batch_of, BatchTarget, Dataset, Sample};
use crate::error::{arg_err, Error, Result};
use crate::loss;
use crate::optim::{Optimizer, OptimizerConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Random horizontal/vertical flips of each sample.
    pub flip_augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { optimizer: OptimizerConfig::default(), epochs: 10, batch_size: 8, seed: 0, flip_augment: false }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss per epoch.
    pub epoch_losses: Vec<f64>,
    pub step_losses: Vec<f64>,
}

/// Loss and output gradient of a batch under the dataset's task.
pub fn ann_batch_loss(output: &crate::tensor::Tensor, target: &BatchTarget) -> Result<(f64, crate::tensor::Tensor)> {
    match target {
        BatchTarget::Labels(l) => loss::softmax_cross_entropy(output, l),
        BatchTarget::Noise(n) => loss::mean_absolute_error(output, n),
    }
}

pub fn train(ckpt: &Checkpoint, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Checkpoint, TrainReport)> {
    if dataset.is_empty() {
        return Err(arg_err("dataset", "training needs at least one sample".into()));
    }
    if cfg.batch_size == 0 {
        return Err(arg_err("batch size", "must be positive".into()));
    }
    dataset.validate()?;
    let mut ck = ckpt.clone();
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = TrainReport::default();

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let augmented: Vec<Sample>;
            let picked: Vec<&Sample> = if cfg.flip_augment {
                augmented = chunk
                    .iter()
                    .map(|&i| dataset.samples[i].flipped(rng.random(), rng.random()))
                    .collect::<Result<_>>()?;
                augmented.iter().collect()
            } else {
                chunk.iter().map(|&i| &dataset.samples[i]).collect()
            };
            let batch = batch_of(&picked)?;
            let (l, grads) = ann_gradients(&ck, &batch.input, |out| ann_batch_loss(out, &batch.target))?;
            if !l.is_finite() {
                return Err(Error::NonFinite { context: format!("training loss at epoch {epoch}, batch {bi}") });
            }
            opt.step(&mut ck.params, &grads)?;
            report.step_losses.push(l);
            sum += l;
            batches += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
        ck.meta.epoch += 1;
        log::debug!("epoch {epoch}: mean loss {}", sum / batches as f64);
    }
    Ok((ck, report))
}
