//! Fine-tuning of a converted network by backpropagating through the
//! accumulated spiking flows.
//!
//! After simulation the network is treated as a feed-forward net over the
//! accumulated flows: the gate of each neuron layer stands in for the ReLU
//! derivative, and gradients are taken with respect to the normalised
//! weights. The bias is injected at every step, so its gradient carries a
//! factor of `T`.

use alloc::{format, vec::Vec};
use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ann::{backward_all, Gradients};
use crate::conversion::SpikingNetwork;
use crate::data::{batch_of, BatchTarget, Dataset, Sample};
use crate::error::{arg_err, Error, Result};
use crate::loss;
use crate::network::Task;
use crate::optim::{Optimizer, OptimizerConfig};
use crate::snn::{simulate, SimulationTrace};
use crate::tensor::Tensor;

/// Cross-entropy of the softmax of the output flow; returns `(loss, d loss / d I_in)`.
pub fn loss_segmentation(output_flow: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    loss::softmax_cross_entropy(output_flow, labels)
}

/// Mean absolute error between the averaged output flow and the noise.
pub fn loss_denoise(output_flow: &Tensor, steps: usize, noise: &Tensor) -> Result<(f64, Tensor)> {
    if steps == 0 {
        return Err(arg_err("time window", "must be at least one step".into()));
    }
    let inv = 1.0 / steps as f64;
    let (l, g) = loss::mean_absolute_error(&output_flow.scale(inv), noise)?;
    Ok((l, g.scale(inv)))
}

/// Loss of a simulated batch under the target's task.
pub fn flow_loss(trace: &SimulationTrace, target: &BatchTarget) -> Result<(f64, Tensor)> {
    match target {
        BatchTarget::Labels(l) => loss_segmentation(trace.final_flow(), l),
        BatchTarget::Noise(n) => loss_denoise(trace.final_flow(), trace.steps, n),
    }
}

/// Gradients of the normalised parameters given `d loss / d I_in` at the output layer.
pub fn asf_backward(trace: &SimulationTrace, net: &SpikingNetwork, grad_output: &Tensor) -> Result<Gradients> {
    let spec = &net.spec;
    if trace.output_flow.len() != spec.layers.len() {
        return Err(Error::Missing(format!(
            "trace has {} layers, network has {}",
            trace.output_flow.len(),
            spec.layers.len()
        )));
    }
    let relu = spec.relu_layers();
    let mut values = Vec::with_capacity(spec.layers.len());
    let mut gates = Vec::with_capacity(spec.layers.len());
    for id in 0..spec.layers.len() {
        if relu.contains(&id) {
            let g = trace.gates.get(&id).ok_or_else(|| Error::Missing(format!("gate of layer {id} in trace")))?;
            values.push(trace.output_flow[id].mul(g)?);
            gates.push(Some(g.clone()));
        } else {
            values.push(trace.output_flow[id].clone());
            gates.push(None);
        }
    }
    backward_all(spec, &net.params, &values, &gates, grad_output, trace.steps as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    /// Simulation window.
    pub steps: usize,
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub flip_augment: bool,
    /// Expected task; checked against the dataset when set.
    pub task: Option<Task>,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 20,
            optimizer: OptimizerConfig::adam(1e-6),
            epochs: 1,
            batch_size: 4,
            seed: 0,
            flip_augment: false,
            task: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FinetuneReport {
    pub step_losses: Vec<f64>,
    pub epoch_losses: Vec<f64>,
}

pub fn finetune(
    net: &SpikingNetwork,
    dataset: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<(SpikingNetwork, FinetuneReport)> {
    if cfg.steps == 0 {
        return Err(arg_err("time window", "must be at least one step".into()));
    }
    if cfg.batch_size == 0 {
        return Err(arg_err("batch size", "must be positive".into()));
    }
    if let Some(task) = cfg.task {
        if task != dataset.task {
            return Err(arg_err("task", format!("config expects {task:?}, dataset is {:?}", dataset.task)));
        }
    }
    if dataset.is_empty() {
        return Err(arg_err("dataset", "fine-tuning needs at least one sample".into()));
    }
    dataset.validate()?;
    net.validate()?;
    let mut out = net.clone();
    let mut opt = Optimizer::new(cfg.optimizer)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut report = FinetuneReport::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut sum, mut batches) = (0.0, 0);
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
            let trace = simulate(&out, &batch.input, cfg.steps)?;
            let (l, g) = flow_loss(&trace, &batch.target)?;
            if !l.is_finite() {
                return Err(Error::NonFinite { context: format!("fine-tuning loss at epoch {epoch}, batch {bi}") });
            }
            let grads = asf_backward(&trace, &out, &g)?;
            opt.step(&mut out.params, &grads)?;
            report.step_losses.push(l);
            sum += l;
            batches += 1;
        }
        report.epoch_losses.push(sum / batches as f64);
        log::debug!("fine-tune epoch {epoch}: mean loss {}", sum / batches as f64);
    }
    Ok((out, report))
}
