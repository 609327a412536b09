//! ANN to spiking conversion: weight normalisation, threshold assignment and
//! static input coding.

use alloc::{collections::BTreeMap, format, string::String, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::ann::{check_params, forward_all, Checkpoint, Params};
use crate::error::{arg_err, Error, Result};
use crate::network::{LayerKind, NetworkSpec};
use crate::neuron::{optimal_thresholds, ThresholdSchedule};
use crate::stats::ActivationStats;
use crate::tensor::{self, ConvParams, Tensor};

/// Scales below this are treated as dead units and clamped.
pub const LAMBDA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// One scale per layer; a concat is treated as a single layer.
    Layerwise,
    /// Each concat part keeps the scale of the layer that produced it.
    Connectionwise,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeuronKind {
    /// Geometric schedule `v_max / 2, ..., v_max / 2^N`.
    MultiThreshold,
    /// Single threshold equal to `v_max`.
    IntegrateFire,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub mode: NormMode,
    pub neuron: NeuronKind,
    /// Thresholds per multi-threshold neuron.
    pub thresholds: usize,
    pub v_max: f64,
    /// Per-layer `v_max`, keyed by layer name.
    pub v_max_overrides: BTreeMap<String, f64>,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            mode: NormMode::Connectionwise,
            neuron: NeuronKind::MultiThreshold,
            thresholds: 4,
            v_max: 1.0,
            v_max_overrides: BTreeMap::new(),
        }
    }
}

impl ConversionConfig {
    pub fn with_mode(mode: NormMode) -> Self {
        Self { mode, ..Self::default() }
    }

    pub fn schedule_for(&self, layer_name: &str) -> Result<ThresholdSchedule> {
        let v_max = self.v_max_overrides.get(layer_name).copied().unwrap_or(self.v_max);
        if !(v_max.is_finite() && v_max > 0.0) {
            return Err(arg_err("v_max", format!("{v_max} for layer {layer_name} is not positive")));
        }
        match self.neuron {
            NeuronKind::MultiThreshold => optimal_thresholds(self.thresholds, v_max),
            NeuronKind::IntegrateFire => ThresholdSchedule::new(vec![v_max]),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpikingNetwork {
    pub spec: NetworkSpec,
    /// Normalised convolution parameters.
    pub params: Params,
    /// One schedule per neuron layer.
    pub schedules: BTreeMap<usize, ThresholdSchedule>,
    pub mode: NormMode,
    pub lambdas: ActivationStats,
}

impl SpikingNetwork {
    /// Structural checks: parameters for every convolution and exactly one
    /// schedule per neuron layer.
    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        check_params(&self.spec, &self.params)?;
        let relu = self.spec.relu_layers();
        for &id in &relu {
            if !self.schedules.contains_key(&id) {
                return Err(Error::Missing(format!("schedule for neuron layer {id} ({})", self.spec.layers[id].name)));
            }
        }
        if let Some(extra) = self.schedules.keys().find(|k| !relu.contains(k)) {
            return Err(Error::InvalidNetwork(format!("schedule given for non-neuron layer {extra}")));
        }
        Ok(())
    }

    /// Non-spiking forward pass with the normalised parameters; every layer's output.
    pub fn analog_forward(&self, input: &Tensor) -> Result<Vec<Tensor>> {
        forward_all(&self.spec, &self.params, input)
    }
}

fn checked_lambda(value: f64, what: &str) -> Result<f64> {
    if !value.is_finite() || value <= 0.0 {
        return Err(arg_err("lambda", format!("{what}: {value} is not positive")));
    }
    if value < LAMBDA_FLOOR {
        log::warn!("{what}: lambda {value} clamped to {LAMBDA_FLOOR}");
        return Ok(LAMBDA_FLOOR);
    }
    Ok(value)
}

/// Output scale of every layer, one value per output channel.
fn channel_scales(spec: &NetworkSpec, stats: &ActivationStats, mode: NormMode) -> Result<Vec<Vec<f64>>> {
    let channels = spec.channels()?;
    let mut scales: Vec<Vec<f64>> = Vec::with_capacity(spec.layers.len());
    for (id, layer) in spec.layers.iter().enumerate() {
        let s = match &layer.kind {
            LayerKind::Input { .. } => vec![1.0; channels[id]],
            LayerKind::Conv { relu: true, .. } => {
                let lam = stats
                    .layers
                    .get(&id)
                    .ok_or_else(|| Error::Missing(format!("statistics for layer {id} ({})", layer.name)))?;
                vec![checked_lambda(*lam, &layer.name)?; channels[id]]
            }
            // The output layer keeps its natural units.
            LayerKind::Conv { .. } => vec![1.0; channels[id]],
            LayerKind::AvgPool { .. } | LayerKind::Upsample2x => scales[layer.inputs[0]].clone(),
            LayerKind::Concat => match mode {
                NormMode::Layerwise => {
                    let c = stats
                        .concats
                        .get(&id)
                        .ok_or_else(|| Error::Missing(format!("statistics for concat {id} ({})", layer.name)))?;
                    vec![checked_lambda(c.combined, &layer.name)?; channels[id]]
                }
                NormMode::Connectionwise => {
                    let (a, b) = (layer.inputs[0], layer.inputs[1]);
                    if scales[a].len() + scales[b].len() != channels[id] {
                        return Err(Error::InvalidNetwork(format!(
                            "concat {} parts have {} + {} channels, expected {}",
                            layer.name,
                            scales[a].len(),
                            scales[b].len(),
                            channels[id]
                        )));
                    }
                    let mut s = scales[a].clone();
                    s.extend_from_slice(&scales[b]);
                    s
                }
            },
        };
        scales.push(s);
    }
    Ok(scales)
}

/// `W~[o, i] = W[o, i] * (lambda_in[i] / lambda_out)`, `b~ = b / lambda_out`.
fn normalize(
    ckpt: &Checkpoint,
    stats: &ActivationStats,
    mode: NormMode,
    cfg: &ConversionConfig,
) -> Result<SpikingNetwork> {
    let spec = &ckpt.spec;
    spec.validate()?;
    check_params(spec, &ckpt.params)?;
    let scales = channel_scales(spec, stats, mode)?;
    let mut params = Params::new();
    for (&id, p) in &ckpt.params {
        let layer = &spec.layers[id];
        let lam_in = &scales[layer.inputs[0]];
        let lam_out = scales[id][0];
        let [co, ci, kh, kw] = p.kernel.dims4()?;
        if lam_in.len() != ci {
            return Err(Error::InvalidNetwork(format!(
                "layer {} reads {} scaled channels but has {ci} inputs",
                layer.name,
                lam_in.len()
            )));
        }
        let mut k = p.kernel.clone();
        let taps = kh * kw;
        for o in 0..co {
            for (i, &li) in lam_in.iter().enumerate() {
                let factor = li / lam_out;
                for w in &mut k.data_mut()[(o * ci + i) * taps..][..taps] {
                    *w *= factor;
                }
            }
        }
        let b = p.bias.map(|v| v / lam_out);
        params.insert(id, ConvParams::new(k, b, p.stride, p.padding)?);
    }
    let mut schedules = BTreeMap::new();
    for id in spec.relu_layers() {
        schedules.insert(id, cfg.schedule_for(&spec.layers[id].name)?);
    }
    let net = SpikingNetwork { spec: spec.clone(), params, schedules, mode, lambdas: stats.clone() };
    net.validate()?;
    Ok(net)
}

pub fn layerwise_normalize(
    ckpt: &Checkpoint,
    stats: &ActivationStats,
    cfg: &ConversionConfig,
) -> Result<SpikingNetwork> {
    normalize(ckpt, stats, NormMode::Layerwise, cfg)
}

pub fn connection_wise_normalize(
    ckpt: &Checkpoint,
    stats: &ActivationStats,
    cfg: &ConversionConfig,
) -> Result<SpikingNetwork> {
    normalize(ckpt, stats, NormMode::Connectionwise, cfg)
}

/// Normalises with the mode named in `cfg`.
pub fn convert(ckpt: &Checkpoint, stats: &ActivationStats, cfg: &ConversionConfig) -> Result<SpikingNetwork> {
    normalize(ckpt, stats, cfg.mode, cfg)
}

/// Constant analog current fed to the first neuron layer at every step.
pub fn static_encode(input: &Tensor, first_layer: &ConvParams) -> Result<Tensor> {
    tensor::conv2d_forward(input, first_layer)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::CheckpointMeta;
    use crate::network::{NetworkBuilder, Task};
    use crate::stats::ConcatStats;

    fn toy() -> Checkpoint {
        let mut b = NetworkBuilder::new(1);
        let a = b.conv("a", 0, 1, 1, true);
        b.conv("out", a, 1, 1, false);
        let spec = b.finish().unwrap();
        let mut ck =
            Checkpoint::init(spec, CheckpointMeta { width_factor: 1.0, seed: 0, epoch: 0, task: Task::Denoising })
                .unwrap();
        let p = ck.params.get_mut(&1).unwrap();
        p.kernel.data_mut()[0] = 1.0;
        p.bias.data_mut()[0] = 2.0;
        ck
    }

    fn stats(layers: &[(usize, f64)]) -> ActivationStats {
        ActivationStats { percentile: 99.9, layers: layers.iter().copied().collect(), concats: BTreeMap::new() }
    }

    #[test]
    fn layerwise_arithmetic() {
        let ck = toy();
        let net = layerwise_normalize(&ck, &stats(&[(1, 4.0)]), &ConversionConfig::default()).unwrap();
        assert_eq!(net.params[&1].bias.data()[0], 0.5);
        assert_eq!(net.params[&1].kernel.data()[0], 0.25);
        // Output layer sees lambda_in = 4 and keeps unit scale.
        assert_eq!(net.params[&2].kernel.data()[0], ck.params[&2].kernel.data()[0] * 4.0);
        assert_eq!(net.schedules[&1].thresholds(), &[0.5, 0.25, 0.125, 0.0625]);
    }

    #[test]
    fn nonpositive_lambda_rejected_and_tiny_clamped() {
        let ck = toy();
        let cfg = ConversionConfig::default();
        assert!(layerwise_normalize(&ck, &stats(&[(1, 0.0)]), &cfg).is_err());
        let net = layerwise_normalize(&ck, &stats(&[(1, 1e-9)]), &cfg).unwrap();
        assert_eq!(net.params[&1].bias.data()[0], 2.0 / LAMBDA_FLOOR);
    }

    #[test]
    fn schedule_options() {
        let mut cfg = ConversionConfig { neuron: NeuronKind::IntegrateFire, v_max: 2.0, ..Default::default() };
        assert_eq!(cfg.schedule_for("x").unwrap().thresholds(), &[2.0]);
        cfg.neuron = NeuronKind::MultiThreshold;
        cfg.thresholds = 2;
        cfg.v_max_overrides.insert("x".into(), 4.0);
        assert_eq!(cfg.schedule_for("x").unwrap().thresholds(), &[2.0, 1.0]);
        assert_eq!(cfg.schedule_for("y").unwrap().thresholds(), &[1.0, 0.5]);
    }

    #[test]
    fn missing_concat_stats_is_an_error() {
        let mut b = NetworkBuilder::new(1);
        let a = b.conv("a", 0, 1, 1, true);
        let c = b.conv("c", 0, 1, 1, true);
        let cat = b.concat("cat", a, c);
        let d = b.conv("d", cat, 1, 1, true);
        b.conv("out", d, 1, 1, false);
        let spec = b.finish().unwrap();
        let ck = Checkpoint::init(spec, CheckpointMeta { width_factor: 1.0, seed: 1, epoch: 0, task: Task::Denoising })
            .unwrap();
        let st = stats(&[(1, 8.0), (2, 0.5), (4, 4.0)]);
        assert!(layerwise_normalize(&ck, &st, &ConversionConfig::default()).is_err());
        let mut st2 = st.clone();
        st2.concats.insert(cat, ConcatStats { parts: vec![8.0, 0.5], combined: 8.0 });
        let net = connection_wise_normalize(&ck, &st2, &ConversionConfig::default()).unwrap();
        let (orig, new) = (&ck.params[&d].kernel, &net.params[&d].kernel);
        assert_eq!(new.data()[0], orig.data()[0] * (8.0 / 4.0));
        assert_eq!(new.data()[1], orig.data()[1] * (0.5 / 4.0));
    }
}
