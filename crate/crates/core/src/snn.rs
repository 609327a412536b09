//! Time-stepped simulation of a converted network.
//!
//! The first neuron layers receive a constant analog current computed once
//! from the input. Every later layer at step `t` is driven by the weighted
//! spike output its source produced at the same step. The output convolution
//! does not spike: its current is just accumulated.

use alloc::{collections::BTreeMap, format, vec::Vec};

use crate::conversion::{static_encode, SpikingNetwork};
use crate::data::LabelMap;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::network::LayerKind;
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationTrace {
    pub steps: usize,
    /// Accumulated input current of every convolution.
    pub input_flow: BTreeMap<usize, Tensor>,
    /// Accumulated output of every layer. The input layer holds `T * x`, a
    /// neuron layer its summed weighted spikes, the output layer its input
    /// flow, and routing layers the routed sums.
    pub output_flow: Vec<Tensor>,
    /// `1` where a neuron's accumulated input flow is positive.
    pub gates: BTreeMap<usize, Tensor>,
    /// Spikes per neuron position; a multi-threshold neuron firing `k`
    /// thresholds in one step adds `k`.
    pub spike_counts: BTreeMap<usize, Vec<u32>>,
}

impl SimulationTrace {
    pub fn output_layer(&self) -> usize {
        self.output_flow.len() - 1
    }

    /// Accumulated current of the output layer.
    pub fn final_flow(&self) -> &Tensor {
        &self.output_flow[self.output_layer()]
    }

    pub fn layer_spikes(&self, id: usize) -> u64 {
        self.spike_counts.get(&id).map_or(0, |c| c.iter().map(|&v| v as u64).sum())
    }

    pub fn total_spikes(&self) -> u64 {
        self.spike_counts.keys().map(|&id| self.layer_spikes(id)).sum()
    }

    /// Output flow masked by the gate (zero where the input flow is not positive).
    pub fn gated_output(&self, id: usize) -> Result<Tensor> {
        let out = &self.output_flow[id];
        match self.gates.get(&id) {
            Some(g) => out.mul(g),
            None => Ok(out.clone()),
        }
    }

    /// Number of samples in the simulated batch.
    pub fn batch(&self) -> usize {
        self.output_flow[0].shape()[0]
    }
}

fn accumulate(slot: &mut Option<Tensor>, v: &Tensor) -> Result<()> {
    match slot {
        Some(acc) => acc.add_assign(v),
        None => {
            *slot = Some(v.clone());
            Ok(())
        }
    }
}

pub fn simulate(net: &SpikingNetwork, input: &Tensor, steps: usize) -> Result<SimulationTrace> {
    if steps == 0 {
        return Err(arg_err("time window", "must be at least one step".into()));
    }
    let spec = &net.spec;
    let [_, c, _, _] = input.dims4()?;
    if c != spec.input_channels() {
        return Err(shape_err(
            "simulate",
            format!("input has {c} channels, network expects {}", spec.input_channels()),
        ));
    }
    let n = spec.layers.len();
    let mut statics: BTreeMap<usize, Tensor> = BTreeMap::new();
    for (&id, p) in &net.params {
        if spec.layers[id].inputs[0] == 0 {
            let cur = static_encode(input, p)?;
            if !cur.all_finite() {
                return Err(Error::NonFinite { context: format!("static current of layer {}", spec.layers[id].name) });
            }
            statics.insert(id, cur);
        }
    }
    let input_routed = spec.consumers(0).iter().any(|&c| !spec.is_conv(c));
    let mut membranes: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut counts: BTreeMap<usize, Vec<u32>> = BTreeMap::new();
    let mut acc_in: BTreeMap<usize, Tensor> = BTreeMap::new();
    let mut acc_out: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();

    for t in 0..steps {
        let mut vals: Vec<Tensor> = Vec::with_capacity(n);
        for (id, layer) in spec.layers.iter().enumerate() {
            let v = match &layer.kind {
                LayerKind::Input { .. } => {
                    // Convolutions fed by the input use the static current instead.
                    vals.push(if input_routed { input.clone() } else { Tensor::zeros(&[0]) });
                    continue;
                }
                LayerKind::Conv { relu, .. } => {
                    let src = layer.inputs[0];
                    let computed;
                    let current = match statics.get(&id) {
                        Some(s) => s,
                        None => {
                            let p = net
                                .params
                                .get(&id)
                                .ok_or_else(|| Error::Missing(format!("parameters for layer {id}")))?;
                            computed = tensor::conv2d_forward(&vals[src], p)?;
                            if !computed.all_finite() {
                                return Err(Error::NonFinite {
                                    context: format!("current of layer {} at step {t}", layer.name),
                                });
                            }
                            &computed
                        }
                    };
                    match acc_in.get_mut(&id) {
                        Some(a) => a.add_assign(current)?,
                        None => {
                            acc_in.insert(id, current.clone());
                        }
                    }
                    if *relu {
                        let schedule = &net.schedules[&id];
                        let mem = membranes.entry(id).or_insert_with(|| Tensor::zeros(current.shape()));
                        let cnt = counts.entry(id).or_insert_with(|| alloc::vec![0; current.len()]);
                        let mut o = Tensor::zeros(current.shape());
                        for (((v, &i), out), k) in
                            mem.data_mut().iter_mut().zip(current.data()).zip(o.data_mut()).zip(cnt.iter_mut())
                        {
                            let (w, r, fired) = schedule.fire(*v + i);
                            *v = r;
                            *out = w;
                            *k += fired;
                        }
                        o
                    } else {
                        current.clone()
                    }
                }
                LayerKind::AvgPool { window } => tensor::avgpool2d_forward(&vals[layer.inputs[0]], *window)?,
                LayerKind::Upsample2x => tensor::upsample2x_forward(&vals[layer.inputs[0]])?,
                LayerKind::Concat => tensor::concat_channels(&vals[layer.inputs[0]], &vals[layer.inputs[1]])?,
            };
            accumulate(&mut acc_out[id], &v)?;
            vals.push(v);
        }
    }

    let mut output_flow = Vec::with_capacity(n);
    output_flow.push(input.scale(steps as f64));
    for (id, slot) in acc_out.into_iter().enumerate().skip(1) {
        output_flow.push(slot.ok_or_else(|| Error::Missing(format!("output flow of layer {id}")))?);
    }
    let gates = spec.relu_layers().into_iter().map(|id| (id, tensor::positive_mask(&acc_in[&id]))).collect();
    Ok(SimulationTrace { steps, input_flow: acc_in, output_flow, gates, spike_counts: counts })
}

fn split_labels(flat: Vec<usize>, n: usize, h: usize, w: usize) -> Result<Vec<LabelMap>> {
    flat.chunks(h * w).take(n).map(|c| LabelMap::new(h, w, c.to_vec())).collect()
}

/// Per-pixel argmax of the accumulated output flow, one map per sample.
pub fn decode_segmentation(trace: &SimulationTrace) -> Result<Vec<LabelMap>> {
    logits_to_labels(trace.final_flow())
}

/// Per-pixel argmax of `N x M x H x W` scores; ties go to the lowest class.
pub fn logits_to_labels(scores: &Tensor) -> Result<Vec<LabelMap>> {
    let [n, m, h, w] = scores.dims4()?;
    if m < 2 {
        return Err(shape_err("decode", format!("{m} output channels, need at least 2 classes")));
    }
    split_labels(tensor::argmax_channels(scores)?, n, h, w)
}

/// Average output current over the window, i.e. the predicted noise.
pub fn decode_denoise(trace: &SimulationTrace) -> Tensor {
    trace.final_flow().scale(1.0 / trace.steps as f64)
}
