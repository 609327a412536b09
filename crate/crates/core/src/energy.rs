//! Operation counts and energy estimates.
//!
//! A spike is one synaptic event per weight it reaches: a spike at some
//! position of a neuron layer costs one accumulate for every kernel tap of
//! every consumer convolution that reads that position, following the signal
//! through pooling, upsampling and concatenation. The analog first layer is
//! charged dense multiply-accumulates, computed once per sample.
//!
//! The memory term is a simple parameterised model (accesses = alpha * ops +
//! beta * parameters at a fixed per-access energy). It is a placeholder for
//! a proper memory-hierarchy model and is not calibrated to any hardware.

use alloc::{format, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::conversion::SpikingNetwork;
use crate::error::{arg_err, shape_err, Result};
use crate::network::{LayerKind, NetworkSpec};
use crate::snn::SimulationTrace;

pub const PICOJOULE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MemoryModel {
    /// Accesses per operation.
    pub alpha: f64,
    /// Accesses per parameter.
    pub beta: f64,
    pub e_access_pj: f64,
}

impl Default for MemoryModel {
    fn default() -> Self {
        Self { alpha: 1.0, beta: 1.0, e_access_pj: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnergyModel {
    pub e_mac_pj: f64,
    pub e_ac_pj: f64,
    pub memory: MemoryModel,
}

impl Default for EnergyModel {
    fn default() -> Self {
        Self { e_mac_pj: 4.6, e_ac_pj: 0.9, memory: MemoryModel::default() }
    }
}

impl EnergyModel {
    pub fn validate(&self) -> Result<()> {
        let m = &self.memory;
        for (what, v) in [("e_mac_pj", self.e_mac_pj), ("e_ac_pj", self.e_ac_pj), ("e_access_pj", m.e_access_pj)] {
            if !(v.is_finite() && v > 0.0) {
                return Err(arg_err("energy model", format!("{what} = {v} must be positive")));
            }
        }
        if !(m.alpha >= 0.0 && m.beta >= 0.0) {
            return Err(arg_err("energy model", "memory coefficients must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SnnCounts {
    /// Synaptic accumulate events caused by spikes.
    pub op_spikes: u64,
    /// Dense multiply-accumulates of the analog first layer.
    pub op_input_layer: u64,
    /// Raw number of spikes fired.
    pub spikes: u64,
    /// Samples the counts were gathered over.
    pub samples: usize,
}

impl SnnCounts {
    pub fn flops(&self) -> u64 {
        self.op_spikes + self.op_input_layer
    }

    /// Counts averaged to one sample (rounded to nearest).
    pub fn per_sample(&self) -> SnnCounts {
        let n = self.samples.max(1) as u64;
        let div = |v: u64| (v + n / 2) / n;
        SnnCounts {
            op_spikes: div(self.op_spikes),
            op_input_layer: div(self.op_input_layer),
            spikes: div(self.spikes),
            samples: 1,
        }
    }
}

/// How many input rows of a conv read row `y` (border aware), per axis.
fn taps_reading(y: usize, out_len: usize, k: usize, stride: usize, pad_before: usize) -> usize {
    (0..k)
        .filter(|&ky| {
            let shifted = y + pad_before;
            shifted >= ky && (shifted - ky) % stride == 0 && (shifted - ky) / stride < out_len
        })
        .count()
}

/// Synaptic fan-out of every position of every layer output, for one sample
/// of spatial size `h x w`. Entry `[c][y * W + x]` layout, flattened `C * H * W`.
pub fn fan_out_maps(spec: &NetworkSpec, h: usize, w: usize) -> Result<Vec<Vec<u64>>> {
    spec.validate()?;
    let channels = spec.channels()?;
    let sizes = spec.spatial(h, w)?;
    let n = spec.layers.len();
    let mut maps: Vec<Vec<u64>> = (0..n).map(|i| vec![0; channels[i] * sizes[i].0 * sizes[i].1]).collect();
    for id in (1..n).rev() {
        let layer = &spec.layers[id];
        let (oh, ow) = sizes[id];
        match &layer.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv { out_channels, kernel, stride, padding, .. } => {
                let src = layer.inputs[0];
                let (ih, iw) = sizes[src];
                let rows: Vec<u64> =
                    (0..ih).map(|y| taps_reading(y, oh, *kernel, *stride, padding.before) as u64).collect();
                let cols: Vec<u64> =
                    (0..iw).map(|x| taps_reading(x, ow, *kernel, *stride, padding.before) as u64).collect();
                let m = &mut maps[src];
                for c in 0..channels[src] {
                    for y in 0..ih {
                        for x in 0..iw {
                            m[(c * ih + y) * iw + x] += *out_channels as u64 * rows[y] * cols[x];
                        }
                    }
                }
            }
            LayerKind::AvgPool { window } => {
                let src = layer.inputs[0];
                let (ih, iw) = sizes[src];
                let (own, rest) = split_pair(&mut maps, src, id);
                for c in 0..channels[src] {
                    for y in 0..ih {
                        for x in 0..iw {
                            own[(c * ih + y) * iw + x] += rest[(c * oh + y / window) * ow + x / window];
                        }
                    }
                }
            }
            LayerKind::Upsample2x => {
                let src = layer.inputs[0];
                let (ih, iw) = sizes[src];
                let (own, rest) = split_pair(&mut maps, src, id);
                for c in 0..channels[src] {
                    for y in 0..ih {
                        for x in 0..iw {
                            let mut s = 0;
                            for dy in 0..2 {
                                for dx in 0..2 {
                                    s += rest[(c * oh + 2 * y + dy) * ow + 2 * x + dx];
                                }
                            }
                            own[(c * ih + y) * iw + x] += s;
                        }
                    }
                }
            }
            LayerKind::Concat => {
                let mut offset = 0;
                for &src in &layer.inputs {
                    let len = channels[src] * oh * ow;
                    let (own, rest) = split_pair(&mut maps, src, id);
                    for (o, r) in own.iter_mut().zip(&rest[offset..offset + len]) {
                        *o += r;
                    }
                    offset += len;
                }
            }
        }
    }
    Ok(maps)
}

/// Mutable view of `maps[lo]` alongside a shared view of `maps[hi]`, `lo < hi`.
fn split_pair(maps: &mut [Vec<u64>], lo: usize, hi: usize) -> (&mut Vec<u64>, &Vec<u64>) {
    let (a, b) = maps.split_at_mut(hi);
    (&mut a[lo], &b[0])
}

/// Dense multiply-accumulates of one conv layer for one sample.
fn conv_macs(spec: &NetworkSpec, sizes: &[(usize, usize)], id: usize) -> u64 {
    match spec.layers[id].kind {
        LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
            let (oh, ow) = sizes[id];
            (out_channels * oh * ow * in_channels * kernel * kernel) as u64
        }
        _ => 0,
    }
}

pub fn count_snn_flops(trace: &SimulationTrace, net: &SpikingNetwork) -> Result<SnnCounts> {
    let spec = &net.spec;
    let [n, _, h, w] = trace.output_flow[0].dims4()?;
    let maps = fan_out_maps(spec, h, w)?;
    let sizes = spec.spatial(h, w)?;
    let mut op_spikes = 0u64;
    for (&id, counts) in &trace.spike_counts {
        let fan = &maps[id];
        if counts.len() != n * fan.len() {
            return Err(shape_err(
                "count_snn_flops",
                format!("layer {id}: {} counts for {n} samples of {}", counts.len(), fan.len()),
            ));
        }
        for sample in counts.chunks(fan.len()) {
            op_spikes += sample.iter().zip(fan).map(|(&c, &f)| c as u64 * f).sum::<u64>();
        }
    }
    let op_input_layer: u64 = spec.consumers(0).into_iter().map(|c| conv_macs(spec, &sizes, c)).sum::<u64>() * n as u64;
    Ok(SnnCounts { op_spikes, op_input_layer, spikes: trace.total_spikes(), samples: n })
}

/// Dense work of the non-spiking network for one `h x w` sample:
/// convolution MACs plus one add per pooled element.
pub fn ann_flops(spec: &NetworkSpec, h: usize, w: usize) -> Result<u64> {
    spec.validate()?;
    let sizes = spec.spatial(h, w)?;
    let channels = spec.channels()?;
    let mut total = 0u64;
    for (id, layer) in spec.layers.iter().enumerate() {
        total += match layer.kind {
            LayerKind::Conv { .. } => conv_macs(spec, &sizes, id),
            LayerKind::AvgPool { window } => {
                let (oh, ow) = sizes[id];
                (channels[id] * oh * ow * window * window) as u64
            }
            _ => 0,
        };
    }
    Ok(total)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyReport {
    pub flops: u64,
    pub memory_accesses: f64,
    /// Joules.
    pub ops_energy: f64,
    pub memory_energy: f64,
    pub total_energy: f64,
}

fn memory_terms(flops: u64, params: usize, model: &EnergyModel) -> (f64, f64) {
    let m = &model.memory;
    let accesses = m.alpha * flops as f64 + m.beta * params as f64;
    (accesses, accesses * m.e_access_pj * PICOJOULE)
}

pub fn ann_energy(flops: u64, params: usize, model: &EnergyModel) -> EnergyReport {
    let ops = flops as f64 * model.e_mac_pj * PICOJOULE;
    let (accesses, mem) = memory_terms(flops, params, model);
    EnergyReport { flops, memory_accesses: accesses, ops_energy: ops, memory_energy: mem, total_energy: ops + mem }
}

pub fn snn_energy(counts: &SnnCounts, params: usize, model: &EnergyModel) -> EnergyReport {
    let ops = (counts.op_spikes as f64 * model.e_ac_pj + counts.op_input_layer as f64 * model.e_mac_pj) * PICOJOULE;
    let flops = counts.flops();
    let (accesses, mem) = memory_terms(flops, params, model);
    EnergyReport { flops, memory_accesses: accesses, ops_energy: ops, memory_energy: mem, total_energy: ops + mem }
}
