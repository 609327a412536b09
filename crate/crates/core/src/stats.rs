//! Activation statistics used to normalise weights before conversion.

use alloc::{collections::BTreeMap, format, string::ToString, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::ann::{forward_all, Checkpoint};
use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConcatStats {
    /// Scale of each concat input (that of the neuron layer feeding it), skip part first.
    pub parts: Vec<f64>,
    /// Percentile over both parts pooled, i.e. of the concatenated tensor.
    pub combined: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub percentile: f64,
    /// Per neuron layer.
    pub layers: BTreeMap<usize, f64>,
    /// Per concat layer.
    pub concats: BTreeMap<usize, ConcatStats>,
}

/// Percentile with linear interpolation between order statistics
/// (rank `p / 100 * (n - 1)`). Reorders `values`.
pub fn percentile(values: &mut [f64], p: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(arg_err("percentile", "no values".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(arg_err("percentile", format!("{p} outside [0, 100]")));
    }
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite { context: "percentile input".to_string() });
    }
    let rank = p / 100.0 * (values.len() - 1) as f64;
    let lo = libm::floor(rank) as usize;
    let frac = rank - lo as f64;
    let (_, &mut lo_v, rest) = values.select_nth_unstable_by(lo, f64::total_cmp);
    if frac == 0.0 || rest.is_empty() {
        return Ok(lo_v);
    }
    let hi_v = rest.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(lo_v + frac * (hi_v - lo_v))
}

/// Pools every activation scalar of each neuron layer (and of each concat
/// part) over `inputs` and takes the given percentile.
pub fn collect_stats<'a>(
    ckpt: &Checkpoint,
    inputs: impl IntoIterator<Item = &'a Tensor>,
    pct: f64,
) -> Result<ActivationStats> {
    let spec = &ckpt.spec;
    let relu = spec.relu_layers();
    let concats = spec.concat_layers();
    // Concat inputs that are not neuron layers need their own pools.
    let mut extra: Vec<usize> = Vec::new();
    for &c in &concats {
        for &src in &spec.layers[c].inputs {
            if !relu.contains(&src) && !extra.contains(&src) {
                extra.push(src);
            }
        }
    }
    let mut pools: BTreeMap<usize, Vec<f64>> = relu.iter().chain(&extra).map(|&i| (i, Vec::new())).collect();
    let mut seen = 0;
    for x in inputs {
        let values = forward_all(spec, &ckpt.params, x)?;
        for (id, pool) in pools.iter_mut() {
            pool.extend_from_slice(values[*id].data());
        }
        seen += 1;
    }
    if seen == 0 {
        return Err(arg_err("dataset", "statistics need at least one sample".into()));
    }

    let mut lambdas = BTreeMap::new();
    for (&id, pool) in pools.iter_mut() {
        let is_neuron = relu.contains(&id);
        if is_neuron && pool.iter().all(|&v| v == 0.0) {
            return Err(Error::DeadLayer { layer: id, name: spec.layers[id].name.clone() });
        }
        let mut lam = percentile(pool, pct)?;
        if is_neuron && lam <= 0.0 {
            // Mostly silent layer: fall back to the largest activation.
            lam = pool.iter().copied().fold(0.0, f64::max);
            log::warn!("layer {} ({}): percentile is zero, using max {lam}", id, spec.layers[id].name);
        }
        lambdas.insert(id, lam);
    }
    let layers: BTreeMap<usize, f64> = relu.iter().map(|&i| (i, lambdas[&i])).collect();
    let mut concat_stats = BTreeMap::new();
    for &c in &concats {
        let ins = &spec.layers[c].inputs;
        let mut pooled: Vec<f64> = Vec::with_capacity(ins.iter().map(|i| pools[i].len()).sum());
        for i in ins {
            pooled.extend_from_slice(&pools[i]);
        }
        let combined = percentile(&mut pooled, pct)?;
        let parts = ins
            .iter()
            .map(|&i| match spec.scale_source(i) {
                0 => 1.0,
                src if layers.contains_key(&src) => layers[&src],
                src => concat_stats.get(&src).map_or(1.0, |s: &ConcatStats| s.combined),
            })
            .collect();
        concat_stats.insert(c, ConcatStats { parts, combined });
    }
    Ok(ActivationStats { percentile: pct, layers, concats: concat_stats })
}
