//! Checkpoint, statistics and spiking-network directories.
//!
//! A model directory holds `model.json` (graph, metadata, and for spiking
//! networks the schedules, scales and mode) and one `.snnt` file per kernel
//! and bias, named after the layer.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snnforge_core::ann::{Checkpoint, CheckpointMeta, Params};
use snnforge_core::conversion::{NormMode, SpikingNetwork};
use snnforge_core::network::NetworkSpec;
use snnforge_core::neuron::ThresholdSchedule;
use snnforge_core::stats::ActivationStats;
use snnforge_core::tensor::ConvParams;

use crate::error::{CliError, Result};
use crate::tensor_io;

pub const MODEL_FILE: &str = "model.json";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Ann,
    Spiking,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ParamFiles {
    kernel: String,
    bias: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SpikingSection {
    mode: NormMode,
    /// Keyed by layer name.
    schedules: BTreeMap<String, ThresholdSchedule>,
    lambdas: ActivationStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    kind: ModelKind,
    spec: NetworkSpec,
    meta: CheckpointMeta,
    /// Keyed by layer name.
    params: BTreeMap<String, ParamFiles>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    spiking: Option<SpikingSection>,
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("serialisable");
    fs::write(path, text + "\n").map_err(CliError::io(format!("writing {}", path.display())))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, hint: &str) -> Result<T> {
    if !path.is_file() {
        return Err(CliError::missing(path, hint));
    }
    let text = fs::read_to_string(path).map_err(CliError::io(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::format(path, e.to_string()))
}

fn write_params(
    dir: &Path,
    spec: &NetworkSpec,
    params: &Params,
) -> Result<(BTreeMap<String, ParamFiles>, Vec<PathBuf>)> {
    fs::create_dir_all(dir).map_err(CliError::io(format!("creating {}", dir.display())))?;
    let mut files = BTreeMap::new();
    let mut written = Vec::new();
    for (&id, p) in params {
        let name = &spec.layers[id].name;
        let pf = ParamFiles { kernel: format!("{name}.kernel.snnt"), bias: format!("{name}.bias.snnt") };
        tensor_io::write(&dir.join(&pf.kernel), &p.kernel)?;
        tensor_io::write(&dir.join(&pf.bias), &p.bias)?;
        written.extend([PathBuf::from(&pf.kernel), PathBuf::from(&pf.bias)]);
        files.insert(name.clone(), pf);
    }
    Ok((files, written))
}

fn read_params(dir: &Path, spec: &NetworkSpec, files: &BTreeMap<String, ParamFiles>) -> Result<Params> {
    let mut params = Params::new();
    for (id, layer) in spec.layers.iter().enumerate() {
        if !spec.is_conv(id) {
            continue;
        }
        let pf = files.get(&layer.name).ok_or_else(|| {
            CliError::format(dir.join(MODEL_FILE), format!("no parameter files for layer {}", layer.name))
        })?;
        let kernel = tensor_io::read(&dir.join(&pf.kernel))?;
        let bias = tensor_io::read(&dir.join(&pf.bias))?;
        let snnforge_core::network::LayerKind::Conv { stride, padding, .. } = layer.kind else { unreachable!() };
        params.insert(id, ConvParams::new(kernel, bias, stride, padding)?);
    }
    Ok(params)
}

/// Returns the files written, relative to `dir`.
pub fn save_checkpoint(dir: &Path, ck: &Checkpoint) -> Result<Vec<PathBuf>> {
    let (params, mut written) = write_params(dir, &ck.spec, &ck.params)?;
    let mf = ModelFile {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Ann,
        spec: ck.spec.clone(),
        meta: ck.meta.clone(),
        params,
        spiking: None,
    };
    write_json(&dir.join(MODEL_FILE), &mf)?;
    written.push(PathBuf::from(MODEL_FILE));
    Ok(written)
}

fn read_model_file(dir: &Path, hint: &str) -> Result<ModelFile> {
    let mf: ModelFile = read_json(&dir.join(MODEL_FILE), hint)?;
    if mf.format_version != FORMAT_VERSION {
        return Err(CliError::format(
            dir.join(MODEL_FILE),
            format!("unsupported format version {}", mf.format_version),
        ));
    }
    Ok(mf)
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let mf = read_model_file(dir, "checkpoint not found; run `snnforge train` first")?;
    if mf.kind != ModelKind::Ann {
        return Err(CliError::format(dir.join(MODEL_FILE), "expected an ANN checkpoint, found a spiking network"));
    }
    let params = read_params(dir, &mf.spec, &mf.params)?;
    Ok(Checkpoint::from_parts(mf.spec, params, mf.meta)?)
}

pub fn save_spiking(dir: &Path, net: &SpikingNetwork, meta: &CheckpointMeta) -> Result<Vec<PathBuf>> {
    let (params, mut written) = write_params(dir, &net.spec, &net.params)?;
    let schedules = net.schedules.iter().map(|(&id, s)| (net.spec.layers[id].name.clone(), s.clone())).collect();
    let mf = ModelFile {
        format_version: FORMAT_VERSION,
        kind: ModelKind::Spiking,
        spec: net.spec.clone(),
        meta: meta.clone(),
        params,
        spiking: Some(SpikingSection { mode: net.mode, schedules, lambdas: net.lambdas.clone() }),
    };
    write_json(&dir.join(MODEL_FILE), &mf)?;
    written.push(PathBuf::from(MODEL_FILE));
    Ok(written)
}

pub fn load_spiking(dir: &Path, hint: &str) -> Result<(SpikingNetwork, CheckpointMeta)> {
    let mf = read_model_file(dir, hint)?;
    let path = dir.join(MODEL_FILE);
    let Some(sp) = mf.spiking else {
        return Err(CliError::format(path, "expected a spiking network, found an ANN checkpoint"));
    };
    let params = read_params(dir, &mf.spec, &mf.params)?;
    let mut schedules = BTreeMap::new();
    for (name, s) in sp.schedules {
        let id = mf
            .spec
            .layers
            .iter()
            .position(|l| l.name == name)
            .ok_or_else(|| CliError::format(&path, format!("schedule for unknown layer {name}")))?;
        schedules.insert(id, s);
    }
    let net = SpikingNetwork { spec: mf.spec, params, schedules, mode: sp.mode, lambdas: sp.lambdas };
    net.validate()?;
    Ok((net, mf.meta))
}

pub fn save_stats(path: &Path, stats: &ActivationStats) -> Result<()> {
    write_json(path, stats)
}

pub fn load_stats(path: &Path) -> Result<ActivationStats> {
    read_json(path, "activation statistics not found; run `snnforge stats` first")
}
