//! Reference (non-spiking) network: parameters, graph forward and backward.

use alloc::{collections::BTreeMap, format, vec::Vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::network::{LayerKind, NetworkSpec, Task};
use crate::tensor::{self, ConvParams, Tensor};

/// Convolution parameters keyed by layer index.
pub type Params = BTreeMap<usize, ConvParams>;

#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub type Gradients = BTreeMap<usize, ParamGrad>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub width_factor: f64,
    pub seed: u64,
    pub epoch: usize,
    pub task: Task,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: Params,
    pub meta: CheckpointMeta,
}

/// Activations retained by a recording forward pass.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Recorded {
    /// Post-ReLU output of every neuron layer.
    pub relu: BTreeMap<usize, Tensor>,
    /// `[skip part, upsampled part]` entering each concat.
    pub concat_parts: BTreeMap<usize, [Tensor; 2]>,
}

impl Checkpoint {
    /// Kaiming-uniform fan-in initialisation (`U(-sqrt(6/fan_in), +sqrt(6/fan_in))`), zero biases.
    pub fn init(spec: NetworkSpec, meta: CheckpointMeta) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
        let mut params = Params::new();
        for (id, layer) in spec.layers.iter().enumerate() {
            if let LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, .. } = layer.kind {
                let fan_in = (in_channels * kernel * kernel) as f64;
                let bound = libm::sqrt(6.0 / fan_in);
                let shape = [out_channels, in_channels, kernel, kernel];
                let k = Tensor::from_fn(&shape, |_| rng.random_range(-bound..bound));
                params.insert(id, ConvParams::new(k, Tensor::zeros(&[out_channels]), stride, padding)?);
            }
        }
        Ok(Self { spec, params, meta })
    }

    /// Assembles a checkpoint, checking that every convolution has exactly
    /// one parameter entry of the right geometry.
    pub fn from_parts(spec: NetworkSpec, params: Params, meta: CheckpointMeta) -> Result<Self> {
        spec.validate()?;
        check_params(&spec, &params)?;
        Ok(Self { spec, params, meta })
    }

    pub fn forward(&self, input: &Tensor, record: bool) -> Result<(Tensor, Option<Recorded>)> {
        let mut values = forward_all(&self.spec, &self.params, input)?;
        let rec = record.then(|| record_from(&self.spec, &values));
        let out = values.pop().expect("validated spec has an output layer");
        Ok((out, rec))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|p| p.kernel.len() + p.bias.len()).sum()
    }
}

pub fn check_params(spec: &NetworkSpec, params: &Params) -> Result<()> {
    for (id, layer) in spec.layers.iter().enumerate() {
        match (&layer.kind, params.get(&id)) {
            (LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, .. }, Some(p)) => {
                let expected = [*out_channels, *in_channels, *kernel, *kernel];
                if p.kernel.shape() != expected || p.stride != *stride || p.padding != *padding {
                    return Err(shape_err(
                        "checkpoint",
                        format!(
                            "layer {id} ({}) kernel {:?} stride {} vs spec {:?} stride {}",
                            layer.name,
                            p.kernel.shape(),
                            p.stride,
                            expected,
                            stride
                        ),
                    ));
                }
            }
            (LayerKind::Conv { .. }, None) => {
                return Err(Error::Missing(format!("parameters for layer {id} ({})", layer.name)))
            }
            (_, Some(_)) => {
                return Err(Error::InvalidNetwork(format!(
                    "parameters given for non-convolution layer {id} ({})",
                    layer.name
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

fn params_of<'a>(params: &'a Params, spec: &NetworkSpec, id: usize) -> Result<&'a ConvParams> {
    params.get(&id).ok_or_else(|| Error::Missing(format!("parameters for layer {id} ({})", spec.layers[id].name)))
}

/// Output of every layer, in layer order.
pub fn forward_all(spec: &NetworkSpec, params: &Params, input: &Tensor) -> Result<Vec<Tensor>> {
    let [_, c, _, _] = input.dims4()?;
    if c != spec.input_channels() {
        return Err(shape_err("forward", format!("input has {c} channels, network expects {}", spec.input_channels())));
    }
    let mut values: Vec<Tensor> = Vec::with_capacity(spec.layers.len());
    for (id, layer) in spec.layers.iter().enumerate() {
        let v = match &layer.kind {
            LayerKind::Input { .. } => input.clone(),
            LayerKind::Conv { relu, .. } => {
                let mut y = tensor::conv2d_forward(&values[layer.inputs[0]], params_of(params, spec, id)?)?;
                if *relu {
                    y.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                }
                y
            }
            LayerKind::AvgPool { window } => tensor::avgpool2d_forward(&values[layer.inputs[0]], *window)?,
            LayerKind::Upsample2x => tensor::upsample2x_forward(&values[layer.inputs[0]])?,
            LayerKind::Concat => tensor::concat_channels(&values[layer.inputs[0]], &values[layer.inputs[1]])?,
        };
        values.push(v);
    }
    Ok(values)
}

pub(crate) fn record_from(spec: &NetworkSpec, values: &[Tensor]) -> Recorded {
    let mut rec = Recorded::default();
    for id in spec.relu_layers() {
        rec.relu.insert(id, values[id].clone());
    }
    for id in spec.concat_layers() {
        let ins = &spec.layers[id].inputs;
        rec.concat_parts.insert(id, [values[ins[0]].clone(), values[ins[1]].clone()]);
    }
    rec
}

/// Reverse sweep over the graph.
///
/// `values[i]` is the value layer `i` handed to its consumers during the
/// forward pass; `gates[i]` multiplies the incoming gradient of neuron layer
/// `i` (the ReLU derivative for the ANN, the firing gate for spiking flows).
/// `grad_output` is the loss gradient at the final convolution's output, and
/// bias gradients are multiplied by `bias_scale`.
pub fn backward_all(
    spec: &NetworkSpec,
    params: &Params,
    values: &[Tensor],
    gates: &[Option<Tensor>],
    grad_output: &Tensor,
    bias_scale: f64,
) -> Result<Gradients> {
    let n = spec.layers.len();
    if values.len() != n || gates.len() != n {
        return Err(shape_err("backward", format!("{} values and {} gates for {n} layers", values.len(), gates.len())));
    }
    let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
    grads[n - 1] = Some(grad_output.clone());
    let mut out = Gradients::new();

    let accumulate = |grads: &mut Vec<Option<Tensor>>, id: usize, g: Tensor| -> Result<()> {
        match &mut grads[id] {
            Some(acc) => acc.add_assign(&g),
            slot => {
                *slot = Some(g);
                Ok(())
            }
        }
    };

    for id in (1..n).rev() {
        let Some(mut g) = grads[id].take() else { continue };
        let layer = &spec.layers[id];
        match &layer.kind {
            LayerKind::Input { .. } => {}
            LayerKind::Conv { relu, .. } => {
                if *relu {
                    let gate = gates[id]
                        .as_ref()
                        .ok_or_else(|| Error::Missing(format!("gate for layer {id} ({})", layer.name)))?;
                    g.same_shape(gate, "backward gate")?;
                    for (v, m) in g.data_mut().iter_mut().zip(gate.data()) {
                        *v *= m;
                    }
                }
                let src = layer.inputs[0];
                let p = params_of(params, spec, id)?;
                let cg = if src == 0 {
                    tensor::conv2d_backward_params(&values[src], p, &g)?
                } else {
                    tensor::conv2d_backward(&values[src], p, &g)?
                };
                let bias = if bias_scale == 1.0 { cg.bias } else { cg.bias.scale(bias_scale) };
                out.insert(id, ParamGrad { kernel: cg.kernel, bias });
                if src != 0 {
                    accumulate(&mut grads, src, cg.input)?;
                }
            }
            LayerKind::AvgPool { window } => {
                let src = layer.inputs[0];
                if src != 0 {
                    accumulate(&mut grads, src, tensor::avgpool2d_backward(&g, *window)?)?;
                }
            }
            LayerKind::Upsample2x => {
                let src = layer.inputs[0];
                if src != 0 {
                    accumulate(&mut grads, src, tensor::upsample2x_backward(&g)?)?;
                }
            }
            LayerKind::Concat => {
                let [a, b] = [layer.inputs[0], layer.inputs[1]];
                let at = values[a].shape()[1];
                let (ga, gb) = tensor::split_channels(&g, at)?;
                if a != 0 {
                    accumulate(&mut grads, a, ga)?;
                }
                if b != 0 {
                    accumulate(&mut grads, b, gb)?;
                }
            }
        }
    }
    Ok(out)
}

/// ReLU derivative masks from post-activation values.
pub fn relu_gates(spec: &NetworkSpec, values: &[Tensor]) -> Vec<Option<Tensor>> {
    spec.layers
        .iter()
        .enumerate()
        .map(|(i, l)| match l.kind {
            LayerKind::Conv { relu: true, .. } => Some(tensor::positive_mask(&values[i])),
            _ => None,
        })
        .collect()
}

/// Forward plus backward through the ANN for a given output-gradient rule.
pub fn ann_gradients(
    ckpt: &Checkpoint,
    input: &Tensor,
    loss: impl FnOnce(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<(f64, Gradients)> {
    let values = forward_all(&ckpt.spec, &ckpt.params, input)?;
    let (l, g) = loss(values.last().expect("output layer"))?;
    let gates = relu_gates(&ckpt.spec, &values);
    let grads = backward_all(&ckpt.spec, &ckpt.params, &values, &gates, &g, 1.0)?;
    Ok((l, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_unet, NetworkBuilder};

    fn meta(seed: u64) -> CheckpointMeta {
        CheckpointMeta { width_factor: 1.0 / 16.0, seed, epoch: 0, task: Task::Segmentation }
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let spec = build_unet(1.0 / 16.0, 1, 2, Task::Segmentation).unwrap();
        let ck = Checkpoint::init(spec, meta(1)).unwrap();
        let (y, _) = ck.forward(&Tensor::zeros(&[1, 1, 16, 16]), false).unwrap();
        assert_eq!(y.shape(), &[1, 2, 16, 16]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn record_mode_returns_one_activation_per_relu() {
        let spec = build_unet(1.0 / 16.0, 1, 2, Task::Segmentation).unwrap();
        let ck = Checkpoint::init(spec, meta(2)).unwrap();
        let x = Tensor::from_fn(&[1, 1, 16, 16], |i| (i % 7) as f64 / 7.0);
        let (_, rec) = ck.forward(&x, true).unwrap();
        let rec = rec.unwrap();
        assert_eq!(rec.relu.len(), ck.spec.relu_layers().len());
        assert_eq!(rec.concat_parts.len(), 4);
    }

    #[test]
    fn forward_matches_manual_composition() {
        let mut b = NetworkBuilder::new(1);
        let a = b.conv("a", 0, 2, 3, true);
        b.conv("out", a, 1, 3, false);
        let spec = b.finish().unwrap();
        let ck = Checkpoint::init(spec, meta(3)).unwrap();
        let x = Tensor::from_fn(&[1, 1, 5, 5], |i| libm::sin(i as f64));
        let (y, _) = ck.forward(&x, false).unwrap();
        let h = tensor::relu_forward(&tensor::conv2d_forward(&x, &ck.params[&1]).unwrap());
        let manual = tensor::conv2d_forward(&h, &ck.params[&2]).unwrap();
        assert_eq!(y, manual);
    }

    #[test]
    fn from_parts_requires_every_conv() {
        let spec = build_unet(1.0 / 16.0, 1, 2, Task::Segmentation).unwrap();
        let mut ck = Checkpoint::init(spec, meta(4)).unwrap();
        let first = *ck.params.keys().next().unwrap();
        ck.params.remove(&first);
        assert!(matches!(Checkpoint::from_parts(ck.spec, ck.params, ck.meta), Err(Error::Missing(_))));
    }

    #[test]
    fn forward_rejects_wrong_channels() {
        let spec = build_unet(1.0 / 16.0, 1, 2, Task::Segmentation).unwrap();
        let ck = Checkpoint::init(spec, meta(5)).unwrap();
        assert!(ck.forward(&Tensor::zeros(&[1, 3, 16, 16]), false).is_err());
    }
}
