//! Declarative encoder-decoder graphs.
//!
//! Layers are stored in topological order; every layer names its inputs by
//! index into the layer list. Layer 0 is the sole input and the last layer is
//! the linear output convolution. Every other convolution is followed by a
//! ReLU and becomes one neuron layer after conversion.

use alloc::{format, string::String, string::ToString, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Padding;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Segmentation,
    Denoising,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Input {
        channels: usize,
    },
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
        relu: bool,
    },
    AvgPool {
        window: usize,
    },
    Upsample2x,
    /// Channel concatenation; inputs are ordered skip part first, upsampled part second.
    Concat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub inputs: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipLink {
    /// Encoder layer providing the skip tensor.
    pub encoder: usize,
    /// Concat layer receiving it.
    pub concat: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
    pub skip_links: Vec<SkipLink>,
}

impl NetworkSpec {
    pub fn output(&self) -> usize {
        self.layers.len() - 1
    }

    pub fn input_channels(&self) -> usize {
        match self.layers.first().map(|l| &l.kind) {
            Some(LayerKind::Input { channels }) => *channels,
            _ => 0,
        }
    }

    pub fn output_channels(&self) -> usize {
        match self.layers.last().map(|l| &l.kind) {
            Some(LayerKind::Conv { out_channels, .. }) => *out_channels,
            _ => 0,
        }
    }

    pub fn is_conv(&self, id: usize) -> bool {
        matches!(self.layers[id].kind, LayerKind::Conv { .. })
    }

    /// Convolutions followed by ReLU, i.e. the neuron layers of the converted network.
    pub fn relu_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind, LayerKind::Conv { relu: true, .. }))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn conv_layers(&self) -> Vec<usize> {
        (0..self.layers.len()).filter(|&i| self.is_conv(i)).collect()
    }

    pub fn concat_layers(&self) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| matches!(l.kind, LayerKind::Concat)).map(|(i, _)| i).collect()
    }

    /// Layers that read the output of `id`.
    pub fn consumers(&self, id: usize) -> Vec<usize> {
        self.layers.iter().enumerate().filter(|(_, l)| l.inputs.contains(&id)).map(|(i, _)| i).collect()
    }

    /// Follows pools and upsamples back to the layer whose values reach `id`
    /// unchanged in scale: a neuron layer, a concat, or the input.
    pub fn scale_source(&self, id: usize) -> usize {
        let mut cur = id;
        while let LayerKind::AvgPool { .. } | LayerKind::Upsample2x = self.layers[cur].kind {
            cur = self.layers[cur].inputs[0];
        }
        cur
    }

    /// Output channels of every layer.
    pub fn channels(&self) -> Result<Vec<usize>> {
        let mut ch = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let c = match &layer.kind {
                LayerKind::Input { channels } => *channels,
                LayerKind::Conv { in_channels, out_channels, .. } => {
                    let src = ch[layer.inputs[0]];
                    if src != *in_channels {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} ({}) expects {in_channels} channels, input provides {src}",
                            layer.name
                        )));
                    }
                    *out_channels
                }
                LayerKind::AvgPool { .. } | LayerKind::Upsample2x => ch[layer.inputs[0]],
                LayerKind::Concat => ch[layer.inputs[0]] + ch[layer.inputs[1]],
            };
            ch.push(c);
        }
        Ok(ch)
    }

    /// Spatial size of every layer's output for an `h x w` input.
    pub fn spatial(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let mut hw: Vec<(usize, usize)> = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let s = match &layer.kind {
                LayerKind::Input { .. } => (h, w),
                LayerKind::Conv { kernel, stride, padding, .. } => {
                    let (ih, iw) = hw[layer.inputs[0]];
                    let out = |len: usize| -> Result<usize> {
                        let padded = len + padding.before + padding.after;
                        if padded < *kernel {
                            return Err(Error::InvalidNetwork(format!(
                                "layer {i} ({}) kernel {kernel} exceeds padded extent {padded}",
                                layer.name
                            )));
                        }
                        Ok((padded - kernel) / stride + 1)
                    };
                    (out(ih)?, out(iw)?)
                }
                LayerKind::AvgPool { window } => {
                    let (ih, iw) = hw[layer.inputs[0]];
                    if ih % window != 0 || iw % window != 0 {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} ({}) cannot pool {ih}x{iw} by {window}",
                            layer.name
                        )));
                    }
                    (ih / window, iw / window)
                }
                LayerKind::Upsample2x => {
                    let (ih, iw) = hw[layer.inputs[0]];
                    (2 * ih, 2 * iw)
                }
                LayerKind::Concat => {
                    let a = hw[layer.inputs[0]];
                    let b = hw[layer.inputs[1]];
                    if a != b {
                        return Err(Error::InvalidNetwork(format!(
                            "layer {i} ({}) concatenates {a:?} with {b:?}",
                            layer.name
                        )));
                    }
                    a
                }
            };
            hw.push(s);
        }
        Ok(hw)
    }

    /// Structural checks shared by every graph: topological order, arities,
    /// a single input, a linear output convolution, no dangling layers and
    /// consistent channel counts.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidNetwork(m));
        if self.layers.len() < 2 {
            return bad("needs an input and an output layer".into());
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let arity = match layer.kind {
                LayerKind::Input { .. } => 0,
                LayerKind::Concat => 2,
                _ => 1,
            };
            if layer.inputs.len() != arity {
                return bad(format!("layer {i} ({}) takes {arity} inputs, lists {}", layer.name, layer.inputs.len()));
            }
            if let Some(&j) = layer.inputs.iter().find(|&&j| j >= i) {
                return bad(format!("layer {i} ({}) reads layer {j}, breaking topological order", layer.name));
            }
            let is_input = matches!(layer.kind, LayerKind::Input { .. });
            if is_input != (i == 0) {
                return bad(format!("layer {i} ({}): exactly layer 0 must be the input", layer.name));
            }
            if let LayerKind::Conv { relu, kernel, stride, .. } = layer.kind {
                if kernel == 0 || stride == 0 {
                    return bad(format!("layer {i} ({}) has zero kernel or stride", layer.name));
                }
                if relu == (i == self.output()) {
                    return bad(format!("layer {i} ({}): only the final convolution may omit the ReLU", layer.name));
                }
            } else if i == self.output() {
                return bad("the final layer must be a convolution".into());
            }
            if let LayerKind::AvgPool { window: 0 } = layer.kind {
                return bad(format!("layer {i} ({}) has a zero pooling window", layer.name));
            }
            if i != self.output() && self.consumers(i).is_empty() {
                return bad(format!("layer {i} ({}) is never consumed", layer.name));
            }
        }
        for link in &self.skip_links {
            let ok = self
                .layers
                .get(link.concat)
                .map_or(false, |l| matches!(l.kind, LayerKind::Concat) && l.inputs[0] == link.encoder);
            if !ok {
                return bad(format!(
                    "skip link {} -> {} does not feed the first input of a concat",
                    link.encoder, link.concat
                ));
            }
        }
        for c in self.concat_layers() {
            if !self.skip_links.iter().any(|l| l.concat == c) {
                return bad(format!("concat layer {c} has no registered skip link"));
            }
        }
        self.channels()?;
        Ok(())
    }

    /// [`Self::validate`] plus the U-Net stage count: four pools and four upsamples.
    pub fn validate_unet(&self) -> Result<()> {
        self.validate()?;
        let pools = self.layers.iter().filter(|l| matches!(l.kind, LayerKind::AvgPool { .. })).count();
        let ups = self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Upsample2x)).count();
        if pools != 4 || ups != 4 {
            return Err(Error::InvalidNetwork(format!(
                "U-Net needs four pool and four upsample stages, found {pools} and {ups}"
            )));
        }
        Ok(())
    }
}

/// Incremental graph construction.
#[derive(Debug, Default)]
pub struct NetworkBuilder {
    layers: Vec<LayerSpec>,
    skips: Vec<SkipLink>,
    channels: Vec<usize>,
}

impl NetworkBuilder {
    pub fn new(in_channels: usize) -> Self {
        let mut b = Self::default();
        b.push("input", LayerKind::Input { channels: in_channels }, vec![], in_channels);
        b
    }

    fn push(&mut self, name: &str, kind: LayerKind, inputs: Vec<usize>, ch: usize) -> usize {
        self.layers.push(LayerSpec { name: name.to_string(), kind, inputs });
        self.channels.push(ch);
        self.layers.len() - 1
    }

    pub fn channels_of(&self, id: usize) -> usize {
        self.channels[id]
    }

    pub fn conv(&mut self, name: &str, from: usize, out_channels: usize, kernel: usize, relu: bool) -> usize {
        let kind = LayerKind::Conv {
            in_channels: self.channels[from],
            out_channels,
            kernel,
            stride: 1,
            padding: Padding::same(kernel),
            relu,
        };
        self.push(name, kind, vec![from], out_channels)
    }

    pub fn avg_pool(&mut self, name: &str, from: usize, window: usize) -> usize {
        let ch = self.channels[from];
        self.push(name, LayerKind::AvgPool { window }, vec![from], ch)
    }

    pub fn upsample(&mut self, name: &str, from: usize) -> usize {
        let ch = self.channels[from];
        self.push(name, LayerKind::Upsample2x, vec![from], ch)
    }

    pub fn concat(&mut self, name: &str, skip: usize, up: usize) -> usize {
        let ch = self.channels[skip] + self.channels[up];
        let id = self.push(name, LayerKind::Concat, vec![skip, up], ch);
        self.skips.push(SkipLink { encoder: skip, concat: id });
        id
    }

    pub fn finish(self) -> Result<NetworkSpec> {
        let spec = NetworkSpec { layers: self.layers, skip_links: self.skips };
        spec.validate()?;
        Ok(spec)
    }
}

/// Classic U-Net: four double-conv encoder stages with average pooling, a
/// double-conv bottleneck, four decoder stages (nearest 2x upsample, 2x2 conv,
/// skip concat, double conv) and a final linear 1x1 convolution.
///
/// Channel widths are `64 * width_factor * 2^k` for `k = 0..=4`.
pub fn build_unet(width_factor: f64, in_channels: usize, out_channels: usize, task: Task) -> Result<NetworkSpec> {
    let base = 64.0 * width_factor;
    let rounded = libm::round(base);
    if !(width_factor > 0.0) || rounded < 1.0 || libm::fabs(base - rounded) > 1e-9 {
        return Err(Error::InvalidNetwork(format!("width factor {width_factor} gives non-integer base width {base}")));
    }
    if in_channels == 0 || out_channels == 0 {
        return Err(Error::InvalidNetwork("channel counts must be positive".into()));
    }
    match task {
        Task::Segmentation if out_channels < 2 => {
            return Err(Error::InvalidNetwork("segmentation needs at least two output classes".into()))
        }
        Task::Denoising if out_channels != in_channels => {
            return Err(Error::InvalidNetwork(format!(
                "denoising predicts a noise map: out_channels {out_channels} must equal in_channels {in_channels}"
            )))
        }
        _ => {}
    }
    let widths: Vec<usize> = (0..5).map(|k| (rounded as usize) << k).collect();
    let mut b = NetworkBuilder::new(in_channels);
    let mut x = 0;
    let mut skips = Vec::new();
    for (stage, &c) in widths[..4].iter().enumerate() {
        let s = stage + 1;
        x = b.conv(&format!("enc{s}_conv1"), x, c, 3, true);
        x = b.conv(&format!("enc{s}_conv2"), x, c, 3, true);
        skips.push(x);
        x = b.avg_pool(&format!("enc{s}_pool"), x, 2);
    }
    x = b.conv("bottleneck_conv1", x, widths[4], 3, true);
    x = b.conv("bottleneck_conv2", x, widths[4], 3, true);
    for stage in (0..4).rev() {
        let s = stage + 1;
        let c = widths[stage];
        let u = b.upsample(&format!("dec{s}_upsample"), x);
        let u = b.conv(&format!("dec{s}_upconv"), u, c, 2, true);
        let cat = b.concat(&format!("dec{s}_concat"), skips[stage], u);
        x = b.conv(&format!("dec{s}_conv1"), cat, c, 3, true);
        x = b.conv(&format!("dec{s}_conv2"), x, c, 3, true);
    }
    b.conv("output", x, out_channels, 1, false);
    let spec = b.finish()?;
    spec.validate_unet()?;
    Ok(spec)
}
