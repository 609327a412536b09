//! In-memory datasets for the two supported tasks.

use alloc::{format, vec::Vec};

use crate::error::{shape_err, Error, Result};
use crate::network::Task;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub labels: Vec<usize>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<usize>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(shape_err("LabelMap", format!("{} labels for a {height}x{width} map", labels.len())));
        }
        Ok(Self { height, width, labels })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Labels(LabelMap),
    /// Additive noise present in the input (`input = clean + noise`).
    Noise(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// `1 x C x H x W`, values nominally in `[0, 1]`.
    pub input: Tensor,
    pub target: Target,
}

impl Sample {
    /// The noise-free image of a denoising sample.
    pub fn clean(&self) -> Result<Tensor> {
        match &self.target {
            Target::Noise(n) => self.input.sub(n),
            Target::Labels(_) => Err(Error::Missing("noise target on a segmentation sample".into())),
        }
    }

    /// Mirrors input and target along width and/or height.
    pub fn flipped(&self, horizontal: bool, vertical: bool) -> Result<Sample> {
        let input = flip(&self.input, horizontal, vertical)?;
        let target = match &self.target {
            Target::Noise(n) => Target::Noise(flip(n, horizontal, vertical)?),
            Target::Labels(m) => {
                let (h, w) = (m.height, m.width);
                let mut labels = Vec::with_capacity(h * w);
                for y in 0..h {
                    let sy = if vertical { h - 1 - y } else { y };
                    for x in 0..w {
                        let sx = if horizontal { w - 1 - x } else { x };
                        labels.push(m.labels[sy * w + sx]);
                    }
                }
                Target::Labels(LabelMap { height: h, width: w, labels })
            }
        };
        Ok(Sample { input, target })
    }
}

fn flip(t: &Tensor, horizontal: bool, vertical: bool) -> Result<Tensor> {
    let [n, c, h, w] = t.dims4()?;
    let src = t.data();
    let mut out = Vec::with_capacity(src.len());
    for p in 0..n * c {
        let plane = &src[p * h * w..][..h * w];
        for y in 0..h {
            let sy = if vertical { h - 1 - y } else { y };
            for x in 0..w {
                let sx = if horizontal { w - 1 - x } else { x };
                out.push(plane[sy * w + sx]);
            }
        }
    }
    Tensor::new(t.shape().to_vec(), out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub task: Task,
    /// Number of segmentation classes (ignored for denoising).
    pub num_classes: usize,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BatchTarget {
    /// Flattened `N x H x W` labels.
    Labels(Vec<usize>),
    Noise(Tensor),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input: Tensor,
    pub target: BatchTarget,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Checks that every sample carries the target kind of the task, matching
    /// spatial dims, and labels below `num_classes`.
    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            let [n, _, h, w] = s.input.dims4()?;
            if n != 1 {
                return Err(shape_err("dataset", format!("sample {i} has batch dimension {n}")));
            }
            match (&s.target, self.task) {
                (Target::Labels(m), Task::Segmentation) => {
                    if (m.height, m.width) != (h, w) {
                        return Err(shape_err(
                            "dataset",
                            format!("sample {i} labels {}x{} vs image {h}x{w}", m.height, m.width),
                        ));
                    }
                    if let Some(&l) = m.labels.iter().find(|&&l| l >= self.num_classes) {
                        return Err(Error::LabelOutOfRange { label: l, num_classes: self.num_classes });
                    }
                }
                (Target::Noise(t), Task::Denoising) => t.same_shape(&s.input, "dataset noise target")?,
                _ => {
                    return Err(Error::InvalidArgument {
                        what: "dataset",
                        detail: format!("sample {i} target does not match task {:?}", self.task),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Batch> {
        let picked: Vec<&Sample> = indices.iter().map(|&i| &self.samples[i]).collect();
        batch_of(&picked)
    }
}

pub fn batch_of(samples: &[&Sample]) -> Result<Batch> {
    let inputs: Vec<&Tensor> = samples.iter().map(|s| &s.input).collect();
    let input = Tensor::stack_batch(&inputs)?;
    let target = match samples.first().map(|s| &s.target) {
        Some(Target::Labels(_)) => {
            let mut labels = Vec::new();
            for s in samples {
                match &s.target {
                    Target::Labels(m) => labels.extend_from_slice(&m.labels),
                    Target::Noise(_) => return Err(Error::Missing("labels for every batch item".into())),
                }
            }
            BatchTarget::Labels(labels)
        }
        _ => {
            let mut noise = Vec::new();
            for s in samples {
                match &s.target {
                    Target::Noise(n) => noise.push(n),
                    Target::Labels(_) => return Err(Error::Missing("noise for every batch item".into())),
                }
            }
            BatchTarget::Noise(Tensor::stack_batch(&noise)?)
        }
    };
    Ok(Batch { input, target })
}
