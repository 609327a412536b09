//! Procedural datasets: shape segmentation and Gaussian denoising.
//!
//! Pixel intensities are quantised to multiples of 1/255 so images survive a
//! round trip through 8-bit files unchanged.

use alloc::{format, vec, vec::Vec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{Dataset, LabelMap, Sample, Target};
use crate::error::{arg_err, Result};
use crate::network::Task;
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const CIRCLE: usize = 1;
pub const RECTANGLE: usize = 2;
pub const SHAPE_CLASSES: usize = 3;

/// Noise levels, in 8-bit units, of the denoising sets.
pub const NOISE_LEVELS: [u32; 3] = [15, 25, 50];

fn quantize(v: f64) -> f64 {
    libm::round(v.clamp(0.0, 1.0) * 255.0) / 255.0
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Circle { cy: f64, cx: f64, r: f64 },
    Rect { y0: f64, x0: f64, y1: f64, x1: f64 },
}

impl Shape {
    fn random(rng: &mut ChaCha8Rng, size: usize, circle: bool) -> Self {
        let s = size as f64;
        let scale = s / 64.0;
        let cy = rng.random_range(0.15 * s..0.85 * s);
        let cx = rng.random_range(0.15 * s..0.85 * s);
        if circle {
            Shape::Circle { cy, cx, r: rng.random_range(6.0 * scale..13.0 * scale) }
        } else {
            let hh = rng.random_range(5.0 * scale..12.0 * scale);
            let hw = rng.random_range(5.0 * scale..12.0 * scale);
            Shape::Rect { y0: cy - hh, x0: cx - hw, y1: cy + hh, x1: cx + hw }
        }
    }

    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Circle { cy, cx, r } => (y - cy) * (y - cy) + (x - cx) * (x - cx) <= r * r,
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y <= y1 && x >= x0 && x <= x1,
        }
    }
}

/// One shapes image and its labels: one to four circles and rectangles of
/// random brightness on a darker, slightly grainy background.
fn shapes_sample(rng: &mut ChaCha8Rng, size: usize) -> Result<Sample> {
    let n = size * size;
    let bg = rng.random_range(0.05..0.25);
    let grain = Normal::new(0.0, 0.03).expect("valid std");
    let mut img: Vec<f64> = (0..n).map(|_| bg + grain.sample(rng)).collect();
    let mut labels = vec![BACKGROUND; n];
    let count = rng.random_range(1..=4);
    for _ in 0..count {
        let circle = rng.random_bool(0.5);
        let shape = Shape::random(rng, size, circle);
        let level = rng.random_range(0.5..1.0);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    img[y * size + x] = level + grain.sample(rng);
                    labels[y * size + x] = if circle { CIRCLE } else { RECTANGLE };
                }
            }
        }
    }
    let input = Tensor::new(vec![1, 1, size, size], img.into_iter().map(quantize).collect())?;
    Ok(Sample { input, target: Target::Labels(LabelMap::new(size, size, labels)?) })
}

pub fn shapes_dataset(count: usize, size: usize, seed: u64) -> Result<Dataset> {
    if size < 16 {
        return Err(arg_err("image size", format!("{size} is too small for shapes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..count).map(|_| shapes_sample(&mut rng, size)).collect::<Result<_>>()?;
    Ok(Dataset { task: Task::Segmentation, num_classes: SHAPE_CLASSES, samples })
}

/// Piecewise-smooth clean image: a linear gradient plus a few flat shapes.
fn clean_image(rng: &mut ChaCha8Rng, size: usize) -> Result<Tensor> {
    let base = rng.random_range(0.2..0.8);
    let gy = rng.random_range(-0.3..0.3) / size as f64;
    let gx = rng.random_range(-0.3..0.3) / size as f64;
    let mut img: Vec<f64> = (0..size * size).map(|i| base + gy * (i / size) as f64 + gx * (i % size) as f64).collect();
    for _ in 0..rng.random_range(2..=5) {
        let circle = rng.random_bool(0.5);
        let shape = Shape::random(rng, size, circle);
        let level = rng.random_range(0.0..1.0);
        for y in 0..size {
            for x in 0..size {
                if shape.contains(y as f64 + 0.5, x as f64 + 0.5) {
                    img[y * size + x] = level;
                }
            }
        }
    }
    Tensor::new(vec![1, 1, size, size], img.into_iter().map(quantize).collect())
}

pub fn clean_images(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if size < 16 {
        return Err(arg_err("image size", format!("{size} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| clean_image(&mut rng, size)).collect()
}

/// Adds unclipped Gaussian noise of standard deviation `sigma` to each image.
pub fn noisy_dataset(clean: &[Tensor], sigma: f64, seed: u64) -> Result<Dataset> {
    let normal = Normal::new(0.0, sigma).map_err(|_| arg_err("noise level", format!("{sigma} is invalid")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(clean.len());
    for c in clean {
        let noise = Tensor::from_fn(c.shape(), |_| normal.sample(&mut rng));
        samples.push(Sample { input: c.add(&noise)?, target: Target::Noise(noise) });
    }
    Ok(Dataset { task: Task::Denoising, num_classes: 0, samples })
}

/// Seed used for the noise of a given level, derived from the base seed.
pub fn noise_seed(seed: u64, level: u32) -> u64 {
    seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(level as u64 + 1))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_quantised() {
        let a = shapes_dataset(3, 32, 7).unwrap();
        let b = shapes_dataset(3, 32, 7).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert!(s.input.data().iter().all(|&v| (v * 255.0 - libm::round(v * 255.0)).abs() < 1e-9));
        }
        a.validate().unwrap();
        assert!(shapes_dataset(0, 64, 1).unwrap().is_empty());
    }

    #[test]
    fn noise_statistics() {
        let clean = clean_images(3, 64, 1).unwrap();
        let sigma = 25.0 / 255.0;
        let d = noisy_dataset(&clean, sigma, 2).unwrap();
        let vals: Vec<f64> = d
            .samples
            .iter()
            .flat_map(|s| match &s.target {
                Target::Noise(n) => n.data().to_vec(),
                _ => unreachable!(),
            })
            .collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / vals.len() as f64;
        assert!((libm::sqrt(var) / sigma - 1.0).abs() < 0.03);
        let back = d.samples[0].clean().unwrap();
        assert!(back.sub(&clean[0]).unwrap().max_abs() < 1e-12);
    }
}
