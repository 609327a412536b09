//! 8/16-bit PNG and PGM/PPM images as `1 x C x H x W` tensors in `[0, 1]`,
//! and single-channel PNG label maps holding class ids.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageReader};
use snnforge_core::data::LabelMap;
use snnforge_core::tensor::Tensor;

use crate::error::{CliError, Result};

fn open(path: &Path) -> Result<DynamicImage> {
    if !path.exists() {
        return Err(CliError::missing(path, "image not found"));
    }
    ImageReader::open(path)
        .map_err(CliError::io(format!("opening {}", path.display())))?
        .with_guessed_format()
        .map_err(CliError::io(format!("reading {}", path.display())))?
        .decode()
        .map_err(|e| CliError::format(path, e.to_string()))
}

/// Grayscale images give one channel, anything else three (alpha dropped).
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = open(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let color = img.color();
    let (channels, data): (usize, Vec<f64>) = if !color.has_color() {
        if color.bytes_per_pixel() / color.channel_count() as u8 > 1 {
            (1, img.to_luma16().into_raw().into_iter().map(|v| v as f64 / 65535.0).collect())
        } else {
            (1, img.to_luma8().into_raw().into_iter().map(|v| v as f64 / 255.0).collect())
        }
    } else {
        let rgb = img.to_rgb8().into_raw();
        let mut planar = vec![0.0; 3 * h * w];
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                planar[c * h * w + i] = px[c] as f64 / 255.0;
            }
        }
        (3, planar)
    };
    Ok(Tensor::new(vec![1, channels, h, w], data)?)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Writes the first channel of a `1 x C x H x W` tensor as 8-bit grayscale.
pub fn write_gray(path: &Path, t: &Tensor) -> Result<()> {
    let [_, _, h, w] = t.dims4()?;
    let pixels: Vec<u8> = t.data()[..h * w].iter().map(|&v| to_u8(v)).collect();
    save(path, GrayImage::from_raw(w as u32, h as u32, pixels).expect("buffer matches size"))
}

fn save(path: &Path, img: GrayImage) -> Result<()> {
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => CliError::Io { context: format!("writing {}", path.display()), source: io },
        other => CliError::format(path, other.to_string()),
    })
}

pub fn write_labels(path: &Path, m: &LabelMap) -> Result<()> {
    let pixels = m
        .labels
        .iter()
        .map(|&l| u8::try_from(l).map_err(|_| CliError::format(path, format!("label {l} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    save(path, GrayImage::from_raw(m.width as u32, m.height as u32, pixels).expect("buffer matches size"))
}

pub fn read_labels(path: &Path) -> Result<LabelMap> {
    let img = open(path)?;
    if img.color().has_color() {
        return Err(CliError::format(path, "label maps must be single-channel"));
    }
    let g = img.to_luma8();
    let (w, h) = (g.width() as usize, g.height() as usize);
    Ok(LabelMap::new(h, w, g.into_raw().into_iter().map(usize::from).collect())?)
}
