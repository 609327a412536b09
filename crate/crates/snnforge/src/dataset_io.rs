//! Datasets on disk.
//!
//! Segmentation: `images/<stem>.png|pgm` with matching `labels/<stem>.png`.
//! Denoising: `clean/<stem>.png|pgm` with noisy copies in
//! `noisy/sigma<level>/<stem>.snnt` (unclipped) or `.png`/`.pgm`.
//! A `dataset.json` next to them records the task and class count.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use snnforge_core::data::{Dataset, Sample, Target};
use snnforge_core::network::Task;

use crate::error::{CliError, Result};
use crate::{image_io, tensor_io};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub task: Task,
    pub num_classes: usize,
    pub count: usize,
    #[serde(default)]
    pub noise_levels: Vec<u32>,
}

pub const INFO_FILE: &str = "dataset.json";

fn create_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(CliError::io(format!("creating {}", p.display())))
}

fn stem(i: usize) -> String {
    format!("{i:05}")
}

pub fn noisy_dir(dir: &Path, level: u32) -> PathBuf {
    dir.join("noisy").join(format!("sigma{level}"))
}

fn write_info(dir: &Path, info: &DatasetInfo) -> Result<()> {
    let path = dir.join(INFO_FILE);
    let text = serde_json::to_string_pretty(info).expect("serialisable");
    fs::write(&path, text + "\n").map_err(CliError::io(format!("writing {}", path.display())))
}

/// Writes every file and returns the paths written, relative to `dir`.
pub fn write_segmentation(dir: &Path, ds: &Dataset) -> Result<Vec<PathBuf>> {
    create_dir(&dir.join("images"))?;
    create_dir(&dir.join("labels"))?;
    let mut written = Vec::new();
    for (i, s) in ds.samples.iter().enumerate() {
        let Target::Labels(m) = &s.target else {
            return Err(CliError::format(dir, "segmentation dataset with a non-label target"));
        };
        let img = PathBuf::from("images").join(format!("{}.png", stem(i)));
        let lab = PathBuf::from("labels").join(format!("{}.png", stem(i)));
        image_io::write_gray(&dir.join(&img), &s.input)?;
        image_io::write_labels(&dir.join(&lab), m)?;
        written.extend([img, lab]);
    }
    write_info(
        dir,
        &DatasetInfo { task: Task::Segmentation, num_classes: ds.num_classes, count: ds.len(), noise_levels: vec![] },
    )?;
    written.push(PathBuf::from(INFO_FILE));
    Ok(written)
}

/// `sets` pairs each noise level with the corresponding noisy dataset; all
/// share the same clean images.
pub fn write_denoising(dir: &Path, sets: &[(u32, Dataset)]) -> Result<Vec<PathBuf>> {
    create_dir(&dir.join("clean"))?;
    let mut written = Vec::new();
    let count = sets.first().map_or(0, |(_, d)| d.len());
    if let Some((_, first)) = sets.first() {
        for (i, s) in first.samples.iter().enumerate() {
            let rel = PathBuf::from("clean").join(format!("{}.png", stem(i)));
            image_io::write_gray(&dir.join(&rel), &s.clean()?)?;
            written.push(rel);
        }
    }
    for (level, ds) in sets {
        let nd = noisy_dir(dir, *level);
        create_dir(&nd)?;
        for (i, s) in ds.samples.iter().enumerate() {
            let rel = nd.strip_prefix(dir).expect("child").join(format!("{}.snnt", stem(i)));
            tensor_io::write(&dir.join(&rel), &s.input)?;
            written.push(rel);
        }
    }
    let info = DatasetInfo {
        task: Task::Denoising,
        num_classes: 0,
        count,
        noise_levels: sets.iter().map(|(l, _)| *l).collect(),
    };
    write_info(dir, &info)?;
    written.push(PathBuf::from(INFO_FILE));
    Ok(written)
}

fn is_image(p: &Path) -> bool {
    matches!(
        p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()).as_deref(),
        Some("png" | "pgm" | "ppm" | "pnm")
    )
}

/// Image files of a directory sorted by file name.
fn list(dir: &Path, accept: impl Fn(&Path) -> bool) -> Result<Vec<PathBuf>> {
    if !dir.is_dir() {
        return Err(CliError::missing(dir, "dataset directory not found; run gen-synthetic or set paths.data_dir"));
    }
    let mut files: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(CliError::io(format!("listing {}", dir.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && accept(p))
        .collect();
    files.sort();
    Ok(files)
}

fn file_stem(p: &Path) -> String {
    p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string()
}

fn find_with_stem(dir: &Path, stem: &str, exts: &[&str]) -> Option<PathBuf> {
    exts.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

pub fn read_info(dir: &Path) -> Result<Option<DatasetInfo>> {
    let path = dir.join(INFO_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(CliError::io(format!("reading {}", path.display())))?;
    serde_json::from_str(&text).map(Some).map_err(|e| CliError::format(&path, e.to_string()))
}

/// Loads a dataset. `num_classes` is used when the directory has no
/// `dataset.json`; `noise_level` picks the noisy copies for denoising.
pub fn load(dir: &Path, task: Task, num_classes: usize, noise_level: u32, limit: Option<usize>) -> Result<Dataset> {
    let info = read_info(dir)?;
    if let Some(i) = &info {
        if i.task != task {
            return Err(CliError::Config(vec![format!(
                "dataset {} holds {:?} data but the task is {:?}",
                dir.display(),
                i.task,
                task
            )]));
        }
    }
    let take = limit.unwrap_or(usize::MAX);
    let mut samples = Vec::new();
    match task {
        Task::Segmentation => {
            let labels_dir = dir.join("labels");
            for img in list(&dir.join("images"), is_image)?.into_iter().take(take) {
                let s = file_stem(&img);
                let lab = find_with_stem(&labels_dir, &s, &["png"])
                    .ok_or_else(|| CliError::missing(labels_dir.join(format!("{s}.png")), "label map for image"))?;
                samples.push(Sample {
                    input: image_io::read_image(&img)?,
                    target: Target::Labels(image_io::read_labels(&lab)?),
                });
            }
        }
        Task::Denoising => {
            let nd = noisy_dir(dir, noise_level);
            for clean_path in list(&dir.join("clean"), is_image)?.into_iter().take(take) {
                let s = file_stem(&clean_path);
                let clean = image_io::read_image(&clean_path)?;
                let noisy_path = find_with_stem(&nd, &s, &["snnt", "png", "pgm"])
                    .ok_or_else(|| CliError::missing(nd.join(format!("{s}.snnt")), "noisy copy of clean image"))?;
                let noisy = if noisy_path.extension().is_some_and(|e| e == "snnt") {
                    tensor_io::read(&noisy_path)?
                } else {
                    image_io::read_image(&noisy_path)?
                };
                let noise = noisy.sub(&clean)?;
                samples.push(Sample { input: noisy, target: Target::Noise(noise) });
            }
        }
    }
    let num_classes = info.map_or(num_classes, |i| i.num_classes);
    let ds = Dataset { task, num_classes, samples };
    ds.validate()?;
    Ok(ds)
}
