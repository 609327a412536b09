//! Segmentation and image-quality metrics.

use alloc::{format, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::data::LabelMap;
use crate::error::{arg_err, shape_err, Error, Result};
use crate::tensor::Tensor;

/// Returned by [`psnr`] for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SegScores {
    /// Foreground (any non-zero label) vs background.
    pub f1: f64,
    pub js: f64,
    pub acc: f64,
    /// Mean per-class IoU over classes present in prediction or truth.
    pub miou: f64,
}

/// Pixel confusion counts, rows are truth, columns prediction.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Confusion {
    pub num_classes: usize,
    pub counts: Vec<u64>,
}

impl Confusion {
    pub fn new(num_classes: usize) -> Self {
        Self { num_classes, counts: vec![0; num_classes * num_classes] }
    }

    pub fn add(&mut self, pred: &LabelMap, truth: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(shape_err(
                "seg_scores",
                format!("prediction {}x{} vs truth {}x{}", pred.height, pred.width, truth.height, truth.width),
            ));
        }
        let m = self.num_classes;
        for (&p, &t) in pred.labels.iter().zip(&truth.labels) {
            if p >= m || t >= m {
                return Err(Error::LabelOutOfRange { label: p.max(t), num_classes: m });
            }
            self.counts[t * m + p] += 1;
        }
        Ok(())
    }

    pub fn scores(&self) -> SegScores {
        let m = self.num_classes;
        let at = |t: usize, p: usize| self.counts[t * m + p] as f64;
        let total: f64 = self.counts.iter().map(|&c| c as f64).sum();
        let correct: f64 = (0..m).map(|k| at(k, k)).sum();
        let (mut tp, mut fp, mut fn_) = (0.0, 0.0, 0.0);
        for t in 0..m {
            for p in 0..m {
                match (t != 0, p != 0) {
                    (true, true) => tp += at(t, p),
                    (false, true) => fp += at(t, p),
                    (true, false) => fn_ += at(t, p),
                    (false, false) => {}
                }
            }
        }
        // With no foreground anywhere, prediction and truth agree perfectly.
        let ratio = |num: f64, den: f64| if den == 0.0 { 1.0 } else { num / den };
        let mut iou_sum = 0.0;
        let mut present = 0;
        for k in 0..m {
            let inter = at(k, k);
            let row: f64 = (0..m).map(|p| at(k, p)).sum();
            let col: f64 = (0..m).map(|t| at(t, k)).sum();
            let union = row + col - inter;
            if union > 0.0 {
                iou_sum += inter / union;
                present += 1;
            }
        }
        SegScores {
            f1: ratio(2.0 * tp, 2.0 * tp + fp + fn_),
            js: ratio(tp, tp + fp + fn_),
            acc: ratio(correct, total),
            miou: if present == 0 { 1.0 } else { iou_sum / present as f64 },
        }
    }
}

pub fn seg_scores(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<SegScores> {
    let mut c = Confusion::new(num_classes);
    c.add(pred, truth)?;
    Ok(c.scores())
}

/// Scores over a whole set, from the pooled confusion matrix.
pub fn seg_scores_many(preds: &[LabelMap], truths: &[LabelMap], num_classes: usize) -> Result<SegScores> {
    if preds.len() != truths.len() {
        return Err(shape_err("seg_scores", format!("{} predictions for {} maps", preds.len(), truths.len())));
    }
    let mut c = Confusion::new(num_classes);
    for (p, t) in preds.iter().zip(truths) {
        c.add(p, t)?;
    }
    Ok(c.scores())
}

pub fn psnr(a: &Tensor, b: &Tensor, peak: f64) -> Result<f64> {
    a.same_shape(b, "psnr")?;
    if a.is_empty() {
        return Err(arg_err("psnr", "empty images".into()));
    }
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * libm::log10(peak * peak / mse)).min(PSNR_CAP_DB))
}

/// Pearson correlation; zero when either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err("pearson", format!("{} vs {} values", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    if saa == 0.0 || sbb == 0.0 {
        return Ok(0.0);
    }
    Ok(sab / libm::sqrt(saa * sbb))
}

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        Self { window: SSIM_WINDOW, sigma: SSIM_SIGMA, k1: 0.01, k2: 0.03, peak: 1.0 }
    }
}

/// Normalised 1-D Gaussian; the 2-D window is its outer product.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> =
        (0..size).map(|i| libm::exp(-((i as f64 - c) * (i as f64 - c)) / (2.0 * sigma * sigma))).collect();
    let s: f64 = g.iter().sum();
    g.into_iter().map(|v| v / s).collect()
}

/// Valid-mode separable weighted filter of one `h x w` plane.
fn filter(plane: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM over all valid window positions of every plane (`N x C`).
pub fn ssim(a: &Tensor, b: &Tensor, p: &SsimParams) -> Result<f64> {
    a.same_shape(b, "ssim")?;
    let [n, c, h, w] = a.dims4()?;
    if h < p.window || w < p.window || p.window == 0 {
        return Err(arg_err("ssim", format!("{h}x{w} image is smaller than the {} window", p.window)));
    }
    let g = gaussian_window(p.window, p.sigma);
    let c1 = (p.k1 * p.peak) * (p.k1 * p.peak);
    let c2 = (p.k2 * p.peak) * (p.k2 * p.peak);
    let hw = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for plane in 0..n * c {
        let x = &a.data()[plane * hw..][..hw];
        let y = &b.data()[plane * hw..][..hw];
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y).map(|(u, v)| u * v).collect();
        let (mx, my) = (filter(x, h, w, &g), filter(y, h, w, &g));
        let (sxx, syy, sxy) = (filter(&xx, h, w, &g), filter(&yy, h, w, &g), filter(&xy, h, w, &g));
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(labels: &[usize]) -> LabelMap {
        LabelMap::new(2, 2, labels.to_vec()).unwrap()
    }

    #[test]
    fn hand_counted_binary_case() {
        let s = seg_scores(&map(&[0, 1, 1, 1]), &map(&[0, 0, 1, 1]), 2).unwrap();
        assert!((s.f1 - 0.8).abs() < 1e-12);
        assert!((s.js - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.acc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_opposite() {
        let s = seg_scores(&map(&[0, 1, 2, 1]), &map(&[0, 1, 2, 1]), 3).unwrap();
        assert_eq!((s.f1, s.js, s.acc, s.miou), (1.0, 1.0, 1.0, 1.0));
        let s = seg_scores(&map(&[0; 4]), &map(&[1; 4]), 2).unwrap();
        assert_eq!((s.f1, s.acc), (0.0, 0.0));
        assert!(seg_scores(&map(&[0, 0, 0, 3]), &map(&[0; 4]), 3).is_err());
    }

    #[test]
    fn psnr_cases() {
        let a = Tensor::full(&[1, 1, 4, 4], 0.5);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP_DB);
        let b = a.map(|v| v + 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn ssim_identity_and_negation() {
        let sign = |i: usize| if (i / 11 + i % 11) % 2 == 0 { 1.0 } else { -1.0 };
        let a = Tensor::from_fn(&[1, 1, 11, 11], |i| 0.5 + 0.3 * sign(i));
        assert!((ssim(&a, &a, &SsimParams::default()).unwrap() - 1.0).abs() < 1e-12);
        let neg = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &neg, &SsimParams::default()).unwrap() < 0.0);
        assert!(ssim(&Tensor::zeros(&[1, 1, 5, 5]), &Tensor::zeros(&[1, 1, 5, 5]), &SsimParams::default()).is_err());
    }
}
