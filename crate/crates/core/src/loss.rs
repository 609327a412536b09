//! Losses and their gradients with respect to the prediction.

use alloc::{format, vec};

use crate::error::{shape_err, Error, Result};
use crate::tensor::Tensor;

/// Mean over pixels of `-log softmax(logits)[label]`.
///
/// `logits` is `N x M x H x W`; `labels` is the flattened `N x H x W` map.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<(f64, Tensor)> {
    let [n, m, h, w] = logits.dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(shape_err("softmax_cross_entropy", format!("{} labels for {n}x{h}x{w} pixels", labels.len())));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= m) {
        return Err(Error::LabelOutOfRange { label: l, num_classes: m });
    }
    let x = logits.data();
    let mut grad = vec![0.0; x.len()];
    let pixels = (n * hw) as f64;
    let mut total = 0.0;
    let mut probs = vec![0.0; m];
    for b in 0..n {
        let base = b * m * hw;
        for p in 0..hw {
            let mut max = f64::NEG_INFINITY;
            for c in 0..m {
                max = max.max(x[base + c * hw + p]);
            }
            let mut z = 0.0;
            for (c, pr) in probs.iter_mut().enumerate() {
                *pr = libm::exp(x[base + c * hw + p] - max);
                z += *pr;
            }
            let label = labels[b * hw + p];
            total += libm::log(z) - (x[base + label * hw + p] - max);
            for (c, pr) in probs.iter().enumerate() {
                let onehot = if c == label { 1.0 } else { 0.0 };
                grad[base + c * hw + p] = (pr / z - onehot) / pixels;
            }
        }
    }
    Ok((total / pixels, Tensor::new(logits.shape().to_vec(), grad)?))
}

/// Mean absolute error; the subgradient at zero is zero.
pub fn mean_absolute_error(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.same_shape(target, "mean_absolute_error")?;
    let len = pred.len() as f64;
    let mut loss = 0.0;
    let grad = pred.zip_map(target, "mean_absolute_error", |p, t| {
        let d = p - t;
        if d > 0.0 {
            1.0 / len
        } else if d < 0.0 {
            -1.0 / len
        } else {
            0.0
        }
    })?;
    for (p, t) in pred.data().iter().zip(target.data()) {
        loss += (p - t).abs();
    }
    Ok((loss / len, grad))
}

/// `mean(0.5 * (pred - target)^2)`.
pub fn half_squared_error(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.same_shape(target, "half_squared_error")?;
    let len = pred.len() as f64;
    let loss = pred.data().iter().zip(target.data()).map(|(p, t)| 0.5 * (p - t) * (p - t)).sum::<f64>() / len;
    let grad = pred.zip_map(target, "half_squared_error", |p, t| (p - t) / len)?;
    Ok((loss, grad))
}
