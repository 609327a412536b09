//! Dense row-major `f64` tensors and the per-layer forward/backward kernels
//! used by the ANN, the spiking runtime and flow-based fine-tuning.
//!
//! Activations use the `N x C x H x W` layout, convolution kernels
//! `Cout x Cin x Kh x Kw`. Nothing broadcasts implicitly: every binary
//! operation checks that shapes agree and reports the first dimension that
//! does not.

use alloc::{format, vec, vec::Vec};
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, shape_err, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(shape_err(
                "Tensor::new",
                format!("shape {shape:?} holds {expected} elements, data has {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let len = shape.iter().product();
        Self { shape: shape.to_vec(), data: vec![value; len] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let len: usize = shape.iter().product();
        Self { shape: shape.to_vec(), data: (0..len).map(&mut f).collect() }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as `N x C x H x W`.
    pub fn dims4(&self) -> Result<[usize; 4]> {
        match self.shape[..] {
            [n, c, h, w] => Ok([n, c, h, w]),
            _ => Err(shape_err("dims4", format!("expected rank 4, got shape {:?}", self.shape))),
        }
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape.len() != other.shape.len() {
            return Err(shape_err(op, format!("rank {} vs rank {}", self.shape.len(), other.shape.len())));
        }
        for (axis, (a, b)) in self.shape.iter().zip(&other.shape).enumerate() {
            if a != b {
                return Err(shape_err(op, format!("dimension {axis}: {a} vs {b}")));
            }
        }
        Ok(())
    }

    pub fn zip_map(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Tensor { shape: self.shape.clone(), data })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "sub", |a, b| a - b)
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, "mul", |a, b| a * b)
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        self.same_shape(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`
    pub fn axpy(&mut self, alpha: f64, other: &Tensor) -> Result<()> {
        self.same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, factor: f64) -> Tensor {
        self.map(|v| v * factor)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks rank-4 tensors with a batch dimension of 1 (or more) along `N`.
    pub fn stack_batch(items: &[&Tensor]) -> Result<Tensor> {
        let first = items.first().ok_or_else(|| arg_err("batch", "cannot stack zero tensors".into()))?;
        let [_, c, h, w] = first.dims4()?;
        let mut n = 0;
        let mut data = Vec::new();
        for t in items {
            let [tn, tc, th, tw] = t.dims4()?;
            if (tc, th, tw) != (c, h, w) {
                return Err(shape_err("stack_batch", format!("item C x H x W {tc}x{th}x{tw} vs {c}x{h}x{w}")));
            }
            n += tn;
            data.extend_from_slice(&t.data);
        }
        Tensor::new(vec![n, c, h, w], data)
    }

    /// Batch item `i` as a `1 x C x H x W` tensor.
    pub fn batch_item(&self, i: usize) -> Result<Tensor> {
        let [n, c, h, w] = self.dims4()?;
        if i >= n {
            return Err(shape_err("batch_item", format!("index {i} >= batch {n}")));
        }
        let plane = c * h * w;
        Tensor::new(vec![1, c, h, w], self.data[i * plane..(i + 1) * plane].to_vec())
    }
}

/// Zero padding applied before and after each spatial axis.
///
/// Odd kernels use the symmetric form; the 2x2 decoder convolutions need the
/// asymmetric "same" layout (nothing before, one row/column after).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Padding {
    pub before: usize,
    pub after: usize,
}

impl Padding {
    pub const fn symmetric(p: usize) -> Self {
        Self { before: p, after: p }
    }

    /// Padding that preserves spatial size at stride 1.
    pub const fn same(kernel: usize) -> Self {
        let total = kernel - 1;
        Self { before: total / 2, after: total - total / 2 }
    }
}

impl From<usize> for Padding {
    fn from(p: usize) -> Self {
        Padding::symmetric(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: Padding,
}

impl ConvParams {
    pub fn new(kernel: Tensor, bias: Tensor, stride: usize, padding: impl Into<Padding>) -> Result<Self> {
        let [cout, _, _, _] = kernel
            .dims4()
            .map_err(|_| shape_err("ConvParams", format!("kernel must be rank 4, got {:?}", kernel.shape())))?;
        if bias.rank() != 1 || bias.len() != cout {
            return Err(shape_err("ConvParams", format!("bias shape {:?} does not match Cout = {cout}", bias.shape())));
        }
        if stride == 0 {
            return Err(arg_err("stride", "must be positive".into()));
        }
        Ok(Self { kernel, bias, stride, padding: padding.into() })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    /// Output spatial size for an `h x w` input.
    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let (kh, kw) = self.kernel_hw();
        Ok((
            conv_out_len(h, kh, self.stride, self.padding, "height")?,
            conv_out_len(w, kw, self.stride, self.padding, "width")?,
        ))
    }
}

fn conv_out_len(len: usize, k: usize, stride: usize, pad: Padding, axis: &str) -> Result<usize> {
    let padded = len + pad.before + pad.after;
    if padded < k {
        return Err(shape_err("conv2d", format!("padded {axis} {padded} smaller than kernel extent {k}")));
    }
    Ok((padded - k) / stride + 1)
}

/// Output indices `o` in `[lo, hi)` for which `o * stride + k - pad` lands inside `[0, len)`.
#[inline]
fn valid_range(k: usize, pad: usize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if len + pad <= k { 0 } else { (len + pad - k).div_ceil(stride).min(out_len) };
    (lo, hi.max(lo))
}

fn check_conv_input(input: &Tensor, params: &ConvParams) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if dims[1] != params.in_channels() {
        return Err(shape_err("conv2d", format!("input channels {} vs kernel Cin {}", dims[1], params.in_channels())));
    }
    Ok(dims)
}

pub fn conv2d_forward(input: &Tensor, params: &ConvParams) -> Result<Tensor> {
    let [n, cin, h, w] = check_conv_input(input, params)?;
    let cout = params.out_channels();
    let (kh, kw) = params.kernel_hw();
    let (ho, wo) = params.output_hw(h, w)?;
    let (s, pb) = (params.stride, params.padding.before);
    let k = params.kernel.data();
    let bias = params.bias.data();
    let x = input.data();
    let mut out = vec![0.0; n * cout * ho * wo];

    for b in 0..n {
        for co in 0..cout {
            let out_plane = &mut out[(b * cout + co) * ho * wo..][..ho * wo];
            out_plane.fill(bias[co]);
            for ci in 0..cin {
                let in_plane = &x[(b * cin + ci) * h * w..][..h * w];
                for ki in 0..kh {
                    let (oh0, oh1) = valid_range(ki, pb, s, h, ho);
                    for kj in 0..kw {
                        let wt = k[((co * cin + ci) * kh + ki) * kw + kj];
                        let (ow0, ow1) = valid_range(kj, pb, s, w, wo);
                        if ow0 >= ow1 {
                            continue;
                        }
                        for oh in oh0..oh1 {
                            let ih = oh * s + ki - pb;
                            let orow = &mut out_plane[oh * wo..(oh + 1) * wo];
                            let irow = &in_plane[ih * w..(ih + 1) * w];
                            if s == 1 {
                                let start = ow0 + kj - pb;
                                for (o, &i) in orow[ow0..ow1].iter_mut().zip(&irow[start..start + (ow1 - ow0)]) {
                                    *o += wt * i;
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    orow[ow] += wt * irow[ow * s + kj - pb];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ho, wo], out)
}

/// Gradients of `sum(grad_out * conv2d_forward(input, params))`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads {
    pub input: Tensor,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_impl(input, params, grad_out, true)
}

/// Like [`conv2d_backward`] but skips the input gradient (returned as zeros of
/// shape `[0]`), for layers fed directly by the network input.
pub fn conv2d_backward_params(input: &Tensor, params: &ConvParams, grad_out: &Tensor) -> Result<ConvGrads> {
    conv2d_backward_impl(input, params, grad_out, false)
}

fn conv2d_backward_impl(input: &Tensor, params: &ConvParams, grad_out: &Tensor, want_input: bool) -> Result<ConvGrads> {
    let [n, cin, h, w] = check_conv_input(input, params)?;
    let cout = params.out_channels();
    let (kh, kw) = params.kernel_hw();
    let (ho, wo) = params.output_hw(h, w)?;
    let expected = [n, cout, ho, wo];
    if grad_out.shape() != expected {
        return Err(shape_err(
            "conv2d_backward",
            format!("grad_out shape {:?} vs forward output {:?}", grad_out.shape(), expected),
        ));
    }
    let (s, pb) = (params.stride, params.padding.before);
    let k = params.kernel.data();
    let x = input.data();
    let g = grad_out.data();
    let mut gi = if want_input { vec![0.0; x.len()] } else { Vec::new() };
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; cout];

    for b in 0..n {
        for co in 0..cout {
            let g_plane = &g[(b * cout + co) * ho * wo..][..ho * wo];
            gb[co] += g_plane.iter().sum::<f64>();
            for ci in 0..cin {
                let base = (b * cin + ci) * h * w;
                let in_plane = &x[base..base + h * w];
                for ki in 0..kh {
                    let (oh0, oh1) = valid_range(ki, pb, s, h, ho);
                    for kj in 0..kw {
                        let kidx = ((co * cin + ci) * kh + ki) * kw + kj;
                        let wt = k[kidx];
                        let (ow0, ow1) = valid_range(kj, pb, s, w, wo);
                        if ow0 >= ow1 {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oh in oh0..oh1 {
                            let ih = oh * s + ki - pb;
                            let grow = &g_plane[oh * wo..(oh + 1) * wo];
                            let irow = &in_plane[ih * w..(ih + 1) * w];
                            if s == 1 {
                                let start = ow0 + kj - pb;
                                let len = ow1 - ow0;
                                for (&gv, &iv) in grow[ow0..ow1].iter().zip(&irow[start..start + len]) {
                                    acc += gv * iv;
                                }
                                if want_input {
                                    let girow = &mut gi[base + ih * w..base + (ih + 1) * w];
                                    for (o, &gv) in girow[start..start + len].iter_mut().zip(&grow[ow0..ow1]) {
                                        *o += wt * gv;
                                    }
                                }
                            } else {
                                for ow in ow0..ow1 {
                                    let iw = ow * s + kj - pb;
                                    acc += grow[ow] * irow[iw];
                                    if want_input {
                                        gi[base + ih * w + iw] += wt * grow[ow];
                                    }
                                }
                            }
                        }
                        gk[kidx] += acc;
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if want_input { Tensor::new(vec![n, cin, h, w], gi)? } else { Tensor::zeros(&[0]) },
        kernel: Tensor::new(params.kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

fn pool_dims(input: &Tensor, window: usize) -> Result<[usize; 4]> {
    let dims = input.dims4()?;
    if window == 0 {
        return Err(arg_err("pool window", "must be positive".into()));
    }
    if dims[2] % window != 0 || dims[3] % window != 0 {
        return Err(shape_err(
            "avgpool2d",
            format!("spatial dims {}x{} not divisible by window {window}", dims[2], dims[3]),
        ));
    }
    Ok(dims)
}

pub fn avgpool2d_forward(input: &Tensor, window: usize) -> Result<Tensor> {
    let [n, c, h, w] = pool_dims(input, window)?;
    let (ho, wo) = (h / window, w / window);
    let inv = 1.0 / (window * window) as f64;
    let x = input.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for ih in 0..h {
            let row = &src[ih * w..(ih + 1) * w];
            let orow = &mut dst[(ih / window) * wo..][..wo];
            for (iw, &v) in row.iter().enumerate() {
                orow[iw / window] += v;
            }
        }
        for v in dst.iter_mut() {
            *v *= inv;
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Distributes each output gradient uniformly (`/ window^2`) over its window.
pub fn avgpool2d_backward(grad_out: &Tensor, window: usize) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    if window == 0 {
        return Err(arg_err("pool window", "must be positive".into()));
    }
    let (h, w) = (ho * window, wo * window);
    let inv = 1.0 / (window * window) as f64;
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * ho * wo..][..ho * wo];
        let dst = &mut out[p * h * w..][..h * w];
        for ih in 0..h {
            let srow = &src[(ih / window) * wo..][..wo];
            for (iw, d) in dst[ih * w..(ih + 1) * w].iter_mut().enumerate() {
                *d = srow[iw / window] * inv;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Nearest-neighbour 2x spatial replication.
pub fn upsample2x_forward(input: &Tensor) -> Result<Tensor> {
    let [n, c, h, w] = input.dims4()?;
    let (ho, wo) = (2 * h, 2 * w);
    let x = input.data();
    let mut out = vec![0.0; n * c * ho * wo];
    for p in 0..n * c {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oh in 0..ho {
            let srow = &src[(oh / 2) * w..][..w];
            for (ow, d) in dst[oh * wo..(oh + 1) * wo].iter_mut().enumerate() {
                *d = srow[ow / 2];
            }
        }
    }
    Tensor::new(vec![n, c, ho, wo], out)
}

/// Sums each 2x2 block of output gradients into its source position.
pub fn upsample2x_backward(grad_out: &Tensor) -> Result<Tensor> {
    let [n, c, ho, wo] = grad_out.dims4()?;
    if ho % 2 != 0 || wo % 2 != 0 {
        return Err(shape_err("upsample2x_backward", format!("odd gradient extent {ho}x{wo}")));
    }
    let (h, w) = (ho / 2, wo / 2);
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * h * w];
    for p in 0..n * c {
        let src = &g[p * ho * wo..][..ho * wo];
        let dst = &mut out[p * h * w..][..h * w];
        for oh in 0..ho {
            let drow = &mut dst[(oh / 2) * w..][..w];
            for (ow, &v) in src[oh * wo..(oh + 1) * wo].iter().enumerate() {
                drow[ow / 2] += v;
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let [na, ca, ha, wa] = a.dims4()?;
    let [nb, cb, hb, wb] = b.dims4()?;
    for (name, x, y) in [("N", na, nb), ("H", ha, hb), ("W", wa, wb)] {
        if x != y {
            return Err(shape_err("concat_channels", format!("{name}: {x} vs {y}")));
        }
    }
    let (pa, pb) = (ca * ha * wa, cb * hb * wb);
    let mut data = Vec::with_capacity(na * (pa + pb));
    for i in 0..na {
        data.extend_from_slice(&a.data()[i * pa..(i + 1) * pa]);
        data.extend_from_slice(&b.data()[i * pb..(i + 1) * pb]);
    }
    Tensor::new(vec![na, ca + cb, ha, wa], data)
}

/// Inverse of [`concat_channels`]: channels `[0, at)` and `[at, C)`.
pub fn split_channels(t: &Tensor, at: usize) -> Result<(Tensor, Tensor)> {
    let [n, c, h, w] = t.dims4()?;
    if at > c {
        return Err(shape_err("split_channels", format!("split point {at} > channels {c}")));
    }
    let (pa, pb) = (at * h * w, (c - at) * h * w);
    let mut a = Vec::with_capacity(n * pa);
    let mut b = Vec::with_capacity(n * pb);
    for i in 0..n {
        let item = &t.data()[i * (pa + pb)..(i + 1) * (pa + pb)];
        a.extend_from_slice(&item[..pa]);
        b.extend_from_slice(&item[pa..]);
    }
    Ok((Tensor::new(vec![n, at, h, w], a)?, Tensor::new(vec![n, c - at, h, w], b)?))
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    input.map(|v| v.max(0.0))
}

/// Passes `grad_out` where `input > 0`.
pub fn relu_backward(input: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    input.zip_map(grad_out, "relu_backward", |x, g| if x > 0.0 { g } else { 0.0 })
}

/// Indicator tensor of strictly positive entries.
pub fn positive_mask(t: &Tensor) -> Tensor {
    t.map(|v| if v > 0.0 { 1.0 } else { 0.0 })
}

/// Per-pixel index of the largest channel, flattened as `N x H x W`. Ties go
/// to the lowest index.
pub fn argmax_channels(t: &Tensor) -> Result<Vec<usize>> {
    let [n, c, h, w] = t.dims4()?;
    if c == 0 {
        return Err(shape_err("argmax_channels", "no channels".into()));
    }
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        let base = b * c * hw;
        for p in 0..hw {
            let mut best = 0;
            let mut best_v = d[base + p];
            for k in 1..c {
                let v = d[base + k * hw + p];
                if v > best_v {
                    best = k;
                    best_v = v;
                }
            }
            out.push(best);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_ties_go_low() {
        let x = Tensor::new(vec![1, 3, 1, 2], vec![1.0, 0.0, 1.0, 5.0, 0.5, 5.0]).unwrap();
        assert_eq!(argmax_channels(&x).unwrap(), vec![0, 1]);
    }

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn add_rejects_mismatch_without_broadcast() {
        let a = Tensor::zeros(&[1, 2, 2, 2]);
        let b = Tensor::zeros(&[1, 1, 2, 2]);
        let err = a.add(&b).unwrap_err();
        assert!(format!("{err}").contains("dimension 1"));
    }

    #[test]
    fn conv_zero_input_zero_output() {
        let x = Tensor::zeros(&[1, 1, 3, 3]);
        let p = ConvParams::new(Tensor::full(&[2, 1, 3, 3], 0.7), Tensor::zeros(&[2]), 1, 1).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_identity_kernel() {
        let x = t(&[1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(conv2d_forward(&x, &p).unwrap(), x);
    }

    #[test]
    fn conv_output_dims_follow_floor_formula() {
        let x = Tensor::zeros(&[1, 1, 7, 6]);
        let p = ConvParams::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 2, 1).unwrap();
        // floor((7 + 2 - 3) / 2) + 1 = 4, floor((6 + 2 - 3) / 2) + 1 = 3
        assert_eq!(conv2d_forward(&x, &p).unwrap().shape(), &[1, 1, 4, 3]);
    }

    #[test]
    fn conv_channel_mismatch_names_dimension() {
        let x = Tensor::zeros(&[1, 3, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[1, 2, 3, 3]), Tensor::zeros(&[1]), 1, 1).unwrap();
        let msg = format!("{}", conv2d_forward(&x, &p).unwrap_err());
        assert!(msg.contains("channels"), "{msg}");
    }

    #[test]
    fn conv_params_validate_bias() {
        assert!(ConvParams::new(Tensor::zeros(&[3, 1, 1, 1]), Tensor::zeros(&[2]), 1, 0).is_err());
        assert!(ConvParams::new(Tensor::zeros(&[3, 1, 1]), Tensor::zeros(&[3]), 1, 0).is_err());
    }

    #[test]
    fn conv_backward_zero_grad() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| i as f64 * 0.1);
        let p = ConvParams::new(Tensor::full(&[3, 2, 3, 3], 0.2), Tensor::zeros(&[3]), 1, 1).unwrap();
        let g = conv2d_backward(&x, &p, &Tensor::zeros(&[1, 3, 4, 4])).unwrap();
        assert_eq!(g.input.max_abs() + g.kernel.max_abs() + g.bias.max_abs(), 0.0);
    }

    #[test]
    fn conv_backward_identity_kernel_is_dot_product() {
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        let go = t(&[1, 1, 2, 2], &[0.5, -1., 2., 0.25]);
        let p = ConvParams::new(Tensor::full(&[1, 1, 1, 1], 1.0), Tensor::zeros(&[1]), 1, 0).unwrap();
        let g = conv2d_backward(&x, &p, &go).unwrap();
        assert_eq!(g.kernel.data()[0], 0.5 - 2.0 + 6.0 + 1.0);
        assert_eq!(g.input, go);
        assert_eq!(g.bias.data()[0], go.sum());
    }

    #[test]
    fn conv_backward_rejects_wrong_grad_shape() {
        let x = Tensor::zeros(&[1, 1, 4, 4]);
        let p = ConvParams::new(Tensor::zeros(&[1, 1, 3, 3]), Tensor::zeros(&[1]), 1, 0).unwrap();
        assert!(conv2d_backward(&x, &p, &Tensor::zeros(&[1, 1, 4, 4])).is_err());
    }

    #[test]
    fn same_padding_even_kernel_preserves_size() {
        let x = Tensor::from_fn(&[1, 1, 4, 4], |i| i as f64);
        let p = ConvParams::new(Tensor::full(&[1, 1, 2, 2], 1.0), Tensor::zeros(&[1]), 1, Padding::same(2)).unwrap();
        let y = conv2d_forward(&x, &p).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4]);
        // bottom-right corner only sees itself
        assert_eq!(y.data()[15], 15.0);
        assert_eq!(y.data()[0], 0.0 + 1.0 + 4.0 + 5.0);
    }

    #[test]
    fn avgpool_basic() {
        let c = Tensor::full(&[1, 2, 4, 4], 3.5);
        assert_eq!(avgpool2d_forward(&c, 2).unwrap(), Tensor::full(&[1, 2, 2, 2], 3.5));
        let x = t(&[1, 1, 2, 2], &[1., 2., 3., 4.]);
        assert_eq!(avgpool2d_forward(&x, 2).unwrap().data(), &[2.5]);
        assert!(avgpool2d_forward(&Tensor::zeros(&[1, 1, 3, 4]), 2).is_err());
        let g = avgpool2d_backward(&t(&[1, 1, 1, 1], &[4.0]), 2).unwrap();
        assert_eq!(g.data(), &[1.0; 4]);
    }

    #[test]
    fn upsample_basic() {
        let x = t(&[1, 1, 1, 1], &[1.5]);
        assert_eq!(upsample2x_forward(&x).unwrap(), Tensor::full(&[1, 1, 2, 2], 1.5));
        let g = upsample2x_backward(&Tensor::full(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(g.data(), &[4.0]);
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_fn(&[2, 2, 3, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 3, 3, 3], |i| -(i as f64));
        let c = concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 5, 3, 3]);
        let (a2, b2) = split_channels(&c, 2).unwrap();
        assert_eq!(a2, a);
        assert_eq!(b2, b);
        assert!(concat_channels(&a, &Tensor::zeros(&[2, 3, 3, 4])).is_err());
    }

    #[test]
    fn relu_cases() {
        let x = t(&[4], &[-2.0, -0.0, 0.5, 3.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 0.5, 3.0]);
        let g = relu_backward(&x, &Tensor::full(&[4], 2.0)).unwrap();
        assert_eq!(g.data(), &[0.0, 0.0, 2.0, 2.0]);
    }
}
