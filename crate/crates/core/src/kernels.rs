//! Forward and gradient kernels for every layer the networks need.
//!
//! All kernels are pure: inputs are immutable, results (including updated
//! batch-norm running statistics) are returned as new values. Convolution and
//! dense products go through an im2col / GEMM path; the GEMM core is
//! `matrixmultiply::sgemm`.

use crate::tensor::{Tensor, TensorError, TensorResult};

/// Gradient bundle returned by layer backward passes: gradient with respect
/// to the layer input plus named parameter gradients matching each
/// parameter's shape.
#[derive(Debug)]
pub struct LayerGrads {
    pub grad_input: Tensor,
    pub grad_params: Vec<(&'static str, Tensor)>,
}

impl LayerGrads {
    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.grad_params.iter().find(|(n, _)| *n == name).map(|(_, t)| t)
    }
}

/// Per-channel batch-norm parameters and running statistics.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f32,
    pub eps: f32,
}

pub const BN_DEFAULT_MOMENTUM: f32 = 0.9;
pub const BN_DEFAULT_EPS: f32 = 1e-5;

impl BatchNormState {
    pub fn new(channels: usize, momentum: f32, eps: f32) -> TensorResult<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(TensorError::InvalidArg {
                op: "batchnorm",
                msg: format!("momentum {momentum} outside (0,1)"),
            });
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArg {
                op: "batchnorm",
                msg: format!("eps {eps} must be positive"),
            });
        }
        Ok(BatchNormState {
            gamma: Tensor::filled(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], 1.0),
            momentum,
            eps,
        })
    }

    pub fn with_defaults(channels: usize) -> Self {
        Self::new(channels, BN_DEFAULT_MOMENTUM, BN_DEFAULT_EPS).expect("default bn params valid")
    }

    pub fn channels(&self) -> usize {
        self.gamma.numel()
    }

    fn check(&self, op: &'static str, channels: usize) -> TensorResult<()> {
        for (axis, t) in [
            ("gamma", &self.gamma),
            ("beta", &self.beta),
            ("running_mean", &self.running_mean),
            ("running_var", &self.running_var),
        ] {
            if t.numel() != channels {
                return Err(TensorError::DimMismatch {
                    op,
                    axis,
                    expected: channels,
                    actual: t.numel(),
                });
            }
        }
        Ok(())
    }
}

/// Execution mode: training uses batch statistics and records what backward
/// needs; inference uses running statistics only.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

// ---------------------------------------------------------------------------
// GEMM wrappers
// ---------------------------------------------------------------------------

/// c (m x n, row-major) = a (m x k) * b (k x n) + beta * c.
fn gemm_nn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c (m x n, row-major) = a (m x k) * b^T, with b stored n x k row-major.
fn gemm_nt(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), k as isize, 1,
            b.as_ptr(), 1, k as isize,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

/// c (m x n, row-major) = a^T * b, with a stored k x m row-major.
fn gemm_tn(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m, k, n, 1.0,
            a.as_ptr(), 1, m as isize,
            b.as_ptr(), n as isize, 1,
            beta,
            c.as_mut_ptr(), n as isize, 1,
        );
    }
}

// ---------------------------------------------------------------------------
// Convolution
// ---------------------------------------------------------------------------

fn conv_out_dim(op: &'static str, input: usize, k: usize, stride: usize, pad: usize, other: usize) -> TensorResult<usize> {
    let padded = input + 2 * pad;
    if padded < k || (padded - k) % stride != 0 {
        return Err(TensorError::NonIntegralOutput { op, input, input2: other, k, stride, pad });
    }
    Ok((padded - k) / stride + 1)
}

/// Gather the receptive field of every output position of image `n` into a
/// `(h_out*w_out) x (in_c*kh*kw)` row-major patch matrix.
#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [f32],
) {
    let kcols = in_c * kh * kw;
    debug_assert_eq!(cols.len(), h_out * w_out * kcols);
    cols.fill(0.0);
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = (oh * w_out + ow) * kcols;
            let ih0 = (oh * stride) as isize - pad as isize;
            let iw0 = (ow * stride) as isize - pad as isize;
            for ic in 0..in_c {
                let chan = ic * h * w;
                for dh in 0..kh {
                    let ih = ih0 + dh as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = chan + ih as usize * w;
                    let dst = row + (ic * kh + dh) * kw;
                    for dw in 0..kw {
                        let iw = iw0 + dw as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        cols[dst + dw] = x[src_row + iw as usize];
                    }
                }
            }
        }
    }
}

/// Scatter-add a patch-matrix gradient back onto the input image.
#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    in_c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    grad_x: &mut [f32],
) {
    let kcols = in_c * kh * kw;
    for oh in 0..h_out {
        for ow in 0..w_out {
            let row = (oh * w_out + ow) * kcols;
            let ih0 = (oh * stride) as isize - pad as isize;
            let iw0 = (ow * stride) as isize - pad as isize;
            for ic in 0..in_c {
                let chan = ic * h * w;
                for dh in 0..kh {
                    let ih = ih0 + dh as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let dst_row = chan + ih as usize * w;
                    let src = row + (ic * kh + dh) * kw;
                    for dw in 0..kw {
                        let iw = iw0 + dw as isize;
                        if iw < 0 || iw >= w as isize {
                            continue;
                        }
                        grad_x[dst_row + iw as usize] += cols[src + dw];
                    }
                }
            }
        }
    }
}

fn conv_check_shapes(
    op: &'static str,
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> TensorResult<(usize, usize, usize, usize, usize, usize, usize, usize, usize)> {
    let (n, in_c, h, wd) = x.as_nchw()?;
    let [out_c, w_in_c, kh, kw] = match w.shape() {
        [a, b, c, d] => [*a, *b, *c, *d],
        other => {
            return Err(TensorError::InvalidArg {
                op,
                msg: format!("kernel must be rank 4 OIHW, got {other:?}"),
            })
        }
    };
    if w_in_c != in_c {
        return Err(TensorError::DimMismatch { op, axis: "input channels", expected: w_in_c, actual: in_c });
    }
    if b.numel() != out_c {
        return Err(TensorError::DimMismatch { op, axis: "bias channels", expected: out_c, actual: b.numel() });
    }
    if stride == 0 {
        return Err(TensorError::InvalidArg { op, msg: "stride must be positive".into() });
    }
    let h_out = conv_out_dim(op, h, kh, stride, pad, wd)?;
    let w_out = conv_out_dim(op, wd, kw, stride, pad, h)?;
    Ok((n, in_c, h, wd, out_c, kh, kw, h_out, w_out))
}

/// 2-D cross-correlation with bias over an NCHW batch (zero padding).
pub fn conv2d(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> TensorResult<Tensor> {
    let (n, in_c, h, wd, out_c, kh, kw, h_out, w_out) =
        conv_check_shapes("conv2d", x, w, b, stride, pad)?;
    let kcols = in_c * kh * kw;
    let spatial = h_out * w_out;
    let mut out = vec![0.0f32; n * out_c * spatial];
    let mut cols = vec![0.0f32; spatial * kcols];
    let img_len = in_c * h * wd;
    for img in 0..n {
        im2col(&x.data()[img * img_len..(img + 1) * img_len], in_c, h, wd, kh, kw, stride, pad, h_out, w_out, &mut cols);
        // out_img (out_c x spatial) = w (out_c x kcols) * cols^T
        let out_img = &mut out[img * out_c * spatial..(img + 1) * out_c * spatial];
        unsafe {
            matrixmultiply::sgemm(
                out_c, kcols, spatial, 1.0,
                w.data().as_ptr(), kcols as isize, 1,
                cols.as_ptr(), 1, kcols as isize,
                0.0,
                out_img.as_mut_ptr(), spatial as isize, 1,
            );
        }
        for oc in 0..out_c {
            let bias = b.data()[oc];
            for v in &mut out_img[oc * spatial..(oc + 1) * spatial] {
                *v += bias;
            }
        }
    }
    let out = Tensor::new(vec![n, out_c, h_out, w_out], out)?;
    if !out.all_finite() {
        return Err(TensorError::NonFinite { op: "conv2d" });
    }
    Ok(out)
}

/// Exact gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    x: &Tensor,
    w: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> TensorResult<LayerGrads> {
    let bias_placeholder = Tensor::zeros(&[w.shape()[0]]);
    let (n, in_c, h, wd, out_c, kh, kw, h_out, w_out) =
        conv_check_shapes("conv2d_backward", x, w, &bias_placeholder, stride, pad)?;
    let expected = [n, out_c, h_out, w_out];
    if grad_out.shape() != expected {
        return Err(TensorError::InvalidArg {
            op: "conv2d_backward",
            msg: format!("upstream gradient shape {:?}, expected {:?}", grad_out.shape(), expected),
        });
    }
    let kcols = in_c * kh * kw;
    let spatial = h_out * w_out;
    let img_len = in_c * h * wd;

    let mut grad_x = vec![0.0f32; x.numel()];
    let mut grad_w = vec![0.0f32; w.numel()];
    let mut grad_b = vec![0.0f32; out_c];
    let mut cols = vec![0.0f32; spatial * kcols];
    let mut grad_cols = vec![0.0f32; spatial * kcols];

    for img in 0..n {
        let gy = &grad_out.data()[img * out_c * spatial..(img + 1) * out_c * spatial];
        im2col(&x.data()[img * img_len..(img + 1) * img_len], in_c, h, wd, kh, kw, stride, pad, h_out, w_out, &mut cols);
        // grad_w (out_c x kcols) += gy (out_c x spatial) * cols (spatial x kcols)
        gemm_nn(out_c, spatial, kcols, gy, &cols, 1.0, &mut grad_w);
        // grad_cols (spatial x kcols) = gy^T (spatial x out_c) * w (out_c x kcols)
        gemm_tn(spatial, out_c, kcols, gy, w.data(), 0.0, &mut grad_cols);
        col2im(&grad_cols, in_c, h, wd, kh, kw, stride, pad, h_out, w_out, &mut grad_x[img * img_len..(img + 1) * img_len]);
        for oc in 0..out_c {
            let mut acc = 0.0f32;
            for &g in &gy[oc * spatial..(oc + 1) * spatial] {
                acc += g;
            }
            grad_b[oc] += acc;
        }
    }

    Ok(LayerGrads {
        grad_input: Tensor::new(x.shape().to_vec(), grad_x)?,
        grad_params: vec![
            ("w", Tensor::new(w.shape().to_vec(), grad_w)?),
            ("b", Tensor::new(vec![out_c], grad_b)?),
        ],
    })
}

// ---------------------------------------------------------------------------
// Batch normalization
// ---------------------------------------------------------------------------

/// Values saved by a train-mode forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct BnCache {
    pub x_hat: Tensor,
    pub inv_std: Vec<f32>,
}

pub struct BnTrainOutput {
    pub y: Tensor,
    pub updated: BatchNormState,
    pub cache: BnCache,
}

fn bn_dims(op: &'static str, x: &Tensor, state: &BatchNormState) -> TensorResult<(usize, usize, usize)> {
    let (n, c, h, w) = x.as_nchw()?;
    if state.channels() != c {
        return Err(TensorError::DimMismatch { op, axis: "channels", expected: state.channels(), actual: c });
    }
    state.check(op, c)?;
    Ok((n, c, h * w))
}

/// Train-mode batch norm: normalize with batch statistics, return the
/// updated running statistics (`running <- momentum*running + (1-m)*batch`).
pub fn batchnorm_train(x: &Tensor, state: &BatchNormState) -> TensorResult<BnTrainOutput> {
    let (n, c, hw) = bn_dims("batchnorm", x, state)?;
    let m = n * hw;
    if m < 2 {
        return Err(TensorError::InvalidArg {
            op: "batchnorm",
            msg: format!("train mode needs batch*H*W >= 2, got {m}"),
        });
    }
    let inv_m = 1.0 / m as f32;
    let mut mean = vec![0.0f32; c];
    let mut var = vec![0.0f32; c];
    let xd = x.data();
    let chan_stride = c * hw;
    for ch in 0..c {
        let mut acc = 0.0f32;
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for &v in &xd[base..base + hw] {
                acc += v;
            }
        }
        let mu = acc * inv_m;
        let mut vacc = 0.0f32;
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for &v in &xd[base..base + hw] {
                let d = v - mu;
                vacc += d * d;
            }
        }
        mean[ch] = mu;
        var[ch] = vacc * inv_m;
    }

    let mut x_hat = vec![0.0f32; x.numel()];
    let mut y = vec![0.0f32; x.numel()];
    let mut inv_std = vec![0.0f32; c];
    for ch in 0..c {
        let istd = 1.0 / (var[ch] + state.eps).sqrt();
        inv_std[ch] = istd;
        let g = state.gamma.data()[ch];
        let bt = state.beta.data()[ch];
        let mu = mean[ch];
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for i in base..base + hw {
                let xh = (xd[i] - mu) * istd;
                x_hat[i] = xh;
                y[i] = g * xh + bt;
            }
        }
    }

    let mut updated = state.clone();
    for ch in 0..c {
        let rm = updated.running_mean.data()[ch];
        let rv = updated.running_var.data()[ch];
        updated.running_mean.data_mut()[ch] = state.momentum * rm + (1.0 - state.momentum) * mean[ch];
        updated.running_var.data_mut()[ch] = state.momentum * rv + (1.0 - state.momentum) * var[ch];
    }

    let y = Tensor::new(x.shape().to_vec(), y)?;
    if !y.all_finite() {
        return Err(TensorError::NonFinite { op: "batchnorm" });
    }
    Ok(BnTrainOutput {
        y,
        updated,
        cache: BnCache { x_hat: Tensor::new(x.shape().to_vec(), x_hat)?, inv_std },
    })
}

/// Inference-mode batch norm using running statistics only.
pub fn batchnorm_infer(x: &Tensor, state: &BatchNormState) -> TensorResult<Tensor> {
    let (n, c, hw) = bn_dims("batchnorm", x, state)?;
    let mut y = vec![0.0f32; x.numel()];
    let xd = x.data();
    let chan_stride = c * hw;
    for ch in 0..c {
        let istd = 1.0 / (state.running_var.data()[ch] + state.eps).sqrt();
        let g = state.gamma.data()[ch];
        let bt = state.beta.data()[ch];
        let mu = state.running_mean.data()[ch];
        // Fold into a single scale/shift per channel.
        let scale = g * istd;
        let shift = bt - mu * scale;
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for i in base..base + hw {
                y[i] = xd[i] * scale + shift;
            }
        }
    }
    let y = Tensor::new(x.shape().to_vec(), y)?;
    if !y.all_finite() {
        return Err(TensorError::NonFinite { op: "batchnorm" });
    }
    Ok(y)
}

/// Train-mode batch-norm gradients for input, gamma and beta.
pub fn batchnorm_backward(cache: &BnCache, gamma: &Tensor, grad_out: &Tensor) -> TensorResult<LayerGrads> {
    let (n, c, h, w) = cache.x_hat.as_nchw()?;
    let hw = h * w;
    if grad_out.shape() != cache.x_hat.shape() {
        return Err(TensorError::InvalidArg {
            op: "batchnorm_backward",
            msg: format!("upstream shape {:?} vs cached {:?}", grad_out.shape(), cache.x_hat.shape()),
        });
    }
    let m = (n * hw) as f32;
    let xh = cache.x_hat.data();
    let gy = grad_out.data();
    let chan_stride = c * hw;

    let mut grad_gamma = vec![0.0f32; c];
    let mut grad_beta = vec![0.0f32; c];
    let mut grad_x = vec![0.0f32; cache.x_hat.numel()];
    for ch in 0..c {
        let mut sum_gy = 0.0f32;
        let mut sum_gy_xh = 0.0f32;
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for i in base..base + hw {
                sum_gy += gy[i];
                sum_gy_xh += gy[i] * xh[i];
            }
        }
        grad_beta[ch] = sum_gy;
        grad_gamma[ch] = sum_gy_xh;
        let scale = gamma.data()[ch] * cache.inv_std[ch];
        let mean_gy = sum_gy / m;
        let mean_gy_xh = sum_gy_xh / m;
        for img in 0..n {
            let base = img * chan_stride + ch * hw;
            for i in base..base + hw {
                grad_x[i] = scale * (gy[i] - mean_gy - xh[i] * mean_gy_xh);
            }
        }
    }

    Ok(LayerGrads {
        grad_input: Tensor::new(cache.x_hat.shape().to_vec(), grad_x)?,
        grad_params: vec![
            ("gamma", Tensor::new(vec![c], grad_gamma)?),
            ("beta", Tensor::new(vec![c], grad_beta)?),
        ],
    })
}

// ---------------------------------------------------------------------------
// ReLU
// ---------------------------------------------------------------------------

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("relu preserves shape")
}

/// ReLU gradient: pass where `x > 0`, zero elsewhere (the subgradient at 0
/// is taken as 0).
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> TensorResult<Tensor> {
    if x.shape() != grad_out.shape() {
        return Err(TensorError::InvalidArg {
            op: "relu_backward",
            msg: format!("upstream shape {:?} vs input {:?}", grad_out.shape(), x.shape()),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

// ---------------------------------------------------------------------------
// Pooling
// ---------------------------------------------------------------------------

/// Window maximum over an NCHW batch. Also returns the flat input index of
/// each window's argmax (first occurrence in row-major window order), which
/// the backward pass routes gradient through.
pub fn maxpool2d_with_indices(x: &Tensor, k: usize, stride: usize) -> TensorResult<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.as_nchw()?;
    if k == 0 || stride == 0 {
        return Err(TensorError::InvalidArg { op: "maxpool2d", msg: "k and stride must be positive".into() });
    }
    let h_out = conv_out_dim("maxpool2d", h, k, stride, 0, w)?;
    let w_out = conv_out_dim("maxpool2d", w, k, stride, 0, h)?;
    let mut out = vec![0.0f32; n * c * h_out * w_out];
    let mut idx = vec![0usize; out.len()];
    let xd = x.data();
    let mut o = 0;
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * h * w;
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let ih0 = oh * stride;
                    let iw0 = ow * stride;
                    let mut best = f32::NEG_INFINITY;
                    let mut best_i = base + ih0 * w + iw0;
                    for dh in 0..k {
                        let row = base + (ih0 + dh) * w + iw0;
                        for dw in 0..k {
                            let v = xd[row + dw];
                            if v > best {
                                best = v;
                                best_i = row + dw;
                            }
                        }
                    }
                    out[o] = best;
                    idx[o] = best_i;
                    o += 1;
                }
            }
        }
    }
    Ok((Tensor::new(vec![n, c, h_out, w_out], out)?, idx))
}

pub fn maxpool2d(x: &Tensor, k: usize, stride: usize) -> TensorResult<Tensor> {
    maxpool2d_with_indices(x, k, stride).map(|(t, _)| t)
}

/// Route upstream gradient to each window's argmax.
pub fn maxpool2d_backward(
    input_shape: &[usize],
    indices: &[usize],
    grad_out: &Tensor,
) -> TensorResult<Tensor> {
    if indices.len() != grad_out.numel() {
        return Err(TensorError::InvalidArg {
            op: "maxpool2d_backward",
            msg: format!("{} indices vs {} upstream elements", indices.len(), grad_out.numel()),
        });
    }
    let mut grad_x = Tensor::zeros(input_shape);
    let gd = grad_x.data_mut();
    for (&i, &g) in indices.iter().zip(grad_out.data()) {
        gd[i] += g;
    }
    Ok(grad_x)
}

/// Per-channel spatial mean: NCHW -> N x C.
pub fn global_avg_pool(x: &Tensor) -> TensorResult<Tensor> {
    let (n, c, h, w) = x.as_nchw()?;
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let xd = x.data();
    let mut out = vec![0.0f32; n * c];
    for img in 0..n {
        for ch in 0..c {
            let base = (img * c + ch) * hw;
            let mut acc = 0.0f32;
            for &v in &xd[base..base + hw] {
                acc += v;
            }
            out[img * c + ch] = acc * inv;
        }
    }
    let out = Tensor::new(vec![n, c], out)?;
    if !out.all_finite() {
        return Err(TensorError::NonFinite { op: "global_avg_pool" });
    }
    Ok(out)
}

/// Distribute upstream gradient uniformly over each channel's spatial cells.
pub fn global_avg_pool_backward(input_shape: &[usize], grad_out: &Tensor) -> TensorResult<Tensor> {
    let (n, c, h, w) = Tensor::zeros(input_shape).as_nchw()?;
    if grad_out.shape() != [n, c] {
        return Err(TensorError::InvalidArg {
            op: "global_avg_pool_backward",
            msg: format!("upstream shape {:?}, expected [{n}, {c}]", grad_out.shape()),
        });
    }
    let hw = h * w;
    let inv = 1.0 / hw as f32;
    let mut grad = vec![0.0f32; n * c * hw];
    for img in 0..n {
        for ch in 0..c {
            let g = grad_out.data()[img * c + ch] * inv;
            let base = (img * c + ch) * hw;
            for v in &mut grad[base..base + hw] {
                *v = g;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), grad)
}

// ---------------------------------------------------------------------------
// Dense
// ---------------------------------------------------------------------------

fn dense_dims(op: &'static str, x: &Tensor, w: &Tensor, b: &Tensor) -> TensorResult<(usize, usize, usize)> {
    let [n, f] = match x.shape() {
        [n, f] => [*n, *f],
        other => {
            return Err(TensorError::InvalidArg { op, msg: format!("input must be rank 2, got {other:?}") })
        }
    };
    let [c, wf] = match w.shape() {
        [c, wf] => [*c, *wf],
        other => {
            return Err(TensorError::InvalidArg { op, msg: format!("weight must be rank 2, got {other:?}") })
        }
    };
    if wf != f {
        return Err(TensorError::DimMismatch { op, axis: "features", expected: wf, actual: f });
    }
    if b.numel() != c {
        return Err(TensorError::DimMismatch { op, axis: "bias", expected: c, actual: b.numel() });
    }
    Ok((n, f, c))
}

/// Affine map `x * w^T + b` with `x: N x F`, `w: C x F`, `b: C`.
pub fn dense(x: &Tensor, w: &Tensor, b: &Tensor) -> TensorResult<Tensor> {
    let (n, f, c) = dense_dims("dense", x, w, b)?;
    let mut out = vec![0.0f32; n * c];
    gemm_nt(n, f, c, x.data(), w.data(), 0.0, &mut out);
    for row in 0..n {
        for col in 0..c {
            out[row * c + col] += b.data()[col];
        }
    }
    let out = Tensor::new(vec![n, c], out)?;
    if !out.all_finite() {
        return Err(TensorError::NonFinite { op: "dense" });
    }
    Ok(out)
}

/// Gradients of [`dense`] with respect to input, weight and bias.
pub fn dense_backward(x: &Tensor, w: &Tensor, grad_out: &Tensor) -> TensorResult<LayerGrads> {
    let bias_placeholder = Tensor::zeros(&[w.shape()[0]]);
    let (n, f, c) = dense_dims("dense_backward", x, w, &bias_placeholder)?;
    if grad_out.shape() != [n, c] {
        return Err(TensorError::InvalidArg {
            op: "dense_backward",
            msg: format!("upstream shape {:?}, expected [{n}, {c}]", grad_out.shape()),
        });
    }
    let mut grad_x = vec![0.0f32; n * f];
    gemm_nn(n, c, f, grad_out.data(), w.data(), 0.0, &mut grad_x);
    let mut grad_w = vec![0.0f32; c * f];
    gemm_tn(c, n, f, grad_out.data(), x.data(), 0.0, &mut grad_w);
    let mut grad_b = vec![0.0f32; c];
    for row in 0..n {
        for col in 0..c {
            grad_b[col] += grad_out.data()[row * c + col];
        }
    }
    Ok(LayerGrads {
        grad_input: Tensor::new(vec![n, f], grad_x)?,
        grad_params: vec![
            ("w", Tensor::new(vec![c, f], grad_w)?),
            ("b", Tensor::new(vec![c], grad_b)?),
        ],
    })
}

// ---------------------------------------------------------------------------
// Softmax cross-entropy
// ---------------------------------------------------------------------------

pub struct SoftmaxLoss {
    pub loss: f32,
    pub probs: Tensor,
    pub grad_logits: Tensor,
}

/// Numerically stabilized softmax plus mean cross-entropy and its gradient
/// `(probs - onehot) / N`.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> TensorResult<SoftmaxLoss> {
    let [n, c] = match logits.shape() {
        [n, c] => [*n, *c],
        other => {
            return Err(TensorError::InvalidArg {
                op: "softmax_cross_entropy",
                msg: format!("logits must be rank 2, got {other:?}"),
            })
        }
    };
    if labels.len() != n {
        return Err(TensorError::DimMismatch {
            op: "softmax_cross_entropy",
            axis: "labels",
            expected: n,
            actual: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(TensorError::InvalidArg {
            op: "softmax_cross_entropy",
            msg: format!("label {bad} out of range for {c} classes"),
        });
    }
    let ld = logits.data();
    let mut probs = vec![0.0f32; n * c];
    let mut grad = vec![0.0f32; n * c];
    let mut loss = 0.0f32;
    let inv_n = 1.0 / n as f32;
    for row in 0..n {
        let r = &ld[row * c..(row + 1) * c];
        let max = r.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut denom = 0.0f32;
        for (j, &v) in r.iter().enumerate() {
            let e = (v - max).exp();
            probs[row * c + j] = e;
            denom += e;
        }
        let inv_denom = 1.0 / denom;
        for j in 0..c {
            probs[row * c + j] *= inv_denom;
        }
        let p_label = probs[row * c + labels[row]];
        loss -= (p_label.max(f32::MIN_POSITIVE)).ln();
        for j in 0..c {
            let one = if j == labels[row] { 1.0 } else { 0.0 };
            grad[row * c + j] = (probs[row * c + j] - one) * inv_n;
        }
    }
    loss *= inv_n;
    if !loss.is_finite() {
        return Err(TensorError::NonFinite { op: "softmax_cross_entropy" });
    }
    Ok(SoftmaxLoss {
        loss,
        probs: Tensor::new(vec![n, c], probs)?,
        grad_logits: Tensor::new(vec![n, c], grad)?,
    })
}

/// Argmax per row of an `N x C` logits tensor, ties to the lower class id.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let c = *logits.shape().last().expect("nonempty shape");
    logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct nested-loop cross-correlation, the independent oracle for the
    /// GEMM-backed conv2d path.
    pub(crate) fn conv2d_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (n, in_c, h, wd) = x.as_nchw().unwrap();
        let (out_c, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0f32; n * out_c * h_out * w_out];
        let mut o = 0;
        for img in 0..n {
            for oc in 0..out_c {
                for oh in 0..h_out {
                    for ow in 0..w_out {
                        let mut acc = 0.0f32;
                        for ic in 0..in_c {
                            for dh in 0..kh {
                                for dw in 0..kw {
                                    let ih = (oh * stride + dh) as isize - pad as isize;
                                    let iw = (ow * stride + dw) as isize - pad as isize;
                                    if ih < 0 || iw < 0 || ih >= h as isize || iw >= wd as isize {
                                        continue;
                                    }
                                    let xi = ((img * in_c + ic) * h + ih as usize) * wd + iw as usize;
                                    let wi = ((oc * in_c + ic) * kh + dh) * kw + dw;
                                    acc += x.data()[xi] * w.data()[wi];
                                }
                            }
                        }
                        out[o] = acc + b.data()[oc];
                        o += 1;
                    }
                }
            }
        }
        Tensor::new(vec![n, out_c, h_out, w_out], out).unwrap()
    }

    fn rng_tensor(shape: &[usize], seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn conv2d_scalar_scaling() {
        let x = Tensor::filled(&[1, 1, 3, 3], 1.0);
        let w = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv2d_matches_hand_window_sum() {
        // 3x3 input with a 2x2 all-ones kernel: plain window sums.
        let x = Tensor::new(vec![1, 1, 3, 3], vec![1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap();
        let w = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let b = Tensor::zeros(&[1]);
        let oracle = conv2d_oracle(&x, &w, &b, 1, 0);
        assert_eq!(oracle.data(), &[12.0, 16.0, 24.0, 28.0]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), oracle.data());
    }

    #[test]
    fn conv2d_strided_output_shape() {
        let x = rng_tensor(&[1, 3, 32, 32], 1);
        let w = rng_tensor(&[16, 3, 3, 3], 2);
        let b = Tensor::zeros(&[16]);
        let y = conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 16, 16, 16]);
    }

    #[test]
    fn conv2d_agrees_with_oracle_on_random_shapes() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(99);
        for trial in 0..30 {
            let n = rng.gen_range(1..=2);
            let in_c = rng.gen_range(1..=4);
            let h = rng.gen_range(3..=8);
            let wd = rng.gen_range(3..=8);
            let out_c = rng.gen_range(1..=4);
            let k = rng.gen_range(1..=3.min(h).min(wd));
            let pad = rng.gen_range(0..=1);
            let mut stride = rng.gen_range(1..=2);
            if (h + 2 * pad - k) % stride != 0 || (wd + 2 * pad - k) % stride != 0 {
                stride = 1;
            }
            let x = rng_tensor(&[n, in_c, h, wd], 1000 + trial);
            let w = rng_tensor(&[out_c, in_c, k, k], 2000 + trial);
            let b = rng_tensor(&[out_c], 3000 + trial);
            let y = conv2d(&x, &w, &b, stride, pad).unwrap();
            let oracle = conv2d_oracle(&x, &w, &b, stride, pad);
            assert!(
                y.max_rel_diff(&oracle) < 1e-5,
                "trial {trial}: rel diff {}",
                y.max_rel_diff(&oracle)
            );
        }
    }

    #[test]
    fn conv2d_rejects_bad_shapes() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(
            conv2d(&x, &w, &b, 1, 0),
            Err(TensorError::DimMismatch { axis: "input channels", .. })
        ));
        // 4 + 0 - 3 = 1 not divisible by stride 2.
        let w2 = Tensor::zeros(&[1, 2, 3, 3]);
        assert!(matches!(
            conv2d(&x, &w2, &b, 2, 0),
            Err(TensorError::NonIntegralOutput { .. })
        ));
    }

    #[test]
    fn batchnorm_constant_input_zeroes_out() {
        let mut x = Tensor::zeros(&[2, 3, 2, 2]);
        for ch in 0..3 {
            for img in 0..2 {
                for i in 0..4 {
                    x.data_mut()[(img * 3 + ch) * 4 + i] = ch as f32 + 1.0;
                }
            }
        }
        let state = BatchNormState::with_defaults(3);
        let out = batchnorm_train(&x, &state).unwrap();
        assert!(out.y.data().iter().all(|&v| v.abs() <= 1e-3));
    }

    #[test]
    fn batchnorm_infer_shift_identity() {
        // running_mean == input, running_var == 1, gamma 1, beta 5 -> all 5.
        let x = Tensor::filled(&[1, 2, 2, 2], 3.5);
        let mut state = BatchNormState::with_defaults(2);
        state.beta = Tensor::filled(&[2], 5.0);
        state.running_mean = Tensor::filled(&[2], 3.5);
        let y = batchnorm_infer(&x, &state).unwrap();
        for &v in y.data() {
            assert!((v - 5.0).abs() < 1e-5, "{v}");
        }
    }

    #[test]
    fn batchnorm_train_normalizes_statistics() {
        let x = rng_tensor(&[2, 4, 3, 3], 7);
        let state = BatchNormState::with_defaults(4);
        let out = batchnorm_train(&x, &state).unwrap();
        // Recompute per-channel statistics on the output.
        let (n, c, h, w) = out.y.as_nchw().unwrap();
        let hw = h * w;
        let m = (n * hw) as f64;
        for ch in 0..c {
            let mut mean = 0.0f64;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in 0..hw {
                    mean += out.y.data()[base + i] as f64;
                }
            }
            mean /= m;
            let mut var = 0.0f64;
            for img in 0..n {
                let base = (img * c + ch) * hw;
                for i in 0..hw {
                    let d = out.y.data()[base + i] as f64 - mean;
                    var += d * d;
                }
            }
            var /= m;
            assert!(mean.abs() < 1e-5, "channel {ch} mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "channel {ch} var {var}");
        }
    }

    #[test]
    fn batchnorm_rejects_channel_mismatch_and_tiny_batch() {
        let x = Tensor::zeros(&[1, 3, 2, 2]);
        let state = BatchNormState::with_defaults(4);
        assert!(matches!(
            batchnorm_train(&x, &state),
            Err(TensorError::DimMismatch { axis: "channels", .. })
        ));
        let one = Tensor::zeros(&[1, 2, 1, 1]);
        let s2 = BatchNormState::with_defaults(2);
        assert!(batchnorm_train(&one, &s2).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let pos = Tensor::new(vec![3], vec![0.5, 1.0, 2.0]).unwrap();
        assert_eq!(relu(&pos).data(), pos.data());
        let x2 = Tensor::new(vec![2], vec![-1.0, 2.0]).unwrap();
        let up = Tensor::new(vec![2], vec![5.0, 7.0]).unwrap();
        assert_eq!(relu_backward(&x2, &up).unwrap().data(), &[0.0, 7.0]);
    }

    #[test]
    fn maxpool_examples() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1., 2., 3., 4.]).unwrap();
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[4.0]);

        let c = Tensor::filled(&[1, 2, 4, 4], 3.0);
        let yc = maxpool2d(&c, 2, 2).unwrap();
        assert_eq!(yc.shape(), &[1, 2, 2, 2]);
        assert!(yc.data().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn maxpool_ascending_matches_window_oracle() {
        // Window-max oracle over an ascending 4x4 grid.
        let x = Tensor::new(vec![1, 1, 4, 4], (0..16).map(|v| v as f32).collect()).unwrap();
        let mut oracle = Vec::new();
        for oh in 0..2 {
            for ow in 0..2 {
                let mut best = f32::NEG_INFINITY;
                for dh in 0..2 {
                    for dw in 0..2 {
                        best = best.max(x.data()[(oh * 2 + dh) * 4 + (ow * 2 + dw)]);
                    }
                }
                oracle.push(best);
            }
        }
        assert_eq!(oracle, vec![5.0, 7.0, 13.0, 15.0]);
        let y = maxpool2d(&x, 2, 2).unwrap();
        assert_eq!(y.data(), oracle.as_slice());
    }

    #[test]
    fn maxpool_tie_routes_to_first_occurrence() {
        let x = Tensor::filled(&[1, 1, 2, 2], 1.0);
        let (y, idx) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert_eq!(y.data(), &[1.0]);
        assert_eq!(idx, vec![0]);
        let up = Tensor::new(vec![1, 1, 1, 1], vec![4.0]).unwrap();
        let gx = maxpool2d_backward(&[1, 1, 2, 2], &idx, &up).unwrap();
        assert_eq!(gx.data(), &[4.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn gap_examples() {
        let x = Tensor::filled(&[1, 1, 3, 3], 7.0);
        assert_eq!(global_avg_pool(&x).unwrap().data(), &[7.0]);
        let x2 = Tensor::new(vec![1, 1, 2, 2], vec![1., 3., 5., 7.]).unwrap();
        assert_eq!(global_avg_pool(&x2).unwrap().data(), &[4.0]);
        let up = Tensor::new(vec![1, 1], vec![8.0]).unwrap();
        let gx = global_avg_pool_backward(&[1, 1, 2, 2], &up).unwrap();
        assert!(gx.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn dense_examples() {
        // Identity weight reproduces the input.
        let x = Tensor::new(vec![1, 3], vec![1., 2., 3.]).unwrap();
        let eye = Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let b0 = Tensor::zeros(&[3]);
        assert_eq!(dense(&x, &eye, &b0).unwrap().data(), x.data());

        let x2 = Tensor::new(vec![1, 2], vec![1., 2.]).unwrap();
        let w2 = Tensor::new(vec![1, 2], vec![3., 4.]).unwrap();
        let b2 = Tensor::new(vec![1], vec![5.]).unwrap();
        assert_eq!(dense(&x2, &w2, &b2).unwrap().data(), &[16.0]);

        let x3 = Tensor::zeros(&[2, 8]);
        let w3 = Tensor::zeros(&[3, 8]);
        let b3 = Tensor::zeros(&[3]);
        assert_eq!(dense(&x3, &w3, &b3).unwrap().shape(), &[2, 3]);

        let w_bad = Tensor::zeros(&[3, 7]);
        assert!(dense(&x3, &w_bad, &b3).is_err());
    }

    #[test]
    fn softmax_uniform_and_saturated() {
        let logits = Tensor::filled(&[1, 3], 0.4);
        let out = softmax_cross_entropy(&logits, &[1]).unwrap();
        for &p in out.probs.data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
        assert!((out.loss - 3.0f32.ln()).abs() < 1e-5);

        let sat = Tensor::new(vec![1, 2], vec![10.0, -10.0]).unwrap();
        let out = softmax_cross_entropy(&sat, &[0]).unwrap();
        assert!(out.loss < 1e-4, "loss {}", out.loss);

        assert!(softmax_cross_entropy(&sat, &[2]).is_err());
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = rng_tensor(&[5, 7], 11);
        let out = softmax_cross_entropy(&logits, &[0, 1, 2, 3, 4]).unwrap();
        for row in out.probs.data().chunks(7) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}
