//! Raw numeric kernels behind the tape operations.
//!
//! Convolutions go through im2col so the hot loops are contiguous
//! axpy/dot passes the compiler can vectorize. Accumulation order in the
//! forward pass is fixed (channel, then kernel row, then kernel column)
//! so results are stable across refactors.

/// Output extent of a convolution along one axis (floor convention), or
/// `None` when the kernel does not fit the padded input.
pub fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let padded = input + 2 * pad;
    if padded < kernel {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

/// Output extent of a transposed convolution along one axis.
pub fn conv_transpose_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
    if stride == 0 {
        return None;
    }
    let grown = (input - 1) * stride + kernel;
    if grown <= 2 * pad {
        return None;
    }
    Some(grown - 2 * pad)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for i in 0..chunks {
        let a4 = &a[i * 4..i * 4 + 4];
        let b4 = &b[i * 4..i * 4 + 4];
        acc[0] += a4[0] * b4[0];
        acc[1] += a4[1] * b4[1];
        acc[2] += a4[2] * b4[2];
        acc[3] += a4[3] * b4[3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    acc[0] + acc[1] + acc[2] + acc[3] + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Lowers one `[C,H,W]` sample into columns `[C*kh*kw, h_out*w_out]`.
#[allow(clippy::too_many_arguments)]
fn im2col(
    input: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    cols: &mut [f64],
) {
    let patch = h_out * w_out;
    debug_assert_eq!(cols.len(), c * kh * kw * patch);
    cols.iter_mut().for_each(|v| *v = 0.0);
    for ci in 0..c {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut cols[((ci * kh + ki) * kw + kj) * patch..][..patch];
                for oh in 0..h_out {
                    let ih = oh * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    let src = &plane[ih * w..(ih + 1) * w];
                    let dst = &mut row[oh * w_out..(oh + 1) * w_out];
                    for ow in 0..w_out {
                        let iw = ow * stride + kj;
                        if iw >= pad && iw < w + pad {
                            dst[ow] = src[iw - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Adds columns `[C*kh*kw, h_out*w_out]` back into one `[C,H,W]` sample.
#[allow(clippy::too_many_arguments)]
fn col2im_acc(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    output: &mut [f64],
) {
    let patch = h_out * w_out;
    for ci in 0..c {
        let plane = &mut output[ci * h * w..(ci + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &cols[((ci * kh + ki) * kw + kj) * patch..][..patch];
                for oh in 0..h_out {
                    let ih = oh * stride + ki;
                    if ih < pad || ih >= h + pad {
                        continue;
                    }
                    let ih = ih - pad;
                    let dst = &mut plane[ih * w..(ih + 1) * w];
                    let src = &row[oh * w_out..(oh + 1) * w_out];
                    for ow in 0..w_out {
                        let iw = ow * stride + kj;
                        if iw >= pad && iw < w + pad {
                            dst[iw - pad] += src[ow];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward pass.
///
/// `input` is `[N,C,H,W]`, `kernel` `[F,C,kh,kw]`, `bias` `[F]`; output is
/// `[N,F,h_out,w_out]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    bias: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let k = c * kh * kw;
    let patch = h_out * w_out;
    let mut out = vec![0.0; n * f * patch];
    let mut cols = vec![0.0; k * patch];
    for ni in 0..n {
        im2col(
            &input[ni * c * h * w..][..c * h * w],
            c, h, w, kh, kw, stride, pad, h_out, w_out, &mut cols,
        );
        let sample = &mut out[ni * f * patch..][..f * patch];
        for fi in 0..f {
            let krow = &kernel[fi * k..(fi + 1) * k];
            let orow = &mut sample[fi * patch..(fi + 1) * patch];
            orow.iter_mut().for_each(|v| *v = bias[fi]);
            for (ki, &kv) in krow.iter().enumerate() {
                axpy(kv, &cols[ki * patch..(ki + 1) * patch], orow);
            }
        }
    }
    out
}

/// Gradient of [`conv2d_forward`] with respect to its input; also the
/// forward pass of the transposed convolution (adjoint of conv2d).
///
/// `grad_out` is `[N,F,h_out,w_out]`; returns `[N,C,H,W]`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_input_grad(
    grad_out: &[f64],
    kernel: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
) -> Vec<f64> {
    let k = c * kh * kw;
    let patch = h_out * w_out;
    let mut grad_in = vec![0.0; n * c * h * w];
    let mut cols = vec![0.0; k * patch];
    for ni in 0..n {
        cols.iter_mut().for_each(|v| *v = 0.0);
        let gout = &grad_out[ni * f * patch..][..f * patch];
        for fi in 0..f {
            let krow = &kernel[fi * k..(fi + 1) * k];
            let grow = &gout[fi * patch..(fi + 1) * patch];
            for (ki, &kv) in krow.iter().enumerate() {
                if kv != 0.0 {
                    axpy(kv, grow, &mut cols[ki * patch..(ki + 1) * patch]);
                }
            }
        }
        col2im_acc(
            &cols,
            c, h, w, kh, kw, stride, pad, h_out, w_out,
            &mut grad_in[ni * c * h * w..][..c * h * w],
        );
    }
    grad_in
}

/// Gradient of [`conv2d_forward`] with respect to the kernel.
///
/// Accumulates into `grad_kernel` (`[F,C,kh,kw]`).
#[allow(clippy::too_many_arguments)]
pub fn conv2d_kernel_grad(
    input: &[f64],
    grad_out: &[f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    f: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    h_out: usize,
    w_out: usize,
    grad_kernel: &mut [f64],
) {
    let k = c * kh * kw;
    let patch = h_out * w_out;
    debug_assert_eq!(grad_kernel.len(), f * k);
    let mut cols = vec![0.0; k * patch];
    for ni in 0..n {
        im2col(
            &input[ni * c * h * w..][..c * h * w],
            c, h, w, kh, kw, stride, pad, h_out, w_out, &mut cols,
        );
        let gout = &grad_out[ni * f * patch..][..f * patch];
        for fi in 0..f {
            let grow = &gout[fi * patch..(fi + 1) * patch];
            let krow = &mut grad_kernel[fi * k..(fi + 1) * k];
            for (ki, kv) in krow.iter_mut().enumerate() {
                *kv += dot(grow, &cols[ki * patch..(ki + 1) * patch]);
            }
        }
    }
}

/// Per-filter bias gradient of a convolution: sums `grad_out` over batch
/// and spatial positions. Accumulates into `grad_bias` (`[F]`).
pub fn conv2d_bias_grad(grad_out: &[f64], n: usize, f: usize, patch: usize, grad_bias: &mut [f64]) {
    for ni in 0..n {
        for fi in 0..f {
            let grow = &grad_out[(ni * f + fi) * patch..][..patch];
            grad_bias[fi] += grow.iter().sum::<f64>();
        }
    }
}

/// Fully connected forward: `out[N,M] = x[N,K] @ w[K,M] + b[M]`.
pub fn affine_forward(x: &[f64], w: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for ni in 0..n {
        let xrow = &x[ni * k..(ni + 1) * k];
        let orow = &mut out[ni * m..(ni + 1) * m];
        orow.copy_from_slice(b);
        for (ki, &xv) in xrow.iter().enumerate() {
            axpy(xv, &w[ki * m..(ki + 1) * m], orow);
        }
    }
    out
}

/// Gradients of [`affine_forward`]; accumulates into the three buffers.
#[allow(clippy::too_many_arguments)]
pub fn affine_backward(
    x: &[f64],
    w: &[f64],
    grad_out: &[f64],
    n: usize,
    k: usize,
    m: usize,
    grad_x: Option<&mut [f64]>,
    grad_w: Option<&mut [f64]>,
    grad_b: Option<&mut [f64]>,
) {
    if let Some(gw) = grad_w {
        for ni in 0..n {
            let xrow = &x[ni * k..(ni + 1) * k];
            let grow = &grad_out[ni * m..(ni + 1) * m];
            for (ki, &xv) in xrow.iter().enumerate() {
                if xv != 0.0 {
                    axpy(xv, grow, &mut gw[ki * m..(ki + 1) * m]);
                }
            }
        }
    }
    if let Some(gb) = grad_b {
        for ni in 0..n {
            for (mi, gv) in gb.iter_mut().enumerate() {
                *gv += grad_out[ni * m + mi];
            }
        }
    }
    if let Some(gx) = grad_x {
        for ni in 0..n {
            let grow = &grad_out[ni * m..(ni + 1) * m];
            let xg = &mut gx[ni * k..(ni + 1) * k];
            for (ki, xgv) in xg.iter_mut().enumerate() {
                *xgv += dot(grow, &w[ki * m..(ki + 1) * m]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn out_dims() {
        assert_eq!(conv_out_dim(32, 4, 2, 1), Some(16));
        assert_eq!(conv_out_dim(8, 3, 1, 1), Some(8));
        assert_eq!(conv_out_dim(8, 3, 2, 1), Some(4)); // floor convention
        assert_eq!(conv_out_dim(2, 4, 1, 0), None); // kernel overruns input
        assert_eq!(conv_transpose_out_dim(16, 4, 2, 1), Some(32));
    }

    #[test]
    fn dot_matches_plain_sum() {
        let a: Vec<f64> = (0..13).map(|i| i as f64 * 0.25).collect();
        let b: Vec<f64> = (0..13).map(|i| 1.0 - i as f64 * 0.125).collect();
        let plain: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert!((dot(&a, &b) - plain).abs() < 1e-12);
    }
}
