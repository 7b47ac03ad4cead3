//! Shared test oracles: naive direct-loop convolution references, written
//! independently of the im2col path the engine uses.

#![allow(dead_code)]

/// Direct 6-loop cross-correlation with floor output sizing.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
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
) -> (Vec<f64>, usize, usize) {
    let h_out = (h + 2 * pad - kh) / stride + 1;
    let w_out = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * f * h_out * w_out];
    for ni in 0..n {
        for fi in 0..f {
            for oh in 0..h_out {
                for ow in 0..w_out {
                    let mut acc = bias[fi];
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let ih = oh * stride + ki;
                                let iw = ow * stride + kj;
                                if ih < pad || iw < pad {
                                    continue;
                                }
                                let (ih, iw) = (ih - pad, iw - pad);
                                if ih >= h || iw >= w {
                                    continue;
                                }
                                acc += input[((ni * c + ci) * h + ih) * w + iw]
                                    * kernel[((fi * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((ni * f + fi) * h_out + oh) * w_out + ow] = acc;
                }
            }
        }
    }
    (out, h_out, w_out)
}

/// Direct scatter-loop transposed convolution; kernel layout `[C,F,kh,kw]`.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d_transpose(
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
) -> (Vec<f64>, usize, usize) {
    let h_out = (h - 1) * stride + kh - 2 * pad;
    let w_out = (w - 1) * stride + kw - 2 * pad;
    let mut out = vec![0.0; n * f * h_out * w_out];
    for ni in 0..n {
        for fi in 0..f {
            for i in 0..h_out * w_out {
                out[(ni * f + fi) * h_out * w_out + i] = bias[fi];
            }
        }
        for ci in 0..c {
            for ih in 0..h {
                for iw in 0..w {
                    let v = input[((ni * c + ci) * h + ih) * w + iw];
                    for fi in 0..f {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let oh = ih * stride + ki;
                                let ow = iw * stride + kj;
                                if oh < pad || ow < pad {
                                    continue;
                                }
                                let (oh, ow) = (oh - pad, ow - pad);
                                if oh >= h_out || ow >= w_out {
                                    continue;
                                }
                                out[((ni * f + fi) * h_out + oh) * w_out + ow] +=
                                    v * kernel[((ci * f + fi) * kh + ki) * kw + kj];
                            }
                        }
                    }
                }
            }
        }
    }
    (out, h_out, w_out)
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
