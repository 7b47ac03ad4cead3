//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every forward operation appends one node (value buffer + backward rule)
//! to the [`Tape`]. Nodes refer to their inputs by [`ValueId`], and inputs
//! always precede outputs, so a single reverse sweep visits each node once.
//! Gradient buffers accumulate: calling [`Tape::backward`] twice without
//! clearing doubles every gradient.

use crate::kernels;
use crate::tensor::{Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{op}: expected rank-{expected} input, got shape {shape:?}")]
    BadRank {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("{op}: channel mismatch: input has {input_channels}, kernel expects {kernel_channels}")]
    ChannelMismatch {
        op: &'static str,
        input_channels: usize,
        kernel_channels: usize,
    },
    #[error("{op}: output size is not a positive integer for input {input}x{input}, kernel {kernel}, stride {stride}, pad {pad}")]
    NonIntegralOutput {
        op: &'static str,
        input: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    #[error("batchnorm: degenerate batch: {count} value(s) per channel, need at least 2")]
    DegenerateBatch { count: usize },
    #[error("softmax: axis {axis} out of range for shape {shape:?}")]
    BadAxis { axis: usize, shape: Vec<usize> },
    #[error("backward: loss must be a scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("log: input element {index} is {value}, must be positive")]
    NonPositiveLog { index: usize, value: f64 },
    #[error("label {label} at row {row} out of range for {classes} classes")]
    LabelOutOfRange {
        row: usize,
        label: usize,
        classes: usize,
    },
    #[error("row {row} is not one-hot: {reason}")]
    MalformedOneHot { row: usize, reason: String },
    #[error("{op}: component is not finite: {value}")]
    NonFinite { op: &'static str, value: f64 },
}

/// Handle to a value recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Conv2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    },
    ConvTranspose2d {
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    },
    BatchNormTrain {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    BatchNormEval {
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Affine {
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    },
    Relu {
        input: ValueId,
    },
    LeakyRelu {
        input: ValueId,
        slope: f64,
    },
    Sigmoid {
        input: ValueId,
    },
    Softmax {
        input: ValueId,
        axis: usize,
    },
    Reshape {
        input: ValueId,
    },
    Add {
        a: ValueId,
        b: ValueId,
    },
    Sub {
        a: ValueId,
        b: ValueId,
    },
    Mul {
        a: ValueId,
        b: ValueId,
    },
    Scale {
        input: ValueId,
        factor: f64,
    },
    OneMinus {
        input: ValueId,
    },
    SumAll {
        input: ValueId,
    },
    NegMeanLog {
        input: ValueId,
    },
    MseLoss {
        a: ValueId,
        b: ValueId,
    },
    CrossEntropyLogits {
        logits: ValueId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    MiLowerBound {
        logits: ValueId,
        codes: Vec<usize>,
        probs: Vec<f64>,
    },
}

/// Linear tape of recorded operations with their value and gradient buffers.
#[derive(Default)]
pub struct Tape {
    shapes: Vec<Vec<usize>>,
    datas: Vec<Vec<f64>>,
    grads: Vec<Vec<f64>>,
    needs: Vec<bool>,
    ops: Vec<Op>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// Drops all recorded nodes; ids from before are invalidated.
    pub fn clear(&mut self) {
        self.shapes.clear();
        self.datas.clear();
        self.grads.clear();
        self.needs.clear();
        self.ops.clear();
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.shapes[id.0]
    }

    pub fn data(&self, id: ValueId) -> &[f64] {
        &self.datas[id.0]
    }

    pub fn grad(&self, id: ValueId) -> &[f64] {
        &self.grads[id.0]
    }

    /// Value of a scalar node.
    pub fn item(&self, id: ValueId) -> f64 {
        debug_assert!(self.shapes[id.0].is_empty());
        self.datas[id.0][0]
    }

    pub fn value(&self, id: ValueId) -> Tensor {
        Tensor::new(self.shapes[id.0].clone(), self.datas[id.0].clone())
            .expect("tape node is well formed")
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs: bool, op: Op) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let id = ValueId(self.ops.len());
        self.grads.push(vec![0.0; data.len()]);
        self.shapes.push(shape);
        self.datas.push(data);
        self.needs.push(needs);
        self.ops.push(op);
        id
    }

    /// Records an input value. `needs_grad` marks trainable leaves.
    pub fn leaf(&mut self, shape: &[usize], data: Vec<f64>, needs_grad: bool) -> Result<ValueId, TapeError> {
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(shape.to_vec(), t.into_data(), needs_grad, Op::Leaf))
    }

    /// Records a non-differentiated input value.
    pub fn constant(&mut self, tensor: &Tensor) -> ValueId {
        self.push(tensor.shape().to_vec(), tensor.data().to_vec(), false, Op::Leaf)
    }

    pub fn scalar(&mut self, value: f64) -> ValueId {
        self.push(Vec::new(), vec![value], false, Op::Leaf)
    }

    // ── forward ops ──────────────────────────────────────────────────

    /// Cross-correlation of `input [N,C,H,W]` with `kernel [F,C,kh,kw]`
    /// plus per-filter `bias [F]`.
    pub fn conv2d(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId, TapeError> {
        let (n, c, h, w) = self.dims4("conv2d", input)?;
        let (f, kc, kh, kw) = self.dims4("conv2d", kernel)?;
        if c != kc {
            return Err(TapeError::ChannelMismatch {
                op: "conv2d",
                input_channels: c,
                kernel_channels: kc,
            });
        }
        self.require_shape("conv2d bias", bias, &[f])?;
        let h_out = kernels::conv_out_dim(h, kh, stride, pad).ok_or(TapeError::NonIntegralOutput {
            op: "conv2d",
            input: h,
            kernel: kh,
            stride,
            pad,
        })?;
        let w_out = kernels::conv_out_dim(w, kw, stride, pad).ok_or(TapeError::NonIntegralOutput {
            op: "conv2d",
            input: w,
            kernel: kw,
            stride,
            pad,
        })?;
        let out = kernels::conv2d_forward(
            &self.datas[input.0],
            &self.datas[kernel.0],
            &self.datas[bias.0],
            n, c, h, w, f, kh, kw, stride, pad, h_out, w_out,
        );
        let needs = self.needs[input.0] || self.needs[kernel.0] || self.needs[bias.0];
        Ok(self.push(
            vec![n, f, h_out, w_out],
            out,
            needs,
            Op::Conv2d { input, kernel, bias, stride, pad },
        ))
    }

    /// Transposed convolution: the adjoint of [`Tape::conv2d`] with the same
    /// geometry. `input [N,C,H,W]`, `kernel [C,F,kh,kw]`, `bias [F]`.
    pub fn conv2d_transpose(
        &mut self,
        input: ValueId,
        kernel: ValueId,
        bias: ValueId,
        stride: usize,
        pad: usize,
    ) -> Result<ValueId, TapeError> {
        let (n, c, h, w) = self.dims4("conv2d_transpose", input)?;
        let (kc, f, kh, kw) = self.dims4("conv2d_transpose", kernel)?;
        if c != kc {
            return Err(TapeError::ChannelMismatch {
                op: "conv2d_transpose",
                input_channels: c,
                kernel_channels: kc,
            });
        }
        self.require_shape("conv2d_transpose bias", bias, &[f])?;
        let h_out = kernels::conv_transpose_out_dim(h, kh, stride, pad)
            .filter(|&d| d > 0)
            .ok_or(TapeError::NonIntegralOutput {
                op: "conv2d_transpose",
                input: h,
                kernel: kh,
                stride,
                pad,
            })?;
        let w_out = kernels::conv_transpose_out_dim(w, kw, stride, pad)
            .filter(|&d| d > 0)
            .ok_or(TapeError::NonIntegralOutput {
                op: "conv2d_transpose",
                input: w,
                kernel: kw,
                stride,
                pad,
            })?;
        // Scatter semantics == conv input-gradient with roles swapped: the
        // stored kernel [C,F,kh,kw] is the conv kernel whose input grad we take.
        let mut out = kernels::conv2d_input_grad(
            &self.datas[input.0],
            &self.datas[kernel.0],
            n, f, h_out, w_out, c, kh, kw, stride, pad, h, w,
        );
        let bias_data = &self.datas[bias.0];
        let patch = h_out * w_out;
        for ni in 0..n {
            for fi in 0..f {
                let plane = &mut out[(ni * f + fi) * patch..][..patch];
                let b = bias_data[fi];
                plane.iter_mut().for_each(|v| *v += b);
            }
        }
        let needs = self.needs[input.0] || self.needs[kernel.0] || self.needs[bias.0];
        Ok(self.push(
            vec![n, f, h_out, w_out],
            out,
            needs,
            Op::ConvTranspose2d { input, kernel, bias, stride, pad },
        ))
    }

    /// Batch normalization over `[N,C,H,W]` using batch statistics
    /// (biased variance). Returns the output node plus the batch mean and
    /// variance per channel so the caller can maintain running statistics.
    pub fn batchnorm_train(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        eps: f64,
    ) -> Result<(ValueId, Vec<f64>, Vec<f64>), TapeError> {
        let (n, c, h, w) = self.dims4("batchnorm", input)?;
        self.require_shape("batchnorm gamma", gamma, &[c])?;
        self.require_shape("batchnorm beta", beta, &[c])?;
        let count = n * h * w;
        if count < 2 {
            return Err(TapeError::DegenerateBatch { count });
        }
        let x = &self.datas[input.0];
        let g = &self.datas[gamma.0];
        let b = &self.datas[beta.0];
        let plane = h * w;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ci in 0..c {
            let mut s = 0.0;
            for ni in 0..n {
                let p = &x[(ni * c + ci) * plane..][..plane];
                s += p.iter().sum::<f64>();
            }
            let m = s / count as f64;
            let mut v = 0.0;
            for ni in 0..n {
                let p = &x[(ni * c + ci) * plane..][..plane];
                v += p.iter().map(|&e| (e - m) * (e - m)).sum::<f64>();
            }
            mean[ci] = m;
            var[ci] = v / count as f64;
        }
        let mut xhat = vec![0.0; x.len()];
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let inv = 1.0 / (var[ci] + eps).sqrt();
            inv_std[ci] = inv;
            for ni in 0..n {
                let base = (ni * c + ci) * plane;
                for idx in base..base + plane {
                    let xh = (x[idx] - mean[ci]) * inv;
                    xhat[idx] = xh;
                    out[idx] = g[ci] * xh + b[ci];
                }
            }
        }
        let needs = self.needs[input.0] || self.needs[gamma.0] || self.needs[beta.0];
        let id = self.push(
            vec![n, c, h, w],
            out,
            needs,
            Op::BatchNormTrain { input, gamma, beta, xhat, inv_std },
        );
        Ok((id, mean, var))
    }

    /// Batch normalization using fixed (running) statistics.
    pub fn batchnorm_eval(
        &mut self,
        input: ValueId,
        gamma: ValueId,
        beta: ValueId,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<ValueId, TapeError> {
        let (n, c, h, w) = self.dims4("batchnorm", input)?;
        self.require_shape("batchnorm gamma", gamma, &[c])?;
        self.require_shape("batchnorm beta", beta, &[c])?;
        let x = &self.datas[input.0];
        let g = &self.datas[gamma.0];
        let b = &self.datas[beta.0];
        let plane = h * w;
        let inv_std: Vec<f64> = running_var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                for idx in base..base + plane {
                    out[idx] = g[ci] * (x[idx] - running_mean[ci]) * inv_std[ci] + b[ci];
                }
            }
        }
        let needs = self.needs[input.0] || self.needs[gamma.0] || self.needs[beta.0];
        Ok(self.push(
            vec![n, c, h, w],
            out,
            needs,
            Op::BatchNormEval {
                input,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
            },
        ))
    }

    /// `out[N,M] = input[N,K] @ weight[K,M] + bias[M]`.
    pub fn affine(
        &mut self,
        input: ValueId,
        weight: ValueId,
        bias: ValueId,
    ) -> Result<ValueId, TapeError> {
        let ishape = self.shapes[input.0].clone();
        if ishape.len() != 2 {
            return Err(TapeError::BadRank { op: "affine", expected: 2, shape: ishape });
        }
        let wshape = self.shapes[weight.0].clone();
        if wshape.len() != 2 {
            return Err(TapeError::BadRank { op: "affine", expected: 2, shape: wshape });
        }
        let (n, k) = (ishape[0], ishape[1]);
        let (wk, m) = (wshape[0], wshape[1]);
        if k != wk {
            return Err(TensorError::ShapeMismatch {
                context: "affine input/weight".into(),
                left: ishape,
                right: wshape,
            }
            .into());
        }
        self.require_shape("affine bias", bias, &[m])?;
        let out = kernels::affine_forward(
            &self.datas[input.0],
            &self.datas[weight.0],
            &self.datas[bias.0],
            n, k, m,
        );
        let needs = self.needs[input.0] || self.needs[weight.0] || self.needs[bias.0];
        Ok(self.push(vec![n, m], out, needs, Op::Affine { input, weight, bias }))
    }

    pub fn relu(&mut self, input: ValueId) -> ValueId {
        let out = self.datas[input.0].iter().map(|&v| v.max(0.0)).collect();
        let needs = self.needs[input.0];
        self.push(self.shapes[input.0].clone(), out, needs, Op::Relu { input })
    }

    pub fn leaky_relu(&mut self, input: ValueId, slope: f64) -> ValueId {
        let out = self.datas[input.0]
            .iter()
            .map(|&v| if v > 0.0 { v } else { slope * v })
            .collect();
        let needs = self.needs[input.0];
        self.push(self.shapes[input.0].clone(), out, needs, Op::LeakyRelu { input, slope })
    }

    pub fn sigmoid(&mut self, input: ValueId) -> ValueId {
        let out = self.datas[input.0].iter().map(|&v| sigmoid(v)).collect();
        let needs = self.needs[input.0];
        self.push(self.shapes[input.0].clone(), out, needs, Op::Sigmoid { input })
    }

    /// Softmax along `axis`; rows sum to 1.
    pub fn softmax(&mut self, input: ValueId, axis: usize) -> Result<ValueId, TapeError> {
        let shape = self.shapes[input.0].clone();
        if axis >= shape.len() {
            return Err(TapeError::BadAxis { axis, shape });
        }
        let x = &self.datas[input.0];
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        let mut out = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..len {
                    max = max.max(x[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let needs = self.needs[input.0];
        Ok(self.push(shape, out, needs, Op::Softmax { input, axis }))
    }

    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> Result<ValueId, TapeError> {
        let expected: usize = shape.iter().product();
        if expected != self.datas[input.0].len() {
            return Err(TensorError::LengthMismatch {
                shape: shape.to_vec(),
                expected,
                actual: self.datas[input.0].len(),
            }
            .into());
        }
        let needs = self.needs[input.0];
        let data = self.datas[input.0].clone();
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { input }))
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, input: ValueId, factor: f64) -> ValueId {
        let out = self.datas[input.0].iter().map(|&v| v * factor).collect();
        let needs = self.needs[input.0];
        self.push(self.shapes[input.0].clone(), out, needs, Op::Scale { input, factor })
    }

    /// `1 - x`, elementwise.
    pub fn one_minus(&mut self, input: ValueId) -> ValueId {
        let out = self.datas[input.0].iter().map(|&v| 1.0 - v).collect();
        let needs = self.needs[input.0];
        self.push(self.shapes[input.0].clone(), out, needs, Op::OneMinus { input })
    }

    pub fn sum_all(&mut self, input: ValueId) -> ValueId {
        let s = self.datas[input.0].iter().sum();
        let needs = self.needs[input.0];
        self.push(Vec::new(), vec![s], needs, Op::SumAll { input })
    }

    pub fn mean_all(&mut self, input: ValueId) -> ValueId {
        let n = self.datas[input.0].len() as f64;
        let s = self.sum_all(input);
        self.scale(s, 1.0 / n)
    }

    /// `-(1/n) * sum(ln x_i)`; every element must be positive.
    pub fn neg_mean_log(&mut self, input: ValueId) -> Result<ValueId, TapeError> {
        let x = &self.datas[input.0];
        let mut s = 0.0;
        for (index, &v) in x.iter().enumerate() {
            if v <= 0.0 {
                return Err(TapeError::NonPositiveLog { index, value: v });
            }
            s += v.ln();
        }
        let out = -s / x.len() as f64;
        let needs = self.needs[input.0];
        Ok(self.push(Vec::new(), vec![out], needs, Op::NegMeanLog { input }))
    }

    /// Mean of elementwise squared differences.
    pub fn mse_loss(&mut self, a: ValueId, b: ValueId) -> Result<ValueId, TapeError> {
        crate::tensor::require_same_shape("mse_loss", &self.shapes[a.0], &self.shapes[b.0])?;
        let va = &self.datas[a.0];
        let vb = &self.datas[b.0];
        let n = va.len() as f64;
        let s: f64 = va.iter().zip(vb).map(|(x, y)| (x - y) * (x - y)).sum();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(Vec::new(), vec![s / n], needs, Op::MseLoss { a, b }))
    }

    /// Mean cross-entropy of `logits [N,K]` against integer `labels [N]`,
    /// computed via a stable log-sum-exp.
    pub fn cross_entropy_logits(
        &mut self,
        logits: ValueId,
        labels: &[usize],
    ) -> Result<ValueId, TapeError> {
        let shape = self.shapes[logits.0].clone();
        if shape.len() != 2 {
            return Err(TapeError::BadRank { op: "cross_entropy", expected: 2, shape });
        }
        let (n, k) = (shape[0], shape[1]);
        if labels.len() != n {
            return Err(TensorError::ShapeMismatch {
                context: "cross_entropy labels".into(),
                left: shape,
                right: vec![labels.len()],
            }
            .into());
        }
        for (row, &label) in labels.iter().enumerate() {
            if label >= k {
                return Err(TapeError::LabelOutOfRange { row, label, classes: k });
            }
        }
        let x = &self.datas[logits.0];
        let mut probs = vec![0.0; n * k];
        let mut total = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] /= sum;
            }
            total += lse - row[labels[i]];
        }
        let needs = self.needs[logits.0];
        Ok(self.push(
            Vec::new(),
            vec![total / n as f64],
            needs,
            Op::CrossEntropyLogits { logits, labels: labels.to_vec(), probs },
        ))
    }

    /// Variational lower bound on the mutual information between categorical
    /// codes and the samples behind `logits [N,K]`:
    /// `H_emp(c) + (1/N) * sum_i log softmax(logits_i)[c_i]`.
    ///
    /// `H_emp` is the entropy of the batch's empirical code distribution.
    /// Codes are data, not differentiated through.
    pub fn mi_lower_bound(
        &mut self,
        logits: ValueId,
        codes: &[usize],
    ) -> Result<ValueId, TapeError> {
        let shape = self.shapes[logits.0].clone();
        if shape.len() != 2 {
            return Err(TapeError::BadRank { op: "mi_lower_bound", expected: 2, shape });
        }
        let (n, k) = (shape[0], shape[1]);
        if codes.len() != n {
            return Err(TensorError::ShapeMismatch {
                context: "mi_lower_bound codes".into(),
                left: shape,
                right: vec![codes.len()],
            }
            .into());
        }
        for (row, &code) in codes.iter().enumerate() {
            if code >= k {
                return Err(TapeError::LabelOutOfRange { row, label: code, classes: k });
            }
        }
        let mut counts = vec![0usize; k];
        for &c in codes {
            counts[c] += 1;
        }
        let nf = n as f64;
        let h_code: f64 = counts
            .iter()
            .filter(|&&cnt| cnt > 0)
            .map(|&cnt| {
                let p = cnt as f64 / nf;
                -p * p.ln()
            })
            .sum();
        let x = &self.datas[logits.0];
        let mut probs = vec![0.0; n * k];
        let mut cond = 0.0;
        for i in 0..n {
            let row = &x[i * k..(i + 1) * k];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[i * k + j] = e;
                sum += e;
            }
            let lse = max + sum.ln();
            for j in 0..k {
                probs[i * k + j] /= sum;
            }
            cond += row[codes[i]] - lse;
        }
        let needs = self.needs[logits.0];
        Ok(self.push(
            Vec::new(),
            vec![h_code + cond / nf],
            needs,
            Op::MiLowerBound { logits, codes: codes.to_vec(), probs },
        ))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Gradients accumulate into each
    /// node's grad buffer; leaves hold `d loss / d leaf` afterwards.
    pub fn backward(&mut self, loss: ValueId) -> Result<(), TapeError> {
        if !self.shapes[loss.0].is_empty() {
            return Err(TapeError::NonScalarLoss { shape: self.shapes[loss.0].clone() });
        }
        if !self.needs[loss.0] {
            // Nothing trainable is reachable from this loss.
            return Ok(());
        }
        // Local upstream buffer: only gradient flow from THIS loss seed
        // propagates, while node buffers keep accumulating across calls.
        let mut upstream: Vec<Vec<f64>> = self
            .datas
            .iter()
            .zip(&self.needs)
            .map(|(d, &nd)| if nd { vec![0.0; d.len()] } else { Vec::new() })
            .collect();
        upstream[loss.0][0] = 1.0;
        for i in (0..=loss.0).rev() {
            if !self.needs[i] || upstream[i].iter().all(|&g| g == 0.0) {
                continue;
            }
            let (up_in, up_out) = upstream.split_at_mut(i);
            let gout: &[f64] = &up_out[0];
            match &self.ops[i] {
                Op::Leaf => {}
                Op::Conv2d { input, kernel, bias, stride, pad } => {
                    let (n, c, h, w) = self.dims4_unchecked(*input);
                    let (f, _, kh, kw) = self.dims4_unchecked(*kernel);
                    let (h_out, w_out) = {
                        let s = &self.shapes[i];
                        (s[2], s[3])
                    };
                    if self.needs[input.0] {
                        let gi = kernels::conv2d_input_grad(
                            gout,
                            &self.datas[kernel.0],
                            n, c, h, w, f, kh, kw, *stride, *pad, h_out, w_out,
                        );
                        add_into(&mut up_in[input.0], &gi);
                    }
                    if self.needs[kernel.0] {
                        kernels::conv2d_kernel_grad(
                            &self.datas[input.0],
                            gout,
                            n, c, h, w, f, kh, kw, *stride, *pad, h_out, w_out,
                            &mut up_in[kernel.0],
                        );
                    }
                    if self.needs[bias.0] {
                        kernels::conv2d_bias_grad(gout, n, f, h_out * w_out, &mut up_in[bias.0]);
                    }
                }
                Op::ConvTranspose2d { input, kernel, bias, stride, pad } => {
                    let (n, c, h, w) = self.dims4_unchecked(*input);
                    let (_, f, kh, kw) = self.dims4_unchecked(*kernel);
                    let (h_out, w_out) = {
                        let s = &self.shapes[i];
                        (s[2], s[3])
                    };
                    if self.needs[input.0] {
                        // Adjoint of the adjoint: a plain convolution.
                        let gi = kernels::conv2d_forward(
                            gout,
                            &self.datas[kernel.0],
                            &vec![0.0; c],
                            n, f, h_out, w_out, c, kh, kw, *stride, *pad, h, w,
                        );
                        add_into(&mut up_in[input.0], &gi);
                    }
                    if self.needs[kernel.0] {
                        // Same contraction as the conv kernel grad with the
                        // output-side and input-side tensors exchanged.
                        kernels::conv2d_kernel_grad(
                            gout,
                            &self.datas[input.0],
                            n, f, h_out, w_out, c, kh, kw, *stride, *pad, h, w,
                            &mut up_in[kernel.0],
                        );
                    }
                    if self.needs[bias.0] {
                        kernels::conv2d_bias_grad(gout, n, f, h_out * w_out, &mut up_in[bias.0]);
                    }
                }
                Op::BatchNormTrain { input, gamma, beta, xhat, inv_std } => {
                    let (n, c, h, w) = self.dims4_unchecked(*input);
                    let plane = h * w;
                    let count = (n * plane) as f64;
                    let g = &self.datas[gamma.0];
                    for ci in 0..c {
                        let mut sum_dy = 0.0;
                        let mut sum_dy_xhat = 0.0;
                        for ni in 0..n {
                            let base = (ni * c + ci) * plane;
                            for idx in base..base + plane {
                                sum_dy += gout[idx];
                                sum_dy_xhat += gout[idx] * xhat[idx];
                            }
                        }
                        if self.needs[gamma.0] {
                            up_in[gamma.0][ci] += sum_dy_xhat;
                        }
                        if self.needs[beta.0] {
                            up_in[beta.0][ci] += sum_dy;
                        }
                        if self.needs[input.0] {
                            let scale = g[ci] * inv_std[ci] / count;
                            for ni in 0..n {
                                let base = (ni * c + ci) * plane;
                                for idx in base..base + plane {
                                    up_in[input.0][idx] += scale
                                        * (count * gout[idx] - sum_dy - xhat[idx] * sum_dy_xhat);
                                }
                            }
                        }
                    }
                }
                Op::BatchNormEval { input, gamma, beta, mean, inv_std } => {
                    let (n, c, h, w) = self.dims4_unchecked(*input);
                    let plane = h * w;
                    let g = &self.datas[gamma.0];
                    let x = &self.datas[input.0];
                    for ci in 0..c {
                        for ni in 0..n {
                            let base = (ni * c + ci) * plane;
                            for idx in base..base + plane {
                                let dy = gout[idx];
                                if self.needs[input.0] {
                                    up_in[input.0][idx] += dy * g[ci] * inv_std[ci];
                                }
                                if self.needs[gamma.0] {
                                    up_in[gamma.0][ci] += dy * (x[idx] - mean[ci]) * inv_std[ci];
                                }
                                if self.needs[beta.0] {
                                    up_in[beta.0][ci] += dy;
                                }
                            }
                        }
                    }
                }
                Op::Affine { input, weight, bias } => {
                    let n = self.shapes[input.0][0];
                    let k = self.shapes[input.0][1];
                    let m = self.shapes[weight.0][1];
                    let x = &self.datas[input.0];
                    let wdat = &self.datas[weight.0];
                    let needs_x = self.needs[input.0];
                    let needs_w = self.needs[weight.0];
                    let needs_b = self.needs[bias.0];
                    // Split disjoint grad buffers out of up_in one at a time.
                    if needs_w {
                        let gw = &mut up_in[weight.0];
                        kernels::affine_backward(x, wdat, gout, n, k, m, None, Some(gw), None);
                    }
                    if needs_b {
                        let gb = &mut up_in[bias.0];
                        kernels::affine_backward(x, wdat, gout, n, k, m, None, None, Some(gb));
                    }
                    if needs_x {
                        let gx = &mut up_in[input.0];
                        kernels::affine_backward(x, wdat, gout, n, k, m, Some(gx), None, None);
                    }
                }
                Op::Relu { input } => {
                    let x = &self.datas[input.0];
                    let gi = &mut up_in[input.0];
                    for (j, &xv) in x.iter().enumerate() {
                        if xv > 0.0 {
                            gi[j] += gout[j];
                        }
                    }
                }
                Op::LeakyRelu { input, slope } => {
                    let x = &self.datas[input.0];
                    let gi = &mut up_in[input.0];
                    for (j, &xv) in x.iter().enumerate() {
                        gi[j] += gout[j] * if xv > 0.0 { 1.0 } else { *slope };
                    }
                }
                Op::Sigmoid { input } => {
                    let y = &self.datas[i];
                    let gi = &mut up_in[input.0];
                    for (j, &yv) in y.iter().enumerate() {
                        gi[j] += gout[j] * yv * (1.0 - yv);
                    }
                }
                Op::Softmax { input, axis } => {
                    let shape = &self.shapes[i];
                    let len = shape[*axis];
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let outer: usize = shape[..*axis].iter().product();
                    let s = &self.datas[i];
                    let gi = &mut up_in[input.0];
                    for o in 0..outer {
                        for ii in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + ii;
                            let mut dot = 0.0;
                            for j in 0..len {
                                dot += gout[at(j)] * s[at(j)];
                            }
                            for j in 0..len {
                                gi[at(j)] += s[at(j)] * (gout[at(j)] - dot);
                            }
                        }
                    }
                }
                Op::Reshape { input } => add_into(&mut up_in[input.0], gout),
                Op::Add { a, b } => {
                    if self.needs[a.0] {
                        add_into(&mut up_in[a.0], gout);
                    }
                    if self.needs[b.0] {
                        add_into(&mut up_in[b.0], gout);
                    }
                }
                Op::Sub { a, b } => {
                    if self.needs[a.0] {
                        add_into(&mut up_in[a.0], gout);
                    }
                    if self.needs[b.0] {
                        for (gv, &go) in up_in[b.0].iter_mut().zip(gout) {
                            *gv -= go;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    // a == b is legal: both contributions accumulate.
                    if self.needs[a.0] {
                        let bd = &self.datas[b.0];
                        let ga = &mut up_in[a.0];
                        for j in 0..gout.len() {
                            ga[j] += gout[j] * bd[j];
                        }
                    }
                    if self.needs[b.0] {
                        let ad = &self.datas[a.0];
                        let gb = &mut up_in[b.0];
                        for j in 0..gout.len() {
                            gb[j] += gout[j] * ad[j];
                        }
                    }
                }
                Op::Scale { input, factor } => {
                    let gi = &mut up_in[input.0];
                    for (gv, &go) in gi.iter_mut().zip(gout) {
                        *gv += go * factor;
                    }
                }
                Op::OneMinus { input } => {
                    let gi = &mut up_in[input.0];
                    for (gv, &go) in gi.iter_mut().zip(gout) {
                        *gv -= go;
                    }
                }
                Op::SumAll { input } => {
                    let g = gout[0];
                    up_in[input.0].iter_mut().for_each(|v| *v += g);
                }
                Op::NegMeanLog { input } => {
                    let g = gout[0];
                    let x = &self.datas[input.0];
                    let n = x.len() as f64;
                    let gi = &mut up_in[input.0];
                    for (j, &xv) in x.iter().enumerate() {
                        gi[j] -= g / (n * xv);
                    }
                }
                Op::MseLoss { a, b } => {
                    let g = gout[0];
                    let va = &self.datas[a.0];
                    let vb = &self.datas[b.0];
                    let n = va.len() as f64;
                    if self.needs[a.0] {
                        let ga = &mut up_in[a.0];
                        for j in 0..va.len() {
                            ga[j] += g * 2.0 * (va[j] - vb[j]) / n;
                        }
                    }
                    if self.needs[b.0] {
                        let gb = &mut up_in[b.0];
                        for j in 0..va.len() {
                            gb[j] -= g * 2.0 * (va[j] - vb[j]) / n;
                        }
                    }
                }
                Op::CrossEntropyLogits { logits, labels, probs } => {
                    let g = gout[0];
                    let n = labels.len();
                    let k = probs.len() / n;
                    let gl = &mut up_in[logits.0];
                    for row in 0..n {
                        for j in 0..k {
                            let ind = if labels[row] == j { 1.0 } else { 0.0 };
                            gl[row * k + j] += g * (probs[row * k + j] - ind) / n as f64;
                        }
                    }
                }
                Op::MiLowerBound { logits, codes, probs } => {
                    let g = gout[0];
                    let n = codes.len();
                    let k = probs.len() / n;
                    let gl = &mut up_in[logits.0];
                    for row in 0..n {
                        for j in 0..k {
                            let ind = if codes[row] == j { 1.0 } else { 0.0 };
                            gl[row * k + j] += g * (ind - probs[row * k + j]) / n as f64;
                        }
                    }
                }
            }
        }
        // Fold this sweep into the persistent per-node gradients.
        for (acc, local) in self.grads.iter_mut().zip(&upstream) {
            if !local.is_empty() {
                add_into(acc, local);
            }
        }
        Ok(())
    }

    /// Clears all accumulated gradients without dropping the graph.
    pub fn zero_grad(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    // ── helpers ──────────────────────────────────────────────────────

    fn dims4(&self, op: &'static str, id: ValueId) -> Result<(usize, usize, usize, usize), TapeError> {
        let s = &self.shapes[id.0];
        if s.len() != 4 {
            return Err(TapeError::BadRank { op, expected: 4, shape: s.clone() });
        }
        Ok((s[0], s[1], s[2], s[3]))
    }

    fn dims4_unchecked(&self, id: ValueId) -> (usize, usize, usize, usize) {
        let s = &self.shapes[id.0];
        (s[0], s[1], s[2], s[3])
    }

    fn require_shape(&self, context: &str, id: ValueId, expected: &[usize]) -> Result<(), TapeError> {
        crate::tensor::require_same_shape(context, &self.shapes[id.0], expected)?;
        Ok(())
    }

    fn elementwise_pair(
        &mut self,
        name: &str,
        a: ValueId,
        b: ValueId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<ValueId, TapeError> {
        crate::tensor::require_same_shape(name, &self.shapes[a.0], &self.shapes[b.0])?;
        let out = self.datas[a.0]
            .iter()
            .zip(&self.datas[b.0])
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs[a.0] || self.needs[b.0];
        Ok(self.push(self.shapes[a.0].clone(), out, needs, op))
    }
}

fn add_into(acc: &mut [f64], src: &[f64]) {
    for (a, s) in acc.iter_mut().zip(src) {
        *a += s;
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
