//! Oracle tests for the tape: convolutions against naive direct-loop
//! references, the conv/conv-transpose adjoint identity, and central
//! finite differences for every differentiable operation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use roadmark::tape::{Tape, TapeError, ValueId};

mod common;
use common::{max_abs_diff, naive_conv2d, naive_conv2d_transpose};

fn randn(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

// ── forward oracles ──────────────────────────────────────────────────

#[test]
fn conv2d_identity_kernel_passes_input_through() {
    let mut tape = Tape::new();
    let x = tape
        .leaf(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect(), false)
        .unwrap();
    let k = tape.leaf(&[1, 1, 1, 1], vec![1.0], false).unwrap();
    let b = tape.leaf(&[1], vec![0.0], false).unwrap();
    let y = tape.conv2d(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.data(y), tape.data(x));
}

#[test]
fn conv2d_zero_kernel_annihilates() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut tape = Tape::new();
    let x = tape.leaf(&[2, 3, 5, 5], randn(&mut rng, 150), false).unwrap();
    let k = tape.leaf(&[4, 3, 3, 3], vec![0.0; 108], false).unwrap();
    let b = tape.leaf(&[4], vec![0.0; 4], false).unwrap();
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    assert!(tape.data(y).iter().all(|&v| v == 0.0));
}

#[test]
fn conv2d_matches_naive_oracle_on_spec_case() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, c, h, w, f, kh, kw, stride, pad) = (2, 3, 8, 8, 4, 3, 3, 2, 1);
    let input = randn(&mut rng, n * c * h * w);
    let kernel = randn(&mut rng, f * c * kh * kw);
    let bias = randn(&mut rng, f);
    let (expect, ho, wo) = naive_conv2d(&input, &kernel, &bias, n, c, h, w, f, kh, kw, stride, pad);

    let mut tape = Tape::new();
    let xi = tape.leaf(&[n, c, h, w], input, false).unwrap();
    let ki = tape.leaf(&[f, c, kh, kw], kernel, false).unwrap();
    let bi = tape.leaf(&[f], bias, false).unwrap();
    let y = tape.conv2d(xi, ki, bi, stride, pad).unwrap();
    assert_eq!(tape.shape(y), &[n, f, ho, wo]);
    assert!(max_abs_diff(tape.data(y), &expect) < 1e-12);
}

#[test]
fn conv_oracles_across_geometry_grid() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for &stride in &[1usize, 2] {
        for &pad in &[0usize, 1] {
            for &k in &[1usize, 3, 4] {
                // Pick input sizes the geometry admits.
                let h = match (stride, pad, k) {
                    (2, 0, 1) => 7,
                    (2, 0, 3) => 9,
                    (2, 0, 4) => 8,
                    (2, 1, 1) => 7,
                    (2, 1, 3) => 7,
                    (2, 1, 4) => 8,
                    _ => 8,
                };
                if h + 2 * pad < k {
                    continue;
                }
                let (n, c, f) = (2, 3, 2);
                let input = randn(&mut rng, n * c * h * h);
                let kernel = randn(&mut rng, f * c * k * k);
                let bias = randn(&mut rng, f);
                let (expect, ho, wo) =
                    naive_conv2d(&input, &kernel, &bias, n, c, h, h, f, k, k, stride, pad);
                let mut tape = Tape::new();
                let xi = tape.leaf(&[n, c, h, h], input.clone(), false).unwrap();
                let ki = tape.leaf(&[f, c, k, k], kernel.clone(), false).unwrap();
                let bi = tape.leaf(&[f], bias.clone(), false).unwrap();
                let y = tape.conv2d(xi, ki, bi, stride, pad).unwrap();
                assert_eq!(tape.shape(y), &[n, f, ho, wo], "grid s{stride} p{pad} k{k}");
                assert!(
                    max_abs_diff(tape.data(y), &expect) < 1e-12,
                    "conv2d grid s{stride} p{pad} k{k}"
                );

                // Transposed convolution against its own scatter oracle,
                // kernel reinterpreted as [C,F,kh,kw] with C = f.
                let tin = randn(&mut rng, n * f * ho * wo);
                let tbias = randn(&mut rng, c);
                let kernel_t = kernel.clone(); // [f, c, k, k] read as [C=f, F=c, k, k]
                let (texpect, th, tw) = naive_conv2d_transpose(
                    &tin, &kernel_t, &tbias, n, f, ho, wo, c, k, k, stride, pad,
                );
                let mut tape = Tape::new();
                let yi = tape.leaf(&[n, f, ho, wo], tin, false).unwrap();
                let ki = tape.leaf(&[f, c, k, k], kernel_t, false).unwrap();
                let bi = tape.leaf(&[c], tbias, false).unwrap();
                let z = tape.conv2d_transpose(yi, ki, bi, stride, pad).unwrap();
                assert_eq!(tape.shape(z), &[n, c, th, tw], "grid s{stride} p{pad} k{k}");
                assert!(
                    max_abs_diff(tape.data(z), &texpect) < 1e-12,
                    "conv2d_transpose grid s{stride} p{pad} k{k}"
                );
            }
        }
    }
}

#[test]
fn conv_transpose_broadcasts_single_pixel() {
    let mut tape = Tape::new();
    let v = 2.75;
    let x = tape.leaf(&[1, 1, 1, 1], vec![v], false).unwrap();
    let k = tape.leaf(&[1, 1, 2, 2], vec![1.0; 4], false).unwrap();
    let b = tape.leaf(&[1], vec![0.0], false).unwrap();
    let y = tape.conv2d_transpose(x, k, b, 1, 0).unwrap();
    assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
    assert!(tape.data(y).iter().all(|&o| o == v));
}

#[test]
fn conv_transpose_zero_input_gives_zero_output() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 2, 4, 4], vec![0.0; 32], false).unwrap();
    let k = tape.leaf(&[2, 3, 4, 4], randn(&mut rng, 96), false).unwrap();
    let b = tape.leaf(&[3], vec![0.0; 3], false).unwrap();
    let y = tape.conv2d_transpose(x, k, b, 2, 1).unwrap();
    assert!(tape.data(y).iter().all(|&o| o == 0.0));
}

/// `<conv(x,k), y> == <x, conv_transpose(y,k)>` for every grid geometry.
#[test]
fn conv_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for &stride in &[1usize, 2] {
        for &pad in &[0usize, 1] {
            for &k in &[1usize, 3, 4] {
                let h = if stride == 2 && k % 2 == 1 { 7 } else { 8 };
                if h + 2 * pad < k {
                    continue;
                }
                let (n, c, f) = (2, 3, 4);
                let ho = (h + 2 * pad - k) / stride + 1;
                let x = randn(&mut rng, n * c * h * h);
                let kern = randn(&mut rng, f * c * k * k);
                let y = randn(&mut rng, n * f * ho * ho);

                let mut tape = Tape::new();
                let xi = tape.leaf(&[n, c, h, h], x.clone(), false).unwrap();
                let ki = tape.leaf(&[f, c, k, k], kern.clone(), false).unwrap();
                let zb = tape.leaf(&[f], vec![0.0; f], false).unwrap();
                let con = tape.conv2d(xi, ki, zb, stride, pad).unwrap();
                let lhs: f64 = tape.data(con).iter().zip(&y).map(|(a, b)| a * b).sum();

                let yi = tape.leaf(&[n, f, ho, ho], y.clone(), false).unwrap();
                let zb2 = tape.leaf(&[c], vec![0.0; c], false).unwrap();
                let cot = tape.conv2d_transpose(yi, ki, zb2, stride, pad).unwrap();
                let rhs: f64 = tape.data(cot).iter().zip(&x).map(|(a, b)| a * b).sum();

                assert!(
                    (lhs - rhs).abs() < 1e-10,
                    "adjoint s{stride} p{pad} k{k}: {lhs} vs {rhs}"
                );
            }
        }
    }
}

// ── shape errors ─────────────────────────────────────────────────────

#[test]
fn conv2d_reports_channel_mismatch() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 3, 4, 4], vec![0.0; 48], false).unwrap();
    let k = tape.leaf(&[2, 4, 3, 3], vec![0.0; 72], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    match tape.conv2d(x, k, b, 1, 1) {
        Err(TapeError::ChannelMismatch { input_channels: 3, kernel_channels: 4, .. }) => {}
        other => panic!("expected channel mismatch, got {other:?}"),
    }
}

#[test]
fn conv2d_reports_invalid_output_geometry() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 1, 2, 2], vec![0.0; 4], false).unwrap();
    let k = tape.leaf(&[1, 1, 4, 4], vec![0.0; 16], false).unwrap();
    let b = tape.leaf(&[1], vec![0.0], false).unwrap();
    match tape.conv2d(x, k, b, 1, 0) {
        Err(TapeError::NonIntegralOutput { input: 2, kernel: 4, .. }) => {}
        other => panic!("expected invalid geometry error, got {other:?}"),
    }
}

// ── simple op examples ───────────────────────────────────────────────

#[test]
fn softmax_of_zeros_is_uniform() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[10], vec![0.0; 10], false).unwrap();
    let s = tape.softmax(x, 0).unwrap();
    for &v in tape.data(s) {
        assert!((v - 0.1).abs() < 1e-15);
    }
}

#[test]
fn sigmoid_at_zero_is_half() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1], vec![0.0], false).unwrap();
    let s = tape.sigmoid(x);
    assert_eq!(tape.data(s)[0], 0.5);
}

#[test]
fn relu_gradient_is_zero_left_one_right() {
    for (x, expect) in [(-1.0, 0.0), (1.0, 1.0)] {
        let mut tape = Tape::new();
        let xi = tape.leaf(&[1], vec![x], true).unwrap();
        let r = tape.relu(xi);
        let loss = tape.sum_all(r);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(xi)[0], expect);
    }
}

#[test]
fn batchnorm_collapses_constant_channel_to_beta() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[2, 1, 2, 2], vec![3.0; 8], false).unwrap();
    let g = tape.leaf(&[1], vec![1.0], false).unwrap();
    let b = tape.leaf(&[1], vec![0.0], false).unwrap();
    let (y, mean, var) = tape.batchnorm_train(x, g, b, 1e-5).unwrap();
    assert!((mean[0] - 3.0).abs() < 1e-12);
    assert!(var[0].abs() < 1e-12);
    assert!(tape.data(y).iter().all(|&v| v.abs() < 1e-2));
}

#[test]
fn batchnorm_train_normalizes_per_channel() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (n, c, h, w) = (4, 3, 5, 5);
    let mut tape = Tape::new();
    let x = tape.leaf(&[n, c, h, w], randn(&mut rng, n * c * h * w), false).unwrap();
    let g = tape.leaf(&[c], vec![1.0; c], false).unwrap();
    let b = tape.leaf(&[c], vec![0.0; c], false).unwrap();
    let (y, _, _) = tape.batchnorm_train(x, g, b, 1e-9).unwrap();
    let out = tape.data(y);
    let plane = h * w;
    let count = (n * plane) as f64;
    for ci in 0..c {
        let mut s = 0.0;
        let mut s2 = 0.0;
        for ni in 0..n {
            for p in 0..plane {
                let v = out[(ni * c + ci) * plane + p];
                s += v;
                s2 += v * v;
            }
        }
        let mean = s / count;
        let var = s2 / count - mean * mean;
        assert!(mean.abs() < 1e-10, "channel {ci} mean {mean}");
        assert!((var - 1.0).abs() < 1e-6, "channel {ci} var {var}");
    }
}

#[test]
fn batchnorm_eval_matches_closed_form() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 1, 1, 2], vec![2.0, 5.0], false).unwrap();
    let g = tape.leaf(&[1], vec![1.5], false).unwrap();
    let b = tape.leaf(&[1], vec![0.25], false).unwrap();
    let (m, v, eps) = (1.0, 4.0, 1e-5);
    let y = tape.batchnorm_eval(x, g, b, &[m], &[v], eps).unwrap();
    for (i, &xv) in [2.0, 5.0].iter().enumerate() {
        let expect = 1.5 * (xv - m) / (v + eps).sqrt() + 0.25;
        assert!((tape.data(y)[i] - expect).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_rejects_degenerate_batch() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[1, 2, 1, 1], vec![1.0, 2.0], false).unwrap();
    let g = tape.leaf(&[2], vec![1.0; 2], false).unwrap();
    let b = tape.leaf(&[2], vec![0.0; 2], false).unwrap();
    match tape.batchnorm_train(x, g, b, 1e-5) {
        Err(TapeError::DegenerateBatch { count: 1 }) => {}
        other => panic!("expected degenerate batch error, got {other:?}"),
    }
}

// ── backward contracts ───────────────────────────────────────────────

#[test]
fn backward_of_sum_of_squares_is_two_x() {
    let mut tape = Tape::new();
    let data = vec![1.0, -2.0, 0.5, 3.0];
    let x = tape.leaf(&[4], data.clone(), true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    for (g, v) in tape.grad(x).iter().zip(&data) {
        assert!((g - 2.0 * v).abs() < 1e-15);
    }
}

#[test]
fn two_backwards_double_the_gradients() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[3], vec![0.5, 1.5, -0.25], true).unwrap();
    let sq = tape.mul(x, x).unwrap();
    let loss = tape.sum_all(sq);
    tape.backward(loss).unwrap();
    let first: Vec<f64> = tape.grad(x).to_vec();
    tape.backward(loss).unwrap();
    for (g, f) in tape.grad(x).iter().zip(&first) {
        assert_eq!(*g, 2.0 * f, "accumulation must be exact doubling");
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut tape = Tape::new();
    let x = tape.leaf(&[2], vec![1.0, 2.0], true).unwrap();
    match tape.backward(x) {
        Err(TapeError::NonScalarLoss { .. }) => {}
        other => panic!("expected non-scalar loss error, got {other:?}"),
    }
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut tape = Tape::new();
        let x = tape.leaf(&[2, 3, 8, 8], randn(&mut rng, 384), true).unwrap();
        let k = tape.leaf(&[4, 3, 3, 3], randn(&mut rng, 108), true).unwrap();
        let b = tape.leaf(&[4], randn(&mut rng, 4), true).unwrap();
        let y = tape.conv2d(x, k, b, 2, 1).unwrap();
        let a = tape.leaky_relu(y, 0.2);
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.mean_all(sq);
        tape.backward(loss).unwrap();
        (tape.grad(x).to_vec(), tape.grad(k).to_vec())
    };
    let (gx1, gk1) = run();
    let (gx2, gk2) = run();
    assert_eq!(gx1, gx2);
    assert_eq!(gk1, gk2);
}

// ── finite differences ───────────────────────────────────────────────

struct FdCheck {
    step: f64,
    tol: f64,
}

impl Default for FdCheck {
    fn default() -> Self {
        FdCheck { step: 1e-4, tol: 1e-3 }
    }
}

impl FdCheck {
    /// Checks d(loss)/d(inputs[target]) against central differences for
    /// every element of the target input.
    fn run<F>(&self, shapes: &[Vec<usize>], datas: &[Vec<f64>], target: usize, build: F)
    where
        F: Fn(&mut Tape, &[ValueId]) -> ValueId,
    {
        let mut tape = Tape::new();
        let ids: Vec<ValueId> = shapes
            .iter()
            .zip(datas)
            .map(|(s, d)| tape.leaf(s, d.clone(), true).unwrap())
            .collect();
        let loss = build(&mut tape, &ids);
        tape.backward(loss).unwrap();
        let analytic = tape.grad(ids[target]).to_vec();

        let eval = |datas: &[Vec<f64>]| -> f64 {
            let mut tape = Tape::new();
            let ids: Vec<ValueId> = shapes
                .iter()
                .zip(datas)
                .map(|(s, d)| tape.leaf(s, d.clone(), false).unwrap())
                .collect();
            let loss = build(&mut tape, &ids);
            tape.item(loss)
        };

        for i in 0..datas[target].len() {
            let mut plus = datas.to_vec();
            plus[target][i] += self.step;
            let mut minus = datas.to_vec();
            minus[target][i] -= self.step;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * self.step);
            let denom = analytic[i].abs().max(numeric.abs()).max(1e-6);
            let rel = (analytic[i] - numeric).abs() / denom;
            assert!(
                rel < self.tol,
                "input {target} elem {i}: analytic {} vs numeric {} (rel {rel})",
                analytic[i],
                numeric
            );
        }
    }
}

#[test]
fn fd_conv2d_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let shapes = vec![vec![2, 2, 6, 6], vec![3, 2, 3, 3], vec![3]];
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let y = tape.conv2d(ids[0], ids[1], ids[2], 1, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    };
    for target in 0..3 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}

#[test]
fn fd_conv2d_transpose_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let shapes = vec![vec![2, 3, 4, 4], vec![3, 2, 4, 4], vec![2]];
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let y = tape.conv2d_transpose(ids[0], ids[1], ids[2], 2, 1).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    };
    for target in 0..3 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}

#[test]
fn fd_batchnorm_train_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let shapes = vec![vec![3, 2, 4, 4], vec![2], vec![2]];
    let mut datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    datas[1] = vec![1.2, 0.8];
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let (y, _, _) = tape.batchnorm_train(ids[0], ids[1], ids[2], 1e-5).unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    };
    for target in 0..3 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}

#[test]
fn fd_batchnorm_eval_all_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let shapes = vec![vec![2, 2, 3, 3], vec![2], vec![2]];
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let y = tape
            .batchnorm_eval(ids[0], ids[1], ids[2], &[0.3, -0.2], &[1.5, 0.7], 1e-5)
            .unwrap();
        let sq = tape.mul(y, y).unwrap();
        tape.mean_all(sq)
    };
    for target in 0..3 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}

#[test]
fn fd_affine_activations_softmax_chain() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let shapes = vec![vec![4, 6], vec![6, 5], vec![5]];
    let datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let y = tape.affine(ids[0], ids[1], ids[2]).unwrap();
        let a = tape.leaky_relu(y, 0.2);
        let s = tape.sigmoid(a);
        let sm = tape.softmax(s, 1).unwrap();
        let sq = tape.mul(sm, sm).unwrap();
        tape.mean_all(sq)
    };
    for target in 0..3 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}

#[test]
fn fd_fused_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);

    // neg_mean_log over (0,1) values combined with one_minus.
    let probs: Vec<f64> = (0..6).map(|_| rng.gen_range(0.05..0.95)).collect();
    FdCheck::default().run(&[vec![6]], &[probs], 0, |tape, ids| {
        let a = tape.neg_mean_log(ids[0]).unwrap();
        let om = tape.one_minus(ids[0]);
        let b = tape.neg_mean_log(om).unwrap();
        tape.add(a, b).unwrap()
    });

    // mse between two tensors.
    let a = randn(&mut rng, 12);
    let b = randn(&mut rng, 12);
    for target in 0..2 {
        FdCheck::default().run(
            &[vec![3, 4], vec![3, 4]],
            &[a.clone(), b.clone()],
            target,
            |tape, ids| tape.mse_loss(ids[0], ids[1]).unwrap(),
        );
    }

    // cross entropy from logits.
    let logits = randn(&mut rng, 4 * 5);
    FdCheck::default().run(&[vec![4, 5]], &[logits], 0, |tape, ids| {
        tape.cross_entropy_logits(ids[0], &[0, 3, 2, 4]).unwrap()
    });

    // mutual information lower bound.
    let logits = randn(&mut rng, 6 * 4);
    FdCheck::default().run(&[vec![6, 4]], &[logits], 0, |tape, ids| {
        tape.mi_lower_bound(ids[0], &[0, 1, 2, 3, 0, 1]).unwrap()
    });
}

#[test]
fn fd_small_autoencoder_stack() {
    // Conv -> batchnorm -> leaky-relu -> transposed conv -> sigmoid -> mse,
    // the exact op chain the generator uses, at toy size.
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let shapes = vec![
        vec![2, 1, 8, 8],  // input
        vec![3, 1, 4, 4],  // encoder kernel
        vec![3],           // encoder bias
        vec![3],           // gamma
        vec![3],           // beta
        vec![3, 1, 4, 4],  // decoder kernel
        vec![1],           // decoder bias
        vec![2, 1, 8, 8],  // target
    ];
    let mut datas: Vec<Vec<f64>> = shapes
        .iter()
        .map(|s| randn(&mut rng, s.iter().product()))
        .collect();
    datas[3] = vec![1.1, 0.9, 1.05];
    let build = |tape: &mut Tape, ids: &[ValueId]| {
        let enc = tape.conv2d(ids[0], ids[1], ids[2], 2, 1).unwrap();
        let (bn, _, _) = tape.batchnorm_train(enc, ids[3], ids[4], 1e-5).unwrap();
        let act = tape.leaky_relu(bn, 0.2);
        let dec = tape.conv2d_transpose(act, ids[5], ids[6], 2, 1).unwrap();
        let out = tape.sigmoid(dec);
        tape.mse_loss(out, ids[7]).unwrap()
    };
    for target in 0..7 {
        FdCheck::default().run(&shapes, &datas, target, build);
    }
}
