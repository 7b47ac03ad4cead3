//! Exhaustive finite-difference verification of every parameter gradient
//! of the three networks under their actual training losses, at reduced
//! geometry so the full sweep stays fast.
//!
//! Each parameter's tape gradient is compared against a central difference
//! at step 1e-4. A parameter that misses the tolerance is re-checked at
//! 1e-6: a relu/leaky-relu kink crossing inside the primary stencil shows
//! up as a discrepancy that vanishes with the step, while a genuine
//! gradient bug persists. Re-checked parameters are reported as excluded
//! kink neighbors, never silently passed.

use crate::losses::{self, LossWeights};
use crate::models::{
    latent_batch, AugmentGeneratorNet, DiscriminatorNet, GeneratorNet, LatentCode, Mode, NetConfig,
};
use crate::pipeline::PipelineError;
use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;

pub const FD_STEP: f64 = 1e-4;
pub const FD_TOLERANCE: f64 = 1e-3;
const RECHECK_STEP: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct NetReport {
    pub net: String,
    pub params_checked: usize,
    /// Largest relative error at the primary step over non-excluded params.
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Parameters excluded as kink-adjacent (they passed the recheck).
    pub kink_excluded: usize,
    pub failed: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub nets: Vec<NetReport>,
    pub seed: u64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.nets.iter().all(|n| n.failed.is_empty() && n.max_rel_error < FD_TOLERANCE)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.nets.iter().map(|n| n.max_rel_error).fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for n in &self.nets {
            let _ = writeln!(
                out,
                "{}: {} parameters, max rel error {:.3e} (worst {}), {} kink-adjacent excluded, {} failed",
                n.net, n.params_checked, n.max_rel_error, n.worst_param, n.kink_excluded,
                n.failed.len()
            );
        }
        let _ = writeln!(
            out,
            "overall: max rel error {:.3e} over {} parameters -> {}",
            self.max_rel_error(),
            self.nets.iter().map(|n| n.params_checked).sum::<usize>(),
            if self.passed() { "PASS" } else { "FAIL" }
        );
        out
    }
}

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Checks one network whose loss is rebuilt by `build` from the parameter
/// value vectors (aligned with the ParamSet order).
fn check_net<F>(
    name: &str,
    param_names: &[String],
    base: &[Vec<f64>],
    mut build: F,
) -> Result<NetReport, PipelineError>
where
    F: FnMut(&[Vec<f64>], bool) -> Result<(f64, Option<Vec<Vec<f64>>>), PipelineError>,
{
    let (_, grads) = build(base, true)?;
    let grads = grads.expect("gradients requested");
    let mut report = NetReport {
        net: name.to_string(),
        params_checked: 0,
        max_rel_error: 0.0,
        worst_param: String::new(),
        kink_excluded: 0,
        failed: Vec::new(),
    };
    let mut values = base.to_vec();
    for p in 0..base.len() {
        for i in 0..base[p].len() {
            report.params_checked += 1;
            let fd = |values: &mut Vec<Vec<f64>>, step: f64,
                      build: &mut F|
             -> Result<f64, PipelineError> {
                let orig = values[p][i];
                values[p][i] = orig + step;
                let (plus, _) = build(values, false)?;
                values[p][i] = orig - step;
                let (minus, _) = build(values, false)?;
                values[p][i] = orig;
                Ok((plus - minus) / (2.0 * step))
            };
            let numeric = fd(&mut values, FD_STEP, &mut build)?;
            let analytic = grads[p][i];
            let err = rel_err(analytic, numeric);
            if err < FD_TOLERANCE {
                if err > report.max_rel_error {
                    report.max_rel_error = err;
                    report.worst_param = format!("{}[{}]", param_names[p], i);
                }
                continue;
            }
            // Candidate kink crossing: re-check with a far smaller stencil.
            let numeric_small = fd(&mut values, RECHECK_STEP, &mut build)?;
            if rel_err(analytic, numeric_small) < FD_TOLERANCE {
                report.kink_excluded += 1;
            } else {
                report.failed.push(format!(
                    "{}[{}]: analytic {analytic:.6e}, fd {numeric:.6e}, fd_small {numeric_small:.6e}",
                    param_names[p], i
                ));
            }
        }
    }
    Ok(report)
}

struct Fixture {
    cfg: NetConfig,
    weights: LossWeights,
    clean: Tensor,
    corrupted: Tensor,
    negatives: Tensor,
    labels: Vec<usize>,
    null_labels: Vec<usize>,
    codes: Vec<LatentCode>,
}

fn fixture(seed: u64, batch: usize) -> Fixture {
    let cfg = NetConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plane = cfg.patch * cfg.patch;
    let mut image = |contrast: f64| -> Tensor {
        let data: Vec<f64> = (0..batch * plane)
            .map(|_| 0.5 + contrast * rng.gen_range(-0.5..0.5))
            .collect();
        Tensor::new(vec![batch, 1, cfg.patch, cfg.patch], data).expect("sized")
    };
    let clean = image(0.9);
    let corrupted = image(0.9);
    let negatives = image(0.6);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..cfg.classes - 1)).collect();
    let null_labels = vec![cfg.classes - 1; batch];
    let codes: Vec<LatentCode> = (0..batch)
        .map(|_| {
            let class = rng.gen_range(0..cfg.classes);
            let z: Vec<f64> = (0..cfg.latent).map(|_| rng.sample(StandardNormal)).collect();
            LatentCode::new(class, z, &cfg).expect("valid")
        })
        .collect();
    Fixture {
        cfg,
        weights: LossWeights::default(),
        clean,
        corrupted,
        negatives,
        labels,
        null_labels,
        codes,
    }
}

fn stage_values(
    tape: &mut Tape,
    shapes: &[Vec<usize>],
    values: &[Vec<f64>],
    with_grad: bool,
) -> Vec<ValueId> {
    shapes
        .iter()
        .zip(values)
        .map(|(s, v)| tape.leaf(s, v.clone(), with_grad).expect("well formed"))
        .collect()
}

fn param_layout(params: &crate::optim::ParamSet) -> (Vec<String>, Vec<Vec<usize>>, Vec<Vec<f64>>) {
    let mut names = Vec::new();
    let mut shapes = Vec::new();
    let mut values = Vec::new();
    for p in params.iter() {
        names.push(p.name.clone());
        shapes.push(p.value.shape().to_vec());
        values.push(p.value.data().to_vec());
    }
    (names, shapes, values)
}

/// Runs the full sweep: generator loss, discriminator loss (all three
/// heads) and augmenter loss on an `batch`-sample fixture.
pub fn run(seed: u64, batch: usize) -> Result<GradCheckReport, PipelineError> {
    let fx = fixture(seed, batch);
    let cfg = fx.cfg;

    let mut gen = GeneratorNet::new(cfg)?;
    let mut disc = DiscriminatorNet::new(cfg)?;
    let mut aug = AugmentGeneratorNet::new(cfg)?;
    gen.init(seed ^ 0x11);
    disc.init(seed ^ 0x22);
    aug.init(seed ^ 0x33);

    let (g_names, g_shapes, g_values) = param_layout(&gen.params);
    let (d_names, d_shapes, d_values) = param_layout(&disc.params);
    let (a_names, a_shapes, a_values) = param_layout(&aug.params);

    // Generator under the full generator-step objective (frozen D).
    let gen_report = {
        let gen = &mut gen;
        let disc = &mut disc;
        let fx = &fx;
        let shapes = g_shapes.clone();
        check_net("generator", &g_names, &g_values, move |values, want_grads| {
            let mut tape = Tape::new();
            let g_ids = stage_values(&mut tape, &shapes, values, want_grads);
            let d_ids = disc.params.stage(&mut tape, false);
            let x = tape.constant(&fx.clean);
            let xt = tape.constant(&fx.corrupted);
            let gx = gen.forward(&mut tape, &g_ids, xt, Mode::Train)?;
            let d_gx = disc.forward(&mut tape, &d_ids, gx, Mode::Train)?;
            let d_x = disc.forward(&mut tape, &d_ids, x, Mode::Train)?;
            let adv = losses::adv_loss_generator(&mut tape, d_gx.real_prob)?;
            let onehot = one_hot(&fx.labels, fx.cfg.classes);
            let mi = losses::mi_lower_bound(&mut tape, &onehot, d_gx.mi_logits)?;
            let l_gd = losses::adversarial_with_mi(&mut tape, adv, mi, fx.weights.lambda_mi)?;
            let mse = losses::mse_loss(&mut tape, x, gx)?;
            let mse_sum = tape.scale(mse, (fx.cfg.patch * fx.cfg.patch) as f64);
            let clc = losses::classification_loss(
                &mut tape,
                d_gx.class_logits,
                d_x.class_logits,
                &fx.labels,
            )?;
            let total = losses::total_loss(&mut tape, l_gd, mse_sum, clc, &fx.weights)?;
            finish(&mut tape, total, &g_ids, want_grads)
        })?
    };

    // Discriminator under the full discriminator-step objective: the
    // adversarial head, the class head on three streams and the MI head.
    let disc_report = {
        let gen = &mut gen;
        let disc = &mut disc;
        let fx = &fx;
        let shapes = d_shapes.clone();
        check_net("discriminator", &d_names, &d_values, move |values, want_grads| {
            let mut tape = Tape::new();
            let g_ids = gen.params.stage(&mut tape, false);
            let d_ids = stage_values(&mut tape, &shapes, values, want_grads);
            let x = tape.constant(&fx.clean);
            let xt = tape.constant(&fx.corrupted);
            let nt = tape.constant(&fx.negatives);
            let gx = gen.forward(&mut tape, &g_ids, xt, Mode::Train)?;
            let d_x = disc.forward(&mut tape, &d_ids, x, Mode::Train)?;
            let d_gx = disc.forward(&mut tape, &d_ids, gx, Mode::Train)?;
            let d_nt = disc.forward(&mut tape, &d_ids, nt, Mode::Train)?;
            let adv = losses::adv_loss_discriminator(&mut tape, d_x.real_prob, d_gx.real_prob)?;
            let onehot = one_hot(&fx.labels, fx.cfg.classes);
            let mi = losses::mi_lower_bound(&mut tape, &onehot, d_gx.mi_logits)?;
            let l_gd = losses::adversarial_with_mi(&mut tape, adv, mi, fx.weights.lambda_mi)?;
            let ce_x = tape.cross_entropy_logits(d_x.class_logits, &fx.labels)?;
            let ce_n = tape.cross_entropy_logits(d_nt.class_logits, &fx.null_labels)?;
            let clc = tape.add(ce_x, ce_n)?;
            let total = tape.add(l_gd, clc)?;
            finish(&mut tape, total, &d_ids, want_grads)
        })?
    };

    // Augmenter under its sampler-step objective (frozen D).
    let aug_report = {
        let aug = &mut aug;
        let disc = &mut disc;
        let fx = &fx;
        let shapes = a_shapes.clone();
        check_net("augmenter", &a_names, &a_values, move |values, want_grads| {
            let mut tape = Tape::new();
            let a_ids = stage_values(&mut tape, &shapes, values, want_grads);
            let d_ids = disc.params.stage(&mut tape, false);
            let input = tape.constant(&latent_batch(&fx.codes, &fx.cfg));
            let fake = aug.forward(&mut tape, &a_ids, input, Mode::Train)?;
            let d_fake = disc.forward(&mut tape, &d_ids, fake, Mode::Train)?;
            let adv = losses::adv_loss_generator(&mut tape, d_fake.real_prob)?;
            let classes: Vec<usize> = fx.codes.iter().map(|c| c.class()).collect();
            let onehot = one_hot(&classes, fx.cfg.classes);
            let mi = losses::mi_lower_bound(&mut tape, &onehot, d_fake.mi_logits)?;
            let total = losses::adversarial_with_mi(&mut tape, adv, mi, fx.weights.lambda_mi)?;
            finish(&mut tape, total, &a_ids, want_grads)
        })?
    };

    Ok(GradCheckReport { nets: vec![gen_report, disc_report, aug_report], seed })
}

fn one_hot(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized")
}

fn finish(
    tape: &mut Tape,
    loss: ValueId,
    ids: &[ValueId],
    want_grads: bool,
) -> Result<(f64, Option<Vec<Vec<f64>>>), PipelineError> {
    let value = tape.item(loss);
    if !want_grads {
        return Ok((value, None));
    }
    tape.backward(loss)?;
    let grads = ids.iter().map(|&id| tape.grad(id).to_vec()).collect();
    Ok((value, Some(grads)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_sweep_passes() {
        let report = run(400, 4).unwrap();
        assert!(report.passed(), "{}", report.to_text());
        assert!(report.max_rel_error() < FD_TOLERANCE);
    }
}
