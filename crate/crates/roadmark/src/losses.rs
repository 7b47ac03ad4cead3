//! Objective terms: adversarial losses for both players, the analytic
//! optimal-discriminator oracle, the variational mutual-information lower
//! bound, pixel-wise reconstruction error, classification loss and the
//! weighted total.
//!
//! Every builder appends to a [`Tape`] and returns a scalar node, so the
//! terms are differentiable wherever their inputs are.

use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::Tensor;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("probability at index {index} is {value}, must lie in (0,1)")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("densities at index {index} are both zero")]
    BothZeroDensity { index: usize },
    #[error("density at index {index} is {value}, must be nonnegative")]
    NegativeDensity { index: usize, value: f64 },
    #[error("one-hot row {row} is malformed: {reason}")]
    MalformedOneHot { row: usize, reason: String },
    #[error("loss component {which} is not finite: {value}")]
    NonFiniteComponent { which: &'static str, value: f64 },
    #[error("weight {which} is {value}, must be positive")]
    BadWeight { which: &'static str, value: f64 },
}

/// Trade-off weights of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    /// Weight of the pixel-wise reconstruction term.
    pub lambda_mse: f64,
    /// Weight of the mutual-information term. Zero disables it (the
    /// plain-GAN ablation); negative values are rejected.
    pub lambda_mi: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { lambda_mse: 0.05, lambda_mi: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.lambda_mse > 0.0) || !self.lambda_mse.is_finite() {
            return Err(LossError::BadWeight { which: "lambda_mse", value: self.lambda_mse });
        }
        if !(self.lambda_mi >= 0.0) || !self.lambda_mi.is_finite() {
            return Err(LossError::BadWeight { which: "lambda_mi", value: self.lambda_mi });
        }
        Ok(())
    }
}

/// One training batch: index-aligned clean/corrupted positives plus
/// NULL-class patches.
#[derive(Debug, Clone)]
pub struct BatchDistributions {
    /// Clean positive patches `[N,1,H,W]`.
    pub real: Tensor,
    /// Corrupted versions of the same samples, index-aligned.
    pub corrupted: Tensor,
    /// Class labels of the positive samples.
    pub labels: Vec<usize>,
    /// NULL-class patches `[M,1,H,W]` (corrupted form).
    pub negatives: Tensor,
}

impl BatchDistributions {
    pub fn validate(&self) -> Result<(), TapeError> {
        crate::tensor::require_same_shape("real vs corrupted", self.real.shape(), self.corrupted.shape())?;
        Ok(())
    }
}

fn check_probabilities(tape: &Tape, id: ValueId) -> Result<(), LossError> {
    for (index, &value) in tape.data(id).iter().enumerate() {
        if !(value > 0.0 && value < 1.0) {
            return Err(LossError::ProbabilityOutOfRange { index, value });
        }
    }
    Ok(())
}

/// Discriminator side of the minimax objective:
/// `-mean(log D(X)) - mean(log(1 - D(G(X̃))))`.
pub fn adv_loss_discriminator(
    tape: &mut Tape,
    real_prob_on_x: ValueId,
    real_prob_on_gx: ValueId,
) -> Result<ValueId, LossError> {
    check_probabilities(tape, real_prob_on_x)?;
    check_probabilities(tape, real_prob_on_gx)?;
    let real_term = tape.neg_mean_log(real_prob_on_x)?;
    let flipped = tape.one_minus(real_prob_on_gx);
    let fake_term = tape.neg_mean_log(flipped)?;
    Ok(tape.add(real_term, fake_term)?)
}

/// Non-saturating generator loss `-mean(log D(G(X̃)))`; shares the minimax
/// fixed point with the literal `log(1-D)` form but keeps gradients alive
/// when the discriminator wins early.
pub fn adv_loss_generator(tape: &mut Tape, real_prob_on_gx: ValueId) -> Result<ValueId, LossError> {
    check_probabilities(tape, real_prob_on_gx)?;
    Ok(tape.neg_mean_log(real_prob_on_gx)?)
}

/// Analytic fixed point `D*(x) = p_t(x) / (p_t(x) + p_z(x))`, used as a
/// test oracle against trained discriminators, never in training.
pub fn optimal_discriminator(pt: &[f64], pz: &[f64]) -> Result<Vec<f64>, LossError> {
    assert_eq!(pt.len(), pz.len(), "density grids must align");
    pt.iter()
        .zip(pz)
        .enumerate()
        .map(|(index, (&t, &z))| {
            if t < 0.0 {
                return Err(LossError::NegativeDensity { index, value: t });
            }
            if z < 0.0 {
                return Err(LossError::NegativeDensity { index, value: z });
            }
            if t + z == 0.0 {
                return Err(LossError::BothZeroDensity { index });
            }
            Ok(t / (t + z))
        })
        .collect()
}

/// Converts validated one-hot rows to class indices.
pub fn one_hot_to_indices(code_onehot: &Tensor) -> Result<Vec<usize>, LossError> {
    let shape = code_onehot.shape();
    assert_eq!(shape.len(), 2, "one-hot codes must be [N,K]");
    let (n, k) = (shape[0], shape[1]);
    let mut indices = Vec::with_capacity(n);
    for row in 0..n {
        let slice = &code_onehot.data()[row * k..(row + 1) * k];
        let mut hot = None;
        for (i, &v) in slice.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(LossError::MalformedOneHot {
                        row,
                        reason: "more than one entry equals 1".into(),
                    });
                }
                hot = Some(i);
            } else if v != 0.0 {
                return Err(LossError::MalformedOneHot {
                    row,
                    reason: format!("entry {i} is {v}, expected 0 or 1"),
                });
            }
        }
        match hot {
            Some(i) => indices.push(i),
            None => {
                return Err(LossError::MalformedOneHot { row, reason: "no entry equals 1".into() })
            }
        }
    }
    Ok(indices)
}

/// Variational lower bound `L_I = H(c) + mean(log q(c_i | sample_i))` on the
/// mutual information between codes and generated samples, with `H(c)` taken
/// from the batch's empirical code distribution. Bounded above by `H(c)`.
pub fn mi_lower_bound(
    tape: &mut Tape,
    code_onehot: &Tensor,
    mi_logits_on_generated: ValueId,
) -> Result<ValueId, LossError> {
    let codes = one_hot_to_indices(code_onehot)?;
    Ok(tape.mi_lower_bound(mi_logits_on_generated, &codes)?)
}

/// Pixel-wise mean squared error.
pub fn mse_loss(tape: &mut Tape, x: ValueId, x_prime: ValueId) -> Result<ValueId, LossError> {
    Ok(tape.mse_loss(x, x_prime)?)
}

/// Classification loss: cross-entropy of the class head on both the
/// restored and the clean view of each sample, summed.
pub fn classification_loss(
    tape: &mut Tape,
    class_logits_on_gx: ValueId,
    class_logits_on_x: ValueId,
    labels: &[usize],
) -> Result<ValueId, LossError> {
    let on_gx = tape.cross_entropy_logits(class_logits_on_gx, labels)?;
    let on_x = tape.cross_entropy_logits(class_logits_on_x, labels)?;
    Ok(tape.add(on_gx, on_x)?)
}

/// Folds the mutual-information bound into an adversarial term:
/// `adv - lambda_mi * L_I` (the bound is maximized).
pub fn adversarial_with_mi(
    tape: &mut Tape,
    adv: ValueId,
    mi_bound: ValueId,
    lambda_mi: f64,
) -> Result<ValueId, LossError> {
    let scaled = tape.scale(mi_bound, -lambda_mi);
    Ok(tape.add(adv, scaled)?)
}

/// Weighted total `L = L_GD + lambda_mse * L_MSE + L_clc`. The MI term is
/// already inside `L_GD` (see [`adversarial_with_mi`]).
pub fn total_loss(
    tape: &mut Tape,
    l_gd: ValueId,
    l_mse: ValueId,
    l_clc: ValueId,
    weights: &LossWeights,
) -> Result<ValueId, LossError> {
    weights.validate()?;
    for (which, id) in [("l_gd", l_gd), ("l_mse", l_mse), ("l_clc", l_clc)] {
        let value = tape.item(id);
        if !value.is_finite() {
            return Err(LossError::NonFiniteComponent { which, value });
        }
    }
    let weighted_mse = tape.scale(l_mse, weights.lambda_mse);
    let partial = tape.add(l_gd, weighted_mse)?;
    Ok(tape.add(partial, l_clc)?)
}
