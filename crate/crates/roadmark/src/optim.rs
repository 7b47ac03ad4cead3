//! Parameter management, weight initialization, the Adam optimizer and the
//! two-stage learning-rate schedule.

use crate::tape::{Tape, ValueId};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("duplicate parameter name {0:?}")]
    DuplicateName(String),
    #[error("missing gradients for parameters: {}", .0.join(", "))]
    MissingGradients(Vec<String>),
    #[error("optimizer state tracks {state} parameters, set has {params}")]
    StateMismatch { state: usize, params: usize },
}

/// Which network a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Owner {
    Generator,
    Discriminator,
    MiHead,
    Augmenter,
}

impl Owner {
    pub fn tag(&self) -> &'static str {
        match self {
            Owner::Generator => "generator",
            Owner::Discriminator => "discriminator",
            Owner::MiHead => "mi_head",
            Owner::Augmenter => "augmenter",
        }
    }
}

/// How a parameter is initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Gaussian(0, 0.01^2) at init.
    Weight,
    /// Zero at init (biases, batch-norm shifts).
    Bias,
    /// One at init (batch-norm scales).
    Scale,
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
    pub trainable: bool,
    grad_ready: bool,
}

/// Named parameters with a stable iteration order.
#[derive(Debug, Clone)]
pub struct ParamSet {
    owner: Owner,
    params: Vec<Param>,
}

impl ParamSet {
    pub fn new(owner: Owner) -> Self {
        ParamSet { owner, params: Vec::new() }
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn add(&mut self, name: &str, kind: ParamKind, shape: &[usize]) -> Result<usize, OptimError> {
        if self.params.iter().any(|p| p.name == name) {
            return Err(OptimError::DuplicateName(name.to_string()));
        }
        self.params.push(Param {
            name: name.to_string(),
            kind,
            value: Tensor::zeros(shape),
            trainable: true,
            grad_ready: false,
        });
        Ok(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn get(&self, index: usize) -> &Param {
        &self.params[index]
    }

    pub fn get_mut(&mut self, index: usize) -> &mut Param {
        &mut self.params[index]
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Pushes every parameter onto a tape as a leaf. `trainable_grads`
    /// controls whether the leaves request gradients (a discriminator can be
    /// staged frozen during generator updates).
    pub fn stage(&self, tape: &mut Tape, trainable_grads: bool) -> Vec<ValueId> {
        self.params
            .iter()
            .map(|p| {
                tape.leaf(
                    p.value.shape(),
                    p.value.data().to_vec(),
                    trainable_grads && p.trainable,
                )
                .expect("parameter tensors are well formed")
            })
            .collect()
    }

    /// Adds the tape gradients of staged leaves into each parameter's grad
    /// buffer and marks them ready for an optimizer step.
    pub fn accumulate_grads(&mut self, tape: &Tape, staged: &[ValueId]) {
        assert_eq!(staged.len(), self.params.len(), "staged ids out of sync");
        for (param, &id) in self.params.iter_mut().zip(staged) {
            let src = tape.grad(id);
            let dst = param.value.grad_mut();
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
            param.grad_ready = true;
        }
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
            p.grad_ready = false;
        }
    }
}

/// Draws every weight from Gaussian(0, 0.01^2), zeroes biases and sets
/// scales to one. Deterministic in the seed.
pub fn init_weights(params: &mut ParamSet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.01).expect("valid stddev");
    for p in &mut params.params {
        match p.kind {
            ParamKind::Weight => {
                for v in p.value.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
            ParamKind::Bias => p.value.data_mut().iter_mut().for_each(|v| *v = 0.0),
            ParamKind::Scale => p.value.data_mut().iter_mut().for_each(|v| *v = 1.0),
        }
    }
}

/// Per-parameter Adam moments plus the shared step counter.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ParamSet, beta1: f64, beta2: f64, epsilon: f64) -> Self {
        AdamState {
            beta1,
            beta2,
            epsilon,
            step: 0,
            first: params.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
            second: params.params.iter().map(|p| vec![0.0; p.value.len()]).collect(),
        }
    }

    /// Defaults quantifying the "high momentum" choice.
    pub fn with_defaults(params: &ParamSet) -> Self {
        Self::new(params, 0.9, 0.999, 1e-8)
    }

    pub fn moments(&self, index: usize) -> (&[f64], &[f64]) {
        (&self.first[index], &self.second[index])
    }

    pub fn moments_mut(&mut self, index: usize) -> (&mut Vec<f64>, &mut Vec<f64>) {
        (&mut self.first[index], &mut self.second[index])
    }
}

/// One Adam update with bias correction, applied in place. Gradients are
/// left untouched; the caller decides when to zero them.
pub fn adam_step(params: &mut ParamSet, state: &mut AdamState, lr: f64) -> Result<(), OptimError> {
    if state.first.len() != params.params.len() {
        return Err(OptimError::StateMismatch {
            state: state.first.len(),
            params: params.params.len(),
        });
    }
    let missing: Vec<String> = params
        .params
        .iter()
        .filter(|p| p.trainable && !p.grad_ready)
        .map(|p| p.name.clone())
        .collect();
    if !missing.is_empty() {
        return Err(OptimError::MissingGradients(missing));
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - state.beta1.powi(t);
    let bc2 = 1.0 - state.beta2.powi(t);
    for (i, p) in params.params.iter_mut().enumerate() {
        if !p.trainable {
            continue;
        }
        let grad = p.value.grad().expect("grad_ready implies allocated").to_vec();
        let m = &mut state.first[i];
        let v = &mut state.second[i];
        let data = p.value.data_mut();
        for j in 0..data.len() {
            let g = grad[j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            data[j] -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
        }
    }
    Ok(())
}

/// Two-stage schedule: the initial rate for the first `switch_epoch`
/// epochs, the reduced rate afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub initial: f64,
    pub reduced: f64,
    pub switch_epoch: usize,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule { initial: 1e-4, reduced: 1e-5, switch_epoch: 10 }
    }
}

impl LrSchedule {
    pub fn rate(&self, epoch: usize) -> f64 {
        if epoch < self.switch_epoch {
            self.initial
        } else {
            self.reduced
        }
    }
}

/// Learning rate for an epoch under the default schedule.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().rate(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_params() -> ParamSet {
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w", ParamKind::Weight, &[10_000]).unwrap();
        ps.add("b", ParamKind::Bias, &[64]).unwrap();
        ps.add("bn.gamma", ParamKind::Scale, &[8]).unwrap();
        ps
    }

    #[test]
    fn init_zeroes_biases_and_ones_scales() {
        let mut ps = toy_params();
        init_weights(&mut ps, 42);
        assert!(ps.by_name("b").unwrap().value.data().iter().all(|&v| v == 0.0));
        assert!(ps.by_name("bn.gamma").unwrap().value.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn init_weight_std_near_hundredth() {
        let mut ps = toy_params();
        init_weights(&mut ps, 7);
        let w = ps.by_name("w").unwrap().value.data();
        let mean: f64 = w.iter().sum::<f64>() / w.len() as f64;
        let var: f64 = w.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w.len() as f64;
        let std = var.sqrt();
        assert!((std - 0.01).abs() < 0.0005, "sample std {std}");
    }

    #[test]
    fn init_is_deterministic_in_seed() {
        let mut a = toy_params();
        let mut b = toy_params();
        init_weights(&mut a, 123);
        init_weights(&mut b, 123);
        assert_eq!(a.by_name("w").unwrap().value.data(), b.by_name("w").unwrap().value.data());
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut ps = ParamSet::new(Owner::Discriminator);
        ps.add("w", ParamKind::Weight, &[2]).unwrap();
        assert_eq!(ps.add("w", ParamKind::Weight, &[2]), Err(OptimError::DuplicateName("w".into())));
    }

    #[test]
    fn adam_first_step_is_signed_lr() {
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w", ParamKind::Weight, &[3]).unwrap();
        ps.by_name_mut("w").unwrap().value.data_mut().copy_from_slice(&[1.0, 2.0, 3.0]);
        {
            let p = ps.by_name_mut("w").unwrap();
            p.value.grad_mut().copy_from_slice(&[0.5, -2.0, 1e3]);
            p.grad_ready = true;
        }
        let mut state = AdamState::with_defaults(&ps);
        let lr = 0.1;
        adam_step(&mut ps, &mut state, lr).unwrap();
        let w = ps.by_name("w").unwrap().value.data();
        assert!((w[0] - (1.0 - lr)).abs() < 1e-6);
        assert!((w[1] - (2.0 + lr)).abs() < 1e-6);
        assert!((w[2] - (3.0 - lr)).abs() < 1e-6);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w", ParamKind::Weight, &[4]).unwrap();
        init_weights(&mut ps, 5);
        let before = ps.by_name("w").unwrap().value.data().to_vec();
        {
            let p = ps.by_name_mut("w").unwrap();
            p.value.grad_mut(); // allocate zeros
            p.grad_ready = true;
        }
        let mut state = AdamState::with_defaults(&ps);
        for _ in 0..5 {
            adam_step(&mut ps, &mut state, 0.1).unwrap();
        }
        assert_eq!(ps.by_name("w").unwrap().value.data(), &before[..]);
    }

    #[test]
    fn adam_reports_missing_gradients_by_name() {
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w1", ParamKind::Weight, &[2]).unwrap();
        ps.add("w2", ParamKind::Weight, &[2]).unwrap();
        {
            let p = ps.by_name_mut("w1").unwrap();
            p.value.grad_mut();
            p.grad_ready = true;
        }
        let mut state = AdamState::with_defaults(&ps);
        match adam_step(&mut ps, &mut state, 0.1) {
            Err(OptimError::MissingGradients(names)) => assert_eq!(names, vec!["w2".to_string()]),
            other => panic!("expected missing gradient error, got {other:?}"),
        }
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        // Independent oracle for f(w) = w^2 from w = 1: after 100 steps at
        // lr 0.1 the iterate must be near the minimum.
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w", ParamKind::Weight, &[1]).unwrap();
        ps.by_name_mut("w").unwrap().value.data_mut()[0] = 1.0;
        let mut state = AdamState::with_defaults(&ps);
        for _ in 0..100 {
            {
                let p = ps.by_name_mut("w").unwrap();
                let w = p.value.data()[0];
                p.value.zero_grad();
                p.value.grad_mut()[0] = 2.0 * w;
                p.grad_ready = true;
            }
            adam_step(&mut ps, &mut state, 0.1).unwrap();
        }
        let w = ps.by_name("w").unwrap().value.data()[0];
        assert!(w.abs() < 0.1, "after 100 Adam steps |w| = {}", w.abs());
    }

    #[test]
    fn adam_step_one_opposes_gradient_sign() {
        let mut ps = ParamSet::new(Owner::Generator);
        ps.add("w", ParamKind::Weight, &[5]).unwrap();
        init_weights(&mut ps, 3);
        let before = ps.by_name("w").unwrap().value.data().to_vec();
        let grads = [0.3, -0.7, 1.2, -0.01, 4.0];
        {
            let p = ps.by_name_mut("w").unwrap();
            p.value.grad_mut().copy_from_slice(&grads);
            p.grad_ready = true;
        }
        let mut state = AdamState::with_defaults(&ps);
        adam_step(&mut ps, &mut state, 0.05).unwrap();
        let after = ps.by_name("w").unwrap().value.data();
        for i in 0..5 {
            let delta = after[i] - before[i];
            assert!(delta * grads[i] < 0.0, "coordinate {i} moved with the gradient");
        }
    }

    #[test]
    fn schedule_switches_at_epoch_ten() {
        assert_eq!(lr_schedule(0), 1e-4);
        assert_eq!(lr_schedule(9), 1e-4);
        assert_eq!(lr_schedule(10), 1e-5);
        assert_eq!(lr_schedule(100), 1e-5);
    }

    #[test]
    fn generator_multiplier_applies_to_schedule() {
        let multiplier = 2.0;
        assert_eq!(lr_schedule(0) * multiplier, 2e-4);
    }

    #[test]
    fn schedule_is_pure() {
        let s = LrSchedule::default();
        for _ in 0..3 {
            assert_eq!(s.rate(4), 1e-4);
            assert_eq!(s.rate(40), 1e-5);
        }
    }
}
