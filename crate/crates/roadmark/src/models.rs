//! Network architectures: the deblurring autoencoder generator, the
//! shared-trunk discriminator with real/fake, class and latent-code heads,
//! and the class-conditional augmentation generator.
//!
//! Geometry, channel widths and activation placement live in
//! [`NetConfig`]; every stage descriptor doubles as the source of truth
//! for parameter counts.

use crate::optim::{init_weights, Owner, ParamKind, ParamSet};
use crate::tape::{Tape, TapeError, ValueId};
use crate::tensor::Tensor;
use thiserror::Error;

pub const NUM_CLASSES: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error("input shape {got:?} does not match expected {expected:?}")]
    BadInput { expected: Vec<usize>, got: Vec<usize> },
    #[error("patch size {0} must be a positive multiple of 8")]
    BadPatch(usize),
    #[error("latent code class {class} out of range for {classes} classes")]
    BadClass { class: usize, classes: usize },
    #[error("latent vector has {got} entries, expected {expected}")]
    BadLatentLen { expected: usize, got: usize },
    #[error("latent vector entry {index} is not finite")]
    NonFiniteLatent { index: usize },
    #[error("one-hot code row is malformed: {0}")]
    MalformedOneHot(String),
}

/// Whether a forward pass uses batch statistics (and updates the running
/// ones) or the stored running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Shared architecture knobs for all three networks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetConfig {
    /// Side length of the square grayscale patches.
    pub patch: usize,
    /// Channel widths of the three stride-2 stages.
    pub widths: [usize; 3],
    /// Channel width of the generator's innermost stage. Kept narrow so
    /// the autoencoder must compress: positives re-render cleanly while
    /// inputs off the training manifold cannot be reproduced.
    pub gen_bottleneck: usize,
    /// Length of the unstructured noise vector z.
    pub latent: usize,
    /// Number of categorical classes (including NULL).
    pub classes: usize,
    pub leaky_slope: f64,
    pub bn_eps: f64,
    /// EMA keep factor for running batch-norm statistics.
    pub bn_momentum: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            patch: 32,
            widths: [16, 32, 64],
            gen_bottleneck: 64,
            latent: 64,
            classes: NUM_CLASSES,
            leaky_slope: 0.2,
            bn_eps: 1e-5,
            bn_momentum: 0.9,
        }
    }
}

impl NetConfig {
    /// Scaled-down geometry for exhaustive finite-difference checks.
    pub fn tiny() -> Self {
        NetConfig {
            patch: 8,
            widths: [2, 3, 4],
            gen_bottleneck: 4,
            latent: 4,
            ..Self::default()
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        if self.patch == 0 || self.patch % 8 != 0 {
            return Err(ModelError::BadPatch(self.patch));
        }
        Ok(())
    }

    /// Spatial side of the bottleneck after three stride-2 stages.
    pub fn seed_side(&self) -> usize {
        self.patch / 8
    }
}

/// Gaussian noise plus a one-hot class code: the augmenter's input.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    class: usize,
    z: Vec<f64>,
}

impl LatentCode {
    pub fn new(class: usize, z: Vec<f64>, cfg: &NetConfig) -> Result<Self, ModelError> {
        if class >= cfg.classes {
            return Err(ModelError::BadClass { class, classes: cfg.classes });
        }
        if z.len() != cfg.latent {
            return Err(ModelError::BadLatentLen { expected: cfg.latent, got: z.len() });
        }
        if let Some(index) = z.iter().position(|v| !v.is_finite()) {
            return Err(ModelError::NonFiniteLatent { index });
        }
        Ok(LatentCode { class, z })
    }

    /// Builds a code from an explicit one-hot row, rejecting malformed rows.
    pub fn from_one_hot(one_hot: &[f64], z: Vec<f64>, cfg: &NetConfig) -> Result<Self, ModelError> {
        if one_hot.len() != cfg.classes {
            return Err(ModelError::MalformedOneHot(format!(
                "has {} entries, expected {}",
                one_hot.len(),
                cfg.classes
            )));
        }
        let mut hot = None;
        for (i, &v) in one_hot.iter().enumerate() {
            if v == 1.0 {
                if hot.is_some() {
                    return Err(ModelError::MalformedOneHot("more than one entry equals 1".into()));
                }
                hot = Some(i);
            } else if v != 0.0 {
                return Err(ModelError::MalformedOneHot(format!(
                    "entry {i} is {v}, expected 0 or 1"
                )));
            }
        }
        let class = hot.ok_or_else(|| ModelError::MalformedOneHot("no entry equals 1".into()))?;
        Self::new(class, z, cfg)
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn z(&self) -> &[f64] {
        &self.z
    }

    pub fn one_hot(&self, classes: usize) -> Vec<f64> {
        let mut row = vec![0.0; classes];
        row[self.class] = 1.0;
        row
    }
}

/// Concatenated `(z, c)` rows for a batch of codes: `[N, latent+classes]`.
pub fn latent_batch(codes: &[LatentCode], cfg: &NetConfig) -> Tensor {
    let width = cfg.latent + cfg.classes;
    let mut data = Vec::with_capacity(codes.len() * width);
    for code in codes {
        data.extend_from_slice(&code.z);
        data.extend_from_slice(&code.one_hot(cfg.classes));
    }
    Tensor::new(vec![codes.len(), width], data).expect("sized by construction")
}

/// Running batch-norm statistics for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    fn new(channels: usize) -> Self {
        RunningStats { mean: vec![0.0; channels], var: vec![1.0; channels] }
    }

    fn update(&mut self, batch_mean: &[f64], batch_var: &[f64], momentum: f64) {
        for (r, &b) in self.mean.iter_mut().zip(batch_mean) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
        for (r, &b) in self.var.iter_mut().zip(batch_var) {
            *r = momentum * *r + (1.0 - momentum) * b;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    LeakyRelu,
    Relu,
    Sigmoid,
}

#[derive(Debug, Clone, Copy)]
struct BnRef {
    gamma: usize,
    beta: usize,
    running: usize,
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    kernel: usize,
    bias: usize,
    bn: Option<BnRef>,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
    act: Act,
}

impl Stage {
    fn scalar_count(&self) -> usize {
        let kernel = self.in_ch * self.out_ch * self.ksize * self.ksize;
        let bn = if self.bn.is_some() { 2 * self.out_ch } else { 0 };
        kernel + self.out_ch + bn
    }
}

#[allow(clippy::too_many_arguments)]
fn add_stage(
    params: &mut ParamSet,
    running: &mut Vec<RunningStats>,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    ksize: usize,
    stride: usize,
    pad: usize,
    transpose: bool,
    with_bn: bool,
    act: Act,
) -> Stage {
    let kshape = if transpose {
        vec![in_ch, out_ch, ksize, ksize]
    } else {
        vec![out_ch, in_ch, ksize, ksize]
    };
    let kernel = params
        .add(&format!("{prefix}.kernel"), ParamKind::Weight, &kshape)
        .expect("stage names are unique");
    let bias = params
        .add(&format!("{prefix}.bias"), ParamKind::Bias, &[out_ch])
        .expect("stage names are unique");
    let bn = if with_bn {
        let gamma = params
            .add(&format!("{prefix}.bn.gamma"), ParamKind::Scale, &[out_ch])
            .expect("stage names are unique");
        let beta = params
            .add(&format!("{prefix}.bn.beta"), ParamKind::Bias, &[out_ch])
            .expect("stage names are unique");
        running.push(RunningStats::new(out_ch));
        Some(BnRef { gamma, beta, running: running.len() - 1 })
    } else {
        None
    };
    Stage { kernel, bias, bn, in_ch, out_ch, ksize, stride, pad, transpose, act }
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    tape: &mut Tape,
    staged: &[ValueId],
    stage: &Stage,
    running: &mut [RunningStats],
    input: ValueId,
    mode: Mode,
    cfg: &NetConfig,
) -> Result<ValueId, TapeError> {
    let mut x = if stage.transpose {
        tape.conv2d_transpose(input, staged[stage.kernel], staged[stage.bias], stage.stride, stage.pad)?
    } else {
        tape.conv2d(input, staged[stage.kernel], staged[stage.bias], stage.stride, stage.pad)?
    };
    if let Some(bn) = stage.bn {
        x = match mode {
            Mode::Train => {
                let (out, mean, var) =
                    tape.batchnorm_train(x, staged[bn.gamma], staged[bn.beta], cfg.bn_eps)?;
                running[bn.running].update(&mean, &var, cfg.bn_momentum);
                out
            }
            Mode::Eval => {
                let stats = &running[bn.running];
                tape.batchnorm_eval(
                    x,
                    staged[bn.gamma],
                    staged[bn.beta],
                    &stats.mean,
                    &stats.var,
                    cfg.bn_eps,
                )?
            }
        };
    }
    Ok(match stage.act {
        Act::LeakyRelu => tape.leaky_relu(x, cfg.leaky_slope),
        Act::Relu => tape.relu(x),
        Act::Sigmoid => tape.sigmoid(x),
    })
}

/// Fully convolutional autoencoder mapping corrupted patches to clean ones.
///
/// Encoder: three stride-2 convolutions (batch-norm, leaky-relu). Decoder:
/// three stride-2 transposed convolutions (batch-norm and relu except after
/// the final layer, which feeds a sigmoid so outputs stay in (0,1)).
#[derive(Debug, Clone)]
pub struct GeneratorNet {
    pub params: ParamSet,
    cfg: NetConfig,
    stages: Vec<Stage>,
    running: Vec<RunningStats>,
}

impl GeneratorNet {
    pub fn new(cfg: NetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let [w1, w2, _] = cfg.widths;
        let gb = cfg.gen_bottleneck;
        let mut params = ParamSet::new(Owner::Generator);
        let mut running = Vec::new();
        let mut stages = Vec::new();
        let specs = [
            ("enc1", 1, w1, false, true, Act::LeakyRelu),
            ("enc2", w1, w2, false, true, Act::LeakyRelu),
            ("enc3", w2, gb, false, true, Act::LeakyRelu),
            ("dec1", gb, w2, true, true, Act::Relu),
            ("dec2", w2, w1, true, true, Act::Relu),
            ("dec3", w1, 1, true, false, Act::Sigmoid),
        ];
        for (name, i, o, tr, bn, act) in specs {
            stages.push(add_stage(&mut params, &mut running, name, i, o, 4, 2, 1, tr, bn, act));
        }
        Ok(GeneratorNet { params, cfg, stages, running })
    }

    pub fn init(&mut self, seed: u64) {
        init_weights(&mut self.params, seed);
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    /// Scalar parameter count implied by the stage descriptors.
    pub fn descriptor_scalar_count(&self) -> usize {
        self.stages.iter().map(Stage::scalar_count).sum()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Maps `[N,1,patch,patch]` inputs to same-shaped reconstructions.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        staged: &[ValueId],
        input: ValueId,
        mode: Mode,
    ) -> Result<ValueId, ModelError> {
        let expected = vec![tape.shape(input).first().copied().unwrap_or(0), 1, self.cfg.patch, self.cfg.patch];
        if tape.shape(input) != expected.as_slice() {
            return Err(ModelError::BadInput { expected, got: tape.shape(input).to_vec() });
        }
        let mut x = input;
        for stage in &self.stages {
            x = run_stage(tape, staged, stage, &mut self.running, x, mode, &self.cfg)?;
        }
        Ok(x)
    }
}

/// Outputs of one discriminator pass: all three heads share one trunk pass.
#[derive(Debug, Clone, Copy)]
pub struct DiscriminatorOut {
    /// `[N]` probability that the input is a real patch.
    pub real_prob: ValueId,
    /// `[N, classes]` road-marking class logits.
    pub class_logits: ValueId,
    /// `[N, classes]` latent-code recovery logits.
    pub mi_logits: ValueId,
}

/// Three stride-2 convolutions (leaky-relu; batch-norm except the first
/// layer) feeding three parallel affine heads.
#[derive(Debug, Clone)]
pub struct DiscriminatorNet {
    pub params: ParamSet,
    cfg: NetConfig,
    stages: Vec<Stage>,
    running: Vec<RunningStats>,
    head_gan: (usize, usize),
    head_clc: (usize, usize),
    head_mi: (usize, usize),
}

impl DiscriminatorNet {
    pub fn new(cfg: NetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let [w1, w2, w3] = cfg.widths;
        let mut params = ParamSet::new(Owner::Discriminator);
        let mut running = Vec::new();
        let mut stages = Vec::new();
        let specs = [
            ("conv1", 1, w1, false),
            ("conv2", w1, w2, true),
            ("conv3", w2, w3, true),
        ];
        for (name, i, o, bn) in specs {
            stages.push(add_stage(&mut params, &mut running, name, i, o, 4, 2, 1, false, bn, Act::LeakyRelu));
        }
        let flat = w3 * cfg.seed_side() * cfg.seed_side();
        let mut head = |prefix: &str, out: usize| {
            let w = params
                .add(&format!("{prefix}.weight"), ParamKind::Weight, &[flat, out])
                .expect("head names are unique");
            let b = params
                .add(&format!("{prefix}.bias"), ParamKind::Bias, &[out])
                .expect("head names are unique");
            (w, b)
        };
        let head_gan = head("gan", 1);
        let head_clc = head("clc", cfg.classes);
        let head_mi = head("mi", cfg.classes);
        Ok(DiscriminatorNet { params, cfg, stages, running, head_gan, head_clc, head_mi })
    }

    pub fn init(&mut self, seed: u64) {
        init_weights(&mut self.params, seed);
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn descriptor_scalar_count(&self) -> usize {
        let conv: usize = self.stages.iter().map(Stage::scalar_count).sum();
        let flat = self.cfg.widths[2] * self.cfg.seed_side() * self.cfg.seed_side();
        let heads = (flat + 1) * (1 + 2 * self.cfg.classes);
        conv + heads
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// One trunk pass, three heads.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        staged: &[ValueId],
        input: ValueId,
        mode: Mode,
    ) -> Result<DiscriminatorOut, ModelError> {
        let n = tape.shape(input).first().copied().unwrap_or(0);
        let expected = vec![n, 1, self.cfg.patch, self.cfg.patch];
        if tape.shape(input) != expected.as_slice() {
            return Err(ModelError::BadInput { expected, got: tape.shape(input).to_vec() });
        }
        let mut x = input;
        for stage in &self.stages {
            x = run_stage(tape, staged, stage, &mut self.running, x, mode, &self.cfg)?;
        }
        let flat = self.cfg.widths[2] * self.cfg.seed_side() * self.cfg.seed_side();
        let features = tape.reshape(x, &[n, flat])?;
        let gan = tape.affine(features, staged[self.head_gan.0], staged[self.head_gan.1])?;
        let gan = tape.reshape(gan, &[n])?;
        let real_prob = tape.sigmoid(gan);
        let class_logits = tape.affine(features, staged[self.head_clc.0], staged[self.head_clc.1])?;
        let mi_logits = tape.affine(features, staged[self.head_mi.0], staged[self.head_mi.1])?;
        Ok(DiscriminatorOut { real_prob, class_logits, mi_logits })
    }
}

/// Class-conditional sampler: an affine projection of `(z, c)` to a seed
/// map, then three stride-2 transposed convolutions up to patch size.
#[derive(Debug, Clone)]
pub struct AugmentGeneratorNet {
    pub params: ParamSet,
    cfg: NetConfig,
    proj: (usize, usize),
    proj_bn: BnRef,
    stages: Vec<Stage>,
    running: Vec<RunningStats>,
}

impl AugmentGeneratorNet {
    pub fn new(cfg: NetConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let [w1, w2, w3] = cfg.widths;
        let side = cfg.seed_side();
        let mut params = ParamSet::new(Owner::Augmenter);
        let mut running = Vec::new();
        let in_width = cfg.latent + cfg.classes;
        let proj_w = params
            .add("proj.weight", ParamKind::Weight, &[in_width, w3 * side * side])
            .expect("unique");
        let proj_b = params
            .add("proj.bias", ParamKind::Bias, &[w3 * side * side])
            .expect("unique");
        let gamma = params.add("proj.bn.gamma", ParamKind::Scale, &[w3]).expect("unique");
        let beta = params.add("proj.bn.beta", ParamKind::Bias, &[w3]).expect("unique");
        running.push(RunningStats::new(w3));
        let proj_bn = BnRef { gamma, beta, running: 0 };
        let mut stages = Vec::new();
        let specs = [
            ("up1", w3, w2, true, Act::Relu),
            ("up2", w2, w1, true, Act::Relu),
            ("up3", w1, 1, false, Act::Sigmoid),
        ];
        for (name, i, o, bn, act) in specs {
            stages.push(add_stage(&mut params, &mut running, name, i, o, 4, 2, 1, true, bn, act));
        }
        Ok(AugmentGeneratorNet { params, cfg, proj: (proj_w, proj_b), proj_bn, stages, running })
    }

    pub fn init(&mut self, seed: u64) {
        init_weights(&mut self.params, seed);
    }

    pub fn cfg(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn descriptor_scalar_count(&self) -> usize {
        let side = self.cfg.seed_side();
        let w3 = self.cfg.widths[2];
        let proj = (self.cfg.latent + self.cfg.classes + 1) * (w3 * side * side) + 2 * w3;
        proj + self.stages.iter().map(Stage::scalar_count).sum::<usize>()
    }

    pub fn running_stats(&self) -> &[RunningStats] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats] {
        &mut self.running
    }

    /// Maps `[N, latent+classes]` code rows to `[N,1,patch,patch]` images.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        staged: &[ValueId],
        codes: ValueId,
        mode: Mode,
    ) -> Result<ValueId, ModelError> {
        let n = tape.shape(codes).first().copied().unwrap_or(0);
        let expected = vec![n, self.cfg.latent + self.cfg.classes];
        if tape.shape(codes) != expected.as_slice() {
            return Err(ModelError::BadInput { expected, got: tape.shape(codes).to_vec() });
        }
        let side = self.cfg.seed_side();
        let w3 = self.cfg.widths[2];
        let seed = tape.affine(codes, staged[self.proj.0], staged[self.proj.1])?;
        let seed = tape.reshape(seed, &[n, w3, side, side])?;
        let bn = self.proj_bn;
        let seed = match mode {
            Mode::Train => {
                let (out, mean, var) =
                    tape.batchnorm_train(seed, staged[bn.gamma], staged[bn.beta], self.cfg.bn_eps)?;
                self.running[bn.running].update(&mean, &var, self.cfg.bn_momentum);
                out
            }
            Mode::Eval => {
                let stats = &self.running[bn.running];
                tape.batchnorm_eval(
                    seed,
                    staged[bn.gamma],
                    staged[bn.beta],
                    &stats.mean,
                    &stats.var,
                    self.cfg.bn_eps,
                )?
            }
        };
        let mut x = tape.relu(seed);
        for stage in &self.stages {
            x = run_stage(tape, staged, stage, &mut self.running, x, mode, &self.cfg)?;
        }
        Ok(x)
    }

    /// Generates one image for a fixed code using running statistics, so
    /// the output depends only on `(z, c)` and the trained parameters.
    pub fn generate(&mut self, code: &LatentCode) -> Result<Tensor, ModelError> {
        let mut tape = Tape::new();
        let staged = self.params.stage(&mut tape, false);
        let batch = latent_batch(std::slice::from_ref(code), &self.cfg);
        let input = tape.constant(&batch);
        let out = self.forward(&mut tape, &staged, input, Mode::Eval)?;
        Ok(tape.value(out))
    }
}
