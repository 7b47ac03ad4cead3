//! Training loops: the adversarial deblur/classify loop, the
//! class-conditional augmenter loop, the stopping rule, checkpointing and
//! augmented-dataset production.
//!
//! Determinism contract: the corpus seed and the config seed fix every
//! logged metric bit-for-bit. Per-epoch RNG streams are derived from
//! `(seed, epoch)`, so resuming from a checkpoint replays the exact
//! trajectory of an uninterrupted run.

use crate::checkpoint::{self, CheckpointData, CheckpointError};
use crate::config::{ConfigError, ConfigMap};
use crate::corpus::{self, CorpusIndex, CorruptionParams, LabeledSample, ManifestRow, Split};
use crate::losses::{self, LossError, LossWeights};
use crate::models::{
    latent_batch, AugmentGeneratorNet, DiscriminatorNet, GeneratorNet, LatentCode, Mode,
    ModelError, NetConfig,
};
use crate::optim::{adam_step, AdamState, LrSchedule, OptimError, ParamSet};
use crate::pgm;
use crate::tape::{Tape, TapeError};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("training corpus needs at least one positive and one NULL sample, got {positives} positives / {negatives} NULL")]
    EmptyCorpus { positives: usize, negatives: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Corpus(#[from] corpus::CorpusError),
    #[error(transparent)]
    Pgm(#[from] pgm::PgmError),
    #[error("non-finite loss {value} at epoch {epoch}, step {step} ({context})")]
    NonFiniteLoss { epoch: usize, step: usize, value: f64, context: &'static str },
    #[error("checkpoint does not match the architecture: {0}")]
    BadCheckpoint(String),
}

/// Everything one training run needs to know.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Generator updates per discriminator update.
    pub g_steps_per_d_step: usize,
    /// Generator learning-rate multiplier over the discriminator's.
    pub g_lr_multiplier: f64,
    pub loss_weights: LossWeights,
    pub lr: LrSchedule,
    /// Stop once the mean positive reconstruction error drops below this.
    pub rho: f64,
    pub seed: u64,
    pub net: NetConfig,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 32,
            g_steps_per_d_step: 2,
            g_lr_multiplier: 2.0,
            loss_weights: LossWeights::default(),
            lr: LrSchedule::default(),
            rho: 1e-3,
            seed: 42,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            net: NetConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        if self.epochs == 0 {
            return Err(PipelineError::BadConfig("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(PipelineError::BadConfig("batch_size must be positive".into()));
        }
        if self.g_steps_per_d_step == 0 {
            return Err(PipelineError::BadConfig("g_steps_per_d_step must be positive".into()));
        }
        if !(self.g_lr_multiplier > 0.0) {
            return Err(PipelineError::BadConfig("g_lr_multiplier must be positive".into()));
        }
        if !(self.rho > 0.0) {
            return Err(PipelineError::BadConfig("rho must be positive".into()));
        }
        self.loss_weights
            .validate()
            .map_err(|e| PipelineError::BadConfig(e.to_string()))?;
        Ok(())
    }

    /// Serializes every field as `key = value` lines; floats print in
    /// shortest round-trip form so parsing back is exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "epochs = {}", self.epochs);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "g_steps_per_d_step = {}", self.g_steps_per_d_step);
        let _ = writeln!(s, "g_lr_multiplier = {}", self.g_lr_multiplier);
        let _ = writeln!(s, "lambda_mse = {}", self.loss_weights.lambda_mse);
        let _ = writeln!(s, "lambda_mi = {}", self.loss_weights.lambda_mi);
        let _ = writeln!(s, "lr_initial = {}", self.lr.initial);
        let _ = writeln!(s, "lr_reduced = {}", self.lr.reduced);
        let _ = writeln!(s, "lr_switch_epoch = {}", self.lr.switch_epoch);
        let _ = writeln!(s, "rho = {}", self.rho);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "patch = {}", self.net.patch);
        let _ = writeln!(s, "width1 = {}", self.net.widths[0]);
        let _ = writeln!(s, "width2 = {}", self.net.widths[1]);
        let _ = writeln!(s, "width3 = {}", self.net.widths[2]);
        let _ = writeln!(s, "gen_bottleneck = {}", self.net.gen_bottleneck);
        let _ = writeln!(s, "latent = {}", self.net.latent);
        let _ = writeln!(s, "leaky_slope = {}", self.net.leaky_slope);
        let _ = writeln!(s, "bn_eps = {}", self.net.bn_eps);
        let _ = writeln!(s, "bn_momentum = {}", self.net.bn_momentum);
        let _ = writeln!(s, "adam_beta1 = {}", self.adam_beta1);
        let _ = writeln!(s, "adam_beta2 = {}", self.adam_beta2);
        let _ = writeln!(s, "adam_epsilon = {}", self.adam_epsilon);
        s
    }

    /// Overrides fields present in the map, consuming their keys.
    pub fn apply_map(&mut self, map: &mut ConfigMap) -> Result<(), ConfigError> {
        macro_rules! take {
            ($key:literal, $ty:ty, $slot:expr) => {
                if let Some(v) = map.take_parsed::<$ty>($key, stringify!($ty))? {
                    $slot = v;
                }
            };
        }
        take!("epochs", usize, self.epochs);
        take!("batch_size", usize, self.batch_size);
        take!("g_steps_per_d_step", usize, self.g_steps_per_d_step);
        take!("g_lr_multiplier", f64, self.g_lr_multiplier);
        take!("lambda_mse", f64, self.loss_weights.lambda_mse);
        take!("lambda_mi", f64, self.loss_weights.lambda_mi);
        take!("lr_initial", f64, self.lr.initial);
        take!("lr_reduced", f64, self.lr.reduced);
        take!("lr_switch_epoch", usize, self.lr.switch_epoch);
        take!("rho", f64, self.rho);
        take!("seed", u64, self.seed);
        take!("patch", usize, self.net.patch);
        take!("width1", usize, self.net.widths[0]);
        take!("width2", usize, self.net.widths[1]);
        take!("width3", usize, self.net.widths[2]);
        take!("gen_bottleneck", usize, self.net.gen_bottleneck);
        take!("latent", usize, self.net.latent);
        take!("leaky_slope", f64, self.net.leaky_slope);
        take!("bn_eps", f64, self.net.bn_eps);
        take!("bn_momentum", f64, self.net.bn_momentum);
        take!("adam_beta1", f64, self.adam_beta1);
        take!("adam_beta2", f64, self.adam_beta2);
        take!("adam_epsilon", f64, self.adam_epsilon);
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, PipelineError> {
        let mut map = ConfigMap::parse(text)?;
        let mut cfg = TrainConfig::default();
        cfg.apply_map(&mut map)?;
        map.expect_empty()?;
        Ok(cfg)
    }
}

/// Stopping rule: halt once the mean positive-sample reconstruction error
/// falls strictly below rho.
pub fn should_stop(mean_recon_error: f64, config: &TrainConfig) -> bool {
    mean_recon_error < config.rho
}

/// One metric row per optimizer step.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub step: usize,
    pub loss_gd: f64,
    pub loss_mse: f64,
    pub loss_clc: f64,
    pub loss_mi: f64,
    pub lr_g: f64,
    pub lr_d: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricLog {
    pub rows: Vec<MetricRow>,
}

impl MetricLog {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("epoch\tstep\tloss_gd\tloss_mse\tloss_clc\tloss_mi\tlr_g\tlr_d\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                r.epoch, r.step, r.loss_gd, r.loss_mse, r.loss_clc, r.loss_mi, r.lr_g, r.lr_d
            );
        }
        out
    }

    pub fn rows_for_epoch(&self, epoch: usize) -> impl Iterator<Item = &MetricRow> {
        self.rows.iter().filter(move |r| r.epoch == epoch)
    }
}

/// Model, optimizer and schedule state: what a checkpoint file stores.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub gen: GeneratorNet,
    pub disc: DiscriminatorNet,
    pub aug: AugmentGeneratorNet,
    pub adam_g: AdamState,
    pub adam_d: AdamState,
    pub adam_aug: AdamState,
    /// Number of completed epochs of the loop that produced this state.
    pub epochs_done: usize,
    pub config: TrainConfig,
}

impl Checkpoint {
    /// Freshly initialized networks and optimizer states.
    pub fn fresh(config: &TrainConfig) -> Result<Self, PipelineError> {
        config.validate()?;
        let mut gen = GeneratorNet::new(config.net)?;
        let mut disc = DiscriminatorNet::new(config.net)?;
        let mut aug = AugmentGeneratorNet::new(config.net)?;
        gen.init(mix(config.seed, 0x67656e)); // distinct streams per net
        disc.init(mix(config.seed, 0x64697363));
        aug.init(mix(config.seed, 0x617567));
        let adam_g = AdamState::new(&gen.params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        let adam_d = AdamState::new(&disc.params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        let adam_aug = AdamState::new(&aug.params, config.adam_beta1, config.adam_beta2, config.adam_epsilon);
        Ok(Checkpoint {
            gen,
            disc,
            aug,
            adam_g,
            adam_d,
            adam_aug,
            epochs_done: 0,
            config: config.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        let mut data = CheckpointData {
            epoch: self.epochs_done as u32,
            config_echo: self.config.to_text(),
            tensors: Vec::new(),
        };
        let mut dump_params = |prefix: &str, params: &ParamSet| {
            for p in params.iter() {
                data.push(
                    &format!("{prefix}.{}", p.name),
                    p.value.shape().to_vec(),
                    p.value.data().to_vec(),
                );
            }
        };
        dump_params("g", &self.gen.params);
        dump_params("d", &self.disc.params);
        dump_params("aug", &self.aug.params);
        let mut dump_stats = |prefix: &str, stats: &[crate::models::RunningStats]| {
            for (i, rs) in stats.iter().enumerate() {
                data.push(&format!("{prefix}.rs{i}.mean"), vec![rs.mean.len()], rs.mean.clone());
                data.push(&format!("{prefix}.rs{i}.var"), vec![rs.var.len()], rs.var.clone());
            }
        };
        dump_stats("g", self.gen.running_stats());
        dump_stats("d", self.disc.running_stats());
        dump_stats("aug", self.aug.running_stats());
        let mut dump_adam = |prefix: &str, state: &AdamState, params: &ParamSet| {
            data.push(&format!("adam.{prefix}.step"), vec![1], vec![state.step as f64]);
            for i in 0..params.len() {
                let (m, v) = state.moments(i);
                data.push(&format!("adam.{prefix}.m{i}"), vec![m.len()], m.to_vec());
                data.push(&format!("adam.{prefix}.v{i}"), vec![v.len()], v.to_vec());
            }
        };
        dump_adam("g", &self.adam_g, &self.gen.params);
        dump_adam("d", &self.adam_d, &self.disc.params);
        dump_adam("aug", &self.adam_aug, &self.aug.params);
        checkpoint::save(path, &data)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let data = checkpoint::load(path)?;
        let config = TrainConfig::from_text(&data.config_echo)
            .map_err(|e| PipelineError::BadCheckpoint(format!("config echo: {e}")))?;
        let mut ck = Checkpoint::fresh(&config)?;
        ck.epochs_done = data.epoch as usize;

        let fill_params = |prefix: &str, params: &mut ParamSet| -> Result<(), PipelineError> {
            for i in 0..params.len() {
                let p = params.get_mut(i);
                let name = format!("{prefix}.{}", p.name);
                let rec = data
                    .tensor(&name)
                    .ok_or_else(|| PipelineError::BadCheckpoint(format!("missing tensor {name}")))?;
                if rec.dims != p.value.shape() {
                    return Err(PipelineError::BadCheckpoint(format!(
                        "tensor {name} has dims {:?}, expected {:?}",
                        rec.dims,
                        p.value.shape()
                    )));
                }
                p.value.data_mut().copy_from_slice(&rec.data);
            }
            Ok(())
        };
        fill_params("g", &mut ck.gen.params)?;
        fill_params("d", &mut ck.disc.params)?;
        fill_params("aug", &mut ck.aug.params)?;

        let fill_stats =
            |prefix: &str, stats: &mut [crate::models::RunningStats]| -> Result<(), PipelineError> {
                for (i, rs) in stats.iter_mut().enumerate() {
                    for (what, slot) in
                        [("mean", &mut rs.mean), ("var", &mut rs.var)]
                    {
                        let name = format!("{prefix}.rs{i}.{what}");
                        let rec = data.tensor(&name).ok_or_else(|| {
                            PipelineError::BadCheckpoint(format!("missing tensor {name}"))
                        })?;
                        if rec.data.len() != slot.len() {
                            return Err(PipelineError::BadCheckpoint(format!(
                                "tensor {name} has {} entries, expected {}",
                                rec.data.len(),
                                slot.len()
                            )));
                        }
                        slot.copy_from_slice(&rec.data);
                    }
                }
                Ok(())
            };
        fill_stats("g", ck.gen.running_stats_mut())?;
        fill_stats("d", ck.disc.running_stats_mut())?;
        fill_stats("aug", ck.aug.running_stats_mut())?;

        let fill_adam =
            |prefix: &str, state: &mut AdamState, count: usize| -> Result<(), PipelineError> {
                let step_name = format!("adam.{prefix}.step");
                let rec = data
                    .tensor(&step_name)
                    .ok_or_else(|| PipelineError::BadCheckpoint(format!("missing tensor {step_name}")))?;
                state.step = rec.data[0] as u64;
                for i in 0..count {
                    for (what, pick) in [("m", 0usize), ("v", 1usize)] {
                        let name = format!("adam.{prefix}.{what}{i}");
                        let rec = data.tensor(&name).ok_or_else(|| {
                            PipelineError::BadCheckpoint(format!("missing tensor {name}"))
                        })?;
                        let (m, v) = state.moments_mut(i);
                        let slot = if pick == 0 { m } else { v };
                        if rec.data.len() != slot.len() {
                            return Err(PipelineError::BadCheckpoint(format!(
                                "tensor {name} has {} entries, expected {}",
                                rec.data.len(),
                                slot.len()
                            )));
                        }
                        slot.copy_from_slice(&rec.data);
                    }
                }
                Ok(())
            };
        let gp = ck.gen.params.len();
        let dp = ck.disc.params.len();
        let ap = ck.aug.params.len();
        fill_adam("g", &mut ck.adam_g, gp)?;
        fill_adam("d", &mut ck.adam_d, dp)?;
        fill_adam("aug", &mut ck.adam_aug, ap)?;
        Ok(ck)
    }
}

fn mix(seed: u64, salt: u64) -> u64 {
    let mut x = seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

fn shuffled_indices(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    order
}

/// Gathers samples into one `[B,1,H,W]` batch tensor.
fn batch_tensor(samples: &[&LabeledSample], corrupted: bool, patch: usize) -> Tensor {
    let mut data = Vec::with_capacity(samples.len() * patch * patch);
    for s in samples {
        let img = if corrupted { &s.corrupted } else { &s.clean };
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![samples.len(), 1, patch, patch], data).expect("sized")
}

fn one_hot_tensor(labels: &[usize], classes: usize) -> Tensor {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data).expect("sized")
}

fn check_finite(
    value: f64,
    epoch: usize,
    step: usize,
    context: &'static str,
) -> Result<(), PipelineError> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(PipelineError::NonFiniteLoss { epoch, step, value, context })
    }
}

/// Cycling batch cursor over a shuffled pool.
struct Cycler<'a> {
    pool: &'a [&'a LabeledSample],
    order: Vec<usize>,
    cursor: usize,
}

impl<'a> Cycler<'a> {
    fn new(pool: &'a [&'a LabeledSample], rng: &mut ChaCha8Rng) -> Self {
        Cycler { pool, order: shuffled_indices(pool.len(), rng), cursor: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<&'a LabeledSample> {
        let mut out = Vec::with_capacity(size);
        if self.pool.is_empty() {
            return out;
        }
        for _ in 0..size {
            out.push(self.pool[self.order[self.cursor]]);
            self.cursor = (self.cursor + 1) % self.order.len();
        }
        out
    }
}

/// Main adversarial loop. `aug_samples` join the discriminator's
/// classification stream only (extra labeled data); pass an empty slice to
/// train on the corpus alone. Set `clc_in_g` false to ablate the
/// classification term from generator updates.
pub fn train_main(
    samples: &[LabeledSample],
    aug_samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<(Checkpoint, MetricLog), PipelineError> {
    let ck = Checkpoint::fresh(config)?;
    train_main_resume(ck, samples, aug_samples, config, true)
}

/// Variant used by the ablation harness.
pub fn train_main_ablatable(
    samples: &[LabeledSample],
    aug_samples: &[LabeledSample],
    config: &TrainConfig,
    clc_in_g: bool,
) -> Result<(Checkpoint, MetricLog), PipelineError> {
    let ck = Checkpoint::fresh(config)?;
    train_main_resume(ck, samples, aug_samples, config, clc_in_g)
}

/// Continues the main loop from a checkpoint until `config.epochs` total
/// epochs are done. The metric log covers only the epochs run here.
pub fn train_main_resume(
    mut ck: Checkpoint,
    samples: &[LabeledSample],
    aug_samples: &[LabeledSample],
    config: &TrainConfig,
    clc_in_g: bool,
) -> Result<(Checkpoint, MetricLog), PipelineError> {
    config.validate()?;
    let positives: Vec<&LabeledSample> = samples.iter().filter(|s| s.is_positive).collect();
    let negatives: Vec<&LabeledSample> = samples.iter().filter(|s| !s.is_positive).collect();
    if positives.is_empty() || negatives.is_empty() {
        return Err(PipelineError::EmptyCorpus {
            positives: positives.len(),
            negatives: negatives.len(),
        });
    }
    let aug_pool: Vec<&LabeledSample> = aug_samples.iter().collect();
    let weights = config.loss_weights;
    let patch = config.net.patch;
    let classes = config.net.classes;
    let null_class = classes - 1;
    let mut log = MetricLog::default();
    // Global step numbering continues across resume so a resumed log is
    // byte-identical to the tail of an uninterrupted one.
    let per_epoch_steps =
        (positives.len() / config.batch_size).max(1) * (1 + config.g_steps_per_d_step);
    let mut step = ck.epochs_done * per_epoch_steps;
    let mut tape = Tape::new();

    for epoch in ck.epochs_done..config.epochs {
        let lr_d = config.lr.rate(epoch);
        let lr_g = lr_d * config.g_lr_multiplier;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xe0_0000 + epoch as u64));
        let pos_order = shuffled_indices(positives.len(), &mut rng);
        let mut negs = Cycler::new(&negatives, &mut rng);
        let mut augs = Cycler::new(&aug_pool, &mut rng);

        let iterations = (positives.len() / config.batch_size).max(1);
        let mut epoch_mse_sum = 0.0;
        let mut epoch_mse_count = 0usize;

        for it in 0..iterations {
            let lo = it * config.batch_size;
            let hi = ((it + 1) * config.batch_size).min(positives.len());
            let pos_batch: Vec<&LabeledSample> =
                pos_order[lo..hi].iter().map(|&i| positives[i]).collect();
            let labels: Vec<usize> = pos_batch.iter().map(|s| s.label).collect();
            let clean = batch_tensor(&pos_batch, false, patch);
            let corrupted = batch_tensor(&pos_batch, true, patch);
            let neg_batch = negs.next_batch(config.batch_size);
            let neg_corrupted = batch_tensor(&neg_batch, true, patch);
            let null_labels = vec![null_class; neg_batch.len()];
            let aug_batch = augs.next_batch(config.batch_size.min(aug_pool.len()));

            // ── discriminator step ───────────────────────────────────
            tape.clear();
            let g_ids = ck.gen.params.stage(&mut tape, false);
            let d_ids = ck.disc.params.stage(&mut tape, true);
            let x = tape.constant(&clean);
            let xt = tape.constant(&corrupted);
            let nt = tape.constant(&neg_corrupted);
            let gx = ck.gen.forward(&mut tape, &g_ids, xt, Mode::Train)?;
            let gn = ck.gen.forward(&mut tape, &g_ids, nt, Mode::Train)?;
            let d_x = ck.disc.forward(&mut tape, &d_ids, x, Mode::Train)?;
            let d_gx = ck.disc.forward(&mut tape, &d_ids, gx, Mode::Train)?;
            let d_nt = ck.disc.forward(&mut tape, &d_ids, nt, Mode::Train)?;
            let d_gn = ck.disc.forward(&mut tape, &d_ids, gn, Mode::Train)?;

            let adv_d = losses::adv_loss_discriminator(&mut tape, d_x.real_prob, d_gx.real_prob)?;
            let onehot = one_hot_tensor(&labels, classes);
            let mi = losses::mi_lower_bound(&mut tape, &onehot, d_gx.mi_logits)?;
            let l_gd = losses::adversarial_with_mi(&mut tape, adv_d, mi, weights.lambda_mi)?;
            // Classification stream: clean positives, raw and restored
            // NULL patches, plus any augmented labeled data.
            let ce_x = tape.cross_entropy_logits(d_x.class_logits, &labels)?;
            let ce_n = tape.cross_entropy_logits(d_nt.class_logits, &null_labels)?;
            let ce_gn = tape.cross_entropy_logits(d_gn.class_logits, &null_labels)?;
            let mut clc = tape.add(ce_x, ce_n)?;
            clc = tape.add(clc, ce_gn)?;
            if !aug_batch.is_empty() {
                let aug_clean = batch_tensor(&aug_batch, false, patch);
                let aug_labels: Vec<usize> = aug_batch.iter().map(|s| s.label).collect();
                let ax = tape.constant(&aug_clean);
                let d_ax = ck.disc.forward(&mut tape, &d_ids, ax, Mode::Train)?;
                let ce_aug = tape.cross_entropy_logits(d_ax.class_logits, &aug_labels)?;
                clc = tape.add(clc, ce_aug)?;
            }
            let loss_d = tape.add(l_gd, clc)?;
            check_finite(tape.item(loss_d), epoch, step, "discriminator step")?;
            tape.backward(loss_d)?;
            ck.disc.params.accumulate_grads(&tape, &d_ids);
            adam_step(&mut ck.disc.params, &mut ck.adam_d, lr_d)?;
            ck.disc.params.zero_grad();
            log.rows.push(MetricRow {
                epoch,
                step,
                loss_gd: tape.item(adv_d),
                loss_mse: 0.0,
                loss_clc: tape.item(clc),
                loss_mi: tape.item(mi),
                lr_g,
                lr_d,
            });
            step += 1;

            // ── generator steps ──────────────────────────────────────
            for _ in 0..config.g_steps_per_d_step {
                tape.clear();
                let g_ids = ck.gen.params.stage(&mut tape, true);
                let d_ids = ck.disc.params.stage(&mut tape, false);
                let x = tape.constant(&clean);
                let xt = tape.constant(&corrupted);
                let gx = ck.gen.forward(&mut tape, &g_ids, xt, Mode::Train)?;
                let d_gx = ck.disc.forward(&mut tape, &d_ids, gx, Mode::Train)?;
                let d_x = ck.disc.forward(&mut tape, &d_ids, x, Mode::Train)?;

                let adv_g = losses::adv_loss_generator(&mut tape, d_gx.real_prob)?;
                let onehot = one_hot_tensor(&labels, classes);
                let mi = losses::mi_lower_bound(&mut tape, &onehot, d_gx.mi_logits)?;
                let l_gd = losses::adversarial_with_mi(&mut tape, adv_g, mi, weights.lambda_mi)?;
                let mse = losses::mse_loss(&mut tape, x, gx)?;
                // The reconstruction term enters the total in norm-squared
                // form (per-image sum over pixels); the logged value and
                // the stopping rule stay per-pixel means.
                let mse_sum = tape.scale(mse, (patch * patch) as f64);
                let clc = losses::classification_loss(
                    &mut tape,
                    d_gx.class_logits,
                    d_x.class_logits,
                    &labels,
                )?;
                let total = if clc_in_g {
                    losses::total_loss(&mut tape, l_gd, mse_sum, clc, &weights)?
                } else {
                    // Ablation: drop the classification term from G updates.
                    let weighted = tape.scale(mse_sum, weights.lambda_mse);
                    tape.add(l_gd, weighted)?
                };
                check_finite(tape.item(total), epoch, step, "generator step")?;
                tape.backward(total)?;
                ck.gen.params.accumulate_grads(&tape, &g_ids);
                adam_step(&mut ck.gen.params, &mut ck.adam_g, lr_g)?;
                ck.gen.params.zero_grad();
                epoch_mse_sum += tape.item(mse);
                epoch_mse_count += 1;
                log.rows.push(MetricRow {
                    epoch,
                    step,
                    loss_gd: tape.item(adv_g),
                    loss_mse: tape.item(mse),
                    loss_clc: tape.item(clc),
                    loss_mi: tape.item(mi),
                    lr_g,
                    lr_d,
                });
                step += 1;
            }
        }

        ck.epochs_done = epoch + 1;
        let mean_recon = epoch_mse_sum / epoch_mse_count.max(1) as f64;
        if should_stop(mean_recon, config) {
            break;
        }
    }
    Ok((ck, log))
}

/// Augmenter training report: the checkpoint carries the trained sampler
/// and the discriminator it was trained against.
#[derive(Debug, Clone)]
pub struct AugmenterRun {
    pub checkpoint: Checkpoint,
    pub log: MetricLog,
    /// Empirical entropy of the sampled codes, one value per epoch.
    pub epoch_code_entropy: Vec<f64>,
    /// Mean mutual-information bound per epoch.
    pub epoch_mi: Vec<f64>,
}

/// Trains the class-conditional augmenter against a fresh discriminator:
/// the sampler fools the real/fake head while both maximize the
/// mutual-information bound between codes and samples. Codes are drawn
/// uniformly over all classes; real batches are clean labeled images.
pub fn train_augmenter(
    samples: &[LabeledSample],
    config: &TrainConfig,
) -> Result<AugmenterRun, PipelineError> {
    config.validate()?;
    let pool: Vec<&LabeledSample> = samples.iter().collect();
    if pool.is_empty() {
        return Err(PipelineError::EmptyCorpus { positives: 0, negatives: 0 });
    }
    let mut ck = Checkpoint::fresh(config)?;
    let weights = config.loss_weights;
    let patch = config.net.patch;
    let classes = config.net.classes;
    let cfg_net = config.net;
    let mut log = MetricLog::default();
    let mut epoch_code_entropy = Vec::new();
    let mut epoch_mi = Vec::new();
    let mut step = 0usize;
    let mut tape = Tape::new();

    for epoch in 0..config.epochs {
        let lr_d = config.lr.rate(epoch);
        let lr_g = lr_d * config.g_lr_multiplier;
        let mut rng = ChaCha8Rng::seed_from_u64(mix(config.seed, 0xa0_0000 + epoch as u64));
        let mut reals = Cycler::new(&pool, &mut rng);
        let iterations = (pool.len() / config.batch_size).max(1);
        let mut code_counts = vec![0usize; classes];
        let mut mi_sum = 0.0;
        let mut mi_count = 0usize;

        let draw_codes = |rng: &mut ChaCha8Rng, counts: &mut Vec<usize>| -> Vec<LatentCode> {
            (0..config.batch_size)
                .map(|_| {
                    let class = rng.gen_range(0..classes);
                    counts[class] += 1;
                    let z: Vec<f64> =
                        (0..cfg_net.latent).map(|_| rng.sample(StandardNormal)).collect();
                    LatentCode::new(class, z, &cfg_net).expect("valid by construction")
                })
                .collect()
        };

        for _ in 0..iterations {
            let real_batch = reals.next_batch(config.batch_size);
            let real_clean = batch_tensor(&real_batch, false, patch);
            let real_labels: Vec<usize> = real_batch.iter().map(|s| s.label).collect();

            // ── discriminator step ───────────────────────────────────
            let codes = draw_codes(&mut rng, &mut code_counts);
            tape.clear();
            let a_ids = ck.aug.params.stage(&mut tape, false);
            let d_ids = ck.disc.params.stage(&mut tape, true);
            let code_input = tape.constant(&latent_batch(&codes, &cfg_net));
            let fake = ck.aug.forward(&mut tape, &a_ids, code_input, Mode::Train)?;
            let xr = tape.constant(&real_clean);
            let d_real = ck.disc.forward(&mut tape, &d_ids, xr, Mode::Train)?;
            let d_fake = ck.disc.forward(&mut tape, &d_ids, fake, Mode::Train)?;
            let adv_d = losses::adv_loss_discriminator(&mut tape, d_real.real_prob, d_fake.real_prob)?;
            let code_onehot = one_hot_tensor(
                &codes.iter().map(|c| c.class()).collect::<Vec<_>>(),
                classes,
            );
            let mi = losses::mi_lower_bound(&mut tape, &code_onehot, d_fake.mi_logits)?;
            let l_gd = losses::adversarial_with_mi(&mut tape, adv_d, mi, weights.lambda_mi)?;
            let clc = tape.cross_entropy_logits(d_real.class_logits, &real_labels)?;
            let loss_d = tape.add(l_gd, clc)?;
            check_finite(tape.item(loss_d), epoch, step, "augmenter discriminator step")?;
            tape.backward(loss_d)?;
            ck.disc.params.accumulate_grads(&tape, &d_ids);
            adam_step(&mut ck.disc.params, &mut ck.adam_d, lr_d)?;
            ck.disc.params.zero_grad();
            log.rows.push(MetricRow {
                epoch,
                step,
                loss_gd: tape.item(adv_d),
                loss_mse: 0.0,
                loss_clc: tape.item(clc),
                loss_mi: tape.item(mi),
                lr_g,
                lr_d,
            });
            step += 1;

            // ── sampler steps ────────────────────────────────────────
            for _ in 0..config.g_steps_per_d_step {
                let codes = draw_codes(&mut rng, &mut code_counts);
                tape.clear();
                let a_ids = ck.aug.params.stage(&mut tape, true);
                let d_ids = ck.disc.params.stage(&mut tape, false);
                let code_input = tape.constant(&latent_batch(&codes, &cfg_net));
                let fake = ck.aug.forward(&mut tape, &a_ids, code_input, Mode::Train)?;
                let d_fake = ck.disc.forward(&mut tape, &d_ids, fake, Mode::Train)?;
                let adv_g = losses::adv_loss_generator(&mut tape, d_fake.real_prob)?;
                let code_onehot = one_hot_tensor(
                    &codes.iter().map(|c| c.class()).collect::<Vec<_>>(),
                    classes,
                );
                let mi = losses::mi_lower_bound(&mut tape, &code_onehot, d_fake.mi_logits)?;
                let loss_g = losses::adversarial_with_mi(&mut tape, adv_g, mi, weights.lambda_mi)?;
                check_finite(tape.item(loss_g), epoch, step, "augmenter sampler step")?;
                tape.backward(loss_g)?;
                ck.aug.params.accumulate_grads(&tape, &a_ids);
                adam_step(&mut ck.aug.params, &mut ck.adam_aug, lr_g)?;
                ck.aug.params.zero_grad();
                mi_sum += tape.item(mi);
                mi_count += 1;
                log.rows.push(MetricRow {
                    epoch,
                    step,
                    loss_gd: tape.item(adv_g),
                    loss_mse: 0.0,
                    loss_clc: 0.0,
                    loss_mi: tape.item(mi),
                    lr_g,
                    lr_d,
                });
                step += 1;
            }
        }

        let total: usize = code_counts.iter().sum();
        let entropy: f64 = code_counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        epoch_code_entropy.push(entropy);
        epoch_mi.push(mi_sum / mi_count.max(1) as f64);
        ck.epochs_done = epoch + 1;
    }
    Ok(AugmenterRun { checkpoint: ck, log, epoch_code_entropy, epoch_mi })
}

/// Samples the trained augmenter class by class and writes a corpus in the
/// standard directory format (clean generated images, no corruption).
pub fn produce_augmented_set(
    ck: &mut Checkpoint,
    counts: &[usize; corpus::NUM_CLASSES],
    seed: u64,
    out_dir: &Path,
) -> Result<CorpusIndex, PipelineError> {
    let cfg_net = ck.config.net;
    let images = out_dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| {
        PipelineError::Corpus(corpus::CorpusError::Io {
            path: images.display().to_string(),
            source: e,
        })
    })?;
    let mut rows = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, 0x617567_73616d70));
    for (class, &count) in counts.iter().enumerate() {
        let mut produced = 0usize;
        while produced < count {
            let chunk = (count - produced).min(64);
            let codes: Vec<LatentCode> = (0..chunk)
                .map(|_| {
                    let z: Vec<f64> =
                        (0..cfg_net.latent).map(|_| rng.sample(StandardNormal)).collect();
                    LatentCode::new(class, z, &cfg_net).expect("class in range")
                })
                .collect();
            let mut tape = Tape::new();
            let staged = ck.aug.params.stage(&mut tape, false);
            let input = tape.constant(&latent_batch(&codes, &cfg_net));
            let out = ck.aug.forward(&mut tape, &staged, input, Mode::Eval)?;
            let data = tape.data(out);
            let plane = cfg_net.patch * cfg_net.patch;
            for i in 0..chunk {
                let idx = produced + i;
                let id = format!("aug_{}_{:05}", corpus::CLASS_NAMES[class].to_lowercase(), idx);
                let rel_path = format!("images/{id}.pgm");
                pgm::write_pgm(
                    &out_dir.join(&rel_path),
                    cfg_net.patch,
                    cfg_net.patch,
                    &data[i * plane..(i + 1) * plane],
                )?;
                rows.push(ManifestRow {
                    id,
                    rel_path,
                    label: class,
                    split: Split::Train,
                    corruption: CorruptionParams::NONE,
                    seed: 0,
                });
            }
            produced += chunk;
        }
    }
    let index = CorpusIndex { root: out_dir.to_path_buf(), rows };
    index.write_manifest()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{make_corpus, GlyphSpec};

    fn tiny_corpus_samples(seed: u64) -> Vec<LabeledSample> {
        // Rendered directly, no disk round trip: a handful per class.
        let mut out = Vec::new();
        let params = CorruptionParams::default();
        for class in 0..corpus::NUM_CLASSES {
            for i in 0..4u64 {
                let spec = GlyphSpec::from_seed(class, seed * 1000 + class as u64 * 10 + i);
                let clean = corpus::render_glyph(&spec);
                let corrupted = corpus::corrupt(&clean, &params, spec.seed);
                out.push(LabeledSample {
                    clean,
                    corrupted,
                    label: class,
                    is_positive: class != corpus::NULL_CLASS,
                });
            }
        }
        out
    }

    fn smoke_config() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            rho: 1e-9,
            seed: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn should_stop_is_strict() {
        let config = TrainConfig { rho: 0.5, ..TrainConfig::default() };
        assert!(should_stop(0.25, &config));
        assert!(!should_stop(0.5, &config), "equality must not stop");
        assert!(should_stop(0.0, &config));
    }

    #[test]
    fn config_text_roundtrip_is_exact() {
        let config = TrainConfig { rho: 0.0012345, seed: 987, ..TrainConfig::default() };
        let text = config.to_text();
        let back = TrainConfig::from_text(&text).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn config_rejects_bad_fields() {
        let bad = TrainConfig { epochs: 0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
        let bad = TrainConfig { rho: 0.0, ..TrainConfig::default() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn one_epoch_smoke_run_writes_loadable_checkpoint() {
        let samples = tiny_corpus_samples(1);
        let config = smoke_config();
        let (ck, log) = train_main(&samples, &[], &config).unwrap();
        assert_eq!(ck.epochs_done, 1);
        assert!(!log.rows.is_empty());
        assert!(log.rows.iter().all(|r| {
            r.loss_gd.is_finite()
                && r.loss_mse.is_finite()
                && r.loss_clc.is_finite()
                && r.loss_mi.is_finite()
        }));

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.epochs_done, 1);
        for (a, b) in ck.gen.params.iter().zip(back.gen.params.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "param {}", a.name);
        }
        for (a, b) in ck.disc.params.iter().zip(back.disc.params.iter()) {
            assert_eq!(a.value.data(), b.value.data(), "param {}", a.name);
        }
        assert_eq!(ck.adam_d.step, back.adam_d.step);
    }

    #[test]
    fn g_steps_are_double_d_steps() {
        let samples = tiny_corpus_samples(2);
        let config = smoke_config();
        let (_, log) = train_main(&samples, &[], &config).unwrap();
        // D rows have loss_mse == 0 and are followed by their G rows.
        let d_rows = log.rows.iter().filter(|r| r.loss_mse == 0.0).count();
        let g_rows = log.rows.len() - d_rows;
        assert_eq!(g_rows, 2 * d_rows);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let samples = tiny_corpus_samples(3)
            .into_iter()
            .filter(|s| s.is_positive)
            .collect::<Vec<_>>();
        match train_main(&samples, &[], &smoke_config()) {
            Err(PipelineError::EmptyCorpus { negatives: 0, .. }) => {}
            other => panic!("expected empty corpus error, got {other:?}"),
        }
    }

    #[test]
    fn training_is_deterministic_and_resumable() {
        let samples = tiny_corpus_samples(4);
        let mut config = smoke_config();
        config.epochs = 3;

        let (ck_a, log_a) = train_main(&samples, &[], &config).unwrap();
        let (ck_b, log_b) = train_main(&samples, &[], &config).unwrap();
        assert_eq!(log_a.to_tsv(), log_b.to_tsv(), "same seed must replay identically");
        for (a, b) in ck_a.gen.params.iter().zip(ck_b.gen.params.iter()) {
            assert_eq!(a.value.data(), b.value.data());
        }

        // Stop after 2 epochs, save, reload, continue to 3: tail must match.
        let mut short = config.clone();
        short.epochs = 2;
        let (ck_short, _) = train_main(&samples, &[], &short).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        ck_short.save(&path).unwrap();
        let resumed = Checkpoint::load(&path).unwrap();
        let (ck_c, log_c) = train_main_resume(resumed, &samples, &[], &config, true).unwrap();
        let tail_a = MetricLog {
            rows: log_a.rows.iter().filter(|r| r.epoch >= 2).cloned().collect(),
        };
        assert_eq!(tail_a.to_tsv(), log_c.to_tsv(), "resumed log tail must be byte-identical");
        for (a, c) in ck_a.gen.params.iter().zip(ck_c.gen.params.iter()) {
            assert_eq!(a.value.data(), c.value.data(), "resumed generator diverged at {}", a.name);
        }
        for (a, c) in ck_a.disc.params.iter().zip(ck_c.disc.params.iter()) {
            assert_eq!(a.value.data(), c.value.data(), "resumed discriminator diverged at {}", a.name);
        }
    }

    #[test]
    fn augmenter_smoke_runs_and_tracks_entropy() {
        let samples = tiny_corpus_samples(5);
        let mut config = smoke_config();
        config.epochs = 2;
        let run = train_augmenter(&samples, &config).unwrap();
        assert_eq!(run.epoch_code_entropy.len(), 2);
        assert_eq!(run.epoch_mi.len(), 2);
        // Uniform sampling keeps empirical code entropy near ln(10).
        for &h in &run.epoch_code_entropy {
            assert!((h - (10.0f64).ln()).abs() < 0.05, "entropy {h}");
        }
    }

    #[test]
    fn augmented_set_has_exact_counts_and_reproduces() {
        let samples = tiny_corpus_samples(6);
        let config = smoke_config();
        let run = train_augmenter(&samples, &config).unwrap();
        let mut ck = run.checkpoint;
        let counts = [3, 3, 3, 3, 3, 3, 3, 3, 3, 5];
        let dir_a = tempfile::tempdir().unwrap();
        let index = produce_augmented_set(&mut ck, &counts, 7, dir_a.path()).unwrap();
        assert_eq!(index.len(), 32);
        assert_eq!(index.class_counts(None), counts);

        let dir_b = tempfile::tempdir().unwrap();
        produce_augmented_set(&mut ck, &counts, 7, dir_b.path()).unwrap();
        let a = std::fs::read(dir_a.path().join(corpus::MANIFEST_NAME)).unwrap();
        let b = std::fs::read(dir_b.path().join(corpus::MANIFEST_NAME)).unwrap();
        assert_eq!(a, b);
        for row in &index.rows {
            let pa = std::fs::read(dir_a.path().join(&row.rel_path)).unwrap();
            let pb = std::fs::read(dir_b.path().join(&row.rel_path)).unwrap();
            assert_eq!(pa, pb, "image {}", row.id);
        }
    }

    #[test]
    fn corpus_defaults_flow_through_make_corpus() {
        // Tiny end-to-end: corpus on disk -> load -> one epoch.
        let dir = tempfile::tempdir().unwrap();
        let counts = [2, 2, 2, 2, 2, 2, 2, 2, 2, 6];
        let index = make_corpus(&counts, &CorruptionParams::default(), 9, dir.path()).unwrap();
        let samples = index.load_samples(Some(Split::Train)).unwrap();
        let config = TrainConfig { epochs: 1, batch_size: 4, seed: 3, ..TrainConfig::default() };
        let (ck, _) = train_main(&samples, &[], &config).unwrap();
        assert_eq!(ck.epochs_done, 1);
    }
}
