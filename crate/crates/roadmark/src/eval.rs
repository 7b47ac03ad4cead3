//! Evaluation: classification accuracy (direct and through the deblurring
//! generator), the deblur/decimate asymmetry report, augmentation
//! class-consistency against a frozen reference classifier, and the
//! four-variant ablation harness.

use crate::corpus::{self, CorpusIndex, LabeledSample, Split, NUM_CLASSES};
use crate::losses;
use crate::models::Mode;
use crate::optim::adam_step;
use crate::pipeline::{
    produce_augmented_set, train_main, train_main_ablatable, Checkpoint, PipelineError,
    TrainConfig,
};
use crate::pgm;
use crate::tape::Tape;
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("split lacks {0} samples")]
    MissingKind(&'static str),
    #[error("class {0} has no samples in the evaluated set")]
    ClassAbsent(String),
}

/// Whether the classifier sees the raw corrupted patch or the generator's
/// restoration of it (the full test path).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifyMode {
    Direct,
    Pipeline,
}

#[derive(Debug, Clone)]
pub struct AccuracyReport {
    /// Accuracy per class; `None` when the class is absent from the split.
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub counts: [usize; NUM_CLASSES],
    pub overall: f64,
}

const EVAL_CHUNK: usize = 64;

/// Runs the discriminator's class head over a split in eval mode and
/// reports argmax accuracy.
pub fn classify_accuracy(
    ck: &mut Checkpoint,
    samples: &[LabeledSample],
    mode: ClassifyMode,
) -> Result<AccuracyReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let patch = ck.config.net.patch;
    let classes = ck.config.net.classes;
    let mut correct = [0usize; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for chunk in samples.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * patch * patch);
        for s in chunk {
            data.extend_from_slice(s.corrupted.data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, patch, patch], data).expect("sized");
        let mut tape = Tape::new();
        let x = tape.constant(&batch);
        let input = match mode {
            ClassifyMode::Direct => x,
            ClassifyMode::Pipeline => {
                let g_ids = ck.gen.params.stage(&mut tape, false);
                ck.gen
                    .forward(&mut tape, &g_ids, x, Mode::Eval)
                    .map_err(PipelineError::from)?
            }
        };
        let d_ids = ck.disc.params.stage(&mut tape, false);
        let out = ck
            .disc
            .forward(&mut tape, &d_ids, input, Mode::Eval)
            .map_err(PipelineError::from)?;
        let logits = tape.data(out.class_logits);
        for (i, s) in chunk.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("nonempty row");
            counts[s.label] += 1;
            if pred == s.label {
                correct[s.label] += 1;
            }
        }
    }
    let mut per_class = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            per_class[c] = Some(correct[c] as f64 / counts[c] as f64);
        }
    }
    let total: usize = counts.iter().sum();
    let hits: usize = correct.iter().sum();
    Ok(AccuracyReport { per_class, counts, overall: hits as f64 / total as f64 })
}

/// Deblur gap, decimation score and reconstruction PSNR over one split.
#[derive(Debug, Clone, Copy)]
pub struct DeblurReport {
    /// Mean corrupted-vs-clean error minus mean restored-vs-clean error
    /// over positives; positive values mean restoration helps.
    pub deblur_gap: f64,
    /// Mean (per-pixel) squared change the generator applies to NULL
    /// patches; large values mean negatives get decimated.
    pub decimate_score: f64,
    /// How badly the generator reconstructs NULL patches against their
    /// clean references: the failure-to-reconstruct side of decimation.
    pub negative_recon_error: f64,
    pub mse_corrupted: f64,
    pub mse_deblurred: f64,
    pub psnr_corrupted: f64,
    pub psnr_deblurred: f64,
}

fn mean_sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

fn psnr(mse: f64) -> f64 {
    -10.0 * mse.log10()
}

/// Restores a batch of images through the generator in eval mode.
fn restore(
    ck: &mut Checkpoint,
    images: &[&Tensor],
) -> Result<Vec<Vec<f64>>, PipelineError> {
    let patch = ck.config.net.patch;
    let plane = patch * patch;
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * plane);
        for img in chunk {
            data.extend_from_slice(img.data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, patch, patch], data).expect("sized");
        let mut tape = Tape::new();
        let x = tape.constant(&batch);
        let g_ids = ck.gen.params.stage(&mut tape, false);
        let y = ck.gen.forward(&mut tape, &g_ids, x, Mode::Eval)?;
        let restored = tape.data(y);
        for i in 0..chunk.len() {
            out.push(restored[i * plane..(i + 1) * plane].to_vec());
        }
    }
    Ok(out)
}

/// Report math over already-restored images; `restore` wires in the
/// generator, and substituting the identity restoration gives zero gaps.
fn deblur_stats(
    positives: &[&LabeledSample],
    restored_pos: &[Vec<f64>],
    negatives: &[&LabeledSample],
    restored_neg: &[Vec<f64>],
) -> DeblurReport {
    let mut mse_corr = 0.0;
    let mut mse_deb = 0.0;
    for (s, r) in positives.iter().zip(restored_pos) {
        mse_corr += mean_sq_diff(s.corrupted.data(), s.clean.data());
        mse_deb += mean_sq_diff(r, s.clean.data());
    }
    mse_corr /= positives.len() as f64;
    mse_deb /= positives.len() as f64;
    let mut decimate = 0.0;
    let mut neg_recon = 0.0;
    for (s, r) in negatives.iter().zip(restored_neg) {
        decimate += mean_sq_diff(r, s.corrupted.data());
        neg_recon += mean_sq_diff(r, s.clean.data());
    }
    decimate /= negatives.len() as f64;
    neg_recon /= negatives.len() as f64;
    DeblurReport {
        deblur_gap: mse_corr - mse_deb,
        decimate_score: decimate,
        negative_recon_error: neg_recon,
        mse_corrupted: mse_corr,
        mse_deblurred: mse_deb,
        psnr_corrupted: psnr(mse_corr),
        psnr_deblurred: psnr(mse_deb),
    }
}

/// Measures how much restoration helps positives and how strongly the
/// generator corrupts NULL patches it was never trained to preserve.
pub fn deblur_decimate_report(
    ck: &mut Checkpoint,
    samples: &[LabeledSample],
) -> Result<DeblurReport, EvalError> {
    let positives: Vec<&LabeledSample> = samples.iter().filter(|s| s.is_positive).collect();
    let negatives: Vec<&LabeledSample> = samples.iter().filter(|s| !s.is_positive).collect();
    if positives.is_empty() {
        return Err(EvalError::MissingKind("positive"));
    }
    if negatives.is_empty() {
        return Err(EvalError::MissingKind("NULL"));
    }
    let pos_corrupted: Vec<&Tensor> = positives.iter().map(|s| &s.corrupted).collect();
    let restored_pos = restore(ck, &pos_corrupted)?;
    let neg_corrupted: Vec<&Tensor> = negatives.iter().map(|s| &s.corrupted).collect();
    let restored_neg = restore(ck, &neg_corrupted)?;
    Ok(deblur_stats(&positives, &restored_pos, &negatives, &restored_neg))
}

/// Trains a plain supervised classifier (discriminator architecture, class
/// head only) for use as a frozen reference. `use_corrupted` selects which
/// view of each sample the classifier learns on.
pub fn train_classifier_only(
    samples: &[LabeledSample],
    aug_samples: &[LabeledSample],
    config: &TrainConfig,
    use_corrupted: bool,
) -> Result<Checkpoint, EvalError> {
    config.validate()?;
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let mut ck = Checkpoint::fresh(config)?;
    let patch = config.net.patch;
    let pool: Vec<&LabeledSample> = samples.iter().collect();
    let aug_pool: Vec<&LabeledSample> = aug_samples.iter().collect();
    let mut tape = Tape::new();
    for epoch in 0..config.epochs {
        let lr = config.lr.rate(epoch);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (0xc1a5 + epoch as u64));
        let order = {
            let mut idx: Vec<usize> = (0..pool.len()).collect();
            for i in (1..idx.len()).rev() {
                let j = rng.gen_range(0..=i);
                idx.swap(i, j);
            }
            idx
        };
        let mut aug_cursor = 0usize;
        let iterations = (pool.len() / config.batch_size).max(1);
        for it in 0..iterations {
            let lo = it * config.batch_size;
            let hi = ((it + 1) * config.batch_size).min(pool.len());
            let mut batch: Vec<&LabeledSample> = order[lo..hi].iter().map(|&i| pool[i]).collect();
            if !aug_pool.is_empty() {
                for _ in 0..config.batch_size.min(aug_pool.len()) {
                    batch.push(aug_pool[aug_cursor % aug_pool.len()]);
                    aug_cursor += 1;
                }
            }
            let labels: Vec<usize> = batch.iter().map(|s| s.label).collect();
            let mut data = Vec::with_capacity(batch.len() * patch * patch);
            for s in &batch {
                let img = if use_corrupted { &s.corrupted } else { &s.clean };
                data.extend_from_slice(img.data());
            }
            let batch_tensor =
                Tensor::new(vec![batch.len(), 1, patch, patch], data).expect("sized");
            tape.clear();
            let d_ids = ck.disc.params.stage(&mut tape, true);
            let x = tape.constant(&batch_tensor);
            let out = ck
                .disc
                .forward(&mut tape, &d_ids, x, Mode::Train)
                .map_err(PipelineError::from)?;
            let loss = tape
                .cross_entropy_logits(out.class_logits, &labels)
                .map_err(PipelineError::from)?;
            tape.backward(loss).map_err(PipelineError::from)?;
            ck.disc.params.accumulate_grads(&tape, &d_ids);
            adam_step(&mut ck.disc.params, &mut ck.adam_d, lr).map_err(PipelineError::from)?;
            ck.disc.params.zero_grad();
        }
        ck.epochs_done = epoch + 1;
    }
    Ok(ck)
}

/// Fraction of generated samples per class that a frozen reference
/// classifier assigns to their intended class.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub per_class: [Option<f64>; NUM_CLASSES],
    pub overall: f64,
}

pub fn augmentation_consistency(
    generated: &[LabeledSample],
    reference: &mut Checkpoint,
) -> Result<ConsistencyReport, EvalError> {
    if generated.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    let patch = reference.config.net.patch;
    let classes = reference.config.net.classes;
    let mut hits = [0usize; NUM_CLASSES];
    let mut counts = [0usize; NUM_CLASSES];
    for chunk in generated.chunks(EVAL_CHUNK) {
        let mut data = Vec::with_capacity(chunk.len() * patch * patch);
        for s in chunk {
            data.extend_from_slice(s.clean.data());
        }
        let batch = Tensor::new(vec![chunk.len(), 1, patch, patch], data).expect("sized");
        let mut tape = Tape::new();
        let d_ids = reference.disc.params.stage(&mut tape, false);
        let x = tape.constant(&batch);
        let out = reference
            .disc
            .forward(&mut tape, &d_ids, x, Mode::Eval)
            .map_err(PipelineError::from)?;
        let logits = tape.data(out.class_logits);
        for (i, s) in chunk.iter().enumerate() {
            let row = &logits[i * classes..(i + 1) * classes];
            let pred = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(j, _)| j)
                .expect("nonempty row");
            counts[s.label] += 1;
            if pred == s.label {
                hits[s.label] += 1;
            }
        }
    }
    let mut per_class = [None; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if counts[c] > 0 {
            per_class[c] = Some(hits[c] as f64 / counts[c] as f64);
        }
    }
    let total: usize = counts.iter().sum();
    let hit_total: usize = hits.iter().sum();
    Ok(ConsistencyReport { per_class, overall: hit_total as f64 / total as f64 })
}

/// Pipeline accuracies of the four ablation variants, sorted best-first.
#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<(String, f64)>,
}

impl AblationTable {
    pub fn accuracy(&self, variant: &str) -> Option<f64> {
        self.rows.iter().find(|(n, _)| n == variant).map(|&(_, a)| a)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("variant\tpipeline_accuracy\n");
        let mut sorted = self.rows.clone();
        sorted.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("finite accuracies"));
        for (name, acc) in sorted {
            let _ = writeln!(out, "{name}\t{acc}");
        }
        out
    }
}

/// Trains and evaluates the four variants: the full system, no deblurring
/// network (classify corrupted patches directly), no classification term in
/// generator updates, and no augmented data. Augmented images produced here
/// are written under `out_dir/augmented`.
pub fn run_ablation(
    index: &CorpusIndex,
    config: &TrainConfig,
    aug_counts: &[usize; NUM_CLASSES],
    out_dir: &Path,
) -> Result<AblationTable, EvalError> {
    let train = index.load_samples(Some(Split::Train)).map_err(PipelineError::from)?;
    let test = index.load_samples(Some(Split::Test)).map_err(PipelineError::from)?;
    if train.is_empty() || test.is_empty() {
        return Err(EvalError::EmptySplit);
    }

    // One augmenter run feeds every variant that uses augmented data.
    let aug_run = crate::pipeline::train_augmenter(&train, config)?;
    let mut aug_ck = aug_run.checkpoint;
    let aug_dir = out_dir.join("augmented");
    let aug_index = produce_augmented_set(&mut aug_ck, aug_counts, config.seed, &aug_dir)?;
    let aug_samples = aug_index.load_samples(None).map_err(PipelineError::from)?;

    let mut rows = Vec::new();

    let (mut full_ck, _) = train_main(&train, &aug_samples, config)?;
    let acc = classify_accuracy(&mut full_ck, &test, ClassifyMode::Pipeline)?;
    rows.push(("full".to_string(), acc.overall));

    let mut no_g_ck = train_classifier_only(&train, &aug_samples, config, true)?;
    let acc = classify_accuracy(&mut no_g_ck, &test, ClassifyMode::Direct)?;
    rows.push(("no_deblur".to_string(), acc.overall));

    let (mut no_clc_ck, _) = train_main_ablatable(&train, &aug_samples, config, false)?;
    let acc = classify_accuracy(&mut no_clc_ck, &test, ClassifyMode::Pipeline)?;
    rows.push(("no_clc".to_string(), acc.overall));

    let (mut no_aug_ck, _) = train_main(&train, &[], config)?;
    let acc = classify_accuracy(&mut no_aug_ck, &test, ClassifyMode::Pipeline)?;
    rows.push(("no_augmentation".to_string(), acc.overall));

    Ok(AblationTable { rows })
}

/// Writes side-by-side corrupted | restored | clean strips for the first
/// `count` positive samples; returns the paths written.
pub fn dump_triptychs(
    ck: &mut Checkpoint,
    samples: &[LabeledSample],
    out_dir: &Path,
    count: usize,
) -> Result<Vec<std::path::PathBuf>, EvalError> {
    let patch = ck.config.net.patch;
    let positives: Vec<&LabeledSample> =
        samples.iter().filter(|s| s.is_positive).take(count).collect();
    if positives.is_empty() {
        return Err(EvalError::MissingKind("positive"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| {
        PipelineError::Corpus(corpus::CorpusError::Io {
            path: out_dir.display().to_string(),
            source: e,
        })
    })?;
    let corrupted: Vec<&Tensor> = positives.iter().map(|s| &s.corrupted).collect();
    let restored = restore(ck, &corrupted)?;
    let mut paths = Vec::new();
    for (i, (s, r)) in positives.iter().zip(&restored).enumerate() {
        let mut strip = vec![0.0; patch * patch * 3];
        for y in 0..patch {
            for x in 0..patch {
                strip[y * patch * 3 + x] = s.corrupted.data()[y * patch + x];
                strip[y * patch * 3 + patch + x] = r[y * patch + x];
                strip[y * patch * 3 + 2 * patch + x] = s.clean.data()[y * patch + x];
            }
        }
        let path = out_dir.join(format!("triptych_{i:03}.pgm"));
        pgm::write_pgm(&path, patch * 3, patch, &strip).map_err(PipelineError::from)?;
        paths.push(path);
    }
    Ok(paths)
}

/// Full evaluation summary for one trained checkpoint.
#[derive(Debug, Clone)]
pub struct EvalReport {
    pub direct: AccuracyReport,
    pub pipeline: AccuracyReport,
    pub deblur: DeblurReport,
}

pub fn eval_report(ck: &mut Checkpoint, samples: &[LabeledSample]) -> Result<EvalReport, EvalError> {
    Ok(EvalReport {
        direct: classify_accuracy(ck, samples, ClassifyMode::Direct)?,
        pipeline: classify_accuracy(ck, samples, ClassifyMode::Pipeline)?,
        deblur: deblur_decimate_report(ck, samples)?,
    })
}

impl EvalReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("metric\tvalue\n");
        let _ = writeln!(out, "accuracy_direct\t{}", self.direct.overall);
        let _ = writeln!(out, "accuracy_pipeline\t{}", self.pipeline.overall);
        for c in 0..NUM_CLASSES {
            if let Some(acc) = self.pipeline.per_class[c] {
                let _ = writeln!(out, "accuracy_pipeline_{}\t{acc}", corpus::CLASS_NAMES[c]);
            }
        }
        let _ = writeln!(out, "deblur_gap\t{}", self.deblur.deblur_gap);
        let _ = writeln!(out, "decimate_score\t{}", self.deblur.decimate_score);
        let _ = writeln!(out, "negative_recon_error\t{}", self.deblur.negative_recon_error);
        let _ = writeln!(out, "mse_corrupted\t{}", self.deblur.mse_corrupted);
        let _ = writeln!(out, "mse_deblurred\t{}", self.deblur.mse_deblurred);
        let _ = writeln!(out, "psnr_corrupted\t{}", self.deblur.psnr_corrupted);
        let _ = writeln!(out, "psnr_deblurred\t{}", self.deblur.psnr_deblurred);
        out
    }
}

/// Recomputes the deblur/decimate quantities from dumped triptych strips;
/// used to cross-check the report against what was written to disk.
pub fn recompute_from_triptychs(paths: &[std::path::PathBuf]) -> Result<(f64, f64), EvalError> {
    let mut mse_corr = 0.0;
    let mut mse_deb = 0.0;
    for path in paths {
        let (w, h, px) = pgm::read_pgm(path).map_err(PipelineError::from)?;
        let patch = w / 3;
        let (mut corrupted, mut restored, mut clean) = (Vec::new(), Vec::new(), Vec::new());
        for y in 0..h {
            for x in 0..patch {
                corrupted.push(px[y * w + x]);
                restored.push(px[y * w + patch + x]);
                clean.push(px[y * w + 2 * patch + x]);
            }
        }
        mse_corr += mean_sq_diff(&corrupted, &clean);
        mse_deb += mean_sq_diff(&restored, &clean);
    }
    let n = paths.len() as f64;
    Ok((mse_corr / n, mse_deb / n))
}

/// Analytic-oracle helper re-exported for reports and tests.
pub fn optimal_discriminator(pt: &[f64], pz: &[f64]) -> Result<Vec<f64>, losses::LossError> {
    losses::optimal_discriminator(pt, pz)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{corrupt, render_glyph, CorruptionParams, GlyphSpec};

    fn tiny_samples(seed: u64, per_class: usize) -> Vec<LabeledSample> {
        let mut out = Vec::new();
        let params = CorruptionParams::default();
        for class in 0..NUM_CLASSES {
            for i in 0..per_class as u64 {
                let spec = GlyphSpec::from_seed(class, seed * 100_000 + class as u64 * 100 + i);
                let clean = render_glyph(&spec);
                let corrupted = corrupt(&clean, &params, spec.seed);
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

    #[test]
    fn untrained_accuracy_sits_in_chance_band() {
        // Chance-level band measured at init over a balanced split.
        let samples = tiny_samples(1, 4);
        let config = TrainConfig { epochs: 1, batch_size: 8, seed: 7, ..TrainConfig::default() };
        let mut ck = Checkpoint::fresh(&config).unwrap();
        let acc = classify_accuracy(&mut ck, &samples, ClassifyMode::Direct).unwrap();
        assert!(
            (0.02..=0.25).contains(&acc.overall),
            "untrained accuracy {} outside chance band",
            acc.overall
        );
    }

    #[test]
    fn perfect_split_scores_one() {
        // A split containing only samples the model classifies correctly
        // must score exactly 1.0.
        let samples = tiny_samples(2, 2);
        let config = TrainConfig { epochs: 1, batch_size: 8, seed: 8, ..TrainConfig::default() };
        let mut ck = Checkpoint::fresh(&config).unwrap();
        let mut correct = Vec::new();
        for s in &samples {
            let one = [s.clone()];
            let r = classify_accuracy(&mut ck, &one, ClassifyMode::Direct).unwrap();
            if r.overall == 1.0 {
                correct.push(s.clone());
            }
        }
        assert!(!correct.is_empty(), "untrained net classifies nothing correctly");
        let r = classify_accuracy(&mut ck, &correct, ClassifyMode::Direct).unwrap();
        assert_eq!(r.overall, 1.0);
    }

    #[test]
    fn empty_split_is_an_error() {
        let config = TrainConfig::default();
        let mut ck = Checkpoint::fresh(&config).unwrap();
        assert!(matches!(
            classify_accuracy(&mut ck, &[], ClassifyMode::Direct),
            Err(EvalError::EmptySplit)
        ));
    }

    #[test]
    fn identity_generator_gives_zero_gaps() {
        // Substituting the identity restoration into the report math gives
        // a zero deblur gap and a zero decimate score.
        let samples = tiny_samples(3, 2);
        let positives: Vec<&LabeledSample> = samples.iter().filter(|s| s.is_positive).collect();
        let negatives: Vec<&LabeledSample> = samples.iter().filter(|s| !s.is_positive).collect();
        let restored_pos: Vec<Vec<f64>> =
            positives.iter().map(|s| s.corrupted.data().to_vec()).collect();
        let restored_neg: Vec<Vec<f64>> =
            negatives.iter().map(|s| s.corrupted.data().to_vec()).collect();
        let report = deblur_stats(&positives, &restored_pos, &negatives, &restored_neg);
        assert_eq!(report.deblur_gap, 0.0);
        assert_eq!(report.decimate_score, 0.0);
    }

    #[test]
    fn consistency_on_real_images_equals_reference_accuracy() {
        let samples = tiny_samples(4, 3);
        let config = TrainConfig {
            epochs: 2,
            batch_size: 10,
            seed: 11,
            ..TrainConfig::default()
        };
        let mut reference = train_classifier_only(&samples, &[], &config, false).unwrap();
        // Feeding the reference's own training images as "generated" makes
        // consistency identical to its clean-image accuracy.
        let consistency = augmentation_consistency(&samples, &mut reference).unwrap();
        let clean_as_eval: Vec<LabeledSample> = samples
            .iter()
            .map(|s| LabeledSample {
                clean: s.clean.clone(),
                corrupted: s.clean.clone(),
                label: s.label,
                is_positive: s.is_positive,
            })
            .collect();
        let acc = classify_accuracy(&mut reference, &clean_as_eval, ClassifyMode::Direct).unwrap();
        assert!((consistency.overall - acc.overall).abs() < 1e-12);
    }

    #[test]
    fn triptych_roundtrip_matches_report() {
        let samples = tiny_samples(5, 2);
        let config = TrainConfig { epochs: 1, batch_size: 8, seed: 13, ..TrainConfig::default() };
        let mut ck = Checkpoint::fresh(&config).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = dump_triptychs(&mut ck, &samples, dir.path(), 4).unwrap();
        assert_eq!(paths.len(), 4);
        let (mse_corr, mse_deb) = recompute_from_triptychs(&paths).unwrap();
        // The dumped strips quantize to 8 bits; agreement is at quantization
        // precision, not exact.
        let positives: Vec<&LabeledSample> =
            samples.iter().filter(|s| s.is_positive).take(4).collect();
        let corrupted: Vec<&Tensor> = positives.iter().map(|s| &s.corrupted).collect();
        let restored = restore(&mut ck, &corrupted).unwrap();
        let mut want_corr = 0.0;
        let mut want_deb = 0.0;
        for (s, r) in positives.iter().zip(&restored) {
            want_corr += mean_sq_diff(s.corrupted.data(), s.clean.data());
            want_deb += mean_sq_diff(r, s.clean.data());
        }
        want_corr /= positives.len() as f64;
        want_deb /= positives.len() as f64;
        assert!((mse_corr - want_corr).abs() < 1e-3, "{mse_corr} vs {want_corr}");
        assert!((mse_deb - want_deb).abs() < 1e-3, "{mse_deb} vs {want_deb}");
    }
}
