//! Command-line entry point: corpus generation, the two training loops,
//! augmented-set production, evaluation reports, the ablation harness and
//! the finite-difference gradient check.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

use clap::{Args, Parser, Subcommand};
use roadmark::config::ConfigMap;
use roadmark::corpus::{self, CorruptionParams, Split, NUM_CLASSES};
use roadmark::eval;
use roadmark::gradcheck;
use roadmark::pipeline::{self, Checkpoint, TrainConfig};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "roadmark", about = "Adversarial deblur-and-classify trainer for road-marking patches", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Configuration file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed override (wins over the config file).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic glyph corpus to a directory.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output corpus directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the adversarial deblur/classify training loop.
    Train {
        #[command(flatten)]
        common: Common,
        /// Corpus directory (train split is used).
        #[arg(long)]
        data: PathBuf,
        /// Optional augmented corpus joining the classification stream.
        #[arg(long)]
        aug_data: Option<PathBuf>,
        /// Resume from this checkpoint instead of fresh initialization.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Output directory for checkpoint.bin and metrics.tsv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the class-conditional augmentation generator.
    TrainAug {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample a trained augmenter into a corpus directory.
    Augment {
        #[command(flatten)]
        common: Common,
        /// Augmenter checkpoint (from train-aug).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a corpus split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Split to evaluate: train | test | all.
        #[arg(long, default_value = "test")]
        split: String,
        /// Output directory for report.tsv and image strips.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and score the four ablation variants.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every network gradient against finite differences.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Usage problems (including unknown subcommands) exit 1;
            // --help/--version print and exit 0.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

type AnyError = Box<dyn std::error::Error>;

fn load_config_map(common: &Common) -> Result<ConfigMap, AnyError> {
    match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
            Ok(ConfigMap::parse(&text)?)
        }
        None => Ok(ConfigMap::default()),
    }
}

fn train_config(common: &Common, map: &mut ConfigMap) -> Result<TrainConfig, AnyError> {
    let mut config = TrainConfig::default();
    config.apply_map(map)?;
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    config.validate()?;
    Ok(config)
}

fn corpus_counts(map: &mut ConfigMap) -> Result<[usize; NUM_CLASSES], AnyError> {
    let mut counts = corpus::DEFAULT_COUNTS;
    for (i, name) in corpus::CLASS_NAMES.iter().enumerate() {
        let key = format!("count_{}", name.to_lowercase());
        if let Some(v) = map.take(&key) {
            counts[i] = v
                .parse()
                .map_err(|_| format!("key {key}: cannot parse {v:?} as a count"))?;
        }
    }
    if let Some(scale) = map.take("count_scale") {
        let scale: f64 = scale
            .parse()
            .map_err(|_| format!("key count_scale: cannot parse {scale:?} as a number"))?;
        for c in counts.iter_mut() {
            *c = ((*c as f64 * scale).round() as usize).max(1);
        }
    }
    Ok(counts)
}

fn corruption_params(map: &mut ConfigMap) -> Result<CorruptionParams, AnyError> {
    let mut params = CorruptionParams::default();
    if let Some(v) = map.take_parsed::<f64>("blur_sigma", "f64")? {
        params.blur_sigma = v;
    }
    if let Some(v) = map.take_parsed::<f64>("noise_sigma", "f64")? {
        params.noise_sigma = v;
    }
    if let Some(v) = map.take_parsed::<f64>("perspective_strength", "f64")? {
        params.perspective_strength = v;
    }
    params.validate()?;
    Ok(params)
}

fn aug_counts(map: &mut ConfigMap) -> Result<[usize; NUM_CLASSES], AnyError> {
    let per_positive = map.take_parsed::<usize>("aug_count_positive", "usize")?.unwrap_or(300);
    let null = map.take_parsed::<usize>("aug_count_null", "usize")?.unwrap_or(2000);
    let mut counts = [per_positive; NUM_CLASSES];
    counts[corpus::NULL_CLASS] = null;
    Ok(counts)
}

fn load_corpus(dir: &Path) -> Result<corpus::CorpusIndex, AnyError> {
    Ok(corpus::ingest_external(dir, &dir.join(corpus::MANIFEST_NAME))?)
}

fn run(command: Command) -> Result<(), AnyError> {
    match command {
        Command::GenData { common, out } => {
            let mut map = load_config_map(&common)?;
            let counts = corpus_counts(&mut map)?;
            let corruption = corruption_params(&mut map)?;
            let seed = match common.seed {
                Some(s) => s,
                None => map.take_parsed::<u64>("seed", "u64")?.unwrap_or(42),
            };
            map.expect_empty()?;
            let index = corpus::make_corpus(&counts, &corruption, seed, &out)?;
            println!(
                "wrote {} samples ({} train / {} test) to {}",
                index.len(),
                index.class_counts(Some(Split::Train)).iter().sum::<usize>(),
                index.class_counts(Some(Split::Test)).iter().sum::<usize>(),
                out.display()
            );
            Ok(())
        }
        Command::Train { common, data, aug_data, resume, out } => {
            let mut map = load_config_map(&common)?;
            let config = train_config(&common, &mut map)?;
            map.expect_empty()?;
            let index = load_corpus(&data)?;
            let samples = index.load_samples(Some(Split::Train))?;
            let aug_samples = match aug_data {
                Some(dir) => load_corpus(&dir)?.load_samples(None)?,
                None => Vec::new(),
            };
            let (ck, log) = match resume {
                Some(path) => {
                    let ck = Checkpoint::load(&path)?;
                    pipeline::train_main_resume(ck, &samples, &aug_samples, &config, true)?
                }
                None => pipeline::train_main(&samples, &aug_samples, &config)?,
            };
            fs::create_dir_all(&out)?;
            ck.save(&out.join("checkpoint.bin"))?;
            fs::write(out.join("metrics.tsv"), log.to_tsv())?;
            println!(
                "trained {} epochs ({} steps); checkpoint and metrics in {}",
                ck.epochs_done,
                log.rows.len(),
                out.display()
            );
            Ok(())
        }
        Command::TrainAug { common, data, out } => {
            let mut map = load_config_map(&common)?;
            let config = train_config(&common, &mut map)?;
            map.expect_empty()?;
            let index = load_corpus(&data)?;
            let samples = index.load_samples(Some(Split::Train))?;
            let run = pipeline::train_augmenter(&samples, &config)?;
            fs::create_dir_all(&out)?;
            run.checkpoint.save(&out.join("checkpoint.bin"))?;
            fs::write(out.join("metrics.tsv"), run.log.to_tsv())?;
            let mut mi_log = String::from("epoch\tmean_mi\tcode_entropy\n");
            for (epoch, (mi, h)) in run.epoch_mi.iter().zip(&run.epoch_code_entropy).enumerate() {
                mi_log.push_str(&format!("{epoch}\t{mi}\t{h}\n"));
            }
            fs::write(out.join("mi_per_epoch.tsv"), mi_log)?;
            println!("trained augmenter for {} epochs; outputs in {}", run.checkpoint.epochs_done, out.display());
            Ok(())
        }
        Command::Augment { common, checkpoint, out } => {
            let mut map = load_config_map(&common)?;
            let counts = aug_counts(&mut map)?;
            let seed = match common.seed {
                Some(s) => s,
                None => map.take_parsed::<u64>("seed", "u64")?.unwrap_or(42),
            };
            map.expect_empty()?;
            let mut ck = Checkpoint::load(&checkpoint)?;
            let index = pipeline::produce_augmented_set(&mut ck, &counts, seed, &out)?;
            println!("wrote {} augmented samples to {}", index.len(), out.display());
            Ok(())
        }
        Command::Eval { common, checkpoint, data, split, out } => {
            let map = load_config_map(&common)?;
            map.expect_empty()?;
            let split = match split.as_str() {
                "train" => Some(Split::Train),
                "test" => Some(Split::Test),
                "all" => None,
                other => return Err(format!("unknown split {other:?} (want train|test|all)").into()),
            };
            let index = load_corpus(&data)?;
            let samples = index.load_samples(split)?;
            let mut ck = Checkpoint::load(&checkpoint)?;
            let report = eval::eval_report(&mut ck, &samples)?;
            fs::create_dir_all(&out)?;
            fs::write(out.join("report.tsv"), report.to_tsv())?;
            eval::dump_triptychs(&mut ck, &samples, &out.join("strips"), 8)?;
            print!("{}", report.to_tsv());
            Ok(())
        }
        Command::Ablate { common, data, out } => {
            let mut map = load_config_map(&common)?;
            let config = train_config(&common, &mut map)?;
            let counts = aug_counts(&mut map)?;
            map.expect_empty()?;
            let index = load_corpus(&data)?;
            fs::create_dir_all(&out)?;
            let table = eval::run_ablation(&index, &config, &counts, &out)?;
            fs::write(out.join("ablation.tsv"), table.to_tsv())?;
            print!("{}", table.to_tsv());
            Ok(())
        }
        Command::Gradcheck { common } => {
            let mut map = load_config_map(&common)?;
            let seed = match common.seed {
                Some(s) => s,
                None => map.take_parsed::<u64>("seed", "u64")?.unwrap_or(400),
            };
            map.expect_empty()?;
            let report = gradcheck::run(seed, 8)?;
            print!("{}", report.to_text());
            if !report.passed() {
                return Err("gradient check failed".into());
            }
            Ok(())
        }
    }
}
