use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use plab::attack::{attack_split, AttackConfig};
use plab::calibrate::{
    calibrate_adversarial, calibrate_natural, calibration_trace_csv, verify_calibration,
    CalibrationResult, CalibrationTarget, PerturbationId,
};
use plab::data::{read_image, write_image, BlobConfig, DatasetManifest, DatasetSplit, Image};
use plab::eval::{
    delta_accuracy, emit_outputs, run_matrix, Calibrations, MatrixConfig, Regime, TestMode,
};
use plab::metrics::predict_images;
use plab::perturb::{perturb, IntensityMap, PerturbationKind, PerturbationSpec};
use plab::tensor::ModelState;
use plab::train::{train, TrainMode};

/// Robustness lab: natural perturbations, l-inf attacks, calibration,
/// robust training and the evaluation matrix.
#[derive(Parser, Debug)]
#[command(name = "plab", version)]
struct Cli {
    /// Seed for model init, shuffling and perturbation draws.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Matrix/run config (TOML). Supplies the dataset, training, calibration
    /// and intensity settings; explicit flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Apply one natural perturbation to an image file (PNG or PPM/PGM).
    Perturb(PerturbArgs),
    /// Attack a split with BIM/PGD and write per-example predictions.
    Attack(AttackArgs),
    /// Calibrate perturbation strengths to a target accuracy drop.
    Calibrate(CalibrateArgs),
    /// Train a model in one of the three regimes.
    Train(TrainArgs),
    /// Measure the accuracy change of a model under one test mode.
    Evaluate(EvaluateArgs),
    /// Run the full regime x test-mode matrix.
    Matrix(MatrixArgs),
}

#[derive(Args, Debug)]
struct DataArgs {
    /// Dataset manifest (TOML). Defaults to the config's dataset, then to
    /// the built-in blobs set.
    #[arg(long)]
    dataset: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum SplitName {
    Train,
    Val,
    Test,
}

#[derive(Args, Debug)]
struct PerturbArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    kind: PerturbationKind,
    /// Intensity in [0, 1].
    #[arg(long)]
    intensity: f64,
    /// Image index keying the random draw.
    #[arg(long, default_value_t = 0)]
    index: u64,
    /// Output file name inside --out (extension picks the format).
    #[arg(long, default_value = "perturbed.png")]
    output: String,
}

#[derive(Args, Debug)]
struct AttackArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    epsilon: f64,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Per-step size; defaults to 2.5 * epsilon / steps.
    #[arg(long)]
    step_size: Option<f64>,
    /// Random start inside the ball (PGD) instead of BIM.
    #[arg(long)]
    pgd: bool,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
    /// Also write the first N adversarial images as PNG under `attack/`.
    #[arg(long, default_value_t = 8)]
    save_images: usize,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// Perturbations to calibrate (`elastic`, ..., `adv_k10`); all seven when omitted.
    #[arg(long = "perturbation", value_delimiter = ',')]
    perturbations: Vec<PerturbationId>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    epsilon_max: Option<f64>,
    #[arg(long, value_enum, default_value = "val")]
    split: SplitName,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeName {
    Standard,
    Adversarial,
    Natural,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, value_enum, default_value = "standard")]
    mode: ModeName,
    /// Natural kind for `--mode natural`.
    #[arg(long)]
    kind: Option<PerturbationKind>,
    /// Natural intensity, or epsilon for `--mode adversarial`.
    #[arg(long)]
    intensity: Option<f64>,
    /// Read the intensity from a calibration file written by `calibrate`.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    delay: Option<usize>,
    /// Checkpoint file name inside --out.
    #[arg(long, default_value = "model.plab")]
    checkpoint: String,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long)]
    model: PathBuf,
    /// `clean`, a natural kind or `adv_k<K>`.
    #[arg(long = "mode", value_delimiter = ',', default_value = "clean")]
    modes: Vec<TestMode>,
    /// Calibration file written by `calibrate`; required for perturbed modes.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "test")]
    split: SplitName,
}

#[derive(Args, Debug)]
struct MatrixArgs {
    /// Ignore and do not write the result cache.
    #[arg(long)]
    no_cache: bool,
}

/// The config file, or defaults around the built-in blobs set.
fn load_config(cli: &Cli) -> Result<MatrixConfig> {
    match &cli.config {
        Some(p) => {
            MatrixConfig::from_path(p).with_context(|| format!("reading config {}", p.display()))
        }
        None => Ok(MatrixConfig::new(DatasetManifest::blobs(
            BlobConfig::default(),
        ))),
    }
}

fn load_splits(cli: &Cli, data: &DataArgs) -> Result<(DatasetSplit, DatasetSplit, DatasetSplit)> {
    let manifest = match &data.dataset {
        Some(p) => DatasetManifest::from_path(p)?,
        None => load_config(cli)?.manifest()?,
    };
    Ok(manifest.load()?)
}

fn pick(splits: (DatasetSplit, DatasetSplit, DatasetSplit), which: SplitName) -> DatasetSplit {
    match which {
        SplitName::Train => splits.0,
        SplitName::Val => splits.1,
        SplitName::Test => splits.2,
    }
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).with_context(|| format!("creating {}", cli.out.display()))?;
    Ok(&cli.out)
}

fn load_model(path: &Path) -> Result<ModelState> {
    ModelState::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CalibrationFile {
    map: IntensityMap,
    results: Vec<CalibrationResult>,
}

fn read_calibrations(path: &Path) -> Result<Calibrations> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let file: CalibrationFile = serde_json::from_str(&text)?;
    Ok(Calibrations::new(file.map, file.results))
}

fn cmd_perturb(cli: &Cli, args: &PerturbArgs) -> Result<()> {
    let img = read_image(&args.input)?;
    let map = load_config(cli)?.intensity;
    let spec = PerturbationSpec::with_map(args.kind, args.intensity, cli.seed, &map)?;
    let out = perturb(&img, &spec, args.index)?;
    let path = out_dir(cli)?.join(&args.output);
    write_image(&out, &path)?;
    let spec_path = path.with_extension("json");
    fs::write(&spec_path, serde_json::to_string_pretty(&spec)?)?;
    println!(
        "{} -> {} ({} at {}, mean |change| {:.4})",
        args.input.display(),
        path.display(),
        args.kind,
        args.intensity,
        img.mean_l1_distance(&out)
    );
    Ok(())
}

fn cmd_attack(cli: &Cli, args: &AttackArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let split = pick(load_splits(cli, &args.data)?, args.split);
    let cfg = AttackConfig {
        epsilon: args.epsilon,
        step_size: args.step_size,
        steps: args.steps,
        random_start: args.pgd,
        seed: cli.seed,
    };
    let adv = attack_split(&model, &split, &cfg)?;
    let clean: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    let clean_pred = predict_images(&model, &clean)?;
    let adv_pred = predict_images(&model, &adv)?;
    let mut csv = String::from("index,label,clean_pred,adv_pred,linf\n");
    let (mut c, mut a) = (0, 0);
    for (i, e) in split.examples.iter().enumerate() {
        c += (clean_pred[i] == e.label) as usize;
        a += (adv_pred[i] == e.label) as usize;
        csv.push_str(&format!(
            "{i},{},{},{},{}\n",
            e.label,
            clean_pred[i],
            adv_pred[i],
            clean[i].linf_distance(&adv[i])
        ));
    }
    let path = out_dir(cli)?.join("attack.csv");
    fs::write(&path, csv)?;
    if args.save_images > 0 {
        let dir = out_dir(cli)?.join("attack");
        fs::create_dir_all(&dir)?;
        for (i, img) in adv.iter().take(args.save_images).enumerate() {
            write_image(img, &dir.join(format!("adv_{i:04}.png")))?;
        }
    }
    let n = split.len() as f64;
    println!(
        "clean accuracy {:.4}, attacked accuracy {:.4} (epsilon {}, {} steps) -> {}",
        c as f64 / n,
        a as f64 / n,
        args.epsilon,
        args.steps,
        path.display()
    );
    Ok(())
}

fn cmd_calibrate(cli: &Cli, args: &CalibrateArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let model = load_model(&args.model)?;
    let split = pick(load_splits(cli, &args.data)?, args.split);
    let target = CalibrationTarget {
        alpha: args.alpha.unwrap_or(cfg.calibration.alpha),
        tolerance: args.tolerance.unwrap_or(cfg.calibration.tolerance),
        ..cfg.calibration.target()
    };
    let eps_max = args.epsilon_max.unwrap_or(cfg.calibration.epsilon_max);
    let ids = if args.perturbations.is_empty() {
        PerturbationId::standard_set()
    } else {
        args.perturbations.clone()
    };
    let mut results = Vec::new();
    let mut failed = Vec::new();
    for id in ids {
        info!("calibrating {id}");
        let r = match id {
            PerturbationId::Natural(kind) => {
                calibrate_natural(&model, &split, kind, &target, &cfg.intensity, cli.seed)
            }
            PerturbationId::Adversarial { steps } => calibrate_adversarial(
                &model,
                &split,
                &AttackConfig::bim(0.0, steps),
                eps_max,
                &target,
            ),
        };
        match r {
            Ok(r) => results.push(r),
            Err(e) => {
                eprintln!("{id}: {e}");
                failed.push(id);
            }
        }
    }
    let report = verify_calibration(&results, &target);
    println!("{report}");
    let out = out_dir(cli)?;
    fs::write(
        out.join("calibration_trace.csv"),
        calibration_trace_csv(&results),
    )?;
    let file = CalibrationFile {
        map: cfg.intensity,
        results,
    };
    fs::write(
        out.join("calibration.json"),
        serde_json::to_string_pretty(&file)?,
    )?;
    println!("wrote {}", out.join("calibration.json").display());
    if !failed.is_empty() {
        bail!("calibration failed for {} perturbation(s)", failed.len());
    }
    Ok(())
}

fn cmd_train(cli: &Cli, args: &TrainArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let (train_split, val, _) = load_splits(cli, &args.data)?;
    let calibrated = |id: PerturbationId| -> Result<f64> {
        match (args.intensity, &args.calibration) {
            (Some(v), _) => Ok(v),
            (None, Some(p)) => Ok(read_calibrations(p)?.intensity(id)?),
            (None, None) => bail!("{id} training needs --intensity or --calibration"),
        }
    };
    let mode = match args.mode {
        ModeName::Standard => TrainMode::Standard,
        ModeName::Adversarial => TrainMode::Adversarial {
            attack: AttackConfig::pgd(
                calibrated(PerturbationId::Adversarial { steps: args.steps })?,
                args.steps,
                cli.seed,
            ),
        },
        ModeName::Natural => {
            let Some(kind) = args.kind else {
                bail!("--mode natural needs --kind");
            };
            let s = calibrated(PerturbationId::Natural(kind))?;
            TrainMode::Natural {
                perturbation: PerturbationSpec::with_map(kind, s, cli.seed, &cfg.intensity)?,
            }
        }
    };
    let mut settings = cfg.training.clone();
    settings.epochs = args.epochs.unwrap_or(settings.epochs);
    settings.lr = args.lr.unwrap_or(settings.lr);
    settings.batch_size = args.batch_size.unwrap_or(settings.batch_size);
    settings.delay = args.delay.unwrap_or(settings.delay);
    let train_cfg = settings.config(mode, cli.seed);
    let shape = train_split.image_shape().context("empty training split")?;
    let arch = cfg.model.architecture(shape, train_split.classes);
    let init = ModelState::init(
        arch,
        plab::rng::derive_seed(&[plab::rng::stream::INIT, cli.seed]),
    )?;
    let (model, trace) = train(&init, &train_split, Some(&val), &train_cfg)?;
    let out = out_dir(cli)?;
    let ckpt = out.join(&args.checkpoint);
    model.save(&ckpt)?;
    fs::write(out.join("trace.csv"), trace.to_csv())?;
    if let Some(last) = trace.epochs.last() {
        println!(
            "epoch {}: loss {:.4}, train accuracy {:.4}, val accuracy {:.4} -> {}",
            last.epoch,
            last.loss_combined,
            last.train_accuracy,
            last.val_accuracy.unwrap_or(f64::NAN),
            ckpt.display()
        );
    }
    Ok(())
}

fn cmd_evaluate(cli: &Cli, args: &EvaluateArgs) -> Result<()> {
    let model = load_model(&args.model)?;
    let split = pick(load_splits(cli, &args.data)?, args.split);
    let calibrations = match &args.calibration {
        Some(p) => read_calibrations(p)?,
        None => Calibrations::default(),
    };
    let mut csv = String::from(
        "test_mode,examples,clean_accuracy,perturbed_accuracy,delta_accuracy,intensity\n",
    );
    for &mode in &args.modes {
        let r = delta_accuracy(
            &model,
            &split,
            Regime::Standard,
            mode,
            &calibrations,
            cli.seed,
        )?;
        println!(
            "{mode:<12} clean {:.4} perturbed {:.4} delta {:+.4}",
            r.clean_accuracy(),
            r.perturbed_accuracy(),
            r.delta_accuracy()
        );
        csv.push_str(&format!(
            "{mode},{},{},{},{},{}\n",
            r.examples,
            r.clean_accuracy(),
            r.perturbed_accuracy(),
            r.delta_accuracy(),
            r.intensity
        ));
    }
    fs::write(out_dir(cli)?.join("evaluate.csv"), csv)?;
    Ok(())
}

fn cmd_matrix(cli: &Cli, args: &MatrixArgs) -> Result<()> {
    let cfg = load_config(cli)?;
    let out = out_dir(cli)?;
    let cache = (!args.no_cache).then(|| out.join("cache"));
    let run = run_matrix(&cfg, cache.as_deref())?;
    emit_outputs(&run, out)?;
    for s in run.report.summaries() {
        println!(
            "{:<20} {:<12} accuracy {:.4} delta {:+.4} +- {:.4} normalized {:+.4}{}",
            s.regime.to_string(),
            s.test_mode.to_string(),
            s.perturbed_accuracy.0,
            s.delta_accuracy.0,
            s.delta_accuracy.1,
            s.normalized_accuracy.0,
            if s.failures > 0 {
                format!(" ({} failed)", s.failures)
            } else {
                String::new()
            }
        );
    }
    for s in &run.seeds {
        for (what, err) in &s.failures {
            eprintln!("seed {}: {what} failed: {err}", s.seed);
        }
    }
    println!("wrote {}", out.join("matrix.csv").display());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    env_logger::Builder::new()
        .filter_level(if cli.verbose {
            log::LevelFilter::Info
        } else {
            log::LevelFilter::Warn
        })
        .format_timestamp_secs()
        .init();
    match &cli.command {
        Command::Perturb(a) => cmd_perturb(&cli, a),
        Command::Attack(a) => cmd_attack(&cli, a),
        Command::Calibrate(a) => cmd_calibrate(&cli, a),
        Command::Train(a) => cmd_train(&cli, a),
        Command::Evaluate(a) => cmd_evaluate(&cli, a),
        Command::Matrix(a) => cmd_matrix(&cli, a),
    }
}
