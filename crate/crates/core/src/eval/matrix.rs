use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::report::{CellResult, MatrixReport};
use super::{delta_accuracy, quantize, Calibrations, Regime, TestMode};
use crate::attack::AttackConfig;
use crate::calibrate::{
    calibrate_adversarial, calibrate_natural, CalibrationResult, CalibrationTarget, PerturbationId,
};
use crate::data::{DatasetManifest, DatasetSplit};
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::perturb::IntensityMap;
use crate::rng::{derive_seed, stream};
use crate::tensor::{Architecture, ModelState};
use crate::train::{train, TrainConfig, TrainMode, TrainTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DatasetRef {
    Path(PathBuf),
    Inline(DatasetManifest),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    #[default]
    SmallCnn,
    Linear,
}

impl ModelKind {
    pub fn architecture(self, shape: [usize; 3], classes: usize) -> Architecture {
        let [h, w, c] = shape;
        match self {
            ModelKind::SmallCnn => Architecture::small_cnn(h, w, c, classes),
            ModelKind::Linear => Architecture::linear(h, w, c, classes),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub delay: usize,
}

impl Default for TrainingSettings {
    fn default() -> Self {
        TrainingSettings {
            epochs: 30,
            lr: 0.05,
            batch_size: 32,
            delay: 1,
        }
    }
}

impl TrainingSettings {
    pub fn config(&self, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            mode,
            epochs: self.epochs,
            delay: self.delay,
            lr: self.lr,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CalibrationSettings {
    pub alpha: f64,
    pub tolerance: f64,
    pub max_iterations: usize,
    pub precision: f64,
    /// Upper end of the epsilon bracket.
    pub epsilon_max: f64,
}

impl Default for CalibrationSettings {
    fn default() -> Self {
        let t = CalibrationTarget::default();
        CalibrationSettings {
            alpha: t.alpha,
            tolerance: t.tolerance,
            max_iterations: t.max_iterations,
            precision: t.precision,
            epsilon_max: 0.1,
        }
    }
}

impl CalibrationSettings {
    pub fn target(&self) -> CalibrationTarget {
        CalibrationTarget {
            alpha: self.alpha,
            tolerance: self.tolerance,
            max_iterations: self.max_iterations,
            precision: self.precision,
        }
    }
}

/// Matrix configuration, read from TOML.
///
/// ```toml
/// dataset = "blobs.toml"      # manifest path, or an inline [dataset] table
/// seeds = [0, 1, 2]
/// regimes = ["standard", "adv_k10", "natural_elastic"]
/// modes = ["clean", "adv_k10", "elastic"]
/// model = "small_cnn"         # or "linear"
///
/// [training]
/// epochs = 30
/// lr = 0.05
/// batch_size = 32
/// delay = 1
///
/// [calibration]
/// alpha = 0.10
/// tolerance = 0.01
/// max_iterations = 20
/// precision = 1e-4
/// epsilon_max = 0.1
///
/// [intensity]                 # endpoint constants, all optional
/// blur_sigma_max = 3.0
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub dataset: DatasetRef,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "Regime::standard_set")]
    pub regimes: Vec<Regime>,
    #[serde(default = "TestMode::standard_set")]
    pub modes: Vec<TestMode>,
    #[serde(default)]
    pub model: ModelKind,
    #[serde(default)]
    pub training: TrainingSettings,
    #[serde(default)]
    pub calibration: CalibrationSettings,
    #[serde(default)]
    pub intensity: IntensityMap,
}

fn default_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

impl MatrixConfig {
    pub fn new(dataset: DatasetManifest) -> Self {
        MatrixConfig {
            dataset: DatasetRef::Inline(dataset),
            seeds: default_seeds(),
            regimes: Regime::standard_set(),
            modes: TestMode::standard_set(),
            model: ModelKind::default(),
            training: TrainingSettings::default(),
            calibration: CalibrationSettings::default(),
            intensity: IntensityMap::default(),
        }
    }

    /// Parses a TOML config; a relative dataset path resolves against the
    /// config's directory and the manifest is inlined.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        if let DatasetRef::Path(p) = &cfg.dataset {
            let full = match path.parent() {
                Some(base) if p.is_relative() => base.join(p),
                _ => p.clone(),
            };
            cfg.dataset = DatasetRef::Inline(DatasetManifest::from_path(&full)?);
        }
        Ok(cfg)
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn manifest(&self) -> Result<DatasetManifest> {
        match &self.dataset {
            DatasetRef::Inline(m) => Ok(m.clone()),
            DatasetRef::Path(p) => DatasetManifest::from_path(p),
        }
    }

    /// Every perturbation that needs a calibrated strength.
    pub fn perturbations(&self) -> Vec<PerturbationId> {
        let mut set = BTreeSet::new();
        set.extend(self.regimes.iter().filter_map(Regime::perturbation));
        set.extend(self.modes.iter().filter_map(|m| match m {
            TestMode::Clean => None,
            TestMode::Perturbed(p) => Some(*p),
        }));
        set.into_iter().collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        self.calibration.target().validate()?;
        if !(self.calibration.epsilon_max > 0.0) {
            return Err(Error::Config("epsilon_max must be > 0".into()));
        }
        self.training.config(TrainMode::Standard, 0).validate()
    }
}

/// Everything produced for one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedRun {
    pub seed: u64,
    pub standard_clean_accuracy: Option<f64>,
    pub calibrations: Vec<(
        PerturbationId,
        std::result::Result<CalibrationResult, String>,
    )>,
    pub traces: Vec<(Regime, TrainTrace)>,
    pub regime_hashes: Vec<(Regime, String)>,
    pub failures: Vec<(String, String)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub shape: [usize; 3],
    pub classes: usize,
    pub sizes: [usize; 3],
    pub hashes: [String; 3],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRun {
    pub config: MatrixConfig,
    pub dataset: DatasetInfo,
    pub seeds: Vec<SeedRun>,
    pub report: MatrixReport,
}

pub(crate) fn content_hash<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("cache keys serialize");
    hex::encode(Sha256::digest(&json))
}

struct Cache {
    root: Option<PathBuf>,
}

impl Cache {
    fn path(&self, kind: &str, key: &str, ext: &str) -> Option<PathBuf> {
        self.root
            .as_ref()
            .map(|r| r.join(kind).join(format!("{key}.{ext}")))
    }

    fn load_json<T: for<'de> Deserialize<'de>>(&self, kind: &str, key: &str) -> Option<T> {
        let path = self.path(kind, key, "json")?;
        let bytes = fs::read(path).ok()?;
        serde_json::from_slice(&bytes).ok()
    }

    fn store_json<T: Serialize>(&self, kind: &str, key: &str, value: &T) -> Result<()> {
        if let Some(path) = self.path(kind, key, "json") {
            write_atomic(&path, &serde_json::to_vec_pretty(value)?)?;
        }
        Ok(())
    }

    fn load_model(&self, key: &str) -> Option<(ModelState, TrainTrace)> {
        let model = ModelState::load(&self.path("models", key, "plab")?).ok()?;
        let trace = self.load_json("traces", key)?;
        Some((model, trace))
    }

    fn store_model(&self, key: &str, model: &ModelState, trace: &TrainTrace) -> Result<()> {
        if let Some(path) = self.path("models", key, "plab") {
            write_atomic(&path, &model.to_bytes())?;
            self.store_json("traces", key, trace)?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Splits {
    train: DatasetSplit,
    val: DatasetSplit,
    test: DatasetSplit,
}

/// Trains every regime once per seed, calibrates on the standard model's
/// validation accuracy and evaluates every (regime, test mode) cell on the
/// test split. With a cache directory, finished models, calibrations and
/// cells are reused on the next run.
pub fn run_matrix(cfg: &MatrixConfig, cache_dir: Option<&Path>) -> Result<MatrixRun> {
    cfg.validate()?;
    let manifest = cfg.manifest()?;
    let (train_split, val, test) = manifest.load()?;
    let shape = train_split
        .image_shape()
        .ok_or_else(|| Error::EmptySplit(train_split.name.clone()))?;
    let dataset = DatasetInfo {
        name: manifest.name.clone(),
        shape,
        classes: manifest.classes,
        sizes: [train_split.len(), val.len(), test.len()],
        hashes: [
            train_split.content_hash(),
            val.content_hash(),
            test.content_hash(),
        ],
    };
    let splits = Splits {
        train: train_split,
        val,
        test,
    };
    let cache = Cache {
        root: cache_dir.map(Path::to_path_buf),
    };
    let arch = cfg.model.architecture(shape, manifest.classes);

    let mut seeds = Vec::new();
    let mut cells = Vec::new();
    for &seed in &cfg.seeds {
        let (run, seed_cells) = run_seed(cfg, &dataset, &splits, &arch, &cache, seed)?;
        seeds.push(run);
        cells.extend(seed_cells);
    }
    // Regime-major, then test mode, then seed, independent of run order.
    let order = |c: &CellResult| {
        (
            cfg.regimes.iter().position(|r| *r == c.regime),
            cfg.modes.iter().position(|m| *m == c.test_mode),
            cfg.seeds.iter().position(|s| *s == c.seed),
        )
    };
    cells.sort_by_key(order);
    Ok(MatrixRun {
        config: MatrixConfig {
            dataset: DatasetRef::Inline(manifest),
            ..cfg.clone()
        },
        dataset,
        seeds,
        report: MatrixReport { cells },
    })
}

#[derive(Serialize)]
struct ModelKey<'a> {
    train_hash: &'a str,
    arch: &'a Architecture,
    init_seed: u64,
    train: &'a TrainConfig,
}

fn trained(
    cache: &Cache,
    splits: &Splits,
    arch: &Architecture,
    dataset: &DatasetInfo,
    cfg: &TrainConfig,
) -> Result<(ModelState, TrainTrace, String)> {
    let init_seed = derive_seed(&[stream::INIT, cfg.seed]);
    let key = content_hash(&ModelKey {
        train_hash: &dataset.hashes[0],
        arch,
        init_seed,
        train: cfg,
    });
    if let Some((model, trace)) = cache.load_model(&key) {
        return Ok((model, trace, key));
    }
    let init = ModelState::init(arch.clone(), init_seed)?;
    let (model, trace) = train(&init, &splits.train, Some(&splits.val), cfg)?;
    cache.store_model(&key, &model, &trace)?;
    Ok((model, trace, key))
}

fn calibrate_one(
    model: &ModelState,
    val: &DatasetSplit,
    id: PerturbationId,
    cfg: &MatrixConfig,
    seed: u64,
) -> Result<CalibrationResult> {
    let target = cfg.calibration.target();
    match id {
        PerturbationId::Natural(kind) => {
            calibrate_natural(model, val, kind, &target, &cfg.intensity, seed)
        }
        PerturbationId::Adversarial { steps } => calibrate_adversarial(
            model,
            val,
            &AttackConfig::bim(0.0, steps),
            cfg.calibration.epsilon_max,
            &target,
        ),
    }
}

fn regime_mode(regime: Regime, calibrations: &Calibrations, seed: u64) -> Result<TrainMode> {
    Ok(match regime {
        Regime::Standard => TrainMode::Standard,
        Regime::Adversarial { steps } => {
            let eps = calibrations.intensity(PerturbationId::Adversarial { steps })?;
            TrainMode::Adversarial {
                attack: AttackConfig::pgd(eps, steps, seed),
            }
        }
        Regime::Natural(kind) => TrainMode::Natural {
            perturbation: calibrations.natural_spec(kind, seed)?,
        },
    })
}

#[derive(Serialize)]
struct CellKey<'a> {
    model: &'a str,
    test_hash: &'a str,
    mode: TestMode,
    strength: Option<f64>,
    map: &'a IntensityMap,
    seed: u64,
}

fn run_seed(
    cfg: &MatrixConfig,
    dataset: &DatasetInfo,
    splits: &Splits,
    arch: &Architecture,
    cache: &Cache,
    seed: u64,
) -> Result<(SeedRun, Vec<CellResult>)> {
    let mut run = SeedRun {
        seed,
        standard_clean_accuracy: None,
        calibrations: Vec::new(),
        traces: Vec::new(),
        regime_hashes: Vec::new(),
        failures: Vec::new(),
    };
    let mut cells = Vec::new();
    if cfg.regimes.is_empty() {
        return Ok((run, cells));
    }
    let fail_all = |run: &mut SeedRun, cells: &mut Vec<CellResult>, what: String, err: String| {
        for &regime in &cfg.regimes {
            for &mode in &cfg.modes {
                cells.push(CellResult::failed(regime, mode, seed, None, err.clone()));
            }
        }
        run.failures.push((what, err));
    };

    info!("seed {seed}: training standard model");
    let std_cfg = cfg.training.config(TrainMode::Standard, seed);
    let (std_model, std_trace, std_key) = match trained(cache, splits, arch, dataset, &std_cfg) {
        Ok(t) => t,
        Err(e) => {
            fail_all(&mut run, &mut cells, "standard".into(), e.to_string());
            return Ok((run, cells));
        }
    };
    let baseline = quantize(accuracy(&std_model, &splits.test)?);
    run.standard_clean_accuracy = Some(baseline);

    #[derive(Serialize)]
    struct CalibKey<'a> {
        model: &'a str,
        val_hash: &'a str,
        id: PerturbationId,
        settings: &'a CalibrationSettings,
        map: &'a IntensityMap,
        seed: u64,
    }
    let mut ok_results = Vec::new();
    for id in cfg.perturbations() {
        let key = content_hash(&CalibKey {
            model: &std_key,
            val_hash: &dataset.hashes[1],
            id,
            settings: &cfg.calibration,
            map: &cfg.intensity,
            seed,
        });
        let result = match cache.load_json::<CalibrationResult>("calibration", &key) {
            Some(r) => Ok(r),
            None => {
                info!("seed {seed}: calibrating {id}");
                let r = calibrate_one(&std_model, &splits.val, id, cfg, seed);
                if let Ok(r) = &r {
                    cache.store_json("calibration", &key, r)?;
                }
                r
            }
        };
        match &result {
            Ok(r) => {
                info!(
                    "seed {seed}: {id} intensity {:.5} drop {:.4}{}",
                    r.intensity,
                    r.measured_drop,
                    if r.converged { "" } else { " (not converged)" }
                );
                ok_results.push(r.clone());
            }
            Err(e) => run
                .failures
                .push((format!("calibration {id}"), e.to_string())),
        }
        run.calibrations
            .push((id, result.map_err(|e| e.to_string())));
    }
    let calibrations = Calibrations::new(cfg.intensity.clone(), ok_results);

    for &regime in &cfg.regimes {
        let model = if regime == Regime::Standard {
            Ok((std_model.clone(), std_trace.clone(), std_key.clone()))
        } else {
            regime_mode(regime, &calibrations, seed).and_then(|mode| {
                info!("seed {seed}: training {regime}");
                trained(
                    cache,
                    splits,
                    arch,
                    dataset,
                    &cfg.training.config(mode, seed),
                )
            })
        };
        let (model, trace, key) = match model {
            Ok(m) => m,
            Err(e) => {
                let msg = e.to_string();
                run.failures.push((regime.to_string(), msg.clone()));
                for &mode in &cfg.modes {
                    cells.push(CellResult::failed(
                        regime,
                        mode,
                        seed,
                        Some(baseline),
                        msg.clone(),
                    ));
                }
                continue;
            }
        };
        run.traces.push((regime, trace));
        run.regime_hashes.push((regime, key.clone()));
        for &mode in &cfg.modes {
            let strength = match mode {
                TestMode::Clean => None,
                TestMode::Perturbed(id) => calibrations.intensity(id).ok(),
            };
            let cell_hash = content_hash(&CellKey {
                model: &key,
                test_hash: &dataset.hashes[2],
                mode,
                strength,
                map: &cfg.intensity,
                seed,
            });
            let outcome = match cache.load_json("cells", &cell_hash) {
                Some(record) => Ok(record),
                None => {
                    let r = delta_accuracy(&model, &splits.test, regime, mode, &calibrations, seed);
                    if let Ok(record) = &r {
                        cache.store_json("cells", &cell_hash, record)?;
                    }
                    r.map_err(|e| e.to_string())
                }
            };
            cells.push(CellResult {
                regime,
                test_mode: mode,
                seed,
                baseline: Some(baseline),
                cell_hash,
                outcome,
            });
        }
    }
    Ok((run, cells))
}
