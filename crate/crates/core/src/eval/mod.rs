//! Accuracy-change evaluation, normalization and the regime x test-mode
//! experiment matrix.

mod matrix;
mod report;
pub mod svg;

pub use matrix::{
    run_matrix, CalibrationSettings, DatasetInfo, DatasetRef, MatrixConfig, MatrixRun, ModelKind,
    SeedRun, TrainingSettings,
};
pub use report::{
    emit_outputs, CellOutcome, CellResult, CellSummary, MatrixReport, MATRIX_CSV_HEADER,
};

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_split, AttackConfig};
use crate::calibrate::{CalibrationResult, PerturbationId};
use crate::data::{DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::metrics::{correct, predict_images};
use crate::perturb::{perturb_all, IntensityMap, PerturbationKind, PerturbationSpec};
use crate::rng::{derive_seed, stream};
use crate::tensor::ModelState;

/// A test column: clean data or one calibrated perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum TestMode {
    Clean,
    Perturbed(PerturbationId),
}

impl TestMode {
    /// `clean`, `adv_k10` and the six natural kinds.
    pub fn standard_set() -> Vec<TestMode> {
        std::iter::once(TestMode::Clean)
            .chain(
                PerturbationId::standard_set()
                    .into_iter()
                    .map(TestMode::Perturbed),
            )
            .collect()
    }
}

impl fmt::Display for TestMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TestMode::Clean => f.write_str("clean"),
            TestMode::Perturbed(p) => p.fmt(f),
        }
    }
}

impl FromStr for TestMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.eq_ignore_ascii_case("clean") {
            Ok(TestMode::Clean)
        } else {
            Ok(TestMode::Perturbed(s.parse()?))
        }
    }
}

impl From<TestMode> for String {
    fn from(m: TestMode) -> String {
        m.to_string()
    }
}

impl TryFrom<String> for TestMode {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// A training row of the matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum Regime {
    Standard,
    Adversarial { steps: usize },
    Natural(PerturbationKind),
}

impl Regime {
    /// `standard`, `adv_k10` and one natural regime per kind.
    pub fn standard_set() -> Vec<Regime> {
        let mut v = vec![Regime::Standard, Regime::Adversarial { steps: 10 }];
        v.extend(PerturbationKind::ALL.iter().map(|&k| Regime::Natural(k)));
        v
    }

    /// The perturbation this regime trains against.
    pub fn perturbation(&self) -> Option<PerturbationId> {
        match *self {
            Regime::Standard => None,
            Regime::Adversarial { steps } => Some(PerturbationId::Adversarial { steps }),
            Regime::Natural(k) => Some(PerturbationId::Natural(k)),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Regime::Standard => f.write_str("standard"),
            Regime::Adversarial { steps } => write!(f, "adv_k{steps}"),
            Regime::Natural(k) => write!(f, "natural_{}", k.name()),
        }
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "standard" {
            return Ok(Regime::Standard);
        }
        if let Some(kind) = lower.strip_prefix("natural_") {
            return Ok(Regime::Natural(kind.parse()?));
        }
        match lower.parse::<PerturbationId>() {
            Ok(PerturbationId::Adversarial { steps }) => Ok(Regime::Adversarial { steps }),
            _ => Err(Error::InvalidParam(format!(
                "unknown regime {s:?} (expected standard, adv_k<K> or natural_<kind>)"
            ))),
        }
    }
}

impl From<Regime> for String {
    fn from(r: Regime) -> String {
        r.to_string()
    }
}

impl TryFrom<String> for Regime {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

/// Calibrated intensities for one model, looked up by perturbation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Calibrations {
    pub map: IntensityMap,
    pub results: BTreeMap<PerturbationId, CalibrationResult>,
}

impl Calibrations {
    pub fn new(map: IntensityMap, results: impl IntoIterator<Item = CalibrationResult>) -> Self {
        Calibrations {
            map,
            results: results.into_iter().map(|r| (r.perturbation, r)).collect(),
        }
    }

    pub fn get(&self, id: PerturbationId) -> Result<&CalibrationResult> {
        self.results
            .get(&id)
            .ok_or_else(|| Error::MissingCalibration(id.to_string()))
    }

    pub fn intensity(&self, id: PerturbationId) -> Result<f64> {
        Ok(self.get(id)?.intensity)
    }

    pub fn natural_spec(&self, kind: PerturbationKind, seed: u64) -> Result<PerturbationSpec> {
        let s = self.intensity(PerturbationId::Natural(kind))?;
        PerturbationSpec::with_map(kind, s, seed, &self.map)
    }
}

/// Seed of the test-time perturbation stream. Disjoint from the training and
/// calibration streams.
pub fn evaluation_seed(seed: u64) -> u64 {
    derive_seed(&[stream::EVAL_PERTURB, seed])
}

/// Rounds onto the dyadic grid `k / 2^36`. Differences and sums of grid
/// points in `[-1, 1]` are exact in `f64`, which makes normalization
/// invertible bit for bit.
pub fn quantize(x: f64) -> f64 {
    const GRID: f64 = (1u64 << 36) as f64;
    (x * GRID).round() / GRID
}

/// Accuracy relative to a baseline (the standard model's clean accuracy).
pub fn normalize(accuracy: f64, baseline: f64) -> f64 {
    quantize(accuracy) - quantize(baseline)
}

pub fn denormalize(normalized: f64, baseline: f64) -> f64 {
    normalized + quantize(baseline)
}

/// Per-example `1[perturbed correct] - 1[clean correct]`.
pub fn per_example_delta(clean: &[bool], perturbed: &[bool]) -> Vec<i8> {
    clean
        .iter()
        .zip(perturbed)
        .map(|(&c, &p)| p as i8 - c as i8)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub regime: Regime,
    pub test_mode: TestMode,
    pub seed: u64,
    pub examples: usize,
    pub clean_correct: usize,
    pub perturbed_correct: usize,
    /// Calibrated intensity or epsilon applied; 0 for the clean column.
    pub intensity: f64,
}

impl EvalRecord {
    /// Clean accuracy on the dyadic grid.
    pub fn clean_accuracy(&self) -> f64 {
        quantize(self.clean_correct as f64 / self.examples as f64)
    }

    pub fn perturbed_accuracy(&self) -> f64 {
        quantize(self.perturbed_correct as f64 / self.examples as f64)
    }

    /// Mean per-example accuracy change. Exactly
    /// `perturbed_accuracy() - clean_accuracy()`.
    pub fn delta_accuracy(&self) -> f64 {
        self.perturbed_accuracy() - self.clean_accuracy()
    }

    /// `sum_n (1[perturbed correct] - 1[clean correct])`.
    pub fn delta_count(&self) -> i64 {
        self.perturbed_correct as i64 - self.clean_correct as i64
    }
}

/// The perturbed copy of `split` for `mode`, with calibrated strength.
pub fn perturbed_inputs(
    model: &ModelState,
    split: &DatasetSplit,
    mode: TestMode,
    calibrations: &Calibrations,
    seed: u64,
) -> Result<(Vec<Image>, f64)> {
    let images: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    match mode {
        TestMode::Clean => Ok((images, 0.0)),
        TestMode::Perturbed(PerturbationId::Natural(kind)) => {
            let spec = calibrations.natural_spec(kind, evaluation_seed(seed))?;
            let indices: Vec<usize> = (0..images.len()).collect();
            Ok((perturb_all(&images, &spec, &indices)?, spec.intensity))
        }
        TestMode::Perturbed(id @ PerturbationId::Adversarial { steps }) => {
            let eps = calibrations.intensity(id)?;
            let adv = attack_split(model, split, &AttackConfig::bim(eps, steps))?;
            Ok((adv, eps))
        }
    }
}

/// Evaluates `model` on the clean split and on its perturbed copy.
pub fn delta_accuracy(
    model: &ModelState,
    split: &DatasetSplit,
    regime: Regime,
    mode: TestMode,
    calibrations: &Calibrations,
    seed: u64,
) -> Result<EvalRecord> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    let labels = split.labels();
    let clean_images: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    let clean = correct(&predict_images(model, &clean_images)?, &labels);
    let perturbed = if mode == TestMode::Clean {
        clean.clone()
    } else {
        let (images, _) = perturbed_inputs(model, split, mode, calibrations, seed)?;
        correct(&predict_images(model, &images)?, &labels)
    };
    let intensity = match mode {
        TestMode::Clean => 0.0,
        TestMode::Perturbed(id) => calibrations.intensity(id)?,
    };
    Ok(record_from_indicators(
        regime, mode, seed, &clean, &perturbed, intensity,
    ))
}

pub fn record_from_indicators(
    regime: Regime,
    test_mode: TestMode,
    seed: u64,
    clean: &[bool],
    perturbed: &[bool],
    intensity: f64,
) -> EvalRecord {
    EvalRecord {
        regime,
        test_mode,
        seed,
        examples: clean.len(),
        clean_correct: clean.iter().filter(|&&c| c).count(),
        perturbed_correct: perturbed.iter().filter(|&&c| c).count(),
        intensity,
    }
}
