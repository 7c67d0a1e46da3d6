//! Calibration of every perturbation to a common accuracy drop (the
//! robustification level) by bisection on its scalar intensity.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attack::{attack_split, AttackConfig};
use crate::data::{DatasetSplit, Image};
use crate::error::{Error, Result};
use crate::metrics::{accuracy_of, predict_images};
use crate::perturb::{perturb_all, IntensityMap, PerturbationKind, PerturbationSpec};
use crate::rng::{derive_seed, stream};
use crate::tensor::ModelState;

/// A perturbation family: one of the natural kinds or the BIM attack with a
/// given step count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum PerturbationId {
    Natural(PerturbationKind),
    Adversarial { steps: usize },
}

impl PerturbationId {
    /// The six natural kinds followed by `adv_k10`.
    pub fn standard_set() -> Vec<PerturbationId> {
        let mut v = vec![PerturbationId::Adversarial { steps: 10 }];
        v.extend(
            PerturbationKind::ALL
                .iter()
                .map(|&k| PerturbationId::Natural(k)),
        );
        v
    }
}

impl fmt::Display for PerturbationId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PerturbationId::Natural(k) => f.write_str(k.name()),
            PerturbationId::Adversarial { steps } => write!(f, "adv_k{steps}"),
        }
    }
}

impl FromStr for PerturbationId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase();
        if lower == "adv" {
            return Ok(PerturbationId::Adversarial { steps: 10 });
        }
        if let Some(k) = lower.strip_prefix("adv_k") {
            let steps = k
                .parse()
                .map_err(|_| Error::InvalidParam(format!("bad step count in {s:?}")))?;
            return Ok(PerturbationId::Adversarial { steps });
        }
        Ok(PerturbationId::Natural(lower.parse()?))
    }
}

impl From<PerturbationId> for String {
    fn from(p: PerturbationId) -> String {
        p.to_string()
    }
}

impl TryFrom<String> for PerturbationId {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTarget {
    /// Target accuracy drop.
    pub alpha: f64,
    /// Accepted `|measured - alpha|`.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Bisection stops once the bracket is narrower than this.
    pub precision: f64,
}

impl Default for CalibrationTarget {
    fn default() -> Self {
        CalibrationTarget {
            alpha: 0.10,
            tolerance: 0.01,
            max_iterations: 20,
            precision: 1e-4,
        }
    }
}

impl CalibrationTarget {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidParam(format!(
                "alpha {} outside [0, 1)",
                self.alpha
            )));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::InvalidParam("tolerance must be > 0".into()));
        }
        if !(self.precision > 0.0) {
            return Err(Error::InvalidParam("precision must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub intensity: f64,
    pub drop: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationResult {
    pub perturbation: PerturbationId,
    /// Natural intensity in `[0, 1]`, or epsilon for the attack.
    pub intensity: f64,
    pub measured_drop: f64,
    /// Bisection midpoints evaluated.
    pub iterations: usize,
    pub converged: bool,
    pub trace: Vec<TracePoint>,
}

/// Bisection of a non-decreasing `drop(intensity)` on `[0, upper]` for
/// `drop = alpha`. `drop(0)` is taken to be 0 (every perturbation is the
/// identity there). The bracket `drop(lo) <= alpha <= drop(hi)` holds after
/// every step.
pub fn bisect_drop<F>(
    perturbation: PerturbationId,
    upper: f64,
    target: &CalibrationTarget,
    mut drop_at: F,
) -> Result<CalibrationResult>
where
    F: FnMut(f64) -> Result<f64>,
{
    target.validate()?;
    let mut trace = vec![TracePoint {
        intensity: 0.0,
        drop: 0.0,
    }];
    let finish = |trace: Vec<TracePoint>, iterations: usize| {
        let best = *trace
            .iter()
            .min_by(|a, b| {
                (a.drop - target.alpha)
                    .abs()
                    .total_cmp(&(b.drop - target.alpha).abs())
                    .then(a.intensity.total_cmp(&b.intensity))
            })
            .expect("trace is never empty");
        CalibrationResult {
            perturbation,
            intensity: best.intensity,
            measured_drop: best.drop,
            iterations,
            converged: (best.drop - target.alpha).abs() <= target.tolerance,
            trace,
        }
    };
    if target.alpha <= target.tolerance {
        return Ok(finish(trace, 0));
    }
    let drop_hi = drop_at(upper)?;
    trace.push(TracePoint {
        intensity: upper,
        drop: drop_hi,
    });
    if drop_hi < target.alpha - target.tolerance {
        return Err(Error::InvalidBracket {
            what: perturbation.to_string(),
            drop_at_max: drop_hi,
            target: target.alpha,
        });
    }
    if (drop_hi - target.alpha).abs() <= target.tolerance {
        return Ok(finish(trace, 0));
    }
    let (mut lo, mut hi) = (0.0, upper);
    let mut iterations = 0;
    while iterations < target.max_iterations && hi - lo >= target.precision {
        let mid = 0.5 * (lo + hi);
        let d = drop_at(mid)?;
        iterations += 1;
        trace.push(TracePoint {
            intensity: mid,
            drop: d,
        });
        if (d - target.alpha).abs() <= target.tolerance {
            break;
        }
        if d < target.alpha {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(finish(trace, iterations))
}

/// Seed of the fixed evaluation stream used while calibrating.
pub fn calibration_seed(seed: u64) -> u64 {
    derive_seed(&[stream::CALIB_PERTURB, seed])
}

fn clean_parts(model: &ModelState, split: &DatasetSplit) -> Result<(Vec<Image>, Vec<usize>, f64)> {
    if split.is_empty() {
        return Err(Error::EmptySplit(split.name.clone()));
    }
    let images: Vec<Image> = split.examples.iter().map(|e| e.image.clone()).collect();
    let labels = split.labels();
    let clean_acc = accuracy_of(&predict_images(model, &images)?, &labels);
    Ok((images, labels, clean_acc))
}

/// Accuracy drop of `spec` on `split` with draws keyed by example index.
pub fn natural_drop(
    model: &ModelState,
    split: &DatasetSplit,
    spec: &PerturbationSpec,
) -> Result<f64> {
    let (images, labels, clean_acc) = clean_parts(model, split)?;
    let indices: Vec<usize> = (0..images.len()).collect();
    let perturbed = perturb_all(&images, spec, &indices)?;
    Ok(clean_acc - accuracy_of(&predict_images(model, &perturbed)?, &labels))
}

pub fn calibrate_natural(
    model: &ModelState,
    split: &DatasetSplit,
    kind: PerturbationKind,
    target: &CalibrationTarget,
    map: &IntensityMap,
    seed: u64,
) -> Result<CalibrationResult> {
    let (images, labels, clean_acc) = clean_parts(model, split)?;
    let indices: Vec<usize> = (0..images.len()).collect();
    let eval_seed = calibration_seed(seed);
    bisect_drop(PerturbationId::Natural(kind), 1.0, target, |s| {
        let spec = PerturbationSpec::with_map(kind, s, eval_seed, map)?;
        let perturbed = perturb_all(&images, &spec, &indices)?;
        Ok(clean_acc - accuracy_of(&predict_images(model, &perturbed)?, &labels))
    })
}

/// Bisection on epsilon in `[0, epsilon_max]` with the template's step count
/// and step-size rule. The template's epsilon is ignored.
pub fn calibrate_adversarial(
    model: &ModelState,
    split: &DatasetSplit,
    template: &AttackConfig,
    epsilon_max: f64,
    target: &CalibrationTarget,
) -> Result<CalibrationResult> {
    let (_, labels, clean_acc) = clean_parts(model, split)?;
    let id = PerturbationId::Adversarial {
        steps: template.steps,
    };
    bisect_drop(id, epsilon_max, target, |eps| {
        let adv = attack_split(model, split, &template.with_epsilon(eps))?;
        Ok(clean_acc - accuracy_of(&predict_images(model, &adv)?, &labels))
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationEntry {
    pub perturbation: PerturbationId,
    pub intensity: f64,
    pub measured_drop: f64,
    pub deviation: f64,
    pub within_tolerance: bool,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub alpha: f64,
    pub tolerance: f64,
    pub entries: Vec<CalibrationEntry>,
    pub mean_drop: f64,
    /// Population standard deviation of the measured drops.
    pub std_drop: f64,
    pub pass: bool,
}

impl CalibrationReport {
    pub fn offenders(&self) -> Vec<PerturbationId> {
        self.entries
            .iter()
            .filter(|e| !e.within_tolerance)
            .map(|e| e.perturbation)
            .collect()
    }
}

impl fmt::Display for CalibrationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(
                f,
                "{:<12} intensity {:<10.6} drop {:.4} ({:+.4}) {}",
                e.perturbation.to_string(),
                e.intensity,
                e.measured_drop,
                e.deviation,
                if e.within_tolerance {
                    "ok"
                } else {
                    "OUT OF TOLERANCE"
                }
            )?;
        }
        write!(
            f,
            "mean {:.4} std {:.4} -> {}",
            self.mean_drop,
            self.std_drop,
            if self.pass { "pass" } else { "FAIL" }
        )
    }
}

/// Summarizes a set of calibration results against the target. Failures are
/// reported in the result, never raised.
pub fn verify_calibration(
    results: &[CalibrationResult],
    target: &CalibrationTarget,
) -> CalibrationReport {
    let entries: Vec<CalibrationEntry> = results
        .iter()
        .map(|r| {
            let deviation = r.measured_drop - target.alpha;
            CalibrationEntry {
                perturbation: r.perturbation,
                intensity: r.intensity,
                measured_drop: r.measured_drop,
                deviation,
                within_tolerance: deviation.abs() <= target.tolerance,
                converged: r.converged,
            }
        })
        .collect();
    let n = entries.len().max(1) as f64;
    let mean = entries.iter().map(|e| e.measured_drop).sum::<f64>() / n;
    let var = entries
        .iter()
        .map(|e| (e.measured_drop - mean).powi(2))
        .sum::<f64>()
        / n;
    CalibrationReport {
        alpha: target.alpha,
        tolerance: target.tolerance,
        pass: !entries.is_empty() && entries.iter().all(|e| e.within_tolerance),
        mean_drop: mean,
        std_drop: var.sqrt(),
        entries,
    }
}

pub const CALIBRATION_CSV_HEADER: &str = "perturbation,step,intensity,drop";

/// The `(intensity, drop)` evaluations of every result, in order.
pub fn calibration_trace_csv(results: &[CalibrationResult]) -> String {
    let mut out = String::from(CALIBRATION_CSV_HEADER);
    out.push('\n');
    for r in results {
        for (i, p) in r.trace.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.perturbation, i, p.intensity, p.drop
            ));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const ID: PerturbationId = PerturbationId::Natural(PerturbationKind::Elastic);

    #[test]
    fn linear_curve_root() {
        let target = CalibrationTarget::default();
        let r = bisect_drop(ID, 1.0, &target, |s| Ok(0.5 * s)).unwrap();
        assert!(r.converged);
        assert!((r.intensity - 0.2).abs() <= target.tolerance / 0.5);
        assert!((r.measured_drop - 0.1).abs() <= target.tolerance);
    }

    #[test]
    fn tight_tolerance_root() {
        let target = CalibrationTarget {
            tolerance: 1e-6,
            precision: 1e-9,
            max_iterations: 60,
            ..CalibrationTarget::default()
        };
        let r = bisect_drop(ID, 1.0, &target, |s| Ok(0.5 * s)).unwrap();
        assert!(r.converged);
        assert!((r.intensity - 0.2).abs() <= 2e-6);
    }

    #[test]
    fn zero_target_is_identity() {
        let target = CalibrationTarget {
            alpha: 0.0,
            ..CalibrationTarget::default()
        };
        let mut calls = 0;
        let r = bisect_drop(ID, 1.0, &target, |s| {
            calls += 1;
            Ok(s)
        })
        .unwrap();
        assert_eq!(r.intensity, 0.0);
        assert!(r.converged && r.iterations <= 1 && calls <= 1);
    }

    #[test]
    fn invalid_bracket_is_an_error() {
        let target = CalibrationTarget::default();
        let err = bisect_drop(ID, 1.0, &target, |s| Ok(0.05 * s)).unwrap_err();
        assert!(matches!(err, Error::InvalidBracket { .. }));
        assert!(err.to_string().contains("endpoint"));
    }

    #[test]
    fn bracket_invariant_and_iteration_bound() {
        // A step curve that never lands inside the tolerance band.
        let target = CalibrationTarget {
            tolerance: 1e-3,
            precision: 1e-4,
            max_iterations: 100,
            ..CalibrationTarget::default()
        };
        let curve = |e: f64| if e < 0.0371 { 0.0 } else { 0.3 };
        let r = bisect_drop(
            PerturbationId::Adversarial { steps: 10 },
            0.1,
            &target,
            |e| Ok(curve(e)),
        )
        .unwrap();
        assert!(!r.converged);
        let bound = (0.1f64 / target.precision).log2().ceil() as usize;
        assert!(r.iterations <= bound, "{} > {bound}", r.iterations);
        // Replaying the trace, the bracket always straddles alpha.
        let (mut lo, mut hi) = (0.0, 0.1);
        for p in &r.trace[2..] {
            if p.drop < target.alpha {
                lo = p.intensity;
            } else {
                hi = p.intensity;
            }
            assert!(curve(lo) <= target.alpha && curve(hi) >= target.alpha);
        }
    }

    #[test]
    fn verify_flags_offender() {
        let target = CalibrationTarget::default();
        let mk = |id, d| CalibrationResult {
            perturbation: id,
            intensity: 0.5,
            measured_drop: d,
            iterations: 3,
            converged: true,
            trace: vec![],
        };
        let all_exact: Vec<_> = PerturbationId::standard_set()
            .into_iter()
            .map(|id| mk(id, 0.1))
            .collect();
        let report = verify_calibration(&all_exact, &target);
        assert!(report.pass);
        assert!(report.std_drop.abs() < 1e-15);

        let mut off = all_exact.clone();
        off[3].measured_drop = 0.1 + 2.0 * target.tolerance;
        let report = verify_calibration(&off, &target);
        assert!(!report.pass);
        assert_eq!(report.offenders(), vec![off[3].perturbation]);
        assert!(report.to_string().contains("OUT OF TOLERANCE"));
    }

    #[test]
    fn ids_round_trip_through_strings() {
        for id in PerturbationId::standard_set()
            .into_iter()
            .chain([PerturbationId::Adversarial { steps: 5 }])
        {
            assert_eq!(id.to_string().parse::<PerturbationId>().unwrap(), id);
            let json = serde_json::to_string(&id).unwrap();
            assert_eq!(serde_json::from_str::<PerturbationId>(&json).unwrap(), id);
        }
    }
}
