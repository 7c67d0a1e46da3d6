use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::matrix::MatrixRun;
use super::svg::{line_chart, Series};
use super::{normalize, EvalRecord, Regime, TestMode};
use crate::calibrate::{calibration_trace_csv, CalibrationResult};
use crate::error::{Error, Result};
use crate::train::TrainTrace;

pub type CellOutcome = std::result::Result<EvalRecord, String>;

/// One (regime, test mode, seed) evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub regime: Regime,
    pub test_mode: TestMode,
    pub seed: u64,
    /// Standard model's clean test accuracy for this seed.
    pub baseline: Option<f64>,
    /// Content hash of the cell's configuration; empty when the cell never ran.
    pub cell_hash: String,
    pub outcome: CellOutcome,
}

impl CellResult {
    pub fn failed(
        regime: Regime,
        test_mode: TestMode,
        seed: u64,
        baseline: Option<f64>,
        error: String,
    ) -> Self {
        CellResult {
            regime,
            test_mode,
            seed,
            baseline,
            cell_hash: String::new(),
            outcome: Err(error),
        }
    }

    /// Perturbed accuracy relative to the baseline.
    pub fn normalized(&self) -> Option<f64> {
        let record = self.outcome.as_ref().ok()?;
        Some(normalize(record.perturbed_accuracy(), self.baseline?))
    }
}

/// Mean and sample standard deviation over the seeds of one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub regime: Regime,
    pub test_mode: TestMode,
    pub runs: usize,
    pub failures: usize,
    pub clean_accuracy: (f64, f64),
    pub perturbed_accuracy: (f64, f64),
    pub delta_accuracy: (f64, f64),
    pub normalized_accuracy: (f64, f64),
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct MatrixReport {
    pub cells: Vec<CellResult>,
}

pub const MATRIX_CSV_HEADER: [&str; 15] = [
    "regime",
    "test_mode",
    "seed",
    "status",
    "examples",
    "clean_correct",
    "perturbed_correct",
    "clean_accuracy",
    "perturbed_accuracy",
    "delta_accuracy",
    "baseline_accuracy",
    "normalized_accuracy",
    "intensity",
    "cell_hash",
    "error",
];

const SUMMARY_HEADER: [&str; 12] = [
    "regime",
    "test_mode",
    "runs",
    "failures",
    "clean_mean",
    "clean_std",
    "perturbed_mean",
    "perturbed_std",
    "delta_mean",
    "delta_std",
    "normalized_mean",
    "normalized_std",
];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

impl MatrixReport {
    /// Rows in first-appearance order of (regime, test mode).
    pub fn summaries(&self) -> Vec<CellSummary> {
        let mut keys: Vec<(Regime, TestMode)> = Vec::new();
        for c in &self.cells {
            if !keys.contains(&(c.regime, c.test_mode)) {
                keys.push((c.regime, c.test_mode));
            }
        }
        keys.into_iter()
            .map(|(regime, mode)| self.summary_for(regime, mode))
            .collect()
    }

    pub fn summary(&self, regime: Regime, mode: TestMode) -> Option<CellSummary> {
        self.cells
            .iter()
            .any(|c| c.regime == regime && c.test_mode == mode)
            .then(|| self.summary_for(regime, mode))
    }

    fn summary_for(&self, regime: Regime, mode: TestMode) -> CellSummary {
        let cells: Vec<&CellResult> = self
            .cells
            .iter()
            .filter(|c| c.regime == regime && c.test_mode == mode)
            .collect();
        let ok: Vec<&EvalRecord> = cells
            .iter()
            .filter_map(|c| c.outcome.as_ref().ok())
            .collect();
        let pick =
            |f: &dyn Fn(&EvalRecord) -> f64| mean_std(&ok.iter().map(|r| f(r)).collect::<Vec<_>>());
        let normalized: Vec<f64> = cells.iter().filter_map(|c| c.normalized()).collect();
        CellSummary {
            regime,
            test_mode: mode,
            runs: ok.len(),
            failures: cells.len() - ok.len(),
            clean_accuracy: pick(&|r| r.clean_accuracy()),
            perturbed_accuracy: pick(&|r| r.perturbed_accuracy()),
            delta_accuracy: pick(&|r| r.delta_accuracy()),
            normalized_accuracy: mean_std(&normalized),
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MATRIX_CSV_HEADER)?;
        for c in &self.cells {
            let mut row = vec![
                c.regime.to_string(),
                c.test_mode.to_string(),
                c.seed.to_string(),
            ];
            match &c.outcome {
                Ok(r) => row.extend([
                    "ok".to_string(),
                    r.examples.to_string(),
                    r.clean_correct.to_string(),
                    r.perturbed_correct.to_string(),
                    r.clean_accuracy().to_string(),
                    r.perturbed_accuracy().to_string(),
                    r.delta_accuracy().to_string(),
                    opt(c.baseline),
                    opt(c.normalized()),
                    r.intensity.to_string(),
                    c.cell_hash.clone(),
                    String::new(),
                ]),
                Err(e) => {
                    row.push("error".into());
                    row.extend(std::iter::repeat(String::new()).take(6));
                    row.extend([
                        opt(c.baseline),
                        String::new(),
                        String::new(),
                        c.cell_hash.clone(),
                        e.clone(),
                    ]);
                }
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Parses [`MatrixReport::to_csv`] output. Derived columns are checked
    /// against the counts they come from.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if header != MATRIX_CSV_HEADER {
            return Err(Error::Format {
                path: "matrix.csv".into(),
                detail: format!("unexpected header {header:?}"),
            });
        }
        let bad = |line: usize, detail: String| Error::Format {
            path: "matrix.csv".into(),
            detail: format!("row {line}: {detail}"),
        };
        let mut cells = Vec::new();
        for (i, row) in r.records().enumerate() {
            let row = row?;
            let field = |k: usize| row.get(k).unwrap_or("");
            let num = |k: usize| -> Result<f64> {
                field(k)
                    .parse()
                    .map_err(|_| bad(i + 1, format!("bad number in {}", MATRIX_CSV_HEADER[k])))
            };
            let int = |k: usize| -> Result<usize> {
                field(k)
                    .parse()
                    .map_err(|_| bad(i + 1, format!("bad integer in {}", MATRIX_CSV_HEADER[k])))
            };
            let regime: Regime = field(0).parse()?;
            let test_mode: TestMode = field(1).parse()?;
            let seed: u64 = field(2)
                .parse()
                .map_err(|_| bad(i + 1, "bad seed".into()))?;
            let baseline = match field(10) {
                "" => None,
                _ => Some(num(10)?),
            };
            let outcome = match field(3) {
                "ok" => {
                    let record = EvalRecord {
                        regime,
                        test_mode,
                        seed,
                        examples: int(4)?,
                        clean_correct: int(5)?,
                        perturbed_correct: int(6)?,
                        intensity: num(12)?,
                    };
                    if record.clean_accuracy() != num(7)?
                        || record.perturbed_accuracy() != num(8)?
                        || record.delta_accuracy() != num(9)?
                    {
                        return Err(bad(i + 1, "accuracies disagree with counts".into()));
                    }
                    Ok(record)
                }
                "error" => Err(field(14).to_string()),
                other => return Err(bad(i + 1, format!("unknown status {other:?}"))),
            };
            cells.push(CellResult {
                regime,
                test_mode,
                seed,
                baseline,
                cell_hash: field(13).to_string(),
                outcome,
            });
        }
        Ok(MatrixReport { cells })
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(SUMMARY_HEADER)?;
        for s in self.summaries() {
            let mut row = vec![
                s.regime.to_string(),
                s.test_mode.to_string(),
                s.runs.to_string(),
                s.failures.to_string(),
            ];
            for (m, sd) in [
                s.clean_accuracy,
                s.perturbed_accuracy,
                s.delta_accuracy,
                s.normalized_accuracy,
            ] {
                row.push(if m.is_nan() {
                    String::new()
                } else {
                    m.to_string()
                });
                row.push(if sd.is_nan() {
                    String::new()
                } else {
                    sd.to_string()
                });
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Mean normalized accuracy per regime (series) and test mode (x axis).
    pub fn chart_series(&self, value: impl Fn(&CellSummary) -> f64) -> (Vec<String>, Vec<Series>) {
        let summaries = self.summaries();
        let mut modes: Vec<TestMode> = Vec::new();
        let mut regimes: Vec<Regime> = Vec::new();
        for s in &summaries {
            if !modes.contains(&s.test_mode) {
                modes.push(s.test_mode);
            }
            if !regimes.contains(&s.regime) {
                regimes.push(s.regime);
            }
        }
        let series = regimes
            .iter()
            .map(|&r| Series {
                name: r.to_string(),
                points: modes
                    .iter()
                    .map(|&m| {
                        summaries
                            .iter()
                            .find(|s| s.regime == r && s.test_mode == m)
                            .map(&value)
                            .filter(|v| v.is_finite())
                    })
                    .collect(),
            })
            .collect();
        (modes.iter().map(TestMode::to_string).collect(), series)
    }
}

fn trace_csv(traces: &[(u64, &TrainTrace)]) -> String {
    let mut out = format!("seed,{}\n", TrainTrace::CSV_HEADER);
    for (seed, t) in traces {
        for line in t.to_csv().lines().skip(1) {
            out.push_str(&format!("{seed},{line}\n"));
        }
    }
    out
}

fn calibration_csv(run: &MatrixRun) -> String {
    let mut out =
        String::from("seed,perturbation,intensity,measured_drop,iterations,converged,error\n");
    for s in &run.seeds {
        for (id, r) in &s.calibrations {
            match r {
                Ok(r) => out.push_str(&format!(
                    "{},{},{},{},{},{},\n",
                    s.seed, id, r.intensity, r.measured_drop, r.iterations, r.converged
                )),
                Err(e) => out.push_str(&format!(
                    "{},{},,,,false,\"{}\"\n",
                    s.seed,
                    id,
                    e.replace('"', "'")
                )),
            }
        }
    }
    out
}

fn write(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `matrix.csv`, `summary.csv`, `calibration.csv`,
/// `calibration_trace.csv`, `trace_<regime>.csv`, `figures/*.svg` and
/// `manifest.json` into `out`.
pub fn emit_outputs(run: &MatrixRun, out: &Path) -> Result<()> {
    let figures = out.join("figures");
    fs::create_dir_all(&figures).map_err(|e| Error::io(&figures, e))?;
    write(out, "matrix.csv", &run.report.to_csv()?)?;
    write(out, "summary.csv", &run.report.summary_csv()?)?;
    write(out, "calibration.csv", &calibration_csv(run))?;
    let results: Vec<CalibrationResult> = run
        .seeds
        .iter()
        .flat_map(|s| {
            s.calibrations
                .iter()
                .filter_map(|(_, r)| r.as_ref().ok().cloned())
        })
        .collect();
    write(
        out,
        "calibration_trace.csv",
        &calibration_trace_csv(&results),
    )?;
    for regime in &run.config.regimes {
        let traces: Vec<(u64, &TrainTrace)> = run
            .seeds
            .iter()
            .flat_map(|s| {
                s.traces
                    .iter()
                    .filter(|(r, _)| r == regime)
                    .map(move |(_, t)| (s.seed, t))
            })
            .collect();
        write(out, &format!("trace_{regime}.csv"), &trace_csv(&traces))?;
    }

    let (x, series) = run.report.chart_series(|s| s.normalized_accuracy.0);
    let title = format!("{}: accuracy relative to standard clean", run.dataset.name);
    write(
        &figures,
        "normalized.svg",
        &line_chart(&title, &x, &series, "normalized accuracy", Some(0.0)),
    )?;
    let (x, series) = run.report.chart_series(|s| s.delta_accuracy.0);
    let title = format!(
        "{}: accuracy change under each test perturbation",
        run.dataset.name
    );
    write(
        &figures,
        "delta.svg",
        &line_chart(&title, &x, &series, "accuracy change", Some(0.0)),
    )?;

    #[derive(Serialize)]
    struct Manifest<'a> {
        tool: &'static str,
        version: &'static str,
        config: &'a super::MatrixConfig,
        dataset: &'a super::matrix::DatasetInfo,
        seeds: &'a [super::SeedRun],
        matrix_csv_sha256: String,
    }
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME"),
        version: env!("CARGO_PKG_VERSION"),
        config: &run.config,
        dataset: &run.dataset,
        seeds: &run.seeds,
        matrix_csv_sha256: super::matrix::content_hash(&run.report.to_csv()?),
    };
    write(
        out,
        "manifest.json",
        &serde_json::to_string_pretty(&manifest)?,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::calibrate::PerturbationId;
    use crate::perturb::PerturbationKind;

    fn sample() -> MatrixReport {
        let mk = |regime, mode, seed, clean, pert| CellResult {
            regime,
            test_mode: mode,
            seed,
            baseline: Some(0.9),
            cell_hash: format!("h{seed}"),
            outcome: Ok(EvalRecord {
                regime,
                test_mode: mode,
                seed,
                examples: 200,
                clean_correct: clean,
                perturbed_correct: pert,
                intensity: 0.123456789,
            }),
        };
        let blur = TestMode::Perturbed(PerturbationId::Natural(PerturbationKind::GaussianBlur));
        MatrixReport {
            cells: vec![
                mk(Regime::Standard, TestMode::Clean, 0, 180, 180),
                mk(Regime::Standard, blur, 0, 180, 161),
                mk(Regime::Standard, blur, 1, 183, 160),
                CellResult::failed(
                    Regime::Natural(PerturbationKind::Wave),
                    blur,
                    0,
                    Some(0.9),
                    "bracket, \"bad\"".into(),
                ),
            ],
        }
    }

    #[test]
    fn csv_round_trip() {
        let report = sample();
        let text = report.to_csv().unwrap();
        assert_eq!(MatrixReport::from_csv(&text).unwrap(), report);
    }

    #[test]
    fn empty_report_is_header_only() {
        let text = MatrixReport::default().to_csv().unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(
            MatrixReport::from_csv(&text).unwrap(),
            MatrixReport::default()
        );
    }

    #[test]
    fn summaries_average_over_seeds() {
        let report = sample();
        let blur = TestMode::Perturbed(PerturbationId::Natural(PerturbationKind::GaussianBlur));
        let s = report.summary(Regime::Standard, blur).unwrap();
        assert_eq!(s.runs, 2);
        let d0 = crate::eval::quantize(161.0 / 200.0) - crate::eval::quantize(180.0 / 200.0);
        let d1 = crate::eval::quantize(160.0 / 200.0) - crate::eval::quantize(183.0 / 200.0);
        assert!((s.delta_accuracy.0 - (d0 + d1) / 2.0).abs() < 1e-15);
        let w = report
            .summary(Regime::Natural(PerturbationKind::Wave), blur)
            .unwrap();
        assert_eq!((w.runs, w.failures), (0, 1));
        assert_eq!(report.summaries().len(), 3);
    }

    #[test]
    fn tampered_accuracy_is_rejected() {
        let text = sample().to_csv().unwrap();
        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        let mut fields: Vec<&str> = lines[1].split(',').collect();
        fields[7] = "0.5";
        lines[1] = fields.join(",");
        assert!(MatrixReport::from_csv(&lines.join("\n")).is_err());
    }
}
