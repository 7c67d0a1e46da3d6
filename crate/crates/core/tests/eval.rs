mod common;

use plab::calibrate::{CalibrationResult, PerturbationId};
use plab::data::{BlobConfig, DatasetManifest};
use plab::eval::{
    delta_accuracy, denormalize, emit_outputs, normalize, per_example_delta, quantize,
    record_from_indicators, run_matrix, Calibrations, MatrixConfig, MatrixReport, ModelKind,
    Regime, TestMode, MATRIX_CSV_HEADER,
};
use plab::perturb::{IntensityMap, PerturbationKind};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn eq5_identity_on_random_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let grid = (1u64 << 36) as f64;
    for case in 0..1000 {
        let n = rng.gen_range(1..=200);
        let clean: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.8)).collect();
        let perturbed: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.6)).collect();
        let rec = record_from_indicators(
            Regime::Standard,
            TestMode::Clean,
            0,
            &clean,
            &perturbed,
            0.0,
        );

        // Brute force: enumerate the examples one by one.
        let (mut sum_delta, mut c, mut p) = (0i64, 0i64, 0i64);
        for i in 0..n {
            let d = perturbed[i] as i64 - clean[i] as i64;
            sum_delta += d;
            c += clean[i] as i64;
            p += perturbed[i] as i64;
        }
        let deltas = per_example_delta(&clean, &perturbed);
        assert_eq!(deltas.iter().map(|&d| d as i64).sum::<i64>(), sum_delta);
        assert_eq!(rec.delta_count(), sum_delta, "case {case}");
        assert_eq!(rec.delta_count(), p - c);
        assert_eq!(
            rec.delta_accuracy(),
            rec.perturbed_accuracy() - rec.clean_accuracy()
        );
        // Agrees with the rational mean up to the reporting grid.
        let mean = sum_delta as f64 / n as f64;
        assert!(
            (rec.delta_accuracy() - mean).abs() <= 1.0 / grid,
            "case {case}"
        );
        assert!((-1.0..=1.0).contains(&rec.delta_accuracy()));
    }
}

#[test]
fn four_example_toy() {
    let clean = [true, true, true, false];
    let perturbed = [true, false, true, false];
    let rec = record_from_indicators(
        Regime::Standard,
        TestMode::Perturbed(PerturbationId::Natural(PerturbationKind::Wave)),
        0,
        &clean,
        &perturbed,
        0.5,
    );
    assert_eq!(rec.delta_accuracy(), -0.25);
}

proptest! {
    #[test]
    fn normalization_inverts_bit_exactly(correct in 0usize..=5000, total in 1usize..=5000, base_correct in 0usize..=5000) {
        let acc = (correct.min(total)) as f64 / total as f64;
        let baseline = (base_correct.min(total)) as f64 / total as f64;
        let q = quantize(acc);
        prop_assert_eq!(denormalize(normalize(q, baseline), baseline), q);
        prop_assert_eq!(normalize(baseline, baseline), 0.0);
    }
}

#[test]
fn clean_mode_is_exactly_zero_and_missing_calibration_errors() {
    let desk = common::trained_blobs(30, 2);
    let empty = Calibrations::new(IntensityMap::default(), Vec::<CalibrationResult>::new());
    let rec = delta_accuracy(
        &desk.model,
        &desk.test,
        Regime::Standard,
        TestMode::Clean,
        &empty,
        0,
    )
    .unwrap();
    assert_eq!(rec.delta_accuracy(), 0.0);
    assert_eq!(rec.clean_correct, rec.perturbed_correct);
    for id in [
        PerturbationId::Natural(PerturbationKind::GaussianBlur),
        PerturbationId::Adversarial { steps: 10 },
    ] {
        let err = delta_accuracy(
            &desk.model,
            &desk.test,
            Regime::Standard,
            TestMode::Perturbed(id),
            &empty,
            0,
        );
        assert!(err.is_err(), "{id} evaluated without a calibration");
    }
}

fn tiny_config() -> MatrixConfig {
    let mut cfg = MatrixConfig::new(DatasetManifest::blobs(BlobConfig {
        per_class: 25,
        ..BlobConfig::default()
    }));
    cfg.seeds = vec![0];
    cfg.model = ModelKind::Linear;
    cfg.training.epochs = 3;
    cfg.regimes = vec![
        Regime::Standard,
        Regime::Natural(PerturbationKind::GaussianBlur),
    ];
    cfg.modes = vec![
        TestMode::Clean,
        TestMode::Perturbed(PerturbationId::Natural(PerturbationKind::GaussianBlur)),
        TestMode::Perturbed(PerturbationId::Adversarial { steps: 10 }),
    ];
    cfg
}

#[test]
fn degenerate_matrix_has_one_zero_cell() {
    let mut cfg = tiny_config();
    cfg.regimes = vec![Regime::Standard];
    cfg.modes = vec![TestMode::Clean];
    let run = run_matrix(&cfg, None).unwrap();
    assert_eq!(run.report.cells.len(), 1);
    let cell = &run.report.cells[0];
    let rec = cell.outcome.as_ref().unwrap();
    assert_eq!(rec.delta_accuracy(), 0.0);
    assert_eq!(cell.normalized(), Some(0.0));
}

#[test]
fn empty_regimes_emit_header_only_csv_and_valid_svg() {
    let mut cfg = tiny_config();
    cfg.regimes.clear();
    cfg.modes = vec![TestMode::Clean];
    let run = run_matrix(&cfg, None).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&run, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("matrix.csv")).unwrap();
    assert_eq!(csv, format!("{}\n", MATRIX_CSV_HEADER.join(",")));
    for name in ["normalized.svg", "delta.svg"] {
        let svg = std::fs::read_to_string(dir.path().join("figures").join(name)).unwrap();
        roxmltree::Document::parse(&svg).unwrap();
    }
}

#[test]
fn matrix_outputs_round_trip_and_resume() {
    let cfg = tiny_config();
    let out = tempfile::tempdir().unwrap();
    let cache = out.path().join("cache");

    let first = run_matrix(&cfg, Some(&cache)).unwrap();
    assert_eq!(
        first.report.cells.len(),
        cfg.regimes.len() * cfg.modes.len()
    );
    emit_outputs(&first, out.path()).unwrap();

    let csv = std::fs::read_to_string(out.path().join("matrix.csv")).unwrap();
    assert_eq!(MatrixReport::from_csv(&csv).unwrap(), first.report);
    for name in [
        "summary.csv",
        "calibration.csv",
        "calibration_trace.csv",
        "manifest.json",
        "trace_standard.csv",
    ] {
        assert!(out.path().join(name).is_file(), "{name} missing");
    }
    for name in ["normalized.svg", "delta.svg"] {
        let svg = std::fs::read_to_string(out.path().join("figures").join(name)).unwrap();
        let doc = roxmltree::Document::parse(&svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
        assert!(doc
            .descendants()
            .any(|n| n.has_tag_name("polyline") || n.has_tag_name("circle")));
    }

    // Standard clean cell anchors the normalization.
    let std_clean = first
        .report
        .cells
        .iter()
        .find(|c| c.regime == Regime::Standard && c.test_mode == TestMode::Clean)
        .unwrap();
    assert_eq!(std_clean.normalized(), Some(0.0));

    // A second run is served from the cache and is identical.
    let second = run_matrix(&cfg, Some(&cache)).unwrap();
    assert_eq!(
        second.report.to_csv().unwrap(),
        first.report.to_csv().unwrap()
    );
    let succeeded = first
        .report
        .cells
        .iter()
        .filter(|c| c.outcome.is_ok())
        .count();
    assert!(succeeded > 0);
    assert_eq!(
        std::fs::read_dir(cache.join("cells")).unwrap().count(),
        succeeded
    );

    // Uncached replays are byte-identical too.
    let third = run_matrix(&cfg, None).unwrap();
    assert_eq!(third.report.to_csv().unwrap(), csv);
}
