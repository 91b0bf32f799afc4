use confts_core::tuner::{confts_loss, split_validation, tune_map_on};
use confts_core::{
    apply_map_dataset, coverage_and_size, expected_calibration_error, generate, run_pipeline, tune_temperature,
    tune_temperature_on, CalibrationMap, LogitsDataset, MapKind, ScoreSpec, SynthSpec, TuneConfig,
};

/// Tied rows score 2/3 at every temperature, `[a, 0, 0]` rows cross 2/3 at
/// `t = a / ln 4`, so the loss has a single zero there.
fn unimodal(t_star: f64) -> LogitsDataset {
    let a = t_star * 4f64.ln();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for _ in 0..100 {
        rows.push(vec![0.0, 0.0, 0.0]);
        labels.push(1);
        rows.push(vec![a, 0.0, 0.0]);
        labels.push(0);
    }
    LogitsDataset::from_rows(&rows, labels).unwrap()
}

#[test]
fn platt_does_at_least_as_well_as_temperature() {
    let ds = unimodal(0.7);
    let cfg = TuneConfig::default();
    let temp = tune_temperature_on(&ds, &ds, 0.1, &cfg).unwrap();
    let platt = tune_map_on(&ds, &ds, 0.1, MapKind::Platt, &cfg).unwrap();
    assert!(
        platt.report.final_loss <= temp.report.final_loss,
        "{:?} vs {:?}",
        platt.report,
        temp.report
    );
    let CalibrationMap::Platt { a, .. } = platt.map else { panic!() };
    assert!((a - 1.0 / 0.7).abs() < 1e-2, "a = {a}");
    let check = confts_loss(&platt.map, &ds, &ds, 0.1).unwrap();
    assert_eq!(check, platt.report.final_loss);
}

#[test]
fn tuned_temperature_sits_at_the_known_zero() {
    for t_star in [0.3, 1.1, 2.5] {
        let ds = unimodal(t_star);
        let tuned = tune_temperature_on(&ds, &ds, 0.1, &TuneConfig::default()).unwrap();
        let CalibrationMap::Temperature { t } = tuned.map else { panic!() };
        assert!((t - t_star).abs() < 1e-3, "{t} vs {t_star}");
    }
}

fn calibrated(seed: u64, n: usize) -> LogitsDataset {
    // with signal = noise^2 the Bayes posterior is softmax(logits); the
    // margin keeps top-1 accuracy near 0.9
    generate(&SynthSpec {
        n,
        num_classes: 10,
        seed,
        signal: 9.0,
        noise: 3.0,
        overconfidence: 1.0,
    })
    .unwrap()
}

#[test]
fn tuning_calibrated_logits_does_not_grow_sets() {
    let ds = calibrated(1, 24_000);
    let idx = |r: std::ops::Range<usize>| ds.select(&r.collect::<Vec<_>>()).unwrap();
    let (val, cal, test) = (idx(0..4000), idx(4000..8000), idx(8000..24_000));
    let tuned = tune_temperature(&val, 0.1, &TuneConfig::default().with_seed(1)).unwrap();
    let spec = ScoreSpec::aps(true).with_seed(1);
    let size = |map: &CalibrationMap| {
        let out = run_pipeline(&cal, &test, map, &spec, 0.1).unwrap();
        coverage_and_size(&out.sets, test.labels()).unwrap().1
    };
    assert!(size(&tuned.map) <= size(&CalibrationMap::identity()));
}

#[test]
fn overconfidence_raises_ece_above_the_nll_optimum() {
    let ds = generate(&SynthSpec {
        n: 20_000,
        num_classes: 10,
        seed: 2,
        signal: 2.0,
        noise: 1.0,
        overconfidence: 3.0,
    })
    .unwrap();
    let nll = |t: f64| {
        let probs = apply_map_dataset(&CalibrationMap::temperature(t).unwrap(), &ds).unwrap();
        -probs
            .rows()
            .zip(ds.labels())
            .map(|(p, &y)| p[y as usize].max(1e-300).ln())
            .sum::<f64>()
    };
    let grid: Vec<f64> = (1..=60).map(|i| i as f64 * 0.1).collect();
    let t_nll = grid
        .iter()
        .copied()
        .min_by(|a, b| nll(*a).total_cmp(&nll(*b)))
        .unwrap();
    // analytic optimum is g * noise^2 / signal = 1.5
    assert!((t_nll - 1.5).abs() <= 0.2, "{t_nll}");
    let ece = |t: f64| {
        let probs = apply_map_dataset(&CalibrationMap::temperature(t).unwrap(), &ds).unwrap();
        expected_calibration_error(&probs, ds.labels(), 15).unwrap()
    };
    assert!(ece(1.0) > ece(t_nll));
}

#[test]
fn loss_threads_alpha_through() {
    let ds = generate(&SynthSpec {
        n: 4000,
        num_classes: 20,
        seed: 3,
        signal: 3.0,
        noise: 1.0,
        overconfidence: 1.0,
    })
    .unwrap();
    let (d_tau, d_loss) = split_validation(&ds, 3).unwrap();
    let map = CalibrationMap::temperature(0.9).unwrap();
    let a = confts_loss(&map, &d_tau, &d_loss, 0.1).unwrap();
    let b = confts_loss(&map, &d_tau, &d_loss, 0.05).unwrap();
    assert_ne!(a, b);
}
