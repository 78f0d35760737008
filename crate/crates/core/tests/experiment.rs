use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use selfcal::error::Error;
use selfcal::experiment::{
    explicit_pair_counts, fixtures, ingest_counts, load_reference_point, poisson_counts, simulate_counts,
    simulate_repetitions, ConfigFile, NuScan, SimSpec,
};
use selfcal::likelihood::CountRecord;
use selfcal::probability::{outcome_probabilities, recorded_cell};
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn tmp(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name)
}

fn scenario_a(nu: f64, seed: u64, repetitions: usize) -> SimSpec {
    let cfg = fixtures::scenario_a_config(nu).unwrap();
    SimSpec {
        truth: fixtures::reference_points().scenario_a.mock_true.to_point(&cfg).unwrap(),
        cfg,
        seed,
        repetitions,
    }
}

#[test]
fn bundled_totals() {
    assert_eq!(fixtures::scenario_a_counts().total(), 66);
    assert_eq!(fixtures::scenario_b_counts().total(), 300_898);
    assert!(fixtures::multimodal_counts().total() > 0);
}

#[test]
fn bundled_configs_build() {
    assert!(fixtures::scenario_a_config(100.0).is_ok());
    assert!(fixtures::multimodal_config(100.0).is_ok());
    assert!(fixtures::scenario_b_config().has_free_nu());
    let refs = fixtures::reference_points();
    assert!(refs.scenario_b.ml.nu.is_some());
    assert!(refs.scenario_a.mock_true.to_point(&fixtures::scenario_a_config(100.0).unwrap()).is_ok());
}

#[test]
fn simulated_counts_pass_a_chi_square_test() {
    let spec = scenario_a(1e6, 5, 40);
    let t = outcome_probabilities(&spec.truth).unwrap();
    let expected: Vec<f64> = (0..24)
        .map(|k| {
            let (j, l) = recorded_cell(k);
            1e6 * t.get(j, l)
        })
        .collect();
    let chi2 = ChiSquared::new(24.0).unwrap();
    let stats: Vec<f64> = simulate_repetitions(&spec)
        .unwrap()
        .iter()
        .map(|d| {
            d.counts()
                .iter()
                .zip(&expected)
                .map(|(&n, &e)| (n as f64 - e).powi(2) / e)
                .sum()
        })
        .collect();
    for s in &stats {
        assert!(chi2.cdf(*s) < 0.9999, "chi2 = {s}");
    }
    // Pooled: the sum of 40 statistics is χ² with 960 degrees of freedom.
    let pooled = ChiSquared::new(960.0).unwrap().cdf(stats.iter().sum());
    assert!((0.001..0.999).contains(&pooled), "pooled cdf {pooled}");
}

#[test]
fn fast_simulator_matches_explicit_pairs() {
    let spec = scenario_a(300.0, 0, 0);
    let reps = 2000;
    let mut rng = ChaCha20Rng::seed_from_u64(8);
    let mut fast = [0f64; 24];
    let mut slow = [0f64; 24];
    for _ in 0..reps {
        let a = poisson_counts(&spec.truth, 300.0, &mut rng).unwrap();
        let b = explicit_pair_counts(&spec.truth, 300.0, &mut rng).unwrap();
        for k in 0..24 {
            fast[k] += a.get(k) as f64;
            slow[k] += b.get(k) as f64;
        }
    }
    let t = outcome_probabilities(&spec.truth).unwrap();
    for k in 0..24 {
        let (j, l) = recorded_cell(k);
        let mean = 300.0 * t.get(j, l);
        // Both are Poisson(mean); the difference of sums has variance 2·reps·mean.
        let sd = (2.0 * reps as f64 * mean).sqrt().max(1.0);
        assert!((fast[k] - slow[k]).abs() <= 4.5 * sd, "cell {k}");
    }
}

#[test]
fn simulation_is_seeded() {
    let a = simulate_counts(&scenario_a(500.0, 3, 1)).unwrap();
    assert_eq!(a, simulate_counts(&scenario_a(500.0, 3, 1)).unwrap());
    assert_ne!(a, simulate_counts(&scenario_a(500.0, 4, 1)).unwrap());
    let reps = simulate_repetitions(&scenario_a(500.0, 3, 3)).unwrap();
    assert_eq!(reps[0], a);
    assert_ne!(reps[1], reps[2]);
}

#[test]
fn count_records_round_trip() {
    let d = fixtures::scenario_b_counts();
    let text = d.to_string();
    assert_eq!(text.parse::<CountRecord>().unwrap(), d);
    let path = tmp("round_trip.counts");
    std::fs::write(&path, format!("# header\n{text}\n")).unwrap();
    assert_eq!(ingest_counts(&path).unwrap(), d);
}

#[test]
fn count_parse_errors_are_located() {
    match "1 2 3".parse::<CountRecord>() {
        Err(Error::Parse { line: 1, message, .. }) => assert!(message.contains("expected 24")),
        other => panic!("{other:?}"),
    }
    let bad = "0 0 0 0 0\n0 0 x 0 0\n";
    match bad.parse::<CountRecord>() {
        Err(Error::Parse { line, column, .. }) => assert_eq!((line, column), (2, 5)),
        other => panic!("{other:?}"),
    }
    let many = vec!["1"; 25].join(" ");
    assert!(matches!(many.parse::<CountRecord>(), Err(Error::Parse { .. })));
    assert!("-1 ".repeat(24).parse::<CountRecord>().is_err());
}

#[test]
fn config_round_trip_and_errors() {
    let file = ConfigFile::parse(fixtures::SCENARIO_B_CONFIG).unwrap();
    let again = ConfigFile::parse(&toml::to_string(&file).unwrap()).unwrap();
    assert_eq!(file, again);
    assert_eq!(file.build(None).unwrap(), fixtures::scenario_b_config());

    match ConfigFile::parse("mode = \"unknown_nu\"\nbogus = 1\n") {
        Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let known = ConfigFile::parse("mode = \"known_nu\"\n").unwrap();
    assert!(known.build(None).is_err());
    assert!(known.build(Some(50.0)).is_ok());
    let bad_prior = "mode = \"unknown_nu\"\n[priors]\nnu = { kind = \"gamma\", shape = -1.0, scale = 2.0 }\n";
    assert!(ConfigFile::parse(bad_prior).unwrap().build(None).is_err());
}

#[test]
fn reference_points_load_from_files() {
    let path = tmp("refs.toml");
    std::fs::write(&path, fixtures::REFERENCE_POINTS).unwrap();
    let p = load_reference_point(&path, Some("scenario_b.mock_true")).unwrap();
    assert_eq!(p, fixtures::reference_points().scenario_b.mock_true);
    assert!(load_reference_point(&path, Some("scenario_c")).is_err());
    let missing = tmp("does_not_exist.toml");
    let err = load_reference_point(&missing, None).unwrap_err().to_string();
    assert!(err.contains("does_not_exist.toml"), "{err}");
}

#[test]
fn nu_scan_is_geometric() {
    let scan: NuScan = "10:1000:3".parse().unwrap();
    let v = scan.values();
    assert_eq!(v.len(), 3);
    assert!((v[0] - 10.0).abs() < 1e-9 && (v[1] - 100.0).abs() < 1e-9 && (v[2] - 1000.0).abs() < 1e-9);
    assert!("10:1000".parse::<NuScan>().is_err());
    assert!("0:10:3".parse::<NuScan>().is_err());
    assert!("10:5:3".parse::<NuScan>().is_err());
}
