mod common;

use common::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use selfcal::estimation::best_ml;
use selfcal::experiment::{fixtures, simulate_repetitions, SimSpec};
use selfcal::model::{Coordinate, CorrelationVector, Field};
use selfcal::regions::{curve_from_samples, marching_squares, membership, slice_contour, SliceRequest};
use selfcal::sampling::{prior_set_with_max, Provenance};

#[test]
fn flat_likelihood_gives_unit_curves() {
    let set = synthetic_set(vec![0.0; 2000], 0.0, Provenance::PriorDirect);
    let c = curve_from_samples(&set, 50, 20, 1).unwrap();
    assert_eq!(c.lambda_crit, 1.0);
    assert!(c.size.iter().all(|&s| s == 1.0));
    assert!(c.credibility.iter().all(|&x| (x - 1.0).abs() < 1e-15));
}

#[test]
fn uniform_lambda_closed_forms() {
    // λ uniform on (0, 1): s = 1 − λ, c = 1 − λ², λ_crit = ½.
    let mut rng = ChaCha20Rng::seed_from_u64(2);
    let log_l: Vec<f64> = (0..200_000).map(|_| rng.random::<f64>().ln()).collect();
    let set = synthetic_set(log_l, 0.0, Provenance::PriorDirect);
    let c = curve_from_samples(&set, 200, 0, 0).unwrap();
    assert!((c.lambda_crit - 0.5).abs() < 0.005);
    for (i, &l) in c.lambda.iter().enumerate() {
        assert!((c.size[i] - (1.0 - l)).abs() < 0.005, "s at {l}");
        assert!((c.credibility[i] - (1.0 - l * l)).abs() < 0.005, "c at {l}");
    }
    assert!((c.size_crit - 0.5).abs() < 0.01);
    assert!((c.credibility_crit - 0.75).abs() < 0.01);
}

#[test]
fn bootstrap_band_brackets_the_curve() {
    let mut rng = ChaCha20Rng::seed_from_u64(4);
    let log_l: Vec<f64> = (0..5000).map(|_| -10.0 * rng.random::<f64>()).collect();
    let set = synthetic_set(log_l, 0.0, Provenance::PriorDirect);
    let c = curve_from_samples(&set, 100, 200, 4).unwrap();
    for i in 0..c.lambda.len() {
        assert!(c.size_lo[i] <= c.size_hi[i]);
        assert!(c.size_lo[i] <= c.size[i] + 0.01 && c.size[i] <= c.size_hi[i] + 0.01);
    }
    let mut out = Vec::new();
    c.write_columns(&mut out).unwrap();
    let text = String::from_utf8(out).unwrap();
    assert_eq!(text.lines().nth(1), Some("lambda s c s_lo s_hi"));
    assert_eq!(text.lines().count(), 2 + c.lambda.len());
}

#[test]
fn curves_need_direct_prior_draws() {
    let hmc = synthetic_set(vec![0.0; 2000], 0.0, Provenance::PosteriorHmc);
    assert!(curve_from_samples(&hmc, 50, 0, 0).is_err());
    let small = synthetic_set(vec![0.0; 10], 0.0, Provenance::PriorDirect);
    assert!(curve_from_samples(&small, 50, 0, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn curve_invariants(log_l in prop::collection::vec(-30.0f64..0.0, 1000..1500), grid in 20usize..200) {
        let mean = log_l.iter().map(|l| l.exp()).sum::<f64>() / log_l.len() as f64;
        let set = synthetic_set(log_l, 0.0, Provenance::PriorDirect);
        let c = curve_from_samples(&set, grid, 0, 0).unwrap();
        prop_assert!(c.size.windows(2).all(|w| w[1] <= w[0]));
        prop_assert!(c.credibility.windows(2).all(|w| w[1] <= w[0]));
        for (s, x) in c.size.iter().zip(&c.credibility) {
            prop_assert!(*x >= *s - 1e-12);
            prop_assert!((0.0..=1.0).contains(s) && (0.0..=1.0).contains(x));
        }
        prop_assert!((c.lambda_crit - mean).abs() <= 1e-12 * mean);
        prop_assert!(c.crit_at_argmax());
    }
}

#[test]
fn membership_at_the_maximum_and_away_from_it() {
    let d = fixtures::scenario_a_counts();
    let cfg = fixtures::scenario_a_config(100.0).unwrap();
    let ml = best_ml(&d, &cfg, 6, 1).unwrap();
    let at = membership(&ml.estimate, &d, &cfg, 1.0, ml.log_l_max).unwrap();
    assert!(at.inside);
    assert!(at.log_lambda > -1e-9);
    let truth = fixtures::reference_points().scenario_a.mock_true.to_point(&cfg).unwrap();
    let m = membership(&truth, &d, &cfg, 1e-3, ml.log_l_max).unwrap();
    assert!(m.lambda < 1.0);
    assert_eq!(m.inside, m.lambda >= 1e-3);
    let above = membership(&truth, &d, &cfg, (m.lambda * 1.01).min(1.0), ml.log_l_max).unwrap();
    assert!(!above.inside);
    let bad = selfcal::model::JointPoint {
        state: CorrelationVector {
            c_xx: 1.0,
            c_zz: 1.0,
            ..CorrelationVector::zero()
        },
        ..truth
    };
    assert!(membership(&bad, &d, &cfg, 0.5, ml.log_l_max).is_err());
}

#[test]
fn marching_squares_traces_a_circle() {
    let xs: Vec<f64> = (0..81).map(|i| -1.0 + i as f64 / 40.0).collect();
    let values: Vec<Vec<f64>> = xs.iter().map(|&y| xs.iter().map(|&x| -(x * x + y * y)).collect()).collect();
    let lines = marching_squares(&xs, &xs, &values, -0.25);
    assert_eq!(lines.len(), 1);
    let line = &lines[0];
    assert_eq!(line.first(), line.last());
    for (x, y) in line {
        assert!(((x * x + y * y).sqrt() - 0.5).abs() < 2e-3);
    }
}

#[test]
fn marching_squares_handles_minus_infinity() {
    let xs: Vec<f64> = (0..41).map(|i| -1.0 + i as f64 / 20.0).collect();
    let values: Vec<Vec<f64>> = xs
        .iter()
        .map(|&y| xs.iter().map(|&x| if x > 0.6 { f64::NEG_INFINITY } else { -(x * x + y * y) }).collect())
        .collect();
    let lines = marching_squares(&xs, &xs, &values, -0.25);
    assert!(!lines.is_empty());
    assert!(lines.iter().flatten().all(|(x, y)| x.is_finite() && y.is_finite()));
}

fn inside_polygon(poly: &[(f64, f64)], (px, py): (f64, f64)) -> bool {
    let mut inside = false;
    for w in poly.windows(2) {
        let ((x1, y1), (x2, y2)) = (w[0], w[1]);
        if (y1 > py) != (y2 > py) && px < x1 + (py - y1) * (x2 - x1) / (y2 - y1) {
            inside = !inside;
        }
    }
    inside
}

#[test]
fn scenario_b_slice_encloses_the_maximum() {
    let d = fixtures::scenario_b_counts();
    let cfg = fixtures::scenario_b_config();
    let ml = best_ml(&d, &cfg, 4, 2).unwrap();
    // The maximum sits on the positivity boundary, which cuts state slices
    // open; the two efficiency scales are free of it.
    assert!(ml.on_psd_boundary);
    let (el, er) = (ml.estimate.left.scale(), ml.estimate.right.scale());
    let req = SliceRequest {
        x: Coordinate::EtaLeft,
        y: Coordinate::EtaRight,
        fixed: ml.estimate,
        level: 1e-3,
        grid: 81,
        x_range: Some((0.2 * el, 3.0 * el)),
        y_range: Some((er - 0.01, er + 0.01)),
        log_l_max: ml.log_l_max,
        ml: Some(ml.estimate),
    };
    let s = slice_contour(&d, &cfg, &req).unwrap();
    assert!(!s.level_above_max);
    let closed: Vec<_> = s.polylines.iter().filter(|l| l.len() > 3 && l.first() == l.last()).collect();
    assert!(!closed.is_empty(), "no closed contour");
    let marker = s.ml_marker.unwrap();
    assert!(closed.iter().any(|l| inside_polygon(l, marker)));
    assert!(closed.iter().any(|l| inside_polygon(l, s.fixed_marker)));
    let mut out = Vec::new();
    s.write(&mut out).unwrap();
    assert!(String::from_utf8(out).unwrap().contains("# ml_marker"));
}

#[test]
fn level_one_is_flagged() {
    let d = fixtures::scenario_b_counts();
    let cfg = fixtures::scenario_b_config();
    let ml = best_ml(&d, &cfg, 4, 2).unwrap();
    let truth = fixtures::reference_points().scenario_b.mock_true.to_point(&cfg).unwrap();
    let req = SliceRequest {
        x: Coordinate::State(Field::Cxx),
        y: Coordinate::EtaRight,
        fixed: truth,
        level: 1.0,
        grid: 21,
        x_range: None,
        y_range: None,
        log_l_max: ml.log_l_max,
        ml: None,
    };
    let s = slice_contour(&d, &cfg, &req).unwrap();
    assert!(s.level_above_max);
    assert!(s.polylines.is_empty());
    assert!(slice_contour(&d, &cfg, &SliceRequest { level: 0.0, ..req.clone() }).is_err());
    assert!(slice_contour(&d, &cfg, &SliceRequest { y: req.x, ..req }).is_err());
}

#[test]
fn plausible_region_covers_the_truth() {
    let cfg = fixtures::scenario_a_config(100.0).unwrap();
    let truth = fixtures::reference_points().scenario_a.mock_true.to_point(&cfg).unwrap();
    let sims = simulate_repetitions(&SimSpec {
        truth,
        cfg: cfg.clone(),
        seed: 123,
        repetitions: 100,
    })
    .unwrap();
    let inside = sims
        .iter()
        .enumerate()
        .filter(|(i, d)| {
            let ml = best_ml(d, &cfg, 4, *i as u64).unwrap();
            let set = prior_set_with_max(d, &cfg, 4000, *i as u64, ml.log_l_max).unwrap();
            let c = curve_from_samples(&set, 100, 0, 0).unwrap();
            membership(&truth, d, &cfg, c.lambda_crit, set.log_l_max).unwrap().inside
        })
        .count();
    assert!(inside >= 80, "mock-true inside in {inside}/100");
}
