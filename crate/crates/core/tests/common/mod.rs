#![allow(dead_code)]

use nalgebra::{Matrix2, Matrix4};
use rand::Rng;
use selfcal::likelihood::CountRecord;
use selfcal::model::{CorrelationVector, DetectorSide, JointPoint, ScenarioConfig};
use selfcal::priors::sample_state;
use selfcal::probability::recorded_cell;
use selfcal::sampling::{Provenance, SampleSet};

pub const RATIOS_A: ([f64; 4], [f64; 4]) = ([0.4172, 0.5510, 1.0, 0.6777], [0.6595, 1.0, 0.6287, 0.7619]);

fn kron(a: &Matrix2<f64>, b: &Matrix2<f64>) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| a[(r / 2, c / 2)] * b[(r % 2, c % 2)])
}

/// Density matrix of the y-free two-qubit state, built from Pauli matrices.
pub fn dense_state(q: &CorrelationVector) -> Matrix4<f64> {
    let one = Matrix2::identity();
    let x = Matrix2::new(0.0, 1.0, 1.0, 0.0);
    let z = Matrix2::new(1.0, 0.0, 0.0, -1.0);
    (kron(&one, &one)
        + kron(&one, &x) * q.b_x
        + kron(&one, &z) * q.b_z
        + kron(&x, &one) * q.a_x
        + kron(&z, &one) * q.a_z
        + kron(&x, &x) * q.c_xx
        + kron(&x, &z) * q.c_xz
        + kron(&z, &x) * q.c_zx
        + kron(&z, &z) * q.c_zz)
        * 0.25
}

/// Five POM elements of one side as 2×2 matrices, null last.
pub fn dense_elements(eff: [f64; 4]) -> [Matrix2<f64>; 5] {
    let one = Matrix2::<f64>::identity();
    let x = Matrix2::new(0.0, 1.0, 1.0, 0.0);
    let z = Matrix2::new(1.0, 0.0, 0.0, -1.0);
    let ideal = [(one + z) / 4.0, (one - z) / 4.0, (one + x) / 4.0, (one - x) / 4.0];
    let mut out = [Matrix2::zeros(); 5];
    let mut null = one;
    for k in 0..4 {
        out[k] = ideal[k] * eff[k];
        null -= out[k];
    }
    out[4] = null;
    out
}

/// All 25 joint probabilities by the trace rule on dense matrices.
pub fn dense_probabilities(p: &JointPoint) -> [[f64; 5]; 5] {
    let rho = dense_state(&p.state);
    let a = dense_elements(p.left.efficiencies());
    let b = dense_elements(p.right.efficiencies());
    std::array::from_fn(|j| std::array::from_fn(|k| (rho * kron(&a[j], &b[k])).trace()))
}

pub fn random_state<R: Rng>(rng: &mut R) -> CorrelationVector {
    sample_state(rng).0
}

/// Physical point with random state, efficiencies in `[lo, hi]` and the
/// scenario's ratios (or free efficiencies).
pub fn random_point<R: Rng>(rng: &mut R, cfg: &ScenarioConfig, lo: f64, hi: f64, nu: Option<f64>) -> JointPoint {
    let state = random_state(rng);
    let free = cfg.efficiencies == selfcal::model::EfficiencyModel::Free;
    let mut side = |ratios: [f64; 4]| {
        if free {
            DetectorSide::from_efficiencies(std::array::from_fn(|_| rng.random_range(lo..hi))).unwrap()
        } else {
            DetectorSide::new(ratios, rng.random_range(lo..hi)).unwrap()
        }
    };
    let left = side(cfg.ratios_left);
    let right = side(cfg.ratios_right);
    JointPoint::new(state, left, right, nu).unwrap()
}

/// Expected counts `ν p_k` rounded, a deterministic data set near `p`.
pub fn expected_counts(p: &JointPoint, nu: f64) -> CountRecord {
    let t = selfcal::probability::outcome_probabilities(p).unwrap();
    CountRecord::new(std::array::from_fn(|k| {
        let (j, l) = recorded_cell(k);
        (nu * t.get(j, l)).round() as u64
    }))
}

/// A fixed physical point, for sample sets whose points do not matter.
pub fn placeholder_point() -> JointPoint {
    JointPoint::new(
        CorrelationVector::zero(),
        DetectorSide::uniform(0.5).unwrap(),
        DetectorSide::uniform(0.5).unwrap(),
        None,
    )
    .unwrap()
}

/// Sample set with the given log-likelihoods and maximum.
pub fn synthetic_set(log_l: Vec<f64>, log_l_max: f64, provenance: Provenance) -> SampleSet {
    let n = log_l.len();
    SampleSet::from_evaluated(vec![placeholder_point(); n], log_l, log_l_max, provenance, 0, vec![0; n])
}
