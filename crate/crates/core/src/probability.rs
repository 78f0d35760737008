//! Efficiency-weighted double-crosshair measurement and the 25 joint outcome
//! probabilities.
//!
//! Single-qubit operators are carried as Pauli coefficient triples in the
//! basis `(1, σx, σz)`; σy never enters. A joint probability is then the
//! bilinear form `αᵀ T β` with `T` the state tensor of
//! [`CorrelationVector::tensor`], so no matrix algebra is needed on the hot
//! path.

use nalgebra::{Cholesky, Matrix4, SymmetricEigen};

use crate::error::{Error, Result};
use crate::model::{CorrelationVector, DetectorSide, Field, JointPoint, TOL_PSD};

/// Coefficients `(α₀, α_x, α_z)` of `α₀·1 + α_x σx + α_z σz`.
pub type PauliCoeffs = [f64; 3];

/// Number of outcomes per side, null included.
pub const SIDE_OUTCOMES: usize = 5;
/// Index of the null outcome within a side.
pub const NULL: usize = 4;
/// Number of recorded joint outcomes.
pub const RECORDED: usize = 24;

/// Ideal crosshair elements `(1±σz)/4, (1±σx)/4`. The factor 1/4 contains the
/// 50/50 basis choice.
pub const CROSSHAIR: [PauliCoeffs; 4] = [
    [0.25, 0.0, 0.25],
    [0.25, 0.0, -0.25],
    [0.25, 0.25, 0.0],
    [0.25, -0.25, 0.0],
];

/// The five POM elements of one side: `η_k Π_k` for the four detectors and
/// `1 − Σ η_k Π_k` for the null outcome.
pub fn crosshair_elements(side: &DetectorSide) -> [PauliCoeffs; SIDE_OUTCOMES] {
    elements_from_efficiencies(side.efficiencies())
}

pub(crate) fn elements_from_efficiencies(eff: [f64; 4]) -> [PauliCoeffs; SIDE_OUTCOMES] {
    let mut out = [[0.0; 3]; SIDE_OUTCOMES];
    let mut null = [1.0, 0.0, 0.0];
    for k in 0..4 {
        for c in 0..3 {
            out[k][c] = eff[k] * CROSSHAIR[k][c];
            null[c] -= out[k][c];
        }
    }
    out[NULL] = null;
    out
}

/// `Σᵢⱼ αᵢ Tᵢⱼ βⱼ`.
#[inline]
pub fn bilinear(alpha: &PauliCoeffs, t: &[[f64; 3]; 3], beta: &PauliCoeffs) -> f64 {
    let mut s = 0.0;
    for i in 0..3 {
        if alpha[i] == 0.0 {
            continue;
        }
        s += alpha[i] * (t[i][0] * beta[0] + t[i][1] * beta[1] + t[i][2] * beta[2]);
    }
    s
}

/// Maps a recorded-count index `0..24` to `(left, right)` outcome indices.
/// Rows of five for left detectors 1′..4′, then the left-null row.
#[inline]
pub fn recorded_cell(k: usize) -> (usize, usize) {
    debug_assert!(k < RECORDED);
    if k < 20 {
        (k / 5, k % 5)
    } else {
        (NULL, k - 20)
    }
}

/// Joint outcome probabilities `p[left][right]`, null last on each axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutcomeTable {
    p: [[f64; SIDE_OUTCOMES]; SIDE_OUTCOMES],
}

impl OutcomeTable {
    pub fn get(&self, left: usize, right: usize) -> f64 {
        self.p[left][right]
    }

    /// The 24 recorded probabilities in count-record order.
    pub fn recorded(&self) -> [f64; RECORDED] {
        std::array::from_fn(|k| {
            let (j, l) = recorded_cell(k);
            self.p[j][l]
        })
    }

    /// Probability of the unrecorded double-null event, `1 − Σ recorded`.
    pub fn double_null(&self) -> f64 {
        self.p[NULL][NULL]
    }

    pub fn total(&self) -> f64 {
        self.p.iter().flatten().sum()
    }

    pub fn as_array(&self) -> &[[f64; SIDE_OUTCOMES]; SIDE_OUTCOMES] {
        &self.p
    }
}

/// Outcome table without the physicality check.
pub fn outcome_table(
    state: &CorrelationVector,
    left: &[PauliCoeffs; SIDE_OUTCOMES],
    right: &[PauliCoeffs; SIDE_OUTCOMES],
) -> OutcomeTable {
    let t = state.tensor();
    let mut p = [[0.0; SIDE_OUTCOMES]; SIDE_OUTCOMES];
    let mut recorded = 0.0;
    for j in 0..SIDE_OUTCOMES {
        for k in 0..SIDE_OUTCOMES {
            if j == NULL && k == NULL {
                continue;
            }
            p[j][k] = bilinear(&left[j], &t, &right[k]);
            recorded += p[j][k];
        }
    }
    p[NULL][NULL] = 1.0 - recorded;
    OutcomeTable { p }
}

/// All 25 outcome probabilities of a physical point.
pub fn outcome_probabilities(p: &JointPoint) -> Result<OutcomeTable> {
    ensure_physical(&p.state)?;
    Ok(outcome_table(
        &p.state,
        &crosshair_elements(&p.left),
        &crosshair_elements(&p.right),
    ))
}

const PAULI: [[[f64; 2]; 2]; 3] = [
    [[1.0, 0.0], [0.0, 1.0]],
    [[0.0, 1.0], [1.0, 0.0]],
    [[1.0, 0.0], [0.0, -1.0]],
];

/// `(σᵢ ⊗ σⱼ)/4` as a dense real matrix, indices in `(1, σx, σz)`.
pub fn pauli_product(i: usize, j: usize) -> Matrix4<f64> {
    Matrix4::from_fn(|r, c| {
        let (a, b) = (r / 2, r % 2);
        let (cc, d) = (c / 2, c % 2);
        0.25 * PAULI[i][a][cc] * PAULI[j][b][d]
    })
}

/// The y-zeroed completion `M(q) = ¼ Σ Tᵢⱼ σᵢ⊗σⱼ`.
pub fn completion_matrix(q: &CorrelationVector) -> Matrix4<f64> {
    let t = q.tensor();
    let mut m = Matrix4::zeros();
    for i in 0..3 {
        for j in 0..3 {
            if t[i][j] != 0.0 {
                m += pauli_product(i, j) * t[i][j];
            }
        }
    }
    m
}

/// `∂M/∂q` for one field.
pub fn completion_derivative(field: Field) -> Matrix4<f64> {
    let (i, j) = field.tensor_position();
    pauli_product(i, j)
}

pub fn min_eigenvalue(q: &CorrelationVector) -> f64 {
    SymmetricEigen::new(completion_matrix(q))
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Physicality {
    Physical { min_eigenvalue: f64 },
    Violation { min_eigenvalue: f64 },
}

impl Physicality {
    pub fn is_physical(&self) -> bool {
        matches!(self, Physicality::Physical { .. })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        match *self {
            Physicality::Physical { min_eigenvalue } | Physicality::Violation { min_eigenvalue } => {
                min_eigenvalue
            }
        }
    }
}

/// Physical iff the smallest eigenvalue of `M(q)` is at least `-TOL_PSD`.
pub fn physicality_check(q: &CorrelationVector) -> Physicality {
    physicality_check_with(q, TOL_PSD)
}

pub fn physicality_check_with(q: &CorrelationVector, tol: f64) -> Physicality {
    let min_eigenvalue = min_eigenvalue(q);
    if min_eigenvalue >= -tol {
        Physicality::Physical { min_eigenvalue }
    } else {
        Physicality::Violation { min_eigenvalue }
    }
}

/// Fast positivity test for sampling loops: Cholesky of `M + tol·1`.
pub fn is_physical(q: &CorrelationVector, tol: f64) -> bool {
    if q.to_array().iter().any(|x| x.abs() > 1.0) {
        return false;
    }
    Cholesky::new(completion_matrix(q) + Matrix4::identity() * tol).is_some()
}

pub(crate) fn ensure_physical(q: &CorrelationVector) -> Result<()> {
    match physicality_check(q) {
        Physicality::Physical { .. } => Ok(()),
        Physicality::Violation { min_eigenvalue } => Err(Error::NonPhysical { min_eigenvalue }),
    }
}

/// Largest interval of `field` (others fixed) on which the completion stays
/// positive, endpoints located by bisection.
pub fn physical_range(q: &CorrelationVector, field: Field) -> Result<(f64, f64)> {
    ensure_physical(q)?;
    let x0 = q.get(field);
    let ok = |x: f64| physicality_check(&q.with(field, x)).is_physical();
    let edge = |limit: f64| {
        if ok(limit) {
            return limit;
        }
        let (mut inside, mut outside) = (x0, limit);
        while (outside - inside).abs() > 1e-13 {
            let mid = 0.5 * (inside + outside);
            if ok(mid) {
                inside = mid;
            } else {
                outside = mid;
            }
        }
        inside
    };
    Ok((edge(-1.0), edge(1.0)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DetectorSide;

    fn side(eff: [f64; 4]) -> DetectorSide {
        DetectorSide::from_efficiencies(eff).unwrap()
    }

    fn point(q: CorrelationVector, l: [f64; 4], r: [f64; 4]) -> JointPoint {
        JointPoint::new(q, side(l), side(r), None).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn perfect_detectors_resolve_identity() {
        let e = crosshair_elements(&DetectorSide::uniform(1.0).unwrap());
        let mut sum = [0.0; 3];
        for el in &e[..4] {
            for c in 0..3 {
                sum[c] += el[c];
            }
        }
        assert_eq!(sum, [1.0, 0.0, 0.0]);
        assert_eq!(e[NULL], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn blind_side_is_all_null() {
        let e = crosshair_elements(&DetectorSide::uniform(0.0).unwrap());
        assert_eq!(e[NULL], [1.0, 0.0, 0.0]);
    }

    #[test]
    fn half_efficient_detector_two() {
        let e = crosshair_elements(&side([1.0, 0.5, 1.0, 0.5]));
        assert_eq!(e[1], [0.125, 0.0, -0.125]);
    }

    #[test]
    fn maximally_mixed_perfect() {
        let t = outcome_probabilities(&point(CorrelationVector::zero(), [1.0; 4], [1.0; 4])).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                assert!(close(t.get(j, k), 1.0 / 16.0, 1e-15));
            }
            assert!(close(t.get(j, NULL), 0.0, 1e-15));
            assert!(close(t.get(NULL, j), 0.0, 1e-15));
        }
        assert!(close(t.double_null(), 0.0, 1e-15));
    }

    #[test]
    fn maximally_mixed_half_efficient() {
        let t = outcome_probabilities(&point(CorrelationVector::zero(), [0.5; 4], [0.5; 4])).unwrap();
        for j in 0..4 {
            for k in 0..4 {
                assert!(close(t.get(j, k), 1.0 / 64.0, 1e-15));
            }
            assert!(close(t.get(j, NULL), 1.0 / 16.0, 1e-15));
            assert!(close(t.get(NULL, j), 1.0 / 16.0, 1e-15));
        }
        assert!(close(t.double_null(), 0.25, 1e-15));
    }

    #[test]
    fn product_state_up_up() {
        let q = CorrelationVector {
            a_z: 1.0,
            b_z: 1.0,
            c_zz: 1.0,
            ..Default::default()
        };
        let t = outcome_probabilities(&point(q, [1.0; 4], [1.0; 4])).unwrap();
        assert!(close(t.get(0, 0), 0.25, 1e-15));
        assert!(close(t.get(1, 1), 0.0, 1e-15));
        assert!(close(t.get(0, 2), 0.125, 1e-15));
    }

    #[test]
    fn non_physical_input_is_rejected() {
        let q = CorrelationVector {
            c_xx: 1.0,
            c_zz: 1.0,
            a_z: 1.0,
            ..Default::default()
        };
        assert!(matches!(
            outcome_probabilities(&point(q, [1.0; 4], [1.0; 4])),
            Err(Error::NonPhysical { .. })
        ));
    }

    #[test]
    fn physicality_examples() {
        let c = physicality_check(&CorrelationVector::zero());
        assert!(c.is_physical());
        assert!(close(c.min_eigenvalue(), 0.25, 1e-15));

        let q = CorrelationVector {
            c_xz: 1.0,
            ..Default::default()
        };
        let c = physicality_check(&q);
        assert!(c.is_physical());
        assert!(close(c.min_eigenvalue(), 0.0, 1e-15));
    }

    #[test]
    fn recorded_cells_follow_table_order() {
        assert_eq!(recorded_cell(0), (0, 0));
        assert_eq!(recorded_cell(4), (0, NULL));
        assert_eq!(recorded_cell(9), (1, NULL));
        assert_eq!(recorded_cell(19), (3, NULL));
        assert_eq!(recorded_cell(20), (NULL, 0));
        assert_eq!(recorded_cell(23), (NULL, 3));
    }

    #[test]
    fn lone_correlator_range_is_full() {
        let (lo, hi) = physical_range(&CorrelationVector::zero(), Field::Cxz).unwrap();
        assert_eq!((lo, hi), (-1.0, 1.0));
    }

    /// With only a_z, b_z, c_zz nonzero, M is diagonal with entries
    /// (1 + a s1 + b s2 + c s1 s2)/4, so c ranges over [|a+b| - 1, 1 - |a-b|].
    fn diagonal_czz_range(a: f64, b: f64) -> (f64, f64) {
        ((a + b).abs() - 1.0, 1.0 - (a - b).abs())
    }

    #[test]
    fn range_against_diagonal_reduction() {
        for (a, b) in [(1.0, 0.0), (1.0, 0.3), (0.6, 0.0), (0.6, 0.3), (-0.2, 0.7)] {
            let (elo, ehi) = diagonal_czz_range(a, b);
            let q = CorrelationVector {
                a_z: a,
                b_z: b,
                c_zz: 0.5 * (elo + ehi),
                ..Default::default()
            };
            let (lo, hi) = physical_range(&q, Field::Czz).unwrap();
            // TOL_PSD on the eigenvalue widens the interval by at most 4·TOL_PSD.
            assert!(close(lo, elo, 1e-8) && close(hi, ehi, 1e-8), "{a} {b}: {lo} {hi}");
        }
    }
}
