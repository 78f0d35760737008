//! Maximum-likelihood estimation in the joint state/device space.
//!
//! The optimizer works in unconstrained coordinates. Box constraints are
//! handled by the coordinate maps; positivity of the state is handled by a
//! log-determinant barrier `μ·log det(4M)` driven down over a fixed
//! schedule. Interior optima are then polished without a barrier; boundary
//! optima keep a tiny barrier on the vanishing eigenvalues only, and their
//! convergence is judged on the gradient with the normal cone projected out.
//! Each phase is a Newton iteration with eigenvalue-modified Hessian and
//! Armijo backtracking.

use nalgebra::{Cholesky, DMatrix, DVector, Matrix4, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::likelihood::{chain_rule, CountRecord, Evaluation, LogLikelihood};
use crate::model::{CorrelationVector, Field, JointPoint, ScenarioConfig, STATE_DIM};
use crate::priors::sample_prior;
use crate::probability::{completion_derivative, completion_matrix, ensure_physical, is_physical, min_eigenvalue};

const BARRIER_SCHEDULE: [f64; 4] = [1.0, 1e-2, 1e-4, 1e-6];
/// Weight of the face barrier that finishes boundary optima.
const FACE_BARRIER: f64 = 1e-8;
/// Efficiencies closer than this to 0 or 1 are reported as boundary-seeking.
const BOUNDARY_ETA: f64 = 1e-6;
const MAX_STEP: f64 = 5.0;
const STALL_ITERATIONS: usize = 25;
/// Eigenvalues of `M` below this count as active at a boundary optimum.
const ACTIVE_EIGENVALUE: f64 = 1e-4;
/// Required ratio between the largest active and smallest inactive eigenvalue.
const ACTIVE_GAP: f64 = 1e-3;

#[derive(Debug, Clone)]
pub struct MLResult {
    pub estimate: JointPoint,
    pub log_l_max: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Gradient norm of the final objective in unconstrained coordinates.
    pub gradient_norm: f64,
    pub start_index: usize,
    /// Final unconstrained coordinates.
    pub unconstrained: Vec<f64>,
    pub min_eigenvalue: f64,
    /// The optimum sits on the positivity boundary; the final objective
    /// then carries a small barrier term (see `barrier`).
    pub on_psd_boundary: bool,
    /// Some efficiency was driven to within 1e-6 of 0 or 1.
    pub boundary_seeking: bool,
    /// Barrier weight of the final objective; zero for interior optima.
    pub barrier: f64,
}

/// Positivity handling of one optimization phase.
#[derive(Debug, Clone, Copy)]
enum Barrier {
    /// Plain log-likelihood; non-physical points are rejected.
    None,
    /// `μ·log det(4M)`.
    Full(f64),
    /// `μ·Σ log λ_i` over the `k` smallest eigenvalues of `M` only, so the
    /// barrier gradient stays in the normal cone of the active face.
    Face(f64, usize),
}

/// Log-likelihood plus the positivity barrier, in unconstrained coordinates.
struct Objective<'a> {
    ll: &'a LogLikelihood,
    barrier: Barrier,
    psd_tol: f64,
}

/// Eigen-decomposition of `M` with eigenvalues in ascending order.
fn sorted_eigen(q: &CorrelationVector) -> (Vec<f64>, Vec<nalgebra::Vector4<f64>>) {
    let eig = SymmetricEigen::new(completion_matrix(q));
    let mut idx: Vec<usize> = (0..4).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = idx.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect();
    (values, vectors)
}

impl Objective<'_> {
    fn state(theta: &[f64]) -> CorrelationVector {
        CorrelationVector::from_array(std::array::from_fn(|i| theta[i]))
    }

    /// Barrier value, or `None` when the point is outside its domain.
    fn barrier_value(&self, q: &CorrelationVector) -> Option<f64> {
        match self.barrier {
            Barrier::None => is_physical(q, self.psd_tol).then_some(0.0),
            Barrier::Full(mu) => Cholesky::new(completion_matrix(q)).map(|c| mu * log_det4(&c)),
            Barrier::Face(mu, k) => {
                let (values, _) = sorted_eigen(q);
                (values[0] > 0.0).then(|| mu * values[..k].iter().map(|l| l.ln()).sum::<f64>())
            }
        }
    }

    fn value(&self, u: &[f64]) -> Option<f64> {
        let cfg = self.ll.config();
        let theta = cfg.physical_from_unconstrained(u).ok()?;
        let barrier = self.barrier_value(&Self::state(&theta))?;
        let v = self.ll.value(&theta);
        if v == f64::NEG_INFINITY {
            return None;
        }
        Some(v + barrier)
    }

    fn evaluate(&self, u: &[f64]) -> Option<Evaluation> {
        let cfg = self.ll.config();
        let theta = cfg.physical_from_unconstrained(u).ok()?;
        let q = Self::state(&theta);
        let barrier = self.barrier_value(&q)?;
        let mut e = self.ll.evaluate(&theta, true)?;
        e.value += barrier;
        let ds: Vec<Matrix4<f64>> = Field::ALL.iter().map(|&f| completion_derivative(f)).collect();
        let h = e.hessian.as_mut().unwrap();
        match self.barrier {
            Barrier::None => {}
            Barrier::Full(mu) => {
                let minv = Cholesky::new(completion_matrix(&q))?.inverse();
                let me: Vec<Matrix4<f64>> = ds.iter().map(|d| minv * d).collect();
                for a in 0..STATE_DIM {
                    e.gradient[a] += mu * me[a].trace();
                    for b in 0..=a {
                        let v = -mu * (me[a] * me[b]).trace();
                        h[(a, b)] += v;
                        if a != b {
                            h[(b, a)] += v;
                        }
                    }
                }
            }
            Barrier::Face(mu, k) => {
                let (lam, vecs) = sorted_eigen(&q);
                // x[m][i][j] = v_iᵀ E_m v_j
                let x: Vec<[[f64; 4]; 4]> = ds
                    .iter()
                    .map(|d| std::array::from_fn(|i| std::array::from_fn(|j| vecs[i].dot(&(d * vecs[j])))))
                    .collect();
                for a in 0..STATE_DIM {
                    e.gradient[a] += mu * (0..k).map(|i| x[a][i][i] / lam[i]).sum::<f64>();
                    for b in 0..=a {
                        let mut v = 0.0;
                        for i in 0..k {
                            for j in 0..k {
                                v -= x[a][i][j] * x[b][j][i] / (lam[i] * lam[j]);
                            }
                            for j in k..4 {
                                v += 2.0 * x[a][i][j] * x[b][j][i] / ((lam[i] - lam[j]) * lam[i]);
                            }
                        }
                        h[(a, b)] += mu * v;
                        if a != b {
                            h[(b, a)] += mu * v;
                        }
                    }
                }
            }
        }
        Some(chain_rule(&cfg.coordinate_kinds(), &theta, e))
    }
}

fn log_det4(c: &Cholesky<f64, nalgebra::U4>) -> f64 {
    let l = c.l_dirty();
    2.0 * (0..4).map(|i| l[(i, i)].ln()).sum::<f64>() + 4.0 * 4f64.ln()
}

struct PhaseOutcome {
    u: Vec<f64>,
    #[allow(dead_code)]
    gradient_norm: f64,
    iterations: usize,
}

/// Modified Newton ascent until the gradient norm drops below `tol`, the
/// line search stalls or `max_iter` is reached.
fn newton(obj: &Objective, mut u: Vec<f64>, tol: f64, max_iter: usize) -> Option<PhaseOutcome> {
    let mut e = obj.evaluate(&u)?;
    let mut iterations = 0;
    // Last iteration at which the objective rose by more than rounding.
    let mut progress = (e.value, 0);
    while iterations < max_iter {
        let gnorm = e.gradient.norm();
        if gnorm < tol {
            break;
        }
        if e.value > progress.0 + 8.0 * f64::EPSILON * e.value.abs().max(1.0) {
            progress = (e.value, iterations);
        } else if iterations - progress.1 > STALL_ITERATIONS {
            break;
        }
        iterations += 1;
        let h = e.hessian.clone().unwrap();
        let eig = SymmetricEigen::new(h);
        let scale = eig.eigenvalues.amax().max(1e-300);
        let floor = scale * f64::EPSILON;
        let vt_g = eig.eigenvectors.transpose() * &e.gradient;
        let coeff = DVector::from_iterator(
            vt_g.len(),
            vt_g.iter().zip(eig.eigenvalues.iter()).map(|(g, l)| g / l.abs().max(floor)),
        );
        let mut step: DVector<f64> = &eig.eigenvectors * coeff;
        let norm = step.norm();
        if norm > MAX_STEP {
            step *= MAX_STEP / norm;
        }
        let slope = e.gradient.dot(&step);
        let slack = 8.0 * f64::EPSILON * e.value.abs().max(1.0);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial: Vec<f64> = u.iter().zip(step.iter()).map(|(a, s)| a + t * s).collect();
            if let Some(v) = obj.value(&trial) {
                if v >= e.value + 1e-4 * t * slope - slack {
                    if let Some(ne) = obj.evaluate(&trial) {
                        accepted = Some((trial, ne));
                        break;
                    }
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, ne)) => {
                let stalled = trial == u;
                u = trial;
                e = ne;
                if stalled {
                    break;
                }
            }
            None => break,
        }
    }
    Some(PhaseOutcome {
        gradient_norm: e.gradient.norm(),
        u,
        iterations,
    })
}

/// Norm of the log-likelihood gradient in unconstrained coordinates, after
/// projecting out the normal cone of the `active` smallest eigenvalues of
/// `M` (KKT stationarity on the positivity boundary).
fn stationarity_residual(ll: &LogLikelihood, u: &[f64], active: usize) -> f64 {
    let cfg = ll.config();
    let Some((theta, e)) = ll.evaluate_unconstrained(u, false) else {
        return f64::INFINITY;
    };
    let g = e.gradient;
    if active == 0 {
        return g.norm();
    }
    let (_, vecs) = sorted_eigen(&Objective::state(&theta));
    let kinds = cfg.coordinate_kinds();
    let mut normals = Vec::new();
    for i in 0..active {
        for j in i..active {
            normals.push(DVector::from_fn(g.len(), |m, _| {
                if m < STATE_DIM {
                    let dm = completion_derivative(Field::ALL[m]);
                    vecs[i].dot(&(dm * vecs[j])) * kinds[m].derivatives(theta[m]).0
                } else {
                    0.0
                }
            }));
        }
    }
    let c = DMatrix::from_columns(&normals);
    // Least squares through SVD; the normals can be nearly dependent.
    let svd = c.clone().svd(true, true);
    match svd.solve(&g, 1e-12 * svd.singular_values.max()) {
        Ok(coef) => (g - c * coef).norm(),
        Err(_) => g.norm(),
    }
}

/// Number of eigenvalues of `M` separated from the rest by a clear gap and
/// small enough to belong to the positivity boundary.
fn active_count(q: &CorrelationVector) -> usize {
    let (lam, _) = sorted_eigen(q);
    (0..3)
        .rev()
        .find(|&i| lam[i] < ACTIVE_EIGENVALUE && lam[i] < ACTIVE_GAP * lam[i + 1])
        .map_or(0, |i| i + 1)
}

/// Moves a start point slightly toward the maximally mixed state until the
/// completion is strictly positive.
fn interior_start(p: &JointPoint) -> JointPoint {
    let mut out = *p;
    while Cholesky::new(completion_matrix(&out.state) - Matrix4::identity() * 1e-10).is_none() {
        out.state = CorrelationVector::from_array(out.state.to_array().map(|x| 0.98 * x));
    }
    out
}

fn clamp_open(x: f64) -> f64 {
    x.clamp(1e-9, 1.0 - 1e-9)
}

/// Local maximizer of the scenario log-likelihood from `start`.
pub fn fit_ml(d: &CountRecord, cfg: &ScenarioConfig, start: &JointPoint) -> Result<MLResult> {
    cfg.validate()?;
    ensure_physical(&start.state)?;
    let ll = LogLikelihood::new(d, cfg);
    let mut s = interior_start(start);
    // Efficiencies exactly at 0 or 1 have no unconstrained image.
    s.state = CorrelationVector::from_array(s.state.to_array().map(|x| x.clamp(-1.0 + 1e-9, 1.0 - 1e-9)));
    s.left = s.left.with_scale(clamp_open(s.left.scale()))?;
    s.right = s.right.with_scale(clamp_open(s.right.scale()))?;
    let mut u = match cfg.to_unconstrained(&s) {
        Ok(u) => u,
        Err(_) => {
            let mut theta = cfg.physical_vector(&s)?;
            for (i, x) in theta.iter_mut().enumerate().skip(STATE_DIM) {
                if Some(i) != cfg.nu_index() {
                    *x = clamp_open(*x);
                }
            }
            cfg.to_unconstrained(&cfg.point_from_physical(&theta)?)?
        }
    };
    let tol = cfg.tolerances.gradient;
    let max_iter = cfg.tolerances.max_iterations;
    let psd_tol = cfg.tolerances.psd;
    let run = |barrier: Barrier, u: &[f64]| {
        let obj = Objective {
            ll: &ll,
            barrier,
            psd_tol,
        };
        newton(&obj, u.to_vec(), tol, max_iter)
    };
    let mut iterations = 0;
    let mut ran = false;
    for &mu in &BARRIER_SCHEDULE {
        let Some(out) = run(Barrier::Full(mu), &u) else {
            break;
        };
        ran = true;
        iterations += out.iterations;
        u = out.u;
    }
    if !ran {
        return Err(Error::NotConverged {
            gradient_norm: f64::INFINITY,
        });
    }
    // Finish without bias: unbarriered if interior, otherwise with the
    // barrier restricted to the active face.
    let state_of = |u: &[f64]| cfg.physical_from_unconstrained(u).map(|t| Objective::state(&t));
    let mut active = active_count(&state_of(&u)?);
    let mut barrier = 0.0;
    let mut finished = false;
    if active == 0 {
        if let Some(out) = run(Barrier::None, &u) {
            if stationarity_residual(&ll, &out.u, 0) < tol {
                iterations += out.iterations;
                u = out.u;
                finished = true;
            }
        }
        if !finished && min_eigenvalue(&state_of(&u)?) < ACTIVE_EIGENVALUE {
            active = 1;
        }
    }
    if active > 0 {
        if let Some(out) = run(Barrier::Face(FACE_BARRIER, active), &u) {
            iterations += out.iterations;
            u = out.u;
            barrier = FACE_BARRIER;
            finished = true;
        }
    }
    if !finished {
        active = 0;
    }
    let gradient_norm = stationarity_residual(&ll, &u, active);
    let on_psd_boundary = barrier > 0.0;
    let estimate = cfg.from_unconstrained(&u)?;
    let log_l_max = ll.value(&cfg.physical_vector(&estimate)?);
    let boundary_seeking = estimate
        .efficiencies()
        .iter()
        .chain([estimate.left.scale(), estimate.right.scale()].iter())
        .any(|&e| e > 0.0 && (e < BOUNDARY_ETA || e > 1.0 - BOUNDARY_ETA));
    Ok(MLResult {
        min_eigenvalue: min_eigenvalue(&estimate.state),
        estimate,
        log_l_max,
        converged: gradient_norm < tol,
        iterations,
        gradient_norm,
        start_index: 0,
        unconstrained: u,
        on_psd_boundary,
        boundary_seeking,
        barrier,
    })
}

/// One group of starts that converged to the same maximum.
#[derive(Debug, Clone)]
pub struct Cluster {
    pub representative: MLResult,
    pub members: usize,
    /// Largest distance between two members, unconstrained coordinates.
    pub max_distance: f64,
}

/// Comparison of two cluster representatives.
#[derive(Debug, Clone)]
pub struct ClusterPair {
    pub first: usize,
    pub second: usize,
    pub fidelity: f64,
    /// Euclidean distance between the eight per-detector efficiencies.
    pub efficiency_distance: f64,
    pub log_l_gap: f64,
}

#[derive(Debug, Clone)]
pub struct ModeReport {
    /// Ordered by descending log-likelihood.
    pub clusters: Vec<Cluster>,
    pub pairs: Vec<ClusterPair>,
    pub starts: usize,
    pub failed: usize,
}

/// Unconstrained coordinates are clipped here before comparing: fits that
/// push an efficiency toward 1 wander off to arbitrarily large values along a
/// nearly flat direction.
const CLIP_U: f64 = 13.815510557964274;

fn distance(a: &[f64], b: &[f64]) -> f64 {
    let clip = |x: f64| x.clamp(-CLIP_U, CLIP_U);
    a.iter().zip(b).map(|(x, y)| (clip(*x) - clip(*y)).powi(2)).sum::<f64>().sqrt()
}

/// Groups converged fits greedily, best first: a fit joins the first cluster
/// whose representative lies within `delta`.
pub fn cluster_results(mut results: Vec<MLResult>, delta: f64) -> Vec<Cluster> {
    results.sort_by(|a, b| {
        b.log_l_max
            .total_cmp(&a.log_l_max)
            .then(a.start_index.cmp(&b.start_index))
    });
    let mut groups: Vec<Vec<MLResult>> = Vec::new();
    for r in results {
        match groups
            .iter_mut()
            .find(|g| distance(&g[0].unconstrained, &r.unconstrained) < delta)
        {
            Some(g) => g.push(r),
            None => groups.push(vec![r]),
        }
    }
    groups
        .into_iter()
        .map(|g| {
            let mut max_distance: f64 = 0.0;
            for i in 0..g.len() {
                for j in 0..i {
                    max_distance = max_distance.max(distance(&g[i].unconstrained, &g[j].unconstrained));
                }
            }
            Cluster {
                members: g.len(),
                max_distance,
                representative: g.into_iter().next().unwrap(),
            }
        })
        .collect()
}

/// Fits from `n_starts` prior draws and groups the converged results.
pub fn multi_start_ml(d: &CountRecord, cfg: &ScenarioConfig, n_starts: usize, seed: u64) -> Result<ModeReport> {
    if n_starts < 2 {
        return Err(Error::InvalidConfig("multi-start needs at least 2 starts".into()));
    }
    let starts = sample_prior(cfg, n_starts, seed).points;
    let results: Vec<Option<MLResult>> = starts
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            fit_ml(d, cfg, s).ok().map(|mut r| {
                r.start_index = i;
                r
            })
        })
        .collect();
    let converged: Vec<MLResult> = results.into_iter().flatten().filter(|r| r.converged).collect();
    if converged.is_empty() {
        return Err(Error::AllStartsFailed { starts: n_starts });
    }
    let failed = n_starts - converged.len();
    let clusters = cluster_results(converged, cfg.tolerances.cluster);
    let mut pairs = Vec::new();
    for i in 0..clusters.len() {
        for j in i + 1..clusters.len() {
            let (a, b) = (&clusters[i].representative, &clusters[j].representative);
            pairs.push(ClusterPair {
                first: i,
                second: j,
                fidelity: fidelity(&a.estimate.state, &b.estimate.state)?,
                efficiency_distance: distance(&a.estimate.efficiencies(), &b.estimate.efficiencies()),
                log_l_gap: a.log_l_max - b.log_l_max,
            });
        }
    }
    Ok(ModeReport {
        clusters,
        pairs,
        starts: n_starts,
        failed,
    })
}

/// Highest maximum found from `n_starts` prior-drawn starts.
pub fn best_ml(d: &CountRecord, cfg: &ScenarioConfig, n_starts: usize, seed: u64) -> Result<MLResult> {
    let report = multi_start_ml(d, cfg, n_starts.max(2), seed)?;
    Ok(report.clusters.into_iter().next().expect("at least one cluster").representative)
}

/// Log-likelihood along the straight segment between two points, in
/// physical coordinates, at `steps + 1` equally spaced positions.
pub fn segment_scan(
    d: &CountRecord,
    cfg: &ScenarioConfig,
    a: &JointPoint,
    b: &JointPoint,
    steps: usize,
) -> Result<Vec<(f64, f64)>> {
    let ll = LogLikelihood::new(d, cfg);
    let ta = cfg.physical_vector(a)?;
    let tb = cfg.physical_vector(b)?;
    Ok((0..=steps)
        .map(|i| {
            let t = i as f64 / steps.max(1) as f64;
            let theta: Vec<f64> = ta.iter().zip(&tb).map(|(x, y)| (1.0 - t) * x + t * y).collect();
            (t, ll.value(&theta))
        })
        .collect())
}

fn sqrt_psd(m: &Matrix4<f64>) -> Matrix4<f64> {
    let eig = SymmetricEigen::new(*m);
    let d = Matrix4::from_diagonal(&eig.eigenvalues.map(|l| l.max(0.0).sqrt()));
    eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Fidelity `tr √(√ρ₁ ρ₂ √ρ₁)` between the completions of two states.
pub fn fidelity(q1: &CorrelationVector, q2: &CorrelationVector) -> Result<f64> {
    ensure_physical(q1)?;
    ensure_physical(q2)?;
    let r1 = completion_matrix(q1);
    let r2 = completion_matrix(q2);
    let s1 = sqrt_psd(&r1);
    let inner = s1 * r2 * s1;
    let inner = (inner + inner.transpose()) * 0.5;
    let f: f64 = SymmetricEigen::new(inner)
        .eigenvalues
        .iter()
        .map(|l| l.max(0.0).sqrt())
        .sum();
    Ok(f.min(1.0))
}

/// Dense Hessian of the log-likelihood at an estimate, physical coordinates.
pub fn observed_information(d: &CountRecord, cfg: &ScenarioConfig, p: &JointPoint) -> Result<DMatrix<f64>> {
    let ll = LogLikelihood::new(d, cfg);
    let theta = cfg.physical_vector(p)?;
    ll.evaluate(&theta, true)
        .and_then(|e| e.hessian)
        .map(|h| -h)
        .ok_or_else(|| Error::InvalidConfig("log-likelihood is -inf at this point".into()))
}
