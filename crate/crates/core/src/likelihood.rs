//! Log-likelihoods of a count record, their derivatives, and the marginal
//! likelihood over uncertain efficiency ratios.
//!
//! Dropped constants, per mode:
//!
//! * known ν: `ν·p₀ + Σ n_k log p_k`; the dropped terms are
//!   `N log ν − ν − Σ log n_k!`.
//! * unknown ν: `Σ [n_k log(ν p_k) − ν p_k]`; only `−Σ log n_k!` is dropped.
//!
//! Both follow the convention `0·log 0 = 0`.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::model::{
    normalize_ratios, CoordKind, DetectorSide, EfficiencyModel, JointPoint, NuMode, ScenarioConfig,
    Field, STATE_DIM,
};
use crate::probability::{
    crosshair_elements, ensure_physical, outcome_table, recorded_cell, PauliCoeffs, CROSSHAIR, NULL,
    RECORDED, SIDE_OUTCOMES,
};
use crate::rng::stream_rng;

/// The 24 recorded coincidence counts, in row order: left detectors 1′..4′
/// each against right `(1, 2, 3, 4, null)`, then left-null against right
/// `(1, 2, 3, 4)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountRecord {
    n: [u64; RECORDED],
}

impl CountRecord {
    pub fn new(n: [u64; RECORDED]) -> Self {
        Self { n }
    }

    pub fn zeros() -> Self {
        Self { n: [0; RECORDED] }
    }

    pub fn counts(&self) -> &[u64; RECORDED] {
        &self.n
    }

    pub fn get(&self, k: usize) -> u64 {
        self.n[k]
    }

    /// Total number of recorded events `N`.
    pub fn total(&self) -> u64 {
        self.n.iter().sum()
    }

    /// Singles totals per left outcome `1′..4′, null`.
    pub fn left_singles(&self) -> [u64; SIDE_OUTCOMES] {
        let mut out = [0; SIDE_OUTCOMES];
        for (k, &n) in self.n.iter().enumerate() {
            out[recorded_cell(k).0] += n;
        }
        out
    }

    /// Singles totals per right outcome `1..4, null`.
    pub fn right_singles(&self) -> [u64; SIDE_OUTCOMES] {
        let mut out = [0; SIDE_OUTCOMES];
        for (k, &n) in self.n.iter().enumerate() {
            out[recorded_cell(k).1] += n;
        }
        out
    }

    /// Counts with the two sides exchanged (requires the record to be read
    /// with the same detector labelling on both sides).
    pub fn swapped(&self) -> Self {
        let mut table = [[0u64; SIDE_OUTCOMES]; SIDE_OUTCOMES];
        for (k, &n) in self.n.iter().enumerate() {
            let (j, l) = recorded_cell(k);
            table[l][j] = n;
        }
        Self {
            n: std::array::from_fn(|k| {
                let (j, l) = recorded_cell(k);
                table[j][l]
            }),
        }
    }

    pub fn sum_log_factorials(&self) -> f64 {
        self.n.iter().map(|&n| ln_gamma(n as f64 + 1.0)).sum()
    }
}

impl fmt::Display for CountRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, n) in self.n.iter().enumerate() {
            if k > 0 {
                f.write_str(" ")?;
            }
            write!(f, "{n}")?;
        }
        Ok(())
    }
}

impl FromStr for CountRecord {
    type Err = Error;

    /// Parses 24 whitespace-separated nonnegative integers. Lines starting
    /// with `#` are comments; fields may span several lines.
    fn from_str(s: &str) -> Result<Self> {
        let mut values = Vec::with_capacity(RECORDED);
        let mut last = (1, 1);
        for (li, line) in s.lines().enumerate() {
            if line.trim_start().starts_with('#') {
                continue;
            }
            let mut col = 0;
            for token in line.split_whitespace() {
                col = line[col..].find(token).unwrap() + col;
                let (l, c) = (li + 1, col + 1);
                if values.len() == RECORDED {
                    return Err(Error::Parse {
                        line: l,
                        column: c,
                        message: format!("expected exactly {RECORDED} counts, found more"),
                    });
                }
                let n: u64 = token.parse().map_err(|_| Error::Parse {
                    line: l,
                    column: c,
                    message: format!("`{token}` is not a nonnegative integer"),
                })?;
                values.push(n);
                col += token.len();
                last = (l, col + 1);
            }
        }
        if values.len() != RECORDED {
            return Err(Error::Parse {
                line: last.0,
                column: last.1,
                message: format!("expected {RECORDED} counts, found {}", values.len()),
            });
        }
        let mut n = [0; RECORDED];
        n.copy_from_slice(&values);
        Ok(Self { n })
    }
}

/// `Σ n_k log p_k` with `0·log 0 = 0`; `-∞` if a positive count meets a
/// nonpositive probability.
fn data_term(d: &CountRecord, p: &[f64; RECORDED]) -> f64 {
    let mut s = 0.0;
    for (&n, &pk) in d.n.iter().zip(p) {
        if n == 0 {
            continue;
        }
        if pk <= 0.0 {
            return f64::NEG_INFINITY;
        }
        s += n as f64 * pk.ln();
    }
    s
}

fn recorded_probabilities(p: &JointPoint) -> Result<([f64; RECORDED], f64)> {
    ensure_physical(&p.state)?;
    let table = outcome_table(&p.state, &crosshair_elements(&p.left), &crosshair_elements(&p.right));
    Ok((table.recorded(), table.double_null()))
}

fn check_nu(nu: f64) -> Result<()> {
    if nu.is_finite() && nu > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("nu must be positive, got {nu}")))
    }
}

/// `ν·p₀ + Σ n_k log p_k`.
pub fn log_likelihood_known_nu(d: &CountRecord, p: &JointPoint, nu: f64) -> Result<f64> {
    check_nu(nu)?;
    let (rec, p0) = recorded_probabilities(p)?;
    Ok(nu * p0 + data_term(d, &rec))
}

/// `Σ [n_k log(ν p_k) − ν p_k]` with ν taken from the point.
pub fn log_likelihood_unknown_nu(d: &CountRecord, p: &JointPoint) -> Result<f64> {
    let nu = p
        .nu
        .ok_or_else(|| Error::InvalidConfig("point carries no nu".into()))?;
    check_nu(nu)?;
    let (rec, _) = recorded_probabilities(p)?;
    let total: f64 = rec.iter().sum();
    let data = data_term(d, &rec);
    Ok(data + d.total() as f64 * nu.ln() - nu * total)
}

/// The scenario's log-likelihood at a point.
pub fn log_likelihood(d: &CountRecord, p: &JointPoint, cfg: &ScenarioConfig) -> Result<f64> {
    match cfg.nu_mode {
        NuMode::Known { nu } => log_likelihood_known_nu(d, p, nu),
        NuMode::Unknown => log_likelihood_unknown_nu(d, p),
    }
}

/// Full log-probability of the record, summed explicitly over the unknown
/// number `n₀` of double-null events:
///
/// `Σ_{n₀} Poi(N+n₀; ν) · (N+n₀)!/(N! n₀!) · N!/∏n_k! · ∏ p_k^{n_k} · p₀^{n₀}`.
///
/// Nothing is dropped. Intended as a test oracle.
pub fn appendix_oracle(d: &CountRecord, p: &JointPoint, nu: f64, n0_max: u64) -> Result<f64> {
    check_nu(nu)?;
    let (rec, p0) = recorded_probabilities(p)?;
    let n = d.total() as f64;
    let data = data_term(d, &rec);
    if data == f64::NEG_INFINITY {
        return Ok(data);
    }
    let ln_n_fact = ln_gamma(n + 1.0);
    let multinomial = ln_n_fact - d.sum_log_factorials();
    let terms: Vec<f64> = (0..=n0_max)
        .map(|n0| {
            let m = n + n0 as f64;
            let poisson = -nu + m * nu.ln() - ln_gamma(m + 1.0);
            let sequences = ln_gamma(m + 1.0) - ln_n_fact - ln_gamma(n0 as f64 + 1.0);
            let null = if n0 == 0 { 0.0 } else { n0 as f64 * p0.ln() };
            poisson + sequences + multinomial + data + null
        })
        .collect();
    Ok(log_sum_exp(&terms))
}

/// Stable `log Σ exp(x_i)`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Affine model of one side's five POM elements in its efficiency
/// parameters: `A_j(e) = base_j + Σ_l e_l gens[l]_j`.
#[derive(Debug, Clone)]
struct SideModel {
    base: [PauliCoeffs; SIDE_OUTCOMES],
    gens: Vec<[PauliCoeffs; SIDE_OUTCOMES]>,
}

impl SideModel {
    fn new(model: EfficiencyModel, ratios: [f64; 4]) -> Self {
        let mut base = [[0.0; 3]; SIDE_OUTCOMES];
        base[NULL] = [1.0, 0.0, 0.0];
        let gen = |weights: [f64; 4]| {
            let mut g = [[0.0; 3]; SIDE_OUTCOMES];
            for k in 0..4 {
                for c in 0..3 {
                    g[k][c] = weights[k] * CROSSHAIR[k][c];
                    g[NULL][c] -= g[k][c];
                }
            }
            g
        };
        let gens = match model {
            EfficiencyModel::FixedRatios => vec![gen(ratios)],
            EfficiencyModel::Free => (0..4)
                .map(|l| gen(std::array::from_fn(|k| if k == l { 1.0 } else { 0.0 })))
                .collect(),
        };
        Self { base, gens }
    }

    fn elements(&self, e: &[f64]) -> [PauliCoeffs; SIDE_OUTCOMES] {
        let mut a = self.base;
        for (g, &el) in self.gens.iter().zip(e) {
            for j in 0..SIDE_OUTCOMES {
                for c in 0..3 {
                    a[j][c] += el * g[j][c];
                }
            }
        }
        a
    }
}

fn mat_vec(t: &[[f64; 3]; 3], v: &PauliCoeffs) -> PauliCoeffs {
    std::array::from_fn(|i| t[i][0] * v[0] + t[i][1] * v[1] + t[i][2] * v[2])
}

fn vec_mat(v: &PauliCoeffs, t: &[[f64; 3]; 3]) -> PauliCoeffs {
    std::array::from_fn(|j| v[0] * t[0][j] + v[1] * t[1][j] + v[2] * t[2][j])
}

fn dot(a: &PauliCoeffs, b: &PauliCoeffs) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// Log-likelihood of one record under one scenario, as a function of the
/// physical coordinate vector `θ` (layout of [`ScenarioConfig::physical_vector`])
/// or of the unconstrained vector `u`.
///
/// Evaluation does not test positivity of the state; callers that need it
/// check it separately.
#[derive(Debug, Clone)]
pub struct LogLikelihood {
    counts: [f64; RECORDED],
    total: f64,
    cfg: ScenarioConfig,
    left: SideModel,
    right: SideModel,
}

/// Value, gradient and (optionally) Hessian at one point.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: DVector<f64>,
    pub hessian: Option<DMatrix<f64>>,
}

impl LogLikelihood {
    pub fn new(d: &CountRecord, cfg: &ScenarioConfig) -> Self {
        Self {
            counts: d.n.map(|n| n as f64),
            total: d.total() as f64,
            cfg: cfg.clone(),
            left: SideModel::new(cfg.efficiencies, cfg.ratios_left),
            right: SideModel::new(cfg.efficiencies, cfg.ratios_right),
        }
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn dim(&self) -> usize {
        self.cfg.dim()
    }

    fn nu(&self, theta: &[f64]) -> f64 {
        match self.cfg.nu_mode {
            NuMode::Known { nu } => nu,
            NuMode::Unknown => theta[self.cfg.nu_index().unwrap()],
        }
    }

    fn mode_constant(&self, nu: f64) -> f64 {
        match self.cfg.nu_mode {
            NuMode::Known { .. } => nu,
            NuMode::Unknown => self.total * nu.ln(),
        }
    }

    /// Log-likelihood at physical coordinates.
    pub fn value(&self, theta: &[f64]) -> f64 {
        let (q, el, er) = self.split(theta);
        let nu = self.nu(theta);
        if !(nu > 0.0) {
            return f64::NEG_INFINITY;
        }
        let t = q.tensor();
        let a = self.left.elements(el);
        let b = self.right.elements(er);
        let mut s = 0.0;
        let mut total = 0.0;
        for k in 0..RECORDED {
            let (j, l) = recorded_cell(k);
            let p = dot(&a[j], &mat_vec(&t, &b[l]));
            total += p;
            let n = self.counts[k];
            if n > 0.0 {
                if p <= 0.0 {
                    return f64::NEG_INFINITY;
                }
                s += n * p.ln();
            }
        }
        s - nu * total + self.mode_constant(nu)
    }

    fn split<'a>(&self, theta: &'a [f64]) -> (crate::model::CorrelationVector, &'a [f64], &'a [f64]) {
        let m = self.cfg.side_dim();
        let mut q = [0.0; STATE_DIM];
        q.copy_from_slice(&theta[..STATE_DIM]);
        (
            crate::model::CorrelationVector::from_array(q),
            &theta[STATE_DIM..STATE_DIM + m],
            &theta[STATE_DIM + m..STATE_DIM + 2 * m],
        )
    }

    /// Value, gradient and, if requested, Hessian at physical coordinates.
    /// Returns `None` where the log-likelihood is `-∞`.
    pub fn evaluate(&self, theta: &[f64], hessian: bool) -> Option<Evaluation> {
        let dim = self.dim();
        let m = self.cfg.side_dim();
        let (lo, ro) = (self.cfg.left_offset(), self.cfg.right_offset());
        let (q, el, er) = self.split(theta);
        let nu = self.nu(theta);
        if !(nu > 0.0) {
            return None;
        }
        let t = q.tensor();
        let a = self.left.elements(el);
        let b = self.right.elements(er);
        let tb: Vec<PauliCoeffs> = b.iter().map(|v| mat_vec(&t, v)).collect();
        let at: Vec<PauliCoeffs> = a.iter().map(|v| vec_mat(v, &t)).collect();
        let positions = Field::ALL.map(|f| f.tensor_position());

        let mut value = 0.0;
        let mut total = 0.0;
        let mut grad = DVector::zeros(dim);
        let mut hess = hessian.then(|| DMatrix::zeros(dim, dim));
        let mut sum_dp = DVector::zeros(dim);
        let mut dp = DVector::zeros(dim);

        for k in 0..RECORDED {
            let (j, l) = recorded_cell(k);
            let p = dot(&a[j], &tb[l]);
            let n = self.counts[k];
            total += p;
            if n > 0.0 {
                if p <= 0.0 {
                    return None;
                }
                value += n * p.ln();
            }
            for (i, &(r, c)) in positions.iter().enumerate() {
                dp[i] = a[j][r] * b[l][c];
            }
            for (g, gen) in self.left.gens.iter().enumerate() {
                dp[lo + g] = dot(&gen[j], &tb[l]);
            }
            for (g, gen) in self.right.gens.iter().enumerate() {
                dp[ro + g] = dot(&at[j], &gen[l]);
            }
            let w = if n > 0.0 { n / p } else { 0.0 } - nu;
            grad.axpy(w, &dp, 1.0);
            sum_dp += &dp;
            if let Some(h) = hess.as_mut() {
                if n > 0.0 {
                    h.ger(-n / (p * p), &dp, &dp, 1.0);
                }
                // Nonzero second derivatives couple the state with either
                // side and the two sides with each other.
                for (i, &(r, c)) in positions.iter().enumerate() {
                    for (g, gen) in self.left.gens.iter().enumerate() {
                        let v = w * gen[j][r] * b[l][c];
                        h[(i, lo + g)] += v;
                        h[(lo + g, i)] += v;
                    }
                    for (g, gen) in self.right.gens.iter().enumerate() {
                        let v = w * a[j][r] * gen[l][c];
                        h[(i, ro + g)] += v;
                        h[(ro + g, i)] += v;
                    }
                }
                for (g, gl) in self.left.gens.iter().enumerate() {
                    let glt = vec_mat(&gl[j], &t);
                    for (g2, gr) in self.right.gens.iter().enumerate() {
                        let v = w * dot(&glt, &gr[l]);
                        h[(lo + g, ro + g2)] += v;
                        h[(ro + g2, lo + g)] += v;
                    }
                }
            }
        }
        debug_assert_eq!(ro + m, lo + 2 * m);
        value += -nu * total + self.mode_constant(nu);
        if let Some(i) = self.cfg.nu_index() {
            grad[i] = self.total / nu - total;
            if let Some(h) = hess.as_mut() {
                for r in 0..i {
                    h[(r, i)] = -sum_dp[r];
                    h[(i, r)] = -sum_dp[r];
                }
                h[(i, i)] = -self.total / (nu * nu);
            }
        }
        Some(Evaluation {
            value,
            gradient: grad,
            hessian: hess,
        })
    }

    /// As [`Self::evaluate`] but in unconstrained coordinates `u`. Also
    /// returns the physical vector.
    pub fn evaluate_unconstrained(&self, u: &[f64], hessian: bool) -> Option<(Vec<f64>, Evaluation)> {
        let theta = self.cfg.physical_from_unconstrained(u).ok()?;
        let eval = self.evaluate(&theta, hessian)?;
        Some((theta.clone(), chain_rule(&self.cfg.coordinate_kinds(), &theta, eval)))
    }
}

/// Transforms derivatives from physical to unconstrained coordinates.
pub(crate) fn chain_rule(kinds: &[CoordKind], theta: &[f64], eval: Evaluation) -> Evaluation {
    let (d1, d2): (Vec<f64>, Vec<f64>) = kinds
        .iter()
        .zip(theta)
        .map(|(k, &x)| k.derivatives(x))
        .unzip();
    let d1 = DVector::from_vec(d1);
    let gradient = eval.gradient.component_mul(&d1);
    let hessian = eval.hessian.map(|h| {
        let mut hu = DMatrix::from_fn(h.nrows(), h.ncols(), |r, c| h[(r, c)] * d1[r] * d1[c]);
        for i in 0..hu.nrows() {
            hu[(i, i)] += eval.gradient[i] * d2[i];
        }
        hu
    });
    Evaluation {
        value: eval.value,
        gradient,
        hessian,
    }
}

/// Gradient of the scenario log-likelihood in unconstrained coordinates.
pub fn grad_log_likelihood(d: &CountRecord, p: &JointPoint, cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    ensure_physical(&p.state)?;
    let u = cfg.to_unconstrained(p)?;
    let ll = LogLikelihood::new(d, cfg);
    let (_, eval) = ll
        .evaluate_unconstrained(&u, false)
        .ok_or_else(|| Error::InvalidConfig("log-likelihood is -inf at this point".into()))?;
    Ok(eval.gradient.iter().copied().collect())
}

/// Distribution of the two ratio vectors for the marginal likelihood.
#[derive(Debug, Clone, PartialEq)]
pub enum RatioPrior {
    PointMass { left: [f64; 4], right: [f64; 4] },
    /// Finitely many weighted alternatives, enumerated exactly.
    Discrete(Vec<(f64, [f64; 4], [f64; 4])>),
    /// Independent log-normal jitter of each ratio around a centre,
    /// renormalized so the largest ratio is 1.
    LogNormal {
        left: [f64; 4],
        right: [f64; 4],
        sigma: f64,
    },
}

impl RatioPrior {
    /// Weighted ratio draws: the support for discrete priors, `m` seeded
    /// draws with equal weights otherwise.
    pub fn draws(&self, m: usize, seed: u64) -> Result<Vec<(f64, [f64; 4], [f64; 4])>> {
        match self {
            RatioPrior::PointMass { left, right } => Ok(vec![(1.0, *left, *right)]),
            RatioPrior::Discrete(support) => {
                let total: f64 = support.iter().map(|s| s.0).sum();
                if support.is_empty() || !(total > 0.0) || support.iter().any(|s| s.0 < 0.0) {
                    return Err(Error::InvalidConfig("discrete ratio prior needs positive weights".into()));
                }
                Ok(support.iter().map(|&(w, l, r)| (w / total, l, r)).collect())
            }
            RatioPrior::LogNormal { left, right, sigma } => {
                if m == 0 {
                    return Err(Error::InvalidConfig("need at least one ratio draw".into()));
                }
                let mut rng = stream_rng(seed, 0);
                let mut jitter = |c: &[f64; 4]| -> Result<[f64; 4]> {
                    normalize_ratios(std::array::from_fn(|k| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        c[k] * (sigma * z).exp()
                    }))
                };
                (0..m)
                    .map(|_| Ok((1.0 / m as f64, jitter(left)?, jitter(right)?)))
                    .collect()
            }
        }
    }
}

/// `log Σ_i w_i L(D | s, k_i)` over explicit weighted ratio draws. The scales
/// (and ν) are taken from `s`; its own ratios are ignored.
pub fn marginal_log_likelihood_from(
    d: &CountRecord,
    s: &JointPoint,
    cfg: &ScenarioConfig,
    draws: &[(f64, [f64; 4], [f64; 4])],
) -> Result<f64> {
    let mut terms = Vec::with_capacity(draws.len());
    for &(w, l, r) in draws {
        let p = JointPoint {
            left: DetectorSide::new(l, s.left.scale())?,
            right: DetectorSide::new(r, s.right.scale())?,
            ..*s
        };
        terms.push(w.ln() + log_likelihood(d, &p, cfg)?);
    }
    let v = log_sum_exp(&terms);
    if v == f64::NEG_INFINITY {
        return Err(Error::DegeneratePrior);
    }
    Ok(v)
}

/// Log of the likelihood averaged over the ratio prior.
pub fn marginal_log_likelihood(
    d: &CountRecord,
    s: &JointPoint,
    cfg: &ScenarioConfig,
    prior: &RatioPrior,
    m: usize,
    seed: u64,
) -> Result<f64> {
    marginal_log_likelihood_from(d, s, cfg, &prior.draws(m, seed)?)
}
