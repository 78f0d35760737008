//! Joint parameter space: the eight measurable two-qubit correlators, the
//! per-side detector efficiencies and (optionally) the mean pair number.
//!
//! Two coordinate systems are used throughout the crate:
//!
//! * **physical** coordinates `θ = (q₁..q₈, e_left.., e_right.., ν?)`, where
//!   the efficiency block per side is either the single scale `η_max`
//!   (fixed ratios) or the four per-detector efficiencies (free model);
//! * **unconstrained** coordinates `u ∈ ℝᵈ` used by the optimizer and the
//!   sampler: `q = tanh u`, `η = 1/(1+e⁻ᵘ)`, `ν = ν_ref·eᵘ`.
//!
//! The box constraints hold by construction in unconstrained coordinates;
//! positivity of the two-qubit completion is *not* enforced by the map and is
//! checked by [`crate::probability::physicality_check`].

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::priors::PriorSpec;

/// Smallest eigenvalue accepted for the y-zeroed completion matrix.
pub const TOL_PSD: f64 = 1e-9;

/// Number of measurable state parameters.
pub const STATE_DIM: usize = 8;

/// Identifies one of the eight correlators.
///
/// Order matches the reporting convention: second-slot singles, first-slot
/// singles, then the four two-body correlators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Bx,
    Bz,
    Ax,
    Az,
    Cxx,
    Cxz,
    Czx,
    Czz,
}

impl Field {
    pub const ALL: [Field; STATE_DIM] = [
        Field::Bx,
        Field::Bz,
        Field::Ax,
        Field::Az,
        Field::Cxx,
        Field::Cxz,
        Field::Czx,
        Field::Czz,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Bx => "b_x",
            Field::Bz => "b_z",
            Field::Ax => "a_x",
            Field::Az => "a_z",
            Field::Cxx => "c_xx",
            Field::Cxz => "c_xz",
            Field::Czx => "c_zx",
            Field::Czz => "c_zz",
        }
    }

    /// Expectation-value label, first tensor slot = left apparatus.
    pub fn label(self) -> &'static str {
        match self {
            Field::Bx => "<1 x sx>",
            Field::Bz => "<1 x sz>",
            Field::Ax => "<sx x 1>",
            Field::Az => "<sz x 1>",
            Field::Cxx => "<sx x sx>",
            Field::Cxz => "<sx x sz>",
            Field::Czx => "<sz x sx>",
            Field::Czz => "<sz x sz>",
        }
    }

    /// Position `(row, col)` in the 3×3 state tensor, basis order `(1, σx, σz)`,
    /// row = left (first slot), column = right (second slot).
    pub fn tensor_position(self) -> (usize, usize) {
        match self {
            Field::Bx => (0, 1),
            Field::Bz => (0, 2),
            Field::Ax => (1, 0),
            Field::Az => (2, 0),
            Field::Cxx => (1, 1),
            Field::Cxz => (1, 2),
            Field::Czx => (2, 1),
            Field::Czz => (2, 2),
        }
    }

    /// The field obtained by exchanging the two tensor slots.
    pub fn swapped(self) -> Field {
        match self {
            Field::Bx => Field::Ax,
            Field::Bz => Field::Az,
            Field::Ax => Field::Bx,
            Field::Az => Field::Bz,
            Field::Cxx => Field::Cxx,
            Field::Cxz => Field::Czx,
            Field::Czx => Field::Cxz,
            Field::Czz => Field::Czz,
        }
    }
}

impl fmt::Display for Field {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Field {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Field::ALL
            .iter()
            .copied()
            .find(|f| f.name() == s || f.name().replace('_', "") == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown state field `{s}`")))
    }
}

/// The eight Pauli expectation values accessible to the crosshair measurement.
///
/// `a_*` belong to the first tensor slot (left apparatus), `b_*` to the second
/// (right apparatus).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CorrelationVector {
    pub b_x: f64,
    pub b_z: f64,
    pub a_x: f64,
    pub a_z: f64,
    pub c_xx: f64,
    pub c_xz: f64,
    pub c_zx: f64,
    pub c_zz: f64,
}

impl CorrelationVector {
    /// The maximally mixed state.
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_array(v: [f64; STATE_DIM]) -> Self {
        Self {
            b_x: v[0],
            b_z: v[1],
            a_x: v[2],
            a_z: v[3],
            c_xx: v[4],
            c_xz: v[5],
            c_zx: v[6],
            c_zz: v[7],
        }
    }

    pub fn to_array(&self) -> [f64; STATE_DIM] {
        [
            self.b_x, self.b_z, self.a_x, self.a_z, self.c_xx, self.c_xz, self.c_zx, self.c_zz,
        ]
    }

    pub fn get(&self, field: Field) -> f64 {
        self.to_array()[field.index()]
    }

    pub fn with(&self, field: Field, value: f64) -> Self {
        let mut a = self.to_array();
        a[field.index()] = value;
        Self::from_array(a)
    }

    /// Exchange the roles of the two tensor slots.
    pub fn swapped(&self) -> Self {
        let mut out = [0.0; STATE_DIM];
        for f in Field::ALL {
            out[f.swapped().index()] = self.get(f);
        }
        Self::from_array(out)
    }

    /// 3×3 tensor `T[i][j] = ⟨σᵢ⊗σⱼ⟩` in the basis `(1, σx, σz)`, `T[0][0] = 1`.
    pub fn tensor(&self) -> [[f64; 3]; 3] {
        [
            [1.0, self.b_x, self.b_z],
            [self.a_x, self.c_xx, self.c_xz],
            [self.a_z, self.c_zx, self.c_zz],
        ]
    }
}

/// Efficiencies of the four detectors on one side: precalibrated ratios times
/// a common scale `η_max`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorSide {
    ratios: [f64; 4],
    scale: f64,
}

impl DetectorSide {
    /// `ratios` must lie in (0, 1] with maximum exactly 1; `scale` in [0, 1].
    pub fn new(ratios: [f64; 4], scale: f64) -> Result<Self> {
        validate_ratios(&ratios)?;
        if !(0.0..=1.0).contains(&scale) {
            return Err(Error::InvalidDetector(format!(
                "efficiency scale {scale} outside [0, 1]"
            )));
        }
        Ok(Self { ratios, scale })
    }

    /// Ratios are divided by their maximum first.
    pub fn from_unnormalized_ratios(raw: [f64; 4], scale: f64) -> Result<Self> {
        Self::new(normalize_ratios(raw)?, scale)
    }

    /// Builds a side from four independent per-detector efficiencies.
    pub fn from_efficiencies(eff: [f64; 4]) -> Result<Self> {
        if eff.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidDetector(format!(
                "efficiencies {eff:?} outside [0, 1]"
            )));
        }
        let scale = eff.iter().copied().fold(0.0, f64::max);
        if scale == 0.0 {
            return Self::new([1.0; 4], 0.0);
        }
        let ratios = eff.map(|e| e / scale);
        // Guard against the maximum being off by an ulp after division.
        let ratios = normalize_ratios(ratios)?;
        Self::new(ratios, scale)
    }

    /// Four perfect detectors with the given scale.
    pub fn uniform(scale: f64) -> Result<Self> {
        Self::new([1.0; 4], scale)
    }

    pub fn ratios(&self) -> [f64; 4] {
        self.ratios
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn with_scale(&self, scale: f64) -> Result<Self> {
        Self::new(self.ratios, scale)
    }

    /// Per-detector efficiencies `η_k = η_max · r_k`.
    pub fn efficiencies(&self) -> [f64; 4] {
        self.ratios.map(|r| self.scale * r)
    }
}

fn validate_ratios(r: &[f64; 4]) -> Result<()> {
    if r.iter().any(|x| !x.is_finite() || *x <= 0.0 || *x > 1.0) {
        return Err(Error::InvalidDetector(format!(
            "ratios {r:?} must lie in (0, 1]"
        )));
    }
    if r.iter().copied().fold(0.0, f64::max) != 1.0 {
        return Err(Error::InvalidDetector(format!(
            "ratios {r:?} must have maximum exactly 1"
        )));
    }
    Ok(())
}

/// Divides by the maximum so that the largest ratio is exactly 1.
pub fn normalize_ratios(raw: [f64; 4]) -> Result<[f64; 4]> {
    let max = raw.iter().copied().fold(0.0, f64::max);
    if raw.iter().any(|x| !x.is_finite() || *x <= 0.0) {
        return Err(Error::InvalidDetector(format!(
            "ratios {raw:?} must be positive"
        )));
    }
    let mut out = raw.map(|x| x / max);
    // Force the argmax to exactly one.
    let imax = raw
        .iter()
        .enumerate()
        .fold(0, |best, (i, x)| if *x > raw[best] { i } else { best });
    out[imax] = 1.0;
    Ok(out.map(|x| x.min(1.0)))
}

/// A point in the joint state/device space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointPoint {
    pub state: CorrelationVector,
    pub left: DetectorSide,
    pub right: DetectorSide,
    /// Mean pair number per data-taking period.
    pub nu: Option<f64>,
}

impl JointPoint {
    pub fn new(
        state: CorrelationVector,
        left: DetectorSide,
        right: DetectorSide,
        nu: Option<f64>,
    ) -> Result<Self> {
        if let Some(nu) = nu {
            if !(nu.is_finite() && nu > 0.0) {
                return Err(Error::InvalidConfig(format!("nu must be positive, got {nu}")));
            }
        }
        Ok(Self {
            state,
            left,
            right,
            nu,
        })
    }

    /// The eight per-detector efficiencies, left side first.
    pub fn efficiencies(&self) -> [f64; 8] {
        let l = self.left.efficiencies();
        let r = self.right.efficiencies();
        [l[0], l[1], l[2], l[3], r[0], r[1], r[2], r[3]]
    }

    /// The mean pair number to use with `cfg`: the fixed value for known-ν
    /// scenarios, the point's own value otherwise.
    pub fn effective_nu(&self, cfg: &ScenarioConfig) -> Result<f64> {
        match cfg.nu_mode {
            NuMode::Known { nu } => Ok(nu),
            NuMode::Unknown => self
                .nu
                .ok_or_else(|| Error::InvalidConfig("point carries no nu in unknown-nu mode".into())),
        }
    }
}

/// Whether the mean pair number is a fixed constant or a free parameter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NuMode {
    Known { nu: f64 },
    Unknown,
}

/// How the eight detector efficiencies are parametrized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EfficiencyModel {
    /// Precalibrated ratios, one unknown scale per side.
    #[default]
    FixedRatios,
    /// All eight efficiencies free.
    Free,
}

/// Hamiltonian Monte Carlo and Monte Carlo integration settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSettings {
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub chains: usize,
    /// Post-warm-up draws per chain.
    pub draws: usize,
    pub target_accept: f64,
    /// Number of direct prior draws for size curves.
    pub prior_samples: usize,
    pub bootstrap: usize,
    pub grid_points: usize,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        Self {
            leapfrog_steps: 20,
            warmup: 1000,
            chains: 8,
            draws: 1000,
            target_accept: 0.8,
            prior_samples: 100_000,
            bootstrap: 200,
            grid_points: 400,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Smallest admissible eigenvalue of the completion matrix (as `-psd`).
    pub psd: f64,
    /// Gradient norm at which a maximum-likelihood fit is declared converged.
    pub gradient: f64,
    /// Clustering radius for multi-start results, unconstrained coordinates.
    pub cluster: f64,
    pub max_iterations: usize,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self {
            psd: TOL_PSD,
            gradient: 1e-8,
            cluster: 1e-2,
            max_iterations: 500,
        }
    }
}

/// Everything that fixes the statistical model apart from the data.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    pub nu_mode: NuMode,
    /// `ν` at unconstrained coordinate zero.
    pub nu_reference: f64,
    pub efficiencies: EfficiencyModel,
    pub ratios_left: [f64; 4],
    pub ratios_right: [f64; 4],
    pub priors: PriorSpec,
    pub sampler: SamplerSettings,
    pub tolerances: Tolerances,
}

impl ScenarioConfig {
    /// Known-ν scenario with uniform priors and default settings.
    pub fn known_nu(nu: f64, ratios_left: [f64; 4], ratios_right: [f64; 4]) -> Result<Self> {
        let cfg = Self {
            nu_mode: NuMode::Known { nu },
            nu_reference: 1.0,
            efficiencies: EfficiencyModel::FixedRatios,
            ratios_left,
            ratios_right,
            priors: PriorSpec::uniform(),
            sampler: SamplerSettings::default(),
            tolerances: Tolerances::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Unknown-ν scenario; `priors.nu` must be set.
    pub fn unknown_nu(ratios_left: [f64; 4], ratios_right: [f64; 4], priors: PriorSpec) -> Result<Self> {
        let nu_reference = priors.nu.map(|p| p.mean()).unwrap_or(1.0);
        let cfg = Self {
            nu_mode: NuMode::Unknown,
            nu_reference,
            efficiencies: EfficiencyModel::FixedRatios,
            ratios_left,
            ratios_right,
            priors,
            sampler: SamplerSettings::default(),
            tolerances: Tolerances::default(),
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_free_efficiencies(mut self) -> Self {
        self.efficiencies = EfficiencyModel::Free;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if let NuMode::Known { nu } = self.nu_mode {
            if !(nu.is_finite() && nu > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "known-nu mode requires nu > 0, got {nu}"
                )));
            }
        }
        if !(self.nu_reference.is_finite() && self.nu_reference > 0.0) {
            return Err(Error::InvalidConfig("nu_reference must be positive".into()));
        }
        validate_ratios(&self.ratios_left)?;
        validate_ratios(&self.ratios_right)?;
        self.priors.validate()?;
        if self.nu_mode == NuMode::Unknown && self.priors.nu.is_none() {
            return Err(Error::InvalidConfig(
                "unknown-nu mode requires a prior for nu".into(),
            ));
        }
        if self.sampler.chains == 0 || self.sampler.leapfrog_steps == 0 {
            return Err(Error::InvalidConfig("sampler needs chains >= 1 and leapfrog_steps >= 1".into()));
        }
        if !(self.sampler.target_accept > 0.0 && self.sampler.target_accept < 1.0) {
            return Err(Error::InvalidConfig("target_accept must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Number of efficiency coordinates per side.
    pub fn side_dim(&self) -> usize {
        match self.efficiencies {
            EfficiencyModel::FixedRatios => 1,
            EfficiencyModel::Free => 4,
        }
    }

    pub fn has_free_nu(&self) -> bool {
        self.nu_mode == NuMode::Unknown
    }

    /// Dimension of the physical and unconstrained coordinate vectors.
    pub fn dim(&self) -> usize {
        STATE_DIM + 2 * self.side_dim() + usize::from(self.has_free_nu())
    }

    /// Index of the first left-efficiency coordinate.
    pub fn left_offset(&self) -> usize {
        STATE_DIM
    }

    pub fn right_offset(&self) -> usize {
        STATE_DIM + self.side_dim()
    }

    /// Index of the ν coordinate, if free.
    pub fn nu_index(&self) -> Option<usize> {
        self.has_free_nu().then(|| STATE_DIM + 2 * self.side_dim())
    }

    /// Kind of each coordinate, in order.
    pub fn coordinate_kinds(&self) -> Vec<CoordKind> {
        let mut kinds = vec![CoordKind::Correlator; STATE_DIM];
        kinds.extend(std::iter::repeat_n(CoordKind::Efficiency, 2 * self.side_dim()));
        if self.has_free_nu() {
            kinds.push(CoordKind::MeanNumber);
        }
        kinds
    }

    /// Human-readable coordinate names, in order.
    pub fn coordinate_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Field::ALL.iter().map(|f| f.name().to_string()).collect();
        match self.efficiencies {
            EfficiencyModel::FixedRatios => {
                names.push("eta_left".into());
                names.push("eta_right".into());
            }
            EfficiencyModel::Free => {
                names.extend((1..=4).map(|k| format!("eta_left_{k}")));
                names.extend((1..=4).map(|k| format!("eta_right_{k}")));
            }
        }
        if self.has_free_nu() {
            names.push("nu".into());
        }
        names
    }

    /// Physical coordinate vector `θ` of a point.
    pub fn physical_vector(&self, p: &JointPoint) -> Result<Vec<f64>> {
        let mut theta = Vec::with_capacity(self.dim());
        theta.extend_from_slice(&p.state.to_array());
        match self.efficiencies {
            EfficiencyModel::FixedRatios => {
                theta.push(p.left.scale());
                theta.push(p.right.scale());
            }
            EfficiencyModel::Free => {
                theta.extend_from_slice(&p.left.efficiencies());
                theta.extend_from_slice(&p.right.efficiencies());
            }
        }
        if self.has_free_nu() {
            theta.push(p.nu.ok_or_else(|| {
                Error::InvalidConfig("point carries no nu in unknown-nu mode".into())
            })?);
        }
        Ok(theta)
    }

    /// Inverse of [`Self::physical_vector`].
    pub fn point_from_physical(&self, theta: &[f64]) -> Result<JointPoint> {
        check_vector(theta, self.dim())?;
        let mut q = [0.0; STATE_DIM];
        q.copy_from_slice(&theta[..STATE_DIM]);
        let (left, right) = match self.efficiencies {
            EfficiencyModel::FixedRatios => (
                DetectorSide::new(self.ratios_left, theta[STATE_DIM])?,
                DetectorSide::new(self.ratios_right, theta[STATE_DIM + 1])?,
            ),
            EfficiencyModel::Free => {
                let mut l = [0.0; 4];
                let mut r = [0.0; 4];
                l.copy_from_slice(&theta[STATE_DIM..STATE_DIM + 4]);
                r.copy_from_slice(&theta[STATE_DIM + 4..STATE_DIM + 8]);
                (DetectorSide::from_efficiencies(l)?, DetectorSide::from_efficiencies(r)?)
            }
        };
        let nu = self.nu_index().map(|i| theta[i]);
        JointPoint::new(CorrelationVector::from_array(q), left, right, nu)
    }

    /// Maps a strictly interior point to unconstrained coordinates.
    pub fn to_unconstrained(&self, p: &JointPoint) -> Result<Vec<f64>> {
        let theta = self.physical_vector(p)?;
        let names = self.coordinate_names();
        self.coordinate_kinds()
            .iter()
            .zip(theta.iter())
            .zip(names.iter())
            .map(|((kind, &x), name)| {
                kind.forward(x, self.nu_reference).ok_or_else(|| Error::Boundary {
                    coordinate: name.clone(),
                    value: x,
                })
            })
            .collect()
    }

    /// Maps unconstrained coordinates back to a point. Box constraints hold by
    /// construction; positivity of the state is not checked.
    pub fn from_unconstrained(&self, v: &[f64]) -> Result<JointPoint> {
        let theta = self.physical_from_unconstrained(v)?;
        self.point_from_physical(&theta)
    }

    pub fn physical_from_unconstrained(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_vector(v, self.dim())?;
        Ok(self
            .coordinate_kinds()
            .iter()
            .zip(v)
            .map(|(kind, &u)| kind.inverse(u, self.nu_reference))
            .collect())
    }
}

fn check_vector(v: &[f64], dim: usize) -> Result<()> {
    if v.len() != dim {
        return Err(Error::Dimension {
            expected: dim,
            found: v.len(),
        });
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::NonFinite { index });
    }
    Ok(())
}

/// The scalar bijection attached to each coordinate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    /// `(-1, 1) → ℝ`, `u = atanh q`.
    Correlator,
    /// `(0, 1) → ℝ`, `u = logit η`.
    Efficiency,
    /// `(0, ∞) → ℝ`, `u = ln(ν/ν_ref)`.
    MeanNumber,
}

impl CoordKind {
    /// Physical → unconstrained; `None` on or outside the boundary.
    pub fn forward(self, x: f64, nu_ref: f64) -> Option<f64> {
        if !x.is_finite() {
            return None;
        }
        match self {
            CoordKind::Correlator => (x.abs() < 1.0).then(|| x.atanh()),
            CoordKind::Efficiency => (x > 0.0 && x < 1.0).then(|| (x / (1.0 - x)).ln()),
            CoordKind::MeanNumber => (x > 0.0).then(|| (x / nu_ref).ln()),
        }
    }

    /// Unconstrained → physical.
    pub fn inverse(self, u: f64, nu_ref: f64) -> f64 {
        match self {
            CoordKind::Correlator => u.tanh(),
            CoordKind::Efficiency => logistic(u),
            CoordKind::MeanNumber => nu_ref * u.exp(),
        }
    }

    /// First and second derivatives of the inverse map, expressed through the
    /// physical value `x`.
    pub fn derivatives(self, x: f64) -> (f64, f64) {
        match self {
            CoordKind::Correlator => {
                let d = 1.0 - x * x;
                (d, -2.0 * x * d)
            }
            CoordKind::Efficiency => {
                let d = x * (1.0 - x);
                (d, d * (1.0 - 2.0 * x))
            }
            CoordKind::MeanNumber => (x, x),
        }
    }

    /// `ln |dx/du|` and its derivative with respect to `u`.
    pub fn log_jacobian(self, x: f64) -> (f64, f64) {
        match self {
            CoordKind::Correlator => ((1.0 - x * x).ln(), -2.0 * x),
            CoordKind::Efficiency => ((x * (1.0 - x)).ln(), 1.0 - 2.0 * x),
            CoordKind::MeanNumber => (x.ln(), 1.0),
        }
    }
}

/// Numerically safe logistic function.
pub fn logistic(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Maps a point to unconstrained coordinates (dimension 10/11 for fixed
/// ratios, 16/17 for free efficiencies).
pub fn to_unconstrained(p: &JointPoint, cfg: &ScenarioConfig) -> Result<Vec<f64>> {
    cfg.to_unconstrained(p)
}

/// Inverse of [`to_unconstrained`].
pub fn from_unconstrained(v: &[f64], cfg: &ScenarioConfig) -> Result<JointPoint> {
    cfg.from_unconstrained(v)
}

/// A scalar coordinate that can be varied in a two-dimensional slice.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    State(Field),
    EtaLeft,
    EtaRight,
    Nu,
}

impl Coordinate {
    pub fn name(self) -> String {
        match self {
            Coordinate::State(f) => f.name().to_string(),
            Coordinate::EtaLeft => "eta_left".into(),
            Coordinate::EtaRight => "eta_right".into(),
            Coordinate::Nu => "nu".into(),
        }
    }

    pub fn get(self, p: &JointPoint) -> Option<f64> {
        match self {
            Coordinate::State(f) => Some(p.state.get(f)),
            Coordinate::EtaLeft => Some(p.left.scale()),
            Coordinate::EtaRight => Some(p.right.scale()),
            Coordinate::Nu => p.nu,
        }
    }

    pub fn set(self, p: &JointPoint, value: f64) -> Result<JointPoint> {
        let mut out = *p;
        match self {
            Coordinate::State(f) => out.state = p.state.with(f, value),
            Coordinate::EtaLeft => out.left = p.left.with_scale(value)?,
            Coordinate::EtaRight => out.right = p.right.with_scale(value)?,
            Coordinate::Nu => {
                if !(value > 0.0) {
                    return Err(Error::InvalidConfig(format!("nu must be positive, got {value}")));
                }
                out.nu = Some(value)
            }
        }
        Ok(out)
    }

    pub fn kind(self) -> CoordKind {
        match self {
            Coordinate::State(_) => CoordKind::Correlator,
            Coordinate::EtaLeft | Coordinate::EtaRight => CoordKind::Efficiency,
            Coordinate::Nu => CoordKind::MeanNumber,
        }
    }
}

impl FromStr for Coordinate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "eta_left" => Ok(Coordinate::EtaLeft),
            "eta_right" => Ok(Coordinate::EtaRight),
            "nu" => Ok(Coordinate::Nu),
            other => other.parse().map(Coordinate::State),
        }
    }
}
