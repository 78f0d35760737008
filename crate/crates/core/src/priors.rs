//! Prior densities, prior sampling and summary statistics.
//!
//! The state block is always uniform in the eight correlators, restricted to
//! the physical set. Scalar parameters (efficiency scales, ν) carry one of
//! `uniform01`, `beta(a, b)` or `gamma(shape, scale)`.

use rand::distr::{Distribution, Open01};
use rand::Rng;
use rand_distr::{Beta, Gamma};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::beta::{beta_reg, ln_beta};
use statrs::function::gamma::{gamma_lr, ln_gamma};

use crate::error::{Error, Result};
use crate::model::{
    CorrelationVector, DetectorSide, EfficiencyModel, JointPoint, NuMode, ScenarioConfig, STATE_DIM,
};
use crate::probability::is_physical;
use crate::rng::{stream_rng, BLOCK};

/// Prior attached to one parameter (or to the whole state block).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Prior {
    Uniform01,
    UniformStateConstrained,
    Beta { a: f64, b: f64 },
    Gamma { shape: f64, scale: f64 },
}

/// Alias used where only scalar tags are meaningful.
pub type ScalarPrior = Prior;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorStats {
    pub mean: f64,
    pub sd: f64,
    /// Shortest interval with the requested prior content.
    pub interval: (f64, f64),
}

impl Prior {
    pub fn validate(&self) -> Result<()> {
        let ok = |x: f64| x.is_finite() && x > 0.0;
        match *self {
            Prior::Beta { a, b } if !(ok(a) && ok(b)) => Err(Error::InvalidConfig(format!(
                "beta hyperparameters must be positive, got ({a}, {b})"
            ))),
            Prior::Gamma { shape, scale } if !(ok(shape) && ok(scale)) => Err(Error::InvalidConfig(
                format!("gamma hyperparameters must be positive, got ({shape}, {scale})"),
            )),
            _ => Ok(()),
        }
    }

    fn is_unit_interval(&self) -> bool {
        matches!(self, Prior::Uniform01 | Prior::Beta { .. })
    }

    /// Log density at `x`; `-∞` outside the support. With `normalized`
    /// false, constant factors are dropped.
    pub fn log_density(&self, x: f64, normalized: bool) -> f64 {
        match *self {
            Prior::Uniform01 => {
                if x > 0.0 && x < 1.0 {
                    0.0
                } else {
                    f64::NEG_INFINITY
                }
            }
            Prior::UniformStateConstrained => f64::NAN,
            Prior::Beta { a, b } => {
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                let v = (a - 1.0) * x.ln() + (b - 1.0) * (-x).ln_1p();
                if normalized {
                    v - ln_beta(a, b)
                } else {
                    v
                }
            }
            Prior::Gamma { shape, scale } => {
                if !(x > 0.0) || !x.is_finite() {
                    return f64::NEG_INFINITY;
                }
                let v = (shape - 1.0) * x.ln() - x / scale;
                if normalized {
                    v - ln_gamma(shape) - shape * scale.ln()
                } else {
                    v
                }
            }
        }
    }

    /// `d/dx log density`.
    pub fn log_density_derivative(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform01 | Prior::UniformStateConstrained => 0.0,
            Prior::Beta { a, b } => (a - 1.0) / x - (b - 1.0) / (1.0 - x),
            Prior::Gamma { shape, scale } => (shape - 1.0) / x - 1.0 / scale,
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Prior::Uniform01 => 0.5,
            Prior::UniformStateConstrained => f64::NAN,
            Prior::Beta { a, b } => a / (a + b),
            Prior::Gamma { shape, scale } => shape * scale,
        }
    }

    pub fn sd(&self) -> f64 {
        match *self {
            Prior::Uniform01 => (1.0f64 / 12.0).sqrt(),
            Prior::UniformStateConstrained => f64::NAN,
            Prior::Beta { a, b } => (a * b / ((a + b).powi(2) * (a + b + 1.0))).sqrt(),
            Prior::Gamma { shape, scale } => shape.sqrt() * scale,
        }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        match *self {
            Prior::Uniform01 => x.clamp(0.0, 1.0),
            Prior::UniformStateConstrained => f64::NAN,
            Prior::Beta { a, b } => {
                if x <= 0.0 {
                    0.0
                } else if x >= 1.0 {
                    1.0
                } else {
                    beta_reg(a, b, x)
                }
            }
            Prior::Gamma { shape, scale } => {
                if x <= 0.0 {
                    0.0
                } else {
                    gamma_lr(shape, x / scale)
                }
            }
        }
    }

    /// Inverse of [`Self::cdf`] by bisection followed by Newton polishing.
    pub fn quantile(&self, prob: f64) -> f64 {
        let (mut lo, mut hi) = match *self {
            Prior::Uniform01 => return prob.clamp(0.0, 1.0),
            Prior::UniformStateConstrained => return f64::NAN,
            Prior::Beta { .. } => (0.0, 1.0),
            Prior::Gamma { .. } => {
                let mut hi = self.mean() + 10.0 * self.sd();
                while self.cdf(hi) < prob {
                    hi *= 2.0;
                }
                (0.0, hi)
            }
        };
        if prob <= 0.0 {
            return lo;
        }
        if prob >= 1.0 {
            return hi;
        }
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < prob {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let mut x = 0.5 * (lo + hi);
        for _ in 0..4 {
            let pdf = self.log_density(x, true).exp();
            if pdf <= 0.0 || !pdf.is_finite() {
                break;
            }
            let next = x - (self.cdf(x) - prob) / pdf;
            if next > lo && next < hi {
                x = next;
            }
        }
        x
    }

    /// Mean, standard deviation and the shortest interval of content `gamma`.
    ///
    /// The interval is a window `[Q(t), Q(t + γ)]` on the quantile function;
    /// for unimodal densities the shortest one has equal density at both
    /// ends, and `t` is located by bisection on that condition.
    pub fn stats(&self, gamma: f64) -> Result<PriorStats> {
        if !(gamma > 0.0 && gamma < 1.0) {
            return Err(Error::InvalidConfig(format!("content {gamma} outside (0, 1)")));
        }
        if let Prior::UniformStateConstrained = self {
            return Err(Error::Unsupported(
                "the constrained state prior has no closed-form summary".into(),
            ));
        }
        self.validate()?;
        let interval = match *self {
            // Every window has the same width; report the central one.
            Prior::Uniform01 => (0.5 * (1.0 - gamma), 0.5 * (1.0 + gamma)),
            // Non-increasing densities: the window hugs the left end.
            Prior::Beta { a, b } if a <= 1.0 && b >= 1.0 => (0.0, self.quantile(gamma)),
            Prior::Gamma { shape, .. } if shape <= 1.0 => (0.0, self.quantile(gamma)),
            Prior::Beta { a, b } if b <= 1.0 && a >= 1.0 => (self.quantile(1.0 - gamma), 1.0),
            _ => {
            let mismatch = |t: f64| {
                self.log_density(self.quantile(t), true)
                    - self.log_density(self.quantile(t + gamma), true)
            };
            let (mut lo, mut hi) = (0.0, 1.0 - gamma);
            let t = if mismatch(lo) >= 0.0 {
                lo
            } else if mismatch(hi) <= 0.0 {
                hi
            } else {
                while hi - lo > 1e-14 {
                    let mid = 0.5 * (lo + hi);
                    if mismatch(mid) < 0.0 {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            (self.quantile(t), self.quantile(t + gamma))
            }
        };
        Ok(PriorStats {
            mean: self.mean(),
            sd: self.sd(),
            interval,
        })
    }

    /// One draw. Uniform draws avoid the endpoints.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Prior::Uniform01 => Open01.sample(rng),
            Prior::UniformStateConstrained => f64::NAN,
            Prior::Beta { a, b } => Beta::new(a, b).expect("validated").sample(rng),
            Prior::Gamma { shape, scale } => Gamma::new(shape, scale).expect("validated").sample(rng),
        }
    }
}

/// Summary statistics of one prior entry.
pub fn prior_stats(entry: &Prior, gamma: f64) -> Result<PriorStats> {
    entry.stats(gamma)
}

/// Priors for every parameter of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorSpec {
    #[serde(default = "default_state")]
    pub state: Prior,
    #[serde(default = "default_scalar")]
    pub eta_left: Prior,
    #[serde(default = "default_scalar")]
    pub eta_right: Prior,
    #[serde(default)]
    pub nu: Option<Prior>,
}

fn default_state() -> Prior {
    Prior::UniformStateConstrained
}

fn default_scalar() -> Prior {
    Prior::Uniform01
}

impl PriorSpec {
    /// Uniform in the state and in both efficiency scales, no ν prior.
    pub fn uniform() -> Self {
        Self {
            state: Prior::UniformStateConstrained,
            eta_left: Prior::Uniform01,
            eta_right: Prior::Uniform01,
            nu: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state != Prior::UniformStateConstrained {
            return Err(Error::InvalidConfig(
                "state prior must be uniform_state_constrained".into(),
            ));
        }
        for (name, p) in [("eta_left", self.eta_left), ("eta_right", self.eta_right)] {
            p.validate()?;
            if !p.is_unit_interval() {
                return Err(Error::InvalidConfig(format!(
                    "{name} prior must be uniform01 or beta"
                )));
            }
        }
        if let Some(nu) = self.nu {
            nu.validate()?;
            if !matches!(nu, Prior::Gamma { .. }) {
                return Err(Error::InvalidConfig("nu prior must be gamma".into()));
            }
        }
        Ok(())
    }
}

/// Sum of per-parameter log densities. The state block contributes 0 inside
/// the physical set and `-∞` outside (in both modes: the volume of the set is
/// not computed).
pub fn log_prior_density(p: &JointPoint, cfg: &ScenarioConfig, normalized: bool) -> f64 {
    if !is_physical(&p.state, cfg.tolerances.psd) {
        return f64::NEG_INFINITY;
    }
    let spec = &cfg.priors;
    let mut total = 0.0;
    match cfg.efficiencies {
        EfficiencyModel::FixedRatios => {
            total += spec.eta_left.log_density(p.left.scale(), normalized);
            total += spec.eta_right.log_density(p.right.scale(), normalized);
        }
        EfficiencyModel::Free => {
            for e in p.left.efficiencies() {
                total += spec.eta_left.log_density(e, normalized);
            }
            for e in p.right.efficiencies() {
                total += spec.eta_right.log_density(e, normalized);
            }
        }
    }
    if cfg.nu_mode == NuMode::Unknown {
        match (spec.nu, p.nu) {
            (Some(prior), Some(nu)) => total += prior.log_density(nu, normalized),
            _ => return f64::NEG_INFINITY,
        }
    }
    total
}

/// Log prior density of the scalar block and its gradient, in physical
/// coordinates. The state block is not included.
pub(crate) fn scalar_log_prior_and_grad(theta: &[f64], cfg: &ScenarioConfig) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; theta.len()];
    let mut value = 0.0;
    let m = cfg.side_dim();
    for (offset, prior) in [
        (cfg.left_offset(), cfg.priors.eta_left),
        (cfg.right_offset(), cfg.priors.eta_right),
    ] {
        for i in offset..offset + m {
            value += prior.log_density(theta[i], false);
            grad[i] = prior.log_density_derivative(theta[i]);
        }
    }
    if let (Some(i), Some(prior)) = (cfg.nu_index(), cfg.priors.nu) {
        value += prior.log_density(theta[i], false);
        grad[i] = prior.log_density_derivative(theta[i]);
    }
    (value, grad)
}

/// Prior draws and the acceptance rate of the state-block rejection step.
#[derive(Debug, Clone)]
pub struct PriorDraws {
    pub points: Vec<JointPoint>,
    pub state_acceptance: f64,
}

/// Uniform draw from the physical state set by rejection from `[-1, 1]⁸`.
/// Returns the state and the number of candidates used.
pub fn sample_state<R: Rng + ?Sized>(rng: &mut R) -> (CorrelationVector, usize) {
    let mut tries = 0;
    loop {
        tries += 1;
        let q: [f64; STATE_DIM] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
        let q = CorrelationVector::from_array(q);
        // Strict positivity: boundary draws have probability zero anyway and
        // must stay invertible for the unconstrained map.
        if is_physical(&q, 0.0) {
            return (q, tries);
        }
    }
}

fn sample_side<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &ScenarioConfig,
    prior: &Prior,
    ratios: [f64; 4],
) -> DetectorSide {
    match cfg.efficiencies {
        EfficiencyModel::FixedRatios => {
            DetectorSide::new(ratios, prior.sample(rng)).expect("prior draw in (0, 1)")
        }
        EfficiencyModel::Free => {
            let eff: [f64; 4] = std::array::from_fn(|_| prior.sample(rng));
            DetectorSide::from_efficiencies(eff).expect("prior draw in (0, 1)")
        }
    }
}

/// `n` independent prior draws, deterministic for a fixed seed regardless of
/// the number of worker threads.
pub fn sample_prior(cfg: &ScenarioConfig, n: usize, seed: u64) -> PriorDraws {
    let blocks = n.div_ceil(BLOCK);
    let parts: Vec<(Vec<JointPoint>, usize)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let count = BLOCK.min(n - b * BLOCK);
            let mut tries = 0;
            let points = (0..count)
                .map(|_| {
                    let (state, t) = sample_state(&mut rng);
                    tries += t;
                    let left = sample_side(&mut rng, cfg, &cfg.priors.eta_left, cfg.ratios_left);
                    let right = sample_side(&mut rng, cfg, &cfg.priors.eta_right, cfg.ratios_right);
                    let nu = match cfg.nu_mode {
                        NuMode::Known { .. } => None,
                        NuMode::Unknown => Some(cfg.priors.nu.expect("validated").sample(&mut rng)),
                    };
                    JointPoint {
                        state,
                        left,
                        right,
                        nu,
                    }
                })
                .collect();
            (points, tries)
        })
        .collect();
    let tries: usize = parts.iter().map(|p| p.1).sum();
    let points: Vec<JointPoint> = parts.into_iter().flat_map(|p| p.0).collect();
    PriorDraws {
        state_acceptance: if tries == 0 { 0.0 } else { points.len() as f64 / tries as f64 },
        points,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probability::min_eigenvalue;
    use rand::SeedableRng;

    /// Composite Simpson rule on `[a, b]` with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn uniform_density_is_flat() {
        for x in [1e-6, 0.3, 0.5, 0.999] {
            assert_eq!(Prior::Uniform01.log_density(x, true), 0.0);
        }
        assert_eq!(Prior::Uniform01.log_density(1.5, true), f64::NEG_INFINITY);
    }

    #[test]
    fn beta_density_matches_quadrature() {
        let p = Prior::Beta { a: 56.0, b: 16.0 };
        let z = simpson(|x| p.log_density(x, false).exp(), 0.0, 1.0, 20_000);
        let x = 7.0 / 9.0;
        let expected = p.log_density(x, false) - z.ln();
        assert!((p.log_density(x, true) - expected).abs() < 1e-10);
        let total = simpson(|x| p.log_density(x, true).exp(), 0.0, 1.0, 20_000);
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn gamma_density_matches_quadrature() {
        let p = Prior::Gamma {
            shape: 100.0,
            scale: 5000.0,
        };
        // Density is negligible outside [1e5, 1.2e6]; shift by the value at
        // the mean to keep the integrand representable.
        let shift = p.log_density(p.mean(), false);
        let z = simpson(|x| (p.log_density(x, false) - shift).exp(), 1e5, 1.2e6, 200_000);
        let x = 500_000.0;
        let expected = p.log_density(x, false) - shift - z.ln();
        assert!((p.log_density(x, true) - expected).abs() < 1e-9);
        let total = simpson(|x| p.log_density(x, true).exp(), 1e5, 1.2e6, 200_000);
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn small_beta_integrates_to_one() {
        let p = Prior::Beta { a: 1.5, b: 8001.0 };
        // Substitute x = y^2 to remove the square-root cusp at zero.
        let total = simpson(|y| 2.0 * y * p.log_density(y * y, true).exp(), 0.0, 0.1, 200_000);
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn quantile_inverts_cdf() {
        for p in [
            Prior::Beta { a: 56.0, b: 16.0 },
            Prior::Beta { a: 1.5, b: 8001.0 },
            Prior::Gamma {
                shape: 100.0,
                scale: 5000.0,
            },
        ] {
            for t in [1e-4, 0.01, 0.3, 0.5, 0.97] {
                let x = p.quantile(t);
                assert!((p.cdf(x) - t).abs() < 1e-12, "{p:?} {t}");
            }
        }
    }

    #[test]
    fn state_prior_has_no_summary() {
        assert!(matches!(
            prior_stats(&Prior::UniformStateConstrained, 0.95),
            Err(Error::Unsupported(_))
        ));
    }

    #[test]
    fn shortest_interval_has_equal_density_ends() {
        let p = Prior::Beta { a: 56.0, b: 16.0 };
        let s = p.stats(0.95).unwrap();
        let (lo, hi) = s.interval;
        assert!((p.cdf(hi) - p.cdf(lo) - 0.95).abs() < 1e-10);
        assert!((p.log_density(lo, true) - p.log_density(hi, true)).abs() < 1e-6);
        // Any shifted window is wider.
        for dt in [-1e-3, 1e-3] {
            let t = p.cdf(lo) + dt;
            assert!(p.quantile(t + 0.95) - p.quantile(t) > hi - lo);
        }
    }

    #[test]
    fn monotone_density_interval_starts_at_zero() {
        let p = Prior::Beta { a: 0.5, b: 3.0 };
        let s = p.stats(0.9).unwrap();
        assert_eq!(s.interval.0, 0.0);
        assert!((p.cdf(s.interval.1) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn sampled_moments_converge() {
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(11);
        let n = 100_000;
        let u: f64 = (0..n).map(|_| Prior::Uniform01.sample(&mut rng)).sum::<f64>() / n as f64;
        assert!((u - 0.5).abs() < 0.005);
        let p = Prior::Beta { a: 56.0, b: 16.0 };
        let m: f64 = (0..n).map(|_| p.sample(&mut rng)).sum::<f64>() / n as f64;
        let sem = p.sd() / (n as f64).sqrt();
        assert!((m - 7.0 / 9.0).abs() < 3.0 * sem, "{m}");
    }

    #[test]
    fn prior_draws_are_physical_and_reproducible() {
        let cfg = ScenarioConfig::known_nu(50.0, [1.0; 4], [1.0; 4]).unwrap();
        let a = sample_prior(&cfg, 3000, 5);
        let b = sample_prior(&cfg, 3000, 5);
        assert_eq!(a.points, b.points);
        assert!(a.points.iter().all(|p| min_eigenvalue(&p.state) > 0.0));
        assert!(a.state_acceptance > 0.0 && a.state_acceptance < 1.0);
    }

    #[test]
    fn acceptance_matches_independent_hit_or_miss() {
        let cfg = ScenarioConfig::known_nu(50.0, [1.0; 4], [1.0; 4]).unwrap();
        let draws = sample_prior(&cfg, 20_000, 3);
        // Independent estimate of the physical volume fraction of [-1, 1]^8,
        // using the dense eigenvalue test instead of the Cholesky shortcut.
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(99);
        let n = 400_000;
        let hits = (0..n)
            .filter(|_| {
                let q: [f64; 8] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
                min_eigenvalue(&CorrelationVector::from_array(q)) > 0.0
            })
            .count();
        let frac = hits as f64 / n as f64;
        let sd = (frac * (1.0 - frac) / n as f64).sqrt()
            + (frac * (1.0 - frac) / (draws.points.len() as f64 / frac)).sqrt();
        assert!(
            (draws.state_acceptance - frac).abs() < 4.0 * sd,
            "{} vs {frac}",
            draws.state_acceptance
        );
    }
}
