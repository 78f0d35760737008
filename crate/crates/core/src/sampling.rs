//! Prior and posterior sample sets in the joint space.
//!
//! Prior draws come straight from the priors module. Posterior draws come
//! from Hamiltonian Monte Carlo in unconstrained coordinates with a diagonal
//! mass matrix and dual-averaged step size; non-physical states have
//! infinite potential and are rejected.

use std::io::Write;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::best_ml;
use crate::likelihood::{CountRecord, LogLikelihood};
use crate::model::{CoordKind, CorrelationVector, JointPoint, ScenarioConfig, STATE_DIM};
use crate::priors::{sample_prior, scalar_log_prior_and_grad};
use crate::probability::is_physical;
use crate::rng::stream_rng;

/// Fewest draws accepted by the sampling entry points.
pub const MIN_SAMPLES: usize = 1000;
/// Starts used to locate the likelihood maximum that anchors the λ values.
const FIT_STARTS: usize = 8;
/// Energy error beyond which a trajectory counts as divergent.
const DIVERGENCE: f64 = 1000.0;
/// R̂ above this flags the run.
pub const RHAT_LIMIT: f64 = 1.05;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    PriorDirect,
    PosteriorHmc,
}

impl Provenance {
    pub fn name(self) -> &'static str {
        match self {
            Provenance::PriorDirect => "prior-direct",
            Provenance::PosteriorHmc => "posterior-hmc",
        }
    }
}

/// Draws with their log-likelihoods and likelihood ratios to the maximum.
#[derive(Debug, Clone)]
pub struct SampleSet {
    pub points: Vec<JointPoint>,
    pub log_likelihoods: Vec<f64>,
    /// `ln λ_i = logL_i − logL_max`, never positive.
    pub log_lambdas: Vec<f64>,
    pub log_l_max: f64,
    pub provenance: Provenance,
    pub seed: u64,
    /// Chain index of every draw; all zero for direct prior draws.
    pub chain: Vec<usize>,
    pub chains: usize,
}

impl SampleSet {
    /// Builds a set from evaluated draws. The reference maximum is raised to
    /// the largest draw if needed, so every λ stays in `[0, 1]`.
    pub fn from_evaluated(
        points: Vec<JointPoint>,
        log_likelihoods: Vec<f64>,
        log_l_max: f64,
        provenance: Provenance,
        seed: u64,
        chain: Vec<usize>,
    ) -> Self {
        assert_eq!(points.len(), log_likelihoods.len());
        assert_eq!(points.len(), chain.len());
        let log_l_max = log_likelihoods.iter().copied().fold(log_l_max, f64::max);
        let log_lambdas = log_likelihoods.iter().map(|l| (l - log_l_max).min(0.0)).collect();
        let chains = chain.iter().max().map_or(0, |c| c + 1);
        Self {
            points,
            log_likelihoods,
            log_lambdas,
            log_l_max,
            provenance,
            seed,
            chain,
            chains,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn lambda(&self, i: usize) -> f64 {
        self.log_lambdas[i].exp()
    }

    pub fn lambdas(&self) -> Vec<f64> {
        self.log_lambdas.iter().map(|l| l.exp()).collect()
    }

    /// The same draws measured against another reference maximum, which
    /// must not lie below any draw.
    pub fn rebased(&self, log_l_max: f64) -> Self {
        Self::from_evaluated(
            self.points.clone(),
            self.log_likelihoods.clone(),
            log_l_max,
            self.provenance,
            self.seed,
            self.chain.clone(),
        )
    }

    /// One row per draw: physical coordinates, logL and λ.
    pub fn write_columns<W: Write>(&self, cfg: &ScenarioConfig, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# provenance={} seed={} chains={} draws={} log_l_max={:.10e}",
            self.provenance.name(),
            self.seed,
            self.chains,
            self.len(),
            self.log_l_max
        )?;
        let mut header = cfg.coordinate_names();
        header.extend(["log_l".to_string(), "lambda".to_string()]);
        writeln!(w, "{}", header.join(" "))?;
        for (i, p) in self.points.iter().enumerate() {
            let row: Vec<String> = cfg
                .physical_vector(p)?
                .iter()
                .chain([self.log_likelihoods[i], self.lambda(i)].iter())
                .map(|x| format!("{x:.10e}"))
                .collect();
            writeln!(w, "{}", row.join(" "))?;
        }
        Ok(())
    }
}

fn log_likelihoods(ll: &LogLikelihood, points: &[JointPoint]) -> Result<Vec<f64>> {
    let cfg = ll.config();
    points
        .par_iter()
        .map(|p| Ok(ll.value(&cfg.physical_vector(p)?)))
        .collect()
}

/// `n` direct prior draws with λ values against a converged maximum.
pub fn sample_prior_set(d: &CountRecord, cfg: &ScenarioConfig, n: usize, seed: u64) -> Result<SampleSet> {
    if n < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    let fit = best_ml(d, cfg, FIT_STARTS, seed)?;
    prior_set_with_max(d, cfg, n, seed, fit.log_l_max)
}

/// As [`sample_prior_set`] with the reference maximum supplied.
pub fn prior_set_with_max(d: &CountRecord, cfg: &ScenarioConfig, n: usize, seed: u64, log_l_max: f64) -> Result<SampleSet> {
    cfg.validate()?;
    let ll = LogLikelihood::new(d, cfg);
    let points = sample_prior(cfg, n, seed).points;
    let logl = log_likelihoods(&ll, &points)?;
    Ok(SampleSet::from_evaluated(points, logl, log_l_max, Provenance::PriorDirect, seed, vec![0; n]))
}

/// A differentiable log density on ℝⁿ; `None` marks points outside the
/// support.
pub trait Target: Sync {
    fn dim(&self) -> usize;
    fn log_density(&self, u: &[f64]) -> Option<(f64, Vec<f64>)>;
}

/// Posterior (or prior alone) in unconstrained coordinates, including the
/// log-Jacobian of the coordinate maps.
pub struct PosteriorTarget {
    ll: LogLikelihood,
    with_likelihood: bool,
}

impl PosteriorTarget {
    pub fn new(d: &CountRecord, cfg: &ScenarioConfig) -> Self {
        Self {
            ll: LogLikelihood::new(d, cfg),
            with_likelihood: true,
        }
    }

    /// The prior alone, for sampler checks.
    pub fn prior_only(cfg: &ScenarioConfig) -> Self {
        Self {
            ll: LogLikelihood::new(&CountRecord::zeros(), cfg),
            with_likelihood: false,
        }
    }
}

impl Target for PosteriorTarget {
    fn dim(&self) -> usize {
        self.ll.dim()
    }

    fn log_density(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        let cfg = self.ll.config();
        let theta = cfg.physical_from_unconstrained(u).ok()?;
        let q = CorrelationVector::from_array(std::array::from_fn(|i| theta[i]));
        if !is_physical(&q, 0.0) {
            return None;
        }
        let (mut value, mut grad) = scalar_log_prior_and_grad(&theta, cfg);
        if self.with_likelihood {
            let e = self.ll.evaluate(&theta, false)?;
            value += e.value;
            for (g, x) in grad.iter_mut().zip(e.gradient.iter()) {
                *g += x;
            }
        }
        let kinds: Vec<CoordKind> = cfg.coordinate_kinds();
        for (i, kind) in kinds.iter().enumerate() {
            let (d1, _) = kind.derivatives(theta[i]);
            let (lj, dlj) = kind.log_jacobian(theta[i]);
            value += lj;
            grad[i] = grad[i] * d1 + dlj;
        }
        value.is_finite().then_some((value, grad))
    }
}

/// Multivariate normal target, for sampler tests.
pub struct GaussianTarget {
    mean: Vec<f64>,
    precision: nalgebra::DMatrix<f64>,
}

impl GaussianTarget {
    pub fn new(mean: Vec<f64>, covariance: nalgebra::DMatrix<f64>) -> Result<Self> {
        let precision = covariance
            .try_inverse()
            .ok_or_else(|| Error::InvalidConfig("covariance is singular".into()))?;
        Ok(Self { mean, precision })
    }
}

impl Target for GaussianTarget {
    fn dim(&self) -> usize {
        self.mean.len()
    }

    fn log_density(&self, u: &[f64]) -> Option<(f64, Vec<f64>)> {
        let x = nalgebra::DVector::from_iterator(u.len(), u.iter().zip(&self.mean).map(|(a, m)| a - m));
        let px = &self.precision * &x;
        Some((-0.5 * x.dot(&px), px.iter().map(|v| -v).collect()))
    }
}

/// Tuning of one HMC run.
#[derive(Debug, Clone, Copy)]
pub struct HmcSettings {
    pub leapfrog_steps: usize,
    pub warmup: usize,
    pub target_accept: f64,
}

impl HmcSettings {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        Self {
            leapfrog_steps: cfg.sampler.leapfrog_steps,
            warmup: cfg.sampler.warmup,
            target_accept: cfg.sampler.target_accept,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ChainDiagnostics {
    /// Mean acceptance statistic of the kept transitions, per chain.
    pub acceptance: Vec<f64>,
    /// Adapted step size, per chain.
    pub step_size: Vec<f64>,
    /// Kept transitions whose trajectory diverged.
    pub divergences: usize,
    /// Kept transitions rejected because the trajectory left the support.
    pub outside: usize,
    /// Split-R̂ per unconstrained coordinate.
    pub r_hat: Vec<f64>,
    /// Effective sample size per unconstrained coordinate, all chains.
    pub ess: Vec<f64>,
    /// Some coordinate has R̂ above the limit.
    pub flagged: bool,
}

impl ChainDiagnostics {
    pub fn mean_acceptance(&self) -> f64 {
        self.acceptance.iter().sum::<f64>() / self.acceptance.len().max(1) as f64
    }
}

/// Kept draws of every chain, unconstrained coordinates.
#[derive(Debug, Clone)]
pub struct HmcRun {
    pub chains: Vec<Vec<Vec<f64>>>,
    pub diagnostics: ChainDiagnostics,
}

struct State {
    u: Vec<f64>,
    logp: f64,
    grad: Vec<f64>,
}

enum Outcome {
    Proposal(State, f64),
    /// Left the support of the target.
    Outside,
    Divergent,
}

impl Outcome {
    fn accept_prob(&self) -> f64 {
        match self {
            Outcome::Proposal(_, a) => *a,
            _ => 0.0,
        }
    }
}

/// One leapfrog trajectory with fresh momentum, and its Metropolis
/// acceptance probability.
fn trajectory<T: Target, R: Rng>(
    target: &T,
    s: &State,
    eps: f64,
    inv_mass: &[f64],
    steps: usize,
    rng: &mut R,
) -> Outcome {
    let p0: Vec<f64> = inv_mass
        .iter()
        .map(|m| rng.sample::<f64, _>(StandardNormal) / m.sqrt())
        .collect();
    let kinetic = |p: &[f64]| 0.5 * p.iter().zip(inv_mass).map(|(p, m)| p * p * m).sum::<f64>();
    let h0 = -s.logp + kinetic(&p0);
    let mut p = p0;
    let mut u = s.u.clone();
    let mut grad = s.grad.clone();
    let mut logp = s.logp;
    for _ in 0..steps {
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
        for ((ui, pi), m) in u.iter_mut().zip(&p).zip(inv_mass) {
            *ui += eps * m * pi;
        }
        match target.log_density(&u) {
            Some((lp, g)) => {
                logp = lp;
                grad = g;
            }
            None => return Outcome::Outside,
        }
        for (pi, g) in p.iter_mut().zip(&grad) {
            *pi += 0.5 * eps * g;
        }
    }
    let delta = h0 - (-logp + kinetic(&p));
    if !delta.is_finite() || -delta > DIVERGENCE {
        return Outcome::Divergent;
    }
    Outcome::Proposal(State { u, logp, grad }, delta.min(0.0).exp())
}

struct DualAveraging {
    mu: f64,
    log_eps: f64,
    log_eps_bar: f64,
    h_bar: f64,
    t: f64,
    target: f64,
}

impl DualAveraging {
    fn new(eps: f64, target: f64) -> Self {
        Self {
            mu: (10.0 * eps).ln(),
            log_eps: eps.ln(),
            log_eps_bar: 0.0,
            h_bar: 0.0,
            t: 0.0,
            target,
        }
    }

    fn update(&mut self, accept: f64) -> f64 {
        const GAMMA: f64 = 0.05;
        const T0: f64 = 10.0;
        const KAPPA: f64 = 0.75;
        self.t += 1.0;
        let w = 1.0 / (self.t + T0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept);
        self.log_eps = self.mu - self.t.sqrt() / GAMMA * self.h_bar;
        let x = self.t.powf(-KAPPA);
        self.log_eps_bar = x * self.log_eps + (1.0 - x) * self.log_eps_bar;
        self.log_eps.exp()
    }

    fn final_step(&self) -> f64 {
        self.log_eps_bar.exp()
    }
}

/// Doubles or halves `eps` until a single leapfrog step crosses acceptance ½.
fn initial_step<T: Target, R: Rng>(target: &T, s: &State, inv_mass: &[f64], rng: &mut R) -> f64 {
    let mut eps = 1.0;
    let accept = |eps: f64, rng: &mut R| trajectory(target, s, eps, inv_mass, 1, rng).accept_prob();
    let up = accept(eps, rng) > 0.5;
    for _ in 0..60 {
        let a = accept(eps, rng);
        if up != (a > 0.5) {
            break;
        }
        eps = if up { eps * 2.0 } else { eps * 0.5 };
    }
    eps
}

/// Ends of the metric-adaptation windows inside the warm-up.
fn adaptation_windows(warmup: usize) -> Vec<(usize, usize)> {
    let start = warmup * 15 / 100;
    let end = warmup - warmup / 10;
    if end < start + 20 {
        return Vec::new();
    }
    let mut windows = Vec::new();
    let mut lo = start;
    let mut size = 25;
    while lo < end {
        let mut hi = (lo + size).min(end);
        if end - hi < 2 * size {
            hi = end;
        }
        windows.push((lo, hi));
        lo = hi;
        size *= 2;
    }
    windows
}

fn run_chain<T: Target>(
    target: &T,
    init: &[f64],
    settings: HmcSettings,
    draws: usize,
    seed: u64,
    chain: usize,
) -> Result<(Vec<Vec<f64>>, ChainStats)> {
    let mut rng = stream_rng(seed, chain as u64);
    let (logp, grad) = target
        .log_density(init)
        .ok_or_else(|| Error::InvalidConfig("chain start outside the support".into()))?;
    let mut s = State {
        u: init.to_vec(),
        logp,
        grad,
    };
    let dim = target.dim();
    let mut inv_mass = vec![1.0; dim];
    let mut eps = initial_step(target, &s, &inv_mass, &mut rng);
    let mut da = DualAveraging::new(eps, settings.target_accept);
    let windows = adaptation_windows(settings.warmup);
    let mut window = 0;
    let mut mean = vec![0.0; dim];
    let mut m2 = vec![0.0; dim];
    let mut count = 0.0;
    for it in 0..settings.warmup {
        let out = trajectory(target, &s, eps, &inv_mass, settings.leapfrog_steps, &mut rng);
        let accept = out.accept_prob();
        if let Outcome::Proposal(n, a) = out {
            if rng.random::<f64>() < a {
                s = n;
            }
        }
        eps = da.update(accept);
        if let Some(&(lo, hi)) = windows.get(window) {
            if it >= lo && it < hi {
                count += 1.0;
                for i in 0..dim {
                    let d = s.u[i] - mean[i];
                    mean[i] += d / count;
                    m2[i] += d * (s.u[i] - mean[i]);
                }
            }
            if it + 1 == hi {
                // Regularized toward unit scale, as in common practice.
                for i in 0..dim {
                    let var = m2[i] / (count - 1.0);
                    inv_mass[i] = count / (count + 5.0) * var + 1e-3 * 5.0 / (count + 5.0);
                }
                mean.fill(0.0);
                m2.fill(0.0);
                count = 0.0;
                window += 1;
                eps = initial_step(target, &s, &inv_mass, &mut rng);
                da = DualAveraging::new(eps, settings.target_accept);
            }
        }
    }
    let eps = if settings.warmup > 0 { da.final_step() } else { eps };
    let mut kept = Vec::with_capacity(draws);
    let mut stats = ChainStats {
        step_size: eps,
        ..Default::default()
    };
    let mut accept_sum = 0.0;
    for _ in 0..draws {
        let out = trajectory(target, &s, eps, &inv_mass, settings.leapfrog_steps, &mut rng);
        accept_sum += out.accept_prob();
        match out {
            Outcome::Proposal(n, a) => {
                if rng.random::<f64>() < a {
                    s = n;
                }
            }
            Outcome::Outside => stats.outside += 1,
            Outcome::Divergent => stats.divergences += 1,
        }
        kept.push(s.u.clone());
    }
    stats.acceptance = accept_sum / draws.max(1) as f64;
    Ok((kept, stats))
}

#[derive(Default)]
struct ChainStats {
    acceptance: f64,
    step_size: f64,
    outside: usize,
    divergences: usize,
}

/// Runs one chain per start, `draws` kept transitions each.
pub fn run_hmc<T: Target>(
    target: &T,
    starts: &[Vec<f64>],
    settings: HmcSettings,
    draws: usize,
    seed: u64,
) -> Result<HmcRun> {
    let results: Vec<_> = starts
        .par_iter()
        .enumerate()
        .map(|(c, init)| run_chain(target, init, settings, draws, seed, c))
        .collect::<Result<_>>()?;
    let mut chains = Vec::new();
    let mut acceptance = Vec::new();
    let mut step_size = Vec::new();
    let mut divergences = 0;
    let mut outside = 0;
    for (kept, stats) in results {
        chains.push(kept);
        acceptance.push(stats.acceptance);
        step_size.push(stats.step_size);
        divergences += stats.divergences;
        outside += stats.outside;
    }
    let (r_hat, ess) = convergence(&chains);
    Ok(HmcRun {
        diagnostics: ChainDiagnostics {
            acceptance,
            step_size,
            divergences,
            outside,
            flagged: r_hat.iter().any(|r| !(*r <= RHAT_LIMIT)),
            r_hat,
            ess,
        },
        chains,
    })
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// Split-R̂ and effective sample size (Geyer's initial positive sequence on
/// the multi-chain autocorrelation) of every coordinate.
pub fn convergence(chains: &[Vec<Vec<f64>>]) -> (Vec<f64>, Vec<f64>) {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let dim = chains.first().and_then(|c| c.first()).map_or(0, Vec::len);
    let half = len / 2;
    if half < 2 {
        return (vec![f64::NAN; dim], vec![f64::NAN; dim]);
    }
    (0..dim)
        .map(|k| {
            let halves: Vec<Vec<f64>> = chains
                .iter()
                .flat_map(|c| [c[..half].to_vec(), c[half..2 * half].to_vec()])
                .map(|h| h.iter().map(|x| x[k]).collect())
                .collect();
            rhat_ess(&halves)
        })
        .unzip()
}

fn rhat_ess(seqs: &[Vec<f64>]) -> (f64, f64) {
    let m = seqs.len() as f64;
    let n = seqs[0].len();
    let nf = n as f64;
    let stats: Vec<(f64, f64)> = seqs.iter().map(|s| mean_var(s)).collect();
    let w = stats.iter().map(|s| s.1).sum::<f64>() / m;
    let means: Vec<f64> = stats.iter().map(|s| s.0).collect();
    let b = nf * mean_var(&means).1;
    let var_plus = (nf - 1.0) / nf * w + b / nf;
    if !(w > 0.0) {
        return (f64::NAN, f64::NAN);
    }
    let r_hat = (var_plus / w).sqrt();
    let autocov = |lag: usize| {
        seqs.iter()
            .zip(&means)
            .map(|(s, mu)| (0..n - lag).map(|t| (s[t] - mu) * (s[t + lag] - mu)).sum::<f64>() / nf)
            .sum::<f64>()
            / m
    };
    let rho = |lag: usize| 1.0 - (w * (nf - 1.0) / nf - autocov(lag)) / var_plus;
    let mut tau = -1.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = rho(lag) + rho(lag + 1);
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        tau += 2.0 * pair;
        prev = pair;
        lag += 2;
    }
    // Antithetic chains can give tiny τ; cap the ESS at mn·log10(mn).
    (r_hat, m * nf / tau.max(1.0 / (m * nf).log10().max(1.0)))
}

/// Posterior draws by HMC, pooled across chains in chain order. Chains
/// start near the best likelihood maximum.
pub fn sample_posterior_hmc(
    d: &CountRecord,
    cfg: &ScenarioConfig,
    n: usize,
    chains: usize,
    seed: u64,
) -> Result<(SampleSet, ChainDiagnostics)> {
    if n < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: n,
        });
    }
    if chains < 2 {
        return Err(Error::InvalidConfig("HMC needs at least 2 chains".into()));
    }
    let fit = best_ml(d, cfg, FIT_STARTS, seed)?;
    let target = PosteriorTarget::new(d, cfg);
    let starts = jittered_starts(&target, &fit.unconstrained, chains, seed);
    let per_chain = n.div_ceil(chains);
    let run = run_hmc(&target, &starts, HmcSettings::from_config(cfg), per_chain, seed)?;
    let mut points = Vec::with_capacity(n);
    let mut chain = Vec::with_capacity(n);
    for (c, draws) in run.chains.iter().enumerate() {
        let quota = n / chains + usize::from(c < n % chains);
        for u in draws.iter().take(quota) {
            points.push(cfg.from_unconstrained(u)?);
            chain.push(c);
        }
    }
    let ll = LogLikelihood::new(d, cfg);
    let logl = log_likelihoods(&ll, &points)?;
    let set = SampleSet::from_evaluated(points, logl, fit.log_l_max, Provenance::PosteriorHmc, seed, chain);
    Ok((set, run.diagnostics))
}

/// Chain starts scattered around `center`; the scatter shrinks until the
/// start lies inside the support.
fn jittered_starts<T: Target>(target: &T, center: &[f64], chains: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = stream_rng(seed, u64::MAX);
    (0..chains)
        .map(|_| {
            let mut scale = 1e-2;
            loop {
                let u: Vec<f64> = center
                    .iter()
                    .enumerate()
                    .map(|(i, c)| {
                        // Saturated coordinates are pulled back so the chain can move.
                        let c = if i < STATE_DIM { c.clamp(-10.0, 10.0) } else { c.clamp(-15.0, 15.0) };
                        c + scale * rng.sample::<f64, _>(StandardNormal)
                    })
                    .collect();
                if target.log_density(&u).is_some() || scale < 1e-12 {
                    return u;
                }
                scale *= 0.5;
            }
        })
        .collect()
}

/// Importance-sampled size of the region `λ ≥ threshold`, for regions too
/// small for direct prior sampling.
#[derive(Debug, Clone, Copy)]
pub struct RefinedSize {
    pub size: f64,
    pub sd: f64,
    pub lambda_crit: f64,
    pub draws_above: usize,
}

/// Uses prior = posterior · λ_crit / λ: the size is `λ_crit` times the
/// posterior mean of `λ⁻¹·1(λ ≥ threshold)`. The variance combines both
/// Monte Carlo errors by the delta method, treating draws as independent.
pub fn importance_size_refinement(prior: &SampleSet, posterior: &SampleSet, threshold: f64) -> Result<RefinedSize> {
    if prior.provenance != Provenance::PriorDirect {
        return Err(Error::Provenance {
            expected: Provenance::PriorDirect.name(),
            found: prior.provenance.name(),
        });
    }
    if posterior.provenance != Provenance::PosteriorHmc {
        return Err(Error::Provenance {
            expected: Provenance::PosteriorHmc.name(),
            found: posterior.provenance.name(),
        });
    }
    let reference = prior.log_l_max.max(posterior.log_l_max);
    let prior = prior.rebased(reference);
    let posterior = posterior.rebased(reference);
    let a_terms = prior.lambdas();
    let (a, var_a) = mean_var(&a_terms);
    let log_thr = threshold.ln();
    let b_terms: Vec<f64> = posterior
        .log_lambdas
        .iter()
        .map(|&l| if l >= log_thr { (-l).exp() } else { 0.0 })
        .collect();
    let draws_above = b_terms.iter().filter(|&&x| x > 0.0).count();
    if draws_above == 0 {
        return Err(Error::NoDrawsAboveThreshold { threshold });
    }
    let (b, var_b) = mean_var(&b_terms);
    let var = b * b * var_a / a_terms.len() as f64 + a * a * var_b / b_terms.len() as f64;
    Ok(RefinedSize {
        size: a * b,
        sd: var.sqrt(),
        lambda_crit: a,
        draws_above,
    })
}
