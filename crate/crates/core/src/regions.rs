//! Bounded-likelihood regions `{p : L(p) ≥ λ·L_max}`: size and credibility
//! curves, the critical λ, membership tests and two-dimensional slices.

use std::collections::HashMap;
use std::io::Write;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimation::{best_ml, MLResult};
use crate::likelihood::{CountRecord, LogLikelihood};
use crate::model::{Coordinate, JointPoint, ScenarioConfig};
use crate::probability::{ensure_physical, physical_range};
use crate::rng::stream_rng;
use crate::sampling::{
    importance_size_refinement, prior_set_with_max, sample_posterior_hmc, Provenance, RefinedSize, SampleSet,
    MIN_SAMPLES,
};

/// Lower end of the λ grid when some draws underflow.
const MIN_LOG_LAMBDA: f64 = -700.0;
/// Starts for the maximum-likelihood fit inside the report pipeline.
const REPORT_STARTS: usize = 8;

/// Size and credibility of the regions `R_λ` over a log-spaced λ grid.
#[derive(Debug, Clone)]
pub struct LambdaCurve {
    pub lambda: Vec<f64>,
    pub size: Vec<f64>,
    pub credibility: Vec<f64>,
    /// Bootstrap band of the size, 2.5% and 97.5% quantiles.
    pub size_lo: Vec<f64>,
    pub size_hi: Vec<f64>,
    pub lambda_crit: f64,
    pub size_crit: f64,
    pub credibility_crit: f64,
    pub samples: usize,
}

/// Sorted λ values with suffix sums, for O(log n) evaluation of both curves.
struct Survival {
    sorted: Vec<f64>,
    /// `tail[i] = Σ_{j ≥ i} sorted[j]`
    tail: Vec<f64>,
    mean: f64,
}

impl Survival {
    fn new(mut lambdas: Vec<f64>) -> Self {
        lambdas.sort_by(f64::total_cmp);
        let mut tail = vec![0.0; lambdas.len() + 1];
        for i in (0..lambdas.len()).rev() {
            tail[i] = tail[i + 1] + lambdas[i];
        }
        let mean = tail[0] / lambdas.len() as f64;
        Self {
            sorted: lambdas,
            tail,
            mean,
        }
    }

    fn first_at_least(&self, lambda: f64) -> usize {
        self.sorted.partition_point(|&x| x < lambda)
    }

    fn size(&self, lambda: f64) -> f64 {
        (self.sorted.len() - self.first_at_least(lambda)) as f64 / self.sorted.len() as f64
    }

    /// `[λ·s_λ + mean((λ_i − λ)₊)] / λ_crit`. The λ terms cancel, leaving
    /// `Σ_{λ_i ≥ λ} λ_i / Σ λ_i`, which is evaluated directly so the curve is
    /// monotone to the last bit.
    fn credibility(&self, lambda: f64) -> f64 {
        if self.tail[0] <= 0.0 {
            return 0.0;
        }
        (self.tail[self.first_at_least(lambda)] / self.tail[0]).min(1.0)
    }
}

/// Log-spaced grid of `points` values from `lo` to 1.
pub fn log_grid(lo: f64, points: usize) -> Vec<f64> {
    let a = lo.ln().max(MIN_LOG_LAMBDA);
    let m = points.max(2) - 1;
    (0..=m).map(|i| (a * (1.0 - i as f64 / m as f64)).exp()).collect()
}

/// Size and credibility curves from direct prior draws. `λ_crit` is the
/// sample mean of the λ values; credibility follows from the size through
/// `∫_λ¹ s dλ' = E[(λ_i − λ)₊]`.
pub fn curve_from_samples(set: &SampleSet, grid_points: usize, bootstrap: usize, seed: u64) -> Result<LambdaCurve> {
    if set.provenance != Provenance::PriorDirect {
        return Err(Error::Provenance {
            expected: Provenance::PriorDirect.name(),
            found: set.provenance.name(),
        });
    }
    if set.len() < MIN_SAMPLES {
        return Err(Error::TooFewSamples {
            needed: MIN_SAMPLES,
            got: set.len(),
        });
    }
    let lambdas = set.lambdas();
    let min_log = set.log_lambdas.iter().copied().fold(0.0, f64::min);
    let lambda = log_grid(min_log.exp().max(MIN_LOG_LAMBDA.exp()), grid_points);
    let surv = Survival::new(lambdas.clone());
    let size: Vec<f64> = lambda.iter().map(|&l| surv.size(l)).collect();
    let credibility: Vec<f64> = lambda.iter().map(|&l| surv.credibility(l)).collect();
    let n = lambdas.len();
    let resampled: Vec<Vec<f64>> = (0..bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = stream_rng(seed, b as u64);
            let draw: Vec<f64> = (0..n).map(|_| lambdas[rng.random_range(0..n)]).collect();
            let s = Survival::new(draw);
            lambda.iter().map(|&l| s.size(l)).collect()
        })
        .collect();
    let band = |q: f64| -> Vec<f64> {
        (0..lambda.len())
            .map(|g| {
                if resampled.is_empty() {
                    return size[g];
                }
                let mut col: Vec<f64> = resampled.iter().map(|r| r[g]).collect();
                col.sort_by(f64::total_cmp);
                col[((col.len() - 1) as f64 * q).round() as usize]
            })
            .collect()
    };
    Ok(LambdaCurve {
        size_lo: band(0.025),
        size_hi: band(0.975),
        size_crit: surv.size(surv.mean),
        credibility_crit: surv.credibility(surv.mean),
        lambda_crit: surv.mean,
        lambda,
        size,
        credibility,
        samples: n,
    })
}

impl LambdaCurve {
    /// Grid value maximizing `c_λ − s_λ` (the first, if several tie).
    pub fn argmax_difference(&self) -> f64 {
        self.lambda[self.argmax_range().0]
    }

    /// First and last grid index attaining the maximum of `c_λ − s_λ`. On a
    /// finite sample the difference is flat between consecutive λ_i, so the
    /// maximum is a plateau rather than a point.
    pub fn argmax_range(&self) -> (usize, usize) {
        let diff: Vec<f64> = self.credibility.iter().zip(&self.size).map(|(c, s)| c - s).collect();
        let best = diff.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let tie = |d: f64| d >= best - 1e-12 * best.abs().max(1e-300);
        let first = diff.iter().position(|&d| tie(d)).unwrap_or(0);
        let last = diff.iter().rposition(|&d| tie(d)).unwrap_or(0);
        (first, last)
    }

    /// Whether `x` lies within one grid step of `lambda_crit` (log scale).
    pub fn within_one_step(&self, x: f64) -> bool {
        let step = (self.lambda[1] / self.lambda[0]).ln().abs();
        (x.ln() - self.lambda_crit.ln()).abs() <= step * (1.0 + 1e-9)
    }

    /// Whether `lambda_crit` lies within one grid step of the maximizing
    /// plateau of `c_λ − s_λ`.
    pub fn crit_at_argmax(&self) -> bool {
        let (i, j) = self.argmax_range();
        let step = (self.lambda[1] / self.lambda[0]).ln().abs() * (1.0 + 1e-9);
        let x = self.lambda_crit.ln();
        x >= self.lambda[i].ln() - step && x <= self.lambda[j].ln() + step
    }

    pub fn write_columns<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# samples={} lambda_crit={:.6e} s={:.6e} c={:.6e}",
            self.samples, self.lambda_crit, self.size_crit, self.credibility_crit
        )?;
        writeln!(w, "lambda s c s_lo s_hi")?;
        for i in 0..self.lambda.len() {
            writeln!(
                w,
                "{:.6e} {:.6e} {:.6e} {:.6e} {:.6e}",
                self.lambda[i], self.size[i], self.credibility[i], self.size_lo[i], self.size_hi[i]
            )?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Membership {
    pub inside: bool,
    pub lambda: f64,
    pub log_lambda: f64,
}

/// Whether `p` lies in `R_λ`, i.e. `L(p) ≥ λ·L_max`.
pub fn membership(p: &JointPoint, d: &CountRecord, cfg: &ScenarioConfig, lambda: f64, log_l_max: f64) -> Result<Membership> {
    ensure_physical(&p.state)?;
    let ll = LogLikelihood::new(d, cfg);
    let log_lambda = (ll.value(&cfg.physical_vector(p)?) - log_l_max).min(0.0);
    Ok(Membership {
        inside: log_lambda >= lambda.ln(),
        lambda: log_lambda.exp(),
        log_lambda,
    })
}

#[derive(Debug, Clone)]
pub struct ReportSettings {
    pub samples: usize,
    pub seed: u64,
    /// Posterior draws for the importance-sampled size; `None` skips it.
    pub posterior_draws: Option<usize>,
    pub chains: usize,
}

#[derive(Debug, Clone)]
pub struct PlausibleReport {
    pub ml: MLResult,
    pub log_l_max: f64,
    pub curve: LambdaCurve,
    pub lambda_crit: f64,
    pub size: f64,
    pub credibility: f64,
    pub refined: Option<RefinedSize>,
    pub members: Vec<(String, Membership)>,
}

impl PlausibleReport {
    /// Small size with large credibility: the data pin the parameters down.
    pub fn accurate(&self) -> bool {
        self.size < 0.05 && self.credibility > 0.95
    }
}

/// Fit, prior sampling, curve and membership of the given reference points
/// in the plausible region `R_{λ_crit}`.
pub fn plausible_region_report(
    d: &CountRecord,
    cfg: &ScenarioConfig,
    settings: &ReportSettings,
    references: &[(String, JointPoint)],
) -> Result<PlausibleReport> {
    let ml = best_ml(d, cfg, REPORT_STARTS, settings.seed)?;
    let set = prior_set_with_max(d, cfg, settings.samples, settings.seed, ml.log_l_max)?;
    let curve = curve_from_samples(&set, cfg.sampler.grid_points, cfg.sampler.bootstrap, settings.seed)?;
    let refined = match settings.posterior_draws {
        Some(n) => {
            let (post, _) = sample_posterior_hmc(d, cfg, n, settings.chains, settings.seed)?;
            Some(importance_size_refinement(&set, &post, curve.lambda_crit)?)
        }
        None => None,
    };
    let members = references
        .iter()
        .map(|(name, p)| Ok((name.clone(), membership(p, d, cfg, curve.lambda_crit, set.log_l_max)?)))
        .collect::<Result<_>>()?;
    Ok(PlausibleReport {
        log_l_max: set.log_l_max,
        lambda_crit: curve.lambda_crit,
        size: curve.size_crit,
        credibility: curve.credibility_crit,
        ml,
        curve,
        refined,
        members,
    })
}

/// Polylines of the level set `f = level` of a grid function by marching
/// squares with linear interpolation along cell edges. `values[j][i]` is the
/// value at `(xs[i], ys[j])`. Saddle cells are resolved by the cell mean.
pub fn marching_squares(xs: &[f64], ys: &[f64], values: &[Vec<f64>], level: f64) -> Vec<Vec<(f64, f64)>> {
    // Edge ids: horizontal edge from (i, j) to (i+1, j) is (0, i, j);
    // vertical edge from (i, j) to (i, j+1) is (1, i, j).
    type Edge = (u8, usize, usize);
    let v = |i: usize, j: usize| values[j][i].max(-1e300);
    let point = |e: Edge| -> (f64, f64) {
        let (a, b, pa, pb) = match e {
            (0, i, j) => (v(i, j), v(i + 1, j), (xs[i], ys[j]), (xs[i + 1], ys[j])),
            (_, i, j) => (v(i, j), v(i, j + 1), (xs[i], ys[j]), (xs[i], ys[j + 1])),
        };
        let t = if a == b { 0.5 } else { ((level - a) / (b - a)).clamp(0.0, 1.0) };
        (pa.0 + t * (pb.0 - pa.0), pa.1 + t * (pb.1 - pa.1))
    };
    let mut segments: Vec<(Edge, Edge)> = Vec::new();
    for j in 0..ys.len().saturating_sub(1) {
        for i in 0..xs.len().saturating_sub(1) {
            let corners = [v(i, j), v(i + 1, j), v(i + 1, j + 1), v(i, j + 1)];
            let above: Vec<bool> = corners.iter().map(|&c| c >= level).collect();
            // Cell edges in counter-clockwise order: bottom, right, top, left.
            let edges: [Edge; 4] = [(0, i, j), (1, i + 1, j), (0, i, j + 1), (1, i, j)];
            let crossing: Vec<usize> = (0..4).filter(|&k| above[k] != above[(k + 1) % 4]).collect();
            match crossing.len() {
                2 => segments.push((edges[crossing[0]], edges[crossing[1]])),
                4 => {
                    let centre_above = corners.iter().sum::<f64>() / 4.0 >= level;
                    if centre_above == above[0] {
                        // Corner 0's region connects through the centre.
                        segments.push((edges[0], edges[1]));
                        segments.push((edges[2], edges[3]));
                    } else {
                        segments.push((edges[3], edges[0]));
                        segments.push((edges[1], edges[2]));
                    }
                }
                _ => {}
            }
        }
    }
    let mut at: HashMap<Edge, Vec<usize>> = HashMap::new();
    for (k, (a, b)) in segments.iter().enumerate() {
        at.entry(*a).or_default().push(k);
        at.entry(*b).or_default().push(k);
    }
    let mut used = vec![false; segments.len()];
    let mut lines = Vec::new();
    for start in 0..segments.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let mut chain = vec![segments[start].0, segments[start].1];
        // Extend forward from the last edge, then backward from the first.
        for forward in [true, false] {
            loop {
                let end = if forward { *chain.last().unwrap() } else { chain[0] };
                let next = at[&end].iter().copied().find(|&k| !used[k]);
                let Some(k) = next else { break };
                used[k] = true;
                let (a, b) = segments[k];
                let other = if a == end { b } else { a };
                if forward {
                    chain.push(other);
                } else {
                    chain.insert(0, other);
                }
            }
        }
        lines.push(chain.into_iter().map(point).collect());
    }
    lines
}

/// Two coordinates varied on a grid with the rest held fixed.
#[derive(Debug, Clone)]
pub struct SliceRequest {
    pub x: Coordinate,
    pub y: Coordinate,
    pub fixed: JointPoint,
    pub level: f64,
    pub grid: usize,
    /// Requested extents; clipped to the admissible range. `None` uses the
    /// whole admissible range.
    pub x_range: Option<(f64, f64)>,
    pub y_range: Option<(f64, f64)>,
    pub log_l_max: f64,
    /// Global maximum to mark in the slice.
    pub ml: Option<JointPoint>,
}

#[derive(Debug, Clone)]
pub struct SliceContour {
    pub x: Coordinate,
    pub y: Coordinate,
    pub fixed: JointPoint,
    pub level: f64,
    pub xs: Vec<f64>,
    pub ys: Vec<f64>,
    /// `ln λ` on the grid, rows indexed by `y`; `-∞` outside the state set.
    pub log_lambda: Vec<Vec<f64>>,
    pub polylines: Vec<Vec<(f64, f64)>>,
    /// Admissible range of each varied coordinate with the others fixed.
    pub x_bounds: (f64, f64),
    pub y_bounds: (f64, f64),
    /// The level is above every grid value; `polylines` is empty.
    pub level_above_max: bool,
    /// Grid point with the largest likelihood.
    pub slice_max: (f64, f64),
    pub fixed_marker: (f64, f64),
    pub ml_marker: Option<(f64, f64)>,
}

fn coordinate_bounds(c: Coordinate, p: &JointPoint) -> Result<(f64, f64)> {
    match c {
        Coordinate::State(f) => physical_range(&p.state, f),
        Coordinate::EtaLeft | Coordinate::EtaRight => Ok((1e-12, 1.0 - 1e-12)),
        Coordinate::Nu => {
            let nu = c.get(p).ok_or_else(|| Error::InvalidConfig("slice over nu needs unknown-nu mode".into()))?;
            Ok((nu * 1e-3, nu * 1e3))
        }
    }
}

fn clip(range: Option<(f64, f64)>, bounds: (f64, f64)) -> (f64, f64) {
    match range {
        Some((a, b)) => (a.max(bounds.0), b.min(bounds.1)),
        None => bounds,
    }
}

fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    let m = n.max(2) - 1;
    (0..=m).map(|i| a + (b - a) * i as f64 / m as f64).collect()
}

/// Level set `λ(p) = level` in a two-dimensional slice through `fixed`.
pub fn slice_contour(d: &CountRecord, cfg: &ScenarioConfig, req: &SliceRequest) -> Result<SliceContour> {
    ensure_physical(&req.fixed.state)?;
    if !(req.level > 0.0 && req.level <= 1.0) {
        return Err(Error::InvalidConfig(format!("slice level must lie in (0, 1], got {}", req.level)));
    }
    if req.x == req.y {
        return Err(Error::InvalidConfig("slice needs two different coordinates".into()));
    }
    let x_bounds = coordinate_bounds(req.x, &req.fixed)?;
    let y_bounds = coordinate_bounds(req.y, &req.fixed)?;
    let (x0, x1) = clip(req.x_range, x_bounds);
    let (y0, y1) = clip(req.y_range, y_bounds);
    let xs = linspace(x0, x1, req.grid);
    let ys = linspace(y0, y1, req.grid);
    let ll = LogLikelihood::new(d, cfg);
    let log_lambda: Vec<Vec<f64>> = ys
        .par_iter()
        .map(|&y| {
            xs.iter()
                .map(|&x| {
                    let p = req.x.set(&req.fixed, x).and_then(|p| req.y.set(&p, y));
                    match p {
                        Ok(p) if ensure_physical(&p.state).is_ok() => match cfg.physical_vector(&p) {
                            Ok(theta) => (ll.value(&theta) - req.log_l_max).min(0.0),
                            Err(_) => f64::NEG_INFINITY,
                        },
                        _ => f64::NEG_INFINITY,
                    }
                })
                .collect()
        })
        .collect();
    let mut slice_max = (xs[0], ys[0]);
    let mut best = f64::NEG_INFINITY;
    for (j, row) in log_lambda.iter().enumerate() {
        for (i, &v) in row.iter().enumerate() {
            if v > best {
                best = v;
                slice_max = (xs[i], ys[j]);
            }
        }
    }
    let level = req.level.ln();
    let level_above_max = best < level;
    let polylines = if level_above_max {
        Vec::new()
    } else {
        marching_squares(&xs, &ys, &log_lambda, level)
    };
    let marker = |p: &JointPoint| Some((req.x.get(p)?, req.y.get(p)?));
    Ok(SliceContour {
        x: req.x,
        y: req.y,
        fixed: req.fixed,
        level: req.level,
        fixed_marker: marker(&req.fixed).unwrap_or((f64::NAN, f64::NAN)),
        ml_marker: req.ml.as_ref().and_then(marker),
        xs,
        ys,
        log_lambda,
        polylines,
        x_bounds,
        y_bounds,
        level_above_max,
        slice_max,
    })
}

impl SliceContour {
    /// Grid block (`x y ln_lambda`) followed by one block per polyline.
    pub fn write<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(
            w,
            "# slice x={} y={} level={:.6e} level_above_max={}",
            self.x.name(),
            self.y.name(),
            self.level,
            self.level_above_max
        )?;
        writeln!(w, "# fixed_marker {:.10e} {:.10e}", self.fixed_marker.0, self.fixed_marker.1)?;
        writeln!(w, "# slice_max {:.10e} {:.10e}", self.slice_max.0, self.slice_max.1)?;
        if let Some((x, y)) = self.ml_marker {
            writeln!(w, "# ml_marker {x:.10e} {y:.10e}")?;
        }
        writeln!(w, "# grid")?;
        writeln!(w, "x y ln_lambda")?;
        for (j, row) in self.log_lambda.iter().enumerate() {
            for (i, v) in row.iter().enumerate() {
                writeln!(w, "{:.10e} {:.10e} {:.10e}", self.xs[i], self.ys[j], v)?;
            }
        }
        for (k, line) in self.polylines.iter().enumerate() {
            writeln!(w, "\n# polyline {k}")?;
            for (x, y) in line {
                writeln!(w, "{x:.10e} {y:.10e}")?;
            }
        }
        Ok(())
    }
}
