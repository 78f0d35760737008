use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use selfcal::error::{Error, Result};
use selfcal::estimation::{multi_start_ml, MLResult, ModeReport};
use selfcal::experiment::{
    ingest_counts, load_reference_point, read_file, simulate_repetitions, ConfigFile, NuScan, ReferencePoint, SimSpec,
};
use selfcal::likelihood::CountRecord;
use selfcal::model::{Coordinate, JointPoint, NuMode, ScenarioConfig};
use selfcal::priors::{prior_stats, Prior};
use selfcal::regions::{
    curve_from_samples, membership, plausible_region_report, slice_contour, LambdaCurve, ReportSettings,
    SliceRequest,
};
use selfcal::sampling::prior_set_with_max;

#[derive(Parser)]
#[command(name = "selfcal", version, about = "Self-calibrating two-qubit tomography")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Scenario configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output file for the command's artifact.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Mean pair number; overrides the configuration in known-nu mode.
    #[arg(long)]
    nu: Option<f64>,
}

#[derive(Args)]
struct DataArgs {
    /// Count file with the 24 recorded counts.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate count records from a mock-true point.
    Simulate {
        #[command(flatten)]
        common: Common,
        /// Mock-true point, `FILE` or `FILE:table.path`.
        #[arg(long)]
        truth: String,
        #[arg(long, default_value_t = 1)]
        repetitions: usize,
    },
    /// Multi-start maximum-likelihood fit.
    Mle {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, default_value_t = 10)]
        starts: usize,
        /// Repeat the fit over a geometric nu grid, `lo:hi:steps`.
        #[arg(long)]
        nu_scan: Option<NuScan>,
    },
    /// Size and credibility curves from prior draws.
    Curve {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        nu_scan: Option<NuScan>,
    },
    /// Two-dimensional slice of a bounded-likelihood region.
    Slice {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        x: Coordinate,
        #[arg(long)]
        y: Coordinate,
        /// Likelihood ratio of the contour; defaults to the critical value.
        #[arg(long)]
        level: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 101)]
        grid: usize,
        /// Point the slice passes through; defaults to the ML estimate.
        #[arg(long)]
        at: Option<String>,
        #[arg(long)]
        x_range: Option<Range>,
        #[arg(long)]
        y_range: Option<Range>,
    },
    /// Whether a point lies inside a bounded-likelihood region.
    Check {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        point: String,
        /// Region level; defaults to the critical value.
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Mean, standard deviation and shortest interval of the scalar priors.
    PriorStats {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
    },
    /// Full pipeline: fit, curves, plausible region and reference points.
    Report {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long, default_value_t = 8)]
        chains: usize,
        /// Posterior draws for the importance-sampled region size.
        #[arg(long)]
        posterior: Option<usize>,
        /// Reference points, `NAME=FILE:table.path`.
        #[arg(long = "reference")]
        references: Vec<String>,
    },
}

#[derive(Debug, Clone, Copy)]
struct Range(f64, f64);

impl std::str::FromStr for Range {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (a, b) = s.split_once(':').ok_or("range must look like lo:hi")?;
        let a: f64 = a.parse().map_err(|_| format!("bad number `{a}`"))?;
        let b: f64 = b.parse().map_err(|_| format!("bad number `{b}`"))?;
        if a < b {
            Ok(Range(a, b))
        } else {
            Err("range needs lo < hi".into())
        }
    }
}

struct Context {
    cfg: ScenarioConfig,
    header: String,
    out: Option<PathBuf>,
    seed: u64,
}

impl Context {
    /// `scan` supplies ν when the command scans over it.
    fn new(command: &str, common: &Common, scan: Option<&NuScan>) -> Result<Self> {
        let text = read_file(&common.config)?;
        let file = ConfigFile::parse(&text)?;
        let cfg = file.build(common.nu.or_else(|| scan.map(|s| s.lo)))?;
        let header = format!(
            "# selfcal {} command={} seed={} config_sha256={}\n",
            env!("CARGO_PKG_VERSION"),
            command,
            common.seed,
            hex::encode(Sha256::digest(text.as_bytes()))
        );
        Ok(Self {
            cfg,
            header,
            out: common.out.clone(),
            seed: common.seed,
        })
    }

    fn with_nu(&self, nu: f64) -> Result<ScenarioConfig> {
        let mut cfg = self.cfg.clone();
        if cfg.nu_mode == NuMode::Unknown {
            return Err(Error::InvalidConfig("a nu scan needs known-nu mode".into()));
        }
        cfg.nu_mode = NuMode::Known { nu };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Writes the artifact with the provenance header, if an output path
    /// was given.
    fn write(&self, body: &[u8]) -> Result<()> {
        if let Some(path) = &self.out {
            let mut f = fs::File::create(path)?;
            f.write_all(self.header.as_bytes())?;
            f.write_all(body)?;
        }
        Ok(())
    }
}

fn reference_spec(spec: &str) -> Result<ReferencePoint> {
    // A trailing `:table.path` selects a table; Windows drive letters aside,
    // paths rarely contain colons.
    match spec.rsplit_once(':') {
        Some((path, table)) if !table.contains('/') && Path::new(path).exists() => {
            load_reference_point(path, Some(table))
        }
        _ => load_reference_point(spec, None),
    }
}

/// `n` significant digits, fixed notation for moderate magnitudes.
fn sig(x: f64, n: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let e = x.abs().log10().floor() as i32;
    if (-3..6).contains(&e) {
        format!("{:.*}", (n as i32 - 1 - e).max(0) as usize, x)
    } else {
        format!("{:.*e}", n - 1, x)
    }
}

fn point_column(cfg: &ScenarioConfig, p: &JointPoint) -> Vec<f64> {
    let mut v = p.state.to_array().to_vec();
    v.push(p.left.scale());
    v.push(p.right.scale());
    if cfg.nu_mode == NuMode::Unknown {
        v.push(p.nu.unwrap_or(f64::NAN));
    }
    v
}

/// Parameter table with one column per named point.
fn parameter_table(cfg: &ScenarioConfig, columns: &[(&str, Vec<f64>)]) -> String {
    let mut names: Vec<String> = selfcal::model::Field::ALL.iter().map(|f| f.name().to_string()).collect();
    names.extend(["eta_left".into(), "eta_right".into()]);
    if cfg.nu_mode == NuMode::Unknown {
        names.push("nu".into());
    }
    let mut s = format!("{:<10}", "parameter");
    for (title, _) in columns {
        let _ = write!(s, " {title:>12}");
    }
    s.push('\n');
    for (i, name) in names.iter().enumerate() {
        let _ = write!(s, "{name:<10}");
        for (_, col) in columns {
            let _ = write!(s, " {:>12}", sig(col[i], 4));
        }
        s.push('\n');
    }
    s
}

fn ml_summary(cfg: &ScenarioConfig, report: &ModeReport) -> String {
    let mut s = format!(
        "starts {}  failed {}  clusters {}\n",
        report.starts,
        report.failed,
        report.clusters.len()
    );
    for (k, c) in report.clusters.iter().enumerate() {
        let r = &c.representative;
        let _ = writeln!(
            s,
            "cluster {k}: logL {:.6}  members {}  gradient {:.2e}  boundary {}",
            r.log_l_max, c.members, r.gradient_norm, r.on_psd_boundary
        );
    }
    for p in &report.pairs {
        let _ = writeln!(
            s,
            "pair {}-{}: fidelity {:.4}  efficiency distance {:.4}  logL gap {:.3}",
            p.first, p.second, p.fidelity, p.efficiency_distance, p.log_l_gap
        );
    }
    if let Some(best) = report.clusters.first() {
        s.push_str(&parameter_table(cfg, &[("ML", point_column(cfg, &best.representative.estimate))]));
    }
    s
}

fn ml_artifact(cfg: &ScenarioConfig, r: &MLResult) -> String {
    let mut s = format!(
        "log_l_max {:.10e}\nconverged {}\ngradient_norm {:.3e}\non_psd_boundary {}\nboundary_seeking {}\n",
        r.log_l_max, r.converged, r.gradient_norm, r.on_psd_boundary, r.boundary_seeking
    );
    let names = cfg.coordinate_names();
    if let Ok(theta) = cfg.physical_vector(&r.estimate) {
        for (n, v) in names.iter().zip(theta) {
            let _ = writeln!(s, "{n} {v:.10e}");
        }
    }
    s
}

fn samples_or_default(cfg: &ScenarioConfig, samples: Option<usize>) -> usize {
    samples.unwrap_or(cfg.sampler.prior_samples)
}

/// Best fit and prior-draw curve for one configuration.
fn fit_and_curve(d: &CountRecord, cfg: &ScenarioConfig, samples: usize, seed: u64) -> Result<(MLResult, LambdaCurve, f64)> {
    let ml = selfcal::estimation::best_ml(d, cfg, 8, seed)?;
    let set = prior_set_with_max(d, cfg, samples, seed, ml.log_l_max)?;
    let curve = curve_from_samples(&set, cfg.sampler.grid_points, cfg.sampler.bootstrap, seed)?;
    Ok((ml, curve, set.log_l_max))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate {
            common,
            truth,
            repetitions,
        } => {
            let ctx = Context::new("simulate", &common, None)?;
            let truth = reference_spec(&truth)?.to_point(&ctx.cfg)?;
            let spec = SimSpec {
                truth,
                cfg: ctx.cfg.clone(),
                seed: ctx.seed,
                repetitions: repetitions.max(1),
            };
            let records = simulate_repetitions(&spec)?;
            let mut body = String::new();
            for (i, r) in records.iter().enumerate() {
                let _ = writeln!(body, "# repetition {i} N={}\n{r}", r.total());
            }
            if ctx.out.is_some() {
                ctx.write(body.as_bytes())?;
                println!("simulated {} record(s)", records.len());
            } else {
                print!("{}{body}", ctx.header);
            }
        }
        Command::Mle {
            common,
            data,
            starts,
            nu_scan,
        } => {
            let ctx = Context::new("mle", &common, nu_scan.as_ref())?;
            let d = ingest_counts(&data.data)?;
            println!("N = {}", d.total());
            match nu_scan {
                None => {
                    let report = multi_start_ml(&d, &ctx.cfg, starts, ctx.seed)?;
                    print!("{}", ml_summary(&ctx.cfg, &report));
                    let best = &report.clusters[0].representative;
                    ctx.write(ml_artifact(&ctx.cfg, best).as_bytes())?;
                    if !best.converged {
                        return Err(Error::NotConverged {
                            gradient_norm: best.gradient_norm,
                        });
                    }
                }
                Some(scan) => {
                    let mut body = String::from("nu log_l_max clusters\n");
                    for nu in scan.values() {
                        let cfg = ctx.with_nu(nu)?;
                        let report = multi_start_ml(&d, &cfg, starts, ctx.seed)?;
                        let line = format!(
                            "{nu:.6e} {:.10e} {}",
                            report.clusters[0].representative.log_l_max,
                            report.clusters.len()
                        );
                        println!("{line}");
                        body.push_str(&line);
                        body.push('\n');
                    }
                    ctx.write(body.as_bytes())?;
                }
            }
        }
        Command::Curve {
            common,
            data,
            samples,
            nu_scan,
        } => {
            let ctx = Context::new("curve", &common, nu_scan.as_ref())?;
            let d = ingest_counts(&data.data)?;
            let n = samples_or_default(&ctx.cfg, samples);
            match nu_scan {
                None => {
                    let (_, curve, _) = fit_and_curve(&d, &ctx.cfg, n, ctx.seed)?;
                    println!(
                        "lambda_crit {}  s {}  c {}",
                        sig(curve.lambda_crit, 4),
                        sig(curve.size_crit, 4),
                        sig(curve.credibility_crit, 4)
                    );
                    let mut body = Vec::new();
                    curve.write_columns(&mut body)?;
                    ctx.write(&body)?;
                }
                Some(scan) => {
                    let mut body = String::from("nu lambda_crit s c\n");
                    for nu in scan.values() {
                        let cfg = ctx.with_nu(nu)?;
                        let (_, curve, _) = fit_and_curve(&d, &cfg, n, ctx.seed)?;
                        let line = format!(
                            "{nu:.6e} {:.6e} {:.6e} {:.6e}",
                            curve.lambda_crit, curve.size_crit, curve.credibility_crit
                        );
                        println!("{line}");
                        body.push_str(&line);
                        body.push('\n');
                    }
                    ctx.write(body.as_bytes())?;
                }
            }
        }
        Command::Slice {
            common,
            data,
            x,
            y,
            level,
            samples,
            grid,
            at,
            x_range,
            y_range,
        } => {
            let ctx = Context::new("slice", &common, None)?;
            let d = ingest_counts(&data.data)?;
            let (ml, level, log_l_max) = match level {
                Some(l) => {
                    let ml = selfcal::estimation::best_ml(&d, &ctx.cfg, 8, ctx.seed)?;
                    let m = ml.log_l_max;
                    (ml, l, m)
                }
                None => {
                    let n = samples_or_default(&ctx.cfg, samples);
                    let (ml, curve, m) = fit_and_curve(&d, &ctx.cfg, n, ctx.seed)?;
                    (ml, curve.lambda_crit, m)
                }
            };
            let fixed = match at {
                Some(spec) => reference_spec(&spec)?.to_point(&ctx.cfg)?,
                None => ml.estimate,
            };
            let req = SliceRequest {
                x,
                y,
                fixed,
                level,
                grid,
                x_range: x_range.map(|r| (r.0, r.1)),
                y_range: y_range.map(|r| (r.0, r.1)),
                log_l_max,
                ml: Some(ml.estimate),
            };
            let slice = slice_contour(&d, &ctx.cfg, &req)?;
            println!(
                "level {}  polylines {}  level_above_max {}",
                sig(level, 4),
                slice.polylines.len(),
                slice.level_above_max
            );
            let mut body = Vec::new();
            slice.write(&mut body)?;
            ctx.write(&body)?;
        }
        Command::Check {
            common,
            data,
            point,
            lambda,
            samples,
        } => {
            let ctx = Context::new("check", &common, None)?;
            let d = ingest_counts(&data.data)?;
            let p = reference_spec(&point)?.to_point(&ctx.cfg)?;
            let (lambda, log_l_max) = match lambda {
                Some(l) => (l, selfcal::estimation::best_ml(&d, &ctx.cfg, 8, ctx.seed)?.log_l_max),
                None => {
                    let (_, curve, m) = fit_and_curve(&d, &ctx.cfg, samples_or_default(&ctx.cfg, samples), ctx.seed)?;
                    (curve.lambda_crit, m)
                }
            };
            let m = membership(&p, &d, &ctx.cfg, lambda, log_l_max)?;
            let line = format!(
                "{} lambda(p) {} region level {}",
                if m.inside { "inside" } else { "outside" },
                sig(m.lambda, 4),
                sig(lambda, 4)
            );
            println!("{line}");
            ctx.write(format!("{line}\n").as_bytes())?;
        }
        Command::PriorStats { common, gamma } => {
            let ctx = Context::new("prior-stats", &common, None)?;
            let priors = ctx.cfg.priors;
            let mut entries = vec![("eta_left", priors.eta_left), ("eta_right", priors.eta_right)];
            if let Some(nu) = priors.nu {
                entries.push(("nu", nu));
            }
            let mut body = String::new();
            for (name, prior) in entries {
                let line = match prior {
                    Prior::UniformStateConstrained => continue,
                    p => {
                        let st = prior_stats(&p, gamma)?;
                        format!(
                            "{name:<10} {:<22} mean {}  sd {}  interval [{}, {}]",
                            describe(&p),
                            sig(st.mean, 3),
                            sig(st.sd, 3),
                            sig(st.interval.0, 3),
                            sig(st.interval.1, 3)
                        )
                    }
                };
                println!("{line}");
                body.push_str(&line);
                body.push('\n');
            }
            ctx.write(body.as_bytes())?;
        }
        Command::Report {
            common,
            data,
            samples,
            chains,
            posterior,
            references,
        } => {
            let ctx = Context::new("report", &common, None)?;
            let d = ingest_counts(&data.data)?;
            let refs: Vec<(String, JointPoint)> = references
                .iter()
                .map(|r| {
                    let (name, spec) = r
                        .split_once('=')
                        .ok_or_else(|| Error::InvalidConfig(format!("reference must look like NAME=FILE, got `{r}`")))?;
                    Ok((name.to_string(), reference_spec(spec)?.to_point(&ctx.cfg)?))
                })
                .collect::<Result<_>>()?;
            let settings = ReportSettings {
                samples: samples_or_default(&ctx.cfg, samples),
                seed: ctx.seed,
                posterior_draws: posterior,
                chains,
            };
            let r = plausible_region_report(&d, &ctx.cfg, &settings, &refs)?;
            let mut s = format!("N = {}\nlog L_max = {:.6}\n", d.total(), r.log_l_max);
            let _ = writeln!(
                s,
                "lambda_crit {}  s {}  c {}",
                sig(r.lambda_crit, 4),
                sig(r.size, 4),
                sig(r.credibility, 4)
            );
            if let Some(rf) = r.refined {
                let _ = writeln!(
                    s,
                    "importance-sampled s {} +- {}",
                    sig(rf.size, 3),
                    sig(rf.sd, 2)
                );
            }
            let _ = writeln!(
                s,
                "evidence: {}",
                if r.accurate() {
                    "small region with large credibility, an accurate estimate"
                } else {
                    "region not yet small and credible"
                }
            );
            for (name, m) in &r.members {
                let _ = writeln!(
                    s,
                    "{name}: {} (lambda {})",
                    if m.inside { "inside" } else { "outside" },
                    sig(m.lambda, 4)
                );
            }
            let mut columns = vec![("ML", point_column(&ctx.cfg, &r.ml.estimate))];
            for (name, p) in &refs {
                columns.push((name.as_str(), point_column(&ctx.cfg, p)));
            }
            s.push_str(&parameter_table(&ctx.cfg, &columns));
            print!("{s}");
            let mut body = s.into_bytes();
            body.extend_from_slice(b"\n");
            r.curve.write_columns(&mut body)?;
            ctx.write(&body)?;
        }
    }
    Ok(())
}

fn describe(p: &Prior) -> String {
    match *p {
        Prior::Uniform01 => "uniform(0, 1)".into(),
        Prior::UniformStateConstrained => "uniform state".into(),
        Prior::Beta { a, b } => format!("beta({a}, {b})"),
        Prior::Gamma { shape, scale } => format!("gamma({shape}, {scale})"),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
