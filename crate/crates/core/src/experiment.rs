//! Scenario files, bundled data sets and count simulation.

use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Poisson;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::CountRecord;
use crate::model::{
    normalize_ratios, CorrelationVector, DetectorSide, EfficiencyModel, JointPoint, NuMode,
    SamplerSettings, ScenarioConfig, Tolerances,
};
use crate::priors::PriorSpec;
use crate::probability::{outcome_probabilities, recorded_cell, RECORDED, SIDE_OUTCOMES};
use crate::rng::stream_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeTag {
    KnownNu,
    UnknownNu,
}

/// On-disk scenario description (TOML).
///
/// ```toml
/// mode = "unknown_nu"            # or "known_nu" (then `nu` or --nu is required)
/// efficiencies = "fixed_ratios"  # or "free"
/// ratios_left = [0.7064, 0.5242, 1.0, 0.3419]
/// ratios_right = [0.7518, 0.7520, 0.6969, 1.0]
///
/// [priors]
/// eta_left = { kind = "beta", a = 1.5, b = 8001.0 }
/// eta_right = { kind = "beta", a = 56.0, b = 16.0 }
/// nu = { kind = "gamma", shape = 100.0, scale = 5000.0 }
///
/// [sampler]      # optional, see SamplerSettings
/// [tolerances]   # optional, see Tolerances
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub mode: ModeTag,
    #[serde(default)]
    pub nu: Option<f64>,
    #[serde(default)]
    pub nu_reference: Option<f64>,
    #[serde(default)]
    pub efficiencies: EfficiencyModel,
    #[serde(default = "unit_ratios")]
    pub ratios_left: [f64; 4],
    #[serde(default = "unit_ratios")]
    pub ratios_right: [f64; 4],
    #[serde(default = "PriorSpec::uniform")]
    pub priors: PriorSpec,
    #[serde(default)]
    pub sampler: SamplerSettings,
    #[serde(default)]
    pub tolerances: Tolerances,
}

fn unit_ratios() -> [f64; 4] {
    [1.0; 4]
}

fn line_column(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, column)
}

/// Reads a text file; errors name the file.
pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn parse_error(text: &str, e: toml::de::Error) -> Error {
    let (line, column) = e.span().map_or((0, 0), |s| line_column(text, s.start));
    Error::Parse {
        line,
        column,
        message: e.message().to_string(),
    }
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| parse_error(text, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&read_file(path.as_ref())?)
    }

    /// Builds the scenario; `nu` overrides the file's value in known-ν mode.
    pub fn build(&self, nu: Option<f64>) -> Result<ScenarioConfig> {
        let nu_mode = match self.mode {
            ModeTag::KnownNu => NuMode::Known {
                nu: nu.or(self.nu).ok_or_else(|| {
                    Error::InvalidConfig("known-nu scenario needs a value for nu".into())
                })?,
            },
            ModeTag::UnknownNu => NuMode::Unknown,
        };
        let nu_reference = self
            .nu_reference
            .or(self.priors.nu.map(|p| p.mean()))
            .unwrap_or(1.0);
        let cfg = ScenarioConfig {
            nu_mode,
            nu_reference,
            efficiencies: self.efficiencies,
            ratios_left: normalize_ratios(self.ratios_left)?,
            ratios_right: normalize_ratios(self.ratios_right)?,
            priors: self.priors,
            sampler: self.sampler,
            tolerances: self.tolerances,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Reads a count file.
pub fn ingest_counts(path: impl AsRef<Path>) -> Result<CountRecord> {
    read_file(path.as_ref())?.parse()
}

/// A parameter point as written in reference tables: the eight correlators,
/// one scale per side and, for unknown-ν scenarios, ν.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferencePoint {
    pub b_x: f64,
    pub b_z: f64,
    pub a_x: f64,
    pub a_z: f64,
    pub c_xx: f64,
    pub c_xz: f64,
    pub c_zx: f64,
    pub c_zz: f64,
    pub eta_left: f64,
    pub eta_right: f64,
    #[serde(default)]
    pub nu: Option<f64>,
}

impl ReferencePoint {
    pub fn state(&self) -> CorrelationVector {
        CorrelationVector {
            b_x: self.b_x,
            b_z: self.b_z,
            a_x: self.a_x,
            a_z: self.a_z,
            c_xx: self.c_xx,
            c_xz: self.c_xz,
            c_zx: self.c_zx,
            c_zz: self.c_zz,
        }
    }

    /// The point under the scenario's fixed ratios.
    pub fn to_point(&self, cfg: &ScenarioConfig) -> Result<JointPoint> {
        let nu = match cfg.nu_mode {
            NuMode::Known { .. } => None,
            NuMode::Unknown => self.nu,
        };
        JointPoint::new(
            self.state(),
            DetectorSide::new(cfg.ratios_left, self.eta_left)?,
            DetectorSide::new(cfg.ratios_right, self.eta_right)?,
            nu,
        )
    }
}

/// Reads a reference point from a TOML file. `table` is a dotted path to
/// the table holding it, e.g. `scenario_b.mock_true`; `None` reads the top
/// level.
pub fn load_reference_point(path: impl AsRef<Path>, table: Option<&str>) -> Result<ReferencePoint> {
    let text = read_file(path.as_ref())?;
    let mut value: toml::Value = toml::from_str(&text).map_err(|e| parse_error(&text, e))?;
    if let Some(table) = table {
        for key in table.split('.') {
            value = value
                .get(key)
                .cloned()
                .ok_or_else(|| Error::InvalidConfig(format!("no table `{table}` in reference file")))?;
        }
    }
    value
        .try_into()
        .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("reference point `{}`: {}", table.unwrap_or(""), e.message())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferencePair {
    pub mock_true: ReferencePoint,
    pub ml: ReferencePoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceTable {
    pub scenario_a: ReferencePair,
    pub scenario_b: ReferencePair,
}

/// Data sets and scenario files shipped with the crate.
pub mod fixtures {
    use super::*;

    pub const SCENARIO_A_COUNTS: &str = include_str!("../fixtures/scenario_a.counts");
    pub const SCENARIO_B_COUNTS: &str = include_str!("../fixtures/scenario_b.counts");
    pub const MULTIMODAL_COUNTS: &str = include_str!("../fixtures/multimodal.counts");
    pub const SCENARIO_A_CONFIG: &str = include_str!("../fixtures/scenario_a.toml");
    pub const SCENARIO_B_CONFIG: &str = include_str!("../fixtures/scenario_b.toml");
    pub const MULTIMODAL_CONFIG: &str = include_str!("../fixtures/multimodal.toml");
    pub const REFERENCE_POINTS: &str = include_str!("../fixtures/reference_points.toml");

    pub fn scenario_a_counts() -> CountRecord {
        SCENARIO_A_COUNTS.parse().expect("bundled data parse")
    }

    pub fn scenario_b_counts() -> CountRecord {
        SCENARIO_B_COUNTS.parse().expect("bundled data parse")
    }

    pub fn multimodal_counts() -> CountRecord {
        MULTIMODAL_COUNTS.parse().expect("bundled data parse")
    }

    /// Scenario A at a chosen ν.
    pub fn scenario_a_config(nu: f64) -> Result<ScenarioConfig> {
        ConfigFile::parse(SCENARIO_A_CONFIG)?.build(Some(nu))
    }

    pub fn scenario_b_config() -> ScenarioConfig {
        ConfigFile::parse(SCENARIO_B_CONFIG)
            .and_then(|c| c.build(None))
            .expect("bundled config")
    }

    /// Free-efficiency scenario at a chosen ν.
    pub fn multimodal_config(nu: f64) -> Result<ScenarioConfig> {
        ConfigFile::parse(MULTIMODAL_CONFIG)?.build(Some(nu))
    }

    pub fn reference_points() -> ReferenceTable {
        toml::from_str(REFERENCE_POINTS).expect("bundled reference table")
    }
}

/// What to simulate.
#[derive(Debug, Clone)]
pub struct SimSpec {
    pub truth: JointPoint,
    pub cfg: ScenarioConfig,
    pub seed: u64,
    pub repetitions: usize,
}

/// Independent Poisson counts with means `ν·p_k`.
pub fn poisson_counts<R: Rng + ?Sized>(p: &JointPoint, nu: f64, rng: &mut R) -> Result<CountRecord> {
    let probs = outcome_probabilities(p)?.recorded();
    let mut n = [0u64; RECORDED];
    for (k, &pk) in probs.iter().enumerate() {
        let mean = nu * pk;
        if mean > 0.0 {
            let draw: f64 = Poisson::new(mean)
                .map_err(|e| Error::InvalidConfig(e.to_string()))?
                .sample(rng);
            n[k] = draw as u64;
        }
    }
    Ok(CountRecord::new(n))
}

/// Slow reference simulator: draws the total number of pairs, assigns each
/// pair one of the 25 outcomes and discards double-null events.
pub fn explicit_pair_counts<R: Rng + ?Sized>(p: &JointPoint, nu: f64, rng: &mut R) -> Result<CountRecord> {
    let table = outcome_probabilities(p)?;
    let pairs = if nu > 0.0 {
        let d: f64 = Poisson::new(nu)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?
            .sample(rng);
        d as u64
    } else {
        0
    };
    let weights: Vec<f64> = table.as_array().iter().flatten().map(|x| x.max(0.0)).collect();
    let mut cells = [[0u64; SIDE_OUTCOMES]; SIDE_OUTCOMES];
    if pairs > 0 {
        let pick = WeightedIndex::new(&weights).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        for _ in 0..pairs {
            let c = pick.sample(rng);
            cells[c / SIDE_OUTCOMES][c % SIDE_OUTCOMES] += 1;
        }
    }
    Ok(CountRecord::new(std::array::from_fn(|k| {
        let (j, l) = recorded_cell(k);
        cells[j][l]
    })))
}

/// One count record; repetition 0 of [`simulate_repetitions`].
pub fn simulate_counts(spec: &SimSpec) -> Result<CountRecord> {
    let nu = spec.truth.effective_nu(&spec.cfg)?;
    poisson_counts(&spec.truth, nu, &mut stream_rng(spec.seed, 0))
}

/// `spec.repetitions` independent records, one seed stream each.
pub fn simulate_repetitions(spec: &SimSpec) -> Result<Vec<CountRecord>> {
    let nu = spec.truth.effective_nu(&spec.cfg)?;
    (0..spec.repetitions)
        .into_par_iter()
        .map(|r| poisson_counts(&spec.truth, nu, &mut stream_rng(spec.seed, r as u64)))
        .collect()
}

/// Geometric grid of ν values, `lo:hi:steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NuScan {
    pub lo: f64,
    pub hi: f64,
    pub steps: usize,
}

impl NuScan {
    pub fn values(&self) -> Vec<f64> {
        if self.steps <= 1 {
            return vec![self.lo];
        }
        let r = (self.hi / self.lo).ln() / (self.steps - 1) as f64;
        (0..self.steps).map(|i| self.lo * (r * i as f64).exp()).collect()
    }
}

impl std::str::FromStr for NuScan {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidConfig(format!("nu scan must look like lo:hi:steps, got `{s}`"));
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(bad());
        }
        let lo: f64 = parts[0].parse().map_err(|_| bad())?;
        let hi: f64 = parts[1].parse().map_err(|_| bad())?;
        let steps: usize = parts[2].parse().map_err(|_| bad())?;
        if !(lo > 0.0 && hi >= lo && steps >= 1) {
            return Err(bad());
        }
        Ok(Self { lo, hi, steps })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_fixtures_load() {
        assert_eq!(fixtures::scenario_a_counts().total(), 66);
        assert_eq!(fixtures::scenario_b_counts().total(), 300_898);
        let refs = fixtures::reference_points();
        let cfg = fixtures::scenario_b_config();
        let p = refs.scenario_b.mock_true.to_point(&cfg).unwrap();
        assert_eq!(p.nu, Some(500_000.0));
        assert!((cfg.nu_reference - 500_000.0).abs() < 1e-9);
        assert!(fixtures::scenario_a_config(100.0).is_ok());
        assert!(fixtures::multimodal_config(100.0).is_ok());
    }

    #[test]
    fn known_nu_config_requires_nu() {
        let c = ConfigFile::parse(fixtures::SCENARIO_A_CONFIG).unwrap();
        assert!(matches!(c.build(None), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn config_errors_carry_position() {
        let err = ConfigFile::parse("mode = \"known_nu\"\nbogus = 3\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_rate_gives_zero_counts() {
        let side = DetectorSide::uniform(0.0).unwrap();
        let p = JointPoint::new(CorrelationVector::zero(), side, side, None).unwrap();
        let mut rng = stream_rng(1, 0);
        assert_eq!(poisson_counts(&p, 1e6, &mut rng).unwrap().total(), 0);
        let live = DetectorSide::uniform(0.9).unwrap();
        let q = JointPoint::new(CorrelationVector::zero(), live, live, None).unwrap();
        assert_eq!(poisson_counts(&q, 0.0, &mut rng).unwrap().total(), 0);
        assert_eq!(explicit_pair_counts(&q, 0.0, &mut rng).unwrap().total(), 0);
    }

    #[test]
    fn nu_scan_parses() {
        let s: NuScan = "10:1000:3".parse().unwrap();
        let v = s.values();
        assert!((v[1] - 100.0).abs() < 1e-9 && (v[2] - 1000.0).abs() < 1e-9);
        assert!("10:5:3".parse::<NuScan>().is_err());
        assert!("10:50".parse::<NuScan>().is_err());
    }
}
