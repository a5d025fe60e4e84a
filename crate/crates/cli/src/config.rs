//! Run configuration: a TOML document with `schema_version`, optional
//! `seed`/`output`/`format`, and exactly one experiment table.

use std::path::PathBuf;

use dnpr_core::dynamics::{
    default_injection_scale, Dephasing, Direction, FieldSweepSpec, ProtocolSpec, Pump, PumpSpec,
    RangeScanOptions, SpectrumOptions, StepControl, SweepOptions,
};
use dnpr_core::geometry::{ClusterRule, DefectEnsembleSpec, Placement};
use dnpr_core::lzmodel::{FitOptions, LZParams};
use dnpr_core::motif::MotifOptions;
use dnpr_core::presets::{CarbonPartner, ClusterPreset};
use dnpr_core::spinsys::SpinSystemSpec;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const SCHEMA_VERSION: u32 = 1;

pub const KINDS: [&str; 11] = [
    "levels",
    "crossings",
    "matching-field",
    "sweep",
    "rate-scan",
    "fraction-scan",
    "dnp-spectrum",
    "range-scan",
    "geometry",
    "fit",
    "thermal",
];

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
    #[serde(default)]
    pub format: Format,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<LevelsConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub crossings: Option<CrossingsConfig>,
    #[serde(
        default,
        rename = "matching-field",
        skip_serializing_if = "Option::is_none"
    )]
    pub matching_field: Option<MatchingConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepConfig>,
    #[serde(default, rename = "rate-scan", skip_serializing_if = "Option::is_none")]
    pub rate_scan: Option<RateScanConfig>,
    #[serde(
        default,
        rename = "fraction-scan",
        skip_serializing_if = "Option::is_none"
    )]
    pub fraction_scan: Option<FractionScanConfig>,
    #[serde(
        default,
        rename = "dnp-spectrum",
        skip_serializing_if = "Option::is_none"
    )]
    pub dnp_spectrum: Option<SpectrumConfig>,
    #[serde(
        default,
        rename = "range-scan",
        skip_serializing_if = "Option::is_none"
    )]
    pub range_scan: Option<RangeScanConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<GeometryConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fit: Option<FitConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub thermal: Option<ThermalConfig>,
}

/// Borrowed view of the single experiment of a [`RunConfig`].
#[derive(Clone, Copy, Debug)]
pub enum Experiment<'a> {
    Levels(&'a LevelsConfig),
    Crossings(&'a CrossingsConfig),
    MatchingField(&'a MatchingConfig),
    Sweep(&'a SweepConfig),
    RateScan(&'a RateScanConfig),
    FractionScan(&'a FractionScanConfig),
    DnpSpectrum(&'a SpectrumConfig),
    RangeScan(&'a RangeScanConfig),
    Geometry(&'a GeometryConfig),
    Fit(&'a FitConfig),
    Thermal(&'a ThermalConfig),
}

impl Experiment<'_> {
    pub fn kind(&self) -> &'static str {
        match self {
            Experiment::Levels(_) => "levels",
            Experiment::Crossings(_) => "crossings",
            Experiment::MatchingField(_) => "matching-field",
            Experiment::Sweep(_) => "sweep",
            Experiment::RateScan(_) => "rate-scan",
            Experiment::FractionScan(_) => "fraction-scan",
            Experiment::DnpSpectrum(_) => "dnp-spectrum",
            Experiment::RangeScan(_) => "range-scan",
            Experiment::Geometry(_) => "geometry",
            Experiment::Fit(_) => "fit",
            Experiment::Thermal(_) => "thermal",
        }
    }
}

impl RunConfig {
    pub fn experiments(&self) -> Vec<Experiment<'_>> {
        let mut v = Vec::new();
        macro_rules! push {
            ($field:ident, $variant:ident) => {
                if let Some(c) = &self.$field {
                    v.push(Experiment::$variant(c));
                }
            };
        }
        push!(levels, Levels);
        push!(crossings, Crossings);
        push!(matching_field, MatchingField);
        push!(sweep, Sweep);
        push!(rate_scan, RateScan);
        push!(fraction_scan, FractionScan);
        push!(dnp_spectrum, DnpSpectrum);
        push!(range_scan, RangeScan);
        push!(geometry, Geometry);
        push!(fit, Fit);
        push!(thermal, Thermal);
        v
    }

    /// The experiment table; errors unless exactly one is present.
    pub fn experiment(&self) -> CliResult<Experiment<'_>> {
        let e = self.experiments();
        match e.as_slice() {
            [one] => Ok(*one),
            [] => Err(CliError::Config(format!(
                "no experiment table; expected exactly one of [{}]",
                KINDS.join("], [")
            ))),
            many => Err(CliError::Config(format!(
                "exactly one experiment table allowed, found {}",
                many.iter()
                    .map(|x| format!("[{}]", x.kind()))
                    .collect::<Vec<_>>()
                    .join(", ")
            ))),
        }
    }

    pub fn validate(&self) -> CliResult<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(CliError::Config(format!(
                "schema_version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let Some(s) = self.seed {
            if s > i64::MAX as u64 {
                return Err(CliError::Config(format!("seed: {s} exceeds {}", i64::MAX)));
            }
        }
        let exp = self.experiment()?;
        let kind = exp.kind();
        let wrap = |r: CliResult<()>| {
            r.map_err(|e| match e {
                CliError::Config(m) => CliError::Config(format!("{kind}.{m}")),
                other => other,
            })
        };
        wrap(match exp {
            Experiment::Levels(c) => c.validate(),
            Experiment::Crossings(c) => c.validate(),
            Experiment::MatchingField(c) => c.validate(),
            Experiment::Sweep(c) => c.validate(),
            Experiment::RateScan(c) => c.validate(),
            Experiment::FractionScan(c) => c.validate(),
            Experiment::DnpSpectrum(c) => c.validate(),
            Experiment::RangeScan(c) => c.validate(),
            Experiment::Geometry(c) => c.validate(),
            Experiment::Fit(c) => c.validate(),
            Experiment::Thermal(c) => c.validate(),
        })
    }

    /// Canonical TOML text of the configuration.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configurations serialize to TOML")
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str) -> CliResult<RunConfig> {
    let de = toml::Deserializer::parse(text)
        .map_err(|e| CliError::Config(describe_toml_error(text, &e, None)))?;
    let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config(describe_toml_error(text, &inner, Some(&path)))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.rsplit('\n').next().map_or(0, |l| l.chars().count()) + 1;
    (line, col)
}

fn describe_toml_error(text: &str, e: &toml::de::Error, path: Option<&str>) -> String {
    let msg = e.message().trim().to_string();
    let mut out = String::new();
    if let Some(span) = e.span() {
        let (l, c) = line_col(text, span.start);
        out.push_str(&format!("line {l}, column {c}: "));
    }
    let path = path.filter(|p| !p.is_empty() && *p != ".");
    match unknown_field(&msg) {
        Some((key, expected)) => {
            let at = match path {
                // serde_path_to_error includes the unknown key itself
                Some(p) => p.to_string(),
                None => key.clone(),
            };
            out.push_str(&format!("unknown key `{at}`"));
            if let Some(best) = nearest(&key, &expected) {
                out.push_str(&format!(" (did you mean `{best}`?)"));
            }
        }
        None => {
            if let Some(p) = path {
                out.push_str(&format!("{p}: "));
            }
            out.push_str(&msg);
        }
    }
    out
}

/// Extracts the key and the expected names from serde's unknown-field message.
fn unknown_field(msg: &str) -> Option<(String, Vec<String>)> {
    let rest = msg.strip_prefix("unknown field `")?;
    let (key, tail) = rest.split_once('`')?;
    let expected = tail
        .split('`')
        .skip(1)
        .step_by(2)
        .map(str::to_string)
        .collect();
    Some((key.to_string(), expected))
}

fn nearest(key: &str, candidates: &[String]) -> Option<String> {
    candidates
        .iter()
        .map(|c| (strsim::damerau_levenshtein(key, c), c))
        .filter(|(d, c)| *d <= 2.max(c.len() / 3))
        .min_by_key(|(d, _)| *d)
        .map(|(_, c)| c.clone())
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> CliResult<()> {
    if ok {
        Ok(())
    } else {
        Err(CliError::Config(msg()))
    }
}

fn check_range(key: &str, r: [f64; 2]) -> CliResult<()> {
    check(
        r[0].is_finite() && r[1].is_finite() && r[0] >= 0.0 && r[1] > r[0],
        || format!("{key}: [{}, {}] must satisfy 0 <= lo < hi", r[0], r[1]),
    )
}

fn check_positive(key: &str, v: f64) -> CliResult<()> {
    check(v > 0.0 && v.is_finite(), || {
        format!("{key}: {v} must be positive and finite")
    })
}

fn core(key: &str, r: dnpr_core::Result<()>) -> CliResult<()> {
    r.map_err(|e| CliError::Config(format!("{key}: {e}")))
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PresetName {
    #[default]
    Trio,
    Quartet,
    Full,
    PairWithNitrogens,
}

/// A cluster preset with optional parameter overrides.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub preset: PresetName,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_nv_p1_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub d_nv_c_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nv_p1_angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carbon_angle_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub carbon_partner: Option<CarbonPartner>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p1_hyperfine_par_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p1_hyperfine_perp_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nv_hyperfine_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrupole_p1_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub quadrupole_nv_mhz: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub theta_deg: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub phi_deg: Option<f64>,
}

impl SystemConfig {
    pub fn preset(preset: PresetName) -> Self {
        SystemConfig {
            preset,
            ..Default::default()
        }
    }

    pub fn cluster(&self) -> ClusterPreset {
        let mut p = match self.preset {
            PresetName::Trio => ClusterPreset::trio(),
            PresetName::Quartet => ClusterPreset::quartet(),
            PresetName::Full => ClusterPreset::full(),
            PresetName::PairWithNitrogens => ClusterPreset::pair_with_nitrogens(),
        };
        macro_rules! set {
            ($($f:ident),*) => {
                $(if let Some(v) = self.$f { p.$f = v; })*
            };
        }
        set!(
            d_nv_p1_mhz,
            d_nv_c_mhz,
            nv_p1_angle_deg,
            carbon_angle_deg,
            carbon_partner,
            p1_hyperfine_par_mhz,
            p1_hyperfine_perp_mhz,
            nv_hyperfine_mhz,
            quadrupole_p1_mhz,
            quadrupole_nv_mhz,
            theta_deg,
            phi_deg
        );
        p
    }

    pub fn validate(&self) -> CliResult<()> {
        let p = self.cluster();
        check((0.0..=90.0).contains(&p.theta_deg), || {
            format!("system.theta_deg: {} outside [0°, 90°]", p.theta_deg)
        })?;
        check((0.0..=360.0).contains(&p.phi_deg), || {
            format!("system.phi_deg: {} outside [0°, 360°]", p.phi_deg)
        })?;
        for (k, v) in [
            ("d_nv_p1_mhz", p.d_nv_p1_mhz),
            ("d_nv_c_mhz", p.d_nv_c_mhz),
            ("nv_p1_angle_deg", p.nv_p1_angle_deg),
            ("carbon_angle_deg", p.carbon_angle_deg),
            ("p1_hyperfine_par_mhz", p.p1_hyperfine_par_mhz),
            ("p1_hyperfine_perp_mhz", p.p1_hyperfine_perp_mhz),
            ("nv_hyperfine_mhz", p.nv_hyperfine_mhz),
            ("quadrupole_p1_mhz", p.quadrupole_p1_mhz),
            ("quadrupole_nv_mhz", p.quadrupole_nv_mhz),
        ] {
            check(v.is_finite(), || format!("system.{k}: must be finite"))?;
        }
        p.build()
            .map(|_| ())
            .map_err(|e| CliError::Config(format!("system: {e}")))
    }

    pub fn build(&self) -> CliResult<SpinSystemSpec> {
        self.cluster()
            .build()
            .map_err(|e| CliError::Config(format!("system: {e}")))
    }
}

fn quartet() -> SystemConfig {
    SystemConfig::preset(PresetName::Quartet)
}

fn trio_window() -> [f64; 2] {
    [50.8, 51.6]
}

fn default_levels_points() -> usize {
    201
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LevelsConfig {
    #[serde(default)]
    pub system: SystemConfig,
    pub range_mt: [f64; 2],
    #[serde(default = "default_levels_points")]
    pub n_points: usize,
}

impl LevelsConfig {
    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        check_range("range_mt", self.range_mt)?;
        check((2..=100_000).contains(&self.n_points), || {
            format!("n_points: {} outside [2, 100000]", self.n_points)
        })
    }
}

fn default_scan_step() -> f64 {
    0.002
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossingsConfig {
    #[serde(default)]
    pub system: SystemConfig,
    pub range_mt: [f64; 2],
    #[serde(default = "default_scan_step")]
    pub scan_step_mt: f64,
    /// Lowest sorted level of a four-branch manifold whose inner and outer
    /// gaps are labeled; every adjacent pair is searched when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifold: Option<usize>,
}

impl CrossingsConfig {
    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        check_range("range_mt", self.range_mt)?;
        check_positive("scan_step_mt", self.scan_step_mt)?;
        let n = (self.range_mt[1] - self.range_mt[0]) / self.scan_step_mt;
        check(n <= 1e6, || {
            format!(
                "scan_step_mt: {} gives more than 10^6 points",
                self.scan_step_mt
            )
        })?;
        if let Some(k) = self.manifold {
            let dim: usize = self.system.build()?.dims().iter().product();
            check(k + 3 < dim, || {
                format!("manifold: {k} + 3 exceeds the {dim} levels")
            })?;
        }
        Ok(())
    }
}

fn default_thetas() -> Vec<f64> {
    (0..=8).map(|k| 5.0 * k as f64).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatchingConfig {
    #[serde(default = "default_thetas")]
    pub theta_deg: Vec<f64>,
}

impl MatchingConfig {
    fn validate(&self) -> CliResult<()> {
        check(!self.theta_deg.is_empty(), || {
            "theta_deg: empty list".into()
        })?;
        for (i, t) in self.theta_deg.iter().enumerate() {
            check((0.0..=90.0).contains(t), || {
                format!("theta_deg[{i}]: {t} outside [0°, 90°]")
            })?;
        }
        Ok(())
    }
}

fn up() -> Direction {
    Direction::Up
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default = "trio_window")]
    pub window_mt: [f64; 2],
    pub rate_mt_per_ms: f64,
    #[serde(default = "up")]
    pub direction: Direction,
    #[serde(default)]
    pub options: SweepOptions,
}

fn validate_sweep_options(o: &SweepOptions) -> CliResult<()> {
    check_positive("options.step.eps_step", o.step.eps_step)?;
    check(o.trajectory_points <= 100_000, || {
        "options.trajectory_points: above 100000".into()
    })?;
    if let Some(p) = &o.in_sweep_pump {
        core("options.in_sweep_pump", p.validate())?;
    }
    Ok(())
}

impl SweepConfig {
    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        check_range("window_mt", self.window_mt)?;
        check_positive("rate_mt_per_ms", self.rate_mt_per_ms)?;
        validate_sweep_options(&self.options)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RateScanConfig {
    #[serde(default)]
    pub system: SystemConfig,
    #[serde(default = "trio_window")]
    pub window_mt: [f64; 2],
    /// Explicit rates, mT/ms.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rates_mt_per_ms: Option<Vec<f64>>,
    /// Log-spaced grid `[lo, hi]` with `n_rates` points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rate_range: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_rates: Option<usize>,
    #[serde(default = "up")]
    pub direction: Direction,
    #[serde(default)]
    pub options: SweepOptions,
}

pub fn log_grid(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect()
}

impl RateScanConfig {
    pub fn rates(&self) -> Vec<f64> {
        match (&self.rates_mt_per_ms, self.rate_range) {
            (Some(r), _) => r.clone(),
            (None, Some([lo, hi])) => log_grid(lo, hi, self.n_rates.unwrap_or(21)),
            (None, None) => vec![],
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        check_range("window_mt", self.window_mt)?;
        match (&self.rates_mt_per_ms, self.rate_range) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give rates_mt_per_ms or rate_range, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config(
                    "rates_mt_per_ms or rate_range is required".into(),
                ))
            }
            (Some(_), None) => check(self.n_rates.is_none(), || {
                "n_rates: only valid with rate_range".into()
            })?,
            (None, Some(r)) => {
                check(r[0] > 0.0 && r[1] > r[0] && r[1].is_finite(), || {
                    format!("rate_range: [{}, {}] must satisfy 0 < lo < hi", r[0], r[1])
                })?;
                check(self.n_rates.is_none_or(|n| (5..=1000).contains(&n)), || {
                    "n_rates: outside [5, 1000]".into()
                })?;
            }
        }
        for (i, r) in self.rates().iter().enumerate() {
            check_positive(&format!("rates_mt_per_ms[{i}]"), *r)?;
        }
        let r = self.rates();
        let (lo, hi) = r
            .iter()
            .fold((f64::INFINITY, 0f64), |(a, b), &x| (a.min(x), b.max(x)));
        check(r.len() >= 5 && hi / lo >= 100.0 * (1.0 - 1e-9), || {
            "rates_mt_per_ms: need at least 5 rates spanning two decades".into()
        })?;
        validate_sweep_options(&self.options)
    }
}

fn default_t_p() -> f64 {
    10_000.0
}

fn default_t1n() -> f64 {
    5_000.0
}

fn one() -> f64 {
    1.0
}

fn default_pump() -> Pump {
    PumpSpec::default().pump
}

/// Accumulation-protocol settings shared by multi-cycle experiments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolConfig {
    #[serde(default = "default_pump")]
    pub pump: Pump,
    /// Light-pulse length; continuous illumination when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub pulse_ms: Option<f64>,
    #[serde(default = "default_t_p")]
    pub t_p_ms: f64,
    #[serde(default = "default_t1n")]
    pub t1n_ms: f64,
    /// Apply the `t1n_ms` relaxation.
    #[serde(default = "default_true")]
    pub relaxation: bool,
    #[serde(default = "one")]
    pub p_sat: f64,
    #[serde(default = "default_injection_scale")]
    pub injection_scale: f64,
    #[serde(default)]
    pub pump_during_sweep: bool,
    #[serde(default)]
    pub mid_sweep_dephasing: Dephasing,
    #[serde(default)]
    pub step: StepControl,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            pump: default_pump(),
            pulse_ms: None,
            t_p_ms: default_t_p(),
            t1n_ms: default_t1n(),
            relaxation: true,
            p_sat: 1.0,
            injection_scale: default_injection_scale(),
            pump_during_sweep: false,
            mid_sweep_dephasing: Dephasing::default(),
            step: StepControl::default(),
        }
    }
}

impl ProtocolConfig {
    pub fn protocol(&self, system: SpinSystemSpec, sweep: FieldSweepSpec) -> ProtocolSpec {
        ProtocolSpec {
            pump: PumpSpec {
                pump: self.pump,
                pulse_ms: self.pulse_ms,
            },
            t_p_ms: self.t_p_ms,
            t1n_ms: self.relaxation.then_some(self.t1n_ms),
            p_sat: self.p_sat,
            injection_scale: self.injection_scale,
            pump_during_sweep: self.pump_during_sweep,
            mid_sweep_dephasing: self.mid_sweep_dephasing.clone(),
            step: self.step.clone(),
            ..ProtocolSpec::new(system, sweep)
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FractionScanConfig {
    #[serde(default)]
    pub system: SystemConfig,
    pub sweep: FieldSweepSpec,
    /// Low-to-high fractions `t_LH / t_c`.
    pub fractions: Vec<f64>,
    #[serde(default)]
    pub protocol: ProtocolConfig,
}

impl FractionScanConfig {
    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        core("sweep", self.sweep.validate())?;
        check(!self.fractions.is_empty(), || {
            "fractions: empty list".into()
        })?;
        for (i, f) in self.fractions.iter().enumerate() {
            check(*f > 0.0 && *f < 1.0, || {
                format!("fractions[{i}]: {f} outside (0, 1)")
            })?;
        }
        let spec = self
            .protocol
            .protocol(self.system.build()?, self.sweep.clone());
        core("protocol", spec.validate())?;
        let cycles = spec.t_p_ms / spec.sweep.cycle_ms();
        check(cycles <= 1e5, || {
            format!("protocol.t_p_ms: {cycles:.0} cycles exceed 10^5")
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpectrumConfig {
    #[serde(default = "quartet")]
    pub system: SystemConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fields_mt: Option<Vec<f64>>,
    /// Uniform grid `[lo, hi]` with spacing `step_mt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub range_mt: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step_mt: Option<f64>,
    #[serde(default)]
    pub options: SpectrumOptions,
    #[serde(default)]
    pub motifs: MotifOptions,
}

impl SpectrumConfig {
    pub fn fields(&self) -> Vec<f64> {
        match (&self.fields_mt, self.range_mt) {
            (Some(f), _) => f.clone(),
            (None, Some([lo, hi])) => {
                let step = self.step_mt.unwrap_or(0.01);
                let n = ((hi - lo) / step + 1e-9).floor() as usize;
                (0..=n).map(|i| lo + step * i as f64).collect()
            }
            (None, None) => vec![],
        }
    }

    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        match (&self.fields_mt, self.range_mt) {
            (Some(_), Some(_)) => {
                return Err(CliError::Config(
                    "give fields_mt or range_mt, not both".into(),
                ))
            }
            (None, None) => {
                return Err(CliError::Config("fields_mt or range_mt is required".into()))
            }
            (Some(f), None) => {
                check(self.step_mt.is_none(), || {
                    "step_mt: only valid with range_mt".into()
                })?;
                check(!f.is_empty(), || "fields_mt: empty list".into())?;
                for (i, b) in f.iter().enumerate() {
                    check(*b >= 0.0 && b.is_finite(), || {
                        format!("fields_mt[{i}]: {b} must be >= 0")
                    })?;
                }
            }
            (None, Some(r)) => {
                check_range("range_mt", r)?;
                let step = self.step_mt.unwrap_or(0.01);
                check_positive("step_mt", step)?;
                check((r[1] - r[0]) / step <= 1e6, || {
                    "step_mt: more than 10^6 fields".into()
                })?;
            }
        }
        check(
            self.options.tau_evol_us > 0.0 && self.options.pump_cycles > 0,
            || "options: tau_evol_us must be positive and pump_cycles >= 1".into(),
        )?;
        check(
            self.motifs.smoothing_mt >= 0.0 && self.motifs.threshold_fraction >= 0.0,
            || "motifs: widths and thresholds must be non-negative".into(),
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RangeScanConfig {
    #[serde(default = "quartet")]
    pub system: SystemConfig,
    pub b_start_mt: f64,
    pub ranges_mt: Vec<f64>,
    #[serde(default = "up")]
    pub direction: Direction,
    #[serde(default)]
    pub options: RangeScanOptions,
}

impl RangeScanConfig {
    fn validate(&self) -> CliResult<()> {
        self.system.validate()?;
        check(
            self.b_start_mt >= 0.0 && self.b_start_mt.is_finite(),
            || format!("b_start_mt: {} must be >= 0", self.b_start_mt),
        )?;
        check(!self.ranges_mt.is_empty(), || {
            "ranges_mt: empty list".into()
        })?;
        for (i, r) in self.ranges_mt.iter().enumerate() {
            check(*r >= 0.0 && r.is_finite(), || {
                format!("ranges_mt[{i}]: {r} must be >= 0")
            })?;
            if self.direction == Direction::Down {
                check(*r <= self.b_start_mt, || {
                    format!("ranges_mt[{i}]: {r} sweeps below 0 mT")
                })?;
            }
        }
        check_positive(
            "options.slow_rate_mt_per_ms",
            self.options.slow_rate_mt_per_ms,
        )?;
        check_positive(
            "options.fast_rate_mt_per_ms",
            self.options.fast_rate_mt_per_ms,
        )?;
        check(self.options.n_cycles >= 1, || {
            "options.n_cycles: must be >= 1".into()
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    NnDistance,
    Coupling,
    Clusters,
    DistanceCurve,
}

fn default_count() -> f64 {
    1e4
}

/// Defect ensemble; the box is sized from `target_count` unless
/// `box_edge_nm` is given.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub p1_ppm: f64,
    pub nv_ppm: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_edge_nm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_count: Option<f64>,
    #[serde(default)]
    pub placement: Placement,
}

impl EnsembleConfig {
    pub fn spec(&self, seed: u64) -> DefectEnsembleSpec {
        let target = match (self.box_edge_nm, self.target_count) {
            (None, None) => Some(default_count()),
            (_, t) => t,
        };
        DefectEnsembleSpec {
            p1_ppm: self.p1_ppm,
            nv_ppm: self.nv_ppm,
            box_edge_nm: self.box_edge_nm,
            target_count: target,
            placement: self.placement,
            seed,
        }
    }
}

fn default_samples() -> usize {
    10_000
}

fn default_ratio() -> f64 {
    5.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub ensemble: EnsembleConfig,
    pub analysis: Analysis,
    #[serde(default = "default_samples")]
    pub n_samples: usize,
    #[serde(default)]
    pub rule: ClusterRule,
    /// Minimum pair distance for coupling statistics, nm.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub floor_nm: Option<f64>,
    /// P1 concentrations for `clusters` and `distance-curve`; the NV
    /// concentration follows from `ratio`. `clusters` uses the ensemble
    /// concentrations when empty.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ppm: Vec<f64>,
    #[serde(default = "default_ratio")]
    pub ratio: f64,
}

impl GeometryConfig {
    fn validate(&self) -> CliResult<()> {
        core("ensemble", self.ensemble.spec(0).validate())?;
        check((1..=10_000_000).contains(&self.n_samples), || {
            format!("n_samples: {} outside [1, 10^7]", self.n_samples)
        })?;
        core("rule", self.rule.validate())?;
        if let Some(f) = self.floor_nm {
            check_positive("floor_nm", f)?;
        }
        check_positive("ratio", self.ratio)?;
        for (i, p) in self.ppm.iter().enumerate() {
            check_positive(&format!("ppm[{i}]"), *p)?;
        }
        check(self.ppm.windows(2).all(|w| w[1] > w[0]), || {
            "ppm: must be ascending".into()
        })?;
        if self.analysis == Analysis::DistanceCurve {
            check(!self.ppm.is_empty(), || {
                "ppm: required for distance-curve".into()
            })?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticData {
    pub params: LZParams,
    pub rate_range: [f64; 2],
    pub n_rates: usize,
    /// Relative Gaussian noise on each amplitude.
    #[serde(default)]
    pub noise_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    /// CSV `rate_mT_per_ms,amplitude[,sigma]`, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticData>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<LZParams>,
    #[serde(default)]
    pub options: FitOptions,
}

impl FitConfig {
    fn validate(&self) -> CliResult<()> {
        match (&self.data, &self.synthetic) {
            (Some(_), Some(_)) => Err(CliError::Config("give data or synthetic, not both".into())),
            (None, None) => Err(CliError::Config("data or synthetic is required".into())),
            (Some(_), None) => Ok(()),
            (None, Some(s)) => {
                core("synthetic.params", s.params.validate())?;
                let r = s.rate_range;
                check(r[0] > 0.0 && r[1] > r[0] && r[1].is_finite(), || {
                    format!(
                        "synthetic.rate_range: [{}, {}] must satisfy 0 < lo < hi",
                        r[0], r[1]
                    )
                })?;
                check((4..=100_000).contains(&s.n_rates), || {
                    "synthetic.n_rates: outside [4, 100000]".into()
                })?;
                check(s.noise_fraction >= 0.0 && s.noise_fraction < 1.0, || {
                    format!(
                        "synthetic.noise_fraction: {} outside [0, 1)",
                        s.noise_fraction
                    )
                })
            }
        }?;
        if let Some(p) = &self.init {
            core("init", p.validate())?;
        }
        Ok(())
    }
}

fn carbon_gamma() -> f64 {
    dnpr_core::constants::GAMMA_C13_MHZ_PER_MT * 1e3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnhancementConfig {
    pub epsilon: f64,
    pub fill_fraction: f64,
    pub t_dnp_s: f64,
    pub t_thermal_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThermalConfig {
    pub field_t: f64,
    pub temperature_k: f64,
    #[serde(default = "carbon_gamma")]
    pub gamma_mhz_per_t: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub enhancement: Option<EnhancementConfig>,
}

impl ThermalConfig {
    fn validate(&self) -> CliResult<()> {
        check(self.field_t >= 0.0 && self.field_t.is_finite(), || {
            format!("field_t: {} must be >= 0", self.field_t)
        })?;
        check_positive("temperature_k", self.temperature_k)?;
        check(self.gamma_mhz_per_t.is_finite(), || {
            "gamma_mhz_per_t: must be finite".into()
        })?;
        if let Some(e) = &self.enhancement {
            check_positive("enhancement.epsilon", e.epsilon)?;
            check(e.fill_fraction > 0.0 && e.fill_fraction <= 1.0, || {
                format!(
                    "enhancement.fill_fraction: {} outside (0, 1]",
                    e.fill_fraction
                )
            })?;
            check_positive("enhancement.t_dnp_s", e.t_dnp_s)?;
            check_positive("enhancement.t_thermal_s", e.t_thermal_s)?;
        }
        Ok(())
    }
}
