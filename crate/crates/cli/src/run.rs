//! Experiment dispatch and the result envelope.

use std::path::Path;
use std::time::Instant;

use dnpr_core::dynamics::{
    dnp_spectrum, fraction_scan, rate_scan, single_sweep_polarization, sweep_range_scan,
    StateHealth, SweepSegment,
};
use dnpr_core::geometry::{
    cluster_distribution, coupling_stats, mean_distance_vs_concentration, nn_distance_stats,
    DefectEnsembleSpec,
};
use dnpr_core::lzmodel::{argmax_rate, eval, fit, RateCurve};
use dnpr_core::motif::find_motifs;
use dnpr_core::spectra::{
    find_crossings, lac_gaps, level_diagram, matching_field, CrossingSearch, MatchingOptions,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::accounting::{enhancement_report, thermal_polarization};
use crate::config::*;
use crate::error::{CliError, CliResult};

/// Health tolerance below which a warning is attached to the result.
pub const HEALTH_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultEnvelope {
    pub tool_version: String,
    pub kind: String,
    /// The configuration as run, with the seed filled in.
    pub config: RunConfig,
    /// Canonical TOML of `config`; `config_hash` is its SHA-256.
    pub config_toml: String,
    pub config_hash: String,
    pub seed: u64,
    pub wall_time_s: f64,
    pub warnings: Vec<String>,
    pub payload: Value,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub csv: String,
    pub envelope: ResultEnvelope,
}

pub fn sha256_hex(text: &str) -> String {
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Fills in a missing seed; returns the seed and whether it was generated.
pub fn resolve_seed(config: &mut RunConfig) -> (u64, bool) {
    match config.seed {
        Some(s) => (s, false),
        None => {
            let s = rand::random::<u64>() >> 1;
            config.seed = Some(s);
            (s, true)
        }
    }
}

struct Outcome {
    csv: String,
    payload: Value,
    warnings: Vec<String>,
}

impl Outcome {
    fn new(csv: String, payload: impl Serialize) -> CliResult<Self> {
        let payload = serde_json::to_value(payload)
            .map_err(|e| CliError::Runtime(format!("result serialization: {e}")))?;
        Ok(Outcome {
            csv,
            payload,
            warnings: vec![],
        })
    }

    fn health(mut self, h: &StateHealth) -> Self {
        if !h.is_healthy(HEALTH_TOL) {
            self.warnings.push(format!(
                "state health outside {HEALTH_TOL:e}: trace {:e}, hermiticity {:e}, min eigenvalue {:e}",
                h.trace_error, h.hermiticity_error, h.min_eigenvalue
            ));
        }
        self
    }
}

/// Runs a validated configuration. Relative paths inside the config resolve
/// against `base_dir`.
pub fn run(config: &RunConfig, base_dir: &Path) -> CliResult<RunOutput> {
    config.validate()?;
    let mut config = config.clone();
    let (seed, generated) = resolve_seed(&mut config);
    let exp = config.experiment()?;
    let kind = exp.kind();
    let start = Instant::now();
    let ctx = |e: dnpr_core::Error| CliError::from_core(kind, e);
    let mut out = match exp {
        Experiment::Levels(c) => run_levels(c).map_err(ctx)?,
        Experiment::Crossings(c) => run_crossings(c).map_err(ctx)?,
        Experiment::MatchingField(c) => run_matching(c).map_err(ctx)?,
        Experiment::Sweep(c) => run_sweep(c).map_err(ctx)?,
        Experiment::RateScan(c) => run_rate_scan(c).map_err(ctx)?,
        Experiment::FractionScan(c) => run_fraction_scan(c).map_err(ctx)?,
        Experiment::DnpSpectrum(c) => run_spectrum(c).map_err(ctx)?,
        Experiment::RangeScan(c) => run_range_scan(c).map_err(ctx)?,
        Experiment::Geometry(c) => run_geometry(c, seed).map_err(ctx)?,
        Experiment::Fit(c) => run_fit(c, seed, base_dir)?,
        Experiment::Thermal(c) => run_thermal(c).map_err(ctx)?,
    };
    if generated {
        out.warnings
            .insert(0, format!("no seed given; generated seed {seed}"));
    }
    let config_toml = config.to_toml();
    let envelope = ResultEnvelope {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        kind: kind.to_string(),
        config_hash: sha256_hex(&config_toml),
        config_toml,
        config,
        seed,
        wall_time_s: start.elapsed().as_secs_f64(),
        warnings: out.warnings,
        payload: out.payload,
    };
    Ok(RunOutput {
        csv: out.csv,
        envelope,
    })
}

type Step<T> = dnpr_core::Result<T>;

fn cli_to_core(e: CliError) -> dnpr_core::Error {
    dnpr_core::Error::Config(match e {
        CliError::Config(m) | CliError::Runtime(m) | CliError::Io(m) => m,
    })
}

fn outcome(csv: String, payload: impl Serialize) -> Step<Outcome> {
    Outcome::new(csv, payload).map_err(cli_to_core)
}

fn run_levels(c: &LevelsConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let d = level_diagram(&spec, (c.range_mt[0], c.range_mt[1]), c.n_points, false)?;
    outcome(d.to_csv(), &d)
}

fn run_crossings(c: &CrossingsConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let range = (c.range_mt[0], c.range_mt[1]);
    let report = match c.manifold {
        Some(k) => lac_gaps(&spec, range, k)?,
        None => find_crossings(
            &spec,
            &CrossingSearch {
                scan_step_mt: c.scan_step_mt,
                ..CrossingSearch::new(range)
            },
        )?,
    };
    outcome(report.to_csv(), &report)
}

fn run_matching(c: &MatchingConfig) -> Step<Outcome> {
    let opts = MatchingOptions::default();
    let fields = c
        .theta_deg
        .iter()
        .map(|&t| matching_field(t, &opts))
        .collect::<Step<Vec<f64>>>()?;
    let mut csv = String::from("theta_deg,B_m_mT\n");
    for (t, b) in c.theta_deg.iter().zip(&fields) {
        csv.push_str(&format!("{t},{b:.9}\n"));
    }
    outcome(csv, json!({ "theta_deg": c.theta_deg, "b_m_mt": fields }))
}

fn run_sweep(c: &SweepConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let seg = SweepSegment::new(
        (c.window_mt[0], c.window_mt[1]),
        c.rate_mt_per_ms,
        c.direction,
    )?;
    let r = single_sweep_polarization(&spec, &seg, &c.options)?;
    let o = outcome(
        r.to_csv(),
        json!({ "p": r.p, "p_raw": r.p_raw, "steps": r.steps, "health": r.health }),
    )?;
    Ok(o.health(&r.health))
}

fn run_rate_scan(c: &RateScanConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let s = rate_scan(
        &spec,
        (c.window_mt[0], c.window_mt[1]),
        &c.rates(),
        c.direction,
        &c.options,
    )?;
    let o = outcome(
        s.to_csv(),
        json!({ "rates_mt_per_ms": s.rates_mt_per_ms, "p": s.p, "argmax_mt_per_ms": s.argmax(), "health": s.health }),
    )?;
    Ok(o.health(&s.health))
}

fn run_fraction_scan(c: &FractionScanConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let protocol = c.protocol.protocol(spec, c.sweep.clone());
    let s = fraction_scan(&protocol, &c.fractions)?;
    let o = outcome(s.to_csv(), &s)?;
    Ok(o.health(&s.health))
}

fn run_spectrum(c: &SpectrumConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let s = dnp_spectrum(&spec, &c.fields(), &c.options)?;
    let mut warnings = vec![];
    let motifs = match find_motifs(&s.fields_mt, &s.p, &c.motifs) {
        Ok(m) => Some(m),
        Err(e) => {
            warnings.push(format!("motif search skipped: {e}"));
            None
        }
    };
    let mut o = outcome(
        s.to_csv("B0_mT"),
        json!({ "fields_mt": s.fields_mt, "p": s.p, "health": s.health, "motifs": motifs }),
    )?;
    o.warnings.extend(warnings);
    Ok(o.health(&s.health))
}

fn run_range_scan(c: &RangeScanConfig) -> Step<Outcome> {
    let spec = c.system.build().map_err(cli_to_core)?;
    let s = sweep_range_scan(&spec, c.b_start_mt, &c.ranges_mt, c.direction, &c.options)?;
    let o = outcome(s.to_csv("deltaB_mT"), &s)?;
    Ok(o.health(&s.health))
}

fn run_geometry(c: &GeometryConfig, seed: u64) -> Step<Outcome> {
    let base = c.ensemble.spec(seed);
    match c.analysis {
        Analysis::NnDistance => {
            let s = nn_distance_stats(&base, c.n_samples)?;
            outcome(s.histogram.to_csv("nm"), &s)
        }
        Analysis::Coupling => {
            let s = coupling_stats(&base, c.n_samples, c.floor_nm)?;
            outcome(s.histogram.to_csv("MHz"), &s)
        }
        Analysis::Clusters => {
            let concentrations: Vec<(f64, f64)> = if c.ppm.is_empty() {
                vec![(base.p1_ppm, base.nv_ppm)]
            } else {
                c.ppm.iter().map(|&p| (p, p / c.ratio)).collect()
            };
            let mut csv = String::from("p1_ppm,nv_ppm,n,probability\n");
            let mut pmfs = vec![];
            for (p1, nv) in concentrations {
                let spec = DefectEnsembleSpec {
                    p1_ppm: p1,
                    nv_ppm: nv,
                    ..base.clone()
                };
                let pmf = cluster_distribution(&spec, &c.rule, c.n_samples)?;
                for (n, p) in &pmf.pmf {
                    csv.push_str(&format!("{p1},{nv},{n},{p:.9e}\n"));
                }
                pmfs.push(json!({ "p1_ppm": p1, "nv_ppm": nv, "mode": pmf.mode(), "pmf": pmf }));
            }
            outcome(csv, pmfs)
        }
        Analysis::DistanceCurve => {
            let d = mean_distance_vs_concentration(&base, &c.ppm, c.ratio, c.n_samples)?;
            outcome(d.to_csv(), &d)
        }
    }
}

fn run_fit(c: &FitConfig, seed: u64, base_dir: &Path) -> CliResult<Outcome> {
    let ctx = |e: dnpr_core::Error| CliError::from_core("fit", e);
    let data = match (&c.data, &c.synthetic) {
        (Some(path), _) => {
            let full = base_dir.join(path);
            let text = std::fs::read_to_string(&full).map_err(|e| {
                CliError::Io(format!("fit.data: cannot read {}: {e}", full.display()))
            })?;
            RateCurve::from_csv(&text).map_err(ctx)?
        }
        (None, Some(s)) => {
            let rates = log_grid(s.rate_range[0], s.rate_range[1], s.n_rates);
            let clean = RateCurve::from_model(&s.params, &rates).map_err(ctx)?;
            if s.noise_fraction > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let noise = Normal::new(0.0, s.noise_fraction)
                    .map_err(|e| CliError::Config(format!("fit: {e}")))?;
                let eps: Vec<f64> = (0..clean.len()).map(|_| noise.sample(&mut rng)).collect();
                clean
                    .map_amplitudes(|i, v| v * (1.0 + eps[i]))
                    .map_err(ctx)?
            } else {
                clean
            }
        }
        (None, None) => {
            return Err(CliError::Config(
                "fit: data or synthetic is required".into(),
            ))
        }
    };
    let report = fit(&data, c.init, &c.options).map_err(ctx)?;
    let mut csv = String::from("rate_mT_per_ms,amplitude,model_amplitude,residual\n");
    for p in data.points() {
        let m = eval(&report.params, p.rate_mt_per_ms).map_err(ctx)?;
        csv.push_str(&format!(
            "{:.9e},{:.9e},{:.9e},{:.9e}\n",
            p.rate_mt_per_ms,
            p.amplitude,
            m,
            m - p.amplitude
        ));
    }
    let argmax = argmax_rate(&report.params).map_err(ctx)?;
    let mut o = Outcome::new(
        csv,
        json!({ "fit": report, "argmax_mt_per_ms": argmax, "data": data }),
    )?;
    if !report.converged {
        o.warnings.push(format!(
            "fit stopped without convergence: {}",
            report.termination
        ));
    }
    Ok(o)
}

fn run_thermal(c: &ThermalConfig) -> Step<Outcome> {
    let p = thermal_polarization(c.field_t, c.temperature_k, c.gamma_mhz_per_t);
    let mut header = String::from("B_T,T_K,gamma_MHz_per_T,P_thermal");
    let mut row = format!(
        "{},{},{},{:.9e}",
        c.field_t, c.temperature_k, c.gamma_mhz_per_t, p
    );
    let report = c.enhancement.as_ref().map(|e| {
        let r = enhancement_report(e.epsilon, e.fill_fraction, e.t_dnp_s, e.t_thermal_s, p);
        header.push_str(",epsilon,fill_fraction,t_dnp_s,t_thermal_s,P_local,gain,gain_quoted");
        row.push_str(&format!(
            ",{},{},{},{},{:.9e},{:.9e},{}",
            r.epsilon,
            r.fill_fraction,
            r.t_dnp_s,
            r.t_thermal_s,
            r.local_polarization,
            r.gain,
            r.quoted_gain
        ));
        r
    });
    outcome(
        format!("{header}\n{row}\n"),
        json!({ "p_thermal": p, "enhancement": report }),
    )
}
