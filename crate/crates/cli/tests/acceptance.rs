//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Criteria listed in `KNOWN_RED` are expected to fail for reasons recorded
//! in the project notes; they print `FAIL (known)` and do not fail the run.
//! Any other failure, or a known-red criterion that passes (`XPASS`), makes
//! the process exit nonzero.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::time::{Duration, Instant};

use dnpr_cli::accounting::{enhancement_report, thermal_polarization};
use dnpr_cli::config::{log_grid, parse_config};
use dnpr_cli::figures::{run_figure, FIGURES};
use dnpr_cli::RunOutput;
use dnpr_core::constants::{GAMMA_C13_MHZ_PER_MT, GAMMA_E_MHZ_PER_MT, NV_ZERO_FIELD_MHZ};
use dnpr_core::dynamics::*;
use dnpr_core::geometry::{nn_distances, DefectEnsembleSpec};
use dnpr_core::lzmodel::{argmax_rate, fit, FitOptions, LZParams, RateCurve};
use dnpr_core::motif::{find_motifs, MotifOptions};
use dnpr_core::presets::ClusterPreset;
use dnpr_core::spectra::{eigenlevels, matching_field, MatchingOptions};
use dnpr_core::spinsys::{Coupling, Spin, SpinSpecies, SpinSystemSpec};
use dnpr_core::C64;
use nalgebra::{DVector, Matrix3, Vector3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use statrs::function::gamma::gamma;

const KNOWN_RED: [&str; 3] = ["5", "7", "9"];
const HEALTH_TOL: f64 = 1e-9;

struct Verdict {
    id: &'static str,
    title: &'static str,
    pass: bool,
    detail: String,
    elapsed: Duration,
}

type Figures = BTreeMap<String, (RunOutput, Duration)>;

fn csv_rows(csv: &str) -> Vec<Vec<f64>> {
    csv.lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

fn payload_health(out: &RunOutput) -> StateHealth {
    serde_json::from_value(out.envelope.payload["health"].clone()).unwrap()
}

fn figure_time(figs: &Figures, prefix: &str) -> Duration {
    figs.iter()
        .filter(|(k, _)| k.starts_with(prefix))
        .map(|(_, v)| v.1)
        .sum()
}

fn criterion_1() -> (bool, String) {
    let b = matching_field(0.0, &MatchingOptions::default()).unwrap();
    let analytic = NV_ZERO_FIELD_MHZ / (2.0 * GAMMA_E_MHZ_PER_MT);
    let pass = (b - 51.21).abs() <= 0.05 && (b - analytic).abs() <= 1e-6;
    (
        pass,
        format!("B_m(0°) = {b:.6} mT, Δ/(2|γ_e|) = {analytic:.6} mT"),
    )
}

fn criterion_2() -> (bool, String) {
    let p = LZParams::new(250.0, 30.0, 15.0, 13.0).unwrap();
    let r = argmax_rate(&p).unwrap();
    (
        (r - 0.45).abs() <= 0.05,
        format!("argmax = {r:.4} mT/ms (target 0.45 ± 0.05)"),
    )
}

/// Spin 1 and spin 1/2 whose |-1, up> and |0, down> states cross at
/// 10/3 mT with gap 2c and relative slope 3 MHz/mT.
fn lz_toy(c: f64) -> SpinSystemSpec {
    let a = SpinSpecies {
        label: "A".into(),
        spin: Spin::One,
        gamma: -1.0,
        zero_field: Some(10.0),
        axis: None,
    };
    let b = SpinSpecies {
        label: "B".into(),
        spin: Spin::Half,
        gamma: 2.0,
        zero_field: None,
        axis: None,
    };
    let j = c * 2f64.sqrt();
    SpinSystemSpec {
        species: vec![a, b],
        couplings: vec![Coupling::new(
            0,
            1,
            Matrix3::from_diagonal(&Vector3::new(j, j, 0.0)),
        )],
        theta_deg: 0.0,
        phi_deg: 0.0,
    }
}

fn branch_of(spec: &SpinSystemSpec, b: f64, k: usize) -> Vec<C64> {
    let e = eigenlevels(&spec.build_hamiltonian(b).unwrap()).unwrap();
    let j = (0..e.values.len())
        .max_by(|&x, &y| {
            e.vectors[(k, x)]
                .norm_sqr()
                .total_cmp(&e.vectors[(k, y)].norm_sqr())
        })
        .unwrap();
    e.vectors.column(j).iter().copied().collect()
}

fn criterion_3(health: &mut StateHealth) -> (bool, String) {
    let (slope, crossing, start) = (3.0, 10.0 / 3.0, 4);
    let pairs = [
        (0.010, 0.05),
        (0.020, 0.25),
        (0.015, 0.5),
        (0.030, 0.75),
        (0.020, 0.95),
    ];
    let mut worst = 0f64;
    let mut span = (1f64, 0f64);
    for (c, target) in pairs {
        let v = 4.0 * PI * PI * c * c / (-f64::ln(target));
        let rate = v / (slope * 1e-3);
        let spec = lz_toy(c);
        let (b0, b1) = (crossing - 1.0, crossing + 1.0);
        let rho = DensityMatrix::pure(&branch_of(&spec, b0, start)).unwrap();
        let traj = FieldTrajectory::ramp(b0, b1, (b1 - b0) / rate).unwrap();
        let out = propagate(&rho, &spec, &traj, &StepControl::default()).unwrap();
        *health = health.merge(out.health);
        let end = DVector::from_vec(branch_of(&spec, b1, start));
        let p = (end.adjoint() * out.final_state().matrix() * &end)[(0, 0)].re;
        let analytic = (-4.0 * PI * PI * c * c / (slope * rate * 1e-3)).exp();
        worst = worst.max((p / analytic - 1.0).abs());
        span = (span.0.min(analytic), span.1.max(analytic));
    }
    let pass = worst < 0.02 && span.0 <= 0.05 + 1e-9 && span.1 >= 0.95 - 1e-9;
    (
        pass,
        format!(
            "worst relative error {:.3}% over P ∈ [{:.3}, {:.3}]",
            100.0 * worst,
            span.0,
            span.1
        ),
    )
}

const CRIT4_RATES: [f64; 4] = [0.1, 0.26, 0.5, 1.0];

fn trio_pair(rate: f64, opts: &SweepOptions) -> (SweepResult, SweepResult) {
    let spec = ClusterPreset::trio().build().unwrap();
    let s = |d| {
        single_sweep_polarization(
            &spec,
            &SweepSegment::new((50.8, 51.6), rate, d).unwrap(),
            opts,
        )
        .unwrap()
    };
    (s(Direction::Up), s(Direction::Down))
}

fn criterion_4(health: &mut StateHealth, reported: &mut Vec<(String, f64)>) -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    for rate in CRIT4_RATES {
        let (up, down) = trio_pair(rate, &SweepOptions::default());
        *health = health.merge(up.health).merge(down.health);
        reported.push((format!("sweep up {rate}"), up.p));
        reported.push((format!("sweep down {rate}"), down.p));
        let ratio = up.p.abs() / down.p.abs();
        pass &= up.p.signum() == -down.p.signum() && (0.9..=1.1).contains(&ratio);
        if rate == 0.26 {
            pass &= up.p > 0.0;
        }
        parts.push(format!("{rate}: {:+.4}/{:+.4}", up.p, down.p));
    }
    (pass, format!("P_up/P_down {}", parts.join(", ")))
}

/// Three-point moving average (two points at the ends).
fn smooth3(v: &[f64]) -> Vec<f64> {
    (0..v.len())
        .map(|i| {
            let lo = i.saturating_sub(1);
            let hi = (i + 1).min(v.len() - 1);
            v[lo..=hi].iter().sum::<f64>() / (hi - lo + 1) as f64
        })
        .collect()
}

/// Largest local maximum other than the global one, relative to the peak.
fn secondary_peak(v: &[f64]) -> f64 {
    let peak_i = (0..v.len()).max_by(|&a, &b| v[a].total_cmp(&v[b])).unwrap();
    let peak = v[peak_i];
    (0..v.len())
        .filter(|&i| i != peak_i)
        .filter(|&i| (i == 0 || v[i] > v[i - 1]) && (i + 1 == v.len() || v[i] > v[i + 1]))
        .map(|i| v[i] / peak)
        .fold(0.0, f64::max)
}

/// Log-linear interpolation of `p(rate)`.
fn interp_log(rates: &[f64], p: &[f64], r: f64) -> f64 {
    let i = rates
        .windows(2)
        .position(|w| w[0] <= r && r <= w[1])
        .unwrap();
    let t = (r.ln() - rates[i].ln()) / (rates[i + 1].ln() - rates[i].ln());
    p[i] + t * (p[i + 1] - p[i])
}

fn criterion_5(figs: &Figures, health: &mut StateHealth) -> (bool, String) {
    let mut pass = true;
    let mut parts = vec![];
    let mut optima = BTreeMap::new();
    for (name, (out, _)) in figs.iter().filter(|(k, _)| k.starts_with("fig3d_")) {
        let hf: f64 = name
            .trim_start_matches("fig3d_hf-")
            .trim_end_matches("MHz")
            .parse()
            .unwrap();
        *health = health.merge(payload_health(out));
        let rows = csv_rows(&out.csv);
        let rates: Vec<f64> = rows.iter().map(|r| r[0]).collect();
        let raw: Vec<f64> = rows.iter().map(|r| r[1]).collect();
        let sign = raw
            .iter()
            .copied()
            .max_by(|a, b| a.abs().total_cmp(&b.abs()))
            .unwrap()
            .signum();
        let p: Vec<f64> = raw.iter().map(|x| x * sign).collect();
        let decades = (rates[rates.len() - 1] / rates[0]).log10();
        let second = secondary_peak(&smooth3(&p));
        let i = (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap();
        let opt = rates[i];
        optima.insert((hf * 10.0) as i64, opt);
        let mut line = format!("hf {hf}: opt {opt:.3}, 2nd {:.0}%", 100.0 * second);
        pass &= second <= 0.1 && decades >= 2.0 - 1e-9;
        if hf >= 2.0 {
            let keep = interp_log(&rates, &p, 3.0 * opt) / p[i];
            line.push_str(&format!(", {:.0}% at 3×", 100.0 * keep));
            pass &= keep >= 0.7;
        }
        parts.push(line);
    }
    pass &= optima.len() == 4 && optima[&4] < optima[&10];
    (pass, parts.join("; "))
}

fn criterion_6(
    figs: &Figures,
    health: &mut StateHealth,
    reported: &mut Vec<(String, f64)>,
) -> (bool, String) {
    let (out, _) = &figs["fig3b_fraction-scan"];
    *health = health.merge(payload_health(out));
    let rows = csv_rows(&out.csv);
    let at = |f: f64| {
        rows.iter()
            .find(|r| (r[0] - f).abs() < 1e-5)
            .map(|r| r[1])
            .unwrap()
    };
    for r in &rows {
        reported.push((format!("fraction {:.4}", r[0]), r[1]));
    }
    let (mid, end) = (at(0.5), at(10.0 / 11.0));
    let zero = mid.abs() / end.abs();
    let mut odd = 0f64;
    for r in rows.iter().filter(|r| r[0] < 0.5 - 1e-5) {
        let (a, b) = (r[1], at(1.0 - r[0]));
        odd = odd.max((a + b).abs() / a.abs().max(b.abs()));
    }
    (
        zero <= 1e-3 && odd <= 0.1,
        format!(
            "|P(0.5)|/|P(10/11)| = {zero:.2e}, worst odd mismatch {:.2}%",
            100.0 * odd
        ),
    )
}

fn criterion_7(figs: &Figures, health: &mut StateHealth) -> (bool, String) {
    let (out, _) = &figs["fig4c_spectrum"];
    *health = health.merge(payload_health(out));
    let rows = csv_rows(&out.csv);
    let fields: Vec<f64> = rows.iter().map(|r| r[0]).collect();
    let p: Vec<f64> = rows.iter().map(|r| r[1]).collect();
    let motifs = find_motifs(&fields, &p, &MotifOptions::default()).unwrap();
    let centers: Vec<f64> = motifs.iter().map(|m| m.center_mt).collect();
    let a_zz = ClusterPreset::quartet().p1_hyperfine_par_mhz;
    let expect = a_zz / GAMMA_E_MHZ_PER_MT;
    if centers.len() < 2 {
        return (false, format!("{} motifs", centers.len()));
    }
    let half = (centers[centers.len() - 1] - centers[0]) / 2.0;
    let pass = centers.len() == 3 && (half / expect - 1.0).abs() <= 0.15;
    (
        pass,
        format!(
            "{} motifs at {:?} mT; half outer separation {half:.3} mT vs A/|γ_e| = {expect:.3} mT ({:+.0}%), A/(2|γ_e|) = {:.3} mT ({:+.1}%)",
            centers.len(),
            centers.iter().map(|c| (c * 1000.0).round() / 1000.0).collect::<Vec<_>>(),
            100.0 * (half / expect - 1.0),
            expect / 2.0,
            100.0 * (half / (expect / 2.0) - 1.0)
        ),
    )
}

fn criterion_8(health: &StateHealth, reported: &[(String, f64)]) -> (bool, String) {
    let healthy = health.trace_error <= HEALTH_TOL && health.min_eigenvalue >= -HEALTH_TOL;
    // rerun every reported polarization with half the step tolerance
    let mut halved = vec![];
    let opts = SweepOptions {
        step: StepControl::default().halved(),
        ..SweepOptions::default()
    };
    for rate in CRIT4_RATES {
        let (up, down) = trio_pair(rate, &opts);
        halved.push((format!("sweep up {rate}"), up.p));
        halved.push((format!("sweep down {rate}"), down.p));
    }
    let fig = dnpr_cli::figures::figure("fig3b").unwrap();
    let mut cfg = parse_config(fig.parts[0].1).unwrap();
    let fs = cfg.fraction_scan.as_mut().unwrap();
    fs.protocol.step = fs.protocol.step.halved();
    let out = dnpr_cli::run(&cfg, std::path::Path::new(".")).unwrap();
    for r in csv_rows(&out.csv) {
        halved.push((format!("fraction {:.4}", r[0]), r[1]));
    }
    let mut worst = (0f64, String::new());
    for (k, v) in reported {
        let h = halved.iter().find(|(n, _)| n == k).map(|x| x.1).unwrap();
        if (h - v).abs() > worst.0 {
            worst = ((h - v).abs(), k.clone());
        }
    }
    (
        healthy && worst.0 < 1e-3 && reported.len() == halved.len(),
        format!(
            "trace error {:.1e}, min eigenvalue {:.1e}; largest change on halving eps {:.1e} ({})",
            health.trace_error, health.min_eigenvalue, worst.0, worst.1
        ),
    )
}

fn criterion_9(figs: &Figures) -> (bool, String) {
    let spec = DefectEnsembleSpec::with_concentrations(50.0, 10.0).with_seed(20160101);
    let d = nn_distances(&spec, 10_000).unwrap();
    let rho = spec.p1_density();
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let oracle = gamma(4.0 / 3.0) * (4.0 * PI * rho / 3.0).powf(-1.0 / 3.0);
    let mut s = d.clone();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let ks = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = 1.0 - (-4.0 * PI * rho * x.powi(3) / 3.0).exp();
            (f - i as f64 / n).abs().max((f - (i + 1) as f64 / n).abs())
        })
        .fold(0.0, f64::max);
    let nn_ok = (mean / oracle - 1.0).abs() < 0.02 && ks < 0.02;

    let (out, _) = &figs["fig1f_clusters"];
    let pmfs = out.envelope.payload.as_array().unwrap();
    let at = |ppm: f64| {
        pmfs.iter()
            .find(|p| p["p1_ppm"].as_f64() == Some(ppm))
            .unwrap()
    };
    let mode = at(50.0)["mode"].as_u64().unwrap();
    let means: Vec<f64> = [10.0, 50.0, 200.0]
        .iter()
        .map(|&c| at(c)["pmf"]["mean"].as_f64().unwrap())
        .collect();
    let increasing = means.windows(2).all(|w| w[1] > w[0]);
    (
        nn_ok && mode == 2 && increasing,
        format!(
            "⟨d⟩ {mean:.4} vs {oracle:.4} nm, KS {ks:.4}; mode {mode} at 50/10 ppm; ⟨n⟩ over 10/50/200 ppm = {:.4}/{:.4}/{:.4} ({})",
            means[0],
            means[1],
            means[2],
            if increasing { "increasing" } else { "not increasing" }
        ),
    )
}

fn criterion_10() -> (bool, String) {
    let truth = LZParams::new(250.0, 30.0, 15.0, 13.0).unwrap();
    let rates = log_grid(0.01, 2.5, 20);
    let clean = RateCurve::from_model(&truth, &rates).unwrap();
    let p = fit(&clean, None, &FitOptions::default()).unwrap().params;
    let rel = |a: f64, b: f64| (a / b - 1.0).abs();
    let clean_err = [
        rel(p.delta0_khz, truth.delta0_khz),
        rel(p.delta1_khz, truth.delta1_khz),
        rel(p.k_khz2, truth.k_khz2),
        rel(p.p_m, truth.p_m),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let noise = Normal::new(0.0, 0.05).unwrap();
    let mut worst = (0f64, 0f64);
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps: Vec<f64> = (0..clean.len()).map(|_| noise.sample(&mut rng)).collect();
        let data = clean.map_amplitudes(|i, v| v * (1.0 + eps[i])).unwrap();
        let q = fit(&data, None, &FitOptions::default()).unwrap().params;
        worst.0 = worst.0.max(rel(q.delta0_khz, truth.delta0_khz));
        worst.1 = worst.1.max(rel(q.p_m, truth.p_m));
    }
    (
        clean_err < 0.05 && worst.0 < 0.2 && worst.1 < 0.2,
        format!(
            "noiseless worst {:.2e}; 5% noise over 50 seeds: Δ₀ {:.1}%, P_m {:.1}%",
            clean_err,
            100.0 * worst.0,
            100.0 * worst.1
        ),
    )
}

fn criterion_11() -> (bool, String) {
    let p = thermal_polarization(9.0, 300.0, GAMMA_C13_MHZ_PER_MT * 1e3);
    let r = enhancement_report(30.0, 1.0 / 50.0, 15.0, 1800.0, p);
    let local_ratio = r.local_polarization / 1e-2;
    let pass = (p / 7.7e-6 - 1.0).abs() <= 0.01 && (1.0 / 1.5..=1.5).contains(&local_ratio);
    (
        pass,
        format!(
            "P_th = {p:.4e}; local polarization {:.3e} (×{local_ratio:.2} of 1%); gain {:.1} vs quoted {}",
            r.local_polarization, r.gain, r.quoted_gain
        ),
    )
}

fn criterion_12(figs: &Figures) -> (bool, String) {
    let mut bad = vec![];
    for fig in FIGURES {
        for (name, out) in run_figure(fig.name, None).unwrap() {
            if figs[&name].0.csv != out.csv {
                bad.push(name);
            }
        }
    }
    (
        bad.is_empty(),
        format!("{} outputs compared; differing: {bad:?}", figs.len()),
    )
}

fn timed(f: impl FnOnce() -> (bool, String)) -> (bool, String, Duration) {
    let t = Instant::now();
    let (p, d) = f();
    (p, d, t.elapsed())
}

fn within(limit_s: f64, (pass, detail, t): (bool, String, Duration)) -> (bool, String, Duration) {
    let ok = t.as_secs_f64() < limit_s;
    let detail = if ok {
        detail
    } else {
        format!(
            "{detail}; runtime {:.1} s exceeds {limit_s} s",
            t.as_secs_f64()
        )
    };
    (pass && ok, detail, t)
}

fn main() {
    // libtest-style filters are not supported; `--list` reports nothing
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    let start = Instant::now();
    let mut figs = Figures::new();
    for fig in FIGURES {
        let t = Instant::now();
        let parts = run_figure(fig.name, None).unwrap_or_else(|e| panic!("{}: {e}", fig.name));
        let each = t.elapsed() / parts.len() as u32;
        eprintln!("{}: {:.1} s", fig.name, t.elapsed().as_secs_f64());
        for (name, out) in parts {
            figs.insert(name, (out, each));
        }
    }

    let mut health = StateHealth::default();
    let mut reported = vec![];
    let mut verdicts = vec![];
    let mut push = |id, title, (pass, detail, elapsed): (bool, String, Duration)| {
        verdicts.push(Verdict {
            id,
            title,
            pass,
            detail,
            elapsed,
        })
    };
    push("1", "matching field", within(1.0, timed(criterion_1)));
    push(
        "2",
        "transfer-model optimum",
        within(1.0, timed(criterion_2)),
    );
    push(
        "3",
        "Landau-Zener oracle",
        within(10.0, timed(|| criterion_3(&mut health))),
    );
    push(
        "4",
        "direction antisymmetry",
        within(120.0, timed(|| criterion_4(&mut health, &mut reported))),
    );
    let (p, d, t) = timed(|| criterion_5(&figs, &mut health));
    push(
        "5",
        "rate-scan shape",
        within(600.0, (p, d, t + figure_time(&figs, "fig3d"))),
    );
    let (p, d, t) = timed(|| criterion_6(&figs, &mut health, &mut reported));
    push(
        "6",
        "fraction-scan zero crossing",
        within(300.0, (p, d, t + figure_time(&figs, "fig3b"))),
    );
    let (p, d, t) = timed(|| criterion_7(&figs, &mut health));
    push(
        "7",
        "DNP spectrum motifs",
        within(1800.0, (p, d, t + figure_time(&figs, "fig4c"))),
    );
    // range scans also feed the health check
    for (_, (out, _)) in figs
        .iter()
        .filter(|(k, _)| k.starts_with("fig4e") || k.starts_with("fig1e"))
    {
        health = health.merge(payload_health(out));
    }
    push(
        "8",
        "state health",
        timed(|| criterion_8(&health, &reported)),
    );
    let (p, d, t) = timed(|| criterion_9(&figs));
    push(
        "9",
        "geometry oracles",
        within(120.0, (p, d, t + figure_time(&figs, "fig1f"))),
    );
    push("10", "fit round trip", within(60.0, timed(criterion_10)));
    push(
        "11",
        "thermal and enhancement accounting",
        within(1.0, timed(criterion_11)),
    );
    push("12", "figure determinism", timed(|| criterion_12(&figs)));

    let mut unexpected = 0;
    for v in &verdicts {
        let known = KNOWN_RED.contains(&v.id);
        let tag = match (v.pass, known) {
            (true, false) => "PASS",
            (true, true) => {
                unexpected += 1;
                "XPASS"
            }
            (false, true) => "FAIL (known, see notes)",
            (false, false) => {
                unexpected += 1;
                "FAIL"
            }
        };
        println!(
            "{tag}  criterion {:>2} {} [{:.1} s]: {}",
            v.id,
            v.title,
            v.elapsed.as_secs_f64(),
            v.detail
        );
    }
    println!(
        "acceptance finished in {:.1} s",
        start.elapsed().as_secs_f64()
    );
    if unexpected > 0 {
        println!("{unexpected} unexpected result(s)");
        std::process::exit(1);
    }
}
