//! Closed-form sweep-rate transfer model and its least-squares fit.
//!
//! For a sweep rate `r` the model reads
//!
//! ```text
//! Q = exp(-D0² / (|γe| r))                 wide-gap jump probability
//! q = exp(-D1² / (|γe| r)) (1 - Q)         narrow-gap jump probability
//! g = Pm (1 - exp(-|γe| r / k))            cycle-count prefactor
//! P = g q (1 - Q)
//! ```
//!
//! with every exponent evaluated in cyclic SI units: gaps in Hz,
//! `|γe| = 2.80249e10 Hz/T`, `r` in T/s (numerically equal to mT/ms) and `k`
//! in s⁻² (1 kHz² = 1e6 s⁻²).

use std::io::Read;

use levenberg_marquardt::{LeastSquaresProblem, LevenbergMarquardt};
use nalgebra::{Dyn, Matrix, OMatrix, OVector, Owned, Vector4, U4};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::GAMMA_E_HZ_PER_T;
use crate::error::{Error, Result};
use crate::spectra::golden_min;

/// Rate window searched by [`argmax_rate`], mT/ms.
pub const ARGMAX_RANGE: (f64, f64) = (1e-3, 1e2);

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LZParams {
    pub delta0_khz: f64,
    pub delta1_khz: f64,
    pub k_khz2: f64,
    pub p_m: f64,
}

impl LZParams {
    pub fn new(delta0_khz: f64, delta1_khz: f64, k_khz2: f64, p_m: f64) -> Result<Self> {
        let p = LZParams {
            delta0_khz,
            delta1_khz,
            k_khz2,
            p_m,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta1_khz > 0.0
            && self.delta0_khz > self.delta1_khz
            && self.delta0_khz.is_finite())
        {
            return Err(Error::config(format!(
                "gaps must satisfy delta0 > delta1 > 0 (got {} and {} kHz)",
                self.delta0_khz, self.delta1_khz
            )));
        }
        if !(self.k_khz2 > 0.0 && self.k_khz2.is_finite()) {
            return Err(Error::config("k must be positive"));
        }
        if !self.p_m.is_finite() {
            return Err(Error::config("p_m must be finite"));
        }
        Ok(())
    }

    pub fn with_amplitude(self, p_m: f64) -> Self {
        LZParams { p_m, ..self }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Components {
    /// Wide-gap jump probability.
    pub wide: f64,
    /// Narrow-gap jump probability.
    pub narrow: f64,
    /// Cycle-count prefactor, including `p_m`.
    pub prefactor: f64,
    pub p: f64,
}

/// `|γe| r` in s⁻² for a rate in mT/ms.
fn sweep_scale(rate_mt_per_ms: f64) -> f64 {
    GAMMA_E_HZ_PER_T * rate_mt_per_ms
}

pub fn eval_components(params: &LZParams, rate_mt_per_ms: f64) -> Result<Components> {
    if !(rate_mt_per_ms > 0.0) || !rate_mt_per_ms.is_finite() {
        return Err(Error::Domain(format!(
            "sweep rate must be positive, got {rate_mt_per_ms}"
        )));
    }
    let s = sweep_scale(rate_mt_per_ms);
    let d0 = params.delta0_khz * 1e3;
    let d1 = params.delta1_khz * 1e3;
    let wide = (-d0 * d0 / s).exp();
    let narrow = (-d1 * d1 / s).exp() * (1.0 - wide);
    let prefactor = params.p_m * -(-s / (params.k_khz2 * 1e6)).exp_m1();
    Ok(Components {
        wide,
        narrow,
        prefactor,
        p: prefactor * narrow * (1.0 - wide),
    })
}

pub fn eval(params: &LZParams, rate_mt_per_ms: f64) -> Result<f64> {
    eval_components(params, rate_mt_per_ms).map(|c| c.p)
}

/// Rate of maximal |P| on [`ARGMAX_RANGE`], resolved to 1e-3 mT/ms.
pub fn argmax_rate(params: &LZParams) -> Result<f64> {
    params.validate()?;
    let (lo, hi) = ARGMAX_RANGE;
    let n = 2001;
    let grid: Vec<f64> = (0..n)
        .map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64))
        .collect();
    let vals: Vec<f64> = grid
        .iter()
        .map(|&r| eval(params, r).map(f64::abs))
        .collect::<Result<_>>()?;
    let (best, &peak) = vals
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("grid is non-empty");
    if !(peak > 0.0) {
        return Err(Error::DegenerateModel(
            "model is identically zero on the rate window".into(),
        ));
    }
    let a = grid[best.saturating_sub(1)];
    let b = grid[(best + 1).min(n - 1)];
    let (r, _) = golden_min(a, b, 1e-4, |r| {
        -eval(params, r).map(f64::abs).unwrap_or(0.0)
    });
    Ok(r)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RatePoint {
    #[serde(rename = "rate_mT_per_ms")]
    pub rate_mt_per_ms: f64,
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
}

/// Measured or simulated amplitude versus sweep rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateCurve {
    points: Vec<RatePoint>,
}

impl RateCurve {
    pub fn new(points: Vec<RatePoint>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            if !(p.rate_mt_per_ms > 0.0 && p.rate_mt_per_ms.is_finite()) {
                return Err(Error::config(format!(
                    "row {}: rate must be positive and finite",
                    i + 1
                )));
            }
            if !p.amplitude.is_finite() {
                return Err(Error::config(format!(
                    "row {}: amplitude must be finite",
                    i + 1
                )));
            }
            if let Some(s) = p.sigma {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::config(format!(
                        "row {}: sigma must be positive",
                        i + 1
                    )));
                }
            }
        }
        if points
            .windows(2)
            .any(|w| !(w[1].rate_mt_per_ms > w[0].rate_mt_per_ms))
        {
            return Err(Error::config("rates must be strictly increasing"));
        }
        if points.iter().any(|p| p.sigma.is_some()) && points.iter().any(|p| p.sigma.is_none()) {
            return Err(Error::config(
                "sigma must be given for every row or for none",
            ));
        }
        Ok(RateCurve { points })
    }

    /// Noiseless samples of the model.
    pub fn from_model(params: &LZParams, rates: &[f64]) -> Result<Self> {
        let points = rates
            .iter()
            .map(|&r| {
                Ok(RatePoint {
                    rate_mt_per_ms: r,
                    amplitude: eval(params, r)?,
                    sigma: None,
                })
            })
            .collect::<Result<_>>()?;
        RateCurve::new(points)
    }

    pub fn points(&self) -> &[RatePoint] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn rates(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.rate_mt_per_ms).collect()
    }

    pub fn amplitudes(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.amplitude).collect()
    }

    pub fn map_amplitudes(&self, f: impl Fn(usize, f64) -> f64) -> Result<Self> {
        RateCurve::new(
            self.points
                .iter()
                .enumerate()
                .map(|(i, p)| RatePoint {
                    amplitude: f(i, p.amplitude),
                    ..*p
                })
                .collect(),
        )
    }

    /// Reads `rate_mT_per_ms,amplitude[,sigma]` with a header row.
    pub fn from_csv_reader(reader: impl Read) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr
            .headers()
            .map_err(|e| Error::config(format!("fit CSV header: {e}")))?
            .clone();
        let names: Vec<&str> = headers.iter().collect();
        match names.as_slice() {
            ["rate_mT_per_ms", "amplitude"] | ["rate_mT_per_ms", "amplitude", "sigma"] => {}
            _ => {
                return Err(Error::config(format!(
                    "fit CSV header must be `rate_mT_per_ms,amplitude[,sigma]`, got `{}`",
                    names.join(",")
                )))
            }
        }
        let mut points = Vec::new();
        for (i, row) in rdr.deserialize::<RatePoint>().enumerate() {
            let p = row.map_err(|e| Error::config(format!("fit CSV row {}: {e}", i + 1)))?;
            points.push(p);
        }
        RateCurve::new(points)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        RateCurve::from_csv_reader(text.as_bytes())
    }

    pub fn to_csv(&self) -> String {
        let sigma = self.points.iter().any(|p| p.sigma.is_some());
        let mut out = String::from(if sigma {
            "rate_mT_per_ms,amplitude,sigma\n"
        } else {
            "rate_mT_per_ms,amplitude\n"
        });
        for p in &self.points {
            out.push_str(&format!("{},{:e}", p.rate_mt_per_ms, p.amplitude));
            if let Some(s) = p.sigma {
                out.push_str(&format!(",{s:e}"));
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitReport {
    pub params: LZParams,
    /// Model minus data, divided by sigma when given.
    pub residuals: Vec<f64>,
    pub rms: f64,
    pub converged: bool,
    pub termination: String,
    pub evaluations: usize,
    pub best_start: usize,
    pub starts: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub multistart: usize,
    pub patience: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            multistart: 64,
            patience: 200,
        }
    }
}

// Unconstrained coordinates: ln D1, ln(D0/D1 - 1), ln k (gaps in Hz, k in s⁻²), p_m.
fn to_internal(p: &LZParams) -> Vector4<f64> {
    let d1 = p.delta1_khz * 1e3;
    let d0 = p.delta0_khz * 1e3;
    Vector4::new(d1.ln(), (d0 / d1 - 1.0).ln(), (p.k_khz2 * 1e6).ln(), p.p_m)
}

fn from_internal(x: &Vector4<f64>) -> LZParams {
    let d1 = x[0].exp();
    let d0 = d1 * (1.0 + x[1].exp());
    LZParams {
        delta0_khz: d0 * 1e-3,
        delta1_khz: d1 * 1e-3,
        k_khz2: x[2].exp() * 1e-6,
        p_m: x[3],
    }
}

struct Problem<'a> {
    rates: &'a [f64],
    values: &'a [f64],
    weights: &'a [f64],
    x: Vector4<f64>,
}

impl Problem<'_> {
    /// Model value and gradient in internal coordinates at one rate.
    fn point(&self, rate: f64) -> (f64, [f64; 4]) {
        let d1 = self.x[0].exp();
        let d0 = d1 * (1.0 + self.x[1].exp());
        let k = self.x[2].exp();
        let pm = self.x[3];
        let s = sweep_scale(rate);
        let (x0, x1, y) = (d0 * d0 / s, d1 * d1 / s, s / k);
        let one_minus_q = -(-x0).exp_m1();
        let shape = one_minus_q * one_minus_q * (-x1).exp();
        let g = -(-y).exp_m1();
        let p = pm * g * shape;
        // Q / (1 - Q)
        let odds = 1.0 / x0.exp_m1();
        let grad = [
            p * (4.0 * x0 * odds - 2.0 * x1),
            p * 4.0 * odds * d0 * (d0 - d1) / s,
            -pm * shape * y * (-y).exp(),
            g * shape,
        ];
        (p, grad)
    }

    fn sse(&self) -> f64 {
        self.residual_vec().iter().map(|r| r * r).sum()
    }

    fn residual_vec(&self) -> Vec<f64> {
        self.rates
            .iter()
            .zip(self.values)
            .zip(self.weights)
            .map(|((&r, &v), &w)| (self.point(r).0 - v) * w)
            .collect()
    }
}

impl LeastSquaresProblem<f64, Dyn, U4> for Problem<'_> {
    type ResidualStorage = Owned<f64, Dyn>;
    type JacobianStorage = Owned<f64, Dyn, U4>;
    type ParameterStorage = Owned<f64, U4>;

    fn set_params(&mut self, x: &Vector4<f64>) {
        self.x = *x;
    }

    fn params(&self) -> Vector4<f64> {
        self.x
    }

    fn residuals(&self) -> Option<OVector<f64, Dyn>> {
        let r = self.residual_vec();
        r.iter()
            .all(|v| v.is_finite())
            .then(|| OVector::<f64, Dyn>::from_vec(r))
    }

    fn jacobian(&self) -> Option<OMatrix<f64, Dyn, U4>> {
        let mut j = Matrix::<f64, Dyn, U4, Owned<f64, Dyn, U4>>::zeros(self.rates.len());
        for (i, (&r, &w)) in self.rates.iter().zip(self.weights).enumerate() {
            let (_, g) = self.point(r);
            for (c, v) in g.iter().enumerate() {
                j[(i, c)] = v * w;
            }
        }
        j.iter().all(|v| v.is_finite()).then_some(j)
    }
}

/// Log-uniform start grid over (D1, D0/D1 - 1, k), scaled to the rates in
/// the data.
fn start_grid(rates: &[f64], n: usize) -> Vec<[f64; 3]> {
    let s_lo = sweep_scale(rates[0]);
    let s_hi = sweep_scale(*rates.last().unwrap());
    let per_axis = (n as f64).cbrt().ceil().max(1.0) as usize;
    let axis = |lo: f64, hi: f64| -> Vec<f64> {
        if per_axis == 1 {
            return vec![(lo * hi).sqrt().ln()];
        }
        (0..per_axis)
            .map(|i| lo.ln() + (hi / lo).ln() * i as f64 / (per_axis - 1) as f64)
            .collect()
    };
    let d1 = axis(0.3 * s_lo.sqrt(), 2.0 * s_hi.sqrt());
    let ratio = axis(0.3, 30.0);
    let k = axis(s_lo / 30.0, s_hi * 3.0);
    let mut out = Vec::with_capacity(per_axis.pow(3));
    for &a in &d1 {
        for &b in &ratio {
            for &c in &k {
                out.push([a, b, c]);
            }
        }
    }
    // interleave so truncation keeps the grid spread out
    let mut order: Vec<usize> = (0..out.len()).collect();
    order.sort_by_key(|&i| (i.wrapping_mul(2654435761) % out.len(), i));
    order.into_iter().take(n).map(|i| out[i]).collect()
}

/// Multistart least-squares fit of the model to `data`.
pub fn fit(data: &RateCurve, init: Option<LZParams>, opts: &FitOptions) -> Result<FitReport> {
    if data.len() < 4 {
        return Err(Error::DegenerateData(format!(
            "need at least 4 points for 4 parameters, got {}",
            data.len()
        )));
    }
    if data.points().iter().all(|p| p.amplitude == 0.0) {
        return Err(Error::DegenerateData("all amplitudes are zero".into()));
    }
    if opts.multistart == 0 && init.is_none() {
        return Err(Error::config(
            "multistart must be at least 1 without an initial guess",
        ));
    }
    if let Some(p) = &init {
        p.validate()?;
    }
    let rates = data.rates();
    let values = data.amplitudes();
    let weights: Vec<f64> = data
        .points()
        .iter()
        .map(|p| p.sigma.map_or(1.0, |s| 1.0 / s))
        .collect();

    let mut starts: Vec<Vector4<f64>> = init.iter().map(to_internal).collect();
    for [a, b, c] in start_grid(&rates, opts.multistart) {
        let mut x = Vector4::new(a, b, c, 1.0);
        // amplitude enters linearly: start from its least-squares value
        let probe = Problem {
            rates: &rates,
            values: &values,
            weights: &weights,
            x,
        };
        let (num, den) =
            rates
                .iter()
                .zip(&values)
                .zip(&weights)
                .fold((0.0, 0.0), |acc, ((&r, &v), &w)| {
                    let f = probe.point(r).0 * w;
                    (acc.0 + f * v * w, acc.1 + f * f)
                });
        x[3] = if den > 0.0 { num / den } else { 0.0 };
        starts.push(x);
    }

    let lm = LevenbergMarquardt::new().with_patience(opts.patience);
    let runs: Vec<(f64, bool, String, usize, Vector4<f64>)> = starts
        .par_iter()
        .map(|x| {
            let problem = Problem {
                rates: &rates,
                values: &values,
                weights: &weights,
                x: *x,
            };
            let (solved, report) = lm.minimize(problem);
            let sse = solved.sse();
            let ok = report.termination.was_successful() && sse.is_finite();
            (
                if sse.is_finite() { sse } else { f64::INFINITY },
                ok,
                format!("{:?}", report.termination),
                report.number_of_evaluations,
                solved.x,
            )
        })
        .collect();

    let pick = |only_converged: bool| {
        runs.iter()
            .enumerate()
            .filter(|(_, r)| !only_converged || r.1)
            .min_by(|a, b| a.1 .0.total_cmp(&b.1 .0).then(a.0.cmp(&b.0)))
    };
    let (best_start, best) = pick(true)
        .or_else(|| pick(false))
        .expect("at least one start");
    let problem = Problem {
        rates: &rates,
        values: &values,
        weights: &weights,
        x: best.4,
    };
    let residuals = problem.residual_vec();
    let report = FitReport {
        params: from_internal(&best.4),
        rms: (best.0 / residuals.len() as f64).sqrt(),
        residuals,
        converged: best.1,
        termination: best.2.clone(),
        evaluations: runs.iter().map(|r| r.3).sum(),
        best_start,
        starts: runs.len(),
    };
    if !report.converged || !report.rms.is_finite() {
        return Err(Error::FitFailed {
            starts: runs.len(),
            best: Box::new(report),
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fig_params() -> LZParams {
        LZParams::new(250.0, 30.0, 15.0, 13.0).unwrap()
    }

    #[test]
    fn wide_gap_probability_at_reference_rate() {
        // D0² / (|γe| r) = 6.25e10 / (2.80249e10 * 0.4) = 5.5754
        let c = eval_components(&fig_params(), 0.4).unwrap();
        let x: f64 = 6.25e10 / (2.80249e10 * 0.4);
        assert!((c.wide - (-x).exp()).abs() < 1e-15);
        assert!((c.wide - 3.79e-3).abs() < 0.02e-3, "{}", c.wide);
    }

    #[test]
    fn limits_vanish() {
        let p = fig_params();
        assert!(eval(&p, 1e-6).unwrap().abs() < 1e-12);
        assert!(eval(&p, 1e8).unwrap().abs() < 1e-6);
        assert!(matches!(eval(&p, 0.0), Err(Error::Domain(_))));
        assert!(matches!(eval(&p, -1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn invalid_params_rejected() {
        assert!(LZParams::new(30.0, 250.0, 15.0, 13.0).is_err());
        assert!(LZParams::new(250.0, 0.0, 15.0, 13.0).is_err());
        assert!(LZParams::new(250.0, 30.0, 0.0, 13.0).is_err());
    }

    #[test]
    fn zero_amplitude_is_degenerate() {
        let p = fig_params().with_amplitude(0.0);
        assert!(matches!(argmax_rate(&p), Err(Error::DegenerateModel(_))));
    }

    #[test]
    fn analytic_gradient_matches_differences() {
        let rates = [0.01, 0.1, 0.5, 2.0];
        let values = [0.0; 4];
        let weights = [1.0; 4];
        let x = to_internal(&LZParams::new(200.0, 40.0, 500.0, -3.0).unwrap());
        let pb = Problem {
            rates: &rates,
            values: &values,
            weights: &weights,
            x,
        };
        for &r in &rates {
            let (_, g) = pb.point(r);
            for c in 0..4 {
                let h = 1e-6;
                let mut xp = x;
                xp[c] += h;
                let mut xm = x;
                xm[c] -= h;
                let fp = Problem { x: xp, ..pb }.point(r).0;
                let fm = Problem { x: xm, ..pb }.point(r).0;
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (fd - g[c]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "rate {r} param {c}: {fd} vs {}",
                    g[c]
                );
            }
        }
    }

    #[test]
    fn internal_coordinates_round_trip() {
        let p = LZParams::new(250.0, 30.0, 15.0, -13.0).unwrap();
        let q = from_internal(&to_internal(&p));
        for (a, b) in [
            (p.delta0_khz, q.delta0_khz),
            (p.delta1_khz, q.delta1_khz),
            (p.k_khz2, q.k_khz2),
            (p.p_m, q.p_m),
        ] {
            assert!((a - b).abs() <= 1e-12 * a.abs());
        }
    }

    #[test]
    fn csv_header_checked() {
        assert!(RateCurve::from_csv("rate,amp\n0.1,1\n").is_err());
        let c = RateCurve::from_csv("rate_mT_per_ms, amplitude\n0.1, 1.5\n0.2,-2\n").unwrap();
        assert_eq!(c.amplitudes(), vec![1.5, -2.0]);
        assert!(RateCurve::from_csv("rate_mT_per_ms,amplitude\n0.2,1\n0.1,1\n").is_err());
        assert!(RateCurve::from_csv("rate_mT_per_ms,amplitude,sigma\n0.1,1,0\n").is_err());
    }

    #[test]
    fn too_few_points_or_zero_data() {
        let c = RateCurve::from_model(&fig_params(), &[0.1, 0.2, 0.3]).unwrap();
        assert!(matches!(
            fit(&c, None, &FitOptions::default()),
            Err(Error::DegenerateData(_))
        ));
        let z = RateCurve::from_model(&fig_params().with_amplitude(0.0), &[0.1, 0.2, 0.3, 0.4])
            .unwrap();
        assert!(matches!(
            fit(&z, None, &FitOptions::default()),
            Err(Error::DegenerateData(_))
        ));
    }
}
