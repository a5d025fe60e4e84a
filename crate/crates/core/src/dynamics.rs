//! Density-matrix propagation through field sweeps with optical NV reset,
//! carbon polarization read-out and the sweep protocols built on them.
//!
//! Times are given in ms at the interface; propagation runs internally in
//! µs so that the phase of an energy `E` (MHz) over `dt` (µs) is `2π E dt`.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::presets;
use crate::spectra::{
    eigh, matching_field, matching_field_with_host, MatchingOptions, MATCHING_MAX_THETA_DEG,
};
use crate::spinsys::{
    hermiticity_error, max_abs, Coupling, HamiltonianParts, Spin, SpinSystemSpec,
};
use crate::C64;

/// Basis index of `m_s = 0` for a spin-1 site (basis ordered `+1, 0, -1`).
const NV_ZERO_INDEX: usize = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DensityMatrix(DMatrix<C64>);

/// Worst-case state diagnostics; merged with [`StateHealth::merge`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateHealth {
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: f64,
}

impl Default for StateHealth {
    fn default() -> Self {
        StateHealth {
            trace_error: 0.0,
            hermiticity_error: 0.0,
            min_eigenvalue: f64::INFINITY,
        }
    }
}

impl StateHealth {
    pub fn merge(self, other: StateHealth) -> StateHealth {
        StateHealth {
            trace_error: self.trace_error.max(other.trace_error),
            hermiticity_error: self.hermiticity_error.max(other.hermiticity_error),
            min_eigenvalue: self.min_eigenvalue.min(other.min_eigenvalue),
        }
    }

    pub fn is_healthy(&self, tol: f64) -> bool {
        self.trace_error <= tol && self.hermiticity_error <= tol && self.min_eigenvalue >= -tol
    }
}

impl DensityMatrix {
    pub const TOL: f64 = 1e-9;

    /// Validating constructor: Hermitian, unit trace, positive to [`Self::TOL`].
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if !m.is_square() || m.nrows() == 0 {
            return Err(Error::Contract(
                "density matrix must be square and non-empty".into(),
            ));
        }
        let rho = DensityMatrix(m);
        let h = rho.health();
        if !h.is_healthy(Self::TOL) {
            return Err(Error::Contract(format!("invalid density matrix: {h:?}")));
        }
        Ok(rho)
    }

    pub(crate) fn from_unchecked(m: DMatrix<C64>) -> Self {
        DensityMatrix(m)
    }

    pub fn maximally_mixed(dim: usize) -> Self {
        DensityMatrix(DMatrix::identity(dim, dim) / C64::from(dim as f64))
    }

    /// `|psi><psi|` for a normalized copy of `psi`.
    pub fn pure(psi: &[C64]) -> Result<Self> {
        let v = nalgebra::DVector::from_column_slice(psi);
        let n = v.norm();
        if !(n > 0.0) {
            return Err(Error::Contract("pure state needs a non-zero vector".into()));
        }
        let v = v / C64::from(n);
        Ok(DensityMatrix(&v * v.adjoint()))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn purity(&self) -> f64 {
        (&self.0 * &self.0).trace().re
    }

    /// `Tr(rho O)` for a Hermitian `O`.
    pub fn expectation(&self, op: &DMatrix<C64>) -> f64 {
        // Tr(AB) = sum_ij A_ij B_ji
        self.0
            .iter()
            .zip(op.transpose().iter())
            .map(|(a, b)| (a * b).re)
            .sum()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = (&self.0 + self.0.adjoint()) * C64::from(0.5);
        herm.symmetric_eigenvalues()
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn health(&self) -> StateHealth {
        StateHealth {
            trace_error: (self.trace() - C64::from(1.0)).norm(),
            hermiticity_error: hermiticity_error(&self.0),
            min_eigenvalue: self.min_eigenvalue(),
        }
    }
}

fn split_dims(dims: &[usize], site: usize) -> (usize, usize, usize) {
    let left = dims[..site].iter().product();
    let right = dims[site + 1..].iter().product();
    (left, dims[site], right)
}

/// Reduced state of all sites except `site`.
pub fn partial_trace(rho: &DensityMatrix, dims: &[usize], site: usize) -> Result<DMatrix<C64>> {
    if site >= dims.len() || dims.iter().product::<usize>() != rho.dim() {
        return Err(Error::config(format!(
            "site {site} does not fit dimensions {dims:?}"
        )));
    }
    let (l, d, r) = split_dims(dims, site);
    let m = rho.matrix();
    let mut out = DMatrix::<C64>::zeros(l * r, l * r);
    for l1 in 0..l {
        for r1 in 0..r {
            for l2 in 0..l {
                for r2 in 0..r {
                    let mut acc = C64::new(0.0, 0.0);
                    for a in 0..d {
                        acc += m[((l1 * d + a) * r + r1, (l2 * d + a) * r + r2)];
                    }
                    out[(l1 * r + r1, l2 * r + r2)] = acc;
                }
            }
        }
    }
    Ok(out)
}

fn check_nv_site(dims: &[usize], nv_site: usize) -> Result<()> {
    if dims.get(nv_site) != Some(&3) {
        return Err(Error::config(format!(
            "site {nv_site} is not a spin-1 electron"
        )));
    }
    Ok(())
}

/// `|0><0|_NV ⊗ Tr_NV(rho)`.
pub fn optical_reset(rho: &DensityMatrix, dims: &[usize], nv_site: usize) -> Result<DensityMatrix> {
    check_nv_site(dims, nv_site)?;
    let rest = partial_trace(rho, dims, nv_site)?;
    Ok(embed_reset(&rest, dims, nv_site))
}

/// Blocks `<a|_NV U |0>_NV` of `u`, one per NV basis state `a`.
fn reset_kraus(u: &DMatrix<C64>, dims: &[usize], nv_site: usize) -> Vec<DMatrix<C64>> {
    let (l, d, r) = split_dims(dims, nv_site);
    (0..d)
        .map(|a| {
            DMatrix::from_fn(l * r, l * r, |i, j| {
                let (l1, r1) = (i / r, i % r);
                let (l2, r2) = (j / r, j % r);
                u[((l1 * d + a) * r + r1, (l2 * d + NV_ZERO_INDEX) * r + r2)]
            })
        })
        .collect()
}

/// `|0><0|_NV ⊗ rest`.
fn embed_reset(rest: &DMatrix<C64>, dims: &[usize], nv_site: usize) -> DensityMatrix {
    let (l, d, r) = split_dims(dims, nv_site);
    let n = l * d * r;
    let mut out = DMatrix::<C64>::zeros(n, n);
    let a = NV_ZERO_INDEX;
    for l1 in 0..l {
        for r1 in 0..r {
            for l2 in 0..l {
                for r2 in 0..r {
                    out[((l1 * d + a) * r + r1, (l2 * d + a) * r + r2)] =
                        rest[(l1 * r + r1, l2 * r + r2)];
                }
            }
        }
    }
    DensityMatrix(out)
}

/// `(1 - p) rho + p reset(rho)`.
fn partial_reset(
    rho: &DensityMatrix,
    dims: &[usize],
    nv_site: usize,
    p: f64,
) -> Result<DensityMatrix> {
    let reset = optical_reset(rho, dims, nv_site)?;
    Ok(DensityMatrix(
        rho.matrix() * C64::from(1.0 - p) + reset.matrix() * C64::from(p),
    ))
}

/// NV in `|0>`, every other spin maximally mixed.
pub fn pumped_state(spec: &SpinSystemSpec, nv_site: usize) -> Result<DensityMatrix> {
    let dims = spec.dims();
    optical_reset(&DensityMatrix::maximally_mixed(spec.dim()), &dims, nv_site)
}

/// NV site: the species labeled [`presets::NV`], else the first spin-1 with a zero-field term.
pub fn default_nv_site(spec: &SpinSystemSpec) -> Result<usize> {
    spec.site_of(presets::NV)
        .or_else(|| {
            spec.species
                .iter()
                .position(|s| s.spin == Spin::One && s.zero_field.is_some())
        })
        .ok_or_else(|| Error::config("spin system has no NV site"))
}

pub fn default_carbon_site(spec: &SpinSystemSpec) -> Result<usize> {
    spec.site_of(presets::C13)
        .ok_or_else(|| Error::config("spin system has no 13C site"))
}

/// `Tr(rho 2 I_B)` with the carbon quantized along the field direction.
pub fn carbon_polarization(
    rho: &DensityMatrix,
    spec: &SpinSystemSpec,
    carbon_site: usize,
) -> Result<f64> {
    match spec.species.get(carbon_site) {
        Some(s) if s.spin == Spin::Half => {}
        _ => {
            return Err(Error::config(format!(
                "site {carbon_site} is not a spin-1/2"
            )))
        }
    }
    Ok(rho.expectation(&spec.polarization_operator(carbon_site)?))
}

/// Piecewise-linear field trajectory through `(t_ms, B_mT)` knots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldTrajectory {
    knots: Vec<(f64, f64)>,
}

impl FieldTrajectory {
    pub fn new(knots: Vec<(f64, f64)>) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::config("a field trajectory needs at least two knots"));
        }
        for w in knots.windows(2) {
            if !(w[1].0 > w[0].0) {
                return Err(Error::config(
                    "trajectory times must be strictly increasing",
                ));
            }
        }
        if knots
            .iter()
            .any(|&(t, b)| !t.is_finite() || !b.is_finite() || b < 0.0)
        {
            return Err(Error::config("trajectory knots must be finite with B >= 0"));
        }
        Ok(FieldTrajectory { knots })
    }

    /// Linear ramp from `b0` to `b1` over `duration_ms`.
    pub fn ramp(b0: f64, b1: f64, duration_ms: f64) -> Result<Self> {
        FieldTrajectory::new(vec![(0.0, b0), (duration_ms, b1)])
    }

    pub fn knots(&self) -> &[(f64, f64)] {
        &self.knots
    }

    pub fn duration_ms(&self) -> f64 {
        self.knots[self.knots.len() - 1].0 - self.knots[0].0
    }

    pub fn field_at(&self, t_ms: f64) -> f64 {
        let k = &self.knots;
        if t_ms <= k[0].0 {
            return k[0].1;
        }
        for w in k.windows(2) {
            if t_ms <= w[1].0 {
                let s = (t_ms - w[0].0) / (w[1].0 - w[0].0);
                return w[0].1 + s * (w[1].1 - w[0].1);
            }
        }
        k[k.len() - 1].1
    }
}

/// Step controller for [`propagate`].
///
/// Each step uses the exact exponential of the midpoint Hamiltonian; `dt` is
/// chosen so that the Hamiltonian drift over one step, `‖ΔH‖_max dt`, stays
/// below `eps_step` (MHz µs, i.e. cycles).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub eps_step: f64,
    pub dt_max_ms: f64,
    pub dt_min_ms: f64,
    /// Sampling interval of the recorded trajectory; final state only if `None`.
    pub record_interval_ms: Option<f64>,
}

impl Default for StepControl {
    fn default() -> Self {
        StepControl {
            eps_step: 4e-3,
            dt_max_ms: 0.01,
            dt_min_ms: 1e-9,
            record_interval_ms: None,
        }
    }
}

impl StepControl {
    pub fn halved(&self) -> Self {
        StepControl {
            eps_step: self.eps_step / 2.0,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.eps_step > 0.0 && self.dt_max_ms > 0.0 && self.dt_min_ms > 0.0) {
            return Err(Error::config("step control values must be positive"));
        }
        if let Some(r) = self.record_interval_ms {
            if !(r > 0.0) {
                return Err(Error::config("record_interval_ms must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub t_ms: f64,
    pub b_mt: f64,
    pub state: DensityMatrix,
}

#[derive(Clone, Debug)]
pub struct Propagation {
    pub samples: Vec<Sample>,
    pub steps: usize,
    pub health: StateHealth,
}

impl Propagation {
    pub fn final_state(&self) -> &DensityMatrix {
        &self
            .samples
            .last()
            .expect("propagation records the final state")
            .state
    }
}

/// `exp(-2πi H dt)` for `dt` in µs.
fn step_unitary(h: &DMatrix<C64>, dt_us: f64) -> DMatrix<C64> {
    if h.iter().all(|z| z.im == 0.0) {
        return step_unitary_real(&h.map(|z| z.re), dt_us);
    }
    let (vals, vecs) = eigh(h);
    let mut scaled = vecs.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col *= C64::from_polar(1.0, -std::f64::consts::TAU * vals[j] * dt_us);
    }
    scaled * vecs.adjoint()
}

/// Real symmetric case: `U = V cos(Λ) Vᵀ - i V sin(Λ) Vᵀ`.
fn step_unitary_real(h: &DMatrix<f64>, dt_us: f64) -> DMatrix<C64> {
    let se = nalgebra::SymmetricEigen::new(h.clone());
    let v = &se.eigenvectors;
    let mut vc = v.clone();
    let mut vs = v.clone();
    for j in 0..v.ncols() {
        let ph = std::f64::consts::TAU * se.eigenvalues[j] * dt_us;
        vc.column_mut(j).scale_mut(ph.cos());
        vs.column_mut(j).scale_mut(-ph.sin());
    }
    let re = vc * v.transpose();
    let im = vs * v.transpose();
    DMatrix::from_fn(h.nrows(), h.ncols(), |i, j| {
        C64::new(re[(i, j)], im[(i, j)])
    })
}

fn evolve(rho: &DMatrix<C64>, u: &DMatrix<C64>) -> DMatrix<C64> {
    u * rho * u.adjoint()
}

/// One step under a real symmetric `h`, done in its eigenbasis with real
/// products only: `rho -> V P(V^T rho V) V^T` with `P` the phase factors.
fn evolve_real(rho: &mut DMatrix<C64>, h: &DMatrix<f64>, dt_us: f64) {
    let se = nalgebra::SymmetricEigen::new(h.clone());
    let v = &se.eigenvectors;
    let vt = v.transpose();
    let re = rho.map(|z| z.re);
    let im = rho.map(|z| z.im);
    let ar = &vt * re * v;
    let ai = &vt * im * v;
    let phase: Vec<C64> = se
        .eigenvalues
        .iter()
        .map(|&l| C64::from_polar(1.0, -std::f64::consts::TAU * l * dt_us))
        .collect();
    let n = h.nrows();
    let mut br = DMatrix::<f64>::zeros(n, n);
    let mut bi = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        for i in 0..n {
            let z = C64::new(ar[(i, j)], ai[(i, j)]) * phase[i] * phase[j].conj();
            br[(i, j)] = z.re;
            bi[(i, j)] = z.im;
        }
    }
    let re = v * br * &vt;
    let im = v * bi * &vt;
    for j in 0..n {
        for i in 0..n {
            rho[(i, j)] = C64::new(re[(i, j)], im[(i, j)]);
        }
    }
}

pub(crate) struct Propagator<'a> {
    parts: &'a HamiltonianParts,
    h1_norm: f64,
    ctrl: &'a StepControl,
}

impl<'a> Propagator<'a> {
    pub(crate) fn new(parts: &'a HamiltonianParts, ctrl: &'a StepControl) -> Result<Self> {
        ctrl.validate()?;
        Ok(Propagator {
            parts,
            h1_norm: max_abs(&parts.h1),
            ctrl,
        })
    }

    /// Propagates `rho` along `traj`, calling `after_step(t_ms, B, rho)`
    /// after every step. Returns the number of steps taken.
    fn run(
        &self,
        rho: &mut DMatrix<C64>,
        traj: &FieldTrajectory,
        mut after_step: impl FnMut(f64, f64, &DMatrix<C64>),
    ) -> Result<usize> {
        let t0 = traj.knots()[0].0;
        let mut steps = 0usize;
        for w in traj.knots().windows(2) {
            let ((ta, ba), (tb, bb)) = (w[0], w[1]);
            let len_ms = tb - ta;
            let rate_per_us = (bb - ba) / len_ms / 1000.0;
            let drift = self.h1_norm * rate_per_us.abs();
            let mut dt_ms = self.ctrl.dt_max_ms.min(len_ms);
            if drift > 0.0 {
                dt_ms = dt_ms.min((self.ctrl.eps_step / drift).sqrt() / 1000.0);
            }
            if dt_ms < self.ctrl.dt_min_ms {
                return Err(Error::Stiffness {
                    dt_ms,
                    t_ms: ta - t0,
                });
            }
            let n = (len_ms / dt_ms).ceil().max(1.0) as usize;
            let dt_ms = len_ms / n as f64;
            let dt_us = dt_ms * 1000.0;
            let static_u =
                (drift == 0.0).then(|| step_unitary(&self.parts.at(ba).into_matrix(), dt_us));
            for i in 0..n {
                let tm = ta + (i as f64 + 0.5) * dt_ms;
                match &static_u {
                    Some(u) => *rho = evolve(rho, u),
                    None => {
                        // H is linear in B, so the fourth-order commutator-free
                        // Magnus step is two half steps sampled at dt/6 and 5dt/6
                        for frac in [-1.0 / 3.0, 1.0 / 3.0] {
                            let bm = ba + (bb - ba) * (tm + frac * dt_ms - ta) / len_ms;
                            let h = self.parts.at(bm).into_matrix();
                            if h.iter().all(|z| z.im == 0.0) {
                                evolve_real(rho, &h.map(|z| z.re), dt_us / 2.0);
                            } else {
                                *rho = evolve(rho, &step_unitary(&h, dt_us / 2.0));
                            }
                        }
                    }
                }
                steps += 1;
                let t_end = ta + (i + 1) as f64 * dt_ms;
                after_step(t_end, ba + (bb - ba) * (i + 1) as f64 / n as f64, rho);
            }
        }
        Ok(steps)
    }
}

/// Calls `f` whenever a regular grid of spacing `interval` starting at `t0`
/// is crossed.
struct Recorder {
    next: f64,
    interval: Option<f64>,
}

impl Recorder {
    fn new(t0: f64, interval: Option<f64>) -> Self {
        Recorder {
            next: t0 + interval.unwrap_or(0.0),
            interval,
        }
    }

    fn due(&mut self, t: f64) -> bool {
        let Some(iv) = self.interval else {
            return false;
        };
        let mut hit = false;
        while self.next <= t + 1e-12 * iv.max(1.0) {
            self.next += iv;
            hit = true;
        }
        hit
    }
}

/// Piecewise-constant-Hamiltonian propagation `rho -> U rho U†`.
pub fn propagate(
    rho0: &DensityMatrix,
    spec: &SpinSystemSpec,
    traj: &FieldTrajectory,
    ctrl: &StepControl,
) -> Result<Propagation> {
    if rho0.dim() != spec.dim() {
        return Err(Error::config("state and spin system dimensions differ"));
    }
    let parts = spec.hamiltonian_parts()?;
    let prop = Propagator::new(&parts, ctrl)?;
    let mut rho = rho0.matrix().clone();
    let t0 = traj.knots()[0].0;
    let mut rec = Recorder::new(t0, ctrl.record_interval_ms);
    let mut samples = vec![Sample {
        t_ms: 0.0,
        b_mt: traj.knots()[0].1,
        state: rho0.clone(),
    }];
    let steps = prop.run(&mut rho, traj, |t, b, m| {
        if rec.due(t) {
            samples.push(Sample {
                t_ms: t - t0,
                b_mt: b,
                state: DensityMatrix::from_unchecked(m.clone()),
            })
        }
    })?;
    let last = traj.knots()[traj.knots().len() - 1];
    if samples.len() == 1 || (samples[samples.len() - 1].t_ms - traj.duration_ms()).abs() > 1e-12 {
        samples.push(Sample {
            t_ms: traj.duration_ms(),
            b_mt: last.1,
            state: DensityMatrix::from_unchecked(rho.clone()),
        });
    }
    let health = samples
        .iter()
        .map(|s| s.state.health())
        .fold(StateHealth::default(), StateHealth::merge);
    Ok(Propagation {
        samples,
        steps,
        health,
    })
}

/// Removes coherences between non-degenerate eigenstates of `h`, i.e. the
/// long-time average of the free evolution under `h`.
pub fn dephase(rho: &DensityMatrix, h: &DMatrix<C64>, degeneracy_mhz: f64) -> DensityMatrix {
    let (vals, vecs) = eigh(h);
    let mut r = vecs.adjoint() * rho.matrix() * &vecs;
    for i in 0..vals.len() {
        for j in 0..vals.len() {
            if (vals[i] - vals[j]).abs() > degeneracy_mhz {
                r[(i, j)] = C64::new(0.0, 0.0);
            }
        }
    }
    DensityMatrix::from_unchecked(&vecs * r * vecs.adjoint())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Up,
    Down,
}

impl Direction {
    pub fn flipped(self) -> Self {
        match self {
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
        }
    }
}

/// One linear sweep between `b_lo` and `b_hi` in the given direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSegment {
    pub b_lo_mt: f64,
    pub b_hi_mt: f64,
    pub rate_mt_per_ms: f64,
    pub direction: Direction,
}

impl SweepSegment {
    pub fn new(window: (f64, f64), rate_mt_per_ms: f64, direction: Direction) -> Result<Self> {
        let s = SweepSegment {
            b_lo_mt: window.0,
            b_hi_mt: window.1,
            rate_mt_per_ms,
            direction,
        };
        if !(s.b_hi_mt > s.b_lo_mt) || s.b_lo_mt < 0.0 {
            return Err(Error::config(format!(
                "sweep window [{}, {}] mT is invalid",
                window.0, window.1
            )));
        }
        if !(rate_mt_per_ms > 0.0 && rate_mt_per_ms.is_finite()) {
            return Err(Error::config(format!(
                "sweep rate {rate_mt_per_ms} mT/ms must be positive"
            )));
        }
        Ok(s)
    }

    pub fn duration_ms(&self) -> f64 {
        (self.b_hi_mt - self.b_lo_mt) / self.rate_mt_per_ms
    }

    pub fn endpoints(&self) -> (f64, f64) {
        match self.direction {
            Direction::Up => (self.b_lo_mt, self.b_hi_mt),
            Direction::Down => (self.b_hi_mt, self.b_lo_mt),
        }
    }

    pub fn trajectory(&self) -> Result<FieldTrajectory> {
        let (a, b) = self.endpoints();
        FieldTrajectory::ramp(a, b, self.duration_ms())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum Pump {
    /// Instantaneous NV reset every `reset_interval_ms`.
    Stroboscopic { reset_interval_ms: f64 },
    /// Reset applied as a rate: `rho -> (1-p) rho + p reset(rho)`, `p = 1 - exp(-rate dt)`.
    Continuous { pump_rate_per_ms: f64 },
}

impl Pump {
    pub fn validate(&self) -> Result<()> {
        let v = match *self {
            Pump::Stroboscopic { reset_interval_ms } => reset_interval_ms,
            Pump::Continuous { pump_rate_per_ms } => pump_rate_per_ms,
        };
        if !(v > 0.0 && v.is_finite()) {
            return Err(Error::config("pump interval or rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepOptions {
    pub step: StepControl,
    /// Report the polarization of the energy-dephased final state.
    pub dephase_final: bool,
    /// Optical pumping during the sweep; a single initial reset when `None`.
    pub in_sweep_pump: Option<Pump>,
    /// Number of recorded in-sweep points.
    pub trajectory_points: usize,
    /// Fields at which the state is dephased in the instantaneous eigenbasis.
    pub mid_sweep_dephasing: Dephasing,
}

/// Mid-sweep dephasing points. Dephasing between the two small-gap
/// crossings of a manifold removes the interference between them, standing in
/// for the phase averaging of an inhomogeneous ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Dephasing {
    None,
    /// At every matching field of the system (one per P1 14N projection).
    #[default]
    Matching,
    Fields(Vec<f64>),
}

impl Dephasing {
    pub fn resolve(&self, spec: &SpinSystemSpec) -> Result<Vec<f64>> {
        match self {
            Dephasing::None => Ok(vec![]),
            Dephasing::Fields(f) => Ok(f.clone()),
            Dephasing::Matching => matching_fields(spec),
        }
    }
}

/// Matching fields at the system's field angle: one without a P1 host
/// nitrogen, otherwise one per `m_K` from the exact P1 + 14N levels.
pub fn matching_fields(spec: &SpinSystemSpec) -> Result<Vec<f64>> {
    if !(0.0..=MATCHING_MAX_THETA_DEG).contains(&spec.theta_deg) {
        return Ok(vec![]);
    }
    let opts = MatchingOptions::default();
    let (Some(p), Some(n)) = (spec.site_of(presets::P1), spec.site_of(presets::N14_P1)) else {
        return Ok(vec![matching_field(spec.theta_deg, &opts)?]);
    };
    let couplings = spec
        .couplings
        .iter()
        .filter(|c| c.pair == (p, n) || c.pair == (n, p))
        .map(|c| Coupling::new(0, 1, c.matrix()))
        .collect();
    let host = SpinSystemSpec {
        species: vec![spec.species[p].clone(), spec.species[n].clone()],
        couplings,
        theta_deg: spec.theta_deg,
        phi_deg: spec.phi_deg,
    };
    (-1..=1)
        .map(|m| matching_field_with_host(&host, m, &opts))
        .collect()
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            step: StepControl::default(),
            dephase_final: true,
            in_sweep_pump: None,
            trajectory_points: 201,
            mid_sweep_dephasing: Dephasing::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SweepResult {
    /// Carbon polarization after the sweep.
    pub p: f64,
    /// Same, without final dephasing.
    pub p_raw: f64,
    /// `(t_ms, B_mT, P_carbon)` during the sweep.
    pub trajectory: Vec<(f64, f64, f64)>,
    pub steps: usize,
    pub health: StateHealth,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,B_mT,P_carbon\n");
        for (t, b, p) in &self.trajectory {
            out.push_str(&format!("{t:.9},{b:.6},{p:.9e}\n"));
        }
        out
    }
}

/// Evolves `rho` through `seg` with optional in-sweep pumping and
/// dephasing at `dephase_at` fields; returns the final state, recorded
/// `(t, B, P)` triples and the step count.
#[allow(clippy::too_many_arguments)]
fn run_segment(
    spec: &SpinSystemSpec,
    parts: &HamiltonianParts,
    rho: DensityMatrix,
    seg: &SweepSegment,
    opts: &SweepOptions,
    dephase_at: &[f64],
    nv: usize,
    pol_op: &DMatrix<C64>,
) -> Result<(DensityMatrix, Vec<(f64, f64, f64)>, usize)> {
    let traj = seg.trajectory()?;
    let dur = traj.duration_ms();
    let (b_first, b_last) = seg.endpoints();
    let prop = Propagator::new(parts, &opts.step)?;
    let dims = spec.dims();

    // cut points: pump windows and dephasing fields
    let mut cuts: Vec<(f64, bool)> = Vec::new();
    let mut reset_p = None;
    if let Some(pump) = opts.in_sweep_pump {
        pump.validate()?;
        let window = match pump {
            Pump::Stroboscopic { reset_interval_ms } => reset_interval_ms,
            Pump::Continuous { pump_rate_per_ms } => (0.1 / pump_rate_per_ms).min(1e-3),
        };
        let n = (dur / window).ceil().max(1.0) as usize;
        cuts.extend((1..=n).map(|i| (dur * i as f64 / n as f64, false)));
        reset_p = Some(match pump {
            Pump::Stroboscopic { .. } => 1.0,
            Pump::Continuous { pump_rate_per_ms } => {
                1.0 - (-pump_rate_per_ms * dur / n as f64).exp()
            }
        });
    }
    for &b in dephase_at {
        let s = (b - b_first) / (b_last - b_first);
        if s > 0.0 && s < 1.0 {
            cuts.push((s * dur, true));
        }
    }
    cuts.push((dur, false));
    cuts.sort_by(|x, y| x.0.total_cmp(&y.0));

    let record_iv =
        (opts.trajectory_points >= 2).then(|| dur / (opts.trajectory_points - 1) as f64);
    let mut rec = Recorder::new(0.0, record_iv);
    let mut m = rho.0;
    let mut recorded = vec![(
        0.0,
        b_first,
        DensityMatrix::from_unchecked(m.clone()).expectation(pol_op),
    )];
    let mut steps = 0;
    let mut t_prev = 0.0;
    for (t_cut, dephase_here) in cuts {
        if t_cut > t_prev + 1e-15 {
            let piece = FieldTrajectory::new(vec![
                (t_prev, traj.field_at(t_prev)),
                (t_cut, traj.field_at(t_cut)),
            ])?;
            steps += prop.run(&mut m, &piece, |t, b, r| {
                if rec.due(t) {
                    recorded.push((
                        t,
                        b,
                        DensityMatrix::from_unchecked(r.clone()).expectation(pol_op),
                    ));
                }
            })?;
            t_prev = t_cut;
        }
        if dephase_here {
            let h = parts.at(traj.field_at(t_cut)).into_matrix();
            m = dephase(&DensityMatrix::from_unchecked(m), &h, 1e-9).0;
        } else if let Some(p) = reset_p {
            m = partial_reset(&DensityMatrix::from_unchecked(m), &dims, nv, p)?.0;
        }
    }
    if recorded.last().map_or(true, |r| (r.0 - dur).abs() > 1e-12) {
        recorded.push((
            dur,
            b_last,
            DensityMatrix::from_unchecked(m.clone()).expectation(pol_op),
        ));
    }
    Ok((DensityMatrix::from_unchecked(m), recorded, steps))
}

/// Polarization injected into the carbon by one sweep that starts from the
/// optically pumped state (NV in `|0>`, everything else mixed).
pub fn single_sweep_polarization(
    spec: &SpinSystemSpec,
    seg: &SweepSegment,
    opts: &SweepOptions,
) -> Result<SweepResult> {
    let nv = default_nv_site(spec)?;
    let c = default_carbon_site(spec)?;
    let parts = spec.hamiltonian_parts()?;
    let pol_op = spec.polarization_operator(c)?;
    let rho0 = pumped_state(spec, nv)?;
    let dephase_at = opts.mid_sweep_dephasing.resolve(spec)?;
    let (rho, trajectory, steps) =
        run_segment(spec, &parts, rho0, seg, opts, &dephase_at, nv, &pol_op)?;
    let health = rho.health();
    let p_raw = rho.expectation(&pol_op);
    let p = if opts.dephase_final {
        let (_, b_end) = seg.endpoints();
        dephase(&rho, parts.at(b_end).matrix(), 1e-9).expectation(&pol_op)
    } else {
        p_raw
    };
    Ok(SweepResult {
        p,
        p_raw,
        trajectory,
        steps,
        health,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RateScan {
    pub rates_mt_per_ms: Vec<f64>,
    pub p: Vec<f64>,
    pub health: StateHealth,
}

impl RateScan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("rate_mT_per_ms,P\n");
        for (r, p) in self.rates_mt_per_ms.iter().zip(&self.p) {
            out.push_str(&format!("{r:.9e},{p:.9e}\n"));
        }
        out
    }

    /// Rate with the largest `|P|`.
    pub fn argmax(&self) -> f64 {
        let i = (0..self.p.len())
            .max_by(|&a, &b| self.p[a].abs().total_cmp(&self.p[b].abs()))
            .unwrap_or(0);
        self.rates_mt_per_ms[i]
    }
}

/// Single-sweep polarization for each rate over a fixed field window.
pub fn rate_scan(
    spec: &SpinSystemSpec,
    window: (f64, f64),
    rates: &[f64],
    direction: Direction,
    opts: &SweepOptions,
) -> Result<RateScan> {
    if rates.len() < 5 {
        return Err(Error::config("a rate scan needs at least 5 rates"));
    }
    let (lo, hi) = rates
        .iter()
        .fold((f64::INFINITY, 0f64), |(a, b), &r| (a.min(r), b.max(r)));
    if !(lo > 0.0) || hi / lo < 100.0 * (1.0 - 1e-9) {
        return Err(Error::config(
            "rates must be positive and span at least two decades",
        ));
    }
    let mut o = opts.clone();
    o.trajectory_points = 0;
    let results: Vec<SweepResult> = rates
        .par_iter()
        .map(|&r| single_sweep_polarization(spec, &SweepSegment::new(window, r, direction)?, &o))
        .collect::<Result<_>>()?;
    let health = results
        .iter()
        .map(|r| r.health)
        .fold(StateHealth::default(), StateHealth::merge);
    Ok(RateScan {
        rates_mt_per_ms: rates.to_vec(),
        p: results.iter().map(|r| r.p).collect(),
        health,
    })
}

/// Saw-tooth field cycle around `b_center`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldSweepSpec {
    pub b_center_mt: f64,
    pub delta_b_mt: f64,
    pub t_lh_ms: f64,
    pub t_hl_ms: f64,
    #[serde(default)]
    pub n_cycles: Option<usize>,
    #[serde(default = "default_direction")]
    pub start_direction: Direction,
}

fn default_direction() -> Direction {
    Direction::Up
}

impl FieldSweepSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_lh_ms > 0.0 && self.t_hl_ms > 0.0) {
            return Err(Error::config("t_lh_ms and t_hl_ms must be positive"));
        }
        if !(self.delta_b_mt > 0.0) || self.b_center_mt - self.delta_b_mt / 2.0 < 0.0 {
            return Err(Error::config(
                "delta_b_mt must be positive and the window non-negative",
            ));
        }
        Ok(())
    }

    pub fn cycle_ms(&self) -> f64 {
        self.t_lh_ms + self.t_hl_ms
    }

    pub fn rate_lh(&self) -> f64 {
        self.delta_b_mt / self.t_lh_ms
    }

    pub fn rate_hl(&self) -> f64 {
        self.delta_b_mt / self.t_hl_ms
    }

    pub fn window(&self) -> (f64, f64) {
        (
            self.b_center_mt - self.delta_b_mt / 2.0,
            self.b_center_mt + self.delta_b_mt / 2.0,
        )
    }

    /// Same cycle with a given low-to-high fraction of the period.
    pub fn with_fraction(&self, fraction: f64) -> Result<Self> {
        if !(fraction > 0.0 && fraction < 1.0) {
            return Err(Error::config("low-to-high fraction must lie in (0, 1)"));
        }
        let tc = self.cycle_ms();
        Ok(FieldSweepSpec {
            t_lh_ms: fraction * tc,
            t_hl_ms: (1.0 - fraction) * tc,
            ..self.clone()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PumpSpec {
    #[serde(flatten)]
    pub pump: Pump,
    /// Light-pulse length aligned to the longer sweep segment; continuous
    /// illumination when `None`.
    #[serde(default)]
    pub pulse_ms: Option<f64>,
}

impl Default for PumpSpec {
    fn default() -> Self {
        PumpSpec {
            pump: Pump::Stroboscopic {
                reset_interval_ms: 1e-3,
            },
            pulse_ms: None,
        }
    }
}

/// Multi-cycle accumulation protocol.
///
/// Each segment hands the bulk `injection_scale * p_segment`, where `p_segment`
/// is the single-sweep polarization from a freshly pumped state (the NV is
/// reset at every reversal) and `injection_scale` is the number of NV centers
/// per 13C nucleus. The bulk saturates at `p_sat` and relaxes with `t1n_ms`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ProtocolSpec {
    pub system: SpinSystemSpec,
    pub sweep: FieldSweepSpec,
    pub pump: PumpSpec,
    pub t_p_ms: f64,
    pub t1n_ms: Option<f64>,
    pub p_sat: f64,
    pub injection_scale: f64,
    /// Apply `pump.pump` during each sweep segment as well.
    pub pump_during_sweep: bool,
    pub mid_sweep_dephasing: Dephasing,
    pub step: StepControl,
}

impl ProtocolSpec {
    pub fn new(system: SpinSystemSpec, sweep: FieldSweepSpec) -> Self {
        ProtocolSpec {
            system,
            sweep,
            pump: PumpSpec::default(),
            t_p_ms: 10_000.0,
            t1n_ms: Some(5_000.0),
            p_sat: 1.0,
            injection_scale: default_injection_scale(),
            pump_during_sweep: false,
            mid_sweep_dephasing: Dephasing::default(),
            step: StepControl::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        self.sweep.validate()?;
        self.pump.pump.validate()?;
        let tc = self.sweep.cycle_ms();
        if !(self.t_p_ms >= tc) {
            return Err(Error::config("t_p_ms must cover at least one field cycle"));
        }
        if let Some(t1) = self.t1n_ms {
            if !(t1 > 0.0) {
                return Err(Error::config("t1n_ms must be positive"));
            }
        }
        if let Some(t1) = self.pump.pulse_ms {
            if !(t1 > 0.0 && t1 <= tc) {
                return Err(Error::config("pulse_ms must lie in (0, t_c]"));
            }
        }
        if !(self.p_sat > 0.0 && self.injection_scale > 0.0) {
            return Err(Error::config("p_sat and injection_scale must be positive"));
        }
        Ok(())
    }

    /// Illuminated fraction of the (low-to-high, high-to-low) segments.
    pub fn illumination(&self) -> (f64, f64) {
        let Some(t1) = self.pump.pulse_ms else {
            return (1.0, 1.0);
        };
        let (tl, th) = (self.sweep.t_lh_ms, self.sweep.t_hl_ms);
        let (long, short) = if tl >= th { (tl, th) } else { (th, tl) };
        let f_long = (t1 / long).min(1.0);
        let f_short = ((t1 - long) / short).clamp(0.0, 1.0);
        if tl >= th {
            (f_long, f_short)
        } else {
            (f_short, f_long)
        }
    }
}

/// NV centers per 13C at 10 ppm NV and natural abundance.
pub fn default_injection_scale() -> f64 {
    10e-6 / crate::constants::C13_NATURAL_ABUNDANCE
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BuildupSeries {
    pub t_ms: Vec<f64>,
    pub p: Vec<f64>,
    pub p_lh: f64,
    pub p_hl: f64,
    /// Exponential buildup time from the ratio of successive increments.
    pub tau_ms: Option<f64>,
    pub health: StateHealth,
}

impl BuildupSeries {
    pub fn final_p(&self) -> f64 {
        *self.p.last().unwrap_or(&0.0)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("t_ms,P\n");
        for (t, p) in self.t_ms.iter().zip(&self.p) {
            out.push_str(&format!("{t:.6},{p:.9e}\n"));
        }
        out
    }
}

fn estimate_tau(p: &[f64], tc: f64) -> Option<f64> {
    let d: Vec<f64> = p.windows(2).map(|w| w[1] - w[0]).collect();
    let mut ratios: Vec<f64> = d
        .windows(2)
        .filter(|w| w[0].abs() > 1e-300 && w[1].abs() > 1e-300)
        .map(|w| w[1] / w[0])
        .filter(|r| *r > 0.0 && *r < 1.0)
        .collect();
    if ratios.is_empty() {
        return None;
    }
    ratios.sort_by(f64::total_cmp);
    let r = ratios[ratios.len() / 2];
    Some(-tc / r.ln())
}

pub fn multi_cycle_protocol(protocol: &ProtocolSpec) -> Result<BuildupSeries> {
    protocol.validate()?;
    let sw = &protocol.sweep;
    let window = sw.window();
    let opts = SweepOptions {
        step: protocol.step.clone(),
        dephase_final: true,
        in_sweep_pump: protocol.pump_during_sweep.then_some(protocol.pump.pump),
        trajectory_points: 0,
        mid_sweep_dephasing: protocol.mid_sweep_dephasing.clone(),
    };
    let segs = [
        SweepSegment::new(window, sw.rate_lh(), Direction::Up)?,
        SweepSegment::new(window, sw.rate_hl(), Direction::Down)?,
    ];
    let res: Vec<SweepResult> = segs
        .par_iter()
        .map(|s| single_sweep_polarization(&protocol.system, s, &opts))
        .collect::<Result<_>>()?;
    let (f_lh, f_hl) = protocol.illumination();
    let p_lh = res[0].p * f_lh;
    let p_hl = res[1].p * f_hl;
    let health = res[0].health.merge(res[1].health);
    let tc = sw.cycle_ms();
    let n = sw
        .n_cycles
        .unwrap_or((protocol.t_p_ms / tc).floor() as usize);
    let order = match sw.start_direction {
        Direction::Up => [p_lh, p_hl],
        Direction::Down => [p_hl, p_lh],
    };
    let eta = protocol.injection_scale;
    let leak = protocol.t1n_ms.map_or(0.0, |t1| tc / t1);
    let mut p = 0.0f64;
    let mut series = vec![0.0];
    let mut times = vec![0.0];
    for k in 0..n {
        let start = p;
        for inj in order {
            p += eta * inj * (1.0 - p.abs() / protocol.p_sat);
        }
        p -= leak * start;
        series.push(p);
        times.push((k + 1) as f64 * tc);
    }
    Ok(BuildupSeries {
        tau_ms: estimate_tau(&series, tc),
        t_ms: times,
        p: series,
        p_lh,
        p_hl,
        health,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FractionScan {
    pub fractions: Vec<f64>,
    pub p: Vec<f64>,
    pub health: StateHealth,
}

impl FractionScan {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction_LH,P\n");
        for (f, p) in self.fractions.iter().zip(&self.p) {
            out.push_str(&format!("{f:.6},{p:.9e}\n"));
        }
        out
    }
}

/// Final buildup polarization versus `t_LH / t_c` at fixed period.
pub fn fraction_scan(protocol: &ProtocolSpec, fractions: &[f64]) -> Result<FractionScan> {
    let runs: Vec<BuildupSeries> = fractions
        .par_iter()
        .map(|&f| {
            let mut p = protocol.clone();
            p.sweep = protocol.sweep.with_fraction(f)?;
            multi_cycle_protocol(&p)
        })
        .collect::<Result<_>>()?;
    Ok(FractionScan {
        fractions: fractions.to_vec(),
        p: runs.iter().map(BuildupSeries::final_p).collect(),
        health: runs
            .iter()
            .map(|r| r.health)
            .fold(StateHealth::default(), StateHealth::merge),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectrumOptions {
    pub tau_evol_us: f64,
    pub pump_cycles: usize,
}

impl Default for SpectrumOptions {
    fn default() -> Self {
        SpectrumOptions {
            tau_evol_us: 10.0,
            pump_cycles: 200,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FieldScan {
    pub fields_mt: Vec<f64>,
    pub p: Vec<f64>,
    pub health: StateHealth,
}

impl FieldScan {
    pub fn to_csv(&self, column: &str) -> String {
        let mut out = format!("{column},P\n");
        for (b, p) in self.fields_mt.iter().zip(&self.p) {
            out.push_str(&format!("{b:.6},{p:.9e}\n"));
        }
        out
    }
}

/// Static-field pumping: alternate free evolution for `tau_evol_us` and an
/// NV reset, `pump_cycles` times, starting from the pumped state.
pub fn dnp_spectrum(
    spec: &SpinSystemSpec,
    b0_list: &[f64],
    opts: &SpectrumOptions,
) -> Result<FieldScan> {
    if !(opts.tau_evol_us > 0.0) || opts.pump_cycles == 0 {
        return Err(Error::config(
            "tau_evol_us must be positive and pump_cycles >= 1",
        ));
    }
    if b0_list.iter().any(|b| !(*b >= 0.0) || !b.is_finite()) {
        return Err(Error::config("B0 values must be finite and non-negative"));
    }
    let nv = default_nv_site(spec)?;
    let c = default_carbon_site(spec)?;
    let parts = spec.hamiltonian_parts()?;
    let pol_op = spec.polarization_operator(c)?;
    let dims = spec.dims();
    let rho0 = pumped_state(spec, nv)?;
    let out: Vec<(f64, StateHealth)> = b0_list
        .par_iter()
        .map(|&b| {
            let u = step_unitary(&parts.at(b).into_matrix(), opts.tau_evol_us);
            // after a reset the state is |0><0| ⊗ sigma; one cycle maps
            // sigma -> sum_a K_a sigma K_a† with K_a = <a|_NV U |0>_NV
            let kraus = reset_kraus(&u, &dims, nv);
            let mut sigma = partial_trace(&rho0, &dims, nv)?;
            for _ in 0..opts.pump_cycles {
                let mut next = DMatrix::<C64>::zeros(sigma.nrows(), sigma.ncols());
                for k in &kraus {
                    next += k * &sigma * k.adjoint();
                }
                sigma = next;
            }
            let rho = embed_reset(&sigma, &dims, nv);
            Ok((rho.expectation(&pol_op), rho.health()))
        })
        .collect::<Result<_>>()?;
    Ok(FieldScan {
        fields_mt: b0_list.to_vec(),
        p: out.iter().map(|x| x.0).collect(),
        health: out
            .iter()
            .map(|x| x.1)
            .fold(StateHealth::default(), StateHealth::merge),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RangeScanOptions {
    /// Rate of the polarizing (slow) segment.
    pub slow_rate_mt_per_ms: f64,
    /// Rate of the return segment.
    pub fast_rate_mt_per_ms: f64,
    pub n_cycles: usize,
    pub step: StepControl,
    pub mid_sweep_dephasing: Dephasing,
}

impl Default for RangeScanOptions {
    fn default() -> Self {
        RangeScanOptions {
            slow_rate_mt_per_ms: 0.5,
            fast_rate_mt_per_ms: 5.0,
            n_cycles: 3,
            step: StepControl::default(),
            mid_sweep_dephasing: Dephasing::default(),
        }
    }
}

/// Sweep-range scan: for each range `δB`, repeat slow sweeps from `b_start`
/// to `b_start ± δB` with fast returns, keeping the full state (including
/// the 14N) between cycles and resetting the NV at every reversal.
pub fn sweep_range_scan(
    spec: &SpinSystemSpec,
    b_start: f64,
    ranges: &[f64],
    direction: Direction,
    opts: &RangeScanOptions,
) -> Result<FieldScan> {
    if opts.n_cycles == 0 {
        return Err(Error::config("n_cycles must be >= 1"));
    }
    let nv = default_nv_site(spec)?;
    let c = default_carbon_site(spec)?;
    let parts = spec.hamiltonian_parts()?;
    let pol_op = spec.polarization_operator(c)?;
    let dims = spec.dims();
    let rho0 = pumped_state(spec, nv)?;
    let dephase_at = opts.mid_sweep_dephasing.resolve(spec)?;
    let out: Vec<(f64, StateHealth)> = ranges
        .par_iter()
        .map(|&db| {
            if !(db >= 0.0) {
                return Err(Error::config("sweep ranges must be non-negative"));
            }
            if db == 0.0 {
                return Ok((rho0.expectation(&pol_op), rho0.health()));
            }
            let (lo, hi) = match direction {
                Direction::Up => (b_start, b_start + db),
                Direction::Down => (b_start - db, b_start),
            };
            let slow = SweepSegment::new((lo, hi), opts.slow_rate_mt_per_ms, direction)?;
            let fast = SweepSegment::new((lo, hi), opts.fast_rate_mt_per_ms, direction.flipped())?;
            let sopts = SweepOptions {
                step: opts.step.clone(),
                dephase_final: false,
                in_sweep_pump: None,
                trajectory_points: 0,
                mid_sweep_dephasing: Dephasing::None,
            };
            let mut rho = rho0.clone();
            for _ in 0..opts.n_cycles {
                for seg in [&slow, &fast] {
                    let (r, _, _) =
                        run_segment(spec, &parts, rho, seg, &sopts, &dephase_at, nv, &pol_op)?;
                    rho = optical_reset(&r, &dims, nv)?;
                }
            }
            let (_, b_end) = fast.endpoints();
            let p = dephase(&rho, parts.at(b_end).matrix(), 1e-9).expectation(&pol_op);
            Ok((p, rho.health()))
        })
        .collect::<Result<_>>()?;
    Ok(FieldScan {
        fields_mt: ranges.to_vec(),
        p: out.iter().map(|x| x.0).collect(),
        health: out
            .iter()
            .map(|x| x.1)
            .fold(StateHealth::default(), StateHealth::merge),
    })
}
