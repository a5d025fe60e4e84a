//! Spin operators, point-dipole couplings and lab-frame Hamiltonians.
//!
//! All energies are in MHz (H/h), fields in mT, distances in nm. The NV
//! symmetry axis is the frame z axis; the applied field direction makes the
//! polar angle `theta_deg` with it.
//!
//! Zeeman terms are entered as `-gamma * B * (b.S)` with signed gyromagnetic
//! ratios. Electrons carry `gamma = -28.0249 MHz/mT`, so the electron Zeeman
//! term is `+|gamma_e| B (b.S)` and the NV `|m_s = -1>` branch descends with
//! field. Nuclei (13C, 14N) have positive ratios, giving the NMR convention
//! `-gamma_n B (b.I)`.

use nalgebra::{DMatrix, Matrix3, Rotation3, Unit, Vector3};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::constants::{
    dipolar_prefactor_mhz_nm3, GAMMA_C13_MHZ_PER_MT, GAMMA_E_MHZ_PER_MT, GAMMA_N14_MHZ_PER_MT,
    NV_ZERO_FIELD_MHZ,
};
use crate::error::{Error, Result};
use crate::C64;

/// Largest supported Hilbert space.
pub const MAX_DIM: usize = 256;

/// Smallest separation accepted by [`dipolar_tensor`], nm.
pub const MIN_PAIR_DISTANCE_NM: f64 = 0.15;

const HERMITICITY_TOL: f64 = 1e-9;

/// Spin quantum number. Only the values needed for NV/P1/13C/14N clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Spin {
    Half,
    One,
}

impl Spin {
    pub fn from_value(s: f64) -> Result<Self> {
        if s == 0.5 {
            Ok(Spin::Half)
        } else if s == 1.0 {
            Ok(Spin::One)
        } else {
            Err(Error::config(format!(
                "unsupported spin quantum number {s}; expected 1/2 or 1"
            )))
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Spin::Half => 0.5,
            Spin::One => 1.0,
        }
    }

    /// Matrix dimension `2s + 1`.
    pub fn dim(self) -> usize {
        match self {
            Spin::Half => 2,
            Spin::One => 3,
        }
    }

    /// Magnetic quantum number of basis index `k` (basis ordered from `+s` down).
    pub fn m(self, k: usize) -> f64 {
        self.value() - k as f64
    }
}

impl Serialize for Spin {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(self.value())
    }
}

impl<'de> Deserialize<'de> for Spin {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = f64::deserialize(d)?;
        Spin::from_value(v).map_err(serde::de::Error::custom)
    }
}

/// Dense complex matrix known to be Hermitian to `1e-9` relative.
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator(DMatrix<C64>);

impl HermitianOperator {
    pub fn new(m: DMatrix<C64>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::Contract(format!(
                "operator is {}x{}, not square",
                m.nrows(),
                m.ncols()
            )));
        }
        let err = hermiticity_error(&m);
        let scale = max_abs(&m).max(f64::MIN_POSITIVE);
        if err > HERMITICITY_TOL * scale {
            return Err(Error::Contract(format!(
                "operator is not Hermitian: max |H - H^dagger| = {err:e} (scale {scale:e})"
            )));
        }
        Ok(HermitianOperator(m))
    }

    pub fn identity(dim: usize) -> Self {
        HermitianOperator(DMatrix::identity(dim, dim))
    }

    pub fn dim(&self) -> usize {
        self.0.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.0
    }

    pub fn trace(&self) -> C64 {
        self.0.trace()
    }

    pub fn max_abs(&self) -> f64 {
        max_abs(&self.0)
    }

    pub fn hermiticity_error(&self) -> f64 {
        hermiticity_error(&self.0)
    }
}

pub(crate) fn max_abs(m: &DMatrix<C64>) -> f64 {
    m.iter().fold(0.0, |acc, z| acc.max(z.norm()))
}

pub(crate) fn hermiticity_error(m: &DMatrix<C64>) -> f64 {
    let n = m.nrows();
    let mut err: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            err = err.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    err
}

/// Angular momentum matrices `(Sx, Sy, Sz)` in the `|m = +s ... -s>` basis.
pub fn spin_operators(spin: Spin) -> [HermitianOperator; 3] {
    let d = spin.dim();
    let s = spin.value();
    let mut sp = DMatrix::<C64>::zeros(d, d);
    // <m+1| S+ |m> = sqrt(s(s+1) - m(m+1)); index k holds m = s - k.
    for k in 1..d {
        let m = spin.m(k);
        sp[(k - 1, k)] = C64::new((s * (s + 1.0) - m * (m + 1.0)).sqrt(), 0.0);
    }
    let sm = sp.adjoint();
    let sx = (&sp + &sm) * C64::new(0.5, 0.0);
    let sy = (&sp - &sm) * C64::new(0.0, -0.5);
    let sz = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(d, |k, _| {
        C64::new(spin.m(k), 0.0)
    }));
    [
        HermitianOperator(sx),
        HermitianOperator(sy),
        HermitianOperator(sz),
    ]
}

/// Spin operators from a quantum-number value, rejecting anything but 1/2 and 1.
pub fn spin_operators_for(s: f64) -> Result<[HermitianOperator; 3]> {
    Ok(spin_operators(Spin::from_value(s)?))
}

/// Embeds a single-site operator into the product space `dims`.
pub fn embed(op: &HermitianOperator, site: usize, dims: &[usize]) -> Result<HermitianOperator> {
    Ok(HermitianOperator(embed_matrix(op.matrix(), site, dims)?))
}

pub(crate) fn embed_matrix(op: &DMatrix<C64>, site: usize, dims: &[usize]) -> Result<DMatrix<C64>> {
    let Some(&d_site) = dims.get(site) else {
        return Err(Error::config(format!(
            "site {site} out of range for {} sites",
            dims.len()
        )));
    };
    if op.nrows() != d_site || op.ncols() != d_site {
        return Err(Error::config(format!(
            "operator dimension {} does not match site {site} dimension {d_site}",
            op.nrows()
        )));
    }
    let left: usize = dims[..site].iter().product();
    let right: usize = dims[site + 1..].iter().product();
    let total = left * d_site * right;
    let mut out = DMatrix::<C64>::zeros(total, total);
    for l in 0..left {
        for a in 0..d_site {
            for b in 0..d_site {
                let v = op[(a, b)];
                if v == C64::new(0.0, 0.0) {
                    continue;
                }
                let row0 = (l * d_site + a) * right;
                let col0 = (l * d_site + b) * right;
                for r in 0..right {
                    out[(row0 + r, col0 + r)] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Point-dipole coupling tensor `(C/r^3)(1 - 3 n n)` in MHz, for ratios in MHz/mT
/// and separation in nm. `C = (mu_0/4pi) h gamma1 gamma2` keeps the sign of the product.
pub fn dipolar_tensor(r_nm: &Vector3<f64>, gamma1: f64, gamma2: f64) -> Result<Matrix3<f64>> {
    let r = r_nm.norm();
    if !(r > MIN_PAIR_DISTANCE_NM) {
        return Err(Error::DegenerateGeometry(format!(
            "pair separation {r} nm is below {MIN_PAIR_DISTANCE_NM} nm"
        )));
    }
    let n = r_nm / r;
    let c = dipolar_prefactor_mhz_nm3(gamma1, gamma2) / (r * r * r);
    Ok((Matrix3::identity() - n * n.transpose() * 3.0) * c)
}

/// Point-dipole tensor for a pair axis at `polar_deg` from z (in the xz plane),
/// rescaled so that `|T_zz| = d_mhz`. Converts a quoted scalar coupling into a tensor.
pub fn scalar_coupling_tensor(
    d_mhz: f64,
    polar_deg: f64,
    gamma1: f64,
    gamma2: f64,
) -> Result<Matrix3<f64>> {
    let a = polar_deg.to_radians();
    let dir = Vector3::new(a.sin(), 0.0, a.cos());
    let t = dipolar_tensor(&dir, gamma1, gamma2)?;
    let zz = t[(2, 2)];
    if zz.abs() < 1e-12 * t.abs().max() {
        return Err(Error::DegenerateGeometry(format!(
            "pair axis at {polar_deg} deg has vanishing zz element"
        )));
    }
    Ok(t * (d_mhz / zz.abs()))
}

/// `a_perp 1 + (a_par - a_perp) u u^T`.
pub fn axial_tensor(a_par: f64, a_perp: f64, axis: &Vector3<f64>) -> Matrix3<f64> {
    let u = axis.normalize();
    Matrix3::identity() * a_perp + u * u.transpose() * (a_par - a_perp)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinSpecies {
    pub label: String,
    pub spin: Spin,
    /// Signed gyromagnetic ratio, MHz/mT.
    pub gamma: f64,
    /// Axial term `D (a.S)^2`, MHz.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zero_field: Option<f64>,
    /// Species axis `a` for the axial term, defaults to the NV axis.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub axis: Option<[f64; 3]>,
}

impl SpinSpecies {
    pub fn nv() -> Self {
        SpinSpecies {
            label: "NV".into(),
            spin: Spin::One,
            gamma: -GAMMA_E_MHZ_PER_MT,
            zero_field: Some(NV_ZERO_FIELD_MHZ),
            axis: None,
        }
    }

    pub fn p1() -> Self {
        SpinSpecies {
            label: "P1".into(),
            spin: Spin::Half,
            gamma: -GAMMA_E_MHZ_PER_MT,
            zero_field: None,
            axis: None,
        }
    }

    pub fn carbon13() -> Self {
        SpinSpecies {
            label: "13C".into(),
            spin: Spin::Half,
            gamma: GAMMA_C13_MHZ_PER_MT,
            zero_field: None,
            axis: None,
        }
    }

    /// 14N host with an optional quadrupole term.
    pub fn nitrogen14(label: &str, quadrupole_mhz: f64) -> Self {
        SpinSpecies {
            label: label.into(),
            spin: Spin::One,
            gamma: GAMMA_N14_MHZ_PER_MT,
            zero_field: (quadrupole_mhz != 0.0).then_some(quadrupole_mhz),
            axis: None,
        }
    }

    fn axis_vector(&self) -> Vector3<f64> {
        self.axis
            .map_or(Vector3::z(), |a| Vector3::from(a).normalize())
    }
}

/// Bilinear coupling `S_i . A . S_j` with `A` in MHz.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub pair: (usize, usize),
    pub tensor: [[f64; 3]; 3],
}

impl Coupling {
    pub fn new(i: usize, j: usize, tensor: Matrix3<f64>) -> Self {
        let mut t = [[0.0; 3]; 3];
        for (a, row) in t.iter_mut().enumerate() {
            for (b, v) in row.iter_mut().enumerate() {
                *v = tensor[(a, b)];
            }
        }
        Coupling {
            pair: (i, j),
            tensor: t,
        }
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::from_fn(|a, b| self.tensor[a][b])
    }
}

/// Declarative spin cluster: species in site order, couplings, field orientation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpinSystemSpec {
    pub species: Vec<SpinSpecies>,
    #[serde(default)]
    pub couplings: Vec<Coupling>,
    /// Polar angle between field and NV axis, degrees.
    #[serde(default)]
    pub theta_deg: f64,
    #[serde(default)]
    pub phi_deg: f64,
}

impl SpinSystemSpec {
    pub fn dims(&self) -> Vec<usize> {
        self.species.iter().map(|s| s.spin.dim()).collect()
    }

    pub fn dim(&self) -> usize {
        self.dims().iter().product()
    }

    pub fn site_of(&self, label: &str) -> Option<usize> {
        self.species.iter().position(|s| s.label == label)
    }

    pub fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::config("spin system has no species"));
        }
        let dim: usize = self.dims().iter().product();
        if dim > MAX_DIM {
            return Err(Error::config(format!(
                "Hilbert dimension {dim} exceeds the limit {MAX_DIM}"
            )));
        }
        if !(0.0..=90.0).contains(&self.theta_deg) {
            return Err(Error::config(format!(
                "theta = {} deg is outside [0, 90] deg",
                self.theta_deg
            )));
        }
        if !self.phi_deg.is_finite() {
            return Err(Error::config("phi is not finite"));
        }
        for s in &self.species {
            if !s.gamma.is_finite() {
                return Err(Error::config(format!(
                    "species {} has non-finite gamma",
                    s.label
                )));
            }
            if s.zero_field.is_some_and(|d| !d.is_finite()) {
                return Err(Error::config(format!(
                    "species {} has non-finite zero-field term",
                    s.label
                )));
            }
            if let Some(a) = s.axis {
                let n = Vector3::from(a).norm();
                if !(n.is_finite() && n > 0.0) {
                    return Err(Error::config(format!(
                        "species {} has a degenerate axis",
                        s.label
                    )));
                }
            }
        }
        let n = self.species.len();
        for c in &self.couplings {
            let (i, j) = c.pair;
            if i == j || i >= n || j >= n {
                return Err(Error::config(format!(
                    "coupling pair ({i}, {j}) is invalid for {n} sites"
                )));
            }
            if c.tensor.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::config(format!(
                    "coupling ({i}, {j}) has non-finite entries"
                )));
            }
        }
        Ok(())
    }

    /// Unit field direction at polar angle theta and azimuth phi from the NV axis.
    pub fn field_direction(&self) -> Unit<Vector3<f64>> {
        let (t, p) = (self.theta_deg.to_radians(), self.phi_deg.to_radians());
        Unit::new_normalize(Vector3::new(t.sin() * p.cos(), t.sin() * p.sin(), t.cos()))
    }

    /// Copy with every internal axis and coupling tensor rotated by `rot`.
    /// The field direction is not touched.
    pub fn rotate_frame(&self, rot: &Rotation3<f64>) -> Self {
        let r = rot.matrix();
        let mut out = self.clone();
        for s in &mut out.species {
            let a = r * s.axis_vector();
            s.axis = Some([a.x, a.y, a.z]);
        }
        for c in &mut out.couplings {
            *c = Coupling::new(c.pair.0, c.pair.1, r * c.matrix() * r.transpose());
        }
        out
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("spin spec serializes");
        hex_digest(&bytes)
    }

    /// Splits `H(B) = H0 + B H1` for the configured field direction.
    pub fn hamiltonian_parts(&self) -> Result<HamiltonianParts> {
        self.hamiltonian_parts_along(&self.field_direction())
    }

    pub fn hamiltonian_parts_along(&self, dir: &Unit<Vector3<f64>>) -> Result<HamiltonianParts> {
        self.validate()?;
        let ops = SiteOperators::new(self)?;
        let dim = ops.dim;
        let mut h0 = DMatrix::<C64>::zeros(dim, dim);
        let mut h1 = DMatrix::<C64>::zeros(dim, dim);
        for (i, sp) in self.species.iter().enumerate() {
            let s = &ops.sites[i];
            if let Some(d) = sp.zero_field {
                let a = sp.axis_vector();
                let proj = &s[0] * C64::from(a.x) + &s[1] * C64::from(a.y) + &s[2] * C64::from(a.z);
                h0 += (&proj * &proj) * C64::from(d);
            }
            let along =
                &s[0] * C64::from(dir.x) + &s[1] * C64::from(dir.y) + &s[2] * C64::from(dir.z);
            h1 -= along * C64::from(sp.gamma);
        }
        for c in &self.couplings {
            let (i, j) = c.pair;
            for a in 0..3 {
                for b in 0..3 {
                    let t = c.tensor[a][b];
                    if t != 0.0 {
                        h0 += (&ops.sites[i][a] * &ops.sites[j][b]) * C64::from(t);
                    }
                }
            }
        }
        Ok(HamiltonianParts { h0, h1 })
    }

    /// Full Hamiltonian at field magnitude `b_mt`.
    pub fn build_hamiltonian(&self, b_mt: f64) -> Result<HermitianOperator> {
        if !(b_mt >= 0.0 && b_mt.is_finite()) {
            return Err(Error::config(format!(
                "field {b_mt} mT must be finite and non-negative"
            )));
        }
        Ok(self.hamiltonian_parts()?.at(b_mt))
    }

    /// `2 (b . I)` on `site`, i.e. the polarization observable along the field.
    pub fn polarization_operator(&self, site: usize) -> Result<DMatrix<C64>> {
        let sp = self
            .species
            .get(site)
            .ok_or_else(|| Error::config(format!("site {site} out of range")))?;
        let [sx, sy, sz] = spin_operators(sp.spin);
        let d = self.field_direction();
        let local = (sx.matrix() * C64::from(d.x)
            + sy.matrix() * C64::from(d.y)
            + sz.matrix() * C64::from(d.z))
            * C64::from(2.0);
        embed_matrix(&local, site, &self.dims())
    }
}

/// Affine field dependence of a Hamiltonian, `H0 + B H1`.
#[derive(Clone, Debug)]
pub struct HamiltonianParts {
    pub h0: DMatrix<C64>,
    /// Per-mT Zeeman part.
    pub h1: DMatrix<C64>,
}

impl HamiltonianParts {
    pub fn at(&self, b_mt: f64) -> HermitianOperator {
        HermitianOperator(&self.h0 + &self.h1 * C64::from(b_mt))
    }

    pub fn dim(&self) -> usize {
        self.h0.nrows()
    }
}

struct SiteOperators {
    dim: usize,
    sites: Vec<[DMatrix<C64>; 3]>,
}

impl SiteOperators {
    fn new(spec: &SpinSystemSpec) -> Result<Self> {
        let dims = spec.dims();
        let dim = dims.iter().product();
        let mut sites = Vec::with_capacity(dims.len());
        for (i, sp) in spec.species.iter().enumerate() {
            let [x, y, z] = spin_operators(sp.spin);
            sites.push([
                embed_matrix(x.matrix(), i, &dims)?,
                embed_matrix(y.matrix(), i, &dims)?,
                embed_matrix(z.matrix(), i, &dims)?,
            ]);
        }
        Ok(SiteOperators { dim, sites })
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
