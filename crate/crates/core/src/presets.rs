//! Ready-made NV/P1/13C/14N clusters.
//!
//! Scalar couplings (NV-P1 dipolar, NV-13C hyperfine) are turned into
//! point-dipole tensors with the pair axis at a polar angle from the NV
//! axis (in the xz plane) and `|T_zz|` equal to the quoted value. The signs follow the signed
//! gyromagnetic ratios of the two partners.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spinsys::{axial_tensor, scalar_coupling_tensor, Coupling, SpinSpecies, SpinSystemSpec};

pub const NV: &str = "NV";
pub const P1: &str = "P1";
pub const C13: &str = "13C";
pub const N14_P1: &str = "14N(P1)";
pub const N14_NV: &str = "14N(NV)";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum CarbonPartner {
    #[default]
    Nv,
    P1,
}

/// Parameters of an NV-P1 cluster with optional 13C and 14N hosts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterPreset {
    pub d_nv_p1_mhz: f64,
    pub d_nv_c_mhz: f64,
    pub nv_p1_angle_deg: f64,
    pub carbon_angle_deg: f64,
    pub carbon: bool,
    pub carbon_partner: CarbonPartner,
    pub p1_nitrogen: bool,
    pub nv_nitrogen: bool,
    pub p1_hyperfine_par_mhz: f64,
    pub p1_hyperfine_perp_mhz: f64,
    pub p1_hyperfine_axis: [f64; 3],
    pub nv_hyperfine_mhz: f64,
    pub quadrupole_p1_mhz: f64,
    pub quadrupole_nv_mhz: f64,
    pub theta_deg: f64,
    pub phi_deg: f64,
}

impl Default for ClusterPreset {
    fn default() -> Self {
        ClusterPreset {
            d_nv_p1_mhz: 0.5,
            d_nv_c_mhz: 0.92,
            nv_p1_angle_deg: 30.0,
            carbon_angle_deg: 10.0,
            carbon: true,
            carbon_partner: CarbonPartner::Nv,
            p1_nitrogen: false,
            nv_nitrogen: false,
            p1_hyperfine_par_mhz: 114.0,
            p1_hyperfine_perp_mhz: 81.3,
            p1_hyperfine_axis: [0.0, 0.0, 1.0],
            nv_hyperfine_mhz: 3.0,
            quadrupole_p1_mhz: 0.0,
            quadrupole_nv_mhz: 0.0,
            theta_deg: 0.0,
            phi_deg: 0.0,
        }
    }
}

impl ClusterPreset {
    /// NV, P1 and one 13C (12 levels).
    pub fn trio() -> Self {
        ClusterPreset::default()
    }

    /// Trio plus the P1 host 14N (36 levels).
    pub fn quartet() -> Self {
        ClusterPreset {
            p1_nitrogen: true,
            ..ClusterPreset::default()
        }
    }

    /// Both 14N hosts (108 levels).
    pub fn full() -> Self {
        ClusterPreset {
            p1_nitrogen: true,
            nv_nitrogen: true,
            ..ClusterPreset::default()
        }
    }

    /// NV-P1 pair with both nitrogen hosts and no carbon.
    pub fn pair_with_nitrogens() -> Self {
        ClusterPreset {
            carbon: false,
            p1_nitrogen: true,
            nv_nitrogen: true,
            ..ClusterPreset::default()
        }
    }

    pub fn build(&self) -> Result<SpinSystemSpec> {
        if self.d_nv_p1_mhz < 0.0 || self.d_nv_c_mhz < 0.0 {
            return Err(Error::config("scalar couplings must be non-negative"));
        }
        let mut species = vec![SpinSpecies::nv(), SpinSpecies::p1()];
        let (nv, p1) = (0, 1);
        let mut couplings = Vec::new();
        if self.d_nv_p1_mhz > 0.0 {
            let t = scalar_coupling_tensor(
                self.d_nv_p1_mhz,
                self.nv_p1_angle_deg,
                species[nv].gamma,
                species[p1].gamma,
            )?;
            couplings.push(Coupling::new(nv, p1, t));
        }
        if self.p1_nitrogen {
            let mut n = SpinSpecies::nitrogen14(N14_P1, self.quadrupole_p1_mhz);
            let axis = Vector3::from(self.p1_hyperfine_axis);
            if !(axis.norm() > 0.0) {
                return Err(Error::config("p1_hyperfine_axis must be non-zero"));
            }
            n.axis = Some(self.p1_hyperfine_axis);
            species.push(n);
            let t = axial_tensor(self.p1_hyperfine_par_mhz, self.p1_hyperfine_perp_mhz, &axis);
            couplings.push(Coupling::new(p1, species.len() - 1, t));
        }
        if self.carbon {
            species.push(SpinSpecies::carbon13());
            let c = species.len() - 1;
            let partner = match self.carbon_partner {
                CarbonPartner::Nv => nv,
                CarbonPartner::P1 => p1,
            };
            if self.d_nv_c_mhz > 0.0 {
                let t = scalar_coupling_tensor(
                    self.d_nv_c_mhz,
                    self.carbon_angle_deg,
                    species[partner].gamma,
                    species[c].gamma,
                )?;
                couplings.push(Coupling::new(partner, c, t));
            }
        }
        if self.nv_nitrogen {
            species.push(SpinSpecies::nitrogen14(N14_NV, self.quadrupole_nv_mhz));
            let n = species.len() - 1;
            couplings.push(Coupling::new(
                nv,
                n,
                nalgebra::Matrix3::identity() * self.nv_hyperfine_mhz,
            ));
        }
        let spec = SpinSystemSpec {
            species,
            couplings,
            theta_deg: self.theta_deg,
            phi_deg: self.phi_deg,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Bare NV electron (3 levels).
pub fn bare_nv(theta_deg: f64) -> SpinSystemSpec {
    SpinSystemSpec {
        species: vec![SpinSpecies::nv()],
        couplings: vec![],
        theta_deg,
        phi_deg: 0.0,
    }
}

/// Bare P1 electron (2 levels).
pub fn bare_p1(theta_deg: f64) -> SpinSystemSpec {
    SpinSystemSpec {
        species: vec![SpinSpecies::p1()],
        couplings: vec![],
        theta_deg,
        phi_deg: 0.0,
    }
}
