//! Physical constants in the crate's working units (MHz, mT, ms, nm).

/// Electron gyromagnetic ratio magnitude, MHz/mT. Used for both NV and P1.
pub const GAMMA_E_MHZ_PER_MT: f64 = 28.0249;

/// Same ratio in SI cyclic units, Hz/T.
pub const GAMMA_E_HZ_PER_T: f64 = 2.80249e10;

/// NV ground-state zero-field splitting, MHz.
pub const NV_ZERO_FIELD_MHZ: f64 = 2870.0;

/// 13C gyromagnetic ratio, MHz/mT (10.7084 MHz/T).
pub const GAMMA_C13_MHZ_PER_MT: f64 = 0.010_708_4;

/// 14N gyromagnetic ratio, MHz/mT (3.0766 MHz/T).
pub const GAMMA_N14_MHZ_PER_MT: f64 = 0.003_076_6;

/// Planck constant, J s.
pub const PLANCK: f64 = 6.626_070_15e-34;

/// Boltzmann constant, J/K.
pub const BOLTZMANN: f64 = 1.380_649e-23;

/// mu_0 / 4 pi, T m / A.
pub const MU0_OVER_4PI: f64 = 1e-7;

/// Carbon atom number density of diamond, atoms/nm^3.
pub const DIAMOND_CARBON_DENSITY_PER_NM3: f64 = 176.3;

/// Natural 13C abundance.
pub const C13_NATURAL_ABUNDANCE: f64 = 0.0107;

/// Point-dipole prefactor (mu_0/4pi) h g1 g2 in MHz nm^3 for ratios given in MHz/mT.
pub fn dipolar_prefactor_mhz_nm3(gamma1_mhz_per_mt: f64, gamma2_mhz_per_mt: f64) -> f64 {
    // MHz/mT -> Hz/T is 1e9 each; Hz m^3 -> MHz nm^3 is 1e27 / 1e6.
    MU0_OVER_4PI * PLANCK * (gamma1_mhz_per_mt * 1e9) * (gamma2_mhz_per_mt * 1e9) * 1e21
}

/// Electron-electron dipolar prefactor, MHz nm^3 (about 52.04).
pub fn c_ee_mhz_nm3() -> f64 {
    dipolar_prefactor_mhz_nm3(GAMMA_E_MHZ_PER_MT, GAMMA_E_MHZ_PER_MT)
}
