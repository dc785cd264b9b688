//! Physical constants (CODATA 2018 exact values) and unit conversions.
//!
//! Internally frequencies are ordinary frequencies in GHz, energies are
//! expressed as `E/h` in GHz, and times are in ns (dynamics) or μs (reported
//! lifetimes). Angular frequencies only appear inside the dynamics integrator.

use std::f64::consts::PI;

/// Elementary charge, C.
pub const ELEMENTARY_CHARGE: f64 = 1.602_176_634e-19;
/// Planck constant, J·s.
pub const PLANCK: f64 = 6.626_070_15e-34;
/// Reduced Planck constant, J·s.
pub const HBAR: f64 = PLANCK / (2.0 * PI);
/// Magnetic flux quantum h/2e, Wb.
pub const FLUX_QUANTUM: f64 = PLANCK / (2.0 * ELEMENTARY_CHARGE);

pub const FF: f64 = 1e-15;
pub const PF: f64 = 1e-12;
pub const NH: f64 = 1e-9;
pub const GHZ: f64 = 1e9;
pub const MHZ: f64 = 1e6;
pub const UV: f64 = 1e-6;

/// Converts MHz to GHz.
#[inline]
pub fn mhz_to_ghz(f: f64) -> f64 {
    f * 1e-3
}

/// Converts GHz to MHz.
#[inline]
pub fn ghz_to_mhz(f: f64) -> f64 {
    f * 1e3
}

/// Angular frequency in rad/ns for an ordinary frequency in MHz.
#[inline]
pub fn mhz_to_rad_per_ns(f: f64) -> f64 {
    2.0 * PI * f * 1e-3
}
