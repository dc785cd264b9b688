//! Lumped-element circuit quantities: charging energy, LC frequency,
//! zero-point voltages, transmon-resonator coupling, flux tuning of the SQUID
//! and the Purcell limit on qubit lifetime.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::constants::{ELEMENTARY_CHARGE, FF, GHZ, HBAR, MHZ, NH, PF, PLANCK, UV};
use crate::error::{require_positive, Error, Result};

/// Ratio E_J/E_C below which the Duffing description of the transmon is poor.
pub const TRANSMON_REGIME_RATIO: f64 = 10.0;

/// Default loaded quality factor used for the resonator decay rate.
pub const DEFAULT_Q_LOADED: f64 = 1e4;

/// Lumped-element parameters of one transmon-resonator unit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircuitParams {
    /// Resonator-qubit coupling capacitance, fF.
    pub c_g: f64,
    /// Transmon shunt capacitance (junction capacitance included), fF.
    pub c_t: f64,
    /// Resonator parallel-plate capacitance, pF.
    pub c_r: f64,
    /// Resonator-to-ground capacitance, fF. Carried for completeness only.
    pub c_rg: f64,
    /// Resonator inductance, nH.
    pub inductance: f64,
    /// Combined Josephson energy of both SQUID junctions, h·GHz.
    pub ej_sigma: f64,
    /// Areal capacitance of the parallel-plate dielectric, fF/μm².
    pub c_specific: f64,
    /// Φ_e/Φ_0 at zero applied control.
    pub flux_offset: f64,
    /// Applied control corresponding to one flux quantum.
    pub flux_period: f64,
}

impl Default for CircuitParams {
    /// Values of the measured device (resonator 1 A).
    fn default() -> Self {
        Self {
            c_g: 6.5,
            c_t: 51.0,
            c_r: 5.13,
            c_rg: 58.0,
            inductance: 0.3,
            ej_sigma: 11.4,
            c_specific: 14.0,
            flux_offset: 0.0,
            flux_period: 1.0,
        }
    }
}

impl CircuitParams {
    pub fn validate(&self) -> Result<()> {
        require_positive("C_g", self.c_g)?;
        require_positive("C_t", self.c_t)?;
        require_positive("C_r", self.c_r)?;
        require_positive("C_rG", self.c_rg)?;
        require_positive("L", self.inductance)?;
        require_positive("EJ_sigma", self.ej_sigma)?;
        require_positive("c_specific", self.c_specific)?;
        if !self.flux_offset.is_finite() {
            return Err(Error::Domain("flux_offset must be finite".into()));
        }
        if self.flux_period == 0.0 || !self.flux_period.is_finite() {
            return Err(Error::Domain(
                "flux_period must be finite and nonzero".into(),
            ));
        }
        Ok(())
    }

    /// Total capacitance shunting the junction, C_t + C_g, in fF.
    pub fn c_sigma(&self) -> f64 {
        self.c_t + self.c_g
    }

    /// Normalized flux Φ_e/Φ_0 for an applied control value.
    pub fn phi_ratio(&self, control: f64) -> f64 {
        phi_ratio(control, self.flux_offset, self.flux_period)
    }
}

/// Normalized flux for a control value under an offset/period calibration.
#[inline]
pub fn phi_ratio(control: f64, flux_offset: f64, flux_period: f64) -> f64 {
    flux_offset + control / flux_period
}

/// Quantities derived from [`CircuitParams`] at given resonator and qubit
/// frequencies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DerivedEnergies {
    /// Charging energy from C_t + C_g, h·GHz.
    pub e_c: f64,
    /// Bare LC estimate of the resonator frequency, GHz.
    pub f_r_lc: f64,
    /// Resonator zero-point voltage at the coupling electrode, μV.
    pub v_rms: f64,
    /// Transmon zero-point voltage, μV.
    pub v_t: f64,
    /// g/2π from the capacitance-ratio closed form, MHz.
    pub g_over_2pi: f64,
}

/// E_C = e²/2C_Σ in h·GHz; `c_sigma` in fF.
pub fn charging_energy(c_sigma: f64) -> Result<f64> {
    require_positive("capacitance", c_sigma)?;
    Ok(ELEMENTARY_CHARGE * ELEMENTARY_CHARGE / (2.0 * c_sigma * FF * PLANCK) / GHZ)
}

/// 1/(2π√(LC)) in GHz; `inductance` in nH, `capacitance` in pF.
pub fn lc_frequency(inductance: f64, capacitance: f64) -> Result<f64> {
    require_positive("inductance", inductance)?;
    require_positive("capacitance", capacitance)?;
    Ok(1.0 / (2.0 * PI * (inductance * NH * capacitance * PF).sqrt()) / GHZ)
}

/// Parallel-plate capacitance c·S in pF for a square electrode of side
/// `area_side` μm and areal capacitance `c_specific` fF/μm².
pub fn ppc_capacitance(area_side: f64, c_specific: f64) -> Result<f64> {
    require_positive("area side", area_side)?;
    require_positive("c_specific", c_specific)?;
    Ok(c_specific * area_side * area_side * 1e-3)
}

/// Zero-point voltage between the coupling electrode and ground,
/// ½√(ħω_r/2C_r), in μV. `f_r` in GHz, `c_r` in pF.
///
/// The ½ accounts for the electrode sitting at half the potential difference
/// across the plate capacitor.
pub fn zero_point_voltage(f_r: f64, c_r: f64) -> Result<f64> {
    require_positive("f_r", f_r)?;
    require_positive("C_r", c_r)?;
    let omega = 2.0 * PI * f_r * GHZ;
    Ok(0.5 * (HBAR * omega / (2.0 * c_r * PF)).sqrt() / UV)
}

/// Transmon dipole voltage √(ħω_ge/2C_t) in μV. `f_ge` in GHz, `c_t` in fF.
pub fn transmon_voltage(f_ge: f64, c_t: f64) -> Result<f64> {
    require_positive("f_ge", f_ge)?;
    require_positive("C_t", c_t)?;
    let omega = 2.0 * PI * f_ge * GHZ;
    Ok((HBAR * omega / (2.0 * c_t * FF)).sqrt() / UV)
}

/// g/2π in MHz from ħg = V_t·C_g·V_rms. Voltages in μV, `c_g` in fF.
pub fn coupling_from_voltages(v_t: f64, c_g: f64, v_rms: f64) -> Result<f64> {
    require_positive("V_t", v_t)?;
    require_positive("V_rms", v_rms)?;
    if !(c_g >= 0.0) {
        return Err(Error::Domain(format!("C_g must be nonnegative, got {c_g}")));
    }
    Ok(v_t * UV * c_g * FF * v_rms * UV / PLANCK / MHZ)
}

/// g/2π in MHz from g = ¼·C_g/√(C_r C_t)·√(ω_r ω_ge).
///
/// `f_r`, `f_ge` in GHz; capacitances taken from `params`.
pub fn coupling_g(params: &CircuitParams, f_r: f64, f_ge: f64) -> Result<f64> {
    coupling_g_raw(params.c_g, params.c_t, params.c_r, f_r, f_ge)
}

/// [`coupling_g`] with explicit capacitances (C_g, C_t in fF; C_r in pF).
pub fn coupling_g_raw(c_g: f64, c_t: f64, c_r: f64, f_r: f64, f_ge: f64) -> Result<f64> {
    if !(c_g >= 0.0) || !c_g.is_finite() {
        return Err(Error::Domain(format!("C_g must be nonnegative, got {c_g}")));
    }
    require_positive("C_t", c_t)?;
    require_positive("C_r", c_r)?;
    require_positive("f_r", f_r)?;
    require_positive("f_ge", f_ge)?;
    let ratio = c_g * FF / (c_r * PF * c_t * FF).sqrt();
    Ok(0.25 * ratio * (f_r * f_ge).sqrt() * 1e3)
}

/// E_J^Σ |cos(π Φ_e/Φ_0)|.
pub fn flux_tuned_ej(ej_sigma: f64, phi_ratio: f64) -> f64 {
    ej_sigma * (PI * phi_ratio).cos().abs()
}

/// ω_ge/2π = √(8 E_J E_C) − E_C in GHz.
pub fn transmon_freq(e_j: f64, e_c: f64) -> Result<f64> {
    require_positive("E_J", e_j)?;
    require_positive("E_C", e_c)?;
    Ok((8.0 * e_j * e_c).sqrt() - e_c)
}

/// Whether E_J/E_C is large enough for the Duffing approximation.
pub fn in_transmon_regime(e_j: f64, e_c: f64) -> bool {
    e_c > 0.0 && e_j / e_c >= TRANSMON_REGIME_RATIO
}

/// κ/2π in MHz for a resonator at `f_r` GHz with quality factor `q`.
pub fn kappa_from_q(f_r: f64, q: f64) -> Result<f64> {
    require_positive("f_r", f_r)?;
    require_positive("Q", q)?;
    Ok(f_r * 1e3 / q)
}

/// Purcell-limited qubit lifetime (Δ/g)²/κ in μs.
///
/// `g`, `detuning` and `kappa` are ordinary frequencies in MHz; κ enters as
/// the angular decay rate 2π·κ.
pub fn purcell_limit(g: f64, detuning: f64, kappa: f64) -> Result<f64> {
    require_positive("g", g)?;
    require_positive("detuning", detuning)?;
    require_positive("kappa", kappa)?;
    let ratio = detuning / g;
    Ok(ratio * ratio / (2.0 * PI * kappa))
}

/// Whether the detuning is large enough for the Purcell estimate to hold.
pub fn purcell_regime_ok(g: f64, detuning: f64) -> bool {
    detuning.abs() >= TRANSMON_REGIME_RATIO * g.abs()
}

/// Computes every derived quantity for `params` at resonator frequency
/// `f_r` and qubit frequency `f_ge` (both GHz).
pub fn derive(params: &CircuitParams, f_r: f64, f_ge: f64) -> Result<DerivedEnergies> {
    params.validate()?;
    Ok(DerivedEnergies {
        e_c: charging_energy(params.c_sigma())?,
        f_r_lc: lc_frequency(params.inductance, params.c_r)?,
        v_rms: zero_point_voltage(f_r, params.c_r)?,
        v_t: transmon_voltage(f_ge, params.c_t)?,
        g_over_2pi: coupling_g(params, f_r, f_ge)?,
    })
}

/// One column of the measured resonator table.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResonatorEntry {
    pub label: &'static str,
    /// Measured frequency, GHz.
    pub f_r: f64,
    /// Linear size √S of the plate area, μm.
    pub area_side: f64,
    /// Printed capacitance, pF.
    pub c_ppc: f64,
}

const fn entry(label: &'static str, f_r: f64, area_side: f64, c_ppc: f64) -> ResonatorEntry {
    ResonatorEntry {
        label,
        f_r,
        area_side,
        c_ppc,
    }
}

/// The 17 measured resonators of the device.
pub const RESONATOR_TABLE: [ResonatorEntry; 17] = [
    entry("1 A", 4.639, 19.14, 5.13),
    entry("2 A", 4.721, 18.56, 4.82),
    entry("3 A", 4.842, 18.45, 4.76),
    entry("4 A", 4.965, 18.11, 4.59),
    entry("5 A", 5.077, 17.32, 4.2),
    entry("6 B", 5.926, 14.83, 3.08),
    entry("7 B", 6.031, 14.61, 2.99),
    entry("8 B", 6.178, 14.08, 2.77),
    entry("9 B", 6.277, 13.86, 2.69),
    entry("10 C", 7.120, 12.1, 2.05),
    entry("11 C", 7.225, 11.84, 1.96),
    entry("12 C", 7.357, 11.9, 1.98),
    entry("13 D", 8.169, 10.58, 1.56),
    entry("14 D", 8.249, 10.22, 1.46),
    entry("15 E", 9.200, 9.42, 1.24),
    entry("16 F", 10.00, 8.33, 0.97),
    entry("17 F", 10.01, 8.32, 0.97),
];

/// Row of the capacitance-model comparison against the printed table.
#[derive(Debug, Clone, PartialEq)]
pub struct TableRow {
    pub entry: ResonatorEntry,
    /// c·S, pF.
    pub c_computed: f64,
    /// 100·(computed − printed)/printed.
    pub deviation_percent: f64,
}

/// Recomputes every table capacitance from its √S with areal capacitance
/// `c_specific` (fF/μm²).
pub fn table1(c_specific: f64) -> Result<Vec<TableRow>> {
    RESONATOR_TABLE
        .iter()
        .map(|entry| {
            let c_computed = ppc_capacitance(entry.area_side, c_specific)?;
            Ok(TableRow {
                entry: *entry,
                c_computed,
                deviation_percent: 100.0 * (c_computed - entry.c_ppc) / entry.c_ppc,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: f64, b: f64, rel: f64) -> bool {
        (a - b).abs() <= rel * b.abs().max(f64::MIN_POSITIVE)
    }

    #[test]
    fn charging_energy_values() {
        // e²/(2Ch) evaluated independently in double precision.
        assert!((charging_energy(57.5).unwrap() - 0.336_873_553_472_332_6).abs() < 1e-12);
        assert!((charging_energy(51.0).unwrap() - 0.379_808_418_130_571).abs() < 1e-12);
        let ec = charging_energy(40.0).unwrap();
        assert!(close(charging_energy(80.0).unwrap(), ec / 2.0, 1e-15));
        assert!(matches!(charging_energy(0.0), Err(Error::Domain(_))));
        assert!(matches!(charging_energy(-1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn lc_frequency_values() {
        assert!((lc_frequency(0.3, 5.13).unwrap() - 4.056_960_896_506).abs() < 1e-9);
        assert!((lc_frequency(1.0, 1.0).unwrap() - 5.032_921_210_448_7).abs() < 1e-9);
        let f = lc_frequency(0.7, 2.0).unwrap();
        assert!(close(lc_frequency(0.7, 8.0).unwrap(), f / 2.0, 1e-14));
        assert!(lc_frequency(0.0, 1.0).is_err());
        assert!(lc_frequency(1.0, -1.0).is_err());
    }

    #[test]
    fn ppc_capacitance_matches_table_entries() {
        assert!((ppc_capacitance(19.14, 14.0).unwrap() - 5.13).abs() < 0.01);
        assert!((ppc_capacitance(8.33, 14.0).unwrap() - 0.97).abs() < 0.01);
        assert!((ppc_capacitance(1.0, 14.0).unwrap() - 0.014).abs() < 1e-15);
        for row in table1(14.0).unwrap() {
            assert!(row.deviation_percent.abs() <= 1.0, "{row:?}");
        }
    }

    #[test]
    fn zero_point_voltage_values() {
        let v = zero_point_voltage(4.64, 5.13).unwrap();
        assert!((v - 0.273_705_376_773_7).abs() < 1e-9);
        assert!(close(
            zero_point_voltage(4.64, 10.26).unwrap(),
            v / 2f64.sqrt(),
            1e-14
        ));
        assert!(close(
            zero_point_voltage(18.56, 5.13).unwrap(),
            2.0 * v,
            1e-14
        ));
        assert!(zero_point_voltage(0.0, 1.0).is_err());
    }

    #[test]
    fn coupling_near_fifteen_mhz() {
        let params = CircuitParams::default();
        let g = coupling_g(&params, 5.0, 5.0).unwrap();
        assert!((g - 15.884_721_284_74).abs() < 1e-8);
        assert!((13.5..=16.5).contains(&g));
        let g0 = coupling_g_raw(0.0, 51.0, 5.13, 5.0, 5.0).unwrap();
        assert_eq!(g0, 0.0);
        let g4 = coupling_g(&params, 20.0, 20.0).unwrap();
        assert!(close(g4, 4.0 * g, 1e-14));
    }

    #[test]
    fn voltage_route_matches_closed_form() {
        let params = CircuitParams::default();
        let v_rms = zero_point_voltage(5.0, params.c_r).unwrap();
        let v_t = transmon_voltage(5.0, params.c_t).unwrap();
        let g1 = coupling_from_voltages(v_t, params.c_g, v_rms).unwrap();
        let g2 = coupling_g(&params, 5.0, 5.0).unwrap();
        assert!(close(g1, g2, 1e-12), "{g1} vs {g2}");
    }

    #[test]
    fn flux_tuning() {
        assert_eq!(flux_tuned_ej(11.4, 0.0), 11.4);
        assert!(flux_tuned_ej(11.4, 0.5).abs() < 1e-14);
        assert!((flux_tuned_ej(11.4, 1.0 / 3.0) - 5.7).abs() < 1e-14);
    }

    #[test]
    fn transmon_frequency_values() {
        let f = transmon_freq(11.4, 0.334).unwrap();
        assert!((f - 5.19).abs() <= 0.01, "{f}");
        // 4·E_C and E_J/4 keep √(8E_JE_C); frequency drops by 3·E_C.
        let f2 = transmon_freq(11.4 / 4.0, 4.0 * 0.334).unwrap();
        assert!((f - f2 - 3.0 * 0.334).abs() < 1e-12);
        assert!(transmon_freq(0.0, 0.334).is_err());
        assert!(!in_transmon_regime(1e-3, 0.334));
        assert!(in_transmon_regime(11.4, 0.334));
    }

    #[test]
    fn purcell_values() {
        let kappa = kappa_from_q(4.64, DEFAULT_Q_LOADED).unwrap();
        assert!((kappa - 0.464).abs() < 1e-12);
        let t = purcell_limit(15.0, 550.0, kappa).unwrap();
        assert!((t - 461.152_972_081).abs() < 1e-6, "{t}");
        assert!(t / 380.0 < 2.0 && 380.0 / t < 2.0);
        assert!(close(
            purcell_limit(15.0, 1100.0, kappa).unwrap(),
            4.0 * t,
            1e-14
        ));
        assert!(close(
            purcell_limit(15.0, 550.0, 2.0 * kappa).unwrap(),
            t / 2.0,
            1e-14
        ));
        assert!(purcell_limit(15.0, 0.0, kappa).is_err());
        assert!(!purcell_regime_ok(15.0, 100.0));
    }

    #[test]
    fn derived_energies_positive() {
        let d = derive(&CircuitParams::default(), 4.639, 5.19).unwrap();
        for v in [d.e_c, d.f_r_lc, d.v_rms, d.v_t, d.g_over_2pi] {
            assert!(v > 0.0);
        }
        let bad = CircuitParams {
            inductance: 0.0,
            ..CircuitParams::default()
        };
        assert!(derive(&bad, 4.639, 5.19).is_err());
    }

    proptest! {
        #[test]
        fn ej_is_periodic_and_even(x in -3.0f64..3.0) {
            let a = flux_tuned_ej(7.0, x);
            prop_assert!((a - flux_tuned_ej(7.0, x + 1.0)).abs() < 1e-12);
            prop_assert!((a - flux_tuned_ej(7.0, -x)).abs() < 1e-12);
        }

        #[test]
        fn transmon_freq_increases_with_ej(ej in 1.0f64..30.0, d in 1e-3f64..5.0, ec in 0.1f64..0.5) {
            prop_assert!(transmon_freq(ej + d, ec).unwrap() > transmon_freq(ej, ec).unwrap());
        }

        #[test]
        fn coupling_symmetric_in_frequencies(fr in 1.0f64..12.0, fq in 1.0f64..12.0) {
            let p = CircuitParams::default();
            let a = coupling_g(&p, fr, fq).unwrap();
            let b = coupling_g(&p, fq, fr).unwrap();
            prop_assert!((a - b).abs() <= 1e-14 * a);
        }

        #[test]
        fn coupling_homogeneity(s in 0.1f64..10.0, t in 0.1f64..10.0) {
            // g ∝ C_g/√(C_r C_t): scale C_g by s, C_r and C_t by t.
            let g = coupling_g_raw(6.5, 51.0, 5.13, 5.0, 5.0).unwrap();
            let scaled = coupling_g_raw(6.5 * s, 51.0 * t, 5.13 * t, 5.0, 5.0).unwrap();
            prop_assert!((scaled - g * s / t).abs() <= 1e-12 * scaled.abs().max(1e-12));
        }
    }
}
