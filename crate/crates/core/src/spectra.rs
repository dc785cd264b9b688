//! Spectra versus flux: transition lines from repeated diagonalization,
//! single-tone S21 maps with a notch lineshape, rasterized two-tone maps and
//! seeded synthetic noise.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::circuit::phi_ratio;
use crate::dataset::{DatasetKind, DatasetMetadata, LineSeries, SpectrumData, SpectrumDataset};
use crate::error::{Error, Result};
use crate::hilbert::{
    one_excitation_splitting, solve, stark_shifted_transition, transition_frequency, EigenSolution,
    Label, SystemModel, TransitionLine, TransitionTable, STARK_MARGIN,
};

/// A [`SystemModel`] plus the calibration from applied control to Φ_e/Φ_0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub model: SystemModel,
    pub flux_offset: f64,
    pub flux_period: f64,
}

impl Default for ModelTemplate {
    fn default() -> Self {
        Self {
            model: SystemModel::default(),
            flux_offset: 0.0,
            flux_period: 1.0,
        }
    }
}

impl ModelTemplate {
    pub fn new(model: SystemModel) -> Self {
        Self {
            model,
            ..Self::default()
        }
    }

    pub fn phi(&self, control: f64) -> f64 {
        phi_ratio(control, self.flux_offset, self.flux_period)
    }

    /// The model at applied control `control`.
    pub fn at(&self, control: f64) -> SystemModel {
        self.model.with_phi(self.phi(control))
    }

    /// Control value for a normalized flux.
    pub fn control_for_phi(&self, phi: f64) -> f64 {
        (phi - self.flux_offset) * self.flux_period
    }
}

/// An ordered pair of bare labels naming a spectroscopic line, written
/// `g0-e0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TransitionSpec {
    pub from: Label,
    pub to: Label,
}

impl TransitionSpec {
    pub const fn new(from: Label, to: Label) -> Self {
        Self { from, to }
    }
}

impl fmt::Display for TransitionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}", self.from, self.to)
    }
}

impl FromStr for TransitionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, b) = s
            .split_once('-')
            .ok_or_else(|| Error::Domain(format!("transition '{s}' must look like g0-e0")))?;
        Ok(Self::new(a.trim().parse()?, b.trim().parse()?))
    }
}

/// Lines drawn in two-tone spectroscopy by default.
pub fn default_two_tone_transitions() -> Vec<TransitionSpec> {
    ["g0-e0", "e0-f0", "g2-h0", "g2-f1"]
        .iter()
        .map(|s| s.parse().expect("valid"))
        .collect()
}

/// The single-tone (resonator) line `g0-g1`.
pub const RESONATOR_LINE: TransitionSpec = TransitionSpec::new(Label::new(0, 0), Label::new(0, 1));

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FluxSweepConfig {
    /// Applied control values, strictly increasing.
    pub phi_grid: Vec<f64>,
    pub transitions: Vec<TransitionSpec>,
    pub stark_photon_numbers: Vec<usize>,
    /// Probe frequencies for maps, GHz.
    pub probe_grid: Option<Vec<f64>>,
}

impl FluxSweepConfig {
    pub fn new(phi_grid: Vec<f64>, transitions: Vec<TransitionSpec>) -> Self {
        Self {
            phi_grid,
            transitions,
            stark_photon_numbers: Vec::new(),
            probe_grid: None,
        }
    }

    pub fn validate(&self, model: &SystemModel) -> Result<()> {
        if self.phi_grid.is_empty() {
            return Err(Error::Config("flux grid is empty".into()));
        }
        if !self.phi_grid.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "flux grid must be strictly increasing".into(),
            ));
        }
        for &n in &self.stark_photon_numbers {
            if n + STARK_MARGIN + 1 > model.n_photon {
                return Err(Error::Config(format!(
                    "Stark photon number {n} needs n_photon >= {}, have {}",
                    n + STARK_MARGIN + 1,
                    model.n_photon
                )));
            }
        }
        for t in &self.transitions {
            for l in [t.from, t.to] {
                if l.transmon >= model.n_transmon || l.photon >= model.n_photon {
                    return Err(Error::Config(format!(
                        "transition {t} lies outside the truncation"
                    )));
                }
            }
        }
        if let Some(probe) = &self.probe_grid {
            if probe.len() < 2 || !probe.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Config(
                    "probe grid must be strictly increasing with >= 2 points".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Evenly spaced grid of `n` points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n)
            .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
            .collect(),
    }
}

/// Lines computed at one flux point.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLines {
    pub table: TransitionTable,
    /// Whether either endpoint of each requested transition is hybridized.
    pub flagged: Vec<bool>,
    /// Stark-shifted qubit line for each configured photon number, GHz.
    pub stark: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub control: f64,
    pub phi: f64,
    pub outcome: Result<PointLines>,
}

fn lines_at(sol: &EigenSolution, config: &FluxSweepConfig) -> Result<PointLines> {
    let mut entries = Vec::with_capacity(config.transitions.len());
    let mut flagged = Vec::with_capacity(config.transitions.len());
    for t in &config.transitions {
        entries.push(transition_frequency(sol, t.from, t.to)?);
        flagged.push(sol.is_flagged(t.from)? || sol.is_flagged(t.to)?);
    }
    let stark = config
        .stark_photon_numbers
        .iter()
        .map(|&n| stark_shifted_transition(sol, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(PointLines {
        table: TransitionTable { entries },
        flagged,
        stark,
    })
}

fn sweep_point(template: &ModelTemplate, config: &FluxSweepConfig, control: f64) -> SweepPoint {
    let model = template.at(control);
    SweepPoint {
        control,
        phi: model.phi_ratio,
        outcome: solve(&model).and_then(|sol| lines_at(&sol, config)),
    }
}

/// Diagonalizes at every grid point and reports the requested lines.
///
/// Points are evaluated in parallel on the current rayon pool and returned
/// in grid order; a failing point carries its error without aborting the
/// sweep.
pub fn sweep_flux(template: &ModelTemplate, config: &FluxSweepConfig) -> Result<Vec<SweepPoint>> {
    config.validate(&template.model)?;
    Ok(config
        .phi_grid
        .par_iter()
        .map(|&x| sweep_point(template, config, x))
        .collect())
}

/// Serial reference implementation of [`sweep_flux`].
pub fn sweep_flux_serial(
    template: &ModelTemplate,
    config: &FluxSweepConfig,
) -> Result<Vec<SweepPoint>> {
    config.validate(&template.model)?;
    Ok(config
        .phi_grid
        .iter()
        .map(|&x| sweep_point(template, config, x))
        .collect())
}

/// Notch (hanger) resonator response and its quality factors.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LineshapeParams {
    pub q_internal: f64,
    pub q_coupling: f64,
    pub baseline_amplitude: f64,
    /// Gaussian noise added to map responses.
    pub noise_sigma: f64,
}

impl Default for LineshapeParams {
    fn default() -> Self {
        Self {
            q_internal: 1e4,
            q_coupling: 2e4,
            baseline_amplitude: 1.0,
            noise_sigma: 0.0,
        }
    }
}

impl LineshapeParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("Q_internal", self.q_internal),
            ("Q_coupling", self.q_coupling),
        ] {
            if !(v > 0.0) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Domain("noise_sigma must be nonnegative".into()));
        }
        Ok(())
    }

    /// (1/Q_i + 1/Q_c)⁻¹
    pub fn q_loaded(&self) -> f64 {
        1.0 / (1.0 / self.q_internal + 1.0 / self.q_coupling)
    }

    /// κ/2π = f_res/Q_loaded in the units of `f_res`.
    pub fn kappa(&self, f_res: f64) -> f64 {
        f_res / self.q_loaded()
    }
}

/// S21(f) = A·[1 − (Q_l/Q_c)/(1 + 2iQ_l(f − f_res)/f_res)].
pub fn s21_notch(f: f64, f_res: f64, lineshape: &LineshapeParams) -> Complex64 {
    let ql = lineshape.q_loaded();
    let x = 2.0 * ql * (f - f_res) / f_res;
    let dip = (ql / lineshape.q_coupling) / Complex64::new(1.0, x);
    lineshape.baseline_amplitude * (Complex64::new(1.0, 0.0) - dip)
}

/// Frequencies and resonator weights |⟨g1|ψ⟩|² of the one-excitation states.
pub fn resonator_modes(sol: &EigenSolution) -> Result<Vec<(f64, f64)>> {
    let ground = sol.energy(Label::new(0, 0))?;
    sol.manifold(1)
        .into_iter()
        .map(|k| {
            Ok((
                sol.energies[k] - ground,
                sol.bare_weight(k, Label::new(0, 1))?,
            ))
        })
        .collect()
}

/// S21 with every one-excitation state contributing a dip weighted by its
/// resonator content, so the avoided crossing shows two dips.
pub fn s21_dressed(f: f64, modes: &[(f64, f64)], lineshape: &LineshapeParams) -> Complex64 {
    let ql = lineshape.q_loaded();
    let mut s = Complex64::new(1.0, 0.0);
    for &(f_k, w) in modes {
        let x = 2.0 * ql * (f - f_k) / f_k;
        s -= w * (ql / lineshape.q_coupling) / Complex64::new(1.0, x);
    }
    lineshape.baseline_amplitude * s
}

/// |S21| over flux × probe for the readout resonator.
pub fn single_tone_map(
    template: &ModelTemplate,
    config: &FluxSweepConfig,
    lineshape: &LineshapeParams,
) -> Result<SpectrumDataset> {
    config.validate(&template.model)?;
    lineshape.validate()?;
    let probe = config
        .probe_grid
        .clone()
        .ok_or_else(|| Error::Config("single-tone map needs a probe grid".into()))?;
    let columns: Vec<Result<Vec<Complex64>>> = config
        .phi_grid
        .par_iter()
        .map(|&x| {
            let sol = solve(&template.at(x))?;
            let modes = resonator_modes(&sol)?;
            Ok(probe
                .iter()
                .map(|&f| s21_dressed(f, &modes, lineshape))
                .collect())
        })
        .collect();
    let values = columns.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(SpectrumDataset {
        flux: config.phi_grid.clone(),
        data: SpectrumData::Map {
            probe: probe.clone(),
            values,
        },
        metadata: DatasetMetadata {
            kind: DatasetKind::SingleTone,
            template: Some(*template),
            config: Some(config.clone()),
            lineshape: Some(*lineshape),
            ..DatasetMetadata::default()
        },
    })
}

/// Id of the Stark-shifted qubit line with `n` photons.
pub fn stark_line_id(n: usize) -> String {
    format!("stark_n{n}")
}

/// Per-flux line positions for every configured transition and Stark line.
pub fn two_tone_lines(
    template: &ModelTemplate,
    config: &FluxSweepConfig,
) -> Result<SpectrumDataset> {
    let points = sweep_flux(template, config)?;
    Ok(lines_dataset(template, config, &points))
}

/// Assembles a line dataset from sweep output. Failed points become gaps.
pub fn lines_dataset(
    template: &ModelTemplate,
    config: &FluxSweepConfig,
    points: &[SweepPoint],
) -> SpectrumDataset {
    let mut lines: Vec<LineSeries> = config
        .transitions
        .iter()
        .map(|t| LineSeries::new(t.to_string()))
        .chain(
            config
                .stark_photon_numbers
                .iter()
                .map(|&n| LineSeries::new(stark_line_id(n))),
        )
        .collect();
    let nt = config.transitions.len();
    for p in points {
        match &p.outcome {
            Ok(pl) => {
                for (i, e) in pl.table.entries.iter().enumerate() {
                    lines[i].values.push(Some(e.frequency));
                    lines[i].flagged.push(pl.flagged[i]);
                }
                for (j, &f) in pl.stark.iter().enumerate() {
                    lines[nt + j].values.push(Some(f));
                    lines[nt + j].flagged.push(false);
                }
            }
            Err(_) => {
                for line in lines.iter_mut() {
                    line.values.push(None);
                    line.flagged.push(true);
                }
            }
        }
    }
    SpectrumDataset {
        flux: config.phi_grid.clone(),
        data: SpectrumData::Lines { lines },
        metadata: DatasetMetadata {
            kind: DatasetKind::Lines,
            template: Some(*template),
            config: Some(config.clone()),
            ..DatasetMetadata::default()
        },
    }
}

/// Renders line positions as Lorentzian peaks of half width `width` (GHz)
/// and unit height on the config's probe grid.
pub fn rasterize_lines(
    lines: &SpectrumDataset,
    probe: &[f64],
    width: f64,
) -> Result<SpectrumDataset> {
    let SpectrumData::Lines { lines: series } = &lines.data else {
        return Err(Error::Config("rasterize_lines needs a line dataset".into()));
    };
    if !(width > 0.0) {
        return Err(Error::Domain("raster width must be positive".into()));
    }
    let values = (0..lines.flux.len())
        .map(|i| {
            probe
                .iter()
                .map(|&f| {
                    let v: f64 = series
                        .iter()
                        .filter_map(|s| s.values[i])
                        .map(|c| {
                            let x = (f - c) / width;
                            1.0 / (1.0 + x * x)
                        })
                        .sum();
                    Complex64::new(v, 0.0)
                })
                .collect()
        })
        .collect();
    let mut metadata = lines.metadata.clone();
    metadata.kind = DatasetKind::TwoToneMap;
    metadata.raster_width = Some(width);
    metadata.probe_grid = Some(probe.to_vec());
    Ok(SpectrumDataset {
        flux: lines.flux.clone(),
        data: SpectrumData::Map {
            probe: probe.to_vec(),
            values,
        },
        metadata,
    })
}

/// Adds independent Gaussian noise of standard deviation `noise_sigma`.
///
/// Draws come from a ChaCha8 stream seeded with `seed` and selected by
/// `metadata.stream`, in flux-major order. Map noise is added to both
/// quadratures. `noise_sigma = 0` returns the input values unchanged.
pub fn synthesize_noisy_spectrum(
    clean: &SpectrumDataset,
    noise_sigma: f64,
    seed: u64,
) -> Result<SpectrumDataset> {
    if !(noise_sigma >= 0.0) || !noise_sigma.is_finite() {
        return Err(Error::Domain(format!(
            "noise_sigma must be nonnegative, got {noise_sigma}"
        )));
    }
    let mut out = clean.clone();
    out.metadata.seed = Some(seed);
    out.metadata.noise_sigma = noise_sigma;
    if noise_sigma == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(clean.metadata.stream);
    let normal = Normal::new(0.0, noise_sigma).map_err(|e| Error::Domain(e.to_string()))?;
    match &mut out.data {
        SpectrumData::Lines { lines } => {
            for i in 0..out.flux.len() {
                for line in lines.iter_mut() {
                    let dv = normal.sample(&mut rng);
                    if let Some(v) = line.values[i].as_mut() {
                        *v += dv;
                    }
                }
            }
        }
        SpectrumData::Map { values, .. } => {
            for column in values.iter_mut() {
                for v in column.iter_mut() {
                    let re = normal.sample(&mut rng);
                    let im = normal.sample(&mut rng);
                    *v += Complex64::new(re, im);
                }
            }
        }
    }
    Ok(out)
}

/// Regenerates a dataset from its metadata alone.
pub fn regenerate(metadata: &DatasetMetadata) -> Result<SpectrumDataset> {
    let template = metadata
        .template
        .ok_or_else(|| Error::Config("metadata lacks a model template".into()))?;
    let config = metadata
        .config
        .clone()
        .ok_or_else(|| Error::Config("metadata lacks a sweep configuration".into()))?;
    let clean = match metadata.kind {
        DatasetKind::Lines => two_tone_lines(&template, &config)?,
        DatasetKind::SingleTone => {
            let lineshape = metadata
                .lineshape
                .ok_or_else(|| Error::Config("metadata lacks lineshape parameters".into()))?;
            single_tone_map(&template, &config, &lineshape)?
        }
        DatasetKind::TwoToneMap => {
            let lines = two_tone_lines(&template, &config)?;
            let probe = metadata
                .probe_grid
                .clone()
                .ok_or_else(|| Error::Config("metadata lacks a probe grid".into()))?;
            let width = metadata
                .raster_width
                .ok_or_else(|| Error::Config("metadata lacks a raster width".into()))?;
            rasterize_lines(&lines, &probe, width)?
        }
    };
    let mut clean = clean;
    clean.metadata.stream = metadata.stream;
    match metadata.seed {
        Some(seed) => synthesize_noisy_spectrum(&clean, metadata.noise_sigma, seed),
        None => Ok(clean),
    }
}

/// Normalized fluxes in [0, 1) where ω_ge(Φ) equals `target` (GHz):
/// `|cos πφ| = (target + E_C)²/(8 E_C E_J^Σ)`.
pub fn fluxes_where_qubit_at(model: &SystemModel, target: f64) -> Vec<f64> {
    let c = (target + model.e_c).powi(2) / (8.0 * model.e_c * model.ej_sigma);
    if !(0.0..=1.0).contains(&c) || target + model.e_c < 0.0 {
        return Vec::new();
    }
    let a = c.acos() / PI;
    let mut out = vec![a, 1.0 - a];
    out.dedup_by(|x, y| (*x - *y).abs() < 1e-15);
    out
}

/// Fluxes in [0, 1) of the bare qubit-resonator crossings (Δ_ge = 0).
pub fn crossing_fluxes(model: &SystemModel) -> Vec<f64> {
    fluxes_where_qubit_at(model, model.f_r)
}

/// Fluxes in [0, 1) where Δ_ef = 0 and the dispersive shift changes sign.
pub fn chi_sign_change_fluxes(model: &SystemModel) -> Vec<f64> {
    fluxes_where_qubit_at(model, model.f_r - model.alpha())
}

/// Location and size of the smallest one-excitation splitting.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MinSplitting {
    pub control: f64,
    pub phi: f64,
    /// GHz.
    pub splitting: f64,
}

fn splitting_at(template: &ModelTemplate, control: f64) -> Result<f64> {
    one_excitation_splitting(&solve(&template.at(control))?)
}

/// Smallest |E(e0) − E(g1)| over `grid`, refined by golden-section search
/// between the neighbours of the best grid point.
pub fn min_one_excitation_splitting(
    template: &ModelTemplate,
    grid: &[f64],
) -> Result<MinSplitting> {
    if grid.len() < 3 {
        return Err(Error::Config("need at least 3 grid points".into()));
    }
    let values: Vec<Result<f64>> = grid
        .par_iter()
        .map(|&x| splitting_at(template, x))
        .collect();
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Ok(v) = v {
            if best.is_none_or(|(_, b)| *v < b) {
                best = Some((i, *v));
            }
        }
    }
    let (i, _) = best.ok_or_else(|| Error::Numeric("no valid point in the sweep".into()))?;
    let mut lo = grid[i.saturating_sub(1)];
    let mut hi = grid[(i + 1).min(grid.len() - 1)];
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut a = hi - inv_phi * (hi - lo);
    let mut b = lo + inv_phi * (hi - lo);
    let mut fa = splitting_at(template, a)?;
    let mut fb = splitting_at(template, b)?;
    for _ in 0..80 {
        if fa < fb {
            hi = b;
            b = a;
            fb = fa;
            a = hi - inv_phi * (hi - lo);
            fa = splitting_at(template, a)?;
        } else {
            lo = a;
            a = b;
            fa = fb;
            b = lo + inv_phi * (hi - lo);
            fb = splitting_at(template, b)?;
        }
        if (hi - lo).abs() < 1e-13 {
            break;
        }
    }
    let (control, splitting) = if fa < fb { (a, fa) } else { (b, fb) };
    Ok(MinSplitting {
        control,
        phi: template.phi(control),
        splitting,
    })
}

/// Difference between the Stark lines with `n_b` and `n_a` photons, GHz.
pub fn stark_difference(
    template: &ModelTemplate,
    control: f64,
    n_a: usize,
    n_b: usize,
) -> Result<f64> {
    let sol = solve(&template.at(control))?;
    Ok(stark_shifted_transition(&sol, n_b)? - stark_shifted_transition(&sol, n_a)?)
}

/// Control value in `[lo, hi]` where the `n_a` and `n_b` Stark lines swap
/// order, found by bisection on the sign of their difference.
pub fn locate_stark_crossing(
    template: &ModelTemplate,
    n_a: usize,
    n_b: usize,
    lo: f64,
    hi: f64,
) -> Result<f64> {
    let (mut lo, mut hi) = (lo, hi);
    let s_lo = stark_difference(template, lo, n_a, n_b)?.signum();
    let s_hi = stark_difference(template, hi, n_a, n_b)?.signum();
    if s_lo == s_hi {
        return Err(Error::Numeric(format!(
            "Stark lines n={n_a} and n={n_b} do not swap order between {lo} and {hi}"
        )));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if stark_difference(template, mid, n_a, n_b)?.signum() == s_lo {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Line frequencies for `specs` at one model, for quick lookups.
pub fn lines_for(model: &SystemModel, specs: &[TransitionSpec]) -> Result<Vec<TransitionLine>> {
    let sol = solve(model)?;
    specs
        .iter()
        .map(|t| transition_frequency(&sol, t.from, t.to))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::transmon_freq;
    use crate::hilbert::dressed_resonator_freq;

    fn uncoupled() -> ModelTemplate {
        ModelTemplate::new(SystemModel {
            g_over_2pi: 0.0,
            n_transmon: 4,
            n_photon: 4,
            ..SystemModel::default()
        })
    }

    #[test]
    fn transition_spec_parse() {
        let t: TransitionSpec = "g2-h0".parse().unwrap();
        assert_eq!(t.from, Label::new(0, 2));
        assert_eq!(t.to, Label::new(3, 0));
        assert_eq!(t.to_string(), "g2-h0");
        assert!("g2h0".parse::<TransitionSpec>().is_err());
    }

    #[test]
    fn config_validation() {
        let m = SystemModel::default();
        let mut c = FluxSweepConfig::new(vec![0.0, 0.1, 0.1], vec![RESONATOR_LINE]);
        assert!(c.validate(&m).is_err());
        c.phi_grid = vec![0.0, 0.1];
        assert!(c.validate(&m).is_ok());
        c.stark_photon_numbers = vec![10];
        assert!(matches!(c.validate(&m), Err(Error::Config(_))));
    }

    #[test]
    fn uncoupled_qubit_line_matches_closed_form() {
        let tpl = uncoupled();
        let grid = linspace(-0.4, 0.4, 41);
        let cfg = FluxSweepConfig::new(grid.clone(), vec!["g0-e0".parse().unwrap()]);
        let points = sweep_flux(&tpl, &cfg).unwrap();
        for p in &points {
            let ej = tpl.model.ej_sigma * (PI * p.phi).cos().abs();
            let expected = transmon_freq(ej, tpl.model.e_c).unwrap();
            let got = p.outcome.as_ref().unwrap().table.entries[0].frequency;
            assert!((got - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn sweep_symmetric_in_flux() {
        let tpl = ModelTemplate::default();
        let grid = linspace(-0.3, 0.3, 31);
        let cfg = FluxSweepConfig::new(grid, default_two_tone_transitions());
        let pts = sweep_flux(&tpl, &cfg).unwrap();
        for i in 0..pts.len() {
            let a = &pts[i].outcome.as_ref().unwrap().table;
            let b = &pts[pts.len() - 1 - i].outcome.as_ref().unwrap().table;
            for (x, y) in a.entries.iter().zip(&b.entries) {
                assert!((x.frequency - y.frequency).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn parallel_matches_serial() {
        let tpl = ModelTemplate::default();
        let cfg = FluxSweepConfig {
            stark_photon_numbers: vec![0, 2],
            ..FluxSweepConfig::new(linspace(-0.35, 0.35, 57), default_two_tone_transitions())
        };
        let a = sweep_flux(&tpl, &cfg).unwrap();
        let b = sweep_flux_serial(&tpl, &cfg).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn avoided_crossing_is_two_g() {
        let tpl = ModelTemplate::default();
        let min = min_one_excitation_splitting(&tpl, &linspace(0.0, 0.5, 101)).unwrap();
        assert!((min.splitting - 0.030).abs() / 0.030 < 1e-3, "{min:?}");
        let cross = crossing_fluxes(&tpl.model);
        assert!((min.phi - cross[0]).abs() < 1e-4);
    }

    #[test]
    fn notch_limits() {
        let ideal = LineshapeParams {
            q_internal: 1e12,
            ..LineshapeParams::default()
        };
        assert!(s21_notch(5.0, 5.0, &ideal).norm() < 1e-7);
        let ls = LineshapeParams::default();
        let far = s21_notch(5.5, 5.0, &ls).norm();
        assert!((far - ls.baseline_amplitude).abs() < 1e-3);
        let depth = 1.0 - s21_notch(5.0, 5.0, &ls).norm();
        assert!((depth - ls.q_loaded() / ls.q_coupling).abs() < 1e-12);
    }

    fn dip_center(probe: &[f64], column: &[Complex64]) -> f64 {
        let (i, _) = column
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        probe[i]
    }

    #[test]
    fn single_tone_far_detuned_and_uncoupled() {
        let ls = LineshapeParams::default();
        let f_r = 4.639;
        let linewidth = f_r / ls.q_loaded();
        let probe = linspace(f_r - 5.0 * linewidth, f_r + 5.0 * linewidth, 401);
        // Flux points with dispersive pull g²/|Δ| below half a linewidth.
        let cfg = FluxSweepConfig {
            probe_grid: Some(probe.clone()),
            ..FluxSweepConfig::new(vec![0.3, 0.35, 0.4], vec![])
        };
        let tpl = ModelTemplate::default();
        let map = single_tone_map(&tpl, &cfg, &ls).unwrap();
        let SpectrumData::Map { values, .. } = &map.data else {
            panic!()
        };
        for (col, &x) in values.iter().zip(&cfg.phi_grid) {
            let m = tpl.at(x);
            let pull = 0.015f64.powi(2) / m.delta_ge().unwrap().abs();
            assert!(pull < 0.5 * linewidth);
            assert!((dip_center(&probe, col) - f_r).abs() <= 0.5 * linewidth);
        }

        let tpl0 = uncoupled();
        let cfg0 = FluxSweepConfig {
            probe_grid: Some(probe.clone()),
            ..FluxSweepConfig::new(linspace(-0.3, 0.3, 13), vec![])
        };
        let map0 = single_tone_map(&tpl0, &cfg0, &ls).unwrap();
        let SpectrumData::Map { values, .. } = &map0.data else {
            panic!()
        };
        let c0 = dip_center(&probe, &values[0]);
        for col in values {
            assert_eq!(dip_center(&probe, col), c0);
        }
    }

    #[test]
    fn single_tone_two_dips_at_crossing() {
        let tpl = ModelTemplate::default();
        let x = crossing_fluxes(&tpl.model)[0];
        let sol = solve(&tpl.at(x)).unwrap();
        let modes = resonator_modes(&sol).unwrap();
        assert_eq!(modes.len(), 2);
        assert!((modes[1].0 - modes[0].0 - 0.030).abs() < 1e-4);
        for m in &modes {
            assert!((m.1 - 0.5).abs() < 0.02);
        }
        let ls = LineshapeParams::default();
        let probe = linspace(4.60, 4.68, 1601);
        let mags: Vec<f64> = probe
            .iter()
            .map(|&f| s21_dressed(f, &modes, &ls).norm())
            .collect();
        let minima: Vec<f64> = (1..mags.len() - 1)
            .filter(|&i| mags[i] < mags[i - 1] && mags[i] < mags[i + 1])
            .map(|i| probe[i])
            .collect();
        assert_eq!(minima.len(), 2);
        assert!((minima[1] - minima[0] - 0.030).abs() < 2e-4);
        // Far from the crossing the resonator-like dip sits at the dressed frequency.
        let sol = solve(&tpl.at(0.0)).unwrap();
        let modes = resonator_modes(&sol).unwrap();
        let main = modes.iter().max_by(|a, b| a.1.total_cmp(&b.1)).unwrap();
        assert!((main.0 - dressed_resonator_freq(&sol, 0).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn two_tone_multiphoton_and_identity() {
        let tpl = ModelTemplate::new(SystemModel {
            g_over_2pi: 0.0,
            ..SystemModel::default()
        });
        let cfg = FluxSweepConfig {
            stark_photon_numbers: vec![0, 2],
            ..FluxSweepConfig::new(linspace(-0.25, 0.25, 11), default_two_tone_transitions())
        };
        let ds = two_tone_lines(&tpl, &cfg).unwrap();
        let line = |id: &str| ds.line(id).unwrap().values.clone();
        for (i, &x) in ds.flux.iter().enumerate() {
            let m = tpl.at(x);
            let f_ge = m.f_ge().unwrap();
            let f_gh = 3.0 * f_ge + 3.0 * m.alpha();
            assert!((line("g2-h0")[i].unwrap() - (f_gh - 2.0 * m.f_r)).abs() < 1e-10);
            assert_eq!(line("stark_n0")[i], line("g0-e0")[i]);
        }
    }

    #[test]
    fn qubit_lines_stay_separated() {
        let tpl = ModelTemplate::default();
        let cfg = FluxSweepConfig::new(
            linspace(-0.35, 0.35, 141),
            vec!["g0-e0".parse().unwrap(), "e0-f0".parse().unwrap()],
        );
        let crossings = crossing_fluxes(&tpl.model);
        let ef_cross = chi_sign_change_fluxes(&tpl.model);
        for p in sweep_flux(&tpl, &cfg).unwrap() {
            let near = crossings
                .iter()
                .chain(&ef_cross)
                .any(|&c| (p.phi.abs() - c).abs() < 0.02);
            if near {
                continue;
            }
            let e = &p.outcome.unwrap().table.entries;
            assert!(e[0].frequency - e[1].frequency >= 0.8 * tpl.model.e_c);
        }
    }

    #[test]
    fn noise_is_seeded_and_calibrated() {
        let tpl = ModelTemplate::default();
        let cfg = FluxSweepConfig::new(linspace(-0.3, 0.3, 5), vec![RESONATOR_LINE]);
        let clean = two_tone_lines(&tpl, &cfg).unwrap();
        let same = synthesize_noisy_spectrum(&clean, 0.0, 7).unwrap();
        assert_eq!(same.data, clean.data);
        let a = synthesize_noisy_spectrum(&clean, 1e-3, 7).unwrap();
        let b = synthesize_noisy_spectrum(&clean, 1e-3, 7).unwrap();
        assert_eq!(a, b);
        let c = synthesize_noisy_spectrum(&clean, 1e-3, 8).unwrap();
        assert_ne!(a.data, c.data);

        // Variance check on a 100 × 100 map.
        let map = SpectrumDataset {
            flux: linspace(0.0, 1.0, 100),
            data: SpectrumData::Map {
                probe: linspace(4.0, 5.0, 100),
                values: vec![vec![Complex64::new(1.0, 0.0); 100]; 100],
            },
            metadata: DatasetMetadata::default(),
        };
        let sigma = 0.05;
        let noisy = synthesize_noisy_spectrum(&map, sigma, 3).unwrap();
        let SpectrumData::Map { values, .. } = &noisy.data else {
            panic!()
        };
        let diffs: Vec<f64> = values.iter().flatten().map(|v| v.re - 1.0).collect();
        let mean = diffs.iter().sum::<f64>() / diffs.len() as f64;
        let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (diffs.len() - 1) as f64;
        assert!((var / (sigma * sigma) - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn metadata_regenerates_dataset() {
        let tpl = ModelTemplate::default();
        let cfg = FluxSweepConfig {
            stark_photon_numbers: vec![2],
            ..FluxSweepConfig::new(linspace(-0.2, 0.2, 9), default_two_tone_transitions())
        };
        let noisy =
            synthesize_noisy_spectrum(&two_tone_lines(&tpl, &cfg).unwrap(), 1e-3, 11).unwrap();
        assert_eq!(regenerate(&noisy.metadata).unwrap(), noisy);

        let ls = LineshapeParams::default();
        let cfg = FluxSweepConfig {
            probe_grid: Some(linspace(4.62, 4.66, 21)),
            ..FluxSweepConfig::new(linspace(-0.2, 0.2, 5), vec![])
        };
        let map =
            synthesize_noisy_spectrum(&single_tone_map(&tpl, &cfg, &ls).unwrap(), 0.01, 5).unwrap();
        assert_eq!(regenerate(&map.metadata).unwrap(), map);
    }

    #[test]
    fn dip_frequency_is_flux_periodic() {
        let tpl = ModelTemplate::default();
        for x in [0.05, 0.17, 0.31] {
            let a = dressed_resonator_freq(&solve(&tpl.at(x)).unwrap(), 0).unwrap();
            let b = dressed_resonator_freq(&solve(&tpl.at(x + 1.0)).unwrap(), 0).unwrap();
            assert!((a - b).abs() < 1e-9);
        }
    }
}
