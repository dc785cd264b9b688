//! Spectral feature extraction and model fitting.
//!
//! The spectrum fit minimizes the weighted RMS difference between observed
//! line positions and transition frequencies of the diagonalized model,
//! re-solving the Hamiltonian at every observed flux point for every trial
//! parameter set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::ghz_to_mhz;
use crate::dataset::{DatasetKind, SpectrumData, SpectrumDataset};
use crate::error::{Error, Result};
use crate::hilbert::{nearest_hybrid_frequency, solve, transition_frequency, Label};
use crate::optim::{
    coordinate_polish, covariance_from_jacobian, jacobian, levenberg_marquardt, nelder_mead,
    LmOptions, NelderMeadOptions,
};
use crate::spectra::{s21_notch, LineshapeParams, ModelTemplate, TransitionSpec};

/// Feature position in a spectrum.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Peak {
    /// Applied control (flux axis value).
    pub flux: f64,
    /// GHz.
    pub frequency: f64,
    /// Normalized prominence in (0, 1].
    pub weight: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeakList {
    pub entries: Vec<Peak>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    /// Features are minima (|S21| dips).
    Dip,
    /// Features are maxima (two-tone response).
    Peak,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PeakOptions {
    /// Threshold in robust standard deviations above the column median.
    pub k: f64,
    /// Overrides the polarity implied by the dataset kind.
    pub polarity: Option<Polarity>,
}

impl Default for PeakOptions {
    fn default() -> Self {
        Self {
            k: 5.0,
            polarity: None,
        }
    }
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Vertex of the parabola through three points.
fn parabola_vertex(x: [f64; 3], y: [f64; 3]) -> f64 {
    let d1 = (y[1] - y[0]) / (x[1] - x[0]);
    let d2 = (y[2] - y[1]) / (x[2] - x[1]);
    let curvature = (d2 - d1) / (x[2] - x[0]);
    if curvature == 0.0 || !curvature.is_finite() {
        return x[1];
    }
    let v = 0.5 * (x[0] + x[1]) - d1 / (2.0 * curvature);
    v.clamp(x[0], x[2])
}

/// Per flux column, local extrema beyond median ± k·MAD (MAD scaled to a
/// Gaussian σ), refined by a three-point parabola. Weight is prominence over
/// the median normalized to the column's largest.
pub fn extract_peaks(dataset: &SpectrumDataset, options: &PeakOptions) -> Result<PeakList> {
    let SpectrumData::Map { probe, values } = &dataset.data else {
        return Err(Error::Precondition(
            "peak extraction needs a probe axis".into(),
        ));
    };
    let polarity = options.polarity.unwrap_or(match dataset.metadata.kind {
        DatasetKind::TwoToneMap => Polarity::Peak,
        _ => Polarity::Dip,
    });
    let signal = |v: &Complex64| match (polarity, dataset.metadata.kind) {
        (Polarity::Dip, DatasetKind::TwoToneMap) => -v.re,
        (Polarity::Dip, _) => -v.norm(),
        (Polarity::Peak, DatasetKind::TwoToneMap) => v.re,
        (Polarity::Peak, _) => v.norm(),
    };
    let mut entries = Vec::new();
    for (&flux, column) in dataset.flux.iter().zip(values) {
        let s: Vec<f64> = column.iter().map(signal).collect();
        if s.len() < 3 {
            continue;
        }
        let mut tmp = s.clone();
        let med = median(&mut tmp);
        let mut dev: Vec<f64> = s.iter().map(|v| (v - med).abs()).collect();
        let mad = 1.4826 * median(&mut dev);
        let threshold = med + options.k * mad;
        let mut found = Vec::new();
        for j in 1..s.len() - 1 {
            if s[j] > threshold && s[j] >= s[j - 1] && s[j] > s[j + 1] {
                let f = parabola_vertex(
                    [probe[j - 1], probe[j], probe[j + 1]],
                    [s[j - 1], s[j], s[j + 1]],
                );
                found.push((f, s[j] - med));
            }
        }
        let top = found.iter().map(|p| p.1).fold(0.0, f64::max);
        for (frequency, prominence) in found {
            entries.push(Peak {
                flux,
                frequency,
                weight: (prominence / top).clamp(f64::MIN_POSITIVE, 1.0),
            });
        }
    }
    Ok(PeakList { entries })
}

/// A peak attributed to a specific transition.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub flux: f64,
    /// GHz.
    pub frequency: f64,
    pub weight: f64,
    pub transition: TransitionSpec,
}

/// Reads observations straight from a line dataset whose ids name their
/// transitions (`g0-e0`, or `stark_nK` for the `gK-eK` line). Stark lines are
/// stored signed; like every other line they are matched by magnitude.
pub fn observations_from_lines(dataset: &SpectrumDataset) -> Result<Vec<Observation>> {
    let SpectrumData::Lines { lines } = &dataset.data else {
        return Err(Error::Precondition("expected a line dataset".into()));
    };
    let mut out = Vec::new();
    for line in lines {
        let transition = line_transition(&line.id)?;
        for (&flux, v) in dataset.flux.iter().zip(&line.values) {
            if let Some(frequency) = v {
                out.push(Observation {
                    flux,
                    frequency: frequency.abs(),
                    weight: 1.0,
                    transition,
                });
            }
        }
    }
    Ok(out)
}

fn line_transition(id: &str) -> Result<TransitionSpec> {
    if let Some(n) = id.strip_prefix("stark_n") {
        let n: usize = n
            .parse()
            .map_err(|_| Error::Domain(format!("invalid line id '{id}'")))?;
        return Ok(TransitionSpec::new(Label::new(0, n), Label::new(1, n)));
    }
    id.parse()
}

/// Model parameter that a fit may vary.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FitParameter {
    EjSigma,
    ChargingEnergy,
    Coupling,
    ResonatorFrequency,
    FluxOffset,
    FluxPeriod,
}

impl FitParameter {
    pub const ALL: [FitParameter; 6] = [
        FitParameter::EjSigma,
        FitParameter::ChargingEnergy,
        FitParameter::Coupling,
        FitParameter::ResonatorFrequency,
        FitParameter::FluxOffset,
        FitParameter::FluxPeriod,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FitParameter::EjSigma => "EJ_sigma",
            FitParameter::ChargingEnergy => "E_C",
            FitParameter::Coupling => "g",
            FitParameter::ResonatorFrequency => "f_r",
            FitParameter::FluxOffset => "flux_offset",
            FitParameter::FluxPeriod => "flux_period",
        }
    }

    pub fn unit(self) -> &'static str {
        match self {
            FitParameter::EjSigma
            | FitParameter::ChargingEnergy
            | FitParameter::ResonatorFrequency => "GHz",
            FitParameter::Coupling => "MHz",
            FitParameter::FluxOffset | FitParameter::FluxPeriod => "",
        }
    }

    pub fn get(self, t: &ModelTemplate) -> f64 {
        match self {
            FitParameter::EjSigma => t.model.ej_sigma,
            FitParameter::ChargingEnergy => t.model.e_c,
            FitParameter::Coupling => t.model.g_over_2pi,
            FitParameter::ResonatorFrequency => t.model.f_r,
            FitParameter::FluxOffset => t.flux_offset,
            FitParameter::FluxPeriod => t.flux_period,
        }
    }

    pub fn set(self, t: &mut ModelTemplate, v: f64) {
        match self {
            FitParameter::EjSigma => t.model.ej_sigma = v,
            FitParameter::ChargingEnergy => t.model.e_c = v,
            FitParameter::Coupling => t.model.g_over_2pi = v,
            FitParameter::ResonatorFrequency => t.model.f_r = v,
            FitParameter::FluxOffset => t.flux_offset = v,
            FitParameter::FluxPeriod => t.flux_period = v,
        }
    }

    /// Default search interval around a guess.
    pub fn default_bounds(self, guess: f64) -> (f64, f64) {
        match self {
            FitParameter::Coupling => (0.0, (3.0 * guess).max(50.0)),
            FitParameter::FluxOffset => (guess - 0.1, guess + 0.1),
            _ => (0.7 * guess, 1.3 * guess),
        }
    }
}

impl fmt::Display for FitParameter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FitParameter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FitParameter::ALL
            .into_iter()
            .find(|p| p.name() == s.trim())
            .ok_or_else(|| Error::Domain(format!("unknown fit parameter '{s}'")))
    }
}

/// Observations, free parameters with bounds, and the starting model.
#[derive(Debug, Clone, PartialEq)]
pub struct FitProblem {
    pub observations: Vec<Observation>,
    /// Peaks that matched no predicted line.
    pub unassigned: Vec<Peak>,
    pub free: Vec<FitParameter>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Initial guess; also supplies fixed parameters and truncation.
    pub initial: ModelTemplate,
}

impl FitProblem {
    /// Problem with default bounds around `initial`.
    pub fn new(
        observations: Vec<Observation>,
        initial: ModelTemplate,
        free: Vec<FitParameter>,
    ) -> Self {
        let (lower, upper) = free
            .iter()
            .map(|p| p.default_bounds(p.get(&initial)))
            .unzip();
        Self {
            observations,
            unassigned: Vec::new(),
            free,
            lower,
            upper,
            initial,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.free.is_empty() {
            return Err(Error::Config("no free parameters".into()));
        }
        if self.lower.len() != self.free.len() || self.upper.len() != self.free.len() {
            return Err(Error::Config("bounds do not match free parameters".into()));
        }
        for (i, p) in self.free.iter().enumerate() {
            let v = p.get(&self.initial);
            if !(self.lower[i] <= v && v <= self.upper[i]) || self.lower[i] >= self.upper[i] {
                return Err(Error::Config(format!(
                    "initial {p} = {v} is not inside bounds [{}, {}]",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        if self.observations.len() < 2 * self.free.len() {
            return Err(Error::Config(format!(
                "{} observations cannot constrain {} parameters (need at least twice as many)",
                self.observations.len(),
                self.free.len()
            )));
        }
        if self
            .observations
            .iter()
            .any(|o| !(o.weight > 0.0) || !o.frequency.is_finite())
        {
            return Err(Error::Config(
                "observation weights must be positive and frequencies finite".into(),
            ));
        }
        self.initial.model.validate()
    }
}

/// Attributes each peak to the nearest predicted line among `hypotheses`
/// if within `gate` (GHz); the rest are reported unassigned.
pub fn assign_transitions(
    peaks: &PeakList,
    guess: &ModelTemplate,
    hypotheses: &[TransitionSpec],
    gate: f64,
    free: Vec<FitParameter>,
) -> Result<FitProblem> {
    let mut cache: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
    let mut observations = Vec::new();
    let mut unassigned = Vec::new();
    for peak in &peaks.entries {
        let predicted = match cache.get(&peak.flux.to_bits()) {
            Some(p) => p.clone(),
            None => {
                let sol = solve(&guess.at(peak.flux))?;
                let p = hypotheses
                    .iter()
                    .map(|t| {
                        transition_frequency(&sol, t.from, t.to)
                            .map(|l| l.frequency)
                            .unwrap_or(f64::NAN)
                    })
                    .collect::<Vec<_>>();
                cache.insert(peak.flux.to_bits(), p.clone());
                p
            }
        };
        let best = predicted
            .iter()
            .enumerate()
            .filter(|(_, f)| f.is_finite())
            .map(|(i, f)| (i, (f - peak.frequency).abs()))
            .min_by(|a, b| a.1.total_cmp(&b.1));
        match best {
            Some((i, d)) if d <= gate => observations.push(Observation {
                flux: peak.flux,
                frequency: peak.frequency,
                weight: peak.weight,
                transition: hypotheses[i],
            }),
            _ => unassigned.push(*peak),
        }
    }
    if observations.is_empty() {
        return Err(Error::Association(format!(
            "none of {} peaks lies within {} MHz of a predicted line",
            peaks.entries.len(),
            ghz_to_mhz(gate)
        )));
    }
    let mut problem = FitProblem::new(observations, *guess, free);
    problem.unassigned = unassigned;
    Ok(problem)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FitOptions {
    pub max_evals: usize,
    /// Simplex restarts from the incumbent after the first search settles.
    pub restarts: usize,
    /// RMS decrease (GHz) per `stall_window` iterations that counts as settled.
    pub stall_tol: f64,
    pub stall_window: usize,
    /// Starting simplex edge in unit-box coordinates.
    pub initial_step: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_evals: 5000,
            restarts: 3,
            stall_tol: 1e-6,
            stall_window: 100,
            initial_step: 0.05,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Estimate {
    pub parameter: FitParameter,
    pub value: f64,
    pub uncertainty: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub flux: f64,
    pub observed: f64,
    pub predicted: f64,
    /// observed − predicted, GHz.
    pub residual: f64,
    pub transition: TransitionSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult {
    pub estimates: Vec<Estimate>,
    pub template: ModelTemplate,
    /// Weighted residual RMS at the optimum, MHz.
    pub residual_rms: f64,
    /// Weighted residual RMS at the initial guess, MHz.
    pub initial_rms: f64,
    pub iterations: usize,
    pub evaluations: usize,
    pub converged: bool,
    pub residuals: Vec<Residual>,
}

impl FitResult {
    pub fn estimate(&self, p: FitParameter) -> Option<&Estimate> {
        self.estimates.iter().find(|e| e.parameter == p)
    }
}

/// Observations grouped by flux so each trial solves once per point.
struct Grouped {
    fluxes: Vec<f64>,
    members: Vec<Vec<usize>>,
    norm_weights: Vec<f64>,
}

impl Grouped {
    fn new(obs: &[Observation]) -> Self {
        let mut index: BTreeMap<u64, usize> = BTreeMap::new();
        let mut fluxes = Vec::new();
        let mut members: Vec<Vec<usize>> = Vec::new();
        for (i, o) in obs.iter().enumerate() {
            let k = *index.entry(o.flux.to_bits()).or_insert_with(|| {
                fluxes.push(o.flux);
                members.push(Vec::new());
                fluxes.len() - 1
            });
            members[k].push(i);
        }
        let mean = obs.iter().map(|o| o.weight).sum::<f64>() / obs.len() as f64;
        Self {
            fluxes,
            members,
            norm_weights: obs.iter().map(|o| o.weight / mean).collect(),
        }
    }

    /// Model line frequency for every observation, matched across label swaps
    /// at anticrossings (NaN where unavailable).
    fn predict(&self, template: &ModelTemplate, obs: &[Observation]) -> Vec<f64> {
        let per_group: Vec<Vec<f64>> = self
            .fluxes
            .par_iter()
            .zip(self.members.par_iter())
            .map(|(&x, members)| match solve(&template.at(x)) {
                Ok(sol) => members
                    .iter()
                    .map(|&i| {
                        let o = &obs[i];
                        let t = o.transition;
                        nearest_hybrid_frequency(&sol, t.from, t.to, o.frequency)
                            .unwrap_or(f64::NAN)
                    })
                    .collect(),
                Err(_) => vec![f64::NAN; members.len()],
            })
            .collect();
        let mut out = vec![f64::NAN; obs.len()];
        for (members, values) in self.members.iter().zip(per_group) {
            for (&i, v) in members.iter().zip(values) {
                out[i] = v;
            }
        }
        out
    }

    /// √(Σ ŵ r² / N) with weights normalized to unit mean, GHz.
    fn rms(&self, template: &ModelTemplate, obs: &[Observation]) -> f64 {
        let pred = self.predict(template, obs);
        let mut acc = 0.0;
        for ((o, p), w) in obs.iter().zip(&pred).zip(&self.norm_weights) {
            if !p.is_finite() {
                return f64::INFINITY;
            }
            acc += w * (o.frequency - p).powi(2);
        }
        (acc / obs.len() as f64).sqrt()
    }
}

fn template_from_unit(problem: &FitProblem, u: &[f64]) -> ModelTemplate {
    let mut t = problem.initial;
    for (i, p) in problem.free.iter().enumerate() {
        p.set(
            &mut t,
            problem.lower[i] + u[i] * (problem.upper[i] - problem.lower[i]),
        );
    }
    t
}

/// Weighted least-squares fit of the model to the observed line positions.
///
/// A bounded Nelder-Mead search in unit-box coordinates is restarted from
/// its incumbent up to `options.restarts` times, then refined by a
/// coordinate polish. `converged` is false when the evaluation budget runs
/// out before the search settles.
pub fn fit_model(problem: &FitProblem, options: &FitOptions) -> Result<FitResult> {
    problem.validate()?;
    let obs = &problem.observations;
    let grouped = Grouped::new(obs);
    let objective = |u: &[f64]| grouped.rms(&template_from_unit(problem, u), obs);

    let u0: Vec<f64> = problem
        .free
        .iter()
        .enumerate()
        .map(|(i, p)| {
            (p.get(&problem.initial) - problem.lower[i]) / (problem.upper[i] - problem.lower[i])
        })
        .collect();
    let lo = vec![0.0; u0.len()];
    let hi = vec![1.0; u0.len()];
    let initial_rms = objective(&u0);

    let mut best_u = u0.clone();
    let mut best_f = initial_rms;
    let mut evals = 1;
    let mut iterations = 0;
    let mut settled = false;
    let mut step = options.initial_step;
    for run in 0..=options.restarts {
        if evals >= options.max_evals {
            settled = false;
            break;
        }
        let nm = NelderMeadOptions {
            max_evals: options.max_evals - evals,
            initial_step: step,
            x_tol: 1e-10,
            f_tol: 1e-13,
            stall_window: options.stall_window,
            stall_tol: options.stall_tol,
        };
        let m = nelder_mead(objective, &best_u, &lo, &hi, &nm);
        evals += m.evals;
        iterations += m.iterations;
        settled = m.converged || m.stalled;
        let improvement = best_f - m.f;
        if m.f < best_f {
            best_f = m.f;
            best_u = m.x;
        }
        if !settled || (run > 0 && improvement < options.stall_tol * 1e-3) {
            break;
        }
        step *= 0.2;
    }

    if evals < options.max_evals {
        let steps = [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
        let (u, f, used) = coordinate_polish(
            objective,
            &best_u,
            best_f,
            &lo,
            &hi,
            &steps,
            options.max_evals - evals,
        );
        evals += used;
        if f < best_f {
            best_f = f;
            best_u = u;
        }
    }
    // Never report worse than the starting point.
    if !(best_f <= initial_rms) {
        best_u = u0;
        best_f = initial_rms;
    }

    let template = template_from_unit(problem, &best_u);
    let estimates = uncertainties(problem, &grouped, &template)?;
    let predicted = grouped.predict(&template, obs);
    let residuals = obs
        .iter()
        .zip(&predicted)
        .map(|(o, &p)| Residual {
            flux: o.flux,
            observed: o.frequency,
            predicted: p,
            residual: o.frequency - p,
            transition: o.transition,
        })
        .collect();
    Ok(FitResult {
        estimates,
        template,
        residual_rms: ghz_to_mhz(best_f),
        initial_rms: ghz_to_mhz(initial_rms),
        iterations,
        evaluations: evals,
        converged: settled && evals <= options.max_evals,
        residuals,
    })
}

/// Standard errors from s²(JᵀJ)⁻¹ of the weighted residuals in physical
/// parameter units. Approximate: it assumes local linearity.
fn uncertainties(
    problem: &FitProblem,
    grouped: &Grouped,
    best: &ModelTemplate,
) -> Result<Vec<Estimate>> {
    let obs = &problem.observations;
    let theta: Vec<f64> = problem.free.iter().map(|p| p.get(best)).collect();
    let scales: Vec<f64> = problem
        .free
        .iter()
        .enumerate()
        .map(|(i, _)| 1e-3 * (problem.upper[i] - problem.lower[i]))
        .collect();
    let residual_fn = |th: &[f64]| -> Vec<f64> {
        let mut t = *best;
        for (p, &v) in problem.free.iter().zip(th) {
            p.set(&mut t, v);
        }
        grouped
            .predict(&t, obs)
            .iter()
            .zip(obs)
            .zip(&grouped.norm_weights)
            .map(|((p, o), w)| w.sqrt() * (o.frequency - p))
            .collect()
    };
    let r = residual_fn(&theta);
    let jac = jacobian(&residual_fn, &theta, &scales);
    let cov = if jac.iter().all(|v| v.is_finite()) {
        covariance_from_jacobian(&jac, &r)
    } else {
        None
    };
    Ok(problem
        .free
        .iter()
        .enumerate()
        .map(|(i, &p)| Estimate {
            parameter: p,
            value: theta[i],
            uncertainty: cov
                .as_ref()
                .map(|c| c[(i, i)].max(0.0).sqrt())
                .filter(|v| v.is_finite())
                .unwrap_or(f64::INFINITY),
        })
        .collect())
}

/// Fitted notch parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LineshapeFit {
    /// GHz.
    pub f_res: f64,
    pub q_internal: f64,
    pub q_coupling: f64,
    pub baseline_amplitude: f64,
    /// RMS of magnitude residuals.
    pub residual_rms: f64,
    pub converged: bool,
}

/// Linewidths a lineshape trace must span.
pub const MIN_SPAN_LINEWIDTHS: f64 = 5.0;

/// Least-squares fit of |S21| from the notch model to a frequency scan.
pub fn fit_resonator_lineshape(freqs: &[f64], magnitude: &[f64]) -> Result<LineshapeFit> {
    let n = freqs.len();
    if n != magnitude.len() || n < 8 {
        return Err(Error::Precondition(
            "lineshape trace needs >= 8 matching samples".into(),
        ));
    }
    if !freqs.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Precondition(
            "frequencies must be strictly increasing".into(),
        ));
    }
    let edge = (n / 10).max(2);
    let mut ends: Vec<f64> = magnitude[..edge]
        .iter()
        .chain(&magnitude[n - edge..])
        .copied()
        .collect();
    let baseline = median(&mut ends);
    let (imin, &min) = magnitude
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("nonempty");
    let f0 = freqs[imin];
    let depth = (1.0 - min / baseline).clamp(1e-6, 1.0 - 1e-9);
    // |S21|² crosses (A² + min²)/2 at f0 ± f0/(2Q_l).
    let level = ((baseline * baseline + min * min) / 2.0).sqrt();
    let cross = |range: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        for j in range {
            if magnitude[j] >= level {
                return Some(freqs[j]);
            }
        }
        None
    };
    let left = cross(&mut (0..imin).rev());
    let right = cross(&mut (imin..n));
    let fwhm =
        match (left, right) {
            (Some(l), Some(r)) => r - l,
            (Some(l), None) => 2.0 * (f0 - l),
            (None, Some(r)) => 2.0 * (r - f0),
            (None, None) => return Err(Error::Precondition(
                "trace does not resolve the resonance width; it must span at least 5 linewidths"
                    .into(),
            )),
        };
    let ql0 = f0 / fwhm;
    let span = freqs[n - 1] - freqs[0];
    if span < MIN_SPAN_LINEWIDTHS * fwhm {
        return Err(Error::Precondition(format!(
            "trace spans {:.2} linewidths, need at least {MIN_SPAN_LINEWIDTHS}",
            span / fwhm
        )));
    }
    let qc0 = ql0 / depth;
    let qi0 = if depth < 1.0 - 1e-6 {
        1.0 / (1.0 / ql0 - 1.0 / qc0)
    } else {
        1e3 * ql0
    };

    let model = |p: &[f64], f: f64| -> f64 {
        let ls = LineshapeParams {
            q_internal: p[1].exp(),
            q_coupling: p[2].exp(),
            baseline_amplitude: p[3],
            noise_sigma: 0.0,
        };
        s21_notch(f, p[0], &ls).norm()
    };
    let residuals = |p: &[f64]| -> Vec<f64> {
        freqs
            .iter()
            .zip(magnitude)
            .map(|(&f, &m)| model(p, f) - m)
            .collect()
    };
    let x0 = [f0, qi0.ln(), qc0.ln(), baseline];
    let scales = [f0 / ql0, 1.0, 1.0, baseline.abs().max(1e-12)];
    let fit = levenberg_marquardt(residuals, &x0, &scales, &LmOptions::default());
    Ok(LineshapeFit {
        f_res: fit.x[0],
        q_internal: fit.x[1].exp(),
        q_coupling: fit.x[2].exp(),
        baseline_amplitude: fit.x[3],
        residual_rms: (fit.cost / n as f64).sqrt(),
        converged: fit.converged,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DatasetMetadata;
    use crate::hilbert::SystemModel;
    use crate::spectra::{
        crossing_fluxes, linspace, rasterize_lines, synthesize_noisy_spectrum, two_tone_lines,
        FluxSweepConfig, RESONATOR_LINE,
    };

    fn fit_template() -> ModelTemplate {
        ModelTemplate::new(SystemModel {
            n_transmon: 4,
            n_photon: 4,
            ..SystemModel::default()
        })
    }

    fn fit_lines() -> Vec<TransitionSpec> {
        vec![
            RESONATOR_LINE,
            "g0-e0".parse().unwrap(),
            "e0-f0".parse().unwrap(),
        ]
    }

    fn perturbed(t: &ModelTemplate, free: &[FitParameter], factor: f64) -> ModelTemplate {
        let mut g = *t;
        for (i, p) in free.iter().enumerate() {
            let v = p.get(t);
            let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
            p.set(&mut g, v * (1.0 + sign * factor));
        }
        g
    }

    const FOUR: [FitParameter; 4] = [
        FitParameter::EjSigma,
        FitParameter::ChargingEnergy,
        FitParameter::Coupling,
        FitParameter::ResonatorFrequency,
    ];

    #[test]
    fn clean_dip_located_within_tenth_linewidth() {
        let ls = LineshapeParams::default();
        let f_res = 4.639_37;
        let lw = f_res / ls.q_loaded();
        let probe = linspace(f_res - 6.0 * lw, f_res + 6.0 * lw, 241);
        let column: Vec<Complex64> = probe.iter().map(|&f| s21_notch(f, f_res, &ls)).collect();
        let ds = SpectrumDataset {
            flux: vec![0.0],
            data: SpectrumData::Map {
                probe,
                values: vec![column],
            },
            metadata: DatasetMetadata {
                kind: DatasetKind::SingleTone,
                ..DatasetMetadata::default()
            },
        };
        let peaks = extract_peaks(&ds, &PeakOptions::default()).unwrap();
        assert_eq!(peaks.entries.len(), 1);
        assert!((peaks.entries[0].frequency - f_res).abs() < 0.1 * lw);
        assert_eq!(peaks.entries[0].weight, 1.0);
    }

    #[test]
    fn flat_dataset_has_no_peaks() {
        let ds = SpectrumDataset {
            flux: vec![0.0, 0.1],
            data: SpectrumData::Map {
                probe: linspace(4.0, 5.0, 50),
                values: vec![vec![Complex64::new(0.0, 0.0); 50]; 2],
            },
            metadata: DatasetMetadata::default(),
        };
        assert!(extract_peaks(&ds, &PeakOptions::default())
            .unwrap()
            .entries
            .is_empty());
    }

    #[test]
    fn pure_noise_false_peak_rate() {
        let columns = 2000;
        let clean = SpectrumDataset {
            flux: linspace(0.0, 1.0, columns),
            data: SpectrumData::Map {
                probe: linspace(4.0, 5.0, 200),
                values: vec![vec![Complex64::new(0.0, 0.0); 200]; columns],
            },
            metadata: DatasetMetadata {
                kind: DatasetKind::TwoToneMap,
                ..DatasetMetadata::default()
            },
        };
        let noisy = synthesize_noisy_spectrum(&clean, 1.0, 99).unwrap();
        let peaks = extract_peaks(&noisy, &PeakOptions::default()).unwrap();
        let rate = peaks.entries.len() as f64 / columns as f64;
        assert!(rate < 1e-3, "false-peak rate {rate}");
    }

    #[test]
    fn assignment_gate() {
        let guess = fit_template();
        let sol = solve(&guess.at(0.0)).unwrap();
        let f_ge = transition_frequency(&sol, Label::new(0, 0), Label::new(1, 0))
            .unwrap()
            .frequency;
        let f_rr = transition_frequency(&sol, Label::new(0, 0), Label::new(0, 1))
            .unwrap()
            .frequency;
        let peak = |f: f64| Peak {
            flux: 0.0,
            frequency: f,
            weight: 1.0,
        };
        let peaks = PeakList {
            entries: vec![
                peak(f_ge),
                peak(f_rr),
                peak(f_ge + 0.040),
                peak(f_ge + 0.500),
            ],
        };
        let p = assign_transitions(&peaks, &guess, &fit_lines(), 0.050, FOUR.to_vec()).unwrap();
        assert_eq!(p.observations.len(), 3);
        assert_eq!(p.unassigned.len(), 1);
        assert_eq!(p.observations[0].transition.to_string(), "g0-e0");
        assert_eq!(p.observations[1].transition.to_string(), "g0-g1");
        let far = PeakList {
            entries: vec![peak(f_ge + 0.5)],
        };
        assert!(matches!(
            assign_transitions(&far, &guess, &fit_lines(), 0.050, FOUR.to_vec()),
            Err(Error::Association(_))
        ));
    }

    #[test]
    fn raster_peaks_assign_completely() {
        let truth = fit_template();
        let cfg = FluxSweepConfig::new(linspace(-0.3, 0.3, 13), vec!["g0-e0".parse().unwrap()]);
        let lines = two_tone_lines(&truth, &cfg).unwrap();
        let raster = rasterize_lines(&lines, &linspace(3.0, 5.5, 2501), 0.002).unwrap();
        let peaks = extract_peaks(&raster, &PeakOptions::default()).unwrap();
        assert_eq!(peaks.entries.len(), 13);
        let p = assign_transitions(
            &peaks,
            &truth,
            &["g0-e0".parse().unwrap()],
            0.05,
            FOUR.to_vec(),
        )
        .unwrap();
        assert_eq!(p.observations.len(), 13);
        assert!(p.unassigned.is_empty());
    }

    #[test]
    fn problem_validation() {
        let t = fit_template();
        let obs = vec![
            Observation {
                flux: 0.0,
                frequency: 5.0,
                weight: 1.0,
                transition: RESONATOR_LINE,
            };
            3
        ];
        let p = FitProblem::new(obs.clone(), t, FOUR.to_vec());
        assert!(matches!(p.validate(), Err(Error::Config(_))));
        let mut p = FitProblem::new(vec![obs[0]; 8], t, FOUR.to_vec());
        assert!(p.validate().is_ok());
        p.lower[0] = 12.0;
        assert!(p.validate().is_err());
    }

    fn problem_from(
        truth: &ModelTemplate,
        grid: Vec<f64>,
        free: &[FitParameter],
        factor: f64,
    ) -> FitProblem {
        let cfg = FluxSweepConfig::new(grid, fit_lines());
        let ds = two_tone_lines(truth, &cfg).unwrap();
        let obs = observations_from_lines(&ds).unwrap();
        FitProblem::new(obs, perturbed(truth, free, factor), free.to_vec())
    }

    #[test]
    fn noiseless_round_trip_recovers_parameters() {
        let truth = fit_template();
        let problem = problem_from(&truth, linspace(-0.3, 0.3, 61), &FOUR, 0.05);
        let fit = fit_model(&problem, &FitOptions::default()).unwrap();
        assert!(fit.converged);
        for p in FOUR {
            let rel = (fit.estimate(p).unwrap().value - p.get(&truth)).abs() / p.get(&truth);
            assert!(rel < 5e-3, "{p}: rel error {rel}");
        }
        assert!(fit.residual_rms <= fit.initial_rms);
    }

    #[test]
    fn fit_is_deterministic_and_weight_scale_invariant() {
        let truth = fit_template();
        let problem = problem_from(&truth, linspace(-0.3, 0.3, 31), &FOUR, 0.03);
        let opts = FitOptions {
            max_evals: 600,
            ..FitOptions::default()
        };
        let a = fit_model(&problem, &opts).unwrap();
        let b = fit_model(&problem, &opts).unwrap();
        assert_eq!(a, b);
        let mut scaled = problem.clone();
        for o in &mut scaled.observations {
            o.weight *= 4.0;
        }
        let c = fit_model(&scaled, &opts).unwrap();
        for (x, y) in a.estimates.iter().zip(&c.estimates) {
            assert!((x.value - y.value).abs() <= 1e-12 * x.value.abs().max(1.0));
        }
    }

    #[test]
    fn frozen_coupling_leaves_floor_near_crossing() {
        let truth = fit_template();
        let cross = crossing_fluxes(&truth.model)[0];
        let grid = linspace(cross - 0.01, cross + 0.01, 21);
        let cfg = FluxSweepConfig::new(grid, vec![RESONATOR_LINE, "g0-e0".parse().unwrap()]);
        let obs = observations_from_lines(&two_tone_lines(&truth, &cfg).unwrap()).unwrap();
        let mut guess = truth;
        guess.model.g_over_2pi = 0.0;
        let free = vec![FitParameter::EjSigma, FitParameter::ResonatorFrequency];
        let fit = fit_model(&FitProblem::new(obs, guess, free), &FitOptions::default()).unwrap();
        assert!(
            fit.residual_rms >= 0.5 * truth.model.g_over_2pi,
            "{}",
            fit.residual_rms
        );
    }

    #[test]
    fn budget_of_one_is_not_converged() {
        let truth = fit_template();
        let problem = problem_from(&truth, linspace(-0.3, 0.3, 11), &FOUR, 0.05);
        let fit = fit_model(
            &problem,
            &FitOptions {
                max_evals: 1,
                ..FitOptions::default()
            },
        )
        .unwrap();
        assert!(!fit.converged);
        assert_eq!(fit.residual_rms, fit.initial_rms);
    }

    fn notch_trace(qi: f64, qc: f64, span_lw: f64) -> (Vec<f64>, Vec<f64>, f64) {
        let ls = LineshapeParams {
            q_internal: qi,
            q_coupling: qc,
            baseline_amplitude: 0.8,
            noise_sigma: 0.0,
        };
        let f_res = 4.639;
        let lw = f_res / ls.q_loaded();
        let freqs = linspace(f_res - 0.5 * span_lw * lw, f_res + 0.5 * span_lw * lw, 401);
        let mags = freqs
            .iter()
            .map(|&f| s21_notch(f, f_res + 1e-5, &ls).norm())
            .collect();
        (freqs, mags, f_res + 1e-5)
    }

    #[test]
    fn lineshape_round_trips() {
        for (qi, qc) in [(1e4, 2e4), (1e3, 2e4)] {
            let (f, m, f_res) = notch_trace(qi, qc, 12.0);
            let fit = fit_resonator_lineshape(&f, &m).unwrap();
            assert!((fit.q_internal / qi - 1.0).abs() < 0.03, "{fit:?}");
            assert!((fit.q_coupling / qc - 1.0).abs() < 0.03, "{fit:?}");
            assert!((fit.f_res - f_res).abs() < 1e-6);
            assert!((fit.baseline_amplitude - 0.8).abs() < 1e-6);
        }
        let (f, m, _) = notch_trace(1e4, 2e4, 1.0);
        assert!(matches!(
            fit_resonator_lineshape(&f, &m),
            Err(Error::Precondition(_))
        ));
    }
}
