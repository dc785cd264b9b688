//! Open-system dynamics of a driven transmon and the time-domain
//! experiments built on it: Rabi, energy relaxation, Ramsey and Hahn echo.
//!
//! The density matrix evolves in the frame rotating at the drive frequency
//! (rotating-wave approximation) under a Lindblad equation with relaxation
//! (rate 1/T1) and white pure dephasing (rate 1/T_phi). Pulses are square and
//! resonant; a Ramsey/echo detuning acts during the free-evolution delays,
//! which is equivalent to advancing the phase of the later pulses.
//!
//! Units: Ω/2π and δ/2π in MHz, durations in ns, lifetimes in μs.

use std::f64::consts::PI;

use nalgebra::{Matrix3, SMatrix, SVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::constants::mhz_to_rad_per_ns;
use crate::error::{Error, Result};
use crate::optim::{levenberg_marquardt, LmOptions};

type Mat = Matrix3<Complex64>;
type Super = SMatrix<Complex64, 9, 9>;
type Vec9 = SVector<Complex64, 9>;

/// Integration steps per radian of the fastest rate in the problem.
pub const STEPS_PER_RADIAN: f64 = 50.0;
/// Upper bound on the integration step, ns.
pub const MAX_STEP_NS: f64 = 1.0;
const MAX_STEPS: f64 = 1e9;

/// Relaxation and pure-dephasing times, μs. Either may be infinite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecoherenceParams {
    pub t1: f64,
    pub t_phi: f64,
}

impl Default for DecoherenceParams {
    /// T1 = 6.63 μs with T_phi chosen so that T2* = 2.17 μs.
    fn default() -> Self {
        Self::from_t2(6.63, 2.17).expect("valid defaults")
    }
}

impl DecoherenceParams {
    pub fn new(t1: f64, t_phi: f64) -> Result<Self> {
        let p = Self { t1, t_phi };
        p.validate()?;
        Ok(p)
    }

    /// No relaxation and no dephasing.
    pub fn coherent() -> Self {
        Self {
            t1: f64::INFINITY,
            t_phi: f64::INFINITY,
        }
    }

    /// Pure dephasing time giving coherence time `t2` at the given T1.
    pub fn from_t2(t1: f64, t2: f64) -> Result<Self> {
        let inv = 1.0 / t2 - 0.5 / t1;
        if !(t2 > 0.0) || inv < -1e-12 {
            return Err(Error::Domain(format!(
                "T2 = {t2} μs exceeds the 2·T1 limit for T1 = {t1} μs"
            )));
        }
        Self::new(t1, if inv <= 0.0 { f64::INFINITY } else { 1.0 / inv })
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.t1 > 0.0) || !(self.t_phi > 0.0) {
            return Err(Error::Domain(format!(
                "T1 and T_phi must be positive (or infinite), got {} and {}",
                self.t1, self.t_phi
            )));
        }
        Ok(())
    }

    /// (1/(2T1) + 1/T_phi)⁻¹, μs.
    pub fn t2(&self) -> f64 {
        1.0 / (0.5 / self.t1 + 1.0 / self.t_phi)
    }

    /// Relaxation rate, 1/ns.
    pub fn gamma1(&self) -> f64 {
        1e-3 / self.t1
    }

    /// Pure-dephasing rate, 1/ns.
    pub fn gamma_phi(&self) -> f64 {
        1e-3 / self.t_phi
    }
}

/// Square drive segment; zero amplitude makes a free-evolution delay.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    /// Ω/2π, MHz.
    pub rabi_amplitude: f64,
    /// δ/2π = (qubit − drive) frequency, MHz.
    pub detuning: f64,
    /// ns.
    pub duration: f64,
}

/// Ordered segments; readout follows the last one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PulseSequence {
    pub segments: Vec<Segment>,
}

impl PulseSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn pulse(mut self, rabi_amplitude: f64, detuning: f64, duration: f64) -> Self {
        self.segments.push(Segment {
            rabi_amplitude,
            detuning,
            duration,
        });
        self
    }

    pub fn delay(self, detuning: f64, duration: f64) -> Self {
        self.pulse(0.0, detuning, duration)
    }

    pub fn duration(&self) -> f64 {
        self.segments.iter().map(|s| s.duration).sum()
    }

    pub fn validate(&self) -> Result<()> {
        if self.segments.is_empty() {
            return Err(Error::Domain("pulse sequence is empty".into()));
        }
        for s in &self.segments {
            if !(s.duration >= 0.0) || !s.duration.is_finite() {
                return Err(Error::Domain(format!(
                    "segment duration {} ns is invalid",
                    s.duration
                )));
            }
            if !s.rabi_amplitude.is_finite() || !s.detuning.is_finite() {
                return Err(Error::Domain(
                    "segment amplitude and detuning must be finite".into(),
                ));
            }
        }
        Ok(())
    }
}

/// Duration of a resonant π-pulse at Rabi frequency Ω/2π (MHz), ns.
pub fn pi_pulse_duration(rabi_amplitude: f64) -> f64 {
    500.0 / rabi_amplitude
}

/// Level populations sampled in time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationTrace {
    /// ns, or the swept parameter for experiment traces.
    pub times: Vec<f64>,
    /// One row per sample, one entry per level, clamped to [0, 1].
    pub populations: Vec<Vec<f64>>,
    /// Largest |Tr ρ − 1| seen at any integration step.
    pub max_trace_error: f64,
}

impl PopulationTrace {
    pub fn level(&self, k: usize) -> Vec<f64> {
        self.populations.iter().map(|p| p[k]).collect()
    }

    pub fn excited(&self) -> Vec<f64> {
        self.level(1)
    }

    pub fn levels(&self) -> usize {
        self.populations.first().map_or(0, Vec::len)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvolveOptions {
    /// Level the system starts in.
    pub initial_level: usize,
    /// Record populations every this many ns; otherwise only at segment ends.
    pub sample_interval: Option<f64>,
    /// Cap on the integration step, ns.
    pub max_step: Option<f64>,
}

struct Generator {
    /// H − (i/2) Σ L†L.
    h_eff: Mat,
    jumps: Vec<Mat>,
}

impl Generator {
    fn new(levels: usize, alpha: f64, dec: &DecoherenceParams, seg: &Segment) -> Self {
        let z = Complex64::new(0.0, 0.0);
        let omega = mhz_to_rad_per_ns(seg.rabi_amplitude);
        let delta = mhz_to_rad_per_ns(seg.detuning);
        let alpha = 2.0 * PI * alpha;
        let mut lower = Mat::from_element(z);
        lower[(0, 1)] = Complex64::new(1.0, 0.0);
        if levels == 3 {
            lower[(1, 2)] = Complex64::new(2f64.sqrt(), 0.0);
        }
        let mut h = (lower + lower.adjoint()) * Complex64::new(omega / 2.0, 0.0);
        h[(1, 1)] += delta;
        if levels == 3 {
            h[(2, 2)] += 2.0 * delta + alpha;
        }
        let mut jumps = Vec::new();
        let g1 = dec.gamma1();
        if g1 > 0.0 {
            jumps.push(lower * Complex64::new(g1.sqrt(), 0.0));
        }
        let gp = dec.gamma_phi();
        if gp > 0.0 {
            let mut n = Mat::from_element(z);
            for k in 0..levels {
                n[(k, k)] = Complex64::new(k as f64, 0.0);
            }
            jumps.push(n * Complex64::new((2.0 * gp).sqrt(), 0.0));
        }
        let decay: Mat = jumps
            .iter()
            .map(|l| l.adjoint() * l)
            .fold(Mat::from_element(z), |a, b| a + b);
        Self {
            h_eff: h - decay * Complex64::new(0.0, 0.5),
            jumps,
        }
    }

    fn apply(&self, rho: &Mat) -> Mat {
        let minus_i = Complex64::new(0.0, -1.0);
        let mut d = (self.h_eff * rho - rho * self.h_eff.adjoint()) * minus_i;
        for l in &self.jumps {
            d += l * rho * l.adjoint();
        }
        d
    }

    /// The generator as a superoperator on column-stacked ρ.
    fn superoperator(&self) -> Super {
        let mut l = Super::zeros();
        for k in 0..9 {
            let mut basis = Mat::zeros();
            basis[k] = Complex64::new(1.0, 0.0);
            let image = self.apply(&basis);
            for j in 0..9 {
                l[(j, k)] = image[j];
            }
        }
        l
    }

    /// One classical RK4 step of size `h`. For this linear, time-independent
    /// generator it is exactly the map I + hL + (hL)²/2 + (hL)³/6 + (hL)⁴/24.
    fn rk4_map(&self, h: f64) -> Super {
        let hl = self.superoperator() * Complex64::new(h, 0.0);
        let id = Super::identity();
        let quarter = id + hl * Complex64::new(0.25, 0.0);
        let third = id + hl * quarter * Complex64::new(1.0 / 3.0, 0.0);
        let half = id + hl * third * Complex64::new(0.5, 0.0);
        id + hl * half
    }
}

/// Auto step for a segment: ≤ 1 ns and ≤ 1/(50·fastest rate).
fn segment_step(levels: usize, alpha: f64, dec: &DecoherenceParams, seg: &Segment) -> f64 {
    let mut rate = mhz_to_rad_per_ns(seg.rabi_amplitude)
        .abs()
        .max(mhz_to_rad_per_ns(seg.detuning).abs())
        .max(dec.gamma1() + dec.gamma_phi());
    if levels == 3 {
        rate = rate.max((2.0 * PI * alpha).abs() + 2.0 * mhz_to_rad_per_ns(seg.detuning).abs());
    }
    if rate > 0.0 {
        MAX_STEP_NS.min(1.0 / (STEPS_PER_RADIAN * rate))
    } else {
        MAX_STEP_NS
    }
}

/// `map^n` by repeated squaring; the segment map is constant, so this is
/// the same n-step propagation in O(log n) products.
fn matrix_power(map: Super, mut n: u64) -> Super {
    let mut base = map;
    let mut acc = Super::identity();
    while n > 0 {
        if n & 1 == 1 {
            acc *= base;
        }
        n >>= 1;
        if n > 0 {
            base = base * base;
        }
    }
    acc
}

fn populations(rho: &Mat, levels: usize) -> Vec<f64> {
    (0..levels)
        .map(|k| rho[(k, k)].re.clamp(0.0, 1.0))
        .collect()
}

/// Integrates the master equation over `sequence` with fixed-step RK4.
/// Within a segment the step map is constant and is applied as one
/// power per sample interval.
///
/// `alpha` is the anharmonicity α in GHz, used only for three levels.
pub fn evolve_open_system(
    levels: usize,
    alpha: f64,
    decoherence: &DecoherenceParams,
    sequence: &PulseSequence,
    options: &EvolveOptions,
) -> Result<PopulationTrace> {
    if !(levels == 2 || levels == 3) {
        return Err(Error::Domain(format!(
            "level count must be 2 or 3, got {levels}"
        )));
    }
    if levels == 3 && !alpha.is_finite() {
        return Err(Error::Domain(
            "three-level evolution needs a finite anharmonicity".into(),
        ));
    }
    if options.initial_level >= levels {
        return Err(Error::Domain(format!(
            "initial level {} out of range",
            options.initial_level
        )));
    }
    if let Some(s) = options.sample_interval {
        if !(s > 0.0) {
            return Err(Error::Domain("sample interval must be positive".into()));
        }
    }
    decoherence.validate()?;
    sequence.validate()?;

    let mut rho = Mat::from_element(Complex64::new(0.0, 0.0));
    rho[(options.initial_level, options.initial_level)] = Complex64::new(1.0, 0.0);
    let mut t = 0.0;
    let mut times = vec![0.0];
    let mut pops = vec![populations(&rho, levels)];
    let mut max_trace_error: f64 = 0.0;

    for seg in &sequence.segments {
        if seg.duration == 0.0 {
            times.push(t);
            pops.push(populations(&rho, levels));
            continue;
        }
        let mut h = segment_step(levels, alpha, decoherence, seg);
        if let Some(cap) = options.max_step {
            h = h.min(cap);
        }
        let samples = match options.sample_interval {
            Some(s) => (seg.duration / s).ceil().max(1.0),
            None => 1.0,
        };
        let per_sample = (seg.duration / samples / h).ceil().max(1.0);
        if !(h > 0.0) || samples * per_sample > MAX_STEPS {
            return Err(Error::Numeric(format!(
                "integration step underflow: {} steps needed for a {} ns segment",
                samples * per_sample,
                seg.duration
            )));
        }
        let step = seg.duration / (samples * per_sample);
        let map = Generator::new(levels, alpha, decoherence, seg).rk4_map(step);
        let block = matrix_power(map, per_sample as u64);
        let t0 = t;
        let mut v = Vec9::from_column_slice(rho.as_slice());
        for s in 0..samples as usize {
            v = block * v;
            let tr = v[0].re + v[4].re + v[8].re;
            max_trace_error = max_trace_error.max((tr - 1.0).abs());
            rho = Mat::from_column_slice(v.as_slice());
            t = t0 + seg.duration * (s + 1) as f64 / samples;
            times.push(t);
            pops.push(populations(&rho, levels));
        }
        if !rho.iter().all(|v| v.re.is_finite() && v.im.is_finite()) {
            return Err(Error::Numeric("density matrix diverged".into()));
        }
    }
    Ok(PopulationTrace {
        times,
        populations: pops,
        max_trace_error,
    })
}

/// Final populations after `sequence` from the ground state.
fn final_populations(
    levels: usize,
    alpha: f64,
    dec: &DecoherenceParams,
    seq: &PulseSequence,
) -> Result<(Vec<f64>, f64)> {
    let tr = evolve_open_system(levels, alpha, dec, seq, &EvolveOptions::default())?;
    Ok((
        tr.populations.last().cloned().expect("initial sample"),
        tr.max_trace_error,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    Exponential,
    DampedCosine,
    EchoExponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitValue {
    pub name: String,
    pub value: f64,
    pub uncertainty: f64,
}

/// Fitted trace model. Exponential: `amplitude·e^(−t/τ) + offset`; damped
/// cosine: `amplitude·e^(−t/τ)·cos(2πft + phase) + offset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub kind: DecayKind,
    /// amplitude, decay_time (μs), [frequency (MHz), phase (rad)], offset.
    pub parameters: Vec<FitValue>,
    pub residual_rms: f64,
    pub converged: bool,
    /// Trace shows no usable decay or oscillation.
    pub degenerate: bool,
}

impl DecayFit {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.parameters
            .iter()
            .find(|p| p.name == name)
            .map(|p| p.value)
    }

    /// μs; infinite when no decay is resolved.
    pub fn decay_time(&self) -> f64 {
        self.get("decay_time").unwrap_or(f64::NAN)
    }

    /// MHz, damped cosine only.
    pub fn frequency(&self) -> Option<f64> {
        self.get("frequency")
    }
}

fn fit_value(name: &str, value: f64, uncertainty: f64) -> FitValue {
    FitValue {
        name: name.into(),
        value,
        uncertainty,
    }
}

fn check_trace(times: &[f64], values: &[f64]) -> Result<()> {
    if times.len() != values.len() || times.len() < 6 {
        return Err(Error::Precondition(
            "a trace fit needs at least 6 matching samples".into(),
        ));
    }
    if !times.windows(2).all(|w| w[0] < w[1]) || !values.iter().chain(times).all(|v| v.is_finite())
    {
        return Err(Error::Precondition(
            "trace times must increase and values be finite".into(),
        ));
    }
    Ok(())
}

fn sigma(cov: &Option<nalgebra::DMatrix<f64>>, i: usize) -> f64 {
    cov.as_ref()
        .map_or(f64::INFINITY, |c| c[(i, i)].max(0.0).sqrt())
}

/// decay_time in μs and its uncertainty from a rate in 1/ns.
fn decay_time_from_rate(k: f64, sk: f64) -> (f64, f64) {
    if k > 0.0 {
        (1e-3 / k, 1e-3 * sk / (k * k))
    } else {
        (f64::INFINITY, f64::INFINITY)
    }
}

fn lm_options() -> LmOptions {
    LmOptions {
        max_iter: 500,
        f_tol: 1e-16,
        x_tol: 1e-14,
    }
}

/// `A·e^(−kt) + B` by Levenberg-Marquardt from a log-linear start.
pub fn fit_exponential(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    check_trace(times, values)?;
    let n = times.len();
    let span = times[n - 1] - times[0];
    let spread = values.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b))
        - values.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if spread < 1e-12 {
        return Ok(degenerate_fit(DecayKind::Exponential, values));
    }
    // Asymptote a bit past the last sample, then a line through ln|y − B|.
    let b0 = values[n - 1] - 0.05 * (values[0] - values[n - 1]);
    let (mut sx, mut sy, mut sxx, mut sxy, mut m) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for (&t, &y) in times.iter().zip(values) {
        let d = (y - b0).abs();
        if d > 1e-3 * spread {
            let l = d.ln();
            sx += t;
            sy += l;
            sxx += t * t;
            sxy += t * l;
            m += 1.0;
        }
    }
    let slope = if m >= 2.0 {
        (m * sxy - sx * sy) / (m * sxx - sx * sx)
    } else {
        -1.0 / span
    };
    let k0 = if slope < 0.0 && slope.is_finite() {
        -slope
    } else {
        1.0 / span
    };
    let a0 = (values[0] - b0) * (k0 * times[0]).exp();

    let residuals = |p: &[f64]| -> Vec<f64> {
        times
            .iter()
            .zip(values)
            .map(|(&t, &y)| p[0] * (-p[1] * t).exp() + p[2] - y)
            .collect()
    };
    let fit = levenberg_marquardt(
        residuals,
        &[a0, k0, b0],
        &[spread, 1.0 / span, spread],
        &lm_options(),
    );
    let (tau, stau) = decay_time_from_rate(fit.x[1], sigma(&fit.covariance, 1));
    Ok(DecayFit {
        kind: DecayKind::Exponential,
        parameters: vec![
            fit_value("amplitude", fit.x[0], sigma(&fit.covariance, 0)),
            fit_value("decay_time", tau, stau),
            fit_value("offset", fit.x[2], sigma(&fit.covariance, 2)),
        ],
        residual_rms: (fit.cost / n as f64).sqrt(),
        converged: fit.converged,
        degenerate: !(fit.x[1] > 0.0),
    })
}

fn degenerate_fit(kind: DecayKind, values: &[f64]) -> DecayFit {
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let mut parameters = vec![
        fit_value("amplitude", 0.0, f64::INFINITY),
        fit_value("decay_time", f64::NAN, f64::INFINITY),
    ];
    if kind == DecayKind::DampedCosine {
        parameters.push(fit_value("frequency", f64::NAN, f64::INFINITY));
        parameters.push(fit_value("phase", f64::NAN, f64::INFINITY));
    }
    parameters.push(fit_value("offset", mean, 0.0));
    let rms = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / values.len() as f64).sqrt();
    DecayFit {
        kind,
        parameters,
        residual_rms: rms,
        converged: false,
        degenerate: true,
    }
}

/// Σ (y − ȳ) e^(−2πi f t) over the samples.
fn dft(times: &[f64], centered: &[f64], f: f64) -> Complex64 {
    times
        .iter()
        .zip(centered)
        .map(|(&t, &y)| Complex64::from_polar(y, -2.0 * PI * f * t))
        .sum()
}

/// `A·e^(−kt)·cos(2πft + φ) + B` by Levenberg-Marquardt, with the frequency
/// started at the periodogram peak.
pub fn fit_damped_cosine(times: &[f64], values: &[f64]) -> Result<DecayFit> {
    check_trace(times, values)?;
    let n = times.len();
    let span = times[n - 1] - times[0];
    let mean = values.iter().sum::<f64>() / n as f64;
    let centered: Vec<f64> = values.iter().map(|v| v - mean).collect();
    let spread = centered.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    if spread < 1e-9 {
        return Ok(degenerate_fit(DecayKind::DampedCosine, values));
    }
    let min_dt = times
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    let f_lo = 0.5 / span;
    let f_hi = 0.5 / min_dt;
    let df = 0.05 / span;
    let count = ((f_hi - f_lo) / df).ceil() as usize + 1;
    let power = |f: f64| dft(times, &centered, f).norm_sqr();
    let powers: Vec<f64> = (0..count)
        .into_par_iter()
        .map(|i| power(f_lo + df * i as f64))
        .collect();
    let imax = powers
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .expect("nonempty grid");
    let mut f0 = f_lo + df * imax as f64;
    if imax > 0 && imax + 1 < count {
        let (a, b, c) = (powers[imax - 1], powers[imax], powers[imax + 1]);
        let denom = a - 2.0 * b + c;
        if denom < 0.0 {
            f0 += 0.5 * (a - c) / denom * df;
        }
    }
    // Envelope from the first and second halves.
    let half = times[0] + span / 2.0;
    let split = times.partition_point(|&t| t < half);
    let amp = |r: std::ops::Range<usize>| {
        let len = r.len().max(1) as f64;
        2.0 * dft(&times[r.clone()], &centered[r], f0).norm() / len
    };
    let (a1, a2) = (amp(0..split), amp(split..n));
    let k0 = if a1 > a2 && a2 > 0.0 {
        (a1 / a2).ln() / (span / 2.0)
    } else {
        0.0
    };
    let c0 = dft(times, &centered, f0);
    let phi0 = -c0.arg();
    let a0 = a1.max(1e-3 * spread) * (k0 * times[0]).exp();

    let model =
        |p: &[f64], t: f64| p[0] * (-p[1] * t).exp() * (2.0 * PI * p[2] * t + p[3]).cos() + p[4];
    let residuals = |p: &[f64]| -> Vec<f64> {
        times
            .iter()
            .zip(values)
            .map(|(&t, &y)| model(p, t) - y)
            .collect()
    };
    let x0 = [a0, k0, f0, phi0.cos().atan2(1.0) * 0.0 + phi0, mean];
    let scales = [spread, 1.0 / span, 1.0 / span, 1.0, spread];
    let fit = levenberg_marquardt(residuals, &x0, &scales, &lm_options());

    // Canonical form: positive amplitude, phase in (−π, π].
    let (mut a, mut phase) = (fit.x[0], fit.x[3]);
    let mut freq = fit.x[2];
    if freq < 0.0 {
        freq = -freq;
        phase = -phase;
    }
    if a < 0.0 {
        a = -a;
        phase += PI;
    }
    phase = (phase + PI).rem_euclid(2.0 * PI) - PI;
    let (tau, stau) = decay_time_from_rate(fit.x[1], sigma(&fit.covariance, 1));
    let cycles = freq * span;
    Ok(DecayFit {
        kind: DecayKind::DampedCosine,
        parameters: vec![
            fit_value("amplitude", a, sigma(&fit.covariance, 0)),
            fit_value("decay_time", tau, stau),
            fit_value("frequency", freq * 1e3, sigma(&fit.covariance, 2) * 1e3),
            fit_value("phase", phase, sigma(&fit.covariance, 3)),
            fit_value("offset", fit.x[4], sigma(&fit.covariance, 4)),
        ],
        residual_rms: (fit.cost / n as f64).sqrt(),
        converged: fit.converged,
        degenerate: cycles < 1.0 || a < 1e-6 * spread,
    })
}

/// Qubit and drive settings shared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriveSetup {
    /// 2 or 3.
    pub levels: usize,
    /// α, GHz (negative for a transmon).
    pub alpha: f64,
    /// Ω/2π, MHz.
    pub rabi_amplitude: f64,
}

impl Default for DriveSetup {
    fn default() -> Self {
        Self {
            levels: 2,
            alpha: -0.334,
            rabi_amplitude: 10.0,
        }
    }
}

impl DriveSetup {
    pub fn pi_pulse(&self) -> f64 {
        pi_pulse_duration(self.rabi_amplitude)
    }

    fn validate(&self) -> Result<()> {
        if !(self.rabi_amplitude > 0.0) || !self.rabi_amplitude.is_finite() {
            return Err(Error::Domain(format!(
                "Rabi amplitude must be positive, got {} MHz",
                self.rabi_amplitude
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    Rabi,
    T1,
    Ramsey,
    Echo,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::Rabi => "rabi",
            ExperimentKind::T1 => "t1",
            ExperimentKind::Ramsey => "ramsey",
            ExperimentKind::Echo => "echo",
        }
    }
}

impl std::str::FromStr for ExperimentKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rabi" => Ok(Self::Rabi),
            "t1" => Ok(Self::T1),
            "ramsey" => Ok(Self::Ramsey),
            "echo" => Ok(Self::Echo),
            _ => Err(Error::Domain(format!(
                "unknown experiment '{s}' (rabi, t1, ramsey, echo)"
            ))),
        }
    }
}

/// Populations after each sequence, indexed by the swept variable.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub kind: ExperimentKind,
    /// `times` holds the swept duration or delay, ns.
    pub trace: PopulationTrace,
    pub fit: DecayFit,
}

impl ExperimentResult {
    /// Half the fitted Rabi period, ns.
    pub fn pi_pulse(&self) -> Option<f64> {
        self.fit.frequency().map(|f| 500.0 / f)
    }
}

fn run_sweep(
    setup: &DriveSetup,
    dec: &DecoherenceParams,
    points: &[f64],
    build: impl Fn(f64) -> PulseSequence + Sync,
) -> Result<PopulationTrace> {
    let results: Vec<Result<(Vec<f64>, f64)>> = points
        .par_iter()
        .map(|&x| final_populations(setup.levels, setup.alpha, dec, &build(x)))
        .collect();
    let mut populations = Vec::with_capacity(points.len());
    let mut max_trace_error: f64 = 0.0;
    for r in results {
        let (p, e) = r?;
        populations.push(p);
        max_trace_error = max_trace_error.max(e);
    }
    Ok(PopulationTrace {
        times: points.to_vec(),
        populations,
        max_trace_error,
    })
}

/// Populations at the ends of the last `points.len()` segments, after
/// `skip` leading segments.
fn sampled_sweep(
    setup: &DriveSetup,
    dec: &DecoherenceParams,
    seq: &PulseSequence,
    points: &[f64],
    skip: usize,
) -> Result<PopulationTrace> {
    let tr = evolve_open_system(
        setup.levels,
        setup.alpha,
        dec,
        seq,
        &EvolveOptions::default(),
    )?;
    Ok(PopulationTrace {
        times: points.to_vec(),
        populations: tr.populations[1 + skip..].to_vec(),
        max_trace_error: tr.max_trace_error,
    })
}

fn check_sweep(points: &[f64], what: &str) -> Result<f64> {
    if points.len() < 8 {
        return Err(Error::Precondition(format!(
            "{what} sweep needs at least 8 points"
        )));
    }
    if !points.windows(2).all(|w| w[0] < w[1]) || !(points[0] >= 0.0) {
        return Err(Error::Precondition(format!(
            "{what} values must be non-negative and increasing"
        )));
    }
    Ok(points[points.len() - 1] - points[0])
}

/// Variable-length drive at detuning δ (MHz); damped-cosine fit of P_e.
pub fn rabi_experiment(
    setup: &DriveSetup,
    decoherence: &DecoherenceParams,
    durations: &[f64],
    detuning: f64,
) -> Result<ExperimentResult> {
    setup.validate()?;
    let span = check_sweep(durations, "duration")?;
    let period = 1e3 / setup.rabi_amplitude.hypot(detuning);
    if span < 2.0 * period {
        return Err(Error::Precondition(format!(
            "durations span {span} ns, need at least two Rabi periods ({} ns)",
            2.0 * period
        )));
    }
    // A constant drive: one trajectory sampled at each duration.
    let mut seq = PulseSequence::new();
    let mut prev = 0.0;
    for &d in durations {
        seq = seq.pulse(setup.rabi_amplitude, detuning, d - prev);
        prev = d;
    }
    let trace = sampled_sweep(setup, decoherence, &seq, durations, 0)?;
    let fit = fit_damped_cosine(&trace.times, &trace.excited())?;
    Ok(ExperimentResult {
        kind: ExperimentKind::Rabi,
        trace,
        fit,
    })
}

/// π-pulse, delay, readout; exponential fit of P_e gives T1.
pub fn t1_experiment(
    setup: &DriveSetup,
    decoherence: &DecoherenceParams,
    delays: &[f64],
) -> Result<ExperimentResult> {
    setup.validate()?;
    decoherence.validate()?;
    let span = check_sweep(delays, "delay")?;
    if !(span >= 3.0 * decoherence.t1 * 1e3) {
        return Err(Error::Precondition(format!(
            "delays span {span} ns, need at least 3·T1 = {} ns",
            3e3 * decoherence.t1
        )));
    }
    // Free decay after one π-pulse: one trajectory sampled at each delay.
    let mut seq = PulseSequence::new().pulse(setup.rabi_amplitude, 0.0, setup.pi_pulse());
    let mut prev = 0.0;
    for &d in delays {
        seq = seq.delay(0.0, d - prev);
        prev = d;
    }
    let trace = sampled_sweep(setup, decoherence, &seq, delays, 1)?;
    let fit = fit_exponential(&trace.times, &trace.excited())?;
    Ok(ExperimentResult {
        kind: ExperimentKind::T1,
        trace,
        fit,
    })
}

/// Fringes of detuning δ (MHz) over a delay span (ns).
fn fringes(detuning: f64, span: f64) -> f64 {
    detuning.abs() * 1e-3 * span
}

/// π/2 – delay – π/2 with detuning δ (MHz) during the delay; damped-cosine
/// fit gives T2* and the fringe frequency.
pub fn ramsey_experiment(
    setup: &DriveSetup,
    decoherence: &DecoherenceParams,
    delays: &[f64],
    detuning: f64,
) -> Result<ExperimentResult> {
    setup.validate()?;
    let span = check_sweep(delays, "delay")?;
    let n_fringes = fringes(detuning, span);
    if detuning != 0.0 && n_fringes < 3.0 {
        return Err(Error::Precondition(format!(
            "detuning {detuning} MHz shows only {n_fringes:.2} fringes; choose at least 3"
        )));
    }
    let half_pi = setup.pi_pulse() / 2.0;
    let trace = run_sweep(setup, decoherence, delays, |d| {
        PulseSequence::new()
            .pulse(setup.rabi_amplitude, 0.0, half_pi)
            .delay(detuning, d)
            .pulse(setup.rabi_amplitude, 0.0, half_pi)
    })?;
    let mut fit = fit_damped_cosine(&trace.times, &trace.excited())?;
    if detuning == 0.0 {
        fit.degenerate = true;
    }
    Ok(ExperimentResult {
        kind: ExperimentKind::Ramsey,
        trace,
        fit,
    })
}

/// π/2 – delay/2 – π – delay/2 – π/2; exponential fit gives T2E. A static
/// detuning δ (MHz) during the delays is refocused.
pub fn echo_experiment(
    setup: &DriveSetup,
    decoherence: &DecoherenceParams,
    delays: &[f64],
    detuning: f64,
) -> Result<ExperimentResult> {
    setup.validate()?;
    check_sweep(delays, "delay")?;
    let pi = setup.pi_pulse();
    let trace = run_sweep(setup, decoherence, delays, |d| {
        PulseSequence::new()
            .pulse(setup.rabi_amplitude, 0.0, pi / 2.0)
            .delay(detuning, d / 2.0)
            .pulse(setup.rabi_amplitude, 0.0, pi)
            .delay(detuning, d / 2.0)
            .pulse(setup.rabi_amplitude, 0.0, pi / 2.0)
    })?;
    let mut fit = fit_exponential(&trace.times, &trace.excited())?;
    fit.kind = DecayKind::EchoExponential;
    Ok(ExperimentResult {
        kind: ExperimentKind::Echo,
        trace,
        fit,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::linspace;
    use proptest::prelude::*;

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs()
    }

    #[test]
    fn free_decay_is_exponential() {
        let dec = DecoherenceParams::new(1.0, f64::INFINITY).unwrap();
        let seq = PulseSequence::new().delay(0.0, 3000.0);
        let opts = EvolveOptions {
            initial_level: 1,
            sample_interval: Some(100.0),
            max_step: None,
        };
        let tr = evolve_open_system(2, 0.0, &dec, &seq, &opts).unwrap();
        assert_eq!(tr.times.len(), 31);
        for (t, p) in tr.times.iter().zip(tr.excited()) {
            assert!((p - (-t / 1000.0).exp()).abs() < 1e-6);
        }
        assert!(tr.max_trace_error < 1e-9);
    }

    #[test]
    fn resonant_rabi_closed_form() {
        let seq = PulseSequence::new().pulse(10.0, 0.0, 230.0);
        let opts = EvolveOptions {
            sample_interval: Some(5.0),
            ..EvolveOptions::default()
        };
        let tr = evolve_open_system(2, 0.0, &DecoherenceParams::coherent(), &seq, &opts).unwrap();
        let omega = mhz_to_rad_per_ns(10.0);
        for (t, p) in tr.times.iter().zip(tr.excited()) {
            assert!((p - (omega * t / 2.0).sin().powi(2)).abs() < 1e-6, "t={t}");
        }
    }

    #[test]
    fn detuned_rabi_closed_form() {
        let (om, de) = (10.0, 6.0);
        let seq = PulseSequence::new().pulse(om, de, 300.0);
        let opts = EvolveOptions {
            sample_interval: Some(2.0),
            ..EvolveOptions::default()
        };
        let tr = evolve_open_system(2, 0.0, &DecoherenceParams::coherent(), &seq, &opts).unwrap();
        let w = mhz_to_rad_per_ns(om.hypot(de));
        let peak = om * om / (om * om + de * de);
        for (t, p) in tr.times.iter().zip(tr.excited()) {
            assert!((p - peak * (w * t / 2.0).sin().powi(2)).abs() < 1e-6);
        }
        let max = tr.excited().into_iter().fold(0.0, f64::max);
        assert!((max - peak).abs() < 1e-3);
    }

    #[test]
    fn step_halving_converges() {
        let dec = DecoherenceParams::new(2.0, 3.0).unwrap();
        let seq = PulseSequence::new()
            .pulse(10.0, 0.0, 25.0)
            .delay(1.0, 700.0)
            .pulse(10.0, 0.0, 25.0);
        let a = evolve_open_system(2, 0.0, &dec, &seq, &EvolveOptions::default()).unwrap();
        let cap = EvolveOptions {
            max_step: Some(0.5 * segment_step(2, 0.0, &dec, &seq.segments[0])),
            ..EvolveOptions::default()
        };
        let b = evolve_open_system(2, 0.0, &dec, &seq, &cap).unwrap();
        for (x, y) in a
            .populations
            .last()
            .unwrap()
            .iter()
            .zip(b.populations.last().unwrap())
        {
            assert!((x - y).abs() <= 1e-8);
        }
    }

    #[test]
    fn three_level_leakage_is_small() {
        // Ω/|α| = 0.05 with α/2π = −334 MHz.
        let omega = 0.05 * 334.0;
        let seq = PulseSequence::new().pulse(omega, 0.0, pi_pulse_duration(omega));
        let opts = EvolveOptions {
            sample_interval: Some(0.5),
            ..EvolveOptions::default()
        };
        let tr =
            evolve_open_system(3, -0.334, &DecoherenceParams::coherent(), &seq, &opts).unwrap();
        assert!(tr.level(2).iter().all(|&p| p <= 1e-2));
        assert!(*tr.excited().last().unwrap() > 0.95);
    }

    #[test]
    fn rejects_bad_inputs() {
        let dec = DecoherenceParams::coherent();
        let seq = PulseSequence::new().pulse(1.0, 0.0, 1.0);
        assert!(evolve_open_system(4, 0.0, &dec, &seq, &EvolveOptions::default()).is_err());
        assert!(evolve_open_system(
            2,
            0.0,
            &dec,
            &PulseSequence::new(),
            &EvolveOptions::default()
        )
        .is_err());
        assert!(DecoherenceParams::new(0.0, 1.0).is_err());
        assert!(DecoherenceParams::from_t2(1.0, 2.5).is_err());
        let huge = PulseSequence::new().pulse(1e9, 0.0, 1e6);
        assert!(matches!(
            evolve_open_system(2, 0.0, &dec, &huge, &EvolveOptions::default()),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn exponential_fit_exact() {
        let t = linspace(0.0, 3000.0, 20);
        let y: Vec<f64> = t
            .iter()
            .map(|&t| 0.9 * (-t / 1234.0).exp() + 0.03)
            .collect();
        let f = fit_exponential(&t, &y).unwrap();
        assert!(rel(f.decay_time(), 1.234) < 1e-6);
        assert!(rel(f.get("amplitude").unwrap(), 0.9) < 1e-6);
        assert!(rel(f.get("offset").unwrap(), 0.03) < 1e-6);
        assert!(f.converged && !f.degenerate);
    }

    #[test]
    fn damped_cosine_fit_exact() {
        let t = linspace(0.0, 2000.0, 150);
        let y: Vec<f64> = t
            .iter()
            .map(|&t| 0.4 * (-t / 900.0).exp() * (2.0 * PI * 0.00237 * t + 0.3).cos() + 0.5)
            .collect();
        let f = fit_damped_cosine(&t, &y).unwrap();
        assert!(rel(f.frequency().unwrap(), 2.37) < 1e-4);
        assert!(rel(f.decay_time(), 0.9) < 1e-4);
        assert!(!f.degenerate);
    }

    #[test]
    fn constant_trace_is_degenerate() {
        let t = linspace(0.0, 100.0, 20);
        let y = vec![0.25; 20];
        assert!(fit_damped_cosine(&t, &y).unwrap().degenerate);
        assert!(fit_exponential(&t, &y).unwrap().degenerate);
        assert!(fit_exponential(&t[..5], &y[..5]).is_err());
    }

    #[test]
    fn rabi_frequency_and_pi_pulse() {
        let setup = DriveSetup::default();
        let d = linspace(0.0, 400.0, 81);
        let r = rabi_experiment(&setup, &DecoherenceParams::coherent(), &d, 0.0).unwrap();
        assert!(rel(r.fit.frequency().unwrap(), 10.0) < 5e-3);
        let pi1 = r.pi_pulse().unwrap();
        let fast = DriveSetup {
            rabi_amplitude: 20.0,
            ..setup
        };
        let r2 = rabi_experiment(&fast, &DecoherenceParams::coherent(), &d, 0.0).unwrap();
        assert!(rel(r2.pi_pulse().unwrap(), pi1 / 2.0) < 1e-3);
        assert!(rabi_experiment(
            &setup,
            &DecoherenceParams::coherent(),
            &linspace(0.0, 150.0, 20),
            0.0
        )
        .is_err());
    }

    #[test]
    fn rabi_envelope_matches_fine_simulation() {
        let setup = DriveSetup::default();
        let dec = DecoherenceParams::new(6.63, f64::INFINITY).unwrap();
        let coarse = rabi_experiment(&setup, &dec, &linspace(0.0, 6000.0, 241), 0.0).unwrap();
        let fine = rabi_experiment(&setup, &dec, &linspace(0.0, 6000.0, 1201), 0.0).unwrap();
        assert!(rel(coarse.fit.decay_time(), fine.fit.decay_time()) < 0.05);
        // Strong-drive envelope: 4·T1/3.
        assert!(rel(fine.fit.decay_time(), 4.0 * 6.63 / 3.0) < 0.05);
    }

    #[test]
    fn t1_recovery() {
        let setup = DriveSetup::default();
        for t1 in [6.63, 1.0] {
            let dec = DecoherenceParams::new(t1, f64::INFINITY).unwrap();
            let delays = linspace(0.0, 4.0 * t1 * 1e3, 41);
            let r = t1_experiment(&setup, &dec, &delays).unwrap();
            assert!(rel(r.fit.decay_time(), t1) < 0.02);
            // No decay at zero delay beyond the pulse itself.
            let pulse_only =
                final_populations(2, 0.0, &dec, &PulseSequence::new().pulse(10.0, 0.0, 50.0))
                    .unwrap();
            assert!((r.trace.excited()[0] - pulse_only.0[1]).abs() < 1e-3);
        }
        let dec = DecoherenceParams::new(6.63, f64::INFINITY).unwrap();
        assert!(matches!(
            t1_experiment(&setup, &dec, &linspace(0.0, 5000.0, 20)),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn ramsey_recovery() {
        let setup = DriveSetup::default();
        let delays = linspace(0.0, 6000.0, 301);
        let dec = DecoherenceParams::new(f64::INFINITY, 2.17).unwrap();
        let r = ramsey_experiment(&setup, &dec, &delays, 1.0).unwrap();
        assert!(rel(r.fit.decay_time(), 2.17) < 0.02);
        assert!(rel(r.fit.frequency().unwrap(), 1.0) < 0.01);

        let lifetime = DecoherenceParams::new(6.63, f64::INFINITY).unwrap();
        let long = linspace(0.0, 30000.0, 601);
        let r = ramsey_experiment(&setup, &lifetime, &long, 1.0).unwrap();
        assert!(rel(r.fit.decay_time(), 2.0 * 6.63) < 0.05);

        let flat = ramsey_experiment(&setup, &dec, &delays, 0.0).unwrap();
        assert!(flat.fit.degenerate);
        assert!(ramsey_experiment(&setup, &dec, &delays, 0.2).is_err());
    }

    #[test]
    fn echo_recovery_and_refocusing() {
        let setup = DriveSetup::default();
        let delays = linspace(0.0, 9000.0, 91);
        let dec = DecoherenceParams::new(f64::INFINITY, 2.92).unwrap();
        let r = echo_experiment(&setup, &dec, &delays, 1.0).unwrap();
        assert_eq!(r.fit.kind, DecayKind::EchoExponential);
        assert!(rel(r.fit.decay_time(), 2.92) < 0.02);

        let refocused =
            echo_experiment(&setup, &DecoherenceParams::coherent(), &delays, 1.0).unwrap();
        assert!(refocused.trace.excited().iter().all(|p| p.abs() < 1e-6));

        let lifetime = DecoherenceParams::new(6.63, f64::INFINITY).unwrap();
        let r = echo_experiment(&setup, &lifetime, &linspace(0.0, 40000.0, 81), 0.0).unwrap();
        assert!(rel(r.fit.decay_time(), 2.0 * 6.63) < 0.05);
    }

    #[test]
    fn echo_matches_ramsey_under_white_noise() {
        let setup = DriveSetup::default();
        let dec = DecoherenceParams::default();
        let delays = linspace(0.0, 7000.0, 351);
        let ramsey = ramsey_experiment(&setup, &dec, &delays, 1.0).unwrap();
        let echo = echo_experiment(&setup, &dec, &delays, 1.0).unwrap();
        assert!(rel(echo.fit.decay_time(), ramsey.fit.decay_time()) < 0.03);
    }

    #[test]
    fn t2_relation_on_grid() {
        let setup = DriveSetup::default();
        for t1 in [3.0, 6.63, 12.0] {
            for t_phi in [1.5, 3.0, 6.0] {
                let dec = DecoherenceParams::new(t1, t_phi).unwrap();
                let span = 4.0 * dec.t2() * 1e3;
                let detuning = (8.0 / span * 1e3 * 1e3).round() / 1e3;
                let r =
                    ramsey_experiment(&setup, &dec, &linspace(0.0, span, 161), detuning).unwrap();
                let expected = 1.0 / (0.5 / t1 + 1.0 / t_phi);
                assert!(
                    rel(r.fit.decay_time(), expected) < 0.03,
                    "T1={t1} Tphi={t_phi}"
                );
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn trace_and_positivity_preserved(
            t1 in 0.2f64..20.0,
            t_phi in 0.2f64..20.0,
            omega in 1.0f64..40.0,
            detuning in -20.0f64..20.0,
            levels in 2usize..=3,
        ) {
            let dec = DecoherenceParams::new(t1, t_phi).unwrap();
            let seq = PulseSequence::new().pulse(omega, detuning, 40.0).delay(detuning, 200.0).pulse(omega, 0.0, 20.0);
            let opts = EvolveOptions { sample_interval: Some(10.0), ..EvolveOptions::default() };
            let tr = evolve_open_system(levels, -0.334, &dec, &seq, &opts).unwrap();
            prop_assert!(tr.max_trace_error <= 1e-9);
            for p in &tr.populations {
                prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
            }
        }
    }
}
