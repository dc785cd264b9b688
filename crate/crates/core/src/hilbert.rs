//! Truncated transmon-resonator Hamiltonian in the bare product basis
//! `|t, n⟩` (transmon level `t`, photon number `n`), its diagonalization,
//! overlap labeling of dressed states and the spectroscopic quantities read
//! off the dressed energies.
//!
//! Energies are `E/h` in GHz. The transmon is a Duffing oscillator with
//! anharmonicity `α = −E_C` and the coupling is the excitation-conserving
//! `g(a†b + ab†)`; the resonator zero-point offset is dropped.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::circuit::{flux_tuned_ej, transmon_freq};
use crate::constants::{ghz_to_mhz, mhz_to_ghz};
use crate::error::{Error, Result};

/// Overlap at or below which a dressed state counts as hybridized.
pub const DEGENERACY_THRESHOLD: f64 = 0.5 + 1e-6;

pub const MIN_TRANSMON_LEVELS: usize = 4;
pub const MIN_PHOTON_STATES: usize = 3;
/// Photon states kept above the highest Stark-shift photon number.
pub const STARK_MARGIN: usize = 2;

/// Bare product state `|t, n⟩`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Label {
    pub transmon: usize,
    pub photon: usize,
}

impl Label {
    pub const fn new(transmon: usize, photon: usize) -> Self {
        Self { transmon, photon }
    }

    pub fn excitations(&self) -> usize {
        self.transmon + self.photon
    }
}

const LEVEL_NAMES: [char; 4] = ['g', 'e', 'f', 'h'];

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match LEVEL_NAMES.get(self.transmon) {
            Some(c) => write!(f, "{c}{}", self.photon),
            None => write!(f, "t{}_{}", self.transmon, self.photon),
        }
    }
}

impl FromStr for Label {
    type Err = Error;

    /// Parses `g0`, `e1`, `f2`, `h0`, or `t5_3` for levels above `h`.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Domain(format!("invalid state label '{s}'"));
        let mut chars = s.chars();
        let head = chars.next().ok_or_else(bad)?;
        let rest = chars.as_str();
        if head == 't' {
            let (t, n) = rest.split_once('_').ok_or_else(bad)?;
            return Ok(Label::new(
                t.parse().map_err(|_| bad())?,
                n.parse().map_err(|_| bad())?,
            ));
        }
        let transmon = LEVEL_NAMES
            .iter()
            .position(|&c| c == head)
            .ok_or_else(bad)?;
        let photon = rest.parse().map_err(|_| bad())?;
        Ok(Label::new(transmon, photon))
    }
}

/// Parameters and truncation of the coupled system at one flux point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SystemModel {
    /// Bare resonator frequency, GHz.
    pub f_r: f64,
    /// SQUID Josephson energy at zero flux, h·GHz.
    pub ej_sigma: f64,
    /// Charging energy, h·GHz.
    pub e_c: f64,
    /// g/2π, MHz.
    pub g_over_2pi: f64,
    /// Φ_e/Φ_0.
    pub phi_ratio: f64,
    pub n_transmon: usize,
    pub n_photon: usize,
}

impl Default for SystemModel {
    fn default() -> Self {
        Self {
            f_r: 4.639,
            ej_sigma: 11.4,
            e_c: 0.334,
            g_over_2pi: 15.0,
            phi_ratio: 0.0,
            n_transmon: 6,
            n_photon: 12,
        }
    }
}

impl SystemModel {
    pub fn validate(&self) -> Result<()> {
        if self.n_transmon < MIN_TRANSMON_LEVELS {
            return Err(Error::Config(format!(
                "n_transmon = {} is below the minimum of {MIN_TRANSMON_LEVELS}",
                self.n_transmon
            )));
        }
        if self.n_photon < MIN_PHOTON_STATES {
            return Err(Error::Config(format!(
                "n_photon = {} is below the minimum of {MIN_PHOTON_STATES}",
                self.n_photon
            )));
        }
        for (name, v) in [
            ("f_r", self.f_r),
            ("EJ_sigma", self.ej_sigma),
            ("E_C", self.e_c),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Domain(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.g_over_2pi >= 0.0 && self.g_over_2pi.is_finite()) {
            return Err(Error::Domain(format!(
                "g must be nonnegative, got {}",
                self.g_over_2pi
            )));
        }
        if !self.phi_ratio.is_finite() {
            return Err(Error::Domain("flux must be finite".into()));
        }
        Ok(())
    }

    pub fn with_phi(mut self, phi_ratio: f64) -> Self {
        self.phi_ratio = phi_ratio;
        self
    }

    pub fn dimension(&self) -> usize {
        self.n_transmon * self.n_photon
    }

    pub fn e_j(&self) -> f64 {
        flux_tuned_ej(self.ej_sigma, self.phi_ratio)
    }

    /// ω_ge/2π, GHz.
    pub fn f_ge(&self) -> Result<f64> {
        transmon_freq(self.e_j(), self.e_c)
    }

    /// α/2π = −E_C, GHz.
    pub fn alpha(&self) -> f64 {
        -self.e_c
    }

    /// ω_ef/2π, GHz.
    pub fn f_ef(&self) -> Result<f64> {
        Ok(self.f_ge()? + self.alpha())
    }

    /// Δ_ge = ω_r − ω_ge, GHz.
    pub fn delta_ge(&self) -> Result<f64> {
        Ok(self.f_r - self.f_ge()?)
    }

    /// Δ_ef = ω_r − ω_ef, GHz.
    pub fn delta_ef(&self) -> Result<f64> {
        Ok(self.f_r - self.f_ef()?)
    }

    /// g/2π, GHz.
    pub fn g(&self) -> f64 {
        mhz_to_ghz(self.g_over_2pi)
    }

    pub fn index(&self, label: Label) -> usize {
        label.transmon * self.n_photon + label.photon
    }

    /// Uncoupled energy of `|t, n⟩`, GHz.
    pub fn bare_energy(&self, label: Label) -> Result<f64> {
        let m = label.transmon as f64;
        let n = label.photon as f64;
        Ok(n * self.f_r + m * self.f_ge()? + 0.5 * self.alpha() * m * (m - 1.0))
    }
}

/// H = ω_r a†a + ω_ge b†b + (α/2) b†b†bb + g(a†b + ab†) in the `|t, n⟩`
/// basis with index `t·n_photon + n`.
pub fn build_hamiltonian(model: &SystemModel) -> Result<DMatrix<f64>> {
    model.validate()?;
    let f_ge = model.f_ge()?;
    let alpha = model.alpha();
    let g = model.g();
    let (nt, np) = (model.n_transmon, model.n_photon);
    let mut h = DMatrix::zeros(nt * np, nt * np);
    for t in 0..nt {
        let m = t as f64;
        for n in 0..np {
            let i = t * np + n;
            h[(i, i)] = n as f64 * model.f_r + m * f_ge + 0.5 * alpha * m * (m - 1.0);
            // a b†: |t, n⟩ → √(t+1)√n |t+1, n−1⟩
            if t + 1 < nt && n >= 1 {
                let j = (t + 1) * np + (n - 1);
                let v = g * ((t + 1) as f64).sqrt() * (n as f64).sqrt();
                h[(i, j)] = v;
                h[(j, i)] = v;
            }
        }
    }
    Ok(h)
}

/// Eigendecomposition with ascending eigenvalues.
#[derive(Debug, Clone)]
pub struct Eigen {
    pub energies: Vec<f64>,
    /// Column `k` is the eigenvector of `energies[k]`.
    pub vectors: DMatrix<f64>,
    /// Diagonal of the decomposed matrix (bare energies).
    pub diagonal: Vec<f64>,
}

/// Full eigendecomposition of a real symmetric matrix.
pub fn diagonalize(h: &DMatrix<f64>) -> Result<Eigen> {
    let dim = h.nrows();
    if dim != h.ncols() {
        return Err(Error::Numeric(format!(
            "matrix is not square ({}x{})",
            dim,
            h.ncols()
        )));
    }
    let diagonal: Vec<f64> = h.diagonal().iter().copied().collect();
    let eig = SymmetricEigen::try_new(h.clone(), f64::EPSILON, 10_000).ok_or_else(|| {
        Error::Numeric(format!(
            "symmetric eigensolver failed to converge for dimension {dim}"
        ))
    })?;
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| {
        eig.eigenvalues[a]
            .total_cmp(&eig.eigenvalues[b])
            .then(a.cmp(&b))
    });
    let energies = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    Ok(Eigen {
        energies,
        vectors,
        diagonal,
    })
}

/// Dressed spectrum with each eigenstate labeled by its dominant bare state.
#[derive(Debug, Clone)]
pub struct EigenSolution {
    pub energies: Vec<f64>,
    pub labels: Vec<Label>,
    /// |⟨label|ψ⟩|² of each eigenstate with its assigned bare state.
    pub overlap_quality: Vec<f64>,
    pub vectors: DMatrix<f64>,
    pub n_transmon: usize,
    pub n_photon: usize,
    /// Eigenstate index for each bare basis index.
    by_label: Vec<usize>,
}

/// Greedy labeling in ascending-energy order: each column of `vectors` takes
/// the unused row with the largest |overlap|², ties going to the lower
/// diagonal entry. Returns (row, weight) per column.
fn greedy_labels(vectors: &DMatrix<f64>, diagonal: &[f64]) -> Vec<(usize, f64)> {
    let dim = diagonal.len();
    let mut used = vec![false; dim];
    let mut out = Vec::with_capacity(dim);
    for k in 0..vectors.ncols() {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..dim).filter(|&j| !used[j]) {
            let w = vectors[(j, k)].powi(2);
            best = match best {
                None => Some((j, w)),
                Some((bj, bw)) => {
                    let tie = (w - bw).abs() <= 1e-12;
                    let lower = diagonal[j] < diagonal[bj];
                    if w > bw + 1e-12 || (tie && lower) {
                        Some((j, w))
                    } else {
                        Some((bj, bw))
                    }
                }
            };
        }
        let (j, w) = best.expect("unused bare state available");
        used[j] = true;
        out.push((j, w));
    }
    out
}

/// Assigns bare labels greedily in ascending-energy order: each eigenstate
/// takes the unused bare state with the largest |overlap|², ties going to the
/// lower bare energy.
pub fn label_states(eigen: &Eigen, n_transmon: usize, n_photon: usize) -> EigenSolution {
    let dim = eigen.energies.len();
    debug_assert_eq!(dim, n_transmon * n_photon);
    let mut by_label = vec![0; dim];
    let mut labels = Vec::with_capacity(dim);
    let mut quality = Vec::with_capacity(dim);
    for (k, (j, w)) in greedy_labels(&eigen.vectors, &eigen.diagonal)
        .into_iter()
        .enumerate()
    {
        by_label[j] = k;
        labels.push(Label::new(j / n_photon, j % n_photon));
        quality.push(w);
    }
    EigenSolution {
        energies: eigen.energies.clone(),
        labels,
        overlap_quality: quality,
        vectors: eigen.vectors.clone(),
        n_transmon,
        n_photon,
        by_label,
    }
}

/// Builds, diagonalizes and labels the model.
///
/// The Hamiltonian conserves t + n, so each excitation manifold is solved on
/// its own; eigenvectors have no weight outside their manifold, which makes
/// the labels identical to labeling the full decomposition.
pub fn solve(model: &SystemModel) -> Result<EigenSolution> {
    let h = build_hamiltonian(model)?;
    let (nt, np) = (model.n_transmon, model.n_photon);
    let dim = nt * np;
    // (energy, bare index, block basis, block eigenvector, weight)
    let mut states: Vec<(f64, usize, Vec<f64>, usize, f64)> = Vec::with_capacity(dim);
    let mut blocks: Vec<Vec<usize>> = Vec::new();
    for total in 0..(nt + np - 1) {
        let basis: Vec<usize> = (0..nt)
            .filter(|&t| total >= t && total - t < np)
            .map(|t| t * np + (total - t))
            .collect();
        let sub = DMatrix::from_fn(basis.len(), basis.len(), |r, c| h[(basis[r], basis[c])]);
        let eig = diagonalize(&sub)?;
        for (k, (j, w)) in greedy_labels(&eig.vectors, &eig.diagonal)
            .into_iter()
            .enumerate()
        {
            let column = eig.vectors.column(k).iter().copied().collect();
            states.push((eig.energies[k], basis[j], column, blocks.len(), w));
        }
        blocks.push(basis);
    }
    states.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut vectors = DMatrix::zeros(dim, dim);
    let mut by_label = vec![0; dim];
    let mut energies = Vec::with_capacity(dim);
    let mut labels = Vec::with_capacity(dim);
    let mut quality = Vec::with_capacity(dim);
    for (k, (e, j, column, block, w)) in states.into_iter().enumerate() {
        for (&row, v) in blocks[block].iter().zip(&column) {
            vectors[(row, k)] = *v;
        }
        by_label[j] = k;
        energies.push(e);
        labels.push(Label::new(j / np, j % np));
        quality.push(w);
    }
    Ok(EigenSolution {
        energies,
        labels,
        overlap_quality: quality,
        vectors,
        n_transmon: nt,
        n_photon: np,
        by_label,
    })
}

impl EigenSolution {
    fn basis_index(&self, label: Label) -> Result<usize> {
        if label.transmon < self.n_transmon && label.photon < self.n_photon {
            Ok(label.transmon * self.n_photon + label.photon)
        } else {
            Err(Error::Lookup(label.to_string()))
        }
    }

    /// Index of the eigenstate carrying `label`.
    pub fn state_index(&self, label: Label) -> Result<usize> {
        Ok(self.by_label[self.basis_index(label)?])
    }

    pub fn energy(&self, label: Label) -> Result<f64> {
        Ok(self.energies[self.state_index(label)?])
    }

    pub fn quality(&self, label: Label) -> Result<f64> {
        Ok(self.overlap_quality[self.state_index(label)?])
    }

    /// Whether the state labeled `label` is hybridized past the threshold.
    pub fn is_flagged(&self, label: Label) -> Result<bool> {
        Ok(self.quality(label)? <= DEGENERACY_THRESHOLD)
    }

    /// |⟨bare|ψ_k⟩|² for eigenstate `k`.
    pub fn bare_weight(&self, k: usize, bare: Label) -> Result<f64> {
        Ok(self.vectors[(self.basis_index(bare)?, k)].powi(2))
    }

    /// Eigenstates spanning the manifold with `excitations` quanta.
    pub fn manifold(&self, excitations: usize) -> Vec<usize> {
        (0..self.energies.len())
            .filter(|&k| self.labels[k].excitations() == excitations)
            .collect()
    }
}

/// One line of a [`TransitionTable`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransitionLine {
    pub from: Label,
    pub to: Label,
    /// |E(to) − E(from)|, GHz.
    pub frequency: f64,
    /// True when E(to) < E(from) and the pair was swapped.
    pub swapped: bool,
    /// Transmon quanta exchanged, or photons for a pure resonator line.
    pub photon_order: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TransitionTable {
    pub entries: Vec<TransitionLine>,
}

/// Drive-photon order assigned to a transition between two bare labels.
pub fn photon_order(from: Label, to: Label) -> usize {
    let dt = from.transmon.abs_diff(to.transmon);
    if dt > 0 {
        dt
    } else {
        from.photon.abs_diff(to.photon).max(1)
    }
}

/// E(to) − E(from), reported as a positive frequency.
pub fn transition_frequency(sol: &EigenSolution, from: Label, to: Label) -> Result<TransitionLine> {
    let diff = sol.energy(to)? - sol.energy(from)?;
    Ok(TransitionLine {
        from,
        to,
        frequency: diff.abs(),
        swapped: diff < 0.0,
        photon_order: photon_order(from, to),
    })
}

/// Bare weight above which an eigenstate counts as a candidate for a label
/// when matching observed lines.
pub const HYBRID_WEIGHT: f64 = 0.25;

/// |E(to) − E(from)| closest to `observed`, where each endpoint may be any
/// eigenstate with at least [`HYBRID_WEIGHT`] on its bare label. Away from
/// anticrossings this is the labeled transition; across one it keeps the
/// match continuous while the greedy labels swap.
pub fn nearest_hybrid_frequency(
    sol: &EigenSolution,
    from: Label,
    to: Label,
    observed: f64,
) -> Result<f64> {
    let candidates = |label: Label| -> Result<Vec<usize>> {
        let own = sol.state_index(label)?;
        let mut out = vec![own];
        for k in sol.manifold(label.excitations()) {
            if k != own && sol.bare_weight(k, label)? >= HYBRID_WEIGHT {
                out.push(k);
            }
        }
        Ok(out)
    };
    let (lo, hi) = (candidates(from)?, candidates(to)?);
    let mut best = f64::NAN;
    for &i in &lo {
        for &j in &hi {
            let f = (sol.energies[j] - sol.energies[i]).abs();
            if best.is_nan() || (f - observed).abs() < (best - observed).abs() {
                best = f;
            }
        }
    }
    Ok(best)
}

/// Dressed resonator frequency E(t,1) − E(t,0) with the transmon in `t`.
pub fn dressed_resonator_freq(sol: &EigenSolution, transmon_state: usize) -> Result<f64> {
    Ok(sol.energy(Label::new(transmon_state, 1))? - sol.energy(Label::new(transmon_state, 0))?)
}

/// χ = ½[f_r(e) − f_r(g)] in MHz from the dressed spectrum.
pub fn dispersive_shift_exact(sol: &EigenSolution) -> Result<f64> {
    for label in [
        Label::new(0, 0),
        Label::new(0, 1),
        Label::new(1, 0),
        Label::new(1, 1),
    ] {
        if sol.is_flagged(label)? {
            return Err(Error::Regime(format!(
                "state {label} is hybridized (overlap {:.6}); dispersive approximation broken",
                sol.quality(label)?
            )));
        }
    }
    let shift = dressed_resonator_freq(sol, 1)? - dressed_resonator_freq(sol, 0)?;
    Ok(ghz_to_mhz(0.5 * shift))
}

/// χ = g²α/(Δ_ge Δ_ef). All arguments and the result share one unit.
pub fn dispersive_shift_perturbative(
    g: f64,
    alpha: f64,
    delta_ge: f64,
    delta_ef: f64,
) -> Result<f64> {
    if delta_ge == 0.0 || delta_ef == 0.0 {
        return Err(Error::Pole(format!(
            "dispersive shift diverges at Δ_ge = {delta_ge}, Δ_ef = {delta_ef}"
        )));
    }
    Ok(g * g * alpha / (delta_ge * delta_ef))
}

/// Qubit line E(e,n) − E(g,n) with `n` photons in the resonator, GHz.
pub fn stark_shifted_transition(sol: &EigenSolution, n: usize) -> Result<f64> {
    if sol.n_photon < n + STARK_MARGIN + 1 {
        return Err(Error::Config(format!(
            "Stark line at n = {n} needs n_photon >= {}, have {}",
            n + STARK_MARGIN + 1,
            sol.n_photon
        )));
    }
    Ok(sol.energy(Label::new(1, n))? - sol.energy(Label::new(0, n))?)
}

/// |E(e,0) − E(g,1)|, the splitting of the one-excitation doublet, GHz.
pub fn one_excitation_splitting(sol: &EigenSolution) -> Result<f64> {
    Ok((sol.energy(Label::new(1, 0))? - sol.energy(Label::new(0, 1))?).abs())
}
