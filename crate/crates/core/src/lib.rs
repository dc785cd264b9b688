//! Simulation and parameter estimation for a flux-tunable transmon coupled to
//! a lumped-element readout resonator.
//!
//! * [`circuit`]: circuit energies and coupling from lumped-element values.
//! * [`hilbert`]: coupled Hamiltonian, dressed states and dispersive shifts.
//! * [`spectra`]: flux sweeps, S21 maps and synthetic spectroscopy data.
//! * [`estimate`]: peak extraction and spectrum fitting.
//! * [`dynamics`]: master-equation simulation of Rabi, T1, Ramsey and echo.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod circuit;
pub mod config;
pub mod constants;
pub mod dataset;
pub mod dynamics;
pub mod error;
pub mod estimate;
pub mod hilbert;
pub mod optim;
pub mod output;
pub mod spectra;

pub use circuit::{CircuitParams, DerivedEnergies};
pub use config::Config;
pub use dataset::{SpectrumData, SpectrumDataset};
pub use dynamics::{DecayFit, DecoherenceParams, PopulationTrace, PulseSequence};
pub use error::{Error, Result};
pub use estimate::{FitProblem, FitResult, PeakList};
pub use hilbert::{EigenSolution, Label, SystemModel, TransitionTable};
pub use spectra::{FluxSweepConfig, LineshapeParams, ModelTemplate};
