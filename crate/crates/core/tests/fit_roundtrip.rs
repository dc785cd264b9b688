use cqedlab_core::estimate::{
    fit_model, observations_from_lines, FitOptions, FitParameter, FitProblem, Observation,
};
use cqedlab_core::hilbert::SystemModel;
use cqedlab_core::spectra::{
    crossing_fluxes, linspace, synthesize_noisy_spectrum, two_tone_lines, FluxSweepConfig,
    RESONATOR_LINE,
};
use cqedlab_core::ModelTemplate;

fn truth() -> ModelTemplate {
    ModelTemplate::new(SystemModel {
        n_transmon: 4,
        n_photon: 4,
        ..SystemModel::default()
    })
}

fn observations(grid: Vec<f64>, noise: f64, seed: u64) -> Vec<Observation> {
    let lines = vec![
        RESONATOR_LINE,
        "g0-e0".parse().unwrap(),
        "e0-f0".parse().unwrap(),
    ];
    let clean = two_tone_lines(&truth(), &FluxSweepConfig::new(grid, lines)).unwrap();
    observations_from_lines(&synthesize_noisy_spectrum(&clean, noise, seed).unwrap()).unwrap()
}

/// Every free parameter 5% off (flux offset shifted by 0.01).
fn guess(free: &[FitParameter]) -> ModelTemplate {
    let mut g = truth();
    for (i, p) in free.iter().enumerate() {
        let v = p.get(&g);
        let moved = match p {
            FitParameter::FluxOffset => v + 0.01,
            _ if i % 2 == 0 => v * 1.05,
            _ => v * 0.95,
        };
        p.set(&mut g, moved);
    }
    g
}

#[test]
fn joint_flux_calibration_round_trip() {
    let all = FitParameter::ALL.to_vec();
    let obs = observations(linspace(-0.45, 0.45, 91), 0.0, 0);
    let problem = FitProblem::new(obs, guess(&all), all);
    let fit = fit_model(&problem, &FitOptions::default()).unwrap();
    assert!(fit.converged);
    assert!(fit.residual_rms < fit.initial_rms);
    for p in [
        FitParameter::EjSigma,
        FitParameter::ChargingEnergy,
        FitParameter::Coupling,
        FitParameter::ResonatorFrequency,
        FitParameter::FluxPeriod,
    ] {
        let rel = (fit.estimate(p).unwrap().value / p.get(&truth()) - 1.0).abs();
        assert!(rel < 5e-3, "{p}: {rel}");
    }
    assert!(fit.estimate(FitParameter::FluxOffset).unwrap().value.abs() < 1e-3);
}

#[test]
fn noisy_round_trip_within_two_percent() {
    let four = vec![
        FitParameter::EjSigma,
        FitParameter::ChargingEnergy,
        FitParameter::Coupling,
        FitParameter::ResonatorFrequency,
    ];
    for seed in [11, 12] {
        let obs = observations(linspace(-0.45, 0.45, 181), 1e-3, seed);
        let fit = fit_model(
            &FitProblem::new(obs, guess(&four), four.clone()),
            &FitOptions::default(),
        )
        .unwrap();
        assert!(fit.converged);
        // Noise-limited residual.
        assert!((fit.residual_rms - 1.0).abs() < 0.1, "{}", fit.residual_rms);
        for e in &fit.estimates {
            let rel = (e.value / e.parameter.get(&truth()) - 1.0).abs();
            assert!(rel < 0.02, "seed {seed} {}: {rel}", e.parameter);
        }
    }
}

/// A coarse scan plus dense scans across both anticrossings: dropping the
/// points with |Δ_ge| < 3g leaves g to the dispersive shifts alone.
#[test]
fn coupling_uncertainty_grows_without_crossing_points() {
    let mut grid = linspace(-0.45, 0.45, 91);
    for c in crossing_fluxes(&truth().model) {
        grid.extend(linspace(c - 0.009, c + 0.009, 301));
    }
    grid.sort_by(f64::total_cmp);
    let obs = observations(grid, 1e-3, 7);
    let near = |o: &Observation| {
        let m = truth().at(o.flux);
        (m.f_ge().unwrap() - m.f_r).abs() < 3.0 * m.g()
    };
    let far: Vec<Observation> = obs.iter().filter(|o| !near(o)).copied().collect();
    assert!(far.len() < obs.len());
    let free = vec![
        FitParameter::EjSigma,
        FitParameter::ChargingEnergy,
        FitParameter::Coupling,
        FitParameter::ResonatorFrequency,
    ];
    let sigma_g = |o: Vec<Observation>| {
        let fit = fit_model(
            &FitProblem::new(o, guess(&free), free.clone()),
            &FitOptions::default(),
        )
        .unwrap();
        fit.estimate(FitParameter::Coupling).unwrap().uncertainty
    };
    let full = sigma_g(obs);
    let reduced = sigma_g(far);
    assert!(reduced >= 3.0 * full, "σ_g {full} -> {reduced}");
}
