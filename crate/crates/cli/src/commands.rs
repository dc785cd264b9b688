use std::fmt::Write as _;
use std::path::Path;

use cqedlab_core::circuit::{
    derive, in_transmon_regime, kappa_from_q, purcell_limit, purcell_regime_ok, table1,
};
use cqedlab_core::dataset::DatasetKind;
use cqedlab_core::dynamics::{
    echo_experiment, rabi_experiment, ramsey_experiment, t1_experiment, ExperimentKind,
};
use cqedlab_core::estimate::{
    assign_transitions, extract_peaks, fit_model, observations_from_lines, FitParameter,
    FitProblem, PeakOptions,
};
use cqedlab_core::output::{
    atomic_write, report_csv, report_text, svg_line_plot, ReportRow, Series,
};
use cqedlab_core::spectra::{
    chi_sign_change_fluxes, crossing_fluxes, linspace, locate_stark_crossing,
    min_one_excitation_splitting, single_tone_map, stark_line_id, synthesize_noisy_spectrum,
    two_tone_lines, FluxSweepConfig,
};
use cqedlab_core::{Config, Error, ModelTemplate, Result, SpectrumData, SpectrumDataset};

use crate::Outcome;

pub enum Action {
    Params { table1: bool },
    Sweep,
    Fit,
    Dynamics,
}

pub fn execute(action: &Action, cfg: &Config, out: &Path) -> Result<Outcome> {
    match action {
        Action::Params { table1 } => params(cfg, out, *table1),
        Action::Sweep => sweep(cfg, out),
        Action::Fit => fit(cfg, out),
        Action::Dynamics => dynamics(cfg, out),
    }
}

fn write(out: &Path, name: &str, contents: &str) -> Result<()> {
    atomic_write(&out.join(name), contents.as_bytes())
}

fn params(cfg: &Config, out: &Path, with_table: bool) -> Result<Outcome> {
    let circuit = cfg.circuit()?;
    let tpl = cfg.template()?;
    let derived = derive(
        &circuit,
        cfg.number("circuit", "f_r"),
        cfg.number("circuit", "f_ge"),
    )?;
    let model = tpl.at(0.0);
    let f_ge = model.f_ge()?;
    let kappa = kappa_from_q(model.f_r, cfg.number("circuit", "q_loaded"))?;
    let detuning = model.delta_ge()? * 1e3;
    let purcell = purcell_limit(model.g_over_2pi, detuning.abs(), kappa)?;
    let rows = vec![
        ReportRow::new("c_sigma", circuit.c_sigma(), "fF"),
        ReportRow::new("e_c_from_capacitance", derived.e_c, "GHz"),
        ReportRow::new("alpha_from_capacitance", -derived.e_c * 1e3, "MHz"),
        ReportRow::new("f_r_lc", derived.f_r_lc, "GHz"),
        ReportRow::new("v_rms", derived.v_rms, "uV"),
        ReportRow::new("v_t", derived.v_t, "uV"),
        ReportRow::new("g_over_2pi", derived.g_over_2pi, "MHz"),
        ReportRow::new("f_ge", f_ge, "GHz"),
        ReportRow::new("alpha", model.alpha() * 1e3, "MHz"),
        ReportRow::new("ej_over_ec", model.e_j() / model.e_c, ""),
        ReportRow::new(
            "transmon_regime",
            f64::from(u8::from(in_transmon_regime(model.e_j(), model.e_c))),
            "",
        ),
        ReportRow::new("delta_ge", detuning, "MHz"),
        ReportRow::new("kappa_over_2pi", kappa, "MHz"),
        ReportRow::new("purcell_t1", purcell, "us"),
        ReportRow::new(
            "purcell_regime_ok",
            f64::from(u8::from(purcell_regime_ok(model.g_over_2pi, detuning))),
            "",
        ),
    ];
    write(out, "params.csv", &report_csv(&rows))?;
    print!("{}", report_text("derived parameters", &rows));
    if with_table {
        let mut csv =
            String::from("label,f_r_ghz,area_side_um,c_ppc_pf,c_computed_pf,deviation_percent\n");
        for r in table1(circuit.c_specific)? {
            let _ = writeln!(
                csv,
                "{},{},{},{},{},{}",
                r.entry.label,
                r.entry.f_r,
                r.entry.area_side,
                r.entry.c_ppc,
                r.c_computed,
                r.deviation_percent
            );
        }
        write(out, "table1.csv", &csv)?;
        print!("{csv}");
    }
    Ok(Outcome::Done)
}

/// Control values inside [lo, hi] for normalized fluxes `phis` (mod 1).
fn controls_in_range(tpl: &ModelTemplate, phis: &[f64], lo: f64, hi: f64) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::new();
    let span = (hi - lo).abs() / tpl.flux_period.abs();
    let reach = span.ceil() as i64 + 2;
    for &phi in phis {
        for k in -reach..=reach {
            let c = tpl.control_for_phi(phi + k as f64);
            if c >= lo && c <= hi {
                out.push(c);
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    out
}

fn lines_csv(ds: &SpectrumDataset, id: &str) -> Option<String> {
    let line = ds.line(id)?;
    let mut csv = String::from("flux,frequency\n");
    for (x, v) in ds.flux.iter().zip(&line.values) {
        match v {
            Some(f) => writeln!(csv, "{x},{f}"),
            None => writeln!(csv, "{x},"),
        }
        .ok()?;
    }
    Some(csv)
}

fn sweep(cfg: &Config, out: &Path) -> Result<Outcome> {
    let tpl = cfg.template()?;
    let (lo, hi) = (
        cfg.number("sweep", "flux_min"),
        cfg.number("sweep", "flux_max"),
    );
    let points = cfg.integer("sweep", "flux_points").unwrap_or(0) as usize;
    if points < 3 || lo.is_nan() || hi.is_nan() || lo >= hi {
        return Err(Error::Config(
            "sweep needs flux_min < flux_max and at least 3 points".into(),
        ));
    }
    let grid = linspace(lo, hi, points);
    let mut sweep_cfg =
        FluxSweepConfig::new(grid.clone(), cfg.transitions("sweep", "transitions")?);
    sweep_cfg.stark_photon_numbers = cfg.stark_photons()?;
    sweep_cfg.validate(&tpl.model)?;
    let seed = cfg.seed();

    let clean = two_tone_lines(&tpl, &sweep_cfg)?;
    let lines = synthesize_noisy_spectrum(&clean, cfg.number("sweep", "noise"), seed)?;
    lines.write(&out.join("spectrum"))?;
    for t in &sweep_cfg.transitions {
        let id = t.to_string();
        if let Some(csv) = lines_csv(&lines, &id) {
            write(out, &format!("line_{id}.csv"), &csv)?;
        }
    }
    for &n in &sweep_cfg.stark_photon_numbers {
        let id = stark_line_id(n);
        if let Some(csv) = lines_csv(&lines, &id) {
            write(out, &format!("{id}.csv"), &csv)?;
        }
    }

    if cfg.flag("sweep", "single_tone") {
        let probe_points = cfg.integer("sweep", "probe_points").unwrap_or(0) as usize;
        let mut map_cfg = sweep_cfg.clone();
        map_cfg.stark_photon_numbers.clear();
        map_cfg.probe_grid = Some(linspace(
            cfg.number("sweep", "probe_min"),
            cfg.number("sweep", "probe_max"),
            probe_points,
        ));
        let mut map = single_tone_map(&tpl, &map_cfg, &cfg.lineshape()?)?;
        map.metadata.stream = 1;
        let noisy = synthesize_noisy_spectrum(&map, cfg.number("sweep", "s21_noise"), seed)?;
        noisy.write(&out.join("single_tone"))?;
    }

    let mut rows = Vec::new();
    let split = min_one_excitation_splitting(&tpl, &grid)?;
    rows.push(ReportRow::new(
        "min_splitting",
        split.splitting * 1e3,
        "MHz",
    ));
    rows.push(ReportRow::new(
        "min_splitting_over_2g",
        split.splitting * 1e3 / (2.0 * tpl.model.g_over_2pi),
        "",
    ));
    rows.push(ReportRow::new("min_splitting_flux", split.control, ""));
    for (i, c) in controls_in_range(&tpl, &crossing_fluxes(&tpl.model), lo, hi)
        .iter()
        .enumerate()
    {
        rows.push(ReportRow::new(format!("crossing_flux_{i}"), *c, ""));
    }
    let chi_flux = controls_in_range(&tpl, &chi_sign_change_fluxes(&tpl.model), lo, hi);
    for (i, c) in chi_flux.iter().enumerate() {
        rows.push(ReportRow::new(format!("chi_sign_change_flux_{i}"), *c, ""));
    }
    let starks = &sweep_cfg.stark_photon_numbers;
    if starks.contains(&0) && starks.contains(&2) {
        let step = (hi - lo) / (points - 1) as f64;
        for (i, &c) in chi_flux.iter().enumerate() {
            if let Ok(x) = locate_stark_crossing(
                &tpl,
                0,
                2,
                (c - 2.0 * step).max(lo),
                (c + 2.0 * step).min(hi),
            ) {
                rows.push(ReportRow::new(
                    format!("stark_n0_n2_crossing_flux_{i}"),
                    x,
                    "",
                ));
            }
        }
    }
    let summary = report_text("sweep summary", &rows);
    write(out, "summary.txt", &summary)?;
    print!("{summary}");
    Ok(Outcome::Done)
}

fn fit(cfg: &Config, out: &Path) -> Result<Outcome> {
    let data = cfg.text("fit", "data");
    if data.is_empty() {
        return Err(Error::Io(
            "no dataset given (use --data or fit.data)".into(),
        ));
    }
    let ds = SpectrumDataset::read(Path::new(data))?;
    let mut guess = cfg.template()?;
    guess.model.n_transmon = cfg.integer("fit", "n_transmon").unwrap_or(4) as usize;
    guess.model.n_photon = cfg.integer("fit", "n_photon").unwrap_or(4) as usize;
    let free = cfg.free_parameters()?;

    let mut problem = match ds.data {
        SpectrumData::Lines { .. } => {
            let obs = observations_from_lines(&ds)?;
            FitProblem::new(obs, guess, free)
        }
        SpectrumData::Map { .. } => {
            let opts = PeakOptions {
                k: cfg.number("fit", "peak_threshold"),
                polarity: None,
            };
            let peaks = extract_peaks(&ds, &opts)?;
            let hypotheses = match ds.metadata.kind {
                DatasetKind::SingleTone => vec![cqedlab_core::spectra::RESONATOR_LINE],
                _ => cfg.transitions("fit", "hypotheses")?,
            };
            assign_transitions(&peaks, &guess, &hypotheses, cfg.number("fit", "gate"), free)?
        }
    };
    // Keep every observed level inside an exactly represented manifold.
    let top = problem
        .observations
        .iter()
        .flat_map(|o| {
            [
                o.transition.from.excitations(),
                o.transition.to.excitations(),
            ]
        })
        .max()
        .unwrap_or(0);
    problem.initial.model.n_transmon = problem.initial.model.n_transmon.max(top + 2);
    problem.initial.model.n_photon = problem.initial.model.n_photon.max(top + 2);

    let result = fit_model(&problem, &cfg.fit_options())?;
    let mut rows = Vec::new();
    for e in &result.estimates {
        rows.push(ReportRow::new(
            e.parameter.name(),
            e.value,
            e.parameter.unit(),
        ));
        rows.push(ReportRow::new(
            format!("{}_uncertainty", e.parameter.name()),
            e.uncertainty,
            e.parameter.unit(),
        ));
    }
    for p in FitParameter::ALL {
        if !problem.free.contains(&p) {
            rows.push(ReportRow::new(
                format!("{}_fixed", p.name()),
                p.get(&result.template),
                p.unit(),
            ));
        }
    }
    rows.push(ReportRow::new("residual_rms", result.residual_rms, "MHz"));
    rows.push(ReportRow::new("initial_rms", result.initial_rms, "MHz"));
    rows.push(ReportRow::new(
        "observations",
        problem.observations.len() as f64,
        "",
    ));
    rows.push(ReportRow::new(
        "unassigned_peaks",
        problem.unassigned.len() as f64,
        "",
    ));
    rows.push(ReportRow::new("evaluations", result.evaluations as f64, ""));
    rows.push(ReportRow::new("iterations", result.iterations as f64, ""));
    rows.push(ReportRow::new(
        "converged",
        f64::from(u8::from(result.converged)),
        "",
    ));
    let report = report_text("spectrum fit", &rows);
    write(out, "fit_report.txt", &report)?;

    let mut csv = String::from("flux,observed,predicted,residual,transition_id\n");
    for r in &result.residuals {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.flux,
            r.observed,
            r.predicted,
            r.residual * 1e3,
            r.transition
        );
    }
    write(out, "fit_residuals.csv", &csv)?;
    print!("{report}");
    Ok(if result.converged {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}

fn dynamics(cfg: &Config, out: &Path) -> Result<Outcome> {
    let kind = cfg.experiment()?;
    let setup = cfg.drive();
    let dec = cfg.decoherence()?;
    let detuning = cfg.number("dynamics", "detuning") * 1e3;
    let points = cfg.integer("dynamics", "points").unwrap_or(0) as usize;
    let max_time = if cfg.is_auto("dynamics", "max_time") {
        match kind {
            ExperimentKind::Rabi => 5e3 / setup.rabi_amplitude,
            ExperimentKind::T1 => 4e3 * dec.t1,
            ExperimentKind::Ramsey | ExperimentKind::Echo => 3e3 * dec.t2(),
        }
    } else {
        cfg.number("dynamics", "max_time")
    };
    if !max_time.is_finite() {
        return Err(Error::Config(format!(
            "{} span is unbounded for these lifetimes; set dynamics.max_time",
            kind.name()
        )));
    }
    let grid = linspace(0.0, max_time, points);
    let result = match kind {
        ExperimentKind::Rabi => rabi_experiment(&setup, &dec, &grid, 0.0)?,
        ExperimentKind::T1 => t1_experiment(&setup, &dec, &grid)?,
        ExperimentKind::Ramsey => ramsey_experiment(&setup, &dec, &grid, detuning)?,
        ExperimentKind::Echo => echo_experiment(&setup, &dec, &grid, detuning)?,
    };
    let name = kind.name();
    let levels = result.trace.levels();
    let mut csv = String::from(if levels == 3 {
        "time_ns,P_g,P_e,P_f\n"
    } else {
        "time_ns,P_g,P_e\n"
    });
    for (t, p) in result.trace.times.iter().zip(&result.trace.populations) {
        let cells: Vec<String> = p.iter().map(f64::to_string).collect();
        let _ = writeln!(csv, "{t},{}", cells.join(","));
    }
    write(out, &format!("{name}_trace.csv"), &csv)?;

    let fit = &result.fit;
    let mut rows: Vec<ReportRow> = Vec::new();
    for p in &fit.parameters {
        let unit = match p.name.as_str() {
            "decay_time" => "us",
            "frequency" => "MHz",
            "phase" => "rad",
            _ => "",
        };
        rows.push(ReportRow::new(p.name.clone(), p.value, unit));
        rows.push(ReportRow::new(
            format!("{}_uncertainty", p.name),
            p.uncertainty,
            unit,
        ));
    }
    if let Some(pi) = result.pi_pulse().filter(|_| kind == ExperimentKind::Rabi) {
        rows.push(ReportRow::new("pi_pulse", pi, "ns"));
    }
    rows.push(ReportRow::new("configured_t1", dec.t1, "us"));
    rows.push(ReportRow::new("configured_t2", dec.t2(), "us"));
    rows.push(ReportRow::new("configured_t_phi", dec.t_phi, "us"));
    rows.push(ReportRow::new("residual_rms", fit.residual_rms, ""));
    rows.push(ReportRow::new(
        "max_trace_error",
        result.trace.max_trace_error,
        "",
    ));
    rows.push(ReportRow::new(
        "converged",
        f64::from(u8::from(fit.converged)),
        "",
    ));
    rows.push(ReportRow::new(
        "degenerate",
        f64::from(u8::from(fit.degenerate)),
        "",
    ));
    let report = report_text(&format!("{name} fit"), &rows);
    write(out, &format!("{name}_fit.txt"), &report)?;

    if cfg.flag("dynamics", "plot") {
        let pe: Vec<(f64, f64)> = result
            .trace
            .times
            .iter()
            .copied()
            .zip(result.trace.excited())
            .collect();
        let series = [Series {
            name: "P_e",
            points: &pe,
        }];
        let svg = svg_line_plot(&format!("{name} experiment"), "time (ns)", "P_e", &series);
        write(out, &format!("{name}_trace.svg"), &svg)?;
    }
    print!("{report}");
    Ok(if fit.converged && !fit.degenerate {
        Outcome::Done
    } else {
        Outcome::NotConverged
    })
}
