//! `cqedlab`: circuit parameters, flux-sweep spectra, spectrum fitting and
//! time-domain simulations of a transmon coupled to a readout resonator.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cqedlab_core::{Config, Error};

#[derive(Parser)]
#[command(
    name = "cqedlab",
    version,
    about = "Transmon-resonator simulation and fitting"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Structured-text configuration file.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, value_name = "DIR", default_value = "cqedlab-out")]
    out: PathBuf,
    /// Random seed for synthetic noise.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to the number of cores).
    #[arg(long)]
    workers: Option<usize>,
    /// Print the fully resolved configuration before running.
    #[arg(long)]
    print_effective_config: bool,
    /// Overrides of the form section.key=value.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Derived circuit quantities (charging energy, coupling, Purcell limit).
    Params {
        /// Also recompute the resonator capacitance table.
        #[arg(long)]
        table1: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Transition lines, Stark lines and optional S21 map over a flux sweep.
    Sweep {
        /// Comma-separated transitions, e.g. g0-e0,e0-f0.
        #[arg(long)]
        transitions: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit the model to a spectrum dataset.
    Fit {
        /// Dataset basename (reads BASE.csv and BASE.json).
        #[arg(long, value_name = "BASE")]
        data: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Simulate and fit a time-domain experiment.
    Dynamics {
        #[arg(value_enum)]
        kind: Kind,
        /// Ramsey/echo detuning with unit, e.g. 1MHz.
        #[arg(long)]
        detuning: Option<String>,
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Rabi,
    T1,
    Ramsey,
    Echo,
}

impl Kind {
    fn name(self) -> &'static str {
        match self {
            Kind::Rabi => "rabi",
            Kind::T1 => "t1",
            Kind::Ramsey => "ramsey",
            Kind::Echo => "echo",
        }
    }
}

/// Exit status of a completed run.
pub enum Outcome {
    Done,
    NotConverged,
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Parse { .. } | Error::Io(_) => 2,
        _ => 3,
    }
}

fn load_config(common: &Common, extra: &[(&str, String)]) -> Result<Config, Error> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
            Config::parse(&text).map_err(|e| match e {
                Error::Parse {
                    line,
                    column,
                    message,
                } => Error::Parse {
                    line,
                    column,
                    message: format!("{}: {message}", path.display()),
                },
                other => other,
            })?
        }
        None => Config::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o)?;
    }
    if let Some(seed) = common.seed {
        cfg.set("run.seed", &seed.to_string())?;
    }
    if let Some(w) = common.workers {
        cfg.set("run.workers", &w.to_string())?;
    }
    for (key, value) in extra {
        cfg.set(key, value)?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<Outcome, Error> {
    let (common, extra, action): (Common, Vec<(&str, String)>, commands::Action) = match cli.command
    {
        Command::Params { table1, common } => (common, vec![], commands::Action::Params { table1 }),
        Command::Sweep {
            transitions,
            common,
        } => (
            common,
            transitions
                .map(|t| ("sweep.transitions", t))
                .into_iter()
                .collect(),
            commands::Action::Sweep,
        ),
        Command::Fit { data, common } => (
            common,
            data.map(|d| ("fit.data", d)).into_iter().collect(),
            commands::Action::Fit,
        ),
        Command::Dynamics {
            kind,
            detuning,
            common,
        } => {
            let mut extra = vec![("dynamics.experiment", kind.name().to_string())];
            if let Some(d) = detuning {
                extra.push(("dynamics.detuning", d));
            }
            (common, extra, commands::Action::Dynamics)
        }
    };
    let cfg = load_config(&common, &extra)?;
    if common.print_effective_config {
        print!("{}", cfg.effective());
    }
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(w) = cfg.workers() {
        pool = pool.num_threads(w);
    }
    let pool = pool
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| commands::execute(&action, &cfg, &common.out))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(Outcome::Done) => ExitCode::SUCCESS,
        Ok(Outcome::NotConverged) => {
            eprintln!("cqedlab: fit did not converge (report written)");
            ExitCode::from(4)
        }
        Err(e) => {
            eprintln!("cqedlab: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
