//! Run configuration in a small structured-text format:
//!
//! ```text
//! # comment
//! [model]
//! f_r = 4.639 GHz
//! g = 15 MHz
//! n_photon = 12
//! ```
//!
//! Every key belongs to a fixed schema; unknown sections or keys are errors.
//! Dimensional values must carry a unit (`15 MHz`, `15MHz`, `0.3 nH`);
//! dimensionless values (counts, flux in units of Φ0, quality factors) are
//! bare numbers. Overrides use `section.key=value`.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::circuit::CircuitParams;
use crate::dynamics::{DecoherenceParams, DriveSetup, ExperimentKind};
use crate::error::{Error, Result};
use crate::estimate::{FitOptions, FitParameter};
use crate::hilbert::SystemModel;
use crate::spectra::{LineshapeParams, ModelTemplate, TransitionSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Quantity {
    Frequency,
    Capacitance,
    Inductance,
    Time,
    ArealCapacitance,
    Number,
    Integer,
    Flag,
    Text,
}

/// Unit spellings and their factor to the canonical unit (GHz, fF, nH, ns,
/// fF/μm²).
fn units(q: Quantity) -> &'static [(&'static str, f64)] {
    match q {
        Quantity::Frequency => &[("GHz", 1.0), ("MHz", 1e-3), ("kHz", 1e-6), ("Hz", 1e-9)],
        Quantity::Capacitance => &[("aF", 1e-3), ("fF", 1.0), ("pF", 1e3), ("nF", 1e6)],
        Quantity::Inductance => &[("pH", 1e-3), ("nH", 1.0), ("uH", 1e3), ("μH", 1e3)],
        Quantity::Time => &[
            ("ps", 1e-3),
            ("ns", 1.0),
            ("us", 1e3),
            ("μs", 1e3),
            ("ms", 1e6),
        ],
        Quantity::ArealCapacitance => &[
            ("fF/um2", 1.0),
            ("fF/um^2", 1.0),
            ("fF/μm2", 1.0),
            ("fF/μm²", 1.0),
        ],
        _ => &[],
    }
}

struct KeySpec {
    section: &'static str,
    key: &'static str,
    quantity: Quantity,
    /// Unit used when printing the effective configuration.
    display_unit: &'static str,
    default: &'static str,
    /// Whether the literal `auto` is accepted.
    auto: bool,
}

const fn spec(
    section: &'static str,
    key: &'static str,
    quantity: Quantity,
    display_unit: &'static str,
    default: &'static str,
) -> KeySpec {
    KeySpec {
        section,
        key,
        quantity,
        display_unit,
        default,
        auto: false,
    }
}

const fn auto(mut s: KeySpec) -> KeySpec {
    s.auto = true;
    s
}

use Quantity::*;

const SECTIONS: [&str; 6] = ["run", "circuit", "model", "sweep", "fit", "dynamics"];

const SCHEMA: &[KeySpec] = &[
    spec("run", "seed", Integer, "", "0"),
    auto(spec("run", "workers", Integer, "", "auto")),
    spec("circuit", "c_g", Capacitance, "fF", "6.5 fF"),
    spec("circuit", "c_t", Capacitance, "fF", "51 fF"),
    spec("circuit", "c_r", Capacitance, "pF", "5.13 pF"),
    spec("circuit", "c_rg", Capacitance, "fF", "58 fF"),
    spec("circuit", "inductance", Inductance, "nH", "0.3 nH"),
    spec(
        "circuit",
        "c_specific",
        ArealCapacitance,
        "fF/um2",
        "14 fF/um2",
    ),
    spec("circuit", "f_r", Frequency, "GHz", "5 GHz"),
    spec("circuit", "f_ge", Frequency, "GHz", "5 GHz"),
    spec("circuit", "q_loaded", Number, "", "1e4"),
    spec("model", "f_r", Frequency, "GHz", "4.639 GHz"),
    spec("model", "ej_sigma", Frequency, "GHz", "11.4 GHz"),
    spec("model", "e_c", Frequency, "GHz", "0.334 GHz"),
    spec("model", "g", Frequency, "MHz", "15 MHz"),
    spec("model", "n_transmon", Integer, "", "6"),
    spec("model", "n_photon", Integer, "", "12"),
    spec("model", "flux_offset", Number, "", "0"),
    spec("model", "flux_period", Number, "", "1"),
    spec("sweep", "flux_min", Number, "", "-0.5"),
    spec("sweep", "flux_max", Number, "", "0.5"),
    spec("sweep", "flux_points", Integer, "", "401"),
    spec(
        "sweep",
        "transitions",
        Text,
        "",
        "g0-g1,g0-e0,e0-f0,g2-h0,g2-f1",
    ),
    spec("sweep", "stark_photons", Text, "", "0,2,8"),
    spec("sweep", "noise", Frequency, "MHz", "0 MHz"),
    spec("sweep", "single_tone", Flag, "", "false"),
    spec("sweep", "probe_min", Frequency, "GHz", "4.55 GHz"),
    spec("sweep", "probe_max", Frequency, "GHz", "4.75 GHz"),
    spec("sweep", "probe_points", Integer, "", "201"),
    spec("sweep", "q_internal", Number, "", "1e4"),
    spec("sweep", "q_coupling", Number, "", "2e4"),
    spec("sweep", "s21_noise", Number, "", "0"),
    spec("fit", "data", Text, "", ""),
    spec(
        "fit",
        "free",
        Text,
        "",
        "EJ_sigma,E_C,g,f_r,flux_offset,flux_period",
    ),
    spec(
        "fit",
        "hypotheses",
        Text,
        "",
        "g0-g1,g0-e0,e0-f0,g2-h0,g2-f1",
    ),
    spec("fit", "gate", Frequency, "MHz", "50 MHz"),
    spec("fit", "peak_threshold", Number, "", "5"),
    spec("fit", "max_evals", Integer, "", "5000"),
    spec("fit", "restarts", Integer, "", "3"),
    spec("fit", "n_transmon", Integer, "", "4"),
    spec("fit", "n_photon", Integer, "", "4"),
    spec("dynamics", "experiment", Text, "", "rabi"),
    spec("dynamics", "levels", Integer, "", "2"),
    spec("dynamics", "alpha", Frequency, "MHz", "-334 MHz"),
    spec("dynamics", "rabi", Frequency, "MHz", "10 MHz"),
    spec("dynamics", "t1", Time, "us", "6.63 us"),
    spec("dynamics", "t2", Time, "us", "2.17 us"),
    spec("dynamics", "detuning", Frequency, "MHz", "1 MHz"),
    spec("dynamics", "points", Integer, "", "101"),
    auto(spec("dynamics", "max_time", Time, "ns", "auto")),
    spec("dynamics", "plot", Flag, "", "true"),
];

fn lookup(section: &str, key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.section == section && s.key == key)
}

/// A parsed value in canonical units.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Number(f64),
    Integer(i64),
    Flag(bool),
    Text(String),
    Auto,
}

/// Error with a column offset inside the value text.
type ValueError = (usize, String);

fn parse_value(spec: &KeySpec, raw: &str) -> std::result::Result<Value, ValueError> {
    let raw = raw.trim();
    if spec.auto && raw == "auto" {
        return Ok(Value::Auto);
    }
    match spec.quantity {
        Text => Ok(Value::Text(raw.to_string())),
        Flag => match raw {
            "true" | "yes" | "on" => Ok(Value::Flag(true)),
            "false" | "no" | "off" => Ok(Value::Flag(false)),
            _ => Err((0, format!("expected true or false, found '{raw}'"))),
        },
        Integer => raw
            .parse::<i64>()
            .map(Value::Integer)
            .map_err(|_| (0, format!("expected an integer, found '{raw}'"))),
        Number => {
            let (v, rest) =
                split_number(raw).ok_or((0, format!("expected a number, found '{raw}'")))?;
            if !rest.is_empty() {
                return Err((
                    raw.len() - rest.len(),
                    format!("'{}' takes a bare number, found unit '{rest}'", spec.key),
                ));
            }
            Ok(Value::Number(v))
        }
        q => {
            let (v, rest) = split_number(raw)
                .ok_or((0, format!("expected a number with a unit, found '{raw}'")))?;
            let offset = raw.len() - rest.len();
            if rest.is_empty() {
                let allowed: Vec<&str> = units(q).iter().map(|u| u.0).collect();
                return Err((
                    offset,
                    format!("missing unit (one of {})", allowed.join(", ")),
                ));
            }
            let factor = units(q)
                .iter()
                .find(|(u, _)| *u == rest)
                .map(|(_, f)| *f)
                .ok_or_else(|| {
                    (
                        offset,
                        format!("unit '{rest}' is not valid for '{}'", spec.key),
                    )
                })?;
            Ok(Value::Number(v * factor))
        }
    }
}

/// Longest leading float and the trimmed remainder.
fn split_number(s: &str) -> Option<(f64, &str)> {
    let end = s
        .char_indices()
        .map(|(i, c)| i + c.len_utf8())
        .rfind(|&i| s[..i].trim().parse::<f64>().is_ok_and(|v| !v.is_nan()))?;
    let v: f64 = s[..end].trim().parse().ok()?;
    Some((v, s[end..].trim()))
}

fn format_value(spec: &KeySpec, v: &Value) -> String {
    match v {
        Value::Auto => "auto".into(),
        Value::Text(s) => s.clone(),
        Value::Flag(b) => b.to_string(),
        Value::Integer(i) => i.to_string(),
        Value::Number(x) => {
            let factor = units(spec.quantity)
                .iter()
                .find(|(u, _)| *u == spec.display_unit)
                .map_or(1.0, |(_, f)| *f);
            let shown = x / factor;
            if spec.display_unit.is_empty() {
                format!("{shown}")
            } else {
                format!("{shown} {}", spec.display_unit)
            }
        }
    }
}

/// Fully resolved configuration: schema defaults, then file, then overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    values: BTreeMap<(&'static str, &'static str), Value>,
}

impl Default for Config {
    fn default() -> Self {
        let values = SCHEMA
            .iter()
            .map(|s| {
                (
                    (s.section, s.key),
                    parse_value(s, s.default).expect("schema defaults parse"),
                )
            })
            .collect();
        Self { values }
    }
}

impl Config {
    /// Parses a configuration file body on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut section: Option<&'static str> = None;
        let mut seen = BTreeMap::new();
        for (i, full) in text.lines().enumerate() {
            let line = i + 1;
            let content = full.split('#').next().unwrap_or("");
            let trimmed = content.trim();
            if trimmed.is_empty() {
                continue;
            }
            let indent = content.len() - content.trim_start().len();
            let err = |column: usize, message: String| Error::Parse {
                line,
                column: column + 1,
                message,
            };
            if let Some(rest) = trimmed.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| err(indent + trimmed.len(), "expected ']'".into()))?
                    .trim();
                section = Some(
                    SECTIONS
                        .into_iter()
                        .find(|s| *s == name)
                        .ok_or_else(|| err(indent + 1, format!("unknown section '{name}'")))?,
                );
                continue;
            }
            let eq = content
                .find('=')
                .ok_or_else(|| err(indent, "expected 'key = value' or '[section]'".into()))?;
            let key = content[..eq].trim();
            let sec = section
                .ok_or_else(|| err(indent, format!("key '{key}' appears before any [section]")))?;
            let spec = lookup(sec, key)
                .ok_or_else(|| err(indent, format!("unknown key '{key}' in [{sec}]")))?;
            if let Some(prev) = seen.insert((sec, key.to_string()), line) {
                return Err(err(
                    indent,
                    format!("duplicate key '{key}' (first set on line {prev})"),
                ));
            }
            let raw = &content[eq + 1..];
            let value_col = eq + 1 + (raw.len() - raw.trim_start().len());
            let v = parse_value(spec, raw).map_err(|(off, msg)| err(value_col + off, msg))?;
            cfg.values.insert((spec.section, spec.key), v);
        }
        cfg.check()?;
        Ok(cfg)
    }

    /// Applies a `section.key=value` override.
    pub fn apply_override(&mut self, item: &str) -> Result<()> {
        let err = |column: usize, message: String| Error::Parse {
            line: 0,
            column: column + 1,
            message: format!("override '{item}': {message}"),
        };
        let eq = item
            .find('=')
            .ok_or_else(|| err(0, "expected section.key=value".into()))?;
        let path = item[..eq].trim();
        let (sec, key) = path
            .split_once('.')
            .ok_or_else(|| err(0, "key must be written section.key".into()))?;
        let spec = lookup(sec, key).ok_or_else(|| err(0, format!("unknown key '{path}'")))?;
        let v = parse_value(spec, &item[eq + 1..]).map_err(|(off, msg)| err(eq + 1 + off, msg))?;
        self.values.insert((spec.section, spec.key), v);
        self.check()
    }

    /// Sets a value from its textual form, as an override would.
    pub fn set(&mut self, path: &str, value: &str) -> Result<()> {
        self.apply_override(&format!("{path}={value}"))
    }

    fn check(&self) -> Result<()> {
        for s in SCHEMA {
            if let Some(Value::Integer(v)) = self.values.get(&(s.section, s.key)) {
                if *v < 0 {
                    return Err(Error::Config(format!(
                        "{}.{} must be nonnegative",
                        s.section, s.key
                    )));
                }
            }
        }
        if let Value::Integer(0) = self.get("run", "workers") {
            return Err(Error::Config("run.workers must be at least 1".into()));
        }
        Ok(())
    }

    fn get(&self, section: &str, key: &str) -> &Value {
        let spec = lookup(section, key).unwrap_or_else(|| panic!("schema has no {section}.{key}"));
        &self.values[&(spec.section, spec.key)]
    }

    pub fn number(&self, section: &str, key: &str) -> f64 {
        match self.get(section, key) {
            Value::Number(v) => *v,
            Value::Integer(v) => *v as f64,
            _ => f64::NAN,
        }
    }

    pub fn integer(&self, section: &str, key: &str) -> Option<u64> {
        match self.get(section, key) {
            Value::Integer(v) => Some(*v as u64),
            _ => None,
        }
    }

    pub fn flag(&self, section: &str, key: &str) -> bool {
        matches!(self.get(section, key), Value::Flag(true))
    }

    pub fn text(&self, section: &str, key: &str) -> &str {
        match self.get(section, key) {
            Value::Text(s) => s,
            _ => "",
        }
    }

    pub fn is_auto(&self, section: &str, key: &str) -> bool {
        matches!(self.get(section, key), Value::Auto)
    }

    /// Configuration text that parses back to `self`.
    pub fn effective(&self) -> String {
        let mut out = String::new();
        for section in SECTIONS {
            let _ = writeln!(out, "[{section}]");
            for s in SCHEMA.iter().filter(|s| s.section == section) {
                let _ = writeln!(
                    out,
                    "{} = {}",
                    s.key,
                    format_value(s, &self.values[&(s.section, s.key)])
                );
            }
            out.push('\n');
        }
        out
    }

    pub fn seed(&self) -> u64 {
        self.integer("run", "seed").unwrap_or(0)
    }

    /// `None` means one worker per available core.
    pub fn workers(&self) -> Option<usize> {
        self.integer("run", "workers").map(|w| w as usize)
    }

    pub fn circuit(&self) -> Result<CircuitParams> {
        let p = CircuitParams {
            c_g: self.number("circuit", "c_g"),
            c_t: self.number("circuit", "c_t"),
            c_r: self.number("circuit", "c_r") * 1e-3,
            c_rg: self.number("circuit", "c_rg"),
            inductance: self.number("circuit", "inductance"),
            ej_sigma: self.number("model", "ej_sigma"),
            c_specific: self.number("circuit", "c_specific"),
            flux_offset: self.number("model", "flux_offset"),
            flux_period: self.number("model", "flux_period"),
        };
        p.validate()?;
        Ok(p)
    }

    fn usize(&self, section: &str, key: &str) -> usize {
        self.integer(section, key).unwrap_or(0) as usize
    }

    pub fn template(&self) -> Result<ModelTemplate> {
        let model = SystemModel {
            f_r: self.number("model", "f_r"),
            ej_sigma: self.number("model", "ej_sigma"),
            e_c: self.number("model", "e_c"),
            g_over_2pi: self.number("model", "g") * 1e3,
            phi_ratio: 0.0,
            n_transmon: self.usize("model", "n_transmon"),
            n_photon: self.usize("model", "n_photon"),
        };
        model.validate()?;
        let t = ModelTemplate {
            model,
            flux_offset: self.number("model", "flux_offset"),
            flux_period: self.number("model", "flux_period"),
        };
        if !(t.flux_period != 0.0 && t.flux_period.is_finite()) || !t.flux_offset.is_finite() {
            return Err(Error::Config(
                "flux_period must be nonzero and finite".into(),
            ));
        }
        Ok(t)
    }

    pub fn transitions(&self, section: &str, key: &str) -> Result<Vec<TransitionSpec>> {
        split_list(self.text(section, key))
            .map(|s| {
                s.parse()
                    .map_err(|e: Error| Error::Config(format!("{section}.{key}: {e}")))
            })
            .collect()
    }

    pub fn stark_photons(&self) -> Result<Vec<usize>> {
        split_list(self.text("sweep", "stark_photons"))
            .map(|s| {
                s.parse().map_err(|_| {
                    Error::Config(format!("sweep.stark_photons: '{s}' is not a photon number"))
                })
            })
            .collect()
    }

    pub fn lineshape(&self) -> Result<LineshapeParams> {
        let ls = LineshapeParams {
            q_internal: self.number("sweep", "q_internal"),
            q_coupling: self.number("sweep", "q_coupling"),
            baseline_amplitude: 1.0,
            noise_sigma: self.number("sweep", "s21_noise"),
        };
        ls.validate()?;
        Ok(ls)
    }

    pub fn free_parameters(&self) -> Result<Vec<FitParameter>> {
        let free: Vec<FitParameter> = split_list(self.text("fit", "free"))
            .map(|s| s.parse().map_err(|e: Error| Error::Config(e.to_string())))
            .collect::<Result<_>>()?;
        if free.is_empty() {
            return Err(Error::Config("fit.free lists no parameters".into()));
        }
        Ok(free)
    }

    pub fn fit_options(&self) -> FitOptions {
        FitOptions {
            max_evals: self.usize("fit", "max_evals"),
            restarts: self.usize("fit", "restarts"),
            ..FitOptions::default()
        }
    }

    pub fn experiment(&self) -> Result<ExperimentKind> {
        self.text("dynamics", "experiment").parse()
    }

    pub fn drive(&self) -> DriveSetup {
        DriveSetup {
            levels: self.usize("dynamics", "levels"),
            alpha: self.number("dynamics", "alpha"),
            rabi_amplitude: self.number("dynamics", "rabi") * 1e3,
        }
    }

    /// T1 and T2 in μs; T_phi follows from them.
    pub fn decoherence(&self) -> Result<DecoherenceParams> {
        DecoherenceParams::from_t2(
            self.number("dynamics", "t1") * 1e-3,
            self.number("dynamics", "t2") * 1e-3,
        )
    }
}

fn split_list(s: &str) -> impl Iterator<Item = &str> {
    s.split(',').map(str::trim).filter(|p| !p.is_empty())
}
