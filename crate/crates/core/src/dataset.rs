//! Spectrum datasets and their on-disk form: a long-form CSV plus a JSON
//! metadata sidecar sharing the same basename.
//!
//! CSV layouts:
//! * line datasets: `flux,line_id,value` (value in GHz; gaps omitted),
//! * map datasets: `flux,probe_freq,value,value_imag`.
//!
//! Floats are written with Rust's shortest round-trip formatting so a
//! read-back is bit-exact.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::output::atomic_write;
use crate::spectra::{FluxSweepConfig, LineshapeParams, ModelTemplate};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    /// Line positions per flux point.
    #[default]
    Lines,
    /// Complex single-tone S21 map.
    SingleTone,
    /// Rasterized two-tone response map.
    TwoToneMap,
}

/// Everything needed to regenerate a dataset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetadata {
    pub kind: DatasetKind,
    pub template: Option<ModelTemplate>,
    pub config: Option<FluxSweepConfig>,
    pub lineshape: Option<LineshapeParams>,
    pub probe_grid: Option<Vec<f64>>,
    /// Lorentzian half width of rasterized lines, GHz.
    pub raster_width: Option<f64>,
    pub seed: Option<u64>,
    /// ChaCha stream selecting this dataset's noise sequence.
    pub stream: u64,
    pub noise_sigma: f64,
}

/// One line: frequency per flux point, `None` where the point failed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LineSeries {
    pub id: String,
    pub values: Vec<Option<f64>>,
    pub flagged: Vec<bool>,
}

impl LineSeries {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            values: Vec::new(),
            flagged: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SpectrumData {
    Map {
        probe: Vec<f64>,
        /// `values[flux][probe]`.
        values: Vec<Vec<Complex64>>,
    },
    Lines {
        lines: Vec<LineSeries>,
    },
}

/// Flux axis (applied control) with either a response map or line list.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumDataset {
    pub flux: Vec<f64>,
    pub data: SpectrumData,
    pub metadata: DatasetMetadata,
}

impl SpectrumDataset {
    pub fn line(&self, id: &str) -> Option<&LineSeries> {
        match &self.data {
            SpectrumData::Lines { lines } => lines.iter().find(|l| l.id == id),
            SpectrumData::Map { .. } => None,
        }
    }

    /// Checks axis lengths against the stored values.
    pub fn validate(&self) -> Result<()> {
        let nf = self.flux.len();
        match &self.data {
            SpectrumData::Map { probe, values } => {
                if values.len() != nf || values.iter().any(|c| c.len() != probe.len()) {
                    return Err(Error::Precondition(
                        "map dimensions do not match its axes".into(),
                    ));
                }
            }
            SpectrumData::Lines { lines } => {
                if lines.iter().any(|l| l.values.len() != nf) {
                    return Err(Error::Precondition(
                        "line length does not match flux axis".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match &self.data {
            SpectrumData::Lines { lines } => {
                out.push_str("flux,line_id,value\n");
                for (i, x) in self.flux.iter().enumerate() {
                    for line in lines {
                        if let Some(v) = line.values[i] {
                            let _ = writeln!(out, "{x},{},{v}", line.id);
                        }
                    }
                }
            }
            SpectrumData::Map { probe, values } => {
                out.push_str("flux,probe_freq,value,value_imag\n");
                for (x, column) in self.flux.iter().zip(values) {
                    for (f, v) in probe.iter().zip(column) {
                        let _ = writeln!(out, "{x},{f},{},{}", v.re, v.im);
                    }
                }
            }
        }
        out
    }

    pub fn metadata_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&self.metadata)
            .map(|mut s| {
                s.push('\n');
                s
            })
            .map_err(|e| Error::Io(e.to_string()))
    }

    /// Writes `<basename>.csv` and `<basename>.json` atomically.
    pub fn write(&self, basename: &Path) -> Result<()> {
        atomic_write(&with_ext(basename, "csv"), self.to_csv().as_bytes())?;
        atomic_write(
            &with_ext(basename, "json"),
            self.metadata_json()?.as_bytes(),
        )
    }

    /// Reads a CSV/JSON pair written by [`SpectrumDataset::write`].
    pub fn read(basename: &Path) -> Result<Self> {
        let csv_path = with_ext(basename, "csv");
        let csv = fs::read_to_string(&csv_path)
            .map_err(|e| Error::Io(format!("{}: {e}", csv_path.display())))?;
        let json_path = with_ext(basename, "json");
        let metadata = match fs::read_to_string(&json_path) {
            Ok(text) => serde_json::from_str(&text).map_err(|e| Error::Parse {
                line: e.line(),
                column: e.column(),
                message: format!("{}: {e}", json_path.display()),
            })?,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => DatasetMetadata::default(),
            Err(e) => return Err(Error::Io(format!("{}: {e}", json_path.display()))),
        };
        let mut ds = Self::from_csv(&csv)?;
        if let (Some(cfg), SpectrumData::Lines { lines }) = (&metadata.config, &mut ds.data) {
            restore_line_order(lines, cfg, &metadata);
        }
        ds.metadata = metadata;
        Ok(ds)
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut rows = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = rows.next().ok_or(Error::Parse {
            line: 1,
            column: 1,
            message: "empty dataset file".into(),
        })?;
        let header: Vec<&str> = header.split(',').map(str::trim).collect();
        let parse = |s: &str, line: usize, column: usize| -> Result<f64> {
            s.trim().parse::<f64>().map_err(|_| Error::Parse {
                line,
                column,
                message: format!("invalid number '{s}'"),
            })
        };
        let mut flux: Vec<f64> = Vec::new();
        let push_flux = |flux: &mut Vec<f64>, x: f64| -> usize {
            match flux.iter().position(|&v| v.to_bits() == x.to_bits()) {
                Some(i) => i,
                None => {
                    flux.push(x);
                    flux.len() - 1
                }
            }
        };
        match header.as_slice() {
            ["flux", "line_id", "value"] => {
                let mut entries: Vec<(usize, String, f64)> = Vec::new();
                for (ln, row) in rows {
                    let cols: Vec<&str> = row.split(',').collect();
                    if cols.len() != 3 {
                        return Err(Error::Parse {
                            line: ln + 1,
                            column: 1,
                            message: format!("expected 3 columns, found {}", cols.len()),
                        });
                    }
                    let x = parse(cols[0], ln + 1, 1)?;
                    let v = parse(cols[2], ln + 1, cols[0].len() + cols[1].len() + 3)?;
                    let i = push_flux(&mut flux, x);
                    entries.push((i, cols[1].trim().to_string(), v));
                }
                let mut lines: Vec<LineSeries> = Vec::new();
                for (i, id, v) in entries {
                    let idx = match lines.iter().position(|l| l.id == id) {
                        Some(k) => k,
                        None => {
                            lines.push(LineSeries::new(id));
                            lines.len() - 1
                        }
                    };
                    let line = &mut lines[idx];
                    if line.values.len() < flux.len() {
                        line.values.resize(flux.len(), None);
                        line.flagged.resize(flux.len(), false);
                    }
                    line.values[i] = Some(v);
                }
                for line in &mut lines {
                    line.values.resize(flux.len(), None);
                    line.flagged.resize(flux.len(), false);
                }
                Ok(Self {
                    flux,
                    data: SpectrumData::Lines { lines },
                    metadata: DatasetMetadata::default(),
                })
            }
            ["flux", "probe_freq", "value", rest @ ..]
                if rest.is_empty() || rest == ["value_imag"] =>
            {
                let mut probe: Vec<f64> = Vec::new();
                let mut cells: Vec<(usize, usize, Complex64)> = Vec::new();
                for (ln, row) in rows {
                    let cols: Vec<&str> = row.split(',').collect();
                    if cols.len() != header.len() {
                        return Err(Error::Parse {
                            line: ln + 1,
                            column: 1,
                            message: format!(
                                "expected {} columns, found {}",
                                header.len(),
                                cols.len()
                            ),
                        });
                    }
                    let x = parse(cols[0], ln + 1, 1)?;
                    let f = parse(cols[1], ln + 1, 2)?;
                    let re = parse(cols[2], ln + 1, 3)?;
                    let im = if cols.len() == 4 {
                        parse(cols[3], ln + 1, 4)?
                    } else {
                        0.0
                    };
                    let i = push_flux(&mut flux, x);
                    let j = match probe.iter().position(|&v| v.to_bits() == f.to_bits()) {
                        Some(j) => j,
                        None => {
                            probe.push(f);
                            probe.len() - 1
                        }
                    };
                    cells.push((i, j, Complex64::new(re, im)));
                }
                let mut values = vec![vec![Complex64::new(f64::NAN, 0.0); probe.len()]; flux.len()];
                for (i, j, v) in cells {
                    values[i][j] = v;
                }
                Ok(Self {
                    flux,
                    data: SpectrumData::Map { probe, values },
                    metadata: DatasetMetadata::default(),
                })
            }
            _ => Err(Error::Parse {
                line: 1,
                column: 1,
                message: format!("unrecognized dataset header '{}'", header.join(",")),
            }),
        }
    }
}

/// Reorders lines read from CSV into configuration order and restores
/// lines that had no rows at all.
fn restore_line_order(lines: &mut Vec<LineSeries>, cfg: &FluxSweepConfig, meta: &DatasetMetadata) {
    if meta.kind != DatasetKind::Lines {
        return;
    }
    let n = lines.first().map(|l| l.values.len()).unwrap_or(0);
    let ids: Vec<String> = cfg
        .transitions
        .iter()
        .map(|t| t.to_string())
        .chain(
            cfg.stark_photon_numbers
                .iter()
                .map(|&k| crate::spectra::stark_line_id(k)),
        )
        .collect();
    if lines.iter().any(|l| !ids.contains(&l.id)) {
        return;
    }
    let mut ordered = Vec::with_capacity(ids.len());
    for id in ids {
        match lines.iter().position(|l| l.id == id) {
            Some(k) => ordered.push(lines[k].clone()),
            None => ordered.push(LineSeries {
                id,
                values: vec![None; n],
                flagged: vec![false; n],
            }),
        }
    }
    *lines = ordered;
}

fn with_ext(basename: &Path, ext: &str) -> PathBuf {
    let mut s = basename.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spectra::{
        default_two_tone_transitions, linspace, synthesize_noisy_spectrum, two_tone_lines,
    };
    use proptest::prelude::*;

    #[test]
    fn lines_round_trip_through_files() {
        let tpl = ModelTemplate::default();
        let cfg = FluxSweepConfig::new(linspace(-0.2, 0.2, 7), default_two_tone_transitions());
        let ds = synthesize_noisy_spectrum(&two_tone_lines(&tpl, &cfg).unwrap(), 1e-3, 4).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let base = dir.path().join("lines");
        ds.write(&base).unwrap();
        let back = SpectrumDataset::read(&base).unwrap();
        assert_eq!(back.flux, ds.flux);
        assert_eq!(back.metadata, ds.metadata);
        let (SpectrumData::Lines { lines: a }, SpectrumData::Lines { lines: b }) =
            (&back.data, &ds.data)
        else {
            panic!()
        };
        for (x, y) in a.iter().zip(b) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.values, y.values);
        }
    }

    #[test]
    fn bad_header_rejected() {
        assert!(matches!(
            SpectrumDataset::from_csv("a,b\n1,2\n"),
            Err(Error::Parse { .. })
        ));
        assert!(matches!(
            SpectrumDataset::from_csv("flux,line_id,value\n0.1,g0-e0,abc\n"),
            Err(Error::Parse { line: 2, .. })
        ));
    }

    proptest! {
        #[test]
        fn map_csv_round_trip_is_bit_exact(
            vals in proptest::collection::vec((-1e3f64..1e3, -1e3f64..1e3), 12),
        ) {
            let values: Vec<Vec<Complex64>> = vals.chunks(4).map(|c| c.iter().map(|&(a, b)| Complex64::new(a, b)).collect()).collect();
            let ds = SpectrumDataset {
                flux: vec![-0.1, 0.0, 0.1],
                data: SpectrumData::Map { probe: vec![4.6, 4.61, 4.62, 4.63], values },
                metadata: DatasetMetadata::default(),
            };
            let back = SpectrumDataset::from_csv(&ds.to_csv()).unwrap();
            prop_assert_eq!(back, ds);
        }
    }
}
