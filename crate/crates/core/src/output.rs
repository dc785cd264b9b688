//! Atomic file output, report formatting and a fixed-style SVG line plot.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// Writes `contents` to `path` via a sibling temporary file and a rename, so
/// readers never observe a partially written file.
pub fn atomic_write(path: &Path, contents: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(d) if !d.as_os_str().is_empty() => d.to_path_buf(),
        _ => PathBuf::from("."),
    };
    fs::create_dir_all(&dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(format!("invalid output path {}", path.display())))?
        .to_string_lossy();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut file = fs::File::create(&tmp)?;
        file.write_all(contents)?;
        file.sync_all()?;
    }
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::from(e)
    })
}

/// One `name, value, unit` row of a derived-quantity report.
#[derive(Debug, Clone, PartialEq)]
pub struct ReportRow {
    pub name: String,
    pub value: f64,
    pub unit: String,
}

impl ReportRow {
    pub fn new(name: impl Into<String>, value: f64, unit: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value,
            unit: unit.into(),
        }
    }
}

/// CSV with header `name,value,unit`.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let mut out = String::from("name,value,unit\n");
    for row in rows {
        let _ = writeln!(out, "{},{},{}", row.name, row.value, row.unit);
    }
    out
}

/// Structured-text report: one `key = value unit` line per row.
pub fn report_text(title: &str, rows: &[ReportRow]) -> String {
    let mut out = format!("# {title}\n");
    for row in rows {
        if row.unit.is_empty() {
            let _ = writeln!(out, "{} = {}", row.name, row.value);
        } else {
            let _ = writeln!(out, "{} = {} {}", row.name, row.value, row.unit);
        }
    }
    out
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b",
];

/// A named polyline for [`svg_line_plot`].
pub struct Series<'a> {
    pub name: &'a str,
    pub points: &'a [(f64, f64)],
}

/// Renders a deterministic SVG line plot with fixed size and palette.
pub fn svg_line_plot(title: &str, x_label: &str, y_label: &str, series: &[Series<'_>]) -> String {
    let (width, height) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 20.0, 40.0, 50.0);
    let all = series.iter().flat_map(|s| s.points.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for &(x, y) in all.filter(|p| p.0.is_finite() && p.1.is_finite()) {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 == x0 {
        x1 = x0 + 1.0;
    }
    if y1 == y0 {
        y1 = y0 + 1.0;
    }
    let pw = width - left - right;
    let ph = height - top - bottom;
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>"#
    );
    for i in 0..=4 {
        let fx = x0 + (x1 - x0) * i as f64 / 4.0;
        let fy = y0 + (y1 - y0) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">{:.4}</text>"#,
            sx(fx),
            height - bottom + 16.0,
            fx
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{:.4}</text>"#,
            left - 6.0,
            sy(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        left + pw / 2.0,
        height - 10.0,
        escape(x_label)
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        top + ph / 2.0,
        top + ph / 2.0,
        escape(y_label)
    );
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{}</text>"#,
            left + pw - 120.0,
            top + 16.0 + 14.0 * i as f64,
            escape(s.name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sub").join("out.csv");
        atomic_write(&path, b"a\n").unwrap();
        atomic_write(&path, b"b\n").unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "b\n");
        let leftovers: Vec<_> = fs::read_dir(path.parent().unwrap()).unwrap().collect();
        assert_eq!(leftovers.len(), 1);
    }

    #[test]
    fn report_formats() {
        let rows = [
            ReportRow::new("g_over_2pi", 15.5, "MHz"),
            ReportRow::new("ratio", 2.0, ""),
        ];
        assert_eq!(
            report_csv(&rows),
            "name,value,unit\ng_over_2pi,15.5,MHz\nratio,2,\n"
        );
        assert_eq!(
            report_text("fit", &rows),
            "# fit\ng_over_2pi = 15.5 MHz\nratio = 2\n"
        );
    }

    #[test]
    fn svg_is_deterministic() {
        let pts = [(0.0, 1.0), (1.0, 0.5), (2.0, 0.25)];
        let s = [Series {
            name: "P_e",
            points: &pts,
        }];
        let a = svg_line_plot("T1", "delay (ns)", "P_e", &s);
        assert_eq!(a, svg_line_plot("T1", "delay (ns)", "P_e", &s));
        assert!(a.starts_with("<svg") && a.ends_with("</svg>\n"));
    }
}
