//! Sample files and two-dimensional scatter exports.
//!
//! Sample files are comma-separated with a header row `y1,...,yd` and one
//! sample per row; leading lines starting with `#` are comments.
//!
//! Scatter files have the columns `kind,set,component,x,y,s11,s12,s22`:
//! `kind = sample` rows carry the first two coordinates of a sample and
//! `kind = center` rows carry, per parameter set and component, the projected
//! center and the leading 2x2 block of its covariance.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use nalgebra::{Matrix2, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{MixtureParams, SampleSet};

fn io_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

/// Writes `data` as a sample file with a leading comment line.
pub fn write_samples(path: &Path, data: &SampleSet, comment: &str) -> Result<()> {
    let mut file = fs::File::create(path).map_err(|e| io_err(path, e))?;
    for line in comment.lines() {
        writeln!(file, "# {line}").map_err(|e| io_err(path, e))?;
    }
    let mut w = csv::Writer::from_writer(file);
    w.write_record((1..=data.dim()).map(|i| format!("y{i}"))).map_err(|e| io_err(path, e))?;
    let mut buf: Vec<String> = Vec::with_capacity(data.dim());
    for row in data.rows() {
        buf.clear();
        buf.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&buf).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Reads a sample file written by [`write_samples`] or any comma-separated
/// table with a header row and numeric columns.
pub fn read_samples(path: &Path) -> Result<SampleSet> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    parse_samples(&text).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn parse_samples(text: &str) -> Result<SampleSet> {
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_reader(text.as_bytes());
    let d = r.headers().map_err(|e| Error::Config(e.to_string()))?.len();
    if d == 0 {
        return Err(Error::Config("missing header row".into()));
    }
    let mut values = Vec::new();
    let mut n = 0;
    for (i, record) in r.records().enumerate() {
        let record = record.map_err(|e| Error::Config(format!("row {}: {e}", i + 1)))?;
        for field in record.iter() {
            let v: f64 = field.parse().map_err(|_| Error::Config(format!("row {}: `{field}` is not a number", i + 1)))?;
            if !v.is_finite() {
                return Err(Error::Config(format!("row {}: non-finite value", i + 1)));
            }
            values.push(v);
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptySample);
    }
    SampleSet::from_rows(n, d, values)
}

/// Writes one component label per line under a `component` header.
pub fn write_labels(path: &Path, labels: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(10 + 3 * labels.len());
    text.push_str("component\n");
    for l in labels {
        let _ = writeln!(text, "{l}");
    }
    fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let text = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    if lines.next().map(str::trim) != Some("component") {
        return Err(Error::Config(format!("{}: expected a `component` header", path.display())));
    }
    lines
        .enumerate()
        .map(|(i, l)| l.trim().parse().map_err(|_| Error::Config(format!("{}: row {}: `{l}` is not a label", path.display(), i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScatterRow {
    pub kind: String,
    pub set: String,
    pub component: Option<usize>,
    pub x: f64,
    pub y: f64,
    pub s11: Option<f64>,
    pub s12: Option<f64>,
    pub s22: Option<f64>,
}

/// Rows of the scatter table; `labels` optionally tags samples with their component.
pub fn scatter_rows(data: &SampleSet, sets: &[(String, MixtureParams)], labels: Option<&[usize]>) -> Result<Vec<ScatterRow>> {
    if data.dim() < 2 {
        return Err(Error::Domain("scatter export needs d >= 2".into()));
    }
    if let Some(l) = labels {
        if l.len() != data.len() {
            return Err(Error::ShapeMismatch("one label per sample required".into()));
        }
    }
    let mut rows = Vec::with_capacity(data.len() + sets.iter().map(|s| s.1.components()).sum::<usize>());
    for (n, y) in data.rows().enumerate() {
        rows.push(ScatterRow {
            kind: "sample".into(),
            set: "data".into(),
            component: labels.map(|l| l[n]),
            x: y[0],
            y: y[1],
            s11: None,
            s12: None,
            s22: None,
        });
    }
    for (name, params) in sets {
        if params.dim() != data.dim() {
            return Err(Error::ShapeMismatch(format!("parameter set `{name}` has d={}", params.dim())));
        }
        for j in 0..params.components() {
            let mu = &params.centers()[j];
            let s = params.covariance(j);
            rows.push(ScatterRow {
                kind: "center".into(),
                set: name.clone(),
                component: Some(j),
                x: mu[0],
                y: mu[1],
                s11: Some(s[(0, 0)]),
                s12: Some(s[(0, 1)]),
                s22: Some(s[(1, 1)]),
            });
        }
    }
    Ok(rows)
}

/// Semi-axes (major first) and major-axis angle in radians of the
/// `n_sigma` ellipse of a 2x2 covariance block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub cx: f64,
    pub cy: f64,
    pub major: f64,
    pub minor: f64,
    pub angle: f64,
}

pub fn covariance_ellipse(cx: f64, cy: f64, s11: f64, s12: f64, s22: f64, n_sigma: f64) -> Ellipse {
    let eig = SymmetricEigen::new(Matrix2::new(s11, s12, s12, s22));
    let (hi, lo) = if eig.eigenvalues[0] >= eig.eigenvalues[1] { (0, 1) } else { (1, 0) };
    let v = eig.eigenvectors.column(hi);
    Ellipse {
        cx,
        cy,
        major: n_sigma * eig.eigenvalues[hi].max(0.0).sqrt(),
        minor: n_sigma * eig.eigenvalues[lo].max(0.0).sqrt(),
        angle: v[1].atan2(v[0]),
    }
}

const PALETTE: [&str; 6] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Self-contained SVG with up to `max_points` samples (evenly strided),
/// centers and 2-sigma ellipses of every parameter set.
pub fn scatter_svg(rows: &[ScatterRow], max_points: usize) -> String {
    let (size, pad) = (640.0, 30.0);
    let samples: Vec<&ScatterRow> = rows.iter().filter(|r| r.kind == "sample").collect();
    let centers: Vec<&ScatterRow> = rows.iter().filter(|r| r.kind == "center").collect();
    let stride = samples.len().div_ceil(max_points.max(1)).max(1);
    let ellipses: Vec<(&ScatterRow, Ellipse)> = centers
        .iter()
        .map(|r| (*r, covariance_ellipse(r.x, r.y, r.s11.unwrap_or(0.0), r.s12.unwrap_or(0.0), r.s22.unwrap_or(0.0), 2.0)))
        .collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    let mut extend = |x: f64, y: f64, r: f64| {
        x0 = x0.min(x - r);
        x1 = x1.max(x + r);
        y0 = y0.min(y - r);
        y1 = y1.max(y + r);
    };
    for r in samples.iter().step_by(stride) {
        extend(r.x, r.y, 0.0);
    }
    for (_, e) in &ellipses {
        extend(e.cx, e.cy, e.major);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (-1.0, 1.0, -1.0, 1.0);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let scale = (size - 2.0 * pad) / span;
    let px = |x: f64| pad + (x - x0) * scale;
    let py = |y: f64| size - pad - (y - y0) * scale;

    let mut set_names: Vec<&str> = Vec::new();
    for r in &centers {
        if !set_names.contains(&r.set.as_str()) {
            set_names.push(&r.set);
        }
    }
    let color = |set: &str| PALETTE[set_names.iter().position(|s| *s == set).unwrap_or(0) % PALETTE.len()];

    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">"#);
    let _ = writeln!(svg, r##"<rect width="100%" height="100%" fill="#ffffff"/>"##);
    let _ = writeln!(svg, r##"<g fill="#555555" fill-opacity="0.35">"##);
    for r in samples.iter().step_by(stride) {
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="1.2"/>"#, px(r.x), py(r.y));
    }
    svg.push_str("</g>\n");
    for (r, e) in &ellipses {
        let c = color(&r.set);
        let _ = writeln!(
            svg,
            r#"<ellipse cx="{:.2}" cy="{:.2}" rx="{:.2}" ry="{:.2}" transform="rotate({:.3} {:.2} {:.2})" fill="none" stroke="{c}" stroke-width="1.5"/>"#,
            px(e.cx),
            py(e.cy),
            e.major * scale,
            e.minor * scale,
            -e.angle.to_degrees(),
            px(e.cx),
            py(e.cy)
        );
        let _ = writeln!(svg, r#"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="{c}"/>"#, px(e.cx), py(e.cy));
    }
    for (i, name) in set_names.iter().enumerate() {
        let y = pad + 16.0 * i as f64;
        let _ = writeln!(svg, r#"<rect x="{pad}" y="{}" width="10" height="10" fill="{}"/>"#, y - 9.0, color(name));
        let _ = writeln!(svg, r#"<text x="{}" y="{y}" font-family="sans-serif" font-size="12">{}</text>"#, pad + 14.0, xml_escape(name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `scatter.csv` and `scatter.svg` into `dir`.
pub fn export_scatter(data: &SampleSet, sets: &[(String, MixtureParams)], labels: Option<&[usize]>, dir: &Path) -> Result<Vec<ScatterRow>> {
    let rows = scatter_rows(data, sets, labels)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let csv_path = dir.join("scatter.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| io_err(&csv_path, e))?;
    for r in &rows {
        w.serialize(r).map_err(|e| io_err(&csv_path, e))?;
    }
    w.flush().map_err(|e| io_err(&csv_path, e))?;
    let svg_path = dir.join("scatter.svg");
    fs::write(&svg_path, scatter_svg(&rows, 5000)).map_err(|e| io_err(&svg_path, e))?;
    Ok(rows)
}

/// Reads a scatter table back.
pub fn read_scatter(path: &Path) -> Result<Vec<ScatterRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| io_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| io_err(path, e))).collect()
}
