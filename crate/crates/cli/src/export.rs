// SPDX-License-Identifier: MIT OR Apache-2.0

//! Labelled matrices as CSV and as diverging-scale SVG heatmaps.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

/// Row-major values with axis labels. Exported values are single precision
/// so that nine significant digits reproduce them exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub values: Vec<f32>,
}

impl Matrix {
    pub fn new(row_labels: Vec<String>, col_labels: Vec<String>, values: Vec<f32>) -> CliResult<Self> {
        let m = Self {
            row_labels,
            col_labels,
            values,
        };
        m.check()?;
        Ok(m)
    }

    pub fn from_f64(row_labels: Vec<String>, col_labels: Vec<String>, values: &[f64]) -> CliResult<Self> {
        Self::new(row_labels, col_labels, values.iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.row_labels.len()
    }

    pub fn cols(&self) -> usize {
        self.col_labels.len()
    }

    pub fn at(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.cols() + c]
    }

    fn check(&self) -> CliResult<()> {
        if self.values.is_empty() {
            return Err(CliError::Runtime("empty matrix".into()));
        }
        if self.rows() * self.cols() != self.values.len() {
            return Err(CliError::Runtime(format!(
                "{} row and {} column labels for {} values",
                self.rows(),
                self.cols(),
                self.values.len()
            )));
        }
        Ok(())
    }
}

/// Corner cell of every CSV.
pub const CORNER: &str = "layer";

pub fn write_csv(m: &Matrix, path: impl AsRef<Path>) -> CliResult<()> {
    let path = path.as_ref();
    m.check()?;
    let err = |e: csv::Error| CliError::Runtime(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    let header = std::iter::once(CORNER.to_string()).chain(m.col_labels.iter().cloned());
    w.write_record(header).map_err(err)?;
    for (r, label) in m.row_labels.iter().enumerate() {
        let cells = (0..m.cols()).map(|c| format!("{:.8e}", m.at(r, c)));
        w.write_record(std::iter::once(label.clone()).chain(cells)).map_err(err)?;
    }
    w.flush().map_err(|e| CliError::io(path, e))
}

pub fn read_csv(path: impl AsRef<Path>) -> CliResult<Matrix> {
    let path = path.as_ref();
    let err = |m: String| CliError::Runtime(format!("{}: {m}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| err(e.to_string()))?;
    let header = r.headers().map_err(|e| err(e.to_string()))?.clone();
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut row_labels = Vec::new();
    let mut values = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| err(e.to_string()))?;
        row_labels.push(rec.get(0).unwrap_or_default().to_string());
        for cell in rec.iter().skip(1) {
            values.push(cell.parse::<f32>().map_err(|e| err(format!("{cell:?}: {e}")))?);
        }
    }
    Matrix::new(row_labels, col_labels, values)
}

/// Shannon entropy, in nats, of the normalized absolute cell mass, and
/// that entropy divided by its maximum `ln(cells)`. Higher is more diffuse.
/// `None` when every cell is zero.
pub fn diffuseness(values: &[f64]) -> Option<(f64, f64)> {
    let mass: f64 = values.iter().map(|v| v.abs()).sum();
    if !(mass > 0.0) {
        return None;
    }
    let h: f64 = values
        .iter()
        .map(|v| v.abs() / mass)
        .filter(|&p| p > 0.0)
        .map(|p| -p * p.ln())
        .sum();
    let max = (values.len() as f64).ln();
    Some((h, if max > 0.0 { h / max } else { 0.0 }))
}

const NEG: [f64; 3] = [33.0, 102.0, 172.0];
const MID: [f64; 3] = [247.0, 247.0, 247.0];
const POS: [f64; 3] = [178.0, 24.0, 43.0];

/// Color of `v` on a scale running from `-range` (blue) through 0 (near
/// white) to `range` (red).
pub fn diverging_color(v: f64, range: f64) -> String {
    let t = if range > 0.0 { (v / range).clamp(-1.0, 1.0) } else { 0.0 };
    let end = if t < 0.0 { NEG } else { POS };
    let a = t.abs();
    let c: Vec<u8> = (0..3).map(|i| (MID[i] + (end[i] - MID[i]) * a).round() as u8).collect();
    format!("#{:02x}{:02x}{:02x}", c[0], c[1], c[2])
}

fn tick(v: f64) -> String {
    let a = v.abs();
    if a == 0.0 {
        "0".to_string()
    } else if (0.01..1000.0).contains(&a) {
        format!("{v:.3}")
    } else {
        format!("{v:.2e}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

const CELL: usize = 26;
const LEFT: usize = 70;
const TOP: usize = 110;
const GAP: usize = 40;

/// One SVG holding every panel side by side on a shared color scale.
pub fn render_heatmaps(panels: &[(&str, &Matrix)]) -> CliResult<String> {
    if panels.is_empty() {
        return Err(CliError::Runtime("no heatmap panels".into()));
    }
    for (_, m) in panels {
        m.check()?;
    }
    let range = panels
        .iter()
        .flat_map(|(_, m)| m.values.iter())
        .fold(0.0f64, |acc, &v| acc.max((v as f64).abs()));
    let rows = panels.iter().map(|(_, m)| m.rows()).max().unwrap_or(0);
    let widths: Vec<usize> = panels.iter().map(|(_, m)| LEFT + m.cols() * CELL).collect();
    let legend_x = widths.iter().sum::<usize>() + GAP * panels.len();
    let width = legend_x + 110;
    let height = TOP + rows.max(6) * CELL + 30;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="10">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let mut x0 = GAP / 2;
    for ((title, m), w) in panels.iter().zip(&widths) {
        if !title.is_empty() {
            let _ = writeln!(s, r#"<text x="{}" y="16" font-size="13">{}</text>"#, x0 + LEFT, escape(title));
        }
        for (c, label) in m.col_labels.iter().enumerate() {
            let x = x0 + LEFT + c * CELL + CELL / 2;
            let _ = writeln!(
                s,
                r#"<text x="{x}" y="{}" transform="rotate(-60 {x} {})" text-anchor="start">{}</text>"#,
                TOP - 6,
                TOP - 6,
                escape(label)
            );
        }
        for (r, label) in m.row_labels.iter().enumerate() {
            let y = TOP + r * CELL;
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#,
                x0 + LEFT - 6,
                y + CELL / 2 + 4,
                escape(label)
            );
            for c in 0..m.cols() {
                let v = m.at(r, c) as f64;
                let _ = writeln!(
                    s,
                    r#"<rect x="{}" y="{y}" width="{CELL}" height="{CELL}" fill="{}"><title>{}</title></rect>"#,
                    x0 + LEFT + c * CELL,
                    diverging_color(v, range),
                    format_args!("{:.6e}", v)
                );
            }
        }
        x0 += w + GAP;
    }

    // Legend: a vertical bar from +range at the top to -range at the bottom.
    let steps = 20;
    let bar_h = rows.max(6) * CELL;
    let step_h = bar_h as f64 / steps as f64;
    for i in 0..steps {
        let v = range * (1.0 - 2.0 * (i as f64 + 0.5) / steps as f64);
        let _ = writeln!(
            s,
            r#"<rect x="{legend_x}" y="{:.2}" width="16" height="{:.2}" fill="{}"/>"#,
            TOP as f64 + i as f64 * step_h,
            step_h + 0.5,
            diverging_color(v, range)
        );
    }
    for k in 0..=4 {
        let v = range * (1.0 - k as f64 / 2.0);
        let y = TOP as f64 + bar_h as f64 * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<line x1="{}" y1="{y:.2}" x2="{}" y2="{y:.2}" stroke="black"/><text x="{}" y="{:.2}">{}</text>"#,
            legend_x + 16,
            legend_x + 20,
            legend_x + 23,
            y + 3.5,
            tick(v)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Writes `m` as a single-panel heatmap.
pub fn export_heatmap(m: &Matrix, path: impl AsRef<Path>) -> CliResult<()> {
    let path = path.as_ref();
    let svg = render_heatmaps(&[("", m)])?;
    fs::write(path, svg).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(prefix: &str, n: usize) -> Vec<String> {
        (0..n).map(|i| format!("{prefix}{i}")).collect()
    }

    fn cell_fills(svg: &str) -> Vec<&str> {
        svg.lines()
            .filter(|l| l.contains("<title>"))
            .map(|l| {
                let i = l.find("fill=\"").unwrap() + 6;
                &l[i..i + 7]
            })
            .collect()
    }

    #[test]
    fn csv_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let values = vec![1.0f32 / 3.0, -2.5e-7, 123456.79, 0.0, f32::MIN_POSITIVE, -1.0e30];
        let m = Matrix::new(vec!["0".into(), "1".into()], vec!["0:<bos>".into(), "S1, x".into(), "\"q\"".into()], values).unwrap();
        write_csv(&m, &path).unwrap();
        let back = read_csv(&path).unwrap();
        assert_eq!(back, m);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("layer,"));
        assert!(text.contains("3.33333343e-1"));
    }

    #[test]
    fn label_mismatch_and_empty_are_errors() {
        assert!(Matrix::new(labels("r", 2), labels("c", 2), vec![0.0; 3]).is_err());
        assert!(Matrix::new(vec![], vec![], vec![]).is_err());
        assert!(render_heatmaps(&[]).is_err());
    }

    #[test]
    fn zero_is_the_middle_of_the_scale() {
        let m = Matrix::new(labels("r", 1), labels("c", 1), vec![0.0]).unwrap();
        let svg = render_heatmaps(&[("", &m)]).unwrap();
        assert_eq!(cell_fills(&svg), vec!["#f7f7f7"]);
    }

    #[test]
    fn equal_positive_cells_are_fully_saturated() {
        let m = Matrix::new(labels("r", 2), labels("c", 3), vec![0.7; 6]).unwrap();
        let svg = render_heatmaps(&[("", &m)]).unwrap();
        assert!(cell_fills(&svg).iter().all(|&f| f == "#b2182b"));
        assert_eq!(diverging_color(-0.7, 0.7), "#2166ac");
    }

    #[test]
    fn rendering_is_deterministic() {
        let m = Matrix::new(labels("r", 3), labels("c", 2), vec![0.1, -0.4, 2.0, 0.0, -3.0, 1.5]).unwrap();
        let a = render_heatmaps(&[("a", &m), ("b", &m)]).unwrap();
        let b = render_heatmaps(&[("a", &m), ("b", &m)]).unwrap();
        assert_eq!(a, b);
        assert!(a.contains(">3.000<") && a.contains(">-3.000<") && a.contains(">0<"));
        let dir = tempfile::tempdir().unwrap();
        export_heatmap(&m, dir.path().join("x.svg")).unwrap();
        export_heatmap(&m, dir.path().join("y.svg")).unwrap();
        assert_eq!(fs::read(dir.path().join("x.svg")).unwrap(), fs::read(dir.path().join("y.svg")).unwrap());
    }

    #[test]
    fn diffuseness_extremes() {
        let (h, n) = diffuseness(&[0.0, 5.0, 0.0, 0.0]).unwrap();
        assert_eq!((h, n), (0.0, 0.0));
        let (h, n) = diffuseness(&[1.0, -1.0, 1.0, -1.0]).unwrap();
        assert!((h - 4f64.ln()).abs() < 1e-12 && (n - 1.0).abs() < 1e-12);
        assert!(diffuseness(&[0.0, 0.0]).is_none());
    }
}
