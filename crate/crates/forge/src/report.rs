//! CSV/JSON report files and a minimal SVG line plotter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{ForgeError, Result};

pub fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| x.to_string())
}

pub fn write_csv(path: &Path, header: &str, rows: impl IntoIterator<Item = String>) -> Result<()> {
    let mut s = String::from(header);
    s.push('\n');
    for r in rows {
        s.push_str(&r);
        s.push('\n');
    }
    fs::write(path, s).map_err(ForgeError::io(path))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(ForgeError::json(path.display().to_string()))?;
    bytes.push(b'\n');
    fs::write(path, bytes).map_err(ForgeError::io(path))
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub dashed: bool,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

/// Polylines on shared axes with min/max tick labels and a legend.
pub fn svg_line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let (w, h) = (640.0, 360.0);
    let (left, right, top, bottom) = (60.0, 20.0, 30.0, 45.0);
    let pts = series.iter().flat_map(|s| s.points.iter()).filter(|(x, y)| x.is_finite() && y.is_finite());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in pts {
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
    let sx = |x: f64| left + (x - x0) / (x1 - x0) * (w - left - right);
    let sy = |y: f64| h - bottom - (y - y0) / (y1 - y0) * (h - top - bottom);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="13">{}</text>"#, w / 2.0, escape(title));
    let (ax0, ay0, ax1, ay1) = (left, h - bottom, w - right, top);
    let _ = writeln!(s, r#"<path d="M{ax0} {ay1} L{ax0} {ay0} L{ax1} {ay0}" fill="none" stroke="black"/>"#);
    let _ = writeln!(s, r#"<text x="{ax0}" y="{}" text-anchor="middle">{}</text>"#, ay0 + 15.0, tick(x0));
    let _ = writeln!(s, r#"<text x="{ax1}" y="{}" text-anchor="middle">{}</text>"#, ay0 + 15.0, tick(x1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ax0 - 4.0, ay0, tick(y0));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="end">{}</text>"#, ax0 - 4.0, ay1 + 8.0, tick(y1));
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (ax0 + ax1) / 2.0, h - 8.0, escape(x_label));
    for (k, ser) in series.iter().enumerate() {
        let colour = PALETTE[k % PALETTE.len()];
        let mut d = String::new();
        let mut pen_up = true;
        for &(x, y) in &ser.points {
            if !(x.is_finite() && y.is_finite()) {
                pen_up = true;
                continue;
            }
            let _ = write!(d, "{}{:.2} {:.2} ", if pen_up { "M" } else { "L" }, sx(x), sy(y));
            pen_up = false;
        }
        let dash = if ser.dashed { r#" stroke-dasharray="5 3""# } else { "" };
        let _ = writeln!(s, r#"<path d="{}" fill="none" stroke="{colour}" stroke-width="1.5"{dash}/>"#, d.trim_end());
        let ly = top + 14.0 * k as f64 + 6.0;
        let _ = writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{colour}" stroke-width="2"{dash}/>"#, ax1 - 120.0, ax1 - 100.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, ax1 - 95.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.2}")
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_path_per_series() {
        let svg = svg_line_plot(
            "a < b",
            "time (s)",
            &[
                Series { label: "true".into(), points: vec![(0.0, 1.0), (1.0, 2.0)], dashed: false },
                Series { label: "inferred".into(), points: vec![(0.0, 1.5), (f64::NAN, 0.0), (1.0, 2.5)], dashed: true },
            ],
        );
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<path d=\"M").count(), 3);
        assert!(svg.contains("a &lt; b"));
    }
}
