//! Minimal SVG line charts for training curves.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Reads `(x, y)` pairs from a CSV file with a header row.
pub fn read_series(path: &Path, x_col: &str, y_col: &str, label: &str) -> Result<Series> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| match e.kind() {
        csv::ErrorKind::Io(_) => Error::io(path, std::io::Error::other(e.to_string())),
        _ => Error::Csv(e),
    })?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Eval(format!("{} has no `{name}` column", path.display())))
    };
    let (xi, yi) = (col(x_col)?, col(y_col)?);
    let mut points = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let (Some(x), Some(y)) = (rec.get(xi), rec.get(yi)) else {
            continue;
        };
        if let (Ok(x), Ok(y)) = (x.parse::<f64>(), y.parse::<f64>()) {
            points.push((x, y));
        }
    }
    Ok(Series {
        label: label.to_string(),
        points,
    })
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn nice_ticks(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    let span = (hi - lo).max(1e-12);
    let raw = span / n as f64;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| span / s <= n as f64).unwrap_or(10.0 * mag);
    let start = (lo / step).ceil() * step;
    (0..)
        .map(|i| start + i as f64 * step)
        .take_while(|v| *v <= hi + step * 1e-9)
        .collect()
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders all series on shared axes. `y_percent` formats the y axis as percentages.
pub fn line_chart_svg(series: &[Series], title: &str, x_label: &str, y_label: &str, y_percent: bool) -> String {
    let (w, h) = (640.0, 400.0);
    let (ml, mr, mt, mb) = (64.0, 150.0, 36.0, 48.0);
    let all: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (mut x0, mut x1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (mut y0, mut y1) = all.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    if all.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if y_percent {
        y0 = 0.0;
        y1 = y1.max(0.01).min(1.0);
    }
    if x1 <= x0 {
        x1 = x0 + 1.0;
    }
    if y1 <= y0 {
        y1 = y0 + 1.0;
    }
    let px = |x: f64| ml + (x - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y - y0) / (y1 - y0) * (h - mt - mb);
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, (ml + w - mr) / 2.0, escape(title));
    for t in nice_ticks(y0, y1, 5) {
        let y = py(t);
        let label = if y_percent { format!("{:.0}%", 100.0 * t) } else { format!("{t}") };
        let _ = writeln!(s, r##"<line x1="{ml}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/>"##, w - mr);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{label}</text>"#, ml - 6.0, y + 4.0);
    }
    for t in nice_ticks(x0, x1, 6) {
        let x = px(t);
        let _ = writeln!(s, r##"<line x1="{x:.1}" y1="{:.1}" x2="{x:.1}" y2="{:.1}" stroke="#999"/>"##, h - mb, h - mb + 4.0);
        let _ = writeln!(s, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{t}</text>"#, h - mb + 18.0);
    }
    let _ = writeln!(s, r##"<rect x="{ml}" y="{mt}" width="{:.1}" height="{:.1}" fill="none" stroke="#333"/>"##, w - ml - mr, h - mt - mb);
    let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, (ml + w - mr) / 2.0, h - 8.0, escape(x_label));
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">{}</text>"#,
        (mt + h - mb) / 2.0,
        (mt + h - mb) / 2.0,
        escape(y_label)
    );
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = ser.points.iter().map(|&(x, y)| format!("{:.1},{:.1}", px(x), py(y))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for &(x, y) in &ser.points {
            let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{:.1}" r="3" fill="{color}"/>"#, px(x), py(y));
        }
        let ly = mt + 16.0 + 18.0 * i as f64;
        let lx = w - mr + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, lx + 26.0, ly + 4.0, escape(&ser.label));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chart_contains_each_series() {
        let a = Series {
            label: "baseline".into(),
            points: vec![(10.0, 0.2), (20.0, 0.4)],
        };
        let b = Series {
            label: "landmark <2>".into(),
            points: vec![(10.0, 0.3), (20.0, 0.6)],
        };
        let svg = line_chart_svg(&[a, b], "top-1", "epoch", "accuracy", true);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("landmark &lt;2&gt;"));
    }

    #[test]
    fn ticks_cover_range() {
        let t = nice_ticks(0.0, 1.0, 5);
        assert_eq!(t.first().copied(), Some(0.0));
        assert!((t.last().unwrap() - 1.0).abs() < 1e-9);
    }
}
