//! Run records as CSV and as a log-scale SVG line chart.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

use super::{RunRecord, RunRow};

pub const CSV_HEADER: [&str; 7] = ["iter", "seconds", "objective", "grad_norm", "eig_min", "eig_max", "step_norm"];

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn emit_csv(record: &RunRecord, path: &Path) -> Result<()> {
    if record.rows.is_empty() {
        return Err(Error::EmptyRecord);
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let io = |e: csv::Error| Error::parse(path, e.to_string());
    w.write_record(CSV_HEADER).map_err(io)?;
    for r in &record.rows {
        w.write_record([
            r.iter.to_string(),
            opt(r.seconds),
            r.objective.to_string(),
            r.grad_norm.to_string(),
            opt(r.eig_min),
            opt(r.eig_max),
            opt(r.step_norm),
        ])
        .map_err(io)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads rows written by [`emit_csv`].
pub fn read_csv(path: &Path) -> Result<Vec<RunRow>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::parse(path, e.to_string()))?;
    let header = rdr.headers().map_err(|e| Error::parse(path, e.to_string()))?.clone();
    if header.iter().ne(CSV_HEADER.iter().copied()) {
        return Err(Error::parse(path, format!("unexpected header {:?}", header)));
    }
    let field = |s: &str, line: usize| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse::<f64>()
                .map(Some)
                .map_err(|_| Error::parse(path, format!("line {line}: bad number {s:?}")))
        }
    };
    let mut rows = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| Error::parse(path, e.to_string()))?;
        let line = k + 2;
        let iter = rec[0]
            .parse::<usize>()
            .map_err(|_| Error::parse(path, format!("line {line}: bad iteration")))?;
        let need = |v: Option<f64>, name: &str| v.ok_or_else(|| Error::parse(path, format!("line {line}: missing {name}")));
        rows.push(RunRow {
            iter,
            seconds: field(&rec[1], line)?,
            objective: need(field(&rec[2], line)?, "objective")?,
            grad_norm: need(field(&rec[3], line)?, "grad_norm")?,
            eig_min: field(&rec[4], line)?,
            eig_max: field(&rec[5], line)?,
            step_norm: field(&rec[6], line)?,
        });
    }
    Ok(rows)
}

pub fn emit_svg(record: &RunRecord, path: &Path) -> Result<()> {
    emit_svg_multi(&[(record.optimizer.as_str(), record.rows.as_slice())], path)
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
const FLOOR: f64 = 1e-16;

/// Line chart of `log10(objective)` against iteration, one polyline per run.
pub fn emit_svg_multi(runs: &[(&str, &[RunRow])], path: &Path) -> Result<()> {
    if runs.is_empty() || runs.iter().any(|(_, rows)| rows.is_empty()) {
        return Err(Error::EmptyRecord);
    }
    let (w, h) = (640.0, 400.0);
    let (left, right, top, bottom) = (70.0, 150.0, 20.0, 50.0);
    let log = |v: f64| v.max(FLOOR).log10();

    let all = runs.iter().flat_map(|(_, rows)| rows.iter());
    let max_iter = all.clone().map(|r| r.iter).max().unwrap_or(0).max(1) as f64;
    let lo = all.clone().map(|r| log(r.objective)).fold(f64::INFINITY, f64::min).floor();
    let mut hi = all.map(|r| log(r.objective)).fold(f64::NEG_INFINITY, f64::max).ceil();
    if hi <= lo {
        hi = lo + 1.0;
    }
    let px = |it: usize| left + (w - left - right) * it as f64 / max_iter;
    let py = |v: f64| top + (h - top - bottom) * (hi - log(v)) / (hi - lo);

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let (x0, x1, y0, y1) = (left, w - right, top, h - bottom);
    let _ = writeln!(s, r#"<path d="M{x0} {y0} L{x0} {y1} L{x1} {y1}" fill="none" stroke="black"/>"#);
    let step = ((hi - lo) / 8.0).ceil().max(1.0);
    let mut e = lo;
    while e <= hi {
        let y = top + (h - top - bottom) * (hi - e) / (hi - lo);
        let _ = writeln!(s, r##"<line x1="{x0}" y1="{y:.2}" x2="{x1}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" font-size="11" text-anchor="end">1e{}</text>"#, x0 - 6.0, y + 4.0, e);
        e += step;
    }
    let _ = writeln!(s, r#"<text x="{x0}" y="{}" font-size="11">0</text>"#, y1 + 16.0);
    let _ = writeln!(s, r#"<text x="{x1}" y="{}" font-size="11" text-anchor="end">{}</text>"#, y1 + 16.0, max_iter);
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">iteration</text>"#, (x0 + x1) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">objective</text>"#,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0
    );

    for (k, (label, rows)) in runs.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = rows.iter().map(|r| format!("{:.2},{:.2}", px(r.iter), py(r.objective))).collect();
        let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, pts.join(" "));
        let ly = top + 16.0 * k as f64 + 8.0;
        let lx = w - right + 12.0;
        let _ = writeln!(s, r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, lx + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="11">{}</text>"#, lx + 26.0, ly + 4.0, escape(label));
    }
    s.push_str("</svg>\n");
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
