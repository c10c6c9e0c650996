//! History CSV and a log-scale SVG of the loss curves.

use std::fmt::Write as _;

use super::{HistoryRow, Result, SolverError, TrainHistory};

const W: f64 = 800.0;
const H: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 160.0;
const TOP: f64 = 20.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

pub(crate) fn csv_header(h: &TrainHistory) -> String {
    let mut s = String::from("step,total");
    for c in &h.constraints {
        s.push(',');
        s.push_str(c);
    }
    for m in &h.models {
        s.push_str(",lr_");
        s.push_str(m);
    }
    s.push('\n');
    s
}

pub(crate) fn csv_row(r: &HistoryRow) -> String {
    let mut s = format!("{},{:.16e}", r.step, r.total);
    for v in r.losses.iter().chain(&r.lrs) {
        let _ = write!(s, ",{v:.16e}");
    }
    s.push('\n');
    s
}

/// `step,total,<constraints>,lr_<models>` with one row per outer step.
pub fn history_csv(h: &TrainHistory) -> Result<String> {
    if h.rows.is_empty() {
        return Err(SolverError::EmptyHistory);
    }
    let mut s = csv_header(h);
    for r in &h.rows {
        s.push_str(&csv_row(r));
    }
    Ok(s)
}

/// Total and per-constraint losses against step, log-scaled on y.
pub fn render_svg(h: &TrainHistory) -> Result<String> {
    if h.rows.is_empty() {
        return Err(SolverError::EmptyHistory);
    }
    let mut series: Vec<(String, Vec<f64>)> = vec![("total".into(), h.totals())];
    for (i, c) in h.constraints.iter().enumerate() {
        series.push((c.clone(), h.losses(i)));
    }
    let positive = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite() && *v > 0.0);
    let (mut lo, mut hi) = positive.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| {
        (a.min(v), b.max(v))
    });
    if !lo.is_finite() {
        (lo, hi) = (1e-3, 1.0);
    }
    let (d0, mut d1) = (lo.log10().floor(), hi.log10().ceil());
    if d1 <= d0 {
        d1 = d0 + 1.0;
    }
    let s0 = h.rows[0].step as f64;
    let s1 = (h.rows[h.rows.len() - 1].step as f64).max(s0 + 1.0);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let px = |s: f64| LEFT + (s - s0) / (s1 - s0) * pw;
    let py = |v: f64| TOP + (d1 - v.max(lo).log10()) / (d1 - d0) * ph;

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        out,
        r##"<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##
    );
    let mut d = d0;
    while d <= d1 {
        let y = py(10f64.powf(d));
        let _ = writeln!(
            out,
            r##"<line x1="{LEFT}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{}</text>"##,
            LEFT + pw,
            LEFT - 6.0,
            y + 4.0,
            d as i64
        );
        d += 1.0;
    }
    for k in 0..=4 {
        let s = s0 + (s1 - s0) * k as f64 / 4.0;
        let x = px(s);
        let _ = writeln!(
            out,
            r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#,
            TOP + ph + 18.0,
            s.round() as i64
        );
    }
    let _ = writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">step</text>"#,
        LEFT + pw / 2.0,
        H - 10.0
    );
    for (i, (name, vals)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = h
            .rows
            .iter()
            .zip(vals)
            .filter(|(_, v)| v.is_finite())
            .map(|(r, v)| format!("{:.2},{:.2}", px(r.step as f64), py(*v)))
            .collect();
        let width = if i == 0 { 2 } else { 1 };
        let _ = writeln!(
            out,
            r#"<polyline fill="none" stroke="{color}" stroke-width="{width}" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = TOP + 14.0 + 18.0 * i as f64;
        let lx = LEFT + pw + 12.0;
        let _ = writeln!(
            out,
            r#"<line x1="{lx:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(name)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
