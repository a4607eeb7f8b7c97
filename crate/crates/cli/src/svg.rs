//! Deterministic SVG line charts of utilization traces.

use std::fmt::Write as _;

use mind_core::trainer::UtilizationRow;

/// One panel: a title, its trace and the selected (best) epoch.
pub struct Panel<'a> {
    pub title: String,
    pub rows: &'a [UtilizationRow],
    pub best_epoch: usize,
}

const W: f64 = 300.0;
const H: f64 = 200.0;
const PAD: f64 = 36.0;
const COLS: usize = 3;
const SERIES: [(&str, &str); 3] = [("u_A", "#1f77b4"), ("u_B", "#ff7f0e"), ("d_util", "#2ca02c")];

fn values(r: &UtilizationRow) -> [f64; 3] {
    [r.u_a, r.u_b, r.d_util]
}

/// Grid of panels sharing one y range, three per row.
pub fn utilization_chart(panels: &[Panel<'_>]) -> String {
    let rows = panels.len().div_ceil(COLS).max(1);
    let (width, height) = (W * COLS as f64, H * rows as f64 + 24.0);
    let all = panels.iter().flat_map(|p| p.rows.iter().flat_map(values));
    let (mut lo, mut hi) = all.fold((0.0f64, 0.0f64), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if hi - lo < 1e-9 {
        hi += 0.5;
        lo -= 0.5;
    }
    let margin = 0.05 * (hi - lo);
    let (lo, hi) = (lo - margin, hi + margin);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    for (i, (name, color)) in SERIES.iter().enumerate() {
        let x = 10.0 + 80.0 * i as f64;
        let _ = writeln!(
            s,
            r#"<line x1="{x}" y1="12" x2="{:.1}" y2="12" stroke="{color}" stroke-width="2"/><text x="{:.1}" y="16">{name}</text>"#,
            x + 18.0,
            x + 22.0
        );
    }
    for (k, panel) in panels.iter().enumerate() {
        let (ox, oy) = (W * (k % COLS) as f64, 24.0 + H * (k / COLS) as f64);
        let (x0, x1, y0, y1) = (ox + PAD, ox + W - 10.0, oy + 20.0, oy + H - PAD + 10.0);
        let max_epoch = panel.rows.iter().map(|r| r.epoch).max().unwrap_or(1).max(panel.best_epoch).max(1) as f64;
        let px = |e: f64| x0 + (x1 - x0) * e / max_epoch;
        let py = |v: f64| y1 - (y1 - y0) * (v - lo) / (hi - lo);
        let _ = writeln!(s, r#"<g>"#);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" font-weight="bold">{}</text>"#, x0, oy + 12.0, escape(&panel.title));
        let _ = writeln!(
            s,
            r##"<rect x="{x0:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="none" stroke="#888"/>"##,
            x1 - x0,
            y1 - y0
        );
        if lo < 0.0 && hi > 0.0 {
            let _ = writeln!(
                s,
                r##"<line x1="{x0:.1}" y1="{0:.2}" x2="{x1:.1}" y2="{0:.2}" stroke="#ccc"/>"##,
                py(0.0)
            );
        }
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{hi:.2}</text>"#, x0 - 3.0, y0 + 8.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{lo:.2}</text>"#, x0 - 3.0, y1);
        let _ = writeln!(s, r#"<text x="{x1:.1}" y="{:.1}" text-anchor="end">epoch {max_epoch}</text>"#, y1 + 14.0);
        for (i, (_, color)) in SERIES.iter().enumerate() {
            let points: Vec<String> = panel
                .rows
                .iter()
                .map(|r| format!("{:.2},{:.2}", px(r.epoch as f64), py(values(r)[i])))
                .collect();
            if !points.is_empty() {
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
                    points.join(" ")
                );
            }
        }
        let bx = px(panel.best_epoch as f64);
        let _ = writeln!(
            s,
            r##"<line x1="{bx:.2}" y1="{y0:.1}" x2="{bx:.2}" y2="{y1:.1}" stroke="#d62728" stroke-dasharray="4 3"/>"##
        );
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    s
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
