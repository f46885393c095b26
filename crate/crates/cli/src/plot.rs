//! Realization-path overlays as standalone SVG.

use std::collections::BTreeSet;
use std::fmt::Write;

const WIDTH: f64 = 800.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 56.0;
const PATH_COLOR: &str = "#1f5fa8";
const STATIONARY_COLOR: &str = "#9a9a9a";

fn polyline(points: &[f64], sx: impl Fn(usize) -> f64, sy: impl Fn(f64) -> f64) -> String {
    let mut s = String::new();
    for (k, &v) in points.iter().enumerate() {
        if k > 0 {
            s.push(' ');
        }
        let _ = write!(s, "{:.2},{:.2}", sx(k), sy(v));
    }
    s
}

/// Plots each path in `paths` (state per time step) over the stationary
/// paths, drawn in grey underneath. Identical polylines are drawn once.
pub fn realization_svg(title: &str, paths: &[Vec<f64>], stationary: &[Vec<f64>]) -> String {
    let steps = paths
        .iter()
        .chain(stationary)
        .map(|p| p.len())
        .max()
        .unwrap_or(1)
        .max(2);
    let (mut lo, mut hi) = paths
        .iter()
        .chain(stationary)
        .flatten()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-9 {
        lo -= 0.5;
        hi += 0.5;
    }
    let pad = 0.05 * (hi - lo);
    let (lo, hi) = (lo - pad, hi + pad);
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    let sx = |k: usize| MARGIN + plot_w * k as f64 / (steps - 1) as f64;
    let sy = |v: f64| MARGIN + plot_h * (hi - v) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {WIDTH} {HEIGHT}" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="15">{title}</text>"#,
        WIDTH / 2.0
    );
    let (x0, y0, x1, y1) = (MARGIN, HEIGHT - MARGIN, WIDTH - MARGIN, MARGIN);
    let _ = writeln!(
        svg,
        r#"<path d="M{x0},{y1} L{x0},{y0} L{x1},{y0}" fill="none" stroke="black"/>"#
    );
    for k in 0..steps {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{}" text-anchor="middle">{k}</text>"#,
            sx(k),
            y0 + 18.0
        );
    }
    for i in 0..=4 {
        let v = lo + (hi - lo) * i as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.2}" text-anchor="end">{v:.2}</text>"#,
            x0 - 6.0,
            sy(v) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">k</text>"#,
        WIDTH / 2.0,
        HEIGHT - 12.0
    );

    for (group, color, width) in [
        (stationary, STATIONARY_COLOR, 1.0),
        (paths, PATH_COLOR, 1.2),
    ] {
        let lines: BTreeSet<String> = group.iter().map(|p| polyline(p, sx, sy)).collect();
        let _ = writeln!(
            svg,
            r#"<g fill="none" stroke="{color}" stroke-width="{width}" stroke-opacity="0.6">"#
        );
        for line in lines {
            let _ = writeln!(svg, r#"<polyline points="{line}"/>"#);
        }
        let _ = writeln!(svg, "</g>");
    }

    let legend_x = x1 - 150.0;
    for (i, (label, color)) in [
        ("optimal X(k)", PATH_COLOR),
        ("stationary X^s(k)", STATIONARY_COLOR),
    ]
    .into_iter()
    .enumerate()
    {
        let y = y1 + 14.0 + 18.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{legend_x}" y1="{y}" x2="{}" y2="{y}" stroke="{color}" stroke-width="2"/>"#,
            legend_x + 24.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{}">{label}</text>"#,
            legend_x + 30.0,
            y + 4.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}
