//! Self-contained SVG output: DET plots on normal-deviate axes and score
//! histograms per channel pair.

use std::fmt::Write as _;

use statrs::distribution::{ContinuousCDF, Normal};

use crate::metrics::{DetCurve, DistributionReport};
use crate::protocol::Label;

const WIDTH: f64 = 560.0;
const HEIGHT: f64 = 560.0;
const MARGIN: f64 = 64.0;
const P_MIN: f64 = 0.0005;
const P_MAX: f64 = 0.6;
const TICKS: [f64; 11] = [0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5];
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// Inverse standard normal CDF, clipped to the plotted probability range.
pub fn probit(p: f64) -> f64 {
    let n = Normal::standard();
    n.inverse_cdf(p.clamp(P_MIN, P_MAX))
}

fn axis(p: f64, lo: f64, hi: f64) -> f64 {
    let (a, b) = (probit(P_MIN), probit(P_MAX));
    lo + (probit(p) - a) / (b - a) * (hi - lo)
}

fn tick_label(p: f64) -> String {
    let pct = p * 100.0;
    if pct >= 1.0 {
        format!("{pct:.0}")
    } else {
        format!("{pct:.1}")
    }
}

/// DET plot of one or more named curves: x = false-alarm probability,
/// y = miss probability, both on probit scales.
pub fn det_svg(curves: &[(String, &DetCurve)]) -> String {
    let (x0, x1) = (MARGIN, WIDTH - 16.0);
    let (y0, y1) = (HEIGHT - MARGIN, 16.0);
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    for &t in &TICKS {
        let x = axis(t, x0, x1);
        let y = axis(t, y0, y1);
        let _ = writeln!(svg, r##"<line x1="{x:.2}" y1="{y0:.2}" x2="{x:.2}" y2="{y1:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r##"<line x1="{x0:.2}" y1="{y:.2}" x2="{x1:.2}" y2="{y:.2}" stroke="#ddd"/>"##);
        let _ = writeln!(svg, r#"<text x="{x:.2}" y="{:.2}" text-anchor="middle">{}</text>"#, y0 + 14.0, tick_label(t));
        let _ = writeln!(svg, r#"<text x="{:.2}" y="{:.2}" text-anchor="end">{}</text>"#, x0 - 4.0, y + 4.0, tick_label(t));
    }
    let _ = writeln!(
        svg,
        r##"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y1:.2}" stroke="#999" stroke-dasharray="4 3"/>"##
    );
    let _ = writeln!(svg, r#"<rect x="{x0:.2}" y="{y1:.2}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" text-anchor="middle">False alarm probability (%)</text>"#,
        (x0 + x1) / 2.0,
        HEIGHT - 24.0
    );
    let _ = writeln!(
        svg,
        r#"<text transform="translate(16 {:.2}) rotate(-90)" text-anchor="middle">Miss probability (%)</text>"#,
        (y0 + y1) / 2.0
    );
    for (i, (name, curve)) in curves.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|p| format!("{:.2},{:.2}", axis(p.p_fa, x0, x1), axis(p.p_miss, y0, y1)))
            .collect();
        let _ = writeln!(
            svg,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            pts.join(" ")
        );
        let ly = y1 + 16.0 + 14.0 * i as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{ly:.2}" x2="{:.2}" y2="{ly:.2}" stroke="{color}" stroke-width="2"/><text x="{:.2}" y="{:.2}">{}</text>"#,
            x1 - 150.0,
            x1 - 130.0,
            x1 - 126.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Histogram SVG for one channel pair: target and impostor bars overlaid.
pub fn histogram_svg(report: &DistributionReport, pair: crate::protocol::ChannelPair) -> String {
    let (x0, x1) = (MARGIN, WIDTH - 16.0);
    let (y0, y1) = (HEIGHT / 2.0 - 32.0, 24.0);
    let height = HEIGHT / 2.0;
    let groups: Vec<(Label, &crate::metrics::ScoreGroup)> = [Label::Target, Label::Nontarget]
        .into_iter()
        .filter_map(|l| report.groups.get(&(pair, l)).map(|g| (l, g)))
        .collect();
    // Densities so both classes share one vertical scale.
    let dens = |g: &crate::metrics::ScoreGroup, c: usize| c as f64 / g.count as f64;
    let peak = groups
        .iter()
        .flat_map(|(_, g)| g.histogram.iter().map(move |&c| dens(g, c)))
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);
    let bw = (x1 - x0) / report.bins as f64;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(svg, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(svg, r#"<text x="{x0:.2}" y="14">{pair}</text>"#);
    for (label, g) in &groups {
        let (color, name) = match label {
            Label::Target => ("#2ca02c", "target"),
            Label::Nontarget => ("#d62728", "impostor"),
        };
        for (i, &c) in g.histogram.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let h = dens(g, c) / peak * (y0 - y1);
            let _ = writeln!(
                svg,
                r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{h:.2}" fill="{color}" fill-opacity="0.45"/>"#,
                x0 + i as f64 * bw,
                y0 - h,
                bw
            );
        }
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" fill="{color}">{name}: mean {:.3}, std {:.3}</text>"#,
            x1 - 200.0,
            if *label == Label::Target { 14.0 } else { 28.0 },
            g.mean,
            g.std
        );
    }
    let _ = writeln!(svg, r#"<line x1="{x0:.2}" y1="{y0:.2}" x2="{x1:.2}" y2="{y0:.2}" stroke="black"/>"#);
    let _ = writeln!(svg, r#"<text x="{x0:.2}" y="{:.2}" text-anchor="start">{:.3}</text>"#, y0 + 14.0, report.lo);
    let _ = writeln!(svg, r#"<text x="{x1:.2}" y="{:.2}" text-anchor="end">{:.3}</text>"#, y0 + 14.0, report.hi);
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
