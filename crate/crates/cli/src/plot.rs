//! Reliability diagram as a standalone SVG.

use std::fmt::Write;

use gpuq::calibration::ReliabilityBins;

const SIZE: f64 = 400.0;
const MARGIN: f64 = 50.0;

fn x(v: f64) -> f64 {
    MARGIN + v * (SIZE - 2.0 * MARGIN)
}

fn y(v: f64) -> f64 {
    SIZE - MARGIN - v * (SIZE - 2.0 * MARGIN)
}

/// Mean predicted probability against observed frequency per non-empty bin,
/// with the diagonal for reference. Marker area grows with the bin count.
pub fn reliability_svg(bins: &ReliabilityBins, title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="25" text-anchor="middle" font-size="14">{}</text>"#,
        SIZE / 2.0,
        escape(title)
    );
    let _ = writeln!(
        s,
        r#"<path d="M{:.1},{:.1} H{:.1} M{:.1},{:.1} V{:.1}" stroke="black" fill="none"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        x(0.0),
        y(0.0),
        y(1.0)
    );
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, x(v), y(0.0) + 18.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, x(0.0) - 6.0, y(v) + 4.0);
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">mean predicted probability</text>"#,
        SIZE / 2.0,
        SIZE - 12.0
    );
    let _ = writeln!(
        s,
        r#"<text transform="translate(14,{:.1}) rotate(-90)" text-anchor="middle">fraction positive</text>"#,
        SIZE / 2.0
    );
    let _ = writeln!(
        s,
        r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="gray" stroke-dasharray="4 4"/>"#,
        x(0.0),
        y(0.0),
        x(1.0),
        y(1.0)
    );

    let points: Vec<(f64, f64, usize)> =
        bins.bins.iter().filter_map(|b| Some((b.mean_predicted?, b.fraction_positive?, b.count))).collect();
    if !points.is_empty() {
        let path: Vec<String> = points.iter().map(|(p, f, _)| format!("{:.1},{:.1}", x(*p), y(*f))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" stroke="steelblue" fill="none"/>"#, path.join(" "));
        let max = points.iter().map(|p| p.2).max().unwrap_or(1).max(1) as f64;
        for (p, f, n) in &points {
            let r = 2.0 + 6.0 * (*n as f64 / max).sqrt();
            let _ = writeln!(
                s,
                r#"<circle cx="{:.1}" cy="{:.1}" r="{r:.1}" fill="steelblue"><title>n = {n}</title></circle>"#,
                x(*p),
                y(*f)
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

fn escape(t: &str) -> String {
    t.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
