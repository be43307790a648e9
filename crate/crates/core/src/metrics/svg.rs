//! Minimal deterministic SVG charts.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 20.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 70.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="22" text-anchor="middle" font-size="15">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    s
}

/// Rounds the span outwards to a step of 1, 2 or 5 times a power of ten.
fn nice_range(lo: f64, hi: f64) -> (f64, f64, f64) {
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let raw = (hi - lo) / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let step = [1.0, 2.0, 5.0, 10.0]
        .into_iter()
        .map(|k| k * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag);
    ((lo / step).floor() * step, (hi / step).ceil() * step, step)
}

fn y_axis(s: &mut String, lo: f64, hi: f64, step: f64, label: &str) {
    let ph = H - TOP - BOTTOM;
    let n = ((hi - lo) / step).round() as usize;
    for i in 0..=n {
        let v = lo + i as f64 * step;
        let y = TOP + ph * (1.0 - (v - lo) / (hi - lo));
        let _ = writeln!(
            s,
            r##"<line x1="{LEFT}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#ddd"/><text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"##,
            W - RIGHT,
            LEFT - 6.0,
            y + 4.0,
            fmt_tick(v, step)
        );
    }
    let _ = writeln!(
        s,
        r#"<text transform="translate(16,{:.1}) rotate(-90)" text-anchor="middle">{}</text>"#,
        TOP + ph / 2.0,
        escape(label)
    );
}

fn fmt_tick(v: f64, step: f64) -> String {
    let decimals = if step >= 1.0 { 0 } else { (-step.log10().floor()) as usize };
    format!("{v:.decimals$}")
}

/// Vertical bars, one per label; bars start at zero.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64], y_label: &str) -> String {
    let mut s = header(title);
    let lo = values.iter().copied().fold(0.0f64, f64::min);
    let hi = values.iter().copied().fold(0.0f64, f64::max);
    let (lo, hi, step) = nice_range(lo, hi);
    y_axis(&mut s, lo, hi, step, y_label);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let to_y = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
    let slot = pw / labels.len().max(1) as f64;
    for (i, (label, &v)) in labels.iter().zip(values).enumerate() {
        let x = LEFT + slot * (i as f64 + 0.15);
        let (y0, y1) = (to_y(v.max(0.0)), to_y(v.min(0.0)));
        let _ = writeln!(
            s,
            r##"<rect x="{x:.1}" y="{y0:.1}" width="{:.1}" height="{:.1}" fill="#3b6ea5"/>"##,
            slot * 0.7,
            (y1 - y0).max(0.5)
        );
        let cx = LEFT + slot * (i as f64 + 0.5);
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{v:.3}</text>"#,
            y0 - 4.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{cx:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            H - BOTTOM + 18.0,
            escape(label)
        );
    }
    let _ = writeln!(
        s,
        r##"<line x1="{LEFT}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="black"/>"##,
        to_y(0.0),
        W - RIGHT,
        to_y(0.0)
    );
    s.push_str("</svg>\n");
    s
}

/// Scatter of `(x, y)` points with the `y = x` reference line.
pub fn scatter(title: &str, points: &[(f64, f64)], x_label: &str, y_label: &str) -> String {
    let mut s = header(title);
    let all = points.iter().flat_map(|&(x, y)| [x, y]);
    let lo = all.clone().fold(f64::INFINITY, f64::min);
    let hi = all.fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if lo.is_finite() { (lo.min(0.0), hi) } else { (0.0, 1.0) };
    let (lo, hi, step) = nice_range(lo, hi);
    y_axis(&mut s, lo, hi, step, y_label);
    let pw = W - LEFT - RIGHT;
    let ph = H - TOP - BOTTOM;
    let to_x = |v: f64| LEFT + pw * (v - lo) / (hi - lo);
    let to_y = |v: f64| TOP + ph * (1.0 - (v - lo) / (hi - lo));
    let n = ((hi - lo) / step).round() as usize;
    for i in 0..=n {
        let v = lo + i as f64 * step;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            to_x(v),
            H - BOTTOM + 18.0,
            fmt_tick(v, step)
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
        LEFT + pw / 2.0,
        H - 20.0,
        escape(x_label)
    );
    let _ = writeln!(
        s,
        r##"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="#999" stroke-dasharray="4 3"/>"##,
        to_x(lo),
        to_y(lo),
        to_x(hi),
        to_y(hi)
    );
    for &(x, y) in points {
        let _ = writeln!(
            s,
            r##"<circle cx="{:.1}" cy="{:.1}" r="2.5" fill="#c0504d" fill-opacity="0.6"/>"##,
            to_x(x),
            to_y(y)
        );
    }
    s.push_str("</svg>\n");
    s
}
