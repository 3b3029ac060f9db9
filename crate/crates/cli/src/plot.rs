//! Bare-bones SVG line and bar charts. CSV files are the real output; these
//! are for a quick look.

use std::fmt::Write;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(title: &str) -> String {
    let mut s = String::new();
    let _ = write!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = write!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = write!(s, r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#, W / 2.0, escape(title));
    let _ = write!(
        s,
        r#"<path d="M{m} {m} V{b} H{r}" stroke="black" fill="none"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    );
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn axis_labels(s: &mut String, (x0, x1): (f64, f64), (y0, y1): (f64, f64)) {
    let _ = write!(s, r#"<text x="{MARGIN}" y="{}" text-anchor="middle">{x0:.3}</text>"#, H - MARGIN + 16.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="middle">{x1:.3}</text>"#, W - MARGIN, H - MARGIN + 16.0);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y0:.3}</text>"#, MARGIN - 4.0, H - MARGIN);
    let _ = write!(s, r#"<text x="{}" y="{}" text-anchor="end">{y1:.3}</text>"#, MARGIN - 4.0, MARGIN + 4.0);
}

/// One polyline per `(name, ys)` series, sharing the x values.
pub fn line_chart(title: &str, xs: &[f64], series: &[(&str, Vec<f64>)]) -> String {
    let xr = range(xs.iter().copied());
    let yr = range(series.iter().flat_map(|(_, ys)| ys.iter().copied()));
    let px = |x: f64| MARGIN + (x - xr.0) / (xr.1 - xr.0) * (W - 2.0 * MARGIN);
    let py = |y: f64| H - MARGIN - (y - yr.0) / (yr.1 - yr.0) * (H - 2.0 * MARGIN);
    let mut s = header(title);
    axis_labels(&mut s, xr, yr);
    for (k, (name, ys)) in series.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = xs
            .iter()
            .zip(ys)
            .filter(|(_, y)| y.is_finite())
            .map(|(&x, &y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = write!(s, r#"<polyline points="{}" stroke="{color}" fill="none"/>"#, pts.join(" "));
        let _ = write!(
            s,
            r#"<text x="{}" y="{}" fill="{color}">{}</text>"#,
            W - MARGIN - 150.0,
            MARGIN + 14.0 * (k as f64 + 1.0),
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Vertical bars labelled by `labels`.
pub fn bar_chart(title: &str, labels: &[String], values: &[f64]) -> String {
    let top = values.iter().cloned().fold(0.0, f64::max).max(1e-12);
    let mut s = header(title);
    axis_labels(&mut s, (0.0, labels.len() as f64), (0.0, top));
    let slot = (W - 2.0 * MARGIN) / values.len().max(1) as f64;
    for (i, (&v, label)) in values.iter().zip(labels).enumerate() {
        let h = v / top * (H - 2.0 * MARGIN);
        let x = MARGIN + i as f64 * slot;
        let _ = write!(
            s,
            r#"<rect x="{:.2}" y="{:.2}" width="{:.2}" height="{:.2}" fill="{}"><title>{}: {v}</title></rect>"#,
            x + 1.0,
            H - MARGIN - h,
            (slot - 2.0).max(1.0),
            h,
            COLORS[0],
            escape(label)
        );
    }
    s.push_str("</svg>\n");
    s
}
