//! Minimal standalone SVG charts: line, scatter and grouped bars.

use std::fmt::Write;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

/// A named series of points.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit<'a>(points: impl Iterator<Item = &'a (f64, f64)>) -> Frame {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for (x, y) in points.filter(|(x, y)| x.is_finite() && y.is_finite()) {
            x0 = x0.min(*x);
            x1 = x1.max(*x);
            y0 = y0.min(*y);
            y1 = y1.max(*y);
        }
        if !x0.is_finite() {
            return Frame { x0: 0.0, x1: 1.0, y0: 0.0, y1: 1.0 };
        }
        let pad = |lo: f64, hi: f64| if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn open(out: &mut String, title: &str, x_label: &str, y_label: &str) {
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}">
<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>
<text x="{}" y="24" font-family="sans-serif" font-size="16" text-anchor="middle">{}</text>
<text x="{}" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle">{}</text>
<text x="16" y="{}" font-family="sans-serif" font-size="12" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
        WIDTH / 2.0,
        escape(title),
        WIDTH / 2.0,
        HEIGHT - 16.0,
        escape(x_label),
        HEIGHT / 2.0,
        HEIGHT / 2.0,
        escape(y_label),
    );
}

fn axes(out: &mut String, frame: &Frame) {
    let _ = writeln!(
        out,
        r##"<path d="M {m} {b} L {r} {b} M {m} {b} L {m} {t}" stroke="#333" fill="none"/>"##,
        m = MARGIN,
        b = HEIGHT - MARGIN,
        r = WIDTH - MARGIN,
        t = MARGIN,
    );
    for k in 0..=4 {
        let fx = frame.x0 + (frame.x1 - frame.x0) * k as f64 / 4.0;
        let fy = frame.y0 + (frame.y1 - frame.y0) * k as f64 / 4.0;
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="middle">{}</text>"#,
            frame.px(fx),
            HEIGHT - MARGIN + 14.0,
            tick(fx)
        );
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="10" text-anchor="end">{}</text>"#,
            MARGIN - 4.0,
            frame.py(fy) + 3.0,
            tick(fy)
        );
    }
}

fn tick(v: f64) -> String {
    if v.abs() >= 1e4 || (v != 0.0 && v.abs() < 1e-2) {
        format!("{v:.2e}")
    } else {
        format!("{v:.3}")
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 * i as f64;
        let _ = writeln!(
            out,
            r#"<rect x="{:.2}" y="{:.2}" width="10" height="10" fill="{}"/><text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#,
            WIDTH - MARGIN + 4.0,
            y - 9.0,
            PALETTE[i % PALETTE.len()],
            WIDTH - MARGIN + 18.0,
            y,
            escape(name)
        );
    }
}

pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut out = String::new();
    open(&mut out, title, x_label, y_label);
    axes(&mut out, &frame);
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let d: Vec<String> = s
            .points
            .iter()
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .enumerate()
            .map(|(k, (x, y))| format!("{} {:.2} {:.2}", if k == 0 { "M" } else { "L" }, frame.px(*x), frame.py(*y)))
            .collect();
        if !d.is_empty() {
            let _ = writeln!(out, r#"<path d="{}" stroke="{color}" stroke-width="2" fill="none"/>"#, d.join(" "));
        }
        for (x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#,
                frame.px(*x),
                frame.py(*y)
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Scatter with a dashed `y = x` reference line.
pub fn scatter_chart(title: &str, x_label: &str, y_label: &str, series: &[Series]) -> String {
    let frame = Frame::fit(series.iter().flat_map(|s| s.points.iter()));
    let mut out = String::new();
    open(&mut out, title, x_label, y_label);
    axes(&mut out, &frame);
    let lo = frame.x0.max(frame.y0);
    let hi = frame.x1.min(frame.y1);
    if hi > lo {
        let _ = writeln!(
            out,
            r##"<path d="M {:.2} {:.2} L {:.2} {:.2}" stroke="#999" stroke-dasharray="4 4" fill="none"/>"##,
            frame.px(lo),
            frame.py(lo),
            frame.px(hi),
            frame.py(hi)
        );
    }
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        for (x, y) in s.points.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
            let _ = writeln!(
                out,
                r#"<circle cx="{:.2}" cy="{:.2}" r="2" fill="{color}" fill-opacity="0.5"/>"#,
                frame.px(*x),
                frame.py(*y)
            );
        }
    }
    let names: Vec<&str> = series.iter().map(|s| s.name.as_str()).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// Grouped bars: one group per entry of `groups`, one bar per series.
/// `values[s][g]` is series `s` in group `g`.
pub fn bar_chart(title: &str, y_label: &str, groups: &[String], series: &[String], values: &[Vec<f64>]) -> String {
    let mut top = values.iter().flatten().copied().filter(|v| v.is_finite()).fold(0.0f64, f64::max);
    if top <= 0.0 {
        top = 1.0;
    }
    let frame = Frame {
        x0: 0.0,
        x1: groups.len().max(1) as f64,
        y0: 0.0,
        y1: top,
    };
    let mut out = String::new();
    open(&mut out, title, "", y_label);
    axes(&mut out, &frame);
    let slot = (WIDTH - 2.0 * MARGIN) / groups.len().max(1) as f64;
    let bar = slot * 0.8 / series.len().max(1) as f64;
    for (g, name) in groups.iter().enumerate() {
        for (s, row) in values.iter().enumerate() {
            let v = row.get(g).copied().unwrap_or(f64::NAN);
            if !v.is_finite() {
                continue;
            }
            let x = MARGIN + slot * g as f64 + slot * 0.1 + bar * s as f64;
            let y = frame.py(v.max(0.0));
            let _ = writeln!(
                out,
                r#"<rect x="{x:.2}" y="{y:.2}" width="{bar:.2}" height="{:.2}" fill="{}"/>"#,
                (HEIGHT - MARGIN - y).max(0.0),
                PALETTE[s % PALETTE.len()]
            );
        }
        let _ = writeln!(
            out,
            r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#,
            MARGIN + slot * (g as f64 + 0.5),
            HEIGHT - MARGIN + 28.0,
            escape(name)
        );
    }
    let names: Vec<&str> = series.iter().map(String::as_str).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(svg: &str) {
        let doc = roxmltree::Document::parse(svg).unwrap();
        assert_eq!(doc.root_element().tag_name().name(), "svg");
    }

    #[test]
    fn charts_are_well_formed_with_awkward_labels() {
        let series = vec![
            Series {
                name: "a<b & \"c\"".into(),
                points: vec![(0.5, 1.0), (1.0, f64::NAN), (2.0, 0.25)],
            },
            Series {
                name: "empty".into(),
                points: vec![],
            },
        ];
        parse(&line_chart("λ <sweep>", "λ", "KL & co", &series));
        parse(&scatter_chart("t", "x", "y", &series));
        parse(&bar_chart("t", "y", &["g1".into(), "g&2".into()], &["s".into()], &[vec![0.3, f64::INFINITY]]));
    }

    #[test]
    fn degenerate_inputs_still_render() {
        parse(&line_chart("t", "x", "y", &[]));
        parse(&bar_chart("t", "y", &[], &[], &[]));
        let flat = vec![Series {
            name: "flat".into(),
            points: vec![(1.0, 1.0), (1.0, 1.0)],
        }];
        let svg = scatter_chart("t", "x", "y", &flat);
        assert!(!svg.contains("NaN") && !svg.contains("inf"));
        parse(&svg);
    }
}
