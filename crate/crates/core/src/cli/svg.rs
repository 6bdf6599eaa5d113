//! Minimal SVG writers for line plots, grouped bars and match overlays.

use std::fmt::Write;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

pub fn color(i: usize) -> &'static str {
    PALETTE[i % PALETTE.len()]
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Fixed-precision number so output is stable across platforms.
fn n(v: f64) -> String {
    format!("{v:.2}")
}

pub struct Doc {
    width: f64,
    height: f64,
    body: String,
}

impl Doc {
    pub fn new(width: f64, height: f64) -> Self {
        Self {
            width,
            height,
            body: String::new(),
        }
    }

    pub fn rect(&mut self, x: f64, y: f64, w: f64, h: f64, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<rect x="{}" y="{}" width="{}" height="{}" fill="{fill}"/>"#,
            n(x),
            n(y),
            n(w),
            n(h)
        );
    }

    pub fn line(&mut self, x1: f64, y1: f64, x2: f64, y2: f64, stroke: &str, dashed: bool) {
        let dash = if dashed { r#" stroke-dasharray="4 3""# } else { "" };
        let _ = writeln!(
            self.body,
            r#"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="{stroke}" stroke-width="1.5"{dash}/>"#,
            n(x1),
            n(y1),
            n(x2),
            n(y2)
        );
    }

    pub fn circle(&mut self, cx: f64, cy: f64, r: f64, stroke: &str, fill: &str) {
        let _ = writeln!(
            self.body,
            r#"<circle cx="{}" cy="{}" r="{}" stroke="{stroke}" stroke-width="1.5" fill="{fill}"/>"#,
            n(cx),
            n(cy),
            n(r)
        );
    }

    pub fn polyline(&mut self, pts: &[(f64, f64)], stroke: &str) {
        let mut p = String::new();
        for (x, y) in pts {
            let _ = write!(p, "{},{} ", n(*x), n(*y));
        }
        let _ = writeln!(
            self.body,
            r#"<polyline points="{}" fill="none" stroke="{stroke}" stroke-width="1.5"/>"#,
            p.trim_end()
        );
    }

    pub fn text(&mut self, x: f64, y: f64, size: f64, anchor: &str, s: &str) {
        let _ = writeln!(
            self.body,
            r#"<text x="{}" y="{}" font-size="{}" font-family="sans-serif" text-anchor="{anchor}">{}</text>"#,
            n(x),
            n(y),
            n(size),
            esc(s)
        );
    }

    pub fn finish(self) -> String {
        format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" viewBox=\"0 0 {} {}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n{}</svg>\n",
            n(self.width),
            n(self.height),
            n(self.width),
            n(self.height),
            self.body
        )
    }
}

pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const W: f64 = 720.0;
const H: f64 = 420.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;

fn bounds(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    }
}

fn frame(doc: &mut Doc, title: &str, x_label: &str, y_range: (f64, f64), x_range: Option<(f64, f64)>) {
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    doc.text(W / 2.0, 22.0, 15.0, "middle", title);
    doc.line(LEFT, TOP + ph, LEFT + pw, TOP + ph, "#333", false);
    doc.line(LEFT, TOP, LEFT, TOP + ph, "#333", false);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let y = TOP + ph * (1.0 - f);
        doc.line(LEFT - 4.0, y, LEFT, y, "#333", false);
        doc.text(LEFT - 6.0, y + 4.0, 10.0, "end", &format!("{:.3}", y_range.0 + f * (y_range.1 - y_range.0)));
        if let Some((x0, x1)) = x_range {
            let x = LEFT + pw * f;
            doc.line(x, TOP + ph, x, TOP + ph + 4.0, "#333", false);
            doc.text(x, TOP + ph + 16.0, 10.0, "middle", &format!("{:.0}", x0 + f * (x1 - x0)));
        }
    }
    doc.text(LEFT + pw / 2.0, H - 12.0, 12.0, "middle", x_label);
}

fn legend(doc: &mut Doc, labels: &[String]) {
    for (i, l) in labels.iter().enumerate() {
        let y = TOP + 10.0 + 18.0 * i as f64;
        let x = W - RIGHT + 15.0;
        doc.line(x, y, x + 20.0, y, color(i), false);
        doc.text(x + 26.0, y + 4.0, 11.0, "start", l);
    }
}

/// One polyline per series over a shared axis box.
pub fn line_plot(title: &str, x_label: &str, series: &[Series]) -> String {
    let mut doc = Doc::new(W, H);
    let xs = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let ys = bounds(series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));
    frame(&mut doc, title, x_label, ys, Some(xs));
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    for (i, s) in series.iter().enumerate() {
        let pts: Vec<(f64, f64)> = s
            .points
            .iter()
            .filter(|p| p.0.is_finite() && p.1.is_finite())
            .map(|&(x, y)| {
                (
                    LEFT + pw * (x - xs.0) / (xs.1 - xs.0),
                    TOP + ph * (1.0 - (y - ys.0) / (ys.1 - ys.0)),
                )
            })
            .collect();
        doc.polyline(&pts, color(i));
    }
    legend(&mut doc, &series.iter().map(|s| s.label.clone()).collect::<Vec<_>>());
    doc.finish()
}

/// Grouped bars: one group per category, one bar per metric, on `[0, 1]`.
pub fn bar_chart(title: &str, categories: &[String], metrics: &[&str], values: &[Vec<f64>]) -> String {
    let mut doc = Doc::new(W, H);
    frame(&mut doc, title, "labeled ratio", (0.0, 1.0), None);
    let (pw, ph) = (W - LEFT - RIGHT, H - TOP - BOTTOM);
    let group = pw / categories.len().max(1) as f64;
    let bar = group * 0.8 / metrics.len().max(1) as f64;
    for (c, cat) in categories.iter().enumerate() {
        let x0 = LEFT + group * c as f64 + group * 0.1;
        for (m, v) in values[c].iter().enumerate() {
            let v = v.clamp(0.0, 1.0);
            doc.rect(x0 + bar * m as f64, TOP + ph * (1.0 - v), bar * 0.9, ph * v, color(m));
        }
        doc.text(LEFT + group * (c as f64 + 0.5), TOP + ph + 16.0, 11.0, "middle", cat);
    }
    legend(&mut doc, &metrics.iter().map(|s| s.to_string()).collect::<Vec<_>>());
    doc.finish()
}
