//! Minimal line and scatter plots as SVG text.

use std::fmt::Write as _;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN: f64 = 56.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Linear,
    Log,
}

#[derive(Debug, Clone)]
enum Mark {
    Line(Vec<(f64, f64)>),
    Points(Vec<(f64, f64)>),
    Steps(Vec<(f64, f64, f64)>),
}

#[derive(Debug, Clone)]
struct Series {
    label: String,
    mark: Mark,
}

/// A single panel with shared axes and a legend.
#[derive(Debug, Clone)]
pub struct Plot {
    title: String,
    x_label: String,
    y_label: String,
    x_axis: Axis,
    y_axis: Axis,
    series: Vec<Series>,
    markers: Vec<f64>,
}

impl Plot {
    pub fn new(title: &str, x_label: &str, y_label: &str) -> Self {
        Self {
            title: title.into(),
            x_label: x_label.into(),
            y_label: y_label.into(),
            x_axis: Axis::Linear,
            y_axis: Axis::Linear,
            series: Vec::new(),
            markers: Vec::new(),
        }
    }

    pub fn axes(mut self, x: Axis, y: Axis) -> Self {
        self.x_axis = x;
        self.y_axis = y;
        self
    }

    pub fn line(&mut self, label: &str, pts: Vec<(f64, f64)>) {
        self.series.push(Series { label: label.into(), mark: Mark::Line(pts) });
    }

    pub fn scatter(&mut self, label: &str, pts: Vec<(f64, f64)>) {
        self.series.push(Series { label: label.into(), mark: Mark::Points(pts) });
    }

    /// Histogram bars as `(left, right, height)`.
    pub fn bars(&mut self, label: &str, bins: Vec<(f64, f64, f64)>) {
        self.series.push(Series { label: label.into(), mark: Mark::Steps(bins) });
    }

    /// Vertical guide line at `x`.
    pub fn marker(&mut self, x: f64) {
        self.markers.push(x);
    }

    fn points(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.series.iter().flat_map(|s| -> Vec<(f64, f64)> {
            match &s.mark {
                Mark::Line(p) | Mark::Points(p) => p.clone(),
                Mark::Steps(b) => b.iter().flat_map(|&(l, r, h)| [(l, 0.0), (r, h)]).collect(),
            }
        })
    }

    fn range(&self, pick: impl Fn((f64, f64)) -> f64, axis: Axis) -> (f64, f64) {
        let vals: Vec<f64> = self
            .points()
            .map(&pick)
            .filter(|v| v.is_finite() && (axis == Axis::Linear || *v > 0.0))
            .map(|v| if axis == Axis::Log { v.log10() } else { v })
            .collect();
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            return (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            return (lo - 0.5, hi + 0.5);
        }
        let pad = 0.04 * (hi - lo);
        (lo - pad, hi + pad)
    }

    pub fn render(&self) -> String {
        let (x0, x1) = self.range(|p| p.0, self.x_axis);
        let (y0, y1) = self.range(|p| p.1, self.y_axis);
        let tx = |v: f64| {
            let v = if self.x_axis == Axis::Log { v.max(1e-300).log10() } else { v };
            MARGIN + (v - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN)
        };
        let ty = |v: f64| {
            let v = if self.y_axis == Axis::Log { v.max(1e-300).log10() } else { v };
            HEIGHT - MARGIN - (v - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN)
        };

        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(
            s,
            r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
            WIDTH - 2.0 * MARGIN,
            HEIGHT - 2.0 * MARGIN
        );
        let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, escape(&self.title));
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, WIDTH / 2.0, HEIGHT - 14.0, escape(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{}</text>"#,
            HEIGHT / 2.0,
            HEIGHT / 2.0,
            escape(&self.y_label)
        );
        for i in 0..=4 {
            let u = i as f64 / 4.0;
            let (xv, yv) = (x0 + u * (x1 - x0), y0 + u * (y1 - y0));
            let xl = if self.x_axis == Axis::Log { 10f64.powf(xv) } else { xv };
            let yl = if self.y_axis == Axis::Log { 10f64.powf(yv) } else { yv };
            let px = MARGIN + u * (WIDTH - 2.0 * MARGIN);
            let py = HEIGHT - MARGIN - u * (HEIGHT - 2.0 * MARGIN);
            let _ = writeln!(s, r#"<text x="{px:.1}" y="{:.1}" text-anchor="middle">{}</text>"#, HEIGHT - MARGIN + 14.0, tick(xl));
            let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{}</text>"#, MARGIN - 4.0, py + 4.0, tick(yl));
        }
        for &m in &self.markers {
            let px = tx(m);
            let _ = writeln!(
                s,
                r#"<line x1="{px:.2}" y1="{MARGIN}" x2="{px:.2}" y2="{}" stroke="gray" stroke-dasharray="4 3"/>"#,
                HEIGHT - MARGIN
            );
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            match &series.mark {
                Mark::Line(pts) => {
                    let path: Vec<String> = pts
                        .iter()
                        .filter(|(x, y)| x.is_finite() && y.is_finite())
                        .map(|&(x, y)| format!("{:.2},{:.2}", tx(x), ty(y)))
                        .collect();
                    let _ = writeln!(s, r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#, path.join(" "));
                }
                Mark::Points(pts) => {
                    for &(x, y) in pts.iter().filter(|(x, y)| x.is_finite() && y.is_finite()) {
                        let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.8" fill="{color}" fill-opacity="0.6"/>"#, tx(x), ty(y));
                    }
                }
                Mark::Steps(bins) => {
                    for &(l, r, h) in bins {
                        let (a, b) = (tx(l), tx(r));
                        let (top, base) = (ty(h), ty(y0.max(0.0)));
                        let _ = writeln!(
                            s,
                            r#"<rect x="{a:.2}" y="{top:.2}" width="{:.2}" height="{:.2}" fill="{color}" fill-opacity="0.4"/>"#,
                            (b - a).max(0.0),
                            (base - top).max(0.0)
                        );
                    }
                }
            }
            let ly = MARGIN + 14.0 + 14.0 * i as f64;
            let lx = WIDTH - MARGIN - 150.0;
            let _ = writeln!(s, r#"<rect x="{lx}" y="{}" width="10" height="10" fill="{color}"/>"#, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, lx + 14.0, escape(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> std::io::Result<()> {
        std::fs::write(path, self.render())
    }
}

fn tick(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 1e4 || v.abs() < 1e-2 {
        format!("{v:.1e}")
    } else {
        format!("{v:.3}")
    }
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
