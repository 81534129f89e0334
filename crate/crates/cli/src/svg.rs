//! Hand-written SVG for rate/cost tradeoff plots.

use std::fmt::Write;

/// Everything drawn on one plot, already evaluated.
#[derive(Debug, Clone, Default)]
pub struct PlotData {
    pub title: String,
    pub b_min: f64,
    /// Converse samples `(b, nats)`.
    pub lower: Vec<(f64, f64)>,
    /// Upper-bound samples `(b, nats)`.
    pub upper: Vec<(f64, f64)>,
    pub points: Vec<PlotPoint>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlotPoint {
    /// Distortion that produced the point.
    pub d: f64,
    pub b: f64,
    pub nats: f64,
    pub diverged: bool,
}

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 480.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 180.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 60.0;

/// Round tick step near `span / 5`: 1, 2 or 5 times a power of ten.
fn tick_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    let r = raw / mag;
    let f = if r < 1.5 {
        1.0
    } else if r < 3.5 {
        2.0
    } else if r < 7.5 {
        5.0
    } else {
        10.0
    };
    f * mag
}

fn ticks(lo: f64, hi: f64) -> (Vec<f64>, usize) {
    let step = tick_step(hi - lo);
    let decimals = (-step.log10().floor()).max(0.0) as usize;
    let first = (lo / step).ceil() as i64;
    let last = (hi / step).floor() as i64;
    ((first..=last).map(|i| i as f64 * step).collect(), decimals)
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn px(&self, x: f64) -> f64 {
        LEFT + (x - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)
    }

    fn py(&self, y: f64) -> f64 {
        HEIGHT - BOTTOM - (y - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn polyline(out: &mut String, f: &Frame, pts: &[(f64, f64)], style: &str) {
    let coords: Vec<String> = pts
        .iter()
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|&(x, y)| format!("{:.2},{:.2}", f.px(x), f.py(y.min(f.y1 * 10.0))))
        .collect();
    if coords.len() >= 2 {
        let _ = writeln!(out, r#"<polyline clip-path="url(#plot)" fill="none" {style} points="{}"/>"#, coords.join(" "));
    }
}

/// Renders the plot. Output depends only on `data`, so it is byte-stable.
pub fn render(data: &PlotData) -> String {
    let finite: Vec<&PlotPoint> = data.points.iter().filter(|p| !p.diverged && p.b.is_finite()).collect();
    let x_max_data = finite.iter().map(|p| p.b).fold(data.b_min * 2.0, f64::max);
    let x0 = 0.0f64.min(data.b_min);
    let x1 = x_max_data * 1.05;
    let y_data = finite
        .iter()
        .map(|p| p.nats)
        .chain(data.upper.iter().map(|u| u.1).filter(|y| y.is_finite()))
        .fold(1.0f64, f64::max);
    let frame = Frame {
        x0,
        x1,
        y0: 0.0,
        y1: y_data * 1.15,
    };
    let (pl, pr, pt, pb) = (LEFT, WIDTH - RIGHT, TOP, HEIGHT - BOTTOM);

    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(out, r##"<rect width="{WIDTH}" height="{HEIGHT}" fill="#ffffff"/>"##);
    let _ = writeln!(
        out,
        r#"<clipPath id="plot"><rect x="{pl}" y="{pt}" width="{}" height="{}"/></clipPath>"#,
        pr - pl,
        pb - pt
    );
    let _ = writeln!(out, r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#, (pl + pr) / 2.0, escape(&data.title));

    // Axes and ticks.
    let _ = writeln!(out, r##"<g id="axes" stroke="#000000">"##);
    let _ = writeln!(out, r#"<line x1="{pl}" y1="{pb}" x2="{pr}" y2="{pb}"/>"#);
    let _ = writeln!(out, r#"<line x1="{pl}" y1="{pb}" x2="{pl}" y2="{pt}"/>"#);
    let _ = writeln!(out, "</g>");
    let (xt, xdec) = ticks(frame.x0, frame.x1);
    for x in xt {
        let px = frame.px(x);
        let _ = writeln!(out, r##"<line x1="{px:.2}" y1="{pb}" x2="{px:.2}" y2="{}" stroke="#000000"/>"##, pb + 5.0);
        let _ = writeln!(out, r#"<text x="{px:.2}" y="{}" text-anchor="middle">{x:.xdec$}</text>"#, pb + 18.0);
    }
    let (yt, ydec) = ticks(frame.y0, frame.y1);
    for y in yt {
        let py = frame.py(y);
        let _ = writeln!(out, r##"<line x1="{}" y1="{py:.2}" x2="{pl}" y2="{py:.2}" stroke="#000000"/>"##, pl - 5.0);
        let _ = writeln!(out, r#"<text x="{}" y="{:.2}" text-anchor="end">{y:.ydec$}</text>"#, pl - 8.0, py + 4.0);
    }
    let _ = writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">cost b</text>"#, (pl + pr) / 2.0, HEIGHT - 15.0);
    let _ = writeln!(
        out,
        r#"<text x="18" y="{0}" text-anchor="middle" transform="rotate(-90 18 {0})">rate (nats per step)</text>"#,
        (pt + pb) / 2.0
    );

    // Cost floor.
    let bx = frame.px(data.b_min);
    let _ = writeln!(
        out,
        r##"<line id="b-min" x1="{bx:.2}" y1="{pb}" x2="{bx:.2}" y2="{pt}" stroke="#777777" stroke-dasharray="4 4"/>"##
    );
    let _ = writeln!(out, r##"<text x="{:.2}" y="{}" fill="#555555">b_min = {:.4}</text>"##, bx + 4.0, pt + 12.0, data.b_min);

    polyline(&mut out, &frame, &data.lower, r##"id="lower" stroke="#1f5fbf" stroke-width="2""##);
    polyline(&mut out, &frame, &data.upper, r##"id="upper" stroke="#c0392b" stroke-width="2" stroke-dasharray="8 4""##);

    let _ = writeln!(out, r#"<g id="points">"#);
    for p in &finite {
        let _ = writeln!(out, r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="#000000"/>"##, frame.px(p.b), frame.py(p.nats));
    }
    let _ = writeln!(out, "</g>");

    // Legend, with diverged runs listed as hollow markers.
    let lx = pr + 15.0;
    let _ = writeln!(out, r#"<g id="legend">"#);
    let _ = writeln!(out, r##"<line x1="{lx}" y1="{0}" x2="{1}" y2="{0}" stroke="#1f5fbf" stroke-width="2"/>"##, pt + 10.0, lx + 25.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">converse</text>"#, lx + 32.0, pt + 14.0);
    let _ = writeln!(
        out,
        r##"<line x1="{lx}" y1="{0}" x2="{1}" y2="{0}" stroke="#c0392b" stroke-width="2" stroke-dasharray="8 4"/>"##,
        pt + 30.0,
        lx + 25.0
    );
    let _ = writeln!(out, r#"<text x="{}" y="{}">upper bound</text>"#, lx + 32.0, pt + 34.0);
    let _ = writeln!(out, r##"<circle cx="{}" cy="{}" r="4" fill="#000000"/>"##, lx + 12.5, pt + 50.0);
    let _ = writeln!(out, r#"<text x="{}" y="{}">simulated</text>"#, lx + 32.0, pt + 54.0);
    let diverged: Vec<&PlotPoint> = data.points.iter().filter(|p| p.diverged || !p.b.is_finite()).collect();
    if !diverged.is_empty() {
        let _ = writeln!(out, r#"<text x="{lx}" y="{}">diverged:</text>"#, pt + 80.0);
        for (i, p) in diverged.iter().enumerate() {
            let y = pt + 98.0 + 16.0 * i as f64;
            let _ = writeln!(
                out,
                r##"<circle class="diverged" cx="{}" cy="{}" r="4" fill="none" stroke="#000000"/>"##,
                lx + 12.5,
                y - 4.0
            );
            let _ = writeln!(out, r#"<text x="{}" y="{y}">d = {:.4}</text>"#, lx + 32.0, p.d);
        }
    }
    let _ = writeln!(out, "</g>");
    out.push_str("</svg>\n");
    out
}
