// SPDX-License-Identifier: Apache-2.0

//! Minimal SVG plots built only from `path`, `line`, `circle` and `text`.

use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Scale {
    Linear,
    Log10,
}

impl Scale {
    fn map(self, v: f64) -> f64 {
        match self {
            Scale::Linear => v,
            Scale::Log10 => v.log10(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    /// Draw a polyline through the points as well as markers.
    pub line: bool,
}

#[derive(Clone, Debug)]
pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub x_scale: Scale,
    pub y_scale: Scale,
    pub series: Vec<Series>,
    /// Dashed `y = x` reference line.
    pub bisector: bool,
}

const W: f64 = 480.0;
const H: f64 = 360.0;
const LEFT: f64 = 64.0;
const RIGHT: f64 = 128.0;
const TOP: f64 = 36.0;
const BOTTOM: f64 = 48.0;
const COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f"];

pub fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() < 1e-2 || v.abs() >= 1e4) {
        format!("{v:.0e}")
    } else {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    }
}

impl Plot {
    fn usable(&self, p: (f64, f64)) -> bool {
        let ok = |v: f64, s: Scale| v.is_finite() && (s == Scale::Linear || v > 0.0);
        ok(p.0, self.x_scale) && ok(p.1, self.y_scale)
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        let pts: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|&p| self.usable(p))
            .map(|(x, y)| (self.x_scale.map(x), self.y_scale.map(y)))
            .collect();
        if pts.is_empty() {
            return (0.0, 1.0, 0.0, 1.0);
        }
        let (mut x0, mut x1, mut y0, mut y1) = pts.iter().fold(
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), &(x, y)| (a.min(x), b.max(x), c.min(y), d.max(y)),
        );
        if self.bisector {
            let (lo, hi) = (x0.min(y0), x1.max(y1));
            (x0, x1, y0, y1) = (lo, hi, lo, hi);
        }
        let pad = |a: f64, b: f64| {
            let d = if b > a { 0.05 * (b - a) } else { 0.5 };
            (a - d, b + d)
        };
        let (x0, x1) = pad(x0, x1);
        let (y0, y1) = pad(y0, y1);
        (x0, x1, y0, y1)
    }

    pub fn render(&self) -> String {
        let (x0, x1, y0, y1) = self.bounds();
        let px = |x: f64| LEFT + (self.x_scale.map(x) - x0) / (x1 - x0) * (W - LEFT - RIGHT);
        let py = |y: f64| H - BOTTOM - (self.y_scale.map(y) - y0) / (y1 - y0) * (H - TOP - BOTTOM);
        let mut s = String::new();
        writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#).unwrap();
        writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#).unwrap();
        let text = |s: &mut String, x: f64, y: f64, anchor: &str, size: u32, body: &str| {
            writeln!(
                s,
                r#"<text x="{x:.2}" y="{y:.2}" text-anchor="{anchor}" font-family="sans-serif" font-size="{size}">{}</text>"#,
                escape(body)
            )
            .unwrap();
        };
        text(&mut s, W / 2.0, 20.0, "middle", 14, &self.title);
        let (bl, br, bt, bb) = (LEFT, W - RIGHT, TOP, H - BOTTOM);
        writeln!(s, r##"<path d="M{bl} {bt} L{bl} {bb} L{br} {bb}" fill="none" stroke="#000" stroke-width="1"/>"##).unwrap();
        for i in 0..=4 {
            let f = i as f64 / 4.0;
            let (vx, vy) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
            let (lx, ly) = match (self.x_scale, self.y_scale) {
                (Scale::Log10, Scale::Log10) => (10f64.powf(vx), 10f64.powf(vy)),
                (Scale::Log10, _) => (10f64.powf(vx), vy),
                (_, Scale::Log10) => (vx, 10f64.powf(vy)),
                _ => (vx, vy),
            };
            let gx = bl + f * (br - bl);
            let gy = bb - f * (bb - bt);
            writeln!(s, r##"<line x1="{gx:.2}" y1="{bb}" x2="{gx:.2}" y2="{:.2}" stroke="#000"/>"##, bb + 4.0).unwrap();
            writeln!(s, r##"<line x1="{bl}" y1="{gy:.2}" x2="{:.2}" y2="{gy:.2}" stroke="#000"/>"##, bl - 4.0).unwrap();
            text(&mut s, gx, bb + 16.0, "middle", 10, &fmt_tick(lx));
            text(&mut s, bl - 6.0, gy + 3.0, "end", 10, &fmt_tick(ly));
        }
        text(&mut s, (bl + br) / 2.0, H - 10.0, "middle", 12, &self.x_label);
        writeln!(
            s,
            r#"<text x="14" y="{:.2}" text-anchor="middle" font-family="sans-serif" font-size="12" transform="rotate(-90 14 {:.2})">{}</text>"#,
            (bt + bb) / 2.0,
            (bt + bb) / 2.0,
            escape(&self.y_label)
        )
        .unwrap();
        if self.bisector {
            let lo = x0.max(y0);
            let hi = x1.min(y1);
            let inv = |v: f64, sc: Scale| if sc == Scale::Log10 { 10f64.powf(v) } else { v };
            writeln!(
                s,
                r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#888" stroke-dasharray="4 3"/>"##,
                px(inv(lo, self.x_scale)),
                py(inv(lo, self.y_scale)),
                px(inv(hi, self.x_scale)),
                py(inv(hi, self.y_scale))
            )
            .unwrap();
        }
        for (k, series) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let pts: Vec<(f64, f64)> = series.points.iter().copied().filter(|&p| self.usable(p)).collect();
            if series.line && pts.len() > 1 {
                let mut d = String::new();
                for (i, &(x, y)) in pts.iter().enumerate() {
                    write!(d, "{}{:.2} {:.2} ", if i == 0 { "M" } else { "L" }, px(x), py(y)).unwrap();
                }
                writeln!(s, r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#, d.trim_end()).unwrap();
            }
            for &(x, y) in &pts {
                writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(x), py(y)).unwrap();
            }
            let ly = TOP + 14.0 + 16.0 * k as f64;
            writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"#, W - RIGHT + 14.0, ly - 4.0).unwrap();
            text(&mut s, W - RIGHT + 22.0, ly, "start", 10, &series.label);
        }
        s.push_str("</svg>\n");
        s
    }
}
