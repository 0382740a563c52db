//! Minimal self-contained SVG line charts. Each chart carries its data in a
//! comment so plots diff cleanly.

use std::fmt::Write;

use crate::output::fmt_g9;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 400.0;
const LEFT: f64 = 70.0;
const RIGHT: f64 = 200.0;
const TOP: f64 = 40.0;
const BOTTOM: f64 = 50.0;
const COLORS: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    /// Plot x on a log2 axis (beam sizes).
    pub log_x: bool,
    pub series: Vec<Series>,
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace("--", "- -")
}

fn range(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in vals.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        return (lo - 0.5, hi + 0.5);
    }
    let pad = 0.05 * (hi - lo);
    (lo - pad, hi + pad)
}

impl Chart {
    fn tx(&self, x: f64) -> f64 {
        if self.log_x {
            x.max(f64::MIN_POSITIVE).log2()
        } else {
            x
        }
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let pts = || self.series.iter().flat_map(|se| se.points.iter());
        let (x0, x1) = range(pts().map(|p| self.tx(p.0)));
        let (y0, y1) = range(pts().map(|p| p.1));
        let pw = WIDTH - LEFT - RIGHT;
        let ph = HEIGHT - TOP - BOTTOM;
        let px = |x: f64| LEFT + (self.tx(x) - x0) / (x1 - x0) * pw;
        let py = |y: f64| TOP + (1.0 - (y - y0) / (y1 - y0)) * ph;

        let _ = writeln!(
            s,
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">"
        );
        s.push_str("<!-- data\n");
        for se in &self.series {
            let _ = write!(s, "series {}:", escape(&se.label));
            for (x, y) in &se.points {
                let _ = write!(s, " {},{}", fmt_g9(*x), fmt_g9(*y));
            }
            s.push('\n');
        }
        s.push_str("-->\n");
        let _ = writeln!(s, "<rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>");
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"15\" text-anchor=\"middle\">{}</text>",
            LEFT + pw / 2.0,
            escape(&self.title)
        );
        let _ = writeln!(
            s,
            "<rect x=\"{LEFT}\" y=\"{TOP}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"black\"/>"
        );

        // Ticks: five evenly spaced on y, data x values when few, else five.
        for i in 0..=4 {
            let y = y0 + (y1 - y0) * i as f64 / 4.0;
            let yy = py(y);
            let _ = writeln!(
                s,
                "<line x1=\"{}\" y1=\"{yy:.2}\" x2=\"{LEFT}\" y2=\"{yy:.2}\" stroke=\"black\"/><text x=\"{}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>",
                LEFT - 5.0,
                LEFT - 8.0,
                yy + 4.0,
                fmt_short(y)
            );
        }
        let mut xs: Vec<f64> = pts().map(|p| p.0).collect();
        xs.sort_by(f64::total_cmp);
        xs.dedup();
        if xs.len() > 8 {
            xs = (0..=4).map(|i| xs[0] + (xs[xs.len() - 1] - xs[0]) * i as f64 / 4.0).collect();
        }
        for x in xs {
            let xx = px(x);
            let _ = writeln!(
                s,
                "<line x1=\"{xx:.2}\" y1=\"{}\" x2=\"{xx:.2}\" y2=\"{}\" stroke=\"black\"/><text x=\"{xx:.2}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\">{}</text>",
                TOP + ph,
                TOP + ph + 5.0,
                TOP + ph + 18.0,
                fmt_short(x)
            );
        }
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            LEFT + pw / 2.0,
            HEIGHT - 12.0,
            escape(&self.x_label)
        );
        let _ = writeln!(
            s,
            "<text transform=\"translate(16 {}) rotate(-90)\" font-family=\"sans-serif\" font-size=\"12\" text-anchor=\"middle\">{}</text>",
            TOP + ph / 2.0,
            escape(&self.y_label)
        );

        for (k, se) in self.series.iter().enumerate() {
            let color = COLORS[k % COLORS.len()];
            let path: Vec<String> = se
                .points
                .iter()
                .filter(|p| p.1.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
                .collect();
            let _ = writeln!(
                s,
                "<polyline class=\"series\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>",
                path.join(" ")
            );
            for p in &path {
                let (cx, cy) = p.split_once(',').expect("pair");
                let _ = writeln!(s, "<circle cx=\"{cx}\" cy=\"{cy}\" r=\"3\" fill=\"{color}\"/>");
            }
            let ly = TOP + 14.0 + 18.0 * k as f64;
            let lx = WIDTH - RIGHT + 12.0;
            let _ = writeln!(
                s,
                "<line x1=\"{lx}\" y1=\"{ly}\" x2=\"{}\" y2=\"{ly}\" stroke=\"{color}\" stroke-width=\"2\"/><text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>",
                lx + 20.0,
                lx + 26.0,
                ly + 4.0,
                escape(&se.label)
            );
        }
        s.push_str("</svg>\n");
        s
    }
}

fn fmt_short(x: f64) -> String {
    let r = (x * 1000.0).round() / 1000.0;
    fmt_g9(if r == 0.0 { 0.0 } else { r })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_one_polyline_per_series() {
        let c = Chart {
            title: "t <x>".into(),
            x_label: "beam".into(),
            y_label: "bleu".into(),
            log_x: true,
            series: vec![
                Series { label: "a".into(), points: vec![(1.0, 2.0), (4.0, 3.0)] },
                Series { label: "b".into(), points: vec![(1.0, 1.0)] },
            ],
        };
        let svg = c.render();
        assert_eq!(svg.matches("class=\"series\"").count(), 2);
        assert!(svg.contains("series a: 1,2 4,3"));
        assert!(svg.contains("t &lt;x&gt;"));
        assert_eq!(svg, c.render());
    }
}
