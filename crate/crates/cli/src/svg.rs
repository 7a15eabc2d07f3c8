//! Minimal deterministic SVG plotting: axes, scatter, lines, segments.
//! No timestamps or external resources, so identical inputs render to
//! byte-identical files.

pub struct Panel {
    pub title: String,
    pub xlabel: String,
    pub ylabel: String,
    x_range: (f64, f64),
    y_range: (f64, f64),
    shapes: Vec<String>,
}

const PANEL_W: f64 = 560.0;
const PANEL_H: f64 = 340.0;
const MARGIN_L: f64 = 64.0;
const MARGIN_R: f64 = 16.0;
const MARGIN_T: f64 = 32.0;
const MARGIN_B: f64 = 44.0;

fn fmt(v: f64) -> String {
    if v == 0.0 {
        "0".into()
    } else if v.abs() >= 0.01 && v.abs() < 10_000.0 {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

impl Panel {
    pub fn new(title: &str, xlabel: &str, ylabel: &str) -> Self {
        Panel {
            title: title.into(),
            xlabel: xlabel.into(),
            ylabel: ylabel.into(),
            x_range: (0.0, 1.0),
            y_range: (0.0, 1.0),
            shapes: Vec::new(),
        }
    }

    pub fn set_ranges(&mut self, xs: &[f64], ys: &[f64]) {
        let pad = |lo: f64, hi: f64| {
            let span = (hi - lo).abs().max(1e-12);
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let (xlo, xhi) = min_max(xs);
        let (ylo, yhi) = min_max(ys);
        self.x_range = pad(xlo, xhi);
        self.y_range = pad(ylo, yhi);
    }

    pub fn set_ranges_explicit(&mut self, x_range: (f64, f64), y_range: (f64, f64)) {
        self.x_range = x_range;
        self.y_range = y_range;
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN_L + (x - self.x_range.0) / (self.x_range.1 - self.x_range.0)
            * (PANEL_W - MARGIN_L - MARGIN_R)
    }

    fn sy(&self, y: f64) -> f64 {
        PANEL_H - MARGIN_B
            - (y - self.y_range.0) / (self.y_range.1 - self.y_range.0)
                * (PANEL_H - MARGIN_T - MARGIN_B)
    }

    pub fn scatter(&mut self, pts: &[(f64, f64)], radius: f64, color: &str) {
        for (x, y) in pts {
            self.shapes.push(format!(
                r##"<circle cx="{:.2}" cy="{:.2}" r="{radius}" fill="{color}" fill-opacity="0.65"/>"##,
                self.sx(*x),
                self.sy(*y)
            ));
        }
    }

    pub fn line(&mut self, pts: &[(f64, f64)], width: f64, color: &str) {
        if pts.len() < 2 {
            return;
        }
        let path: Vec<String> = pts
            .iter()
            .enumerate()
            .map(|(i, (x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, self.sx(*x), self.sy(*y))
            })
            .collect();
        self.shapes.push(format!(
            r##"<path d="{}" stroke="{color}" stroke-width="{width}" fill="none"/>"##,
            path.join(" ")
        ));
    }

    pub fn hline(&mut self, y: f64, color: &str, dashed: bool) {
        let dash = if dashed { r##" stroke-dasharray="6,4""## } else { "" };
        self.shapes.push(format!(
            r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="{color}" stroke-width="1"{dash}/>"##,
            self.sx(self.x_range.0),
            self.sy(y),
            self.sx(self.x_range.1),
            self.sy(y)
        ));
    }

    /// Vertical interval segment with end caps.
    pub fn interval(&mut self, x: f64, lo: f64, hi: f64, color: &str) {
        let (sx, slo, shi) = (self.sx(x), self.sy(lo), self.sy(hi));
        self.shapes.push(format!(
            r##"<line x1="{sx:.2}" y1="{slo:.2}" x2="{sx:.2}" y2="{shi:.2}" stroke="{color}" stroke-width="2"/>"##
        ));
        for s in [slo, shi] {
            self.shapes.push(format!(
                r##"<line x1="{:.2}" y1="{s:.2}" x2="{:.2}" y2="{s:.2}" stroke="{color}" stroke-width="2"/>"##,
                sx - 4.0,
                sx + 4.0
            ));
        }
    }

    pub fn marker(&mut self, x: f64, y: f64, color: &str) {
        self.shapes.push(format!(
            r##"<circle cx="{:.2}" cy="{:.2}" r="4" fill="{color}"/>"##,
            self.sx(x),
            self.sy(y)
        ));
    }

    pub fn x_tick_label(&mut self, x: f64, label: &str) {
        self.shapes.push(format!(
            r##"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle" fill="#333">{label}</text>"##,
            self.sx(x),
            PANEL_H - MARGIN_B + 16.0
        ));
    }

    fn render_axes(&self) -> String {
        let mut out = String::new();
        let x0 = MARGIN_L;
        let x1 = PANEL_W - MARGIN_R;
        let y0 = PANEL_H - MARGIN_B;
        let y1 = MARGIN_T;
        out.push_str(&format!(
            r##"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="#444" stroke-width="1"/>"##,
            x1 - x0,
            y0 - y1
        ));
        for i in 0..=4 {
            let fx = self.x_range.0 + (self.x_range.1 - self.x_range.0) * i as f64 / 4.0;
            let fy = self.y_range.0 + (self.y_range.1 - self.y_range.0) * i as f64 / 4.0;
            let sx = self.sx(fx);
            let sy = self.sy(fy);
            out.push_str(&format!(
                r##"<line x1="{sx:.2}" y1="{y0}" x2="{sx:.2}" y2="{}" stroke="#444"/>"##,
                y0 + 4.0
            ));
            out.push_str(&format!(
                r##"<text x="{sx:.2}" y="{}" font-size="11" text-anchor="middle" fill="#333">{}</text>"##,
                y0 + 16.0,
                fmt(fx)
            ));
            out.push_str(&format!(
                r##"<line x1="{}" y1="{sy:.2}" x2="{x0}" y2="{sy:.2}" stroke="#444"/>"##,
                x0 - 4.0
            ));
            out.push_str(&format!(
                r##"<text x="{}" y="{:.2}" font-size="11" text-anchor="end" fill="#333">{}</text>"##,
                x0 - 7.0,
                sy + 4.0,
                fmt(fy)
            ));
        }
        out.push_str(&format!(
            r##"<text x="{:.2}" y="18" font-size="13" text-anchor="middle" fill="#111">{}</text>"##,
            0.5 * (x0 + x1),
            self.title
        ));
        out.push_str(&format!(
            r##"<text x="{:.2}" y="{}" font-size="12" text-anchor="middle" fill="#111">{}</text>"##,
            0.5 * (x0 + x1),
            PANEL_H - 8.0,
            self.xlabel
        ));
        out.push_str(&format!(
            r##"<text x="16" y="{:.2}" font-size="12" text-anchor="middle" fill="#111" transform="rotate(-90 16 {:.2})">{}</text>"##,
            0.5 * (y0 + y1),
            0.5 * (y0 + y1),
            self.ylabel
        ));
        out
    }

    fn render_group(&self, dy: f64) -> String {
        format!(
            r##"<g transform="translate(0,{dy})">{}{}</g>"##,
            self.render_axes(),
            self.shapes.join("")
        )
    }
}

/// Stack panels vertically into one SVG document.
pub fn render_figure(panels: &[Panel]) -> String {
    let total_h = PANEL_H * panels.len() as f64;
    let mut out = format!(
        r##"<svg xmlns="http://www.w3.org/2000/svg" width="{PANEL_W}" height="{total_h}" viewBox="0 0 {PANEL_W} {total_h}"><rect width="100%" height="100%" fill="white"/>"##
    );
    for (i, p) in panels.iter().enumerate() {
        out.push_str(&p.render_group(i as f64 * PANEL_H));
    }
    out.push_str("</svg>\n");
    out
}

fn min_max(v: &[f64]) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for x in v {
        if x.is_finite() {
            lo = lo.min(*x);
            hi = hi.max(*x);
        }
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else {
        (lo, hi)
    }
}
