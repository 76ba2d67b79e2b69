//! Minimal SVG emitter for the sweep scatter: AVTE on x, minimal distance on
//! y, one median marker per cell with whiskers from Q1 − IQR to Q3 + IQR.

use std::fmt::Write;

use riskmm::corridor::Quartiles;

pub struct Cell {
    pub label: String,
    pub series: usize,
    pub avte: Quartiles,
    pub min_distance: Quartiles,
}

const W: f64 = 640.0;
const H: f64 = 440.0;
const PAD: f64 = 60.0;
const COLORS: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

fn whisker(q: &Quartiles) -> (f64, f64) {
    (q.q1 - q.iqr(), q.q3 + q.iqr())
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = ((hi - lo) * 0.08).max(1e-3);
    (lo - pad, hi + pad)
}

pub fn render(cells: &[Cell], series_names: &[String]) -> String {
    let (x0, x1) = range(cells.iter().flat_map(|c| {
        let (a, b) = whisker(&c.avte);
        [a, b]
    }));
    let (y0, y1) = range(cells.iter().flat_map(|c| {
        let (a, b) = whisker(&c.min_distance);
        [a, b]
    }));
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {top} V{bot} H{right}" stroke="black" fill="none"/>"#,
        top = PAD,
        bot = H - PAD,
        right = W - PAD
    );
    for i in 0..=4 {
        let t = i as f64 / 4.0;
        let (xv, yv) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{xv:.2}</text>"#,
            sx(xv),
            H - PAD + 16.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{yv:.2}</text>"#,
            PAD - 6.0,
            sy(yv) + 4.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">AVTE</text>"#,
        W / 2.0,
        H - 18.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">min distance [m]</text>"#,
        H / 2.0,
        H / 2.0
    );
    for c in cells {
        let color = COLORS[c.series % COLORS.len()];
        let (mx, my) = (sx(c.avte.median), sy(c.min_distance.median));
        let (wx0, wx1) = whisker(&c.avte);
        let (wy0, wy1) = whisker(&c.min_distance);
        let _ = writeln!(
            s,
            r#"<path d="M{:.1} {my:.1} H{:.1} M{mx:.1} {:.1} V{:.1}" stroke="{color}" stroke-width="1"/>"#,
            sx(wx0),
            sx(wx1),
            sy(wy0),
            sy(wy1)
        );
        let _ = writeln!(s, r#"<circle cx="{mx:.1}" cy="{my:.1}" r="4" fill="{color}"/>"#);
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" fill="{color}">{}</text>"#,
            mx + 6.0,
            my - 6.0,
            c.label
        );
    }
    for (i, name) in series_names.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let y = PAD - 30.0 + 14.0 * i as f64;
        let _ = writeln!(s, r#"<circle cx="{:.1}" cy="{y:.1}" r="4" fill="{color}"/>"#, W - PAD - 90.0);
        let _ = writeln!(s, r#"<text x="{:.1}" y="{:.1}">{name}</text>"#, W - PAD - 80.0, y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_markers_and_legend() {
        let q = Quartiles::of(&[1.0, 2.0, 3.0]).unwrap();
        let cells = vec![Cell {
            label: "1e-3".into(),
            series: 0,
            avte: q,
            min_distance: q,
        }];
        let svg = render(&cells, &["optimistic".into()]);
        assert!(svg.starts_with("<svg"));
        assert_eq!(svg.matches("<circle").count(), 2);
        assert!(svg.contains("optimistic"));
        assert!(svg.trim_end().ends_with("</svg>"));
    }
}
