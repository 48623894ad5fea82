use std::fmt::Write as _;

const W: f64 = 480.0;
const H: f64 = 360.0;
const PAD: f64 = 56.0;

fn span(vals: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = vals.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Standalone SVG scatter plot with `r` in the title. Output depends only
/// on the arguments.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)], r: f64) -> String {
    let (x0, x1) = span(points.iter().map(|p| p.0));
    let (y0, y1) = span(points.iter().map(|p| p.1));
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#);
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<text x="{}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{title} (r = {r:.3})</text>"#,
        W / 2.0
    );
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} L{PAD} {b} L{e} {b}" stroke="black" fill="none"/>"#,
        b = H - PAD,
        e = W - PAD
    );
    for (v, anchor_x) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{anchor_x}" y="{}" font-family="sans-serif" font-size="11" text-anchor="middle">{v:.3}</text>"#,
            H - PAD + 16.0
        );
    }
    for (v, anchor_y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{anchor_y}" font-family="sans-serif" font-size="11" text-anchor="end">{v:.3}</text>"#,
            PAD - 6.0
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle">{x_label}</text>"#,
        W / 2.0,
        H - 14.0
    );
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" font-family="sans-serif" font-size="13" text-anchor="middle" transform="rotate(-90 16 {})">{y_label}</text>"#,
        H / 2.0,
        H / 2.0
    );
    for &(x, y) in points {
        let _ =
            writeln!(s, r##"<circle cx="{:.2}" cy="{:.2}" r="3" fill="#2a6fb0" fill-opacity="0.7"/>"##, px(x), py(y));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_circle_per_point() {
        let pts = [(5.0, 0.1), (20.0, 0.3), (45.0, 0.7)];
        let svg = scatter_svg("phi vs sigma", "sigma", "mean phi", &pts, 0.98);
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("r = 0.980"));
        assert_eq!(svg, scatter_svg("phi vs sigma", "sigma", "mean phi", &pts, 0.98));
        assert!(scatter_svg("t", "x", "y", &[(1.0, 1.0)], 0.0).contains("<circle"));
    }
}
