//! Dependency-free SVG line charts for the emitted CSVs.

use std::io::Write;
use std::path::Path;

use crate::error::Result;

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// One named series of (x, y) points.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// Renders a simple multi-series line chart.
pub fn line_chart<P: AsRef<Path>>(
    path: P,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.points.iter().copied()).collect();
    let (x0, x1) = span(pts.iter().map(|p| p.0));
    let (y0, y1) = span(pts.iter().map(|p| p.1));
    let sx = |x: f64| MARGIN + (x - x0) / (x1 - x0).max(1e-12) * (W - 2.0 * MARGIN);
    let sy = |y: f64| H - MARGIN - (y - y0) / (y1 - y0).max(1e-12) * (H - 2.0 * MARGIN);

    writeln!(
        f,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    )?;
    writeln!(f, r#"<rect width="{W}" height="{H}" fill="white"/>"#)?;
    writeln!(
        f,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        xml_escape(title)
    )?;
    // axes
    writeln!(
        f,
        r#"<line x1="{m}" y1="{b}" x2="{r}" y2="{b}" stroke="black"/><line x1="{m}" y1="{t}" x2="{m}" y2="{b}" stroke="black"/>"#,
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN,
        t = MARGIN
    )?;
    writeln!(
        f,
        r#"<text x="{}" y="{}" text-anchor="middle" font-size="12">{}</text>"#,
        W / 2.0,
        H - 12.0,
        xml_escape(x_label)
    )?;
    writeln!(
        f,
        r#"<text x="14" y="{}" text-anchor="middle" font-size="12" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        xml_escape(y_label)
    )?;
    // extrema ticks
    for (v, x, y, anchor) in [
        (x0, sx(x0), H - MARGIN + 16.0, "middle"),
        (x1, sx(x1), H - MARGIN + 16.0, "middle"),
    ] {
        writeln!(
            f,
            r#"<text x="{x}" y="{y}" text-anchor="{anchor}" font-size="10">{v:.3}</text>"#
        )?;
    }
    for (v, y) in [(y0, sy(y0)), (y1, sy(y1))] {
        writeln!(
            f,
            r#"<text x="{}" y="{}" text-anchor="end" font-size="10">{v:.3}</text>"#,
            MARGIN - 6.0,
            y + 4.0
        )?;
    }
    for (si, s) in series.iter().enumerate() {
        let color = COLORS[si % COLORS.len()];
        let path_data: Vec<String> = s
            .points
            .iter()
            .enumerate()
            .map(|(i, &(x, y))| {
                format!("{}{:.2},{:.2}", if i == 0 { "M" } else { "L" }, sx(x), sy(y))
            })
            .collect();
        writeln!(
            f,
            r#"<path d="{}" fill="none" stroke="{color}" stroke-width="1.5"/>"#,
            path_data.join(" ")
        )?;
        writeln!(
            f,
            r#"<text x="{}" y="{}" font-size="11" fill="{color}">{}</text>"#,
            W - MARGIN + 4.0,
            MARGIN + 14.0 * si as f64,
            xml_escape(&s.label)
        )?;
    }
    writeln!(f, "</svg>")?;
    Ok(())
}

fn span<I: Iterator<Item = f64>>(values: I) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if lo == hi {
        (lo - 0.5, hi + 0.5)
    } else {
        (lo, hi)
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_valid_svg() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chart.svg");
        line_chart(
            &path,
            "ner vs rate",
            "code rate",
            "NER",
            &[Series {
                label: "Hom".into(),
                points: vec![(0.33, 0.001), (0.5, 0.004), (0.67, 0.01)],
            }],
        )
        .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.contains("</svg>"));
        assert!(text.contains("Hom"));
    }
}
