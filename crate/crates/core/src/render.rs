//! SVG overlays of detections, one document per image.

use std::fmt::Write as _;

use crate::metrics::Detection;

const PALETTE: [&str; 16] = [
    "#e6194b", "#3cb44b", "#ffe119", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c", "#fabebe",
    "#008080", "#e6beff", "#9a6324", "#800000", "#aaffc3", "#000075",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

/// Color for a category. `palette_order` fixes which categories get which
/// colors; names outside it share the last slot.
pub fn category_color(category: &str, palette_order: &[String]) -> &'static str {
    let idx = palette_order
        .iter()
        .position(|c| c == category)
        .unwrap_or(palette_order.len());
    PALETTE[idx % PALETTE.len()]
}

/// Renders the boxes of one image. Only categories that occur get a legend
/// entry.
pub fn render_svg(detections: &[&Detection], width: f64, height: f64, palette_order: &[String]) -> String {
    let mut present: Vec<&str> = detections.iter().map(|d| d.category.as_str()).collect();
    present.sort_unstable();
    present.dedup();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#
    );
    let _ = writeln!(svg, r##"  <rect width="{width}" height="{height}" fill="#202020"/>"##);
    let stroke = (width.max(height) / 400.0).max(1.0);
    let _ = writeln!(svg, r#"  <g class="detections" fill="none" stroke-width="{stroke}">"#);
    for d in detections {
        let points = d
            .quad
            .vertices()
            .iter()
            .map(|p| format!("{},{}", p.x, p.y))
            .collect::<Vec<_>>()
            .join(" ");
        let _ = writeln!(
            svg,
            r#"    <polygon points="{points}" stroke="{}" data-category="{}"/>"#,
            category_color(&d.category, palette_order),
            escape(&d.category)
        );
    }
    let _ = writeln!(svg, "  </g>");

    let font = (height / 40.0).max(10.0);
    let _ = writeln!(
        svg,
        r#"  <g class="legend" font-family="sans-serif" font-size="{font}">"#
    );
    for (i, cat) in present.iter().enumerate() {
        let y = font * 1.5 * (i as f64 + 1.0);
        let color = category_color(cat, palette_order);
        let _ = writeln!(
            svg,
            r#"    <g class="legend-entry"><rect x="{}" y="{}" width="{font}" height="{font}" fill="{color}"/><text x="{}" y="{y}" fill="{color}">{}</text></g>"#,
            font * 0.5,
            y - font * 0.85,
            font * 2.0,
            escape(cat)
        );
    }
    let _ = writeln!(svg, "  </g>");
    svg.push_str("</svg>\n");
    svg
}
