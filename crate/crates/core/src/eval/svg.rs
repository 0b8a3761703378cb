//! Dependency-free SVG rendering: rectangles and text only.

use std::fmt::Write;

use super::MetricsReport;

const CELL: usize = 28;
const MARGIN: usize = 110;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Row-normalized confusion matrix, one `<rect class="cell">` per entry.
pub fn confusion_svg(report: &MetricsReport) -> String {
    let c = report.class_names.len();
    let size = MARGIN + c * CELL + 10;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" font-family="sans-serif" font-size="9">"#
    );
    for (i, name) in report.class_names.iter().enumerate() {
        let y = MARGIN + i * CELL + CELL / 2 + 3;
        let _ = writeln!(s, r#"<text x="{}" y="{y}" text-anchor="end">{}</text>"#, MARGIN - 4, escape(name));
        let x = MARGIN + i * CELL + CELL / 2;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{}" text-anchor="start" transform="rotate(-60 {x} {})">{}</text>"#,
            MARGIN - 4,
            MARGIN - 4,
            escape(name)
        );
    }
    for (i, row) in report.confusion.iter().enumerate() {
        let total: u64 = row.iter().sum();
        for (j, &n) in row.iter().enumerate() {
            let frac = if total == 0 { 0.0 } else { n as f64 / total as f64 };
            let shade = (255.0 * (1.0 - frac)).round() as u8;
            let (x, y) = (MARGIN + j * CELL, MARGIN + i * CELL);
            let _ = writeln!(
                s,
                r##"<rect class="cell" x="{x}" y="{y}" width="{CELL}" height="{CELL}" fill="rgb({shade},{shade},255)" stroke="#ccc"/>"##
            );
            let ink = if frac > 0.5 { "white" } else { "black" };
            let _ = writeln!(
                s,
                r#"<text x="{}" y="{}" text-anchor="middle" fill="{ink}">{n}</text>"#,
                x + CELL / 2,
                y + CELL / 2 + 3
            );
        }
    }
    s.push_str("</svg>\n");
    s
}

/// Per-class recall bars followed by overall and grouped accuracy.
pub fn accuracy_bars_svg(report: &MetricsReport) -> String {
    let mut bars: Vec<(String, Option<f64>)> =
        report.class_names.iter().cloned().zip(report.per_class_recall.iter().copied()).collect();
    bars.push(("overall".into(), Some(report.overall_accuracy_anatomical)));
    bars.push(("grouped".into(), Some(report.grouped_cluster_accuracy)));
    let (bar_w, plot_h) = (24usize, 200usize);
    let width = 50 + bars.len() * (bar_w + 6) + 10;
    let height = plot_h + 110;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="9">"#
    );
    let base = 10 + plot_h;
    for tick in 0..=4 {
        let y = base - plot_h * tick / 4;
        let _ = writeln!(s, r##"<rect x="40" y="{y}" width="{}" height="1" fill="#ddd"/>"##, width - 50);
        let _ = writeln!(s, r#"<text x="36" y="{}" text-anchor="end">{:.2}</text>"#, y + 3, tick as f64 / 4.0);
    }
    for (k, (name, value)) in bars.iter().enumerate() {
        let x = 50 + k * (bar_w + 6);
        if let Some(v) = value {
            let h = (v.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
            let fill = if k >= bars.len() - 2 { "#c0392b" } else { "#2e86c1" };
            let _ = writeln!(s, r#"<rect class="bar" x="{x}" y="{}" width="{bar_w}" height="{h}" fill="{fill}"/>"#, base - h);
        }
        let cx = x + bar_w / 2;
        let _ = writeln!(
            s,
            r#"<text x="{cx}" y="{}" text-anchor="end" transform="rotate(-60 {cx} {})">{}</text>"#,
            base + 8,
            base + 8,
            escape(name)
        );
    }
    s.push_str("</svg>\n");
    s
}
