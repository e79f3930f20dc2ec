//! Self-contained SVG charts.

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Vertical bars, one per `(label, value)`; values are drawn relative to the largest magnitude.
pub fn bar_chart(title: &str, bars: &[(String, f64)]) -> String {
    let (w, h, pad, base) = (80 * bars.len().max(1) + 80, 320, 40.0, 260.0);
    let max = bars.iter().map(|b| b.1.abs()).fold(0.0f64, f64::max).max(1e-12);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{pad}\" y=\"20\" font-size=\"14\">{}</text>\n",
        escape(title)
    );
    for (i, (label, value)) in bars.iter().enumerate() {
        let x = pad + 80.0 * i as f64;
        let bh = 200.0 * value.abs() / max;
        let y = if *value >= 0.0 { base - bh } else { base };
        out.push_str(&format!(
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"56\" height=\"{bh:.1}\" fill=\"#4878a8\"/>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{value:.3}</text>\n\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            x + 28.0,
            y - 4.0,
            x + 28.0,
            base + 16.0,
            escape(label)
        ));
    }
    out.push_str(&format!(
        "<line x1=\"{pad}\" y1=\"{base}\" x2=\"{}\" y2=\"{base}\" stroke=\"black\"/>\n</svg>\n",
        w as f64 - pad
    ));
    out
}

/// Rows of cells shaded by value (white = 0, dark = row maximum).
pub fn heatmap(title: &str, rows: &[(String, Vec<f64>)], cell: usize) -> String {
    let cols = rows.iter().map(|r| r.1.len()).max().unwrap_or(0);
    let label_w = 70;
    let (w, h) = (label_w + cols * cell + 20, 40 + rows.len() * (cell + 4) + 10);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" font-family=\"sans-serif\" font-size=\"11\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"10\" y=\"20\" font-size=\"14\">{}</text>\n",
        escape(title)
    );
    for (r, (label, values)) in rows.iter().enumerate() {
        let y = 34 + r * (cell + 4);
        out.push_str(&format!(
            "<text x=\"10\" y=\"{}\">{}</text>\n",
            y + cell.min(12),
            escape(label)
        ));
        let max = values.iter().copied().fold(0.0f64, f64::max).max(1e-300);
        for (c, &v) in values.iter().enumerate() {
            let shade = (255.0 * (1.0 - (v / max).clamp(0.0, 1.0))).round() as u8;
            out.push_str(&format!(
                "<rect x=\"{}\" y=\"{y}\" width=\"{cell}\" height=\"{cell}\" fill=\"rgb({shade},{shade},255)\"/>\n",
                label_w + c * cell
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charts_are_well_formed() {
        let b = bar_chart("a<b", &[("x".into(), 1.0), ("y".into(), -0.5)]);
        assert!(b.starts_with("<svg") && b.trim_end().ends_with("</svg>"));
        assert!(b.contains("a&lt;b"));
        assert_eq!(b.matches("<rect").count(), 3);
        let h = heatmap("h", &[("r".into(), vec![0.0, 1.0, 0.5])], 6);
        assert_eq!(h.matches("<rect").count(), 4);
        assert!(h.contains("rgb(255,255,255)") && h.contains("rgb(0,0,255)"));
    }
}
