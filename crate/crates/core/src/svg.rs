//! Minimal SVG plotting: line charts and histograms.
//!
//! Just enough to eyeball trajectories and distributions; the CSV series
//! stay the source of truth.

const WIDTH: f64 = 720.0;
const HEIGHT: f64 = 440.0;
const MARGIN: f64 = 50.0;
const COLORS: [&str; 4] = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728"];

fn finite_bounds(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for v in values.filter(|v| v.is_finite()) {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !lo.is_finite() || !hi.is_finite() {
        return (0.0, 1.0);
    }
    if lo == hi {
        return (lo - 0.5, hi + 0.5);
    }
    (lo, hi)
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" \
         text-anchor=\"middle\">{title}</text>\n",
        WIDTH / 2.0
    )
}

fn axes(x_label: &str, y_label: &str, x_lo: f64, x_hi: f64, y_lo: f64, y_hi: f64) -> String {
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN;
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN;
    format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{x_label}</text>\n\
         <text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\" \
         transform=\"rotate(-90 16 {})\">{y_label}</text>\n\
         <text x=\"{x0}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\">{x_lo:.3}</text>\n\
         <text x=\"{x1}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{x_hi:.3}</text>\n\
         <text x=\"{}\" y=\"{y0}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{y_lo:.3}</text>\n\
         <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"10\" text-anchor=\"end\">{y_hi:.3}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 12.0,
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        y0 + 16.0,
        y0 + 16.0,
        x0 - 4.0,
        x0 - 4.0,
        y1 + 4.0,
    )
}

/// Multi-series line chart; `series` pairs a legend label with (x, y)
/// points.
pub fn line_chart(title: &str, x_label: &str, y_label: &str, series: &[(String, Vec<(f64, f64)>)]) -> String {
    let (x_lo, x_hi) = finite_bounds(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.0)));
    let (y_lo, y_hi) = finite_bounds(series.iter().flat_map(|(_, pts)| pts.iter().map(|p| p.1)));
    let sx = (WIDTH - 2.0 * MARGIN) / (x_hi - x_lo);
    let sy = (HEIGHT - 2.0 * MARGIN) / (y_hi - y_lo);

    let mut out = header(title);
    out.push_str(&axes(x_label, y_label, x_lo, x_hi, y_lo, y_hi));
    for (idx, (label, pts)) in series.iter().enumerate() {
        let color = COLORS[idx % COLORS.len()];
        let path: Vec<String> = pts
            .iter()
            .map(|&(x, y)| {
                let px = MARGIN + (x - x_lo) * sx;
                let py = HEIGHT - MARGIN - (y - y_lo) * sy;
                format!("{px:.2},{py:.2}")
            })
            .collect();
        out.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" fill=\"{color}\">{label}</text>\n",
            WIDTH - MARGIN - 140.0,
            MARGIN + 16.0 * (idx as f64 + 1.0),
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Fixed-bin histogram of a sample.
pub fn histogram(title: &str, x_label: &str, values: &[f64], bins: usize) -> String {
    let bins = bins.max(1);
    let (lo, hi) = finite_bounds(values.iter().copied());
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &v in values {
        if v.is_finite() {
            let b = (((v - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
    }
    let max_count = counts.iter().copied().max().unwrap_or(1).max(1) as f64;

    let mut out = header(title);
    out.push_str(&axes(x_label, "count", lo, hi, 0.0, max_count));
    let plot_w = WIDTH - 2.0 * MARGIN;
    let plot_h = HEIGHT - 2.0 * MARGIN;
    for (b, &c) in counts.iter().enumerate() {
        let bar_h = plot_h * c as f64 / max_count;
        let x = MARGIN + plot_w * b as f64 / bins as f64;
        let y = HEIGHT - MARGIN - bar_h;
        out.push_str(&format!(
            "<rect x=\"{x:.2}\" y=\"{y:.2}\" width=\"{:.2}\" height=\"{bar_h:.2}\" \
             fill=\"#1f77b4\" stroke=\"white\" stroke-width=\"0.5\"/>\n",
            plot_w / bins as f64
        ));
    }
    out.push_str("</svg>\n");
    out
}
