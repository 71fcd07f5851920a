//! Report rendering: deterministic SVG line plots and markdown tables built
//! from archived result CSVs only, never from live models.

/// One plotted line.
#[derive(Debug, Clone)]
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];
const W: f64 = 640.0;
const H: f64 = 420.0;
const ML: f64 = 64.0; // left margin
const MR: f64 = 24.0;
const MT: f64 = 40.0;
const MB: f64 = 56.0;

fn fmt(v: f64) -> String {
    format!("{v:.4}")
}

/// Render a line plot with labeled axes. X ticks default to the union of the
/// series' x coordinates, which makes discrete sweeps (shots, margins) render
/// one tick per swept value.
pub fn line_plot_svg(
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series],
    x_ticks: Option<&[f64]>,
) -> String {
    let mut xs: Vec<f64> = match x_ticks {
        Some(t) => t.to_vec(),
        None => {
            let mut v: Vec<f64> =
                series.iter().flat_map(|s| s.points.iter().map(|p| p.0)).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        }
    };
    if xs.is_empty() {
        xs.push(0.0);
    }
    let (x0, x1) = (xs[0], *xs.last().unwrap());
    let xspan = (x1 - x0).max(1e-9);
    let mut ys: Vec<f64> = series.iter().flat_map(|s| s.points.iter().map(|p| p.1)).collect();
    ys.sort_by(f64::total_cmp);
    let (mut y0, mut y1) = match (ys.first(), ys.last()) {
        (Some(&a), Some(&b)) => (a, b),
        _ => (0.0, 1.0),
    };
    let pad = ((y1 - y0) * 0.1).max(0.02);
    y0 = (y0 - pad).max(0.0);
    y1 = (y1 + pad).min(1.0).max(y0 + 0.01);
    let yspan = y1 - y0;

    let px = |x: f64| ML + (x - x0) / xspan * (W - ML - MR);
    let py = |y: f64| H - MB - (y - y0) / yspan * (H - MT - MB);

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"24\" font-family=\"sans-serif\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        W / 2.0
    ));
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ML}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        H - MB,
        W - MR,
        H - MB
    ));
    svg.push_str(&format!("<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n", H - MB));
    // x ticks
    for &x in &xs {
        let xx = px(x);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
            fmt(xx),
            H - MB,
            fmt(xx),
            H - MB + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"middle\" class=\"xtick\">{}</text>\n",
            fmt(xx),
            H - MB + 20.0,
            trim_num(x)
        ));
    }
    // y ticks at 5 even positions
    for i in 0..=4 {
        let y = y0 + yspan * i as f64 / 4.0;
        let yy = py(y);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{ML}\" y2=\"{}\" stroke=\"black\"/>\n",
            ML - 5.0,
            fmt(yy),
            fmt(yy)
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            fmt(yy + 4.0),
            fmt(y)
        ));
    }
    // axis labels
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\">{x_label}</text>\n",
        (ML + W - MR) / 2.0,
        H - 12.0
    ));
    svg.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"sans-serif\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 16 {})\">{y_label}</text>\n",
        (MT + H - MB) / 2.0,
        (MT + H - MB) / 2.0
    ));
    // series
    for (i, s) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let mut pts = s.points.clone();
        pts.sort_by(|a, b| a.0.total_cmp(&b.0));
        let path: Vec<String> = pts.iter().map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y)))).collect();
        if path.len() > 1 {
            svg.push_str(&format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
                path.join(" ")
            ));
        }
        for &(x, y) in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"3\" fill=\"{color}\"/>\n",
                fmt(px(x)),
                fmt(py(y))
            ));
        }
        // legend entry
        let ly = MT + 16.0 * i as f64;
        svg.push_str(&format!(
            "<rect x=\"{}\" y=\"{}\" width=\"10\" height=\"10\" fill=\"{color}\"/>\n",
            W - MR - 150.0,
            ly
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"11\">{}</text>\n",
            W - MR - 136.0,
            ly + 9.0,
            s.label
        ));
    }
    svg.push_str("</svg>\n");
    svg
}

fn trim_num(x: f64) -> String {
    if x == x.floor() && x.abs() < 1e6 {
        format!("{}", x as i64)
    } else {
        let s = format!("{x}");
        s
    }
}

/// A markdown table from header and string rows (values passed through
/// verbatim so they match the CSV exactly).
pub fn markdown_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str("| ");
    out.push_str(&header.join(" | "));
    out.push_str(" |\n|");
    for _ in header {
        out.push_str("---|");
    }
    out.push('\n');
    for row in rows {
        out.push_str("| ");
        out.push_str(&row.join(" | "));
        out.push_str(" |\n");
    }
    out
}
