//! Minimal SVG renderings for the analysis reports.

const PALETTE: [&str; 10] =
    ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Grey-scale distance heatmap, darker is closer, with label-group rules.
pub fn heatmap(n: usize, data: &[f64], labels: &[String]) -> String {
    let cell = (600.0 / n.max(1) as f64).clamp(1.0, 24.0);
    let side = cell * n as f64;
    let max = data.iter().copied().fold(0.0f64, f64::max).max(f64::MIN_POSITIVE);
    let mut out = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{w}\" viewBox=\"0 0 {w} {w}\">\n",
        w = side + 80.0
    );
    out.push_str("<g transform=\"translate(70,10)\">\n");
    for i in 0..n {
        for j in 0..n {
            let shade = (255.0 * data[i * n + j] / max).round() as u8;
            out.push_str(&format!(
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{cell:.2}\" height=\"{cell:.2}\" fill=\"rgb({shade},{shade},{shade})\"/>\n",
                j as f64 * cell,
                i as f64 * cell
            ));
        }
    }
    let mut start = 0;
    for i in 1..=n {
        if i == n || labels[i] != labels[start] {
            let y = (start + i) as f64 / 2.0 * cell;
            out.push_str(&format!(
                "<text x=\"-4\" y=\"{y:.2}\" font-size=\"10\" text-anchor=\"end\">{}</text>\n",
                escape(&labels[start])
            ));
            if i < n {
                let p = i as f64 * cell;
                out.push_str(&format!(
                    "<line x1=\"0\" y1=\"{p:.2}\" x2=\"{side:.2}\" y2=\"{p:.2}\" stroke=\"red\" stroke-width=\"0.5\"/>\n\
                     <line x1=\"{p:.2}\" y1=\"0\" x2=\"{p:.2}\" y2=\"{side:.2}\" stroke=\"red\" stroke-width=\"0.5\"/>\n"
                ));
            }
            start = i;
        }
    }
    out.push_str("</g>\n</svg>\n");
    out
}

/// Scatter plot coloured by label, with a legend.
pub fn scatter(points: &[[f64; 2]], labels: &[String]) -> String {
    let (w, h) = (640.0, 480.0);
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        x0 = x0.min(p[0]);
        x1 = x1.max(p[0]);
        y0 = y0.min(p[1]);
        y1 = y1.max(p[1]);
    }
    let sx = if x1 > x0 { (w - 160.0) / (x1 - x0) } else { 1.0 };
    let sy = if y1 > y0 { (h - 40.0) / (y1 - y0) } else { 1.0 };
    let mut groups: Vec<&String> = labels.iter().collect();
    groups.sort();
    groups.dedup();
    let color = |l: &String| PALETTE[groups.iter().position(|g| *g == l).unwrap_or(0) % PALETTE.len()];
    let mut out =
        format!("<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n");
    for (p, l) in points.iter().zip(labels) {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"><title>{}</title></circle>\n",
            20.0 + (p[0] - x0) * sx,
            h - 20.0 - (p[1] - y0) * sy,
            color(l),
            escape(l)
        ));
    }
    for (i, g) in groups.iter().enumerate() {
        let y = 20.0 + 14.0 * i as f64;
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{y}\" r=\"4\" fill=\"{}\"/><text x=\"{}\" y=\"{}\" font-size=\"11\">{}</text>\n",
            w - 120.0,
            color(g),
            w - 110.0,
            y + 4.0,
            escape(g)
        ));
    }
    out.push_str("</svg>\n");
    out
}
