//! Minimal self-contained SVG plots (bars with error whiskers, scatter).

fn header(w: f64, h: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"{w}\" height=\"{h}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" font-family=\"monospace\" font-size=\"16\" text-anchor=\"middle\">{}</text>\n",
        w / 2.0,
        escape(title)
    )
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

const PALETTE: &[&str] = &["#4878cf", "#ee854a", "#6acc65", "#d65f5f", "#956cb4", "#8c613c"];

/// Bar chart with one bar per label and +/- whiskers.
pub fn bar_chart(title: &str, ylabel: &str, labels: &[String], means: &[f64], errs: &[f64]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 20.0, 50.0, 70.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let top = means
        .iter()
        .zip(errs)
        .map(|(m, e)| m + e)
        .fold(0.0_f64, f64::max)
        .max(1e-12)
        * 1.15;
    let mut out = header(w, h, title);
    // axes
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    ));
    for t in 0..=4 {
        let val = top * t as f64 / 4.0;
        let y = h - mb - plot_h * t as f64 / 4.0;
        out.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{val:.3}</text>\n",
            ml - 5.0,
            ml - 8.0,
            y + 4.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" transform=\"rotate(-90 16 {0})\" text-anchor=\"middle\">{}</text>\n",
        mt + plot_h / 2.0,
        escape(ylabel)
    ));
    let n = labels.len() as f64;
    let slot = plot_w / n;
    let bw = slot * 0.6;
    for (i, ((label, &mean), &err)) in labels.iter().zip(means).zip(errs).enumerate() {
        let cx = ml + slot * (i as f64 + 0.5);
        let bh = plot_h * mean / top;
        let y = h - mb - bh;
        let color = PALETTE[i % PALETTE.len()];
        out.push_str(&format!(
            "<rect x=\"{}\" y=\"{y}\" width=\"{bw}\" height=\"{bh}\" fill=\"{color}\"/>\n",
            cx - bw / 2.0
        ));
        if err > 0.0 {
            let e = plot_h * err / top;
            out.push_str(&format!(
                "<line x1=\"{cx}\" y1=\"{}\" x2=\"{cx}\" y2=\"{}\" stroke=\"black\"/>\n\
                 <line x1=\"{}\" y1=\"{2}\" x2=\"{}\" y2=\"{2}\" stroke=\"black\"/>\n\
                 <line x1=\"{3}\" y1=\"{5}\" x2=\"{4}\" y2=\"{5}\" stroke=\"black\"/>\n",
                y - e,
                y + e,
                cx - 6.0,
                cx + 6.0,
                y - e,
                y + e,
            ));
        }
        out.push_str(&format!(
            "<text x=\"{cx}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" text-anchor=\"middle\">{}</text>\n",
            h - mb + 18.0,
            escape(label)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Scatter plot: one colored point series per group (x = arbitrary index).
pub fn scatter(title: &str, ylabel: &str, groups: &[(String, Vec<(f64, f64)>)]) -> String {
    let (w, h) = (640.0, 420.0);
    let (ml, mr, mt, mb) = (70.0, 150.0, 50.0, 50.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let all: Vec<(f64, f64)> = groups.iter().flat_map(|(_, pts)| pts.iter().cloned()).collect();
    let (mut x0, mut x1, mut y1) = (f64::MAX, f64::MIN, f64::MIN);
    for &(x, y) in &all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y1 = y1.max(y);
    }
    if all.is_empty() {
        x0 = 0.0;
        x1 = 1.0;
        y1 = 1.0;
    }
    let y0 = 0.0;
    let y1 = (y1 * 1.15).max(1e-12);
    let xr = (x1 - x0).max(1e-12);
    let mut out = header(w, h, title);
    out.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n\
         <line x1=\"{ml}\" y1=\"{0}\" x2=\"{1}\" y2=\"{0}\" stroke=\"black\"/>\n",
        h - mb,
        w - mr
    ));
    for t in 0..=4 {
        let val = y0 + (y1 - y0) * t as f64 / 4.0;
        let y = h - mb - plot_h * t as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\" text-anchor=\"end\">{val:.3}</text>\n",
            ml - 8.0,
            y + 4.0
        ));
    }
    out.push_str(&format!(
        "<text x=\"16\" y=\"{}\" font-family=\"monospace\" font-size=\"12\" transform=\"rotate(-90 16 {0})\" text-anchor=\"middle\">{}</text>\n",
        mt + plot_h / 2.0,
        escape(ylabel)
    ));
    for (g, (name, pts)) in groups.iter().enumerate() {
        let color = PALETTE[g % PALETTE.len()];
        for &(x, y) in pts {
            let px = ml + plot_w * (x - x0) / xr;
            let py = h - mb - plot_h * (y - y0) / (y1 - y0);
            out.push_str(&format!(
                "<circle cx=\"{px}\" cy=\"{py}\" r=\"4\" fill=\"{color}\" fill-opacity=\"0.8\"/>\n"
            ));
        }
        let ly = mt + 16.0 * g as f64;
        out.push_str(&format!(
            "<circle cx=\"{}\" cy=\"{ly}\" r=\"4\" fill=\"{color}\"/>\n\
             <text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"12\">{}</text>\n",
            w - mr + 12.0,
            w - mr + 22.0,
            ly + 4.0,
            escape(name)
        ));
    }
    out.push_str("</svg>\n");
    out
}
