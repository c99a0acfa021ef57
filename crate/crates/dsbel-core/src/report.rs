//! Report emission: metrics CSV plus dependency-free SVG 1.1 charts
//! (ROC/PR line charts and class-colored PCA scatter panels).

use crate::dataset::Label;
use crate::error::Result;
use crate::metrics::MetricsRecord;
use std::path::Path;

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 60.0;
const MARGIN_R: f64 = 20.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;
const GRIDLINES: usize = 5;
const PALETTE: [&str; 4] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd"];

/// One row of `report.csv`.
#[derive(Clone, Debug)]
pub struct ReportRow {
    pub model: String,
    pub metrics: MetricsRecord,
}

/// Columns: model,accuracy,f1,mcc,recall,precision,auc — 4 decimals.
pub fn metrics_csv(rows: &[ReportRow]) -> String {
    let mut s = String::from("model,accuracy,f1,mcc,recall,precision,auc\n");
    for r in rows {
        let m = &r.metrics;
        s.push_str(&format!(
            "{},{:.4},{:.4},{:.4},{:.4},{:.4},{:.4}\n",
            r.model, m.accuracy, m.f1, m.mcc, m.recall, m.precision, m.auc
        ));
    }
    s
}

pub fn write_metrics_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    std::fs::write(path, metrics_csv(rows))?;
    Ok(())
}

/// A named curve over the unit square, e.g. one classifier's ROC.
#[derive(Clone, Debug)]
pub struct NamedCurve {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    /// shown in the legend when present (the AUC for ROC charts)
    pub auc: Option<f64>,
}

fn px(x: f64) -> f64 {
    MARGIN_L + x * (WIDTH - MARGIN_L - MARGIN_R)
}

fn py(y: f64) -> f64 {
    HEIGHT - MARGIN_B - y * (HEIGHT - MARGIN_T - MARGIN_B)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Renders a unit-square line chart (SVG 1.1, 640x480) with 5 gridlines
/// per axis, one polyline per curve and a legend.
pub fn line_chart_svg(title: &str, x_label: &str, y_label: &str, curves: &[NamedCurve]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        xml_escape(title)
    ));
    // gridlines and tick labels at 0.2 intervals (5 lines inside the frame)
    for i in 1..=GRIDLINES {
        let v = i as f64 / GRIDLINES as f64;
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            px(v), py(0.0), px(v), py(1.0)
        ));
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"#dddddd\"/>\n",
            px(0.0), py(v), px(1.0), py(v)
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"11\">{v:.1}</text>\n",
            px(v), py(0.0) + 16.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" font-size=\"11\">{v:.1}</text>\n",
            px(0.0) - 6.0, py(v) + 4.0
        ));
    }
    // axes
    s.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        px(0.0), py(0.0), px(1.0), py(0.0)
    ));
    s.push_str(&format!(
        "  <line x1=\"{:.1}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        px(0.0), py(0.0), px(0.0), py(1.0)
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\">{}</text>\n",
        px(0.5), HEIGHT - 12.0, xml_escape(x_label)
    ));
    s.push_str(&format!(
        "  <text x=\"16\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"13\" transform=\"rotate(-90 16 {:.1})\">{}</text>\n",
        py(0.5), py(0.5), xml_escape(y_label)
    ));
    for (i, curve) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = curve
            .points
            .iter()
            .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
            .collect();
        s.push_str(&format!(
            "  <polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            pts.join(" ")
        ));
        // legend
        let ly = MARGIN_T + 14.0 + i as f64 * 18.0;
        let lx = px(1.0) - 190.0;
        s.push_str(&format!(
            "  <line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            lx + 24.0
        ));
        let label = match curve.auc {
            Some(a) => format!("{} (AUC {:.4})", curve.name, a),
            None => curve.name.clone(),
        };
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" font-family=\"sans-serif\" font-size=\"12\">{}</text>\n",
            lx + 30.0,
            ly + 4.0,
            xml_escape(&label)
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Two scatter panels (PC1 vs PC2, PC1 vs PC3) colored by class, in one
/// 640x480 SVG. `projected` rows must have at least 3 columns.
pub fn pca_scatter_svg(projected: &[Vec<f64>], labels: &[Label]) -> String {
    let panels = [(0usize, 1usize, "PC1 vs PC2"), (0, 2, "PC1 vs PC3")];
    let panel_w = WIDTH / 2.0;
    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    for (panel, (ax, ay, title)) in panels.iter().enumerate() {
        let x0 = panel as f64 * panel_w + 45.0;
        let x1 = (panel + 1) as f64 * panel_w - 15.0;
        let y0 = HEIGHT - 45.0;
        let y1 = 55.0;
        // data ranges with a small pad so points sit inside the frame
        let (mut lo_x, mut hi_x) = (f64::INFINITY, f64::NEG_INFINITY);
        let (mut lo_y, mut hi_y) = (f64::INFINITY, f64::NEG_INFINITY);
        for row in projected {
            lo_x = lo_x.min(row[*ax]);
            hi_x = hi_x.max(row[*ax]);
            lo_y = lo_y.min(row[*ay]);
            hi_y = hi_y.max(row[*ay]);
        }
        let pad_x = ((hi_x - lo_x) * 0.05).max(1e-9);
        let pad_y = ((hi_y - lo_y) * 0.05).max(1e-9);
        lo_x -= pad_x;
        hi_x += pad_x;
        lo_y -= pad_y;
        hi_y += pad_y;
        let sx = |v: f64| x0 + (v - lo_x) / (hi_x - lo_x) * (x1 - x0);
        let sy = |v: f64| y0 - (v - lo_y) / (hi_y - lo_y) * (y0 - y1);
        s.push_str(&format!(
            "  <rect x=\"{x0:.1}\" y=\"{y1:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"none\" stroke=\"black\"/>\n",
            x1 - x0,
            y0 - y1
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"40\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{title}</text>\n",
            (x0 + x1) / 2.0
        ));
        for (row, label) in projected.iter().zip(labels) {
            let color = if *label == Label::Malware { PALETTE[1] } else { PALETTE[0] };
            s.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2.5\" fill=\"{color}\" fill-opacity=\"0.7\"/>\n",
                sx(row[*ax]),
                sy(row[*ay])
            ));
        }
    }
    // shared legend
    for (i, (name, color)) in [("benign", PALETTE[0]), ("malware", PALETTE[1])]
        .iter()
        .enumerate()
    {
        let lx = 60.0 + i as f64 * 110.0;
        let ly = HEIGHT - 16.0;
        s.push_str(&format!(
            "  <circle cx=\"{lx:.1}\" cy=\"{:.1}\" r=\"4\" fill=\"{color}\"/>\n",
            ly - 4.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{ly:.1}\" font-family=\"sans-serif\" font-size=\"12\">{name}</text>\n",
            lx + 10.0
        ));
    }
    s.push_str("</svg>\n");
    s
}
