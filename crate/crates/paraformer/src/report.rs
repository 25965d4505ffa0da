//! Artifact serialization: CSV tables for every probe and a minimal static
//! SVG line chart. All numeric formatting uses Rust's shortest
//! round-trip `Display` for `f64`, so identical runs produce byte-identical
//! files.

use std::path::Path;

use crate::diagnostics::{DepthSweepResult, GammaReport};
use crate::error::{Error, Result};
use crate::train::{SweepRow, TrainReport};

/// Shortest round-trip decimal rendering of a float.
pub fn fmt_f64(v: f64) -> String {
    format!("{v}")
}

/// Joins a header and rows into CSV text (no quoting — all emitted fields
/// are numeric or simple identifiers).
pub fn csv_table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut out = String::new();
    out.push_str(&header.join(","));
    out.push('\n');
    for row in rows {
        debug_assert_eq!(row.len(), header.len());
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// Learning curve: epoch, loss, the three accuracies, then one column per
/// hop weight.
pub fn train_report_csv(report: &TrainReport) -> String {
    let k_plus_one = report
        .epochs
        .first()
        .map(|e| e.gamma.len())
        .unwrap_or(report.gamma_final.len());
    let gamma_names: Vec<String> = (0..k_plus_one).map(|k| format!("gamma_{k}")).collect();
    let mut header = vec!["epoch", "loss", "acc_train", "acc_valid", "acc_test"];
    header.extend(gamma_names.iter().map(|s| s.as_str()));
    let rows: Vec<Vec<String>> = report
        .epochs
        .iter()
        .map(|e| {
            let mut row = vec![
                e.epoch.to_string(),
                fmt_f64(e.loss),
                fmt_f64(e.acc_train),
                fmt_f64(e.acc_valid),
                fmt_f64(e.acc_test),
            ];
            row.extend(e.gamma.iter().map(|&g| fmt_f64(g)));
            row
        })
        .collect();
    csv_table(&header, &rows)
}

/// Grid-sweep table, one row per cell, already sorted by the caller.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let header = [
        "lr",
        "weight_decay",
        "dropout_rate",
        "beta",
        "valid_mean",
        "valid_std",
        "test_mean",
        "test_std",
    ];
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                fmt_f64(r.lr),
                fmt_f64(r.weight_decay),
                fmt_f64(r.dropout_rate),
                fmt_f64(r.beta),
                fmt_f64(r.valid_mean),
                fmt_f64(r.valid_std),
                fmt_f64(r.test_mean),
                fmt_f64(r.test_std),
            ]
        })
        .collect();
    csv_table(&header, &body)
}

/// Depth-sweep table: depth, test accuracy and the two collapse metrics.
pub fn depth_sweep_csv(result: &DepthSweepResult) -> String {
    let rows: Vec<Vec<String>> = result
        .depths
        .iter()
        .enumerate()
        .map(|(i, &depth)| {
            vec![
                depth.to_string(),
                fmt_f64(result.test_accuracy[i]),
                fmt_f64(result.d_l2[i]),
                fmt_f64(result.s_cos[i]),
            ]
        })
        .collect();
    csv_table(&["depth", "test_accuracy", "d_l2", "s_cos"], &rows)
}

/// Generic (index, value) curve, e.g. the high-pass ratios r(K).
pub fn curve_csv(index_name: &str, value_name: &str, values: &[f64]) -> String {
    let rows: Vec<Vec<String>> = values
        .iter()
        .enumerate()
        .map(|(k, &v)| vec![k.to_string(), fmt_f64(v)])
        .collect();
    csv_table(&[index_name, value_name], &rows)
}

/// Hop-weight distribution: index, value, |value|, sign.
pub fn gamma_csv(report: &GammaReport) -> String {
    let rows: Vec<Vec<String>> = report
        .values
        .iter()
        .enumerate()
        .map(|(k, &v)| {
            vec![
                k.to_string(),
                fmt_f64(v),
                fmt_f64(report.abs_values[k]),
                report.signs[k].to_string(),
            ]
        })
        .collect();
    csv_table(&["k", "gamma", "abs_gamma", "sign"], &rows)
}

pub fn write_text(path: &Path, content: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
    }
    std::fs::write(path, content).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// SVG line charts
// ---------------------------------------------------------------------------

/// One named polyline.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
}

/// A static line chart rendered to a standalone SVG string. Deliberately
/// minimal: linear axes, min/max tick labels, one polyline per series,
/// legend in the top-right corner.
pub struct LineChart {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub series: Vec<Series>,
}

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf",
];

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

impl LineChart {
    pub fn render_svg(&self) -> String {
        const W: f64 = 800.0;
        const H: f64 = 500.0;
        const ML: f64 = 70.0; // left margin
        const MR: f64 = 30.0;
        const MT: f64 = 50.0;
        const MB: f64 = 60.0;

        let finite: Vec<(f64, f64)> = self
            .series
            .iter()
            .flat_map(|s| s.points.iter().copied())
            .filter(|(x, y)| x.is_finite() && y.is_finite())
            .collect();
        let (mut x0, mut x1) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(x, _)| {
                (lo.min(x), hi.max(x))
            });
        let (mut y0, mut y1) = finite
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, y)| {
                (lo.min(y), hi.max(y))
            });
        if finite.is_empty() {
            (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
        }
        if x0 == x1 {
            x0 -= 0.5;
            x1 += 0.5;
        }
        if y0 == y1 {
            y0 -= 0.5;
            y1 += 0.5;
        }
        let sx = |x: f64| ML + (x - x0) / (x1 - x0) * (W - ML - MR);
        let sy = |y: f64| H - MB - (y - y0) / (y1 - y0) * (H - MT - MB);

        let mut svg = String::new();
        svg.push_str(&format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {W} {H}\" \
             font-family=\"monospace\" font-size=\"13\">\n"
        ));
        svg.push_str(&format!(
            "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"28\" text-anchor=\"middle\" font-size=\"16\">{}</text>\n",
            W / 2.0,
            esc(&self.title)
        ));
        // Axes.
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            H - MB,
            W - MR,
            H - MB
        ));
        svg.push_str(&format!(
            "<line x1=\"{ML}\" y1=\"{MT}\" x2=\"{ML}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            H - MB
        ));
        // Tick labels at the extremes.
        svg.push_str(&format!(
            "<text x=\"{ML}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            H - MB + 20.0,
            fmt_f64(x0)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            W - MR,
            H - MB + 20.0,
            fmt_f64(x1)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            H - MB,
            fmt_f64(y0)
        ));
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{MT}\" text-anchor=\"end\">{}</text>\n",
            ML - 8.0,
            fmt_f64(y1)
        ));
        // Axis labels.
        svg.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            (ML + W - MR) / 2.0,
            H - 15.0,
            esc(&self.x_label)
        ));
        svg.push_str(&format!(
            "<text x=\"20\" y=\"{:.1}\" text-anchor=\"middle\" transform=\"rotate(-90 20 {:.1})\">{}</text>\n",
            (MT + H - MB) / 2.0,
            (MT + H - MB) / 2.0,
            esc(&self.y_label)
        ));
        // Series polylines and legend.
        for (i, s) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<String> = s
                .points
                .iter()
                .filter(|(x, y)| x.is_finite() && y.is_finite())
                .map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y)))
                .collect();
            if !pts.is_empty() {
                svg.push_str(&format!(
                    "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                    pts.join(" ")
                ));
            }
            let ly = MT + 18.0 * i as f64;
            svg.push_str(&format!(
                "<line x1=\"{:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
                W - MR - 150.0,
                W - MR - 120.0
            ));
            svg.push_str(&format!(
                "<text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
                W - MR - 112.0,
                ly + 4.0,
                esc(&s.label)
            ));
        }
        svg.push_str("</svg>\n");
        svg
    }
}
