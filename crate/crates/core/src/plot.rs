//! Dependency-free SVG emission of training curves: one file per
//! metric x split, overlaying the labeled runs with epoch on the x axis.

use crate::error::{Error, Result};
use crate::experiment::write_atomic;
use crate::metrics::{Metric, MetricsLog, Split};
use std::path::{Path, PathBuf};

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 420.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

fn fmt_tick(v: f64) -> String {
    if v == 0.0 {
        return "0".into();
    }
    let a = v.abs();
    if a >= 0.01 && a < 10000.0 {
        let s = format!("{v:.4}");
        let s = s.trim_end_matches('0').trim_end_matches('.');
        s.to_string()
    } else {
        format!("{v:.2e}")
    }
}

struct Curve<'a> {
    label: &'a str,
    points: Vec<(usize, f64)>,
}

fn render_svg(title: &str, curves: &[Curve<'_>]) -> String {
    let max_epoch = curves
        .iter()
        .flat_map(|c| c.points.iter().map(|&(e, _)| e))
        .max()
        .unwrap_or(0)
        .max(1) as f64;
    let (mut y_min, mut y_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for c in curves {
        for &(_, v) in &c.points {
            y_min = y_min.min(v);
            y_max = y_max.max(v);
        }
    }
    if y_min == y_max {
        y_min -= 0.5;
        y_max += 0.5;
    }
    let pad = (y_max - y_min) * 0.05;
    let (y_lo, y_hi) = (y_min - pad, y_max + pad);

    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let x_of = |e: f64| MARGIN_L + plot_w * e / max_epoch;
    let y_of = |v: f64| MARGIN_T + plot_h * (1.0 - (v - y_lo) / (y_hi - y_lo));

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" viewBox=\"0 0 {WIDTH} {HEIGHT}\" \
         font-family=\"sans-serif\" font-size=\"12\">\n"
    ));
    s.push_str(&format!(
        "  <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n"
    ));
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"24\" font-size=\"16\" text-anchor=\"middle\">{title}</text>\n",
        MARGIN_L + plot_w / 2.0
    ));
    // axes
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{:.1}\" x2=\"{:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B,
        WIDTH - MARGIN_R,
        HEIGHT - MARGIN_B
    ));
    s.push_str(&format!(
        "  <line x1=\"{MARGIN_L}\" y1=\"{MARGIN_T}\" x2=\"{MARGIN_L}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
        HEIGHT - MARGIN_B
    ));
    // ticks
    for i in 0..=5 {
        let e = max_epoch * i as f64 / 5.0;
        let x = x_of(e);
        s.push_str(&format!(
            "  <line x1=\"{x:.1}\" y1=\"{:.1}\" x2=\"{x:.1}\" y2=\"{:.1}\" stroke=\"black\"/>\n",
            HEIGHT - MARGIN_B,
            HEIGHT - MARGIN_B + 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{x:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{}</text>\n",
            HEIGHT - MARGIN_B + 18.0,
            fmt_tick(e)
        ));
        let v = y_lo + (y_hi - y_lo) * i as f64 / 5.0;
        let y = y_of(v);
        s.push_str(&format!(
            "  <line x1=\"{:.1}\" y1=\"{y:.1}\" x2=\"{MARGIN_L}\" y2=\"{y:.1}\" stroke=\"black\"/>\n",
            MARGIN_L - 5.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"end\">{}</text>\n",
            MARGIN_L - 8.0,
            y + 4.0,
            fmt_tick(v)
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">epoch</text>\n",
        MARGIN_L + plot_w / 2.0,
        HEIGHT - 10.0
    ));
    // curves
    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c
            .points
            .iter()
            .map(|&(e, v)| format!("{:.2},{:.2}", x_of(e as f64), y_of(v)))
            .collect();
        s.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        let ly = MARGIN_T + 16.0 * i as f64 + 10.0;
        let lx = WIDTH - MARGIN_R + 12.0;
        s.push_str(&format!(
            "  <line x1=\"{lx:.1}\" y1=\"{ly:.1}\" x2=\"{:.1}\" y2=\"{ly:.1}\" stroke=\"{color}\" stroke-width=\"1.5\"/>\n",
            lx + 20.0
        ));
        s.push_str(&format!(
            "  <text x=\"{:.1}\" y=\"{:.1}\">{}</text>\n",
            lx + 26.0,
            ly + 4.0,
            c.label
        ));
    }
    s.push_str("</svg>\n");
    s
}

/// Overlay the labeled metric logs: one SVG per metric x split that the runs
/// share, named `<metric>_<split>.svg`. The runs must share at least one
/// metric, and every log must be non-empty.
pub fn emit_plots(csvs: &[PathBuf], labels: &[String], out_dir: &Path) -> Result<Vec<PathBuf>> {
    if csvs.is_empty() {
        return Err(Error::Config("no metrics CSVs given".into()));
    }
    if csvs.len() != labels.len() {
        return Err(Error::Config(format!(
            "{} CSVs but {} labels",
            csvs.len(),
            labels.len()
        )));
    }
    let logs: Vec<MetricsLog> = csvs
        .iter()
        .map(|p| MetricsLog::read_csv(p))
        .collect::<Result<_>>()?;
    for (log, path) in logs.iter().zip(csvs) {
        if log.rows.is_empty() {
            return Err(Error::Data(format!("{}: empty metrics CSV", path.display())));
        }
    }
    // metrics shared by every run
    let shared: Vec<Metric> = logs[0]
        .metrics()
        .into_iter()
        .filter(|m| logs.iter().all(|l| l.metrics().contains(m)))
        .collect();
    if shared.is_empty() {
        return Err(Error::Data("runs share no metric names".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for metric in shared {
        for split in [Split::Train, Split::Test] {
            let curves: Vec<Curve<'_>> = logs
                .iter()
                .zip(labels)
                .filter_map(|(log, label)| {
                    let points = log.values(split, metric);
                    (!points.is_empty()).then(|| Curve {
                        label: label.as_str(),
                        points,
                    })
                })
                .collect();
            if curves.is_empty() {
                continue;
            }
            let title = format!("{metric} ({split})");
            let svg = render_svg(&title, &curves);
            let path = out_dir.join(format!("{metric}_{split}.svg"));
            write_atomic(&path, svg.as_bytes())?;
            written.push(path);
        }
    }
    Ok(written)
}
