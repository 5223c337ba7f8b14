use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_circle_mut};

use super::{EvalReport, HISTOGRAM_BINS};
use crate::data::Point;
use crate::error::{Error, Result};

/// Published comparison rows shipped with the crate.
pub const SHIPPED_BASELINES_CSV: &str = include_str!("../../data/baselines.csv");

/// A published method's row. Numbers keep their original text so reports
/// reproduce them verbatim.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineRow {
    pub method: String,
    pub mean_error: f64,
    pub mean_error_text: String,
    pub runtime_text: String,
}

/// Parses `method,mean_error,cpu_runtime_s` rows. A header line starting
/// with `method` is skipped, as are blank lines.
pub fn parse_baselines(text: &str) -> Result<Vec<BaselineRow>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || (i == 0 && line.starts_with("method")) {
            continue;
        }
        // method names may contain commas; the numbers never do
        let mut parts = line.rsplitn(3, ',');
        let (runtime, mean, method) = match (parts.next(), parts.next(), parts.next()) {
            (Some(r), Some(m), Some(name)) if !name.trim().is_empty() => (r.trim(), m.trim(), name.trim()),
            _ => return Err(Error::data(format!("baseline line {}: expected `method,mean_error,runtime`", i + 1))),
        };
        let mean_error: f64 = mean
            .parse()
            .map_err(|_| Error::data(format!("baseline line {}: mean error {mean:?} is not a number", i + 1)))?;
        if runtime.parse::<f64>().is_err() {
            return Err(Error::data(format!("baseline line {}: runtime {runtime:?} is not a number", i + 1)));
        }
        rows.push(BaselineRow {
            method: method.to_string(),
            mean_error,
            mean_error_text: mean.to_string(),
            runtime_text: runtime.to_string(),
        });
    }
    Ok(rows)
}

pub fn load_baselines(path: &Path) -> Result<Vec<BaselineRow>> {
    parse_baselines(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn shipped_baselines() -> Vec<BaselineRow> {
    parse_baselines(SHIPPED_BASELINES_CSV).expect("shipped baselines parse")
}

/// Comparison table: baseline rows verbatim, then ours, which is marked
/// `best` when its mean error is below every baseline.
pub fn compare_report(ours: &EvalReport, label: &str, baselines: &[BaselineRow]) -> String {
    let best = baselines.iter().all(|b| ours.mean_error < b.mean_error);
    let ours_runtime = if ours.fps.is_finite() && ours.fps > 0.0 {
        format!("{:.4}", 1.0 / ours.fps)
    } else {
        "-".to_string()
    };
    let mut rows: Vec<[String; 4]> = baselines
        .iter()
        .map(|b| [b.method.clone(), b.mean_error_text.clone(), b.runtime_text.clone(), String::new()])
        .collect();
    rows.push([
        label.to_string(),
        format!("{:.6}", ours.mean_error),
        ours_runtime,
        if best { "best".to_string() } else { String::new() },
    ]);
    let header = ["Methods", "Mean error", "CPU Running Time (s)", ""];
    let mut widths = header.map(str::len);
    for r in &rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let mut line = |cells: [&str; 4]| {
        let mut l = String::new();
        for (i, c) in cells.iter().enumerate() {
            let _ = write!(l, "{:<w$}  ", c, w = widths[i]);
        }
        out.push_str(l.trim_end());
        out.push('\n');
    };
    line(header);
    for r in &rows {
        line([&r[0], &r[1], &r[2], &r[3]]);
    }
    out
}

/// Bar chart of the error histogram as a standalone SVG document.
pub fn histogram_svg(histogram: &[usize; HISTOGRAM_BINS], title: &str) -> String {
    let (w, h, pad) = (560.0, 320.0, 40.0);
    let max = histogram.iter().copied().max().unwrap_or(0).max(1) as f64;
    let bar_w = (w - 2.0 * pad) / HISTOGRAM_BINS as f64;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"20\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"14\">{}</text>\n",
        w / 2.0,
        escape(title)
    );
    for (k, &c) in histogram.iter().enumerate() {
        let bh = (h - 2.0 * pad - 10.0) * c as f64 / max;
        let x = pad + k as f64 * bar_w;
        let y = h - pad - bh;
        let label = if k + 1 == HISTOGRAM_BINS { "0.1".to_string() } else { format!("{:.2}", k as f64 / 100.0) };
        let _ = writeln!(
            svg,
            "<rect x=\"{:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{bh:.1}\" fill=\"#4a78b5\"/>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{c}</text>\
             <text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\" font-family=\"sans-serif\" font-size=\"10\">{label}</text>",
            x + 2.0,
            bar_w - 4.0,
            x + bar_w / 2.0,
            y - 3.0,
            x + bar_w / 2.0,
            h - pad + 14.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Draws the prediction as a filled red dot and, when given, the ground
/// truth as a green ring.
pub fn draw_overlay(image: &RgbImage, pred: Point, truth: Option<Point>) -> RgbImage {
    let mut out = image.clone();
    let r = ((image.width().min(image.height()) as f64) / 80.0).round().max(2.0) as i32;
    if let Some(t) = truth {
        let c = (t.x.round() as i32, t.y.round() as i32);
        draw_hollow_circle_mut(&mut out, c, r + 2, Rgb([40, 220, 60]));
        draw_hollow_circle_mut(&mut out, c, r + 3, Rgb([40, 220, 60]));
    }
    draw_filled_circle_mut(&mut out, (pred.x.round() as i32, pred.y.round() as i32), r, Rgb([230, 30, 30]));
    out
}
