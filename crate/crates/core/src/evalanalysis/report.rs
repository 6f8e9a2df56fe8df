//! CSV, JSON and SVG export.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::evalanalysis::{DecodedSample, EvalReport};
use crate::fisher::SensitivityTable;
use crate::training::LossTrace;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn embedding_csv(embedding: &[[f64; 2]], labels: &[String], layer: usize) -> Result<String> {
    if embedding.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} coordinates for {} labels",
            embedding.len(),
            labels.len()
        )));
    }
    let mut out = String::from("x,y,label,layer\n");
    for ([x, y], label) in embedding.iter().zip(labels) {
        writeln!(out, "{x},{y},{},{layer}", csv_field(label)).unwrap();
    }
    Ok(out)
}

pub fn sensitivity_csv(table: &SensitivityTable) -> String {
    let mut out = String::from("flat_index,layer");
    for t in &table.tasks {
        write!(out, ",score_{}", csv_field(t)).unwrap();
    }
    out.push('\n');
    for (idx, scores) in &table.rows {
        write!(out, "{idx},{}", table.layer).unwrap();
        for s in scores {
            write!(out, ",{s}").unwrap();
        }
        out.push('\n');
    }
    out
}

pub fn samples_csv(samples: &[DecodedSample]) -> String {
    let mut out = String::from("a,op,b,truth,prediction\n");
    for s in samples {
        writeln!(out, "{},{},{},{},{}", s.a, s.op.symbol(), s.b, s.truth, s.prediction).unwrap();
    }
    out
}

pub fn trace_csv(trace: &LossTrace) -> String {
    let mut out = String::from("iteration,ce_loss,ewc_penalty,total_loss\n");
    for r in &trace.records {
        writeln!(out, "{},{},{},{}", r.iteration, r.ce_loss, r.ewc_penalty, r.total_loss).unwrap();
    }
    out
}

/// Writes `<stem>.csv` with the records and `<stem>.meta.json` with the run
/// metadata.
pub fn write_trace(dir: &Path, stem: &str, trace: &LossTrace) -> Result<()> {
    write_file(&dir.join(format!("{stem}.csv")), &trace_csv(trace))?;
    let meta = serde_json::to_string_pretty(&trace.meta).map_err(|e| Error::Format(e.to_string()))?;
    write_file(&dir.join(format!("{stem}.meta.json")), &(meta + "\n"))
}

/// Summary table: one row per model, `ln_rmse` then one `heldout_<task>`
/// column per held-out corpus, cells as `mean_std`.
pub fn table_main_csv(rows: &[(&str, &EvalReport)]) -> Result<String> {
    let tasks: Vec<&String> = match rows.first() {
        Some((_, r)) => r.heldout_mlm_loss.keys().collect(),
        None => return Err(Error::InvalidInput("table with no rows".into())),
    };
    let mut out = String::from("model,ln_rmse");
    for t in &tasks {
        write!(out, ",heldout_{}", csv_field(t)).unwrap();
    }
    out.push('\n');
    for (name, report) in rows {
        write!(out, "{},{}", csv_field(name), report.ln_rmse).unwrap();
        for t in &tasks {
            let m = report
                .heldout_mlm_loss
                .get(*t)
                .ok_or_else(|| Error::InvalidInput(format!("row {name} lacks task {t}")))?;
            write!(out, ",{m}").unwrap();
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn write_csv(path: &Path, contents: &str) -> Result<()> {
    write_file(path, contents)
}

/// Pretty-printed JSON followed by a newline.
pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    write_file(path, &(text + "\n"))
}

pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    write_json(path, report)
}

pub fn read_report_json(path: &Path) -> Result<EvalReport> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];
const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 50.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

struct Frame {
    x0: f64,
    x1: f64,
    y0: f64,
    y1: f64,
}

impl Frame {
    fn fit(xs: impl Iterator<Item = f64> + Clone, ys: impl Iterator<Item = f64> + Clone) -> Frame {
        let span = |it: &mut dyn Iterator<Item = f64>| {
            let (lo, hi) = it
                .filter(|v| v.is_finite())
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
            if !lo.is_finite() {
                (0.0, 1.0)
            } else if hi - lo < 1e-12 {
                (lo - 0.5, hi + 0.5)
            } else {
                (lo, hi)
            }
        };
        let (x0, x1) = span(&mut xs.clone());
        let (y0, y1) = span(&mut ys.clone());
        Frame { x0, x1, y0, y1 }
    }

    fn px(&self, x: f64) -> f64 {
        MARGIN + (x - self.x0) / (self.x1 - self.x0) * (W - 2.0 * MARGIN)
    }

    fn py(&self, y: f64) -> f64 {
        H - MARGIN - (y - self.y0) / (self.y1 - self.y0) * (H - 2.0 * MARGIN)
    }
}

fn svg_open(out: &mut String, title: &str, frame: &Frame, xlabel: &str, ylabel: &str) {
    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(out, r#"<rect width="{W}" height="{H}" fill="white"/>"#).unwrap();
    writeln!(out, r#"<text x="{}" y="20" text-anchor="middle">{}</text>"#, W / 2.0, escape(title)).unwrap();
    writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        W - 2.0 * MARGIN,
        H - 2.0 * MARGIN
    )
    .unwrap();
    writeln!(out, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, W / 2.0, H - 12.0, escape(xlabel)).unwrap();
    writeln!(
        out,
        r#"<text x="14" y="{}" text-anchor="middle" transform="rotate(-90 14 {})">{}</text>"#,
        H / 2.0,
        H / 2.0,
        escape(ylabel)
    )
    .unwrap();
    for (v, x, anchor) in [(frame.x0, MARGIN, "start"), (frame.x1, W - MARGIN, "end")] {
        writeln!(out, r#"<text x="{x}" y="{}" text-anchor="{anchor}">{v:.3}</text>"#, H - MARGIN + 14.0).unwrap();
    }
    for (v, y) in [(frame.y0, H - MARGIN), (frame.y1, MARGIN + 10.0)] {
        writeln!(out, r#"<text x="{}" y="{y}" text-anchor="end">{v:.3}</text>"#, MARGIN - 4.0).unwrap();
    }
}

fn legend(out: &mut String, names: &[&str]) {
    for (i, name) in names.iter().enumerate() {
        let y = MARGIN + 14.0 + 16.0 * i as f64;
        let color = PALETTE[i % PALETTE.len()];
        writeln!(out, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, W - MARGIN - 150.0, y - 9.0).unwrap();
        writeln!(out, r#"<text x="{}" y="{y}">{}</text>"#, W - MARGIN - 135.0, escape(name)).unwrap();
    }
}

/// Scatter plot colored by label, labels in order of first appearance.
pub fn scatter_svg(title: &str, points: &[[f64; 2]], labels: &[String]) -> Result<String> {
    if points.len() != labels.len() {
        return Err(Error::InvalidInput("points and labels differ in length".into()));
    }
    let mut names: Vec<&str> = Vec::new();
    for l in labels {
        if !names.contains(&l.as_str()) {
            names.push(l);
        }
    }
    let frame = Frame::fit(points.iter().map(|p| p[0]), points.iter().map(|p| p[1]));
    let mut out = String::new();
    svg_open(&mut out, title, &frame, "t-SNE 1", "t-SNE 2");
    for (p, l) in points.iter().zip(labels) {
        let k = names.iter().position(|n| n == l).unwrap_or(0);
        writeln!(
            out,
            r#"<circle cx="{:.2}" cy="{:.2}" r="2.5" fill="{}" fill-opacity="0.7"/>"#,
            frame.px(p[0]),
            frame.py(p[1]),
            PALETTE[k % PALETTE.len()]
        )
        .unwrap();
    }
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    Ok(out)
}

/// Line plot of named series against their index.
pub fn line_svg(title: &str, ylabel: &str, series: &[(&str, Vec<f64>)]) -> String {
    let xs = series.iter().map(|(_, s)| s.len().saturating_sub(1) as f64).chain([0.0]);
    let ys = series.iter().flat_map(|(_, s)| s.iter().copied());
    let frame = Frame::fit(xs, ys);
    let mut out = String::new();
    svg_open(&mut out, title, &frame, "iteration", ylabel);
    for (k, (_, values)) in series.iter().enumerate() {
        let mut d = String::new();
        for (i, v) in values.iter().enumerate().filter(|(_, v)| v.is_finite()) {
            let cmd = if d.is_empty() { 'M' } else { 'L' };
            write!(d, "{cmd}{:.2} {:.2} ", frame.px(i as f64), frame.py(*v)).unwrap();
        }
        writeln!(
            out,
            r#"<path d="{}" fill="none" stroke="{}" stroke-width="1.2"/>"#,
            d.trim_end(),
            PALETTE[k % PALETTE.len()]
        )
        .unwrap();
    }
    let names: Vec<&str> = series.iter().map(|(n, _)| *n).collect();
    legend(&mut out, &names);
    out.push_str("</svg>\n");
    out
}

/// CE and EWC components of one trace.
pub fn trace_svg(title: &str, trace: &LossTrace) -> String {
    line_svg(
        title,
        "loss",
        &[("ce", trace.ce().collect()), ("ewc", trace.ewc().collect())],
    )
}

pub fn write_svg(path: &Path, svg: &str) -> Result<()> {
    write_file(path, svg)
}
