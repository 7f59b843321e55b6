//! Static report files: the robustness table as CSV, SVG line plots and
//! amplified difference images.
//!
//! Output layout under a report directory:
//!
//! ```text
//! report.csv
//! meta.txt
//! plots/acc_vs_quality.svg
//! plots/acc_vs_payload.svg
//! plots/psnr_vs_payload.svg
//! diffs/<clip>/frame_NNNN.png   |marked - cover| x gain
//! diffs/<clip>/cover_NNNN.png
//! diffs/<clip>/marked_NNNN.png
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use dinvmark_core::attack::{AttackKind, AttackSpec};
use dinvmark_core::eval::{amplified_difference, reference, ReportMeta, ReportRow, RobustnessReport};
use dinvmark_core::media::VideoTensor;
use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::io::{create_dir, write_png};

pub const CSV_HEADER: [&str; 7] = ["attack", "payload", "clips", "acc", "psnr", "flicker", "skipped"];
pub const DIFF_GAIN: f64 = 10.0;
const REFERENCE_LABEL: &str = "published reference";

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |v| format!("{v:.4}"))
}

pub fn write_csv(rows: &[ReportRow], path: &Path) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Report(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(CSV_HEADER).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.attack.clone(),
            r.payload.to_string(),
            r.clips.to_string(),
            fmt_opt(r.acc),
            fmt_opt(r.psnr),
            fmt_opt(r.flicker),
            r.skipped.clone().unwrap_or_default(),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::write(path, e))
}

pub fn read_csv(path: &Path) -> Result<Vec<ReportRow>> {
    let bad = |reason: String| Error::Report(format!("{}: {reason}", path.display()));
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(bad(format!("unexpected header {header:?}")));
    }
    let opt = |s: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse().map(Some).map_err(|_| bad(format!("`{s}` is not a number")))
        }
    };
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let int = |i: usize| rec[i].parse::<usize>().map_err(|_| bad(format!("`{}` is not an integer", &rec[i])));
        rows.push(ReportRow {
            attack: rec[0].to_string(),
            payload: int(1)?,
            clips: int(2)?,
            acc: opt(&rec[3])?,
            psnr: opt(&rec[4])?,
            flicker: opt(&rec[5])?,
            skipped: (!rec[6].is_empty()).then(|| rec[6].to_string()),
        });
    }
    Ok(rows)
}

pub fn render_meta(meta: &ReportMeta) -> String {
    format!(
        "checkpoint={}\ndataset={}\nseed={}\n",
        meta.checkpoint_id, meta.dataset_id, meta.seed
    )
}

/// Writes `report.csv` and `meta.txt`, returning the CSV path.
pub fn write_report(report: &RobustnessReport, dir: &Path) -> Result<PathBuf> {
    create_dir(dir)?;
    let csv = dir.join("report.csv");
    write_csv(&report.rows, &csv)?;
    let meta = dir.join("meta.txt");
    fs::write(&meta, render_meta(&report.meta)).map_err(|e| Error::write(&meta, e))?;
    Ok(csv)
}

type Series = Vec<(String, Vec<(f64, f64)>)>;

/// ACC by codec quality, one series per codec and payload.
pub fn quality_series(rows: &[ReportRow]) -> Series {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        let (Ok(spec), Some(acc)) = (r.attack.parse::<AttackSpec>(), r.acc) else {
            continue;
        };
        let (name, q) = match spec.kind {
            AttackKind::H264 { crf } => ("h264 crf", crf),
            AttackKind::Hevc { qp } => ("hevc qp", qp),
            _ => continue,
        };
        groups.entry(format!("{name}, {} bits", r.payload)).or_default().push((q as f64, acc));
    }
    finish(groups)
}

/// `value(row)` by payload, one series per attack.
pub fn payload_series(rows: &[ReportRow], value: impl Fn(&ReportRow) -> Option<f64>) -> Series {
    let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for r in rows {
        if let Some(v) = value(r).filter(|v| v.is_finite()) {
            groups.entry(r.attack.clone()).or_default().push((r.payload as f64, v));
        }
    }
    finish(groups)
}

fn finish(groups: BTreeMap<String, Vec<(f64, f64)>>) -> Series {
    groups
        .into_iter()
        .map(|(k, mut v)| {
            v.sort_by(|a, b| a.0.total_cmp(&b.0));
            (k, v)
        })
        .collect()
}

fn plot_error(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Report(format!("{}: {e}", path.display()))
}

/// Line plot of measured series (solid) and reference series (dashed
/// grey). An empty plot is still written so the file set is fixed.
pub fn line_plot(path: &Path, title: &str, x_label: &str, y_label: &str, measured: &Series, reference: &Series) -> Result<()> {
    let all = measured.iter().chain(reference).flat_map(|(_, v)| v.iter());
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for &(x, y) in all {
        x0 = x0.min(x);
        x1 = x1.max(x);
        y0 = y0.min(y);
        y1 = y1.max(y);
    }
    if !x0.is_finite() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    let pad = |a: f64, b: f64| if b - a < 1e-9 { (a - 1.0, b + 1.0) } else { (a - 0.05 * (b - a), b + 0.05 * (b - a)) };
    let ((x0, x1), (y0, y1)) = (pad(x0, x1), pad(y0, y1));

    let root = SVGBackend::new(path, (720, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_error(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(56)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_error(path, e))?;
    chart
        .configure_mesh()
        .x_desc(x_label)
        .y_desc(y_label)
        .draw()
        .map_err(|e| plot_error(path, e))?;
    for (i, (name, pts)) in measured.iter().enumerate() {
        let color = Palette99::pick(i).to_rgba();
        chart
            .draw_series(LineSeries::new(pts.iter().copied(), color.stroke_width(2)))
            .map_err(|e| plot_error(path, e))?
            .label(name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], color.stroke_width(2)));
        chart
            .draw_series(pts.iter().map(|&p| Circle::new(p, 3, color.filled())))
            .map_err(|e| plot_error(path, e))?;
    }
    for (name, pts) in reference {
        let style = RGBColor(150, 150, 150).stroke_width(1);
        chart
            .draw_series(DashedLineSeries::new(pts.iter().copied(), 6, 4, style))
            .map_err(|e| plot_error(path, e))?
            .label(format!("{name} ({REFERENCE_LABEL})"))
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 16, y)], style));
    }
    if !measured.is_empty() || !reference.is_empty() {
        chart
            .configure_series_labels()
            .background_style(WHITE.mix(0.8))
            .border_style(BLACK)
            .draw()
            .map_err(|e| plot_error(path, e))?;
    }
    root.present().map_err(|e| plot_error(path, e))
}

/// Published HEVC sweep as reference series, one per payload.
pub fn reference_quality_series() -> Series {
    reference::QP_SWEEP_PAYLOADS
        .iter()
        .enumerate()
        .map(|(j, bits)| {
            let pts = reference::QP_SWEEP_QPS
                .iter()
                .zip(reference::QP_SWEEP_ACC.iter())
                .map(|(&qp, row)| (qp as f64, row[j]))
                .collect();
            (format!("hevc qp, {bits} bits"), pts)
        })
        .collect()
}

/// Writes the three standard plots and returns their paths.
pub fn write_plots(rows: &[ReportRow], dir: &Path) -> Result<Vec<PathBuf>> {
    let plots = dir.join("plots");
    create_dir(&plots)?;
    let quality = plots.join("acc_vs_quality.svg");
    line_plot(&quality, "ACC vs. codec quality", "QP / CRF", "ACC (%)", &quality_series(rows), &reference_quality_series())?;
    let acc = plots.join("acc_vs_payload.svg");
    line_plot(&acc, "ACC vs. payload", "payload (bits)", "ACC (%)", &payload_series(rows, |r| r.acc), &Vec::new())?;
    let psnr = plots.join("psnr_vs_payload.svg");
    let reference_psnr = vec![("96-bit watermark".to_string(), vec![(96.0, reference::PSNR_96_BITS)])];
    line_plot(&psnr, "PSNR vs. payload", "payload (bits)", "PSNR (dB)", &payload_series(rows, |r| r.psnr), &reference_psnr)?;
    Ok(vec![quality, acc, psnr])
}

fn unit_to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Per-frame amplified differences plus both full clips, under
/// `diffs/<clip>/`.
pub fn write_diffs(dir: &Path, clip: &str, cover: &VideoTensor<f32>, marked: &VideoTensor<f32>, gain: f64) -> Result<PathBuf> {
    let out = dir.join("diffs").join(clip);
    create_dir(&out)?;
    let diff = amplified_difference(marked, cover, gain)?;
    let s = cover.shape();
    let plane = s.height * s.width;
    let frame_planes = |data: &dyn Fn(usize) -> u8, t: usize| -> Vec<u8> {
        (0..3)
            .flat_map(|c| (0..plane).map(move |i| (c * s.frames + t) * plane + i))
            .map(data)
            .collect()
    };
    let (cp, mp) = (cover.to_pixels(), marked.to_pixels());
    for t in 0..s.frames {
        let d = frame_planes(&|i| unit_to_byte(diff.data()[i]), t);
        write_png(&out.join(format!("frame_{t:04}.png")), s.width, s.height, &d)?;
        write_png(&out.join(format!("cover_{t:04}.png")), s.width, s.height, &frame_planes(&|i| cp[i], t))?;
        write_png(&out.join(format!("marked_{t:04}.png")), s.width, s.height, &frame_planes(&|i| mp[i], t))?;
    }
    Ok(out)
}
