//! Static plots: one SVG curve per logged metric, and PNG frame grids.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use plotters::prelude::*;
use tryon_core::data::VideoClip;
use tryon_toy::train::StepRecord;

use crate::error::CliError;

/// Metric columns of the training log, in file order.
pub const METRICS: [&str; 5] = ["dsm", "agn", "in_mask_mass", "out_mask_mass", "total"];

fn column(record: &StepRecord, name: &str) -> f64 {
    match name {
        "dsm" => record.dsm,
        "agn" => record.agn,
        "in_mask_mass" => record.in_mask_mass,
        "out_mask_mass" => record.out_mask_mass,
        "total" => record.total,
        _ => unreachable!("unknown metric column {name}"),
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, CliError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::io(format!("cannot read metrics log {}: {e}", path.display())))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| CliError::io(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

/// Writes `<metric>.svg` for every metric column and returns the paths.
pub fn plot_metrics(records: &[StepRecord], out: &Path) -> Result<Vec<PathBuf>, CliError> {
    if records.is_empty() {
        return Err(CliError::io("metrics log is empty"));
    }
    let draw_err = |e: String| CliError::runtime(format!("plotting failed: {e}"));
    let mut written = Vec::new();
    for name in METRICS {
        let path = out.join(format!("{name}.svg"));
        let points: Vec<(f64, f64)> = records
            .iter()
            .map(|r| (r.step as f64, column(r, name)))
            .filter(|(_, v)| v.is_finite())
            .collect();
        let (lo, hi) = points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &(_, v)| (lo.min(v), hi.max(v)));
        let (lo, hi) = if lo < hi { (lo, hi) } else { (lo - 0.5, lo + 0.5) };
        let last = records.last().map_or(1, |r| r.step).max(1) as f64;
        {
            let root = SVGBackend::new(&path, (640, 400)).into_drawing_area();
            root.fill(&WHITE).map_err(|e| draw_err(e.to_string()))?;
            let mut chart = ChartBuilder::on(&root)
                .caption(name, ("sans-serif", 20))
                .margin(12)
                .x_label_area_size(32)
                .y_label_area_size(56)
                .build_cartesian_2d(0.0..last, lo..hi)
                .map_err(|e| draw_err(e.to_string()))?;
            chart
                .configure_mesh()
                .x_desc("step")
                .draw()
                .map_err(|e| draw_err(e.to_string()))?;
            chart
                .draw_series(LineSeries::new(points, &BLUE))
                .map_err(|e| draw_err(e.to_string()))?;
            root.present().map_err(|e| draw_err(e.to_string()))?;
        }
        written.push(path);
    }
    Ok(written)
}

/// One row per clip, frames left to right, 8-bit.
pub fn write_frame_grid(path: &Path, rows: &[&VideoClip]) -> Result<(), CliError> {
    let (h, w) = (rows[0].height(), rows[0].width());
    let cols = rows.iter().map(|c| c.len()).max().unwrap_or(0);
    let mut img = RgbImage::from_pixel((cols * w) as u32, (rows.len() * h) as u32, Rgb([0, 0, 0]));
    for (r, clip) in rows.iter().enumerate() {
        if (clip.height(), clip.width()) != (h, w) {
            return Err(CliError::runtime("frame grid rows differ in size"));
        }
        for (t, frame) in clip.frames().outer_iter().enumerate() {
            for ((y, x, c), &v) in frame.indexed_iter() {
                let px = img.get_pixel_mut((t * w + x) as u32, (r * h + y) as u32);
                px[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    img.save(path)
        .map_err(|e| CliError::io(format!("cannot write {}: {e}", path.display())))
}
