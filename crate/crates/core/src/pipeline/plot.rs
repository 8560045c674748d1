//! Score-distribution plots. For every OOD split this renders the ID and
//! OOD histograms of the domain logit into one PNG, and likewise for each
//! scorer's semantic signal. The exact bin data behind every image is
//! written to `plot_data.json` so the pictures can be regenerated or
//! checked against the report.

use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::report::EvalReport;
use crate::metrics::Histogram;

const WIDTH: u32 = 640;
const HEIGHT: u32 = 360;
const MARGIN: u32 = 24;
const ID_COLOR: Rgb<u8> = Rgb([70, 130, 220]);
const OOD_COLOR: Rgb<u8> = Rgb([240, 150, 60]);
const AXIS_COLOR: Rgb<u8> = Rgb([60, 60, 60]);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotEntry {
    pub file: String,
    /// "s_d" for the domain logit, "s_h" for a scorer's semantic signal.
    pub signal: String,
    pub scorer: Option<String>,
    pub split: String,
    pub id_histogram: Histogram,
    pub ood_histogram: Histogram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlotData {
    pub entries: Vec<PlotEntry>,
}

/// One entry per (signal, OOD split) pair, mirroring the report's
/// histograms verbatim.
pub fn build_plot_data(report: &EvalReport) -> PlotData {
    let mut entries = Vec::new();
    for split in &report.domain.splits {
        entries.push(PlotEntry {
            file: format!("s_d_{}.png", split.split),
            signal: "s_d".into(),
            scorer: None,
            split: split.split.clone(),
            id_histogram: report.domain.id_histogram.clone(),
            ood_histogram: split.ood_histogram.clone(),
        });
    }
    for scorer in &report.scorers {
        for split in &scorer.splits {
            entries.push(PlotEntry {
                file: format!("s_h_{}_{}.png", scorer.scorer, split.split),
                signal: "s_h".into(),
                scorer: Some(scorer.scorer.clone()),
                split: split.split.clone(),
                id_histogram: scorer.id_histogram.clone(),
                ood_histogram: split.ood_histogram.clone(),
            });
        }
    }
    PlotData { entries }
}

/// Render every plot plus `plot_data.json` and a `summary.txt` index into
/// `dir`. Returns the produced file names (relative to `dir`).
pub fn render_all(report: &EvalReport, dir: &Path) -> Result<Vec<String>> {
    fs::create_dir_all(dir)?;
    let data = build_plot_data(report);
    let mut files = Vec::with_capacity(data.entries.len() + 2);
    let mut index = String::new();
    for entry in &data.entries {
        render_histogram_pair(&entry.id_histogram, &entry.ood_histogram, &dir.join(&entry.file))?;
        index.push_str(&format!(
            "{}: {} on split {} ({})\n",
            entry.file,
            entry.signal,
            entry.split,
            entry.scorer.as_deref().unwrap_or("domain head"),
        ));
        files.push(entry.file.clone());
    }
    fs::write(dir.join("plot_data.json"), serde_json::to_string_pretty(&data)?)?;
    files.push("plot_data.json".into());
    fs::write(dir.join("summary.txt"), index)?;
    files.push("summary.txt".into());
    Ok(files)
}

/// Draw both histograms on a shared axis: ID in blue, OOD in orange,
/// averaged where the bars overlap.
pub fn render_histogram_pair(id: &Histogram, ood: &Histogram, path: &Path) -> Result<()> {
    for h in [id, ood] {
        if h.edges.len() != h.counts.len() + 1 || h.counts.is_empty() {
            return Err(Error::Input("malformed histogram".into()));
        }
    }
    let mut lo = f64::min(id.edges[0], ood.edges[0]);
    let mut hi = f64::max(*id.edges.last().unwrap(), *ood.edges.last().unwrap());
    if !(hi - lo).is_finite() || hi - lo <= 0.0 {
        lo -= 0.5;
        hi += 0.5;
    }
    let ymax = id.counts.iter().chain(&ood.counts).copied().max().unwrap_or(0).max(1);

    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    draw_bars(&mut img, id, lo, hi, ymax, ID_COLOR, false);
    draw_bars(&mut img, ood, lo, hi, ymax, OOD_COLOR, true);
    for x in MARGIN..=WIDTH - MARGIN {
        img.put_pixel(x, HEIGHT - MARGIN, AXIS_COLOR);
    }
    for y in MARGIN..=HEIGHT - MARGIN {
        img.put_pixel(MARGIN, y, AXIS_COLOR);
    }
    img.save(path)
        .map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))?;
    Ok(())
}

fn draw_bars(
    img: &mut RgbImage,
    h: &Histogram,
    lo: f64,
    hi: f64,
    ymax: usize,
    color: Rgb<u8>,
    blend: bool,
) {
    let plot_w = (WIDTH - 2 * MARGIN) as f64;
    let plot_h = (HEIGHT - 2 * MARGIN) as f64;
    let to_x = |v: f64| -> u32 {
        let frac = ((v - lo) / (hi - lo)).clamp(0.0, 1.0);
        MARGIN + (frac * plot_w).round() as u32
    };
    for (i, &count) in h.counts.iter().enumerate() {
        if count == 0 {
            continue;
        }
        let x0 = to_x(h.edges[i]);
        let x1 = to_x(h.edges[i + 1]).max(x0 + 1).min(WIDTH - MARGIN);
        let bar_h = ((count as f64 / ymax as f64) * plot_h).round() as u32;
        for x in x0..x1 {
            for y in (HEIGHT - MARGIN - bar_h)..(HEIGHT - MARGIN) {
                let px = if blend {
                    let old = img.get_pixel(x, y);
                    Rgb([
                        ((old[0] as u16 + color[0] as u16) / 2) as u8,
                        ((old[1] as u16 + color[1] as u16) / 2) as u8,
                        ((old[2] as u16 + color[2] as u16) / 2) as u8,
                    ])
                } else {
                    color
                };
                img.put_pixel(x, y, px);
            }
        }
    }
}
