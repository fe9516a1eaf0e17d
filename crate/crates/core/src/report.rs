//! Tables and bar charts over saved evaluation results.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{IoContext, TrainError};
use crate::models::N_CLASSES;
use crate::train::{class_name, EvalReport};

pub const TABLE_FILE: &str = "report.md";
pub const CHART_FILE: &str = "mean_iou.png";

/// One evaluation as written by `rfcnet eval`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    pub checkpoint: PathBuf,
    pub report: EvalReport,
}

impl EvalRecord {
    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = fs::read_to_string(path).at(path)?;
        serde_json::from_str(&text).map_err(|e| TrainError::DataMissing(format!("{}: {e}", path.display())))
    }
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |v| format!("{:.2}", 100.0 * v))
}

/// Markdown table with one column per record and one row per class, plus
/// the mean.
pub fn iou_table(records: &[EvalRecord]) -> String {
    let mut out = String::new();
    let head: Vec<String> = records
        .iter()
        .map(|r| format!("{} ({})", r.model, r.report.split))
        .collect();
    let _ = writeln!(out, "| class | {} |", head.join(" | "));
    let _ = writeln!(out, "|---|{}", "---:|".repeat(records.len()));
    for c in 0..N_CLASSES {
        let cells: Vec<String> = records
            .iter()
            .map(|r| pct(r.report.per_class_iou.get(c).copied().flatten()))
            .collect();
        let _ = writeln!(out, "| {} | {} |", class_name(c), cells.join(" | "));
    }
    let means: Vec<String> = records.iter().map(|r| format!("**{:.2}**", 100.0 * r.report.mean_iou)).collect();
    let _ = writeln!(out, "| mean IoU | {} |", means.join(" | "));
    out.push_str(
        "\nIoU in percent from one confusion matrix per split. Classes that occur in neither labels \
         nor predictions show n/a and are left out of the mean.\n",
    );
    out
}

const PALETTE: [[u8; 3]; 4] = [[52, 101, 164], [204, 102, 0], [78, 154, 6], [117, 80, 123]];

/// RGB bar chart of the mean IoU of each record, with horizontal guides at
/// every 25 %. Bars are coloured by split, in order of first appearance.
pub fn mean_iou_chart(records: &[EvalRecord]) -> (usize, usize, Vec<u8>) {
    let (bar, gap, margin, plot_h) = (24usize, 12usize, 16usize, 200usize);
    let w = 2 * margin + records.len().max(1) * (bar + gap);
    let h = plot_h + 2 * margin;
    let mut img = vec![255u8; w * h * 3];
    let mut put = |x: usize, y: usize, c: [u8; 3]| {
        let i = 3 * (y * w + x);
        img[i..i + 3].copy_from_slice(&c);
    };
    let base = margin + plot_h;
    for q in 0..=4 {
        let y = base - q * plot_h / 4;
        let shade = if q == 0 { [0, 0, 0] } else { [210, 210, 210] };
        for x in margin..w - margin {
            put(x, y, shade);
        }
    }
    let mut splits: Vec<&str> = Vec::new();
    for (i, r) in records.iter().enumerate() {
        let s = r.report.split.as_str();
        if !splits.contains(&s) {
            splits.push(s);
        }
        let color = PALETTE[splits.iter().position(|&x| x == s).unwrap_or(0) % PALETTE.len()];
        let top = base - (r.report.mean_iou.clamp(0.0, 1.0) * plot_h as f64).round() as usize;
        let x0 = margin + gap / 2 + i * (bar + gap);
        for y in top..base {
            for x in x0..x0 + bar {
                put(x, y, color);
            }
        }
    }
    (w, h, img)
}

pub fn write_png(path: &Path, w: usize, h: usize, rgb: &[u8]) -> Result<(), TrainError> {
    let file = File::create(path).at(path)?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc
        .write_header()
        .map_err(|e| TrainError::DataMissing(format!("{}: {e}", path.display())))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| TrainError::DataMissing(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Writes the table and, if `plot`, the chart into `out_dir`. Returns the
/// table.
pub fn write_report(records: &[EvalRecord], out_dir: &Path, plot: bool) -> Result<String, TrainError> {
    fs::create_dir_all(out_dir).at(out_dir)?;
    let table = iou_table(records);
    let path = out_dir.join(TABLE_FILE);
    fs::write(&path, &table).at(&path)?;
    if plot {
        let (w, h, img) = mean_iou_chart(records);
        write_png(&out_dir.join(CHART_FILE), w, h, &img)?;
    }
    Ok(table)
}

#[cfg(test)]
mod tests;
