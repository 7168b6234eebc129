//! Report serialization (CSV and JSON) and heatmap rendering.

use super::{ExperimentReport, MetricRow};
use crate::cam::{upsample_bilinear, SaliencyMap};
use crate::error::{Error, Result};
use crate::img;
use crate::tensor::Tensor;
use std::path::Path;

/// CSV of the raw rows: `image_id,model_id,method,metric,value`.
pub fn write_csv(report: &ExperimentReport, path: &Path) -> Result<()> {
    let mut out = String::from("image_id,model_id,method,metric,value\n");
    for row in &report.rows {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            row.image_id, row.model_id, row.method, row.metric, row.value
        ));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Parse rows back from a CSV produced by `write_csv`.
pub fn read_csv_rows(path: &Path) -> Result<Vec<MetricRow>> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some("image_id,model_id,method,metric,value") => {}
        other => {
            return Err(Error::Format(format!(
                "unexpected csv header {:?} in {}",
                other,
                path.display()
            )))
        }
    }
    let mut rows = Vec::new();
    for line in lines {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!("bad csv line: {:?}", line)));
        }
        rows.push(MetricRow {
            image_id: fields[0].into(),
            model_id: fields[1].into(),
            method: fields[2].into(),
            metric: fields[3].into(),
            value: fields[4]
                .parse()
                .map_err(|_| Error::Format(format!("bad value in csv line: {:?}", line)))?,
        });
    }
    Ok(rows)
}

/// Full report as JSON (rows plus aggregates and test results).
pub fn write_json(report: &ExperimentReport, path: &Path) -> Result<()> {
    let json = serde_json::to_string_pretty(report)
        .map_err(|e| Error::Format(format!("json encode: {}", e)))?;
    std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Load a JSON report and check that its aggregates match its rows.
pub fn report_from_json(path: &Path) -> Result<ExperimentReport> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("json decode {}: {}", path.display(), e)))?;
    report.verify_aggregates()?;
    Ok(report)
}

/// Fixed 256-entry blue-to-red ramp.
pub fn color_ramp(index: u8) -> [u8; 3] {
    let t = index as f64 / 255.0;
    let channel = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [
        channel((4.0 * t - 1.5).min(-4.0 * t + 4.5)),
        channel((4.0 * t - 0.5).min(-4.0 * t + 3.5)),
        channel((4.0 * t + 0.5).min(-4.0 * t + 2.5)),
    ]
}

/// Render a saliency map over a grayscale image: the normalized map is
/// bilinearly upsampled to the image size, mapped through the color ramp,
/// and blended 50/50 onto the image. Output is a binary PPM.
pub fn render_heatmap(map: &SaliencyMap, image: &Tensor, path: &Path) -> Result<()> {
    let gray = match image.shape() {
        [h, w] => image.reshaped(vec![*h, *w])?,
        [1, h, w] => image.reshaped(vec![*h, *w])?,
        other => {
            return Err(Error::ShapeMismatch {
                op: "render_heatmap",
                lhs: other.to_vec(),
                rhs: map.normalized.shape().to_vec(),
            })
        }
    };
    let (h, w) = (gray.shape()[0], gray.shape()[1]);
    let up = upsample_bilinear(&map.normalized, h, w)?;
    let mut rgb = Vec::with_capacity(h * w * 3);
    for i in 0..h * w {
        let idx = (up.data()[i].clamp(0.0, 1.0) * 255.0).round() as u8;
        let color = color_ramp(idx);
        let g = gray.data()[i].clamp(0.0, 1.0) * 255.0;
        for c in 0..3 {
            rgb.push((0.5 * g + 0.5 * color[c] as f64).round() as u8);
        }
    }
    img::write_ppm(w, h, &rgb, path)
}
