//! Entropy-targeted adversarial salience masks.
//!
//! A mask is a binary grid whose ones hug the image border, with the count
//! of ones chosen so the mask's entropy (as a normalized distribution)
//! lands on a target value. Entropy is computed in natural-log units:
//! a mask with n ones has entropy ln(n).

use crate::error::{Error, Result};
use crate::img;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Target entropy used throughout the experiments.
pub const DEFAULT_TARGET_ENTROPY: f64 = 3.35;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShamSpec {
    pub rows: usize,
    pub cols: usize,
    /// Target entropy in natural-log units.
    pub target_entropy: f64,
}

impl ShamSpec {
    pub fn new(rows: usize, cols: usize, target_entropy: f64) -> ShamSpec {
        ShamSpec {
            rows,
            cols,
            target_entropy,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let cells = self.rows * self.cols;
        if cells == 0 {
            return Err(Error::InvalidConfig("empty SHAM grid".into()));
        }
        let max_entropy = (cells as f64).ln();
        if self.target_entropy < 0.0 || self.target_entropy > max_entropy + 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "target entropy {} outside [0, ln({}) = {:.4}]",
                self.target_entropy, cells, max_entropy
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ShamMask {
    /// Binary grid, values in {0,1}.
    pub mask: Tensor,
    pub ones: usize,
    /// ln(ones).
    pub entropy: f64,
}

/// Entropy of a nonnegative map treated as a probability distribution,
/// in natural-log units, with 0*ln(0) = 0.
pub fn cam_entropy(map: &Tensor) -> Result<f64> {
    if map.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Numeric(
            "cam_entropy requires a finite, elementwise nonnegative map".into(),
        ));
    }
    let total = map.sum();
    if total <= 0.0 {
        return Err(Error::Numeric("cam_entropy of an all-zero map".into()));
    }
    let mut h = 0.0;
    for &v in map.data() {
        if v > 0.0 {
            let p = v / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Ring depth of a cell: distance to the nearest grid edge.
pub fn ring_depth(i: usize, j: usize, rows: usize, cols: usize) -> usize {
    i.min(j).min(rows - 1 - i).min(cols - 1 - j)
}

/// Pick the count of ones whose entropy ln(n) is closest to the target.
/// When the two nearest counts are practically indistinguishable in
/// entropy error, prefer the smaller one; that keeps the published
/// 28-of-49 construction at the 3.35 target.
fn pick_ones(target_entropy: f64, cells: usize) -> usize {
    let raw = target_entropy.exp();
    let lo = (raw.floor() as usize).clamp(1, cells);
    let hi = (raw.ceil() as usize).clamp(1, cells);
    if lo == hi {
        return lo;
    }
    let err_lo = ((lo as f64).ln() - target_entropy).abs();
    let err_hi = ((hi as f64).ln() - target_entropy).abs();
    if (err_lo - err_hi).abs() < 1e-3 {
        lo
    } else if err_lo <= err_hi {
        lo
    } else {
        hi
    }
}

/// Deterministically generate the border-first mask for a spec.
///
/// Cells fill in order of increasing ring depth, raster order within each
/// ring, so the outermost ring saturates before any deeper cell turns on.
pub fn generate(spec: &ShamSpec) -> Result<ShamMask> {
    spec.validate()?;
    let (rows, cols) = (spec.rows, spec.cols);
    let cells = rows * cols;
    let ones = pick_ones(spec.target_entropy, cells);

    let mut order: Vec<(usize, usize, usize)> = (0..rows)
        .flat_map(|i| (0..cols).map(move |j| (ring_depth(i, j, rows, cols), i, j)))
        .collect();
    order.sort();

    let mut mask = Tensor::zeros(&[rows, cols]);
    for &(_, i, j) in order.iter().take(ones) {
        mask.data_mut()[i * cols + j] = 1.0;
    }
    Ok(ShamMask {
        mask,
        ones,
        entropy: (ones as f64).ln(),
    })
}

impl ShamMask {
    /// Plain-text grid: one row per line, contiguous 0/1 digits.
    pub fn to_text_grid(&self) -> String {
        let (rows, cols) = (self.mask.shape()[0], self.mask.shape()[1]);
        let mut out = String::with_capacity(rows * (cols + 1));
        for i in 0..rows {
            for j in 0..cols {
                out.push(if self.mask.at(&[i, j]) > 0.5 { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    pub fn write_text(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text_grid())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        img::write_pgm(&self.mask, path)
    }
}

/// Nearest-neighbor upsample of the mask blended onto a grayscale image.
/// `alpha` 0 returns the image, 1 the pure mask.
pub fn overlay(mask: &ShamMask, image: &Tensor, alpha: f64) -> Result<Tensor> {
    let img2d = match image.shape() {
        [h, w] => image.reshaped(vec![*h, *w])?,
        [1, h, w] => image.reshaped(vec![*h, *w])?,
        other => {
            return Err(Error::ShapeMismatch {
                op: "sham_overlay",
                lhs: other.to_vec(),
                rhs: mask.mask.shape().to_vec(),
            })
        }
    };
    let (h, w) = (img2d.shape()[0], img2d.shape()[1]);
    let (u, v) = (mask.mask.shape()[0], mask.mask.shape()[1]);
    if h < u || w < v {
        return Err(Error::ShapeMismatch {
            op: "sham_overlay",
            lhs: vec![h, w],
            rhs: vec![u, v],
        });
    }
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        let si = (i * u / h).min(u - 1);
        for j in 0..w {
            let sj = (j * v / w).min(v - 1);
            let m = mask.mask.at(&[si, sj]);
            out.data_mut()[i * w + j] = alpha * m + (1.0 - alpha) * img2d.at(&[i, j]);
        }
    }
    Ok(out)
}
