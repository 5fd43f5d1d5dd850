//! Histogram-of-oriented-gradients features with 4x4-pixel cells, nine
//! unsigned orientation bins and L2-hys block normalisation over 2x2 cells.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct HogConfig {
    /// Cell side in pixels; must divide the image extents.
    pub cell: usize,
    /// Unsigned orientation bins over [0, pi).
    pub bins: usize,
    /// Block side in cells for normalisation.
    pub block: usize,
    /// L2-hys clipping value.
    pub clip: f64,
}

impl Default for HogConfig {
    fn default() -> Self {
        HogConfig { cell: 4, bins: 9, block: 2, clip: 0.2 }
    }
}

/// Per-cell orientation histograms of one grayscale image.
#[derive(Clone, Debug)]
pub struct CellGrid {
    pub hist: Vec<f64>,
    pub cells_y: usize,
    pub cells_x: usize,
    pub bins: usize,
}

impl CellGrid {
    fn at(&self, cy: usize, cx: usize) -> &[f64] {
        let base = (cy * self.cells_x + cx) * self.bins;
        &self.hist[base..base + self.bins]
    }
}

/// Gradient-magnitude-weighted orientation histograms per cell. Gradients use
/// central differences with replicated borders; each pixel's magnitude is
/// split between its two nearest orientation bins (bilinear in angle,
/// wrapping at pi). Adding a constant to every pixel changes nothing.
pub fn cell_histograms(image: &Tensor, config: &HogConfig) -> Result<CellGrid> {
    if image.rank() != 3 || image.shape()[0] != 1 {
        return Err(Error::shape(format!(
            "HOG expects a [1, h, w] grayscale image, got {:?}",
            image.shape()
        )));
    }
    let (h, w) = (image.shape()[1], image.shape()[2]);
    if h % config.cell != 0 || w % config.cell != 0 {
        return Err(Error::shape(format!(
            "cell size {} must divide the image extents {h}x{w}",
            config.cell
        )));
    }
    let (cells_y, cells_x) = (h / config.cell, w / config.cell);
    let px = |y: usize, x: usize| image.values()[y * w + x];

    let mut hist = vec![0.0f64; cells_y * cells_x * config.bins];
    for y in 0..h {
        for x in 0..w {
            let gx = (px(y, (x + 1).min(w - 1)) - px(y, x.saturating_sub(1))) / 2.0;
            let gy = (px((y + 1).min(h - 1), x) - px(y.saturating_sub(1), x)) / 2.0;
            let mag = (gx * gx + gy * gy).sqrt();
            if mag == 0.0 {
                continue;
            }
            let angle = gy.atan2(gx).rem_euclid(std::f64::consts::PI);
            let pos = angle / std::f64::consts::PI * config.bins as f64;
            let lo = pos.floor() as usize % config.bins;
            let hi = (lo + 1) % config.bins;
            let frac = pos - pos.floor();
            let cell = ((y / config.cell) * cells_x + x / config.cell) * config.bins;
            hist[cell + lo] += mag * (1.0 - frac);
            hist[cell + hi] += mag * frac;
        }
    }
    Ok(CellGrid { hist, cells_y, cells_x, bins: config.bins })
}

fn l2_hys(block: &mut [f64], clip: f64) {
    const EPS: f64 = 1e-12;
    let norm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= EPS {
        return;
    }
    for v in block.iter_mut() {
        *v = (*v / norm).min(clip);
    }
    let renorm = block.iter().map(|v| v * v).sum::<f64>().sqrt();
    if renorm > EPS {
        for v in block.iter_mut() {
            *v /= renorm;
        }
    }
}

/// Block-normalised descriptor of a rectangular window of cells.
fn blocks_of(grid: &CellGrid, cy0: usize, cx0: usize, cells: usize, config: &HogConfig) -> Vec<f64> {
    let per_block = config.block * config.block * config.bins;
    let span = cells + 1 - config.block;
    let mut out = Vec::with_capacity(span * span * per_block);
    for by in 0..span {
        for bx in 0..span {
            let start = out.len();
            for dy in 0..config.block {
                for dx in 0..config.block {
                    out.extend_from_slice(grid.at(cy0 + by + dy, cx0 + bx + dx));
                }
            }
            l2_hys(&mut out[start..], config.clip);
        }
    }
    out
}

/// The HOG descriptor of a whole image: per-cell histograms followed by
/// L2-hys-normalised overlapping blocks.
pub fn hog_features(image: &Tensor, config: &HogConfig) -> Result<Vec<f64>> {
    let grid = cell_histograms(image, config)?;
    if grid.cells_y != grid.cells_x {
        return Err(Error::shape("hog_features expects a square image".to_string()));
    }
    Ok(blocks_of(&grid, 0, 0, grid.cells_y, config))
}

/// The HOG descriptor of a `cells x cells` window of a precomputed grid,
/// anchored at cell `(cy0, cx0)`. Matches [`hog_features`] of the cropped
/// window except at window borders, where the shared grid sees the true
/// neighbouring pixels instead of replicated ones.
pub fn window_features(
    grid: &CellGrid,
    cy0: usize,
    cx0: usize,
    cells: usize,
    config: &HogConfig,
) -> Vec<f64> {
    blocks_of(grid, cy0, cx0, cells, config)
}
