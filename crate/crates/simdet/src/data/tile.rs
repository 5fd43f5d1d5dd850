//! Tiled targets: an n x n grid of distinct glyph classes in one image.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;

use super::glyph::{render_glyph, GlyphClass, GLYPH_SIZE};
use crate::error::{Error, Result};
use crate::eval::BBox;
use crate::rng::rng_from;
use crate::tensor::Tensor;

/// One grid cell: which class sits there and its input-space box.
#[derive(Clone, Debug)]
pub struct CellRecord {
    pub class_id: u64,
    pub bbox: BBox,
}

/// An `n*32 x n*32` target image whose cells tile it exactly, each holding an
/// instance of a distinct class.
#[derive(Clone, Debug)]
pub struct TiledTarget {
    /// `[1, n*32, n*32]`, values in `[0, 1]`.
    pub image: Tensor,
    pub cells: Vec<CellRecord>,
    pub n: usize,
}

/// Renders `n^2` distinct classes into a randomly permuted grid, recording
/// the ground-truth box of every cell.
pub fn tile_target(
    classes: &[(u64, GlyphClass)],
    instance_seeds: &[u64],
    n: usize,
    perm_seed: u64,
) -> Result<TiledTarget> {
    if !(2..=4).contains(&n) {
        return Err(Error::invalid(format!("grid size must be 2, 3 or 4, got {n}")));
    }
    if classes.len() != n * n || instance_seeds.len() != n * n {
        return Err(Error::invalid(format!(
            "grid of {n}x{n} needs {} classes and instance seeds, got {} and {}",
            n * n,
            classes.len(),
            instance_seeds.len()
        )));
    }
    let distinct: BTreeSet<u64> = classes.iter().map(|(id, _)| *id).collect();
    if distinct.len() != classes.len() {
        return Err(Error::invalid("tiled target classes must be distinct".to_string()));
    }

    let mut order: Vec<usize> = (0..n * n).collect();
    order.shuffle(&mut rng_from(perm_seed));

    let side = n * GLYPH_SIZE;
    let mut values = vec![0.0f64; side * side];
    let mut cells = Vec::with_capacity(n * n);
    for (cell, &source) in order.iter().enumerate() {
        let (class_id, class) = &classes[source];
        let glyph = render_glyph(class, instance_seeds[source]);
        let (row, col) = (cell / n, cell % n);
        let (y0, x0) = (row * GLYPH_SIZE, col * GLYPH_SIZE);
        for y in 0..GLYPH_SIZE {
            for x in 0..GLYPH_SIZE {
                values[(y0 + y) * side + x0 + x] = glyph.values()[y * GLYPH_SIZE + x];
            }
        }
        cells.push(CellRecord {
            class_id: *class_id,
            bbox: BBox::rect(y0 as f64, x0 as f64, GLYPH_SIZE as f64, GLYPH_SIZE as f64)?,
        });
    }

    Ok(TiledTarget { image: Tensor::new(vec![1, side, side], values)?, cells, n })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn classes(n: usize) -> (Vec<(u64, GlyphClass)>, Vec<u64>) {
        let classes: Vec<(u64, GlyphClass)> =
            (0..n * n).map(|i| (i as u64, GlyphClass::from_seed(100 + i as u64))).collect();
        let seeds: Vec<u64> = (0..n * n).map(|i| 7 + i as u64).collect();
        (classes, seeds)
    }

    #[test]
    fn two_by_two_grid_geometry() {
        let (cls, seeds) = classes(2);
        let t = tile_target(&cls, &seeds, 2, 42).unwrap();
        assert_eq!(t.image.shape(), &[1, 64, 64]);
        assert_eq!(t.cells.len(), 4);
        let mut offsets: Vec<(f64, f64)> =
            t.cells.iter().map(|c| (c.bbox.offset[0], c.bbox.offset[1])).collect();
        offsets.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(offsets, vec![(0.0, 0.0), (0.0, 32.0), (32.0, 0.0), (32.0, 32.0)]);
        assert!(t.cells.iter().all(|c| c.bbox.extent == vec![32.0, 32.0]));
    }

    #[test]
    fn three_by_three_has_nine_cells() {
        let (cls, seeds) = classes(3);
        let t = tile_target(&cls, &seeds, 3, 1).unwrap();
        assert_eq!(t.image.shape(), &[1, 96, 96]);
        assert_eq!(t.cells.len(), 9);
    }

    #[test]
    fn cells_partition_every_pixel_exactly_once() {
        let (cls, seeds) = classes(3);
        let t = tile_target(&cls, &seeds, 3, 9).unwrap();
        let side = 96;
        let mut covered = vec![0u8; side * side];
        for cell in &t.cells {
            let (y0, x0) = (cell.bbox.offset[0] as usize, cell.bbox.offset[1] as usize);
            for y in 0..cell.bbox.extent[0] as usize {
                for x in 0..cell.bbox.extent[1] as usize {
                    covered[(y0 + y) * side + x0 + x] += 1;
                }
            }
        }
        assert!(covered.iter().all(|&c| c == 1));
    }

    #[test]
    fn duplicate_classes_are_rejected() {
        let (mut cls, seeds) = classes(2);
        cls[3].0 = cls[0].0;
        assert!(tile_target(&cls, &seeds, 2, 0).is_err());
    }

    #[test]
    fn permutation_depends_on_seed() {
        let (cls, seeds) = classes(3);
        let a = tile_target(&cls, &seeds, 3, 1).unwrap();
        let b = tile_target(&cls, &seeds, 3, 2).unwrap();
        let order = |t: &TiledTarget| t.cells.iter().map(|c| c.class_id).collect::<Vec<_>>();
        assert_ne!(order(&a), order(&b));
    }
}
