use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An axis-aligned box in input units (pixels or frames): per-axis offset and
/// extent. One axis for sequences, two (row, column) for images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub offset: Vec<f64>,
    pub extent: Vec<f64>,
}

impl BBox {
    pub fn new(offset: Vec<f64>, extent: Vec<f64>) -> Result<Self> {
        if offset.len() != extent.len() || offset.is_empty() || offset.len() > 2 {
            return Err(Error::invalid(format!(
                "box needs matching 1- or 2-axis offset/extent, got {offset:?}/{extent:?}"
            )));
        }
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::invalid(format!("box extents must be positive, got {extent:?}")));
        }
        Ok(BBox { offset, extent })
    }

    pub fn interval(start: f64, length: f64) -> Result<Self> {
        BBox::new(vec![start], vec![length])
    }

    pub fn rect(row: f64, col: f64, height: f64, width: f64) -> Result<Self> {
        BBox::new(vec![row, col], vec![height, width])
    }

    pub fn axes(&self) -> usize {
        self.offset.len()
    }

    pub fn volume(&self) -> f64 {
        self.extent.iter().product()
    }

    pub fn end(&self, axis: usize) -> f64 {
        self.offset[axis] + self.extent[axis]
    }
}

/// Intersection over union of two boxes with the same number of axes.
/// Mismatched ranks count as disjoint.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if a.axes() != b.axes() {
        return 0.0;
    }
    let mut inter = 1.0;
    for axis in 0..a.axes() {
        let lo = a.offset[axis].max(b.offset[axis]);
        let hi = a.end(axis).min(b.end(axis));
        if hi <= lo {
            return 0.0;
        }
        inter *= hi - lo;
    }
    inter / (a.volume() + b.volume() - inter)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_boxes_have_iou_one() {
        let b = BBox::rect(3.0, 4.0, 10.0, 12.0).unwrap();
        assert_eq!(iou(&b, &b), 1.0);
    }

    #[test]
    fn disjoint_boxes_have_iou_zero() {
        let a = BBox::interval(0.0, 5.0).unwrap();
        let b = BBox::interval(5.0, 5.0).unwrap();
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn one_dimensional_overlap() {
        // [0, 10) vs [5, 15): intersection 5, union 15.
        let a = BBox::interval(0.0, 10.0).unwrap();
        let b = BBox::interval(5.0, 10.0).unwrap();
        assert!((iou(&a, &b) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_extents_rejected() {
        assert!(BBox::interval(0.0, 0.0).is_err());
        assert!(BBox::rect(0.0, 0.0, 4.0, -1.0).is_err());
    }
}
