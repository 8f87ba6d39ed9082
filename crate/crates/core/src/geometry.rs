//! Box overlap measures and the box regression distance.
//!
//! Boxes that only touch along an edge or a corner have zero intersection.

use crate::error::{Error, Result};
use crate::types::BBox;

fn intersection(a: &BBox, b: &BBox) -> f64 {
    let w = a.x2.min(b.x2) - a.x1.max(b.x1);
    let h = a.y2.min(b.y2) - a.y1.max(b.y1);
    if w <= 0.0 || h <= 0.0 {
        0.0
    } else {
        w * h
    }
}

fn hull_area(a: &BBox, b: &BBox) -> f64 {
    (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1))
}

/// Intersection over union. Both boxes must have positive area.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(iou_unchecked(a, b))
}

/// [`iou`] without the box validity checks; callers guarantee valid boxes.
pub(crate) fn iou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Generalized IoU: IoU minus the fraction of the enclosing hull not covered
/// by the union.
pub fn giou(a: &BBox, b: &BBox) -> Result<f64> {
    a.check()?;
    b.check()?;
    Ok(giou_unchecked(a, b))
}

pub(crate) fn giou_unchecked(a: &BBox, b: &BBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let hull = hull_area(a, b);
    inter / union - (hull - union) / hull
}

/// L1 distance between the two boxes in normalized `(cx, cy, w, h)` form.
pub fn box_l1(a: &BBox, b: &BBox, width: f64, height: f64) -> Result<f64> {
    if !(width > 0.0 && height > 0.0 && width.is_finite() && height.is_finite()) {
        return Err(Error::contract(format!("invalid image size {width}x{height}")));
    }
    a.check()?;
    b.check()?;
    Ok(box_l1_unchecked(a, b, width, height))
}

pub(crate) fn box_l1_unchecked(a: &BBox, b: &BBox, width: f64, height: f64) -> f64 {
    let pa = a.to_cxcywh_norm(width, height);
    let pb = b.to_cxcywh_norm(width, height);
    pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum()
}
