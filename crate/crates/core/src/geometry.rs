//! Axis-aligned box geometry: IoU, NMS, and center-preserving expansion.
//!
//! Boxes use the corner convention `[x1, y1, x2, y2]` with `x2 > x1` and
//! `y2 > y1`; area is the exclusive product `(x2 - x1) * (y2 - y1)`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned bounding box in corner format.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox<S: Scalar = f64> {
    pub x1: S,
    pub y1: S,
    pub x2: S,
    pub y2: S,
}

impl<S: Scalar> BBox<S> {
    /// Builds a box, rejecting non-finite or inverted corners.
    pub fn new(x1: S, y1: S, x2: S, y2: S) -> Result<Self> {
        let fail = |reason: &str| Error::InvalidBox {
            x1: x1.as_f64(),
            y1: y1.as_f64(),
            x2: x2.as_f64(),
            y2: y2.as_f64(),
            reason: reason.to_string(),
        };
        for v in [x1, y1, x2, y2] {
            if !v.is_finite() {
                return Err(fail("coordinates must be finite"));
            }
        }
        if x2 <= x1 || y2 <= y1 {
            return Err(fail("corners must satisfy x2 > x1 and y2 > y1"));
        }
        Ok(BBox { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> S {
        self.x2 - self.x1
    }

    pub fn height(&self) -> S {
        self.y2 - self.y1
    }

    pub fn area(&self) -> S {
        self.width() * self.height()
    }

    pub fn center(&self) -> (S, S) {
        let two = S::two();
        ((self.x1 + self.x2) / two, (self.y1 + self.y2) / two)
    }

    /// Intersection area with another box; zero when disjoint.
    pub fn intersection_area(&self, other: &BBox<S>) -> S {
        let ix = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(S::zero());
        let iy = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(S::zero());
        ix * iy
    }

    /// Corner coordinates as `[x1, y1, x2, y2]`.
    pub fn corners(&self) -> [S; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    pub fn to_f64(&self) -> BBox<f64> {
        BBox {
            x1: self.x1.as_f64(),
            y1: self.y1.as_f64(),
            x2: self.x2.as_f64(),
            y2: self.y2.as_f64(),
        }
    }

    pub fn from_f64(b: &BBox<f64>) -> Self {
        BBox {
            x1: S::cast(b.x1),
            y1: S::cast(b.y1),
            x2: S::cast(b.x2),
            y2: S::cast(b.y2),
        }
    }
}

/// Box paired with a confidence score in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox<S: Scalar = f64> {
    pub bbox: BBox<S>,
    pub score: S,
}

impl<S: Scalar> ScoredBox<S> {
    pub fn new(bbox: BBox<S>, score: S) -> Result<Self> {
        if !score.is_finite() || score < S::zero() || score > S::one() {
            return Err(Error::InvalidScore {
                value: score.as_f64(),
            });
        }
        Ok(ScoredBox { bbox, score })
    }
}

/// Pixel dimensions of an image; boxes live in `[0, width] x [0, height]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageExtent {
    pub width: u32,
    pub height: u32,
}

impl ImageExtent {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidExtent { width, height });
        }
        Ok(ImageExtent { width, height })
    }

    pub fn width_s<S: Scalar>(&self) -> S {
        S::cast(f64::from(self.width))
    }

    pub fn height_s<S: Scalar>(&self) -> S {
        S::cast(f64::from(self.height))
    }
}

/// Intersection over union of two boxes.
///
/// Symmetric, in `[0, 1]`, zero for disjoint boxes and one for identical
/// boxes: `iou((0,0,10,10), (5,0,15,10))` is `50 / 150`.
pub fn iou<S: Scalar>(a: &BBox<S>, b: &BBox<S>) -> S {
    let inter = a.intersection_area(b);
    if inter <= S::zero() {
        return S::zero();
    }
    let union = a.area() + b.area() - inter;
    inter / union
}

/// Greedy non-maximum suppression over score-ranked boxes.
///
/// Boxes are visited in descending score order (ties keep input order); a
/// box is kept unless it overlaps an already-kept box with IoU strictly
/// above `iou_threshold`. Survivors come back sorted by descending score.
pub fn nms<S: Scalar>(boxes: &[ScoredBox<S>], iou_threshold: S) -> Vec<ScoredBox<S>> {
    let plain: Vec<(BBox<S>, S)> = boxes.iter().map(|b| (b.bbox, b.score)).collect();
    nms_indices(&plain, iou_threshold)
        .into_iter()
        .map(|i| boxes[i])
        .collect()
}

/// Index-returning NMS for callers that carry payloads alongside boxes.
///
/// Returned indices point into the input slice and are ordered by
/// descending score with input-order tie-breaking.
pub fn nms_indices<S: Scalar>(boxes: &[(BBox<S>, S)], iou_threshold: S) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        boxes[b]
            .1
            .partial_cmp(&boxes[a].1)
            .unwrap_or(Ordering::Equal)
    });

    let mut kept: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = kept
            .iter()
            .any(|&k| iou(&boxes[k].0, &boxes[i].0) > iou_threshold);
        if !suppressed {
            kept.push(i);
        }
    }
    kept
}

/// Scales a box about its center by `factor`, then clips to the extent.
///
/// `expand_box((10,10,30,30), 1.5, 100x100)` gives `(5,5,35,35)`;
/// `expand_box((0,0,20,20), 1.5, 100x100)` clips to `(0,0,25,25)`.
///
/// # Panics
///
/// Panics if `factor < 1` or if the input box lies outside the extent,
/// which would leave nothing after clipping.
pub fn expand_box<S: Scalar>(bbox: &BBox<S>, factor: S, extent: ImageExtent) -> BBox<S> {
    assert!(factor >= S::one(), "expansion factor must be at least 1");
    let (cx, cy) = bbox.center();
    let half_w = bbox.width() * factor / S::two();
    let half_h = bbox.height() * factor / S::two();
    let w: S = extent.width_s();
    let h: S = extent.height_s();
    let x1 = (cx - half_w).max(S::zero());
    let y1 = (cy - half_h).max(S::zero());
    let x2 = (cx + half_w).min(w);
    let y2 = (cy + half_h).min(h);
    BBox::new(x1, y1, x2, y2).expect("expanding an in-image box by factor >= 1 stays non-degenerate")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    fn sb(x1: f64, y1: f64, x2: f64, y2: f64, score: f64) -> ScoredBox<f64> {
        ScoredBox::new(bb(x1, y1, x2, y2), score).unwrap()
    }

    #[test]
    fn degenerate_boxes_rejected() {
        assert!(BBox::new(0.0, 0.0, 0.0, 10.0).is_err());
        assert!(BBox::new(5.0, 0.0, 4.0, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::NAN, 10.0).is_err());
        assert!(BBox::new(0.0, 0.0, f64::INFINITY, 10.0).is_err());
    }

    #[test]
    fn area_uses_exclusive_convention() {
        assert_eq!(bb(0.0, 0.0, 10.0, 10.0).area(), 100.0);
        assert_eq!(bb(2.0, 3.0, 4.0, 7.0).area(), 8.0);
    }

    #[test]
    fn score_range_enforced() {
        assert!(ScoredBox::new(bb(0.0, 0.0, 1.0, 1.0), -0.1).is_err());
        assert!(ScoredBox::new(bb(0.0, 0.0, 1.0, 1.0), 1.1).is_err());
        assert!(ScoredBox::new(bb(0.0, 0.0, 1.0, 1.0), f64::NAN).is_err());
        assert!(ScoredBox::new(bb(0.0, 0.0, 1.0, 1.0), 0.0).is_ok());
        assert!(ScoredBox::new(bb(0.0, 0.0, 1.0, 1.0), 1.0).is_ok());
    }

    #[test]
    fn extent_rejects_zero_sides() {
        assert!(ImageExtent::new(0, 5).is_err());
        assert!(ImageExtent::new(5, 0).is_err());
        assert!(ImageExtent::new(1, 1).is_ok());
    }

    #[test]
    fn iou_half_overlap_case() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(5.0, 0.0, 15.0, 10.0);
        let expected = 50.0 / 150.0;
        assert!((iou(&a, &b) - expected).abs() < 1e-12);
    }

    #[test]
    fn iou_disjoint_and_identical() {
        let a = bb(0.0, 0.0, 10.0, 10.0);
        let b = bb(20.0, 20.0, 30.0, 30.0);
        assert_eq!(iou(&a, &b), 0.0);
        assert_eq!(iou(&a, &a.clone()), 1.0);
        let touching = bb(10.0, 0.0, 20.0, 10.0);
        assert_eq!(iou(&a, &touching), 0.0);
    }

    #[test]
    fn iou_in_f32() {
        let a = BBox::<f32>::new(0.0, 0.0, 10.0, 10.0).unwrap();
        let b = BBox::<f32>::new(5.0, 0.0, 15.0, 10.0).unwrap();
        assert!((iou(&a, &b) - 50.0f32 / 150.0).abs() < 1e-6);
    }

    #[test]
    fn nms_single_box_survives() {
        let input = vec![sb(0.0, 0.0, 10.0, 10.0, 0.5)];
        assert_eq!(nms(&input, 0.5), input);
    }

    #[test]
    fn nms_empty_input() {
        assert!(nms::<f64>(&[], 0.5).is_empty());
    }

    #[test]
    fn nms_threshold_one_keeps_duplicates() {
        let input = vec![sb(0.0, 0.0, 10.0, 10.0, 0.9), sb(0.0, 0.0, 10.0, 10.0, 0.8)];
        assert_eq!(nms(&input, 1.0).len(), 2);
    }

    #[test]
    fn nms_suppresses_lower_scored_overlap() {
        let input = vec![
            sb(0.0, 0.0, 10.0, 10.0, 0.6),
            sb(1.0, 1.0, 11.0, 11.0, 0.9),
            sb(50.0, 50.0, 60.0, 60.0, 0.3),
        ];
        let kept = nms(&input, 0.5);
        assert_eq!(kept.len(), 2);
        assert_eq!(kept[0], input[1]);
        assert_eq!(kept[1], input[2]);
    }

    #[test]
    fn nms_ties_keep_input_order() {
        let a = sb(0.0, 0.0, 10.0, 10.0, 0.7);
        let b = sb(1.0, 1.0, 11.0, 11.0, 0.7);
        let kept = nms(&[a, b], 0.5);
        assert_eq!(kept, vec![a]);
        let kept_rev = nms(&[b, a], 0.5);
        assert_eq!(kept_rev, vec![b]);
    }

    #[test]
    fn expand_box_interior_and_clipped() {
        let extent = ImageExtent::new(100, 100).unwrap();
        let inner = expand_box(&bb(10.0, 10.0, 30.0, 30.0), 1.5, extent);
        assert_eq!(inner, bb(5.0, 5.0, 35.0, 35.0));
        let edge = expand_box(&bb(0.0, 0.0, 20.0, 20.0), 1.5, extent);
        assert_eq!(edge, bb(0.0, 0.0, 25.0, 25.0));
    }

    #[test]
    fn expand_box_factor_one_is_identity_inside_extent() {
        let extent = ImageExtent::new(64, 64).unwrap();
        let b = bb(3.0, 7.0, 20.0, 31.0);
        assert_eq!(expand_box(&b, 1.0, extent), b);
    }

    #[test]
    #[should_panic]
    fn expand_box_rejects_shrinking() {
        let extent = ImageExtent::new(64, 64).unwrap();
        expand_box(&bb(3.0, 7.0, 20.0, 31.0), 0.5, extent);
    }
}
