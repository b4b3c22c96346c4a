//! Toy student detector and its training harness.
//!
//! The detector is the smallest model that exercises the full objective:
//! a fixed population of learnable candidate boxes, each with its own
//! class logits (background last). Boxes live in image-normalized
//! coordinates. Training is full-batch Adam on the combined
//! supervised + pseudo-label objective, with matching recomputed every
//! step and an optional data-parallel gradient accumulation that is
//! summed in image order so it reproduces the serial result.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{nms_indices, BBox, ImageExtent};
use crate::losses::{
    match_predictions, supervised_loss, total_loss, unsupervised_loss, ImageLossTerms, LossGrad,
    Prediction, Target,
};
use crate::scalar::Scalar;
use crate::{CategoryId, ImageId};

/// Smallest admissible box side in normalized coordinates; the
/// post-step projection pushes degenerate boxes back to this.
const MIN_SIDE: f64 = 1e-3;

/// A candidate-population detector with learnable boxes and logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetector<S: Scalar = f64> {
    n_classes: usize,
    pub candidates: Vec<Prediction<S>>,
}

/// One decoded detector output in normalized coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyDetection<S: Scalar = f64> {
    pub class_index: usize,
    pub bbox: BBox<S>,
    pub score: S,
}

impl<S: Scalar> ToyDetector<S> {
    /// A `grid` x `grid` population of overlapping boxes (1.6x the cell
    /// side, centered on cell centers, clipped to the image) with
    /// uniform (all-zero) class logits over `n_classes` plus background.
    /// The overlap keeps the best candidate within matching range of
    /// moderately sized targets anywhere in the image.
    pub fn new(n_classes: usize, grid: usize) -> Self {
        assert!(n_classes > 0 && grid > 0);
        let mut candidates = Vec::with_capacity(grid * grid);
        let cell = 1.0 / grid as f64;
        let half_side = 0.8 * cell;
        for row in 0..grid {
            for col in 0..grid {
                let cx = (col as f64 + 0.5) * cell;
                let cy = (row as f64 + 0.5) * cell;
                candidates.push(Prediction {
                    class_logits: vec![S::zero(); n_classes + 1],
                    bbox: [
                        S::cast((cx - half_side).max(0.0)),
                        S::cast((cy - half_side).max(0.0)),
                        S::cast((cx + half_side).min(1.0)),
                        S::cast((cy + half_side).min(1.0)),
                    ],
                });
            }
        }
        ToyDetector {
            n_classes,
            candidates,
        }
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn n_candidates(&self) -> usize {
        self.candidates.len()
    }

    /// Decodes detections: per candidate the best foreground class and
    /// its probability, filtered at `min_score`, then classwise NMS.
    pub fn detect(&self, min_score: S, nms_iou: S) -> Vec<ToyDetection<S>> {
        let mut raw: Vec<ToyDetection<S>> = Vec::new();
        for candidate in &self.candidates {
            let top = candidate
                .class_logits
                .iter()
                .fold(S::neg_infinity(), |a, &b| a.max(b));
            let exps: Vec<S> = candidate
                .class_logits
                .iter()
                .map(|&z| (z - top).exp())
                .collect();
            let total = exps.iter().fold(S::zero(), |a, &b| a + b);
            let mut class_index = 0;
            for k in 1..self.n_classes {
                if exps[k] > exps[class_index] {
                    class_index = k;
                }
            }
            let score = exps[class_index] / total;
            if score < min_score {
                continue;
            }
            let b = candidate.bbox;
            let Ok(bbox) = BBox::new(b[0], b[1], b[2], b[3]) else {
                continue;
            };
            raw.push(ToyDetection {
                class_index,
                bbox,
                score,
            });
        }

        let mut out = Vec::with_capacity(raw.len());
        for class_index in 0..self.n_classes {
            let group: Vec<&ToyDetection<S>> = raw
                .iter()
                .filter(|d| d.class_index == class_index)
                .collect();
            if group.is_empty() {
                continue;
            }
            let scored: Vec<(BBox<S>, S)> = group.iter().map(|d| (d.bbox, d.score)).collect();
            for i in nms_indices(&scored, nms_iou) {
                out.push(*group[i]);
            }
        }
        out.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.class_index.cmp(&b.class_index))
        });
        out
    }
}

/// Scales a pixel-space box into the normalized [0,1] coordinates the
/// toy detector trains in.
pub fn normalize_box<S: Scalar>(bbox: &BBox<S>, extent: ImageExtent) -> [S; 4] {
    let w = S::cast(extent.width as f64);
    let h = S::cast(extent.height as f64);
    [bbox.x1 / w, bbox.y1 / h, bbox.x2 / w, bbox.y2 / h]
}

/// Inverse of [`normalize_box`] for decoded detections.
pub fn denormalize_box<S: Scalar>(bbox: &BBox<S>, extent: ImageExtent) -> BBox<S> {
    let w = S::cast(extent.width as f64);
    let h = S::cast(extent.height as f64);
    BBox::new(bbox.x1 * w, bbox.y1 * h, bbox.x2 * w, bbox.y2 * h)
        .expect("denormalization preserves box validity")
}

/// Converts decoded toy detections to pixel-space eval records, mapping
/// class indices through `target_ids` (the label-space target order).
pub fn toy_detections<S: Scalar>(
    detector: &ToyDetector<S>,
    image_id: ImageId,
    extent: ImageExtent,
    target_ids: &[CategoryId],
    min_score: S,
    nms_iou: S,
) -> Vec<Detection<S>> {
    assert_eq!(target_ids.len(), detector.n_classes());
    detector
        .detect(min_score, nms_iou)
        .into_iter()
        .map(|d| Detection {
            image_id,
            category_id: target_ids[d.class_index],
            bbox: denormalize_box(&d.bbox, extent),
            score: d.score,
        })
        .collect()
}

/// One training image: ground truth, pseudo labels, and split
/// membership. Targets are in normalized coordinates and class-index
/// space.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage<S: Scalar = f64> {
    pub gt: Vec<Target<S>>,
    pub pseudo: Vec<Target<S>>,
    pub in_labeled: bool,
    pub in_unlabeled: bool,
}

/// Training hyperparameters. Plain f64 for config-file mirroring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// Weight of the pseudo-label term.
    pub alpha: f64,
    /// Confidence gate inside the pseudo-label loss.
    pub tau: f64,
    /// IoU floor for prediction-target matching.
    pub match_iou: f64,
    pub steps: usize,
    pub learning_rate: f64,
    /// Accumulate per-image gradients with rayon; the sum stays in image
    /// order, so results equal the serial path.
    pub parallel: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 1.0,
            tau: 0.8,
            match_iou: 0.3,
            steps: 200,
            learning_rate: 0.05,
            parallel: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!("alpha must be a finite value >= 0, got {}", self.alpha),
            });
        }
        for (name, v) in [("tau", self.tau), ("match_iou", self.match_iou)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig {
                    reason: format!("{name} must lie in [0, 1], got {v}"),
                });
            }
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "learning_rate must be a finite positive value, got {}",
                    self.learning_rate
                ),
            });
        }
        Ok(())
    }
}

/// Trained detector plus the per-step loss record.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult<S: Scalar = f64> {
    pub detector: ToyDetector<S>,
    pub loss_curve: Vec<f64>,
}

fn image_grads<S: Scalar>(
    candidates: &[Prediction<S>],
    image: &TrainImage<S>,
    config: &TrainConfig,
) -> (LossGrad<S>, LossGrad<S>) {
    let match_iou = S::cast(config.match_iou);
    let sigma_s = match_predictions(candidates, &image.gt, match_iou);
    let sup = supervised_loss(candidates, &image.gt, &sigma_s);
    let sigma_u = match_predictions(candidates, &image.pseudo, match_iou);
    let unsup = unsupervised_loss(candidates, &image.pseudo, &sigma_u, S::cast(config.tau));
    (sup, unsup)
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: usize,
}

impl Adam {
    fn new(len: usize) -> Self {
        Adam {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        const BETA1: f64 = 0.9;
        const BETA2: f64 = 0.999;
        const EPS: f64 = 1e-8;
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for ((p, &g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + EPS);
        }
    }
}

fn flatten<S: Scalar>(candidates: &[Prediction<S>]) -> Vec<f64> {
    let mut out = Vec::new();
    for c in candidates {
        out.extend(c.class_logits.iter().map(|z| z.as_f64()));
        out.extend(c.bbox.iter().map(|b| b.as_f64()));
    }
    out
}

fn unflatten<S: Scalar>(candidates: &mut [Prediction<S>], params: &[f64]) {
    let mut k = 0;
    for c in candidates {
        for z in &mut c.class_logits {
            *z = S::cast(params[k]);
            k += 1;
        }
        for b in &mut c.bbox {
            *b = S::cast(params[k]);
            k += 1;
        }
    }
}

fn flatten_grad<S: Scalar>(grad: &LossGrad<S>) -> Vec<f64> {
    let mut out = Vec::new();
    for (dl, db) in grad.d_logits.iter().zip(&grad.d_boxes) {
        out.extend(dl.iter().map(|g| g.as_f64()));
        out.extend(db.iter().map(|g| g.as_f64()));
    }
    out
}

/// Clamps box parameters into [0,1] and restores a minimum side length,
/// keeping the optimizer inside the space of valid boxes.
fn project_boxes<S: Scalar>(candidates: &mut [Prediction<S>]) {
    let min_side = S::cast(MIN_SIDE);
    for c in &mut *candidates {
        for b in &mut c.bbox {
            *b = b.clamp01();
        }
        for (lo, hi) in [(0usize, 2usize), (1, 3)] {
            if c.bbox[hi] - c.bbox[lo] < min_side {
                let center = (c.bbox[lo] + c.bbox[hi]) * S::half();
                let half = min_side * S::half();
                let lo_v = (center - half)
                    .max(S::zero())
                    .min(S::one() - min_side);
                c.bbox[lo] = lo_v;
                c.bbox[hi] = lo_v + min_side;
            }
        }
    }
}

/// Full-batch training of the toy detector on the combined objective.
/// Zero steps returns the initial detector unchanged. A non-finite loss
/// aborts with a divergence error naming the step.
pub fn train_toy_student<S: Scalar>(
    detector: &ToyDetector<S>,
    images: &[TrainImage<S>],
    config: &TrainConfig,
) -> Result<TrainResult<S>> {
    config.validate()?;
    if images.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "training set is empty".into(),
        });
    }
    let mut student = detector.clone();
    let mut curve = Vec::with_capacity(config.steps);
    let mut adam = Adam::new(flatten(&student.candidates).len());
    let image_weight = S::one() / S::from_usize_lossy(images.len());
    let alpha = S::cast(config.alpha);

    for step in 0..config.steps {
        let per_image: Vec<(LossGrad<S>, LossGrad<S>)> = if config.parallel {
            images
                .par_iter()
                .map(|image| image_grads(&student.candidates, image, config))
                .collect()
        } else {
            images
                .iter()
                .map(|image| image_grads(&student.candidates, image, config))
                .collect()
        };

        let mut combined = LossGrad {
            value: S::zero(),
            d_logits: student
                .candidates
                .iter()
                .map(|c| vec![S::zero(); c.class_logits.len()])
                .collect(),
            d_boxes: vec![[S::zero(); 4]; student.candidates.len()],
        };
        let mut terms = Vec::with_capacity(images.len());
        for (image, (sup, unsup)) in images.iter().zip(&per_image) {
            if image.in_labeled {
                combined.add_scaled(sup, image_weight);
            }
            if image.in_unlabeled {
                combined.add_scaled(unsup, alpha * image_weight);
            }
            terms.push(ImageLossTerms {
                supervised: sup.value,
                unsupervised: unsup.value,
                in_labeled: image.in_labeled,
                in_unlabeled: image.in_unlabeled,
            });
        }
        #[cfg(debug_assertions)]
        {
            let drift_tol = S::cast(1e-9).max(S::epsilon() * S::cast(1e3));
            assert!(
                (combined.value - total_loss(&terms, alpha)).abs() < drift_tol,
                "accumulated objective drifted from total_loss"
            );
        }
        let _ = &terms;

        let value = combined.value.as_f64();
        if !value.is_finite() {
            return Err(Error::Divergence { step, loss: value });
        }
        curve.push(value);

        let mut params = flatten(&student.candidates);
        let grads = flatten_grad(&combined);
        adam.step(&mut params, &grads, config.learning_rate);
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Divergence { step, loss: value });
        }
        unflatten(&mut student.candidates, &params);
        project_boxes(&mut student.candidates);
    }

    Ok(TrainResult {
        detector: student,
        loss_curve: curve,
    })
}
