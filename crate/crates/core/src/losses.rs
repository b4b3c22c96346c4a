//! Detection training objective: matching, supervised and pseudo-label
//! losses with analytic gradients, and the combined two-term objective.
//!
//! Class scores enter as raw logits over the target categories plus one
//! trailing background entry; probabilities are softmax(logits). Boxes
//! are corner coordinates normalized by image extent, regressed with an
//! elementwise L1 loss. All gradients are exact and are validated against
//! central finite differences in the test suite.

use crate::scalar::Scalar;

/// One detector output: class logits (background last) and a normalized
/// corner box. May be degenerate mid-training; IoU treats an inverted box
/// as empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<S: Scalar = f64> {
    pub class_logits: Vec<S>,
    pub bbox: [S; 4],
}

impl<S: Scalar> Prediction<S> {
    /// Number of foreground classes (logit count minus background).
    pub fn n_classes(&self) -> usize {
        self.class_logits.len() - 1
    }
}

/// One training target: a foreground class index, a normalized corner
/// box, and a confidence (1 for ground truth, the stored classifier
/// confidence for pseudo labels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Target<S: Scalar = f64> {
    pub class_index: usize,
    pub bbox: [S; 4],
    pub confidence: S,
}

impl<S: Scalar> Target<S> {
    /// Ground-truth target: confidence pinned to 1.
    pub fn ground_truth(class_index: usize, bbox: [S; 4]) -> Self {
        Target {
            class_index,
            bbox,
            confidence: S::one(),
        }
    }
}

/// `sigma[i]` is the target index prediction `i` claimed, or `None`.
pub type Matching = Vec<Option<usize>>;

/// IoU for raw corner arrays; inverted or zero-extent boxes count as
/// empty (IoU 0), which keeps the matcher total over mid-training boxes.
pub fn iou_corners<S: Scalar>(a: &[S; 4], b: &[S; 4]) -> S {
    let side = |lo: S, hi: S| (hi - lo).max(S::zero());
    let area = |r: &[S; 4]| side(r[0], r[2]) * side(r[1], r[3]);
    let ix = side(a[0].max(b[0]), a[2].min(b[2]));
    let iy = side(a[1].max(b[1]), a[3].min(b[3]));
    let inter = ix * iy;
    if !(inter > S::zero()) {
        return S::zero();
    }
    let union = area(a) + area(b) - inter;
    inter / union
}

fn softmax<S: Scalar>(logits: &[S]) -> Vec<S> {
    let top = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let exps: Vec<S> = logits.iter().map(|&l| (l - top).exp()).collect();
    let total = exps.iter().fold(S::zero(), |a, &b| a + b);
    exps.into_iter().map(|e| e / total).collect()
}

fn max_foreground_prob<S: Scalar>(prediction: &Prediction<S>) -> S {
    let probs = softmax(&prediction.class_logits);
    probs[..prediction.n_classes()]
        .iter()
        .fold(S::zero(), |a, &b| a.max(b))
}

/// Greedy one-to-one assignment: predictions in descending foreground
/// confidence claim the unclaimed target of highest IoU, requiring
/// IoU >= `match_iou`. Ties (equal confidence, equal IoU) resolve to the
/// lower index.
pub fn match_predictions<S: Scalar>(
    predictions: &[Prediction<S>],
    targets: &[Target<S>],
    match_iou: S,
) -> Matching {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    let confidence: Vec<S> = predictions.iter().map(max_foreground_prob).collect();
    order.sort_by(|&a, &b| {
        confidence[b]
            .partial_cmp(&confidence[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut sigma: Matching = vec![None; predictions.len()];
    let mut claimed = vec![false; targets.len()];
    for i in order {
        let mut best: Option<(usize, S)> = None;
        for (j, target) in targets.iter().enumerate() {
            if claimed[j] {
                continue;
            }
            let overlap = iou_corners(&predictions[i].bbox, &target.bbox);
            if overlap < match_iou {
                continue;
            }
            let better = match best {
                None => true,
                Some((_, current)) => overlap > current,
            };
            if better {
                best = Some((j, overlap));
            }
        }
        if let Some((j, _)) = best {
            claimed[j] = true;
            sigma[i] = Some(j);
        }
    }
    sigma
}

/// A loss value with gradients w.r.t. every prediction's logits and box.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad<S: Scalar = f64> {
    pub value: S,
    pub d_logits: Vec<Vec<S>>,
    pub d_boxes: Vec<[S; 4]>,
}

impl<S: Scalar> LossGrad<S> {
    fn zeros(predictions: &[Prediction<S>]) -> Self {
        LossGrad {
            value: S::zero(),
            d_logits: predictions
                .iter()
                .map(|p| vec![S::zero(); p.class_logits.len()])
                .collect(),
            d_boxes: vec![[S::zero(); 4]; predictions.len()],
        }
    }

    /// Accumulates `scale * other` into self (values and gradients).
    pub fn add_scaled(&mut self, other: &LossGrad<S>, scale: S) {
        self.value += other.value * scale;
        for (acc, src) in self.d_logits.iter_mut().zip(&other.d_logits) {
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += s * scale;
            }
        }
        for (acc, src) in self.d_boxes.iter_mut().zip(&other.d_boxes) {
            for (a, &s) in acc.iter_mut().zip(src) {
                *a += s * scale;
            }
        }
    }
}

/// Adds CE(softmax(logits), class) for prediction `i`, scaled by `w`.
fn accumulate_ce<S: Scalar>(
    grad: &mut LossGrad<S>,
    predictions: &[Prediction<S>],
    i: usize,
    class: usize,
    w: S,
) -> S {
    let logits = &predictions[i].class_logits;
    let probs = softmax(logits);
    let p = probs[class].max(S::cast(f64::MIN_POSITIVE));
    let ce = -p.ln();
    for (k, &pk) in probs.iter().enumerate() {
        let indicator = if k == class { S::one() } else { S::zero() };
        grad.d_logits[i][k] += (pk - indicator) * w;
    }
    ce * w
}

/// Adds elementwise L1 between prediction `i`'s box and `target`, scaled
/// by `w`. The subgradient at a zero coordinate difference is 0.
fn accumulate_l1<S: Scalar>(
    grad: &mut LossGrad<S>,
    predictions: &[Prediction<S>],
    i: usize,
    target: &[S; 4],
    w: S,
) -> S {
    let mut total = S::zero();
    for (d, &t) in target.iter().enumerate() {
        let diff = predictions[i].bbox[d] - t;
        total += diff.abs();
        let sign = if diff > S::zero() {
            S::one()
        } else if diff < S::zero() {
            -S::one()
        } else {
            S::zero()
        };
        grad.d_boxes[i][d] += sign * w;
    }
    total * w
}

/// Ground-truth loss: mean over predictions of CE toward the matched
/// class (background when unmatched) plus L1 toward the matched box.
pub fn supervised_loss<S: Scalar>(
    predictions: &[Prediction<S>],
    targets: &[Target<S>],
    matching: &Matching,
) -> LossGrad<S> {
    assert_eq!(matching.len(), predictions.len());
    let mut grad = LossGrad::zeros(predictions);
    if predictions.is_empty() {
        return grad;
    }
    let background = predictions[0].n_classes();
    let w = S::one() / S::from_usize_lossy(predictions.len());
    let mut value = S::zero();
    for (i, assigned) in matching.iter().enumerate() {
        match assigned {
            Some(j) => {
                let target = &targets[*j];
                value += accumulate_ce(&mut grad, predictions, i, target.class_index, w);
                value += accumulate_l1(&mut grad, predictions, i, &target.bbox, w);
            }
            None => {
                value += accumulate_ce(&mut grad, predictions, i, background, w);
            }
        }
    }
    grad.value = value;
    grad
}

/// Pseudo-label loss. Matched terms are gated by the target confidence
/// reaching `tau` and normalized by the gate count; unmatched predictions
/// contribute background CE under the same normalizer. A closed gate
/// (zero confident matches) defines the loss as 0.
pub fn unsupervised_loss<S: Scalar>(
    predictions: &[Prediction<S>],
    targets: &[Target<S>],
    matching: &Matching,
    tau: S,
) -> LossGrad<S> {
    assert_eq!(matching.len(), predictions.len());
    let mut grad = LossGrad::zeros(predictions);
    if predictions.is_empty() {
        return grad;
    }
    let gated = matching
        .iter()
        .flatten()
        .filter(|j| targets[**j].confidence >= tau)
        .count();
    if gated == 0 {
        return grad;
    }
    let background = predictions[0].n_classes();
    let w = S::one() / S::from_usize_lossy(gated);
    let mut value = S::zero();
    for (i, assigned) in matching.iter().enumerate() {
        match assigned {
            Some(j) => {
                let target = &targets[*j];
                if target.confidence >= tau {
                    value += accumulate_ce(&mut grad, predictions, i, target.class_index, w);
                    value += accumulate_l1(&mut grad, predictions, i, &target.bbox, w);
                }
            }
            None => {
                value += accumulate_ce(&mut grad, predictions, i, background, w);
            }
        }
    }
    grad.value = value;
    grad
}

/// One image's loss terms and split membership.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageLossTerms<S: Scalar = f64> {
    pub supervised: S,
    pub unsupervised: S,
    pub in_labeled: bool,
    pub in_unlabeled: bool,
}

/// Combined objective: mean over images of the supervised term (labeled
/// membership) plus `alpha` times the pseudo-label term (unlabeled
/// membership). An image in both splits contributes both.
pub fn total_loss<S: Scalar>(terms: &[ImageLossTerms<S>], alpha: S) -> S {
    if terms.is_empty() {
        return S::zero();
    }
    let mut total = S::zero();
    for t in terms {
        if t.in_labeled {
            total += t.supervised;
        }
        if t.in_unlabeled {
            total += alpha * t.unsupervised;
        }
    }
    total / S::from_usize_lossy(terms.len())
}
