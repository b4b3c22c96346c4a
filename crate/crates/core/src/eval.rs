//! Detection metrics: COCO-style average precision, mAP over the
//! 0.5:0.95 threshold ladder, pseudo-label quality (AP and mean count per
//! image), and top-N average recall.
//!
//! AP uses the 101-point interpolated convention: detections of one
//! category are ranked by score across the whole image set, matched
//! greedily to at most one ground-truth box per image, and the
//! right-maximized precision envelope is sampled at recalls 0.00..=1.00.
//! Categories without ground truth are skipped and flagged, never
//! averaged as zeros.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::geometry::{iou, BBox};
use crate::scalar::Scalar;
use crate::{CategoryId, ImageId};

/// One scored detection or pseudo-label, in corner coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection<S: Scalar = f64> {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox<S>,
    pub score: S,
}

/// One ground-truth box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth<S: Scalar = f64> {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: BBox<S>,
}

/// A class-agnostic scored box used for recall evaluation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankedProposal<S: Scalar = f64> {
    pub image_id: ImageId,
    pub bbox: BBox<S>,
    pub score: S,
}

/// The ten COCO IoU thresholds 0.50, 0.55, .., 0.95.
pub fn coco_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

/// 101-point interpolated AP from true-positive flags in rank order.
fn interpolated_ap(tp_flags: &[bool], n_gt: usize) -> f64 {
    debug_assert!(n_gt > 0);
    let mut recall = Vec::with_capacity(tp_flags.len());
    let mut precision = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &hit) in tp_flags.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / n_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut total = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&x| x < r);
        if idx < precision.len() {
            total += precision[idx];
        }
    }
    total / 101.0
}

/// Greedy matching of one category's ranked detections: each detection
/// claims the unclaimed same-image ground-truth box of highest IoU at or
/// above the threshold; ties go to the earlier box.
fn match_flags<S: Scalar>(
    ranked: &[&Detection<S>],
    gt: &[&GroundTruth<S>],
    iou_threshold: f64,
) -> Vec<bool> {
    let mut by_image: HashMap<ImageId, Vec<usize>> = HashMap::new();
    for (j, g) in gt.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(j);
    }
    let mut claimed = vec![false; gt.len()];
    let mut flags = Vec::with_capacity(ranked.len());
    for det in ranked {
        let mut best: Option<(usize, f64)> = None;
        if let Some(candidates) = by_image.get(&det.image_id) {
            for &j in candidates {
                if claimed[j] {
                    continue;
                }
                let overlap = iou(&det.bbox.to_f64(), &gt[j].bbox.to_f64());
                if overlap < iou_threshold {
                    continue;
                }
                if best.is_none_or(|(_, current)| overlap > current) {
                    best = Some((j, overlap));
                }
            }
        }
        match best {
            Some((j, _)) => {
                claimed[j] = true;
                flags.push(true);
            }
            None => flags.push(false),
        }
    }
    flags
}

/// AP for one category at one IoU threshold; `None` when the category
/// has no ground truth (skipped in aggregation per COCO convention).
pub fn average_precision<S: Scalar>(
    detections: &[Detection<S>],
    gt: &[GroundTruth<S>],
    iou_threshold: f64,
    category_id: CategoryId,
) -> Option<f64> {
    let gts: Vec<&GroundTruth<S>> = gt.iter().filter(|g| g.category_id == category_id).collect();
    if gts.is_empty() {
        return None;
    }
    let mut ranked: Vec<&Detection<S>> = detections
        .iter()
        .filter(|d| d.category_id == category_id)
        .collect();
    ranked.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let flags = match_flags(&ranked, &gts, iou_threshold);
    Some(interpolated_ap(&flags, gts.len()))
}

fn gt_categories<S: Scalar>(gt: &[GroundTruth<S>]) -> Vec<CategoryId> {
    let set: BTreeSet<CategoryId> = gt.iter().map(|g| g.category_id).collect();
    set.into_iter().collect()
}

/// Mean AP over the given categories at one threshold; `None` when no
/// category has ground truth.
pub fn mean_ap_at<S: Scalar>(
    detections: &[Detection<S>],
    gt: &[GroundTruth<S>],
    iou_threshold: f64,
    categories: &[CategoryId],
) -> Option<f64> {
    let values: Vec<f64> = categories
        .iter()
        .filter_map(|&c| average_precision(detections, gt, iou_threshold, c))
        .collect();
    if values.is_empty() {
        None
    } else {
        Some(values.iter().sum::<f64>() / values.len() as f64)
    }
}

/// AP50 averaged over every category present in the ground truth.
pub fn ap50<S: Scalar>(detections: &[Detection<S>], gt: &[GroundTruth<S>]) -> f64 {
    mean_ap_at(detections, gt, 0.5, &gt_categories(gt)).unwrap_or_else(|| {
        log::warn!("AP50 undefined: no ground truth; reporting 0");
        0.0
    })
}

/// COCO mAP: AP averaged over the 0.5:0.95 thresholds and all categories
/// with ground truth. Degenerate empty input logs a warning and yields 0.
pub fn coco_map<S: Scalar>(detections: &[Detection<S>], gt: &[GroundTruth<S>]) -> f64 {
    let categories = gt_categories(gt);
    let mut values = Vec::new();
    for threshold in coco_thresholds() {
        if let Some(v) = mean_ap_at(detections, gt, threshold, &categories) {
            values.push(v);
        }
    }
    if values.is_empty() {
        log::warn!("mAP undefined: no ground truth; reporting 0");
        return 0.0;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

/// Pseudo-label quality: AP50 over the novel categories and the mean
/// label count per image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlQuality {
    /// AP50 over novel categories; `None` when no novel ground truth
    /// exists.
    pub ap: Option<f64>,
    /// Mean pseudo-label count per image, zero-label images included.
    pub per_image: f64,
    /// Novel categories that actually had ground truth.
    pub evaluated_categories: usize,
}

/// Evaluates mined labels against ground truth on the novel categories
/// only; `n_images` is the full image-set size so the per-image count
/// includes images that produced nothing.
pub fn pl_quality<S: Scalar>(
    pls: &[Detection<S>],
    gt: &[GroundTruth<S>],
    novel_categories: &[CategoryId],
    n_images: usize,
) -> PlQuality {
    assert!(n_images > 0, "image set must be nonempty");
    let novel: BTreeSet<CategoryId> = novel_categories.iter().copied().collect();
    let novel_pls: Vec<Detection<S>> = pls
        .iter()
        .filter(|d| novel.contains(&d.category_id))
        .copied()
        .collect();
    let novel_gt: Vec<GroundTruth<S>> = gt
        .iter()
        .filter(|g| novel.contains(&g.category_id))
        .copied()
        .collect();
    let categories = gt_categories(&novel_gt);
    let ap = mean_ap_at(&novel_pls, &novel_gt, 0.5, &categories);
    PlQuality {
        ap,
        per_image: novel_pls.len() as f64 / n_images as f64,
        evaluated_categories: categories.len(),
    }
}

/// AR@N at the given IoU thresholds: per image, the fraction of
/// ground-truth boxes covered by a top-N proposal at each threshold,
/// averaged over thresholds and then over images with ground truth.
pub fn average_recall_at_n_with<S: Scalar>(
    proposals: &[RankedProposal<S>],
    gt: &[GroundTruth<S>],
    n_values: &[usize],
    iou_thresholds: &[f64],
) -> BTreeMap<usize, f64> {
    assert!(!iou_thresholds.is_empty());
    let mut per_image_proposals: HashMap<ImageId, Vec<&RankedProposal<S>>> = HashMap::new();
    for p in proposals {
        per_image_proposals.entry(p.image_id).or_default().push(p);
    }
    for list in per_image_proposals.values_mut() {
        list.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(std::cmp::Ordering::Equal));
    }
    let mut per_image_gt: HashMap<ImageId, Vec<&GroundTruth<S>>> = HashMap::new();
    for g in gt {
        per_image_gt.entry(g.image_id).or_default().push(g);
    }

    let mut result = BTreeMap::new();
    for &n in n_values {
        let mut image_recalls = Vec::new();
        for (image_id, boxes) in &per_image_gt {
            let top: &[&RankedProposal<S>] = per_image_proposals
                .get(image_id)
                .map(|list| &list[..list.len().min(n)])
                .unwrap_or(&[]);
            let mut covered_fraction = 0.0;
            for &threshold in iou_thresholds {
                let covered = boxes
                    .iter()
                    .filter(|g| {
                        top.iter().any(|p| {
                            iou(&p.bbox.to_f64(), &g.bbox.to_f64()) >= threshold
                        })
                    })
                    .count();
                covered_fraction += covered as f64 / boxes.len() as f64;
            }
            image_recalls.push(covered_fraction / iou_thresholds.len() as f64);
        }
        let ar = if image_recalls.is_empty() {
            0.0
        } else {
            image_recalls.iter().sum::<f64>() / image_recalls.len() as f64
        };
        result.insert(n, ar);
    }
    result
}

/// AR@N at IoU 0.5, the default used throughout the synthetic benchmark.
pub fn average_recall_at_n<S: Scalar>(
    proposals: &[RankedProposal<S>],
    gt: &[GroundTruth<S>],
    n_values: &[usize],
) -> BTreeMap<usize, f64> {
    average_recall_at_n_with(proposals, gt, n_values, &[0.5])
}

/// Per-category AP entry in a report.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CategoryAp {
    pub category_id: CategoryId,
    pub iou_threshold: f64,
    pub ap: f64,
}

/// Full evaluation summary, serializable and renderable as text.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ap50: f64,
    pub map_50_95: f64,
    pub pl: Option<PlQuality>,
    pub ar_at_n: BTreeMap<usize, f64>,
    pub per_category: Vec<CategoryAp>,
    /// Categories that had detections but no ground truth and were
    /// skipped in every average.
    pub skipped_categories: Vec<CategoryId>,
    pub n_images: usize,
    pub n_ground_truth: usize,
    pub n_detections: usize,
}

impl EvalReport {
    pub fn build<S: Scalar>(
        detections: &[Detection<S>],
        gt: &[GroundTruth<S>],
        novel_categories: Option<&[CategoryId]>,
        n_images: usize,
    ) -> Self {
        let categories = gt_categories(gt);
        let mut per_category = Vec::new();
        for &category_id in &categories {
            for threshold in [0.5, 0.75] {
                if let Some(ap) = average_precision(detections, gt, threshold, category_id) {
                    per_category.push(CategoryAp {
                        category_id,
                        iou_threshold: threshold,
                        ap,
                    });
                }
            }
        }
        let with_gt: BTreeSet<CategoryId> = categories.iter().copied().collect();
        let skipped: Vec<CategoryId> = detections
            .iter()
            .map(|d| d.category_id)
            .filter(|c| !with_gt.contains(c))
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        EvalReport {
            ap50: ap50(detections, gt),
            map_50_95: coco_map(detections, gt),
            pl: novel_categories.map(|novel| pl_quality(detections, gt, novel, n_images)),
            ar_at_n: BTreeMap::new(),
            per_category,
            skipped_categories: skipped,
            n_images,
            n_ground_truth: gt.len(),
            n_detections: detections.len(),
        }
    }

    /// Fixed-width text rendering; values reported x100 like detection
    /// papers print them.
    pub fn text_table(&self) -> String {
        let mut out = String::new();
        let mut row = |name: &str, value: String| {
            out.push_str(&format!("{name:<16} {value}\n"));
        };
        row("metric", "value".to_string());
        row("AP50", format!("{:.2}", self.ap50 * 100.0));
        row("mAP[.50:.95]", format!("{:.2}", self.map_50_95 * 100.0));
        if let Some(pl) = &self.pl {
            match pl.ap {
                Some(ap) => row("AP@PL", format!("{:.2}", ap * 100.0)),
                None => row("AP@PL", "undefined (no novel ground truth)".to_string()),
            }
            row("#@PL", format!("{:.2}", pl.per_image));
        }
        for (n, ar) in &self.ar_at_n {
            row(&format!("AR@{n}"), format!("{:.2}", ar * 100.0));
        }
        row("images", self.n_images.to_string());
        row("ground truth", self.n_ground_truth.to_string());
        row("detections", self.n_detections.to_string());
        if !self.skipped_categories.is_empty() {
            row(
                "skipped",
                format!(
                    "{} categories without ground truth",
                    self.skipped_categories.len()
                ),
            );
        }
        out
    }
}
