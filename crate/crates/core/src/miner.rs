//! Pseudo-label mining pipeline.
//!
//! One image flows through proposal generation, iterative box refinement,
//! region classification, score fusion, a confidence threshold, and a
//! final NMS pass. The output ordering is a total order so runs are
//! byte-for-byte reproducible regardless of worker count.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{nms_indices, BBox};
use crate::input::ImageInput;
use crate::labelspace::LabelSpace;
use crate::proposals::{generate_proposals, refine_iteratively, BoxRefiner, ProposalSource};
use crate::scalar::Scalar;
use crate::scoring::{
    best_target, classify_regions, strip_non_targets, ScoringBackend, TextEmbeddingSet,
};
use crate::{CategoryId, ImageId};

/// Where a pseudo-label came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlSource {
    /// Mined by this pipeline.
    Vl,
    /// Produced by an external teacher detector.
    Teacher,
}

/// Final NMS grouping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmsMode {
    /// Boxes only suppress boxes of the same category.
    Classwise,
    /// Boxes suppress across categories.
    ClassAgnostic,
}

/// Which entries compete for a region's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSpace {
    /// Argmax over all entries; regions won by a background entry are
    /// dropped.
    FullSpace,
    /// Argmax over target entries only; background entries soak up
    /// probability mass but never veto a region.
    TargetsOnly,
}

/// Mining configuration. Plain f64 fields so one config file drives both
/// scalar widths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MinerConfig {
    /// Confidence threshold on the fused score.
    pub tau: f64,
    /// Iterative refinement steps applied to every proposal.
    pub roi_steps: usize,
    /// Proposals kept per image before refinement.
    pub top_k: usize,
    /// IoU threshold for the proposal-stage NMS.
    pub rpn_nms: f64,
    /// IoU threshold for the final pseudo-label NMS.
    pub pl_nms: f64,
    /// Average the objectness score into the classifier score.
    pub fusion_enabled: bool,
    pub nms_mode: NmsMode,
    pub score_space: ScoreSpace,
}

impl Default for MinerConfig {
    fn default() -> Self {
        MinerConfig {
            tau: 0.8,
            roi_steps: 10,
            top_k: 1000,
            rpn_nms: 0.3,
            pl_nms: 0.5,
            fusion_enabled: true,
            nms_mode: NmsMode::Classwise,
            score_space: ScoreSpace::FullSpace,
        }
    }
}

impl MinerConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64, name: &str| {
            if !(0.0..=1.0).contains(&v) || !v.is_finite() {
                Err(Error::InvalidConfig {
                    reason: format!("{name} must lie in [0, 1], got {v}"),
                })
            } else {
                Ok(())
            }
        };
        unit(self.tau, "tau")?;
        unit(self.rpn_nms, "rpn_nms")?;
        unit(self.pl_nms, "pl_nms")?;
        if self.top_k == 0 {
            return Err(Error::InvalidConfig {
                reason: "top_k must be at least 1".into(),
            });
        }
        Ok(())
    }
}

/// A region that survived classification, before threshold and NMS.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlCandidate<S: Scalar = f64> {
    pub bbox: BBox<S>,
    pub rpn_score: S,
    pub category_id: CategoryId,
    /// Classifier probability of the winning entry.
    pub classifier_prob: S,
    /// Objectness-fused score; what the threshold and NMS rank by.
    pub fused_score: S,
}

/// A mined or teacher-supplied box label.
///
/// `confidence` is the gated score: zero until the label passes the
/// emission threshold, equal to `fused_score` afterwards. Finalized
/// label lists never contain zero-confidence records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabel<S: Scalar = f64> {
    pub bbox: BBox<S>,
    pub category_id: CategoryId,
    pub fused_score: S,
    pub confidence: S,
    pub source: PlSource,
}

impl<S: Scalar> PseudoLabel<S> {
    /// A pre-threshold candidate label; confidence stays zero until
    /// finalization.
    pub fn candidate(
        bbox: BBox<S>,
        category_id: CategoryId,
        fused_score: S,
        source: PlSource,
    ) -> Self {
        PseudoLabel {
            bbox,
            category_id,
            fused_score,
            confidence: S::zero(),
            source,
        }
    }
}

/// Averages objectness and classifier confidence; with fusion off the
/// classifier confidence passes through untouched.
pub fn fuse_scores<S: Scalar>(rpn_score: S, classifier_prob: S, fusion_enabled: bool) -> S {
    if fusion_enabled {
        (rpn_score + classifier_prob) * S::half()
    } else {
        classifier_prob
    }
}

/// The three pluggable stages a mining run needs.
pub struct MinerBackends<'a, S: Scalar> {
    pub proposals: &'a dyn ProposalSource<S>,
    pub refiner: &'a dyn BoxRefiner<S>,
    pub scoring: &'a dyn ScoringBackend<S>,
}

/// Runs proposals, refinement, classification, and fusion for one image,
/// returning every candidate that won a target entry.
pub fn mine_candidates<S: Scalar>(
    input: &ImageInput<S>,
    backends: &MinerBackends<'_, S>,
    text: &TextEmbeddingSet<S>,
    labelspace: &LabelSpace,
    config: &MinerConfig,
) -> Result<Vec<PlCandidate<S>>> {
    config.validate()?;
    let proposals = generate_proposals(
        backends.proposals,
        input,
        config.top_k,
        S::cast(config.rpn_nms),
    )?;
    let refined = refine_iteratively(backends.refiner, input, proposals, config.roi_steps)?;
    let boxes: Vec<BBox<S>> = refined.iter().map(|p| p.bbox).collect();
    let dists = classify_regions(
        input,
        &boxes,
        text,
        backends.scoring,
        backends.scoring.temperature(),
    )?;

    let mut candidates = Vec::with_capacity(refined.len());
    for (proposal, dist) in refined.iter().zip(&dists) {
        let hit = match config.score_space {
            ScoreSpace::FullSpace => strip_non_targets(dist, labelspace),
            ScoreSpace::TargetsOnly => Some(best_target(dist, labelspace)),
        };
        let Some(hit) = hit else { continue };
        candidates.push(PlCandidate {
            bbox: proposal.bbox,
            rpn_score: proposal.rpn_score,
            category_id: hit.category_id,
            classifier_prob: hit.prob,
            fused_score: fuse_scores(proposal.rpn_score, hit.prob, config.fusion_enabled),
        });
    }
    Ok(candidates)
}

fn pl_total_order<S: Scalar>(a: &PseudoLabel<S>, b: &PseudoLabel<S>) -> Ordering {
    b.fused_score
        .partial_cmp(&a.fused_score)
        .unwrap_or(Ordering::Equal)
        .then(a.category_id.cmp(&b.category_id))
        .then_with(|| cmp_scalar(a.bbox.x1, b.bbox.x1))
        .then_with(|| cmp_scalar(a.bbox.y1, b.bbox.y1))
        .then_with(|| cmp_scalar(a.bbox.x2, b.bbox.x2))
        .then_with(|| cmp_scalar(a.bbox.y2, b.bbox.y2))
}

fn cmp_scalar<S: Scalar>(a: S, b: S) -> Ordering {
    a.partial_cmp(&b).unwrap_or(Ordering::Equal)
}

/// Applies the emission threshold, final NMS, and the deterministic
/// total order (score desc, then category id, then box coordinates).
/// Survivors get their confidence stamped to the fused score; zero-score
/// records are never emitted even at threshold 0.
pub fn finalize_pseudo_labels<S: Scalar>(
    labels: Vec<PseudoLabel<S>>,
    config: &MinerConfig,
) -> Vec<PseudoLabel<S>> {
    let tau = S::cast(config.tau);
    let mut kept: Vec<PseudoLabel<S>> = labels
        .into_iter()
        .filter(|l| l.fused_score >= tau && l.fused_score > S::zero())
        .collect();
    kept.sort_by(pl_total_order);

    let mut survivors: Vec<PseudoLabel<S>> = match config.nms_mode {
        NmsMode::ClassAgnostic => {
            let scored: Vec<(BBox<S>, S)> = kept.iter().map(|l| (l.bbox, l.fused_score)).collect();
            nms_indices(&scored, S::cast(config.pl_nms))
                .into_iter()
                .map(|i| kept[i])
                .collect()
        }
        NmsMode::Classwise => {
            let mut out = Vec::with_capacity(kept.len());
            let mut categories: Vec<CategoryId> = kept.iter().map(|l| l.category_id).collect();
            categories.sort_unstable();
            categories.dedup();
            for category in categories {
                let group: Vec<&PseudoLabel<S>> =
                    kept.iter().filter(|l| l.category_id == category).collect();
                let scored: Vec<(BBox<S>, S)> =
                    group.iter().map(|l| (l.bbox, l.fused_score)).collect();
                for i in nms_indices(&scored, S::cast(config.pl_nms)) {
                    out.push(*group[i]);
                }
            }
            out
        }
    };

    for label in &mut survivors {
        label.confidence = label.fused_score;
    }
    survivors.sort_by(pl_total_order);
    survivors
}

/// Wraps raw candidates as unthresholded labels (confidence 0) ready for
/// [`finalize_pseudo_labels`] or a cross-source merge.
pub fn candidates_to_labels<S: Scalar>(candidates: Vec<PlCandidate<S>>) -> Vec<PseudoLabel<S>> {
    candidates
        .into_iter()
        .map(|c| PseudoLabel::candidate(c.bbox, c.category_id, c.fused_score, PlSource::Vl))
        .collect()
}

/// Full mining pass for one image: candidates, threshold, NMS, ordering.
pub fn mine_image<S: Scalar>(
    input: &ImageInput<S>,
    backends: &MinerBackends<'_, S>,
    text: &TextEmbeddingSet<S>,
    labelspace: &LabelSpace,
    config: &MinerConfig,
) -> Result<Vec<PseudoLabel<S>>> {
    let candidates = mine_candidates(input, backends, text, labelspace, config)?;
    Ok(finalize_pseudo_labels(
        candidates_to_labels(candidates),
        config,
    ))
}

fn median_score<S: Scalar>(labels: &[PseudoLabel<S>]) -> Option<f64> {
    if labels.is_empty() {
        return None;
    }
    let mut scores: Vec<f64> = labels.iter().map(|l| l.fused_score.as_f64()).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let mid = scores.len() / 2;
    Some(if scores.len() % 2 == 1 {
        scores[mid]
    } else {
        (scores[mid - 1] + scores[mid]) / 2.0
    })
}

/// Score-median gap between sources beyond which the merge logs a
/// calibration warning.
pub const MERGE_CALIBRATION_GAP: f64 = 0.3;

/// Merges externally supplied teacher candidates with mined candidates
/// through the shared threshold + NMS path, so overlapping cross-source
/// duplicates resolve to the higher-scored record. Teacher categories
/// must exist in the target set. A large median-score gap between the
/// two sources logs a warning but does not fail the merge.
pub fn merge_pseudo_labels<S: Scalar>(
    mined: Vec<PseudoLabel<S>>,
    teacher: Vec<PseudoLabel<S>>,
    labelspace: &LabelSpace,
    config: &MinerConfig,
) -> Result<Vec<PseudoLabel<S>>> {
    for label in &teacher {
        if !labelspace.is_target_id(label.category_id) {
            return Err(Error::LabelSpaceMismatch {
                category_id: label.category_id,
            });
        }
    }
    if let (Some(m), Some(t)) = (median_score(&mined), median_score(&teacher)) {
        let gap = (m - t).abs();
        if gap > MERGE_CALIBRATION_GAP {
            log::warn!(
                "median score gap {gap:.3} between mined ({m:.3}) and teacher ({t:.3}) labels; \
                 sources look miscalibrated"
            );
        }
    }
    let mut merged = mined;
    merged.extend(teacher);
    Ok(finalize_pseudo_labels(merged, config))
}

/// Per-image mining results plus the images that failed.
#[derive(Debug, Clone)]
pub struct MiningRun<S: Scalar = f64> {
    pub per_image: Vec<(ImageId, Vec<PseudoLabel<S>>)>,
    pub failures: Vec<(ImageId, String)>,
}

impl<S: Scalar> MiningRun<S> {
    pub fn total_labels(&self) -> usize {
        self.per_image.iter().map(|(_, l)| l.len()).sum()
    }

    pub fn failure_rate(&self) -> f64 {
        let total = self.per_image.len() + self.failures.len();
        if total == 0 {
            0.0
        } else {
            self.failures.len() as f64 / total as f64
        }
    }

    pub fn all_labels(&self) -> impl Iterator<Item = (ImageId, &PseudoLabel<S>)> {
        self.per_image
            .iter()
            .flat_map(|(id, labels)| labels.iter().map(move |l| (*id, l)))
    }
}

/// Mines a whole image set in parallel. Results keep the input image
/// order and are independent of the rayon worker count; failing images
/// are recorded and skipped rather than aborting the run.
pub fn mine_dataset<S: Scalar>(
    inputs: &[ImageInput<'_, S>],
    backends: &MinerBackends<'_, S>,
    text: &TextEmbeddingSet<S>,
    labelspace: &LabelSpace,
    config: &MinerConfig,
) -> Result<MiningRun<S>> {
    config.validate()?;
    let results: Vec<(ImageId, Result<Vec<PseudoLabel<S>>>)> = inputs
        .par_iter()
        .map(|input| {
            (
                input.id(),
                mine_image(input, backends, text, labelspace, config),
            )
        })
        .collect();

    let mut run = MiningRun {
        per_image: Vec::with_capacity(results.len()),
        failures: Vec::new(),
    };
    for (id, result) in results {
        match result {
            Ok(labels) => run.per_image.push((id, labels)),
            Err(e) => run.failures.push((id, e.to_string())),
        }
    }
    Ok(run)
}

/// Finds the threshold whose post-NMS label count comes closest to
/// `target_count` by bisection, exploiting that the count is monotone
/// non-increasing in the threshold. Returns the threshold and its count.
pub fn tau_for_target_count<S: Scalar>(
    labels: &[PseudoLabel<S>],
    config: &MinerConfig,
    target_count: usize,
) -> (f64, usize) {
    let count_at = |tau: f64| {
        let cfg = MinerConfig {
            tau,
            ..config.clone()
        };
        finalize_pseudo_labels(labels.to_vec(), &cfg).len()
    };
    let (mut lo, mut hi) = (0.0f64, 1.0f64);
    for _ in 0..60 {
        let mid = (lo + hi) / 2.0;
        if count_at(mid) > target_count {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let candidates = [lo, hi];
    let best = candidates
        .into_iter()
        .min_by_key(|&t| {
            let c = count_at(t) as i64;
            (c - target_count as i64).abs()
        })
        .unwrap();
    (best, count_at(best))
}
