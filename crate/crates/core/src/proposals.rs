//! Class-agnostic proposal generation and iterative box refinement.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, nms_indices, BBox};
use crate::input::ImageInput;
use crate::scalar::Scalar;
use crate::synthetic::{
    contraction_refiner, synthetic_rpn, ContractionConfig, SyntheticRpnConfig,
};

/// A class-agnostic region candidate with its objectness score.
///
/// The score is assigned once at generation time and travels unchanged
/// through refinement unless a refiner explicitly sharpens it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proposal<S: Scalar = f64> {
    pub bbox: BBox<S>,
    pub rpn_score: S,
}

/// Produces raw scored candidates for one image.
pub trait ProposalSource<S: Scalar>: Sync {
    /// Candidates for the image; callers apply NMS and the `top_k` cap, so
    /// sources may over-produce.
    fn propose(&self, input: &ImageInput<S>, top_k: usize) -> Result<Vec<Proposal<S>>>;

    /// Stable name recorded in run manifests.
    fn identifier(&self) -> String;
}

/// One box-adjustment step applied to a batch of proposals.
pub trait BoxRefiner<S: Scalar>: Sync {
    /// Refines every proposal once, preserving order and length.
    fn refine(&self, input: &ImageInput<S>, proposals: &[Proposal<S>]) -> Result<Vec<Proposal<S>>>;

    fn identifier(&self) -> String;
}

/// Scored candidates for an image: source output sorted by descending
/// score (ties keep source order), NMS'd at `rpn_nms_threshold`, and
/// capped at `top_k`.
pub fn generate_proposals<S: Scalar>(
    source: &dyn ProposalSource<S>,
    input: &ImageInput<S>,
    top_k: usize,
    rpn_nms_threshold: S,
) -> Result<Vec<Proposal<S>>> {
    let mut raw = source.propose(input, top_k)?;
    raw.sort_by(|a, b| {
        b.rpn_score
            .partial_cmp(&a.rpn_score)
            .unwrap_or(Ordering::Equal)
    });
    let plain: Vec<(BBox<S>, S)> = raw.iter().map(|p| (p.bbox, p.rpn_score)).collect();
    let mut kept: Vec<Proposal<S>> = nms_indices(&plain, rpn_nms_threshold)
        .into_iter()
        .map(|i| raw[i])
        .collect();
    kept.truncate(top_k);
    Ok(kept)
}

/// Applies `refiner` to the proposals `n_steps` times; zero steps is the
/// identity.
pub fn refine_iteratively<S: Scalar>(
    refiner: &dyn BoxRefiner<S>,
    input: &ImageInput<S>,
    proposals: Vec<Proposal<S>>,
    n_steps: usize,
) -> Result<Vec<Proposal<S>>> {
    let mut current = proposals;
    for _ in 0..n_steps {
        let next = refiner.refine(input, &current)?;
        debug_assert_eq!(next.len(), current.len());
        current = next;
    }
    Ok(current)
}

/// Pearson correlation between proposal scores and each proposal's best
/// IoU against the ground-truth boxes.
///
/// Errors when fewer than two proposals are given or either series is
/// constant (for instance when `gt_boxes` is empty and every IoU is zero).
pub fn rpn_iou_correlation<S: Scalar>(
    proposals: &[Proposal<S>],
    gt_boxes: &[BBox<S>],
) -> Result<S> {
    if proposals.len() < 2 {
        return Err(Error::UndefinedCorrelation {
            reason: format!("need at least 2 proposals, got {}", proposals.len()),
        });
    }
    let scores: Vec<S> = proposals.iter().map(|p| p.rpn_score).collect();
    let ious: Vec<S> = proposals
        .iter()
        .map(|p| {
            gt_boxes
                .iter()
                .map(|g| iou(g, &p.bbox))
                .fold(S::zero(), S::max)
        })
        .collect();
    pearson(&scores, &ious)
}

fn pearson<S: Scalar>(x: &[S], y: &[S]) -> Result<S> {
    let n = S::from_usize_lossy(x.len());
    let mean = |v: &[S]| v.iter().fold(S::zero(), |a, &b| a + b) / n;
    let mx = mean(x);
    let my = mean(y);
    let mut cov = S::zero();
    let mut var_x = S::zero();
    let mut var_y = S::zero();
    for (&xi, &yi) in x.iter().zip(y) {
        let dx = xi - mx;
        let dy = yi - my;
        cov += dx * dy;
        var_x += dx * dx;
        var_y += dy * dy;
    }
    if var_x == S::zero() {
        return Err(Error::UndefinedCorrelation {
            reason: "scores are constant".into(),
        });
    }
    if var_y == S::zero() {
        return Err(Error::UndefinedCorrelation {
            reason: "IoU values are constant".into(),
        });
    }
    Ok(cov / (var_x * var_y).sqrt())
}

/// Proposal source backed by the scene-aware jittering generator.
#[derive(Debug, Clone, Default)]
pub struct SyntheticRpn {
    pub config: SyntheticRpnConfig,
}

impl SyntheticRpn {
    pub fn new(config: SyntheticRpnConfig) -> Self {
        SyntheticRpn { config }
    }
}

impl<S: Scalar> ProposalSource<S> for SyntheticRpn {
    fn propose(&self, input: &ImageInput<S>, top_k: usize) -> Result<Vec<Proposal<S>>> {
        Ok(synthetic_rpn(input.scene()?, &self.config, top_k))
    }

    fn identifier(&self) -> String {
        format!(
            "synthetic-rpn(jitter={}, noise={}, per_object={}, bg_rate={})",
            self.config.jitter_scale,
            self.config.score_noise,
            self.config.proposals_per_object,
            self.config.background_proposal_rate
        )
    }
}

/// Refiner backed by the scene-aware contraction step.
#[derive(Debug, Clone, Default)]
pub struct ContractionRefiner {
    pub config: ContractionConfig,
}

impl ContractionRefiner {
    pub fn new(config: ContractionConfig) -> Self {
        ContractionRefiner { config }
    }
}

impl<S: Scalar> BoxRefiner<S> for ContractionRefiner {
    fn refine(&self, input: &ImageInput<S>, proposals: &[Proposal<S>]) -> Result<Vec<Proposal<S>>> {
        contraction_refiner(proposals, input.scene()?, &self.config)
    }

    fn identifier(&self) -> String {
        format!(
            "contraction(rate={}, sharpening={})",
            self.config.rate, self.config.score_sharpening
        )
    }
}

/// Refiner that returns proposals unchanged; the stand-in when refinement
/// happened upstream (precomputed pipelines) or is disabled.
#[derive(Debug, Clone, Copy, Default)]
pub struct IdentityRefiner;

impl<S: Scalar> BoxRefiner<S> for IdentityRefiner {
    fn refine(&self, _input: &ImageInput<S>, proposals: &[Proposal<S>]) -> Result<Vec<Proposal<S>>> {
        Ok(proposals.to_vec())
    }

    fn identifier(&self) -> String {
        "identity".into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageExtent;
    use crate::labelspace::{Category, LabelSpace};
    use crate::synthetic::generate_scene;

    fn space() -> LabelSpace {
        LabelSpace::closed(vec![
            Category {
                id: 1,
                name: "a".into(),
            },
            Category {
                id: 2,
                name: "b".into(),
            },
        ])
        .unwrap()
    }

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox<f64> {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn generate_proposals_sorts_nms_and_caps() {
        let ls = space();
        let extent = ImageExtent::new(128, 128).unwrap();
        let scene = generate_scene::<f64>(&ls, extent, 4, 17).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let rpn = SyntheticRpn::default();
        let proposals = generate_proposals(&rpn, &input, 10, 0.3).unwrap();
        assert!(proposals.len() <= 10);
        for w in proposals.windows(2) {
            assert!(w[0].rpn_score >= w[1].rpn_score);
        }
        for i in 0..proposals.len() {
            for j in (i + 1)..proposals.len() {
                assert!(iou(&proposals[i].bbox, &proposals[j].bbox) <= 0.3);
            }
        }
    }

    #[test]
    fn scene_required_for_synthetic_source() {
        let rpn = SyntheticRpn::default();
        let input = ImageInput::<f64>::External {
            id: 9,
            extent: ImageExtent::new(64, 64).unwrap(),
        };
        let err = generate_proposals(&rpn, &input, 10, 0.3);
        assert!(matches!(err, Err(Error::SceneRequired { image_id: 9 })));
    }

    #[test]
    fn zero_steps_is_identity_and_steps_compose() {
        let ls = space();
        let extent = ImageExtent::new(128, 128).unwrap();
        let scene = generate_scene::<f64>(&ls, extent, 3, 23).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let rpn = SyntheticRpn::default();
        let proposals = generate_proposals(&rpn, &input, 50, 0.3).unwrap();
        let refiner = ContractionRefiner::default();

        let zero = refine_iteratively(&refiner, &input, proposals.clone(), 0).unwrap();
        assert_eq!(zero, proposals);

        let threes = refine_iteratively(&refiner, &input, proposals.clone(), 3).unwrap();
        let composed = {
            let one = refine_iteratively(&refiner, &input, proposals.clone(), 1).unwrap();
            refine_iteratively(&refiner, &input, one, 2).unwrap()
        };
        assert_eq!(threes, composed);
    }

    #[test]
    fn refinement_preserves_original_scores() {
        let ls = space();
        let extent = ImageExtent::new(128, 128).unwrap();
        let scene = generate_scene::<f64>(&ls, extent, 3, 29).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let rpn = SyntheticRpn::default();
        let proposals = generate_proposals(&rpn, &input, 50, 0.3).unwrap();
        let refined = refine_iteratively(
            &ContractionRefiner::default(),
            &input,
            proposals.clone(),
            10,
        )
        .unwrap();
        let before: Vec<f64> = proposals.iter().map(|p| p.rpn_score).collect();
        let after: Vec<f64> = refined.iter().map(|p| p.rpn_score).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn correlation_is_exactly_one_when_score_equals_iou() {
        let gt = vec![bb(10.0, 10.0, 50.0, 50.0), bb(70.0, 70.0, 110.0, 110.0)];
        let boxes = [
            bb(12.0, 14.0, 52.0, 50.0),
            bb(30.0, 30.0, 80.0, 80.0),
            bb(69.0, 72.0, 108.0, 111.0),
            bb(0.0, 0.0, 20.0, 20.0),
            bb(40.0, 10.0, 90.0, 60.0),
        ];
        let proposals: Vec<Proposal<f64>> = boxes
            .iter()
            .map(|b| {
                let best = gt.iter().map(|g| iou(g, b)).fold(0.0, f64::max);
                Proposal {
                    bbox: *b,
                    rpn_score: best,
                }
            })
            .collect();
        assert_eq!(rpn_iou_correlation(&proposals, &gt).unwrap(), 1.0);
    }

    #[test]
    fn correlation_rejects_degenerate_inputs() {
        let gt = vec![bb(10.0, 10.0, 50.0, 50.0)];
        let one = vec![Proposal {
            bbox: bb(10.0, 10.0, 50.0, 50.0),
            rpn_score: 0.5,
        }];
        assert!(matches!(
            rpn_iou_correlation(&one, &gt),
            Err(Error::UndefinedCorrelation { .. })
        ));

        let constant_scores = vec![
            Proposal {
                bbox: bb(10.0, 10.0, 50.0, 50.0),
                rpn_score: 0.5,
            },
            Proposal {
                bbox: bb(20.0, 20.0, 60.0, 60.0),
                rpn_score: 0.5,
            },
        ];
        assert!(matches!(
            rpn_iou_correlation(&constant_scores, &gt),
            Err(Error::UndefinedCorrelation { .. })
        ));

        let no_gt = vec![
            Proposal {
                bbox: bb(10.0, 10.0, 50.0, 50.0),
                rpn_score: 0.5,
            },
            Proposal {
                bbox: bb(20.0, 20.0, 60.0, 60.0),
                rpn_score: 0.7,
            },
        ];
        assert!(matches!(
            rpn_iou_correlation(&no_gt, &[]),
            Err(Error::UndefinedCorrelation { .. })
        ));
    }

    #[test]
    fn default_rpn_correlation_sits_in_target_band() {
        const BASE: u64 = 1000;
        let ls = space();
        let extent = ImageExtent::new(128, 128).unwrap();
        let config = SyntheticRpnConfig::default();
        let mut pooled: Vec<Proposal<f64>> = Vec::new();
        let mut pooled_gt: Vec<BBox<f64>> = Vec::new();
        // Pool scenes by offsetting each scene's geometry into its own tile
        // so cross-scene IoU stays zero and one correlation covers all.
        for i in 0..50u64 {
            let scene = generate_scene::<f64>(&ls, extent, 3 + (i as usize % 3), BASE + i).unwrap();
            let shift = 200.0 * i as f64;
            for p in synthetic_rpn::<f64>(&scene, &config, 1000) {
                pooled.push(Proposal {
                    bbox: BBox {
                        x1: p.bbox.x1 + shift,
                        y1: p.bbox.y1,
                        x2: p.bbox.x2 + shift,
                        y2: p.bbox.y2,
                    },
                    rpn_score: p.rpn_score,
                });
            }
            for g in scene.gt_boxes() {
                pooled_gt.push(BBox {
                    x1: g.x1 + shift,
                    y1: g.y1,
                    x2: g.x2 + shift,
                    y2: g.y2,
                });
            }
        }
        assert!(pooled.len() >= 1000);
        let r = rpn_iou_correlation(&pooled, &pooled_gt).unwrap();
        assert!((0.4..=0.6).contains(&r), "pearson r = {r}");
    }
}
