//! `train-toy` command: fit the toy detector on ground truth plus pseudo
//! labels and measure what the labels bought.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;
use serde::{Deserialize, Serialize};

use plmine_core::dataset::{
    apply_split, load_coco_json, load_labelspace, load_pl_records, load_split_manifest,
    DetectionDataset, PlRecord, SplitManifest,
};
use plmine_core::eval::{mean_ap_at, Detection, EvalReport};
use plmine_core::losses::Target;
use plmine_core::train::{
    normalize_box, toy_detections, train_toy_student, ToyDetector, TrainConfig, TrainImage,
};
use plmine_core::{CategoryId, ImageId, LabelSpace};

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// COCO-style dataset JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Label-space JSON; its target order defines the class indices.
    #[arg(long)]
    pub labelspace: PathBuf,
    /// Pseudo-label JSON; omit to train on ground truth alone.
    #[arg(long)]
    pub pls: Option<PathBuf>,
    /// Split manifest: category split holds novel ground truth out of
    /// training, image split restricts which images carry each term.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Pseudo-label term weight.
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Confidence gate inside the pseudo-label loss.
    #[arg(long, default_value_t = 0.8)]
    pub tau: f64,
    /// IoU floor for prediction-target matching.
    #[arg(long, default_value_t = 0.3)]
    pub match_iou: f64,
    /// Optimizer steps.
    #[arg(long, default_value_t = 200)]
    pub steps: usize,
    /// Learning rate.
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    /// Candidate grid side; the detector owns grid^2 boxes.
    #[arg(long, default_value_t = 4)]
    pub grid: usize,
    /// Accumulate per-image gradients in parallel.
    #[arg(long)]
    pub parallel: bool,
    /// Detection confidence floor at eval time.
    #[arg(long, default_value_t = 0.25)]
    pub min_score: f64,
    /// Detection NMS IoU at eval time.
    #[arg(long, default_value_t = 0.5)]
    pub detect_nms: f64,
    /// Comma-separated extra alpha values to sweep, e.g. "0,0.5,1".
    #[arg(long)]
    pub alpha_sweep: Option<String>,
    /// Run seed recorded in the experiment output.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Experiment record JSON output path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// One swept training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub alpha: f64,
    pub ap50: f64,
    pub map_50_95: f64,
    pub novel_ap50: Option<f64>,
    pub final_loss: f64,
}

/// Everything one `train-toy` invocation produced.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentRecord {
    pub config: TrainConfig,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub report: EvalReport,
    pub base_ap50: Option<f64>,
    pub novel_ap50: Option<f64>,
    pub sweep: Vec<SweepPoint>,
}

/// Class splits resolved against the dataset, if a manifest was given.
struct ResolvedSplit {
    base_ids: Option<Vec<CategoryId>>,
    novel_ids: Option<Vec<CategoryId>>,
}

fn resolve_split(
    dataset: &mut DetectionDataset,
    manifest: Option<&SplitManifest>,
) -> Result<ResolvedSplit> {
    match manifest {
        Some(m @ SplitManifest::Ovd { .. }) => {
            apply_split(dataset, m)?;
            Ok(ResolvedSplit {
                base_ids: Some(m.base_ids(dataset)?),
                novel_ids: Some(m.novel_ids(dataset)?),
            })
        }
        Some(m @ SplitManifest::Ssod { .. }) => {
            apply_split(dataset, m)?;
            Ok(ResolvedSplit {
                base_ids: None,
                novel_ids: None,
            })
        }
        None => Ok(ResolvedSplit {
            base_ids: None,
            novel_ids: None,
        }),
    }
}

/// Builds per-image training inputs in dataset image order.
///
/// Ground truth maps through the label-space target order; annotations
/// for non-target categories (and, under a category split, for novel
/// categories) never become supervised targets. Pseudo labels keep their
/// stored confidence.
pub fn build_train_images(
    dataset: &DetectionDataset,
    labelspace: &LabelSpace,
    pls: &[PlRecord],
    training_gt_ids: Option<&[CategoryId]>,
) -> Result<Vec<TrainImage<f64>>> {
    let allowed: Option<HashSet<CategoryId>> =
        training_gt_ids.map(|ids| ids.iter().copied().collect());
    let mut pseudo_by_image: HashMap<ImageId, Vec<Target<f64>>> = HashMap::new();
    for record in pls {
        let Some(class_index) = labelspace.target_index(record.category_id) else {
            bail!(
                "pseudo label for category {} which is not a label-space target",
                record.category_id
            );
        };
        let image = dataset
            .image(record.image_id)
            .with_context(|| format!("pseudo label references image {}", record.image_id))?;
        let extent = image.extent()?;
        pseudo_by_image
            .entry(record.image_id)
            .or_default()
            .push(Target {
                class_index,
                bbox: normalize_box(&record.corner_bbox()?, extent),
                confidence: record.score,
            });
    }

    dataset
        .images
        .iter()
        .map(|image| {
            let extent = image.extent()?;
            let gt = dataset
                .annotations
                .iter()
                .filter(|a| a.image_id == image.id)
                .filter(|a| {
                    allowed
                        .as_ref()
                        .is_none_or(|ids| ids.contains(&a.category_id))
                })
                .filter_map(|a| {
                    labelspace.target_index(a.category_id).map(|class_index| {
                        Ok(Target::ground_truth(
                            class_index,
                            normalize_box(&a.corner_bbox()?, extent),
                        ))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(TrainImage {
                gt,
                pseudo: pseudo_by_image.remove(&image.id).unwrap_or_default(),
                in_labeled: image.in_labeled,
                in_unlabeled: image.in_unlabeled,
            })
        })
        .collect()
}

/// Detector shape and decode thresholds, fixed across an alpha sweep.
#[derive(Debug, Clone, Copy)]
pub struct DetectSettings {
    pub grid: usize,
    pub min_score: f64,
    pub detect_nms: f64,
}

/// Trains one student and evaluates it over the whole dataset.
pub fn train_and_eval(
    dataset: &DetectionDataset,
    labelspace: &LabelSpace,
    images: &[TrainImage<f64>],
    config: &TrainConfig,
    settings: DetectSettings,
    novel_ids: Option<&[CategoryId]>,
) -> Result<(EvalReport, Vec<f64>, Vec<Detection<f64>>)> {
    let detector = ToyDetector::<f64>::new(labelspace.n_targets(), settings.grid);
    let result = train_toy_student(&detector, images, config)?;
    let target_ids = labelspace.target_ids();

    let mut detections = Vec::new();
    for image in &dataset.images {
        detections.extend(toy_detections(
            &result.detector,
            image.id,
            image.extent()?,
            &target_ids,
            settings.min_score,
            settings.detect_nms,
        ));
    }
    let gt = dataset.ground_truth()?;
    let report = EvalReport::build(&detections, &gt, novel_ids, dataset.images.len());
    Ok((report, result.loss_curve, detections))
}

fn parse_sweep(raw: &str) -> Result<Vec<f64>> {
    raw.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .with_context(|| format!("bad alpha value {s:?} in sweep"))
        })
        .collect()
}

pub fn run_train(args: &TrainArgs) -> Result<ExperimentRecord> {
    let mut dataset = load_coco_json(&args.dataset)?;
    let labelspace = load_labelspace(&args.labelspace)?;
    let manifest = args
        .split
        .as_ref()
        .map(|p| load_split_manifest(p))
        .transpose()?;
    let split = resolve_split(&mut dataset, manifest.as_ref())?;
    let pls = args
        .pls
        .as_ref()
        .map(|p| load_pl_records(p))
        .transpose()?
        .unwrap_or_default();

    let images = build_train_images(&dataset, &labelspace, &pls, split.base_ids.as_deref())?;
    let config = TrainConfig {
        alpha: args.alpha,
        tau: args.tau,
        match_iou: args.match_iou,
        steps: args.steps,
        learning_rate: args.lr,
        parallel: args.parallel,
    };

    let settings = DetectSettings {
        grid: args.grid,
        min_score: args.min_score,
        detect_nms: args.detect_nms,
    };
    let (report, loss_curve, detections) = train_and_eval(
        &dataset,
        &labelspace,
        &images,
        &config,
        settings,
        split.novel_ids.as_deref(),
    )?;
    let gt = dataset.ground_truth()?;
    let base_ap50 = split
        .base_ids
        .as_deref()
        .and_then(|ids| mean_ap_at(&detections, &gt, 0.5, ids));
    let novel_ap50 = split
        .novel_ids
        .as_deref()
        .and_then(|ids| mean_ap_at(&detections, &gt, 0.5, ids));

    let mut sweep = Vec::new();
    if let Some(raw) = &args.alpha_sweep {
        let mut seen = BTreeSet::new();
        let alphas: Vec<f64> = parse_sweep(raw)?
            .into_iter()
            .filter(|a| seen.insert(a.to_bits()))
            .collect();
        for alpha in alphas {
            let sweep_config = TrainConfig {
                alpha,
                ..config.clone()
            };
            let (sweep_report, sweep_curve, sweep_dets) = train_and_eval(
                &dataset,
                &labelspace,
                &images,
                &sweep_config,
                settings,
                split.novel_ids.as_deref(),
            )?;
            sweep.push(SweepPoint {
                alpha,
                ap50: sweep_report.ap50,
                map_50_95: sweep_report.map_50_95,
                novel_ap50: split
                    .novel_ids
                    .as_deref()
                    .and_then(|ids| mean_ap_at(&sweep_dets, &gt, 0.5, ids)),
                final_loss: sweep_curve.last().copied().unwrap_or(f64::NAN),
            });
        }
    }

    let record = ExperimentRecord {
        config,
        seed: args.seed,
        loss_curve,
        report,
        base_ap50,
        novel_ap50,
        sweep,
    };
    if let Some(out) = &args.out {
        let body =
            serde_json::to_string_pretty(&record).context("serializing experiment record")?;
        std::fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", record.report.text_table());
    if let Some(v) = record.novel_ap50 {
        println!("novel AP50      {:.2}", v * 100.0);
    }
    if let Some(v) = record.base_ap50 {
        println!("base AP50       {:.2}", v * 100.0);
    }
    for point in &record.sweep {
        println!(
            "alpha {:>5.2}: AP50 {:.2}, mAP {:.2}{}",
            point.alpha,
            point.ap50 * 100.0,
            point.map_50_95 * 100.0,
            match point.novel_ap50 {
                Some(v) => format!(", novel AP50 {:.2}", v * 100.0),
                None => String::new(),
            }
        );
    }
    Ok(record)
}
