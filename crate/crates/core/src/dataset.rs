//! Dataset interchange and run bookkeeping.
//!
//! Datasets use COCO-style JSON (images / annotations / categories,
//! boxes in xywh) with split-membership flags per image. Everything read
//! from disk is validated: schema errors report the JSON path, dangling
//! ids name the offender, and boxes must sit inside their image extent.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{Detection, GroundTruth};
use crate::geometry::{BBox, ImageExtent};
use crate::labelspace::LabelSpace;
use crate::miner::{MinerConfig, MiningRun, PlSource, PseudoLabel};
use crate::synthetic::{SceneObject, SyntheticScene};
use crate::{CategoryId, ImageId};

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let body =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut de = serde_json::Deserializer::from_str(&body);
    serde_path_to_error::deserialize(&mut de).map_err(|e| Error::JsonSchema {
        path: path.display().to_string(),
        json_path: e.path().to_string(),
        message: e.inner().to_string(),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let body = serde_json::to_string_pretty(value).expect("value serializes");
    std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
}

fn default_true() -> bool {
    true
}

/// One image row: identity, extent, optional pixel payload reference,
/// and split membership (both sets by default, as in the
/// open-vocabulary regime).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: ImageId,
    pub width: u32,
    pub height: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub file_name: Option<String>,
    #[serde(default = "default_true")]
    pub in_labeled: bool,
    #[serde(default = "default_true")]
    pub in_unlabeled: bool,
}

impl ImageRecord {
    pub fn extent(&self) -> Result<ImageExtent> {
        ImageExtent::new(self.width, self.height)
    }
}

/// One box annotation; `bbox` is COCO xywh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationRecord {
    pub id: i64,
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
}

impl AnnotationRecord {
    pub fn corner_bbox(&self) -> Result<BBox<f64>> {
        let [x, y, w, h] = self.bbox;
        BBox::new(x, y, x + w, y + h)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryRecord {
    pub id: CategoryId,
    pub name: String,
}

/// A COCO-style detection dataset with split tags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionDataset {
    pub images: Vec<ImageRecord>,
    pub annotations: Vec<AnnotationRecord>,
    pub categories: Vec<CategoryRecord>,
}

impl DetectionDataset {
    /// Referential integrity, unique ids, and in-extent boxes.
    pub fn validate(&self) -> Result<()> {
        let mut image_ids = HashSet::new();
        for image in &self.images {
            image.extent()?;
            if !image_ids.insert(image.id) {
                return Err(Error::DatasetIntegrity {
                    reason: format!("duplicate image id {}", image.id),
                });
            }
        }
        let mut category_ids = HashSet::new();
        for category in &self.categories {
            if !category_ids.insert(category.id) {
                return Err(Error::DatasetIntegrity {
                    reason: format!("duplicate category id {}", category.id),
                });
            }
        }
        let extents: HashMap<ImageId, (f64, f64)> = self
            .images
            .iter()
            .map(|im| (im.id, (im.width as f64, im.height as f64)))
            .collect();
        for annotation in &self.annotations {
            let Some(&(width, height)) = extents.get(&annotation.image_id) else {
                return Err(Error::DatasetIntegrity {
                    reason: format!(
                        "annotation {} references missing image id {}",
                        annotation.id, annotation.image_id
                    ),
                });
            };
            if !category_ids.contains(&annotation.category_id) {
                return Err(Error::DatasetIntegrity {
                    reason: format!(
                        "annotation {} references missing category id {}",
                        annotation.id, annotation.category_id
                    ),
                });
            }
            let [x, y, w, h] = annotation.bbox;
            let finite = annotation.bbox.iter().all(|v| v.is_finite());
            if !finite || w <= 0.0 || h <= 0.0 {
                return Err(Error::DatasetIntegrity {
                    reason: format!("annotation {} has a degenerate box", annotation.id),
                });
            }
            if x < 0.0 || y < 0.0 || x + w > width || y + h > height {
                return Err(Error::DatasetIntegrity {
                    reason: format!(
                        "annotation {} box leaves the image extent ({width}x{height})",
                        annotation.id
                    ),
                });
            }
        }
        Ok(())
    }

    pub fn image(&self, id: ImageId) -> Option<&ImageRecord> {
        self.images.iter().find(|im| im.id == id)
    }

    pub fn category_name(&self, id: CategoryId) -> Option<&str> {
        self.categories
            .iter()
            .find(|c| c.id == id)
            .map(|c| c.name.as_str())
    }

    /// All annotations as evaluation ground truth (corner boxes).
    pub fn ground_truth(&self) -> Result<Vec<GroundTruth<f64>>> {
        self.annotations
            .iter()
            .map(|a| {
                Ok(GroundTruth {
                    image_id: a.image_id,
                    category_id: a.category_id,
                    bbox: a.corner_bbox()?,
                })
            })
            .collect()
    }
}

/// Loads and validates a COCO-style dataset file.
pub fn load_coco_json(path: &Path) -> Result<DetectionDataset> {
    let dataset: DetectionDataset = read_json(path)?;
    dataset.validate()?;
    Ok(dataset)
}

/// Writes a dataset back to COCO-style JSON.
pub fn save_coco_json(path: &Path, dataset: &DetectionDataset) -> Result<()> {
    write_json(path, dataset)
}

pub fn load_labelspace(path: &Path) -> Result<LabelSpace> {
    read_json(path)
}

pub fn save_labelspace(path: &Path, labelspace: &LabelSpace) -> Result<()> {
    write_json(path, labelspace)
}

/// One serialized pseudo-label; `bbox` is xywh like annotations, and
/// `score` is the gated confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlRecord {
    pub image_id: ImageId,
    pub category_id: CategoryId,
    pub bbox: [f64; 4],
    pub score: f64,
    pub source: PlSource,
}

impl PlRecord {
    pub fn corner_bbox(&self) -> Result<BBox<f64>> {
        let [x, y, w, h] = self.bbox;
        BBox::new(x, y, x + w, y + h)
    }
}

/// Flattens a mining run into serializable records, preserving the
/// deterministic per-image order.
pub fn pl_records_from_run(run: &MiningRun<f64>) -> Vec<PlRecord> {
    run.all_labels()
        .map(|(image_id, label)| PlRecord {
            image_id,
            category_id: label.category_id,
            bbox: [
                label.bbox.x1,
                label.bbox.y1,
                label.bbox.width(),
                label.bbox.height(),
            ],
            score: label.confidence,
            source: label.source,
        })
        .collect()
}

pub fn save_pl_records(path: &Path, records: &[PlRecord]) -> Result<()> {
    write_json(path, &records)
}

pub fn load_pl_records(path: &Path) -> Result<Vec<PlRecord>> {
    read_json(path)
}

/// PL records as scored detections for evaluation.
pub fn pl_records_to_detections(records: &[PlRecord]) -> Result<Vec<Detection<f64>>> {
    records
        .iter()
        .map(|r| {
            Ok(Detection {
                image_id: r.image_id,
                category_id: r.category_id,
                bbox: r.corner_bbox()?,
                score: r.score,
            })
        })
        .collect()
}

/// PL records back to in-memory labels, e.g. as merge candidates.
pub fn pl_records_to_labels(records: &[PlRecord]) -> Result<Vec<(ImageId, PseudoLabel<f64>)>> {
    records
        .iter()
        .map(|r| {
            Ok((
                r.image_id,
                PseudoLabel {
                    bbox: r.corner_bbox()?,
                    category_id: r.category_id,
                    fused_score: r.score,
                    confidence: r.score,
                    source: r.source,
                },
            ))
        })
        .collect()
}

/// Everything needed to reproduce a run bit-exactly: command, config,
/// seed, label space, backend identities, and input-file digests. No
/// clocks, hostnames, or worker counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: MinerConfig,
    pub seed: u64,
    pub labelspace: LabelSpace,
    pub backends: Vec<String>,
    /// Input path (as given) to SHA-256 hex digest.
    pub input_hashes: BTreeMap<String, String>,
}

pub fn save_run_manifest(path: &Path, manifest: &RunManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn load_run_manifest(path: &Path) -> Result<RunManifest> {
    read_json(path)
}

/// Category partition for open-vocabulary runs, or a labeled-image list
/// for semi-supervised runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SplitManifest {
    Ovd {
        base: Vec<String>,
        novel: Vec<String>,
    },
    Ssod {
        seed: u64,
        labeled_images: Vec<ImageId>,
        unlabeled_images: Vec<ImageId>,
    },
}

impl SplitManifest {
    /// Checks the partition against a dataset: the two sides must be
    /// disjoint and jointly cover the dataset (category names for OVD,
    /// image ids for SSOD).
    pub fn validate_against(&self, dataset: &DetectionDataset) -> Result<()> {
        match self {
            SplitManifest::Ovd { base, novel } => {
                let base_set: BTreeSet<&str> = base.iter().map(|s| s.as_str()).collect();
                let novel_set: BTreeSet<&str> = novel.iter().map(|s| s.as_str()).collect();
                if let Some(both) = base_set.intersection(&novel_set).next() {
                    return Err(Error::DatasetIntegrity {
                        reason: format!("category {both:?} is both base and novel"),
                    });
                }
                for category in &dataset.categories {
                    let name = category.name.as_str();
                    if !base_set.contains(name) && !novel_set.contains(name) {
                        return Err(Error::DatasetIntegrity {
                            reason: format!("category {name:?} missing from the base/novel split"),
                        });
                    }
                }
                Ok(())
            }
            SplitManifest::Ssod {
                labeled_images,
                unlabeled_images,
                ..
            } => {
                let labeled: BTreeSet<ImageId> = labeled_images.iter().copied().collect();
                let unlabeled: BTreeSet<ImageId> = unlabeled_images.iter().copied().collect();
                if let Some(both) = labeled.intersection(&unlabeled).next() {
                    return Err(Error::DatasetIntegrity {
                        reason: format!("image {both} is both labeled and unlabeled"),
                    });
                }
                for image in &dataset.images {
                    if !labeled.contains(&image.id) && !unlabeled.contains(&image.id) {
                        return Err(Error::DatasetIntegrity {
                            reason: format!("image {} missing from the split", image.id),
                        });
                    }
                }
                Ok(())
            }
        }
    }

    /// Category ids on the base side, resolved against a dataset.
    pub fn base_ids(&self, dataset: &DetectionDataset) -> Result<Vec<CategoryId>> {
        self.side_ids(dataset, true)
    }

    /// Category ids on the novel side, resolved against a dataset.
    pub fn novel_ids(&self, dataset: &DetectionDataset) -> Result<Vec<CategoryId>> {
        self.side_ids(dataset, false)
    }

    fn side_ids(&self, dataset: &DetectionDataset, base_side: bool) -> Result<Vec<CategoryId>> {
        let SplitManifest::Ovd { base, novel } = self else {
            return Err(Error::InvalidConfig {
                reason: "category partition requested from an image-split manifest".into(),
            });
        };
        let names: HashSet<&str> = if base_side { base } else { novel }
            .iter()
            .map(|s| s.as_str())
            .collect();
        Ok(dataset
            .categories
            .iter()
            .filter(|c| names.contains(c.name.as_str()))
            .map(|c| c.id)
            .collect())
    }
}

pub fn save_split_manifest(path: &Path, manifest: &SplitManifest) -> Result<()> {
    write_json(path, manifest)
}

pub fn load_split_manifest(path: &Path) -> Result<SplitManifest> {
    read_json(path)
}

/// Seeded image partition for semi-supervised training. The labeled
/// side gets `round(fraction * n)` images; a fraction that rounds to
/// zero images is an error.
pub fn make_ssod_split(
    dataset: &DetectionDataset,
    labeled_fraction: f64,
    seed: u64,
) -> Result<SplitManifest> {
    if !(labeled_fraction > 0.0 && labeled_fraction <= 1.0) {
        return Err(Error::InvalidConfig {
            reason: format!("labeled_fraction must lie in (0, 1], got {labeled_fraction}"),
        });
    }
    let mut ids: Vec<ImageId> = dataset.images.iter().map(|im| im.id).collect();
    ids.sort_unstable();
    let n_labeled = (labeled_fraction * ids.len() as f64).round() as usize;
    if n_labeled == 0 {
        return Err(Error::InvalidConfig {
            reason: format!(
                "labeled_fraction {labeled_fraction} selects zero of {} images",
                ids.len()
            ),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ids.shuffle(&mut rng);
    let mut labeled: Vec<ImageId> = ids[..n_labeled].to_vec();
    let mut unlabeled: Vec<ImageId> = ids[n_labeled..].to_vec();
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SplitManifest::Ssod {
        seed,
        labeled_images: labeled,
        unlabeled_images: unlabeled,
    })
}

/// Fixed labeled set with growing unlabeled sets sized
/// `multiplier * |labeled|`, drawn as nested prefixes of one seeded
/// shuffle of the pool so larger budgets strictly extend smaller ones.
pub fn make_scaling_manifests(
    labeled: &[ImageId],
    unlabeled_pool: &[ImageId],
    multipliers: &[usize],
    seed: u64,
) -> Result<Vec<SplitManifest>> {
    if labeled.is_empty() {
        return Err(Error::InvalidConfig {
            reason: "scaling harness needs a non-empty labeled set".into(),
        });
    }
    let mut pool: Vec<ImageId> = unlabeled_pool.to_vec();
    pool.sort_unstable();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    pool.shuffle(&mut rng);

    let mut manifests = Vec::with_capacity(multipliers.len());
    for &multiplier in multipliers {
        let need = multiplier * labeled.len();
        if need > pool.len() {
            return Err(Error::InvalidConfig {
                reason: format!(
                    "multiplier {multiplier} needs {need} unlabeled images, pool has {}",
                    pool.len()
                ),
            });
        }
        let mut labeled = labeled.to_vec();
        labeled.sort_unstable();
        let mut unlabeled = pool[..need].to_vec();
        unlabeled.sort_unstable();
        manifests.push(SplitManifest::Ssod {
            seed,
            labeled_images: labeled,
            unlabeled_images: unlabeled,
        });
    }
    Ok(manifests)
}

/// Applies split membership tags to a dataset in place. An OVD manifest
/// places every image in both sets; an SSOD manifest splits them.
pub fn apply_split(dataset: &mut DetectionDataset, manifest: &SplitManifest) -> Result<()> {
    manifest.validate_against(dataset)?;
    match manifest {
        SplitManifest::Ovd { .. } => {
            for image in &mut dataset.images {
                image.in_labeled = true;
                image.in_unlabeled = true;
            }
        }
        SplitManifest::Ssod { labeled_images, .. } => {
            let labeled: HashSet<ImageId> = labeled_images.iter().copied().collect();
            for image in &mut dataset.images {
                image.in_labeled = labeled.contains(&image.id);
                image.in_unlabeled = !image.in_labeled;
            }
        }
    }
    Ok(())
}

/// The 48 annotated base categories of the zero-shot COCO split.
pub const COCO_ZS_BASE: [&str; 48] = [
    "person",
    "bicycle",
    "car",
    "motorcycle",
    "truck",
    "boat",
    "bench",
    "bird",
    "horse",
    "sheep",
    "bear",
    "zebra",
    "giraffe",
    "backpack",
    "handbag",
    "suitcase",
    "frisbee",
    "skis",
    "kite",
    "surfboard",
    "bottle",
    "fork",
    "spoon",
    "bowl",
    "banana",
    "apple",
    "sandwich",
    "orange",
    "broccoli",
    "carrot",
    "pizza",
    "donut",
    "chair",
    "bed",
    "toilet",
    "tv",
    "laptop",
    "mouse",
    "remote",
    "microwave",
    "oven",
    "toaster",
    "refrigerator",
    "book",
    "clock",
    "vase",
    "toothbrush",
    "hair drier",
];

/// The 17 held-out novel categories of the zero-shot COCO split.
pub const COCO_ZS_NOVEL: [&str; 17] = [
    "airplane",
    "bus",
    "cat",
    "dog",
    "cow",
    "elephant",
    "umbrella",
    "tie",
    "snowboard",
    "skateboard",
    "cup",
    "knife",
    "cake",
    "couch",
    "keyboard",
    "sink",
    "scissors",
];

/// The standard zero-shot COCO category partition (48 base, 17 novel).
pub fn coco_zs_manifest() -> SplitManifest {
    SplitManifest::Ovd {
        base: COCO_ZS_BASE.iter().map(|s| s.to_string()).collect(),
        novel: COCO_ZS_NOVEL.iter().map(|s| s.to_string()).collect(),
    }
}

/// Serializes synthetic scenes as a dataset; image ids index the scene
/// list and annotation order follows each scene's object order, so the
/// scene can be reconstructed from the file.
pub fn dataset_from_scenes(
    scenes: &[(ImageId, SyntheticScene<f64>)],
    categories: &[CategoryRecord],
) -> DetectionDataset {
    let mut images = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    let mut next_annotation = 1i64;
    for (id, scene) in scenes {
        images.push(ImageRecord {
            id: *id,
            width: scene.extent.width,
            height: scene.extent.height,
            file_name: None,
            in_labeled: true,
            in_unlabeled: true,
        });
        for object in &scene.objects {
            annotations.push(AnnotationRecord {
                id: next_annotation,
                image_id: *id,
                category_id: object.category_id,
                bbox: [
                    object.bbox.x1,
                    object.bbox.y1,
                    object.bbox.width(),
                    object.bbox.height(),
                ],
            });
            next_annotation += 1;
        }
    }
    DetectionDataset {
        images,
        annotations,
        categories: categories.to_vec(),
    }
}

/// Rebuilds the synthetic scene behind one dataset image: objects in
/// annotation file order, the given seed driving all scene-derived
/// randomness. Deterministic for a fixed file and seed.
pub fn scene_from_image(
    dataset: &DetectionDataset,
    image_id: ImageId,
    seed: u64,
) -> Result<SyntheticScene<f64>> {
    let image = dataset.image(image_id).ok_or_else(|| Error::DatasetIntegrity {
        reason: format!("image id {image_id} not in dataset"),
    })?;
    let extent = image.extent()?;
    let objects = dataset
        .annotations
        .iter()
        .filter(|a| a.image_id == image_id)
        .map(|a| {
            Ok(SceneObject {
                category_id: a.category_id,
                bbox: a.corner_bbox()?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticScene {
        extent,
        objects,
        seed,
    })
}
