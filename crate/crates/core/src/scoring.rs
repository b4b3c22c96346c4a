//! Region classification against a label space.
//!
//! A region is embedded at two crops (the box itself and a center-shared
//! 1.5x enlargement), the embeddings are summed and L2-normalized, and
//! cosine logits against unit-norm text embeddings go through a
//! temperature softmax. Backends only supply embeddings; all of the
//! classification math lives here and is shared by the oracle, the
//! precomputed store, and any live endpoint.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{expand_box, BBox};
use crate::input::ImageInput;
use crate::labelspace::LabelSpace;
use crate::scalar::Scalar;
use crate::synthetic::{oracle_logits, seeded_region_noise};
use crate::{CategoryId, ImageId};

/// Enlargement factor for the context crop.
pub const CONTEXT_EXPANSION: f64 = 1.5;

/// Which crop of a region an embedding belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScaleTag {
    Base,
    Expanded,
}

impl ScaleTag {
    fn noise_salt(self) -> u64 {
        match self {
            ScaleTag::Base => 10,
            ScaleTag::Expanded => 11,
        }
    }
}

/// Categorical distribution over label-space entries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreDistribution<S: Scalar = f64> {
    probs: Vec<S>,
    argmax: usize,
    max_prob: S,
}

impl<S: Scalar> ScoreDistribution<S> {
    /// Softmax over raw logits; always well-formed.
    pub fn from_logits(logits: &[S]) -> Self {
        assert!(!logits.is_empty(), "distribution needs at least one entry");
        let top = logits.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
        let exps: Vec<S> = logits.iter().map(|&l| (l - top).exp()).collect();
        let total = exps.iter().fold(S::zero(), |a, &b| a + b);
        Self::from_probs_unchecked(exps.into_iter().map(|e| e / total).collect())
    }

    /// Wraps explicit probabilities, checking they sum to one.
    pub fn from_probs(probs: Vec<S>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::DegenerateEmbedding {
                reason: "empty probability vector".into(),
            });
        }
        let sum: f64 = probs.iter().map(|p| p.as_f64()).sum();
        let tol = (S::epsilon().as_f64() * probs.len() as f64 * 4.0).max(1e-9);
        if (sum - 1.0).abs() > tol {
            return Err(Error::DegenerateEmbedding {
                reason: format!("probabilities sum to {sum}, expected 1"),
            });
        }
        Ok(Self::from_probs_unchecked(probs))
    }

    fn from_probs_unchecked(probs: Vec<S>) -> Self {
        let mut argmax = 0;
        for (i, p) in probs.iter().enumerate() {
            if *p > probs[argmax] {
                argmax = i;
            }
        }
        let max_prob = probs[argmax];
        ScoreDistribution {
            probs,
            argmax,
            max_prob,
        }
    }

    pub fn probs(&self) -> &[S] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Index of the most likely entry; ties resolve to the lowest index.
    pub fn argmax(&self) -> usize {
        self.argmax
    }

    pub fn max_prob(&self) -> S {
        self.max_prob
    }
}

/// Unit-norm text embeddings, one row per label-space entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbeddingSet<S: Scalar = f64> {
    vectors: Vec<Vec<S>>,
}

impl<S: Scalar> TextEmbeddingSet<S> {
    /// Validates row count > 0, consistent dimensions, and unit norms
    /// within 1e-6.
    pub fn new(vectors: Vec<Vec<S>>) -> Result<Self> {
        if vectors.is_empty() {
            return Err(Error::DegenerateEmbedding {
                reason: "text embedding set is empty".into(),
            });
        }
        let dim = vectors[0].len();
        for (i, v) in vectors.iter().enumerate() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let norm = norm(v).as_f64();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::DegenerateEmbedding {
                    reason: format!("text embedding {i} has norm {norm}, expected 1"),
                });
            }
        }
        Ok(TextEmbeddingSet { vectors })
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.vectors[0].len()
    }

    pub fn rows(&self) -> &[Vec<S>] {
        &self.vectors
    }
}

fn norm<S: Scalar>(v: &[S]) -> S {
    v.iter().fold(S::zero(), |a, &b| a + b * b).sqrt()
}

/// L2-normalizes a vector, rejecting the zero vector.
pub fn normalize<S: Scalar>(v: &[S]) -> Result<Vec<S>> {
    let n = norm(v);
    if !(n > S::zero()) {
        return Err(Error::DegenerateEmbedding {
            reason: "zero-norm summed embedding".into(),
        });
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

fn dot<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).fold(S::zero(), |acc, (&x, &y)| acc + x * y)
}

/// Supplies text and region embeddings for classification.
///
/// `embed_regions` is the batched path; the default forwards to the
/// per-region call, and implementations that batch for real must stay
/// within `batch_tolerance` of the per-region probabilities.
pub trait ScoringBackend<S: Scalar>: Sync {
    fn embed_text(&self, prompt: &str) -> Result<Vec<S>>;

    fn embed_region(&self, input: &ImageInput<S>, bbox: &BBox<S>, scale: ScaleTag)
        -> Result<Vec<S>>;

    fn embed_regions(
        &self,
        input: &ImageInput<S>,
        requests: &[(BBox<S>, ScaleTag)],
    ) -> Result<Vec<Vec<S>>> {
        requests
            .iter()
            .map(|(bbox, scale)| self.embed_region(input, bbox, *scale))
            .collect()
    }

    /// Maximum per-entry probability deviation allowed between batched and
    /// per-region scoring.
    fn batch_tolerance(&self) -> f64 {
        0.02
    }

    /// Softmax temperature this backend's embeddings are calibrated for.
    fn temperature(&self) -> S {
        S::one()
    }

    /// Stable name recorded in run manifests.
    fn identifier(&self) -> String;
}

/// Builds the prompt-expanded text embedding matrix for a label space.
pub fn build_text_embeddings<S: Scalar>(
    labelspace: &LabelSpace,
    backend: &dyn ScoringBackend<S>,
) -> Result<TextEmbeddingSet<S>> {
    let vectors = labelspace
        .prompts()
        .iter()
        .map(|p| backend.embed_text(p))
        .collect::<Result<Vec<_>>>()?;
    TextEmbeddingSet::new(vectors)
}

fn distribution_from_embeddings<S: Scalar>(
    base: &[S],
    expanded: &[S],
    text: &TextEmbeddingSet<S>,
    temperature: S,
) -> Result<ScoreDistribution<S>> {
    if base.len() != text.dim() {
        return Err(Error::DimensionMismatch {
            expected: text.dim(),
            got: base.len(),
        });
    }
    if expanded.len() != text.dim() {
        return Err(Error::DimensionMismatch {
            expected: text.dim(),
            got: expanded.len(),
        });
    }
    if !(temperature > S::zero()) {
        return Err(Error::InvalidConfig {
            reason: "temperature must be positive".into(),
        });
    }
    let summed: Vec<S> = base
        .iter()
        .zip(expanded)
        .map(|(&a, &b)| a + b)
        .collect();
    let unit = normalize(&summed)?;
    let logits: Vec<S> = text
        .rows()
        .iter()
        .map(|t| dot(&unit, t) / temperature)
        .collect();
    Ok(ScoreDistribution::from_logits(&logits))
}

/// Classifies one region: embeds the box and its 1.5x context crop, sums,
/// normalizes, and softmaxes the cosine logits at `temperature`.
pub fn classify_region<S: Scalar>(
    input: &ImageInput<S>,
    bbox: &BBox<S>,
    text: &TextEmbeddingSet<S>,
    backend: &dyn ScoringBackend<S>,
    temperature: S,
) -> Result<ScoreDistribution<S>> {
    let context = expand_box(bbox, S::cast(CONTEXT_EXPANSION), input.extent());
    let base = backend.embed_region(input, bbox, ScaleTag::Base)?;
    let expanded = backend.embed_region(input, &context, ScaleTag::Expanded)?;
    distribution_from_embeddings(&base, &expanded, text, temperature)
}

/// Batched variant of [`classify_region`]: one backend round-trip for all
/// regions of an image.
pub fn classify_regions<S: Scalar>(
    input: &ImageInput<S>,
    boxes: &[BBox<S>],
    text: &TextEmbeddingSet<S>,
    backend: &dyn ScoringBackend<S>,
    temperature: S,
) -> Result<Vec<ScoreDistribution<S>>> {
    let factor = S::cast(CONTEXT_EXPANSION);
    let mut requests = Vec::with_capacity(boxes.len() * 2);
    for b in boxes {
        requests.push((*b, ScaleTag::Base));
        requests.push((expand_box(b, factor, input.extent()), ScaleTag::Expanded));
    }
    let embeddings = backend.embed_regions(input, &requests)?;
    if embeddings.len() != requests.len() {
        return Err(Error::backend(format!(
            "batched embedding count {} does not match request count {}",
            embeddings.len(),
            requests.len()
        )));
    }
    embeddings
        .chunks_exact(2)
        .map(|pair| distribution_from_embeddings(&pair[0], &pair[1], text, temperature))
        .collect()
}

/// Largest per-entry probability gap between batched and per-region
/// classification over the given boxes.
pub fn batch_agreement_gap<S: Scalar>(
    input: &ImageInput<S>,
    boxes: &[BBox<S>],
    text: &TextEmbeddingSet<S>,
    backend: &dyn ScoringBackend<S>,
    temperature: S,
) -> Result<f64> {
    let batched = classify_regions(input, boxes, text, backend, temperature)?;
    let mut gap = 0.0f64;
    for (bbox, b) in boxes.iter().zip(&batched) {
        let single = classify_region(input, bbox, text, backend, temperature)?;
        for (x, y) in single.probs().iter().zip(b.probs()) {
            gap = gap.max((x.as_f64() - y.as_f64()).abs());
        }
    }
    Ok(gap)
}

/// A region's winning target entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TargetScore<S: Scalar = f64> {
    pub entry_index: usize,
    pub category_id: CategoryId,
    pub prob: S,
}

/// Drops regions whose most likely entry is background.
///
/// Returns the argmax entry and its probability when the argmax over the
/// full label space lands on a target, `None` otherwise. Probabilities
/// are not renormalized; the returned value is the full-space maximum.
pub fn strip_non_targets<S: Scalar>(
    dist: &ScoreDistribution<S>,
    labelspace: &LabelSpace,
) -> Option<TargetScore<S>> {
    debug_assert_eq!(dist.len(), labelspace.len());
    let idx = dist.argmax();
    if !labelspace.is_target_entry(idx) {
        return None;
    }
    Some(TargetScore {
        entry_index: idx,
        category_id: labelspace
            .entry_id(idx)
            .expect("target entries always carry an id"),
        prob: dist.max_prob(),
    })
}

/// Argmax restricted to target entries, ignoring background entries
/// entirely; the alternative scoring rule behind the miner's
/// `score_space` switch.
pub fn best_target<S: Scalar>(
    dist: &ScoreDistribution<S>,
    labelspace: &LabelSpace,
) -> TargetScore<S> {
    debug_assert_eq!(dist.len(), labelspace.len());
    let mut best = 0;
    for i in 1..labelspace.n_targets() {
        if dist.probs()[i] > dist.probs()[best] {
            best = i;
        }
    }
    TargetScore {
        entry_index: best,
        category_id: labelspace
            .entry_id(best)
            .expect("target entries always carry an id"),
        prob: dist.probs()[best],
    }
}

/// Keeps oracle embeddings of empty regions away from the zero vector.
const ORACLE_EMBEDDING_BIAS: f64 = 0.1;

/// Scene-reading scoring backend: region embeddings are per-entry best
/// IoU logits (plus a small uniform bias and optional seeded noise), text
/// embeddings are one-hot rows, so cosine scoring reduces to scaled IoU
/// comparison.
#[derive(Debug, Clone)]
pub struct OracleEmbedder {
    labelspace: LabelSpace,
    noise: f64,
    temperature: f64,
}

impl OracleEmbedder {
    pub fn new(labelspace: LabelSpace, noise: f64) -> Self {
        OracleEmbedder {
            labelspace,
            noise,
            temperature: 1.0,
        }
    }

    /// Overrides the default softmax temperature of 1.
    pub fn with_temperature(mut self, temperature: f64) -> Self {
        self.temperature = temperature;
        self
    }

    pub fn labelspace(&self) -> &LabelSpace {
        &self.labelspace
    }
}

impl<S: Scalar> ScoringBackend<S> for OracleEmbedder {
    fn embed_text(&self, prompt: &str) -> Result<Vec<S>> {
        let n = self.labelspace.len();
        let idx = (0..n)
            .find(|&i| self.labelspace.prompt(i) == prompt)
            .ok_or_else(|| {
                Error::backend(format!("prompt {prompt:?} is not in the oracle label space"))
            })?;
        let mut v = vec![S::zero(); n];
        v[idx] = S::one();
        Ok(v)
    }

    fn embed_region(
        &self,
        input: &ImageInput<S>,
        bbox: &BBox<S>,
        scale: ScaleTag,
    ) -> Result<Vec<S>> {
        let scene = input.scene()?;
        let bias = S::cast(ORACLE_EMBEDDING_BIAS);
        let noise = seeded_region_noise::<S>(
            scene.seed,
            bbox,
            scale.noise_salt(),
            self.noise,
            self.labelspace.len(),
        );
        Ok(oracle_logits(scene, bbox, &self.labelspace)
            .into_iter()
            .zip(noise)
            .map(|(l, n)| l + bias + n)
            .collect())
    }

    fn temperature(&self) -> S {
        S::cast(self.temperature)
    }

    fn identifier(&self) -> String {
        format!(
            "oracle(noise={}, temperature={})",
            self.noise, self.temperature
        )
    }
}

fn quantize(v: f64, decimals: u32) -> i64 {
    (v * 10f64.powi(decimals as i32)).round() as i64
}

fn region_key(image_id: ImageId, bbox: &BBox<f64>, scale: ScaleTag, decimals: u32) -> String {
    let q = |v: f64| quantize(v, decimals);
    let tag = match scale {
        ScaleTag::Base => "base",
        ScaleTag::Expanded => "expanded",
    };
    format!(
        "{image_id}|{},{},{},{}|{tag}",
        q(bbox.x1),
        q(bbox.y1),
        q(bbox.x2),
        q(bbox.y2)
    )
}

/// Header of a precomputed-embedding file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingManifest {
    pub dimension: usize,
    /// Whether region embeddings were L2-normalized by the producer.
    pub normalized: bool,
    /// Decimal places used to quantize box coordinates in lookup keys.
    pub quantization_decimals: u32,
    /// Softmax temperature the embeddings are calibrated for.
    pub temperature: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RegionEmbeddingRecord {
    image_id: ImageId,
    bbox: [f64; 4],
    scale: ScaleTag,
    embedding: Vec<f64>,
}

/// On-disk format: manifest, prompt-keyed text embeddings, and region
/// embeddings keyed by image id, quantized box, and scale tag.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EmbeddingFile {
    pub manifest: EmbeddingManifest,
    text: HashMap<String, Vec<f64>>,
    regions: Vec<RegionEmbeddingRecord>,
}

impl EmbeddingFile {
    pub fn new(manifest: EmbeddingManifest) -> Self {
        EmbeddingFile {
            manifest,
            text: HashMap::new(),
            regions: Vec::new(),
        }
    }

    pub fn insert_text(&mut self, prompt: impl Into<String>, embedding: Vec<f64>) {
        self.text.insert(prompt.into(), embedding);
    }

    pub fn insert_region(
        &mut self,
        image_id: ImageId,
        bbox: &BBox<f64>,
        scale: ScaleTag,
        embedding: Vec<f64>,
    ) {
        self.regions.push(RegionEmbeddingRecord {
            image_id,
            bbox: bbox.corners(),
            scale,
            embedding,
        });
    }

    pub fn n_regions(&self) -> usize {
        self.regions.len()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let body = serde_json::to_string_pretty(self).expect("embedding file serializes");
        std::fs::write(path, body).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let body =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut de = serde_json::Deserializer::from_str(&body);
        serde_path_to_error::deserialize(&mut de).map_err(|e| Error::JsonSchema {
            path: path.display().to_string(),
            json_path: e.path().to_string(),
            message: e.inner().to_string(),
        })
    }
}

/// Scoring backend reading a [`EmbeddingFile`] produced offline.
#[derive(Debug, Clone)]
pub struct PrecomputedEmbeddings {
    manifest: EmbeddingManifest,
    text: HashMap<String, Vec<f64>>,
    regions: HashMap<String, Vec<f64>>,
}

impl PrecomputedEmbeddings {
    pub fn from_file(file: EmbeddingFile) -> Result<Self> {
        let dim = file.manifest.dimension;
        let mut regions = HashMap::new();
        for record in &file.regions {
            if record.embedding.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: record.embedding.len(),
                });
            }
            let bbox = BBox::new(
                record.bbox[0],
                record.bbox[1],
                record.bbox[2],
                record.bbox[3],
            )?;
            let key = region_key(
                record.image_id,
                &bbox,
                record.scale,
                file.manifest.quantization_decimals,
            );
            regions.insert(key, record.embedding.clone());
        }
        for (prompt, v) in &file.text {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: v.len(),
                });
            }
            let _ = prompt;
        }
        Ok(PrecomputedEmbeddings {
            manifest: file.manifest,
            text: file.text,
            regions,
        })
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_file(EmbeddingFile::load(path)?)
    }

    pub fn manifest(&self) -> &EmbeddingManifest {
        &self.manifest
    }
}

impl<S: Scalar> ScoringBackend<S> for PrecomputedEmbeddings {
    fn embed_text(&self, prompt: &str) -> Result<Vec<S>> {
        self.text
            .get(prompt)
            .map(|v| v.iter().map(|&x| S::cast(x)).collect())
            .ok_or_else(|| Error::backend(format!("no precomputed text embedding for {prompt:?}")))
    }

    fn embed_region(
        &self,
        input: &ImageInput<S>,
        bbox: &BBox<S>,
        scale: ScaleTag,
    ) -> Result<Vec<S>> {
        let key = region_key(
            input.id(),
            &bbox.to_f64(),
            scale,
            self.manifest.quantization_decimals,
        );
        self.regions
            .get(&key)
            .map(|v| v.iter().map(|&x| S::cast(x)).collect())
            .ok_or_else(|| Error::backend(format!("no precomputed embedding for key {key:?}")))
    }

    fn temperature(&self) -> S {
        S::cast(self.manifest.temperature)
    }

    fn identifier(&self) -> String {
        format!(
            "precomputed(dim={}, normalized={})",
            self.manifest.dimension, self.manifest.normalized
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ImageExtent;
    use crate::labelspace::{BackgroundEntry, BackgroundMode, Category, DEFAULT_PROMPT_TEMPLATE};
    use crate::synthetic::{generate_scene, SyntheticScene};

    fn space(n: usize) -> LabelSpace {
        LabelSpace::closed(
            (0..n)
                .map(|i| Category {
                    id: i as CategoryId + 1,
                    name: format!("thing-{i}"),
                })
                .collect(),
        )
        .unwrap()
    }

    fn scene_and_space() -> (SyntheticScene, LabelSpace) {
        let ls = space(3);
        let extent = ImageExtent::new(128, 128).unwrap();
        (generate_scene(&ls, extent, 3, 77).unwrap(), ls)
    }

    #[test]
    fn softmax_distribution_is_normalized() {
        let d = ScoreDistribution::from_logits(&[1.0, 2.0, 3.0]);
        let sum: f64 = d.probs().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        assert_eq!(d.argmax(), 2);
        assert!(d.max_prob() > 0.5);

        let uniform = ScoreDistribution::<f64>::from_logits(&[0.5, 0.5]);
        assert_eq!(uniform.argmax(), 0);
        assert!((uniform.max_prob() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn explicit_probs_validated() {
        assert!(ScoreDistribution::from_probs(vec![0.5, 0.4]).is_err());
        assert!(ScoreDistribution::from_probs(vec![0.5, 0.5]).is_ok());
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        assert!(matches!(
            normalize(&[0.0f64, 0.0]),
            Err(Error::DegenerateEmbedding { .. })
        ));
        let unit = normalize(&[3.0f64, 4.0]).unwrap();
        assert!((unit[0] - 0.6).abs() < 1e-12 && (unit[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn text_embeddings_must_be_unit_norm() {
        assert!(TextEmbeddingSet::new(vec![vec![0.5f64, 0.5]]).is_err());
        assert!(TextEmbeddingSet::new(vec![vec![1.0f64, 0.0], vec![0.0, 1.0]]).is_ok());
        assert!(matches!(
            TextEmbeddingSet::new(vec![vec![1.0f64, 0.0], vec![1.0]]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn oracle_classification_recovers_object_category() {
        let (scene, ls) = scene_and_space();
        let backend = OracleEmbedder::new(ls.clone(), 0.0);
        let text = build_text_embeddings::<f64>(&ls, &backend).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        for object in &scene.objects {
            let dist = classify_region(
                &input,
                &object.bbox,
                &text,
                &backend,
                ScoringBackend::<f64>::temperature(&backend),
            )
            .unwrap();
            assert_eq!(dist.argmax(), ls.target_index(object.category_id).unwrap());
        }
    }

    #[test]
    fn lower_temperature_never_lowers_max_prob() {
        let (scene, ls) = scene_and_space();
        let backend = OracleEmbedder::new(ls.clone(), 0.0);
        let text = build_text_embeddings::<f64>(&ls, &backend).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let bbox = scene.objects[0].bbox;
        let mut last = 0.0f64;
        for temperature in [2.0, 1.0, 0.5, 0.1, 0.02] {
            let dist = classify_region(&input, &bbox, &text, &backend, temperature).unwrap();
            assert!(dist.max_prob() >= last);
            last = dist.max_prob();
        }
        assert!(last > 0.99);
    }

    #[test]
    fn permuting_label_space_permutes_probabilities() {
        let extent = ImageExtent::new(128, 128).unwrap();
        let cats = vec![
            Category {
                id: 1,
                name: "a".into(),
            },
            Category {
                id: 2,
                name: "b".into(),
            },
            Category {
                id: 3,
                name: "c".into(),
            },
        ];
        let forward = LabelSpace::closed(cats.clone()).unwrap();
        let reversed = LabelSpace::closed(cats.into_iter().rev().collect()).unwrap();
        let scene = generate_scene::<f64>(&forward, extent, 3, 5).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let bbox = scene.objects[0].bbox;

        let be_f = OracleEmbedder::new(forward.clone(), 0.0);
        let be_r = OracleEmbedder::new(reversed.clone(), 0.0);
        let text_f = build_text_embeddings::<f64>(&forward, &be_f).unwrap();
        let text_r = build_text_embeddings::<f64>(&reversed, &be_r).unwrap();
        let d_f = classify_region(&input, &bbox, &text_f, &be_f, 1.0).unwrap();
        let d_r = classify_region(&input, &bbox, &text_r, &be_r, 1.0).unwrap();
        let rev: Vec<f64> = d_r.probs().iter().rev().copied().collect();
        for (a, b) in d_f.probs().iter().zip(&rev) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn strip_keeps_targets_and_drops_background() {
        let ls = LabelSpace::new(
            vec![
                Category {
                    id: 1,
                    name: "novel".into(),
                },
                Category {
                    id: 2,
                    name: "other".into(),
                },
            ],
            BackgroundMode::BaseAsBackground,
            vec![BackgroundEntry {
                name: "base".into(),
                id: Some(3),
            }],
            DEFAULT_PROMPT_TEMPLATE,
        )
        .unwrap();

        let target_win = ScoreDistribution::from_probs(vec![0.6, 0.3, 0.1]).unwrap();
        let hit = strip_non_targets(&target_win, &ls).unwrap();
        assert_eq!(hit.category_id, 1);
        assert_eq!(hit.prob, 0.6);

        let background_win = ScoreDistribution::from_probs(vec![0.2, 0.3, 0.5]).unwrap();
        assert!(strip_non_targets(&background_win, &ls).is_none());

        let best = best_target(&background_win, &ls);
        assert_eq!(best.category_id, 2);
        assert_eq!(best.prob, 0.3);
    }

    #[test]
    fn strip_always_keeps_when_no_background_entries() {
        let ls = space(3);
        let dist = ScoreDistribution::from_probs(vec![0.2, 0.3, 0.5]).unwrap();
        let hit = strip_non_targets(&dist, &ls).unwrap();
        assert_eq!(hit.entry_index, 2);
    }

    #[test]
    fn batched_scoring_matches_per_region_for_oracle() {
        let (scene, ls) = scene_and_space();
        let backend = OracleEmbedder::new(ls.clone(), 0.3);
        let text = build_text_embeddings::<f64>(&ls, &backend).unwrap();
        let input = ImageInput::Scene {
            id: 1,
            scene: &scene,
        };
        let boxes: Vec<BBox<f64>> = scene.objects.iter().map(|o| o.bbox).collect();
        let gap = batch_agreement_gap(&input, &boxes, &text, &backend, 1.0).unwrap();
        assert_eq!(gap, 0.0);
        assert!(gap <= ScoringBackend::<f64>::batch_tolerance(&backend));
    }

    #[test]
    fn precomputed_store_reproduces_oracle_scores() {
        let (scene, ls) = scene_and_space();
        let oracle = OracleEmbedder::new(ls.clone(), 0.2);
        let input = ImageInput::Scene {
            id: 42,
            scene: &scene,
        };
        let factor = CONTEXT_EXPANSION;
        let mut file = EmbeddingFile::new(EmbeddingManifest {
            dimension: ls.len(),
            normalized: false,
            quantization_decimals: 3,
            temperature: 1.0,
        });
        for prompt in ls.prompts() {
            let v: Vec<f64> = ScoringBackend::<f64>::embed_text(&oracle, &prompt).unwrap();
            file.insert_text(prompt, v);
        }
        let boxes: Vec<BBox<f64>> = scene.objects.iter().map(|o| o.bbox).collect();
        for b in &boxes {
            let expanded = expand_box(b, factor, scene.extent);
            let e1: Vec<f64> = oracle.embed_region(&input, b, ScaleTag::Base).unwrap();
            let e2: Vec<f64> = oracle
                .embed_region(&input, &expanded, ScaleTag::Expanded)
                .unwrap();
            file.insert_region(42, b, ScaleTag::Base, e1);
            file.insert_region(42, &expanded, ScaleTag::Expanded, e2);
        }

        let store = PrecomputedEmbeddings::from_file(file).unwrap();
        let text = build_text_embeddings::<f64>(&ls, &oracle).unwrap();
        let ext_input = ImageInput::External {
            id: 42,
            extent: scene.extent,
        };
        for b in &boxes {
            let via_oracle = classify_region(&input, b, &text, &oracle, 1.0).unwrap();
            let via_store = classify_region(&ext_input, b, &text, &store, 1.0).unwrap();
            for (x, y) in via_oracle.probs().iter().zip(via_store.probs()) {
                assert!((x - y).abs() < 1e-12);
            }
        }

        let missing = BBox::new(1.0, 1.0, 9.0, 9.0).unwrap();
        let err = classify_region(&ext_input, &missing, &text, &store, 1.0);
        assert!(matches!(err, Err(Error::Backend(_))));
    }

    #[test]
    fn embedding_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("embeddings.json");
        let mut file = EmbeddingFile::new(EmbeddingManifest {
            dimension: 2,
            normalized: true,
            quantization_decimals: 3,
            temperature: 0.01,
        });
        file.insert_text("a photo of a cat", vec![1.0, 0.0]);
        file.insert_region(
            7,
            &BBox::new(0.0, 0.0, 10.0, 10.0).unwrap(),
            ScaleTag::Base,
            vec![0.6, 0.8],
        );
        file.save(&path).unwrap();
        let loaded = EmbeddingFile::load(&path).unwrap();
        assert_eq!(loaded.manifest, file.manifest);

        std::fs::write(&path, r#"{"manifest": {"dimension": "x"}}"#).unwrap();
        let err = EmbeddingFile::load(&path);
        assert!(matches!(err, Err(Error::JsonSchema { .. })));
    }
}
