//! `mine`, `fuse-pl`, and `precompute` commands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;

use plmine_core::dataset::{
    load_coco_json, load_labelspace, load_pl_records, pl_records_to_labels, save_pl_records,
    PlRecord,
};
use plmine_core::input::ImageInput;
use plmine_core::miner::{
    candidates_to_labels, finalize_pseudo_labels, merge_pseudo_labels, mine_candidates,
    MinerBackends, MinerConfig, NmsMode, PlCandidate, PlSource,
};
use plmine_core::proposals::{ContractionRefiner, SyntheticRpn};
use plmine_core::scoring::{
    build_text_embeddings, EmbeddingFile, EmbeddingManifest, ScaleTag, CONTEXT_EXPANSION,
};
use plmine_core::synthetic::{ContractionConfig, SyntheticRpnConfig};
use plmine_core::{expand_box, ImageId, PseudoLabel};

use crate::backends::{build_scoring, BackendKind, BackendOpts};
use crate::util::{manifest_path_for, scenes_for_dataset, worker_pool, write_manifest};

/// Miner configuration knobs shared by `mine` and `fuse-pl`. Flags
/// override fields of `--config` when both are given.
#[derive(Args, Debug)]
pub struct MinerOverrides {
    /// JSON file mirroring the miner configuration field names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Emission confidence threshold.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Iterative refinement steps.
    #[arg(long)]
    pub roi_steps: Option<usize>,
    /// Proposals kept per image before refinement.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Proposal-stage NMS IoU threshold.
    #[arg(long)]
    pub rpn_nms: Option<f64>,
    /// Final pseudo-label NMS IoU threshold.
    #[arg(long)]
    pub pl_nms: Option<f64>,
    /// Final NMS grouping.
    #[arg(long, value_enum)]
    pub nms_mode: Option<CliNmsMode>,
    /// Disable RPN-score fusion; rank by classifier probability alone.
    #[arg(long)]
    pub no_fusion: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CliNmsMode {
    Classwise,
    ClassAgnostic,
}

impl MinerOverrides {
    pub fn resolve(&self) -> Result<MinerConfig> {
        let mut config = match &self.config {
            Some(path) => {
                let body = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                serde_json::from_str(&body)
                    .with_context(|| format!("parsing miner config {}", path.display()))?
            }
            None => MinerConfig::default(),
        };
        if let Some(tau) = self.tau {
            config.tau = tau;
        }
        if let Some(steps) = self.roi_steps {
            config.roi_steps = steps;
        }
        if let Some(top_k) = self.top_k {
            config.top_k = top_k;
        }
        if let Some(rpn_nms) = self.rpn_nms {
            config.rpn_nms = rpn_nms;
        }
        if let Some(pl_nms) = self.pl_nms {
            config.pl_nms = pl_nms;
        }
        if let Some(mode) = self.nms_mode {
            config.nms_mode = match mode {
                CliNmsMode::Classwise => NmsMode::Classwise,
                CliNmsMode::ClassAgnostic => NmsMode::ClassAgnostic,
            };
        }
        if self.no_fusion {
            config.fusion_enabled = false;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args, Debug)]
pub struct MineArgs {
    /// COCO-style dataset JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Label-space JSON (targets, background mode, prompt template).
    #[arg(long)]
    pub labelspace: PathBuf,
    /// Scoring backend.
    #[arg(long, value_enum, default_value = "oracle")]
    pub backend: BackendKind,
    /// Embedding file for the precomputed backend.
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Live backend endpoint (defaults to $PLMINE_LIVE_ENDPOINT).
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Oracle scorer noise scale.
    #[arg(long, default_value_t = 0.0)]
    pub oracle_noise: f64,
    /// Oracle scorer softmax temperature.
    #[arg(long, default_value_t = 1.0)]
    pub oracle_temperature: f64,
    /// Live backend softmax temperature.
    #[arg(long, default_value_t = 0.01)]
    pub live_temperature: f64,
    #[command(flatten)]
    pub overrides: MinerOverrides,
    /// Worker threads (0 = automatic).
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
    /// Run seed; per-image randomness derives from it and the image id.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output pseudo-label JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Also write pre-threshold candidates (for later fusion) here.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Manifest path (default: output path with .manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Abort when the per-image failure rate exceeds this fraction.
    #[arg(long, default_value_t = 0.0)]
    pub max_failure_rate: f64,
}

fn labels_to_records(per_image: &[(ImageId, Vec<PseudoLabel<f64>>)]) -> Vec<PlRecord> {
    per_image
        .iter()
        .flat_map(|(image_id, labels)| {
            labels.iter().map(|label| PlRecord {
                image_id: *image_id,
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
        })
        .collect()
}

fn candidate_records(per_image: &[(ImageId, Vec<PlCandidate<f64>>)]) -> Vec<PlRecord> {
    per_image
        .iter()
        .flat_map(|(image_id, candidates)| {
            candidates.iter().map(|c| PlRecord {
                image_id: *image_id,
                category_id: c.category_id,
                bbox: [c.bbox.x1, c.bbox.y1, c.bbox.width(), c.bbox.height()],
                score: c.fused_score,
                source: PlSource::Vl,
            })
        })
        .collect()
}

pub fn run_mine(args: &MineArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    let dataset = load_coco_json(&args.dataset)?;
    let labelspace = load_labelspace(&args.labelspace)?;
    let opts = BackendOpts {
        kind: args.backend,
        embeddings: args.embeddings.clone(),
        endpoint: args.endpoint.clone(),
        oracle_noise: args.oracle_noise,
        oracle_temperature: args.oracle_temperature,
        live_temperature: args.live_temperature,
    };
    let scoring = build_scoring(&opts, &labelspace)?;
    let rpn = SyntheticRpn::new(SyntheticRpnConfig::default());
    let refiner = ContractionRefiner::new(ContractionConfig::default());
    let backends = MinerBackends {
        proposals: &rpn,
        refiner: &refiner,
        scoring: scoring.as_ref(),
    };
    let text = build_text_embeddings(&labelspace, scoring.as_ref())?;

    let scenes = scenes_for_dataset(&dataset, args.seed)?;
    let inputs: Vec<ImageInput<'_, f64>> = scenes
        .iter()
        .map(|(id, scene)| ImageInput::Scene { id: *id, scene })
        .collect();

    let pool = worker_pool(args.workers)?;
    type ImageOutcome = (
        ImageId,
        plmine_core::Result<(Vec<PlCandidate<f64>>, Vec<PseudoLabel<f64>>)>,
    );
    let results: Vec<ImageOutcome> = pool.install(|| {
        inputs
            .par_iter()
            .map(|input| {
                let outcome =
                    mine_candidates(input, &backends, &text, &labelspace, &config).map(
                        |candidates| {
                            let labels = finalize_pseudo_labels(
                                candidates_to_labels(candidates.clone()),
                                &config,
                            );
                            (candidates, labels)
                        },
                    );
                (input.id(), outcome)
            })
            .collect()
    });

    let mut per_image_labels = Vec::new();
    let mut per_image_candidates = Vec::new();
    let mut failures = Vec::new();
    for (image_id, outcome) in results {
        match outcome {
            Ok((candidates, labels)) => {
                per_image_candidates.push((image_id, candidates));
                per_image_labels.push((image_id, labels));
            }
            Err(e) => failures.push((image_id, e.to_string())),
        }
    }
    for (image_id, message) in &failures {
        log::warn!("image {image_id} failed: {message}");
    }
    let total = per_image_labels.len() + failures.len();
    let failure_rate = if total == 0 {
        0.0
    } else {
        failures.len() as f64 / total as f64
    };
    if failure_rate > args.max_failure_rate {
        bail!(
            "{} of {} images failed (rate {:.3} > ceiling {:.3})",
            failures.len(),
            total,
            failure_rate,
            args.max_failure_rate
        );
    }

    let records = labels_to_records(&per_image_labels);
    save_pl_records(&args.out, &records)?;
    if let Some(path) = &args.candidates {
        save_pl_records(path, &candidate_records(&per_image_candidates))?;
    }

    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| manifest_path_for(&args.out));
    let mut input_paths: Vec<&Path> = vec![&args.dataset, &args.labelspace];
    if let Some(embeddings) = &args.embeddings {
        input_paths.push(embeddings);
    }
    write_manifest(
        &manifest_path,
        "mine",
        &config,
        args.seed,
        &labelspace,
        vec![
            backends.proposals.identifier(),
            backends.refiner.identifier(),
            scoring.identifier(),
        ],
        &input_paths,
    )?;

    log::info!(
        "mined {} pseudo labels over {} images ({} failures)",
        records.len(),
        total,
        failures.len()
    );
    println!(
        "wrote {} pseudo labels for {} images to {}",
        records.len(),
        per_image_labels.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    /// Pre-threshold candidate file from `mine --candidates`.
    #[arg(long)]
    pub vl: PathBuf,
    /// Teacher candidate file (same record shape, source `teacher`).
    #[arg(long)]
    pub teacher: PathBuf,
    /// Label-space JSON; teacher categories must be targets in it.
    #[arg(long)]
    pub labelspace: PathBuf,
    #[command(flatten)]
    pub overrides: MinerOverrides,
    /// Output pseudo-label JSON path.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest path (default: output path with .manifest.json).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

fn group_by_image(
    labels: Vec<(ImageId, PseudoLabel<f64>)>,
) -> BTreeMap<ImageId, Vec<PseudoLabel<f64>>> {
    let mut map: BTreeMap<ImageId, Vec<PseudoLabel<f64>>> = BTreeMap::new();
    for (image_id, label) in labels {
        map.entry(image_id).or_default().push(label);
    }
    map
}

pub fn run_fuse(args: &FuseArgs) -> Result<()> {
    let config = args.overrides.resolve()?;
    let labelspace = load_labelspace(&args.labelspace)?;
    let mut vl = group_by_image(pl_records_to_labels(&load_pl_records(&args.vl)?)?);
    let mut teacher = group_by_image(pl_records_to_labels(&load_pl_records(&args.teacher)?)?);

    let image_ids: Vec<ImageId> = vl.keys().chain(teacher.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let mut per_image = Vec::with_capacity(image_ids.len());
    for image_id in image_ids {
        let merged = merge_pseudo_labels(
            vl.remove(&image_id).unwrap_or_default(),
            teacher.remove(&image_id).unwrap_or_default(),
            &labelspace,
            &config,
        )?;
        per_image.push((image_id, merged));
    }

    let records = labels_to_records(&per_image);
    save_pl_records(&args.out, &records)?;
    let manifest_path = args
        .manifest
        .clone()
        .unwrap_or_else(|| manifest_path_for(&args.out));
    write_manifest(
        &manifest_path,
        "fuse-pl",
        &config,
        0,
        &labelspace,
        vec![],
        &[&args.vl, &args.teacher, &args.labelspace],
    )?;
    println!(
        "fused {} pseudo labels to {}",
        records.len(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct PrecomputeArgs {
    /// COCO-style dataset JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Label-space JSON.
    #[arg(long)]
    pub labelspace: PathBuf,
    /// Oracle scorer noise scale baked into the stored embeddings.
    #[arg(long, default_value_t = 0.0)]
    pub oracle_noise: f64,
    /// Softmax temperature recorded for consumers of the file.
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[command(flatten)]
    pub overrides: MinerOverrides,
    /// Run seed; must match the later `mine --seed` for keys to align.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output embedding JSON path.
    #[arg(long)]
    pub out: PathBuf,
}

/// Replays the proposal + refinement trajectory and stores an embedding
/// for every (box, scale) pair the miner will query, plus the prompt
/// embeddings, so a later `mine --backend precomputed` run needs no
/// scene access.
pub fn run_precompute(args: &PrecomputeArgs) -> Result<()> {
    use plmine_core::proposals::{generate_proposals, refine_iteratively};
    use plmine_core::scoring::ScoringBackend;

    let config = args.overrides.resolve()?;
    let dataset = load_coco_json(&args.dataset)?;
    let labelspace = load_labelspace(&args.labelspace)?;
    let oracle = plmine_core::OracleEmbedder::new(labelspace.clone(), args.oracle_noise)
        .with_temperature(args.temperature);
    let rpn = SyntheticRpn::new(SyntheticRpnConfig::default());
    let refiner = ContractionRefiner::new(ContractionConfig::default());

    let mut file = EmbeddingFile::new(EmbeddingManifest {
        dimension: labelspace.len(),
        normalized: false,
        quantization_decimals: 3,
        temperature: args.temperature,
    });
    for prompt in labelspace.prompts() {
        let embedding = ScoringBackend::<f64>::embed_text(&oracle, &prompt)?;
        file.insert_text(prompt, embedding);
    }

    let scenes = scenes_for_dataset(&dataset, args.seed)?;
    for (id, scene) in &scenes {
        let input = ImageInput::Scene { id: *id, scene };
        let proposals = generate_proposals(&rpn, &input, config.top_k, config.rpn_nms)?;
        let refined = refine_iteratively(&refiner, &input, proposals, config.roi_steps)?;
        for proposal in &refined {
            let base = proposal.bbox;
            let expanded = expand_box(&base, CONTEXT_EXPANSION, scene.extent);
            for (bbox, scale) in [(base, ScaleTag::Base), (expanded, ScaleTag::Expanded)] {
                let embedding = ScoringBackend::<f64>::embed_region(&oracle, &input, &bbox, scale)?;
                file.insert_region(*id, &bbox, scale, embedding);
            }
        }
    }
    file.save(&args.out)?;
    println!(
        "wrote {} text and {} region embeddings to {}",
        labelspace.len(),
        file.n_regions(),
        args.out.display()
    );
    Ok(())
}
