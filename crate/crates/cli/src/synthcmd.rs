//! `make-synth` command: generate a synthetic dataset plus label space
//! and optional split manifests.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use plmine_core::dataset::{
    dataset_from_scenes, make_ssod_split, save_coco_json, save_labelspace, save_split_manifest,
    CategoryRecord, SplitManifest,
};
use plmine_core::synthetic::{generate_scene, mix_seed};
use plmine_core::{Category, ImageExtent, ImageId, LabelSpace, SyntheticScene};

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Number of images.
    #[arg(long, default_value_t = 16)]
    pub images: usize,
    /// Fewest objects per image.
    #[arg(long, default_value_t = 1)]
    pub min_objects: usize,
    /// Most objects per image.
    #[arg(long, default_value_t = 4)]
    pub max_objects: usize,
    /// Image width in pixels.
    #[arg(long, default_value_t = 128)]
    pub width: u32,
    /// Image height in pixels.
    #[arg(long, default_value_t = 128)]
    pub height: u32,
    /// Comma-separated category names; ids are assigned in this order.
    #[arg(long, default_value = "square,disc,triangle")]
    pub categories: String,
    /// Comma-separated category names for the novel side of a category
    /// split manifest (written as split.json).
    #[arg(long)]
    pub novel: Option<String>,
    /// Labeled-image fraction for an image split manifest (written as
    /// ssod_split.json).
    #[arg(long)]
    pub ssod_fraction: Option<f64>,
    /// Seed for the image split shuffle.
    #[arg(long, default_value_t = 0)]
    pub ssod_seed: u64,
    /// Scene generation seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
}

fn parse_names(raw: &str) -> Vec<String> {
    raw.split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

pub fn run_synth(args: &SynthArgs) -> Result<()> {
    let names = parse_names(&args.categories);
    if names.is_empty() {
        bail!("--categories named no categories");
    }
    if args.min_objects > args.max_objects {
        bail!(
            "--min-objects {} exceeds --max-objects {}",
            args.min_objects,
            args.max_objects
        );
    }
    let categories: Vec<Category> = names
        .iter()
        .enumerate()
        .map(|(i, name)| Category {
            id: i as i64 + 1,
            name: name.clone(),
        })
        .collect();
    let labelspace = LabelSpace::closed(categories.clone())?;

    let extent = ImageExtent {
        width: args.width,
        height: args.height,
    };
    let span = args.max_objects - args.min_objects + 1;
    let scenes: Vec<(ImageId, SyntheticScene<f64>)> = (0..args.images)
        .map(|i| {
            let n_objects = args.min_objects + i % span;
            let id = i as ImageId + 1;
            let scene = generate_scene(&labelspace, extent, n_objects, mix_seed(args.seed, id as u64))?;
            Ok((id, scene))
        })
        .collect::<plmine_core::Result<_>>()?;

    let category_records: Vec<CategoryRecord> = categories
        .iter()
        .map(|c| CategoryRecord {
            id: c.id,
            name: c.name.clone(),
        })
        .collect();
    let dataset = dataset_from_scenes(&scenes, &category_records);
    dataset.validate()?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    save_coco_json(&args.out_dir.join("dataset.json"), &dataset)?;
    save_labelspace(&args.out_dir.join("labelspace.json"), &labelspace)?;

    if let Some(raw) = &args.novel {
        let novel = parse_names(raw);
        for name in &novel {
            if !names.contains(name) {
                bail!("novel category {name:?} is not in --categories");
            }
        }
        let base: Vec<String> = names.iter().filter(|n| !novel.contains(n)).cloned().collect();
        if base.is_empty() {
            bail!("--novel leaves no base categories");
        }
        let manifest = SplitManifest::Ovd { base, novel };
        manifest.validate_against(&dataset)?;
        save_split_manifest(&args.out_dir.join("split.json"), &manifest)?;
    }

    if let Some(fraction) = args.ssod_fraction {
        let manifest = make_ssod_split(&dataset, fraction, args.ssod_seed)?;
        save_split_manifest(&args.out_dir.join("ssod_split.json"), &manifest)?;
    }

    println!(
        "wrote {} images, {} annotations, {} categories to {}",
        dataset.images.len(),
        dataset.annotations.len(),
        dataset.categories.len(),
        args.out_dir.display()
    );
    Ok(())
}
