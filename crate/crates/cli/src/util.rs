//! Small shared helpers for the command implementations.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sha2::{Digest, Sha256};

use plmine_core::dataset::{
    scene_from_image, DetectionDataset, RunManifest, save_run_manifest,
};
use plmine_core::miner::MinerConfig;
use plmine_core::synthetic::mix_seed;
use plmine_core::{ImageId, LabelSpace, SyntheticScene};

pub fn sha256_hex(path: &Path) -> Result<String> {
    let bytes =
        std::fs::read(path).with_context(|| format!("reading {} for hashing", path.display()))?;
    let mut hasher = Sha256::new();
    hasher.update(&bytes);
    Ok(format!("{:x}", hasher.finalize()))
}

/// Input-path → digest map for a run manifest.
pub fn hash_inputs(paths: &[&Path]) -> Result<BTreeMap<String, String>> {
    let mut hashes = BTreeMap::new();
    for path in paths {
        hashes.insert(path.display().to_string(), sha256_hex(path)?);
    }
    Ok(hashes)
}

pub fn write_manifest(
    path: &Path,
    command: &str,
    config: &MinerConfig,
    seed: u64,
    labelspace: &LabelSpace,
    backends: Vec<String>,
    inputs: &[&Path],
) -> Result<()> {
    let manifest = RunManifest {
        command: command.to_string(),
        config: config.clone(),
        seed,
        labelspace: labelspace.clone(),
        backends,
        input_hashes: hash_inputs(inputs)?,
    };
    save_run_manifest(path, &manifest)?;
    Ok(())
}

/// Default manifest path: the output path with a `.manifest.json` suffix.
pub fn manifest_path_for(out: &Path) -> PathBuf {
    let mut name = out.file_stem().unwrap_or_default().to_os_string();
    name.push(".manifest.json");
    out.with_file_name(name)
}

/// Rebuilds every scene of a synthetic dataset; per-image seeds are
/// derived from the run seed and the image id, so they do not depend on
/// iteration order or worker count.
pub fn scenes_for_dataset(
    dataset: &DetectionDataset,
    seed: u64,
) -> Result<Vec<(ImageId, SyntheticScene<f64>)>> {
    dataset
        .images
        .iter()
        .map(|im| {
            let scene = scene_from_image(dataset, im.id, mix_seed(seed, im.id as u64))?;
            Ok((im.id, scene))
        })
        .collect::<std::result::Result<Vec<_>, plmine_core::Error>>()
        .map_err(Into::into)
}

/// Builds a rayon pool honoring `--workers` (0 = library default).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .context("building worker pool")
}
