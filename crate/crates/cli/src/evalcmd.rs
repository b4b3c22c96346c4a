//! `eval-pl` command: score a pseudo-label file against dataset ground
//! truth.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::Args;

use plmine_core::dataset::{
    load_coco_json, load_pl_records, load_split_manifest, pl_records_to_detections,
};
use plmine_core::eval::EvalReport;
use plmine_core::CategoryId;

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// COCO-style dataset JSON with ground truth.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pseudo-label JSON to evaluate.
    #[arg(long)]
    pub pls: PathBuf,
    /// Category split manifest; its novel side defines the evaluated set.
    /// Without one, every ground-truth category counts as novel.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Report JSON output path (printed to stdout regardless).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run_eval(args: &EvalArgs) -> Result<EvalReport> {
    let dataset = load_coco_json(&args.dataset)?;
    let records = load_pl_records(&args.pls)?;
    let detections = pl_records_to_detections(&records)?;
    let gt = dataset.ground_truth()?;

    let novel: Vec<CategoryId> = match &args.split {
        Some(path) => {
            let manifest = load_split_manifest(path)?;
            manifest.validate_against(&dataset)?;
            manifest.novel_ids(&dataset)?
        }
        None => gt
            .iter()
            .map(|g| g.category_id)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .collect(),
    };

    let report = EvalReport::build(&detections, &gt, Some(&novel), dataset.images.len());
    if let Some(out) = &args.out {
        let body = serde_json::to_string_pretty(&report).context("serializing eval report")?;
        std::fs::write(out, body).with_context(|| format!("writing {}", out.display()))?;
    }
    print!("{}", report.text_table());
    Ok(report)
}
