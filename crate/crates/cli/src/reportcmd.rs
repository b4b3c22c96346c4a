//! `report` command: render pseudo-label overlays and a static HTML
//! summary page.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use clap::Args;
use image::{Rgb, RgbImage};

use plmine_core::dataset::{load_coco_json, load_pl_records, DetectionDataset, PlRecord};
use plmine_core::eval::EvalReport;
use plmine_core::{CategoryId, ImageId};

use crate::traincmd::ExperimentRecord;

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// COCO-style dataset JSON.
    #[arg(long)]
    pub dataset: PathBuf,
    /// Pseudo-label JSON to visualize.
    #[arg(long)]
    pub pls: PathBuf,
    /// Evaluation report JSON from `eval-pl` to embed.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    /// Experiment record JSON from `train-toy` to embed.
    #[arg(long)]
    pub experiment: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Number of images rendered as overlays.
    #[arg(long, default_value_t = 8)]
    pub max_images: usize,
}

const PALETTE: [[u8; 3]; 8] = [
    [214, 69, 65],
    [67, 134, 216],
    [60, 160, 85],
    [222, 158, 38],
    [144, 82, 196],
    [40, 170, 170],
    [210, 100, 169],
    [120, 120, 64],
];

fn palette_color(category_id: CategoryId) -> Rgb<u8> {
    let idx = (category_id.rem_euclid(PALETTE.len() as i64)) as usize;
    Rgb(PALETTE[idx])
}

fn lighten(color: Rgb<u8>) -> Rgb<u8> {
    Rgb([
        (u16::from(color.0[0]) / 3 + 170) as u8,
        (u16::from(color.0[1]) / 3 + 170) as u8,
        (u16::from(color.0[2]) / 3 + 170) as u8,
    ])
}

fn clamp_px(v: f64, max: u32) -> u32 {
    if v <= 0.0 {
        0
    } else {
        (v.round() as u32).min(max.saturating_sub(1))
    }
}

fn fill_rect(img: &mut RgbImage, corners: [f64; 4], color: Rgb<u8>) {
    let (w, h) = img.dimensions();
    let x1 = clamp_px(corners[0], w);
    let y1 = clamp_px(corners[1], h);
    let x2 = clamp_px(corners[2], w);
    let y2 = clamp_px(corners[3], h);
    for y in y1..=y2 {
        for x in x1..=x2 {
            let old = img.get_pixel(x, y).0;
            let blended = [
                ((u16::from(old[0]) + u16::from(color.0[0])) / 2) as u8,
                ((u16::from(old[1]) + u16::from(color.0[1])) / 2) as u8,
                ((u16::from(old[2]) + u16::from(color.0[2])) / 2) as u8,
            ];
            img.put_pixel(x, y, Rgb(blended));
        }
    }
}

fn draw_rect(img: &mut RgbImage, corners: [f64; 4], color: Rgb<u8>, thickness: u32) {
    let (w, h) = img.dimensions();
    let x1 = clamp_px(corners[0], w);
    let y1 = clamp_px(corners[1], h);
    let x2 = clamp_px(corners[2], w);
    let y2 = clamp_px(corners[3], h);
    for t in 0..thickness {
        let left = x1.saturating_add(t).min(x2);
        let right = x2.saturating_sub(t).max(x1);
        let top = y1.saturating_add(t).min(y2);
        let bottom = y2.saturating_sub(t).max(y1);
        for x in x1..=x2 {
            img.put_pixel(x, top, color);
            img.put_pixel(x, bottom, color);
        }
        for y in y1..=y2 {
            img.put_pixel(left, y, color);
            img.put_pixel(right, y, color);
        }
    }
}

/// Backdrop for one image: the referenced file when it loads, a white
/// canvas otherwise.
fn backdrop(dataset_dir: &Path, file_name: Option<&str>, width: u32, height: u32) -> RgbImage {
    if let Some(name) = file_name {
        let path = dataset_dir.join(name);
        if let Ok(img) = image::open(&path) {
            return img.to_rgb8();
        }
        log::warn!("could not open {}; rendering a blank canvas", path.display());
    }
    RgbImage::from_pixel(width.max(1), height.max(1), Rgb([255, 255, 255]))
}

fn render_overlay(
    dataset: &DetectionDataset,
    dataset_dir: &Path,
    image_id: ImageId,
    pls: &[&PlRecord],
    out_path: &Path,
) -> Result<()> {
    let image = dataset
        .image(image_id)
        .with_context(|| format!("image {image_id} missing from dataset"))?;
    let mut canvas = backdrop(
        dataset_dir,
        image.file_name.as_deref(),
        image.width,
        image.height,
    );

    for annotation in dataset
        .annotations
        .iter()
        .filter(|a| a.image_id == image_id)
    {
        let bbox = annotation.corner_bbox()?;
        let corners = [bbox.x1, bbox.y1, bbox.x2, bbox.y2];
        let color = palette_color(annotation.category_id);
        fill_rect(&mut canvas, corners, lighten(color));
        draw_rect(&mut canvas, corners, Rgb([60, 60, 60]), 1);
    }
    for record in pls {
        let bbox = record.corner_bbox()?;
        let corners = [bbox.x1, bbox.y1, bbox.x2, bbox.y2];
        draw_rect(&mut canvas, corners, palette_color(record.category_id), 2);
    }
    canvas
        .save(out_path)
        .with_context(|| format!("writing {}", out_path.display()))
}

fn escape_html(raw: &str) -> String {
    raw.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

fn eval_section(report: &EvalReport, dataset: &DetectionDataset) -> String {
    let mut html = String::from("<h2>Evaluation</h2>\n<table>\n");
    let mut row = |name: &str, value: String| {
        let _ = writeln!(html, "<tr><td>{name}</td><td>{value}</td></tr>");
    };
    row("AP50", format!("{:.2}", report.ap50 * 100.0));
    row("mAP[.50:.95]", format!("{:.2}", report.map_50_95 * 100.0));
    if let Some(pl) = &report.pl {
        match pl.ap {
            Some(ap) => row("AP@PL", format!("{:.2}", ap * 100.0)),
            None => row("AP@PL", "undefined (no novel ground truth)".to_string()),
        }
        row("PLs per image", format!("{:.2}", pl.per_image));
        row(
            "novel categories evaluated",
            pl.evaluated_categories.to_string(),
        );
    }
    row("ground-truth boxes", report.n_ground_truth.to_string());
    row("detections", report.n_detections.to_string());
    html.push_str("</table>\n");

    if !report.per_category.is_empty() {
        html.push_str("<h3>Per category</h3>\n<table>\n");
        html.push_str("<tr><th>category</th><th>IoU</th><th>AP</th></tr>\n");
        for entry in &report.per_category {
            let name = dataset
                .category_name(entry.category_id)
                .map(escape_html)
                .unwrap_or_else(|| format!("id {}", entry.category_id));
            let _ = writeln!(
                html,
                "<tr><td>{name}</td><td>{:.2}</td><td>{:.2}</td></tr>",
                entry.iou_threshold,
                entry.ap * 100.0
            );
        }
        html.push_str("</table>\n");
    }
    html
}

fn loss_curve_svg(curve: &[f64]) -> String {
    if curve.len() < 2 {
        return String::new();
    }
    let (w, h, pad) = (480.0, 160.0, 10.0);
    let lo = curve.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = curve.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let points: Vec<String> = curve
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let x = pad + (w - 2.0 * pad) * i as f64 / (curve.len() - 1) as f64;
            let y = h - pad - (h - 2.0 * pad) * (v - lo) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    format!(
        concat!(
            "<h2>Training loss</h2>\n",
            "<svg width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" role=\"img\">\n",
            "<rect width=\"{w}\" height=\"{h}\" fill=\"#fafafa\" stroke=\"#ccc\"/>\n",
            "<polyline fill=\"none\" stroke=\"#4386d8\" stroke-width=\"1.5\" points=\"{points}\"/>\n",
            "<text x=\"{tx}\" y=\"14\" font-size=\"11\">max {hi:.4}</text>\n",
            "<text x=\"{tx}\" y=\"{by}\" font-size=\"11\">min {lo:.4}</text>\n",
            "</svg>\n"
        ),
        w = w,
        h = h,
        points = points.join(" "),
        tx = pad + 4.0,
        by = h - pad - 4.0,
        hi = hi,
        lo = lo,
    )
}

fn sweep_svg(record: &ExperimentRecord) -> String {
    if record.sweep.is_empty() {
        return String::new();
    }
    let (bar_w, gap, h, pad) = (56.0, 24.0, 180.0, 24.0);
    let w = pad * 2.0 + record.sweep.len() as f64 * (bar_w + gap);
    let mut bars = String::new();
    for (i, point) in record.sweep.iter().enumerate() {
        let x = pad + i as f64 * (bar_w + gap);
        let value = point.novel_ap50.unwrap_or(point.ap50);
        let bar_h = (h - 2.0 * pad) * value.clamp(0.0, 1.0);
        let y = h - pad - bar_h;
        let _ = writeln!(
            bars,
            "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{bar_w}\" height=\"{bar_h:.1}\" fill=\"#3ca055\"/>\n<text x=\"{:.1}\" y=\"{:.1}\" font-size=\"11\" text-anchor=\"middle\">a={} ({:.1})</text>",
            x + bar_w / 2.0,
            h - pad + 14.0,
            point.alpha,
            value * 100.0,
        );
    }
    let metric = if record.sweep.iter().any(|p| p.novel_ap50.is_some()) {
        "novel AP50"
    } else {
        "AP50"
    };
    format!(
        "<h2>Alpha sweep ({metric})</h2>\n<svg width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\" role=\"img\">\n<rect width=\"{w}\" height=\"{h}\" fill=\"#fafafa\" stroke=\"#ccc\"/>\n{bars}</svg>\n"
    )
}

pub fn run_report(args: &ReportArgs) -> Result<()> {
    let dataset = load_coco_json(&args.dataset)?;
    let records = load_pl_records(&args.pls)?;
    let eval_report: Option<EvalReport> = args
        .eval
        .as_ref()
        .map(|p| {
            let body = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", p.display()))
        })
        .transpose()?;
    let experiment: Option<ExperimentRecord> = args
        .experiment
        .as_ref()
        .map(|p| {
            let body = std::fs::read_to_string(p)
                .with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&body).with_context(|| format!("parsing {}", p.display()))
        })
        .transpose()?;

    std::fs::create_dir_all(&args.out_dir)
        .with_context(|| format!("creating {}", args.out_dir.display()))?;
    let dataset_dir = args
        .dataset
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));

    let mut gallery = String::new();
    for image in dataset.images.iter().take(args.max_images) {
        let pls: Vec<&PlRecord> = records.iter().filter(|r| r.image_id == image.id).collect();
        let n_gt = dataset
            .annotations
            .iter()
            .filter(|a| a.image_id == image.id)
            .count();
        let file = format!("image_{}.png", image.id);
        render_overlay(
            &dataset,
            &dataset_dir,
            image.id,
            &pls,
            &args.out_dir.join(&file),
        )?;
        let pl_note = if pls.is_empty() {
            "no pseudo labels".to_string()
        } else {
            format!("{} pseudo labels", pls.len())
        };
        let _ = writeln!(
            gallery,
            "<figure><img src=\"{file}\" alt=\"image {id}\" width=\"{w}\"/><figcaption>image {id}: {n_gt} ground-truth boxes, {pl_note}</figcaption></figure>",
            id = image.id,
            w = image.width.max(192),
        );
    }

    let mut html = String::new();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\"/>\n");
    html.push_str("<title>Pseudo-label report</title>\n<style>\n");
    html.push_str(
        "body{font-family:sans-serif;margin:2em;max-width:70em}table{border-collapse:collapse}\n\
         td,th{border:1px solid #bbb;padding:0.3em 0.7em;text-align:left}\n\
         figure{display:inline-block;margin:0.5em;vertical-align:top}\n\
         figcaption{font-size:0.85em;color:#444;max-width:14em}\n\
         .warn{background:#fff3cd;padding:0.6em;border:1px solid #e0c769}\n",
    );
    html.push_str("</style>\n</head>\n<body>\n<h1>Pseudo-label report</h1>\n");
    let _ = writeln!(
        html,
        "<p>{} images, {} ground-truth boxes, {} pseudo labels.</p>",
        dataset.images.len(),
        dataset.annotations.len(),
        records.len()
    );
    if records.is_empty() {
        html.push_str(
            "<p class=\"warn\">The pseudo-label file is empty: nothing passed the emission threshold.</p>\n",
        );
    }
    if let Some(report) = &eval_report {
        html.push_str(&eval_section(report, &dataset));
    }
    if let Some(record) = &experiment {
        html.push_str(&loss_curve_svg(&record.loss_curve));
        html.push_str(&sweep_svg(record));
    }
    html.push_str("<h2>Images</h2>\n");
    html.push_str(&gallery);
    html.push_str("</body>\n</html>\n");

    let index = args.out_dir.join("index.html");
    std::fs::write(&index, html).with_context(|| format!("writing {}", index.display()))?;
    println!("wrote report to {}", index.display());
    Ok(())
}
