//! End-to-end drive of every subcommand against a generated dataset.

mod common;

use common::{bin, run_ok};

use plmine_core::dataset::{load_pl_records, load_run_manifest, PlRecord};
use plmine_core::eval::EvalReport;
use plmine_core::PlSource;

#[test]
fn full_pipeline_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth");

    run_ok(bin().args([
        "make-synth",
        "--images",
        "10",
        "--min-objects",
        "1",
        "--max-objects",
        "2",
        "--categories",
        "square,disc,triangle",
        "--novel",
        "triangle",
        "--ssod-fraction",
        "0.5",
        "--seed",
        "3",
        "--out-dir",
        synth.to_str().unwrap(),
    ]));
    for file in ["dataset.json", "labelspace.json", "split.json", "ssod_split.json"] {
        assert!(synth.join(file).exists(), "{file} missing");
    }

    let dataset = synth.join("dataset.json");
    let labelspace = synth.join("labelspace.json");
    let pls = root.join("pls.json");
    let candidates = root.join("candidates.json");
    run_ok(bin().args([
        "mine",
        "--dataset",
        dataset.to_str().unwrap(),
        "--labelspace",
        labelspace.to_str().unwrap(),
        "--oracle-temperature",
        "0.2",
        "--seed",
        "11",
        "--out",
        pls.to_str().unwrap(),
        "--candidates",
        candidates.to_str().unwrap(),
    ]));

    let mined = load_pl_records(&pls).unwrap();
    assert!(!mined.is_empty(), "no labels mined");
    assert!(mined.iter().all(|r| r.score >= 0.8 && r.score <= 1.0));
    assert!(mined.iter().all(|r| r.source == PlSource::Vl));
    let cands = load_pl_records(&candidates).unwrap();
    assert!(cands.len() >= mined.len(), "candidate dump smaller than output");

    let manifest_path = root.join("pls.manifest.json");
    assert!(manifest_path.exists(), "manifest missing");
    let manifest = load_run_manifest(&manifest_path).unwrap();
    assert_eq!(manifest.command, "mine");
    assert_eq!(manifest.seed, 11);
    assert_eq!(manifest.input_hashes.len(), 2);
    assert!(manifest
        .backends
        .iter()
        .any(|b| b.starts_with("synthetic-rpn")));

    let eval_out = root.join("eval.json");
    let output = run_ok(bin().args([
        "eval-pl",
        "--dataset",
        dataset.to_str().unwrap(),
        "--pls",
        pls.to_str().unwrap(),
        "--split",
        synth.join("split.json").to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    let stdout = String::from_utf8_lossy(&output.stdout);
    assert!(stdout.contains("AP50"), "eval table missing AP50:\n{stdout}");
    assert!(stdout.contains("AP@PL"), "eval table missing AP@PL:\n{stdout}");
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert_eq!(report.n_images, 10);
    assert!(report.pl.is_some());

    let experiment = root.join("experiment.json");
    run_ok(bin().args([
        "train-toy",
        "--dataset",
        dataset.to_str().unwrap(),
        "--labelspace",
        labelspace.to_str().unwrap(),
        "--pls",
        pls.to_str().unwrap(),
        "--split",
        synth.join("split.json").to_str().unwrap(),
        "--steps",
        "60",
        "--alpha-sweep",
        "0,1",
        "--out",
        experiment.to_str().unwrap(),
    ]));
    let record: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&experiment).unwrap()).unwrap();
    assert_eq!(record["loss_curve"].as_array().unwrap().len(), 60);
    assert_eq!(record["sweep"].as_array().unwrap().len(), 2);
    assert_eq!(record["config"]["alpha"], serde_json::json!(1.0));

    let report_dir = root.join("report");
    run_ok(bin().args([
        "report",
        "--dataset",
        dataset.to_str().unwrap(),
        "--pls",
        pls.to_str().unwrap(),
        "--eval",
        eval_out.to_str().unwrap(),
        "--experiment",
        experiment.to_str().unwrap(),
        "--max-images",
        "4",
        "--out-dir",
        report_dir.to_str().unwrap(),
    ]));
    let html = std::fs::read_to_string(report_dir.join("index.html")).unwrap();
    assert!(html.contains("<table>"));
    assert!(html.contains("<svg"), "loss curve SVG missing");
    assert!(html.contains("image_1.png"));
    assert!(report_dir.join("image_1.png").exists());
    let png = std::fs::read(report_dir.join("image_1.png")).unwrap();
    assert_eq!(&png[1..4], b"PNG");
}

#[test]
fn eval_pl_of_ground_truth_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let synth = root.join("synth");
    run_ok(bin().args([
        "make-synth",
        "--images",
        "6",
        "--categories",
        "square,disc",
        "--seed",
        "9",
        "--out-dir",
        synth.to_str().unwrap(),
    ]));

    let dataset = plmine_core::dataset::load_coco_json(&synth.join("dataset.json")).unwrap();
    let records: Vec<PlRecord> = dataset
        .annotations
        .iter()
        .map(|a| PlRecord {
            image_id: a.image_id,
            category_id: a.category_id,
            bbox: a.bbox,
            score: 1.0,
            source: PlSource::Vl,
        })
        .collect();
    let pls = root.join("gt_as_pls.json");
    plmine_core::dataset::save_pl_records(&pls, &records).unwrap();

    let eval_out = root.join("eval.json");
    run_ok(bin().args([
        "eval-pl",
        "--dataset",
        synth.join("dataset.json").to_str().unwrap(),
        "--pls",
        pls.to_str().unwrap(),
        "--out",
        eval_out.to_str().unwrap(),
    ]));
    let report: EvalReport = serde_json::from_str(&std::fs::read_to_string(&eval_out).unwrap()).unwrap();
    assert!((report.ap50 - 1.0).abs() < 1e-12, "AP50 {}", report.ap50);
    assert!(
        (report.pl.unwrap().ap.unwrap() - 1.0).abs() < 1e-12,
        "AP@PL not 1 for ground truth used as labels"
    );
}

#[test]
fn mine_fails_cleanly_on_missing_dataset() {
    let output = bin()
        .args([
            "mine",
            "--dataset",
            "/nonexistent/nowhere.json",
            "--labelspace",
            "/nonexistent/labels.json",
            "--out",
            "/tmp/unused_pls.json",
        ])
        .output()
        .expect("spawning plmine");
    assert!(!output.status.success());
    let stderr = String::from_utf8_lossy(&output.stderr);
    assert!(
        stderr.contains("nowhere.json"),
        "error does not name the missing file:\n{stderr}"
    );
}
