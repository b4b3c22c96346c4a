//! Determinism pins for mining on the bundled corpus.

mod common;

use common::{bin, corpus_dir, run_ok, sha256_hex_file};

/// Frozen digest of the pseudo-label file for the bundled corpus at
/// temperature 0.2, seed 5, default miner settings. Changing any
/// numeric path in the miner shows up here first.
const GOLDEN_PL_SHA256: &str = "fc69719153121ec6663f2685a6c89bbb0eff0c1e6544ab7110a72d1b0f3fa78d";

fn mine_corpus(out: &std::path::Path, extra: &[&str]) {
    let corpus = corpus_dir();
    let mut cmd = bin();
    cmd.args([
        "mine",
        "--dataset",
        corpus.join("dataset.json").to_str().unwrap(),
        "--labelspace",
        corpus.join("labelspace.json").to_str().unwrap(),
        "--oracle-temperature",
        "0.2",
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
    ]);
    cmd.args(extra);
    run_ok(&mut cmd);
}

#[test]
fn bundled_corpus_mine_matches_golden_digest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("pls.json");
    mine_corpus(&out, &[]);
    assert_eq!(
        sha256_hex_file(&out),
        GOLDEN_PL_SHA256,
        "mining output drifted from the frozen digest"
    );
}

#[test]
fn precomputed_backend_reproduces_oracle_mining() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = corpus_dir();

    let oracle_out = dir.path().join("oracle_pls.json");
    mine_corpus(&oracle_out, &[]);

    let embeddings = dir.path().join("embeddings.json");
    run_ok(bin().args([
        "precompute",
        "--dataset",
        corpus.join("dataset.json").to_str().unwrap(),
        "--labelspace",
        corpus.join("labelspace.json").to_str().unwrap(),
        "--temperature",
        "0.2",
        "--seed",
        "5",
        "--out",
        embeddings.to_str().unwrap(),
    ]));

    let precomputed_out = dir.path().join("precomputed_pls.json");
    mine_corpus(
        &precomputed_out,
        &[
            "--backend",
            "precomputed",
            "--embeddings",
            embeddings.to_str().unwrap(),
        ],
    );

    assert_eq!(
        std::fs::read(&oracle_out).unwrap(),
        std::fs::read(&precomputed_out).unwrap(),
        "precomputed backend diverged from the oracle it was filled from"
    );
}
