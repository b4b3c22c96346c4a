//! Scoring backend selection, including the HTTP-served live backend.

use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use plmine_core::geometry::BBox;
use plmine_core::input::ImageInput;
use plmine_core::scoring::{PrecomputedEmbeddings, ScaleTag, ScoringBackend};
use plmine_core::{Error as CoreError, ImageId, LabelSpace, OracleEmbedder};

/// Environment variable naming the live scoring endpoint, e.g.
/// `http://127.0.0.1:9000`.
pub const LIVE_ENDPOINT_VAR: &str = "PLMINE_LIVE_ENDPOINT";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendKind {
    /// Scene-aware synthetic embedder; exact up to configured noise.
    Oracle,
    /// Embeddings served from a file produced by `precompute`.
    Precomputed,
    /// Embeddings served over HTTP by an external model process.
    Live,
}

#[derive(Debug, Clone)]
pub struct BackendOpts {
    pub kind: BackendKind,
    pub embeddings: Option<std::path::PathBuf>,
    pub endpoint: Option<String>,
    pub oracle_noise: f64,
    pub oracle_temperature: f64,
    pub live_temperature: f64,
}

pub fn build_scoring(
    opts: &BackendOpts,
    labelspace: &LabelSpace,
) -> Result<Box<dyn ScoringBackend<f64>>> {
    match opts.kind {
        BackendKind::Oracle => Ok(Box::new(
            OracleEmbedder::new(labelspace.clone(), opts.oracle_noise)
                .with_temperature(opts.oracle_temperature),
        )),
        BackendKind::Precomputed => {
            let Some(path) = &opts.embeddings else {
                bail!("--backend precomputed requires --embeddings");
            };
            Ok(Box::new(PrecomputedEmbeddings::load(path)?))
        }
        BackendKind::Live => {
            let endpoint = match &opts.endpoint {
                Some(e) => e.clone(),
                None => std::env::var(LIVE_ENDPOINT_VAR).with_context(|| {
                    format!("--backend live needs --endpoint or {LIVE_ENDPOINT_VAR}")
                })?,
            };
            Ok(Box::new(LiveScoring::new(endpoint, opts.live_temperature)))
        }
    }
}

#[derive(Serialize)]
struct TextRequest<'a> {
    prompt: &'a str,
}

#[derive(Deserialize)]
struct TextResponse {
    embedding: Vec<f64>,
}

#[derive(Serialize)]
struct RegionRequest {
    bbox: [f64; 4],
    scale: ScaleTag,
}

#[derive(Serialize)]
struct RegionsRequest {
    image_id: ImageId,
    regions: Vec<RegionRequest>,
}

#[derive(Deserialize)]
struct RegionsResponse {
    embeddings: Vec<Vec<f64>>,
}

/// Scoring served by an external process speaking a two-route JSON
/// protocol: POST `/embed_text` with `{"prompt"}` returning
/// `{"embedding"}`, and POST `/embed_regions` with
/// `{"image_id", "regions": [{"bbox", "scale"}]}` returning
/// `{"embeddings"}`. Vectors are used as-is (normalization happens in
/// the scoring pipeline).
pub struct LiveScoring {
    agent: ureq::Agent,
    endpoint: String,
    temperature: f64,
}

impl LiveScoring {
    pub fn new(endpoint: String, temperature: f64) -> Self {
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_secs(60))
            .build();
        LiveScoring {
            agent,
            endpoint: endpoint.trim_end_matches('/').to_string(),
            temperature,
        }
    }

    fn post<T: serde::de::DeserializeOwned>(
        &self,
        route: &str,
        body: impl Serialize,
    ) -> std::result::Result<T, CoreError> {
        let url = format!("{}/{route}", self.endpoint);
        let response = self
            .agent
            .post(&url)
            .send_json(body)
            .map_err(|e| CoreError::backend(format!("POST {url}: {e}")))?;
        response
            .into_json()
            .map_err(|e| CoreError::backend(format!("decoding {url} response: {e}")))
    }
}

impl ScoringBackend<f64> for LiveScoring {
    fn embed_text(&self, prompt: &str) -> std::result::Result<Vec<f64>, CoreError> {
        let response: TextResponse = self.post("embed_text", TextRequest { prompt })?;
        Ok(response.embedding)
    }

    fn embed_region(
        &self,
        input: &ImageInput<f64>,
        bbox: &BBox<f64>,
        scale: ScaleTag,
    ) -> std::result::Result<Vec<f64>, CoreError> {
        Ok(self.embed_regions(input, &[(*bbox, scale)])?.remove(0))
    }

    fn embed_regions(
        &self,
        input: &ImageInput<f64>,
        requests: &[(BBox<f64>, ScaleTag)],
    ) -> std::result::Result<Vec<Vec<f64>>, CoreError> {
        let body = RegionsRequest {
            image_id: input.id(),
            regions: requests
                .iter()
                .map(|(bbox, scale)| RegionRequest {
                    bbox: bbox.corners(),
                    scale: *scale,
                })
                .collect(),
        };
        let response: RegionsResponse = self.post("embed_regions", body)?;
        if response.embeddings.len() != requests.len() {
            return Err(CoreError::backend(format!(
                "live backend returned {} embeddings for {} regions",
                response.embeddings.len(),
                requests.len()
            )));
        }
        Ok(response.embeddings)
    }

    fn temperature(&self) -> f64 {
        self.temperature
    }

    fn identifier(&self) -> String {
        format!("live({}, temperature={})", self.endpoint, self.temperature)
    }
}
