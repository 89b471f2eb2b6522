//! Campaign clients backed by a [`SynthWorld`].
//!
//! Embedding geometry: every prompt text embeds to `e0`, every reference image
//! to `e1`, and a sample drawn at `(ts, is)` to `[ts, is, √(1−ts²−is²), 0, …]`.
//! Scoring that vector therefore recovers `(ts, is)` up to rounding.
//!
//! Checkpoint handles and artifact URIs carry the `(ts, is)` pair as hex f64
//! bit patterns, so the backend keeps no hidden state between calls.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use crate::embedding::{write_emb_jsonl, EmbRecord, EmbeddingKind};
use crate::io::write_atomic;
use crate::orchestrator::clients::{
    CampaignClients, ClientError, ClientKind, EmbedImagesRequest, EmbedTextsRequest, EmbeddingsResponse,
    GenerateRequest, GenerateResponse, GeneratedItem, TrainRequest, TrainResponse,
};
use crate::pairing::read_pairs_jsonl;
use crate::prompts::PromptEntry;
use crate::scoring::PromptSource;

use super::world::{synth_points, synth_update_deltas, SynthWorld};

/// Handle that maps to the world's own `concept_mean`.
pub const SIM_INIT: &str = "init";

pub fn encode_point(prefix: &str, (ts, is_): (f64, f64)) -> String {
    format!("{prefix}:{:016x}:{:016x}", ts.to_bits(), is_.to_bits())
}

pub fn decode_point(prefix: &str, s: &str) -> Option<(f64, f64)> {
    let rest = s.strip_prefix(prefix)?.strip_prefix(':')?;
    let (a, b) = rest.split_once(':')?;
    let ts = f64::from_bits(u64::from_str_radix(a, 16).ok()?);
    let is_ = f64::from_bits(u64::from_str_radix(b, 16).ok()?);
    (ts.is_finite() && is_.is_finite()).then_some((ts, is_))
}

/// Unit vector realizing `(ts, is)` against `e0` and `e1`.
pub fn realize(dim: usize, (ts, is_): (f64, f64)) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    let r2 = ts * ts + is_ * is_;
    if r2 > 1.0 {
        let r = r2.sqrt();
        v[0] = ts / r;
        v[1] = is_ / r;
    } else {
        v[0] = ts;
        v[1] = is_;
        v[2] = (1.0 - r2).sqrt();
    }
    v
}

fn basis(dim: usize, k: usize) -> Vec<f64> {
    let mut v = vec![0.0; dim];
    v[k] = 1.0;
    v
}

#[derive(Debug, Clone)]
pub struct SimClients {
    pub world: SynthWorld,
    /// Replaces every trainer response handle; used to inject bad handles.
    pub train_handle_override: Option<String>,
    calls: BTreeMap<&'static str, usize>,
}

impl SimClients {
    pub fn new(world: SynthWorld) -> Self {
        Self {
            world,
            train_handle_override: None,
            calls: BTreeMap::new(),
        }
    }

    /// Number of calls per step name.
    pub fn calls(&self) -> &BTreeMap<&'static str, usize> {
        &self.calls
    }

    pub fn total_calls(&self) -> usize {
        self.calls.values().sum()
    }

    /// The `(ts, is)` centre a checkpoint handle stands for.
    pub fn checkpoint_mean(&self, handle: &str) -> Option<(f64, f64)> {
        if handle == SIM_INIT {
            Some(self.world.concept_mean)
        } else {
            decode_point("sim", handle)
        }
    }

    fn bump(&mut self, step: &'static str) {
        *self.calls.entry(step).or_default() += 1;
    }
}

fn io_err(kind: ClientKind) -> impl Fn(String) -> ClientError {
    move |m| ClientError::new(kind, m)
}

fn write_records(path: &Path, records: &[EmbRecord], kind: ClientKind) -> Result<(), ClientError> {
    let mut buf = Vec::new();
    write_emb_jsonl(&mut buf, records).map_err(|e| ClientError::new(kind, e.to_string()))?;
    write_atomic(path, &buf).map_err(|e| ClientError::new(kind, e.to_string()))
}

impl CampaignClients for SimClients {
    fn embed_texts(&mut self, req: &EmbedTextsRequest) -> Result<EmbeddingsResponse, ClientError> {
        self.bump("embed_texts");
        if req.dim < 3 {
            return Err(ClientError::new(ClientKind::Embedder, "sim backend needs dim >= 3"));
        }
        let records: Vec<EmbRecord> = req
            .texts
            .iter()
            .map(|t| EmbRecord {
                id: t.id.clone(),
                kind: EmbeddingKind::Text,
                vector: basis(req.dim, 0),
                prompt_id: None,
                round_index: None,
                artifact_uri: None,
                text: Some(t.text.clone()),
            })
            .collect();
        write_records(&req.output_path, &records, ClientKind::Embedder)?;
        Ok(EmbeddingsResponse {
            embeddings_path: req.output_path.clone(),
            embedder_id: Some("sim".into()),
        })
    }

    fn generate(&mut self, req: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        self.bump("generate");
        let mean = self.checkpoint_mean(&req.checkpoint).ok_or_else(|| {
            ClientError::new(ClientKind::Generator, format!("unknown checkpoint {:?}", req.checkpoint))
        })?;
        let world = SynthWorld {
            concept_mean: mean,
            ..self.world
        };
        let m = req.m_per_prompt;
        let points = synth_points(&world, req.prompts.len(), m);
        let samples = points
            .into_iter()
            .enumerate()
            .map(|(k, pt)| {
                let pid = &req.prompts[k / m].id;
                GeneratedItem {
                    sample_id: format!("{pid}-r{}-s{:03}", req.round, k % m),
                    prompt_id: pid.clone(),
                    artifact_uri: Some(encode_point("sim", pt)),
                }
            })
            .collect();
        Ok(GenerateResponse { samples })
    }

    fn embed_images(&mut self, req: &EmbedImagesRequest) -> Result<EmbeddingsResponse, ClientError> {
        self.bump("embed_images");
        let err = io_err(ClientKind::Embedder);
        let records = req
            .samples
            .iter()
            .map(|s| {
                let pt = s
                    .artifact_uri
                    .as_deref()
                    .and_then(|u| decode_point("sim", u))
                    .ok_or_else(|| err(format!("sample `{}` has no sim artifact", s.sample_id)))?;
                Ok(EmbRecord {
                    id: s.sample_id.clone(),
                    kind: EmbeddingKind::Image,
                    vector: realize(req.dim, pt),
                    prompt_id: Some(s.prompt_id.clone()),
                    round_index: Some(req.round),
                    artifact_uri: s.artifact_uri.clone(),
                    text: None,
                })
            })
            .collect::<Result<Vec<_>, ClientError>>()?;
        write_records(&req.output_path, &records, ClientKind::Embedder)?;
        Ok(EmbeddingsResponse {
            embeddings_path: req.output_path.clone(),
            embedder_id: Some("sim".into()),
        })
    }

    fn train(&mut self, req: &TrainRequest) -> Result<TrainResponse, ClientError> {
        self.bump("train");
        let err = io_err(ClientKind::Trainer);
        let mean = self
            .checkpoint_mean(&req.checkpoint)
            .ok_or_else(|| err(format!("unknown checkpoint {:?}", req.checkpoint)))?;
        let file = fs::File::open(&req.pairs_path).map_err(|e| err(e.to_string()))?;
        let pairs = read_pairs_jsonl(std::io::BufReader::new(file)).map_err(|e| err(e.to_string()))?;
        let world = SynthWorld {
            concept_mean: mean,
            ..self.world
        };
        let next = synth_update_deltas(&world, pairs.iter().map(|p| (p.delta_ts, p.delta_is)));
        let checkpoint = self
            .train_handle_override
            .clone()
            .unwrap_or_else(|| encode_point("sim", next.concept_mean));
        Ok(TrainResponse { checkpoint })
    }
}

/// Writes a PROMPTS-JSONL with `n_prompts` entries and a three-member
/// reference EMB-JSONL matching the sim geometry. Returns both paths.
pub fn write_sim_fixtures(dir: &Path, n_prompts: usize, dim: usize) -> std::io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let prompts: Vec<PromptEntry> = (0..n_prompts)
        .map(|i| PromptEntry {
            prompt_id: format!("p{i:05}"),
            text: format!("a photo of [V*] number {i}"),
            source: PromptSource::Custom,
        })
        .collect();
    let prompts_path = dir.join("prompts.jsonl");
    write_atomic(&prompts_path, &crate::io::jsonl_bytes(&prompts).map_err(std::io::Error::other)?)?;
    let refs: Vec<EmbRecord> = (0..3)
        .map(|i| EmbRecord {
            id: format!("ref{i}"),
            kind: EmbeddingKind::Image,
            vector: basis(dim, 1),
            prompt_id: None,
            round_index: None,
            artifact_uri: None,
            text: None,
        })
        .collect();
    let refs_path = dir.join("refs.emb.jsonl");
    let mut buf = Vec::new();
    write_emb_jsonl(&mut buf, &refs).map_err(|e| std::io::Error::other(e.to_string()))?;
    write_atomic(&refs_path, &buf)?;
    Ok((prompts_path, refs_path))
}
