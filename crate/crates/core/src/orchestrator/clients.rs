//! Client contract for the heavy ML steps.
//!
//! The engine never samples images, runs CLIP, or trains. It hands those
//! steps to three external clients through JSON request/response documents:
//!
//! | step           | request                                    | response                        |
//! |----------------|--------------------------------------------|---------------------------------|
//! | `embed_texts`  | [`EmbedTextsRequest`]                      | [`EmbeddingsResponse`]          |
//! | `generate`     | [`GenerateRequest`]                        | [`GenerateResponse`]            |
//! | `embed_images` | [`EmbedImagesRequest`]                     | [`EmbeddingsResponse`]          |
//! | `train`        | [`TrainRequest`]                           | [`TrainResponse`]               |
//!
//! [`CommandClients`] runs an external command per step as
//! `<command> <request.json> <response.json>`; the command must write the
//! response file and exit 0.

use std::path::{Path, PathBuf};
use std::process::Command;

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClientKind {
    Embedder,
    Generator,
    Trainer,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("{kind:?} client failed: {message}")]
pub struct ClientError {
    pub kind: ClientKind,
    pub message: String,
}

impl ClientError {
    pub fn new(kind: ClientKind, message: impl Into<String>) -> Self {
        Self {
            kind,
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextItem {
    pub id: String,
    pub text: String,
}

/// Embed prompt texts. The client writes EMB-JSONL (kind `text`, one line
/// per item, `id` echoed) to `output_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedTextsRequest {
    pub texts: Vec<TextItem>,
    pub dim: usize,
    pub output_path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingsResponse {
    pub embeddings_path: PathBuf,
    /// Identifier of the embedding model, recorded but not interpreted.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_id: Option<String>,
}

/// Generate `m_per_prompt` images for every prompt with `checkpoint`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateRequest {
    pub round: u32,
    pub checkpoint: String,
    pub prompts: Vec<TextItem>,
    pub m_per_prompt: usize,
    pub seed: u64,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratedItem {
    pub sample_id: String,
    pub prompt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_uri: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerateResponse {
    pub samples: Vec<GeneratedItem>,
}

/// Embed generated images. The client writes EMB-JSONL (kind `image`, `id`
/// = sample id) to `output_path`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedImagesRequest {
    pub round: u32,
    pub samples: Vec<GeneratedItem>,
    pub dim: usize,
    pub output_path: PathBuf,
}

/// Fine-tune `checkpoint` on a PAIRS-JSONL manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRequest {
    pub round: u32,
    pub checkpoint: String,
    pub pairs_path: PathBuf,
    pub n_pairs: usize,
    pub steps: u64,
    pub batch_size: usize,
    pub epochs_per_pair: usize,
    /// Opaque trainer parameters (β, learning rate, LoRA rank, ...).
    pub profile: serde_json::Value,
    pub output_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResponse {
    pub checkpoint: String,
}

impl TrainResponse {
    /// A usable handle is a non-empty single-line string.
    pub fn validate(&self) -> Result<(), ClientError> {
        let h = &self.checkpoint;
        if h.trim().is_empty() || h.contains(['\n', '\r']) || h.trim() != h {
            return Err(ClientError::new(
                ClientKind::Trainer,
                format!("malformed checkpoint handle {h:?}"),
            ));
        }
        Ok(())
    }
}

/// The three external services a campaign talks to.
pub trait CampaignClients {
    fn embed_texts(&mut self, req: &EmbedTextsRequest) -> Result<EmbeddingsResponse, ClientError>;
    fn generate(&mut self, req: &GenerateRequest) -> Result<GenerateResponse, ClientError>;
    fn embed_images(&mut self, req: &EmbedImagesRequest) -> Result<EmbeddingsResponse, ClientError>;
    fn train(&mut self, req: &TrainRequest) -> Result<TrainResponse, ClientError>;
}

/// Endpoints (shell commands) for the three clients.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClientEndpoints {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub trainer: Option<String>,
}

pub const ENV_EMBEDDER: &str = "PAIRFORGE_EMBEDDER";
pub const ENV_GENERATOR: &str = "PAIRFORGE_GENERATOR";
pub const ENV_TRAINER: &str = "PAIRFORGE_TRAINER";

impl ClientEndpoints {
    /// Environment variables take precedence over configured endpoints.
    pub fn with_env_overrides(mut self) -> Self {
        let get = |k| std::env::var(k).ok().filter(|v: &String| !v.trim().is_empty());
        if let Some(v) = get(ENV_EMBEDDER) {
            self.embedder = Some(v);
        }
        if let Some(v) = get(ENV_GENERATOR) {
            self.generator = Some(v);
        }
        if let Some(v) = get(ENV_TRAINER) {
            self.trainer = Some(v);
        }
        self
    }
}

/// Runs each step as an external process.
#[derive(Debug, Clone)]
pub struct CommandClients {
    endpoints: ClientEndpoints,
}

impl CommandClients {
    pub fn new(endpoints: ClientEndpoints) -> Self {
        Self { endpoints }
    }

    fn call<Req: Serialize, Resp: DeserializeOwned>(
        &self,
        kind: ClientKind,
        step: &str,
        dir: &Path,
        req: &Req,
    ) -> Result<Resp, ClientError> {
        let err = |m: String| ClientError::new(kind, m);
        let command = match kind {
            ClientKind::Embedder => &self.endpoints.embedder,
            ClientKind::Generator => &self.endpoints.generator,
            ClientKind::Trainer => &self.endpoints.trainer,
        }
        .as_ref()
        .ok_or_else(|| err("no endpoint configured".into()))?;
        std::fs::create_dir_all(dir).map_err(|e| err(e.to_string()))?;
        let req_path = dir.join(format!("{step}.request.json"));
        let resp_path = dir.join(format!("{step}.response.json"));
        let body = serde_json::to_vec_pretty(req).map_err(|e| err(e.to_string()))?;
        crate::io::write_atomic(&req_path, &body).map_err(|e| err(e.to_string()))?;
        let _ = std::fs::remove_file(&resp_path);
        let status = Command::new("sh")
            .arg("-c")
            .arg(format!("{command} \"$0\" \"$1\""))
            .arg(&req_path)
            .arg(&resp_path)
            .status()
            .map_err(|e| err(format!("spawn `{command}`: {e}")))?;
        if !status.success() {
            return Err(err(format!("`{command}` exited with {status}")));
        }
        let bytes = std::fs::read(&resp_path).map_err(|e| err(format!("read response: {e}")))?;
        serde_json::from_slice(&bytes).map_err(|e| err(format!("malformed response: {e}")))
    }
}

fn parent_or_dot(p: &Path) -> &Path {
    p.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."))
}

impl CampaignClients for CommandClients {
    fn embed_texts(&mut self, req: &EmbedTextsRequest) -> Result<EmbeddingsResponse, ClientError> {
        self.call(ClientKind::Embedder, "embed_texts", parent_or_dot(&req.output_path), req)
    }

    fn generate(&mut self, req: &GenerateRequest) -> Result<GenerateResponse, ClientError> {
        self.call(ClientKind::Generator, "generate", &req.output_dir, req)
    }

    fn embed_images(&mut self, req: &EmbedImagesRequest) -> Result<EmbeddingsResponse, ClientError> {
        self.call(ClientKind::Embedder, "embed_images", parent_or_dot(&req.output_path), req)
    }

    fn train(&mut self, req: &TrainRequest) -> Result<TrainResponse, ClientError> {
        self.call(ClientKind::Trainer, "train", &req.output_dir, req)
    }
}
