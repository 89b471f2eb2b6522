//! Unit-normalized CLIP-space embeddings and the cosine similarity they support.
//!
//! Vectors are normalized once at ingestion. After that, cosine similarity is
//! a plain dot product, clamped to `[-1, 1]` so downstream angle and quantile
//! code never sees drift outside the valid range.
//!
//! The interchange format is EMB-JSONL: one object per line,
//!
//! ```text
//! {"id": "img-0001", "kind": "image", "vector": [0.12, -0.03, ...]}
//! ```
//!
//! Image lines may carry extra optional keys (`prompt_id`, `round_index`,
//! `artifact_uri`, `text`) consumed by [`crate::scoring`]; readers ignore
//! keys they do not know but always reject vectors of the wrong arity.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default embedding dimension (common CLIP variants).
pub const DEFAULT_DIM: usize = 512;

/// Tolerance on `| ||v|| - 1 |` for a vector to count as unit-normalized.
pub const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Error, PartialEq)]
pub enum EmbeddingError {
    #[error("vector has zero norm or non-finite entries")]
    ZeroVector,
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("vector is not unit-normalized (norm {norm})")]
    NotNormalized { norm: f64 },
    #[error("concept reference set `{0}` has no members")]
    EmptyConceptSet(String),
    #[error("reference `{id}` has kind {kind:?}, expected image")]
    WrongKind { id: String, kind: EmbeddingKind },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EmbeddingError {
    fn from(e: std::io::Error) -> Self {
        EmbeddingError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbeddingKind {
    Image,
    Text,
}

/// Returns `vector / ||vector||₂`.
///
/// Fails with [`EmbeddingError::ZeroVector`] when the norm is zero or any
/// entry is non-finite.
pub fn normalize(vector: &[f64]) -> Result<Vec<f64>, EmbeddingError> {
    if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
        return Err(EmbeddingError::ZeroVector);
    }
    let norm = l2_norm(vector);
    if norm == 0.0 || !norm.is_finite() {
        return Err(EmbeddingError::ZeroVector);
    }
    Ok(vector.iter().map(|x| x / norm).collect())
}

fn l2_norm(v: &[f64]) -> f64 {
    // Scaled accumulation avoids overflow on large-magnitude inputs.
    let scale = v.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if scale == 0.0 {
        return 0.0;
    }
    let sum: f64 = v.iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * sum.sqrt()
}

/// A unit-normalized vector with an identity and a modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding {
    id: String,
    kind: EmbeddingKind,
    vector: Vec<f64>,
}

impl Embedding {
    /// Normalizes `raw` and wraps it.
    pub fn new(
        id: impl Into<String>,
        kind: EmbeddingKind,
        raw: &[f64],
    ) -> Result<Self, EmbeddingError> {
        Ok(Self {
            id: id.into(),
            kind,
            vector: normalize(raw)?,
        })
    }

    /// Wraps an already-normalized vector, checking the unit-norm invariant.
    pub fn from_unit(
        id: impl Into<String>,
        kind: EmbeddingKind,
        vector: Vec<f64>,
    ) -> Result<Self, EmbeddingError> {
        if vector.is_empty() || vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::ZeroVector);
        }
        let norm = l2_norm(&vector);
        if (norm - 1.0).abs() > UNIT_TOLERANCE {
            return Err(EmbeddingError::NotNormalized { norm });
        }
        Ok(Self {
            id: id.into(),
            kind,
            vector,
        })
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }

    pub fn check_dim(&self, dim: usize) -> Result<(), EmbeddingError> {
        if self.dim() != dim {
            return Err(EmbeddingError::DimensionMismatch {
                expected: dim,
                actual: self.dim(),
            });
        }
        Ok(())
    }
}

/// Cosine similarity of two unit embeddings, clamped to `[-1, 1]`.
pub fn cosine(a: &Embedding, b: &Embedding) -> Result<f64, EmbeddingError> {
    cosine_slices(a.vector(), b.vector())
}

pub(crate) fn cosine_slices(a: &[f64], b: &[f64]) -> Result<f64, EmbeddingError> {
    if a.len() != b.len() {
        return Err(EmbeddingError::DimensionMismatch {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok(dot.clamp(-1.0, 1.0))
}

/// Reference images `ℂ` of one personalized concept.
#[derive(Debug, Clone)]
pub struct ConceptRefSet {
    concept_id: String,
    members: Vec<Embedding>,
}

impl ConceptRefSet {
    /// Members are stored sorted by id so that image-similarity accumulation
    /// order does not depend on input order.
    pub fn new(
        concept_id: impl Into<String>,
        mut members: Vec<Embedding>,
    ) -> Result<Self, EmbeddingError> {
        let concept_id = concept_id.into();
        let Some(first) = members.first() else {
            return Err(EmbeddingError::EmptyConceptSet(concept_id));
        };
        let dim = first.dim();
        for m in &members {
            if m.kind() != EmbeddingKind::Image {
                return Err(EmbeddingError::WrongKind {
                    id: m.id().to_string(),
                    kind: m.kind(),
                });
            }
            m.check_dim(dim)?;
        }
        members.sort_by(|a, b| a.id().cmp(b.id()));
        Ok(Self {
            concept_id,
            members,
        })
    }

    pub fn concept_id(&self) -> &str {
        &self.concept_id
    }

    pub fn members(&self) -> &[Embedding] {
        &self.members
    }

    pub fn dim(&self) -> usize {
        self.members[0].dim()
    }
}

/// One EMB-JSONL line, including the optional keys used by sample files.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EmbRecord {
    pub id: String,
    pub kind: EmbeddingKind,
    pub vector: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

impl EmbRecord {
    pub fn from_embedding(e: &Embedding) -> Self {
        Self {
            id: e.id().to_string(),
            kind: e.kind(),
            vector: e.vector().to_vec(),
            prompt_id: None,
            round_index: None,
            artifact_uri: None,
            text: None,
        }
    }

    /// Normalizes the stored vector into an [`Embedding`].
    pub fn to_embedding(&self) -> Result<Embedding, EmbeddingError> {
        Embedding::new(self.id.clone(), self.kind, &self.vector)
    }
}

/// Reads EMB-JSONL, rejecting any line whose vector length differs from `dim`.
/// Blank lines are skipped. Line numbers in errors are 1-based.
pub fn read_emb_jsonl<R: BufRead>(reader: R, dim: usize) -> Result<Vec<EmbRecord>, EmbeddingError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbRecord = serde_json::from_str(&line).map_err(|e| EmbeddingError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        if rec.vector.len() != dim {
            return Err(EmbeddingError::Parse {
                line: i + 1,
                message: format!("vector has {} entries, expected {dim}", rec.vector.len()),
            });
        }
        if rec.vector.iter().any(|x| !x.is_finite()) {
            return Err(EmbeddingError::Parse {
                line: i + 1,
                message: "vector has non-finite entries".into(),
            });
        }
        out.push(rec);
    }
    Ok(out)
}

pub fn write_emb_jsonl<W: Write>(mut w: W, records: &[EmbRecord]) -> Result<(), EmbeddingError> {
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| EmbeddingError::Io(e.to_string()))?;
        writeln!(w, "{line}")?;
    }
    Ok(())
}
