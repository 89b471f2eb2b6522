//! Image similarity (IS), text similarity (TS) and the λ-weighted score.
//!
//! `IS(x)` is the mean cosine between a generated image and every reference
//! image of the concept; `TS(x)` is the cosine between the image and its
//! prompt's text embedding; the weighted score is `λ·TS + (1−λ)·IS`.

use std::collections::HashMap;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{cosine, ConceptRefSet, Embedding, EmbeddingError, EmbeddingKind};
use crate::exec::Execution;

/// Coarse λ sweep.
pub const LAMBDA_SWEEP_COARSE: [f64; 5] = [0.0, 0.25, 0.5, 0.75, 1.0];
/// Fine λ sweep around the coarse optimum.
pub const LAMBDA_SWEEP_FINE: [f64; 3] = [0.625, 0.6875, 0.71875];

#[derive(Debug, Error, PartialEq)]
pub enum ScoringError {
    #[error("lambda {0} outside [0, 1]")]
    LambdaOutOfRange(f64),
    #[error("sample `{0}` references an unknown prompt")]
    UnknownPrompt(String),
    #[error("sample `{sample_id}`: {source}")]
    Sample {
        sample_id: String,
        source: EmbeddingError,
    },
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for ScoringError {
    fn from(e: std::io::Error) -> Self {
        ScoringError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptSource {
    Coco,
    Llm,
    Dreambench,
    #[default]
    Custom,
}

#[derive(Debug, Clone)]
pub struct PromptRecord {
    pub prompt_id: String,
    /// The exact text that was embedded (placeholder or resolved form).
    pub text: String,
    pub text_embedding: Embedding,
    pub source: PromptSource,
}

#[derive(Debug, Clone)]
pub struct GenerationSample {
    pub sample_id: String,
    pub prompt_id: String,
    pub image_embedding: Embedding,
    pub round_index: u32,
    pub artifact_uri: Option<String>,
}

/// Scores of one generated sample. The embedding itself is not retained;
/// pairing only needs identities and the two similarities.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSample {
    pub sample_id: String,
    pub prompt_id: String,
    pub round_index: u32,
    pub artifact_uri: Option<String>,
    pub ts: f64,
    pub is_: f64,
    /// `λ·ts + (1−λ)·is_`, present only when a λ was applied.
    pub weighted: Option<f64>,
    pub lambda: Option<f64>,
}

impl ScoredSample {
    /// Score-only sample, mostly useful for fixtures and the simulator.
    pub fn bare(prompt_id: &str, sample_id: &str, ts: f64, is_: f64) -> Self {
        Self {
            sample_id: sample_id.to_string(),
            prompt_id: prompt_id.to_string(),
            round_index: 0,
            artifact_uri: None,
            ts,
            is_,
            weighted: None,
            lambda: None,
        }
    }
}

/// Mean cosine between `x` and every reference member, accumulated in
/// ascending member-id order.
pub fn image_similarity(x: &Embedding, refs: &ConceptRefSet) -> Result<f64, EmbeddingError> {
    let members = refs.members();
    if members.is_empty() {
        return Err(EmbeddingError::EmptyConceptSet(refs.concept_id().to_string()));
    }
    let mut sum = 0.0;
    for m in members {
        sum += cosine(x, m)?;
    }
    Ok((sum / members.len() as f64).clamp(-1.0, 1.0))
}

pub fn text_similarity(x: &Embedding, prompt: &PromptRecord) -> Result<f64, EmbeddingError> {
    cosine(x, &prompt.text_embedding)
}

pub fn check_lambda(lambda: f64) -> Result<f64, ScoringError> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(ScoringError::LambdaOutOfRange(lambda));
    }
    Ok(lambda)
}

pub fn weighted_score(ts: f64, is_: f64, lambda: f64) -> Result<f64, ScoringError> {
    let lambda = check_lambda(lambda)?;
    Ok(lambda * ts + (1.0 - lambda) * is_)
}

pub type PromptLookup = HashMap<String, PromptRecord>;

pub fn score_sample(
    sample: &GenerationSample,
    refs: &ConceptRefSet,
    prompts: &PromptLookup,
    lambda: Option<f64>,
) -> Result<ScoredSample, ScoringError> {
    let prompt = prompts
        .get(&sample.prompt_id)
        .ok_or_else(|| ScoringError::UnknownPrompt(sample.sample_id.clone()))?;
    let wrap = |source| ScoringError::Sample {
        sample_id: sample.sample_id.clone(),
        source,
    };
    let ts = text_similarity(&sample.image_embedding, prompt).map_err(wrap)?;
    let is_ = image_similarity(&sample.image_embedding, refs).map_err(wrap)?;
    let weighted = lambda.map(|l| weighted_score(ts, is_, l)).transpose()?;
    Ok(ScoredSample {
        sample_id: sample.sample_id.clone(),
        prompt_id: sample.prompt_id.clone(),
        round_index: sample.round_index,
        artifact_uri: sample.artifact_uri.clone(),
        ts,
        is_,
        weighted,
        lambda,
    })
}

/// Scores every sample, preserving input order.
pub fn score_batch(
    samples: &[GenerationSample],
    refs: &ConceptRefSet,
    prompts: &PromptLookup,
    lambda: Option<f64>,
    exec: Execution,
) -> Result<Vec<ScoredSample>, ScoringError> {
    if let Some(l) = lambda {
        check_lambda(l)?;
    }
    exec.try_map(samples, |s| score_sample(s, refs, prompts, lambda))
}

/// One SCORES-JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreLine {
    pub sample_id: String,
    pub prompt_id: String,
    pub ts: f64,
    #[serde(rename = "is")]
    pub is_: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weighted: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact_uri: Option<String>,
}

impl From<&ScoredSample> for ScoreLine {
    fn from(s: &ScoredSample) -> Self {
        Self {
            sample_id: s.sample_id.clone(),
            prompt_id: s.prompt_id.clone(),
            ts: s.ts,
            is_: s.is_,
            weighted: s.weighted,
            lambda: s.lambda,
            artifact_uri: s.artifact_uri.clone(),
        }
    }
}

impl ScoreLine {
    pub fn into_scored(self, round_index: u32) -> ScoredSample {
        ScoredSample {
            sample_id: self.sample_id,
            prompt_id: self.prompt_id,
            round_index,
            artifact_uri: self.artifact_uri,
            ts: self.ts,
            is_: self.is_,
            weighted: self.weighted,
            lambda: self.lambda,
        }
    }

    fn validate(&self) -> Result<(), String> {
        for (name, v) in [("ts", self.ts), ("is", self.is_)] {
            if !v.is_finite() || !(-1.0..=1.0).contains(&v) {
                return Err(format!("{name} = {v} outside [-1, 1]"));
            }
        }
        Ok(())
    }
}

/// SCORES-JSONL bytes, sorted by `(prompt_id, sample_id)`.
pub fn scores_jsonl(scored: &[ScoredSample]) -> Vec<u8> {
    let mut lines: Vec<ScoreLine> = scored.iter().map(ScoreLine::from).collect();
    lines.sort_by(|a, b| (&a.prompt_id, &a.sample_id).cmp(&(&b.prompt_id, &b.sample_id)));
    crate::io::jsonl_bytes(&lines).expect("score lines serialize")
}

fn parse_score_line(line: &str, lineno: usize) -> Result<ScoreLine, ScoringError> {
    let rec: ScoreLine = serde_json::from_str(line).map_err(|e| ScoringError::Parse {
        line: lineno,
        message: e.to_string(),
    })?;
    rec.validate().map_err(|message| ScoringError::Parse {
        line: lineno,
        message,
    })?;
    Ok(rec)
}

pub fn read_scores_jsonl<R: BufRead>(reader: R) -> Result<Vec<ScoredSample>, ScoringError> {
    ScoreGroups::new(reader)
        .map(|g| g.map(|(_, samples)| samples))
        .try_fold(Vec::new(), |mut acc, g| {
            acc.extend(g?);
            Ok(acc)
        })
}

/// Streams a sorted SCORES-JSONL file one prompt group at a time, so memory
/// is bounded by the largest group. Out-of-order prompt ids are an error.
pub struct ScoreGroups<R> {
    lines: std::iter::Enumerate<std::io::Lines<R>>,
    pending: Option<ScoreLine>,
    last_prompt: Option<String>,
    done: bool,
}

impl<R: BufRead> ScoreGroups<R> {
    pub fn new(reader: R) -> Self {
        Self {
            lines: reader.lines().enumerate(),
            pending: None,
            last_prompt: None,
            done: false,
        }
    }

    fn next_line(&mut self) -> Option<Result<ScoreLine, ScoringError>> {
        for (i, line) in self.lines.by_ref() {
            let line = match line {
                Ok(l) => l,
                Err(e) => return Some(Err(e.into())),
            };
            if line.trim().is_empty() {
                continue;
            }
            return Some(parse_score_line(&line, i + 1));
        }
        None
    }
}

impl<R: BufRead> Iterator for ScoreGroups<R> {
    type Item = Result<(String, Vec<ScoredSample>), ScoringError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        let first = match self.pending.take() {
            Some(l) => l,
            None => match self.next_line()? {
                Ok(l) => l,
                Err(e) => {
                    self.done = true;
                    return Some(Err(e));
                }
            },
        };
        let prompt = first.prompt_id.clone();
        if let Some(last) = &self.last_prompt {
            if *last >= prompt {
                self.done = true;
                return Some(Err(ScoringError::Parse {
                    line: 0,
                    message: format!("scores not sorted by prompt_id: `{prompt}` after `{last}`"),
                }));
            }
        }
        let mut group = vec![first.into_scored(0)];
        loop {
            match self.next_line() {
                None => break,
                Some(Err(e)) => {
                    self.done = true;
                    return Some(Err(e));
                }
                Some(Ok(l)) if l.prompt_id == prompt => group.push(l.into_scored(0)),
                Some(Ok(l)) => {
                    self.pending = Some(l);
                    break;
                }
            }
        }
        self.last_prompt = Some(prompt.clone());
        Some(Ok((prompt, group)))
    }
}

/// Builds a prompt lookup from text-embedding records.
pub fn prompt_lookup(records: Vec<PromptRecord>) -> PromptLookup {
    records
        .into_iter()
        .map(|r| (r.prompt_id.clone(), r))
        .collect()
}

/// Builds prompt records from EMB-JSONL text lines; `text` defaults to the id.
pub fn prompts_from_emb(
    records: &[crate::embedding::EmbRecord],
) -> Result<Vec<PromptRecord>, EmbeddingError> {
    records
        .iter()
        .filter(|r| r.kind == EmbeddingKind::Text)
        .map(|r| {
            Ok(PromptRecord {
                prompt_id: r.id.clone(),
                text: r.text.clone().unwrap_or_else(|| r.id.clone()),
                text_embedding: r.to_embedding()?,
                source: PromptSource::Custom,
            })
        })
        .collect()
}

/// Builds generation samples from EMB-JSONL image lines carrying `prompt_id`.
pub fn samples_from_emb(
    records: &[crate::embedding::EmbRecord],
) -> Result<Vec<GenerationSample>, ScoringError> {
    records
        .iter()
        .filter(|r| r.kind == EmbeddingKind::Image)
        .map(|r| {
            let prompt_id = r
                .prompt_id
                .clone()
                .ok_or_else(|| ScoringError::UnknownPrompt(r.id.clone()))?;
            Ok(GenerationSample {
                sample_id: r.id.clone(),
                prompt_id,
                image_embedding: r.to_embedding().map_err(|source| ScoringError::Sample {
                    sample_id: r.id.clone(),
                    source,
                })?,
                round_index: r.round_index.unwrap_or(0),
                artifact_uri: r.artifact_uri.clone(),
            })
        })
        .collect()
}
