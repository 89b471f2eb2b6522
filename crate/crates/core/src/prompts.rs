//! Per-concept prompt corpus: COCO caption filtering, placeholder
//! substitution and merging with a shared pool of LLM-written prompts.
//!
//! A caption is usable for a concept when it mentions the category word
//! exactly once, as a whole token, and never in plural form. The single
//! mention is then replaced by the placeholder `[V*]`.

use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::SeededRng;
use crate::scoring::PromptSource;

pub const PLACEHOLDER: &str = "[V*]";
pub const DEFAULT_N_COCO: usize = 3000;
pub const DEFAULT_N_LLM: usize = 1000;

const DEFAULT_CONCEPT_MAP: &str = include_str!("../data/concept_map.json");

#[derive(Debug, Error, PartialEq)]
pub enum PromptError {
    #[error("caption `{0}` does not contain exactly one occurrence of the category word")]
    NotSingleOccurrence(String),
    #[error("only {available} unique accepted captions, {requested} requested")]
    InsufficientCaptions { available: usize, requested: usize },
    #[error("only {available} unique LLM prompts, {requested} requested")]
    InsufficientLlmPrompts { available: usize, requested: usize },
    #[error("LLM prompt {0} must contain exactly one [V*]")]
    InvalidLlmPrompt(usize),
    #[error("concept class `{0}` has no entry in the concept map")]
    UnknownConcept(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PromptError {
    fn from(e: std::io::Error) -> Self {
        PromptError::Io(e.to_string())
    }
}

/// Where a concept class looks for captions in COCO.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptEntry {
    pub supercategory: String,
    /// COCO category, or `*` for any category in the supercategory.
    pub category: String,
    /// Noun matched in captions; defaults to the concept class itself.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub word: Option<String>,
    /// Irregular plural forms in addition to `+s` / `+es`.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plurals: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConceptCategoryMap {
    pub entries: BTreeMap<String, ConceptEntry>,
}

fn norm_category(s: &str) -> String {
    s.trim().to_lowercase().replace('_', " ")
}

impl ConceptCategoryMap {
    /// The built-in DreamBench class → COCO category table.
    pub fn builtin() -> Self {
        serde_json::from_str(DEFAULT_CONCEPT_MAP).expect("built-in concept map parses")
    }

    pub fn from_json(s: &str) -> Result<Self, PromptError> {
        serde_json::from_str(s).map_err(|e| PromptError::Parse {
            line: e.line(),
            message: e.to_string(),
        })
    }

    pub fn entry(&self, concept_class: &str) -> Result<&ConceptEntry, PromptError> {
        self.entries
            .get(concept_class)
            .ok_or_else(|| PromptError::UnknownConcept(concept_class.to_string()))
    }

    pub fn category_word<'a>(&'a self, concept_class: &'a str) -> Result<&'a str, PromptError> {
        let e = self.entry(concept_class)?;
        Ok(e.word.as_deref().unwrap_or(concept_class))
    }

    pub fn matches(&self, concept_class: &str, supercategory: &str, category: &str) -> Result<bool, PromptError> {
        let e = self.entry(concept_class)?;
        if norm_category(&e.supercategory) != norm_category(supercategory) {
            return Ok(false);
        }
        Ok(e.category == "*" || norm_category(&e.category) == norm_category(category))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionCandidate {
    pub caption: String,
    /// Lowercase class noun; may span several tokens (`teddy bear`).
    pub category_word: String,
    pub source_id: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub plural_forms: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    MultipleOccurrences,
    PluralForm,
    NoOccurrence,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CaptionVerdict {
    Accept,
    Reject(RejectReason),
}

/// Lowercased word tokens with their byte spans in the original text.
/// Anything that is not alphanumeric delimits tokens.
fn tokens(text: &str) -> Vec<(usize, usize, String)> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, ch) in text.char_indices() {
        match (ch.is_alphanumeric(), start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i, text[s..i].to_lowercase()));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push((s, text.len(), text[s..].to_lowercase()));
    }
    out
}

fn word_tokens(word: &str) -> Vec<String> {
    tokens(word).into_iter().map(|(_, _, t)| t).collect()
}

/// Byte spans of every whole-token occurrence of `needle` in `hay`.
fn occurrences(hay: &[(usize, usize, String)], needle: &[String]) -> Vec<(usize, usize)> {
    if needle.is_empty() || hay.len() < needle.len() {
        return Vec::new();
    }
    hay.windows(needle.len())
        .filter(|w| w.iter().zip(needle).all(|(t, n)| t.2 == *n))
        .map(|w| (w[0].0, w[w.len() - 1].1))
        .collect()
}

fn plural_forms(word: &[String], extra: &[String]) -> Vec<Vec<String>> {
    let mut forms = Vec::new();
    if let Some((last, head)) = word.split_last() {
        for suffix in ["s", "es"] {
            let mut f = head.to_vec();
            f.push(format!("{last}{suffix}"));
            forms.push(f);
        }
    }
    forms.extend(extra.iter().map(|e| word_tokens(e)));
    forms
}

pub fn filter_caption(c: &CaptionCandidate) -> CaptionVerdict {
    let hay = tokens(&c.caption);
    let word = word_tokens(&c.category_word);
    let plurals: usize = plural_forms(&word, &c.plural_forms)
        .iter()
        .map(|f| occurrences(&hay, f).len())
        .sum();
    if plurals > 0 {
        return CaptionVerdict::Reject(RejectReason::PluralForm);
    }
    match occurrences(&hay, &word).len() {
        0 => CaptionVerdict::Reject(RejectReason::NoOccurrence),
        1 => CaptionVerdict::Accept,
        _ => CaptionVerdict::Reject(RejectReason::MultipleOccurrences),
    }
}

/// Replaces the single occurrence of `category_word` with `[V*]`.
pub fn substitute_placeholder(caption: &str, category_word: &str) -> Result<String, PromptError> {
    let hay = tokens(caption);
    let occ = occurrences(&hay, &word_tokens(category_word));
    if occ.len() != 1 || caption.contains(PLACEHOLDER) {
        return Err(PromptError::NotSingleOccurrence(caption.to_string()));
    }
    let (s, e) = occ[0];
    Ok(format!("{}{PLACEHOLDER}{}", &caption[..s], &caption[e..]))
}

/// Case- and whitespace-insensitive identity used for deduplication.
pub fn dedup_key(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// One PROMPTS-JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptEntry {
    pub prompt_id: String,
    pub text: String,
    pub source: PromptSource,
}

#[derive(Debug, Clone, Copy)]
pub struct PromptSetSpec {
    pub n_coco: usize,
    pub n_llm: usize,
    pub seed: u64,
}

impl Default for PromptSetSpec {
    fn default() -> Self {
        Self {
            n_coco: DEFAULT_N_COCO,
            n_llm: DEFAULT_N_LLM,
            seed: 0,
        }
    }
}

/// Filters, substitutes and samples `n_coco` caption prompts, then adds
/// `n_llm` LLM prompts not already present. Output: COCO prompts first, in
/// corpus order, then LLM prompts in list order; ids `p00000`, `p00001`, ...
pub fn build_prompt_set(
    captions: &[CaptionCandidate],
    llm_prompts: &[String],
    spec: PromptSetSpec,
) -> Result<Vec<PromptEntry>, PromptError> {
    for (i, p) in llm_prompts.iter().enumerate() {
        if p.matches(PLACEHOLDER).count() != 1 {
            return Err(PromptError::InvalidLlmPrompt(i));
        }
    }

    let mut seen = HashSet::new();
    let mut coco = Vec::new();
    for c in captions {
        if filter_caption(c) != CaptionVerdict::Accept {
            continue;
        }
        let text = substitute_placeholder(&c.caption, &c.category_word)?;
        if seen.insert(dedup_key(&text)) {
            coco.push(text);
        }
    }
    let coco = sample_in_order(coco, spec.n_coco, SeededRng::derive(spec.seed, 1)).map_err(
        |available| PromptError::InsufficientCaptions {
            available,
            requested: spec.n_coco,
        },
    )?;

    let mut seen: HashSet<String> = coco.iter().map(|t| dedup_key(t)).collect();
    let llm: Vec<String> = llm_prompts
        .iter()
        .filter(|p| seen.insert(dedup_key(p)))
        .map(|p| p.trim().to_string())
        .collect();
    let llm = sample_in_order(llm, spec.n_llm, SeededRng::derive(spec.seed, 2)).map_err(
        |available| PromptError::InsufficientLlmPrompts {
            available,
            requested: spec.n_llm,
        },
    )?;

    Ok(coco
        .into_iter()
        .map(|t| (t, PromptSource::Coco))
        .chain(llm.into_iter().map(|t| (t, PromptSource::Llm)))
        .enumerate()
        .map(|(i, (text, source))| PromptEntry {
            prompt_id: format!("p{i:05}"),
            text,
            source,
        })
        .collect())
}

/// Uniform sample of `k` items, kept in their original relative order.
/// `Err(available)` when there are fewer than `k`.
fn sample_in_order(items: Vec<String>, k: usize, mut rng: SeededRng) -> Result<Vec<String>, usize> {
    if items.len() < k {
        return Err(items.len());
    }
    let mut idx = rng.sample_indices(items.len(), k);
    idx.sort_unstable();
    let keep: HashSet<usize> = idx.into_iter().collect();
    Ok(items
        .into_iter()
        .enumerate()
        .filter_map(|(i, t)| keep.contains(&i).then_some(t))
        .collect())
}

/// One line of the COCO caption input file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCaption {
    pub source_id: String,
    pub caption: String,
    pub supercategory: String,
    pub category: String,
}

pub fn read_coco_jsonl<R: BufRead>(reader: R) -> Result<Vec<CocoCaption>, PromptError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PromptError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Candidates for `concept_class`: captions from its mapped COCO category.
pub fn captions_for_concept(
    coco: &[CocoCaption],
    map: &ConceptCategoryMap,
    concept_class: &str,
) -> Result<Vec<CaptionCandidate>, PromptError> {
    let word = map.category_word(concept_class)?.to_lowercase();
    let plurals = map.entry(concept_class)?.plurals.clone();
    let mut out = Vec::new();
    for c in coco {
        if map.matches(concept_class, &c.supercategory, &c.category)? {
            out.push(CaptionCandidate {
                caption: c.caption.clone(),
                category_word: word.clone(),
                source_id: c.source_id.clone(),
                plural_forms: plurals.clone(),
            });
        }
    }
    Ok(out)
}

/// One prompt per non-empty line.
pub fn read_llm_prompts<R: BufRead>(reader: R) -> Result<Vec<String>, PromptError> {
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(line.trim().to_string());
        }
    }
    Ok(out)
}
