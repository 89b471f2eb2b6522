//! Evaluation: nested CLIP-I / CLIP-T means, cross-concept aggregation,
//! trajectories, Pareto frontiers and vote tabulation.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{ConceptRefSet, EmbeddingError};
use crate::scoring::{image_similarity, text_similarity, GenerationSample, PromptLookup, ScoredSample};

pub const DEFAULT_IMAGES_PER_PROMPT: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("prompt `{prompt_id}` has {actual} images, expected {expected}")]
    PromptGroupSizeMismatch {
        prompt_id: String,
        expected: usize,
        actual: usize,
    },
    #[error("nothing to evaluate")]
    EmptyInput,
    #[error("sample `{0}` references an unknown prompt")]
    UnknownPrompt(String),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EvalError {
    fn from(e: std::io::Error) -> Self {
        EvalError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PromptSubset {
    Live,
    #[default]
    Object,
}

#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub n_images_per_prompt: usize,
    pub allow_partial: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            n_images_per_prompt: DEFAULT_IMAGES_PER_PROMPT,
            allow_partial: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConceptMeans {
    pub clip_i: f64,
    pub clip_t: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overall {
    pub mean_i: f64,
    pub sigma_i: f64,
    pub mean_t: f64,
    pub sigma_t: f64,
}

/// EVAL-JSON document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_concept: BTreeMap<String, ConceptMeans>,
    pub overall: Overall,
    pub prompt_subset: PromptSubset,
    pub n_images_per_prompt: usize,
}

impl EvalReport {
    pub fn new(
        per_concept: BTreeMap<String, ConceptMeans>,
        prompt_subset: PromptSubset,
        n_images_per_prompt: usize,
    ) -> Result<Self, EvalError> {
        let overall = aggregate(&per_concept.values().copied().collect::<Vec<_>>())?;
        Ok(Self {
            per_concept,
            overall,
            prompt_subset,
            n_images_per_prompt,
        })
    }
}

/// Per-image → per-prompt → per-concept means of `(prompt_id, clip_i, clip_t)`
/// triples. Prompts are visited in id order, images in input order.
pub fn nested_means<'a>(
    items: impl IntoIterator<Item = (&'a str, f64, f64)>,
    opts: EvalOptions,
) -> Result<ConceptMeans, EvalError> {
    let mut groups: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (pid, i, t) in items {
        groups.entry(pid).or_default().push((i, t));
    }
    if groups.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (mut si, mut st) = (0.0, 0.0);
    for (pid, g) in &groups {
        if !opts.allow_partial && g.len() != opts.n_images_per_prompt {
            return Err(EvalError::PromptGroupSizeMismatch {
                prompt_id: pid.to_string(),
                expected: opts.n_images_per_prompt,
                actual: g.len(),
            });
        }
        let n = g.len() as f64;
        si += g.iter().map(|p| p.0).sum::<f64>() / n;
        st += g.iter().map(|p| p.1).sum::<f64>() / n;
    }
    let n = groups.len() as f64;
    Ok(ConceptMeans {
        clip_i: si / n,
        clip_t: st / n,
    })
}

/// Scores `generated` against `refs` and the prompt texts, then nests the means.
pub fn eval_concept(
    generated: &[GenerationSample],
    refs: &ConceptRefSet,
    prompts: &PromptLookup,
    opts: EvalOptions,
) -> Result<ConceptMeans, EvalError> {
    let scored = generated
        .iter()
        .map(|s| {
            let p = prompts
                .get(&s.prompt_id)
                .ok_or_else(|| EvalError::UnknownPrompt(s.sample_id.clone()))?;
            let i = image_similarity(&s.image_embedding, refs)?;
            let t = text_similarity(&s.image_embedding, p)?;
            Ok((s.prompt_id.as_str(), i, t))
        })
        .collect::<Result<Vec<_>, EvalError>>()?;
    nested_means(scored, opts)
}

/// Same nesting over already-scored samples (`is` as CLIP-I, `ts` as CLIP-T).
pub fn eval_scores(scored: &[ScoredSample], opts: EvalOptions) -> Result<ConceptMeans, EvalError> {
    nested_means(scored.iter().map(|s| (s.prompt_id.as_str(), s.is_, s.ts)), opts)
}

fn mean_sigma(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Unweighted mean and population σ over concepts.
pub fn aggregate(per_concept: &[ConceptMeans]) -> Result<Overall, EvalError> {
    if per_concept.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let (mean_i, sigma_i) = mean_sigma(&per_concept.iter().map(|c| c.clip_i).collect::<Vec<_>>());
    let (mean_t, sigma_t) = mean_sigma(&per_concept.iter().map(|c| c.clip_t).collect::<Vec<_>>());
    Ok(Overall {
        mean_i,
        sigma_i,
        mean_t,
        sigma_t,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub label: String,
    pub ts: f64,
    #[serde(rename = "is")]
    pub is_: f64,
}

/// Points not dominated by any other, sorted by `ts` then `is` ascending.
/// Sweeps from the largest `ts` down, keeping points whose `is` beats every
/// point with strictly larger `ts` and ties with none of equal `ts`.
pub fn pareto_frontier(points: &[TrajectoryPoint]) -> Vec<TrajectoryPoint> {
    let mut sorted: Vec<&TrajectoryPoint> = points.iter().collect();
    sorted.sort_by(|a, b| b.ts.total_cmp(&a.ts).then(b.is_.total_cmp(&a.is_)));
    let mut best_is = f64::NEG_INFINITY;
    let mut keep = Vec::new();
    let mut i = 0;
    while i < sorted.len() {
        let ts = sorted[i].ts;
        let top = sorted[i].is_;
        let mut j = i;
        while j < sorted.len() && sorted[j].ts == ts {
            if sorted[j].is_ == top && top > best_is {
                keep.push(sorted[j].clone());
            }
            j += 1;
        }
        best_is = best_is.max(top);
        i = j;
    }
    keep.sort_by(|a, b| a.ts.total_cmp(&b.ts).then(a.is_.total_cmp(&b.is_)));
    keep
}

/// TRAJECTORY-CSV: header `label,ts,is`, one row per point.
pub fn trajectory_csv(points: &[TrajectoryPoint]) -> String {
    let mut s = String::from("label,ts,is\n");
    for p in points {
        writeln!(s, "{},{},{}", p.label, p.ts, p.is_).expect("string write");
    }
    s
}

pub fn read_trajectory_csv<R: BufRead>(reader: R) -> Result<Vec<TrajectoryPoint>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let parse_err = |m: &str| EvalError::Parse {
            line: i + 1,
            message: m.to_string(),
        };
        if i == 0 {
            if line.trim() != "label,ts,is" {
                return Err(parse_err("expected header `label,ts,is`"));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let mut cols = line.rsplitn(3, ',');
        let (Some(is_), Some(ts), Some(label)) = (cols.next(), cols.next(), cols.next()) else {
            return Err(parse_err("expected three columns"));
        };
        let num = |s: &str| -> Result<f64, EvalError> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| parse_err(&format!("not a finite number: {s:?}")))
        };
        out.push(TrajectoryPoint {
            label: label.to_string(),
            ts: num(ts)?,
            is_: num(is_)?,
        });
    }
    Ok(out)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Plain SVG scatter (TS on x, IS on y), one `<circle>` per point, connected
/// in input order by a polyline.
pub fn trajectory_svg(points: &[TrajectoryPoint]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const PAD: f64 = 40.0;
    let range = |f: fn(&TrajectoryPoint) -> f64| {
        let lo = points.iter().map(f).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(f).fold(f64::NEG_INFINITY, f64::max);
        if !lo.is_finite() {
            (0.0, 1.0)
        } else if hi - lo < 1e-12 {
            (lo - 0.5, hi + 0.5)
        } else {
            (lo, hi)
        }
    };
    let (x0, x1) = range(|p| p.ts);
    let (y0, y1) = range(|p| p.is_);
    let px = |x: f64| PAD + (x - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let py = |y: f64| H - PAD - (y - y0) / (y1 - y0) * (H - 2.0 * PAD);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    );
    writeln!(
        s,
        "<line x1=\"{PAD}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n<line x1=\"{PAD}\" y1=\"{PAD}\" x2=\"{PAD}\" y2=\"{b}\" stroke=\"black\"/>",
        b = H - PAD,
        r = W - PAD
    )
    .unwrap();
    writeln!(s, "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">TS</text>", W / 2.0, H - 8.0).unwrap();
    writeln!(s, "<text x=\"12\" y=\"{}\" text-anchor=\"middle\">IS</text>", H / 2.0).unwrap();
    if points.len() > 1 {
        let pts: Vec<String> = points.iter().map(|p| format!("{:.2},{:.2}", px(p.ts), py(p.is_))).collect();
        writeln!(s, "<polyline points=\"{}\" fill=\"none\" stroke=\"gray\"/>", pts.join(" ")).unwrap();
    }
    for p in points {
        writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"steelblue\"><title>{}</title></circle>",
            px(p.ts),
            py(p.is_),
            xml_escape(&p.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vote {
    Win,
    Lose,
    Nodiff,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRow {
    pub criterion: String,
    pub votes: usize,
    pub win: f64,
    pub lose: f64,
    pub no_diff: f64,
}

/// Reads `assessor,criterion,vote` rows (header required; vote is one of
/// `win`, `lose`, `nodiff`).
pub fn read_votes_csv<R: BufRead>(reader: R) -> Result<Vec<(String, String, Vote)>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let err = |m: String| EvalError::Parse { line: i + 1, message: m };
        if i == 0 {
            if line.trim() != "assessor,criterion,vote" {
                return Err(err("expected header `assessor,criterion,vote`".into()));
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split(',').map(str::trim).collect();
        let [assessor, criterion, vote] = cols[..] else {
            return Err(err(format!("expected 3 columns, got {}", cols.len())));
        };
        let vote = match vote.to_ascii_lowercase().as_str() {
            "win" => Vote::Win,
            "lose" => Vote::Lose,
            "nodiff" | "no_diff" | "no diff" => Vote::Nodiff,
            other => return Err(err(format!("unknown vote {other:?}"))),
        };
        out.push((assessor.to_string(), criterion.to_string(), vote));
    }
    Ok(out)
}

fn vote_row(criterion: &str, votes: &[Vote]) -> VoteRow {
    let n = votes.len();
    let pct = |v: Vote| (votes.iter().filter(|&&x| x == v).count() * 100) as f64 / n as f64;
    VoteRow {
        criterion: criterion.to_string(),
        votes: n,
        win: pct(Vote::Win),
        lose: pct(Vote::Lose),
        no_diff: pct(Vote::Nodiff),
    }
}

/// Percentages over all votes (not per assessor): one row per criterion in
/// name order, then `All`.
pub fn tabulate_votes(votes: &[(String, String, Vote)]) -> Result<Vec<VoteRow>, EvalError> {
    if votes.is_empty() {
        return Err(EvalError::EmptyInput);
    }
    let mut by: BTreeMap<&str, Vec<Vote>> = BTreeMap::new();
    for (_, c, v) in votes {
        by.entry(c.as_str()).or_default().push(*v);
    }
    let mut rows: Vec<VoteRow> = by.iter().map(|(c, v)| vote_row(c, v)).collect();
    let all: Vec<Vote> = votes.iter().map(|v| v.2).collect();
    rows.push(vote_row("All", &all));
    Ok(rows)
}
