//! Within-prompt preference-pair mining.
//!
//! Every prompt group of `M` scored samples yields `M·(M−1)/2` unordered
//! candidates. A selection rule then orients and filters them:
//!
//! * **threshold**: orient by the λ-weighted score and keep pairs whose score
//!   gap is strictly greater than `τ`;
//! * **cone**: keep the orientation whose improvement direction
//!   `atan2(ΔIS, ΔTS)` lies strictly inside `(C1, C2)` degrees;
//! * **chain**: threshold first, then the cone test on the oriented pair.
//!
//! With `τ = 0` the threshold rule is the 180°-wide cone centred on
//! `atan2(1−λ, λ)`; see [`Cone::for_threshold`].
//!
//! Pairs whose two samples have identical scores (ΔTS = ΔIS = 0) carry no
//! direction; they are dropped and counted in [`Diagnostics`].

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::io::BufRead;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::Execution;
use crate::rng::SeededRng;
use crate::scoring::{check_lambda, ScoredSample, ScoringError};

/// Width of the diagnostics angle histogram bins.
pub const HISTOGRAM_BIN_DEG: f64 = 5.0;
const HISTOGRAM_BINS: usize = 72;

#[derive(Debug, Error, PartialEq)]
pub enum PairingError {
    #[error("group `{expected}` contains sample `{sample_id}` from prompt `{found}`")]
    MixedPromptGroup {
        expected: String,
        found: String,
        sample_id: String,
    },
    #[error("sample id `{0}` appears twice in one prompt group")]
    DuplicateSample(String),
    #[error("pair ({0}, {1}) has zero score deltas")]
    DegeneratePair(String, String),
    #[error("invalid cone ({c1}, {c2}): need -180 <= c1 < c2 <= 180 and width <= 180")]
    InvalidCone { c1: f64, c2: f64 },
    #[error("tau {0} must be finite and >= 0")]
    InvalidTau(f64),
    #[error("retention needs a non-empty set of finite gaps")]
    EmptyPairSet,
    #[error("retention fraction {0} outside (0, 1]")]
    InvalidFraction(f64),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for PairingError {
    fn from(e: std::io::Error) -> Self {
        PairingError::Io(e.to_string())
    }
}

/// Improvement direction of an oriented pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry {
    pub delta_ts: f64,
    pub delta_is: f64,
    /// `atan2(ΔIS, ΔTS)` in degrees, in `(−180, 180]`.
    pub angle_deg: f64,
}

pub fn angle_deg(delta_ts: f64, delta_is: f64) -> f64 {
    let a = delta_is.atan2(delta_ts).to_degrees();
    if a <= -180.0 {
        180.0
    } else {
        a
    }
}

/// Geometry for the orientation `winner = a`, `loser = b`.
pub fn pair_geometry(a: &ScoredSample, b: &ScoredSample) -> Result<PairGeometry, PairingError> {
    if a.prompt_id != b.prompt_id {
        return Err(PairingError::MixedPromptGroup {
            expected: a.prompt_id.clone(),
            found: b.prompt_id.clone(),
            sample_id: b.sample_id.clone(),
        });
    }
    let delta_ts = a.ts - b.ts;
    let delta_is = a.is_ - b.is_;
    if delta_ts == 0.0 && delta_is == 0.0 {
        return Err(PairingError::DegeneratePair(
            a.sample_id.clone(),
            b.sample_id.clone(),
        ));
    }
    Ok(PairGeometry {
        delta_ts,
        delta_is,
        angle_deg: angle_deg(delta_ts, delta_is),
    })
}

/// Open angular interval `(c1, c2)` in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Cone {
    pub c1_deg: f64,
    pub c2_deg: f64,
}

impl Cone {
    /// Prompt-adherence leaning preset (`-TS`).
    pub const TS: Cone = Cone { c1_deg: -20.0, c2_deg: 70.0 };
    /// Concept-fidelity leaning preset (`-IS`).
    pub const IS: Cone = Cone { c1_deg: 0.0, c2_deg: 90.0 };
    /// Balanced preset (`-MIX`).
    pub const MIX: Cone = Cone { c1_deg: -10.0, c2_deg: 80.0 };

    pub fn new(c1_deg: f64, c2_deg: f64) -> Result<Self, PairingError> {
        let ok = c1_deg.is_finite()
            && c2_deg.is_finite()
            && -180.0 <= c1_deg
            && c1_deg < c2_deg
            && c2_deg <= 180.0
            && c2_deg - c1_deg <= 180.0;
        if !ok {
            return Err(PairingError::InvalidCone {
                c1: c1_deg,
                c2: c2_deg,
            });
        }
        Ok(Self { c1_deg, c2_deg })
    }

    pub fn preset(name: &str) -> Option<Cone> {
        match name.trim_start_matches('-').to_ascii_uppercase().as_str() {
            "TS" => Some(Cone::TS),
            "IS" => Some(Cone::IS),
            "MIX" => Some(Cone::MIX),
            _ => None,
        }
    }

    /// The 180° cone equivalent to threshold selection with `τ = 0`:
    /// `λ·ΔTS + (1−λ)·ΔIS > 0` is the open half-plane around the direction
    /// `atan2(1−λ, λ)`.
    pub fn for_threshold(lambda: f64) -> Result<Self, PairingError> {
        let lambda = check_lambda(lambda)?;
        let center = (1.0 - lambda).atan2(lambda).to_degrees();
        Cone::new(center - 90.0, center + 90.0)
    }

    pub fn contains(&self, angle_deg: f64) -> bool {
        self.c1_deg < angle_deg && angle_deg < self.c2_deg
    }

    pub fn width(&self) -> f64 {
        self.c2_deg - self.c1_deg
    }
}

/// How candidates are oriented and filtered.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum SelectionRule {
    Threshold {
        lambda: f64,
        tau: f64,
    },
    Cone {
        c1_deg: f64,
        c2_deg: f64,
    },
    /// Threshold followed by a cone test. An extension: the two filters are
    /// composed, which the base rules do not define.
    Chain {
        lambda: f64,
        tau: f64,
        c1_deg: f64,
        c2_deg: f64,
    },
}

impl SelectionRule {
    pub fn cone(cone: Cone) -> Self {
        SelectionRule::Cone {
            c1_deg: cone.c1_deg,
            c2_deg: cone.c2_deg,
        }
    }

    pub fn validate(&self) -> Result<(), PairingError> {
        match *self {
            SelectionRule::Threshold { lambda, tau } => {
                check_lambda(lambda)?;
                check_tau(tau)
            }
            SelectionRule::Cone { c1_deg, c2_deg } => Cone::new(c1_deg, c2_deg).map(|_| ()),
            SelectionRule::Chain {
                lambda,
                tau,
                c1_deg,
                c2_deg,
            } => {
                check_lambda(lambda)?;
                check_tau(tau)?;
                Cone::new(c1_deg, c2_deg).map(|_| ())
            }
        }
    }
}

fn check_tau(tau: f64) -> Result<(), PairingError> {
    if !tau.is_finite() || tau < 0.0 {
        return Err(PairingError::InvalidTau(tau));
    }
    Ok(())
}

/// A selection rule plus optional subsampling budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectionPolicy {
    #[serde(flatten)]
    pub rule: SelectionRule,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub budget: Option<usize>,
    #[serde(default)]
    pub seed: u64,
}

impl SelectionPolicy {
    pub fn new(rule: SelectionRule) -> Self {
        Self {
            rule,
            budget: None,
            seed: 0,
        }
    }

    pub fn with_budget(mut self, budget: Option<usize>, seed: u64) -> Self {
        self.budget = budget;
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<(), PairingError> {
        self.rule.validate()
    }
}

/// An oriented (winner, loser) pair from one prompt group.
#[derive(Debug, Clone, PartialEq)]
pub struct PreferencePair {
    pub prompt_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub winner_uri: Option<String>,
    pub loser_uri: Option<String>,
    pub delta_ts: f64,
    pub delta_is: f64,
    pub angle_deg: f64,
    /// `𝒮(w) − 𝒮(l)` under the rule's λ, for threshold-based rules.
    pub score_gap: Option<f64>,
}

impl PreferencePair {
    fn new(w: &ScoredSample, l: &ScoredSample, g: PairGeometry, score_gap: Option<f64>) -> Self {
        Self {
            prompt_id: w.prompt_id.clone(),
            winner_id: w.sample_id.clone(),
            loser_id: l.sample_id.clone(),
            winner_uri: w.artifact_uri.clone(),
            loser_uri: l.artifact_uri.clone(),
            delta_ts: g.delta_ts,
            delta_is: g.delta_is,
            angle_deg: g.angle_deg,
            score_gap,
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.prompt_id, &self.winner_id, &self.loser_id)
    }
}

fn pair_order(a: &PreferencePair, b: &PreferencePair) -> Ordering {
    a.key().cmp(&b.key())
}

/// Samples of one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptGroup {
    pub prompt_id: String,
    pub samples: Vec<ScoredSample>,
}

/// Groups samples by prompt id, ordered by prompt id then sample id.
pub fn group_by_prompt(samples: Vec<ScoredSample>) -> Vec<PromptGroup> {
    let mut map: BTreeMap<String, Vec<ScoredSample>> = BTreeMap::new();
    for s in samples {
        map.entry(s.prompt_id.clone()).or_default().push(s);
    }
    map.into_iter()
        .map(|(prompt_id, mut samples)| {
            samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
            PromptGroup { prompt_id, samples }
        })
        .collect()
}

/// Index pairs `(i, j)` into `group` with `id_i < id_j`, sorted by id pair.
fn candidate_indices(group: &[ScoredSample]) -> Result<Vec<(usize, usize)>, PairingError> {
    let Some(first) = group.first() else {
        return Ok(Vec::new());
    };
    for s in group {
        if s.prompt_id != first.prompt_id {
            return Err(PairingError::MixedPromptGroup {
                expected: first.prompt_id.clone(),
                found: s.prompt_id.clone(),
                sample_id: s.sample_id.clone(),
            });
        }
    }
    let mut order: Vec<usize> = (0..group.len()).collect();
    order.sort_by(|&a, &b| group[a].sample_id.cmp(&group[b].sample_id));
    if let Some(w) = order
        .windows(2)
        .find(|w| group[w[0]].sample_id == group[w[1]].sample_id)
    {
        return Err(PairingError::DuplicateSample(group[w[0]].sample_id.clone()));
    }
    let m = order.len();
    let mut out = Vec::with_capacity(m * m.saturating_sub(1) / 2);
    for a in 0..m {
        for b in a + 1..m {
            out.push((order[a], order[b]));
        }
    }
    Ok(out)
}

/// All unordered within-prompt pairs as `(smaller_id, larger_id)`.
pub fn enumerate_candidates(group: &[ScoredSample]) -> Result<Vec<(&str, &str)>, PairingError> {
    Ok(candidate_indices(group)?
        .into_iter()
        .map(|(a, b)| (group[a].sample_id.as_str(), group[b].sample_id.as_str()))
        .collect())
}

/// Selection counters. The histogram covers kept pairs only, in 5° bins
/// `(lo, lo + 5]` starting at −180°.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    pub candidates: usize,
    pub kept: usize,
    pub dropped_degenerate: usize,
    /// Pairs removed by the budget subsample (counted in `kept` before).
    #[serde(default)]
    pub dropped_budget: usize,
    pub angle_histogram: AngleHistogram,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleHistogram {
    pub lower_edge_deg: f64,
    pub bin_width_deg: f64,
    pub counts: Vec<usize>,
}

impl Default for AngleHistogram {
    fn default() -> Self {
        Self {
            lower_edge_deg: -180.0,
            bin_width_deg: HISTOGRAM_BIN_DEG,
            counts: vec![0; HISTOGRAM_BINS],
        }
    }
}

impl AngleHistogram {
    pub fn bin_of(angle_deg: f64) -> usize {
        let idx = ((angle_deg + 180.0) / HISTOGRAM_BIN_DEG).ceil() as isize - 1;
        idx.clamp(0, HISTOGRAM_BINS as isize - 1) as usize
    }

    pub fn add(&mut self, angle_deg: f64) {
        self.counts[Self::bin_of(angle_deg)] += 1;
    }

    fn merge(&mut self, other: &AngleHistogram) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

impl Diagnostics {
    pub fn merge(&mut self, other: &Diagnostics) {
        self.candidates += other.candidates;
        self.kept += other.kept;
        self.dropped_degenerate += other.dropped_degenerate;
        self.dropped_budget += other.dropped_budget;
        self.angle_histogram.merge(&other.angle_histogram);
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SelectionOutcome {
    pub pairs: Vec<PreferencePair>,
    pub diagnostics: Diagnostics,
}

impl SelectionOutcome {
    fn merge(&mut self, other: SelectionOutcome) {
        self.pairs.extend(other.pairs);
        self.diagnostics.merge(&other.diagnostics);
    }
}

/// Oriented by weighted score: `(winner, loser, gap)` with `gap >= 0`.
fn orient_by_score<'a>(
    a: &'a ScoredSample,
    b: &'a ScoredSample,
    lambda: f64,
) -> (&'a ScoredSample, &'a ScoredSample, f64) {
    let sa = lambda * a.ts + (1.0 - lambda) * a.is_;
    let sb = lambda * b.ts + (1.0 - lambda) * b.is_;
    if sa >= sb {
        (a, b, sa - sb)
    } else {
        (b, a, sb - sa)
    }
}

fn select_group(group: &[ScoredSample], rule: &SelectionRule) -> Result<SelectionOutcome, PairingError> {
    let candidates = candidate_indices(group)?;
    let mut out = SelectionOutcome::default();
    out.diagnostics.candidates = candidates.len();
    for (i, j) in candidates {
        let (a, b) = (&group[i], &group[j]);
        let picked = match *rule {
            SelectionRule::Threshold { lambda, tau } => threshold_pick(a, b, lambda, tau, None),
            SelectionRule::Cone { c1_deg, c2_deg } => cone_pick(a, b, Cone { c1_deg, c2_deg }),
            SelectionRule::Chain {
                lambda,
                tau,
                c1_deg,
                c2_deg,
            } => threshold_pick(a, b, lambda, tau, Some(Cone { c1_deg, c2_deg })),
        };
        match picked {
            Err(PairingError::DegeneratePair(..)) => out.diagnostics.dropped_degenerate += 1,
            Err(e) => return Err(e),
            Ok(Some(pair)) => {
                out.diagnostics.angle_histogram.add(pair.angle_deg);
                out.pairs.push(pair);
            }
            Ok(None) => {}
        }
    }
    out.diagnostics.kept = out.pairs.len();
    Ok(out)
}

fn threshold_pick(
    a: &ScoredSample,
    b: &ScoredSample,
    lambda: f64,
    tau: f64,
    cone: Option<Cone>,
) -> Result<Option<PreferencePair>, PairingError> {
    // Degeneracy is checked before the score so exact duplicates are tallied.
    pair_geometry(a, b)?;
    let (w, l, gap) = orient_by_score(a, b, lambda);
    if gap.partial_cmp(&tau) != Some(Ordering::Greater) {
        return Ok(None);
    }
    let g = pair_geometry(w, l)?;
    if let Some(cone) = cone {
        if !cone.contains(g.angle_deg) {
            return Ok(None);
        }
    }
    Ok(Some(PreferencePair::new(w, l, g, Some(gap))))
}

fn cone_pick(a: &ScoredSample, b: &ScoredSample, cone: Cone) -> Result<Option<PreferencePair>, PairingError> {
    let forward = pair_geometry(a, b)?;
    if cone.contains(forward.angle_deg) {
        return Ok(Some(PreferencePair::new(a, b, forward, None)));
    }
    let backward = pair_geometry(b, a)?;
    if cone.contains(backward.angle_deg) {
        return Ok(Some(PreferencePair::new(b, a, backward, None)));
    }
    Ok(None)
}

fn select_groups(
    groups: &[PromptGroup],
    rule: SelectionRule,
    exec: Execution,
) -> Result<SelectionOutcome, PairingError> {
    rule.validate()?;
    let parts = exec.try_map(groups, |g| select_group(&g.samples, &rule))?;
    let mut out = SelectionOutcome::default();
    for p in parts {
        out.merge(p);
    }
    out.pairs.sort_by(pair_order);
    Ok(out)
}

/// Keeps pairs whose weighted-score gap is strictly greater than `tau`,
/// oriented toward the higher score.
pub fn threshold_select(
    groups: &[PromptGroup],
    lambda: f64,
    tau: f64,
    exec: Execution,
) -> Result<SelectionOutcome, PairingError> {
    select_groups(groups, SelectionRule::Threshold { lambda, tau }, exec)
}

/// Keeps the orientation of each pair whose angle lies strictly inside the cone.
pub fn cone_select(
    groups: &[PromptGroup],
    c1_deg: f64,
    c2_deg: f64,
    exec: Execution,
) -> Result<SelectionOutcome, PairingError> {
    let cone = Cone::new(c1_deg, c2_deg)?;
    select_groups(groups, SelectionRule::cone(cone), exec)
}

/// Applies a full policy: rule, then budget subsample.
pub fn select(
    groups: &[PromptGroup],
    policy: &SelectionPolicy,
    exec: Execution,
) -> Result<SelectionOutcome, PairingError> {
    let mut out = select_groups(groups, policy.rule, exec)?;
    if let Some(budget) = policy.budget {
        let before = out.pairs.len();
        out.pairs = subsample(out.pairs, budget, policy.seed);
        out.diagnostics.dropped_budget = before - out.pairs.len();
    }
    Ok(out)
}

/// Score gaps `|𝒮(a) − 𝒮(b)|` of every non-degenerate candidate.
pub fn candidate_gaps(groups: &[PromptGroup], lambda: f64) -> Result<Vec<f64>, PairingError> {
    check_lambda(lambda)?;
    let mut gaps = Vec::new();
    for g in groups {
        for (i, j) in candidate_indices(&g.samples)? {
            let (a, b) = (&g.samples[i], &g.samples[j]);
            if a.ts == b.ts && a.is_ == b.is_ {
                continue;
            }
            gaps.push(orient_by_score(a, b, lambda).2);
        }
    }
    Ok(gaps)
}

/// Largest `τ` such that the rule `gap > τ` keeps at least `⌈fraction·n⌉`
/// of `gaps`.
pub fn retention_threshold(gaps: &[f64], fraction: f64) -> Result<f64, PairingError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(PairingError::InvalidFraction(fraction));
    }
    if gaps.is_empty() || gaps.iter().any(|g| !g.is_finite()) {
        return Err(PairingError::EmptyPairSet);
    }
    let mut sorted = gaps.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    let n = sorted.len();
    // Guard against 0.56 * 1000 = 560.0000000000001 style round-up.
    let raw = fraction * n as f64;
    let keep = if (raw - raw.round()).abs() < 1e-9 {
        raw.round() as usize
    } else {
        raw.ceil() as usize
    }
    .clamp(1, n);
    Ok(sorted[keep - 1].next_down())
}

/// Uniform subset of exactly `budget` pairs when over budget; output sorted
/// by `(prompt_id, winner_id, loser_id)`.
pub fn subsample(mut pairs: Vec<PreferencePair>, budget: usize, seed: u64) -> Vec<PreferencePair> {
    pairs.sort_by(pair_order);
    if pairs.len() <= budget {
        return pairs;
    }
    let mut rng = SeededRng::new(seed);
    let mut idx = rng.sample_indices(pairs.len(), budget);
    idx.sort_unstable();
    let keep: HashSet<usize> = idx.into_iter().collect();
    pairs
        .into_iter()
        .enumerate()
        .filter_map(|(i, p)| keep.contains(&i).then_some(p))
        .collect()
}

/// One PAIRS-JSONL line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairLine {
    pub prompt_id: String,
    pub prompt_text: String,
    pub winner_id: String,
    pub loser_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub winner_uri: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loser_uri: Option<String>,
    pub delta_ts: f64,
    pub delta_is: f64,
    pub angle_deg: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score_gap: Option<f64>,
    pub policy: SelectionPolicy,
}

/// PAIRS-JSONL bytes. `prompt_text` looks up the text for a prompt id.
pub fn pairs_jsonl<F>(pairs: &[PreferencePair], policy: &SelectionPolicy, prompt_text: F) -> Vec<u8>
where
    F: Fn(&str) -> String,
{
    let mut sorted: Vec<&PreferencePair> = pairs.iter().collect();
    sorted.sort_by(|a, b| pair_order(a, b));
    let lines: Vec<PairLine> = sorted
        .into_iter()
        .map(|p| PairLine {
            prompt_id: p.prompt_id.clone(),
            prompt_text: prompt_text(&p.prompt_id),
            winner_id: p.winner_id.clone(),
            loser_id: p.loser_id.clone(),
            winner_uri: p.winner_uri.clone(),
            loser_uri: p.loser_uri.clone(),
            delta_ts: p.delta_ts,
            delta_is: p.delta_is,
            angle_deg: p.angle_deg,
            score_gap: p.score_gap,
            policy: *policy,
        })
        .collect();
    crate::io::jsonl_bytes(&lines).expect("pair lines serialize")
}

pub fn read_pairs_jsonl<R: BufRead>(reader: R) -> Result<Vec<PairLine>, PairingError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PairingError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}
