//! Multistep campaign driver.
//!
//! Round 0 generates and scores a baseline from the initial checkpoint.
//! Each later round `k` then
//!
//! 1. selects pairs from round `k−1`'s scored samples,
//! 2. trains the current checkpoint on them (trainer client),
//! 3. generates fresh samples with the new checkpoint (generator client),
//! 4. embeds and scores them, appending one trajectory point.
//!
//! Working directory layout:
//!
//! ```text
//! campaign.json            config echo
//! journal.jsonl            append-only step log with manifest hashes
//! state.json               last completed CampaignState
//! round_0/{scores.jsonl, trajectory.csv}
//! round_k/{pairs.jsonl, diagnostics.json, scores.jsonl, trajectory.csv}
//! trajectory.csv           final trajectory (label,ts,is)
//! ```
//!
//! Client responses are journaled, so a campaign killed at any point and
//! restarted replays completed calls and produces byte-identical manifests.

pub mod clients;
pub mod config;
pub mod journal;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};
use thiserror::Error;

use crate::embedding::{read_emb_jsonl, ConceptRefSet, EmbeddingError, EmbeddingKind};
use crate::evalkit::{trajectory_csv, TrajectoryPoint};
use crate::exec::Execution;
use crate::io::{sha256_hex, write_atomic};
use crate::pairing::{self, group_by_prompt, pairs_jsonl, Diagnostics, PairingError, SelectionRule};
use crate::prompts::PromptEntry;
use crate::rng::SeededRng;
use crate::scoring::{
    self, prompt_lookup, read_scores_jsonl, scores_jsonl, GenerationSample, PromptLookup, PromptRecord,
    ScoredSample, ScoringError,
};

pub use clients::{
    CampaignClients, ClientEndpoints, ClientError, ClientKind, CommandClients, EmbedImagesRequest,
    EmbedTextsRequest, EmbeddingsResponse, GenerateRequest, GenerateResponse, GeneratedItem, TextItem,
    TrainRequest, TrainResponse,
};
pub use config::{compute_training_steps, trainer_profile, CampaignConfig};
use journal::{Journal, JournalError, ManifestRecord, Phase};

#[derive(Debug, Error)]
pub enum CampaignError {
    #[error("invalid campaign config: {0}")]
    Config(String),
    #[error(transparent)]
    Client(#[from] ClientError),
    #[error("round {round}: no pairs survived selection ({} candidates)", diagnostics.candidates)]
    EmptySelection { round: u32, diagnostics: Diagnostics },
    #[error("campaign interrupted")]
    Interrupted,
    #[error("cannot resume: {0}")]
    ResumeMismatch(String),
    #[error(transparent)]
    Scoring(#[from] ScoringError),
    #[error(transparent)]
    Pairing(#[from] PairingError),
    #[error(transparent)]
    Embedding(#[from] EmbeddingError),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for CampaignError {
    fn from(e: std::io::Error) -> Self {
        CampaignError::Io(e.to_string())
    }
}

impl From<JournalError> for CampaignError {
    fn from(e: JournalError) -> Self {
        match e {
            JournalError::Interrupted(_) => CampaignError::Interrupted,
            JournalError::Io(m) => CampaignError::Io(m),
        }
    }
}

impl CampaignError {
    /// Process exit code: 2 for an empty selection, 3 for client failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            CampaignError::EmptySelection { .. } => 2,
            CampaignError::Client(_) => 3,
            _ => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundPoint {
    pub round: u32,
    pub mean_ts: f64,
    pub mean_is: f64,
}

/// Progress after the last completed round (round 0 is the baseline).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignState {
    pub round_index: u32,
    pub checkpoint_handle: String,
    /// One point per completed round plus the baseline.
    pub trajectory: Vec<RoundPoint>,
    pub manifests: Vec<ManifestRecord>,
    /// Generation seed for the next round.
    pub rng_state: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub embedder_id: Option<String>,
}

impl CampaignState {
    pub fn trajectory_points(&self) -> Vec<TrajectoryPoint> {
        self.trajectory
            .iter()
            .map(|p| TrajectoryPoint {
                label: format!("round_{}", p.round),
                ts: p.mean_ts,
                is_: p.mean_is,
            })
            .collect()
    }

    fn manifest(&self, rel: &str) -> Option<&ManifestRecord> {
        self.manifests.iter().rev().find(|m| m.path == rel)
    }
}

/// Inputs shared by every round.
struct Context {
    refs: ConceptRefSet,
    all_prompts: Vec<PromptEntry>,
    lookup: PromptLookup,
}

pub struct Orchestrator<C> {
    config: CampaignConfig,
    dir: PathBuf,
    clients: C,
    exec: Execution,
    interrupt_after: Option<usize>,
    warnings: Vec<String>,
}

fn round_dir(k: u32) -> String {
    format!("round_{k}")
}

fn generation_seed(seed: u64, round: u32) -> u64 {
    SeededRng::derive(seed, 1000 + round as u64).next_u64()
}

impl<C: CampaignClients> Orchestrator<C> {
    pub fn new(config: CampaignConfig, dir: impl Into<PathBuf>, clients: C) -> Result<Self, CampaignError> {
        let warnings = config.validate().map_err(CampaignError::Config)?;
        Ok(Self {
            config,
            dir: dir.into(),
            clients,
            exec: Execution::Sequential,
            interrupt_after: None,
            warnings,
        })
    }

    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn set_execution(&mut self, exec: Execution) -> &mut Self {
        self.exec = exec;
        self
    }

    /// Stops with [`CampaignError::Interrupted`] before the `n`-th journal
    /// append of this run. Used to simulate crashes.
    pub fn interrupt_after(mut self, n: Option<usize>) -> Self {
        self.interrupt_after = n;
        self
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn clients(&self) -> &C {
        &self.clients
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn config(&self) -> &CampaignConfig {
        &self.config
    }

    /// Runs (or resumes) the campaign until `config.rounds` rounds are done.
    pub fn run_campaign(&mut self) -> Result<CampaignState, CampaignError> {
        let mut journal = self.open()?;
        let ctx = self.context(&mut journal)?;
        let mut state = match self.load_state()? {
            Some(s) => s,
            None => self.baseline(&mut journal, &ctx)?,
        };
        while state.round_index < self.config.rounds {
            state = self.round(&mut journal, &ctx, &state)?;
        }
        let csv = trajectory_csv(&state.trajectory_points());
        write_atomic(&self.dir.join("trajectory.csv"), csv.as_bytes())?;
        Ok(state)
    }

    /// Runs exactly one more round on top of the saved state (the baseline
    /// is produced first if missing).
    pub fn run_round(&mut self) -> Result<CampaignState, CampaignError> {
        let mut journal = self.open()?;
        let ctx = self.context(&mut journal)?;
        let state = match self.load_state()? {
            Some(s) => s,
            None => self.baseline(&mut journal, &ctx)?,
        };
        self.round(&mut journal, &ctx, &state)
    }

    pub fn load_state(&self) -> Result<Option<CampaignState>, CampaignError> {
        let p = self.dir.join("state.json");
        if !p.exists() {
            return Ok(None);
        }
        let state: CampaignState = serde_json::from_slice(&fs::read(&p)?)
            .map_err(|e| CampaignError::ResumeMismatch(format!("state.json: {e}")))?;
        if state.trajectory.len() != state.round_index as usize + 1 {
            return Err(CampaignError::ResumeMismatch("trajectory length does not match round".into()));
        }
        Ok(Some(state))
    }

    fn open(&mut self) -> Result<Journal, CampaignError> {
        fs::create_dir_all(&self.dir)?;
        let echo = serde_json::to_vec_pretty(&self.config).expect("config serializes");
        let cfg_path = self.dir.join("campaign.json");
        if cfg_path.exists() {
            if fs::read(&cfg_path)? != echo {
                return Err(CampaignError::ResumeMismatch(
                    "campaign.json differs from the requested config".into(),
                ));
            }
        } else {
            write_atomic(&cfg_path, &echo)?;
        }
        let mut journal = Journal::open(&self.dir.join("journal.jsonl"))?;
        journal.set_append_budget(self.interrupt_after);
        Ok(journal)
    }

    fn emit(&self, rel: &str, bytes: &[u8]) -> Result<ManifestRecord, CampaignError> {
        write_atomic(&self.dir.join(rel), bytes)?;
        Ok(ManifestRecord {
            path: rel.to_string(),
            sha256: sha256_hex(bytes),
        })
    }

    /// Calls a client unless the journal already holds its response.
    /// `check` validates the response; a failed check counts as a client
    /// failure and is not cached.
    fn client_step<T, U>(
        &mut self,
        journal: &mut Journal,
        round: u32,
        step: &str,
        call: impl FnOnce(&mut C) -> Result<T, ClientError>,
        check: impl Fn(&T) -> Result<U, ClientError>,
    ) -> Result<(T, U), CampaignError>
    where
        T: Serialize + DeserializeOwned,
    {
        if let Some(v) = journal.completed(round, step) {
            let resp: T = serde_json::from_value(v.clone())
                .map_err(|e| CampaignError::ResumeMismatch(format!("journaled {step}: {e}")))?;
            let checked = check(&resp)?;
            return Ok((resp, checked));
        }
        journal.append(round, step, Phase::Begin, None, vec![], None)?;
        let result = call(&mut self.clients).and_then(|r| check(&r).map(|u| (r, u)));
        match result {
            Ok((resp, checked)) => {
                let value = serde_json::to_value(&resp).expect("response serializes");
                journal.append(round, step, Phase::End, Some(value), vec![], None)?;
                Ok((resp, checked))
            }
            Err(e) => {
                journal.append(round, step, Phase::Fail, None, vec![], Some(e.message.clone()))?;
                Err(e.into())
            }
        }
    }

    fn context(&mut self, journal: &mut Journal) -> Result<Context, CampaignError> {
        let cfg = self.config.clone();
        let refs_file = fs::File::open(&cfg.refs_path)
            .map_err(|e| CampaignError::Config(format!("refs {}: {e}", cfg.refs_path.display())))?;
        let refs = read_emb_jsonl(std::io::BufReader::new(refs_file), cfg.dim)?
            .iter()
            .map(|r| r.to_embedding())
            .collect::<Result<Vec<_>, _>>()?;
        let refs = ConceptRefSet::new(cfg.concept_id.clone(), refs)?;

        let prompts_file = fs::File::open(&cfg.prompts_path)
            .map_err(|e| CampaignError::Config(format!("prompts {}: {e}", cfg.prompts_path.display())))?;
        let all_prompts = read_prompts_jsonl(std::io::BufReader::new(prompts_file))?;
        if all_prompts.len() < cfg.n_prompts {
            return Err(CampaignError::Config(format!(
                "{} prompts available, n_prompts = {}",
                all_prompts.len(),
                cfg.n_prompts
            )));
        }
        let mut ctx = Context {
            refs,
            all_prompts,
            lookup: PromptLookup::new(),
        };

        let needed: Vec<&PromptEntry> = if cfg.resample_prompts {
            ctx.all_prompts.iter().collect()
        } else {
            let keep = self.prompt_subset(&ctx, 0);
            keep.iter().map(|&i| &ctx.all_prompts[i]).collect()
        };
        let req = EmbedTextsRequest {
            texts: needed
                .iter()
                .map(|p| TextItem {
                    id: p.prompt_id.clone(),
                    text: p.text.clone(),
                })
                .collect(),
            dim: cfg.dim,
            output_path: self.dir.join(round_dir(0)).join("prompts.emb.jsonl"),
        };
        let wanted: HashSet<String> = req.texts.iter().map(|t| t.id.clone()).collect();
        let dim = cfg.dim;
        let texts: std::collections::HashMap<String, String> =
            needed.iter().map(|p| (p.prompt_id.clone(), p.text.clone())).collect();
        let sources: std::collections::HashMap<String, scoring::PromptSource> =
            needed.iter().map(|p| (p.prompt_id.clone(), p.source)).collect();
        let (_, records) = self.client_step(
            journal,
            0,
            "embed_texts",
            |c| c.embed_texts(&req),
            |resp| load_embeddings(resp, dim, EmbeddingKind::Text, &wanted, ClientKind::Embedder),
        )?;
        ctx.lookup = prompt_lookup(
            records
                .into_iter()
                .map(|r| {
                    Ok(PromptRecord {
                        prompt_id: r.id.clone(),
                        text: texts[&r.id].clone(),
                        text_embedding: r.to_embedding()?,
                        source: sources[&r.id],
                    })
                })
                .collect::<Result<Vec<_>, EmbeddingError>>()?,
        );
        Ok(ctx)
    }

    /// Indices into `all_prompts` used for generation in `round`.
    fn prompt_subset(&self, ctx: &Context, round: u32) -> Vec<usize> {
        let stream = if self.config.resample_prompts { 10 + round as u64 } else { 10 };
        let mut rng = SeededRng::derive(self.config.seed, stream);
        let mut idx = rng.sample_indices(ctx.all_prompts.len(), self.config.n_prompts);
        idx.sort_unstable();
        idx
    }

    fn baseline(&mut self, journal: &mut Journal, ctx: &Context) -> Result<CampaignState, CampaignError> {
        let checkpoint = self.config.initial_checkpoint.clone();
        let (point, manifests, embedder_id) = self.generate_and_score(journal, ctx, 0, &checkpoint, &[])?;
        let state = CampaignState {
            round_index: 0,
            checkpoint_handle: checkpoint,
            trajectory: vec![point],
            manifests,
            rng_state: generation_seed(self.config.seed, 1),
            embedder_id,
        };
        self.save_state(journal, &state)?;
        Ok(state)
    }

    fn generate_and_score(
        &mut self,
        journal: &mut Journal,
        ctx: &Context,
        round: u32,
        checkpoint: &str,
        previous: &[RoundPoint],
    ) -> Result<(RoundPoint, Vec<ManifestRecord>, Option<String>), CampaignError> {
        let cfg = self.config.clone();
        let rdir = self.dir.join(round_dir(round));
        let prompts: Vec<TextItem> = self
            .prompt_subset(ctx, round)
            .into_iter()
            .map(|i| TextItem {
                id: ctx.all_prompts[i].prompt_id.clone(),
                text: ctx.all_prompts[i].text.clone(),
            })
            .collect();
        let gen_req = GenerateRequest {
            round,
            checkpoint: checkpoint.to_string(),
            prompts: prompts.clone(),
            m_per_prompt: cfg.m_per_prompt,
            seed: generation_seed(cfg.seed, round),
            output_dir: rdir.clone(),
        };
        let expected = cfg.n_prompts * cfg.m_per_prompt;
        let prompt_ids: HashSet<String> = prompts.iter().map(|p| p.id.clone()).collect();
        let (generated, _) = self.client_step(
            journal,
            round,
            "generate",
            |c| c.generate(&gen_req),
            |resp| check_generation(resp, expected, &prompt_ids),
        )?;

        let embed_req = EmbedImagesRequest {
            round,
            samples: generated.samples.clone(),
            dim: cfg.dim,
            output_path: rdir.join("images.emb.jsonl"),
        };
        let wanted: HashSet<String> = generated.samples.iter().map(|s| s.sample_id.clone()).collect();
        let (embed_resp, records) = self.client_step(
            journal,
            round,
            "embed_images",
            |c| c.embed_images(&embed_req),
            |resp| load_embeddings(resp, cfg.dim, EmbeddingKind::Image, &wanted, ClientKind::Embedder),
        )?;

        let by_id: std::collections::HashMap<&str, &GeneratedItem> =
            generated.samples.iter().map(|s| (s.sample_id.as_str(), s)).collect();
        let samples = records
            .iter()
            .map(|r| {
                let item = by_id[r.id.as_str()];
                Ok(GenerationSample {
                    sample_id: r.id.clone(),
                    prompt_id: item.prompt_id.clone(),
                    image_embedding: r.to_embedding()?,
                    round_index: round,
                    artifact_uri: item.artifact_uri.clone(),
                })
            })
            .collect::<Result<Vec<_>, EmbeddingError>>()?;
        let lambda = match cfg.policy.rule {
            SelectionRule::Threshold { lambda, .. } | SelectionRule::Chain { lambda, .. } => Some(lambda),
            SelectionRule::Cone { .. } => None,
        };
        let scored = scoring::score_batch(&samples, &ctx.refs, &ctx.lookup, lambda, self.exec)?;
        let bytes = scores_jsonl(&scored);
        let rel = format!("{}/scores.jsonl", round_dir(round));
        let scores_manifest = self.emit(&rel, &bytes)?;

        let sorted = read_scores_jsonl(bytes.as_slice())?;
        let point = mean_point(round, &sorted);
        let mut traj: Vec<RoundPoint> = previous.to_vec();
        traj.push(point.clone());
        let csv = trajectory_csv(
            &CampaignState {
                round_index: round,
                checkpoint_handle: String::new(),
                trajectory: traj,
                manifests: vec![],
                rng_state: 0,
                embedder_id: None,
            }
            .trajectory_points(),
        );
        let traj_manifest = self.emit(&format!("{}/trajectory.csv", round_dir(round)), csv.as_bytes())?;
        journal.append(
            round,
            "score",
            Phase::End,
            None,
            vec![scores_manifest.clone(), traj_manifest.clone()],
            None,
        )?;
        Ok((point, vec![scores_manifest, traj_manifest], embed_resp.embedder_id))
    }

    fn round(
        &mut self,
        journal: &mut Journal,
        ctx: &Context,
        state: &CampaignState,
    ) -> Result<CampaignState, CampaignError> {
        let cfg = self.config.clone();
        let k = state.round_index + 1;
        let rdir = self.dir.join(round_dir(k));

        let pool_rel = format!("{}/scores.jsonl", round_dir(state.round_index));
        let pool_bytes = fs::read(self.dir.join(&pool_rel))?;
        if let Some(m) = state.manifest(&pool_rel) {
            if m.sha256 != sha256_hex(&pool_bytes) {
                return Err(CampaignError::ResumeMismatch(format!("{pool_rel} was modified")));
            }
        }
        let pool = read_scores_jsonl(pool_bytes.as_slice())?;
        let groups = group_by_prompt(pool);
        let outcome = pairing::select(&groups, &cfg.policy, self.exec)?;
        let pairs_rel = format!("{}/pairs.jsonl", round_dir(k));
        let pairs_bytes = pairs_jsonl(&outcome.pairs, &cfg.policy, |pid| {
            ctx.lookup.get(pid).map(|p| p.text.clone()).unwrap_or_default()
        });
        let pairs_manifest = self.emit(&pairs_rel, &pairs_bytes)?;
        let diag_bytes = serde_json::to_vec_pretty(&outcome.diagnostics).expect("diagnostics serialize");
        let diag_manifest = self.emit(&format!("{}/diagnostics.json", round_dir(k)), &diag_bytes)?;
        journal.append(
            k,
            "select",
            Phase::End,
            None,
            vec![pairs_manifest.clone(), diag_manifest.clone()],
            None,
        )?;
        if outcome.pairs.is_empty() {
            return Err(CampaignError::EmptySelection {
                round: k,
                diagnostics: outcome.diagnostics,
            });
        }

        let train_req = TrainRequest {
            round: k,
            checkpoint: state.checkpoint_handle.clone(),
            pairs_path: self.dir.join(&pairs_rel),
            n_pairs: outcome.pairs.len(),
            steps: compute_training_steps(outcome.pairs.len(), cfg.batch_size, cfg.epochs_per_pair),
            batch_size: cfg.batch_size,
            epochs_per_pair: cfg.epochs_per_pair,
            profile: cfg.trainer_profile.clone(),
            output_dir: rdir,
        };
        let (trained, _) = self.client_step(journal, k, "train", |c| c.train(&train_req), |r| r.validate())?;

        let (point, manifests, embedder_id) =
            self.generate_and_score(journal, ctx, k, &trained.checkpoint, &state.trajectory)?;
        let mut next = state.clone();
        next.round_index = k;
        next.checkpoint_handle = trained.checkpoint;
        next.trajectory.push(point);
        next.manifests.push(pairs_manifest);
        next.manifests.push(diag_manifest);
        next.manifests.extend(manifests);
        next.rng_state = generation_seed(cfg.seed, k + 1);
        next.embedder_id = embedder_id.or(next.embedder_id);
        self.save_state(journal, &next)?;
        Ok(next)
    }

    fn save_state(&self, journal: &mut Journal, state: &CampaignState) -> Result<(), CampaignError> {
        let bytes = serde_json::to_vec_pretty(state).expect("state serializes");
        write_atomic(&self.dir.join("state.json"), &bytes)?;
        journal.append(state.round_index, "round", Phase::End, None, vec![], None)?;
        Ok(())
    }
}

fn mean_point(round: u32, scored: &[ScoredSample]) -> RoundPoint {
    let n = scored.len().max(1) as f64;
    let (st, si) = scored.iter().fold((0.0, 0.0), |(t, i), s| (t + s.ts, i + s.is_));
    RoundPoint {
        round,
        mean_ts: st / n,
        mean_is: si / n,
    }
}

fn check_generation(
    resp: &GenerateResponse,
    expected: usize,
    prompt_ids: &HashSet<String>,
) -> Result<(), ClientError> {
    let err = |m: String| ClientError::new(ClientKind::Generator, m);
    if resp.samples.len() != expected {
        return Err(err(format!("{} samples returned, expected {expected}", resp.samples.len())));
    }
    let mut seen = HashSet::new();
    for s in &resp.samples {
        if !prompt_ids.contains(&s.prompt_id) {
            return Err(err(format!("sample `{}` has unknown prompt `{}`", s.sample_id, s.prompt_id)));
        }
        if !seen.insert(&s.sample_id) {
            return Err(err(format!("duplicate sample id `{}`", s.sample_id)));
        }
    }
    Ok(())
}

/// Reads the client's EMB-JSONL and checks it covers exactly `wanted`.
fn load_embeddings(
    resp: &EmbeddingsResponse,
    dim: usize,
    kind: EmbeddingKind,
    wanted: &HashSet<String>,
    client: ClientKind,
) -> Result<Vec<crate::embedding::EmbRecord>, ClientError> {
    let err = |m: String| ClientError::new(client, m);
    let file = fs::File::open(&resp.embeddings_path)
        .map_err(|e| err(format!("{}: {e}", resp.embeddings_path.display())))?;
    let mut records = read_emb_jsonl(std::io::BufReader::new(file), dim).map_err(|e| err(e.to_string()))?;
    let mut seen = HashSet::new();
    for r in &records {
        if r.kind != kind {
            return Err(err(format!("`{}` has kind {:?}", r.id, r.kind)));
        }
        if !wanted.contains(&r.id) || !seen.insert(r.id.clone()) {
            return Err(err(format!("unexpected or duplicate id `{}`", r.id)));
        }
        if r.to_embedding().is_err() {
            return Err(err(format!("`{}` has a zero vector", r.id)));
        }
    }
    if seen.len() != wanted.len() {
        return Err(err(format!("{} of {} embeddings returned", seen.len(), wanted.len())));
    }
    records.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(records)
}

pub fn read_prompts_jsonl<R: std::io::BufRead>(reader: R) -> Result<Vec<PromptEntry>, CampaignError> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| CampaignError::Config(format!("prompts line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}
