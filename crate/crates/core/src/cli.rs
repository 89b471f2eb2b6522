//! `pairforge` command line.
//!
//! Every output file is written to a temp sibling and renamed into place.
//! Failures print one JSON object on stderr:
//! `{"error": <kind>, "message": <text>, "exit_code": <n>}`.
//!
//! Exit codes: 0 ok, 1 invalid input or I/O, 2 selection kept no pairs,
//! 3 external client failure, 64 usage error.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::embedding::{read_emb_jsonl, ConceptRefSet, EmbeddingKind};
use crate::evalkit::{
    eval_concept, eval_scores, pareto_frontier, read_trajectory_csv, read_votes_csv, tabulate_votes,
    trajectory_csv, trajectory_svg, EvalOptions, EvalReport, PromptSubset, TrajectoryPoint,
};
use crate::exec::{with_jobs, Execution};
use crate::io::{write_atomic, AtomicFile};
use crate::orchestrator::{CampaignConfig, CampaignError, CommandClients, Orchestrator};
use crate::pairing::{
    candidate_gaps, pairs_jsonl, retention_threshold, select, subsample, Cone, Diagnostics, PromptGroup,
    SelectionOutcome, SelectionPolicy, SelectionRule,
};
use crate::prompts::{
    build_prompt_set, captions_for_concept, read_coco_jsonl, read_llm_prompts, ConceptCategoryMap, PromptSetSpec,
    DEFAULT_N_COCO, DEFAULT_N_LLM,
};
use crate::scoring::{prompt_lookup, prompts_from_emb, samples_from_emb, score_batch, scores_jsonl, ScoreGroups};
use crate::simkit::backend::SimClients;
use crate::simkit::world::{synth_generate, synth_update};
use crate::simkit::SynthWorld;

const SCORES_SCHEMA: &str = "SCORES-JSONL: one object per line, sorted by (prompt_id, sample_id):
  {\"sample_id\": str, \"prompt_id\": str, \"ts\": f64, \"is\": f64,
   \"weighted\"?: f64, \"lambda\"?: f64, \"artifact_uri\"?: str}";
const EMB_SCHEMA: &str = "EMB-JSONL: one object per line:
  {\"id\": str, \"kind\": \"image\"|\"text\", \"vector\": [f64; dim],
   \"prompt_id\"?: str, \"round_index\"?: u32, \"artifact_uri\"?: str, \"text\"?: str}
  Image samples need prompt_id. Vectors are L2-normalized on load.";
const PAIRS_SCHEMA: &str = "PAIRS-JSONL: one object per line, sorted by (prompt_id, winner_id, loser_id):
  {\"prompt_id\": str, \"prompt_text\": str, \"winner_id\": str, \"loser_id\": str,
   \"winner_uri\"?: str, \"loser_uri\"?: str, \"delta_ts\": f64, \"delta_is\": f64,
   \"angle_deg\": f64, \"score_gap\"?: f64, \"policy\": {\"mode\": ..., ...}}
Diagnostics JSON: {\"candidates\", \"kept\", \"dropped_degenerate\", \"dropped_budget\",
   \"angle_histogram\": {\"lower_edge_deg\": -180, \"bin_width_deg\": 5, \"counts\": [72]}}";
const PROMPTS_SCHEMA: &str = "COCO input (JSONL): {\"source_id\": str, \"caption\": str, \"supercategory\": str, \"category\": str}
LLM input: one prompt per line, each with exactly one [V*].
Output PROMPTS-JSONL: {\"prompt_id\": \"p00000\", \"text\": str, \"source\": \"coco\"|\"llm\"}";
const TRAJECTORY_SCHEMA: &str = "TRAJECTORY-CSV: header `label,ts,is`, one row per point.";
const EVAL_SCHEMA: &str = "Input: SCORES-JSONL per concept (--concept ID=PATH), or EMB-JSONL triples
(--emb-concept ID=SAMPLES,REFS,PROMPTS). Output EVAL-JSON:
  {\"per_concept\": {id: {\"clip_i\", \"clip_t\"}}, \"overall\": {\"mean_i\", \"sigma_i\", \"mean_t\", \"sigma_t\"},
   \"prompt_subset\": \"live\"|\"object\", \"n_images_per_prompt\": usize}";
const VOTES_SCHEMA: &str = "Input CSV with header `assessor,criterion,vote`; vote is win, lose or nodiff.
Output JSON: [{\"criterion\", \"votes\", \"win\", \"lose\", \"no_diff\"}], percentages of all
votes per criterion, plus a final `All` row.";
const CAMPAIGN_SCHEMA: &str = "Config JSON: {\"concept_id\", \"prompts_path\" (PROMPTS-JSONL), \"refs_path\" (EMB-JSONL),
  \"n_prompts\"?, \"m_per_prompt\"?, \"rounds\"?, \"policy\"?, \"epochs_per_pair\"?, \"batch_size\"?,
  \"dim\"?, \"trainer_profile\"?, \"initial_checkpoint\"?, \"seed\"?, \"resample_prompts\"?,
  \"clients\"?: {\"embedder\", \"generator\", \"trainer\"}}
Each client is a shell command invoked as `<cmd> <request.json> <response.json>`.
Endpoints can be overridden with PAIRFORGE_EMBEDDER, PAIRFORGE_GENERATOR, PAIRFORGE_TRAINER.";

#[derive(Debug, Parser)]
#[command(name = "pairforge", version, about = "Preference-pair curation and DPO campaign orchestration")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a prompt set from COCO captions and LLM prompts.
    #[command(after_long_help = PROMPTS_SCHEMA)]
    Prompts(PromptsArgs),
    /// Score image embeddings against reference images and prompt texts.
    #[command(after_long_help = format!("Inputs: {EMB_SCHEMA}\n\nOutput: {SCORES_SCHEMA}"))]
    Score(ScoreArgs),
    /// Mine preference pairs from a scores file.
    #[command(after_long_help = format!("Input: {SCORES_SCHEMA}\n\nOutput: {PAIRS_SCHEMA}"))]
    Select(SelectArgs),
    /// Run or resume a multistep campaign.
    #[command(after_long_help = CAMPAIGN_SCHEMA)]
    Campaign(CampaignArgs),
    /// Run the synthetic world for a few rounds and write its trajectory.
    #[command(after_long_help = TRAJECTORY_SCHEMA)]
    Sim(SimArgs),
    /// Nested CLIP-I / CLIP-T evaluation across concepts.
    #[command(after_long_help = EVAL_SCHEMA)]
    Eval(EvalArgs),
    /// Win / lose / no-difference percentages from a vote CSV.
    #[command(name = "tabulate-votes", after_long_help = VOTES_SCHEMA)]
    TabulateVotes(VotesArgs),
    /// Plain SVG scatter of a trajectory.
    #[command(after_long_help = TRAJECTORY_SCHEMA)]
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct PromptsArgs {
    /// Concept class, e.g. `dog` or `backpack`.
    #[arg(long)]
    pub concept_class: String,
    #[arg(long)]
    pub coco: PathBuf,
    #[arg(long)]
    pub llm: PathBuf,
    /// JSON concept-class → COCO category map (built-in map by default).
    #[arg(long)]
    pub concept_map: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_N_COCO)]
    pub n_coco: usize,
    #[arg(long, default_value_t = DEFAULT_N_LLM)]
    pub n_llm: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    /// EMB-JSONL of generated images (kind image, with prompt_id).
    #[arg(long)]
    pub samples: PathBuf,
    /// EMB-JSONL of prompt text embeddings (kind text, id = prompt_id).
    #[arg(long)]
    pub prompts: PathBuf,
    /// EMB-JSONL of reference concept images.
    #[arg(long)]
    pub refs: PathBuf,
    #[arg(long, default_value = "concept")]
    pub concept_id: String,
    /// Also record λ·ts + (1−λ)·is.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long, default_value_t = crate::embedding::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Preset {
    Ts,
    Is,
    Mix,
}

impl Preset {
    fn cone(self) -> Cone {
        match self {
            Preset::Ts => Cone::TS,
            Preset::Is => Cone::IS,
            Preset::Mix => Cone::MIX,
        }
    }
}

/// Policy flags. Use `--cone=-20,70` (with `=`) for negative angles.
#[derive(Debug, Clone, Args)]
pub struct PolicyArgs {
    /// Cone `C1,C2` in degrees, e.g. `--cone=-20,70`.
    #[arg(long, value_parser = parse_cone, allow_hyphen_values = true,
          conflicts_with_all = ["preset", "lambda", "tau", "retain"])]
    pub cone: Option<Cone>,
    /// Named cone: ts = (-20,70), is = (0,90), mix = (-10,80).
    #[arg(long, value_enum, conflicts_with_all = ["lambda", "tau", "retain"])]
    pub preset: Option<Preset>,
    /// Score weight λ for threshold selection.
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Keep pairs with score gap strictly above τ.
    #[arg(long, requires = "lambda", conflicts_with = "retain")]
    pub tau: Option<f64>,
    /// Pick τ so this fraction of candidates is kept.
    #[arg(long, requires = "lambda")]
    pub retain: Option<f64>,
    /// Subsample at most this many pairs.
    #[arg(long)]
    pub budget: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn parse_cone(s: &str) -> Result<Cone, String> {
    let (a, b) = s.split_once(',').ok_or("expected C1,C2")?;
    let c1: f64 = a.trim().parse().map_err(|e| format!("C1: {e}"))?;
    let c2: f64 = b.trim().parse().map_err(|e| format!("C2: {e}"))?;
    Cone::new(c1, c2).map_err(|e| e.to_string())
}

#[derive(Debug, Args)]
pub struct SelectArgs {
    /// SCORES-JSONL sorted by prompt_id (as written by `score`).
    #[arg(long)]
    pub scores: PathBuf,
    /// PROMPTS-JSONL used to fill prompt_text.
    #[arg(long)]
    pub prompts: Option<PathBuf>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    #[arg(long)]
    pub out: PathBuf,
    /// Diagnostics JSON (default: `<out>.diagnostics.json`).
    #[arg(long)]
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CampaignArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub workdir: PathBuf,
    /// Continue a campaign already present in the working directory.
    #[arg(long)]
    pub resume: bool,
    /// Use the built-in synthetic clients instead of external commands.
    #[arg(long)]
    pub sim_backend: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Debug, Args)]
pub struct SimArgs {
    #[arg(long, default_value_t = 3)]
    pub rounds: u32,
    #[arg(long, default_value_t = 100)]
    pub n_prompts: usize,
    #[arg(long, default_value_t = 10)]
    pub m_per_prompt: usize,
    #[arg(long, default_value_t = 0.25)]
    pub start_ts: f64,
    #[arg(long, default_value_t = 0.75)]
    pub start_is: f64,
    #[arg(long, default_value_t = 0.02)]
    pub noise: f64,
    #[arg(long, default_value_t = 0.01)]
    pub drift: f64,
    #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
    pub correlation: f64,
    #[command(flatten)]
    pub policy: PolicyArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// `ID=SCORES.jsonl`, repeatable.
    #[arg(long = "concept")]
    pub concepts: Vec<String>,
    /// `ID=SAMPLES.emb.jsonl,REFS.emb.jsonl,PROMPTS.emb.jsonl`, repeatable.
    #[arg(long = "emb-concept")]
    pub emb_concepts: Vec<String>,
    #[arg(long, default_value_t = crate::embedding::DEFAULT_DIM)]
    pub dim: usize,
    #[arg(long, default_value_t = crate::evalkit::DEFAULT_IMAGES_PER_PROMPT)]
    pub n_images: usize,
    #[arg(long)]
    pub allow_partial: bool,
    #[arg(long, value_enum, default_value = "object")]
    pub subset: SubsetArg,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write per-concept (clip_t, clip_i) points as TRAJECTORY-CSV.
    #[arg(long)]
    pub points_out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SubsetArg {
    Live,
    Object,
}

#[derive(Debug, Args)]
pub struct VotesArgs {
    #[arg(long)]
    pub votes: PathBuf,
    /// Output JSON (stdout when omitted).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub trajectory: PathBuf,
    /// Plot only the Pareto frontier of the points.
    #[arg(long)]
    pub frontier: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: &'static str,
    pub message: String,
    pub exit_code: i32,
}

impl CliError {
    fn input(message: impl Into<String>) -> Self {
        Self {
            kind: "invalid_input",
            message: message.into(),
            exit_code: 1,
        }
    }

    fn empty_selection(d: &Diagnostics) -> Self {
        Self {
            kind: "empty_selection",
            message: format!("no pairs kept out of {} candidates", d.candidates),
            exit_code: 2,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::json!({"error": self.kind, "message": self.message, "exit_code": self.exit_code}).to_string()
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::input(e.to_string())
            }
        }
    )*};
}
input_error!(
    std::io::Error,
    serde_json::Error,
    crate::embedding::EmbeddingError,
    crate::scoring::ScoringError,
    crate::pairing::PairingError,
    crate::prompts::PromptError,
    crate::evalkit::EvalError
);

impl From<CampaignError> for CliError {
    fn from(e: CampaignError) -> Self {
        let kind = match &e {
            CampaignError::EmptySelection { .. } => "empty_selection",
            CampaignError::Client(_) => "client_failure",
            CampaignError::ResumeMismatch(_) => "resume_mismatch",
            _ => "campaign_error",
        };
        Self {
            kind,
            message: e.to_string(),
            exit_code: e.exit_code(),
        }
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn read_emb(path: &Path, dim: usize) -> Result<Vec<crate::embedding::EmbRecord>, CliError> {
    read_emb_jsonl(open(path)?, dim).map_err(|e| CliError::input(format!("{}: {e}", path.display())))
}

fn load_refs(path: &Path, concept_id: &str, dim: usize) -> Result<ConceptRefSet, CliError> {
    let refs = read_emb(path, dim)?
        .iter()
        .filter(|r| r.kind == EmbeddingKind::Image)
        .map(|r| r.to_embedding())
        .collect::<Result<Vec<_>, _>>()?;
    Ok(ConceptRefSet::new(concept_id, refs)?)
}

/// Parses the argument list (program name first) and runs the command.
/// Returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 64 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.exit_code
        }
    }
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Prompts(a) => cmd_prompts(a),
        Command::Score(a) => cmd_score(a),
        Command::Select(a) => cmd_select(a),
        Command::Campaign(a) => cmd_campaign(a),
        Command::Sim(a) => cmd_sim(a),
        Command::Eval(a) => cmd_eval(a),
        Command::TabulateVotes(a) => cmd_votes(a),
        Command::Plot(a) => cmd_plot(a),
    }
}

fn cmd_prompts(a: PromptsArgs) -> Result<(), CliError> {
    let map = match &a.concept_map {
        Some(p) => ConceptCategoryMap::from_json(&std::fs::read_to_string(p)?)?,
        None => ConceptCategoryMap::builtin(),
    };
    let coco = read_coco_jsonl(open(&a.coco)?)?;
    let llm = read_llm_prompts(open(&a.llm)?)?;
    let candidates = captions_for_concept(&coco, &map, &a.concept_class)?;
    let spec = PromptSetSpec {
        n_coco: a.n_coco,
        n_llm: a.n_llm,
        seed: a.seed,
    };
    let set = build_prompt_set(&candidates, &llm, spec)?;
    write_atomic(&a.out, &crate::io::jsonl_bytes(&set)?)?;
    Ok(())
}

fn cmd_score(a: ScoreArgs) -> Result<(), CliError> {
    let samples = samples_from_emb(&read_emb(&a.samples, a.dim)?)?;
    let prompts = prompt_lookup(prompts_from_emb(&read_emb(&a.prompts, a.dim)?)?);
    let refs = load_refs(&a.refs, &a.concept_id, a.dim)?;
    let scored = with_jobs(a.jobs, |exec| score_batch(&samples, &refs, &prompts, a.lambda, exec))?;
    write_atomic(&a.out, &scores_jsonl(&scored))?;
    Ok(())
}

impl PolicyArgs {
    /// Resolves flags to a policy. `gaps` supplies all candidate score gaps
    /// for λ when `--retain` is used.
    fn resolve(
        &self,
        gaps: impl FnOnce(f64) -> Result<Vec<f64>, CliError>,
    ) -> Result<SelectionPolicy, CliError> {
        let rule = if let Some(c) = self.cone {
            SelectionRule::cone(c)
        } else if let Some(p) = self.preset {
            SelectionRule::cone(p.cone())
        } else if let Some(lambda) = self.lambda {
            let tau = match (self.tau, self.retain) {
                (Some(t), None) => t,
                (None, Some(f)) => retention_threshold(&gaps(lambda)?, f)?,
                _ => return Err(CliError::input("--lambda needs exactly one of --tau or --retain")),
            };
            SelectionRule::Threshold { lambda, tau }
        } else {
            return Err(CliError::input("no selection policy: pass --cone, --preset or --lambda"));
        };
        let policy = SelectionPolicy::new(rule).with_budget(self.budget, self.seed);
        policy.validate()?;
        Ok(policy)
    }
}

/// Groups handled per parallel batch while streaming.
const STREAM_CHUNK: usize = 512;

fn for_each_chunk(
    path: &Path,
    mut f: impl FnMut(&[PromptGroup]) -> Result<(), CliError>,
) -> Result<(), CliError> {
    let mut chunk = Vec::with_capacity(STREAM_CHUNK);
    for g in ScoreGroups::new(open(path)?) {
        let (prompt_id, mut samples) = g?;
        samples.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
        chunk.push(PromptGroup { prompt_id, samples });
        if chunk.len() == STREAM_CHUNK {
            f(&chunk)?;
            chunk.clear();
        }
    }
    if !chunk.is_empty() {
        f(&chunk)?;
    }
    Ok(())
}

fn read_prompt_texts(path: Option<&Path>) -> Result<BTreeMap<String, String>, CliError> {
    let Some(path) = path else {
        return Ok(BTreeMap::new());
    };
    Ok(crate::orchestrator::read_prompts_jsonl(open(path)?)
        .map_err(|e| CliError::input(e.to_string()))?
        .into_iter()
        .map(|p| (p.prompt_id, p.text))
        .collect())
}

/// Streams the scores file one chunk of prompt groups at a time. Without a
/// budget, pairs are written as they are produced; with one, the kept pairs
/// are collected for the final subsample.
fn cmd_select(a: SelectArgs) -> Result<(), CliError> {
    let texts = read_prompt_texts(a.prompts.as_deref())?;
    let text_of = |pid: &str| texts.get(pid).cloned().unwrap_or_default();
    with_jobs(a.jobs, |exec| {
        let policy = a.policy.resolve(|lambda| {
            let mut gaps = Vec::new();
            for_each_chunk(&a.scores, |chunk| {
                gaps.extend(candidate_gaps(chunk, lambda)?);
                Ok(())
            })?;
            Ok(gaps)
        })?;
        let unbudgeted = SelectionPolicy { budget: None, ..policy };
        let mut out = AtomicFile::create(&a.out)?;
        let mut total = SelectionOutcome::default();
        for_each_chunk(&a.scores, |chunk| {
            let part = select(chunk, &unbudgeted, exec)?;
            if policy.budget.is_none() {
                out.write_all(&pairs_jsonl(&part.pairs, &policy, text_of))?;
            } else {
                total.pairs.extend(part.pairs);
            }
            total.diagnostics.merge(&part.diagnostics);
            Ok(())
        })?;
        if let Some(budget) = policy.budget {
            let before = total.pairs.len();
            let kept = subsample(std::mem::take(&mut total.pairs), budget, policy.seed);
            total.diagnostics.dropped_budget = before - kept.len();
            out.write_all(&pairs_jsonl(&kept, &policy, text_of))?;
        }
        out.commit()?;
        let diag_path = a.diagnostics.clone().unwrap_or_else(|| {
            let mut p = a.out.clone().into_os_string();
            p.push(".diagnostics.json");
            PathBuf::from(p)
        });
        write_atomic(&diag_path, &serde_json::to_vec_pretty(&total.diagnostics)?)?;
        if total.diagnostics.kept == 0 {
            return Err(CliError::empty_selection(&total.diagnostics));
        }
        Ok(())
    })
}

fn cmd_campaign(a: CampaignArgs) -> Result<(), CliError> {
    let config: CampaignConfig = serde_json::from_reader(open(&a.config)?)?;
    let started = a.workdir.join("campaign.json").exists();
    if started && !a.resume {
        return Err(CliError::input(format!(
            "{} already holds a campaign; pass --resume to continue it",
            a.workdir.display()
        )));
    }
    if !started && a.resume {
        return Err(CliError::input(format!("nothing to resume in {}", a.workdir.display())));
    }
    let state = if a.sim_backend {
        let mut o = Orchestrator::new(config, &a.workdir, SimClients::new(SynthWorld::default()))?;
        warn(o.warnings());
        with_jobs(a.jobs, |exec| o.set_execution(exec).run_campaign())?
    } else {
        let endpoints = config.clients.clone().with_env_overrides();
        let mut o = Orchestrator::new(config, &a.workdir, CommandClients::new(endpoints))?;
        warn(o.warnings());
        with_jobs(a.jobs, |exec| o.set_execution(exec).run_campaign())?
    };
    println!("{}", serde_json::to_string(&state)?);
    Ok(())
}

fn warn(ws: &[String]) {
    for w in ws {
        eprintln!("{}", serde_json::json!({"warning": w}));
    }
}

/// Pure simkit loop: generate, select on the current samples, move the world.
fn cmd_sim(a: SimArgs) -> Result<(), CliError> {
    let policy = a.policy.resolve(|lambda| {
        let world = sim_world(&a);
        Ok(candidate_gaps(
            &crate::pairing::group_by_prompt(synth_generate(&world, a.n_prompts, a.m_per_prompt)),
            lambda,
        )?)
    })?;
    let mut world = sim_world(&a);
    let mut points = Vec::new();
    for round in 0..=a.rounds {
        let samples = synth_generate(&world, a.n_prompts, a.m_per_prompt);
        let n = samples.len().max(1) as f64;
        points.push(TrajectoryPoint {
            label: format!("round_{round}"),
            ts: samples.iter().map(|s| s.ts).sum::<f64>() / n,
            is_: samples.iter().map(|s| s.is_).sum::<f64>() / n,
        });
        if round == a.rounds {
            break;
        }
        let out = select(&crate::pairing::group_by_prompt(samples), &policy, Execution::Sequential)?;
        if out.pairs.is_empty() {
            return Err(CliError::empty_selection(&out.diagnostics));
        }
        world = synth_update(&world, &out.pairs);
    }
    write_atomic(&a.out, trajectory_csv(&points).as_bytes())?;
    Ok(())
}

fn sim_world(a: &SimArgs) -> SynthWorld {
    SynthWorld {
        concept_mean: (a.start_ts, a.start_is),
        noise_scale: a.noise,
        drift_rate: a.drift,
        correlation: a.correlation,
        seed: a.policy.seed,
    }
}

fn split_spec(spec: &str) -> Result<(&str, &str), CliError> {
    spec.split_once('=')
        .filter(|(id, p)| !id.is_empty() && !p.is_empty())
        .ok_or_else(|| CliError::input(format!("expected ID=PATH, got {spec:?}")))
}

fn cmd_eval(a: EvalArgs) -> Result<(), CliError> {
    let opts = EvalOptions {
        n_images_per_prompt: a.n_images,
        allow_partial: a.allow_partial,
    };
    let mut per_concept = BTreeMap::new();
    for spec in &a.concepts {
        let (id, path) = split_spec(spec)?;
        let scored = crate::scoring::read_scores_jsonl(open(Path::new(path))?)?;
        per_concept.insert(id.to_string(), eval_scores(&scored, opts)?);
    }
    for spec in &a.emb_concepts {
        let (id, paths) = split_spec(spec)?;
        let parts: Vec<&str> = paths.split(',').collect();
        let [samples, refs, prompts] = parts[..] else {
            return Err(CliError::input(format!("expected ID=SAMPLES,REFS,PROMPTS, got {spec:?}")));
        };
        let samples = samples_from_emb(&read_emb(Path::new(samples), a.dim)?)?;
        let refs = load_refs(Path::new(refs), id, a.dim)?;
        let prompts = prompt_lookup(prompts_from_emb(&read_emb(Path::new(prompts), a.dim)?)?);
        per_concept.insert(id.to_string(), eval_concept(&samples, &refs, &prompts, opts)?);
    }
    let subset = match a.subset {
        SubsetArg::Live => PromptSubset::Live,
        SubsetArg::Object => PromptSubset::Object,
    };
    if let Some(p) = &a.points_out {
        let pts: Vec<TrajectoryPoint> = per_concept
            .iter()
            .map(|(id, m)| TrajectoryPoint {
                label: id.clone(),
                ts: m.clip_t,
                is_: m.clip_i,
            })
            .collect();
        write_atomic(p, trajectory_csv(&pts).as_bytes())?;
    }
    let report = EvalReport::new(per_concept, subset, a.n_images)?;
    write_atomic(&a.out, &serde_json::to_vec_pretty(&report)?)?;
    Ok(())
}

fn cmd_votes(a: VotesArgs) -> Result<(), CliError> {
    let rows = tabulate_votes(&read_votes_csv(open(&a.votes)?)?)?;
    let json = serde_json::to_vec_pretty(&rows)?;
    match &a.out {
        Some(p) => write_atomic(p, &json)?,
        None => println!("{}", String::from_utf8_lossy(&json)),
    }
    Ok(())
}

fn cmd_plot(a: PlotArgs) -> Result<(), CliError> {
    let mut points = read_trajectory_csv(open(&a.trajectory)?)?;
    if a.frontier {
        points = pareto_frontier(&points);
    }
    write_atomic(&a.out, trajectory_svg(&points).as_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cone_flag_parsing() {
        assert_eq!(parse_cone("-20,70").unwrap(), Cone::TS);
        assert_eq!(parse_cone(" 0 , 90 ").unwrap(), Cone::IS);
        assert!(parse_cone("10").is_err());
        assert!(parse_cone("90,0").is_err());
        assert!(parse_cone("-100,100").is_err());
    }

    #[test]
    fn policy_flags_are_exclusive() {
        let parse = |args: &[&str]| Cli::try_parse_from(["pairforge", "select", "--scores", "s", "--out", "o"].iter().chain(args));
        assert!(parse(&["--cone=-20,70"]).is_ok());
        assert!(parse(&["--cone", "-20,70"]).is_ok());
        assert!(parse(&["--cone=-20,70", "--lambda", "0.5", "--tau", "0"]).is_err());
        assert!(parse(&["--preset", "ts", "--lambda", "0.5"]).is_err());
        assert!(parse(&["--tau", "0"]).is_err());
        assert!(parse(&["--lambda", "0.5", "--tau", "0", "--retain", "0.5"]).is_err());
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(main_with_args(["pairforge", "select"]), 64);
        assert_eq!(main_with_args(["pairforge", "--help"]), 0);
    }
}
