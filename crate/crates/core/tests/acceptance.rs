//! Acceptance suite: one test per criterion, each printing a single
//! `PASS`/`FAIL` line (written past the test harness capture) before asserting.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use pairforge::embedding::{ConceptRefSet, Embedding, EmbeddingKind};
use pairforge::evalkit::{aggregate, eval_concept, read_votes_csv, tabulate_votes, ConceptMeans, EvalOptions};
use pairforge::exec::Execution;
use pairforge::orchestrator::{CampaignConfig, CampaignError, CampaignState, Orchestrator};
use pairforge::pairing::{
    angle_deg, candidate_gaps, cone_select, enumerate_candidates, group_by_prompt, retention_threshold,
    threshold_select, Cone, PromptGroup, SelectionPolicy, SelectionRule,
};
use pairforge::prompts::{
    build_prompt_set, dedup_key, filter_caption, CaptionCandidate, CaptionVerdict, PromptSetSpec, RejectReason,
    PLACEHOLDER,
};
use pairforge::rng::SeededRng;
use pairforge::scoring::{prompt_lookup, score_batch, GenerationSample, PromptRecord, PromptSource, ScoredSample};
use pairforge::simkit::backend::write_sim_fixtures;
use pairforge::simkit::{dpo_grad, dpo_pair_loss, DpoInputs, SimClients, SynthWorld};

fn report(criterion: &str, ok: bool, detail: &str) {
    let line = format!("{} {criterion}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    let _ = std::io::stdout().lock().write_all(line.as_bytes());
    assert!(ok, "{criterion}: {detail}");
}

fn random_unit(rng: &mut SeededRng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.standard_normal()).collect()
}

#[test]
fn combinatorics() {
    let dim = 512;
    let mut rng = SeededRng::new(1);
    let start = Instant::now();
    let refs = ConceptRefSet::new(
        "c",
        (0..5)
            .map(|i| Embedding::new(format!("r{i}"), EmbeddingKind::Image, &random_unit(&mut rng, dim)).unwrap())
            .collect(),
    )
    .unwrap();
    let prompts = prompt_lookup(
        (0..1000)
            .map(|p| PromptRecord {
                prompt_id: format!("p{p:04}"),
                text: format!("prompt {p}"),
                text_embedding: Embedding::new(format!("p{p:04}"), EmbeddingKind::Text, &random_unit(&mut rng, dim))
                    .unwrap(),
                source: PromptSource::Custom,
            })
            .collect(),
    );
    let samples: Vec<GenerationSample> = (0..10_000)
        .map(|k| GenerationSample {
            sample_id: format!("s{k:05}"),
            prompt_id: format!("p{:04}", k / 10),
            image_embedding: Embedding::new(format!("s{k:05}"), EmbeddingKind::Image, &random_unit(&mut rng, dim))
                .unwrap(),
            round_index: 0,
            artifact_uri: None,
        })
        .collect();
    let timed = Instant::now();
    let scored = score_batch(&samples, &refs, &prompts, None, Execution::Parallel).unwrap();
    let groups = group_by_prompt(scored);
    let candidates: usize = groups.iter().map(|g| enumerate_candidates(&g.samples).unwrap().len()).sum();
    let outcome = cone_select(&groups, -90.0, 90.0, Execution::Parallel).unwrap();
    let elapsed = timed.elapsed().as_secs_f64();

    let four: Vec<ScoredSample> = (0..4).map(|i| ScoredSample::bare("p", &format!("s{i}"), i as f64, 0.0)).collect();
    let per_prompt_4 = enumerate_candidates(&four).unwrap().len();
    let ok = candidates == 45_000 && outcome.diagnostics.candidates == 45_000 && per_prompt_4 == 6 && elapsed < 5.0;
    report(
        "combinatorics",
        ok,
        &format!(
            "{candidates} candidates for 1000x10, {per_prompt_4} for M=4, score+enumerate+select {elapsed:.2}s (setup {:.2}s)",
            start.elapsed().as_secs_f64() - elapsed
        ),
    );
}

/// `n` single-pair groups with continuous random scores.
fn pair_groups(n: usize, seed: u64, keep: impl Fn(f64, f64) -> bool) -> Vec<PromptGroup> {
    let mut rng = SeededRng::new(seed);
    let mut samples = Vec::with_capacity(2 * n);
    let mut k = 0;
    while samples.len() < 2 * n {
        let (a, b) = ((rng.uniform(), rng.uniform()), (rng.uniform(), rng.uniform()));
        if !keep(a.0 - b.0, a.1 - b.1) {
            continue;
        }
        let pid = format!("p{k:05}");
        samples.push(ScoredSample::bare(&pid, "a", a.0, a.1));
        samples.push(ScoredSample::bare(&pid, "b", b.0, b.1));
        k += 1;
    }
    group_by_prompt(samples)
}

type Key = (String, String, String);

fn keys(pairs: &[pairforge::pairing::PreferencePair]) -> BTreeSet<Key> {
    pairs
        .iter()
        .map(|p| (p.prompt_id.clone(), p.winner_id.clone(), p.loser_id.clone()))
        .collect()
}

#[test]
fn threshold_cone_equivalence() {
    let mut mismatches = Vec::new();
    for (i, &lambda) in [0.0, 0.25, 0.5, 0.625, 0.75, 1.0].iter().enumerate() {
        // Boundary-free: the weighted delta is clearly non-zero, so both rules
        // see the same side of the half-plane.
        let groups = pair_groups(10_000, 100 + i as u64, |dt, di| {
            (lambda * dt + (1.0 - lambda) * di).abs() > 1e-9 * dt.hypot(di).max(1e-300)
        });
        let cone = Cone::for_threshold(lambda).unwrap();
        let t = threshold_select(&groups, lambda, 0.0, Execution::Parallel).unwrap();
        let c = cone_select(&groups, cone.c1_deg, cone.c2_deg, Execution::Parallel).unwrap();
        if keys(&t.pairs) != keys(&c.pairs) || t.pairs.len() != 10_000 {
            mismatches.push(lambda);
        }
    }
    report(
        "threshold-cone equivalence",
        mismatches.is_empty(),
        &format!("10000 pairs x 6 lambdas, mismatching lambdas: {mismatches:?}"),
    );
}

#[test]
fn retention_fractions() {
    let groups = pair_groups(10_000, 7, |_, _| true);
    let n = 10_000.0;
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    for lambda in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let gaps = candidate_gaps(&groups, lambda).unwrap();
        for f in [0.56, 0.14, 0.06, 0.03] {
            let tau = retention_threshold(&gaps, f).unwrap();
            let kept = threshold_select(&groups, lambda, tau, Execution::Parallel).unwrap().pairs.len();
            let err = (kept as f64 / n - f).abs();
            worst = worst.max(err);
            if lambda == 0.5 {
                lines.push(format!("{f}->{kept}"));
            }
        }
    }
    report(
        "retention fractions",
        worst <= 1.0 / n,
        &format!("worst |kept/n - f| = {worst:.2e} (bound {:.0e}); lambda=0.5: {}", 1.0 / n, lines.join(" ")),
    );
}

#[test]
fn dpo_numerics() {
    let zero = DpoInputs { lw_theta: -1.3, lw_ref: -1.3, ll_theta: -0.4, ll_ref: -0.4 };
    let at_zero = dpo_pair_loss(zero, 5000.0).unwrap();
    let ln2_ok = (at_zero - std::f64::consts::LN_2).abs() <= 1e-12;

    let mut rng = SeededRng::new(42);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let beta = rng.uniform_range(0.5, 5.0);
        let x = DpoInputs {
            lw_theta: rng.uniform_range(-3.0, 0.0),
            lw_ref: rng.uniform_range(-3.0, 0.0),
            ll_theta: rng.uniform_range(-3.0, 0.0),
            ll_ref: rng.uniform_range(-3.0, 0.0),
        };
        let g = dpo_grad(x, beta).unwrap();
        let h = 1e-5;
        let f = |d_w: f64, d_l: f64| {
            dpo_pair_loss(DpoInputs { lw_theta: x.lw_theta + d_w, ll_theta: x.ll_theta + d_l, ..x }, beta).unwrap()
        };
        let fd_w = (f(h, 0.0) - f(-h, 0.0)) / (2.0 * h);
        let fd_l = (f(0.0, h) - f(0.0, -h)) / (2.0 * h);
        for (fd, an) in [(fd_w, g.d_lw_theta), (fd_l, g.d_ll_theta)] {
            worst = worst.max((fd - an).abs() / an.abs().max(1e-300));
        }
    }

    let mut stable = true;
    for k in -100..=100 {
        let m = k as f64 * 10.0;
        let x = DpoInputs { lw_theta: m / 5000.0, lw_ref: 0.0, ll_theta: 0.0, ll_ref: 0.0 };
        let l = dpo_pair_loss(x, 5000.0).unwrap();
        let g = dpo_grad(x, 5000.0).unwrap();
        stable &= l.is_finite() && l >= 0.0 && g.d_lw_theta.is_finite() && g.d_ll_theta.is_finite();
    }
    report(
        "DPO numerics",
        ln2_ok && worst <= 1e-6 && stable,
        &format!(
            "loss at zero margin - ln2 = {:.1e}, worst grad rel err {worst:.1e} over 1000 fixtures, beta=5000 margins to 1e3 finite: {stable}",
            at_zero - std::f64::consts::LN_2
        ),
    );
}

const SIM_DIM: usize = 8;

fn sim_config(dir: &Path, cone: Cone, rounds: u32) -> CampaignConfig {
    let (prompts, refs) = write_sim_fixtures(&dir.join("fixtures"), 40, SIM_DIM).unwrap();
    let mut c = CampaignConfig::new("sim", prompts, refs);
    c.n_prompts = 30;
    c.m_per_prompt = 10;
    c.rounds = rounds;
    c.dim = SIM_DIM;
    c.seed = 5;
    c.policy = SelectionPolicy::new(SelectionRule::cone(cone));
    c
}

fn sim_world() -> SynthWorld {
    SynthWorld { noise_scale: 0.05, seed: 9, ..Default::default() }
}

fn run_sim(dir: &Path, cone: Cone) -> CampaignState {
    let mut o =
        Orchestrator::new(sim_config(dir, cone, 3), dir.join("work"), SimClients::new(sim_world())).unwrap();
    o.run_campaign().unwrap()
}

#[test]
fn toy_steering() {
    let mut ok = true;
    let mut detail = Vec::new();
    for (name, cone) in [("-TS", Cone::TS), ("-IS", Cone::IS), ("-MIX", Cone::MIX)] {
        let dir = tempfile::tempdir().unwrap();
        let state = run_sim(dir.path(), cone);
        let mut angles = Vec::new();
        for w in state.trajectory.windows(2) {
            let (dt, di) = (w[1].mean_ts - w[0].mean_ts, w[1].mean_is - w[0].mean_is);
            let a = angle_deg(dt, di);
            angles.push(format!("{a:.1}"));
            ok &= cone.contains(a);
            if name == "-TS" {
                ok &= dt > 0.0;
            }
            if name == "-IS" {
                ok &= di > 0.0;
            }
        }
        ok &= state.trajectory.len() == 4;
        detail.push(format!("{name} angles [{}]", angles.join(", ")));
    }
    report("toy steering", ok, &detail.join("; "));
}

fn cand(caption: &str) -> CaptionCandidate {
    CaptionCandidate {
        caption: caption.into(),
        category_word: "dog".into(),
        source_id: "x".into(),
        plural_forms: vec![],
    }
}

#[test]
fn prompt_pipeline() {
    let verdicts = [
        filter_caption(&cand("a black dog")),
        filter_caption(&cand("a black dog and a white dog")),
        filter_caption(&cand("black dogs")),
    ];
    let examples_ok = verdicts
        == [
            CaptionVerdict::Accept,
            CaptionVerdict::Reject(RejectReason::MultipleOccurrences),
            CaptionVerdict::Reject(RejectReason::PluralForm),
        ];

    let mut captions = Vec::new();
    for i in 0..3500 {
        captions.push(cand(&format!("a dog next to thing {i}")));
        if i % 10 == 0 {
            captions.push(cand(&format!("A  Dog next to thing {i}")));
            captions.push(cand(&format!("two dogs near thing {i}")));
        }
    }
    let llm: Vec<String> = (0..1200)
        .map(|i| format!("a {PLACEHOLDER} in setting {}", i % 1100))
        .chain(["a [V*] next to thing 5".to_string()])
        .collect();
    let set = build_prompt_set(&captions, &llm, PromptSetSpec { n_coco: 3000, n_llm: 1000, seed: 3 }).unwrap();
    let coco = set.iter().filter(|p| p.source == PromptSource::Coco).count();
    let from_llm = set.iter().filter(|p| p.source == PromptSource::Llm).count();
    let one_placeholder = set.iter().all(|p| p.text.matches(PLACEHOLDER).count() == 1);
    let unique = set.iter().map(|p| dedup_key(&p.text)).collect::<BTreeSet<_>>().len() == set.len();
    report(
        "prompt pipeline",
        examples_ok && coco == 3000 && from_llm == 1000 && one_placeholder && unique,
        &format!(
            "examples {verdicts:?}; built {coco}+{from_llm}, one placeholder each: {one_placeholder}, duplicates: {}",
            !unique
        ),
    );
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = dot(v, v).sqrt();
    v.iter().map(|x| x / n).collect()
}

#[test]
fn evaluation_oracle() {
    let dim = 16;
    let mut rng = SeededRng::new(77);
    let mut worst: f64 = 0.0;
    let mut per_concept = Vec::new();
    for c in 0..30 {
        let raw_refs: Vec<Vec<f64>> = (0..4).map(|_| random_unit(&mut rng, dim)).collect();
        let refs = ConceptRefSet::new(
            format!("c{c}"),
            raw_refs
                .iter()
                .enumerate()
                .map(|(i, v)| Embedding::new(format!("r{i}"), EmbeddingKind::Image, v).unwrap())
                .collect(),
        )
        .unwrap();
        let raw_prompts: Vec<Vec<f64>> = (0..25).map(|_| random_unit(&mut rng, dim)).collect();
        let prompts = prompt_lookup(
            raw_prompts
                .iter()
                .enumerate()
                .map(|(p, v)| PromptRecord {
                    prompt_id: format!("p{p:02}"),
                    text: String::new(),
                    text_embedding: Embedding::new(format!("p{p:02}"), EmbeddingKind::Text, v).unwrap(),
                    source: PromptSource::Dreambench,
                })
                .collect(),
        );
        let mut samples = Vec::new();
        let (mut flat_i, mut flat_t) = (0.0, 0.0);
        for (p, raw_prompt) in raw_prompts.iter().enumerate() {
            for m in 0..10 {
                let v = random_unit(&mut rng, dim);
                let u = unit(&v);
                flat_i += raw_refs.iter().map(|r| dot(&u, &unit(r))).sum::<f64>() / 4.0;
                flat_t += dot(&u, &unit(raw_prompt));
                samples.push(GenerationSample {
                    sample_id: format!("s{p:02}-{m}"),
                    prompt_id: format!("p{p:02}"),
                    image_embedding: Embedding::new(format!("s{p:02}-{m}"), EmbeddingKind::Image, &v).unwrap(),
                    round_index: 0,
                    artifact_uri: None,
                });
            }
        }
        let (flat_i, flat_t) = (flat_i / 250.0, flat_t / 250.0);
        let m = eval_concept(&samples, &refs, &prompts, EvalOptions::default()).unwrap();
        worst = worst.max((m.clip_i - flat_i).abs()).max((m.clip_t - flat_t).abs());
        per_concept.push(m);
    }
    // Independent mean/σ: Welford's single-pass recurrence.
    let welford = |xs: &mut dyn Iterator<Item = f64>| {
        let (mut n, mut mean, mut m2) = (0.0, 0.0, 0.0);
        for x in xs {
            n += 1.0;
            let d = x - mean;
            mean += d / n;
            m2 += d * (x - mean);
        }
        (mean, (m2 / n).sqrt())
    };
    let (oi, si) = welford(&mut per_concept.iter().map(|c: &ConceptMeans| c.clip_i));
    let (ot, st) = welford(&mut per_concept.iter().map(|c| c.clip_t));
    let agg = aggregate(&per_concept).unwrap();
    let agg_err = [agg.mean_i - oi, agg.sigma_i - si, agg.mean_t - ot, agg.sigma_t - st]
        .iter()
        .fold(0.0f64, |a, x| a.max(x.abs()));
    report(
        "evaluation oracle",
        worst <= 1e-12 && agg_err <= 1e-12,
        &format!("nested vs flat max err {worst:.1e}; 30-concept aggregate max err {agg_err:.1e}"),
    );
}

fn snapshot(work: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for r in 0..=3 {
        for f in ["scores.jsonl", "pairs.jsonl", "diagnostics.json", "trajectory.csv"] {
            let rel = format!("round_{r}/{f}");
            if let Ok(bytes) = std::fs::read(work.join(&rel)) {
                out.push((rel, bytes));
            }
        }
    }
    for f in ["trajectory.csv", "state.json"] {
        out.push((f.to_string(), std::fs::read(work.join(f)).unwrap()));
    }
    out
}

#[test]
fn determinism_and_resumability() {
    let reference_dir = tempfile::tempdir().unwrap();
    run_sim(reference_dir.path(), Cone::MIX);
    let reference = snapshot(&reference_dir.path().join("work"));
    let entries = std::fs::read_to_string(reference_dir.path().join("work/journal.jsonl")).unwrap().lines().count();

    let mut rng = SeededRng::new(8);
    let mut crash_points = Vec::new();
    let mut identical = 0;
    for _ in 0..10 {
        let crash = (rng.next_u64() % entries as u64) as usize;
        crash_points.push(crash);
        let dir = tempfile::tempdir().unwrap();
        let cfg = sim_config(dir.path(), Cone::MIX, 3);
        let work = dir.path().join("work");
        let mut first = Orchestrator::new(cfg.clone(), &work, SimClients::new(sim_world()))
            .unwrap()
            .interrupt_after(Some(crash));
        let interrupted = matches!(first.run_campaign(), Err(CampaignError::Interrupted));
        let resumed = Orchestrator::new(cfg, &work, SimClients::new(sim_world())).unwrap().run_campaign();
        if interrupted && resumed.is_ok() && snapshot(&work) == reference {
            identical += 1;
        }
    }
    report(
        "determinism and resumability",
        identical == 10,
        &format!("{identical}/10 resumed runs byte-identical; crash points (journal appends) {crash_points:?} of {entries}"),
    );
}

#[test]
fn table_tabulator() {
    let mut csv = String::from("assessor,criterion,vote\n");
    for k in 0..1000 {
        let vote = match k {
            0..66 => "win",
            66..105 => "lose",
            _ => "nodiff",
        };
        csv.push_str(&format!("assessor{},TS,{vote}\n", k % 17));
    }
    let rows = tabulate_votes(&read_votes_csv(csv.as_bytes()).unwrap()).unwrap();
    let ts = &rows[0];
    let all = &rows[1];
    let ok = ts.criterion == "TS"
        && (ts.win, ts.lose, ts.no_diff) == (6.6, 3.9, 89.5)
        && (all.win, all.lose, all.no_diff) == (6.6, 3.9, 89.5);
    report(
        "vote tabulator",
        ok,
        &format!("TS win/lose/no-diff = {}/{}/{}", ts.win, ts.lose, ts.no_diff),
    );
}
