use std::path::Path;

use pairforge::orchestrator::{CampaignConfig, CampaignError, Orchestrator};
use pairforge::pairing::{angle_deg, Cone, SelectionPolicy, SelectionRule};
use pairforge::rng::SeededRng;
use pairforge::simkit::backend::write_sim_fixtures;
use pairforge::simkit::{SimClients, SynthWorld};

const DIM: usize = 8;

fn config(dir: &Path, cone: Cone, rounds: u32) -> CampaignConfig {
    let (prompts, refs) = write_sim_fixtures(&dir.join("fixtures"), 30, DIM).unwrap();
    let mut c = CampaignConfig::new("sim", prompts, refs);
    c.n_prompts = 20;
    c.m_per_prompt = 6;
    c.rounds = rounds;
    c.dim = DIM;
    c.seed = 11;
    c.policy = SelectionPolicy::new(SelectionRule::cone(cone));
    c
}

fn world() -> SynthWorld {
    SynthWorld { noise_scale: 0.05, ..Default::default() }
}

fn run(dir: &Path, cone: Cone, rounds: u32) -> (pairforge::orchestrator::CampaignState, usize) {
    let mut o = Orchestrator::new(config(dir, cone, rounds), dir.join("work"), SimClients::new(world())).unwrap();
    let s = o.run_campaign().unwrap();
    (s, o.clients().total_calls())
}

#[test]
fn displacement_stays_inside_cone() {
    for (cone, axis) in [(Cone::TS, 0), (Cone::IS, 1), (Cone::MIX, 2)] {
        let dir = tempfile::tempdir().unwrap();
        let (state, _) = run(dir.path(), cone, 3);
        assert_eq!(state.trajectory.len(), 4);
        for w in state.trajectory.windows(2) {
            let (dt, di) = (w[1].mean_ts - w[0].mean_ts, w[1].mean_is - w[0].mean_is);
            let a = angle_deg(dt, di);
            assert!(cone.contains(a), "{cone:?}: {a}");
            match axis {
                0 => assert!(dt > 0.0),
                1 => assert!(di > 0.0),
                _ => {}
            }
        }
        let csv = std::fs::read_to_string(dir.path().join("work/trajectory.csv")).unwrap();
        assert_eq!(csv.lines().count(), 5);
    }
}

fn snapshot(work: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for r in 0..=3 {
        for f in ["scores.jsonl", "pairs.jsonl", "diagnostics.json", "trajectory.csv"] {
            let p = work.join(format!("round_{r}/{f}"));
            if p.exists() {
                out.push((format!("round_{r}/{f}"), std::fs::read(p).unwrap()));
            }
        }
    }
    for f in ["trajectory.csv", "state.json"] {
        out.push((f.to_string(), std::fs::read(work.join(f)).unwrap()));
    }
    out
}

#[test]
fn crash_and_resume_is_byte_identical() {
    let reference_dir = tempfile::tempdir().unwrap();
    let (_, calls) = run(reference_dir.path(), Cone::MIX, 3);
    let reference = snapshot(&reference_dir.path().join("work"));
    let n_entries = std::fs::read_to_string(reference_dir.path().join("work/journal.jsonl"))
        .unwrap()
        .lines()
        .count();

    let mut rng = SeededRng::new(2024);
    for _ in 0..10 {
        let crash_at = (rng.next_u64() % n_entries as u64) as usize;
        let dir = tempfile::tempdir().unwrap();
        let cfg = config(dir.path(), Cone::MIX, 3);
        let mut first = Orchestrator::new(cfg.clone(), dir.path().join("work"), SimClients::new(world()))
            .unwrap()
            .interrupt_after(Some(crash_at));
        assert!(matches!(first.run_campaign(), Err(CampaignError::Interrupted)));
        let mut resumed = Orchestrator::new(cfg, dir.path().join("work"), SimClients::new(world())).unwrap();
        resumed.run_campaign().unwrap();
        // Completed client calls are replayed, so at most the in-flight one repeats.
        let total = first.clients().total_calls() + resumed.clients().total_calls();
        assert!(total <= calls + 1, "crash at {crash_at}: {total} calls vs {calls}");
        assert_eq!(snapshot(&dir.path().join("work")), reference, "crash at {crash_at}");
    }
}

#[test]
fn resume_rejects_changed_config() {
    let dir = tempfile::tempdir().unwrap();
    run(dir.path(), Cone::MIX, 1);
    let mut cfg = config(dir.path(), Cone::MIX, 1);
    cfg.seed = 99;
    let mut o = Orchestrator::new(cfg, dir.path().join("work"), SimClients::new(world())).unwrap();
    assert!(matches!(o.run_campaign(), Err(CampaignError::ResumeMismatch(_))));
}

#[test]
fn malformed_trainer_handle_is_a_client_failure() {
    let dir = tempfile::tempdir().unwrap();
    let mut clients = SimClients::new(world());
    clients.train_handle_override = Some("bad\nhandle".into());
    let mut o = Orchestrator::new(config(dir.path(), Cone::MIX, 1), dir.path().join("work"), clients).unwrap();
    let err = o.run_campaign().unwrap_err();
    assert_eq!(err.exit_code(), 3);
    let state = o.load_state().unwrap().unwrap();
    assert_eq!(state.round_index, 0);
    assert_eq!(state.checkpoint_handle, "init");
}

#[test]
fn empty_selection_halts_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let w = SynthWorld { noise_scale: 0.0, ..Default::default() };
    let mut o =
        Orchestrator::new(config(dir.path(), Cone::MIX, 2), dir.path().join("work"), SimClients::new(w)).unwrap();
    let err = o.run_campaign().unwrap_err();
    assert_eq!(err.exit_code(), 2);
    assert!(dir.path().join("work/round_1/diagnostics.json").exists());
    assert_eq!(std::fs::read(dir.path().join("work/round_1/pairs.jsonl")).unwrap(), b"");
}
