//! Synthetic generator in the `(ts, is)` plane.
//!
//! Every call to [`synth_generate`] replays the same noise stream for a given
//! seed (common random numbers), so the round-over-round shift of the sample
//! mean equals the shift of `concept_mean` as long as no sample is clamped.

use serde::{Deserialize, Serialize};

use crate::pairing::PreferencePair;
use crate::rng::SeededRng;
use crate::scoring::ScoredSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthWorld {
    /// Current `(ts, is)` centre of the output distribution.
    pub concept_mean: (f64, f64),
    pub noise_scale: f64,
    /// Step length `η` of one update.
    pub drift_rate: f64,
    /// Correlation between TS and IS noise; negative values model the
    /// prompt-adherence / concept-fidelity trade-off. Zero is isotropic.
    #[serde(default)]
    pub correlation: f64,
    pub seed: u64,
}

impl Default for SynthWorld {
    fn default() -> Self {
        Self {
            concept_mean: (0.25, 0.75),
            noise_scale: 0.02,
            drift_rate: 0.01,
            correlation: 0.0,
            seed: 0,
        }
    }
}

pub fn sim_prompt_id(p: usize) -> String {
    format!("p{p:05}")
}

pub fn sim_sample_id(prompt_id: &str, m: usize) -> String {
    format!("{prompt_id}-s{m:03}")
}

/// Raw `(ts, is)` draws, row-major by prompt then sample.
pub fn synth_points(world: &SynthWorld, n_prompts: usize, m_per_prompt: usize) -> Vec<(f64, f64)> {
    let mut rng = SeededRng::new(world.seed);
    let rho = world.correlation.clamp(-1.0, 1.0);
    let ortho = (1.0 - rho * rho).sqrt();
    let (mt, mi) = world.concept_mean;
    (0..n_prompts * m_per_prompt)
        .map(|_| {
            let z1 = rng.standard_normal();
            let z2 = rng.standard_normal();
            let ts = mt + world.noise_scale * z1;
            let is_ = mi + world.noise_scale * (rho * z1 + ortho * z2);
            (ts.clamp(-1.0, 1.0), is_.clamp(-1.0, 1.0))
        })
        .collect()
}

/// `n_prompts × m_per_prompt` scored samples around `concept_mean`.
pub fn synth_generate(world: &SynthWorld, n_prompts: usize, m_per_prompt: usize) -> Vec<ScoredSample> {
    synth_points(world, n_prompts, m_per_prompt)
        .into_iter()
        .enumerate()
        .map(|(k, (ts, is_))| {
            let pid = sim_prompt_id(k / m_per_prompt);
            ScoredSample::bare(&pid, &sim_sample_id(&pid, k % m_per_prompt), ts, is_)
        })
        .collect()
}

/// Unit vector of the mean `(ΔTS, ΔIS)` over `deltas`, if non-zero.
pub fn mean_direction(deltas: impl IntoIterator<Item = (f64, f64)>) -> Option<(f64, f64)> {
    let (mut st, mut si, mut n) = (0.0, 0.0, 0usize);
    for (dt, di) in deltas {
        st += dt;
        si += di;
        n += 1;
    }
    if n == 0 {
        return None;
    }
    let (mt, mi) = (st / n as f64, si / n as f64);
    let norm = mt.hypot(mi);
    (norm > 0.0).then(|| (mt / norm, mi / norm))
}

/// Moves `concept_mean` by `η` along the mean improvement direction of
/// `selected`. An empty selection (or a zero mean) leaves the world as is.
pub fn synth_update_deltas(world: &SynthWorld, deltas: impl IntoIterator<Item = (f64, f64)>) -> SynthWorld {
    let mut next = *world;
    if let Some((ut, ui)) = mean_direction(deltas) {
        next.concept_mean.0 += world.drift_rate * ut;
        next.concept_mean.1 += world.drift_rate * ui;
    }
    next
}

pub fn synth_update(world: &SynthWorld, selected: &[PreferencePair]) -> SynthWorld {
    synth_update_deltas(world, selected.iter().map(|p| (p.delta_ts, p.delta_is)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::Execution;
    use crate::pairing::{angle_deg, cone_select, group_by_prompt};

    fn pair(dts: f64, dis: f64) -> PreferencePair {
        PreferencePair {
            prompt_id: "p".into(),
            winner_id: "w".into(),
            loser_id: "l".into(),
            winner_uri: None,
            loser_uri: None,
            delta_ts: dts,
            delta_is: dis,
            angle_deg: angle_deg(dts, dis),
            score_gap: None,
        }
    }

    #[test]
    fn generate_examples() {
        let still = SynthWorld { noise_scale: 0.0, ..Default::default() };
        assert!(synth_generate(&still, 3, 4).iter().all(|s| (s.ts, s.is_) == (0.25, 0.75)));
        let w = SynthWorld::default();
        let big = synth_generate(&w, 1000, 10);
        assert_eq!(big.len(), 10_000);
        assert_eq!(big[10].prompt_id, "p00001");
        assert_eq!(big[10].sample_id, "p00001-s000");
        assert_eq!(big, synth_generate(&w, 1000, 10));
    }

    #[test]
    fn clamped_to_unit_square() {
        let w = SynthWorld { concept_mean: (0.99, -0.99), noise_scale: 0.5, ..Default::default() };
        assert!(synth_generate(&w, 10, 10).iter().all(|s| s.ts.abs() <= 1.0 && s.is_.abs() <= 1.0));
    }

    #[test]
    fn correlation_shapes_noise() {
        let w = SynthWorld { correlation: -0.9, noise_scale: 0.05, ..Default::default() };
        let pts = synth_points(&w, 100, 10);
        let n = pts.len() as f64;
        let (mt, mi) = pts.iter().fold((0.0, 0.0), |a, p| (a.0 + p.0 / n, a.1 + p.1 / n));
        let cov: f64 = pts.iter().map(|p| (p.0 - mt) * (p.1 - mi)).sum::<f64>() / n;
        let vt: f64 = pts.iter().map(|p| (p.0 - mt).powi(2)).sum::<f64>() / n;
        let vi: f64 = pts.iter().map(|p| (p.1 - mi).powi(2)).sum::<f64>() / n;
        assert!((cov / (vt * vi).sqrt() + 0.9).abs() < 0.05);
    }

    #[test]
    fn update_examples() {
        let w = SynthWorld::default();
        let moved = synth_update(&w, &[pair(0.1, 0.0), pair(0.3, 0.0)]);
        assert!((moved.concept_mean.0 - 0.26).abs() < 1e-15);
        assert_eq!(moved.concept_mean.1, 0.75);
        let moved = synth_update(&w, &[pair(0.0, 0.2)]);
        assert_eq!(moved.concept_mean.0, 0.25);
        assert!((moved.concept_mean.1 - 0.76).abs() < 1e-15);
        assert_eq!(synth_update(&w, &[]), w);
        assert_eq!(synth_update(&w, &[pair(0.1, 0.1), pair(-0.1, -0.1)]), w);
    }

    #[test]
    fn mixed_cone_selection_moves_inside_cone() {
        let w = SynthWorld { noise_scale: 0.05, ..Default::default() };
        let groups = group_by_prompt(synth_generate(&w, 50, 10));
        let sel = cone_select(&groups, -10.0, 80.0, Execution::Sequential).unwrap();
        let moved = synth_update(&w, &sel.pairs);
        let (dt, di) = (moved.concept_mean.0 - w.concept_mean.0, moved.concept_mean.1 - w.concept_mean.1);
        // Oracle: vector mean of the selected deltas, computed independently.
        let n = sel.pairs.len() as f64;
        let ot: f64 = sel.pairs.iter().map(|p| p.delta_ts).sum::<f64>() / n;
        let oi: f64 = sel.pairs.iter().map(|p| p.delta_is).sum::<f64>() / n;
        let oracle = oi.atan2(ot).to_degrees();
        let got = angle_deg(dt, di);
        assert!((got - oracle).abs() < 1e-6);
        assert!(-10.0 < got && got < 80.0);
        assert!(((dt * dt + di * di).sqrt() - w.drift_rate).abs() < 1e-12);
    }
}
