//! A softmax policy over a handful of outcomes, each pinned to a fixed
//! `(ts, is)` coordinate, trained by gradient descent on the mean DPO loss.

use super::dpo::{dpo_grad, dpo_pair_loss, sigmoid, DpoError, DpoInputs};

/// Outcome spaces are kept small so enumeration oracles stay cheap.
pub const MAX_OUTCOMES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct ToyPolicy {
    pub logits: Vec<f64>,
    /// `(ts, is)` of each outcome.
    pub coords: Vec<(f64, f64)>,
}

impl ToyPolicy {
    pub fn uniform(coords: Vec<(f64, f64)>) -> Self {
        Self {
            logits: vec![0.0; coords.len()],
            coords,
        }
    }

    pub fn len(&self) -> usize {
        self.logits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.is_empty()
    }

    pub fn log_probs(&self) -> Vec<f64> {
        let max = self.logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + self.logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        self.logits.iter().map(|l| l - lse).collect()
    }

    pub fn probs(&self) -> Vec<f64> {
        self.log_probs().into_iter().map(f64::exp).collect()
    }

    /// Probability-weighted `(ts, is)`.
    pub fn expected_scores(&self) -> (f64, f64) {
        self.probs()
            .iter()
            .zip(&self.coords)
            .fold((0.0, 0.0), |(t, i), (p, (ts, is_))| (t + p * ts, i + p * is_))
    }

    fn inputs(&self, reference: &[f64], lp: &[f64], (w, l): (usize, usize)) -> DpoInputs {
        DpoInputs {
            lw_theta: lp[w],
            lw_ref: reference[w],
            ll_theta: lp[l],
            ll_ref: reference[l],
        }
    }

    /// Mean DPO loss over `pairs` against `reference`.
    pub fn mean_loss(&self, reference: &ToyPolicy, pairs: &[(usize, usize)], beta: f64) -> Result<f64, DpoError> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let (lp, rp) = (self.log_probs(), reference.log_probs());
        let mut sum = 0.0;
        for &p in pairs {
            sum += dpo_pair_loss(self.inputs(&rp, &lp, p), beta)?;
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Mean `σ(z)` over `pairs`: the implied probability that each winner
    /// is preferred.
    pub fn mean_preference(&self, reference: &ToyPolicy, pairs: &[(usize, usize)], beta: f64) -> Result<f64, DpoError> {
        if pairs.is_empty() {
            return Ok(0.0);
        }
        let (lp, rp) = (self.log_probs(), reference.log_probs());
        let mut sum = 0.0;
        for &p in pairs {
            sum += sigmoid(self.inputs(&rp, &lp, p).margin(beta)?);
        }
        Ok(sum / pairs.len() as f64)
    }

    /// Gradient of [`ToyPolicy::mean_loss`] with respect to the logits.
    ///
    /// `log p_k = θ_k − logsumexp(θ)`, so the normaliser terms of winner and
    /// loser cancel and only their own logits move.
    pub fn loss_gradient(&self, reference: &ToyPolicy, pairs: &[(usize, usize)], beta: f64) -> Result<Vec<f64>, DpoError> {
        let mut grad = vec![0.0; self.len()];
        if pairs.is_empty() {
            return Ok(grad);
        }
        let (lp, rp) = (self.log_probs(), reference.log_probs());
        let n = pairs.len() as f64;
        for &(w, l) in pairs {
            let g = dpo_grad(self.inputs(&rp, &lp, (w, l)), beta)?;
            grad[w] += g.d_lw_theta / n;
            grad[l] += g.d_ll_theta / n;
        }
        Ok(grad)
    }
}

/// Plain gradient descent on the mean DPO loss over outcome pairs.
pub fn toy_train(
    policy: &ToyPolicy,
    reference: &ToyPolicy,
    pairs: &[(usize, usize)],
    beta: f64,
    lr: f64,
    steps: usize,
) -> Result<ToyPolicy, DpoError> {
    for &(w, l) in pairs {
        for k in [w, l] {
            if k >= policy.len() || k >= reference.len() {
                return Err(DpoError::UnknownOutcome(k));
            }
        }
    }
    let mut out = policy.clone();
    if pairs.is_empty() {
        return Ok(out);
    }
    for _ in 0..steps {
        let grad = out.loss_gradient(reference, pairs, beta)?;
        for (theta, g) in out.logits.iter_mut().zip(&grad) {
            *theta -= lr * g;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pairing::{angle_deg, Cone};

    fn grid() -> ToyPolicy {
        let mut coords = Vec::new();
        for i in 0..5 {
            for j in 0..5 {
                coords.push((0.2 + 0.05 * i as f64, 0.6 + 0.05 * j as f64));
            }
        }
        ToyPolicy::uniform(coords)
    }

    #[test]
    fn probabilities_normalized() {
        let mut p = grid();
        p.logits[3] = 2.5;
        p.logits[7] = -40.0;
        assert!((p.probs().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn single_pair_raises_winner_ratio() {
        let reference = grid();
        let trained = toy_train(&reference, &reference, &[(4, 9)], 1.0, 0.5, 50).unwrap();
        let (p0, p1) = (reference.probs(), trained.probs());
        assert!(p1[4] / p1[9] > p0[4] / p0[9]);
        assert!(trained.mean_preference(&reference, &[(4, 9)], 1.0).unwrap() > 0.5);
    }

    #[test]
    fn empty_pairs_unchanged_and_unknown_outcome() {
        let p = grid();
        assert_eq!(toy_train(&p, &p, &[], 10.0, 1.0, 100).unwrap(), p);
        assert_eq!(toy_train(&p, &p, &[(0, 99)], 1.0, 0.1, 1), Err(DpoError::UnknownOutcome(99)));
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let reference = grid();
        let mut p = grid();
        for (k, l) in p.logits.iter_mut().enumerate() {
            *l = ((k * 7) % 5) as f64 * 0.3 - 0.6;
        }
        let pairs = [(0, 3), (12, 7), (24, 1), (5, 6)];
        let g = p.loss_gradient(&reference, &pairs, 2.0).unwrap();
        let h = 1e-5;
        for (k, &gk) in g.iter().enumerate() {
            let mut up = p.clone();
            up.logits[k] += h;
            let mut dn = p.clone();
            dn.logits[k] -= h;
            let fd = (up.mean_loss(&reference, &pairs, 2.0).unwrap() - dn.mean_loss(&reference, &pairs, 2.0).unwrap()) / (2.0 * h);
            assert!((fd - gk).abs() <= 1e-6 * gk.abs().max(1e-3), "{k}: {fd} vs {gk}");
        }
    }

    #[test]
    fn training_does_not_lower_mean_preference() {
        let reference = grid();
        let pairs: Vec<(usize, usize)> = (0..24).map(|k| (k + 1, k)).collect();
        for beta in [1.0, 10.0] {
            let before = reference.mean_preference(&reference, &pairs, beta).unwrap();
            let trained = toy_train(&reference, &reference, &pairs, beta, 0.05 / beta, 200).unwrap();
            assert!(trained.mean_preference(&reference, &pairs, beta).unwrap() >= before);
            assert!(trained.mean_loss(&reference, &pairs, beta).unwrap() < std::f64::consts::LN_2);
        }
    }

    #[test]
    fn large_beta_small_lr_tracks_tiny_step_oracle() {
        let reference = grid();
        let pairs = [(18, 2), (23, 11), (9, 5)];
        let beta = 5000.0;
        let coarse = toy_train(&reference, &reference, &pairs, beta, 1e-8, 100).unwrap();
        let fine = toy_train(&reference, &reference, &pairs, beta, 1e-10, 10_000).unwrap();
        for (a, b) in coarse.logits.iter().zip(&fine.logits) {
            assert!(a.is_finite());
            assert!((a - b).abs() < 1e-4, "{a} vs {b}");
        }
        let moved: f64 = coarse.logits.iter().map(|l| l.abs()).fold(0.0, f64::max);
        assert!(moved > 0.0 && moved < 1.0);
    }

    #[test]
    fn cone_pairs_steer_expected_scores_into_cone() {
        // Pairs between outcomes chosen by the -IS cone push the policy's
        // expected (ts, is) in a direction inside that cone.
        let reference = grid();
        let cone = Cone::IS;
        let mut pairs = Vec::new();
        for a in 0..reference.len() {
            for b in 0..reference.len() {
                let (ta, ia) = reference.coords[a];
                let (tb, ib) = reference.coords[b];
                if (ta, ia) != (tb, ib) && cone.contains(angle_deg(ta - tb, ia - ib)) {
                    pairs.push((a, b));
                }
            }
        }
        let trained = toy_train(&reference, &reference, &pairs, 1.0, 0.5, 20).unwrap();
        let (t0, i0) = reference.expected_scores();
        let (t1, i1) = trained.expected_scores();
        assert!(cone.contains(angle_deg(t1 - t0, i1 - i0)));
    }
}
