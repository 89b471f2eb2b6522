//! Pairwise DPO objective.
//!
//! ```text
//! z = β · [(log p_θ(w) − log p_ref(w)) − (log p_θ(l) − log p_ref(l))]
//! L = −log σ(z) = softplus(−z)
//! ```

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DpoError {
    #[error("non-finite DPO input")]
    NonFiniteInput,
    #[error("beta must be positive and finite, got {0}")]
    InvalidBeta(f64),
    #[error("pair references unknown outcome {0}")]
    UnknownOutcome(usize),
}

/// Log-probabilities of winner and loser under the trained and reference
/// models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoInputs {
    pub lw_theta: f64,
    pub lw_ref: f64,
    pub ll_theta: f64,
    pub ll_ref: f64,
}

impl DpoInputs {
    pub fn margin(&self, beta: f64) -> Result<f64, DpoError> {
        let vals = [self.lw_theta, self.lw_ref, self.ll_theta, self.ll_ref];
        if vals.iter().any(|v| !v.is_finite()) {
            return Err(DpoError::NonFiniteInput);
        }
        if !(beta.is_finite() && beta > 0.0) {
            return Err(DpoError::InvalidBeta(beta));
        }
        let z = beta * ((self.lw_theta - self.lw_ref) - (self.ll_theta - self.ll_ref));
        if !z.is_finite() {
            return Err(DpoError::NonFiniteInput);
        }
        Ok(z)
    }
}

/// `log(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid without overflow.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dpo_pair_loss(inputs: DpoInputs, beta: f64) -> Result<f64, DpoError> {
    Ok(softplus(-inputs.margin(beta)?))
}

/// Partial derivatives of the loss with respect to the trained model's
/// winner and loser log-probabilities.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DpoGrad {
    pub d_lw_theta: f64,
    pub d_ll_theta: f64,
}

pub fn dpo_grad(inputs: DpoInputs, beta: f64) -> Result<DpoGrad, DpoError> {
    let z = inputs.margin(beta)?;
    let g = beta * sigmoid(-z);
    Ok(DpoGrad {
        d_lw_theta: -g,
        d_ll_theta: g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;
    use proptest::prelude::*;

    fn inputs(dw: f64, dl: f64) -> DpoInputs {
        DpoInputs {
            lw_theta: dw,
            lw_ref: 0.0,
            ll_theta: dl,
            ll_ref: 0.0,
        }
    }

    #[test]
    fn zero_margin_is_ln2() {
        let x = DpoInputs { lw_theta: -3.2, lw_ref: -3.2, ll_theta: -3.2, ll_ref: -3.2 };
        for beta in [0.1, 1.0, 5000.0] {
            assert!((dpo_pair_loss(x, beta).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    #[allow(clippy::excessive_precision)]
    fn beta_5000_reference_value() {
        // 50-digit oracle: ln(1 + e^-10).
        let expected = 4.5398899216864646769487829307105596781502281788368e-5;
        let got = dpo_pair_loss(inputs(0.001, -0.001), 5000.0).unwrap();
        assert!(((got - expected) / expected).abs() < 1e-12, "{got}");
    }

    #[test]
    fn loss_vanishes_monotonically_with_margin() {
        let mut prev = f64::INFINITY;
        for k in 0..40 {
            let loss = dpo_pair_loss(inputs(k as f64 * 0.5, 0.0), 1.0).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-8);
    }

    #[test]
    fn stable_at_extreme_margins() {
        for m in [1e3, -1e3] {
            let l = dpo_pair_loss(inputs(m, 0.0), 5000.0).unwrap();
            let g = dpo_grad(inputs(m, 0.0), 5000.0).unwrap();
            assert!(l.is_finite() && g.d_lw_theta.is_finite());
        }
        assert_eq!(dpo_pair_loss(inputs(1e6, 0.0), 1.0).unwrap(), 0.0);
        assert_eq!(dpo_pair_loss(inputs(-1e6, 0.0), 1.0).unwrap(), 1e6);
    }

    #[test]
    fn input_errors() {
        assert_eq!(dpo_pair_loss(inputs(f64::NAN, 0.0), 1.0), Err(DpoError::NonFiniteInput));
        assert_eq!(dpo_grad(inputs(0.0, f64::INFINITY), 1.0), Err(DpoError::NonFiniteInput));
        assert_eq!(dpo_pair_loss(inputs(0.0, 0.0), 0.0), Err(DpoError::InvalidBeta(0.0)));
        assert_eq!(dpo_pair_loss(inputs(0.0, 0.0), -1.0), Err(DpoError::InvalidBeta(-1.0)));
    }

    #[test]
    fn gradient_examples() {
        let g = dpo_grad(inputs(0.0, 0.0), 1.0).unwrap();
        assert_eq!((g.d_lw_theta, g.d_ll_theta), (-0.5, 0.5));
    }

    /// Central differences on the loss itself.
    fn finite_diff(x: DpoInputs, beta: f64, h: f64) -> (f64, f64) {
        let f = |x| dpo_pair_loss(x, beta).unwrap();
        let dw = (f(DpoInputs { lw_theta: x.lw_theta + h, ..x }) - f(DpoInputs { lw_theta: x.lw_theta - h, ..x })) / (2.0 * h);
        let dl = (f(DpoInputs { ll_theta: x.ll_theta + h, ..x }) - f(DpoInputs { ll_theta: x.ll_theta - h, ..x })) / (2.0 * h);
        (dw, dl)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SeededRng::new(17);
        for _ in 0..1000 {
            let x = DpoInputs {
                lw_theta: rng.uniform_range(-3.0, 0.0),
                lw_ref: rng.uniform_range(-3.0, 0.0),
                ll_theta: rng.uniform_range(-3.0, 0.0),
                ll_ref: rng.uniform_range(-3.0, 0.0),
            };
            let beta = rng.uniform_range(0.1, 2.0);
            let g = dpo_grad(x, beta).unwrap();
            let (dw, dl) = finite_diff(x, beta, 1e-5);
            let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-300);
            assert!(rel(g.d_lw_theta, dw) <= 1e-6, "{g:?} vs {dw}");
            assert!(rel(g.d_ll_theta, dl) <= 1e-6);
        }
    }

    proptest! {
        #[test]
        fn loss_positive_and_monotone(dw in -5.0f64..5.0, dl in -5.0f64..5.0, beta in 0.01f64..10.0, step in 0.01f64..1.0) {
            let base = dpo_pair_loss(inputs(dw, dl), beta).unwrap();
            prop_assert!(base > 0.0);
            prop_assert!(dpo_pair_loss(inputs(dw + step, dl), beta).unwrap() < base);
            prop_assert!(dpo_pair_loss(inputs(dw, dl + step), beta).unwrap() > base);
            let g = dpo_grad(inputs(dw, dl), beta).unwrap();
            prop_assert_eq!(g.d_lw_theta, -g.d_ll_theta);
            prop_assert!(g.d_lw_theta < 0.0);
        }

        #[test]
        fn policy_equal_to_reference_gives_ln2(lw in -10.0f64..0.0, ll in -10.0f64..0.0, beta in 0.01f64..5000.0) {
            let x = DpoInputs { lw_theta: lw, lw_ref: lw, ll_theta: ll, ll_ref: ll };
            prop_assert_eq!(dpo_pair_loss(x, beta).unwrap(), std::f64::consts::LN_2);
        }
    }
}
