//! Desk-scale verification harness.
//!
//! * [`dpo`]: the pairwise DPO loss and its analytic gradient.
//! * [`toy`]: a discrete-outcome policy trained with that loss.
//! * [`world`]: a synthetic generator whose output distribution drifts
//!   toward the mean improvement direction of the pairs it is trained on.
//! * [`backend`]: campaign clients backed by the synthetic world, so the
//!   orchestrator can run end to end without any diffusion model.
//!
//! None of this models diffusion training; it exists to test the pair
//! selection and scheduling logic.

pub mod backend;
pub mod dpo;
pub mod toy;
pub mod world;

pub use backend::SimClients;
pub use dpo::{dpo_grad, dpo_pair_loss, DpoError, DpoGrad, DpoInputs};
pub use toy::{toy_train, ToyPolicy};
pub use world::{synth_generate, synth_update, SynthWorld};
