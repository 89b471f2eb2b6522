//! Preference-pair curation for personalized text-to-image DPO.

pub mod embedding;
pub mod exec;
pub mod io;
pub mod pairing;
pub mod rng;
pub mod scoring;
pub mod evalkit;
pub mod orchestrator;
pub mod prompts;
pub mod simkit;
pub mod cli;
