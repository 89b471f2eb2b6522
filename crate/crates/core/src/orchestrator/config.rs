use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use super::clients::ClientEndpoints;
use crate::embedding::DEFAULT_DIM;
use crate::pairing::{Cone, SelectionPolicy, SelectionRule};

/// Rounds above this still run, but [`CampaignConfig::validate`] warns.
pub const MAX_RECOMMENDED_ROUNDS: u32 = 10;

/// Named trainer parameter sets, passed through to the trainer untouched.
pub fn trainer_profile(name: &str) -> Option<serde_json::Value> {
    match name {
        "sd2" => Some(serde_json::json!({
            "name": "sd2",
            "finetune": "full-unet",
            "beta": 5000.0,
            "learning_rate": 2.5e-6,
            "batch_size": 256
        })),
        "sdxl-lora" => Some(serde_json::json!({
            "name": "sdxl-lora",
            "finetune": "lora",
            "lora_rank": 4,
            "beta": 5000.0,
            "learning_rate": 6.4e-5,
            "batch_size": 64
        })),
        _ => None,
    }
}

fn default_n_prompts() -> usize {
    1000
}
fn default_m() -> usize {
    10
}
fn default_rounds() -> u32 {
    2
}
fn default_epochs() -> usize {
    5
}
fn default_batch() -> usize {
    256
}
fn default_dim() -> usize {
    DEFAULT_DIM
}
fn default_profile() -> serde_json::Value {
    trainer_profile("sd2").expect("built-in profile")
}
fn default_checkpoint() -> String {
    "init".into()
}
fn default_policy() -> SelectionPolicy {
    SelectionPolicy::new(SelectionRule::cone(Cone::MIX))
}

/// Campaign definition, echoed verbatim to `campaign.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CampaignConfig {
    pub concept_id: String,
    #[serde(default = "default_n_prompts")]
    pub n_prompts: usize,
    #[serde(default = "default_m")]
    pub m_per_prompt: usize,
    #[serde(default = "default_rounds")]
    pub rounds: u32,
    #[serde(default = "default_policy")]
    pub policy: SelectionPolicy,
    #[serde(default = "default_epochs")]
    pub epochs_per_pair: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_dim")]
    pub dim: usize,
    #[serde(default = "default_profile")]
    pub trainer_profile: serde_json::Value,
    #[serde(default)]
    pub clients: ClientEndpoints,
    /// PROMPTS-JSONL to draw the campaign prompts from.
    pub prompts_path: PathBuf,
    /// EMB-JSONL with the concept's reference image embeddings.
    pub refs_path: PathBuf,
    #[serde(default = "default_checkpoint")]
    pub initial_checkpoint: String,
    #[serde(default)]
    pub seed: u64,
    /// Draw a fresh prompt subset every round instead of reusing round 0's.
    #[serde(default)]
    pub resample_prompts: bool,
}

impl CampaignConfig {
    pub fn new(concept_id: impl Into<String>, prompts_path: PathBuf, refs_path: PathBuf) -> Self {
        Self {
            concept_id: concept_id.into(),
            n_prompts: default_n_prompts(),
            m_per_prompt: default_m(),
            rounds: default_rounds(),
            policy: default_policy(),
            epochs_per_pair: default_epochs(),
            batch_size: default_batch(),
            dim: default_dim(),
            trainer_profile: default_profile(),
            clients: ClientEndpoints::default(),
            prompts_path,
            refs_path,
            initial_checkpoint: default_checkpoint(),
            seed: 0,
            resample_prompts: false,
        }
    }

    /// Hard errors, or a list of warnings for a runnable config.
    pub fn validate(&self) -> Result<Vec<String>, String> {
        let counts = [
            ("n_prompts", self.n_prompts),
            ("m_per_prompt", self.m_per_prompt),
            ("epochs_per_pair", self.epochs_per_pair),
            ("batch_size", self.batch_size),
            ("dim", self.dim),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(format!("{name} must be positive"));
            }
        }
        if self.rounds == 0 {
            return Err("rounds must be at least 1".into());
        }
        if self.concept_id.trim().is_empty() {
            return Err("concept_id is empty".into());
        }
        if self.initial_checkpoint.trim().is_empty() {
            return Err("initial_checkpoint is empty".into());
        }
        self.policy.validate().map_err(|e| e.to_string())?;
        let mut warnings = Vec::new();
        if self.rounds > MAX_RECOMMENDED_ROUNDS {
            warnings.push(format!(
                "{} rounds requested; more than {MAX_RECOMMENDED_ROUNDS} tends to drift far from the reference model",
                self.rounds
            ));
        }
        if self.m_per_prompt < 2 {
            warnings.push("m_per_prompt < 2 yields no candidate pairs".into());
        }
        Ok(warnings)
    }
}

/// `⌈epochs_per_pair · n_pairs / batch_size⌉`: optimizer steps so that every
/// pair is seen `epochs_per_pair` times.
pub fn compute_training_steps(n_pairs: usize, batch_size: usize, epochs_per_pair: usize) -> u64 {
    let samples = epochs_per_pair as u64 * n_pairs as u64;
    let batch = batch_size.max(1) as u64;
    samples.div_ceil(batch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn training_steps_examples() {
        assert_eq!(compute_training_steps(25_600, 256, 5), 500);
        assert_eq!(compute_training_steps(1, 1, 1), 1);
        assert_eq!(compute_training_steps(100, 64, 5), 8);
    }

    #[test]
    fn defaults_and_validation() {
        let c = CampaignConfig::new("dog6", "p.jsonl".into(), "r.jsonl".into());
        assert_eq!((c.n_prompts, c.m_per_prompt, c.rounds, c.epochs_per_pair), (1000, 10, 2, 5));
        assert!(c.validate().unwrap().is_empty());
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<CampaignConfig>(&json).unwrap(), c);

        let minimal: CampaignConfig = serde_json::from_str(
            r#"{"concept_id":"dog","prompts_path":"p","refs_path":"r"}"#,
        )
        .unwrap();
        assert_eq!(minimal.batch_size, 256);
        assert_eq!(minimal.trainer_profile["beta"], 5000.0);

        let mut bad = c.clone();
        bad.rounds = 0;
        assert!(bad.validate().is_err());
        let mut many = c.clone();
        many.rounds = 11;
        assert_eq!(many.validate().unwrap().len(), 1);
        let mut cone = c;
        cone.policy = SelectionPolicy::new(SelectionRule::Cone { c1_deg: 10.0, c2_deg: 0.0 });
        assert!(cone.validate().is_err());
    }

    #[test]
    fn profiles() {
        let sdxl = trainer_profile("sdxl-lora").unwrap();
        assert_eq!(sdxl["learning_rate"], 6.4e-5);
        assert_eq!(sdxl["batch_size"], 64);
        assert_eq!(sdxl["lora_rank"], 4);
        assert_eq!(trainer_profile("sd2").unwrap()["learning_rate"], 2.5e-6);
        assert!(trainer_profile("other").is_none());
    }
}
