//! Run configuration: one flat JSON document, validated up front.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    PlainAscent,
    /// Adaptive moments with decoupled weight decay.
    Adamw,
}

/// Every field is required; there are no serde defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub profile: String,
    pub seed: u64,
    pub feature_dim: usize,
    pub hidden_dim: usize,
    pub n_objects: usize,
    pub n_concrete: usize,
    pub n_abstract: usize,
    pub group_size: usize,
    /// Query groups averaged into one update.
    pub batch_size: usize,
    pub clip_epsilon: f64,
    pub kl_coeff: f64,
    pub lr_rlvr_phase1: f64,
    pub lr_rlvr_phase2: f64,
    pub lr_rlmt: f64,
    pub epochs_rlvr_phase1: usize,
    pub epochs_rlvr_phase2: usize,
    pub epochs_rlmt: usize,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub init_scale: f64,
    pub max_think_len: usize,
    pub max_answer_len: usize,
    pub grammar_mask: bool,
    pub theta_compliance: f64,
    pub theta_consistency: f64,
    pub theta_quality: f64,
    pub bt_scale: f64,
    pub samples_per_category: usize,
    pub test_prompts_per_instruction: usize,
    pub diagnostic_samples: usize,
}

impl RunConfig {
    /// Toy-scale profile used by the acceptance runs.
    pub fn desk() -> Self {
        RunConfig {
            profile: "desk".into(),
            seed: 0,
            feature_dim: 16,
            hidden_dim: 32,
            n_objects: 10,
            n_concrete: 16,
            n_abstract: 8,
            group_size: 6,
            batch_size: 1,
            clip_epsilon: 0.2,
            kl_coeff: 0.04,
            lr_rlvr_phase1: 1e-4,
            lr_rlvr_phase2: 3e-4,
            lr_rlmt: 1e-3,
            epochs_rlvr_phase1: 10,
            epochs_rlvr_phase2: 10,
            epochs_rlmt: 10,
            optimizer: OptimizerKind::Adamw,
            weight_decay: 0.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            init_scale: 0.1,
            max_think_len: 8,
            max_answer_len: 9,
            grammar_mask: true,
            theta_compliance: 0.6,
            theta_consistency: 0.3,
            theta_quality: 0.7,
            bt_scale: 1.0,
            samples_per_category: 50,
            test_prompts_per_instruction: 3,
            diagnostic_samples: 16,
        }
    }

    /// Published 1.5B-model hyperparameters on desk-sized worlds.
    pub fn reference() -> Self {
        RunConfig {
            profile: "reference".into(),
            lr_rlvr_phase1: 1e-6,
            lr_rlvr_phase2: 3e-6,
            lr_rlmt: 1e-6,
            ..Self::desk()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let config: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("cannot parse config: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.feature_dim < 8 {
            return fail(format!("feature_dim {} < 8", self.feature_dim));
        }
        if self.hidden_dim < 8 {
            return fail(format!("hidden_dim {} < 8", self.hidden_dim));
        }
        if self.n_objects == 0 || self.n_concrete == 0 || self.n_abstract == 0 {
            return fail("role counts must be positive".into());
        }
        if self.group_size < 2 {
            return fail(format!("group_size {} < 2", self.group_size));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be >= 1".into());
        }
        if !(self.clip_epsilon > 0.0 && self.clip_epsilon < 1.0) {
            return fail(format!("clip_epsilon {} outside (0, 1)", self.clip_epsilon));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return fail(format!("kl_coeff {} must be finite and >= 0", self.kl_coeff));
        }
        for (name, lr) in [
            ("lr_rlvr_phase1", self.lr_rlvr_phase1),
            ("lr_rlvr_phase2", self.lr_rlvr_phase2),
            ("lr_rlmt", self.lr_rlmt),
            ("weight_decay", self.weight_decay),
        ] {
            if !(lr >= 0.0 && lr.is_finite()) {
                return fail(format!("{name} {lr} must be finite and >= 0"));
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam decay rates must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be > 0".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return fail("init_scale must be > 0".into());
        }
        if self.max_think_len == 0 || self.max_answer_len == 0 {
            return fail("length caps must be >= 1".into());
        }
        for (name, t) in [
            ("theta_compliance", self.theta_compliance),
            ("theta_consistency", self.theta_consistency),
            ("theta_quality", self.theta_quality),
        ] {
            if !t.is_finite() {
                return fail(format!("{name} must be finite"));
            }
        }
        if !(self.bt_scale > 0.0 && self.bt_scale.is_finite()) {
            return fail("bt_scale must be > 0".into());
        }
        if self.samples_per_category == 0 || self.test_prompts_per_instruction == 0 || self.diagnostic_samples == 0 {
            return fail("sample counts must be >= 1".into());
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical (compact, field-ordered) serialization.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        hash_hex(canonical.as_bytes())
    }

    /// Maximum trajectory length: skeleton overhead plus both content caps.
    pub fn max_trajectory_len(&self) -> usize {
        self.max_think_len + self.max_answer_len + 5
    }
}

pub fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
