//! Run configuration: architecture hyperparameters, module and loss toggles,
//! optimization settings and file locations. Serialized as a flat JSON object.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash;

/// Grid-search candidate sets for the four architecture hyperparameters.
pub const EXPERTS_K_SPACE: [usize; 5] = [2, 4, 6, 8, 10];
pub const TOP_K_SPACE: [usize; 4] = [1, 2, 3, 4];
pub const EMBED_DIM_SPACE: [usize; 5] = [48, 64, 80, 96, 112];
pub const MAX_TEXT_LEN_SPACE: [usize; 5] = [20, 30, 40, 50, 60];

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Mandatory; every random choice in a run flows from it.
    pub seed: u64,

    // -- architecture --
    #[serde(default = "d_embed_dim")]
    pub embed_dim: usize,
    #[serde(default = "d_experts_k")]
    pub experts_k: usize,
    #[serde(default = "d_top_k")]
    pub top_k: usize,
    #[serde(default = "d_one")]
    pub smoe_layers: usize,
    #[serde(default = "d_hidden_mult")]
    pub expert_hidden_mult: usize,
    #[serde(default = "d_native_dim")]
    pub native_dim: usize,
    #[serde(default = "d_max_text_len")]
    pub max_text_len: usize,
    #[serde(default = "d_num_patches")]
    pub num_patches: usize,

    // -- module toggles --
    #[serde(default = "d_true")]
    pub use_smoe: bool,
    #[serde(default = "d_true")]
    pub use_intra_text: bool,
    #[serde(default = "d_true")]
    pub use_intra_visual: bool,
    #[serde(default = "d_true")]
    pub use_inter: bool,

    // -- loss toggles --
    #[serde(default = "d_true")]
    pub loss_o: bool,
    #[serde(default = "d_true")]
    pub loss_t: bool,
    #[serde(default = "d_true")]
    pub loss_v: bool,
    #[serde(default = "d_true")]
    pub loss_c: bool,

    // -- optimization --
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "d_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "d_adam_eps")]
    pub adam_eps: f64,
    /// Early-stopping patience in epochs; 0 disables early stopping.
    #[serde(default = "d_patience")]
    pub patience: usize,

    // -- encoder plug-in --
    #[serde(default = "d_encoder")]
    pub encoder: String,

    // -- mention enhancement --
    #[serde(default = "d_backend")]
    pub backend: String,
    #[serde(default)]
    pub endpoint: Option<String>,
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "d_separator")]
    pub separator: String,
    #[serde(default = "d_one")]
    pub max_inflight: usize,
    #[serde(default = "d_error_threshold")]
    pub dme_error_threshold: f64,
    #[serde(default = "d_retries")]
    pub retry_attempts: u32,
    #[serde(default = "d_backoff")]
    pub retry_backoff_ms: u64,
    /// Digest used for enhancement-cache keys. Only "fnv1a64" is implemented.
    #[serde(default = "d_context_hash")]
    pub context_hash: String,

    // -- file locations (CLI flags may override) --
    #[serde(default)]
    pub train_path: Option<String>,
    #[serde(default)]
    pub valid_path: Option<String>,
    #[serde(default)]
    pub test_path: Option<String>,
    #[serde(default)]
    pub entities_path: Option<String>,
    #[serde(default)]
    pub kb_path: Option<String>,
    #[serde(default)]
    pub cache_path: Option<String>,
}

fn d_embed_dim() -> usize {
    96
}
fn d_experts_k() -> usize {
    4
}
fn d_top_k() -> usize {
    2
}
fn d_one() -> usize {
    1
}
fn d_hidden_mult() -> usize {
    4
}
fn d_native_dim() -> usize {
    512
}
fn d_max_text_len() -> usize {
    50
}
fn d_num_patches() -> usize {
    32
}
fn d_true() -> bool {
    true
}
fn d_lr() -> f64 {
    1e-5
}
fn d_batch() -> usize {
    32
}
fn d_epochs() -> usize {
    20
}
fn d_wd() -> f64 {
    0.01
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.999
}
fn d_adam_eps() -> f64 {
    1e-8
}
fn d_patience() -> usize {
    0
}
fn d_encoder() -> String {
    "toy".into()
}
fn d_backend() -> String {
    "mock".into()
}
fn d_separator() -> String {
    "[SEP]".into()
}
fn d_error_threshold() -> f64 {
    0.1
}
fn d_retries() -> u32 {
    3
}
fn d_backoff() -> u64 {
    100
}
fn d_context_hash() -> String {
    "fnv1a64".into()
}

impl RunConfig {
    /// Baseline config for a given seed; all other fields at defaults.
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults are valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::parse(path.display().to_string(), e.line(), e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).expect("config serializes");
        std::fs::write(path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 {
            return Err(Error::Argument("embed_dim must be >= 1".into()));
        }
        if self.experts_k == 0 {
            return Err(Error::Argument("experts_k must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.experts_k {
            return Err(Error::Argument(format!(
                "top_k must satisfy 1 <= k <= K, got k={} K={}",
                self.top_k, self.experts_k
            )));
        }
        if self.smoe_layers == 0 {
            return Err(Error::Argument("smoe_layers must be >= 1".into()));
        }
        if self.max_text_len == 0 {
            return Err(Error::Argument("max_text_len must be >= 1".into()));
        }
        if self.num_patches == 0 {
            return Err(Error::Argument("num_patches must be >= 1".into()));
        }
        if self.context_hash != "fnv1a64" {
            return Err(Error::Argument(format!(
                "unsupported context_hash {:?} (only \"fnv1a64\")",
                self.context_hash
            )));
        }
        if !(self.dme_error_threshold >= 0.0 && self.dme_error_threshold <= 1.0) {
            return Err(Error::Argument(
                "dme_error_threshold must be in [0,1]".into(),
            ));
        }
        Ok(())
    }

    /// Digest of every field that changes the trainable parameter layout.
    /// Checkpoints refuse to load under a different fingerprint.
    pub fn fingerprint(&self) -> String {
        let desc = format!(
            "v1;d={};K={};k={};layers={};mult={};native={};text_len={};patches={};\
             smoe={};it={};iv={};inter={}",
            self.embed_dim,
            self.experts_k,
            self.top_k,
            self.smoe_layers,
            self.expert_hidden_mult,
            self.native_dim,
            self.max_text_len,
            self.num_patches,
            self.use_smoe,
            self.use_intra_text,
            self.use_intra_visual,
            self.use_inter,
        );
        hash::fnv1a64_hex(&desc)
    }

    /// FFN hidden width inside each expert.
    pub fn expert_hidden(&self) -> usize {
        self.expert_hidden_mult * self.embed_dim
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory() {
        let r: std::result::Result<RunConfig, _> = serde_json::from_str("{}");
        assert!(r.is_err());
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = RunConfig::with_seed(1);
        assert_eq!(cfg.embed_dim, 96);
        assert_eq!(cfg.experts_k, 4);
        assert_eq!(cfg.num_patches, 32);
        assert_eq!(cfg.separator, "[SEP]");
        assert!(cfg.use_inter && cfg.loss_c);
        cfg.validate().unwrap();
    }

    #[test]
    fn top_k_bound_enforced() {
        let mut cfg = RunConfig::with_seed(1);
        cfg.experts_k = 2;
        cfg.top_k = 3;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn fingerprint_tracks_architecture_not_optimizer() {
        let a = RunConfig::with_seed(1);
        let mut b = a.clone();
        b.learning_rate = 0.5;
        b.seed = 99;
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.experts_k = 8;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }

    #[test]
    fn unknown_fields_rejected() {
        let r: std::result::Result<RunConfig, _> =
            serde_json::from_str(r#"{"seed": 1, "not_a_field": 2}"#);
        assert!(r.is_err());
    }

    #[test]
    fn config_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("cfg.json");
        let mut cfg = RunConfig::with_seed(42);
        cfg.embed_dim = 48;
        cfg.train_path = Some("data/train.jsonl".into());
        cfg.save(&p).unwrap();
        let back = RunConfig::load(&p).unwrap();
        assert_eq!(cfg, back);
    }
}
