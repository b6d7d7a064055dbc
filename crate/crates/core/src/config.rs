//! JSON run configuration and the manifest written next to every output.
//!
//! A run config has one mandatory field, `seed`, and optional sections
//! `model`, `train`, `data`, `eval` and `diagnostics`. Unknown keys are
//! rejected. All randomness derives from the top-level seed through named
//! substreams, so section-level seed fields are not accepted.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attention::Variant;
use crate::data::CorpusKind;
use crate::error::{bail, CocaError, Result};
use crate::evaluation::{PasskeyTemplate, DEFAULT_PASSKEY_SAMPLES, DEFAULT_STRIDE};
use crate::model::ModelConfig;
use crate::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// `desk`, `tiny` or `paper-350m`; the remaining fields override it.
    pub preset: String,
    pub variant: Variant,
    pub n_layers: Option<usize>,
    pub d_model: Option<usize>,
    pub n_heads: Option<usize>,
    pub max_seq: Option<usize>,
    pub vocab_size: Option<usize>,
    pub rope_base: Option<f64>,
    pub mlp_ratio: Option<f64>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: "desk".into(),
            variant: Variant::Coca,
            n_layers: None,
            d_model: None,
            n_heads: None,
            max_seq: None,
            vocab_size: None,
            rope_base: None,
            mlp_ratio: None,
        }
    }
}

impl ModelSection {
    pub fn build(&self, seed: u64) -> Result<ModelConfig> {
        let mut c = ModelConfig::preset(&self.preset, self.variant, seed)?;
        c.n_layers = self.n_layers.unwrap_or(c.n_layers);
        c.d_model = self.d_model.unwrap_or(c.d_model);
        c.n_heads = self.n_heads.unwrap_or(c.n_heads);
        c.max_seq = self.max_seq.unwrap_or(c.max_seq);
        c.vocab_size = self.vocab_size.unwrap_or(c.vocab_size);
        c.rope_base = self.rope_base.unwrap_or(c.rope_base);
        c.mlp_ratio = self.mlp_ratio.unwrap_or(c.mlp_ratio);
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: CorpusKind,
    pub tokens: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { kind: CorpusKind::Keyvalue, tokens: 1_300_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub stride: usize,
    pub ppl_contexts: Vec<usize>,
    pub ppl_docs: usize,
    pub ppl_doc_tokens: usize,
    pub passkey_lengths: Vec<usize>,
    pub passkey_n: usize,
    pub passkey_template: PasskeyTemplate,
    pub ntk_kappa: f64,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            stride: DEFAULT_STRIDE,
            ppl_contexts: vec![64, 128, 256, 512],
            ppl_docs: 8,
            ppl_doc_tokens: 1025,
            // 2x, 4x, 8x and 16x the desk training length
            passkey_lengths: vec![128, 256, 512, 1024],
            passkey_n: DEFAULT_PASSKEY_SAMPLES,
            passkey_template: PasskeyTemplate::Compact,
            ntk_kappa: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiagnosticsSection {
    pub head_dim: usize,
    pub rope_base: f64,
    pub s_max: usize,
    pub decay_s_max: usize,
    pub theta0: f64,
}

impl Default for DiagnosticsSection {
    fn default() -> Self {
        Self { head_dim: 64, rope_base: crate::rotary::DEFAULT_BASE, s_max: 512, decay_s_max: 4096, theta0: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub diagnostics: DiagnosticsSection,
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            seed,
            model: ModelSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
            eval: EvalSection::default(),
            diagnostics: DiagnosticsSection::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value =
            serde_json::from_str(text).map_err(|e| CocaError::Config(format!("invalid JSON: {e}")))?;
        if raw.get("train").and_then(|t| t.get("seed")).is_some() {
            bail!(Config, "field `train.seed` is not allowed; set the top-level `seed`");
        }
        let mut cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| CocaError::Config(format!("invalid run config: {e}")))?;
        cfg.train.seed = substream_seed(cfg.seed, "train");
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CocaError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config()?;
        self.train.validate()?;
        if self.eval.stride == 0 || self.eval.passkey_n == 0 {
            bail!(Config, "eval.stride and eval.passkey_n must be positive");
        }
        Ok(())
    }

    pub fn model_config(&self) -> Result<ModelConfig> {
        self.model.build(substream_seed(self.seed, "model"))
    }

    pub fn data_seed(&self) -> u64 {
        substream_seed(self.seed, "data")
    }

    pub fn eval_seed(&self) -> u64 {
        substream_seed(self.seed, "eval")
    }

    pub fn diag_seed(&self) -> u64 {
        substream_seed(self.seed, "diag")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        sha256_hex(serde_json::to_string(self).expect("config serialises").as_bytes())
    }
}

/// Seed of the named substream `name` of `seed`.
pub fn substream_seed(seed: u64, name: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(name.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Current git revision of the working directory, if any.
pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub ntk_kappa: Option<f64>,
    pub git_revision: Option<String>,
    pub outputs: Vec<String>,
    #[serde(default)]
    pub details: serde_json::Value,
}

impl Manifest {
    pub fn new(command: &str, config_hash: String, seed: u64) -> Self {
        Self {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            config_hash,
            seed,
            ntk_kappa: None,
            git_revision: git_revision(),
            outputs: Vec::new(),
            details: serde_json::Value::Null,
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(self)? + "\n")?;
        Ok(())
    }
}
