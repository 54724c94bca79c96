// SPDX-License-Identifier: MIT OR Apache-2.0

//! Architecture hyperparameters of a Llama-style decoder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Frequency rescaling applied to rotary embeddings for long-context
/// checkpoints (the `llama3` scheme).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RopeScaling {
    pub factor: f64,
    pub low_freq_factor: f64,
    pub high_freq_factor: f64,
    pub original_max_position_embeddings: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_context: usize,
    pub rope_base: f64,
    pub norm_epsilon: f64,
    #[serde(default)]
    pub tie_embeddings: bool,
    #[serde(default)]
    pub rope_scaling: Option<RopeScaling>,
}

/// The subset of a Hugging Face `config.json` we understand.
#[derive(Debug, Deserialize)]
struct HfConfig {
    num_hidden_layers: usize,
    num_attention_heads: usize,
    num_key_value_heads: Option<usize>,
    hidden_size: usize,
    head_dim: Option<usize>,
    intermediate_size: usize,
    vocab_size: usize,
    max_position_embeddings: usize,
    #[serde(default = "default_rope_theta")]
    rope_theta: f64,
    #[serde(default = "default_rms_eps")]
    rms_norm_eps: f64,
    #[serde(default)]
    tie_word_embeddings: bool,
    rope_scaling: Option<HfRopeScaling>,
}

#[derive(Debug, Deserialize)]
struct HfRopeScaling {
    #[serde(alias = "type")]
    rope_type: Option<String>,
    factor: Option<f64>,
    low_freq_factor: Option<f64>,
    high_freq_factor: Option<f64>,
    original_max_position_embeddings: Option<f64>,
}

fn default_rope_theta() -> f64 {
    10_000.0
}

fn default_rms_eps() -> f64 {
    1e-5
}

impl ModelConfig {
    /// Parse a Hugging Face style `config.json` document.
    pub fn from_hf_json(text: &str) -> Result<Self> {
        let hf: HfConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config.json: {e}")))?;
        let rope_scaling = match hf.rope_scaling {
            Some(s) if s.rope_type.as_deref() == Some("llama3") => Some(RopeScaling {
                factor: s.factor.unwrap_or(1.0),
                low_freq_factor: s.low_freq_factor.unwrap_or(1.0),
                high_freq_factor: s.high_freq_factor.unwrap_or(4.0),
                original_max_position_embeddings: s.original_max_position_embeddings.unwrap_or(8192.0),
            }),
            Some(s) => {
                return Err(Error::Config(format!(
                    "unsupported rope_scaling type {:?}",
                    s.rope_type
                )))
            }
            None => None,
        };
        let config = ModelConfig {
            n_layers: hf.num_hidden_layers,
            n_heads: hf.num_attention_heads,
            n_kv_heads: hf.num_key_value_heads.unwrap_or(hf.num_attention_heads),
            d_model: hf.hidden_size,
            d_head: hf.head_dim.unwrap_or(hf.hidden_size / hf.num_attention_heads.max(1)),
            d_ff: hf.intermediate_size,
            vocab_size: hf.vocab_size,
            max_context: hf.max_position_embeddings,
            rope_base: hf.rope_theta,
            norm_epsilon: hf.rms_norm_eps,
            tie_embeddings: hf.tie_word_embeddings,
            rope_scaling,
        };
        config.validate()?;
        Ok(config)
    }

    /// Render as a Hugging Face style `config.json` document.
    pub fn to_hf_json(&self) -> String {
        let mut value = serde_json::json!({
            "architectures": ["LlamaForCausalLM"],
            "num_hidden_layers": self.n_layers,
            "num_attention_heads": self.n_heads,
            "num_key_value_heads": self.n_kv_heads,
            "hidden_size": self.d_model,
            "head_dim": self.d_head,
            "intermediate_size": self.d_ff,
            "vocab_size": self.vocab_size,
            "max_position_embeddings": self.max_context,
            "rope_theta": self.rope_base,
            "rms_norm_eps": self.norm_epsilon,
            "tie_word_embeddings": self.tie_embeddings,
        });
        if let Some(s) = self.rope_scaling {
            value["rope_scaling"] = serde_json::json!({
                "rope_type": "llama3",
                "factor": s.factor,
                "low_freq_factor": s.low_freq_factor,
                "high_freq_factor": s.high_freq_factor,
                "original_max_position_embeddings": s.original_max_position_embeddings,
            });
        }
        value.to_string()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.n_layers == 0 || self.n_heads == 0 || self.d_head == 0 || self.d_model == 0 {
            return fail("layer, head, and width counts must be positive".into());
        }
        if self.n_kv_heads == 0 || self.n_heads % self.n_kv_heads != 0 {
            return fail(format!(
                "n_kv_heads={} must divide n_heads={}",
                self.n_kv_heads, self.n_heads
            ));
        }
        if self.d_head % 2 != 0 {
            return fail(format!("d_head={} must be even for rotary embeddings", self.d_head));
        }
        if self.max_context == 0 {
            return fail("max_context must be at least 1".into());
        }
        if self.vocab_size == 0 {
            return fail("vocab_size must be positive".into());
        }
        let positive = |x: f64| x.is_finite() && x > 0.0;
        if !positive(self.rope_base) || !positive(self.norm_epsilon) {
            return fail("rope_base and norm_epsilon must be positive".into());
        }
        Ok(())
    }

    /// Total number of attention heads across all layers.
    pub fn head_census(&self) -> usize {
        self.n_layers * self.n_heads
    }

    /// Query heads sharing one key/value head.
    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn q_dim(&self) -> usize {
        self.n_heads * self.d_head
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.d_head
    }
}
