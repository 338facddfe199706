//! Versioned JSON model container.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gru::ModelParams;

pub const FORMAT_VERSION: u32 = 1;

/// Dimensions, vocabulary fingerprint, training seed and every parameter
/// tensor (row-major).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format_version: u32,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub static_dim: usize,
    pub vocabulary_hash: String,
    pub seed: u64,
    pub params: ModelParams,
}

impl Checkpoint {
    pub fn new(params: ModelParams, vocabulary_hash: &str, seed: u64) -> Self {
        Checkpoint {
            format_version: FORMAT_VERSION,
            input_dim: params.input_dim(),
            hidden_dim: params.hidden_dim(),
            static_dim: params.static_dim(),
            vocabulary_hash: vocabulary_hash.to_string(),
            seed,
            params,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let c: Checkpoint = serde_json::from_str(text)?;
        if c.format_version != FORMAT_VERSION {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {} (expected {FORMAT_VERSION})",
                c.format_version
            )));
        }
        let p = &c.params;
        let hd = c.hidden_dim;
        let shapes_ok = p.input_dim() == c.input_dim
            && p.hidden_dim() == hd
            && p.head.w.len() == hd + c.static_dim
            && [&p.gru.w_z, &p.gru.w_r, &p.gru.w_h]
                .iter()
                .all(|w| w.len() == hd * c.input_dim)
            && [&p.gru.u_z, &p.gru.u_r, &p.gru.u_h]
                .iter()
                .all(|u| u.len() == hd * hd)
            && [&p.gru.b_z, &p.gru.b_r, &p.gru.b_h]
                .iter()
                .all(|b| b.len() == hd);
        if !shapes_ok {
            return Err(Error::Shape(
                "checkpoint tensors disagree with its dimensions".into(),
            ));
        }
        if !p.is_finite() {
            return Err(Error::NonFinite("checkpoint parameters".into()));
        }
        Ok(c)
    }

    /// Fails unless the checkpoint was trained on the given column layout.
    pub fn ensure_vocabulary(&self, vocabulary_hash: &str) -> Result<()> {
        if self.vocabulary_hash != vocabulary_hash {
            return Err(Error::Config(format!(
                "checkpoint vocabulary {} does not match {}",
                self.vocabulary_hash, vocabulary_hash
            )));
        }
        Ok(())
    }
}
