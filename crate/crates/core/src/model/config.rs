use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Network shape. Serialised as a flat TOML table; every field is optional
/// in the file and unknown keys are rejected.
///
/// ```toml
/// d_model = 64          # backbone width
/// n_layers = 2          # transformer blocks
/// n_heads = 4           # query heads
/// n_kv_heads = 2        # key/value heads (grouped-query attention)
/// ffn_mult = 2.6666666666666665  # FFN hidden = ceil(ffn_mult·d_model / 8)·8
/// eps = 1e-5            # RMSNorm epsilon
/// horizon = 16          # action chunk length H
/// action_dim = 14
/// state_dim = 14
/// img_feat_dim = 18
/// n_img_tokens = 16
/// lang_feat_dim = 16
/// max_lang_tokens = 8
/// t_emb_dim = 64
/// ```
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub ffn_mult: f64,
    pub eps: f64,
    pub horizon: usize,
    pub action_dim: usize,
    pub state_dim: usize,
    pub img_feat_dim: usize,
    pub n_img_tokens: usize,
    pub lang_feat_dim: usize,
    pub max_lang_tokens: usize,
    pub t_emb_dim: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    pub const DEFAULT_FFN_MULT: f64 = 8.0 / 3.0;

    /// Single-machine configuration used for all training runs.
    pub fn desk() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            ffn_mult: Self::DEFAULT_FFN_MULT,
            eps: 1e-5,
            horizon: 16,
            action_dim: 14,
            state_dim: 14,
            img_feat_dim: crate::gym::IMG_FEAT_DIM,
            n_img_tokens: crate::gym::N_IMG_TOKENS,
            lang_feat_dim: crate::gym::LANG_FEAT_DIM,
            max_lang_tokens: crate::gym::MAX_LANG_TOKENS,
            t_emb_dim: 64,
        }
    }

    /// Full-size backbone (2176 wide, 16 layers, 16/8 heads) with 48-d human
    /// actions, 196 image tokens and up to 1024 language tokens. Only used
    /// for parameter accounting.
    pub fn paper_scale() -> Self {
        Self {
            d_model: 2176,
            n_layers: 16,
            n_heads: 16,
            n_kv_heads: 8,
            ffn_mult: Self::DEFAULT_FFN_MULT,
            eps: 1e-5,
            horizon: 16,
            action_dim: 48,
            state_dim: 48,
            img_feat_dim: 2176,
            n_img_tokens: 196,
            lang_feat_dim: 4096,
            max_lang_tokens: 1024,
            t_emb_dim: 2176,
        }
    }

    /// Copy with a different action/state space (used by weight transfer).
    pub fn with_embodiment(&self, action_dim: usize, state_dim: usize) -> Self {
        Self {
            action_dim,
            state_dim,
            ..self.clone()
        }
    }

    pub fn ffn_hidden(&self) -> usize {
        let raw = (self.ffn_mult * self.d_model as f64).ceil() as usize;
        raw.div_ceil(8) * 8
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// Tokens seen by self-attention: one state token plus `horizon` action tokens.
    pub fn seq_len(&self) -> usize {
        1 + self.horizon
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("horizon", self.horizon),
            ("action_dim", self.action_dim),
            ("state_dim", self.state_dim),
            ("img_feat_dim", self.img_feat_dim),
            ("n_img_tokens", self.n_img_tokens),
            ("lang_feat_dim", self.lang_feat_dim),
            ("max_lang_tokens", self.max_lang_tokens),
            ("t_emb_dim", self.t_emb_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be >= 1")));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({}) must be divisible by n_heads ({})",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads ({}) must be divisible by n_kv_heads ({})",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head dimension {} must be even for rotary encoding",
                self.head_dim()
            )));
        }
        if self.t_emb_dim % 2 != 0 {
            return Err(Error::Config("t_emb_dim must be even".into()));
        }
        if !(self.ffn_mult > 0.0 && self.ffn_mult.is_finite()) {
            return Err(Error::Config("ffn_mult must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(s)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }
}
