//! Composite layers built from tape primitives. All linears are bias-free.

use super::{AttnShape, Rope, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `SiLU(x·Wg) ⊙ (x·Wu) · Wd`.
pub fn swiglu_ffn<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w_gate: Var,
    w_up: Var,
    w_down: Var,
) -> Result<Var> {
    let g = tape.matmul(x, w_gate)?;
    let g = tape.silu(g);
    let u = tape.matmul(x, w_up)?;
    let h = tape.mul(g, u)?;
    tape.matmul(h, w_down)
}

/// Linear layers with SiLU between consecutive layers (none after the last).
pub fn mlp<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: &[Var]) -> Result<Var> {
    let mut h = x;
    for (i, &w) in weights.iter().enumerate() {
        h = tape.matmul(h, w)?;
        if i + 1 < weights.len() {
            h = tape.silu(h);
        }
    }
    Ok(h)
}

#[derive(Clone, Copy, Debug)]
pub struct AttnWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

#[derive(Clone, Debug)]
pub struct AttnConfig {
    pub heads: usize,
    pub kv_heads: usize,
    pub causal: bool,
    /// Rotary encoding on Q and K; only meaningful for self-attention.
    pub rope: bool,
}

impl AttnConfig {
    pub fn validate(&self, d_model: usize) -> Result<usize> {
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must be a multiple of kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model ({d_model}) must be divisible by heads ({})",
                self.heads
            )));
        }
        Ok(d_model / self.heads)
    }
}

/// Grouped-query attention over `batch` packed sequences.
///
/// `q_in` is `[batch·lq, d]`, `kv_in` is `[batch·lk, d]`; `wq`/`wo` are `d×d`,
/// `wk`/`wv` are `d×(kv_heads·head_dim)`. `key_len` masks trailing padded keys.
#[allow(clippy::too_many_arguments)]
pub fn gqa_attention<T: Scalar>(
    tape: &mut Tape<T>,
    q_in: Var,
    kv_in: Var,
    w: AttnWeights,
    cfg: &AttnConfig,
    batch: usize,
    key_len: Option<Vec<usize>>,
) -> Result<Var> {
    let d = tape.shape(q_in)[1];
    let head_dim = cfg.validate(d)?;
    let (qr, kr) = (tape.shape(q_in)[0], tape.shape(kv_in)[0]);
    if batch == 0 || qr % batch != 0 || kr % batch != 0 {
        return Err(Error::shape("gqa_attention", &[qr, d], &[kr, batch]));
    }
    let (lq, lk) = (qr / batch, kr / batch);
    let mut q = tape.matmul(q_in, w.wq)?;
    let mut k = tape.matmul(kv_in, w.wk)?;
    let v = tape.matmul(kv_in, w.wv)?;
    if cfg.rope {
        q = tape.rope(q, Rope::new(lq, cfg.heads, head_dim)?)?;
        k = tape.rope(k, Rope::new(lk, cfg.kv_heads, head_dim)?)?;
    }
    let shape = AttnShape {
        batch,
        lq,
        lk,
        heads: cfg.heads,
        kv_heads: cfg.kv_heads,
        head_dim,
        causal: cfg.causal,
        key_len,
    };
    let o = tape.attention(q, k, v, shape)?;
    tape.matmul(o, w.wo)
}
