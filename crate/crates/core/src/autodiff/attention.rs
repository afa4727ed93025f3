//! Grouped-query scaled-dot-product attention and rotary position kernels.
//!
//! Inputs are packed per batch element: queries are `[batch·lq, heads·head_dim]`,
//! keys and values are `[batch·lk, kv_heads·head_dim]`. Query head `h` reads
//! key/value head `h / (heads / kv_heads)`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct AttnShape {
    pub batch: usize,
    pub lq: usize,
    pub lk: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    /// Number of valid keys per batch element; `None` means all `lk`.
    pub key_len: Option<Vec<usize>>,
}

impl AttnShape {
    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.kv_heads == 0 || self.heads % self.kv_heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must be a positive multiple of kv_heads ({})",
                self.heads, self.kv_heads
            )));
        }
        if let Some(kl) = &self.key_len {
            if kl.len() != self.batch || kl.iter().any(|&l| l == 0 || l > self.lk) {
                return Err(Error::Precondition(format!(
                    "key lengths {kl:?} invalid for batch {} with {} keys",
                    self.batch, self.lk
                )));
            }
        }
        Ok(())
    }

    pub fn group(&self) -> usize {
        self.heads / self.kv_heads
    }

    fn valid_keys(&self, b: usize, i: usize) -> usize {
        let kl = self.key_len.as_ref().map_or(self.lk, |v| v[b]);
        if self.causal {
            kl.min(i + 1)
        } else {
            kl
        }
    }
}

/// Returns `(output, probabilities[batch, heads, lq, lk])`.
pub(crate) fn attention_forward<T: Scalar>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
) -> (Vec<T>, Vec<T>) {
    let hd = s.head_dim;
    let qw = s.heads * hd;
    let kw = s.kv_heads * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut out = vec![T::zero(); s.batch * s.lq * qw];
    let mut probs = vec![T::zero(); s.batch * s.heads * s.lq * s.lk];
    let mut row = vec![T::zero(); s.lk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let g = h / s.group();
            for i in 0..s.lq {
                let qrow = &q[(b * s.lq + i) * qw + h * hd..][..hd];
                let nk = s.valid_keys(b, i);
                let mut max = T::neg_infinity();
                for (j, r) in row.iter_mut().enumerate().take(nk) {
                    let krow = &k[(b * s.lk + j) * kw + g * hd..][..hd];
                    let dot: T = qrow.iter().zip(krow).map(|(&a, &c)| a * c).sum();
                    *r = dot * scale;
                    max = max.max(*r);
                }
                let mut denom = T::zero();
                for r in row.iter_mut().take(nk) {
                    *r = (*r - max).exp();
                    denom += *r;
                }
                let p = &mut probs[((b * s.heads + h) * s.lq + i) * s.lk..][..s.lk];
                let orow = &mut out[(b * s.lq + i) * qw + h * hd..][..hd];
                for j in 0..nk {
                    let pj = row[j] / denom;
                    p[j] = pj;
                    let vrow = &v[(b * s.lk + j) * kw + g * hd..][..hd];
                    for (o, &vv) in orow.iter_mut().zip(vrow) {
                        *o += pj * vv;
                    }
                }
            }
        }
    }
    (out, probs)
}

/// Gradients `(dq, dk, dv)` given upstream `dout`.
pub(crate) fn attention_backward<T: Scalar>(
    s: &AttnShape,
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    dout: &[T],
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let hd = s.head_dim;
    let qw = s.heads * hd;
    let kw = s.kv_heads * hd;
    let scale = T::one() / T::lit(hd as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); s.lk];
    for b in 0..s.batch {
        for h in 0..s.heads {
            let g = h / s.group();
            for i in 0..s.lq {
                let nk = s.valid_keys(b, i);
                let p = &probs[((b * s.heads + h) * s.lq + i) * s.lk..][..s.lk];
                let drow = &dout[(b * s.lq + i) * qw + h * hd..][..hd];
                let mut weighted = T::zero();
                for j in 0..nk {
                    let vrow = &v[(b * s.lk + j) * kw + g * hd..][..hd];
                    dp[j] = drow.iter().zip(vrow).map(|(&a, &c)| a * c).sum();
                    weighted += p[j] * dp[j];
                    let dvrow = &mut dv[(b * s.lk + j) * kw + g * hd..][..hd];
                    for (d, &o) in dvrow.iter_mut().zip(drow) {
                        *d += p[j] * o;
                    }
                }
                let qoff = (b * s.lq + i) * qw + h * hd;
                for j in 0..nk {
                    let ds = p[j] * (dp[j] - weighted) * scale;
                    if ds == T::zero() {
                        continue;
                    }
                    let koff = (b * s.lk + j) * kw + g * hd;
                    for t in 0..hd {
                        dq[qoff + t] += ds * k[koff + t];
                        dk[koff + t] += ds * q[qoff + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Rotary position encoding with base 10000, half-split pairing `(t, t + head_dim/2)`.
/// Rows are `[batch·len, n_heads·head_dim]`; the position of a row is `row % len`.
#[derive(Clone, Debug)]
pub struct Rope<T> {
    pub len: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    cos: Vec<T>,
    sin: Vec<T>,
}

impl<T: Scalar> Rope<T> {
    pub const BASE: f64 = 10_000.0;

    pub fn new(len: usize, n_heads: usize, head_dim: usize) -> Result<Self> {
        if head_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "rotary encoding needs an even head dimension, got {head_dim}"
            )));
        }
        let half = head_dim / 2;
        let mut cos = Vec::with_capacity(len * half);
        let mut sin = Vec::with_capacity(len * half);
        for pos in 0..len {
            for t in 0..half {
                let freq = Self::BASE.powf(-(2.0 * t as f64) / head_dim as f64);
                let angle = pos as f64 * freq;
                cos.push(T::lit(angle.cos()));
                sin.push(T::lit(angle.sin()));
            }
        }
        Ok(Self {
            len,
            n_heads,
            head_dim,
            cos,
            sin,
        })
    }

    /// Rotates forward (`inverse = false`) or applies the transpose rotation,
    /// which is the backward map.
    pub(crate) fn apply(&self, x: &[T], inverse: bool) -> Vec<T> {
        let half = self.head_dim / 2;
        let width = self.n_heads * self.head_dim;
        let mut out = x.to_vec();
        for (r, row) in out.chunks_exact_mut(width).enumerate() {
            let pos = r % self.len;
            let cs = &self.cos[pos * half..][..half];
            let sn = &self.sin[pos * half..][..half];
            for head in row.chunks_exact_mut(self.head_dim) {
                let (lo, hi) = head.split_at_mut(half);
                for t in 0..half {
                    let (a, b) = (lo[t], hi[t]);
                    let s = if inverse { -sn[t] } else { sn[t] };
                    lo[t] = a * cs[t] - b * s;
                    hi[t] = a * s + b * cs[t];
                }
            }
        }
        out
    }
}
