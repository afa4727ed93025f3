//! The policy network: per-embodiment adapters, a transformer backbone with
//! image/language cross-attention and AdaLN flow-time conditioning, and a
//! per-embodiment action decoder.
//!
//! Parameter names carry one of the [`PREFIXES`]; the embodiment-specific
//! ones ([`REINIT_PREFIXES`]) are the only groups rebuilt when moving a
//! checkpoint to a new action space.

mod config;

pub use config::ModelConfig;

use crate::autodiff::nn::{gqa_attention, mlp, swiglu_ffn, AttnConfig, AttnWeights};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Var;
use crate::autodiff::{grad_check, GradCheckReport, Tape};
use crate::error::{Error, Result};
use crate::params::{derive_seed, Bound, InitScheme, InitSpec, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const PREFIXES: [&str; 7] = [
    "state_adapter",
    "action_adapter",
    "img_adapter",
    "lang_adapter",
    "backbone",
    "t_embed",
    "action_decoder",
];

/// Groups rebuilt for a new embodiment.
pub const REINIT_PREFIXES: [&str; 3] = ["state_adapter", "action_adapter", "action_decoder"];

/// Groups copied verbatim when transferring to a new embodiment.
pub const SHARED_PREFIXES: [&str; 4] = ["backbone", "img_adapter", "lang_adapter", "t_embed"];

/// Largest accepted flow time.
pub const TAU_MAX: f64 = 0.999;

/// Returns the module prefix of a parameter name, if it is one of [`PREFIXES`].
pub fn prefix_of(name: &str) -> Option<&'static str> {
    let head = name.split('.').next()?;
    PREFIXES
        .iter()
        .copied()
        .find(|p| *p == head && name.len() > p.len())
}

const SUBLAYERS: usize = 4;

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub scheme: InitScheme,
}

fn linear(name: String, fan_in: usize, fan_out: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![fan_in, fan_out],
        scheme: InitScheme::Uniform {
            bound: 1.0 / (fan_in as f64).sqrt(),
        },
    }
}

fn zeros(name: String, shape: Vec<usize>) -> ParamSpec {
    ParamSpec {
        name,
        shape,
        scheme: InitScheme::Zeros,
    }
}

fn ones(name: String, len: usize) -> ParamSpec {
    ParamSpec {
        name,
        shape: vec![len],
        scheme: InitScheme::Ones,
    }
}

/// Every parameter of a model with configuration `cfg`, in construction order.
pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.d_model;
    let t = cfg.t_emb_dim;
    let kv = cfg.kv_dim();
    let f = cfg.ffn_hidden();
    let mut v = Vec::new();
    for (p, input) in [
        ("state_adapter", cfg.state_dim),
        ("action_adapter", cfg.action_dim),
    ] {
        v.push(linear(format!("{p}.fc0.weight"), input, d));
        v.push(linear(format!("{p}.fc1.weight"), d, d));
        v.push(linear(format!("{p}.fc2.weight"), d, d));
    }
    for (p, input) in [
        ("img_adapter", cfg.img_feat_dim),
        ("lang_adapter", cfg.lang_feat_dim),
    ] {
        v.push(linear(format!("{p}.fc0.weight"), input, d));
        v.push(linear(format!("{p}.fc1.weight"), d, d));
    }
    v.push(linear("t_embed.fc0.weight".into(), t, t));
    v.push(linear("t_embed.fc1.weight".into(), t, t));
    for i in 0..cfg.n_layers {
        let b = format!("backbone.block{i}");
        v.push(zeros(
            format!("{b}.adaln.weight"),
            vec![t, 3 * SUBLAYERS * d],
        ));
        for j in 0..SUBLAYERS {
            v.push(ones(format!("{b}.norm{j}.weight"), d));
        }
        for a in ["self_attn", "img_attn", "lang_attn"] {
            v.push(linear(format!("{b}.{a}.wq"), d, d));
            v.push(linear(format!("{b}.{a}.wk"), d, kv));
            v.push(linear(format!("{b}.{a}.wv"), d, kv));
            v.push(linear(format!("{b}.{a}.wo"), d, d));
        }
        v.push(linear(format!("{b}.ffn.w_gate"), d, f));
        v.push(linear(format!("{b}.ffn.w_up"), d, f));
        v.push(linear(format!("{b}.ffn.w_down"), f, d));
    }
    v.push(zeros("action_decoder.adaln.weight".into(), vec![t, 2 * d]));
    v.push(ones("action_decoder.norm.weight".into(), d));
    v.push(linear("action_decoder.fc0.weight".into(), d, d));
    v.push(zeros(
        "action_decoder.fc1.weight".into(),
        vec![d, cfg.action_dim],
    ));
    v
}

/// Closed-form scalar count of a freshly initialised model.
pub fn param_count(cfg: &ModelConfig) -> u64 {
    let d = cfg.d_model as u64;
    let t = cfg.t_emb_dim as u64;
    let kv = cfg.kv_dim() as u64;
    let f = cfg.ffn_hidden() as u64;
    let adapters = (cfg.state_dim as u64 + cfg.action_dim as u64) * d
        + 4 * d * d
        + (cfg.img_feat_dim as u64 + cfg.lang_feat_dim as u64) * d
        + 2 * d * d;
    let t_embed = 2 * t * t;
    let attn = 2 * d * d + 2 * d * kv;
    let block = t * 12 * d + 4 * d + 3 * attn + 3 * d * f;
    let decoder = t * 2 * d + d + d * d + d * cfg.action_dim as u64;
    adapters + t_embed + cfg.n_layers as u64 * block + decoder
}

/// Conditioning for one example: image tokens, language tokens and proprioceptive state.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningBundle<T> {
    /// `[n_tokens, img_feat_dim]`, at most `n_img_tokens` rows.
    pub img_tokens: Tensor<T>,
    /// `[rows, lang_feat_dim]`, at most `max_lang_tokens` rows.
    pub lang_tokens: Tensor<T>,
    /// Number of leading valid rows in `lang_tokens`.
    pub lang_len: usize,
    pub state: Tensor<T>,
}

impl<T: Scalar> ConditioningBundle<T> {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (ir, ic) = (self.img_tokens.rows(), self.img_tokens.cols());
        if ic != cfg.img_feat_dim {
            return Err(Error::shape(
                "img_tokens",
                self.img_tokens.shape(),
                &[cfg.n_img_tokens, cfg.img_feat_dim],
            ));
        }
        if ir > cfg.n_img_tokens {
            return Err(Error::TooMany {
                what: "image tokens",
                got: ir,
                limit: cfg.n_img_tokens,
            });
        }
        let (lr, lc) = (self.lang_tokens.rows(), self.lang_tokens.cols());
        if lc != cfg.lang_feat_dim {
            return Err(Error::shape(
                "lang_tokens",
                self.lang_tokens.shape(),
                &[cfg.max_lang_tokens, cfg.lang_feat_dim],
            ));
        }
        if lr > cfg.max_lang_tokens {
            return Err(Error::TooMany {
                what: "language tokens",
                got: lr,
                limit: cfg.max_lang_tokens,
            });
        }
        if self.lang_len == 0 || self.lang_len > lr {
            return Err(Error::Precondition(format!(
                "lang_len {} must be in 1..={lr}",
                self.lang_len
            )));
        }
        if self.state.numel() != cfg.state_dim {
            return Err(Error::shape("state", self.state.shape(), &[cfg.state_dim]));
        }
        if !(self.img_tokens.is_finite() && self.lang_tokens.is_finite()) {
            return Err(Error::Precondition(
                "conditioning tokens must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// A packed minibatch. Image and language tokens are zero-padded to the
/// configured counts; `lang_len` masks padded language keys.
#[derive(Clone, Debug)]
pub struct Batch<T> {
    pub size: usize,
    /// `[size·horizon, action_dim]`
    pub a_tau: Tensor<T>,
    pub tau: Vec<T>,
    /// `[size·n_img_tokens, img_feat_dim]`
    pub img: Tensor<T>,
    /// `[size·max_lang_tokens, lang_feat_dim]`
    pub lang: Tensor<T>,
    pub lang_len: Vec<usize>,
    /// `[size, state_dim]`
    pub state: Tensor<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn pack(
        cfg: &ModelConfig,
        items: &[(&Tensor<T>, T, &ConditioningBundle<T>)],
    ) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Precondition("empty batch".into()));
        }
        let mut a_tau = Vec::with_capacity(items.len() * cfg.horizon * cfg.action_dim);
        let mut img = vec![T::zero(); items.len() * cfg.n_img_tokens * cfg.img_feat_dim];
        let mut lang = vec![T::zero(); items.len() * cfg.max_lang_tokens * cfg.lang_feat_dim];
        let mut state = Vec::with_capacity(items.len() * cfg.state_dim);
        let mut taus = Vec::with_capacity(items.len());
        let mut lang_len = Vec::with_capacity(items.len());
        for (b, (a, tau, c)) in items.iter().enumerate() {
            if a.shape() != [cfg.horizon, cfg.action_dim] {
                return Err(Error::shape(
                    "a_tau",
                    a.shape(),
                    &[cfg.horizon, cfg.action_dim],
                ));
            }
            c.validate(cfg)?;
            check_tau(*tau)?;
            a_tau.extend_from_slice(a.data());
            let off = b * cfg.n_img_tokens * cfg.img_feat_dim;
            img[off..off + c.img_tokens.numel()].copy_from_slice(c.img_tokens.data());
            let off = b * cfg.max_lang_tokens * cfg.lang_feat_dim;
            lang[off..off + c.lang_tokens.numel()].copy_from_slice(c.lang_tokens.data());
            state.extend_from_slice(c.state.data());
            taus.push(*tau);
            lang_len.push(c.lang_len);
        }
        let n = items.len();
        Ok(Self {
            size: n,
            a_tau: Tensor::new(vec![n * cfg.horizon, cfg.action_dim], a_tau)?,
            tau: taus,
            img: Tensor::new(vec![n * cfg.n_img_tokens, cfg.img_feat_dim], img)?,
            lang: Tensor::new(vec![n * cfg.max_lang_tokens, cfg.lang_feat_dim], lang)?,
            lang_len,
            state: Tensor::new(vec![n, cfg.state_dim], state)?,
        })
    }
}

fn check_tau<T: Scalar>(tau: T) -> Result<()> {
    let t = tau.as_f64();
    // slack covers f32 rounding of the upper bound
    if !(0.0..=TAU_MAX + 1e-6).contains(&t) {
        return Err(Error::Precondition(format!(
            "flow time {t} outside [0, {TAU_MAX}]"
        )));
    }
    Ok(())
}

/// Sinusoidal features of `tau`: `t_emb_dim/2` geometric frequencies from 1 to 1e4,
/// laid out as `[sin..., cos...]`.
pub fn sinusoidal_features<T: Scalar>(tau: T, dim: usize) -> Vec<T> {
    let half = dim / 2;
    let t = tau.as_f64();
    let freq = |k: usize| {
        if half <= 1 {
            1.0
        } else {
            10f64.powf(4.0 * k as f64 / (half - 1) as f64)
        }
    };
    let mut out = Vec::with_capacity(dim);
    out.extend((0..half).map(|k| T::lit((t * freq(k)).sin())));
    out.extend((0..half).map(|k| T::lit((t * freq(k)).cos())));
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct HrdtModel<T> {
    cfg: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> HrdtModel<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        for spec in layout(&cfg) {
            let init = InitSpec {
                scheme: spec.scheme,
                seed: derive_seed(seed, &spec.name),
            };
            params.init(spec.name, &spec.shape, init)?;
        }
        Ok(Self { cfg, params })
    }

    /// Wraps an existing store after checking it matches `cfg` exactly.
    pub fn from_parts(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        cfg.validate()?;
        check_store(&cfg, &params)?;
        Ok(Self { cfg, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Scalar>(&self) -> HrdtModel<U> {
        HrdtModel {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
        }
    }

    /// Moves every parameter, gates and decoder output included, to a
    /// unit-gain random point: matrices `U(±√(3/fan_in))`, norm gains
    /// `U(0.5, 1.5)`. A fresh model has dead paths and shrinking activations,
    /// which leaves gradients too small for finite differences to resolve.
    pub fn randomize_all(&mut self, seed: u64) {
        for p in self.params.iter_mut() {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &p.name));
            let shape = p.tensor.shape().to_vec();
            p.tensor = if shape.len() == 2 {
                let bound = (3.0 / shape[0] as f64).sqrt();
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(-bound..bound)))
            } else {
                Tensor::from_fn(&shape, |_| T::lit(rng.random_range(0.5..1.5)))
            };
        }
    }

    fn attn_cfg(&self, rope: bool) -> AttnConfig {
        AttnConfig {
            heads: self.cfg.n_heads,
            kv_heads: self.cfg.n_kv_heads,
            causal: false,
            rope,
        }
    }

    fn weights(&self, bound: &Bound, prefix: &str, n: usize) -> Result<Vec<Var>> {
        (0..n)
            .map(|i| bound.get(&format!("{prefix}.fc{i}.weight")))
            .collect()
    }

    /// Flow-time embedding for each batch entry: `[batch, t_emb_dim]`.
    pub fn timestep_embed_on(&self, tape: &mut Tape<T>, bound: &Bound, taus: &[T]) -> Result<Var> {
        let dim = self.cfg.t_emb_dim;
        let mut feats = Vec::with_capacity(taus.len() * dim);
        for &tau in taus {
            check_tau(tau)?;
            feats.extend(sinusoidal_features(tau, dim));
        }
        let x = tape.constant(Tensor::new(vec![taus.len(), dim], feats)?);
        let w = self.weights(bound, "t_embed", 2)?;
        mlp(tape, x, &w)
    }

    /// One state token per batch entry: `[batch, d_model]`.
    pub fn encode_state_on(&self, tape: &mut Tape<T>, bound: &Bound, state: Var) -> Result<Var> {
        if tape.shape(state)[1] != self.cfg.state_dim {
            return Err(Error::shape(
                "encode_state",
                tape.shape(state),
                &[1, self.cfg.state_dim],
            ));
        }
        let w = self.weights(bound, "state_adapter", 3)?;
        mlp(tape, state, &w)
    }

    /// Row-wise action adapter: `[rows, action_dim] → [rows, d_model]`.
    pub fn encode_actions_on(&self, tape: &mut Tape<T>, bound: &Bound, a_tau: Var) -> Result<Var> {
        if tape.shape(a_tau)[1] != self.cfg.action_dim {
            return Err(Error::shape(
                "encode_actions",
                tape.shape(a_tau),
                &[self.cfg.horizon, self.cfg.action_dim],
            ));
        }
        let w = self.weights(bound, "action_adapter", 3)?;
        mlp(tape, a_tau, &w)
    }

    fn adapt_on(&self, tape: &mut Tape<T>, bound: &Bound, prefix: &str, x: Var) -> Result<Var> {
        let w = self.weights(bound, prefix, 2)?;
        mlp(tape, x, &w)
    }

    /// One transformer block over `x = [batch·(1+H), d_model]`.
    #[allow(clippy::too_many_arguments)]
    pub fn block_forward_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        layer: usize,
        x: Var,
        img: Var,
        lang: Var,
        lang_len: &[usize],
        cond: Var,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        let seq = self.cfg.seq_len();
        let batch = lang_len.len();
        if tape.shape(x) != [batch * seq, d] {
            return Err(Error::shape(
                "block_forward",
                tape.shape(x),
                &[batch * seq, d],
            ));
        }
        let p = format!("backbone.block{layer}");
        let modulation = tape.matmul(cond, bound.get(&format!("{p}.adaln.weight"))?)?;
        let eps = T::lit(self.cfg.eps);
        let mut x = x;
        for j in 0..SUBLAYERS {
            let shift = tape.slice_cols(modulation, 3 * j * d, d)?;
            let scale = tape.slice_cols(modulation, (3 * j + 1) * d, d)?;
            let gate = tape.slice_cols(modulation, (3 * j + 2) * d, d)?;
            let h = tape.rms_norm(x, bound.get(&format!("{p}.norm{j}.weight"))?, eps)?;
            let h = tape.modulate(h, shift, scale, seq)?;
            let attn_w = |name: &str| -> Result<AttnWeights> {
                Ok(AttnWeights {
                    wq: bound.get(&format!("{p}.{name}.wq"))?,
                    wk: bound.get(&format!("{p}.{name}.wk"))?,
                    wv: bound.get(&format!("{p}.{name}.wv"))?,
                    wo: bound.get(&format!("{p}.{name}.wo"))?,
                })
            };
            let sub = match j {
                0 => gqa_attention(
                    tape,
                    h,
                    h,
                    attn_w("self_attn")?,
                    &self.attn_cfg(true),
                    batch,
                    None,
                )?,
                1 => gqa_attention(
                    tape,
                    h,
                    img,
                    attn_w("img_attn")?,
                    &self.attn_cfg(false),
                    batch,
                    None,
                )?,
                2 => gqa_attention(
                    tape,
                    h,
                    lang,
                    attn_w("lang_attn")?,
                    &self.attn_cfg(false),
                    batch,
                    Some(lang_len.to_vec()),
                )?,
                _ => swiglu_ffn(
                    tape,
                    h,
                    bound.get(&format!("{p}.ffn.w_gate"))?,
                    bound.get(&format!("{p}.ffn.w_up"))?,
                    bound.get(&format!("{p}.ffn.w_down"))?,
                )?,
            };
            x = tape.gated_add(x, gate, sub, seq)?;
        }
        Ok(x)
    }

    /// Final modulated norm and MLP: `[batch·H, d_model] → [batch·H, action_dim]`.
    pub fn decode_actions_on(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        h_action: Var,
        cond: Var,
    ) -> Result<Var> {
        let d = self.cfg.d_model;
        if tape.shape(h_action)[1] != d {
            return Err(Error::shape(
                "decode_actions",
                tape.shape(h_action),
                &[self.cfg.horizon, d],
            ));
        }
        let modulation = tape.matmul(cond, bound.get("action_decoder.adaln.weight")?)?;
        let shift = tape.slice_cols(modulation, 0, d)?;
        let scale = tape.slice_cols(modulation, d, d)?;
        let h = tape.rms_norm(
            h_action,
            bound.get("action_decoder.norm.weight")?,
            T::lit(self.cfg.eps),
        )?;
        let h = tape.modulate(h, shift, scale, self.cfg.horizon)?;
        let w = self.weights(bound, "action_decoder", 2)?;
        mlp(tape, h, &w)
    }

    /// Predicted velocity for a packed batch: `[batch·H, action_dim]`.
    pub fn forward_on(&self, tape: &mut Tape<T>, bound: &Bound, batch: &Batch<T>) -> Result<Var> {
        let cfg = &self.cfg;
        let (n, h) = (batch.size, cfg.horizon);
        let t_emb = self.timestep_embed_on(tape, bound, &batch.tau)?;
        let cond = tape.silu(t_emb);

        let state = tape.constant(batch.state.clone());
        let h_state = self.encode_state_on(tape, bound, state)?;
        let a_tau = tape.constant(batch.a_tau.clone());
        let h_action = self.encode_actions_on(tape, bound, a_tau)?;
        let stacked = tape.concat_rows(h_state, h_action)?;
        // per example: its state token followed by its H action tokens
        let order = (0..n)
            .flat_map(|b| std::iter::once(b).chain((0..h).map(move |i| n + b * h + i)))
            .collect();
        let mut x = tape.gather_rows(stacked, order)?;

        let img = tape.constant(batch.img.clone());
        let img = self.adapt_on(tape, bound, "img_adapter", img)?;
        let lang = tape.constant(batch.lang.clone());
        let lang = self.adapt_on(tape, bound, "lang_adapter", lang)?;

        for layer in 0..cfg.n_layers {
            x = self.block_forward_on(tape, bound, layer, x, img, lang, &batch.lang_len, cond)?;
        }
        let action_rows = (0..n)
            .flat_map(|b| (1..=h).map(move |i| b * (1 + h) + i))
            .collect();
        let h_action = tape.gather_rows(x, action_rows)?;
        self.decode_actions_on(tape, bound, h_action, cond)
    }

    /// Predicted velocity `[H, action_dim]` for one example.
    pub fn forward(
        &self,
        a_tau: &Tensor<T>,
        tau: T,
        c: &ConditioningBundle<T>,
    ) -> Result<Tensor<T>> {
        let batch = Batch::pack(&self.cfg, &[(a_tau, tau, c)])?;
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = self.forward_on(&mut tape, &bound, &batch)?;
        let out = tape.value(v).clone();
        out.reshape(&[self.cfg.horizon, self.cfg.action_dim])
    }

    fn eval_single<F>(&self, f: F) -> Result<Tensor<T>>
    where
        F: FnOnce(&Self, &mut Tape<T>, &Bound) -> Result<Var>,
    {
        let mut tape = Tape::new();
        let bound = self.params.bind_frozen(&mut tape);
        let v = f(self, &mut tape, &bound)?;
        Ok(tape.value(v).clone())
    }

    pub fn timestep_embed(&self, tau: T) -> Result<Tensor<T>> {
        let t = self.eval_single(|m, tape, b| m.timestep_embed_on(tape, b, &[tau]))?;
        t.reshape(&[self.cfg.t_emb_dim])
    }

    pub fn encode_state(&self, state: &Tensor<T>) -> Result<Tensor<T>> {
        if state.numel() != self.cfg.state_dim {
            return Err(Error::shape(
                "encode_state",
                state.shape(),
                &[self.cfg.state_dim],
            ));
        }
        let s = state.clone().reshape(&[1, self.cfg.state_dim])?;
        let t = self.eval_single(|m, tape, b| {
            let x = tape.constant(s);
            m.encode_state_on(tape, b, x)
        })?;
        t.reshape(&[self.cfg.d_model])
    }

    pub fn encode_actions(&self, a_tau: &Tensor<T>) -> Result<Tensor<T>> {
        if a_tau.shape() != [self.cfg.horizon, self.cfg.action_dim] {
            return Err(Error::shape(
                "encode_actions",
                a_tau.shape(),
                &[self.cfg.horizon, self.cfg.action_dim],
            ));
        }
        self.eval_single(|m, tape, b| {
            let x = tape.constant(a_tau.clone());
            m.encode_actions_on(tape, b, x)
        })
    }

    pub fn adapt_image(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        self.adapt(
            feats,
            "img_adapter",
            "image tokens",
            self.cfg.n_img_tokens,
            self.cfg.img_feat_dim,
        )
    }

    pub fn adapt_lang(&self, feats: &Tensor<T>) -> Result<Tensor<T>> {
        self.adapt(
            feats,
            "lang_adapter",
            "language tokens",
            self.cfg.max_lang_tokens,
            self.cfg.lang_feat_dim,
        )
    }

    fn adapt(
        &self,
        feats: &Tensor<T>,
        prefix: &str,
        what: &'static str,
        limit: usize,
        width: usize,
    ) -> Result<Tensor<T>> {
        if feats.shape().len() != 2 || feats.cols() != width {
            return Err(Error::shape(what, feats.shape(), &[limit, width]));
        }
        if feats.rows() > limit {
            return Err(Error::TooMany {
                what,
                got: feats.rows(),
                limit,
            });
        }
        self.eval_single(|m, tape, b| {
            let x = tape.constant(feats.clone());
            m.adapt_on(tape, b, prefix, x)
        })
    }

    /// Applies block `layer` to one example's `[1+H, d_model]` token matrix.
    /// `img`/`lang` are adapted tokens (`[n, d_model]`), `t_emb` a `[t_emb_dim]` embedding.
    pub fn block_forward(
        &self,
        layer: usize,
        x: &Tensor<T>,
        img: &Tensor<T>,
        lang: &Tensor<T>,
        lang_len: usize,
        t_emb: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        if layer >= self.cfg.n_layers {
            return Err(Error::Precondition(format!("no block {layer}")));
        }
        if x.shape() != [self.cfg.seq_len(), self.cfg.d_model] {
            return Err(Error::shape(
                "block_forward",
                x.shape(),
                &[self.cfg.seq_len(), self.cfg.d_model],
            ));
        }
        let t = t_emb.clone().reshape(&[1, self.cfg.t_emb_dim])?;
        self.eval_single(|m, tape, b| {
            let xv = tape.constant(x.clone());
            let iv = tape.constant(img.clone());
            let lv = tape.constant(lang.clone());
            let tv = tape.constant(t);
            let cond = tape.silu(tv);
            m.block_forward_on(tape, b, layer, xv, iv, lv, &[lang_len], cond)
        })
    }

    pub fn decode_actions(&self, h_action: &Tensor<T>, t_emb: &Tensor<T>) -> Result<Tensor<T>> {
        if h_action.shape() != [self.cfg.horizon, self.cfg.d_model] {
            return Err(Error::shape(
                "decode_actions",
                h_action.shape(),
                &[self.cfg.horizon, self.cfg.d_model],
            ));
        }
        let t = t_emb.clone().reshape(&[1, self.cfg.t_emb_dim])?;
        self.eval_single(|m, tape, b| {
            let h = tape.constant(h_action.clone());
            let tv = tape.constant(t);
            let cond = tape.silu(tv);
            m.decode_actions_on(tape, b, h, cond)
        })
    }
}

/// Verifies that `store` holds exactly the parameters of `cfg` with matching
/// shapes and that every name carries a known prefix.
pub fn check_store<T: Scalar>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<()> {
    check_prefixes(store)?;
    let expected = layout(cfg);
    if expected.len() != store.len() {
        return Err(Error::PrefixSet(format!(
            "expected {} parameters, found {}",
            expected.len(),
            store.len()
        )));
    }
    for spec in expected {
        let t = store.tensor(&spec.name)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::shape("parameter", t.shape(), &spec.shape));
        }
    }
    Ok(())
}

/// Every parameter name must start with exactly one known prefix.
pub fn check_prefixes<T: Scalar>(store: &ParamStore<T>) -> Result<()> {
    for name in store.names() {
        if prefix_of(name).is_none() {
            return Err(Error::PrefixSet(format!(
                "parameter `{name}` has no known prefix"
            )));
        }
    }
    Ok(())
}


/// Finite-difference check of the full model in f64: two random examples
/// with every image and language slot filled, flow-matching loss against a
/// random target, parameters at [`HrdtModel::randomize_all`].
pub fn check_model_gradients(
    cfg: &ModelConfig,
    eps: f64,
    samples: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut model = HrdtModel::<f64>::new(cfg.clone(), seed)?;
    model.randomize_all(seed ^ 0x9e37_79b9);
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let mut rand = |shape: &[usize]| Tensor::<f64>::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let items: Vec<_> = (0..2)
        .map(|i| {
            let c = ConditioningBundle {
                img_tokens: rand(&[cfg.n_img_tokens, cfg.img_feat_dim]),
                lang_tokens: rand(&[cfg.max_lang_tokens, cfg.lang_feat_dim]),
                lang_len: cfg.max_lang_tokens,
                state: rand(&[cfg.state_dim]),
            };
            (
                rand(&[cfg.horizon, cfg.action_dim]),
                0.25 + 0.5 * i as f64,
                c,
            )
        })
        .collect();
    let target = rand(&[2 * cfg.horizon, cfg.action_dim]);
    let refs: Vec<_> = items.iter().map(|(a, t, c)| (a, *t, c)).collect();
    let batch = Batch::pack(cfg, &refs)?;
    let f = |tape: &mut Tape<f64>, store: &ParamStore<f64>| {
        let bound = store.bind(tape);
        let v = model.forward_on(tape, &bound, &batch)?;
        let u = tape.constant(target.clone());
        let d = tape.sub(v, u)?;
        let sq = tape.square(d);
        Ok(tape.mean(sq))
    };
    grad_check(f, model.params(), eps, samples, seed.wrapping_add(2))
}
