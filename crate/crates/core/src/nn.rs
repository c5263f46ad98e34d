//! Transformer building blocks over the [`Tape`].

use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;

pub const LAYER_NORM_EPS: f64 = 1e-6;

/// Shape of a stack of pre-norm transformer layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.dim == 0 || self.ff_dim == 0 {
            return Err(Error::Config(format!("all encoder dimensions must be >= 1: {self:?}")));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "model dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let bound = 1.0 / libm::sqrt(in_dim as f64);
        let weight = store.add_uniform(format!("{name}.weight"), group, &[in_dim, out_dim], bound, rng);
        let bias = bias.then(|| store.add_const(format!("{name}.bias"), group, &[out_dim], 0.0));
        Self {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    /// `x: [rows, in] -> [rows, out]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let y = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, group: ParamGroup, dim: usize) -> Self {
        Self {
            gamma: store.add_const(format!("{name}.gamma"), group, &[dim], 1.0),
            beta: store.add_const(format!("{name}.beta"), group, &[dim], 0.0),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, T::from_f64(LAYER_NORM_EPS))
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Layout of one attention call: `batch` sequences, `q_len` query rows and
/// `k_len` key rows each, all flattened row-major.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape<'m> {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    /// `batch * k_len` flags, `true` for real (non-padding) keys.
    pub key_mask: Option<&'m [bool]>,
    pub causal: bool,
}

impl MultiHeadAttention {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        heads: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            query: Linear::new(store, &format!("{name}.q"), group, dim, dim, true, rng),
            key: Linear::new(store, &format!("{name}.k"), group, dim, dim, true, rng),
            value: Linear::new(store, &format!("{name}.v"), group, dim, dim, true, rng),
            output: Linear::new(store, &format!("{name}.o"), group, dim, dim, true, rng),
            heads,
        }
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        xq: Var,
        xkv: Var,
        shape: AttnShape<'_>,
    ) -> Result<Var> {
        let q = self.query.forward(tape, store, xq)?;
        let k = self.key.forward(tape, store, xkv)?;
        let v = self.value.forward(tape, store, xkv)?;
        self.attend(tape, store, q, k, v, shape)
    }

    /// Attention over already projected `q`, `k`, `v` (`[rows, dim]` each),
    /// followed by the output projection.
    pub fn attend<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape<'_>,
    ) -> Result<Var> {
        let AttnShape {
            batch,
            q_len,
            k_len,
            key_mask,
            causal,
        } = shape;
        let dh = self.query.out_dim / self.heads;
        let q = tape.split_heads(q, batch, q_len, self.heads)?;
        let k = tape.split_heads(k, batch, k_len, self.heads)?;
        let v = tape.split_heads(v, batch, k_len, self.heads)?;
        let scale = T::ONE / T::from_usize(dh).sqrt();
        let scores = tape.bmm(q, k, true, scale)?;
        let probs = tape.attention_softmax(scores, self.heads, key_mask, causal)?;
        let ctx = tape.bmm(probs, v, false, T::ONE)?;
        let ctx = tape.merge_heads(ctx, batch, q_len, self.heads)?;
        self.output.forward(tape, store, ctx)
    }
}

#[derive(Clone, Debug)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        dim: usize,
        ff_dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            up: Linear::new(store, &format!("{name}.up"), group, dim, ff_dim, true, rng),
            down: Linear::new(store, &format!("{name}.down"), group, ff_dim, dim, true, rng),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var, dropout: f64) -> Result<Var> {
        let h = self.up.forward(tape, store, x)?;
        let h = tape.gelu(h);
        let h = tape.dropout(h, dropout);
        self.down.forward(tape, store, h)
    }
}

/// Pre-norm self-attention layer.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl EncoderLayer {
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        shape: AttnShape<'_>,
        dropout: f64,
    ) -> Result<Var> {
        let h = self.attn_norm.forward(tape, store, x)?;
        let h = self.attn.forward(tape, store, h, h, shape)?;
        let h = tape.dropout(h, dropout);
        let x = tape.add(x, h)?;
        let h = self.ff_norm.forward(tape, store, x)?;
        let h = self.ff.forward(tape, store, h, dropout)?;
        let h = tape.dropout(h, dropout);
        tape.add(x, h)
    }
}

/// Layers plus a final layer norm.
#[derive(Clone, Debug)]
pub struct EncoderStack {
    pub config: EncoderConfig,
    pub layers: Vec<EncoderLayer>,
    pub final_norm: LayerNorm,
}

impl EncoderStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        config: EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let layers = (0..config.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), group, config.dim),
                    attn: MultiHeadAttention::new(store, &format!("{p}.attn"), group, config.dim, config.heads, rng),
                    ff_norm: LayerNorm::new(store, &format!("{p}.ff_norm"), group, config.dim),
                    ff: FeedForward::new(store, &format!("{p}.ff"), group, config.dim, config.ff_dim, rng),
                }
            })
            .collect();
        Ok(Self {
            config,
            layers,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), group, config.dim),
        })
    }

    /// `x: [batch*len, dim]`, bidirectional attention under `mask`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
    ) -> Result<Var> {
        let shape = AttnShape {
            batch,
            q_len: len,
            k_len: len,
            key_mask: Some(mask),
            causal: false,
        };
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(tape, store, h, shape, self.config.dropout)?;
        }
        self.final_norm.forward(tape, store, h)
    }
}

/// Pre-norm decoder layer: causal self-attention, cross-attention, feed-forward.
#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub cross_norm: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub ff_norm: LayerNorm,
    pub ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Self {
        let d = config.dim;
        Self {
            self_norm: LayerNorm::new(store, &format!("{name}.self_norm"), group, d),
            self_attn: MultiHeadAttention::new(store, &format!("{name}.self_attn"), group, d, config.heads, rng),
            cross_norm: LayerNorm::new(store, &format!("{name}.cross_norm"), group, d),
            cross_attn: MultiHeadAttention::new(store, &format!("{name}.cross_attn"), group, d, config.heads, rng),
            ff_norm: LayerNorm::new(store, &format!("{name}.ff_norm"), group, d),
            ff: FeedForward::new(store, &format!("{name}.ff"), group, d, config.ff_dim, rng),
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
        memory: Var,
        batch: usize,
        q_len: usize,
        mem_len: usize,
        mem_mask: &[bool],
        dropout: f64,
    ) -> Result<Var> {
        // A single memory row serves every query sequence: cross-attention
        // then runs as one sequence whose queries are all `batch * q_len` rows.
        let shared = mem_mask.len() == mem_len && batch > 1;
        let h = self.self_norm.forward(tape, store, x)?;
        let self_shape = AttnShape {
            batch,
            q_len,
            k_len: q_len,
            key_mask: None,
            causal: true,
        };
        let h = self.self_attn.forward(tape, store, h, h, self_shape)?;
        let h = tape.dropout(h, dropout);
        let x = tape.add(x, h)?;
        let h = self.cross_norm.forward(tape, store, x)?;
        let cross_shape = AttnShape {
            batch: if shared { 1 } else { batch },
            q_len: if shared { batch * q_len } else { q_len },
            k_len: mem_len,
            key_mask: Some(mem_mask),
            causal: false,
        };
        let h = self.cross_attn.forward(tape, store, h, memory, cross_shape)?;
        let h = tape.dropout(h, dropout);
        let x = tape.add(x, h)?;
        let h = self.ff_norm.forward(tape, store, x)?;
        let h = self.ff.forward(tape, store, h, dropout)?;
        let h = tape.dropout(h, dropout);
        tape.add(x, h)
    }
}
