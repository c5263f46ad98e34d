//! Sequence encoder over item vectors, pooled into a user representation.

use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, EncoderStack, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RecEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Segment length including the target slot; inputs hold at most this many items.
    pub max_seq_len: usize,
    pub dropout: f64,
}

impl Default for RecEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            max_seq_len: 21,
            dropout: 0.1,
        }
    }
}

impl RecEncoderConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.model_dim,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RecEncoder {
    pub config: RecEncoderConfig,
    pub pos_emb: ParamId,
    pub stack: EncoderStack,
}

impl RecEncoder {
    pub fn new<T: Real>(store: &mut ParamStore<T>, config: RecEncoderConfig, rng: &mut impl Rng) -> Result<Self> {
        if config.max_seq_len < 2 {
            return Err(Error::Config("max_seq_len must be >= 2".into()));
        }
        let g = ParamGroup::RecEncoder;
        let pos_emb = store.add_uniform("rec_enc.pos_emb", g, &[config.max_seq_len, config.model_dim], 0.02, rng);
        let stack = EncoderStack::new(store, "rec_enc", g, config.encoder(), rng)?;
        Ok(Self { config, pos_emb, stack })
    }

    /// `item_vecs: [batch*len, d]`, left-padded with `mask` marking real
    /// positions. Positions are counted back from the most recent item.
    /// Attention is bidirectional. Returns `[batch, d]`.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        item_vecs: Var,
        mask: &[bool],
        batch: usize,
        len: usize,
    ) -> Result<Var> {
        if len > self.config.max_seq_len {
            return Err(Error::Overlength {
                len,
                max: self.config.max_seq_len,
            });
        }
        let positions: Vec<usize> = (0..batch * len).map(|i| len - 1 - i % len).collect();
        let pos = tape.param(store, self.pos_emb);
        let p = tape.embed(pos, &positions)?;
        let x = tape.add(item_vecs, p)?;
        let x = tape.dropout(x, self.config.dropout);
        let h = self.stack.forward(tape, store, x, batch, len, mask)?;
        tape.masked_mean(h, mask, batch)
    }
}

/// Single affine map between embedding widths, no activation.
#[derive(Clone, Debug)]
pub struct DimAdapter {
    pub linear: Linear,
}

impl DimAdapter {
    pub fn new<T: Real>(store: &mut ParamStore<T>, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            linear: Linear::new(store, "adapter", ParamGroup::Adapter, in_dim, out_dim, true, rng),
        }
    }

    /// Square adapter starting at the identity map.
    pub fn identity<T: Real>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        let a = Self::new(store, dim, dim, rng);
        let w = store.value_mut(a.linear.weight).data_mut();
        for (i, x) in w.iter_mut().enumerate() {
            *x = if i / dim == i % dim { T::ONE } else { T::ZERO };
        }
        a
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.linear.in_dim {
            return Err(Error::Shape {
                op: "adapt_dim",
                lhs: tape.shape(x).to_vec(),
                rhs: alloc::vec![self.linear.in_dim, self.linear.out_dim],
            });
        }
        self.linear.forward(tape, store, x)
    }
}
