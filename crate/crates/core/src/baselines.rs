//! Non-hierarchical baselines: popularity ranking and token-sequence encoders
//! scored through a projection head (no decoding).

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::UserSplit;
use crate::error::{Error, Result};
use crate::generative::{title_token_ids, GenVocab, Seq2SeqConfig, TokenEncoder};
use crate::head::ProjectionHead;
use crate::params::{ParamGroup, ParamStore};
use crate::real::Real;
use crate::text::EOS_ID;

/// Train-split interaction counts; ties resolved by the ranker's index order.
#[derive(Clone, Debug, PartialEq)]
pub struct Popularity {
    pub counts: Vec<f64>,
}

impl Popularity {
    pub fn fit(splits: &[UserSplit], num_items: usize) -> Self {
        let mut counts = vec![0.0; num_items];
        for s in splits {
            for &i in &s.train {
                counts[i] += 1.0;
            }
        }
        Self { counts }
    }
}

/// How a history becomes a token sequence for a token-level model.
#[derive(Clone, Debug, PartialEq)]
pub enum TokenIndexing {
    /// Item-ID token strings.
    ItemId,
    /// Title tokens of each item (per-item ids precomputed).
    Title(Vec<Vec<u32>>),
}

impl TokenIndexing {
    pub fn titles<'a>(vocab: &GenVocab, titles: impl IntoIterator<Item = &'a str>) -> Self {
        Self::Title(titles.into_iter().map(|t| title_token_ids(vocab, t)).collect())
    }

    fn item(&self, vocab: &GenVocab, item: usize) -> Vec<u32> {
        match self {
            Self::ItemId => vocab.item_tokens(item),
            Self::Title(t) => t[item].clone(),
        }
    }

    /// Tokens of the most recent items that fit in `max_len` (whole items
    /// only), followed by EOS. Always keeps at least the last item, cut from
    /// the left if it alone is too long.
    pub fn history_tokens(&self, vocab: &GenVocab, history: &[usize], max_len: usize) -> Vec<u32> {
        let budget = max_len.saturating_sub(1);
        let mut parts: Vec<Vec<u32>> = Vec::new();
        let mut used = 0;
        for &i in history.iter().rev() {
            let t = self.item(vocab, i);
            if used + t.len() > budget {
                if parts.is_empty() {
                    parts.push(t[t.len() - budget..].to_vec());
                }
                break;
            }
            used += t.len();
            parts.push(t);
        }
        let mut out: Vec<u32> = parts.into_iter().rev().flatten().collect();
        out.push(EOS_ID);
        out
    }
}

/// Token encoder, masked mean pool, projection head: the generative
/// baseline with its decoder replaced by a head.
#[derive(Debug)]
pub struct TokenHeadModel {
    pub encoder: TokenEncoder,
    pub head: ProjectionHead,
    pub num_items: usize,
    decoder_calls: AtomicUsize,
}

impl Clone for TokenHeadModel {
    fn clone(&self) -> Self {
        Self {
            encoder: self.encoder.clone(),
            head: self.head.clone(),
            num_items: self.num_items,
            decoder_calls: AtomicUsize::new(self.decoder_calls()),
        }
    }
}

impl TokenHeadModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: Seq2SeqConfig,
        vocab_size: usize,
        num_items: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let encoder = TokenEncoder::new(
            store,
            "tok_enc",
            ParamGroup::Baseline,
            config.encoder(),
            vocab_size,
            config.max_input_len,
            rng,
        )?;
        let head = ProjectionHead::new(store, num_items, config.dim, rng);
        Ok(Self {
            encoder,
            head,
            num_items,
            decoder_calls: AtomicUsize::new(0),
        })
    }

    /// Always zero: this model has no decoder. Kept so callers can meter it
    /// alongside the generative model.
    pub fn decoder_calls(&self) -> usize {
        self.decoder_calls.load(Ordering::Relaxed)
    }

    pub fn logits<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &[&[u32]]) -> Result<Var> {
        let enc = self.encoder.forward(tape, store, inputs)?;
        let h = tape.masked_mean(enc.hidden, &enc.mask, inputs.len())?;
        self.head.logits(tape, store, h)
    }

    pub fn scores<T: Real>(&self, store: &ParamStore<T>, inputs: &[&[u32]]) -> Result<Vec<Vec<T>>> {
        let mut tape = Tape::inference();
        let l = self.logits(&mut tape, store, inputs)?;
        Ok(tape.value(l).data().chunks(self.num_items).map(<[T]>::to_vec).collect())
    }
}

/// Check that a token-level config leaves room for at least one item + EOS.
pub fn check_token_budget(config: &Seq2SeqConfig, tokens_per_item: usize) -> Result<()> {
    if config.max_input_len < tokens_per_item + 1 {
        return Err(Error::Config(format!(
            "max_input_len {} cannot hold one item of {tokens_per_item} tokens plus EOS",
            config.max_input_len
        )));
    }
    Ok(())
}
