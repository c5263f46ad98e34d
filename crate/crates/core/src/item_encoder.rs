//! Item encoder: token embeddings -> transformer encoder -> masked mean pool,
//! one context-aware vector per item. Also the in-memory embedding cache.

use alloc::vec;
use alloc::vec::Vec;
use core::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use sha2::{Digest, Sha256};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{EncoderConfig, EncoderStack};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::text::{TokenizedText, Vocab, PAD_ID};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItemEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_item_text_len: usize,
    pub dropout: f64,
}

impl Default for ItemEncoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            model_dim: 64,
            ff_dim: 256,
            max_item_text_len: 32,
            dropout: 0.1,
        }
    }
}

impl ItemEncoderConfig {
    /// T5-small encoder dimensions.
    pub fn t5_small() -> Self {
        Self {
            layers: 6,
            heads: 8,
            model_dim: 512,
            ff_dim: 2048,
            max_item_text_len: 32,
            dropout: 0.1,
        }
    }

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

#[derive(Debug)]
pub struct ItemEncoder {
    pub config: ItemEncoderConfig,
    pub vocab_size: usize,
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub stack: EncoderStack,
    items_encoded: AtomicUsize,
}

impl Clone for ItemEncoder {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            vocab_size: self.vocab_size,
            token_emb: self.token_emb,
            pos_emb: self.pos_emb,
            stack: self.stack.clone(),
            items_encoded: AtomicUsize::new(self.encode_count()),
        }
    }
}

impl ItemEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: ItemEncoderConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.max_item_text_len == 0 {
            return Err(Error::Config("max_item_text_len must be >= 1".into()));
        }
        let g = ParamGroup::ItemEncoder;
        let d = config.model_dim;
        let token_emb = store.add_uniform("item_enc.token_emb", g, &[vocab_size, d], 0.1, rng);
        let pos_emb = store.add_uniform("item_enc.pos_emb", g, &[config.max_item_text_len, d], 0.02, rng);
        let stack = EncoderStack::new(store, "item_enc", g, config.encoder(), rng)?;
        Ok(Self {
            config,
            vocab_size,
            token_emb,
            pos_emb,
            stack,
            items_encoded: AtomicUsize::new(0),
        })
    }

    pub fn dim(&self) -> usize {
        self.config.model_dim
    }

    /// Number of item texts pushed through the encoder so far.
    pub fn encode_count(&self) -> usize {
        self.items_encoded.load(Ordering::Relaxed)
    }

    pub fn reset_count(&self) {
        self.items_encoded.store(0, Ordering::Relaxed);
    }

    /// Encode `texts` as one right-padded batch. Returns `[texts.len(), d]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, texts: &[&TokenizedText]) -> Result<Var> {
        if texts.is_empty() {
            return Err(Error::Empty("item batch"));
        }
        let max_len = self.config.max_item_text_len;
        let mut len = 0;
        for t in texts {
            if t.ids.iter().all(|&i| i == PAD_ID) {
                return Err(Error::Empty("item tokens"));
            }
            len = len.max(t.len().min(max_len));
        }
        let n = texts.len();
        let mut ids = vec![PAD_ID as usize; n * len];
        let mut mask = vec![false; n * len];
        for (r, t) in texts.iter().enumerate() {
            for (c, &id) in t.ids.iter().take(len).enumerate() {
                if id as usize >= self.vocab_size {
                    return Err(Error::Index {
                        context: "item token id",
                        index: id as usize,
                        bound: self.vocab_size,
                    });
                }
                ids[r * len + c] = id as usize;
                mask[r * len + c] = id != PAD_ID;
            }
        }
        let positions: Vec<usize> = (0..n * len).map(|i| i % len).collect();
        let tok = tape.param(store, self.token_emb);
        let x = tape.embed(tok, &ids)?;
        let pos = tape.param(store, self.pos_emb);
        let p = tape.embed(pos, &positions)?;
        let x = tape.add(x, p)?;
        let x = tape.dropout(x, self.config.dropout);
        let h = self.stack.forward(tape, store, x, n, len, &mask)?;
        self.items_encoded.fetch_add(n, Ordering::Relaxed);
        tape.masked_mean(h, &mask, n)
    }

    /// Eval-mode embedding of a single item.
    pub fn encode_item<T: Real>(&self, store: &ParamStore<T>, tokens: &TokenizedText) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let v = self.forward(&mut tape, store, &[tokens])?;
        Ok(tape.value(v).data().to_vec())
    }

    /// Hash of the vocabulary, encoder configuration and encoder weights.
    pub fn fingerprint<T: Real>(&self, store: &ParamStore<T>, vocab: &Vocab) -> [u8; 32] {
        let mut h = Sha256::new();
        let c = &self.config;
        for v in [
            c.layers,
            c.heads,
            c.model_dim,
            c.ff_dim,
            c.max_item_text_len,
            self.vocab_size,
        ] {
            h.update((v as u64).to_le_bytes());
        }
        for t in vocab.user_tokens() {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        for (_, p) in store.iter().filter(|(_, p)| p.group == ParamGroup::ItemEncoder) {
            h.update(p.name.as_bytes());
            for x in p.value.data() {
                h.update((x.to_f64() as f32).to_le_bytes());
            }
        }
        h.finalize().into()
    }
}

/// Precomputed item vectors: `num_items + 1` rows, the last one (PAD) zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingCache<T = f32> {
    pub dim: usize,
    pub data: Vec<T>,
    pub fingerprint: [u8; 32],
}

impl<T: Real> EmbeddingCache<T> {
    pub fn new(rows: usize, dim: usize, data: Vec<T>, fingerprint: [u8; 32]) -> Result<Self> {
        if rows == 0 || data.len() != rows * dim {
            return Err(Error::Shape {
                op: "embedding cache",
                lhs: vec![rows, dim],
                rhs: vec![data.len()],
            });
        }
        Ok(Self { dim, data, fingerprint })
    }

    pub fn rows(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn num_items(&self) -> usize {
        self.rows() - 1
    }

    pub fn row(&self, index: usize) -> &[T] {
        &self.data[index * self.dim..(index + 1) * self.dim]
    }

    pub fn is_valid_for(&self, fingerprint: &[u8; 32]) -> bool {
        &self.fingerprint == fingerprint
    }

    pub fn as_tensor(&self) -> Tensor<T> {
        Tensor::new(&[self.rows(), self.dim], self.data.clone()).expect("cache shape")
    }
}

/// Encode every item once, in batches of `batch_size`, and zero the PAD row.
pub fn precompute_all_embeddings<T: Real>(
    encoder: &ItemEncoder,
    store: &ParamStore<T>,
    texts: &[TokenizedText],
    batch_size: usize,
    fingerprint: [u8; 32],
) -> Result<EmbeddingCache<T>> {
    let d = encoder.dim();
    let mut data = Vec::with_capacity((texts.len() + 1) * d);
    let refs: Vec<&TokenizedText> = texts.iter().collect();
    for chunk in refs.chunks(batch_size.max(1)) {
        let mut tape = Tape::inference();
        let v = encoder.forward(&mut tape, store, chunk)?;
        data.extend_from_slice(tape.value(v).data());
    }
    data.extend(core::iter::repeat_n(T::ZERO, d));
    EmbeddingCache::new(texts.len() + 1, d, data, fingerprint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup() -> (ParamStore<f32>, ItemEncoder) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let config = ItemEncoderConfig {
            layers: 2,
            heads: 2,
            model_dim: 8,
            ff_dim: 16,
            max_item_text_len: 6,
            dropout: 0.1,
        };
        let enc = ItemEncoder::new(&mut store, config, 20, &mut rng).unwrap();
        (store, enc)
    }

    fn text(ids: &[u32]) -> TokenizedText {
        TokenizedText { ids: ids.to_vec() }
    }

    #[test]
    fn single_token_pools_to_its_hidden_state() {
        let (store, enc) = setup();
        let got = enc.encode_item(&store, &text(&[7])).unwrap();
        let mut tape = Tape::inference();
        let tok = tape.param(&store, enc.token_emb);
        let x = tape.embed(tok, &[7]).unwrap();
        let pos = tape.param(&store, enc.pos_emb);
        let p = tape.embed(pos, &[0]).unwrap();
        let x = tape.add(x, p).unwrap();
        let h = enc.stack.forward(&mut tape, &store, x, 1, 1, &[true]).unwrap();
        assert_eq!(got, tape.value(h).data());
    }

    #[test]
    fn padding_and_duplicates_do_not_matter() {
        let (store, enc) = setup();
        let a = enc.encode_item(&store, &text(&[5, 6, 9])).unwrap();
        let padded = enc.encode_item(&store, &text(&[5, 6, 9, PAD_ID, PAD_ID])).unwrap();
        assert_eq!(a, padded);
        let mut tape = Tape::inference();
        let (x, y) = (text(&[5, 6, 9]), text(&[5, 6, 9]));
        let v = enc.forward(&mut tape, &store, &[&x, &y]).unwrap();
        let d = tape.value(v).data();
        assert_eq!(d[..8], d[8..]);
    }

    #[test]
    fn all_padding_is_rejected() {
        let (store, enc) = setup();
        assert!(enc.encode_item(&store, &text(&[PAD_ID, PAD_ID])).is_err());
        assert!(enc.encode_item(&store, &text(&[])).is_err());
    }

    #[test]
    fn cache_rows_match_fresh_encodes_bitwise() {
        let (store, enc) = setup();
        let texts = [text(&[4, 5]), text(&[6, 7, 8, 9, 10, 11, 12]), text(&[13])];
        let cache = precompute_all_embeddings(&enc, &store, &texts, 2, [1; 32]).unwrap();
        assert_eq!(cache.rows(), 4);
        assert!(cache.row(3).iter().all(|&x| x == 0.0));
        for (i, t) in texts.iter().enumerate() {
            assert_eq!(cache.row(i), enc.encode_item(&store, t).unwrap());
        }
        assert!(cache.is_valid_for(&[1; 32]) && !cache.is_valid_for(&[2; 32]));
    }

    #[test]
    fn fingerprint_tracks_weights_and_vocab() {
        let (mut store, enc) = setup();
        let vocab = Vocab::from_tokens(["a", "b"]).unwrap();
        let f0 = enc.fingerprint(&store, &vocab);
        assert_eq!(f0, enc.fingerprint(&store, &vocab));
        assert_ne!(f0, enc.fingerprint(&store, &Vocab::from_tokens(["a", "c"]).unwrap()));
        store.value_mut(enc.token_emb).data_mut()[0] += 1.0;
        assert_ne!(f0, enc.fingerprint(&store, &vocab));
    }

    #[test]
    fn counter_counts_encoded_texts() {
        let (store, enc) = setup();
        let t = text(&[4]);
        let mut tape = Tape::inference();
        enc.forward(&mut tape, &store, &[&t, &t, &t]).unwrap();
        assert_eq!(enc.encode_count(), 3);
        enc.reset_count();
        assert_eq!(enc.encode_count(), 0);
    }
}
