//! The hierarchical recommender: item encoder -> sequence encoder ->
//! projection head, with no decoding step.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::data::Batch;
use crate::error::{Error, Result};
use crate::head::ProjectionHead;
use crate::item_encoder::{EmbeddingCache, ItemEncoder, ItemEncoderConfig};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::rec_encoder::{DimAdapter, RecEncoder, RecEncoderConfig};
use crate::tensor::Tensor;
use crate::text::TokenizedText;

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct LiteConfig {
    pub item: ItemEncoderConfig,
    pub rec: RecEncoderConfig,
}

/// Where item vectors come from during a forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ItemSource {
    /// Run the item encoder on the items of each batch.
    Encoder,
    /// Rows of a `[num_items + 1, d']` parameter table (cached embeddings
    /// promoted to parameters, or an external embedding source).
    Table(ParamId),
}

#[derive(Clone, Debug)]
pub struct LiteModel {
    pub config: LiteConfig,
    pub num_items: usize,
    pub item_encoder: ItemEncoder,
    pub adapter: Option<DimAdapter>,
    pub rec_encoder: RecEncoder,
    pub head: ProjectionHead,
    pub source: ItemSource,
}

impl LiteModel {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: LiteConfig,
        vocab_size: usize,
        num_items: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if config.item.model_dim != config.rec.model_dim {
            return Err(Error::Config(alloc::format!(
                "item dim {} != rec dim {}",
                config.item.model_dim,
                config.rec.model_dim
            )));
        }
        if num_items == 0 {
            return Err(Error::Empty("catalog"));
        }
        let item_encoder = ItemEncoder::new(store, config.item, vocab_size, rng)?;
        let rec_encoder = RecEncoder::new(store, config.rec, rng)?;
        let head = ProjectionHead::new(store, num_items, config.rec.model_dim, rng);
        Ok(Self {
            config,
            num_items,
            item_encoder,
            adapter: None,
            rec_encoder,
            head,
            source: ItemSource::Encoder,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.rec.model_dim
    }

    pub fn pad_index(&self) -> usize {
        self.num_items
    }

    /// Switch to trainable item vectors initialised from `cache`; the item
    /// encoder group is frozen since it no longer feeds the loss.
    pub fn promote_cache_to_table<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        cache: &EmbeddingCache<T>,
    ) -> Result<()> {
        self.attach_table(store, cache)?;
        store.set_frozen(ParamGroup::ItemEncoder, true);
        Ok(())
    }

    /// Feed item vectors from an external `[num_items + 1, d']` table through
    /// a one-layer adapter when `d' != d`. The table itself is frozen.
    pub fn use_external_embeddings<T: Real>(
        &mut self,
        store: &mut ParamStore<T>,
        cache: &EmbeddingCache<T>,
        rng: &mut impl Rng,
    ) -> Result<()> {
        self.attach_table(store, cache)?;
        store.set_frozen(ParamGroup::ItemTable, true);
        store.set_frozen(ParamGroup::ItemEncoder, true);
        if cache.dim != self.dim() {
            self.adapter = Some(DimAdapter::new(store, cache.dim, self.dim(), rng));
        }
        Ok(())
    }

    fn attach_table<T: Real>(&mut self, store: &mut ParamStore<T>, cache: &EmbeddingCache<T>) -> Result<()> {
        if cache.num_items() != self.num_items {
            return Err(Error::Shape {
                op: "item table",
                lhs: vec![self.num_items + 1],
                rhs: vec![cache.rows()],
            });
        }
        let id = match store.find("item_table") {
            Some(id) if store.value(id).shape() == [cache.rows(), cache.dim] => {
                *store.value_mut(id) = cache.as_tensor();
                id
            }
            Some(_) => return Err(Error::Config("item_table already exists with another shape".into())),
            None => store.add("item_table", ParamGroup::ItemTable, cache.as_tensor()),
        };
        self.source = ItemSource::Table(id);
        Ok(())
    }

    /// Item vectors for the `inputs` positions of a batch (pad -> zero row),
    /// `[inputs.len(), d]`. With the encoder source, each distinct item of the
    /// batch is encoded once.
    pub fn item_vectors<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        texts: &[TokenizedText],
        inputs: &[usize],
    ) -> Result<Var> {
        let pad = self.pad_index();
        let vecs = match self.source {
            ItemSource::Encoder => {
                let mut slot: BTreeMap<usize, usize> = BTreeMap::new();
                for &i in inputs.iter().filter(|&&i| i != pad) {
                    let n = slot.len();
                    slot.entry(i).or_insert(n);
                }
                let mut order = vec![0usize; slot.len()];
                for (&item, &s) in &slot {
                    order[s] = item;
                }
                let refs = order
                    .iter()
                    .map(|&i| {
                        texts.get(i).ok_or(Error::Index {
                            context: "item text",
                            index: i,
                            bound: texts.len(),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let enc = self.item_encoder.forward(tape, store, &refs)?;
                let ids: Vec<Option<usize>> = inputs.iter().map(|i| slot.get(i).copied()).collect();
                tape.gather_rows(enc, &ids)?
            }
            ItemSource::Table(id) => {
                let table = tape.param(store, id);
                let ids: Vec<Option<usize>> = inputs.iter().map(|&i| (i != pad).then_some(i)).collect();
                tape.gather_rows(table, &ids)?
            }
        };
        match &self.adapter {
            Some(a) => a.forward(tape, store, vecs),
            None => Ok(vecs),
        }
    }

    /// Training/eval forward pass to logits `[batch, num_items]`.
    pub fn batch_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        texts: &[TokenizedText],
        batch: &Batch,
    ) -> Result<Var> {
        let vecs = self.item_vectors(tape, store, texts, &batch.inputs)?;
        let h = self
            .rec_encoder
            .forward(tape, store, vecs, &batch.mask, batch.size, batch.len)?;
        self.head.logits(tape, store, h)
    }

    /// User representations from precomputed item vectors: `[batch, d]`.
    pub fn user_repr_cached<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        cache: &EmbeddingCache<T>,
        batch: &Batch,
    ) -> Result<Var> {
        let d = cache.dim;
        let mut data = Vec::with_capacity(batch.inputs.len() * d);
        for &i in &batch.inputs {
            if i >= cache.rows() {
                return Err(Error::Index {
                    context: "cached item",
                    index: i,
                    bound: cache.rows(),
                });
            }
            data.extend_from_slice(cache.row(i));
        }
        let vecs = tape.constant(Tensor::new(&[batch.inputs.len(), d], data)?);
        let vecs = match &self.adapter {
            Some(a) => a.forward(tape, store, vecs)?,
            None => vecs,
        };
        self.rec_encoder
            .forward(tape, store, vecs, &batch.mask, batch.size, batch.len)
    }

    /// User representations re-encoding every item occurrence from its text:
    /// the pipeline without an embedding cache.
    pub fn user_repr_uncached<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        texts: &[TokenizedText],
        batch: &Batch,
    ) -> Result<Var> {
        let pad = self.pad_index();
        let occurrences: Vec<&TokenizedText> = batch.inputs.iter().filter(|&&i| i != pad).map(|&i| &texts[i]).collect();
        let enc = self.item_encoder.forward(tape, store, &occurrences)?;
        let mut next = 0;
        let ids: Vec<Option<usize>> = batch
            .inputs
            .iter()
            .map(|&i| {
                (i != pad).then(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let vecs = tape.gather_rows(enc, &ids)?;
        let vecs = match &self.adapter {
            Some(a) => a.forward(tape, store, vecs)?,
            None => vecs,
        };
        self.rec_encoder
            .forward(tape, store, vecs, &batch.mask, batch.size, batch.len)
    }

    /// Eval-mode logits for each history from cached item vectors.
    pub fn score_cached<T: Real>(
        &self,
        store: &ParamStore<T>,
        cache: &EmbeddingCache<T>,
        histories: &[&[usize]],
    ) -> Result<Vec<Vec<T>>> {
        let batch = history_batch(histories, self.pad_index())?;
        let mut tape = Tape::inference();
        let h = match self.source {
            ItemSource::Encoder => self.user_repr_cached(&mut tape, store, cache, &batch)?,
            ItemSource::Table(_) => {
                let vecs = self.item_vectors(&mut tape, store, &[], &batch.inputs)?;
                self.rec_encoder
                    .forward(&mut tape, store, vecs, &batch.mask, batch.size, batch.len)?
            }
        };
        let logits = self.head.logits(&mut tape, store, h)?;
        Ok(tape
            .value(logits)
            .data()
            .chunks(self.num_items)
            .map(<[T]>::to_vec)
            .collect())
    }
}

/// Left-padded batch from raw histories (targets unused).
pub fn history_batch(histories: &[&[usize]], pad_index: usize) -> Result<Batch> {
    if histories.is_empty() {
        return Err(Error::Empty("history batch"));
    }
    let len = histories.iter().map(|h| h.len()).max().unwrap_or(0).max(1);
    let mut inputs = Vec::with_capacity(histories.len() * len);
    let mut mask = Vec::with_capacity(histories.len() * len);
    for h in histories {
        if h.is_empty() {
            return Err(Error::EmptyPool);
        }
        inputs.extend(core::iter::repeat_n(pad_index, len - h.len()));
        inputs.extend_from_slice(h);
        mask.extend(core::iter::repeat_n(false, len - h.len()));
        mask.extend(core::iter::repeat_n(true, h.len()));
    }
    Ok(Batch {
        size: histories.len(),
        len,
        inputs,
        mask,
        targets: vec![0; histories.len()],
        users: (0..histories.len()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::item_encoder::precompute_all_embeddings;
    use crate::rec_encoder::RecEncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const N: usize = 6;

    fn setup() -> (ParamStore<f32>, LiteModel, Vec<TokenizedText>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut store = ParamStore::new();
        let config = LiteConfig {
            item: ItemEncoderConfig {
                layers: 1,
                heads: 2,
                model_dim: 8,
                ff_dim: 16,
                max_item_text_len: 8,
                dropout: 0.0,
            },
            rec: RecEncoderConfig {
                layers: 1,
                heads: 2,
                model_dim: 8,
                ff_dim: 16,
                max_seq_len: 5,
                dropout: 0.0,
            },
        };
        let model = LiteModel::new(&mut store, config, 30, N, &mut rng).unwrap();
        let texts = (0..N)
            .map(|i| TokenizedText {
                ids: (0..=i as u32 % 3).map(|j| 4 + i as u32 + j).collect(),
            })
            .collect();
        (store, model, texts, rng)
    }

    #[test]
    fn cached_and_uncached_scores_agree() {
        let (store, model, texts, _) = setup();
        let cache = precompute_all_embeddings(&model.item_encoder, &store, &texts, 4, [0; 32]).unwrap();
        let histories: [&[usize]; 2] = [&[0, 3, 3, 5], &[2]];
        let cached = model.score_cached(&store, &cache, &histories).unwrap();

        let batch = history_batch(&histories, model.pad_index()).unwrap();
        let mut tape = Tape::inference();
        let h = model.user_repr_uncached(&mut tape, &store, &texts, &batch).unwrap();
        let l = model.head.logits(&mut tape, &store, h).unwrap();
        let fresh: Vec<f32> = cached.concat();
        for (a, b) in fresh.iter().zip(tape.value(l).data()) {
            assert!((a - b).abs() <= 1e-5 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn batches_encode_each_distinct_item_once() {
        let (store, model, texts, _) = setup();
        let histories: [&[usize]; 3] = [&[1, 1, 1, 2], &[1, 2], &[4, 1]];
        let batch = history_batch(&histories, model.pad_index()).unwrap();
        model.item_encoder.reset_count();
        let mut tape = Tape::inference();
        model.batch_logits(&mut tape, &store, &texts, &batch).unwrap();
        assert_eq!(model.item_encoder.encode_count(), 3);
        model.item_encoder.reset_count();
        model.user_repr_uncached(&mut tape, &store, &texts, &batch).unwrap();
        assert_eq!(model.item_encoder.encode_count(), 8);
    }

    #[test]
    fn promoted_table_freezes_item_encoder() {
        let (mut store, mut model, texts, _) = setup();
        let cache = precompute_all_embeddings(&model.item_encoder, &store, &texts, 4, [0; 32]).unwrap();
        let before = model.score_cached(&store, &cache, &[&[0, 1]]).unwrap();
        model.promote_cache_to_table(&mut store, &cache).unwrap();
        assert!(store.is_group_frozen(ParamGroup::ItemEncoder));
        assert!(!store.is_group_frozen(ParamGroup::ItemTable));
        let after = model.score_cached(&store, &cache, &[&[0, 1]]).unwrap();
        assert_eq!(before, after);
    }

    #[test]
    fn external_embeddings_use_adapter_on_width_mismatch() {
        let (mut store, mut model, _, mut rng) = setup();
        let ext = EmbeddingCache::new(N + 1, 5, vec![0.5f32; (N + 1) * 5], [0; 32]).unwrap();
        model.use_external_embeddings(&mut store, &ext, &mut rng).unwrap();
        assert!(model.adapter.is_some());
        assert!(store.is_group_frozen(ParamGroup::ItemTable));
        let scores = model.score_cached(&store, &ext, &[&[0, 1, 2]]).unwrap();
        assert_eq!(scores[0].len(), N);
        let wrong = EmbeddingCache::new(3, 5, vec![0.0f32; 15], [0; 32]).unwrap();
        assert!(model.use_external_embeddings(&mut store, &wrong, &mut rng).is_err());
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f32>::new();
        let mut config = LiteConfig::default();
        config.rec.model_dim = 32;
        assert!(LiteModel::new(&mut store, config, 10, 5, &mut rng).is_err());
    }
}
