//! Ranking metrics, full-catalog and sampled evaluation, and the input-length
//! and redundant-encoding meters.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::baselines::{Popularity, TokenHeadModel, TokenIndexing};
use crate::data::EvalCase;
use crate::error::{Error, Result};
use crate::generative::{
    parse_generated_items, recommend_batch_by_beam, recommend_by_beam, BeamConfig, GenVocab, ItemTrie, Seq2Seq,
};
use crate::head::top_k_recommend;
use crate::item_encoder::{EmbeddingCache, ItemEncoder};
use crate::lite::{history_batch, LiteModel};
use crate::params::ParamStore;
use crate::real::Real;
use crate::text::TokenizedText;

/// 1 if `ground_truth` is among the first `k` entries.
pub fn recall_at_k(ranked: &[usize], ground_truth: usize, k: usize) -> f64 {
    if ranked.iter().take(k).any(|&i| i == ground_truth) {
        1.0
    } else {
        0.0
    }
}

/// `1 / log2(rank + 1)` for a 1-based rank within the first `k`, else 0.
pub fn ndcg_at_k(ranked: &[usize], ground_truth: usize, k: usize) -> f64 {
    match ranked.iter().take(k).position(|&i| i == ground_truth) {
        Some(p) => 1.0 / libm::log2(p as f64 + 2.0),
        None => 0.0,
    }
}

/// Per-k means over users.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub ks: Vec<usize>,
    pub recall: Vec<f64>,
    pub ndcg: Vec<f64>,
    pub users: usize,
    pub fingerprint: String,
}

impl EvalReport {
    fn from_lists(ks: &[usize], lists: &[(Vec<usize>, usize)], fingerprint: &str) -> Self {
        let n = lists.len();
        let mut recall = vec![0.0; ks.len()];
        let mut ndcg = vec![0.0; ks.len()];
        for (ranked, gt) in lists {
            for (j, &k) in ks.iter().enumerate() {
                recall[j] += recall_at_k(ranked, *gt, k);
                ndcg[j] += ndcg_at_k(ranked, *gt, k);
            }
        }
        if n > 0 {
            for x in recall.iter_mut().chain(ndcg.iter_mut()) {
                *x /= n as f64;
            }
        }
        Self {
            ks: ks.to_vec(),
            recall,
            ndcg,
            users: n,
            fingerprint: fingerprint.into(),
        }
    }

    pub fn recall_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.recall[j])
    }

    pub fn ndcg_at(&self, k: usize) -> Option<f64> {
        self.ks.iter().position(|&x| x == k).map(|j| self.ndcg[j])
    }
}

/// Produces ranked recommendation lists (excluded items removed).
pub trait Recommender {
    fn recommend(&self, cases: &[EvalCase], k: usize) -> Result<Vec<Vec<usize>>>;
}

/// Produces one score per catalog item for each history.
pub trait Scorer {
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>>;
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        (**self).score(histories)
    }
}

/// Ranks a [`Scorer`]'s output with [`top_k_recommend`].
pub struct Ranked<S>(pub S);

impl<S: Scorer> Recommender for Ranked<S> {
    fn recommend(&self, cases: &[EvalCase], k: usize) -> Result<Vec<Vec<usize>>> {
        let histories: Vec<&[usize]> = cases.iter().map(|c| c.history.as_slice()).collect();
        let scores = self.0.score(&histories)?;
        cases
            .iter()
            .zip(&scores)
            .map(|(c, s)| {
                let available = s.len() - c.exclude.len();
                top_k_recommend(s, &c.exclude, k.min(available))
            })
            .collect()
    }
}

fn check_ks(ks: &[usize]) -> Result<usize> {
    match ks.iter().max() {
        Some(&m) if !ks.contains(&0) => Ok(m),
        _ => Err(Error::Config("k values must be non-empty and >= 1".into())),
    }
}

/// Rank the whole catalog for each case (minus its exclusions) and average
/// the metrics against the held-out item.
pub fn evaluate_full<R: Recommender + ?Sized>(
    model: &R,
    cases: &[EvalCase],
    ks: &[usize],
    batch_size: usize,
    fingerprint: &str,
) -> Result<EvalReport> {
    let kmax = check_ks(ks)?;
    let mut lists = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(batch_size.max(1)) {
        for (c, ranked) in chunk.iter().zip(model.recommend(chunk, kmax)?) {
            lists.push((ranked, c.target));
        }
    }
    Ok(EvalReport::from_lists(ks, &lists, fingerprint))
}

/// The ground truth plus `num_negatives` distinct items drawn uniformly from
/// those the user never interacted with, ground truth first.
pub fn sample_candidates(
    case: &EvalCase,
    num_items: usize,
    num_negatives: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let mut seen: BTreeSet<usize> = case.exclude.iter().copied().collect();
    seen.extend(case.history.iter().copied());
    seen.insert(case.target);
    let pool = num_items.saturating_sub(seen.len());
    if pool < num_negatives {
        return Err(Error::CatalogTooSmall {
            items: num_items,
            needed: num_negatives + 1,
        });
    }
    let mut out = vec![case.target];
    while out.len() <= num_negatives {
        let i = rng.gen_range(0..num_items);
        if seen.insert(i) {
            out.push(i);
        }
    }
    Ok(out)
}

/// Rank each ground truth among sampled negatives using the scorer's values
/// restricted to those candidates. Sampling uses a `ChaCha8Rng` from `seed`.
pub fn topn_sampled_eval<S: Scorer + ?Sized>(
    scorer: &S,
    cases: &[EvalCase],
    num_items: usize,
    num_negatives: usize,
    ks: &[usize],
    seed: u64,
    fingerprint: &str,
) -> Result<EvalReport> {
    check_ks(ks)?;
    if num_items < num_negatives + 1 {
        return Err(Error::CatalogTooSmall {
            items: num_items,
            needed: num_negatives + 1,
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut lists = Vec::with_capacity(cases.len());
    for chunk in cases.chunks(64) {
        let histories: Vec<&[usize]> = chunk.iter().map(|c| c.history.as_slice()).collect();
        let scores = scorer.score(&histories)?;
        for (c, s) in chunk.iter().zip(&scores) {
            let cand = sample_candidates(c, num_items, num_negatives, &mut rng)?;
            let mut sorted = cand.clone();
            sorted.sort_unstable();
            let sub: Vec<f64> = sorted.iter().map(|&i| s[i]).collect();
            let order = top_k_recommend(&sub, &[], sub.len())?;
            lists.push((order.into_iter().map(|j| sorted[j]).collect(), c.target));
        }
    }
    Ok(EvalReport::from_lists(ks, &lists, fingerprint))
}

/// How a pipeline turns a history into model input positions.
#[derive(Clone, Copy, Debug)]
pub enum LengthMeter<'a> {
    /// One position per item.
    Hierarchical,
    /// Tokens after expansion (plus the EOS terminator).
    Tokens {
        vocab: &'a GenVocab,
        indexing: &'a TokenIndexing,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct InputLength {
    pub sequences: usize,
    pub total_positions: usize,
}

impl InputLength {
    pub fn mean(&self) -> f64 {
        if self.sequences == 0 {
            0.0
        } else {
            self.total_positions as f64 / self.sequences as f64
        }
    }
}

/// Input positions consumed by each history after keeping its `cap` most
/// recent items.
pub fn measure_input_length(meter: LengthMeter<'_>, histories: &[&[usize]], cap: usize) -> InputLength {
    let mut out = InputLength::default();
    for h in histories {
        let h = &h[h.len().saturating_sub(cap)..];
        out.sequences += 1;
        out.total_positions += match meter {
            LengthMeter::Hierarchical => h.len(),
            LengthMeter::Tokens { vocab, indexing } => indexing.history_tokens(vocab, h, usize::MAX).len(),
        };
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub struct Redundancy {
    pub encoder_calls: usize,
    pub occurrences: usize,
    pub distinct: usize,
}

impl Redundancy {
    /// Encoder calls per distinct item (0 when nothing was encoded).
    pub fn ratio(&self) -> f64 {
        if self.distinct == 0 {
            0.0
        } else {
            self.encoder_calls as f64 / self.distinct as f64
        }
    }
}

/// Run user encoding over `batches` of histories and count item-encoder
/// passes. With `cached`, every distinct item is encoded once up front and
/// the batches read the cache; otherwise each occurrence is re-encoded.
pub fn count_redundant_encodings<T: Real>(
    model: &LiteModel,
    store: &ParamStore<T>,
    texts: &[TokenizedText],
    batches: &[Vec<Vec<usize>>],
    cached: bool,
) -> Result<Redundancy> {
    let enc: &ItemEncoder = &model.item_encoder;
    let mut distinct = BTreeSet::new();
    let mut occurrences = 0;
    for h in batches.iter().flatten() {
        occurrences += h.len();
        distinct.extend(h.iter().copied());
    }
    let start = enc.encode_count();
    if cached {
        let d = enc.dim();
        let mut data = vec![T::ZERO; (model.num_items + 1) * d];
        let items: Vec<usize> = distinct.iter().copied().collect();
        for chunk in items.chunks(64) {
            let refs: Vec<&TokenizedText> = chunk.iter().map(|&i| &texts[i]).collect();
            let mut tape = Tape::inference();
            let v = enc.forward(&mut tape, store, &refs)?;
            for (r, &i) in chunk.iter().enumerate() {
                data[i * d..(i + 1) * d].copy_from_slice(tape.value(v).row(r));
            }
        }
        let cache = EmbeddingCache::new(model.num_items + 1, d, data, [0; 32])?;
        for b in batches.iter().filter(|b| !b.is_empty()) {
            let refs: Vec<&[usize]> = b.iter().map(Vec::as_slice).collect();
            let batch = history_batch(&refs, model.pad_index())?;
            let mut tape = Tape::inference();
            model.user_repr_cached(&mut tape, store, &cache, &batch)?;
        }
    } else {
        for b in batches.iter().filter(|b| !b.is_empty()) {
            let refs: Vec<&[usize]> = b.iter().map(Vec::as_slice).collect();
            let batch = history_batch(&refs, model.pad_index())?;
            let mut tape = Tape::inference();
            model.user_repr_uncached(&mut tape, store, texts, &batch)?;
        }
    }
    Ok(Redundancy {
        encoder_calls: enc.encode_count() - start,
        occurrences,
        distinct: distinct.len(),
    })
}

fn to_f64<T: Real>(rows: Vec<Vec<T>>) -> Vec<Vec<f64>> {
    rows.into_iter()
        .map(|r| r.into_iter().map(Real::to_f64).collect())
        .collect()
}

/// Lite model scored from precomputed item vectors.
pub struct LiteScorer<'a, T: Real> {
    pub model: &'a LiteModel,
    pub store: &'a ParamStore<T>,
    pub cache: &'a EmbeddingCache<T>,
}

impl<T: Real> Scorer for LiteScorer<'_, T> {
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(to_f64(self.model.score_cached(self.store, self.cache, histories)?))
    }
}

impl Scorer for Popularity {
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        Ok(histories.iter().map(|_| self.counts.clone()).collect())
    }
}

/// Token-sequence encoder + projection head (no decoder).
pub struct TokenHeadScorer<'a, T: Real> {
    pub model: &'a TokenHeadModel,
    pub store: &'a ParamStore<T>,
    pub vocab: &'a GenVocab,
    pub indexing: &'a TokenIndexing,
    pub max_input_len: usize,
}

impl<T: Real> Scorer for TokenHeadScorer<'_, T> {
    fn score(&self, histories: &[&[usize]]) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<Vec<u32>> = histories
            .iter()
            .map(|h| self.indexing.history_tokens(self.vocab, h, self.max_input_len))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        Ok(to_f64(self.model.scores(self.store, &refs)?))
    }
}

/// Encoder-decoder with beam search; generated items that are excluded for
/// the user are dropped from the list, which may then be shorter than `k`.
pub struct GenerativeRecommender<'a, T: Real> {
    pub model: &'a Seq2Seq,
    pub store: &'a ParamStore<T>,
    pub vocab: &'a GenVocab,
    pub indexing: &'a TokenIndexing,
    pub trie: Option<&'a ItemTrie>,
    pub beam: BeamConfig,
}

impl<T: Real> GenerativeRecommender<'_, T> {
    pub fn generate(&self, history: &[usize]) -> Result<Vec<usize>> {
        let input = self
            .indexing
            .history_tokens(self.vocab, history, self.model.config.max_input_len);
        let beams = recommend_by_beam(self.model, self.store, self.trie, &input, self.beam)?;
        let seqs: Vec<Vec<u32>> = beams.into_iter().map(|b| b.tokens).collect();
        Ok(parse_generated_items(&seqs, self.vocab).items)
    }
}

impl<T: Real> Recommender for GenerativeRecommender<'_, T> {
    /// Cases are encoded together and decoded in lockstep.
    fn recommend(&self, cases: &[EvalCase], k: usize) -> Result<Vec<Vec<usize>>> {
        if cases.is_empty() {
            return Ok(Vec::new());
        }
        let max_len = self.model.config.max_input_len;
        let inputs: Vec<Vec<u32>> = cases
            .iter()
            .map(|c| self.indexing.history_tokens(self.vocab, &c.history, max_len))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let beams = recommend_batch_by_beam(self.model, self.store, self.trie, &refs, self.beam)?;
        Ok(cases
            .iter()
            .zip(beams)
            .map(|(c, b)| {
                let seqs: Vec<Vec<u32>> = b.into_iter().map(|b| b.tokens).collect();
                let mut items = parse_generated_items(&seqs, self.vocab).items;
                items.retain(|i| !c.exclude.contains(i));
                items.truncate(k);
                items
            })
            .collect())
    }
}
