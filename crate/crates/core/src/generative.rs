//! Generative baseline: an encoder-decoder over item-ID token strings that
//! produces recommendations by auto-regressive beam search.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::sync::atomic::{AtomicUsize, Ordering as AtomicOrdering};

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::kernels;
use crate::nn::{AttnShape, DecoderLayer, EncoderConfig, EncoderStack, LayerNorm, Linear};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;
use crate::text::{decode_item_id_tokens, encode_item_id_tokens, Vocab, BOS_ID, EOS_ID, PAD_ID};

/// Token inventory of the baseline: reserved ids, the item-ID pieces, optional
/// text tokens, then filler tokens up to the emulated vocabulary size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GenVocab {
    pub vocab: Vocab,
    /// Added to an item index to form the number spelled by its ID tokens.
    pub id_offset: u64,
    pub num_items: usize,
    /// Ids of real (non-filler) tokens.
    pub num_real: usize,
}

impl GenVocab {
    pub fn new(num_items: usize, id_offset: u64, text: Option<&Vocab>, target_size: usize) -> Self {
        let mut v = Vocab::new();
        v.insert("item").expect("unfrozen");
        v.insert("_").expect("unfrozen");
        for d in 0..10 {
            v.insert(&format!("{d}")).expect("unfrozen");
        }
        for d in 0..100 {
            v.insert(&format!("{d:02}")).expect("unfrozen");
        }
        if let Some(text) = text {
            for t in text.user_tokens() {
                v.insert(t).expect("unfrozen");
            }
        }
        let num_real = v.len();
        let mut i = 0;
        while v.len() < target_size {
            v.insert(&format!("[extra{i}]")).expect("unfrozen");
            i += 1;
        }
        v.freeze();
        Self {
            vocab: v,
            id_offset,
            num_items,
            num_real,
        }
    }

    pub fn size(&self) -> usize {
        self.vocab.len()
    }

    pub fn item_tokens(&self, index: usize) -> Vec<u32> {
        encode_item_id_tokens(index as u64 + self.id_offset)
            .iter()
            .map(|t| self.vocab.id(t).expect("id pieces are always present"))
            .collect()
    }

    /// Map generated ids back to an item index, if they name an existing item.
    pub fn parse_item(&self, ids: &[u32]) -> Option<usize> {
        let ids = match ids.last() {
            Some(&EOS_ID) => &ids[..ids.len() - 1],
            _ => ids,
        };
        let toks = self.vocab.decode(ids);
        let number = decode_item_id_tokens(&toks)?;
        let index = number.checked_sub(self.id_offset)? as usize;
        (index < self.num_items).then_some(index)
    }
}

/// Prefix tree of valid generations (item ID tokens followed by EOS).
#[derive(Clone, Debug, Default)]
pub struct ItemTrie {
    children: Vec<BTreeMap<u32, usize>>,
}

impl ItemTrie {
    pub fn new<'a>(sequences: impl IntoIterator<Item = &'a [u32]>) -> Self {
        let mut t = Self {
            children: vec![BTreeMap::new()],
        };
        for seq in sequences {
            let mut node = 0;
            for &tok in seq.iter().chain(core::iter::once(&EOS_ID)) {
                let next = t.children.len();
                node = match t.children[node].get(&tok) {
                    Some(&n) => n,
                    None => {
                        t.children[node].insert(tok, next);
                        t.children.push(BTreeMap::new());
                        next
                    }
                };
            }
        }
        t
    }

    pub fn for_items(vocab: &GenVocab) -> Self {
        let seqs: Vec<Vec<u32>> = (0..vocab.num_items).map(|i| vocab.item_tokens(i)).collect();
        Self::new(seqs.iter().map(Vec::as_slice))
    }

    /// Allowed next tokens after `prefix` (ascending), empty if the prefix is
    /// not in the tree.
    pub fn allowed(&self, prefix: &[u32]) -> Vec<u32> {
        let mut node = 0;
        for tok in prefix {
            match self.children[node].get(tok) {
                Some(&n) => node = n,
                None => return Vec::new(),
            }
        }
        self.children[node].keys().copied().collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Seq2SeqConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub dropout: f64,
    pub max_input_len: usize,
    pub max_output_len: usize,
}

impl Default for Seq2SeqConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            dim: 64,
            ff_dim: 256,
            dropout: 0.1,
            max_input_len: 84,
            max_output_len: 8,
        }
    }
}

impl Seq2SeqConfig {
    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.layers,
            heads: self.heads,
            dim: self.dim,
            ff_dim: self.ff_dim,
            dropout: self.dropout,
        }
    }
}

/// Token embedding + learned positions + encoder stack over right-padded
/// token sequences.
#[derive(Clone, Debug)]
pub struct TokenEncoder {
    pub token_emb: ParamId,
    pub pos_emb: ParamId,
    pub stack: EncoderStack,
    pub vocab_size: usize,
    pub max_len: usize,
}

/// Output of [`TokenEncoder::forward`].
#[derive(Clone, Debug)]
pub struct Encoded {
    pub hidden: Var,
    pub mask: Vec<bool>,
    pub len: usize,
}

impl TokenEncoder {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        group: ParamGroup,
        config: EncoderConfig,
        vocab_size: usize,
        max_len: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let token_emb = store.add_uniform(format!("{name}.token_emb"), group, &[vocab_size, config.dim], 0.1, rng);
        let pos_emb = store.add_uniform(format!("{name}.pos_emb"), group, &[max_len, config.dim], 0.02, rng);
        let stack = EncoderStack::new(store, name, group, config, rng)?;
        Ok(Self {
            token_emb,
            pos_emb,
            stack,
            vocab_size,
            max_len,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, seqs: &[&[u32]]) -> Result<Encoded> {
        if seqs.is_empty() {
            return Err(Error::Empty("token batch"));
        }
        let len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        if len == 0 || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Empty("token sequence"));
        }
        if len > self.max_len {
            return Err(Error::Overlength { len, max: self.max_len });
        }
        let n = seqs.len();
        let mut ids = vec![PAD_ID as usize; n * len];
        let mut mask = vec![false; n * len];
        for (r, s) in seqs.iter().enumerate() {
            for (c, &t) in s.iter().enumerate() {
                ids[r * len + c] = t as usize;
                mask[r * len + c] = true;
            }
        }
        let positions: Vec<usize> = (0..n * len).map(|i| i % len).collect();
        let tok = tape.param(store, self.token_emb);
        let x = tape.embed(tok, &ids)?;
        let pos = tape.param(store, self.pos_emb);
        let p = tape.embed(pos, &positions)?;
        let x = tape.add(x, p)?;
        let x = tape.dropout(x, self.stack.config.dropout);
        let hidden = self.stack.forward(tape, store, x, n, len, &mask)?;
        Ok(Encoded { hidden, mask, len })
    }
}

/// Encoder-decoder transformer with a full-vocabulary output layer.
#[derive(Debug)]
pub struct Seq2Seq {
    pub config: Seq2SeqConfig,
    pub encoder: TokenEncoder,
    pub dec_pos: ParamId,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub lm_head: Linear,
    decoder_positions: AtomicUsize,
}

impl Clone for Seq2Seq {
    fn clone(&self) -> Self {
        Self {
            config: self.config,
            encoder: self.encoder.clone(),
            dec_pos: self.dec_pos,
            decoder: self.decoder.clone(),
            dec_norm: self.dec_norm.clone(),
            lm_head: self.lm_head.clone(),
            decoder_positions: AtomicUsize::new(self.decoder_positions()),
        }
    }
}

impl Seq2Seq {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        config: Seq2SeqConfig,
        vocab_size: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let g = ParamGroup::Baseline;
        let ec = config.encoder();
        let encoder = TokenEncoder::new(store, "gen_enc", g, ec, vocab_size, config.max_input_len, rng)?;
        let dec_pos = store.add_uniform("gen_dec.pos_emb", g, &[config.max_output_len, config.dim], 0.02, rng);
        let decoder = (0..config.layers)
            .map(|l| DecoderLayer::new(store, &format!("gen_dec.layer{l}"), g, &ec, rng))
            .collect();
        let dec_norm = LayerNorm::new(store, "gen_dec.final_norm", g, config.dim);
        let lm_head = Linear::new(store, "gen_dec.lm_head", g, config.dim, vocab_size, false, rng);
        Ok(Self {
            config,
            encoder,
            dec_pos,
            decoder,
            dec_norm,
            lm_head,
            decoder_positions: AtomicUsize::new(0),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.encoder.vocab_size
    }

    /// Decoder positions whose next-token distribution has been computed.
    pub fn decoder_positions(&self) -> usize {
        self.decoder_positions.load(AtomicOrdering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.decoder_positions.store(0, AtomicOrdering::Relaxed);
    }

    pub fn encode<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, inputs: &[&[u32]]) -> Result<Encoded> {
        self.encoder.forward(tape, store, inputs)
    }

    /// Decoder hidden states `[batch*len, d]` for equal-length `prefixes`
    /// (each starting with BOS) attending to `memory`.
    fn decode_hidden<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: &Encoded,
        prefixes: &[&[u32]],
    ) -> Result<(Var, usize)> {
        let batch = prefixes.len();
        let len = prefixes.first().map_or(0, |p| p.len());
        if len == 0 || prefixes.iter().any(|p| p.len() != len) {
            return Err(Error::Config(
                "decoder prefixes must be non-empty and equal length".into(),
            ));
        }
        if len > self.config.max_output_len {
            return Err(Error::Overlength {
                len,
                max: self.config.max_output_len,
            });
        }
        let ids: Vec<usize> = prefixes.iter().flat_map(|p| p.iter().map(|&t| t as usize)).collect();
        let positions: Vec<usize> = (0..batch * len).map(|i| i % len).collect();
        let tok = tape.param(store, self.encoder.token_emb);
        let x = tape.embed(tok, &ids)?;
        let pos = tape.param(store, self.dec_pos);
        let p = tape.embed(pos, &positions)?;
        let mut h = tape.add(x, p)?;
        h = tape.dropout(h, self.config.dropout);
        for layer in &self.decoder {
            h = layer.forward(
                tape,
                store,
                h,
                memory.hidden,
                batch,
                len,
                memory.len,
                &memory.mask,
                self.config.dropout,
            )?;
        }
        Ok((self.dec_norm.forward(tape, store, h)?, len))
    }

    /// Next-token logits `[batch, V]` after each prefix.
    pub fn next_token_logits<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        memory: &Encoded,
        prefixes: &[&[u32]],
    ) -> Result<Var> {
        let (h, len) = self.decode_hidden(tape, store, memory, prefixes)?;
        let last: Vec<Option<usize>> = (0..prefixes.len()).map(|b| Some(b * len + len - 1)).collect();
        let h = tape.gather_rows(h, &last)?;
        self.decoder_positions
            .fetch_add(prefixes.len(), AtomicOrdering::Relaxed);
        self.lm_head.forward(tape, store, h)
    }

    /// Encoder over `input` then next-token logits after `prefix`.
    pub fn seq2seq_forward<T: Real>(&self, store: &ParamStore<T>, input: &[u32], prefix: &[u32]) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let mem = self.encode(&mut tape, store, &[input])?;
        let logits = self.next_token_logits(&mut tape, store, &mem, &[prefix])?;
        Ok(tape.value(logits).data().to_vec())
    }

    /// Teacher-forced token cross-entropy of `targets` (ID tokens without
    /// BOS/EOS) given `inputs`, averaged over all target tokens including EOS.
    pub fn loss<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        inputs: &[&[u32]],
        targets: &[&[u32]],
    ) -> Result<Var> {
        let mem = self.encode(tape, store, inputs)?;
        let len = targets.iter().map(|t| t.len()).max().unwrap_or(0) + 1;
        let mut prefixes = Vec::with_capacity(targets.len());
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for (b, t) in targets.iter().enumerate() {
            let mut p = vec![BOS_ID];
            p.extend_from_slice(t);
            p.resize(len, PAD_ID);
            prefixes.push(p);
            for (j, &lab) in t.iter().chain(core::iter::once(&EOS_ID)).enumerate() {
                rows.push(Some(b * len + j));
                labels.push(lab as usize);
            }
        }
        let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
        let (h, _) = self.decode_hidden(tape, store, &mem, &refs)?;
        let h = tape.gather_rows(h, &rows)?;
        let logits = self.lm_head.forward(tape, store, h)?;
        tape.cross_entropy(logits, &labels)
    }
}

/// Beam-search settings. `length_alpha` divides scores by `len^alpha` when
/// ranking finished hypotheses (0 disables normalisation).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_width: usize,
    pub max_steps: usize,
    pub num_return: usize,
    pub length_alpha: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            beam_width: 20,
            max_steps: 6,
            num_return: 20,
            length_alpha: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Beam {
    /// Generated tokens, BOS excluded, EOS included when finished.
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub finished: bool,
}

impl Beam {
    fn normalized(&self, alpha: f64) -> f64 {
        if alpha == 0.0 {
            self.log_prob
        } else {
            self.log_prob / libm::pow(self.tokens.len().max(1) as f64, alpha)
        }
    }
}

/// Log-softmax of `logits` restricted to `allowed` (all tokens when `None`).
pub fn restricted_log_softmax<T: Real>(logits: &[T], allowed: Option<&[u32]>) -> Vec<(u32, f64)> {
    let vals: Vec<(u32, f64)> = match allowed {
        Some(a) => a.iter().map(|&t| (t, logits[t as usize].to_f64())).collect(),
        None => logits.iter().enumerate().map(|(t, x)| (t as u32, x.to_f64())).collect(),
    };
    let xs: Vec<f64> = vals.iter().map(|v| v.1).collect();
    let lse = kernels::log_sum_exp(&xs);
    vals.into_iter().map(|(t, x)| (t, x - lse)).collect()
}

fn cmp_candidates(a: &(f64, Vec<u32>), b: &(f64, Vec<u32>)) -> Ordering {
    b.0.total_cmp(&a.0).then_with(|| a.1.cmp(&b.1))
}

/// One fixed-width beam search, advanced a step at a time so that several
/// searches can share decoder calls. Every step evaluates all `beam_width`
/// rows (rows without a live hypothesis carry a duplicate prefix and are
/// ignored), so decoder work is `beam_width * steps`.
#[derive(Clone, Debug)]
pub struct BeamSearch {
    config: BeamConfig,
    live: Vec<Beam>,
    finished: Vec<Beam>,
    steps: usize,
    done: bool,
}

impl BeamSearch {
    pub fn new(config: BeamConfig) -> Result<Self> {
        let BeamConfig {
            beam_width,
            num_return,
            max_steps,
            ..
        } = config;
        if num_return == 0 || beam_width < num_return {
            return Err(Error::Config(format!(
                "beam width {beam_width} must be >= num_return {num_return} >= 1"
            )));
        }
        Ok(Self {
            config,
            live: vec![Beam {
                tokens: Vec::new(),
                log_prob: 0.0,
                finished: false,
            }],
            finished: Vec::new(),
            steps: 0,
            done: max_steps == 0,
        })
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Equal-length decoder inputs for the next step, BOS first: one per
    /// live hypothesis, padded to `beam_width` rows with copies of the first.
    pub fn rows(&self) -> Vec<Vec<u32>> {
        let mut rows: Vec<Vec<u32>> = self
            .live
            .iter()
            .map(|b| {
                let mut p = vec![BOS_ID];
                p.extend_from_slice(&b.tokens);
                p
            })
            .collect();
        while rows.len() < self.config.beam_width {
            rows.push(rows[0].clone());
        }
        rows
    }

    /// Expand the live hypotheses with `logits[b]`, the next-token logits of
    /// row `b` of the last [`Self::rows`]. With a trie, expansions are
    /// restricted to it and probabilities renormalised over the allowed
    /// tokens, so other logits are never read.
    pub fn advance<T: Real>(&mut self, logits: &[Vec<T>], trie: Option<&ItemTrie>) -> Result<()> {
        let BeamConfig {
            beam_width,
            max_steps,
            num_return,
            length_alpha,
        } = self.config;
        if self.done {
            return Err(Error::Config("beam search already finished".into()));
        }
        if logits.len() < self.live.len() {
            return Err(Error::Config(format!(
                "{} logit rows for {} live beams",
                logits.len(),
                self.live.len()
            )));
        }
        let mut cands: Vec<(f64, Vec<u32>)> = Vec::new();
        for (beam, row) in self.live.iter().zip(logits) {
            let allowed = trie.map(|t| t.allowed(&beam.tokens));
            for (tok, lp) in restricted_log_softmax(row, allowed.as_deref()) {
                let mut seq = beam.tokens.clone();
                seq.push(tok);
                cands.push((beam.log_prob + lp, seq));
            }
        }
        cands.sort_by(cmp_candidates);

        let mut next = Vec::with_capacity(beam_width);
        for (rank, (score, seq)) in cands.into_iter().enumerate() {
            if score == f64::NEG_INFINITY {
                break;
            }
            if seq.last() == Some(&EOS_ID) {
                if rank < beam_width {
                    self.finished.push(Beam {
                        tokens: seq,
                        log_prob: score,
                        finished: true,
                    });
                }
            } else {
                next.push(Beam {
                    tokens: seq,
                    log_prob: score,
                    finished: false,
                });
                if next.len() == beam_width {
                    break;
                }
            }
        }
        self.live = next;
        self.steps += 1;
        if self.live.is_empty() || self.steps == max_steps {
            self.done = true;
        } else if length_alpha == 0.0 && self.finished.len() >= num_return {
            self.finished
                .sort_by(|a, b| b.log_prob.total_cmp(&a.log_prob).then_with(|| a.tokens.cmp(&b.tokens)));
            // Scores only decrease as tokens are appended.
            self.done = self.live[0].log_prob <= self.finished[num_return - 1].log_prob;
        }
        Ok(())
    }

    /// The best `num_return` hypotheses, finished ones first.
    pub fn finish(self) -> Vec<Beam> {
        let BeamConfig {
            num_return,
            length_alpha,
            ..
        } = self.config;
        let (mut finished, mut live) = (self.finished, self.live);
        let rank = |a: &Beam, b: &Beam| {
            b.normalized(length_alpha)
                .total_cmp(&a.normalized(length_alpha))
                .then_with(|| a.tokens.cmp(&b.tokens))
        };
        finished.sort_by(rank);
        finished.truncate(num_return);
        if finished.len() < num_return {
            live.sort_by(rank);
            finished.extend(live.into_iter().take(num_return - finished.len()));
        }
        finished
    }
}

/// Fixed-width beam search over one query; see [`BeamSearch`].
///
/// `next_logits` maps equal-length prefixes (BOS first) to next-token
/// logits.
pub fn beam_search_decode<T, F>(mut next_logits: F, trie: Option<&ItemTrie>, config: BeamConfig) -> Result<Vec<Beam>>
where
    T: Real,
    F: FnMut(&[&[u32]]) -> Result<Vec<Vec<T>>>,
{
    let mut search = BeamSearch::new(config)?;
    while !search.is_done() {
        let rows = search.rows();
        let refs: Vec<&[u32]> = rows.iter().map(Vec::as_slice).collect();
        let logits = next_logits(&refs)?;
        search.advance(&logits, trie)?;
    }
    Ok(search.finish())
}

/// Greedy decoding: highest-probability allowed token (lowest id on ties)
/// until EOS or `max_steps`.
pub fn greedy_decode<T, F>(mut next_logits: F, trie: Option<&ItemTrie>, max_steps: usize) -> Result<Beam>
where
    T: Real,
    F: FnMut(&[&[u32]]) -> Result<Vec<Vec<T>>>,
{
    let mut beam = Beam {
        tokens: Vec::new(),
        log_prob: 0.0,
        finished: false,
    };
    for _ in 0..max_steps {
        let mut prefix = vec![BOS_ID];
        prefix.extend_from_slice(&beam.tokens);
        let logits = next_logits(&[&prefix])?;
        let allowed = trie.map(|t| t.allowed(&beam.tokens));
        let scored = restricted_log_softmax(&logits[0], allowed.as_deref());
        let Some(&(tok, lp)) = scored
            .iter()
            .max_by(|a, b| a.1.total_cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
        else {
            break;
        };
        beam.tokens.push(tok);
        beam.log_prob += lp;
        if tok == EOS_ID {
            beam.finished = true;
            break;
        }
    }
    Ok(beam)
}

/// Items recovered from generated sequences, in rank order.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParsedItems {
    pub items: Vec<usize>,
    pub invalid: usize,
    pub duplicates: usize,
}

/// Parse beams into item indices, dropping unparseable or non-existent items
/// and keeping the first occurrence of repeats.
pub fn parse_generated_items(sequences: &[Vec<u32>], vocab: &GenVocab) -> ParsedItems {
    let mut out = ParsedItems::default();
    let mut seen = BTreeSet::new();
    for s in sequences {
        match vocab.parse_item(s) {
            Some(i) if seen.insert(i) => out.items.push(i),
            Some(_) => out.duplicates += 1,
            None => out.invalid += 1,
        }
    }
    out
}

/// Self-attention keys and values of one decoded prefix, per layer, each
/// `[prefix_len, dim]` row-major.
#[derive(Clone, Debug)]
struct PrefixState<T> {
    keys: Vec<Vec<T>>,
    values: Vec<Vec<T>>,
}

/// Next-token inputs of one query for one decoding step: the query's row in
/// the encoded memory and its equal-length prefixes.
pub type QueryRows<'p> = (usize, &'p [&'p [u32]]);

/// Inference-time decoder over an encoded batch of queries that processes
/// only the newest token of each prefix. Keys and values of earlier positions
/// are cached per (query, prefix), and the memory's cross-attention keys and
/// values are projected once. Logits equal [`Seq2Seq::next_token_logits`] up
/// to floating-point reassociation.
pub struct IncrementalDecoder<'a, T: Real> {
    model: &'a Seq2Seq,
    store: &'a ParamStore<T>,
    /// `[queries * memory_len]`, `true` = real position.
    memory_mask: Vec<bool>,
    memory_len: usize,
    queries: usize,
    /// Per layer: projected memory keys and values `[queries * memory_len, dim]`.
    cross: Vec<(Var, Var)>,
    states: BTreeMap<(usize, Vec<u32>), PrefixState<T>>,
}

impl<'a, T: Real> IncrementalDecoder<'a, T> {
    pub fn new(model: &'a Seq2Seq, store: &'a ParamStore<T>, tape: &mut Tape<T>, memory: &Encoded) -> Result<Self> {
        if memory.len == 0 || memory.mask.is_empty() || !memory.mask.len().is_multiple_of(memory.len) {
            return Err(Error::Config("malformed encoder memory".into()));
        }
        let mut cross = Vec::with_capacity(model.decoder.len());
        for layer in &model.decoder {
            let k = layer.cross_attn.key.forward(tape, store, memory.hidden)?;
            let v = layer.cross_attn.value.forward(tape, store, memory.hidden)?;
            cross.push((k, v));
        }
        Ok(Self {
            model,
            store,
            memory_mask: memory.mask.clone(),
            memory_len: memory.len,
            queries: memory.mask.len() / memory.len,
            cross,
            states: BTreeMap::new(),
        })
    }

    pub fn queries(&self) -> usize {
        self.queries
    }

    /// Next-token logits `[rows, V]`, rows in group order. Every group holds
    /// the same number of prefixes, all of one length; each prefix is the
    /// one-token extension of a prefix its query passed to the previous call
    /// (or BOS alone on the first call).
    pub fn step(&mut self, tape: &mut Tape<T>, groups: &[QueryRows]) -> Result<Var> {
        let h = self.hidden(tape, groups)?;
        self.model.lm_head.forward(tape, self.store, h)
    }

    /// Logits of `tokens` only, for row `row` of a [`Self::hidden`] output;
    /// every other entry of the returned length-`V` row is `-inf`.
    pub fn logits_for(&self, tape: &Tape<T>, hidden: Var, row: usize, tokens: &[u32]) -> Vec<T> {
        let head = &self.model.lm_head;
        let w = self.store.value(head.weight).data();
        let bias = head.bias.map(|b| self.store.value(b).data());
        let h = tape.value(hidden).row(row);
        let mut out = vec![T::NEG_INFINITY; head.out_dim];
        for &t in tokens {
            let t = t as usize;
            let mut acc = bias.map_or(T::ZERO, |b| b[t]);
            for (i, &x) in h.iter().enumerate() {
                acc += x * w[i * head.out_dim + t];
            }
            out[t] = acc;
        }
        out
    }

    /// Final normalised decoder states `[rows, dim]`, before the output
    /// projection. Same contract as [`Self::step`].
    pub fn hidden(&mut self, tape: &mut Tape<T>, groups: &[QueryRows]) -> Result<Var> {
        let (model, store) = (self.model, self.store);
        let width = groups.first().map_or(0, |g| g.1.len());
        let len = groups.first().and_then(|g| g.1.first()).map_or(0, |p| p.len());
        if width == 0
            || len == 0
            || groups
                .iter()
                .any(|(q, ps)| *q >= self.queries || ps.len() != width || ps.iter().any(|p| p.len() != len))
        {
            return Err(Error::Config(
                "decoder groups must name encoded queries and hold equal counts of equal-length prefixes".into(),
            ));
        }
        if len > model.config.max_output_len {
            return Err(Error::Overlength {
                len,
                max: model.config.max_output_len,
            });
        }
        let rows: Vec<(usize, &[u32])> = groups
            .iter()
            .flat_map(|&(q, ps)| ps.iter().map(move |&p| (q, p)))
            .collect();
        let batch = rows.len();
        let parents: Vec<Option<&PrefixState<T>>> = rows
            .iter()
            .map(|&(q, p)| match len {
                1 => Ok(None),
                _ => self
                    .states
                    .get(&(q, p[..len - 1].to_vec()))
                    .map(Some)
                    .ok_or_else(|| Error::Config("prefix extends no previously decoded prefix".into())),
            })
            .collect::<Result<_>>()?;
        // Memory rows of the groups' queries, unless that is the whole batch.
        let m = self.memory_len;
        let all = groups.len() == self.queries && groups.iter().enumerate().all(|(i, g)| g.0 == i);
        let subset: Option<(Vec<Option<usize>>, Vec<bool>)> = (!all).then(|| {
            let idx = groups.iter().flat_map(|g| (g.0 * m..(g.0 + 1) * m).map(Some)).collect();
            let mask = groups
                .iter()
                .flat_map(|g| self.memory_mask[g.0 * m..(g.0 + 1) * m].iter().copied())
                .collect();
            (idx, mask)
        });
        let d = model.config.dim;
        let ids: Vec<usize> = rows.iter().map(|(_, p)| p[len - 1] as usize).collect();
        let tok = tape.param(store, model.encoder.token_emb);
        let x = tape.embed(tok, &ids)?;
        let pos = tape.param(store, model.dec_pos);
        let p = tape.embed(pos, &vec![len - 1; batch])?;
        let mut x = tape.add(x, p)?;
        let mut new_keys = vec![Vec::with_capacity(model.decoder.len()); batch];
        let mut new_values = vec![Vec::with_capacity(model.decoder.len()); batch];
        for (l, layer) in model.decoder.iter().enumerate() {
            let h = layer.self_norm.forward(tape, store, x)?;
            let attn = &layer.self_attn;
            let q = attn.query.forward(tape, store, h)?;
            let k = attn.key.forward(tape, store, h)?;
            let v = attn.value.forward(tape, store, h)?;
            let mut keys = Vec::with_capacity(batch * len * d);
            let mut values = Vec::with_capacity(batch * len * d);
            for b in 0..batch {
                let mut kb = parents[b].map_or_else(Vec::new, |s| s.keys[l].clone());
                let mut vb = parents[b].map_or_else(Vec::new, |s| s.values[l].clone());
                kb.extend_from_slice(tape.value(k).row(b));
                vb.extend_from_slice(tape.value(v).row(b));
                keys.extend_from_slice(&kb);
                values.extend_from_slice(&vb);
                new_keys[b].push(kb);
                new_values[b].push(vb);
            }
            let keys = tape.constant(Tensor::new(&[batch * len, d], keys)?);
            let values = tape.constant(Tensor::new(&[batch * len, d], values)?);
            let self_shape = AttnShape {
                batch,
                q_len: 1,
                k_len: len,
                key_mask: None,
                causal: false,
            };
            let a = attn.attend(tape, store, q, keys, values, self_shape)?;
            x = tape.add(x, a)?;

            let h = layer.cross_norm.forward(tape, store, x)?;
            let q = layer.cross_attn.query.forward(tape, store, h)?;
            let (mut mk, mut mv) = self.cross[l];
            if let Some((idx, _)) = &subset {
                mk = tape.gather_rows(mk, idx)?;
                mv = tape.gather_rows(mv, idx)?;
            }
            let cross_shape = AttnShape {
                batch: groups.len(),
                q_len: width,
                k_len: m,
                key_mask: Some(subset.as_ref().map_or(&self.memory_mask, |s| &s.1)),
                causal: false,
            };
            let a = layer.cross_attn.attend(tape, store, q, mk, mv, cross_shape)?;
            x = tape.add(x, a)?;

            let h = layer.ff_norm.forward(tape, store, x)?;
            let h = layer.ff.forward(tape, store, h, 0.0)?;
            x = tape.add(x, h)?;
        }
        for (((q, p), keys), values) in rows.iter().zip(new_keys).zip(new_values) {
            self.states.insert((*q, p.to_vec()), PrefixState { keys, values });
        }
        // Only prefixes of the current length can be extended next.
        self.states.retain(|k, _| k.1.len() == len);
        model.decoder_positions.fetch_add(batch, AtomicOrdering::Relaxed);
        model.dec_norm.forward(tape, store, x)
    }
}

/// Decode one query with a trained model: encode once, then beam search.
pub fn recommend_by_beam<T: Real>(
    model: &Seq2Seq,
    store: &ParamStore<T>,
    trie: Option<&ItemTrie>,
    input: &[u32],
    config: BeamConfig,
) -> Result<Vec<Beam>> {
    let mut out = recommend_batch_by_beam(model, store, trie, &[input], config)?;
    Ok(out.pop().unwrap_or_default())
}

/// [`recommend_by_beam`] for several queries, encoded together and decoded
/// in lockstep.
pub fn recommend_batch_by_beam<T: Real>(
    model: &Seq2Seq,
    store: &ParamStore<T>,
    trie: Option<&ItemTrie>,
    inputs: &[&[u32]],
    config: BeamConfig,
) -> Result<Vec<Vec<Beam>>> {
    let mut tape = Tape::inference();
    let mem = model.encode(&mut tape, store, inputs)?;
    beam_batch_from_memory(model, store, &mut tape, &mem, trie, config)
}

/// One beam search per query of `memory`, run in lockstep so that each step
/// is a single incremental decoder call over every unfinished search.
pub fn beam_batch_from_memory<T: Real>(
    model: &Seq2Seq,
    store: &ParamStore<T>,
    tape: &mut Tape<T>,
    memory: &Encoded,
    trie: Option<&ItemTrie>,
    config: BeamConfig,
) -> Result<Vec<Vec<Beam>>> {
    let mut decoder = IncrementalDecoder::new(model, store, tape, memory)?;
    let mut searches = (0..decoder.queries())
        .map(|_| BeamSearch::new(config))
        .collect::<Result<Vec<_>>>()?;
    loop {
        let active: Vec<usize> = (0..searches.len()).filter(|&q| !searches[q].is_done()).collect();
        if active.is_empty() {
            break;
        }
        let rows: Vec<Vec<Vec<u32>>> = active.iter().map(|&q| searches[q].rows()).collect();
        let refs: Vec<Vec<&[u32]>> = rows.iter().map(|r| r.iter().map(Vec::as_slice).collect()).collect();
        let groups: Vec<QueryRows> = active.iter().zip(&refs).map(|(&q, r)| (q, r.as_slice())).collect();
        let mut logits: Vec<Vec<T>> = match trie {
            // Renormalisation over allowed tokens never reads the others.
            Some(t) => {
                let h = decoder.hidden(tape, &groups)?;
                let prefixes = refs.iter().flatten();
                prefixes
                    .enumerate()
                    .map(|(r, p)| decoder.logits_for(tape, h, r, &t.allowed(&p[1..])))
                    .collect()
            }
            None => {
                let l = decoder.step(tape, &groups)?;
                let v = model.vocab_size();
                tape.value(l).data().chunks(v).map(<[T]>::to_vec).collect()
            }
        };
        let width = refs[0].len();
        for (i, &q) in active.iter().enumerate().rev() {
            let rest = logits.split_off(i * width);
            searches[q].advance(&rest, trie)?;
        }
    }
    Ok(searches.into_iter().map(BeamSearch::finish).collect())
}

/// Token ids of `title` words present in the vocabulary.
pub fn title_token_ids(vocab: &GenVocab, title: &str) -> Vec<u32> {
    crate::text::tokenize_text(title)
        .iter()
        .map(|t| vocab.vocab.id_or_unk(t))
        .collect()
}
