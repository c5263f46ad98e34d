//! Exhaustive enumeration of every valid generation of a toy catalog,
//! compared against beam search.

use llrec_core::generative::{beam_search_decode, Beam, BeamConfig, ItemTrie, Seq2Seq, Seq2SeqConfig};
use llrec_core::text::{BOS_ID, EOS_ID};
use llrec_core::{ParamStore, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const VOCAB: usize = 32;

/// Ten items spelled by two tokens each.
pub fn toy_items() -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    for a in 10..13u32 {
        for b in 20..24u32 {
            if out.len() < 10 {
                out.push(vec![a, b]);
            }
        }
    }
    out
}

pub fn toy_model(seed: u64) -> Result<(ParamStore<f64>, Seq2Seq)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let config = Seq2SeqConfig {
        layers: 2,
        heads: 2,
        dim: 16,
        ff_dim: 32,
        dropout: 0.0,
        max_input_len: 16,
        max_output_len: 8,
    };
    let model = Seq2Seq::new(&mut store, config, VOCAB, &mut rng)?;
    Ok((store, model))
}

fn log_softmax_over(logits: &[f64], allowed: &[u32]) -> Vec<f64> {
    let m = allowed
        .iter()
        .map(|&t| logits[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = allowed.iter().map(|&t| (logits[t as usize] - m).exp()).sum();
    allowed.iter().map(|&t| logits[t as usize] - m - z.ln()).collect()
}

/// All finished sequences of at most `max_steps` tokens, best first.
pub fn enumerate(
    store: &ParamStore<f64>,
    model: &Seq2Seq,
    input: &[u32],
    items: &[Vec<u32>],
    max_steps: usize,
) -> Result<Vec<(Vec<u32>, f64)>> {
    let complete: Vec<Vec<u32>> = items
        .iter()
        .map(|s| s.iter().copied().chain(std::iter::once(EOS_ID)).collect())
        .collect();
    let mut out = Vec::new();
    let mut stack = vec![(Vec::<u32>::new(), 0.0f64)];
    while let Some((prefix, score)) = stack.pop() {
        if prefix.last() == Some(&EOS_ID) {
            out.push((prefix, score));
            continue;
        }
        if prefix.len() == max_steps {
            continue;
        }
        let mut allowed: Vec<u32> = complete
            .iter()
            .filter(|s| s.len() > prefix.len() && s[..prefix.len()] == prefix[..])
            .map(|s| s[prefix.len()])
            .collect();
        allowed.sort_unstable();
        allowed.dedup();
        let mut full = vec![BOS_ID];
        full.extend_from_slice(&prefix);
        let logits = model.seq2seq_forward(store, input, &full)?;
        for (&t, lp) in allowed.iter().zip(log_softmax_over(&logits, &allowed)) {
            let mut next = prefix.clone();
            next.push(t);
            stack.push((next, score + lp));
        }
    }
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    Ok(out)
}

pub fn beam(
    store: &ParamStore<f64>,
    model: &Seq2Seq,
    input: &[u32],
    trie: &ItemTrie,
    config: BeamConfig,
) -> Result<Vec<Beam>> {
    beam_search_decode(
        |prefixes| {
            prefixes
                .iter()
                .map(|p| model.seq2seq_forward(store, input, p))
                .collect()
        },
        Some(trie),
        config,
    )
}

/// Largest score deviation between beam search (B=20, S=4) and the
/// exhaustive ranking over several inputs, or `None` if any sequence differs.
pub fn max_deviation(inputs: &[Vec<u32>]) -> Result<Option<f64>> {
    let (store, model) = toy_model(31)?;
    let items = toy_items();
    let trie = ItemTrie::new(items.iter().map(Vec::as_slice));
    let config = BeamConfig {
        beam_width: 20,
        max_steps: 4,
        num_return: items.len(),
        length_alpha: 0.0,
    };
    let mut worst: f64 = 0.0;
    for input in inputs {
        let expected = enumerate(&store, &model, input, &items, 4)?;
        let got = beam(&store, &model, input, &trie, config)?;
        if expected.len() != got.len() {
            return Ok(None);
        }
        for ((seq, score), b) in expected.iter().zip(&got) {
            if *seq != b.tokens || !b.finished {
                return Ok(None);
            }
            worst = worst.max((score - b.log_prob).abs());
        }
    }
    Ok(Some(worst))
}

pub fn oracle_inputs() -> Vec<Vec<u32>> {
    vec![
        vec![10, 20, 3],
        vec![12, 23, 11, 21, 3],
        vec![5, 6, 7, 8, 9, 3],
        vec![3],
    ]
}
