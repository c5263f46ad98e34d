//! Full-sort reference for top-k selection with exclusions and ties.

use llrec_core::head::top_k_recommend;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn reference(logits: &[f32], exclude: &[usize], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..logits.len()).filter(|i| !exclude.contains(i)).collect();
    idx.sort_by(|&a, &b| logits[b].partial_cmp(&logits[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Number of trials whose output differs from the reference.
pub fn mismatches(trials: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for t in 0..trials {
        let n = rng.gen_range(1..=1000);
        // Coarse grids force many exact ties on alternate trials.
        let grid = if t % 2 == 0 { 7 } else { 1_000_000 };
        let logits: Vec<f32> = (0..n).map(|_| rng.gen_range(0..grid) as f32 / grid as f32).collect();
        let mut exclude: Vec<usize> = (0..rng.gen_range(0..=n / 4)).map(|_| rng.gen_range(0..n)).collect();
        exclude.sort_unstable();
        exclude.dedup();
        let available = n - exclude.len();
        let k = rng.gen_range(1..=available.clamp(1, 50));
        if available == 0 {
            continue;
        }
        match top_k_recommend(&logits, &exclude, k) {
            Ok(got) if got == reference(&logits, &exclude, k) => {}
            _ => bad += 1,
        }
    }
    bad
}
