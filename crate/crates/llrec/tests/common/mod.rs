//! Synthetic interaction corpora with a skewed item popularity.

#![allow(dead_code)]

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use llrec::config::RunConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: [&str; 24] = [
    "night", "river", "star", "house", "blue", "last", "city", "dream", "stone", "king", "winter", "lost", "fire",
    "road", "secret", "garden", "ghost", "silver", "ocean", "iron", "paper", "moon", "wild", "storm",
];
const GENRES: [&str; 8] = [
    "Action", "Comedy", "Drama", "Horror", "Romance", "Thriller", "Western", "Sci-Fi",
];

/// Write `interactions.tsv` and `items.tsv` under `dir`. Item `i` is drawn
/// with weight `1 / (i + 1)`, so low indices dominate.
pub fn write_synthetic(dir: &Path, users: usize, items: usize, seed: u64) -> io::Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights: Vec<f64> = (0..items).map(|i| 1.0 / (i + 1) as f64).collect();
    let total: f64 = weights.iter().sum();
    let draw = |rng: &mut ChaCha8Rng| {
        let mut x = rng.gen::<f64>() * total;
        for (i, w) in weights.iter().enumerate() {
            x -= w;
            if x <= 0.0 {
                return i;
            }
        }
        items - 1
    };
    let mut inter = String::new();
    for u in 0..users {
        let n = rng.gen_range(8..40).min(items);
        let mut seen = std::collections::BTreeSet::new();
        let mut t = 1_000_000 + u as u64 * 10_000;
        while seen.len() < n {
            let i = draw(&mut rng);
            if seen.insert(i) {
                t += rng.gen_range(1..500);
                inter.push_str(&format!("u{u}\t{}\t{}\t{t}\n", i + 1, rng.gen_range(1..=5)));
            }
        }
    }
    // Every item gets a few ratings so k-core filtering keeps the catalog.
    for i in 0..items {
        for r in 0..5 {
            inter.push_str(&format!("filler{r}\t{}\t3\t{}\n", i + 1, 500 + i * 5 + r));
        }
    }
    let mut meta = String::new();
    for i in 0..items {
        let title: Vec<&str> = (0..rng.gen_range(1..4))
            .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
            .collect();
        let genre = GENRES[rng.gen_range(0..GENRES.len())];
        meta.push_str(&format!(
            "{}\t{} {} ({})\t{genre}\n",
            i + 1,
            title.join(" "),
            i,
            1950 + i % 60
        ));
    }
    let (d, m) = (dir.join("interactions.tsv"), dir.join("items.tsv"));
    fs::write(&d, inter)?;
    fs::write(&m, meta)?;
    Ok((d, m))
}

/// Default configuration over a freshly written synthetic corpus.
pub fn synthetic_config(dir: &Path, users: usize, items: usize, seed: u64) -> RunConfig {
    let (d, m) = write_synthetic(&dir.join("synthetic"), users, items, seed).expect("write synthetic data");
    let mut c = RunConfig::default();
    c.data.interactions = Some(d);
    c.data.metadata = Some(m);
    c.out = dir.join("out");
    c
}
