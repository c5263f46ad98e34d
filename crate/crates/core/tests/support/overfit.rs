//! Memorisation of a small synthetic corpus by the hierarchical model.

use llrec_core::data::Segment;
use llrec_core::eval::recall_at_k;
use llrec_core::head::top_k_recommend;
use llrec_core::item_encoder::{precompute_all_embeddings, ItemEncoderConfig};
use llrec_core::lite::{LiteConfig, LiteModel};
use llrec_core::rec_encoder::RecEncoderConfig;
use llrec_core::text::TokenizedText;
use llrec_core::train::{LiteTask, Strategy, TrainConfig, Trainer};
use llrec_core::{ParamStore, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const ITEMS: usize = 40;
pub const SEQUENCES: usize = 64;

pub fn corpus(seed: u64) -> (Vec<TokenizedText>, Vec<Segment>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let texts = (0..ITEMS)
        .map(|_| TokenizedText {
            ids: (0..rng.gen_range(2..6)).map(|_| rng.gen_range(4..60)).collect(),
        })
        .collect();
    let segs = (0..SEQUENCES)
        .map(|u| Segment {
            user: u,
            input: (0..rng.gen_range(3..9)).map(|_| rng.gen_range(0..ITEMS)).collect(),
            target: rng.gen_range(0..ITEMS),
        })
        .collect();
    (texts, segs)
}

pub fn small_config() -> LiteConfig {
    let item = ItemEncoderConfig {
        layers: 1,
        heads: 4,
        model_dim: 32,
        ff_dim: 64,
        max_item_text_len: 8,
        dropout: 0.0,
    };
    LiteConfig {
        item,
        rec: RecEncoderConfig {
            layers: 1,
            heads: 4,
            model_dim: 32,
            ff_dim: 64,
            max_seq_len: 21,
            dropout: 0.0,
        },
    }
}

/// Training-set Recall@1 in eval mode.
pub fn train_recall_at_1(
    model: &LiteModel,
    store: &ParamStore<f32>,
    texts: &[TokenizedText],
    segs: &[Segment],
) -> Result<f64> {
    let cache = precompute_all_embeddings(&model.item_encoder, store, texts, 64, [0; 32])?;
    let histories: Vec<&[usize]> = segs.iter().map(|s| s.input.as_slice()).collect();
    let scores = model.score_cached(store, &cache, &histories)?;
    let mut hits = 0.0;
    for (s, seg) in scores.iter().zip(segs) {
        hits += recall_at_k(&top_k_recommend(s, &[], 1)?, seg.target, 1);
    }
    Ok(hits / segs.len() as f64)
}

/// Epoch at which training Recall@1 first reaches 1.0, if within `max_epochs`.
pub fn epochs_to_memorise(max_epochs: usize) -> Result<Option<usize>> {
    let (texts, segs) = corpus(8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut store = ParamStore::new();
    let model = LiteModel::new(&mut store, small_config(), 60, ITEMS, &mut rng)?;
    let config = TrainConfig {
        strategy: Strategy::All,
        batch_size: 16,
        lr: 3e-3,
        dropout: 0.0,
        weight_decay: 0.0,
        ..TrainConfig::desk()
    };
    let steps = (max_epochs * SEQUENCES.div_ceil(config.batch_size)) as u64;
    let mut trainer = Trainer::new(config, &mut store, steps)?;
    let task = LiteTask {
        model: &model,
        texts: &texts,
    };
    for epoch in 1..=max_epochs {
        let mut order = segs.clone();
        rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut trainer.rng);
        trainer.train_segments(&task, &mut store, &order)?;
        if train_recall_at_1(&model, &store, &texts, &segs)? == 1.0 {
            return Ok(Some(epoch));
        }
    }
    Ok(None)
}
