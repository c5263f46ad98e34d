//! Central finite-difference checks of tape gradients in f64.

use llrec_core::baselines::{TokenHeadModel, TokenIndexing};
use llrec_core::data::Segment;
use llrec_core::generative::{GenVocab, Seq2Seq, Seq2SeqConfig};
use llrec_core::item_encoder::{EmbeddingCache, ItemEncoderConfig};
use llrec_core::lite::{LiteConfig, LiteModel};
use llrec_core::rec_encoder::{DimAdapter, RecEncoderConfig};
use llrec_core::text::TokenizedText;
use llrec_core::train::{GenerativeTask, LiteTask, SegmentModel, TokenHeadTask};
use llrec_core::{ParamStore, Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-6;
const TAPE_SEED: u64 = 0x5eed;
const MAX_ENTRIES_PER_PARAM: usize = 24;

#[derive(Clone, Debug)]
pub struct GradCase {
    pub name: &'static str,
    pub tolerance: f64,
    pub max_rel_err: f64,
    pub entries: usize,
}

impl GradCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= self.tolerance && self.entries > 0
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(FLOOR)
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Scalar `sum(out * R)` for a fixed random `R`, so every output element
/// carries a distinct weight.
fn project(tape: &mut Tape<f64>, out: Var) -> Result<Var> {
    let shape = tape.shape(out).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(shape.iter().product::<usize>() as u64);
    let r = tape.constant(random(&shape, &mut rng));
    let p = tape.mul(out, r)?;
    Ok(tape.sum(p))
}

type LeafFn = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var>;

fn eval_leaves(inputs: &[Tensor<f64>], f: &LeafFn) -> Result<f64> {
    let mut tape = Tape::training(TAPE_SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    Ok(tape.value(loss).data()[0])
}

pub fn check_leaves(name: &'static str, tolerance: f64, inputs: Vec<Tensor<f64>>, f: &LeafFn) -> Result<GradCase> {
    let mut tape = Tape::training(TAPE_SEED);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&mut tape, &vars)?;
    let loss = project(&mut tape, out)?;
    tape.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| {
            tape.grad(v)
                .map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec)
        })
        .collect();
    let mut case = GradCase {
        name,
        tolerance,
        max_rel_err: 0.0,
        entries: 0,
    };
    let mut work = inputs.clone();
    for (i, grads) in analytic.iter().enumerate() {
        for (j, &a) in grads.iter().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + STEP;
            let plus = eval_leaves(&work, f)?;
            work[i].data_mut()[j] = orig - STEP;
            let minus = eval_leaves(&work, f)?;
            work[i].data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * STEP);
            case.max_rel_err = case.max_rel_err.max(rel_err(a, n));
            case.entries += 1;
        }
    }
    Ok(case)
}

type StoreFn<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var> + 'a;

fn eval_store(store: &ParamStore<f64>, f: &StoreFn<'_>) -> Result<f64> {
    let mut tape = Tape::training(TAPE_SEED);
    let loss = f(&mut tape, store)?;
    Ok(tape.value(loss).data()[0])
}

/// Check every trainable parameter of `store` against the scalar `f`,
/// sampling at most a fixed number of entries per tensor.
pub fn check_store(
    name: &'static str,
    tolerance: f64,
    store: &mut ParamStore<f64>,
    f: &StoreFn<'_>,
) -> Result<GradCase> {
    let mut tape = Tape::training(TAPE_SEED);
    let loss = f(&mut tape, store)?;
    tape.backward(loss)?;
    store.zero_grad();
    tape.accumulate_param_grads(store);
    let mut case = GradCase {
        name,
        tolerance,
        max_rel_err: 0.0,
        entries: 0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let ids: Vec<_> = store.iter().map(|(id, _)| id).collect();
    for id in ids {
        if store.is_frozen(id) {
            continue;
        }
        let grad = match store.get(id).grad.clone() {
            Some(g) => g,
            None => continue,
        };
        let len = grad.len();
        let entries: Vec<usize> = if len <= MAX_ENTRIES_PER_PARAM {
            (0..len).collect()
        } else {
            (0..MAX_ENTRIES_PER_PARAM).map(|_| rng.gen_range(0..len)).collect()
        };
        for j in entries {
            let orig = store.value(id).data()[j];
            store.value_mut(id).data_mut()[j] = orig + STEP;
            let plus = eval_store(store, f)?;
            store.value_mut(id).data_mut()[j] = orig - STEP;
            let minus = eval_store(store, f)?;
            store.value_mut(id).data_mut()[j] = orig;
            let n = (plus - minus) / (2.0 * STEP);
            case.max_rel_err = case.max_rel_err.max(rel_err(grad[j], n));
            case.entries += 1;
        }
    }
    Ok(case)
}

fn texts(n: usize) -> Vec<TokenizedText> {
    (0..n)
        .map(|i| TokenizedText {
            ids: (0..1 + i % 3).map(|j| 4 + ((i * 3 + j) % 20) as u32).collect(),
        })
        .collect()
}

fn segments() -> Vec<Segment> {
    vec![
        Segment {
            user: 0,
            input: vec![0, 1, 2],
            target: 3,
        },
        Segment {
            user: 1,
            input: vec![4, 2],
            target: 0,
        },
        Segment {
            user: 2,
            input: vec![5],
            target: 6,
        },
    ]
}

fn lite_config(dropout: f64) -> LiteConfig {
    LiteConfig {
        item: ItemEncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 4,
            ff_dim: 8,
            max_item_text_len: 4,
            dropout,
        },
        rec: RecEncoderConfig {
            layers: 1,
            heads: 2,
            model_dim: 4,
            ff_dim: 8,
            max_seq_len: 5,
            dropout,
        },
    }
}

fn seq_config() -> Seq2SeqConfig {
    Seq2SeqConfig {
        layers: 1,
        heads: 2,
        dim: 4,
        ff_dim: 8,
        dropout: 0.1,
        max_input_len: 16,
        max_output_len: 6,
    }
}

/// Every case of the suite, in a fixed order.
pub fn run_all() -> Result<Vec<GradCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut r = |s: &[usize]| random(s, &mut rng);
    let mut out = Vec::new();

    out.push(check_leaves("matmul", 1e-4, vec![r(&[3, 4]), r(&[4, 2])], &|t, v| {
        t.matmul(v[0], v[1])
    })?);
    out.push(check_leaves(
        "matmul_nt",
        1e-4,
        vec![r(&[3, 4]), r(&[5, 4])],
        &|t, v| t.matmul_nt(v[0], v[1]),
    )?);
    out.push(check_leaves(
        "bmm",
        1e-4,
        vec![r(&[2, 3, 4]), r(&[2, 4, 5])],
        &|t, v| t.bmm(v[0], v[1], false, 1.0),
    )?);
    out.push(check_leaves(
        "bmm_transposed",
        1e-4,
        vec![r(&[2, 3, 4]), r(&[2, 5, 4])],
        &|t, v| t.bmm(v[0], v[1], true, 0.5),
    )?);
    out.push(check_leaves("add", 1e-3, vec![r(&[3, 4]), r(&[3, 4])], &|t, v| {
        t.add(v[0], v[1])
    })?);
    out.push(check_leaves("add_row", 1e-3, vec![r(&[3, 4]), r(&[4])], &|t, v| {
        t.add_row(v[0], v[1])
    })?);
    out.push(check_leaves("mul", 1e-3, vec![r(&[3, 4]), r(&[3, 4])], &|t, v| {
        t.mul(v[0], v[1])
    })?);
    out.push(check_leaves("scale", 1e-3, vec![r(&[3, 4])], &|t, v| {
        Ok(t.scale(v[0], -1.7))
    })?);
    out.push(check_leaves("sum", 1e-3, vec![r(&[3, 4])], &|t, v| Ok(t.sum(v[0])))?);
    out.push(check_leaves("gelu", 1e-3, vec![r(&[3, 5])], &|t, v| Ok(t.gelu(v[0])))?);
    out.push(check_leaves("softmax_rows", 1e-4, vec![r(&[3, 5])], &|t, v| {
        Ok(t.softmax_rows(v[0]))
    })?);
    out.push(check_leaves(
        "attention_softmax_masked",
        1e-4,
        vec![r(&[4, 3, 3])],
        &|t, v| t.attention_softmax(v[0], 2, Some(&[true, true, false, true, false, true]), false),
    )?);
    out.push(check_leaves(
        "attention_softmax_causal",
        1e-4,
        vec![r(&[2, 3, 3])],
        &|t, v| t.attention_softmax(v[0], 1, None, true),
    )?);
    out.push(check_leaves(
        "layer_norm",
        1e-4,
        vec![r(&[2, 8]), r(&[8]), r(&[8])],
        &|t, v| t.layer_norm(v[0], v[1], v[2], 1e-6),
    )?);
    out.push(check_leaves("gather_rows", 1e-3, vec![r(&[4, 3])], &|t, v| {
        t.gather_rows(v[0], &[Some(2), None, Some(2), Some(0)])
    })?);
    out.push(check_leaves("embed", 1e-3, vec![r(&[5, 3])], &|t, v| {
        t.embed(v[0], &[1, 1, 4, 0])
    })?);
    out.push(check_leaves("masked_mean", 1e-4, vec![r(&[6, 3])], &|t, v| {
        t.masked_mean(v[0], &[true, false, true, false, true, true], 2)
    })?);
    out.push(check_leaves("cross_entropy", 1e-3, vec![r(&[3, 6])], &|t, v| {
        t.cross_entropy(v[0], &[0, 5, 2])
    })?);
    out.push(check_leaves("dropout", 1e-3, vec![r(&[4, 6])], &|t, v| {
        Ok(t.dropout(v[0], 0.3))
    })?);
    out.push(check_leaves("reshape", 1e-3, vec![r(&[2, 6])], &|t, v| {
        t.reshape(v[0], &[3, 4])
    })?);
    out.push(check_leaves("split_heads", 1e-3, vec![r(&[6, 4])], &|t, v| {
        t.split_heads(v[0], 2, 3, 2)
    })?);
    out.push(check_leaves("merge_heads", 1e-3, vec![r(&[4, 3, 2])], &|t, v| {
        t.merge_heads(v[0], 2, 3, 2)
    })?);

    let mut mrng = ChaCha8Rng::seed_from_u64(77);
    let items = texts(8);
    let segs = segments();

    let mut store = ParamStore::<f64>::new();
    let adapter = DimAdapter::new(&mut store, 3, 4, &mut mrng);
    let x = r(&[2, 3]);
    out.push(check_store("adapter", 1e-3, &mut store, &|t, s| {
        let x = t.constant(x.clone());
        let y = adapter.forward(t, s, x)?;
        project(t, y)
    })?);

    let mut store = ParamStore::<f64>::new();
    let lite = LiteModel::new(&mut store, lite_config(0.1), 24, items.len(), &mut mrng)?;
    let task = LiteTask {
        model: &lite,
        texts: &items,
    };
    out.push(check_store("lite_model", 1e-3, &mut store, &|t, s| {
        task.segment_loss(t, s, &segs)
    })?);

    let mut store = ParamStore::<f64>::new();
    let mut lite = LiteModel::new(&mut store, lite_config(0.0), 24, items.len(), &mut mrng)?;
    let ext: Vec<f64> = (0..(items.len() + 1) * 3)
        .map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5)
        .collect();
    let cache = EmbeddingCache::new(items.len() + 1, 3, ext, [0; 32])?;
    lite.use_external_embeddings(&mut store, &cache, &mut mrng)?;
    store.set_frozen(llrec_core::ParamGroup::ItemTable, false);
    let task = LiteTask {
        model: &lite,
        texts: &items,
    };
    out.push(check_store("lite_model_item_table", 1e-3, &mut store, &|t, s| {
        task.segment_loss(t, s, &segs)
    })?);

    let vocab = GenVocab::new(items.len(), 10, None, 48);
    let indexing = TokenIndexing::ItemId;
    let mut store = ParamStore::<f64>::new();
    let gen = Seq2Seq::new(&mut store, seq_config(), vocab.size(), &mut mrng)?;
    let task = GenerativeTask {
        model: &gen,
        vocab: &vocab,
        indexing: &indexing,
    };
    out.push(check_store("generative_model", 1e-3, &mut store, &|t, s| {
        task.segment_loss(t, s, &segs)
    })?);

    let mut store = ParamStore::<f64>::new();
    let th = TokenHeadModel::new(&mut store, seq_config(), vocab.size(), items.len(), &mut mrng)?;
    let task = TokenHeadTask {
        model: &th,
        vocab: &vocab,
        indexing: &indexing,
        max_input_len: 16,
    };
    out.push(check_store("token_head_model", 1e-3, &mut store, &|t, s| {
        task.segment_loss(t, s, &segs)
    })?);

    Ok(out)
}
