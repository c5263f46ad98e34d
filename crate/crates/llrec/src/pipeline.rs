//! The commands behind the CLI. Each one reads inputs from, and writes
//! outputs into, an output directory tracked by a checksum manifest.
//!
//! Outputs are first written as `<name>.incomplete` and renamed only after
//! the whole command succeeds, so a failed run leaves flagged partial files
//! and never a half-written artifact under its final name.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use llrec_core::baselines::{Popularity, TokenHeadModel, TokenIndexing};
use llrec_core::data::{
    build_dataset, kcore_filter, leave_one_out_split, test_cases, valid_cases, EvalCase, ItemCatalog, UserSplit,
};
use llrec_core::eval::{
    count_redundant_encodings, evaluate_full, measure_input_length, topn_sampled_eval, EvalReport,
    GenerativeRecommender, LengthMeter, LiteScorer, Ranked, Redundancy, TokenHeadScorer,
};
use llrec_core::generative::{BeamConfig, GenVocab, ItemTrie, Seq2Seq};
use llrec_core::item_encoder::{precompute_all_embeddings, EmbeddingCache};
use llrec_core::lite::{ItemSource, LiteModel};
use llrec_core::text::{build_catalog_vocab, encode_item_context, TokenizedText, Vocab};
use llrec_core::train::{fit, FitReport, GenerativeTask, LiteTask, SegmentModel, TokenHeadTask, TrainConfig, Trainer};
use llrec_core::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::bench::{time_components, BeamPipeline, HeadPipeline, TimingReport};
use crate::config::RunConfig;
use crate::dataset::{load_interactions, load_metadata, read_items, read_splits, write_items, write_splits};
use crate::error::{Error, Result};
use crate::formats::{
    load_checkpoint, read_cache, read_vocab, save_checkpoint, sha256_hex, write_cache, write_vocab, Checkpoint,
};
use crate::report::{eval_rows, eval_table, timing_rows, timing_table, write_rows, Row};

pub const MANIFEST: &str = "manifest.tsv";
pub const INCOMPLETE: &str = ".incomplete";
pub const ITEMS: &str = "items.tsv";
pub const SPLITS: &str = "splits.tsv";
pub const VOCAB: &str = "vocab.txt";
pub const STATS: &str = "prepare.txt";
pub const CACHE: &str = "item_embeddings.bin";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Done,
    /// Every output already existed with the checksum in the manifest.
    Skipped,
}

/// Output directory plus its manifest of `name \t sha256 \t bytes`.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub dir: PathBuf,
}

impl Workspace {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        Ok(Self { dir })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn staging(&self, name: &str) -> PathBuf {
        self.dir.join(format!("{name}{INCOMPLETE}"))
    }

    pub fn manifest(&self) -> Result<BTreeMap<String, (String, u64)>> {
        let p = self.path(MANIFEST);
        if !p.exists() {
            return Ok(BTreeMap::new());
        }
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let mut m = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let f: Vec<&str> = line.split('\t').collect();
            let bytes = f.get(2).and_then(|b| b.parse().ok());
            match (f.len(), bytes) {
                (3, Some(b)) => {
                    m.insert(f[0].to_string(), (f[1].to_string(), b));
                }
                _ => return Err(Error::parse(&p, format!("line {}: malformed manifest entry", n + 1))),
            }
        }
        Ok(m)
    }

    /// All `names` exist and match their manifest checksums.
    pub fn is_complete(&self, names: &[String]) -> Result<bool> {
        let m = self.manifest()?;
        for n in names {
            let Some((sum, _)) = m.get(n) else {
                return Ok(false);
            };
            match fs::read(self.path(n)) {
                Ok(bytes) if &sha256_hex(&bytes) == sum => {}
                _ => return Ok(false),
            }
        }
        Ok(true)
    }

    /// Move staged outputs to their final names and record them.
    pub fn commit(&self, names: &[String]) -> Result<()> {
        let mut m = self.manifest()?;
        for n in names {
            let (from, to) = (self.staging(n), self.path(n));
            fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
            let bytes = fs::read(&to).map_err(|e| Error::io(&to, e))?;
            m.insert(n.clone(), (sha256_hex(&bytes), bytes.len() as u64));
        }
        let text: String = m.iter().map(|(n, (s, b))| format!("{n}\t{s}\t{b}\n")).collect();
        let tmp = self.staging(MANIFEST);
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        let dest = self.path(MANIFEST);
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))
    }
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Run `body` unless all `outputs` are complete; it writes each output to its
/// staging path, and they are committed together on success.
fn guarded(
    ws: &Workspace,
    command: &str,
    outputs: &[String],
    force: bool,
    body: impl FnOnce() -> Result<()>,
) -> Result<Outcome> {
    if !force && ws.is_complete(outputs)? {
        eprintln!(
            "{command}: outputs already complete in {}; skipping (use --force to redo)",
            ws.dir.display()
        );
        return Ok(Outcome::Skipped);
    }
    body()?;
    ws.commit(outputs)?;
    Ok(Outcome::Done)
}

fn names(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

/// Filtered, split dataset as written by `prepare`.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub catalog: ItemCatalog,
    pub splits: Vec<UserSplit>,
    pub raw_users: Vec<String>,
    pub vocab: Vocab,
}

impl Prepared {
    pub fn num_items(&self) -> usize {
        self.catalog.len()
    }

    pub fn texts(&self, config: &RunConfig) -> Vec<TokenizedText> {
        self.catalog
            .items()
            .iter()
            .map(|it| encode_item_context(it, &self.vocab, config.item.max_item_text_len))
            .collect()
    }

    pub fn load(ws: &Workspace) -> Result<Self> {
        let items = ws.path(ITEMS);
        if !items.exists() {
            return Err(Error::Missing(format!(
                "no prepared dataset in {}; run `llrec prepare` first",
                ws.dir.display()
            )));
        }
        let catalog = read_items(&items)?;
        let (splits, raw_users) = read_splits(&ws.path(SPLITS), catalog.len())?;
        let vocab = read_vocab(&ws.path(VOCAB))?;
        Ok(Self {
            catalog,
            splits,
            raw_users,
            vocab,
        })
    }
}

/// Load, k-core filter, index, split and build the text vocabulary.
pub fn prepare(config: &RunConfig, ws: &Workspace, force: bool) -> Result<Outcome> {
    config.check_paths()?;
    let outputs = names(&[ITEMS, SPLITS, VOCAB, STATS]);
    guarded(ws, "prepare", &outputs, force, || {
        let src = config.data.interactions.as_ref().expect("checked");
        let inter = load_interactions(src, config.data.format)?;
        let meta = match &config.data.metadata {
            Some(p) => Some(load_metadata(p, config.data.format)?),
            None => None,
        };
        let raw_count = inter.rows.len();
        let kept = kcore_filter(inter.rows, config.data.kcore)?;
        let kept_count = kept.len();
        let dataset = build_dataset(&kept, meta.as_ref().map_or(&[][..], |m| &m.rows))?;
        let splits = leave_one_out_split(&dataset.users)?;
        let vocab = build_catalog_vocab(dataset.catalog.items(), config.data.min_freq)?;
        let raw_users: Vec<String> = dataset.users.iter().map(|u| u.raw_id.clone()).collect();
        write_items(&ws.staging(ITEMS), &dataset.catalog)?;
        write_splits(&ws.staging(SPLITS), &splits, &raw_users)?;
        write_vocab(&ws.staging(VOCAB), &vocab)?;
        let mut stats = format!(
            "interaction_lines={}\nmalformed_interaction_lines={}\ninteractions_loaded={raw_count}\ninteractions_kept={kept_count}\nkcore={}\nusers={}\nitems={}\nvocab={}\n",
            inter.lines,
            inter.malformed,
            config.data.kcore,
            splits.len(),
            dataset.catalog.len(),
            vocab.len()
        );
        if let Some(m) = &meta {
            stats.push_str(&format!(
                "metadata_lines={}\nmalformed_metadata_lines={}\n",
                m.lines, m.malformed
            ));
        }
        if inter.malformed > 0 {
            eprintln!("prepare: skipped {} malformed interaction lines", inter.malformed);
        }
        if let Some(m) = meta.as_ref().filter(|m| m.malformed > 0) {
            eprintln!("prepare: skipped {} malformed metadata lines", m.malformed);
        }
        eprintln!(
            "prepare: {} users, {} items, {kept_count} interactions after {}-core",
            splits.len(),
            dataset.catalog.len(),
            config.data.kcore
        );
        write_text(&ws.staging(STATS), &stats)
    })
}

/// Trainable model families and the ablation rows built from them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ModelKind {
    Lite,
    LiteFixRec,
    LiteFixHead,
    /// Item-ID tokens, encoder-decoder, beam search.
    FullBeam,
    /// Item-ID tokens, encoder, projection head.
    WoD,
    /// Title tokens, encoder, projection head.
    WoDTid,
}

impl ModelKind {
    pub const ALL: [ModelKind; 6] = [
        ModelKind::FullBeam,
        ModelKind::WoD,
        ModelKind::WoDTid,
        ModelKind::Lite,
        ModelKind::LiteFixRec,
        ModelKind::LiteFixHead,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Self::Lite => "lite",
            Self::LiteFixRec => "lite+fixRec",
            Self::LiteFixHead => "lite+fixHead",
            Self::FullBeam => "full_beam",
            Self::WoD => "wo_d",
            Self::WoDTid => "wo_d_tid",
        }
    }

    /// File-name stem.
    pub fn stem(self) -> &'static str {
        match self {
            Self::LiteFixRec => "lite_fixrec",
            Self::LiteFixHead => "lite_fixhead",
            other => other.label(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.label() == s || k.stem() == s || (s == "generative" && *k == Self::FullBeam))
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown model `{s}` (lite, lite+fixRec, lite+fixHead, full_beam, wo_d, wo_d_tid)"
                ))
            })
    }

    pub fn is_lite(self) -> bool {
        matches!(self, Self::Lite | Self::LiteFixRec | Self::LiteFixHead)
    }

    pub fn checkpoint(self) -> String {
        format!("{}.ckpt", self.stem())
    }

    pub fn loss_log(self) -> String {
        format!("{}.loss.tsv", self.stem())
    }

    /// The run's training config with this variant's freeze flags.
    pub fn train_config(self, config: &RunConfig) -> TrainConfig {
        let mut t = config.train;
        match self {
            Self::LiteFixRec => t.freeze_rec_encoder = true,
            Self::LiteFixHead => t.freeze_projection_head = true,
            _ => {}
        }
        t
    }
}

/// What to evaluate: a trained model or the popularity ranking.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Target {
    Model(ModelKind),
    Popularity,
}

impl Target {
    pub fn parse(s: &str) -> Result<Self> {
        if s == "popularity" {
            Ok(Self::Popularity)
        } else {
            ModelKind::parse(s).map(Self::Model)
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Self::Model(k) => k.label(),
            Self::Popularity => "popularity",
        }
    }

    pub fn stem(self) -> &'static str {
        match self {
            Self::Model(k) => k.stem(),
            Self::Popularity => "popularity",
        }
    }
}

pub enum Net {
    Lite(LiteModel),
    Generative {
        model: Seq2Seq,
        vocab: GenVocab,
        indexing: TokenIndexing,
        trie: Option<ItemTrie>,
    },
    TokenHead {
        model: TokenHeadModel,
        vocab: GenVocab,
        indexing: TokenIndexing,
        max_input_len: usize,
    },
}

/// A model with its parameters and the inputs it needs.
pub struct Session {
    pub kind: ModelKind,
    pub net: Net,
    pub store: ParamStore<f32>,
    pub texts: Vec<TokenizedText>,
    /// Configuration the model was built from.
    pub config: RunConfig,
}

/// Items as title strings for the title-token variant.
fn titles(p: &Prepared) -> Vec<&str> {
    p.catalog.items().iter().map(|it| it.title.as_str()).collect()
}

impl Session {
    /// Fresh model, initialised from `config.train.seed`.
    pub fn build(kind: ModelKind, config: &RunConfig, prepared: &Prepared) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        let mut store = ParamStore::new();
        let n = prepared.num_items();
        let b = &config.baseline;
        let net = match kind {
            k if k.is_lite() => Net::Lite(LiteModel::new(
                &mut store,
                config.lite(),
                prepared.vocab.len(),
                n,
                &mut rng,
            )?),
            ModelKind::FullBeam => {
                let vocab = GenVocab::new(n, b.id_offset, None, b.vocab_size);
                let model = Seq2Seq::new(&mut store, config.seq2seq(), vocab.size(), &mut rng)?;
                let trie = b.constrained.then(|| ItemTrie::for_items(&vocab));
                Net::Generative {
                    model,
                    vocab,
                    indexing: TokenIndexing::ItemId,
                    trie,
                }
            }
            ModelKind::WoD => {
                let vocab = GenVocab::new(n, b.id_offset, None, b.vocab_size);
                let sc = config.seq2seq();
                let model = TokenHeadModel::new(&mut store, sc, vocab.size(), n, &mut rng)?;
                Net::TokenHead {
                    model,
                    vocab,
                    indexing: TokenIndexing::ItemId,
                    max_input_len: sc.max_input_len,
                }
            }
            _ => {
                let vocab = GenVocab::new(n, b.id_offset, Some(&prepared.vocab), b.vocab_size);
                let indexing = TokenIndexing::titles(&vocab, titles(prepared));
                let sc = config.title_seq2seq();
                let model = TokenHeadModel::new(&mut store, sc, vocab.size(), n, &mut rng)?;
                Net::TokenHead {
                    model,
                    vocab,
                    indexing,
                    max_input_len: sc.max_input_len,
                }
            }
        };
        Ok(Self {
            kind,
            net,
            store,
            texts: prepared.texts(config),
            config: config.clone(),
        })
    }

    /// Rebuild from the configuration stored in `ckpt` and load its values.
    pub fn from_checkpoint(kind: ModelKind, ckpt: &Checkpoint, prepared: &Prepared) -> Result<Self> {
        let config = RunConfig::parse(&ckpt.config)?;
        let mut s = Self::build(kind, &config, prepared)?;
        if let Some(t) = ckpt.tensors.iter().find(|t| t.name == "item_table") {
            let Net::Lite(m) = &mut s.net else {
                return Err(Error::Missing(
                    "item table found in a non-hierarchical checkpoint".into(),
                ));
            };
            let rows = t.shape.first().copied().unwrap_or(0);
            let dim = t.shape.get(1).copied().unwrap_or(0);
            let blank = EmbeddingCache::new(rows, dim, t.data.clone(), [0; 32])?;
            m.promote_cache_to_table(&mut s.store, &blank)?;
        }
        ckpt.restore_params(&mut s.store)?;
        Ok(s)
    }

    pub fn load(kind: ModelKind, ws: &Workspace, prepared: &Prepared) -> Result<Self> {
        let p = ws.path(&kind.checkpoint());
        if !p.exists() {
            return Err(Error::Missing(format!(
                "no checkpoint for `{}` at {}; run `llrec train --model {}` first",
                kind.label(),
                p.display(),
                kind.label()
            )));
        }
        Self::from_checkpoint(kind, &load_checkpoint(&p)?, prepared)
    }

    /// Fingerprint of the model's configuration.
    pub fn fingerprint(&self) -> String {
        self.config.fingerprint()
    }

    pub fn lite(&self) -> Option<&LiteModel> {
        match &self.net {
            Net::Lite(m) => Some(m),
            _ => None,
        }
    }
}

/// Context-aware item vectors of a hierarchical model: fresh encodes, or the
/// fine-tuned table when one is attached.
pub fn lite_cache(
    model: &LiteModel,
    store: &ParamStore<f32>,
    texts: &[TokenizedText],
    vocab: &Vocab,
) -> llrec_core::Result<EmbeddingCache<f32>> {
    match model.source {
        ItemSource::Encoder => {
            let fp = model.item_encoder.fingerprint(store, vocab);
            precompute_all_embeddings(&model.item_encoder, store, texts, 256, fp)
        }
        ItemSource::Table(id) => {
            let t = store.value(id);
            let mut h = Sha256::new();
            for x in t.data() {
                h.update(x.to_le_bytes());
            }
            EmbeddingCache::new(t.rows(), t.cols(), t.data().to_vec(), h.finalize().into())
        }
    }
}

/// Window of most recent items fed to every model at evaluation.
pub fn window(config: &RunConfig) -> usize {
    config.train.max_seq_len - 1
}

/// Full-catalog metrics for `net` on `cases`.
#[allow(clippy::too_many_arguments)]
fn evaluate_net(
    net: &Net,
    store: &ParamStore<f32>,
    texts: &[TokenizedText],
    vocab: &Vocab,
    cache: Option<&EmbeddingCache<f32>>,
    cases: &[EvalCase],
    ks: &[usize],
    config: &RunConfig,
    fingerprint: &str,
) -> llrec_core::Result<EvalReport> {
    let bs = config.eval.batch_size;
    match net {
        Net::Lite(model) => {
            let fresh;
            let cache = match cache {
                Some(c) => c,
                None => {
                    fresh = lite_cache(model, store, texts, vocab)?;
                    &fresh
                }
            };
            let scorer = LiteScorer { model, store, cache };
            evaluate_full(&Ranked(scorer), cases, ks, bs, fingerprint)
        }
        Net::Generative {
            model,
            vocab,
            indexing,
            trie,
        } => {
            let rec = GenerativeRecommender {
                model,
                store,
                vocab,
                indexing,
                trie: trie.as_ref(),
                beam: config.eval.beam,
            };
            evaluate_full(&rec, cases, ks, bs, fingerprint)
        }
        Net::TokenHead {
            model,
            vocab,
            indexing,
            max_input_len,
        } => {
            let scorer = TokenHeadScorer {
                model,
                store,
                vocab,
                indexing,
                max_input_len: *max_input_len,
            };
            evaluate_full(&Ranked(scorer), cases, ks, bs, fingerprint)
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn fit_net(
    net: &Net,
    texts: &[TokenizedText],
    vocab: &Vocab,
    trainer: &mut Trainer<f32>,
    store: &mut ParamStore<f32>,
    prepared: &Prepared,
    config: &RunConfig,
    log: &mut String,
    phase: usize,
) -> Result<FitReport> {
    #[allow(clippy::too_many_arguments)]
    fn run<M: SegmentModel<f32>>(
        task: &M,
        net: &Net,
        texts: &[TokenizedText],
        vocab: &Vocab,
        trainer: &mut Trainer<f32>,
        store: &mut ParamStore<f32>,
        prepared: &Prepared,
        config: &RunConfig,
        log: &mut String,
        phase: usize,
    ) -> Result<FitReport> {
        let cases = valid_cases(&prepared.splits, window(config));
        let mut clock = Instant::now();
        Ok(fit(
            trainer,
            task,
            store,
            &prepared.splits,
            |s| evaluate_net(net, s, texts, vocab, None, &cases, &[10], config, "").map(|r| r.recall[0]),
            |t, _, stats, v| {
                log.push_str(&format!(
                    "{phase}\t{}\t{}\t{v}\t{}\n",
                    stats.epoch, stats.mean_loss, stats.last_lr
                ));
                eprintln!(
                    "  phase {phase} epoch {:>3}  loss {:.4}  valid R@10 {v:.4}  lr {:.2e}  ({:.1}s)",
                    t.epoch,
                    stats.mean_loss,
                    stats.last_lr,
                    clock.elapsed().as_secs_f64()
                );
                clock = Instant::now();
                Ok(())
            },
        )?)
    }
    match net {
        Net::Lite(model) => {
            let task = LiteTask { model, texts };
            run(&task, net, texts, vocab, trainer, store, prepared, config, log, phase)
        }
        Net::Generative {
            model,
            vocab: gv,
            indexing,
            ..
        } => {
            let task = GenerativeTask {
                model,
                vocab: gv,
                indexing,
            };
            run(&task, net, texts, vocab, trainer, store, prepared, config, log, phase)
        }
        Net::TokenHead {
            model,
            vocab: gv,
            indexing,
            max_input_len,
        } => {
            let task = TokenHeadTask {
                model,
                vocab: gv,
                indexing,
                max_input_len: *max_input_len,
            };
            run(&task, net, texts, vocab, trainer, store, prepared, config, log, phase)
        }
    }
}

/// Summary of a finished training run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainSummary {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub phase2_used: bool,
}

/// Train `kind` and return the session holding the best parameters.
/// Hierarchical models optionally continue with the cached item vectors as
/// trainable parameters; that phase is kept only if it improves validation
/// R@10.
pub fn train_session(
    config: &RunConfig,
    prepared: &Prepared,
    kind: ModelKind,
) -> Result<(Session, Trainer<f32>, String, TrainSummary)> {
    let mut session = Session::build(kind, config, prepared)?;
    let tc = kind.train_config(config);
    let total = tc.steps_per_epoch(&prepared.splits) as u64 * tc.max_epochs as u64;
    let mut trainer = Trainer::new(tc, &mut session.store, total)?;
    let mut log = String::from("phase\tepoch\tmean_loss\tvalid_recall@10\tlr\n");
    let Session { net, store, texts, .. } = &mut session;
    let first = fit_net(
        net,
        texts,
        &prepared.vocab,
        &mut trainer,
        store,
        prepared,
        config,
        &mut log,
        1,
    )?;
    let mut summary = TrainSummary {
        epochs: first.epochs.len(),
        best_epoch: first.best_epoch,
        best_valid: first.best_valid,
        phase2_used: false,
    };
    if kind.is_lite() && config.phase2_epochs > 0 {
        let Net::Lite(model) = &mut session.net else {
            unreachable!()
        };
        let cache = lite_cache(model, &session.store, &session.texts, &prepared.vocab)?;
        model.promote_cache_to_table(&mut session.store, &cache)?;
        let before = session.store.clone();
        trainer.config.fine_tune_cached_embeddings = true;
        trainer.config.max_epochs = config.phase2_epochs;
        trainer.config.apply_freezes(&mut session.store);
        trainer.optimizer.track_new_params(&session.store);
        let Session { net, store, texts, .. } = &mut session;
        let second = fit_net(
            net,
            texts,
            &prepared.vocab,
            &mut trainer,
            store,
            prepared,
            config,
            &mut log,
            2,
        )?;
        summary.epochs += second.epochs.len();
        if second.best_valid > first.best_valid {
            summary.best_epoch = first.epochs.len() + second.best_epoch;
            summary.best_valid = second.best_valid;
            summary.phase2_used = true;
        } else {
            session.store.load_values(&before)?;
        }
    }
    Ok((session, trainer, log, summary))
}

pub fn train(config: &RunConfig, ws: &Workspace, kind: ModelKind, force: bool) -> Result<Outcome> {
    let outputs = vec![kind.checkpoint(), kind.loss_log()];
    guarded(ws, "train", &outputs, force, || {
        let prepared = Prepared::load(ws)?;
        eprintln!(
            "train: {} on {} users, {} items",
            kind.label(),
            prepared.splits.len(),
            prepared.num_items()
        );
        let start = Instant::now();
        let (session, trainer, log, summary) = train_session(config, &prepared, kind)?;
        let ckpt = Checkpoint::capture(
            &session.store,
            Some(&trainer),
            summary.best_valid,
            config.checkpoint_text(),
        );
        save_checkpoint(&ws.staging(&outputs[0]), &ckpt)?;
        write_text(&ws.staging(&outputs[1]), &log)?;
        eprintln!(
            "train: {} done in {:.1}s, {} epochs, best valid R@10 {:.4} at epoch {}{}",
            kind.label(),
            start.elapsed().as_secs_f64(),
            summary.epochs,
            summary.best_valid,
            summary.best_epoch,
            if summary.phase2_used {
                " (cached-embedding fine-tuning kept)"
            } else {
                ""
            }
        );
        Ok(())
    })
}

/// Write the item-embedding cache of the trained hierarchical model.
pub fn precompute(ws: &Workspace, force: bool) -> Result<Outcome> {
    let outputs = names(&[CACHE]);
    guarded(ws, "precompute", &outputs, force, || {
        let prepared = Prepared::load(ws)?;
        let s = Session::load(ModelKind::Lite, ws, &prepared)?;
        let model = s.lite().expect("lite session");
        let cache = lite_cache(model, &s.store, &s.texts, &prepared.vocab)?;
        write_cache(&ws.staging(CACHE), &cache)?;
        eprintln!("precompute: {} item vectors of width {}", cache.num_items(), cache.dim);
        Ok(())
    })
}

/// The on-disk cache if it matches the model, else a fresh one.
fn cache_for(ws: &Workspace, s: &Session, vocab: &Vocab) -> Result<EmbeddingCache<f32>> {
    let model = s.lite().expect("lite session");
    let fresh = lite_cache(model, &s.store, &s.texts, vocab)?;
    let p = ws.path(CACHE);
    if s.kind == ModelKind::Lite && p.exists() {
        let disk = read_cache(&p)?;
        if disk.is_valid_for(&fresh.fingerprint) {
            return Ok(disk);
        }
        eprintln!(
            "eval: {} is stale for the current checkpoint; using fresh item vectors",
            p.display()
        );
    }
    Ok(fresh)
}

pub fn eval_file(target: Target) -> String {
    format!("eval_{}.tsv", target.stem())
}

pub fn topn_file(target: Target) -> String {
    format!("topn_{}.tsv", target.stem())
}

/// Full-catalog test metrics for one target.
pub fn evaluate_target(config: &RunConfig, ws: &Workspace, prepared: &Prepared, target: Target) -> Result<EvalReport> {
    let cases = test_cases(&prepared.splits, window(config), config.eval.include_valid);
    let ks = &config.eval.ks;
    match target {
        Target::Popularity => {
            let pop = Popularity::fit(&prepared.splits, prepared.num_items());
            Ok(evaluate_full(
                &Ranked(&pop),
                &cases,
                ks,
                config.eval.batch_size,
                &config.fingerprint(),
            )?)
        }
        Target::Model(kind) => {
            let s = Session::load(kind, ws, prepared)?;
            let cache = match s.net {
                Net::Lite(_) => Some(cache_for(ws, &s, &prepared.vocab)?),
                _ => None,
            };
            Ok(evaluate_net(
                &s.net,
                &s.store,
                &s.texts,
                &prepared.vocab,
                cache.as_ref(),
                &cases,
                ks,
                config,
                &s.fingerprint(),
            )?)
        }
    }
}

pub fn eval(config: &RunConfig, ws: &Workspace, targets: &[Target], force: bool) -> Result<Vec<(Target, EvalReport)>> {
    let prepared = Prepared::load(ws)?;
    let mut out = Vec::new();
    for &t in targets {
        let file = eval_file(t);
        let mut report = None;
        guarded(ws, "eval", std::slice::from_ref(&file), force, || {
            let r = evaluate_target(config, ws, &prepared, t)?;
            write_rows(
                &ws.staging(&file),
                &[format!("full-catalog evaluation of {}", t.label())],
                &eval_rows(t.label(), &r),
            )?;
            report = Some(r);
            Ok(())
        })?;
        if let Some(r) = report {
            out.push((t, r));
        }
    }
    let refs: Vec<(&str, &EvalReport)> = out.iter().map(|(t, r)| (t.label(), r)).collect();
    print!("{}", eval_table(&refs));
    Ok(out)
}

/// Sampled top-N metrics: ground truth among `eval.negatives` negatives.
pub fn topn(config: &RunConfig, ws: &Workspace, targets: &[Target], force: bool) -> Result<Vec<(Target, EvalReport)>> {
    let prepared = Prepared::load(ws)?;
    let cases = test_cases(&prepared.splits, window(config), config.eval.include_valid);
    let (n, neg, ks, seed) = (
        prepared.num_items(),
        config.eval.negatives,
        &config.eval.ks,
        config.train.seed,
    );
    let mut out = Vec::new();
    for &t in targets {
        let file = topn_file(t);
        let mut report = None;
        guarded(ws, "topn", std::slice::from_ref(&file), force, || {
            let r = match t {
                Target::Popularity => {
                    let pop = Popularity::fit(&prepared.splits, n);
                    topn_sampled_eval(&pop, &cases, n, neg, ks, seed, &config.fingerprint())?
                }
                Target::Model(kind) => {
                    let s = Session::load(kind, ws, &prepared)?;
                    let fp = s.fingerprint();
                    match &s.net {
                        Net::Lite(model) => {
                            let cache = cache_for(ws, &s, &prepared.vocab)?;
                            let scorer = LiteScorer {
                                model,
                                store: &s.store,
                                cache: &cache,
                            };
                            topn_sampled_eval(&scorer, &cases, n, neg, ks, seed, &fp)?
                        }
                        Net::TokenHead {
                            model,
                            vocab,
                            indexing,
                            max_input_len,
                        } => {
                            let scorer = TokenHeadScorer {
                                model,
                                store: &s.store,
                                vocab,
                                indexing,
                                max_input_len: *max_input_len,
                            };
                            topn_sampled_eval(&scorer, &cases, n, neg, ks, seed, &fp)?
                        }
                        Net::Generative { .. } => {
                            return Err(Error::Config(
                                "topn ranks candidates by score; full_beam generates lists instead".into(),
                            ))
                        }
                    }
                }
            };
            let note = format!("sampled evaluation of {}: {neg} negatives, seed {seed}", t.label());
            write_rows(&ws.staging(&file), &[note], &eval_rows(t.label(), &r))?;
            report = Some(r);
            Ok(())
        })?;
        if let Some(r) = report {
            out.push((t, r));
        }
    }
    let refs: Vec<(&str, &EvalReport)> = out.iter().map(|(t, r)| (t.label(), r)).collect();
    print!("{}", eval_table(&refs));
    Ok(out)
}

pub const BENCH_TIMING: &str = "bench_timing.tsv";
pub const BENCH_LENGTHS: &str = "bench_lengths.tsv";
pub const BENCH_REDUNDANCY: &str = "bench_redundancy.tsv";

/// Trained session if its checkpoint exists, else a fresh one.
fn session_or_fresh(
    kind: ModelKind,
    config: &RunConfig,
    ws: &Workspace,
    prepared: &Prepared,
) -> Result<(Session, bool)> {
    if ws.path(&kind.checkpoint()).exists() {
        Ok((Session::load(kind, ws, prepared)?, true))
    } else {
        Ok((Session::build(kind, config, prepared)?, false))
    }
}

/// Timing of the head pipeline and of beam search at each width.
pub fn bench_timings(
    config: &RunConfig,
    lite: &Session,
    beam: &Session,
    histories: &[Vec<usize>],
    prepared: &Prepared,
) -> Result<Vec<TimingReport>> {
    let b = &config.bench;
    let model = lite.lite().expect("lite session");
    let cache = lite_cache(model, &lite.store, &lite.texts, &prepared.vocab)?;
    let mut head = HeadPipeline {
        model,
        store: &lite.store,
        cache: &cache,
        histories,
        batch_size: b.batch_size,
        k: b.num_return,
    };
    let mut reports = vec![time_components(&mut head, b.batches, b.warmup, b.reps)?];
    let Net::Generative {
        model,
        vocab,
        indexing,
        trie,
    } = &beam.net
    else {
        return Err(Error::Config("beam timing needs the full_beam model".into()));
    };
    for &width in &b.beam_widths {
        let mut p = BeamPipeline {
            model,
            store: &beam.store,
            vocab,
            indexing,
            trie: trie.as_ref(),
            beam: BeamConfig {
                beam_width: width,
                num_return: width.min(b.num_return),
                ..config.eval.beam
            },
            histories,
            batch_size: b.batch_size,
        };
        reports.push(time_components(&mut p, b.batches, b.warmup, b.reps)?);
    }
    Ok(reports)
}

/// Mean input positions of each pipeline on the same histories.
pub fn bench_lengths(config: &RunConfig, prepared: &Prepared, histories: &[&[usize]], fp: &str) -> Vec<Row> {
    let cap = config.rec.max_seq_len;
    let b = &config.baseline;
    let id_vocab = GenVocab::new(prepared.num_items(), b.id_offset, None, b.vocab_size);
    let title_vocab = GenVocab::new(prepared.num_items(), b.id_offset, Some(&prepared.vocab), b.vocab_size);
    let title_ix = TokenIndexing::titles(&title_vocab, titles(prepared));
    let meters = [
        ("input_length.hierarchical", LengthMeter::Hierarchical),
        (
            "input_length.id_tokens",
            LengthMeter::Tokens {
                vocab: &id_vocab,
                indexing: &TokenIndexing::ItemId,
            },
        ),
        (
            "input_length.title_tokens",
            LengthMeter::Tokens {
                vocab: &title_vocab,
                indexing: &title_ix,
            },
        ),
    ];
    let mut rows = Vec::new();
    for (name, m) in meters {
        let l = measure_input_length(m, histories, cap);
        rows.push(Row::new(format!("{name}.mean"), Some(cap), l.mean(), fp));
        rows.push(Row::new(
            format!("{name}.total"),
            Some(cap),
            l.total_positions as f64,
            fp,
        ));
    }
    rows
}

fn redundancy_rows(name: &str, r: &Redundancy, fp: &str) -> Vec<Row> {
    vec![
        Row::new(format!("{name}.encoder_calls"), None, r.encoder_calls as f64, fp),
        Row::new(format!("{name}.occurrences"), None, r.occurrences as f64, fp),
        Row::new(format!("{name}.distinct"), None, r.distinct as f64, fp),
        Row::new(format!("{name}.ratio"), None, r.ratio(), fp),
    ]
}

pub fn bench(config: &RunConfig, ws: &Workspace, force: bool) -> Result<Outcome> {
    let outputs = names(&[BENCH_TIMING, BENCH_LENGTHS, BENCH_REDUNDANCY]);
    guarded(ws, "bench", &outputs, force, || {
        let prepared = Prepared::load(ws)?;
        let cases = test_cases(&prepared.splits, window(config), config.eval.include_valid);
        let histories: Vec<Vec<usize>> = cases.iter().map(|c| c.history.clone()).collect();
        let (lite, lite_trained) = session_or_fresh(ModelKind::Lite, config, ws, &prepared)?;
        let (beam, beam_trained) = session_or_fresh(ModelKind::FullBeam, config, ws, &prepared)?;
        let fp = config.fingerprint();
        let note = |trained: bool, name: &str| {
            format!(
                "{name}: {}",
                if trained {
                    "trained checkpoint"
                } else {
                    "untrained (no checkpoint)"
                }
            )
        };
        eprintln!(
            "bench: timing {} batches x {} reps per pipeline",
            config.bench.batches, config.bench.reps
        );
        let timings = bench_timings(config, &lite, &beam, &histories, &prepared)?;
        let mut rows = Vec::new();
        for t in &timings {
            rows.extend(timing_rows(t, &fp));
        }
        let comments = vec![
            format!("hardware: {}", timings[0].hardware),
            format!(
                "{} timed batches of {} after {} warmup, {} reps",
                config.bench.batches, config.bench.batch_size, config.bench.warmup, config.bench.reps
            ),
            note(lite_trained, "lite"),
            note(beam_trained, "full_beam"),
        ];
        write_rows(&ws.staging(BENCH_TIMING), &comments, &rows)?;
        print!("{}", timing_table(&timings));

        let refs: Vec<&[usize]> = histories.iter().map(Vec::as_slice).collect();
        let lengths = bench_lengths(config, &prepared, &refs, &fp);
        write_rows(
            &ws.staging(BENCH_LENGTHS),
            &["mean input positions per test history".into()],
            &lengths,
        )?;

        let model = lite.lite().expect("lite session");
        let batches: Vec<Vec<Vec<usize>>> = histories.chunks(config.bench.batch_size).map(<[_]>::to_vec).collect();
        let cached = count_redundant_encodings(model, &lite.store, &lite.texts, &batches, true)?;
        let uncached = count_redundant_encodings(model, &lite.store, &lite.texts, &batches, false)?;
        let mut red = redundancy_rows("cached", &cached, &fp);
        red.extend(redundancy_rows("uncached", &uncached, &fp));
        write_rows(
            &ws.staging(BENCH_REDUNDANCY),
            &["item-encoder passes over the test histories".into()],
            &red,
        )?;
        for r in lengths.iter().chain(&red) {
            println!("{:<40} {}", r.name, r.value);
        }
        Ok(())
    })
}

pub const ABLATION: &str = "ablation.tsv";

/// Train any missing variant, then evaluate all six rows.
pub fn ablate(config: &RunConfig, ws: &Workspace, force: bool) -> Result<Outcome> {
    let outputs = names(&[ABLATION]);
    guarded(ws, "ablate", &outputs, force, || {
        let prepared = Prepared::load(ws)?;
        let mut reports = Vec::new();
        for kind in ModelKind::ALL {
            train(config, ws, kind, false)?;
            reports.push((kind, evaluate_target(config, ws, &prepared, Target::Model(kind))?));
        }
        let mut rows = Vec::new();
        for (k, r) in &reports {
            rows.extend(eval_rows(k.label(), r));
        }
        write_rows(
            &ws.staging(ABLATION),
            &["full-catalog test metrics per variant".into()],
            &rows,
        )?;
        let refs: Vec<(&str, &EvalReport)> = reports.iter().map(|(k, r)| (k.label(), r)).collect();
        print!("{}", eval_table(&refs));
        Ok(())
    })
}
