//! Flat `section.key=value` run configuration.
//!
//! Sources are layered file first, then command-line overrides. A
//! `train.profile` line is applied before every other key regardless of its
//! position, so explicit hyperparameters always win over the profile bundle.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use llrec_core::generative::{BeamConfig, Seq2SeqConfig};
use llrec_core::item_encoder::ItemEncoderConfig;
use llrec_core::lite::LiteConfig;
use llrec_core::rec_encoder::RecEncoderConfig;
use llrec_core::train::{Strategy, TrainConfig};

use crate::dataset::Format;
use crate::error::{Error, Result};

pub const CONFIG_ENV: &str = "LLREC_CONFIG";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Profile {
    Desk,
    Pretrained,
}

impl FromStr for Profile {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Self::Desk),
            "paper" => Ok(Self::Pretrained),
            _ => Err(Error::Config(format!("unknown profile `{s}` (desk|paper)"))),
        }
    }
}

impl Profile {
    fn name(self) -> &'static str {
        match self {
            Self::Desk => "desk",
            Self::Pretrained => "paper",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub interactions: Option<PathBuf>,
    pub metadata: Option<PathBuf>,
    pub format: Format,
    pub kcore: usize,
    pub min_freq: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BaselineConfig {
    pub seq2seq: Seq2SeqConfig,
    /// Padded generative vocabulary size.
    pub vocab_size: usize,
    pub id_offset: u64,
    /// Token budget of the title-token variant.
    pub title_max_input_len: usize,
    /// Restrict beam search to valid item-ID sequences.
    pub constrained: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub batch_size: usize,
    /// Validation item appended to the test-time input.
    pub include_valid: bool,
    pub negatives: usize,
    pub beam: BeamConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub beam_widths: Vec<usize>,
    pub warmup: usize,
    pub reps: usize,
    pub batches: usize,
    pub batch_size: usize,
    /// Items generated per user by the beam pipeline.
    pub num_return: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data: DataConfig,
    pub item: ItemEncoderConfig,
    pub rec: RecEncoderConfig,
    pub baseline: BaselineConfig,
    pub profile: Profile,
    pub train: TrainConfig,
    /// Epochs of cached-embedding fine-tuning after phase 1 (0 = off).
    pub phase2_epochs: usize,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig {
                interactions: None,
                metadata: None,
                format: Format::Tsv,
                kcore: 5,
                min_freq: 1,
            },
            item: ItemEncoderConfig::default(),
            rec: RecEncoderConfig::default(),
            baseline: BaselineConfig {
                seq2seq: Seq2SeqConfig::default(),
                vocab_size: 4096,
                id_offset: 1000,
                title_max_input_len: 256,
                constrained: true,
            },
            profile: Profile::Desk,
            train: TrainConfig::desk(),
            phase2_epochs: 0,
            eval: EvalConfig {
                ks: vec![10, 20],
                batch_size: 128,
                include_valid: true,
                negatives: 99,
                beam: BeamConfig::default(),
            },
            bench: BenchConfig {
                beam_widths: vec![1, 5, 20],
                warmup: 3,
                reps: 5,
                batches: 100,
                batch_size: 32,
                num_return: 20,
            },
            out: PathBuf::from("out"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true/false, got `{v}`"))),
    }
}

pub fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    let xs = v
        .split(',')
        .map(|x| num::<usize>(key, x.trim()))
        .collect::<Result<Vec<_>>>()?;
    if xs.is_empty() {
        return Err(Error::Config(format!("`{key}`: empty list")));
    }
    Ok(xs)
}

fn list(xs: &[usize]) -> String {
    xs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::Sampling => "sampling",
        Strategy::All => "all",
    }
}

pub fn parse_strategy(v: &str) -> Result<Strategy> {
    match v {
        "sampling" => Ok(Strategy::Sampling),
        "all" => Ok(Strategy::All),
        _ => Err(Error::Config(format!("unknown strategy `{v}` (sampling|all)"))),
    }
}

/// `key=value` lines; blank lines and `#` comments ignored.
pub fn parse_lines(text: &str, origin: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{origin}:{}: expected key=value", n + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    fn set_profile(&mut self, p: Profile) {
        let t = match p {
            Profile::Desk => TrainConfig::desk(),
            Profile::Pretrained => TrainConfig::pretrained(),
        };
        self.profile = p;
        self.train.lr = t.lr;
        self.train.batch_size = t.batch_size;
        self.train.dropout = t.dropout;
        self.train.weight_decay = t.weight_decay;
    }

    /// Set one key. Unknown keys are errors.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "data.interactions" => self.data.interactions = path(v),
            "data.metadata" => self.data.metadata = path(v),
            "data.format" => self.data.format = v.parse()?,
            "data.kcore" => self.data.kcore = num(key, v)?,
            "data.min_freq" => self.data.min_freq = num(key, v)?,
            "model.item.layers" => self.item.layers = num(key, v)?,
            "model.item.heads" => self.item.heads = num(key, v)?,
            "model.item.dim" => self.item.model_dim = num(key, v)?,
            "model.item.ff_dim" => self.item.ff_dim = num(key, v)?,
            "model.item.max_text_len" => self.item.max_item_text_len = num(key, v)?,
            "model.rec.layers" => self.rec.layers = num(key, v)?,
            "model.rec.heads" => self.rec.heads = num(key, v)?,
            "model.rec.dim" => self.rec.model_dim = num(key, v)?,
            "model.rec.ff_dim" => self.rec.ff_dim = num(key, v)?,
            "model.rec.max_seq_len" => self.rec.max_seq_len = num(key, v)?,
            "model.baseline.layers" => self.baseline.seq2seq.layers = num(key, v)?,
            "model.baseline.heads" => self.baseline.seq2seq.heads = num(key, v)?,
            "model.baseline.dim" => self.baseline.seq2seq.dim = num(key, v)?,
            "model.baseline.ff_dim" => self.baseline.seq2seq.ff_dim = num(key, v)?,
            "model.baseline.max_input_len" => self.baseline.seq2seq.max_input_len = num(key, v)?,
            "model.baseline.max_output_len" => self.baseline.seq2seq.max_output_len = num(key, v)?,
            "model.baseline.vocab_size" => self.baseline.vocab_size = num(key, v)?,
            "model.baseline.id_offset" => self.baseline.id_offset = num(key, v)?,
            "model.baseline.title_max_input_len" => self.baseline.title_max_input_len = num(key, v)?,
            "model.baseline.constrained" => self.baseline.constrained = flag(key, v)?,
            "train.profile" => self.set_profile(v.parse()?),
            "train.strategy" => self.train.strategy = parse_strategy(v)?,
            "train.lr" => self.train.lr = num(key, v)?,
            "train.batch_size" => self.train.batch_size = num(key, v)?,
            "train.dropout" => self.train.dropout = num(key, v)?,
            "train.weight_decay" => self.train.weight_decay = num(key, v)?,
            "train.warmup_fraction" => self.train.warmup_fraction = num(key, v)?,
            "train.adam_eps" => self.train.adam_eps = num(key, v)?,
            "train.beta1" => self.train.beta1 = num(key, v)?,
            "train.beta2" => self.train.beta2 = num(key, v)?,
            "train.max_seq_len" => self.train.max_seq_len = num(key, v)?,
            "train.patience" => self.train.early_stop_patience = num(key, v)?,
            "train.max_epochs" => self.train.max_epochs = num(key, v)?,
            "train.freeze_rec_encoder" => self.train.freeze_rec_encoder = flag(key, v)?,
            "train.freeze_projection_head" => self.train.freeze_projection_head = flag(key, v)?,
            "train.fine_tune_cached_embeddings" => self.train.fine_tune_cached_embeddings = flag(key, v)?,
            "train.phase2_epochs" => self.phase2_epochs = num(key, v)?,
            "eval.ks" => self.eval.ks = parse_list(key, v)?,
            "eval.batch_size" => self.eval.batch_size = num(key, v)?,
            "eval.include_valid" => self.eval.include_valid = flag(key, v)?,
            "eval.negatives" => self.eval.negatives = num(key, v)?,
            "eval.beam_width" => self.eval.beam.beam_width = num(key, v)?,
            "eval.beam_steps" => self.eval.beam.max_steps = num(key, v)?,
            "eval.beam_return" => self.eval.beam.num_return = num(key, v)?,
            "eval.length_alpha" => self.eval.beam.length_alpha = num(key, v)?,
            "bench.beam_widths" => self.bench.beam_widths = parse_list(key, v)?,
            "bench.warmup" => self.bench.warmup = num(key, v)?,
            "bench.reps" => self.bench.reps = num(key, v)?,
            "bench.batches" => self.bench.batches = num(key, v)?,
            "bench.batch_size" => self.bench.batch_size = num(key, v)?,
            "bench.num_return" => self.bench.num_return = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            "seed" => self.train.seed = num(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let p = |x: &Option<PathBuf>| x.as_ref().map_or(String::new(), |p| p.display().to_string());
        let (i, r, b, t) = (&self.item, &self.rec, &self.baseline, &self.train);
        vec![
            ("data.interactions", p(&self.data.interactions)),
            ("data.metadata", p(&self.data.metadata)),
            ("data.format", self.data.format.to_string()),
            ("data.kcore", self.data.kcore.to_string()),
            ("data.min_freq", self.data.min_freq.to_string()),
            ("model.item.layers", i.layers.to_string()),
            ("model.item.heads", i.heads.to_string()),
            ("model.item.dim", i.model_dim.to_string()),
            ("model.item.ff_dim", i.ff_dim.to_string()),
            ("model.item.max_text_len", i.max_item_text_len.to_string()),
            ("model.rec.layers", r.layers.to_string()),
            ("model.rec.heads", r.heads.to_string()),
            ("model.rec.dim", r.model_dim.to_string()),
            ("model.rec.ff_dim", r.ff_dim.to_string()),
            ("model.rec.max_seq_len", r.max_seq_len.to_string()),
            ("model.baseline.layers", b.seq2seq.layers.to_string()),
            ("model.baseline.heads", b.seq2seq.heads.to_string()),
            ("model.baseline.dim", b.seq2seq.dim.to_string()),
            ("model.baseline.ff_dim", b.seq2seq.ff_dim.to_string()),
            ("model.baseline.max_input_len", b.seq2seq.max_input_len.to_string()),
            ("model.baseline.max_output_len", b.seq2seq.max_output_len.to_string()),
            ("model.baseline.vocab_size", b.vocab_size.to_string()),
            ("model.baseline.id_offset", b.id_offset.to_string()),
            ("model.baseline.title_max_input_len", b.title_max_input_len.to_string()),
            ("model.baseline.constrained", b.constrained.to_string()),
            ("train.profile", self.profile.name().into()),
            ("train.strategy", strategy_name(t.strategy).into()),
            ("train.lr", t.lr.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.dropout", t.dropout.to_string()),
            ("train.weight_decay", t.weight_decay.to_string()),
            ("train.warmup_fraction", t.warmup_fraction.to_string()),
            ("train.adam_eps", t.adam_eps.to_string()),
            ("train.beta1", t.beta1.to_string()),
            ("train.beta2", t.beta2.to_string()),
            ("train.max_seq_len", t.max_seq_len.to_string()),
            ("train.patience", t.early_stop_patience.to_string()),
            ("train.max_epochs", t.max_epochs.to_string()),
            ("train.freeze_rec_encoder", t.freeze_rec_encoder.to_string()),
            ("train.freeze_projection_head", t.freeze_projection_head.to_string()),
            (
                "train.fine_tune_cached_embeddings",
                t.fine_tune_cached_embeddings.to_string(),
            ),
            ("train.phase2_epochs", self.phase2_epochs.to_string()),
            ("eval.ks", list(&self.eval.ks)),
            ("eval.batch_size", self.eval.batch_size.to_string()),
            ("eval.include_valid", self.eval.include_valid.to_string()),
            ("eval.negatives", self.eval.negatives.to_string()),
            ("eval.beam_width", self.eval.beam.beam_width.to_string()),
            ("eval.beam_steps", self.eval.beam.max_steps.to_string()),
            ("eval.beam_return", self.eval.beam.num_return.to_string()),
            ("eval.length_alpha", self.eval.beam.length_alpha.to_string()),
            ("bench.beam_widths", list(&self.bench.beam_widths)),
            ("bench.warmup", self.bench.warmup.to_string()),
            ("bench.reps", self.bench.reps.to_string()),
            ("bench.batches", self.bench.batches.to_string()),
            ("bench.batch_size", self.bench.batch_size.to_string()),
            ("bench.num_return", self.bench.num_return.to_string()),
            ("out", self.out.display().to_string()),
            ("seed", t.seed.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    /// Canonical text without the output directory. Stored in checkpoints so
    /// that the same run in two directories writes identical bytes.
    pub fn checkpoint_text(&self) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| *k != "out")
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Defaults updated by `pairs`, profile first.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        for (k, v) in pairs.iter().filter(|(k, _)| k == "train.profile") {
            c.set(k, v)?;
        }
        for (k, v) in pairs.iter().filter(|(k, _)| k != "train.profile") {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_pairs(&parse_lines(text, "config")?)
    }

    /// File named by `explicit`, else `$LLREC_CONFIG`, else defaults; then
    /// `overrides` on top.
    pub fn load(explicit: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let env = std::env::var_os(CONFIG_ENV).map(PathBuf::from);
        let mut pairs = match explicit.map(Path::to_path_buf).or(env) {
            Some(p) => {
                let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                parse_lines(&text, &p.display().to_string())?
            }
            None => Vec::new(),
        };
        pairs.extend(overrides.iter().cloned());
        Self::from_pairs(&pairs)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.data.kcore == 0 {
            return bad("data.kcore must be >= 1");
        }
        if self.item.model_dim != self.rec.model_dim {
            return bad("model.item.dim and model.rec.dim must match");
        }
        if self.train.max_seq_len > self.rec.max_seq_len {
            return bad("train.max_seq_len exceeds model.rec.max_seq_len");
        }
        if self.eval.ks.contains(&0) || self.bench.beam_widths.contains(&0) {
            return bad("k values and beam widths must be >= 1");
        }
        if self.bench.reps == 0 || self.bench.batches == 0 || self.bench.batch_size == 0 {
            return bad("bench.reps, bench.batches and bench.batch_size must be >= 1");
        }
        Ok(())
    }

    /// Data paths must exist before anything reads them. Kept out of
    /// `validate` so configs stored in checkpoints stay loadable after the
    /// source files move.
    pub fn check_paths(&self) -> Result<()> {
        let p = self
            .data
            .interactions
            .as_ref()
            .ok_or_else(|| Error::Config("data.interactions (--data) is not set".into()))?;
        for p in std::iter::once(p).chain(&self.data.metadata) {
            if !p.exists() {
                return Err(Error::Config(format!("path `{}` does not exist", p.display())));
            }
        }
        Ok(())
    }

    /// Item/rec encoder configs with the training dropout applied.
    pub fn lite(&self) -> LiteConfig {
        let mut item = self.item;
        let mut rec = self.rec;
        item.dropout = self.train.dropout;
        rec.dropout = self.train.dropout;
        LiteConfig { item, rec }
    }

    pub fn seq2seq(&self) -> Seq2SeqConfig {
        Seq2SeqConfig {
            dropout: self.train.dropout,
            ..self.baseline.seq2seq
        }
    }

    /// Token-encoder config for the title variant: same sizes, longer input.
    pub fn title_seq2seq(&self) -> Seq2SeqConfig {
        Seq2SeqConfig {
            max_input_len: self.baseline.title_max_input_len,
            ..self.seq2seq()
        }
    }

    /// Hash of the canonical text, excluding the output directory and data
    /// paths, so identical runs in different places share a fingerprint.
    pub fn fingerprint(&self) -> String {
        let text: String = self
            .entries()
            .into_iter()
            .filter(|(k, _)| !matches!(*k, "out" | "data.interactions" | "data.metadata"))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        crate::formats::sha256_hex(text.as_bytes())[..16].to_string()
    }
}
