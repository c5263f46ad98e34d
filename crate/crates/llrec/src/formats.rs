//! On-disk formats: vocabulary text, embedding cache and checkpoints.
//!
//! All binary integers and floats are little-endian. Readers reject a wrong
//! magic or version outright; there is no migration.

use std::fs;
use std::path::Path;

use llrec_core::item_encoder::EmbeddingCache;
use llrec_core::optim::{AdamWConfig, OptimizerState};
use llrec_core::text::Vocab;
use llrec_core::train::Trainer;
use llrec_core::{ParamGroup, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CACHE_MAGIC: &[u8; 8] = b"LLRECEMB";
pub const CACHE_VERSION: u32 = 1;
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LLRECCKP";
pub const CHECKPOINT_VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// One non-reserved token per line; line `n` (0-based) holds id `n + 4`.
pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    let mut s = String::new();
    for t in vocab.user_tokens() {
        s.push_str(t);
        s.push('\n');
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut v = Vocab::from_tokens(text.lines())?;
    v.freeze();
    Ok(v)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.bytes(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.bytes(&x.to_le_bytes());
    }
    fn f64(&mut self, x: f64) {
        self.bytes(&x.to_le_bytes());
    }
    fn f32s(&mut self, xs: &[f32]) {
        self.0.reserve(xs.len() * 4);
        for x in xs {
            self.bytes(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.bytes(s.as_bytes());
    }
}

/// Cursor whose every read fails with `None` past the end.
struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.buf.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }
    fn array<const N: usize>(&mut self) -> Option<[u8; N]> {
        self.take(N)?.try_into().ok()
    }
    fn u8(&mut self) -> Option<u8> {
        Some(self.take(1)?[0])
    }
    fn u32(&mut self) -> Option<u32> {
        self.array().map(u32::from_le_bytes)
    }
    fn u64(&mut self) -> Option<u64> {
        self.array().map(u64::from_le_bytes)
    }
    fn usize(&mut self) -> Option<usize> {
        usize::try_from(self.u64()?).ok()
    }
    fn f64(&mut self) -> Option<f64> {
        self.array().map(f64::from_le_bytes)
    }
    fn f32s(&mut self, n: usize) -> Option<Vec<f32>> {
        let b = self.take(n.checked_mul(4)?)?;
        Some(
            b.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        )
    }
    fn str(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }
}

fn check_header(path: &Path, bytes: &[u8], magic: &[u8; 8], version: u32, kind: &'static str) -> Result<()> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic {
            path: path.into(),
            kind,
        });
    }
    let found = bytes
        .get(8..12)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| Error::Truncated { path: path.into() })?;
    if found != version {
        return Err(Error::Version {
            path: path.into(),
            kind,
            found,
            expected: version,
        });
    }
    Ok(())
}

pub fn write_cache(path: &Path, cache: &EmbeddingCache<f32>) -> Result<()> {
    let mut w = Writer::default();
    w.bytes(CACHE_MAGIC);
    w.u32(CACHE_VERSION);
    w.u64(cache.rows() as u64);
    w.u32(cache.dim as u32);
    w.bytes(&cache.fingerprint);
    w.f32s(&cache.data);
    fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: &Path) -> Result<EmbeddingCache<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_header(path, &bytes, CACHE_MAGIC, CACHE_VERSION, "embedding cache")?;
    let mut r = Reader::new(&bytes[12..]);
    let truncated = || Error::Truncated { path: path.into() };
    let rows = r.usize().ok_or_else(truncated)?;
    let dim = r.u32().ok_or_else(truncated)? as usize;
    let fingerprint = r.array::<32>().ok_or_else(truncated)?;
    let n = rows.checked_mul(dim).ok_or_else(truncated)?;
    let data = r.f32s(n).ok_or_else(truncated)?;
    if !r.done() {
        return Err(Error::parse(path, "trailing bytes after embedding rows"));
    }
    Ok(EmbeddingCache::new(rows, dim, data, fingerprint)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Optimizer moments in tensor-table order.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerSnapshot {
    pub config: AdamWConfig,
    pub step: u64,
    pub first: Vec<Vec<f32>>,
    pub second: Vec<Vec<f32>>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<NamedTensor>,
    pub frozen: Vec<ParamGroup>,
    pub optimizer: Option<OptimizerSnapshot>,
    pub rng: RngState,
    pub global_step: u64,
    pub total_steps: u64,
    pub epoch: u64,
    pub best_valid: f64,
    /// `key=value` lines of the run configuration that built the model.
    pub config: String,
}

fn group_tag(g: ParamGroup) -> u8 {
    ParamGroup::ALL.iter().position(|&x| x == g).unwrap() as u8
}

impl Checkpoint {
    /// Snapshot of `store` and, when given, the trainer's optimizer, rng and
    /// step counters.
    pub fn capture(store: &ParamStore<f32>, trainer: Option<&Trainer<f32>>, best_valid: f64, config: String) -> Self {
        let tensors = store
            .iter()
            .map(|(_, p)| NamedTensor {
                name: p.name.clone(),
                group: p.group,
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect();
        let frozen = ParamGroup::ALL
            .into_iter()
            .filter(|&g| store.is_group_frozen(g))
            .collect();
        let (optimizer, rng, global_step, total_steps, epoch) = match trainer {
            Some(t) => (
                Some(OptimizerSnapshot {
                    config: t.optimizer.config,
                    step: t.optimizer.step,
                    first: t.optimizer.first.clone(),
                    second: t.optimizer.second.clone(),
                }),
                RngState::capture(&t.rng),
                t.global_step,
                t.total_steps,
                t.epoch as u64,
            ),
            None => (None, RngState::capture(&ChaCha8Rng::seed_from_u64(0)), 0, 0, 0),
        };
        Self {
            tensors,
            frozen,
            optimizer,
            rng,
            global_step,
            total_steps,
            epoch,
            best_valid,
            config,
        }
    }

    /// Overwrite every parameter of `store` by name. The checkpoint and the
    /// store must hold exactly the same names and shapes.
    pub fn restore_params(&self, store: &mut ParamStore<f32>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Missing(format!(
                "checkpoint has {} tensors, model has {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for p in store.iter_mut() {
            let t = self
                .tensors
                .iter()
                .find(|t| t.name == p.name)
                .ok_or_else(|| Error::Missing(format!("checkpoint lacks parameter `{}`", p.name)))?;
            if t.shape != p.value.shape() {
                return Err(Error::Missing(format!(
                    "parameter `{}` has shape {:?} in checkpoint, {:?} in model",
                    p.name,
                    t.shape,
                    p.value.shape()
                )));
            }
            p.value = Tensor::new(&t.shape, t.data.clone())?;
        }
        for g in ParamGroup::ALL {
            store.set_frozen(g, self.frozen.contains(&g));
        }
        Ok(())
    }

    /// Put optimizer moments, rng and counters back into `trainer`.
    pub fn restore_trainer(&self, trainer: &mut Trainer<f32>) -> Result<()> {
        let opt = self
            .optimizer
            .as_ref()
            .ok_or_else(|| Error::Missing("checkpoint holds no optimizer state".into()))?;
        trainer.optimizer = OptimizerState {
            config: opt.config,
            step: opt.step,
            first: opt.first.clone(),
            second: opt.second.clone(),
        };
        trainer.rng = self.rng.restore();
        trainer.global_step = self.global_step;
        trainer.total_steps = self.total_steps;
        trainer.epoch = self.epoch as usize;
        Ok(())
    }

    fn payload(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.str(&t.name);
            w.u8(DTYPE_F32);
            w.u8(group_tag(t.group));
            w.u32(t.shape.len() as u32);
            for &d in &t.shape {
                w.u64(d as u64);
            }
            w.f32s(&t.data);
        }
        w.u8(self.frozen.iter().fold(0, |m, &g| m | 1 << group_tag(g)));
        match &self.optimizer {
            None => w.u8(0),
            Some(o) => {
                w.u8(1);
                let c = o.config;
                for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay, c.warmup_fraction] {
                    w.f64(x);
                }
                w.u64(o.step);
                w.u32(o.first.len() as u32);
                for (m, v) in o.first.iter().zip(&o.second) {
                    w.u64(m.len() as u64);
                    w.f32s(m);
                    w.f32s(v);
                }
            }
        }
        w.bytes(&self.rng.seed);
        w.u64(self.rng.stream);
        w.bytes(&self.rng.word_pos.to_le_bytes());
        w.u64(self.global_step);
        w.u64(self.total_steps);
        w.u64(self.epoch);
        w.f64(self.best_valid);
        w.str(&self.config);
        w.0
    }

    fn parse_payload(p: &[u8]) -> Option<Self> {
        let mut r = Reader::new(p);
        let n = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.str()?;
            if r.u8()? != DTYPE_F32 {
                return None;
            }
            let group = *ParamGroup::ALL.get(r.u8()? as usize)?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.usize()).collect::<Option<Vec<_>>>()?;
            let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d))?;
            let data = r.f32s(len)?;
            tensors.push(NamedTensor {
                name,
                group,
                shape,
                data,
            });
        }
        let mask = r.u8()?;
        let frozen = ParamGroup::ALL
            .into_iter()
            .filter(|&g| mask & (1 << group_tag(g)) != 0)
            .collect();
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let config = AdamWConfig {
                    lr: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                    warmup_fraction: r.f64()?,
                };
                let step = r.u64()?;
                let k = r.u32()? as usize;
                let (mut first, mut second) = (Vec::with_capacity(k), Vec::with_capacity(k));
                for _ in 0..k {
                    let len = r.usize()?;
                    first.push(r.f32s(len)?);
                    second.push(r.f32s(len)?);
                }
                Some(OptimizerSnapshot {
                    config,
                    step,
                    first,
                    second,
                })
            }
            _ => return None,
        };
        let rng = RngState {
            seed: r.array()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let ckpt = Self {
            tensors,
            frozen,
            optimizer,
            rng,
            global_step: r.u64()?,
            total_steps: r.u64()?,
            epoch: r.u64()?,
            best_valid: r.f64()?,
            config: r.str()?,
        };
        r.done().then_some(ckpt)
    }
}

/// Layout: magic, version u32, SHA-256 of the payload, payload length u64,
/// payload.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let payload = ckpt.payload();
    let mut w = Writer::default();
    w.bytes(CHECKPOINT_MAGIC);
    w.u32(CHECKPOINT_VERSION);
    w.bytes(&Sha256::digest(&payload));
    w.u64(payload.len() as u64);
    w.bytes(&payload);
    fs::write(path, w.0).map_err(|e| Error::io(path, e))
}

/// Any damage after the version field, truncation included, reports as a
/// checksum error.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    check_header(path, &bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, "checkpoint")?;
    let checksum = || Error::Checksum { path: path.into() };
    let mut r = Reader::new(&bytes[12..]);
    let digest: [u8; 32] = r.array().ok_or_else(checksum)?;
    let len = r.usize().ok_or_else(checksum)?;
    let payload = r.take(len).ok_or_else(checksum)?;
    if !r.done() || Sha256::digest(payload)[..] != digest[..] {
        return Err(checksum());
    }
    Checkpoint::parse_payload(payload).ok_or_else(|| Error::parse(path, "checksum valid but payload malformed"))
}
