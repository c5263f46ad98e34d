//! Per-component inference timing.
//!
//! A pipeline processes one batch at a time and reports how long each of its
//! named components took; the harness times the whole call and books the
//! remainder as `other`. Everything runs on the calling thread.

use std::time::{Duration, Instant};

use llrec_core::baselines::TokenIndexing;
use llrec_core::generative::{beam_batch_from_memory, parse_generated_items, BeamConfig, GenVocab, ItemTrie, Seq2Seq};
use llrec_core::head::top_k_recommend;
use llrec_core::item_encoder::EmbeddingCache;
use llrec_core::lite::{history_batch, LiteModel};
use llrec_core::{ParamStore, Tape};

use crate::error::{Error, Result};

pub const OTHER: &str = "other";

pub trait Pipeline {
    fn name(&self) -> String;
    /// Named components in report order, `other` excluded.
    fn components(&self) -> Vec<&'static str>;
    fn batch_size(&self) -> usize;
    /// Process batch `index`, returning time spent in each named component.
    fn run_batch(&mut self, index: usize) -> Result<Vec<(&'static str, Duration)>>;
}

#[derive(Clone, Debug, PartialEq)]
pub struct ComponentTiming {
    pub name: String,
    /// Median over repetitions of the per-batch mean.
    pub median_ms: f64,
    /// Mean over repetitions of the per-batch mean.
    pub mean_ms: f64,
    /// Median over repetitions of the component's total.
    pub total_ms: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingReport {
    pub pipeline: String,
    pub batch_size: usize,
    pub batches: usize,
    pub warmup: usize,
    pub reps: usize,
    /// Named components followed by `other`.
    pub components: Vec<ComponentTiming>,
    pub total: ComponentTiming,
    pub hardware: String,
}

impl TimingReport {
    pub fn component(&self, name: &str) -> Option<&ComponentTiming> {
        self.components.iter().find(|c| c.name == name)
    }
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

fn summarize(name: &str, totals: &[f64], batches: usize) -> ComponentTiming {
    let per: Vec<f64> = totals.iter().map(|t| t / batches as f64).collect();
    ComponentTiming {
        name: name.into(),
        median_ms: median(&per),
        mean_ms: per.iter().sum::<f64>() / per.len() as f64,
        total_ms: median(totals),
    }
}

/// Each repetition runs `warmup` untimed batches, then `batches` timed ones
/// (batch indices continue across the warmup, so the pipeline decides how to
/// cycle its data).
pub fn time_components<P: Pipeline + ?Sized>(
    pipeline: &mut P,
    batches: usize,
    warmup: usize,
    reps: usize,
) -> Result<TimingReport> {
    if batches == 0 || reps == 0 {
        return Err(Error::Config(
            "timing needs at least one batch and one repetition".into(),
        ));
    }
    let names = pipeline.components();
    let mut totals = vec![vec![0.0; reps]; names.len() + 1];
    let mut elapsed = vec![0.0; reps];
    for rep in 0..reps {
        for b in 0..warmup {
            pipeline.run_batch(b)?;
        }
        for b in warmup..warmup + batches {
            let start = Instant::now();
            let parts = pipeline.run_batch(b)?;
            let all = start.elapsed();
            let mut named = Duration::ZERO;
            for (n, d) in parts {
                let j = names
                    .iter()
                    .position(|&x| x == n)
                    .ok_or_else(|| Error::Config(format!("pipeline reported unknown component `{n}`")))?;
                totals[j][rep] += ms(d);
                named += d;
            }
            totals[names.len()][rep] += ms(all.saturating_sub(named));
            elapsed[rep] += ms(all);
        }
    }
    let mut components: Vec<ComponentTiming> = names
        .iter()
        .enumerate()
        .map(|(j, n)| summarize(n, &totals[j], batches))
        .collect();
    components.push(summarize(OTHER, &totals[names.len()], batches));
    Ok(TimingReport {
        pipeline: pipeline.name(),
        batch_size: pipeline.batch_size(),
        batches,
        warmup,
        reps,
        components,
        total: summarize("total", &elapsed, batches),
        hardware: hardware_descriptor(),
    })
}

/// CPU model, logical core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".into());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {}-{}; single-threaded",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Fixed batches cycled by index.
fn batch_at(histories: &[Vec<usize>], batch_size: usize, index: usize) -> Vec<&[usize]> {
    let n = histories.len();
    (0..batch_size)
        .map(|i| histories[(index * batch_size + i) % n].as_slice())
        .collect()
}

/// Cached item vectors -> rec encoder -> projection head -> top-k.
pub struct HeadPipeline<'a> {
    pub model: &'a LiteModel,
    pub store: &'a ParamStore<f32>,
    pub cache: &'a EmbeddingCache<f32>,
    pub histories: &'a [Vec<usize>],
    pub batch_size: usize,
    pub k: usize,
}

impl Pipeline for HeadPipeline<'_> {
    fn name(&self) -> String {
        "lite_head".into()
    }

    fn components(&self) -> Vec<&'static str> {
        vec!["encoding", "head_scoring"]
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn run_batch(&mut self, index: usize) -> Result<Vec<(&'static str, Duration)>> {
        let hs = batch_at(self.histories, self.batch_size, index);
        let batch = history_batch(&hs, self.model.pad_index())?;
        let mut tape = Tape::inference();
        let t0 = Instant::now();
        let h = self.model.user_repr_cached(&mut tape, self.store, self.cache, &batch)?;
        let t1 = Instant::now();
        let logits = self.model.head.logits(&mut tape, self.store, h)?;
        let n = self.model.num_items;
        let mut lists = Vec::with_capacity(hs.len());
        for (row, hist) in tape.value(logits).data().chunks(n).zip(&hs) {
            lists.push(top_k_recommend(row, hist, self.k.min(n.saturating_sub(hist.len())))?);
        }
        let t2 = Instant::now();
        std::hint::black_box(lists);
        Ok(vec![("encoding", t1 - t0), ("head_scoring", t2 - t1)])
    }
}

/// ID tokens -> encoder -> beam search -> parsed item list.
pub struct BeamPipeline<'a> {
    pub model: &'a Seq2Seq,
    pub store: &'a ParamStore<f32>,
    pub vocab: &'a GenVocab,
    pub indexing: &'a TokenIndexing,
    pub trie: Option<&'a ItemTrie>,
    pub beam: BeamConfig,
    pub histories: &'a [Vec<usize>],
    pub batch_size: usize,
}

impl Pipeline for BeamPipeline<'_> {
    fn name(&self) -> String {
        format!("beam_B{}", self.beam.beam_width)
    }

    fn components(&self) -> Vec<&'static str> {
        vec!["encoding", "decoding"]
    }

    fn batch_size(&self) -> usize {
        self.batch_size
    }

    fn run_batch(&mut self, index: usize) -> Result<Vec<(&'static str, Duration)>> {
        let hs = batch_at(self.histories, self.batch_size, index);
        let max_len = self.model.config.max_input_len;
        let inputs: Vec<Vec<u32>> = hs
            .iter()
            .map(|h| self.indexing.history_tokens(self.vocab, h, max_len))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::inference();
        let t0 = Instant::now();
        let mem = self.model.encode(&mut tape, self.store, &refs)?;
        let t1 = Instant::now();
        let decoded = beam_batch_from_memory(self.model, self.store, &mut tape, &mem, self.trie, self.beam)?;
        let t2 = Instant::now();
        for beams in decoded {
            let seqs: Vec<Vec<u32>> = beams.into_iter().map(|b| b.tokens).collect();
            std::hint::black_box(parse_generated_items(&seqs, self.vocab));
        }
        Ok(vec![("encoding", t1 - t0), ("decoding", t2 - t1)])
    }
}
