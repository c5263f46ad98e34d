//! Training loop: segment construction, full-softmax loss, AdamW steps with
//! frozen groups, validation-driven early stopping.

use alloc::format;
#[cfg(test)]
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::baselines::{TokenHeadModel, TokenIndexing};
use crate::data::{all_segments, make_batches, sample_epoch, Segment, UserSplit};
use crate::error::{Error, Result};
use crate::generative::{GenVocab, Seq2Seq};
use crate::lite::LiteModel;
use crate::optim::{AdamWConfig, OptimizerState};
use crate::params::{ParamGroup, ParamStore};
use crate::real::Real;
use crate::text::TokenizedText;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strategy {
    /// One random segment per user per epoch.
    Sampling,
    /// Every train-region target once per epoch.
    All,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub strategy: Strategy,
    pub lr: f64,
    pub batch_size: usize,
    pub dropout: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub adam_eps: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Segment length including the target.
    pub max_seq_len: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub freeze_rec_encoder: bool,
    pub freeze_projection_head: bool,
    pub fine_tune_cached_embeddings: bool,
}

impl TrainConfig {
    /// Small from-scratch models.
    pub fn desk() -> Self {
        Self {
            strategy: Strategy::Sampling,
            lr: 1e-3,
            batch_size: 64,
            dropout: 0.1,
            weight_decay: 0.01,
            warmup_fraction: 0.1,
            adam_eps: 1e-6,
            beta1: 0.9,
            beta2: 0.999,
            max_seq_len: 21,
            early_stop_patience: 20,
            max_epochs: 200,
            seed: 42,
            freeze_rec_encoder: false,
            freeze_projection_head: false,
            fine_tune_cached_embeddings: false,
        }
    }

    /// Hyperparameters for a pretrained 512-wide backbone.
    pub fn pretrained() -> Self {
        Self {
            lr: 5e-4,
            batch_size: 256,
            dropout: 0.8,
            weight_decay: 0.1,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("train: {m}")));
        if self.lr.is_nan() || self.lr <= 0.0 {
            return bad("lr must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.early_stop_patience == 0 {
            return bad("early_stop_patience must be >= 1");
        }
        if self.max_seq_len < 2 {
            return bad("max_seq_len must be >= 2");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(0.0..=1.0).contains(&self.warmup_fraction) {
            return bad("warmup_fraction must be in [0, 1]");
        }
        Ok(())
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
            warmup_fraction: self.warmup_fraction,
        }
    }

    /// Apply the freeze flags to `store`.
    pub fn apply_freezes<T: Real>(&self, store: &mut ParamStore<T>) {
        store.set_frozen(ParamGroup::RecEncoder, self.freeze_rec_encoder);
        store.set_frozen(ParamGroup::Head, self.freeze_projection_head);
        store.set_frozen(ParamGroup::ItemTable, !self.fine_tune_cached_embeddings);
    }

    pub fn segments_per_epoch(&self, splits: &[UserSplit]) -> usize {
        match self.strategy {
            Strategy::Sampling => splits.iter().filter(|s| s.train.len() >= 2).count(),
            Strategy::All => splits.iter().map(|s| s.train.len().saturating_sub(1)).sum(),
        }
    }

    pub fn steps_per_epoch(&self, splits: &[UserSplit]) -> usize {
        self.segments_per_epoch(splits).div_ceil(self.batch_size)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk()
    }
}

/// Mean full-softmax cross-entropy of `logits [B, N]` against `targets`.
/// Every non-target item acts as a negative; nothing is sampled.
pub fn compute_loss<T: Real>(tape: &mut Tape<T>, logits: Var, targets: &[usize]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// A model trainable on (input items, target item) segments.
pub trait SegmentModel<T: Real> {
    fn segment_loss(&self, tape: &mut Tape<T>, store: &ParamStore<T>, segments: &[Segment]) -> Result<Var>;
}

/// The hierarchical model with its item texts.
pub struct LiteTask<'a> {
    pub model: &'a LiteModel,
    pub texts: &'a [TokenizedText],
}

impl<T: Real> SegmentModel<T> for LiteTask<'_> {
    fn segment_loss(&self, tape: &mut Tape<T>, store: &ParamStore<T>, segments: &[Segment]) -> Result<Var> {
        let pad_to = segments.iter().map(|s| s.input.len()).max().unwrap_or(1).max(1);
        let batch = make_batches(segments, segments.len(), pad_to, self.model.pad_index())?
            .pop()
            .ok_or(Error::Empty("segment batch"))?;
        let logits = self.model.batch_logits(tape, store, self.texts, &batch)?;
        compute_loss(tape, logits, &batch.targets)
    }
}

/// The encoder-decoder trained on next-token CE over the target's ID tokens.
pub struct GenerativeTask<'a> {
    pub model: &'a Seq2Seq,
    pub vocab: &'a GenVocab,
    pub indexing: &'a TokenIndexing,
}

impl<T: Real> SegmentModel<T> for GenerativeTask<'_> {
    fn segment_loss(&self, tape: &mut Tape<T>, store: &ParamStore<T>, segments: &[Segment]) -> Result<Var> {
        let max_len = self.model.config.max_input_len;
        let inputs: Vec<Vec<u32>> = segments
            .iter()
            .map(|s| self.indexing.history_tokens(self.vocab, &s.input, max_len))
            .collect();
        let targets: Vec<Vec<u32>> = segments.iter().map(|s| self.vocab.item_tokens(s.target)).collect();
        let i: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let t: Vec<&[u32]> = targets.iter().map(Vec::as_slice).collect();
        self.model.loss(tape, store, &i, &t)
    }
}

/// Token encoder + projection head.
pub struct TokenHeadTask<'a> {
    pub model: &'a TokenHeadModel,
    pub vocab: &'a GenVocab,
    pub indexing: &'a TokenIndexing,
    pub max_input_len: usize,
}

impl<T: Real> SegmentModel<T> for TokenHeadTask<'_> {
    fn segment_loss(&self, tape: &mut Tape<T>, store: &ParamStore<T>, segments: &[Segment]) -> Result<Var> {
        let inputs: Vec<Vec<u32>> = segments
            .iter()
            .map(|s| self.indexing.history_tokens(self.vocab, &s.input, self.max_input_len))
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let logits = self.model.logits(tape, store, &refs)?;
        let targets: Vec<usize> = segments.iter().map(|s| s.target).collect();
        compute_loss(tape, logits, &targets)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub mean_loss: f64,
    pub batches: usize,
    pub examples: usize,
    pub last_lr: f64,
}

/// Optimizer, data RNG and step counters of one training run.
#[derive(Clone, Debug)]
pub struct Trainer<T: Real = f32> {
    pub config: TrainConfig,
    pub optimizer: OptimizerState<T>,
    pub rng: ChaCha8Rng,
    pub global_step: u64,
    pub total_steps: u64,
    pub epoch: usize,
}

impl<T: Real> Trainer<T> {
    /// `total_steps` sets the warmup length; the rate stays constant after.
    pub fn new(config: TrainConfig, store: &mut ParamStore<T>, total_steps: u64) -> Result<Self> {
        config.validate()?;
        config.apply_freezes(store);
        Ok(Self {
            config,
            optimizer: OptimizerState::new(config.adamw(), store),
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            global_step: 0,
            total_steps,
            epoch: 0,
        })
    }

    pub fn epoch_segments(&mut self, splits: &[UserSplit]) -> Vec<Segment> {
        let mut segs = match self.config.strategy {
            Strategy::Sampling => sample_epoch(splits, self.config.max_seq_len, &mut self.rng),
            Strategy::All => all_segments(splits, self.config.max_seq_len),
        };
        segs.shuffle(&mut self.rng);
        segs
    }

    /// One pass over freshly built segments. Aborts on a non-finite loss.
    pub fn train_epoch<M: SegmentModel<T> + ?Sized>(
        &mut self,
        model: &M,
        store: &mut ParamStore<T>,
        splits: &[UserSplit],
    ) -> Result<EpochStats> {
        let segments = self.epoch_segments(splits);
        if segments.is_empty() {
            return Err(Error::Empty("training segments"));
        }
        self.train_segments(model, store, &segments)
    }

    pub fn train_segments<M: SegmentModel<T> + ?Sized>(
        &mut self,
        model: &M,
        store: &mut ParamStore<T>,
        segments: &[Segment],
    ) -> Result<EpochStats> {
        self.epoch += 1;
        let mut total = 0.0;
        let mut batches = 0;
        let mut last_lr = 0.0;
        for (b, chunk) in segments.chunks(self.config.batch_size).enumerate() {
            let mut tape = Tape::training(self.rng.next_u64());
            let loss = model.segment_loss(&mut tape, store, chunk)?;
            let value = tape.value(loss).data()[0].to_f64();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    batch: b,
                    lr: self.optimizer.config.lr_at(self.global_step, self.total_steps),
                });
            }
            tape.backward(loss)?;
            store.zero_grad();
            tape.accumulate_param_grads(store);
            last_lr = self.optimizer.step(store, self.global_step, self.total_steps)?;
            self.global_step += 1;
            total += value;
            batches += 1;
        }
        Ok(EpochStats {
            epoch: self.epoch,
            mean_loss: total / batches as f64,
            batches,
            examples: segments.len(),
            last_lr,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StopDecision {
    Continue,
    /// `best_epoch` is 1-based.
    Stop {
        best_epoch: usize,
    },
}

/// Stops once `patience` consecutive entries fail to beat the best value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
    pub since_best: usize,
    pub seen: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience: patience.max(1),
            best: f64::NEG_INFINITY,
            best_epoch: 0,
            since_best: 0,
            seen: 0,
        }
    }

    /// Record the next epoch's value. Only strict improvement resets the
    /// counter.
    pub fn update(&mut self, value: f64) -> StopDecision {
        self.seen += 1;
        if value > self.best {
            self.best = value;
            self.best_epoch = self.seen;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        if self.since_best >= self.patience {
            StopDecision::Stop {
                best_epoch: self.best_epoch,
            }
        } else {
            StopDecision::Continue
        }
    }
}

/// Replay `history` (one value per epoch, from epoch 1) and report whether
/// training should stop after its last entry.
pub fn early_stop_check(history: &[f64], patience: usize) -> StopDecision {
    let mut es = EarlyStopping::new(patience);
    let mut d = StopDecision::Continue;
    for &v in history {
        d = es.update(v);
    }
    d
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub epochs: Vec<EpochStats>,
    pub valid: Vec<f64>,
    pub best_epoch: usize,
    pub best_valid: f64,
    pub stopped_early: bool,
}

/// Train for up to `config.max_epochs` epochs, validating after each, and
/// leave `store` holding the parameters of the best validation epoch.
/// `on_epoch` sees the state after every epoch (for logging/checkpoints).
pub fn fit<T, M, V, E>(
    trainer: &mut Trainer<T>,
    model: &M,
    store: &mut ParamStore<T>,
    splits: &[UserSplit],
    mut validate: V,
    mut on_epoch: E,
) -> Result<FitReport>
where
    T: Real,
    M: SegmentModel<T> + ?Sized,
    V: FnMut(&ParamStore<T>) -> Result<f64>,
    E: FnMut(&Trainer<T>, &ParamStore<T>, &EpochStats, f64) -> Result<()>,
{
    let mut stopper = EarlyStopping::new(trainer.config.early_stop_patience);
    let mut best_store = store.clone();
    let mut report = FitReport {
        epochs: Vec::new(),
        valid: Vec::new(),
        best_epoch: 0,
        best_valid: f64::NEG_INFINITY,
        stopped_early: false,
    };
    for _ in 0..trainer.config.max_epochs {
        let stats = trainer.train_epoch(model, store, splits)?;
        let v = validate(store)?;
        report.epochs.push(stats);
        report.valid.push(v);
        let decision = stopper.update(v);
        if stopper.best_epoch == stopper.seen {
            best_store.load_values(store)?;
        }
        on_epoch(trainer, store, &stats, v)?;
        if let StopDecision::Stop { .. } = decision {
            report.stopped_early = true;
            break;
        }
    }
    report.best_epoch = stopper.best_epoch;
    report.best_valid = stopper.best;
    store.load_values(&best_store)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn loss_examples() {
        let mut tape = Tape::<f64>::new();
        let uniform = tape.leaf(Tensor::zeros(&[1, 100]), false);
        let l = compute_loss(&mut tape, uniform, &[7]).unwrap();
        assert!((tape.value(l).data()[0] - libm::log(100.0)).abs() < 1e-12);

        let mut big = Tensor::zeros(&[1, 10]);
        big.data_mut()[3] = 1e4;
        let x = tape.leaf(big, false);
        let l = compute_loss(&mut tape, x, &[3]).unwrap();
        assert!(tape.value(l).data()[0].abs() < 1e-12);
    }

    #[test]
    fn early_stopping_examples() {
        let inc: Vec<f64> = (0..50).map(|i| i as f64).collect();
        assert_eq!(early_stop_check(&inc, 20), StopDecision::Continue);

        let mut h = vec![0.1, 0.2, 0.3];
        h.extend(core::iter::repeat_n(0.3, 19));
        assert_eq!(early_stop_check(&h, 20), StopDecision::Continue);
        h.push(0.25);
        assert_eq!(early_stop_check(&h, 20), StopDecision::Stop { best_epoch: 3 });

        let mut r = vec![0.4, 0.5];
        r.extend(core::iter::repeat_n(0.5, 19));
        r.push(0.6);
        r.extend(core::iter::repeat_n(0.0, 19));
        assert_eq!(early_stop_check(&r, 20), StopDecision::Continue);
        r.push(0.0);
        assert_eq!(early_stop_check(&r, 20), StopDecision::Stop { best_epoch: 22 });
    }

    #[test]
    fn profiles_and_validation() {
        let d = TrainConfig::desk();
        let p = TrainConfig::pretrained();
        assert_eq!((d.lr, d.batch_size, d.dropout, d.weight_decay), (1e-3, 64, 0.1, 0.01));
        assert_eq!((p.lr, p.batch_size, p.dropout, p.weight_decay), (5e-4, 256, 0.8, 0.1));
        assert_eq!(p.early_stop_patience, 20);
        assert!(d.validate().is_ok() && p.validate().is_ok());
        assert!(TrainConfig { lr: 0.0, ..d }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..d }.validate().is_err());
        assert!(TrainConfig {
            early_stop_patience: 0,
            ..d
        }
        .validate()
        .is_err());
    }

    #[test]
    fn steps_follow_strategy() {
        let splits: Vec<UserSplit> = [5usize, 1, 3]
            .iter()
            .enumerate()
            .map(|(u, &n)| UserSplit {
                user: u,
                train: (0..n).collect(),
                valid: 0,
                test: 0,
            })
            .collect();
        let s = TrainConfig {
            batch_size: 2,
            ..TrainConfig::desk()
        };
        assert_eq!(s.segments_per_epoch(&splits), 2);
        let a = TrainConfig {
            strategy: Strategy::All,
            ..s
        };
        assert_eq!(a.segments_per_epoch(&splits), 6);
        assert_eq!(a.steps_per_epoch(&splits), 3);
    }
}
