//! Self-supervised reconstruction: predict masked words from the rest of
//! the document.
//!
//! For each document, `t · targets_per_doc` distinct positions are masked
//! out; the remaining words form one shared context `x` (a bag-of-words
//! count vector) and the removed words form `targets_per_doc` target tuples
//! of length `t`. The model is a residual MLP over normalized counts with a
//! softmax over all `V^t` word tuples, trained with mean cross-entropy over
//! `(context, target)` pairs — the population minimizer of that loss is the
//! `t`-word posterior predictive `f*(x) = (A ⊗ … ⊗ A) E[w^{⊗t} | x]`, which
//! is what makes the trained predictor invertible into posterior moments.
//!
//! Training ([`Trainer`], [`train`]) follows a fixed recipe:
//!
//! * fresh corpus every `resample_every` epochs (the model never sees a
//!   document twice across rounds, so it cannot memorize);
//! * a validation corpus of [`VALIDATION_DOCS`] documents sampled once per
//!   run, with fixed masks;
//! * AMSGrad with the configured learning rate, halved whenever validation
//!   loss fails to improve for `lr_halve_patience` consecutive epochs;
//! * divergence detection: training loss above 10x the initial loss (the
//!   very first batch, before any update) for 5 consecutive epochs aborts
//!   with [`ReconstructError::Diverged`], history attached.
//!
//! Everything is a deterministic function of `TrainConfig::seed`: corpus
//! rounds, masks, shuffles, and initialization are all derived from it with
//! labeled streams, and a run resumed from a checkpoint continues bit for
//! bit as if it had never stopped.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::generative::{make_corpus, Document, GenConfig, GenError, PriorSpec, TopicWordMatrix};
use crate::linalg::{LinalgError, ProbVec};
use crate::nn::{
    read_core_checkpoint, write_core_checkpoint, AmsGrad, CoreTrainerState, MlpCore, MlpDims,
    CKPT_KIND_RECONSTRUCT,
};
use crate::rng::{derive_seed, derive_seed_indexed, stream_rng};

/// Validation corpus size, sampled once per training run.
pub const VALIDATION_DOCS: usize = 2000;

/// Vocabulary cap for `t = 2` (the output head materializes `V²` logits).
pub const MAX_VOCAB_T2: usize = 500;

/// Errors from masking, the model, and training.
#[derive(Debug, Error)]
pub enum ReconstructError {
    /// Document too short to mask the requested targets and keep context.
    #[error("document of length {len} cannot provide {needed} masked positions plus context")]
    DocTooShort { len: usize, needed: usize },
    /// Non-finite activations: the parameter state is unusable.
    #[error("model corrupt: non-finite values in {context}")]
    ModelCorrupt { context: String },
    /// Training loss exploded relative to its starting point. `history`
    /// covers the epochs run by this trainer instance, the failing epoch
    /// included.
    #[error(
        "training diverged at epoch {epoch}: loss {loss:.4} exceeded 10x the initial loss \
         {initial:.4} for 5 consecutive epochs"
    )]
    Diverged { epoch: usize, loss: f64, initial: f64, history: Vec<EpochStats> },
    /// Bad configuration.
    #[error("invalid training configuration: {context}")]
    InvalidConfig { context: String },
    /// Mismatched shapes between model, documents, and matrix.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    /// Checkpoint (de)serialization problems.
    #[error("checkpoint format error: {context}")]
    CheckpointFormat { context: String },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(context: impl Into<String>) -> ReconstructError {
    ReconstructError::InvalidConfig { context: context.into() }
}

fn shape_err(context: impl Into<String>) -> ReconstructError {
    ReconstructError::ShapeMismatch { context: context.into() }
}

/// A masked document: the context counts and the target tuples that were
/// removed from them. All tuples share the single context, which lowers
/// gradient variance at no extra forward-pass cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedSample {
    x_counts: Vec<f64>,
    targets: Vec<Vec<u32>>,
}

impl MaskedSample {
    pub fn x_counts(&self) -> &[f64] {
        &self.x_counts
    }

    pub fn targets(&self) -> &[Vec<u32>] {
        &self.targets
    }

    /// Flat index of target `i` into the `V^t` output, last word fastest.
    pub fn target_flat(&self, i: usize, vocab: usize) -> usize {
        self.targets[i].iter().fold(0usize, |acc, &w| acc * vocab + w as usize)
    }
}

/// Masks `targets_per_doc` tuples of `t` words out of `doc`.
///
/// Draws `t · targets_per_doc` distinct positions uniformly at random (so
/// duplicated words are masked per-occurrence, not per-type), chunks them
/// into tuples, and removes them from the context counts. Documents too
/// short for the full quota yield as many tuples as fit while leaving at
/// least one context word; a document that cannot support a single tuple is
/// a [`ReconstructError::DocTooShort`].
///
/// Returned as a one-element list: one shared context per document.
pub fn make_masked_samples(
    doc: &Document,
    t: usize,
    targets_per_doc: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<MaskedSample>, ReconstructError> {
    if t == 0 || targets_per_doc == 0 {
        return Err(config_err("t and targets_per_doc must be positive"));
    }
    let n = doc.len();
    if n < t + 1 {
        return Err(ReconstructError::DocTooShort { len: n, needed: t });
    }
    let max_tuples = ((n - 1) / t).min(targets_per_doc);
    let n_masked = max_tuples * t;

    // Partial Fisher-Yates: the first n_masked entries are a uniform sample
    // of distinct positions, in random order.
    let mut positions: Vec<usize> = (0..n).collect();
    for i in 0..n_masked {
        let j = rng.gen_range(i..n);
        positions.swap(i, j);
    }
    let mut x_counts = doc.counts_dense();
    let mut targets = Vec::with_capacity(max_tuples);
    for chunk in positions[..n_masked].chunks_exact(t) {
        let tuple: Vec<u32> = chunk.iter().map(|&p| doc.words()[p]).collect();
        for &w in &tuple {
            x_counts[w as usize] -= 1.0;
        }
        targets.push(tuple);
    }
    Ok(vec![MaskedSample { x_counts, targets }])
}

/// Residual MLP mapping length-normalized context counts to a softmax over
/// `V^t` word tuples.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    core: MlpCore,
    vocab: usize,
    t: usize,
}

impl MlpModel {
    /// Initializes a model (deterministic in `seed`); `t = 2` caps the
    /// vocabulary at [`MAX_VOCAB_T2`] because the head holds `V²` logits.
    pub fn new(
        vocab: usize,
        t: usize,
        width: usize,
        n_blocks: usize,
        seed: u64,
    ) -> Result<Self, ReconstructError> {
        if vocab == 0 || width == 0 {
            return Err(config_err("vocab and width must be positive"));
        }
        match t {
            1 => {}
            2 if vocab <= MAX_VOCAB_T2 => {}
            2 => {
                return Err(config_err(format!(
                    "t = 2 supports V <= {MAX_VOCAB_T2}, got V = {vocab}"
                )))
            }
            _ => return Err(config_err(format!("trained models support t in {{1, 2}}, got {t}"))),
        }
        let out_dim = vocab.pow(t as u32);
        let dims = MlpDims { in_dim: vocab, width, n_blocks, out_dim };
        Ok(Self { core: MlpCore::init(dims, seed), vocab, t })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn width(&self) -> usize {
        self.core.dims.width
    }

    pub fn n_blocks(&self) -> usize {
        self.core.dims.n_blocks
    }

    pub fn out_dim(&self) -> usize {
        self.core.dims.out_dim
    }

    pub fn param_count(&self) -> usize {
        self.core.params.len()
    }

    /// Flat parameters in checkpoint order (input weights, input bias,
    /// block weights/bias pairs, output weights, output bias).
    pub fn params(&self) -> &[f64] {
        &self.core.params
    }

    /// Mutable flat parameters; exposed for finite-difference checks.
    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.core.params
    }

    /// Predicted distribution over `V^t` word tuples for one context.
    ///
    /// The context is a raw count vector of length `V`; it is normalized to
    /// sum one internally, which makes the model a pure bag-of-words
    /// function (word order never enters).
    pub fn forward(&self, x_counts: &[f64]) -> Result<ProbVec, ReconstructError> {
        if x_counts.len() != self.vocab {
            return Err(shape_err(format!(
                "context has {} entries, model vocabulary is {}",
                x_counts.len(),
                self.vocab
            )));
        }
        let x = normalize_counts(x_counts);
        let cache = self.core.forward(&x, 1);
        let mut probs = cache.logits;
        if probs.iter().any(|v| !v.is_finite()) {
            return Err(ReconstructError::ModelCorrupt { context: "forward logits".into() });
        }
        crate::util::softmax_in_place(&mut probs);
        Ok(ProbVec::new(probs)?)
    }
}

fn normalize_counts(counts: &[f64]) -> Vec<f64> {
    let sum: f64 = counts.iter().sum();
    if sum > 0.0 {
        counts.iter().map(|c| c / sum).collect()
    } else {
        counts.to_vec()
    }
}

/// Training hyperparameters. The defaults reproduce the benchmark recipe;
/// `targets_per_doc` should be 6 for `t = 1` and 1 for `t = 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before the rate halves.
    pub lr_halve_patience: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// A fresh corpus is sampled every this many epochs.
    pub resample_every: usize,
    pub targets_per_doc: usize,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 128,
            learning_rate: 2e-4,
            lr_halve_patience: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            resample_every: 2,
            targets_per_doc: 6,
            weight_decay: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), ReconstructError> {
        if self.batch_size == 0 {
            return Err(config_err("batch_size must be positive"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(config_err("learning_rate must be positive"));
        }
        if self.lr_halve_patience == 0 {
            return Err(config_err("lr_halve_patience must be positive"));
        }
        if self.resample_every == 0 {
            return Err(config_err("resample_every must be positive"));
        }
        if self.targets_per_doc == 0 {
            return Err(config_err("targets_per_doc must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(config_err("weight_decay must be nonnegative"));
        }
        Ok(())
    }
}

/// Mean cross-entropy over all `(context, target)` pairs and its gradient
/// in flat parameter layout.
///
/// Each sample contributes all of its target tuples against one shared
/// context; with `n_i` targets on sample `i` and `N = Σ n_i` pairs in
/// total, the loss is `(1/N) Σ_i Σ_j −log softmax(logits_i)[y_{ij}]`.
pub fn loss_and_grad(
    model: &MlpModel,
    samples: &[MaskedSample],
) -> Result<(f64, Vec<f64>), ReconstructError> {
    if samples.is_empty() {
        return Err(config_err("loss_and_grad needs at least one sample"));
    }
    let (loss, grads) = batch_pass(model, samples, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Mean cross-entropy over pairs, forward only.
pub fn batch_loss(model: &MlpModel, samples: &[MaskedSample]) -> Result<f64, ReconstructError> {
    if samples.is_empty() {
        return Err(config_err("batch_loss needs at least one sample"));
    }
    Ok(batch_pass(model, samples, false)?.0)
}

fn batch_pass(
    model: &MlpModel,
    samples: &[MaskedSample],
    want_grads: bool,
) -> Result<(f64, Option<Vec<f64>>), ReconstructError> {
    let v = model.vocab;
    let out_dim = model.out_dim();
    let batch = samples.len();
    let mut x = vec![0.0; batch * v];
    for (row, s) in samples.iter().enumerate() {
        if s.x_counts.len() != v {
            return Err(shape_err(format!(
                "sample {row} has {} count entries, expected {v}",
                s.x_counts.len()
            )));
        }
        let normalized = normalize_counts(&s.x_counts);
        x[row * v..(row + 1) * v].copy_from_slice(&normalized);
    }
    let cache = model.core.forward(&x, batch);
    let total_pairs: usize = samples.iter().map(|s| s.targets.len()).sum();
    if total_pairs == 0 {
        return Err(config_err("samples carry no targets"));
    }
    let inv_pairs = 1.0 / total_pairs as f64;

    let mut loss = 0.0;
    let mut dlogits = want_grads.then(|| vec![0.0; batch * out_dim]);
    for (row, s) in samples.iter().enumerate() {
        let logits = &cache.logits[row * out_dim..(row + 1) * out_dim];
        let max = logits.iter().fold(f64::NEG_INFINITY, |m, &l| m.max(l));
        if !max.is_finite() {
            return Err(ReconstructError::ModelCorrupt { context: "batch logits".into() });
        }
        let mut sum_exp = 0.0;
        for &l in logits {
            sum_exp += (l - max).exp();
        }
        let lse = max + sum_exp.ln();
        let n_i = s.targets.len() as f64;
        let u_i = n_i * inv_pairs;
        let mut target_logit_sum = 0.0;
        for i in 0..s.targets.len() {
            let flat = s.target_flat(i, v);
            if flat >= out_dim {
                return Err(shape_err(format!("target tuple {:?} out of range", s.targets[i])));
            }
            target_logit_sum += logits[flat];
        }
        loss += u_i * (lse - target_logit_sum / n_i);
        if let Some(dl) = dlogits.as_mut() {
            let drow = &mut dl[row * out_dim..(row + 1) * out_dim];
            let scale = u_i / sum_exp;
            for (d, &l) in drow.iter_mut().zip(logits) {
                *d = scale * (l - max).exp();
            }
            let per_target = u_i / n_i;
            for i in 0..s.targets.len() {
                drow[s.target_flat(i, v)] -= per_target;
            }
        }
    }
    let grads = match dlogits {
        Some(dl) => Some(model.core.backward(&cache, &dl)),
        None => None,
    };
    Ok((loss, grads))
}

/// Per-epoch training record; `epoch` is 1-based.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// A finished (or aborted-by-caller) training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MlpModel,
    pub history: Vec<EpochStats>,
}

/// Incremental trainer: owns the model, optimizer, schedule, and the data
/// pipeline, and advances one epoch at a time so callers can checkpoint,
/// snapshot, or stop between epochs.
pub struct Trainer {
    model: MlpModel,
    opt: AmsGrad,
    cfg: TrainConfig,
    gen_cfg: GenConfig,
    a: TopicWordMatrix,
    prior: PriorSpec,
    epoch: usize,
    lr: f64,
    best_val: f64,
    since_best: usize,
    initial_loss: Option<f64>,
    diverged_streak: usize,
    val_samples: Vec<MaskedSample>,
    corpus_samples: Vec<MaskedSample>,
    corpus_round: Option<usize>,
    history: Vec<EpochStats>,
}

impl Trainer {
    pub fn new(
        model: MlpModel,
        a: &TopicWordMatrix,
        prior: &PriorSpec,
        gen_cfg: &GenConfig,
        cfg: TrainConfig,
    ) -> Result<Self, ReconstructError> {
        cfg.validate()?;
        if model.vocab != a.vocab_size() {
            return Err(shape_err(format!(
                "model vocabulary {} vs matrix V = {}",
                model.vocab,
                a.vocab_size()
            )));
        }
        if gen_cfg.min_length < model.t + 1 {
            return Err(config_err(format!(
                "min_length must be at least t + 1 = {}, got {}",
                model.t + 1,
                gen_cfg.min_length
            )));
        }
        let opt = AmsGrad::new(model.param_count(), cfg.beta1, cfg.beta2, cfg.eps);
        let lr = cfg.learning_rate;
        let mut trainer = Self {
            model,
            opt,
            lr,
            best_val: f64::INFINITY,
            since_best: 0,
            initial_loss: None,
            diverged_streak: 0,
            epoch: 0,
            val_samples: Vec::new(),
            corpus_samples: Vec::new(),
            corpus_round: None,
            history: Vec::new(),
            cfg,
            gen_cfg: gen_cfg.clone(),
            a: a.clone(),
            prior: prior.clone(),
        };
        trainer.val_samples = trainer.build_corpus_samples(
            derive_seed(trainer.cfg.seed, "validation"),
            VALIDATION_DOCS,
        )?;
        Ok(trainer)
    }

    /// Samples `count` documents and masks them, with per-document streams
    /// of `seed` for both steps.
    fn build_corpus_samples(
        &self,
        seed: u64,
        count: usize,
    ) -> Result<Vec<MaskedSample>, ReconstructError> {
        let gen = GenConfig { seed, corpus_size: count, ..self.gen_cfg.clone() };
        let docs = make_corpus(&self.a, &self.prior, &gen)?;
        let mask_seed = derive_seed(seed, "mask");
        let mut samples = Vec::with_capacity(docs.len());
        for (i, doc) in docs.iter().enumerate() {
            let mut rng = stream_rng(mask_seed, i as u64);
            samples.extend(make_masked_samples(
                doc,
                self.model.t,
                self.cfg.targets_per_doc,
                &mut rng,
            )?);
        }
        Ok(samples)
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    /// Completed epochs so far.
    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Runs one epoch: resample the corpus if the round rolled over, sweep
    /// shuffled batches, evaluate validation loss, update the schedule.
    pub fn run_epoch(&mut self) -> Result<EpochStats, ReconstructError> {
        let round = self.epoch / self.cfg.resample_every;
        if self.corpus_round != Some(round) {
            let seed = derive_seed_indexed(self.cfg.seed, "corpus", round as u64);
            self.corpus_samples = self.build_corpus_samples(seed, self.gen_cfg.corpus_size)?;
            self.corpus_round = Some(round);
        }
        let order = {
            let mut order: Vec<usize> = (0..self.corpus_samples.len()).collect();
            let mut rng =
                stream_rng(derive_seed_indexed(self.cfg.seed, "shuffle", self.epoch as u64), 0);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order
        };

        let lr_used = self.lr;
        let mut pair_total = 0usize;
        let mut loss_acc = 0.0;
        let mut batch: Vec<MaskedSample> = Vec::with_capacity(self.cfg.batch_size);
        for chunk in order.chunks(self.cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| self.corpus_samples[i].clone()));
            let (loss, grads) = loss_and_grad(&self.model, &batch)?;
            // The very first batch of the run sees the untouched model, so
            // its loss is the divergence reference point.
            if self.initial_loss.is_none() {
                self.initial_loss = Some(loss);
            }
            let pairs: usize = batch.iter().map(|s| s.targets.len()).sum();
            loss_acc += loss * pairs as f64;
            pair_total += pairs;
            self.opt.step(&mut self.model.core.params, &grads, lr_used, self.cfg.weight_decay);
        }
        let train_loss = loss_acc / pair_total as f64;

        let mut val_acc = 0.0;
        let mut val_pairs = 0usize;
        for chunk in self.val_samples.chunks(self.cfg.batch_size) {
            let loss = batch_loss(&self.model, chunk)?;
            let pairs: usize = chunk.iter().map(|s| s.targets.len()).sum();
            val_acc += loss * pairs as f64;
            val_pairs += pairs;
        }
        let val_loss = val_acc / val_pairs as f64;

        self.epoch += 1;
        let stats = EpochStats { epoch: self.epoch, train_loss, val_loss, lr: lr_used };
        self.history.push(stats.clone());
        let initial = self.initial_loss.expect("set by the first batch");
        if train_loss > 10.0 * initial {
            self.diverged_streak += 1;
            if self.diverged_streak >= 5 {
                return Err(ReconstructError::Diverged {
                    epoch: self.epoch,
                    loss: train_loss,
                    initial,
                    history: self.history.clone(),
                });
            }
        } else {
            self.diverged_streak = 0;
        }
        if val_loss < self.best_val {
            self.best_val = val_loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.cfg.lr_halve_patience {
                self.lr *= 0.5;
                self.since_best = 0;
            }
        }
        Ok(stats)
    }

    /// Per-epoch records for the epochs run by this instance (resumed
    /// trainers start with an empty history; earlier epochs live in the
    /// run's loss CSV).
    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    /// Serializable snapshot of optimizer and schedule state.
    pub fn state(&self) -> TrainerState {
        TrainerState(CoreTrainerState {
            epoch: self.epoch as u64,
            lr: self.lr,
            best_val: self.best_val,
            since_best: self.since_best as u64,
            initial_loss: self.initial_loss.unwrap_or(f64::NAN),
            diverged_streak: self.diverged_streak as u64,
            opt: self.opt.clone(),
        })
    }

    /// Rebuilds a trainer mid-run; continuing from here reproduces the
    /// uninterrupted run exactly, because every epoch's corpus, masks, and
    /// shuffle depend only on `(seed, epoch)`.
    pub fn restore(
        model: MlpModel,
        state: TrainerState,
        a: &TopicWordMatrix,
        prior: &PriorSpec,
        gen_cfg: &GenConfig,
        cfg: TrainConfig,
    ) -> Result<Self, ReconstructError> {
        let mut trainer = Self::new(model, a, prior, gen_cfg, cfg)?;
        let s = state.0;
        if s.opt.m.len() != trainer.model.param_count() {
            return Err(ReconstructError::CheckpointFormat {
                context: format!(
                    "optimizer state has {} entries, model has {} parameters",
                    s.opt.m.len(),
                    trainer.model.param_count()
                ),
            });
        }
        trainer.epoch = s.epoch as usize;
        trainer.lr = s.lr;
        trainer.best_val = s.best_val;
        trainer.since_best = s.since_best as usize;
        trainer.initial_loss = if s.initial_loss.is_nan() { None } else { Some(s.initial_loss) };
        trainer.diverged_streak = s.diverged_streak as usize;
        trainer.opt = s.opt;
        Ok(trainer)
    }
}

/// Opaque trainer state for checkpointing (see [`Trainer::state`]).
#[derive(Debug, Clone, PartialEq)]
pub struct TrainerState(CoreTrainerState);

/// Trains for `cfg.epochs` epochs; see [`Trainer`] for the recipe.
pub fn train(
    model: MlpModel,
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    gen_cfg: &GenConfig,
    cfg: TrainConfig,
) -> Result<TrainOutcome, ReconstructError> {
    let (outcome, _) = train_with_snapshots(model, a, prior, gen_cfg, cfg, 0)?;
    Ok(outcome)
}

/// Like [`train`], also cloning the model every `snapshot_every` epochs
/// (`0` disables snapshots). Snapshots are taken after the epoch completes
/// and are tagged with the 1-based epoch number.
pub fn train_with_snapshots(
    model: MlpModel,
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    gen_cfg: &GenConfig,
    cfg: TrainConfig,
    snapshot_every: usize,
) -> Result<(TrainOutcome, Vec<(usize, MlpModel)>), ReconstructError> {
    let epochs = cfg.epochs;
    let mut trainer = Trainer::new(model, a, prior, gen_cfg, cfg)?;
    let mut history = Vec::with_capacity(epochs);
    let mut snapshots = Vec::new();
    for _ in 0..epochs {
        let stats = trainer.run_epoch()?;
        if snapshot_every > 0 && stats.epoch % snapshot_every == 0 {
            snapshots.push((stats.epoch, trainer.model.clone()));
        }
        history.push(stats);
    }
    Ok((TrainOutcome { model: trainer.model, history }, snapshots))
}

/// Writes a model checkpoint; `k` is carried as provenance metadata and the
/// trainer state makes the file resumable. The format is a fixed binary
/// layout (magic `TSSLCKPT`, version, kind tag, shape header, little-endian
/// `f64` parameters in layout order, optional trainer section).
pub fn save_checkpoint(
    path: &Path,
    model: &MlpModel,
    k: usize,
    trainer: Option<&TrainerState>,
) -> Result<(), ReconstructError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint_to(&mut w, model, k, trainer)?;
    w.flush()?;
    Ok(())
}

/// [`save_checkpoint`] against any writer.
pub fn write_checkpoint_to(
    w: &mut impl Write,
    model: &MlpModel,
    k: usize,
    trainer: Option<&TrainerState>,
) -> Result<(), ReconstructError> {
    write_core_checkpoint(
        w,
        CKPT_KIND_RECONSTRUCT,
        model.vocab as u64,
        k as u64,
        model.t as u64,
        &model.core,
        trainer.map(|t| &t.0),
    )?;
    Ok(())
}

/// Loads a reconstruction checkpoint, returning the model, the stored `k`,
/// and the trainer state when present.
pub fn load_checkpoint(
    path: &Path,
) -> Result<(MlpModel, usize, Option<TrainerState>), ReconstructError> {
    let mut r = BufReader::new(File::open(path)?);
    read_checkpoint_from(&mut r)
}

/// [`load_checkpoint`] against any reader.
pub fn read_checkpoint_from(
    r: &mut impl Read,
) -> Result<(MlpModel, usize, Option<TrainerState>), ReconstructError> {
    let ckpt = read_core_checkpoint(r)
        .map_err(|context| ReconstructError::CheckpointFormat { context })?;
    if ckpt.kind != CKPT_KIND_RECONSTRUCT {
        return Err(ReconstructError::CheckpointFormat {
            context: format!("expected a reconstruction checkpoint, found kind {}", ckpt.kind),
        });
    }
    let vocab = ckpt.vocab as usize;
    let t = ckpt.t as usize;
    if ckpt.core.dims.in_dim != vocab || ckpt.core.dims.out_dim != vocab.pow(t as u32) {
        return Err(ReconstructError::CheckpointFormat {
            context: "shape header inconsistent with vocabulary and t".into(),
        });
    }
    let model = MlpModel { core: ckpt.core, vocab, t };
    Ok((model, ckpt.k as usize, ckpt.trainer.map(TrainerState)))
}

/// Writes training history as CSV (`epoch,train_loss,val_loss,lr`), with
/// shortest-round-trip float formatting so re-parsing is lossless.
pub fn write_history_csv(w: &mut impl Write, history: &[EpochStats]) -> std::io::Result<()> {
    writeln!(w, "epoch,train_loss,val_loss,lr")?;
    for s in history {
        writeln!(w, "{},{},{},{}", s.epoch, s.train_loss, s.val_loss, s.lr)?;
    }
    Ok(())
}

/// Parses the CSV written by [`write_history_csv`].
pub fn read_history_csv(text: &str) -> Result<Vec<EpochStats>, ReconstructError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line.trim() != "epoch,train_loss,val_loss,lr" {
                return Err(ReconstructError::CheckpointFormat {
                    context: format!("unexpected history header '{line}'"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 4 {
            return Err(ReconstructError::CheckpointFormat {
                context: format!("history line {} has {} fields", i + 1, fields.len()),
            });
        }
        let parse_f = |s: &str| -> Result<f64, ReconstructError> {
            s.trim().parse().map_err(|e| ReconstructError::CheckpointFormat {
                context: format!("history line {}: {e}", i + 1),
            })
        };
        out.push(EpochStats {
            epoch: fields[0].trim().parse().map_err(|e| ReconstructError::CheckpointFormat {
                context: format!("history line {}: {e}", i + 1),
            })?,
            train_loss: parse_f(fields[1])?,
            val_loss: parse_f(fields[2])?,
            lr: parse_f(fields[3])?,
        });
    }
    Ok(out)
}
