//! Contrastive self-supervision: classify whether a short continuation was
//! generated by the same topic mixture as the document.
//!
//! Pairs ([`make_pairs`]) are built by sampling `w` from the prior and a
//! document `x` from `Aw`; with half probability the continuation `x′` is
//! `t` more words from `Aw` (label 1), otherwise `t` words from `Aw′` for a
//! freshly drawn `w′` (label 0, redrawn when `w′` collides with `w`, which
//! only matters for the pure prior's finite support). A sigmoid classifier
//! `f(x, x′)` trained with the square loss converges to `P(y = 1 | x, x′)`,
//! so its odds `g = f/(1 − f)` ([`g_transform`]) estimate the density ratio
//! `P(x′|x)/P(x′)`.
//!
//! Evaluating `g` against a fixed set of landmark tuples ([`build_landmarks`],
//! [`landmark_representation`]) yields a representation that is *linear* in
//! the posterior moment tensor: with `m ≥ K^t` landmarks of full-rank `Ã`,
//! `vec(W_post) = Ã† D g(x, {l_i})` where `D` holds the landmark marginals
//! ([`recover_from_landmarks`]). Downstream targets can also be fit directly
//! in representation space by ridge-regularized least squares
//! ([`kernel_regression`]); taking the downstream documents themselves as
//! landmarks turns that into kernel regression with kernel `G_ij = g(x_i, x_j)`.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::generative::{
    sample_document, Document, GenConfig, GenError, PreparedPrior, PriorSpec, TopicProportions,
    TopicWordMatrix,
};
use crate::linalg::{
    pinv_left, solve_spd, svd, LinalgError, Matrix, MomentTensor, DEFAULT_RANK_TOL,
};
use crate::nn::{
    read_core_checkpoint, write_core_checkpoint, AmsGrad, CoreTrainerState, MlpCore, MlpDims,
    CKPT_KIND_CONTRASTIVE,
};
use crate::oracle::{atilde_row, ideal_contrastive_g, prior_moment_tensor, OracleConfig, OracleError};
use crate::reconstruct::{EpochStats, TrainConfig};
use crate::rng::{derive_seed, derive_seed_indexed, stream_rng};
use crate::util::dot;

/// Validation pair count for resampled training runs.
pub const VALIDATION_PAIRS: usize = 2000;

/// Default clamp for the odds map (keeps `g` finite when `f` saturates).
pub const DEFAULT_G_CLAMP: f64 = 1e-6;

/// Negative-pair redraws before accepting `w′ = w` (a point-mass prior
/// cannot produce a distinct mixture, and then equality is harmless: both
/// labels share one continuation distribution and the Bayes optimum is ½).
const MAX_NEGATIVE_RESAMPLES: usize = 100;

/// Landmark resampling attempts before giving up on a full-rank `Ã`.
const MAX_LANDMARK_ATTEMPTS: usize = 10;

/// Largest tuple space we are willing to enumerate exhaustively.
const MAX_ENUMERABLE_TUPLES: u128 = 1 << 20;

/// Errors from pair generation, classifier training, and landmark recovery.
#[derive(Debug, Error)]
pub enum ContrastiveError {
    /// Bad configuration.
    #[error("invalid contrastive configuration: {context}")]
    InvalidConfig { context: String },
    /// Mismatched shapes between classifier, pairs, and landmarks.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    /// Non-finite activations: the parameter state is unusable.
    #[error("classifier corrupt: non-finite values in {context}")]
    ModelCorrupt { context: String },
    /// Training loss exploded relative to its starting point.
    #[error(
        "contrastive training diverged at epoch {epoch}: loss {loss:.4} exceeded 10x the \
         initial loss {initial:.4} for 5 consecutive epochs"
    )]
    Diverged { epoch: usize, loss: f64, initial: f64, history: Vec<EpochStats> },
    /// No landmark draw produced a full-column-rank `Ã`.
    #[error(
        "landmark matrix rank deficient after {attempts} attempts (need rank {needed}); \
         the topic-word matrix may be adversarial or m < K^t"
    )]
    RankDeficientLandmarks { attempts: usize, needed: usize },
    /// Normal equations singular at `ridge = 0`.
    #[error("kernel regression normal equations are singular: {context}; try a positive ridge")]
    Conditioning { context: String },
    /// Checkpoint (de)serialization problems.
    #[error("checkpoint format error: {context}")]
    CheckpointFormat { context: String },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(context: impl Into<String>) -> ContrastiveError {
    ContrastiveError::InvalidConfig { context: context.into() }
}

fn shape_err(context: impl Into<String>) -> ContrastiveError {
    ContrastiveError::ShapeMismatch { context: context.into() }
}

/// One labeled example: a document, a `t`-word continuation, and whether
/// the continuation came from the document's own topic mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastivePair {
    x: Document,
    x_prime: Vec<u32>,
    label: bool,
    w_prime: Option<TopicProportions>,
}

impl ContrastivePair {
    pub fn x(&self) -> &Document {
        &self.x
    }

    pub fn x_prime(&self) -> &[u32] {
        &self.x_prime
    }

    pub fn label(&self) -> bool {
        self.label
    }

    /// Ground-truth distractor mixture for negative pairs (`None` on
    /// positives); kept so tests can audit the `w′ ≠ w` protocol.
    pub fn w_prime(&self) -> Option<&TopicProportions> {
        self.w_prime.as_ref()
    }
}

fn draw_word(mixture: &[f64], rng: &mut ChaCha8Rng) -> u32 {
    let u: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, &p) in mixture.iter().enumerate() {
        acc += p;
        if u < acc {
            return i as u32;
        }
    }
    mixture.len() as u32 - 1
}

/// Generates `n_pairs` labeled pairs; seeded by `gen_cfg.seed` (document
/// lengths and the word model follow `gen_cfg` as in corpus generation).
///
/// Pairs are independent across indices, each on its own RNG stream, so the
/// output is identical regardless of thread count.
pub fn make_pairs(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    t: usize,
    n_pairs: usize,
    gen_cfg: &GenConfig,
) -> Result<Vec<ContrastivePair>, ContrastiveError> {
    if t == 0 {
        return Err(config_err("continuation length t must be at least 1"));
    }
    if n_pairs == 0 {
        return Err(config_err("n_pairs must be at least 1"));
    }
    let k = a.num_topics();
    let prepared = PreparedPrior::new(prior, k)?;
    let seed = derive_seed(gen_cfg.seed, "pairs");
    (0..n_pairs)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(seed, i as u64);
            let mut w_buf = vec![0.0; k];
            let mut scratch = Vec::new();
            prepared.sample_into(&mut rng, &mut w_buf, &mut scratch)?;
            let w = TopicProportions::new(w_buf.clone())?;
            let x = sample_document(a, &w, gen_cfg, &mut rng)?;
            let label = rng.gen_bool(0.5);
            let (source_w, w_prime) = if label {
                (w, None)
            } else {
                let mut w_prime_buf = vec![0.0; k];
                for _ in 0..MAX_NEGATIVE_RESAMPLES {
                    prepared.sample_into(&mut rng, &mut w_prime_buf, &mut scratch)?;
                    if w_prime_buf != w_buf {
                        break;
                    }
                }
                let wp = TopicProportions::new(w_prime_buf)?;
                (wp.clone(), Some(wp))
            };
            let mixture = a.word_distribution(&source_w)?;
            let x_prime: Vec<u32> = (0..t).map(|_| draw_word(&mixture, &mut rng)).collect();
            Ok(ContrastivePair { x, x_prime, label, w_prime })
        })
        .collect()
}

/// Sigmoid classifier over `(document, continuation)` pairs.
///
/// The input encoding is the length-normalized document counts followed by
/// `t` one-hot vocabulary blocks for the continuation words, so the
/// classifier is bag-of-words in `x` and order-aware in `x′` only through
/// which block each word occupies.
#[derive(Debug, Clone, PartialEq)]
pub struct PairClassifier {
    core: MlpCore,
    vocab: usize,
    t: usize,
}

impl PairClassifier {
    pub fn new(
        vocab: usize,
        t: usize,
        width: usize,
        n_blocks: usize,
        seed: u64,
    ) -> Result<Self, ContrastiveError> {
        if vocab == 0 || width == 0 {
            return Err(config_err("vocab and width must be positive"));
        }
        if t == 0 {
            return Err(config_err("continuation length t must be at least 1"));
        }
        let in_dim = vocab
            .checked_mul(1 + t)
            .ok_or_else(|| config_err("input dimension V(1 + t) overflows"))?;
        let dims = MlpDims { in_dim, width, n_blocks, out_dim: 1 };
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

    pub fn param_count(&self) -> usize {
        self.core.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.core.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.core.params
    }

    fn encode_into(
        &self,
        x_counts: &[f64],
        x_prime: &[u32],
        out: &mut [f64],
    ) -> Result<(), ContrastiveError> {
        let v = self.vocab;
        if x_counts.len() != v {
            return Err(shape_err(format!(
                "document counts have {} entries, classifier vocabulary is {v}",
                x_counts.len()
            )));
        }
        if x_prime.len() != self.t {
            return Err(shape_err(format!(
                "continuation has {} words, classifier expects t = {}",
                x_prime.len(),
                self.t
            )));
        }
        debug_assert_eq!(out.len(), v * (1 + self.t));
        out.fill(0.0);
        let sum: f64 = x_counts.iter().sum();
        if sum > 0.0 {
            for (o, &c) in out[..v].iter_mut().zip(x_counts) {
                *o = c / sum;
            }
        } else {
            out[..v].copy_from_slice(x_counts);
        }
        for (slot, &word) in x_prime.iter().enumerate() {
            if word as usize >= v {
                return Err(ContrastiveError::Gen(GenError::WordOutOfRange {
                    word,
                    vocab: v as u32,
                }));
            }
            out[v * (1 + slot) + word as usize] = 1.0;
        }
        Ok(())
    }

    /// Predicted probability that `x_prime` continues `x_counts`'s topic
    /// mixture; strictly inside `(0, 1)` by the sigmoid.
    pub fn forward(&self, x_counts: &[f64], x_prime: &[u32]) -> Result<f64, ContrastiveError> {
        let mut input = vec![0.0; self.vocab * (1 + self.t)];
        self.encode_into(x_counts, x_prime, &mut input)?;
        let cache = self.core.forward(&input, 1);
        let logit = cache.logits[0];
        if !logit.is_finite() {
            return Err(ContrastiveError::ModelCorrupt { context: "forward logit".into() });
        }
        Ok(sigmoid(logit))
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Mean squared loss `(f − y)²` over pairs and its parameter gradient.
pub fn pair_loss_and_grad(
    clf: &PairClassifier,
    pairs: &[ContrastivePair],
) -> Result<(f64, Vec<f64>), ContrastiveError> {
    if pairs.is_empty() {
        return Err(config_err("pair_loss_and_grad needs at least one pair"));
    }
    let (loss, grads) = pair_pass(clf, pairs, true)?;
    Ok((loss, grads.expect("gradients requested")))
}

/// Mean squared loss over pairs, forward only.
pub fn pair_loss(
    clf: &PairClassifier,
    pairs: &[ContrastivePair],
) -> Result<f64, ContrastiveError> {
    if pairs.is_empty() {
        return Err(config_err("pair_loss needs at least one pair"));
    }
    Ok(pair_pass(clf, pairs, false)?.0)
}

fn pair_pass(
    clf: &PairClassifier,
    pairs: &[ContrastivePair],
    want_grads: bool,
) -> Result<(f64, Option<Vec<f64>>), ContrastiveError> {
    let in_dim = clf.vocab * (1 + clf.t);
    let batch = pairs.len();
    let mut x = vec![0.0; batch * in_dim];
    for (row, pair) in pairs.iter().enumerate() {
        clf.encode_into(
            &pair.x.counts_dense(),
            &pair.x_prime,
            &mut x[row * in_dim..(row + 1) * in_dim],
        )?;
    }
    let cache = clf.core.forward(&x, batch);
    let inv = 1.0 / batch as f64;
    let mut loss = 0.0;
    let mut dlogits = want_grads.then(|| vec![0.0; batch]);
    for (row, pair) in pairs.iter().enumerate() {
        let logit = cache.logits[row];
        if !logit.is_finite() {
            return Err(ContrastiveError::ModelCorrupt { context: "batch logits".into() });
        }
        let p = sigmoid(logit);
        let y = if pair.label { 1.0 } else { 0.0 };
        let err = p - y;
        loss += err * err * inv;
        if let Some(dl) = dlogits.as_mut() {
            dl[row] = 2.0 * err * p * (1.0 - p) * inv;
        }
    }
    let grads = dlogits.map(|dl| clf.core.backward(&cache, &dl));
    Ok((loss, grads))
}

enum PairSource {
    /// Train on a fixed pair list (10% held out for validation).
    Fixed,
    /// Fresh pairs every `resample_every` epochs, validation pairs fixed.
    Resampled { a: TopicWordMatrix, prior: PriorSpec, gen_cfg: GenConfig, per_round: usize },
}

/// Incremental contrastive trainer; the schedule (AMSGrad, plateau halving,
/// divergence detection) matches [`crate::reconstruct::Trainer`], with the
/// squared pair loss in place of cross-entropy. `cfg.targets_per_doc` is
/// unused here.
pub struct ContrastiveTrainer {
    clf: PairClassifier,
    opt: AmsGrad,
    cfg: TrainConfig,
    source: PairSource,
    train_pairs: Vec<ContrastivePair>,
    val_pairs: Vec<ContrastivePair>,
    round: Option<usize>,
    epoch: usize,
    lr: f64,
    best_val: f64,
    since_best: usize,
    initial_loss: Option<f64>,
    diverged_streak: usize,
    history: Vec<EpochStats>,
}

impl ContrastiveTrainer {
    fn base(clf: PairClassifier, cfg: TrainConfig, source: PairSource) -> Self {
        let opt = AmsGrad::new(clf.param_count(), cfg.beta1, cfg.beta2, cfg.eps);
        let lr = cfg.learning_rate;
        Self {
            clf,
            opt,
            lr,
            best_val: f64::INFINITY,
            since_best: 0,
            initial_loss: None,
            diverged_streak: 0,
            epoch: 0,
            train_pairs: Vec::new(),
            val_pairs: Vec::new(),
            round: None,
            history: Vec::new(),
            cfg,
            source,
        }
    }

    fn check_pair_shapes(
        clf: &PairClassifier,
        pairs: &[ContrastivePair],
    ) -> Result<(), ContrastiveError> {
        for pair in pairs {
            if pair.x.vocab_size() as usize != clf.vocab {
                return Err(shape_err(format!(
                    "pair vocabulary {} vs classifier V = {}",
                    pair.x.vocab_size(),
                    clf.vocab
                )));
            }
            if pair.x_prime.len() != clf.t {
                return Err(shape_err(format!(
                    "pair continuation length {} vs classifier t = {}",
                    pair.x_prime.len(),
                    clf.t
                )));
            }
        }
        Ok(())
    }

    /// Trains on a fixed pair list. A deterministic shuffle holds out 10%
    /// of the pairs for validation; lists too small to split (under 10
    /// pairs) validate on the training pairs themselves.
    pub fn from_pairs(
        clf: PairClassifier,
        pairs: Vec<ContrastivePair>,
        cfg: TrainConfig,
    ) -> Result<Self, ContrastiveError> {
        validate_train_config(&cfg)?;
        if pairs.is_empty() {
            return Err(config_err("training needs at least one pair"));
        }
        Self::check_pair_shapes(&clf, &pairs)?;
        let mut trainer = Self::base(clf, cfg, PairSource::Fixed);
        let mut pairs = pairs;
        let mut rng = stream_rng(derive_seed(trainer.cfg.seed, "val-split"), 0);
        for i in (1..pairs.len()).rev() {
            let j = rng.gen_range(0..=i);
            pairs.swap(i, j);
        }
        let val_count = pairs.len() / 10;
        if val_count == 0 {
            trainer.val_pairs = pairs.clone();
            trainer.train_pairs = pairs;
        } else {
            trainer.val_pairs = pairs.split_off(pairs.len() - val_count);
            trainer.train_pairs = pairs;
        }
        Ok(trainer)
    }

    /// Trains on `per_round` fresh pairs every `cfg.resample_every` epochs,
    /// against a fixed validation set of [`VALIDATION_PAIRS`] pairs.
    pub fn resampled(
        clf: PairClassifier,
        a: &TopicWordMatrix,
        prior: &PriorSpec,
        gen_cfg: &GenConfig,
        per_round: usize,
        cfg: TrainConfig,
    ) -> Result<Self, ContrastiveError> {
        validate_train_config(&cfg)?;
        if per_round == 0 {
            return Err(config_err("per_round must be at least 1"));
        }
        if a.vocab_size() != clf.vocab {
            return Err(shape_err(format!(
                "classifier vocabulary {} vs matrix V = {}",
                clf.vocab,
                a.vocab_size()
            )));
        }
        let t = clf.t;
        let seed = cfg.seed;
        let mut trainer = Self::base(
            clf,
            cfg,
            PairSource::Resampled {
                a: a.clone(),
                prior: prior.clone(),
                gen_cfg: gen_cfg.clone(),
                per_round,
            },
        );
        let val_cfg = GenConfig { seed: derive_seed(seed, "validation"), ..gen_cfg.clone() };
        trainer.val_pairs = make_pairs(a, prior, t, VALIDATION_PAIRS, &val_cfg)?;
        Ok(trainer)
    }

    pub fn classifier(&self) -> &PairClassifier {
        &self.clf
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn learning_rate(&self) -> f64 {
        self.lr
    }

    /// Per-epoch records for the epochs run by this instance.
    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    pub fn run_epoch(&mut self) -> Result<EpochStats, ContrastiveError> {
        if let PairSource::Resampled { a, prior, gen_cfg, per_round } = &self.source {
            let round = self.epoch / self.cfg.resample_every;
            if self.round != Some(round) {
                let round_cfg = GenConfig {
                    seed: derive_seed_indexed(self.cfg.seed, "round", round as u64),
                    ..gen_cfg.clone()
                };
                self.train_pairs = make_pairs(a, prior, self.clf.t, *per_round, &round_cfg)?;
                self.round = Some(round);
            }
        }
        let order = {
            let mut order: Vec<usize> = (0..self.train_pairs.len()).collect();
            let mut rng =
                stream_rng(derive_seed_indexed(self.cfg.seed, "shuffle", self.epoch as u64), 0);
            for i in (1..order.len()).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            order
        };

        let lr_used = self.lr;
        let mut seen = 0usize;
        let mut loss_acc = 0.0;
        let mut batch: Vec<ContrastivePair> = Vec::with_capacity(self.cfg.batch_size);
        for chunk in order.chunks(self.cfg.batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| self.train_pairs[i].clone()));
            let (loss, grads) = pair_loss_and_grad(&self.clf, &batch)?;
            if self.initial_loss.is_none() {
                self.initial_loss = Some(loss);
            }
            loss_acc += loss * batch.len() as f64;
            seen += batch.len();
            self.opt.step(&mut self.clf.core.params, &grads, lr_used, self.cfg.weight_decay);
        }
        let train_loss = loss_acc / seen as f64;

        let mut val_acc = 0.0;
        let mut val_seen = 0usize;
        for chunk in self.val_pairs.chunks(self.cfg.batch_size) {
            val_acc += pair_loss(&self.clf, chunk)? * chunk.len() as f64;
            val_seen += chunk.len();
        }
        let val_loss = val_acc / val_seen as f64;

        self.epoch += 1;
        let stats = EpochStats { epoch: self.epoch, train_loss, val_loss, lr: lr_used };
        self.history.push(stats.clone());
        let initial = self.initial_loss.expect("set by the first batch");
        if train_loss > 10.0 * initial {
            self.diverged_streak += 1;
            if self.diverged_streak >= 5 {
                return Err(ContrastiveError::Diverged {
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

    /// Serializable snapshot of optimizer and schedule state.
    pub fn state(&self) -> ContrastiveTrainerState {
        ContrastiveTrainerState(CoreTrainerState {
            epoch: self.epoch as u64,
            lr: self.lr,
            best_val: self.best_val,
            since_best: self.since_best as u64,
            initial_loss: self.initial_loss.unwrap_or(f64::NAN),
            diverged_streak: self.diverged_streak as u64,
            opt: self.opt.clone(),
        })
    }

    /// Adopts checkpointed state; build the trainer with the same
    /// constructor arguments first, then continue epoch by epoch — the data
    /// pipeline depends only on `(seed, epoch)`, so the resumed run matches
    /// the uninterrupted one bit for bit.
    pub fn with_state(mut self, state: ContrastiveTrainerState) -> Result<Self, ContrastiveError> {
        let s = state.0;
        if s.opt.m.len() != self.clf.param_count() {
            return Err(ContrastiveError::CheckpointFormat {
                context: format!(
                    "optimizer state has {} entries, classifier has {} parameters",
                    s.opt.m.len(),
                    self.clf.param_count()
                ),
            });
        }
        self.epoch = s.epoch as usize;
        self.lr = s.lr;
        self.best_val = s.best_val;
        self.since_best = s.since_best as usize;
        self.initial_loss = if s.initial_loss.is_nan() { None } else { Some(s.initial_loss) };
        self.diverged_streak = s.diverged_streak as usize;
        self.opt = s.opt;
        Ok(self)
    }
}

fn validate_train_config(cfg: &TrainConfig) -> Result<(), ContrastiveError> {
    if cfg.batch_size == 0 {
        return Err(config_err("batch_size must be positive"));
    }
    if !(cfg.learning_rate.is_finite() && cfg.learning_rate > 0.0) {
        return Err(config_err("learning_rate must be positive"));
    }
    if cfg.lr_halve_patience == 0 {
        return Err(config_err("lr_halve_patience must be positive"));
    }
    if cfg.resample_every == 0 {
        return Err(config_err("resample_every must be positive"));
    }
    if !(cfg.weight_decay.is_finite() && cfg.weight_decay >= 0.0) {
        return Err(config_err("weight_decay must be nonnegative"));
    }
    Ok(())
}

/// Opaque trainer state for checkpointing (see [`ContrastiveTrainer::state`]).
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveTrainerState(CoreTrainerState);

/// A finished contrastive training run.
#[derive(Debug)]
pub struct ContrastiveOutcome {
    pub classifier: PairClassifier,
    pub history: Vec<EpochStats>,
}

/// Trains on a fixed pair list for `cfg.epochs` epochs.
pub fn train_contrastive(
    clf: PairClassifier,
    pairs: Vec<ContrastivePair>,
    cfg: TrainConfig,
) -> Result<ContrastiveOutcome, ContrastiveError> {
    let epochs = cfg.epochs;
    let mut trainer = ContrastiveTrainer::from_pairs(clf, pairs, cfg)?;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(trainer.run_epoch()?);
    }
    Ok(ContrastiveOutcome { classifier: trainer.clf, history })
}

/// Trains with a fresh pair corpus every `cfg.resample_every` epochs.
pub fn train_contrastive_resampled(
    clf: PairClassifier,
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    gen_cfg: &GenConfig,
    per_round: usize,
    cfg: TrainConfig,
) -> Result<ContrastiveOutcome, ContrastiveError> {
    let epochs = cfg.epochs;
    let mut trainer = ContrastiveTrainer::resampled(clf, a, prior, gen_cfg, per_round, cfg)?;
    let mut history = Vec::with_capacity(epochs);
    for _ in 0..epochs {
        history.push(trainer.run_epoch()?);
    }
    Ok(ContrastiveOutcome { classifier: trainer.clf, history })
}

/// Odds map `g = f/(1 − f)` with `f` clamped to `[clamp, 1 − clamp]`.
///
/// Strictly monotone on the clamped interval; `clamp` must lie in `(0, ½)`
/// (the default used throughout is [`DEFAULT_G_CLAMP`]).
pub fn g_transform(f_value: f64, clamp: f64) -> f64 {
    assert!(clamp > 0.0 && clamp < 0.5, "clamp must lie in (0, 0.5), got {clamp}");
    let f = f_value.clamp(clamp, 1.0 - clamp);
    f / (1.0 - f)
}

/// A set of `m` distinct landmark tuples with strictly positive marginals
/// `P(l_i)` and the matrix `Ã` whose row `i` is the Kronecker-lifted word
/// row for tuple `l_i` (so `E[g] `-style recovery reads
/// `vec(W_post) = Ã† · diag(marginals) · g`).
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSet {
    landmarks: Vec<Vec<u32>>,
    marginals: Vec<f64>,
    atilde: Matrix,
}

impl LandmarkSet {
    pub fn m(&self) -> usize {
        self.landmarks.len()
    }

    pub fn t(&self) -> usize {
        self.landmarks[0].len()
    }

    pub fn landmarks(&self) -> &[Vec<u32>] {
        &self.landmarks
    }

    pub fn marginals(&self) -> &[f64] {
        &self.marginals
    }

    /// `m × K^t` matrix of lifted word rows.
    pub fn atilde(&self) -> &Matrix {
        &self.atilde
    }
}

fn enumerate_tuples(v: usize, t: usize) -> Vec<Vec<u32>> {
    let mut out = Vec::new();
    let mut current = vec![0u32; t];
    loop {
        out.push(current.clone());
        let mut slot = t;
        loop {
            if slot == 0 {
                return out;
            }
            slot -= 1;
            current[slot] += 1;
            if (current[slot] as usize) < v {
                break;
            }
            current[slot] = 0;
        }
    }
}

/// Samples `m` distinct landmark tuples from the model's own `t`-word
/// marginal (draw `w` from the prior, then `t` words from `Aw`), computes
/// each marginal analytically as `Ã[l]ᵀ vec(E_prior[w^{⊗t}])`, and verifies
/// `Ã` has full column rank `K^t` whenever `m ≥ K^t`, resampling up to 10
/// times before reporting rank failure. `m = V^t` enumerates the whole
/// tuple space instead of sampling.
///
/// `cfg` controls the prior-moment evaluation (exact for pure/LDA priors,
/// self-normalized importance sampling otherwise).
pub fn build_landmarks(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    t: usize,
    m: usize,
    cfg: &OracleConfig,
    seed: u64,
) -> Result<LandmarkSet, ContrastiveError> {
    if t == 0 {
        return Err(config_err("landmark tuple length t must be at least 1"));
    }
    if m == 0 {
        return Err(config_err("landmark count m must be at least 1"));
    }
    let v = a.vocab_size();
    let k = a.num_topics();
    let space = (v as u128)
        .checked_pow(t as u32)
        .ok_or_else(|| config_err("tuple space V^t overflows"))?;
    if m as u128 > space {
        return Err(config_err(format!("m = {m} exceeds the tuple space V^t = {space}")));
    }
    let kt = k
        .checked_pow(t as u32)
        .ok_or_else(|| config_err("landmark recovery dimension K^t overflows"))?;
    let prior_flat = prior_moment_tensor(prior, k, t, cfg)?.tensor;
    let prepared = PreparedPrior::new(prior, k)?;

    let mut last_needed = kt;
    for attempt in 0..MAX_LANDMARK_ATTEMPTS {
        let landmarks = if m as u128 == space {
            enumerate_tuples(v, t)
        } else {
            let mut rng = stream_rng(derive_seed(seed, "landmarks"), attempt as u64);
            sample_distinct_tuples(a, &prepared, prior_flat.as_slice(), t, m, space, &mut rng)?
        };
        let mut marginals = Vec::with_capacity(m);
        let mut rows = Vec::with_capacity(m * kt);
        let mut degenerate = false;
        for tuple in &landmarks {
            let row = atilde_row(a, tuple)?;
            let p = dot(&row, prior_flat.as_slice());
            if !(p > 0.0) {
                degenerate = true;
                break;
            }
            marginals.push(p);
            rows.extend_from_slice(&row);
        }
        if degenerate {
            if m as u128 == space {
                return Err(ContrastiveError::Oracle(OracleError::DegenerateLandmark {
                    context: "full tuple enumeration contains a zero-marginal tuple".into(),
                }));
            }
            continue;
        }
        let atilde = Matrix::new(m, kt, rows)?;
        if m >= kt {
            let decomp = svd(&atilde)?;
            let top = decomp.sigma.first().copied().unwrap_or(0.0);
            let rank = decomp.sigma.iter().filter(|&&s| s > top * DEFAULT_RANK_TOL).count();
            if rank < kt {
                last_needed = kt;
                continue;
            }
        }
        return Ok(LandmarkSet { landmarks, marginals, atilde });
    }
    Err(ContrastiveError::RankDeficientLandmarks {
        attempts: MAX_LANDMARK_ATTEMPTS,
        needed: last_needed,
    })
}

/// Rejection-samples distinct tuples from the model marginal; if rejection
/// stalls (mass concentrated on tuples already drawn), finishes with an
/// exact weighted draw over the remaining tuples, which has the same
/// distribution as rejection-until-new.
fn sample_distinct_tuples(
    a: &TopicWordMatrix,
    prepared: &PreparedPrior,
    prior_flat: &[f64],
    t: usize,
    m: usize,
    space: u128,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<u32>>, ContrastiveError> {
    let k = a.num_topics();
    let mut seen: HashSet<Vec<u32>> = HashSet::with_capacity(m);
    let mut landmarks: Vec<Vec<u32>> = Vec::with_capacity(m);
    let mut w_buf = vec![0.0; k];
    let mut scratch = Vec::new();
    let cap = 200 * m + 1000;
    for _ in 0..cap {
        if landmarks.len() == m {
            break;
        }
        prepared.sample_into(rng, &mut w_buf, &mut scratch)?;
        let mixture = a.matrix().matvec(&w_buf)?;
        let tuple: Vec<u32> = (0..t).map(|_| draw_word(&mixture, rng)).collect();
        if seen.insert(tuple.clone()) {
            landmarks.push(tuple);
        }
    }
    if landmarks.len() < m {
        if space > MAX_ENUMERABLE_TUPLES {
            return Err(config_err(format!(
                "landmark sampling stalled at {} of {m} tuples on a space too large to \
                 enumerate (V^t = {space})",
                landmarks.len()
            )));
        }
        // The field of candidates is small; draw the remainder without
        // replacement, weighted by the exact tuple probability
        // Ã[l]ᵀ vec(E_prior[w^{⊗t}]) — distributionally the same as
        // continuing to reject, but guaranteed to terminate.
        let all = enumerate_tuples(a.vocab_size(), t);
        let mut weights: Vec<f64> = Vec::with_capacity(all.len());
        for tuple in &all {
            let row = atilde_row(a, tuple)?;
            weights.push(dot(&row, prior_flat).max(0.0));
        }
        for (tuple, weight) in all.iter().zip(weights.iter_mut()) {
            if seen.contains(tuple) {
                *weight = 0.0;
            }
        }
        while landmarks.len() < m {
            let total: f64 = weights.iter().sum();
            if !(total > 0.0) {
                return Err(config_err(
                    "landmark sampling exhausted the positive-probability tuples",
                ));
            }
            let mut u = rng.gen::<f64>() * total;
            let mut chosen = all.len() - 1;
            for (i, &wgt) in weights.iter().enumerate() {
                u -= wgt;
                if u < 0.0 && wgt > 0.0 {
                    chosen = i;
                    break;
                }
            }
            weights[chosen] = 0.0;
            landmarks.push(all[chosen].clone());
        }
    }
    Ok(landmarks)
}

/// The odds representation `g(x, {l_i})` of one document.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkRepresentation {
    values: Vec<f64>,
}

impl LandmarkRepresentation {
    pub fn new(values: Vec<f64>) -> Result<Self, ContrastiveError> {
        if values.is_empty() {
            return Err(config_err("empty landmark representation"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(ContrastiveError::ModelCorrupt {
                context: "landmark representation".into(),
            });
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Evaluates the trained classifier's odds against every landmark.
pub fn landmark_representation(
    clf: &PairClassifier,
    lm: &LandmarkSet,
    x_counts: &[f64],
    clamp: f64,
) -> Result<LandmarkRepresentation, ContrastiveError> {
    let mut values = Vec::with_capacity(lm.m());
    for tuple in lm.landmarks() {
        let f = clf.forward(x_counts, tuple)?;
        values.push(g_transform(f, clamp));
    }
    LandmarkRepresentation::new(values)
}

/// The exact odds `g(x, l) = P(l|x)/P(l)` from the posterior oracle, used
/// to validate the recovery path independently of any trained classifier.
pub fn ideal_landmark_representation(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    lm: &LandmarkSet,
    cfg: &OracleConfig,
) -> Result<LandmarkRepresentation, ContrastiveError> {
    let mut values = Vec::with_capacity(lm.m());
    for tuple in lm.landmarks() {
        values.push(ideal_contrastive_g(a, prior, x, tuple, cfg)?);
    }
    LandmarkRepresentation::new(values)
}

/// Recovers the posterior moment tensor from the landmark representation:
/// `vec(W_post) = Ã† · diag(P(l_i)) · g`, reshaped to a `K^{⊗t}` tensor and
/// symmetrized for `t ≥ 2` (the population tensor is symmetric; averaging
/// over index orderings strips antisymmetric estimation noise).
pub fn recover_from_landmarks(
    lm: &LandmarkSet,
    g: &LandmarkRepresentation,
    a: &TopicWordMatrix,
) -> Result<MomentTensor, ContrastiveError> {
    if g.len() != lm.m() {
        return Err(shape_err(format!(
            "representation has {} entries, landmark set has m = {}",
            g.len(),
            lm.m()
        )));
    }
    let k = a.num_topics();
    let t = lm.t();
    let kt = k
        .checked_pow(t as u32)
        .ok_or_else(|| config_err("landmark recovery dimension K^t overflows"))?;
    if lm.m() < kt {
        return Err(config_err(format!(
            "recovery needs m >= K^t = {kt} landmarks, got m = {}",
            lm.m()
        )));
    }
    let pinv = pinv_left(lm.atilde(), DEFAULT_RANK_TOL)?;
    let weighted: Vec<f64> =
        lm.marginals().iter().zip(g.values()).map(|(&p, &gv)| p * gv).collect();
    let flat = pinv.matvec(&weighted)?;
    let tensor = MomentTensor::from_vec(t, k, flat)?;
    Ok(if t >= 2 { tensor.symmetrize() } else { tensor })
}

/// Ridge-regularized least squares in representation space:
/// `(GᵀG + ridge·I) θ = Gᵀ ỹ`, one row of `G` per document.
///
/// With the downstream documents doubling as landmarks, `G_ij = g(x_i, x_j)`
/// is square and this is exactly the kernel regression reading of the
/// downstream task; `ridge = 0` is permitted and reports a conditioning
/// error when the normal equations are singular.
pub fn kernel_regression(
    g_matrix: &Matrix,
    targets: &[f64],
    ridge: f64,
) -> Result<Vec<f64>, ContrastiveError> {
    if targets.len() != g_matrix.rows() {
        return Err(shape_err(format!(
            "{} targets for a {}-row representation matrix",
            targets.len(),
            g_matrix.rows()
        )));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(config_err("ridge must be finite and nonnegative"));
    }
    let mut normal = g_matrix.matmul_tn(g_matrix)?;
    for i in 0..normal.rows() {
        let d = normal.get(i, i) + ridge;
        normal.set(i, i, d);
    }
    let rhs = g_matrix.matvec_t(targets)?;
    solve_spd(&normal, &rhs).map_err(|e| {
        if ridge == 0.0 {
            ContrastiveError::Conditioning { context: e.to_string() }
        } else {
            ContrastiveError::Linalg(e)
        }
    })
}

/// Writes a landmark set as CSV: `landmark_id,w0..w{t-1},marginal`.
pub fn write_landmarks_csv(w: &mut impl Write, lm: &LandmarkSet) -> std::io::Result<()> {
    write!(w, "landmark_id")?;
    for slot in 0..lm.t() {
        write!(w, ",w{slot}")?;
    }
    writeln!(w, ",marginal")?;
    for (i, (tuple, marginal)) in lm.landmarks().iter().zip(lm.marginals()).enumerate() {
        write!(w, "{i}")?;
        for &word in tuple {
            write!(w, ",{word}")?;
        }
        writeln!(w, ",{marginal}")?;
    }
    Ok(())
}

/// Reads a landmark CSV back, recomputing `Ã` from the topic-word matrix
/// (the lifted rows are derived data and are not serialized).
pub fn read_landmarks_csv(
    text: &str,
    a: &TopicWordMatrix,
) -> Result<LandmarkSet, ContrastiveError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ContrastiveError::CheckpointFormat {
        context: "empty landmark CSV".into(),
    })?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "landmark_id" || *cols.last().unwrap() != "marginal" {
        return Err(ContrastiveError::CheckpointFormat {
            context: format!("unexpected landmark header '{header}'"),
        });
    }
    let t = cols.len() - 2;
    let k = a.num_topics();
    let kt = k
        .checked_pow(t as u32)
        .ok_or_else(|| config_err("landmark recovery dimension K^t overflows"))?;
    let mut landmarks = Vec::new();
    let mut marginals = Vec::new();
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != t + 2 {
            return Err(ContrastiveError::CheckpointFormat {
                context: format!("landmark line {} has {} fields", lineno + 2, fields.len()),
            });
        }
        let mut tuple = Vec::with_capacity(t);
        for f in &fields[1..=t] {
            tuple.push(f.trim().parse::<u32>().map_err(|e| {
                ContrastiveError::CheckpointFormat {
                    context: format!("landmark line {}: {e}", lineno + 2),
                }
            })?);
        }
        let marginal: f64 = fields[t + 1].trim().parse().map_err(|e| {
            ContrastiveError::CheckpointFormat {
                context: format!("landmark line {}: {e}", lineno + 2),
            }
        })?;
        if !(marginal > 0.0) {
            return Err(ContrastiveError::CheckpointFormat {
                context: format!("landmark line {} has nonpositive marginal", lineno + 2),
            });
        }
        rows.extend_from_slice(&atilde_row(a, &tuple)?);
        landmarks.push(tuple);
        marginals.push(marginal);
    }
    if landmarks.is_empty() {
        return Err(ContrastiveError::CheckpointFormat {
            context: "landmark CSV has no rows".into(),
        });
    }
    let atilde = Matrix::new(landmarks.len(), kt, rows)?;
    Ok(LandmarkSet { landmarks, marginals, atilde })
}

/// Writes representations as CSV: `doc_id,g_1..g_m`.
pub fn write_representations_csv(
    w: &mut impl Write,
    doc_ids: &[usize],
    reps: &[LandmarkRepresentation],
) -> Result<(), ContrastiveError> {
    if doc_ids.len() != reps.len() {
        return Err(shape_err(format!(
            "{} doc ids for {} representations",
            doc_ids.len(),
            reps.len()
        )));
    }
    let m = reps.first().map_or(0, |r| r.len());
    write!(w, "doc_id")?;
    for i in 1..=m {
        write!(w, ",g_{i}")?;
    }
    writeln!(w)?;
    for (id, rep) in doc_ids.iter().zip(reps) {
        if rep.len() != m {
            return Err(shape_err("representations have inconsistent widths"));
        }
        write!(w, "{id}")?;
        for v in rep.values() {
            write!(w, ",{v}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

/// Reads the CSV written by [`write_representations_csv`].
pub fn read_representations_csv(
    text: &str,
) -> Result<(Vec<usize>, Vec<LandmarkRepresentation>), ContrastiveError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| ContrastiveError::CheckpointFormat {
        context: "empty representation CSV".into(),
    })?;
    if !header.starts_with("doc_id,g_1") {
        return Err(ContrastiveError::CheckpointFormat {
            context: format!("unexpected representation header '{header}'"),
        });
    }
    let m = header.split(',').count() - 1;
    let mut doc_ids = Vec::new();
    let mut reps = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != m + 1 {
            return Err(ContrastiveError::CheckpointFormat {
                context: format!(
                    "representation line {} has {} fields, expected {}",
                    lineno + 2,
                    fields.len(),
                    m + 1
                ),
            });
        }
        let bad = |e: std::num::ParseFloatError| ContrastiveError::CheckpointFormat {
            context: format!("representation line {}: {e}", lineno + 2),
        };
        doc_ids.push(fields[0].trim().parse::<usize>().map_err(|e| {
            ContrastiveError::CheckpointFormat {
                context: format!("representation line {}: {e}", lineno + 2),
            }
        })?);
        let values = fields[1..]
            .iter()
            .map(|f| f.trim().parse::<f64>().map_err(bad))
            .collect::<Result<Vec<f64>, _>>()?;
        reps.push(LandmarkRepresentation::new(values)?);
    }
    Ok((doc_ids, reps))
}

/// Writes a classifier checkpoint (same container format as reconstruction
/// checkpoints, tagged with the contrastive kind byte).
pub fn save_classifier_checkpoint(
    path: &Path,
    clf: &PairClassifier,
    k: usize,
    trainer: Option<&ContrastiveTrainerState>,
) -> Result<(), ContrastiveError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_classifier_checkpoint_to(&mut w, clf, k, trainer)?;
    w.flush()?;
    Ok(())
}

/// [`save_classifier_checkpoint`] against any writer.
pub fn write_classifier_checkpoint_to(
    w: &mut impl Write,
    clf: &PairClassifier,
    k: usize,
    trainer: Option<&ContrastiveTrainerState>,
) -> Result<(), ContrastiveError> {
    write_core_checkpoint(
        w,
        CKPT_KIND_CONTRASTIVE,
        clf.vocab as u64,
        k as u64,
        clf.t as u64,
        &clf.core,
        trainer.map(|t| &t.0),
    )?;
    Ok(())
}

/// Loads a classifier checkpoint with the stored `k` and trainer state.
pub fn load_classifier_checkpoint(
    path: &Path,
) -> Result<(PairClassifier, usize, Option<ContrastiveTrainerState>), ContrastiveError> {
    let mut r = BufReader::new(File::open(path)?);
    read_classifier_checkpoint_from(&mut r)
}

/// [`load_classifier_checkpoint`] against any reader.
pub fn read_classifier_checkpoint_from(
    r: &mut impl Read,
) -> Result<(PairClassifier, usize, Option<ContrastiveTrainerState>), ContrastiveError> {
    let ckpt = read_core_checkpoint(r)
        .map_err(|context| ContrastiveError::CheckpointFormat { context })?;
    if ckpt.kind != CKPT_KIND_CONTRASTIVE {
        return Err(ContrastiveError::CheckpointFormat {
            context: format!("expected a contrastive checkpoint, found kind {}", ckpt.kind),
        });
    }
    let vocab = ckpt.vocab as usize;
    let t = ckpt.t as usize;
    if ckpt.core.dims.in_dim != vocab * (1 + t) || ckpt.core.dims.out_dim != 1 {
        return Err(ContrastiveError::CheckpointFormat {
            context: "shape header inconsistent with vocabulary and t".into(),
        });
    }
    let clf = PairClassifier { core: ckpt.core, vocab, t };
    Ok((clf, ckpt.k as usize, ckpt.trainer.map(ContrastiveTrainerState)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::generative::{gen_topic_word_matrix, TopicMatrixKind};
    use crate::oracle::{posterior_moment_tensor, pure_posterior};

    fn gen_cfg(seed: u64) -> GenConfig {
        GenConfig { lambda: 10.0, seed, corpus_size: 1, min_length: 1 }
    }

    fn matrix(k: usize, v: usize, seed: u64) -> TopicWordMatrix {
        gen_topic_word_matrix(TopicMatrixKind::Independent, 1.0, k, v, seed).unwrap()
    }

    #[test]
    fn pairs_have_balanced_labels_and_audit_fields() {
        let a = matrix(3, 10, 1);
        let prior = PriorSpec::Lda { alpha_doc: 1.0 };
        let n = 4000;
        let pairs = make_pairs(&a, &prior, 2, n, &gen_cfg(5)).unwrap();
        assert_eq!(pairs.len(), n);
        let positives = pairs.iter().filter(|p| p.label()).count() as f64;
        let freq = positives / n as f64;
        // Fair coin: 3 standard errors is 3·0.5/√n.
        assert!((freq - 0.5).abs() < 1.5 / (n as f64).sqrt(), "label frequency {freq}");
        for p in &pairs {
            assert_eq!(p.x_prime().len(), 2);
            match (p.label(), p.w_prime()) {
                (true, None) | (false, Some(_)) => {}
                other => panic!("inconsistent pair audit fields: {other:?}"),
            }
        }
    }

    #[test]
    fn negative_pairs_reject_identical_w_on_pure_prior() {
        let a = matrix(2, 8, 2);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 2000, &gen_cfg(7)).unwrap();
        let mut negatives = 0;
        for p in pairs.iter().filter(|p| !p.label()) {
            negatives += 1;
            let w = p.x().proportions().unwrap().as_slice();
            let wp = p.w_prime().unwrap().as_slice();
            assert_ne!(w, wp, "negative pair kept w′ = w");
        }
        assert!(negatives > 800);
    }

    #[test]
    fn degenerate_prior_accepts_equal_w() {
        // K = 1: the prior is a point mass, so no distinct w′ exists; pair
        // generation must still terminate, with w′ = w.
        let a = matrix(1, 6, 3);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 200, &gen_cfg(9)).unwrap();
        for p in pairs.iter().filter(|p| !p.label()) {
            assert_eq!(p.w_prime().unwrap().as_slice(), &[1.0]);
        }
    }

    #[test]
    fn positive_continuations_follow_the_document_mixture() {
        // Pure prior: w is a vertex, so positives draw words from column
        // A_{·,topic}. Bucket by topic and chi-squared each against its
        // column (V − 1 = 5 dof, 0.5% critical value 16.75).
        let a = matrix(2, 6, 4);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 6000, &gen_cfg(11)).unwrap();
        for topic in 0..2 {
            let mut hits = [0usize; 6];
            let mut total = 0usize;
            for p in pairs.iter().filter(|p| p.label()) {
                let w = p.x().proportions().unwrap().as_slice();
                if w[topic] == 1.0 {
                    hits[p.x_prime()[0] as usize] += 1;
                    total += 1;
                }
            }
            assert!(total > 1000);
            let chi2: f64 = (0..6)
                .map(|word| {
                    let expected = a.matrix().get(word, topic) * total as f64;
                    let d = hits[word] as f64 - expected;
                    d * d / expected.max(1e-9)
                })
                .sum();
            assert!(chi2 < 16.75, "topic {topic}: chi2 = {chi2}, hits = {hits:?}");
        }
    }

    #[test]
    fn fresh_classifier_outputs_exactly_half() {
        let clf = PairClassifier::new(6, 1, 8, 2, 5).unwrap();
        let f = clf.forward(&[1.0, 2.0, 0.0, 0.0, 1.0, 0.0], &[3]).unwrap();
        assert_eq!(f, 0.5);
        // Scale invariance of the count block.
        let f2 = clf.forward(&[2.0, 4.0, 0.0, 0.0, 2.0, 0.0], &[3]).unwrap();
        assert_eq!(f, f2);
        // Shape errors.
        assert!(clf.forward(&[1.0; 5], &[3]).is_err());
        assert!(clf.forward(&[1.0; 6], &[3, 4]).is_err());
        assert!(clf.forward(&[1.0; 6], &[9]).is_err());
    }

    #[test]
    fn pair_gradients_match_finite_differences() {
        let a = matrix(2, 6, 6);
        let mut clf = PairClassifier::new(6, 1, 6, 1, 7).unwrap();
        let n_params = clf.param_count();
        for (i, p) in clf.params_mut().iter_mut().enumerate().skip(n_params - 7) {
            *p += (i as f64 * 0.31).cos() * 0.1;
        }
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 6, &gen_cfg(13)).unwrap();
        let (loss, grads) = pair_loss_and_grad(&clf, &pairs).unwrap();
        assert!(loss > 0.0 && loss < 1.0);
        let h = 1e-5;
        for idx in (0..clf.param_count()).step_by(clf.param_count() / 13) {
            let orig = clf.params()[idx];
            clf.params_mut()[idx] = orig + h;
            let up = pair_loss(&clf, &pairs).unwrap();
            clf.params_mut()[idx] = orig - h;
            let down = pair_loss(&clf, &pairs).unwrap();
            clf.params_mut()[idx] = orig;
            let fd = (up - down) / (2.0 * h);
            let denom = grads[idx].abs().max(fd.abs()).max(1e-7);
            assert!(
                ((grads[idx] - fd) / denom).abs() < 1e-4,
                "param {idx}: analytic {} vs fd {fd}",
                grads[idx]
            );
        }
    }

    #[test]
    fn training_beats_the_constant_half_baseline() {
        let a = matrix(2, 8, 8);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 3000, &gen_cfg(15)).unwrap();
        let clf = PairClassifier::new(8, 1, 16, 2, 15).unwrap();
        let cfg = TrainConfig {
            epochs: 10,
            batch_size: 64,
            learning_rate: 3e-3,
            seed: 15,
            ..TrainConfig::default()
        };
        let out1 = train_contrastive(clf.clone(), pairs.clone(), cfg.clone()).unwrap();
        let out2 = train_contrastive(clf, pairs, cfg).unwrap();
        assert_eq!(out1.classifier.params(), out2.classifier.params());
        assert_eq!(out1.history, out2.history);
        let last = out1.history.last().unwrap();
        // A constant f = ½ scores exactly 0.25 on balanced labels.
        assert!(last.val_loss < 0.24, "val loss {}", last.val_loss);
        assert!(last.train_loss < 0.24, "train loss {}", last.train_loss);
    }

    #[test]
    fn degenerate_prior_trains_to_constant_half() {
        // Single topic: labels carry no information, so the square loss is
        // minimized by predicting ½ everywhere.
        let a = matrix(1, 6, 10);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 800, &gen_cfg(17)).unwrap();
        let probe = pairs[0].clone();
        let clf = PairClassifier::new(6, 1, 8, 1, 17).unwrap();
        let cfg = TrainConfig {
            epochs: 8,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 17,
            ..TrainConfig::default()
        };
        let out = train_contrastive(clf, pairs, cfg).unwrap();
        let f = out.classifier.forward(&probe.x().counts_dense(), probe.x_prime()).unwrap();
        assert!((f - 0.5).abs() < 0.05, "trained output {f}");
    }

    #[test]
    fn g_transform_maps_odds() {
        assert!((g_transform(0.5, 1e-6) - 1.0).abs() < 1e-15);
        assert!((g_transform(0.75, 1e-6) - 3.0).abs() < 1e-12);
        // Monotone, and clamping keeps saturated outputs finite.
        assert!(g_transform(0.2, 1e-6) < g_transform(0.3, 1e-6));
        let top = g_transform(1.0, 1e-6);
        assert!(top.is_finite() && top > 9e5);
        assert!(g_transform(0.0, 1e-6) > 0.0);
    }

    #[test]
    #[should_panic(expected = "clamp must lie in (0, 0.5)")]
    fn g_transform_rejects_bad_clamp() {
        g_transform(0.5, 0.7);
    }

    #[test]
    fn full_enumeration_landmarks_cover_the_space() {
        let a = matrix(3, 6, 20);
        let lm = build_landmarks(&a, &PriorSpec::Pure, 1, 6, &OracleConfig::default(), 0).unwrap();
        assert_eq!(lm.m(), 6);
        let mut words: Vec<u32> = lm.landmarks().iter().map(|t| t[0]).collect();
        words.sort_unstable();
        assert_eq!(words, vec![0, 1, 2, 3, 4, 5]);
        // Marginals are a probability distribution over words and match the
        // uniform topic mixture row means.
        let sum: f64 = lm.marginals().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
        for (i, &p) in lm.marginals().iter().enumerate() {
            let word = lm.landmarks()[i][0] as usize;
            let mean: f64 = (0..3).map(|k| a.matrix().get(word, k)).sum::<f64>() / 3.0;
            assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn sampled_landmarks_are_distinct_and_full_rank() {
        let a = matrix(3, 12, 21);
        let lm = build_landmarks(&a, &PriorSpec::Lda { alpha_doc: 1.0 }, 1, 3, &OracleConfig::default(), 1)
            .unwrap();
        assert_eq!(lm.m(), 3);
        let unique: HashSet<&Vec<u32>> = lm.landmarks().iter().collect();
        assert_eq!(unique.len(), 3);
        assert!(lm.marginals().iter().all(|&p| p > 0.0));
        // t = 2: m = K^t = 4 distinct tuples, Ã is 4x4 full rank.
        let a2 = matrix(2, 5, 22);
        let lm2 =
            build_landmarks(&a2, &PriorSpec::Pure, 2, 4, &OracleConfig::default(), 2).unwrap();
        assert_eq!(lm2.m(), 4);
        assert_eq!(lm2.atilde().rows(), 4);
        assert_eq!(lm2.atilde().cols(), 4);
        let decomp = svd(lm2.atilde()).unwrap();
        assert!(decomp.sigma[3] > decomp.sigma[0] * 1e-10);
    }

    #[test]
    fn ideal_g_recovers_the_pure_posterior() {
        let a = matrix(3, 6, 23);
        let cfg = OracleConfig::default();
        let lm = build_landmarks(&a, &PriorSpec::Pure, 1, 3, &cfg, 3).unwrap();
        let x = Document::new(vec![0, 2, 4, 1, 1], 6, None).unwrap();
        let g = ideal_landmark_representation(&a, &PriorSpec::Pure, &x, &lm, &cfg).unwrap();
        let recovered = recover_from_landmarks(&lm, &g, &a).unwrap();
        let exact = pure_posterior(&a, &x).unwrap();
        for (r, e) in recovered.as_slice().iter().zip(exact.as_slice()) {
            assert!((r - e).abs() < 1e-10, "recovered {r} vs exact {e}");
        }
    }

    #[test]
    fn recovery_is_invariant_to_the_landmark_subset() {
        let a = matrix(3, 9, 24);
        let cfg = OracleConfig::default();
        let x = Document::new(vec![1, 7, 3, 3, 8], 9, None).unwrap();
        let mut tensors = Vec::new();
        for seed in [5u64, 6] {
            let lm = build_landmarks(&a, &PriorSpec::Pure, 1, 3, &cfg, seed).unwrap();
            let g = ideal_landmark_representation(&a, &PriorSpec::Pure, &x, &lm, &cfg).unwrap();
            tensors.push(recover_from_landmarks(&lm, &g, &a).unwrap());
        }
        for (u, v) in tensors[0].as_slice().iter().zip(tensors[1].as_slice()) {
            assert!((u - v).abs() < 1e-8, "{u} vs {v}");
        }
    }

    #[test]
    fn empty_document_recovers_the_prior_moment() {
        let a = matrix(2, 7, 25);
        let prior = PriorSpec::Lda { alpha_doc: 2.0 };
        let cfg = OracleConfig::default();
        let lm = build_landmarks(&a, &prior, 1, 2, &cfg, 4).unwrap();
        let x = Document::new(Vec::new(), 7, None).unwrap();
        let g = ideal_landmark_representation(&a, &prior, &x, &lm, &cfg).unwrap();
        // With no words to condition on, g ≡ 1 and recovery returns the
        // prior mean.
        for &v in g.values() {
            assert!((v - 1.0).abs() < 1e-9);
        }
        let recovered = recover_from_landmarks(&lm, &g, &a).unwrap();
        let prior_mean = prior_moment_tensor(&prior, 2, 1, &cfg).unwrap().tensor;
        for (r, e) in recovered.as_slice().iter().zip(prior_mean.as_slice()) {
            assert!((r - e).abs() < 1e-9);
        }
    }

    #[test]
    fn t2_recovery_matches_the_posterior_oracle() {
        let a = matrix(2, 5, 26);
        let cfg = OracleConfig::default();
        let lm = build_landmarks(&a, &PriorSpec::Pure, 2, 4, &cfg, 7).unwrap();
        let x = Document::new(vec![0, 3, 3, 1, 4, 2], 5, None).unwrap();
        let g = ideal_landmark_representation(&a, &PriorSpec::Pure, &x, &lm, &cfg).unwrap();
        let recovered = recover_from_landmarks(&lm, &g, &a).unwrap();
        let oracle = posterior_moment_tensor(&a, &PriorSpec::Pure, &x, 2, &cfg).unwrap().tensor;
        for (r, e) in recovered.as_slice().iter().zip(oracle.as_slice()) {
            assert!((r - e).abs() < 1e-8, "recovered {r} vs oracle {e}");
        }
    }

    #[test]
    fn kernel_regression_identity_and_exact_fit() {
        let eye = Matrix::identity(3);
        let theta = kernel_regression(&eye, &[1.0, -2.0, 0.5], 0.0).unwrap();
        assert!((theta[0] - 1.0).abs() < 1e-12);
        assert!((theta[1] + 2.0).abs() < 1e-12);
        assert!((theta[2] - 0.5).abs() < 1e-12);

        // Exact fit: targets generated by a known coefficient vector.
        let g = Matrix::new(3, 3, vec![1.0, 0.2, 0.1, 0.3, 1.4, 0.0, 0.05, 0.6, 0.9]).unwrap();
        let theta0 = [0.7, -1.1, 0.4];
        let targets = g.matvec(&theta0).unwrap();
        let theta = kernel_regression(&g, &targets, 0.0).unwrap();
        let predictions = g.matvec(&theta).unwrap();
        for (p, y) in predictions.iter().zip(&targets) {
            assert!((p - y).abs() < 1e-10);
        }
    }

    #[test]
    fn kernel_regression_flags_singularity_and_ridge_rescues() {
        // Rank-1 kernel matrix.
        let g = Matrix::new(2, 2, vec![1.0, 2.0, 2.0, 4.0]).unwrap();
        let err = kernel_regression(&g, &[1.0, 2.0], 0.0).unwrap_err();
        assert!(matches!(err, ContrastiveError::Conditioning { .. }), "{err}");
        let theta = kernel_regression(&g, &[1.0, 2.0], 1e-8).unwrap();
        let pred = g.matvec(&theta).unwrap();
        assert!((pred[0] - 1.0).abs() < 1e-3 && (pred[1] - 2.0).abs() < 1e-3);
    }

    #[test]
    fn self_referencing_kernel_interpolates_oracle_targets() {
        // Downstream docs double as landmarks: G_ij = g(x_i, x_j) with the
        // documents' own word lists as the landmark tuples; fitting
        // targets E[w_1 | x_i] and predicting back must interpolate.
        let a = matrix(2, 5, 27);
        let cfg = OracleConfig::default();
        let docs: Vec<Document> = (0..6)
            .map(|i| {
                let words = vec![(i % 5) as u32, ((i + 2) % 5) as u32, ((2 * i + 1) % 5) as u32];
                Document::new(words, 5, None).unwrap()
            })
            .collect();
        let mut g_data = Vec::with_capacity(36);
        for xi in &docs {
            for xj in &docs {
                g_data.push(ideal_contrastive_g(&a, &PriorSpec::Pure, xi, xj.words(), &cfg).unwrap());
            }
        }
        let g = Matrix::new(6, 6, g_data).unwrap();
        let targets: Vec<f64> = docs
            .iter()
            .map(|x| pure_posterior(&a, x).unwrap().as_slice()[0])
            .collect();
        // Ideal g factors through the K-dimensional posterior, so G has
        // rank K = 2 < m and the unregularized normal equations are
        // singular; the targets still lie in G's column space, and a
        // vanishing ridge picks out an exact interpolant.
        let err = kernel_regression(&g, &targets, 0.0).unwrap_err();
        assert!(matches!(err, ContrastiveError::Conditioning { .. }), "{err}");
        let theta = kernel_regression(&g, &targets, 1e-12).unwrap();
        let predictions = g.matvec(&theta).unwrap();
        for (p, y) in predictions.iter().zip(&targets) {
            assert!((p - y).abs() < 1e-6, "prediction {p} vs oracle target {y}");
        }
    }

    #[test]
    fn landmark_csv_round_trips() {
        let a = matrix(2, 5, 28);
        let lm = build_landmarks(&a, &PriorSpec::Pure, 2, 4, &OracleConfig::default(), 8).unwrap();
        let mut buf = Vec::new();
        write_landmarks_csv(&mut buf, &lm).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("landmark_id,w0,w1,marginal\n"));
        let back = read_landmarks_csv(&text, &a).unwrap();
        assert_eq!(back.landmarks(), lm.landmarks());
        for (x, y) in back.marginals().iter().zip(lm.marginals()) {
            assert!((x - y).abs() < 1e-15);
        }
        assert_eq!(back.atilde().as_slice(), lm.atilde().as_slice());
    }

    #[test]
    fn representation_csv_round_trips() {
        let reps = vec![
            LandmarkRepresentation::new(vec![1.0, 0.5, 2.25]).unwrap(),
            LandmarkRepresentation::new(vec![0.125, 3.5, 1.75]).unwrap(),
        ];
        let mut buf = Vec::new();
        write_representations_csv(&mut buf, &[10, 11], &reps).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("doc_id,g_1,g_2,g_3\n"));
        let (ids, back) = read_representations_csv(&text).unwrap();
        assert_eq!(ids, vec![10, 11]);
        assert_eq!(back, reps);
    }

    #[test]
    fn classifier_checkpoint_round_trips_and_rejects_wrong_kind() {
        let clf = PairClassifier::new(6, 2, 8, 2, 30).unwrap();
        let mut buf = Vec::new();
        write_classifier_checkpoint_to(&mut buf, &clf, 3, None).unwrap();
        let (back, k, state) = read_classifier_checkpoint_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, clf);
        assert_eq!(k, 3);
        assert!(state.is_none());

        // A reconstruction checkpoint must be refused.
        let model = crate::reconstruct::MlpModel::new(6, 1, 8, 2, 30).unwrap();
        let mut buf = Vec::new();
        crate::reconstruct::write_checkpoint_to(&mut buf, &model, 3, None).unwrap();
        let err = read_classifier_checkpoint_from(&mut buf.as_slice()).unwrap_err();
        assert!(matches!(err, ContrastiveError::CheckpointFormat { .. }), "{err}");
    }

    #[test]
    fn resumed_contrastive_training_is_bit_identical() {
        let a = matrix(2, 8, 31);
        let pairs = make_pairs(&a, &PriorSpec::Pure, 1, 600, &gen_cfg(19)).unwrap();
        let clf = PairClassifier::new(8, 1, 8, 1, 19).unwrap();
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 64,
            learning_rate: 1e-3,
            seed: 19,
            ..TrainConfig::default()
        };
        let full = train_contrastive(clf.clone(), pairs.clone(), cfg.clone()).unwrap();

        let mut trainer = ContrastiveTrainer::from_pairs(clf, pairs.clone(), cfg.clone()).unwrap();
        let mut history = Vec::new();
        for _ in 0..3 {
            history.push(trainer.run_epoch().unwrap());
        }
        let mut buf = Vec::new();
        write_classifier_checkpoint_to(&mut buf, trainer.classifier(), 2, Some(&trainer.state()))
            .unwrap();
        let (clf_back, _, state) = read_classifier_checkpoint_from(&mut buf.as_slice()).unwrap();
        let mut resumed = ContrastiveTrainer::from_pairs(clf_back, pairs, cfg)
            .unwrap()
            .with_state(state.unwrap())
            .unwrap();
        for _ in 0..3 {
            history.push(resumed.run_epoch().unwrap());
        }
        assert_eq!(history, full.history);
        assert_eq!(resumed.classifier().params(), full.classifier.params());
    }
}
