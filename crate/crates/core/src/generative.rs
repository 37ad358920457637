//! Synthetic corpora from general topic models.
//!
//! A topic model here is a pair `(A, prior)`: a column-stochastic
//! [`TopicWordMatrix`] `A` of shape `V x K` with full column rank, and a
//! [`PriorSpec`] over topic proportions `w` on the `K`-simplex. A document
//! draws `w` once, a length `n ~ Poisson(λ)` (rejected below a minimum), and
//! then `n` words i.i.d. from the mixture `A w`.
//!
//! Four priors cover the benchmark grid:
//!
//! * **Pure**: `w` is a uniformly random vertex `e_k` — every document is
//!   single-topic, and posteriors are exactly enumerable.
//! * **LDA**: `w ~ Dir(α_doc / K · 1)`. Note the division: `alpha_doc` is a
//!   total concentration, matching the usual `Dir(1/K)` default at
//!   `alpha_doc = 1`.
//! * **CTM** (correlated topic model): `w = softmax(η)`, `η ~ N(μ, Σ)`. The
//!   benchmark covariance comes from [`ctm_covariance`], which correlates
//!   topic pairs inside groups of four.
//! * **PAM** (Pachinko allocation): super-proportions `θ ~ Dir(α_super · 1)`
//!   over `Ks` super-topics, per-super-topic sub-proportions
//!   `φ⁽ˢ⁾ ~ Dir(α_sub · 1)` over the `K` topics, and `w = Σ_s θ_s φ⁽ˢ⁾`.
//!   Here `alpha_super` and `alpha_sub` are symmetric per-component
//!   parameters used as-is (no division), so the benchmark values are
//!   `alpha_super = 1/Ks` and `alpha_sub = 30`.
//!
//! Everything is deterministic given the seeds in [`GenConfig`]: document
//! `i` draws from stream `i` of the corpus seed, so corpora are reproducible
//! and order-preserving regardless of how the loop is scheduled.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::distributions::Distribution;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::linalg::{cholesky, svd, LinalgError, Matrix, DEFAULT_RANK_TOL};
use crate::rng::stream_rng;
use crate::util::softmax_in_place;

/// Tolerance for simplex membership checks (column sums, proportions).
pub const SIMPLEX_TOL: f64 = 1e-9;

/// Hard cap on Poisson length rejections before giving up.
const MAX_LENGTH_REJECTIONS: usize = 1_000_000;

/// Attempts at re-drawing a degenerate Dirichlet sample.
const MAX_DIRICHLET_RETRIES: usize = 100;

/// Attempts at re-generating a topic-word matrix that fails the rank check.
const MAX_RANK_RETRIES: usize = 10;

/// Errors from corpus synthesis and (de)serialization.
#[derive(Debug, Error)]
pub enum GenError {
    /// A configuration or prior parameter is out of range.
    #[error("invalid parameter: {context}")]
    InvalidParam { context: String },
    /// Poisson length rejection sampling hit its cap.
    #[error("document length sampling exceeded {attempts} rejections below the minimum length")]
    LengthRejectionExhausted { attempts: usize },
    /// Dirichlet sampling kept producing numerically degenerate draws.
    #[error("dirichlet sampling produced {attempts} degenerate draws in a row")]
    DegenerateDirichlet { attempts: usize },
    /// The grouped construction needs `K` divisible by 4 and `V >= 8`.
    #[error("grouped topic matrix needs K divisible by 4 and V >= 8, got K={k}, V={v}")]
    GroupedShape { k: usize, v: usize },
    /// Freshly sampled topic-word matrices kept failing the rank check.
    #[error("topic-word matrix failed the rank-{k} check in {attempts} consecutive samples")]
    RankRetryExhausted { k: usize, attempts: usize },
    /// A word id is outside the vocabulary.
    #[error("word id {word} out of range for vocabulary of size {vocab}")]
    WordOutOfRange { word: u32, vocab: u32 },
    /// Corpus file parsing failed.
    #[error("corpus parse error at line {line}: {reason}")]
    Parse { line: usize, reason: String },
    /// Underlying linear algebra failure (rank checks, Cholesky).
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    /// File I/O failure.
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn param_err(context: impl Into<String>) -> GenError {
    GenError::InvalidParam { context: context.into() }
}

/// Column-stochastic `V x K` topic-word matrix with full column rank.
///
/// Column `k` is the word distribution of topic `k`. Construction verifies
/// column sums (within [`SIMPLEX_TOL`]), nonnegativity, and `rank(A) = K`
/// (singular values above `1e-10 · σ_max`), because every downstream
/// recovery guarantee assumes a left-invertible `A`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopicWordMatrix {
    matrix: Matrix,
}

impl TopicWordMatrix {
    /// Validates and wraps a `V x K` matrix.
    pub fn new(matrix: Matrix) -> Result<Self, GenError> {
        let v = matrix.rows();
        let k = matrix.cols();
        if k == 0 || v < k {
            return Err(param_err(format!(
                "topic-word matrix needs V >= K >= 1, got V={v}, K={k}"
            )));
        }
        for j in 0..k {
            let mut sum = 0.0;
            for i in 0..v {
                let x = matrix.get(i, j);
                if x < 0.0 || !x.is_finite() {
                    return Err(param_err(format!(
                        "topic {j} has invalid entry {x:?} at word {i}"
                    )));
                }
                sum += x;
            }
            if (sum - 1.0).abs() > SIMPLEX_TOL {
                return Err(param_err(format!(
                    "topic {j} sums to {sum:.12}, expected 1 within {SIMPLEX_TOL:.0e}"
                )));
            }
        }
        let decomposition = svd(&matrix)?;
        if decomposition.rank(DEFAULT_RANK_TOL) < k {
            return Err(LinalgError::RankDeficient {
                smallest: decomposition.sigma.last().copied().unwrap_or(0.0),
                threshold: DEFAULT_RANK_TOL * decomposition.sigma.first().copied().unwrap_or(0.0),
                tol: DEFAULT_RANK_TOL,
            }
            .into());
        }
        Ok(Self { matrix })
    }

    /// Builds from topic columns (each a length-`V` word distribution).
    pub fn from_columns(columns: &[Vec<f64>]) -> Result<Self, GenError> {
        let k = columns.len();
        let v = columns.first().map_or(0, Vec::len);
        if columns.iter().any(|c| c.len() != v) {
            return Err(param_err("topic columns have unequal lengths"));
        }
        let m = Matrix::from_fn(v, k, |i, j| columns[j][i]);
        Self::new(m)
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn num_topics(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    /// Topic `k` as an owned word distribution.
    pub fn column(&self, k: usize) -> Vec<f64> {
        self.matrix.column(k)
    }

    /// Mixture word distribution `A w`.
    pub fn word_distribution(&self, w: &TopicProportions) -> Result<Vec<f64>, GenError> {
        if w.dim() != self.num_topics() {
            return Err(param_err(format!(
                "proportions of dimension {} against K={}",
                w.dim(),
                self.num_topics()
            )));
        }
        Ok(self.matrix.matvec(w.as_slice())?)
    }
}

/// Prior over topic proportions; see the module docs for conventions.
#[derive(Debug, Clone, PartialEq)]
pub enum PriorSpec {
    /// Uniform over the vertices `{e_1, …, e_K}`.
    Pure,
    /// `w ~ Dir(alpha_doc / K · 1_K)`.
    Lda { alpha_doc: f64 },
    /// `w = softmax(η)`, `η ~ N(mu, sigma)`.
    Ctm { mu: Vec<f64>, sigma: Matrix },
    /// Two-level Pachinko allocation over `super_topics` super-topics.
    Pam { super_topics: usize, alpha_super: f64, alpha_sub: f64 },
}

impl PriorSpec {
    /// Short tag used in corpus headers and report rows.
    pub fn tag(&self) -> &'static str {
        match self {
            PriorSpec::Pure => "pure",
            PriorSpec::Lda { .. } => "lda",
            PriorSpec::Ctm { .. } => "ctm",
            PriorSpec::Pam { .. } => "pam",
        }
    }

    /// Checks parameters against a topic count `k`.
    pub fn validate(&self, k: usize) -> Result<(), GenError> {
        if k == 0 {
            return Err(param_err("K must be positive"));
        }
        match self {
            PriorSpec::Pure => Ok(()),
            PriorSpec::Lda { alpha_doc } => {
                if !(alpha_doc.is_finite() && *alpha_doc > 0.0) {
                    return Err(param_err(format!("LDA alpha_doc must be positive, got {alpha_doc}")));
                }
                Ok(())
            }
            PriorSpec::Ctm { mu, sigma } => {
                if mu.len() != k {
                    return Err(param_err(format!("CTM mu has dimension {}, expected {k}", mu.len())));
                }
                if sigma.rows() != k || sigma.cols() != k {
                    return Err(param_err(format!(
                        "CTM sigma is {}x{}, expected {k}x{k}",
                        sigma.rows(),
                        sigma.cols()
                    )));
                }
                for i in 0..k {
                    for j in 0..i {
                        if (sigma.get(i, j) - sigma.get(j, i)).abs() > 1e-9 {
                            return Err(param_err("CTM sigma is not symmetric"));
                        }
                    }
                }
                ctm_cholesky(sigma).map(|_| ())
            }
            PriorSpec::Pam { super_topics, alpha_super, alpha_sub } => {
                if *super_topics == 0 {
                    return Err(param_err("PAM needs at least one super-topic"));
                }
                for (name, a) in [("alpha_super", alpha_super), ("alpha_sub", alpha_sub)] {
                    if !(a.is_finite() && *a > 0.0) {
                        return Err(param_err(format!("PAM {name} must be positive, got {a}")));
                    }
                }
                Ok(())
            }
        }
    }
}

/// Cholesky of a CTM covariance, retrying with a small diagonal jitter
/// (up to `1e-8` relative to the largest diagonal entry) to absorb
/// semidefinite corner cases.
fn ctm_cholesky(sigma: &Matrix) -> Result<Matrix, GenError> {
    match cholesky(sigma) {
        Ok(l) => Ok(l),
        Err(_) => {
            let scale = (0..sigma.rows()).fold(0.0f64, |m, i| m.max(sigma.get(i, i).abs())).max(1.0);
            for exp in [-12, -10, -8] {
                let jitter = scale * 10f64.powi(exp);
                let bumped = sigma.add_scaled(1.0, &Matrix::identity(sigma.rows()).scaled(jitter))?;
                if let Ok(l) = cholesky(&bumped) {
                    return Ok(l);
                }
            }
            Err(param_err("CTM sigma is not positive semidefinite within jitter 1e-8"))
        }
    }
}

/// The benchmark CTM covariance: `diag` on the diagonal and `rho · diag`
/// between topics `(4g, 4g+2)` and `(4g+1, 4g+3)` in each group of four.
/// A trailing remainder of `K mod 4` topics stays uncorrelated.
pub fn ctm_covariance(k: usize, diag: f64, rho: f64) -> Result<Matrix, GenError> {
    if !(diag.is_finite() && diag > 0.0) {
        return Err(param_err(format!("diagonal variance must be positive, got {diag}")));
    }
    if !(rho.is_finite() && rho.abs() < 1.0) {
        return Err(param_err(format!("correlation must satisfy |rho| < 1, got {rho}")));
    }
    let mut sigma = Matrix::identity(k).scaled(diag);
    let off = rho * diag;
    for g in 0..k / 4 {
        let base = 4 * g;
        for (i, j) in [(base, base + 2), (base + 1, base + 3)] {
            sigma.set(i, j, off);
            sigma.set(j, i, off);
        }
    }
    Ok(sigma)
}

/// A point on the `K`-simplex (topic proportions).
#[derive(Debug, Clone, PartialEq)]
pub struct TopicProportions(Vec<f64>);

impl TopicProportions {
    pub fn new(values: Vec<f64>) -> Result<Self, GenError> {
        if values.is_empty() {
            return Err(param_err("empty proportions"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(param_err("proportions must be finite and nonnegative"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(param_err(format!("proportions sum to {sum:.12}, expected 1")));
        }
        Ok(Self(values))
    }

    /// The vertex `e_k` of the `dim`-simplex.
    pub fn vertex(dim: usize, k: usize) -> Result<Self, GenError> {
        if k >= dim {
            return Err(param_err(format!("vertex {k} out of range for dimension {dim}")));
        }
        let mut v = vec![0.0; dim];
        v[k] = 1.0;
        Ok(Self(v))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }
}

/// One synthetic document: its word ids, vocabulary size, and (when kept)
/// the hidden proportions that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    words: Vec<u32>,
    vocab_size: u32,
    proportions: Option<TopicProportions>,
}

impl Document {
    pub fn new(
        words: Vec<u32>,
        vocab_size: u32,
        proportions: Option<TopicProportions>,
    ) -> Result<Self, GenError> {
        if let Some(&w) = words.iter().find(|&&w| w >= vocab_size) {
            return Err(GenError::WordOutOfRange { word: w, vocab: vocab_size });
        }
        Ok(Self { words, vocab_size, proportions })
    }

    pub fn words(&self) -> &[u32] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn vocab_size(&self) -> u32 {
        self.vocab_size
    }

    /// Hidden topic proportions, if the generating process kept them.
    pub fn proportions(&self) -> Option<&TopicProportions> {
        self.proportions.as_ref()
    }

    /// Dense word-count vector of length `V` (as `f64`, ready for models).
    pub fn counts_dense(&self) -> Vec<f64> {
        let mut counts = vec![0.0; self.vocab_size as usize];
        for &w in &self.words {
            counts[w as usize] += 1.0;
        }
        counts
    }

    /// Sparse `(word, count)` pairs sorted by word id.
    pub fn counts_sparse(&self) -> Vec<(u32, u32)> {
        let mut sorted = self.words.clone();
        sorted.sort_unstable();
        let mut out: Vec<(u32, u32)> = Vec::new();
        for w in sorted {
            match out.last_mut() {
                Some((word, count)) if *word == w => *count += 1,
                _ => out.push((w, 1)),
            }
        }
        out
    }

    /// Copy of this document without its hidden proportions.
    pub fn without_proportions(&self) -> Document {
        Document { words: self.words.clone(), vocab_size: self.vocab_size, proportions: None }
    }
}

/// Corpus synthesis parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GenConfig {
    /// Poisson mean document length.
    pub lambda: f64,
    /// Stream seed; document `i` draws from stream `i`.
    pub seed: u64,
    /// Number of documents.
    pub corpus_size: usize,
    /// Minimum document length (Poisson draws below it are rejected).
    pub min_length: usize,
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), GenError> {
        if !(self.lambda.is_finite() && self.lambda > 0.0) {
            return Err(param_err(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.min_length == 0 {
            return Err(param_err("min_length must be at least 1"));
        }
        Ok(())
    }
}

/// How to synthesize the topic-word matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopicMatrixKind {
    /// Each topic column drawn i.i.d. from `Dir(alpha_word/K · 1_V)`.
    Independent,
    /// Groups of four topics sharing a permuted base vector; see
    /// [`gen_topic_word_matrix`].
    Grouped,
}

impl TopicMatrixKind {
    pub fn tag(&self) -> &'static str {
        match self {
            TopicMatrixKind::Independent => "independent",
            TopicMatrixKind::Grouped => "grouped",
        }
    }
}

/// Symmetric Dirichlet draw via normalized Gamma variates, retrying on
/// numerically degenerate output (all components underflowing to zero).
fn dirichlet_symmetric(alpha: f64, dim: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>, GenError> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(param_err(format!("dirichlet parameter must be positive, got {alpha}")));
    }
    let gamma = Gamma::new(alpha, 1.0)
        .map_err(|e| param_err(format!("gamma parameterization failed: {e}")))?;
    for _ in 0..MAX_DIRICHLET_RETRIES {
        let mut draw: Vec<f64> = (0..dim).map(|_| gamma.sample(rng)).collect();
        let sum: f64 = draw.iter().sum();
        if sum.is_finite() && sum > 1e-280 {
            for v in &mut draw {
                *v /= sum;
            }
            return Ok(draw);
        }
    }
    Err(GenError::DegenerateDirichlet { attempts: MAX_DIRICHLET_RETRIES })
}

/// A prior with its sampling machinery set up once (Cholesky factor, Gamma
/// distributions), for hot loops that draw millions of proportions. The
/// public [`sample_w`] delegates here, so both paths sample the identical
/// distribution with the identical draw order.
#[derive(Debug, Clone)]
pub(crate) enum PreparedPrior {
    Pure { k: usize },
    Lda { gamma: Gamma<f64>, k: usize },
    Ctm { mu: Vec<f64>, chol: Matrix },
    Pam { gamma_super: Gamma<f64>, gamma_sub: Gamma<f64>, super_topics: usize, k: usize },
}

impl PreparedPrior {
    pub(crate) fn new(prior: &PriorSpec, k: usize) -> Result<Self, GenError> {
        prior.validate(k)?;
        let mk_gamma = |alpha: f64| {
            Gamma::new(alpha, 1.0).map_err(|e| param_err(format!("gamma parameterization failed: {e}")))
        };
        Ok(match prior {
            PriorSpec::Pure => PreparedPrior::Pure { k },
            PriorSpec::Lda { alpha_doc } => {
                PreparedPrior::Lda { gamma: mk_gamma(alpha_doc / k as f64)?, k }
            }
            PriorSpec::Ctm { mu, sigma } => {
                PreparedPrior::Ctm { mu: mu.clone(), chol: ctm_cholesky(sigma)? }
            }
            PriorSpec::Pam { super_topics, alpha_super, alpha_sub } => PreparedPrior::Pam {
                gamma_super: mk_gamma(*alpha_super)?,
                gamma_sub: mk_gamma(*alpha_sub)?,
                super_topics: *super_topics,
                k,
            },
        })
    }

    pub(crate) fn dim(&self) -> usize {
        match self {
            PreparedPrior::Pure { k }
            | PreparedPrior::Lda { k, .. }
            | PreparedPrior::Pam { k, .. } => *k,
            PreparedPrior::Ctm { mu, .. } => mu.len(),
        }
    }

    /// Draws one `w` into `w_buf` (length `k`), using `scratch` to avoid
    /// per-draw allocation.
    pub(crate) fn sample_into(
        &self,
        rng: &mut ChaCha8Rng,
        w_buf: &mut [f64],
        scratch: &mut Vec<f64>,
    ) -> Result<(), GenError> {
        debug_assert_eq!(w_buf.len(), self.dim());
        match self {
            PreparedPrior::Pure { k } => {
                w_buf.fill(0.0);
                w_buf[rng.gen_range(0..*k)] = 1.0;
            }
            PreparedPrior::Lda { gamma, .. } => {
                gamma_dirichlet_into(gamma, rng, w_buf)?;
            }
            PreparedPrior::Ctm { mu, chol } => {
                let k = mu.len();
                scratch.clear();
                scratch.extend((0..k).map(|_| rng.sample::<f64, _>(StandardNormal)));
                for i in 0..k {
                    let mut acc = mu[i];
                    let row = chol.row(i);
                    for (lij, zj) in row[..=i].iter().zip(scratch.iter()) {
                        acc += lij * zj;
                    }
                    w_buf[i] = acc;
                }
                softmax_in_place(w_buf);
            }
            PreparedPrior::Pam { gamma_super, gamma_sub, super_topics, k } => {
                scratch.clear();
                scratch.resize(super_topics + k, 0.0);
                let (theta, phi) = scratch.split_at_mut(*super_topics);
                gamma_dirichlet_into(gamma_super, rng, theta)?;
                w_buf.fill(0.0);
                for s in 0..*super_topics {
                    gamma_dirichlet_into(gamma_sub, rng, phi)?;
                    let theta_s = theta[s];
                    for (acc, p) in w_buf.iter_mut().zip(phi.iter()) {
                        *acc += theta_s * p;
                    }
                }
                let sum: f64 = w_buf.iter().sum();
                for v in w_buf.iter_mut() {
                    *v /= sum;
                }
            }
        }
        Ok(())
    }
}

/// Fills `out` with a Dirichlet draw from normalized Gamma variates,
/// retrying on degenerate (underflowed) output.
fn gamma_dirichlet_into(
    gamma: &Gamma<f64>,
    rng: &mut ChaCha8Rng,
    out: &mut [f64],
) -> Result<(), GenError> {
    for _ in 0..MAX_DIRICHLET_RETRIES {
        let mut sum = 0.0;
        for slot in out.iter_mut() {
            *slot = gamma.sample(rng);
            sum += *slot;
        }
        if sum.is_finite() && sum > 1e-280 {
            for slot in out.iter_mut() {
                *slot /= sum;
            }
            return Ok(());
        }
    }
    Err(GenError::DegenerateDirichlet { attempts: MAX_DIRICHLET_RETRIES })
}

/// Samples topic proportions from `prior` for a model with `k` topics.
pub fn sample_w(prior: &PriorSpec, k: usize, rng: &mut ChaCha8Rng) -> Result<TopicProportions, GenError> {
    let prepared = PreparedPrior::new(prior, k)?;
    let mut w = vec![0.0; k];
    let mut scratch = Vec::new();
    prepared.sample_into(rng, &mut w, &mut scratch)?;
    TopicProportions::new(w)
}

/// Samples one document of Poisson length from the mixture `A w`.
///
/// Lengths below `cfg.min_length` are rejected and redrawn (the cap only
/// exists to turn pathological configurations into an error instead of a
/// hang). The hidden `w` is stored on the document.
pub fn sample_document(
    a: &TopicWordMatrix,
    w: &TopicProportions,
    cfg: &GenConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Document, GenError> {
    cfg.validate()?;
    let poisson = Poisson::new(cfg.lambda)
        .map_err(|e| param_err(format!("poisson parameterization failed: {e}")))?;
    let mut length = None;
    for _ in 0..MAX_LENGTH_REJECTIONS {
        let draw = poisson.sample(rng) as usize;
        if draw >= cfg.min_length {
            length = Some(draw);
            break;
        }
    }
    let length = length.ok_or(GenError::LengthRejectionExhausted { attempts: MAX_LENGTH_REJECTIONS })?;

    let probs = a.word_distribution(w)?;
    let mut cumulative = Vec::with_capacity(probs.len());
    let mut acc = 0.0;
    for p in &probs {
        acc += p;
        cumulative.push(acc);
    }
    let total = acc;
    let mut words = Vec::with_capacity(length);
    for _ in 0..length {
        let u: f64 = rng.gen::<f64>() * total;
        let idx = cumulative.partition_point(|&c| c < u).min(probs.len() - 1);
        words.push(idx as u32);
    }
    Document::new(words, a.vocab_size() as u32, Some(w.clone()))
}

/// Samples a deterministic, order-preserving corpus: document `i` uses
/// stream `i` of `cfg.seed` for both its proportions and its words.
pub fn make_corpus(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    cfg: &GenConfig,
) -> Result<Vec<Document>, GenError> {
    cfg.validate()?;
    let prepared = PreparedPrior::new(prior, a.num_topics())?;
    (0..cfg.corpus_size)
        .into_par_iter()
        .map(|i| {
            let mut rng = stream_rng(cfg.seed, i as u64);
            let mut w = vec![0.0; a.num_topics()];
            let mut scratch = Vec::new();
            prepared.sample_into(&mut rng, &mut w, &mut scratch)?;
            let w = TopicProportions::new(w)?;
            sample_document(a, &w, cfg, &mut rng)
        })
        .collect()
}

/// Synthesizes a `V x K` topic-word matrix.
///
/// `Independent` draws each column i.i.d. `Dir(alpha_word/K · 1_V)`.
///
/// `Grouped` builds `K/4` groups of four correlated topics. Each group draws
/// one base word distribution `b` and derives four permutations of it:
///
/// * topics 0 and 1 both keep `b`'s top-quartile positions (topic 1 shuffles
///   only the remaining entries), so they overlap heavily (high cosine
///   similarity, hard to tell apart from few words);
/// * topics 2 and 3 move the top-quartile *values* onto two further,
///   mutually disjoint position blocks, so they are near-orthogonal to the
///   first pair and to each other.
///
/// Every column remains an exact permutation of `b` (hence a valid word
/// distribution). Full column rank is verified after assembly; the whole
/// matrix is resampled (fresh streams) up to 10 times if the check fails,
/// after which [`GenError::RankRetryExhausted`] is returned.
pub fn gen_topic_word_matrix(
    kind: TopicMatrixKind,
    alpha_word: f64,
    k: usize,
    v: usize,
    seed: u64,
) -> Result<TopicWordMatrix, GenError> {
    if k == 0 || v < k {
        return Err(param_err(format!("need V >= K >= 1, got V={v}, K={k}")));
    }
    if kind == TopicMatrixKind::Grouped && (k % 4 != 0 || v < 8) {
        return Err(GenError::GroupedShape { k, v });
    }
    if !(alpha_word.is_finite() && alpha_word > 0.0) {
        return Err(param_err(format!("alpha_word must be positive, got {alpha_word}")));
    }
    let alpha = alpha_word / k as f64;
    for attempt in 0..MAX_RANK_RETRIES {
        let mut rng = stream_rng(seed, attempt as u64);
        let columns: Vec<Vec<f64>> = match kind {
            TopicMatrixKind::Independent => (0..k)
                .map(|_| dirichlet_symmetric(alpha, v, &mut rng))
                .collect::<Result<_, _>>()?,
            TopicMatrixKind::Grouped => {
                let mut cols = Vec::with_capacity(k);
                for _ in 0..k / 4 {
                    cols.extend(grouped_quad(alpha, v, &mut rng)?);
                }
                cols
            }
        };
        match TopicWordMatrix::from_columns(&columns) {
            Ok(m) => return Ok(m),
            Err(GenError::Linalg(LinalgError::RankDeficient { .. })) => continue,
            Err(other) => return Err(other),
        }
    }
    Err(GenError::RankRetryExhausted { k, attempts: MAX_RANK_RETRIES })
}

/// Builds one group of four correlated topic columns from a shared base.
fn grouped_quad(alpha: f64, v: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f64>>, GenError> {
    let base = dirichlet_symmetric(alpha, v, rng)?;
    let mut order: Vec<usize> = (0..v).collect();
    order.sort_by(|&i, &j| base[j].partial_cmp(&base[i]).expect("finite dirichlet draw"));
    let q = v / 4;
    let top = &order[..q];
    let block2 = &order[q..2 * q];
    let block3 = &order[2 * q..3 * q];

    // Topic 0: the base itself.
    let topic0 = base.clone();

    // Topic 1: keep the top-quartile entries, shuffle the rest in place.
    let mut topic1 = base.clone();
    let rest_positions: Vec<usize> = order[q..].to_vec();
    let mut rest_values: Vec<f64> = rest_positions.iter().map(|&i| base[i]).collect();
    shuffle(&mut rest_values, rng);
    for (&pos, &val) in rest_positions.iter().zip(&rest_values) {
        topic1[pos] = val;
    }

    // Topics 2 and 3: move the top values onto disjoint blocks.
    let top_values: Vec<f64> = top.iter().map(|&i| base[i]).collect();
    let mut make_shifted = |block: &[usize]| -> Vec<f64> {
        let mut col = vec![0.0; v];
        let mut tv = top_values.clone();
        shuffle(&mut tv, rng);
        for (&pos, &val) in block.iter().zip(&tv) {
            col[pos] = val;
        }
        let mut remaining_positions: Vec<usize> =
            (0..v).filter(|p| !block.contains(p)).collect();
        let mut remaining_values: Vec<f64> =
            order[q..].iter().map(|&i| base[i]).collect();
        shuffle(&mut remaining_values, rng);
        shuffle(&mut remaining_positions, rng);
        for (&pos, &val) in remaining_positions.iter().zip(&remaining_values) {
            col[pos] = val;
        }
        col
    };
    let topic2 = make_shifted(block2);
    let topic3 = make_shifted(block3);
    Ok(vec![topic0, topic1, topic2, topic3])
}

/// Fisher-Yates shuffle on a slice (kept local so the draw order is pinned
/// by this crate rather than by an external implementation detail).
fn shuffle<T>(xs: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..xs.len()).rev() {
        let j = rng.gen_range(0..=i);
        xs.swap(i, j);
    }
}

/// Corpus file header.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusHeader {
    pub vocab_size: u32,
    pub num_topics: u32,
    pub prior_tag: String,
    pub seed: u64,
}

/// Writes a corpus as plain text: a header line
/// `# topicssl-corpus V=… K=… prior=… seed=…` followed by one record per
/// document, `doc_id,length,space-separated words[,w_1,…,w_K]`. Hidden
/// proportions are written with shortest-round-trip float formatting, so a
/// read-back reproduces them bit for bit.
pub fn write_corpus(
    path: &Path,
    docs: &[Document],
    header: &CorpusHeader,
) -> Result<(), GenError> {
    let file = File::create(path)?;
    let mut out = BufWriter::new(file);
    write_corpus_to(&mut out, docs, header)?;
    out.flush()?;
    Ok(())
}

/// [`write_corpus`] against any writer.
pub fn write_corpus_to(
    out: &mut impl Write,
    docs: &[Document],
    header: &CorpusHeader,
) -> Result<(), GenError> {
    writeln!(
        out,
        "# topicssl-corpus V={} K={} prior={} seed={}",
        header.vocab_size, header.num_topics, header.prior_tag, header.seed
    )?;
    for (i, doc) in docs.iter().enumerate() {
        let words: Vec<String> = doc.words().iter().map(u32::to_string).collect();
        write!(out, "{},{},{}", i, doc.len(), words.join(" "))?;
        if let Some(w) = doc.proportions() {
            for v in w.as_slice() {
                write!(out, ",{v}")?;
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Reads a corpus written by [`write_corpus`].
pub fn read_corpus(path: &Path) -> Result<(Vec<Document>, CorpusHeader), GenError> {
    let file = File::open(path)?;
    read_corpus_from(BufReader::new(file))
}

/// [`read_corpus`] against any reader.
pub fn read_corpus_from(reader: impl BufRead) -> Result<(Vec<Document>, CorpusHeader), GenError> {
    let mut lines = reader.lines().enumerate();
    let (_, header_line) = lines
        .next()
        .ok_or(GenError::Parse { line: 1, reason: "empty file".into() })?;
    let header_line = header_line?;
    let header = parse_header(&header_line)?;

    let mut docs = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(',');
        let id: usize = next_field(&mut fields, line_no, "doc_id")?
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, format!("doc_id: {e}")))?;
        if id != docs.len() {
            return Err(parse_err(line_no, format!("doc_id {id} out of order, expected {}", docs.len())));
        }
        let length: usize = next_field(&mut fields, line_no, "length")?
            .trim()
            .parse()
            .map_err(|e| parse_err(line_no, format!("length: {e}")))?;
        let words_field = next_field(&mut fields, line_no, "words")?;
        let mut words = Vec::with_capacity(length);
        if !words_field.trim().is_empty() {
            for token in words_field.split_whitespace() {
                let w: u32 = token
                    .parse()
                    .map_err(|e| parse_err(line_no, format!("word id '{token}': {e}")))?;
                words.push(w);
            }
        }
        if words.len() != length {
            return Err(parse_err(
                line_no,
                format!("length field says {length} but {} words present", words.len()),
            ));
        }
        let trailing: Vec<&str> = fields.collect();
        let proportions = if trailing.is_empty() {
            None
        } else {
            if trailing.len() != header.num_topics as usize {
                return Err(parse_err(
                    line_no,
                    format!(
                        "expected {} proportion fields, got {}",
                        header.num_topics,
                        trailing.len()
                    ),
                ));
            }
            let values: Result<Vec<f64>, _> = trailing.iter().map(|t| t.trim().parse()).collect();
            let values = values.map_err(|e| parse_err(line_no, format!("proportions: {e}")))?;
            Some(TopicProportions::new(values)?)
        };
        docs.push(Document::new(words, header.vocab_size, proportions)?);
    }
    Ok((docs, header))
}

fn parse_err(line: usize, reason: String) -> GenError {
    GenError::Parse { line, reason }
}

fn next_field<'a>(
    fields: &mut impl Iterator<Item = &'a str>,
    line: usize,
    name: &str,
) -> Result<&'a str, GenError> {
    fields.next().ok_or_else(|| parse_err(line, format!("missing field '{name}'")))
}

fn parse_header(line: &str) -> Result<CorpusHeader, GenError> {
    let err = |reason: &str| parse_err(1, reason.to_string());
    if !line.starts_with("# topicssl-corpus") {
        return Err(err("missing '# topicssl-corpus' header"));
    }
    let mut vocab_size = None;
    let mut num_topics = None;
    let mut prior_tag = None;
    let mut seed = None;
    for token in line.split_whitespace().skip(2) {
        let (key, value) = token
            .split_once('=')
            .ok_or_else(|| err(&format!("malformed header token '{token}'")))?;
        match key {
            "V" => vocab_size = Some(value.parse().map_err(|_| err("bad V"))?),
            "K" => num_topics = Some(value.parse().map_err(|_| err("bad K"))?),
            "prior" => prior_tag = Some(value.to_string()),
            "seed" => seed = Some(value.parse().map_err(|_| err("bad seed"))?),
            _ => return Err(err(&format!("unknown header key '{key}'"))),
        }
    }
    Ok(CorpusHeader {
        vocab_size: vocab_size.ok_or_else(|| err("header missing V"))?,
        num_topics: num_topics.ok_or_else(|| err("header missing K"))?,
        prior_tag: prior_tag.ok_or_else(|| err("header missing prior"))?,
        seed: seed.ok_or_else(|| err("header missing seed"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    fn small_matrix() -> TopicWordMatrix {
        gen_topic_word_matrix(TopicMatrixKind::Independent, 1.0, 3, 12, 7).unwrap()
    }

    #[test]
    fn topic_matrix_columns_are_distributions() {
        let a = gen_topic_word_matrix(TopicMatrixKind::Independent, 1.0, 8, 300, 42).unwrap();
        assert_eq!(a.vocab_size(), 300);
        assert_eq!(a.num_topics(), 8);
        for k in 0..8 {
            let col = a.column(k);
            let sum: f64 = col.iter().sum();
            assert!((sum - 1.0).abs() <= SIMPLEX_TOL);
            assert!(col.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn topic_matrix_rejects_bad_columns() {
        // Second column sums to 0.9.
        let cols = vec![vec![0.5, 0.5, 0.0], vec![0.4, 0.3, 0.2]];
        assert!(TopicWordMatrix::from_columns(&cols).is_err());
        // Duplicate columns are rank-deficient.
        let cols = vec![vec![0.5, 0.3, 0.2], vec![0.5, 0.3, 0.2]];
        assert!(matches!(
            TopicWordMatrix::from_columns(&cols),
            Err(GenError::Linalg(LinalgError::RankDeficient { .. }))
        ));
    }

    #[test]
    fn grouped_matrix_shape_and_similarity() {
        let a = gen_topic_word_matrix(TopicMatrixKind::Grouped, 1.0, 4, 64, 11).unwrap();
        let cos = |x: &[f64], y: &[f64]| {
            let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
            let nx: f64 = x.iter().map(|v| v * v).sum::<f64>().sqrt();
            let ny: f64 = y.iter().map(|v| v * v).sum::<f64>().sqrt();
            dot / (nx * ny)
        };
        let t0 = a.column(0);
        let t1 = a.column(1);
        let t2 = a.column(2);
        let t3 = a.column(3);
        // The confusable pair shares its dominant mass; the shifted topics
        // place that mass on disjoint blocks.
        assert!(cos(&t0, &t1) > cos(&t0, &t2), "{} vs {}", cos(&t0, &t1), cos(&t0, &t2));
        assert!(cos(&t0, &t1) > cos(&t0, &t3));
        assert!(cos(&t0, &t1) > cos(&t2, &t3));
        // All four columns are permutations of the same multiset.
        let mut sorted0 = t0.clone();
        sorted0.sort_by(f64::total_cmp);
        for t in [&t1, &t2, &t3] {
            let mut s = t.clone();
            s.sort_by(f64::total_cmp);
            for (x, y) in s.iter().zip(&sorted0) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grouped_matrix_rejects_bad_shapes() {
        assert!(matches!(
            gen_topic_word_matrix(TopicMatrixKind::Grouped, 1.0, 6, 64, 1),
            Err(GenError::GroupedShape { .. })
        ));
        assert!(matches!(
            gen_topic_word_matrix(TopicMatrixKind::Grouped, 1.0, 4, 6, 1),
            Err(GenError::GroupedShape { .. })
        ));
    }

    #[test]
    fn pure_prior_samples_vertices_uniformly() {
        let mut rng = stream_rng(3, 0);
        let mut counts = vec![0usize; 4];
        for _ in 0..4000 {
            let w = sample_w(&PriorSpec::Pure, 4, &mut rng).unwrap();
            let idx = w.as_slice().iter().position(|&x| x == 1.0).unwrap();
            assert!(w.as_slice().iter().filter(|&&x| x == 0.0).count() == 3);
            counts[idx] += 1;
        }
        // Chi-squared uniformity check, 3 dof, critical value 11.345 at 1%.
        let expected = 1000.0;
        let chi2: f64 = counts.iter().map(|&c| {
            let d = c as f64 - expected;
            d * d / expected
        }).sum();
        assert!(chi2 < 11.345, "chi2 = {chi2}, counts = {counts:?}");
    }

    #[test]
    fn lda_prior_moments_match_dirichlet() {
        // Dir(α/K) with α = 2, K = 4: E[w_i] = 1/4,
        // E[w_i²] = (α_i+1)α_i / ((α₀+1)α₀) with α_i = 0.5, α₀ = 2 → 0.125.
        let prior = PriorSpec::Lda { alpha_doc: 2.0 };
        let mut rng = stream_rng(5, 0);
        let n = 200_000;
        let mut mean = vec![0.0; 4];
        let mut second = 0.0;
        for _ in 0..n {
            let w = sample_w(&prior, 4, &mut rng).unwrap();
            for (m, x) in mean.iter_mut().zip(w.as_slice()) {
                *m += x;
            }
            second += w.as_slice()[0] * w.as_slice()[0];
        }
        for m in &mut mean {
            *m /= n as f64;
        }
        second /= n as f64;
        for m in &mean {
            assert!((m - 0.25).abs() < 0.004, "mean {m}");
        }
        assert!((second - 0.125).abs() < 0.004, "second moment {second}");
    }

    #[test]
    fn ctm_covariance_block_structure() {
        let sigma = ctm_covariance(8, 15.0, 0.99).unwrap();
        assert_eq!(sigma.get(0, 2), 0.99 * 15.0);
        assert_eq!(sigma.get(1, 3), 0.99 * 15.0);
        assert_eq!(sigma.get(4, 6), 0.99 * 15.0);
        assert_eq!(sigma.get(5, 7), 0.99 * 15.0);
        assert_eq!(sigma.get(0, 1), 0.0);
        assert_eq!(sigma.get(0, 3), 0.0);
        assert_eq!(sigma.get(2, 4), 0.0);
        for i in 0..8 {
            assert_eq!(sigma.get(i, i), 15.0);
        }
        // Positive definite: Cholesky succeeds.
        assert!(cholesky(&sigma).is_ok());
        // Prior validation accepts it.
        let prior = PriorSpec::Ctm { mu: vec![0.0; 8], sigma };
        prior.validate(8).unwrap();
    }

    #[test]
    fn ctm_samples_live_on_simplex_and_correlate() {
        let sigma = ctm_covariance(4, 15.0, 0.99).unwrap();
        let prior = PriorSpec::Ctm { mu: vec![0.0; 4], sigma };
        let mut rng = stream_rng(9, 0);
        let n = 20_000;
        let mut corr_pair = 0.0; // E[w_0 w_2] under correlated logits
        let mut corr_cross = 0.0; // E[w_0 w_3] under independent logits
        for _ in 0..n {
            let w = sample_w(&prior, 4, &mut rng).unwrap();
            let ws = w.as_slice();
            corr_pair += ws[0] * ws[2];
            corr_cross += ws[0] * ws[3];
        }
        corr_pair /= n as f64;
        corr_cross /= n as f64;
        // Logits 0 and 2 are correlated at 0.99, so topics 0 and 2 co-occur
        // much more often than topics 0 and 3.
        assert!(corr_pair > 2.0 * corr_cross, "pair {corr_pair} vs cross {corr_cross}");
    }

    #[test]
    fn pam_samples_live_on_simplex() {
        let prior = PriorSpec::Pam { super_topics: 4, alpha_super: 0.25, alpha_sub: 30.0 };
        prior.validate(8).unwrap();
        let mut rng = stream_rng(13, 0);
        for _ in 0..100 {
            let w = sample_w(&prior, 8, &mut rng).unwrap();
            assert_eq!(w.dim(), 8);
        }
        // alpha_sub = 30 concentrates sub-proportions near uniform, so w
        // should be close to uniform as well.
        let mut mean = vec![0.0; 8];
        for _ in 0..2000 {
            let w = sample_w(&prior, 8, &mut rng).unwrap();
            for (m, x) in mean.iter_mut().zip(w.as_slice()) {
                *m += x / 2000.0;
            }
        }
        for m in &mean {
            assert!((m - 0.125).abs() < 0.01, "PAM mean component {m}");
        }
    }

    #[test]
    fn document_counts_match_words() {
        let doc = Document::new(vec![1, 3, 1, 0], 5, None).unwrap();
        assert_eq!(doc.counts_dense(), vec![1.0, 2.0, 0.0, 1.0, 0.0]);
        assert_eq!(doc.counts_sparse(), vec![(0, 1), (1, 2), (3, 1)]);
        assert!(Document::new(vec![5], 5, None).is_err());
    }

    #[test]
    fn sample_document_respects_min_length() {
        let a = small_matrix();
        let cfg = GenConfig { lambda: 2.0, seed: 1, corpus_size: 1, min_length: 3 };
        let mut rng = stream_rng(1, 0);
        for _ in 0..200 {
            let w = sample_w(&PriorSpec::Pure, 3, &mut rng).unwrap();
            let doc = sample_document(&a, &w, &cfg, &mut rng).unwrap();
            assert!(doc.len() >= 3);
        }
    }

    #[test]
    fn sample_document_word_frequencies_track_mixture() {
        let a = small_matrix();
        let w = TopicProportions::new(vec![0.5, 0.25, 0.25]).unwrap();
        let probs = a.word_distribution(&w).unwrap();
        let cfg = GenConfig { lambda: 50.0, seed: 2, corpus_size: 1, min_length: 1 };
        let mut rng = stream_rng(2, 0);
        let mut counts = vec![0.0; a.vocab_size()];
        let mut total = 0.0;
        for _ in 0..2000 {
            let doc = sample_document(&a, &w, &cfg, &mut rng).unwrap();
            for &word in doc.words() {
                counts[word as usize] += 1.0;
            }
            total += doc.len() as f64;
        }
        for (c, p) in counts.iter().zip(&probs) {
            assert!((c / total - p).abs() < 0.01, "empirical {} vs {}", c / total, p);
        }
    }

    #[test]
    fn make_corpus_is_deterministic_and_order_preserving() {
        let a = small_matrix();
        let cfg = GenConfig { lambda: 10.0, seed: 77, corpus_size: 25, min_length: 2 };
        let c1 = make_corpus(&a, &PriorSpec::Lda { alpha_doc: 1.0 }, &cfg).unwrap();
        let c2 = make_corpus(&a, &PriorSpec::Lda { alpha_doc: 1.0 }, &cfg).unwrap();
        assert_eq!(c1, c2);
        // Prefix property: a smaller corpus with the same seed is a prefix.
        let cfg_small = GenConfig { corpus_size: 10, ..cfg };
        let c3 = make_corpus(&a, &PriorSpec::Lda { alpha_doc: 1.0 }, &cfg_small).unwrap();
        assert_eq!(&c1[..10], &c3[..]);
    }

    #[test]
    fn corpus_round_trips_through_text() {
        let a = small_matrix();
        let cfg = GenConfig { lambda: 8.0, seed: 5, corpus_size: 12, min_length: 1 };
        let docs = make_corpus(&a, &PriorSpec::Lda { alpha_doc: 1.0 }, &cfg).unwrap();
        let header = CorpusHeader {
            vocab_size: a.vocab_size() as u32,
            num_topics: a.num_topics() as u32,
            prior_tag: "lda".into(),
            seed: cfg.seed,
        };
        let mut buf = Vec::new();
        write_corpus_to(&mut buf, &docs, &header).unwrap();
        let (back, header_back) = read_corpus_from(&buf[..]).unwrap();
        assert_eq!(header, header_back);
        assert_eq!(docs, back);
    }

    #[test]
    fn corpus_round_trips_without_proportions() {
        let docs = vec![
            Document::new(vec![0, 1, 1], 4, None).unwrap(),
            Document::new(vec![3], 4, None).unwrap(),
        ];
        let header =
            CorpusHeader { vocab_size: 4, num_topics: 2, prior_tag: "pure".into(), seed: 0 };
        let mut buf = Vec::new();
        write_corpus_to(&mut buf, &docs, &header).unwrap();
        let (back, _) = read_corpus_from(&buf[..]).unwrap();
        assert_eq!(docs, back);
    }

    #[test]
    fn corpus_parse_errors_carry_line_numbers() {
        let text = "# topicssl-corpus V=4 K=2 prior=pure seed=0\n0,2,1 2\n2,1,3\n";
        let err = read_corpus_from(text.as_bytes()).unwrap_err();
        match err {
            GenError::Parse { line, reason } => {
                assert_eq!(line, 3);
                assert!(reason.contains("out of order"), "{reason}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn prior_validation_rejects_bad_parameters() {
        assert!(PriorSpec::Lda { alpha_doc: 0.0 }.validate(4).is_err());
        assert!(PriorSpec::Pam { super_topics: 0, alpha_super: 1.0, alpha_sub: 1.0 }
            .validate(4)
            .is_err());
        let bad_sigma = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        // Indefinite covariance fails even with jitter.
        assert!(PriorSpec::Ctm { mu: vec![0.0; 2], sigma: bad_sigma }.validate(2).is_err());
        assert!(ctm_covariance(4, -1.0, 0.5).is_err());
        assert!(ctm_covariance(4, 1.0, 1.5).is_err());
    }
}
