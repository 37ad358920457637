//! Ground-truth posteriors to score recoveries against.
//!
//! The object of interest is the posterior moment tensor
//! `W_post = E[w^{⊗t} | x]` for a document `x`. Three estimators live here:
//!
//! * **Exact enumeration** for the pure prior: `w` ranges over `K` vertices,
//!   so the posterior is a `K`-vector and `W_post` is diagonal.
//! * **Self-normalized importance sampling (SNIS)** with the prior as the
//!   proposal, for every other prior. Log weights are the document
//!   log-likelihoods `Σ_v c_v log (A w)_v`, max-shifted before
//!   exponentiation; sampling is chunked over fixed-size counter streams and
//!   the chunk partials are merged in index order, so results are identical
//!   no matter how the chunks are scheduled. The effective sample size
//!   `ESS = (Σu)² / Σu²` is reported alongside every estimate, with a
//!   `low_ess` flag when it drops below `resample_threshold · n_samples`.
//! * **Deterministic simplex-grid quadrature** for `K ≤ 3` LDA models
//!   ([`grid_posterior_moment`]): an independent check that contains no
//!   randomness at all, used to validate the sampler.
//!
//! On top of the tensors sit the two population-optimal predictors the
//! self-supervised objectives converge to: the reconstruction predictor
//! `f*(x) = (A ⊗ … ⊗ A) vec(W_post)` over word tuples, and the contrastive
//! score `g*(x, l) = P(l | x) / P(l)` against a landmark tuple `l`.

use rayon::prelude::*;
use thiserror::Error;

use crate::generative::{Document, GenError, PreparedPrior, PriorSpec, TopicWordMatrix};
use crate::linalg::{LinalgError, Matrix, MomentTensor, ProbVec};
use crate::rng::stream_rng;
use crate::util::dot;

/// Samples per SNIS chunk; chunk `c` draws from stream `c` of the seed.
const SNIS_CHUNK: usize = 8192;

/// Entry cap for materializing predictors over `V^t` word tuples.
const MAX_PREDICTOR_ENTRIES: usize = 1 << 24;

/// Oracle estimation parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    /// Monte-Carlo sample count for SNIS estimates.
    pub n_samples: usize,
    /// `low_ess` is flagged when `ESS < resample_threshold * n_samples`.
    pub resample_threshold: f64,
    /// Seed; distinct documents should use distinct derived seeds.
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self { n_samples: 200_000, resample_threshold: 0.1, seed: 0 }
    }
}

impl OracleConfig {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_samples(mut self, n_samples: usize) -> Self {
        self.n_samples = n_samples;
        self
    }
}

/// How a posterior quantity was estimated.
#[derive(Debug, Clone, PartialEq)]
pub enum Estimator {
    /// Exact enumeration (pure prior).
    Exact,
    /// Self-normalized importance sampling with the reported diagnostics.
    Snis { n_samples: usize, ess: f64, low_ess: bool },
}

impl Estimator {
    pub fn is_exact(&self) -> bool {
        matches!(self, Estimator::Exact)
    }

    /// Effective sample size, if Monte-Carlo.
    pub fn ess(&self) -> Option<f64> {
        match self {
            Estimator::Exact => None,
            Estimator::Snis { ess, .. } => Some(*ess),
        }
    }

    /// Short tag for report rows: `exact` or `snis`.
    pub fn tag(&self) -> &'static str {
        match self {
            Estimator::Exact => "exact",
            Estimator::Snis { .. } => "snis",
        }
    }
}

/// A posterior moment tensor with its estimation metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorTensor {
    pub tensor: MomentTensor,
    pub estimator: Estimator,
}

/// Errors from oracle evaluation.
#[derive(Debug, Error)]
pub enum OracleError {
    /// Every topic assigns probability zero to some observed word.
    #[error("degenerate likelihood: {context}")]
    DegenerateLikelihood { context: String },
    /// A landmark tuple has zero (or non-positive) marginal probability.
    #[error("degenerate landmark: {context}")]
    DegenerateLandmark { context: String },
    /// The requested deterministic oracle does not support this prior/shape.
    #[error("unsupported oracle request: {context}")]
    Unsupported { context: String },
    /// A materialized predictor would exceed the entry cap.
    #[error("predictor over V^t = {requested} entries exceeds the cap of {cap}")]
    TooLarge { requested: u128, cap: usize },
    /// Invalid parameter.
    #[error("invalid oracle parameter: {context}")]
    InvalidParam { context: String },
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

fn param_err(context: impl Into<String>) -> OracleError {
    OracleError::InvalidParam { context: context.into() }
}

/// Exact topic posterior `P(topic = k | x)` under the pure prior.
///
/// Computed in log space: `log p_k ∝ Σ_v c_v log A[v, k]`, so long documents
/// cannot underflow. Words assigned zero probability by *every* topic make
/// the likelihood identically zero and raise
/// [`OracleError::DegenerateLikelihood`]. An empty document returns the
/// uniform prior.
pub fn pure_posterior(a: &TopicWordMatrix, x: &Document) -> Result<ProbVec, OracleError> {
    let k = a.num_topics();
    if x.vocab_size() as usize != a.vocab_size() {
        return Err(param_err(format!(
            "document vocabulary {} does not match matrix V={}",
            x.vocab_size(),
            a.vocab_size()
        )));
    }
    let mut log_post = vec![0.0f64; k];
    for (word, count) in x.counts_sparse() {
        let row = a.matrix().row(word as usize);
        for (lp, &p) in log_post.iter_mut().zip(row) {
            *lp += count as f64 * p.ln(); // ln(0) = -inf marks impossible topics
        }
    }
    let max = log_post.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max.is_finite() {
        return Err(OracleError::DegenerateLikelihood {
            context: "every topic assigns zero probability to this document".into(),
        });
    }
    let mut post: Vec<f64> = log_post.iter().map(|&lp| (lp - max).exp()).collect();
    let sum: f64 = post.iter().sum();
    for p in &mut post {
        *p /= sum;
    }
    Ok(ProbVec::new(post)?)
}

/// Posterior moment tensor `E[w^{⊗t} | x]`.
///
/// Pure priors are enumerated exactly (the tensor is diagonal with the
/// posterior on its diagonal); every other prior goes through SNIS with
/// `cfg.n_samples` prior draws and reports its ESS.
pub fn posterior_moment_tensor(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    t: usize,
    cfg: &OracleConfig,
) -> Result<PosteriorTensor, OracleError> {
    if t == 0 {
        return Err(param_err("tensor order t must be at least 1"));
    }
    let k = a.num_topics();
    if let PriorSpec::Pure = prior {
        let post = pure_posterior(a, x)?;
        let mut tensor = MomentTensor::zeros(t, k)?;
        for topic in 0..k {
            let idx = vec![topic; t];
            let flat = tensor.flat_index(&idx)?;
            tensor.as_mut_slice()[flat] = post.get(topic);
        }
        return Ok(PosteriorTensor { tensor, estimator: Estimator::Exact });
    }
    let (tensor, ess) = snis_moment(a, prior, x, t, cfg)?;
    let low_ess = ess < cfg.resample_threshold * cfg.n_samples as f64;
    Ok(PosteriorTensor {
        tensor,
        estimator: Estimator::Snis { n_samples: cfg.n_samples, ess, low_ess },
    })
}

/// Prior moment tensor `E[w^{⊗t}]`: exact for the pure prior (diagonal
/// `1/K`), Monte-Carlo otherwise.
///
/// The Monte-Carlo path reuses the SNIS machinery on an empty document
/// (whose likelihood is constant), so with a shared seed the prior and
/// posterior estimates of an uninformative document coincide exactly.
pub fn prior_moment_tensor(
    prior: &PriorSpec,
    k: usize,
    t: usize,
    cfg: &OracleConfig,
) -> Result<PosteriorTensor, OracleError> {
    if t == 0 {
        return Err(param_err("tensor order t must be at least 1"));
    }
    if let PriorSpec::Pure = prior {
        let mut tensor = MomentTensor::zeros(t, k)?;
        let p = 1.0 / k as f64;
        for topic in 0..k {
            let idx = vec![topic; t];
            let flat = tensor.flat_index(&idx)?;
            tensor.as_mut_slice()[flat] = p;
        }
        return Ok(PosteriorTensor { tensor, estimator: Estimator::Exact });
    }
    let prepared = PreparedPrior::new(prior, k)?;
    let (tensor, ess) = snis_weighted_moment(&prepared, &[], k, t, cfg)?;
    let low_ess = ess < cfg.resample_threshold * cfg.n_samples as f64;
    Ok(PosteriorTensor {
        tensor,
        estimator: Estimator::Snis { n_samples: cfg.n_samples, ess, low_ess },
    })
}

/// SNIS estimate of `E[w^{⊗t} | x]` with the prior as proposal.
fn snis_moment(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    t: usize,
    cfg: &OracleConfig,
) -> Result<(MomentTensor, f64), OracleError> {
    let k = a.num_topics();
    if x.vocab_size() as usize != a.vocab_size() {
        return Err(param_err(format!(
            "document vocabulary {} does not match matrix V={}",
            x.vocab_size(),
            a.vocab_size()
        )));
    }
    let prepared = PreparedPrior::new(prior, k)?;
    // Rows of A for the distinct words of x, with their counts: the only
    // part of the likelihood that varies across samples.
    let sparse = x.counts_sparse();
    let likelihood_terms: Vec<(Vec<f64>, f64)> = sparse
        .iter()
        .map(|&(word, count)| (a.matrix().row(word as usize).to_vec(), f64::from(count)))
        .collect();
    snis_weighted_moment_terms(&prepared, &likelihood_terms, k, t, cfg)
}

/// SNIS with likelihood terms given as `(A[v, ·] row, count)` pairs; an
/// empty list makes all weights equal (prior moments).
fn snis_weighted_moment(
    prepared: &PreparedPrior,
    likelihood_terms: &[(Vec<f64>, f64)],
    k: usize,
    t: usize,
    cfg: &OracleConfig,
) -> Result<(MomentTensor, f64), OracleError> {
    snis_weighted_moment_terms(prepared, likelihood_terms, k, t, cfg)
}

struct ChunkPartial {
    /// Max log-weight inside the chunk (the shift).
    max_lw: f64,
    /// `Σ exp(lw − max)`.
    s1: f64,
    /// `Σ exp(2(lw − max))`.
    s2: f64,
    /// `Σ exp(lw − max) · w^{⊗t}` flattened.
    tensor: Vec<f64>,
}

fn snis_weighted_moment_terms(
    prepared: &PreparedPrior,
    likelihood_terms: &[(Vec<f64>, f64)],
    k: usize,
    t: usize,
    cfg: &OracleConfig,
) -> Result<(MomentTensor, f64), OracleError> {
    if cfg.n_samples == 0 {
        return Err(param_err("n_samples must be positive"));
    }
    let tensor_len = k
        .checked_pow(t as u32)
        .ok_or_else(|| param_err(format!("K^t overflows for K={k}, t={t}")))?;
    let n_chunks = cfg.n_samples.div_ceil(SNIS_CHUNK);
    let partials: Vec<Result<ChunkPartial, OracleError>> = (0..n_chunks)
        .into_par_iter()
        .map(|chunk| {
            let start = chunk * SNIS_CHUNK;
            let count = SNIS_CHUNK.min(cfg.n_samples - start);
            let mut rng = stream_rng(cfg.seed, chunk as u64);
            let mut w = vec![0.0f64; k];
            let mut scratch = Vec::new();
            let mut lws = Vec::with_capacity(count);
            let mut draws = Vec::with_capacity(count * k);
            for _ in 0..count {
                prepared.sample_into(&mut rng, &mut w, &mut scratch)?;
                let mut lw = 0.0f64;
                for (row, c) in likelihood_terms {
                    let p = dot(row, &w);
                    lw += c * p.ln();
                }
                lws.push(lw);
                draws.extend_from_slice(&w);
            }
            let max_lw = lws.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut partial = ChunkPartial { max_lw, s1: 0.0, s2: 0.0, tensor: vec![0.0; tensor_len] };
            if max_lw.is_finite() {
                for (i, &lw) in lws.iter().enumerate() {
                    let u = (lw - max_lw).exp();
                    if u == 0.0 {
                        continue;
                    }
                    partial.s1 += u;
                    partial.s2 += u * u;
                    accumulate_outer_power(&mut partial.tensor, &draws[i * k..(i + 1) * k], t, u);
                }
            }
            Ok(partial)
        })
        .collect();

    // Merge in chunk order so the result is schedule-independent.
    let mut max_lw = f64::NEG_INFINITY;
    let mut s1 = 0.0f64;
    let mut s2 = 0.0f64;
    let mut tensor = vec![0.0f64; tensor_len];
    for partial in partials {
        let p = partial?;
        if !p.max_lw.is_finite() || p.s1 == 0.0 {
            continue;
        }
        if p.max_lw <= max_lw {
            let scale = (p.max_lw - max_lw).exp();
            s1 += p.s1 * scale;
            s2 += p.s2 * scale * scale;
            for (acc, v) in tensor.iter_mut().zip(&p.tensor) {
                *acc += v * scale;
            }
        } else {
            let scale = (max_lw - p.max_lw).exp();
            s1 = s1 * scale + p.s1;
            s2 = s2 * scale * scale + p.s2;
            for (acc, v) in tensor.iter_mut().zip(&p.tensor) {
                *acc = *acc * scale + v;
            }
            max_lw = p.max_lw;
        }
    }
    if !(s1 > 0.0) {
        return Err(OracleError::DegenerateLikelihood {
            context: "all importance weights vanished".into(),
        });
    }
    for v in &mut tensor {
        *v /= s1;
    }
    let ess = s1 * s1 / s2;
    Ok((MomentTensor::from_vec(t, k, tensor)?, ess))
}

/// Adds `u · w^{⊗t}` to `buf` (flattened, last index fastest).
fn accumulate_outer_power(buf: &mut [f64], w: &[f64], t: usize, u: f64) {
    let k = w.len();
    match t {
        1 => {
            for (acc, &wi) in buf.iter_mut().zip(w) {
                *acc += u * wi;
            }
        }
        2 => {
            for (i, &wi) in w.iter().enumerate() {
                let uw = u * wi;
                let row = &mut buf[i * k..(i + 1) * k];
                for (acc, &wj) in row.iter_mut().zip(w) {
                    *acc += uw * wj;
                }
            }
        }
        _ => {
            // General order: walk flat indices, maintaining the product of
            // prefix factors via the mixed-radix decomposition.
            let mut idx = vec![0usize; t];
            for (flat, acc) in buf.iter_mut().enumerate() {
                crate::linalg::unflatten(flat, k, &mut idx);
                let mut prod = u;
                for &z in &idx {
                    prod *= w[z];
                }
                *acc += prod;
            }
        }
    }
}

/// The flattened row of `A^{⊗t}` addressed by a word tuple: entry `z` is
/// `∏_i A[tuple_i, z_i]`, laid out last-index-fastest over `K^t`.
pub fn atilde_row(a: &TopicWordMatrix, tuple: &[u32]) -> Result<Vec<f64>, OracleError> {
    if tuple.is_empty() {
        return Err(param_err("word tuple must be nonempty"));
    }
    let v = a.vocab_size() as u32;
    if let Some(&w) = tuple.iter().find(|&&w| w >= v) {
        return Err(OracleError::Gen(GenError::WordOutOfRange { word: w, vocab: v }));
    }
    let mut row = vec![1.0f64];
    for &word in tuple {
        let a_row = a.matrix().row(word as usize);
        let mut next = Vec::with_capacity(row.len() * a_row.len());
        for &r in &row {
            for &av in a_row {
                next.push(r * av);
            }
        }
        row = next;
    }
    Ok(row)
}

/// The population-optimal reconstruction predictor
/// `f*(x) = (A ⊗ … ⊗ A) vec(W_post)`: a distribution over `V^t` word
/// tuples, flattened last-index-fastest.
///
/// Computed by `t` successive mode products with `A` (never materializing
/// the `V^t x K^t` Kronecker factor), which is algebraically identical to
/// the Kronecker form; for `t = 2` it is `vec(A W_post Aᵀ)`.
pub fn ideal_reconstruct_predictor(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    t: usize,
    cfg: &OracleConfig,
) -> Result<(ProbVec, Estimator), OracleError> {
    let v = a.vocab_size();
    let requested = (v as u128).pow(t as u32);
    if requested > MAX_PREDICTOR_ENTRIES as u128 {
        return Err(OracleError::TooLarge { requested, cap: MAX_PREDICTOR_ENTRIES });
    }
    let post = posterior_moment_tensor(a, prior, x, t, cfg)?;
    let probs = kron_apply(a.matrix(), post.tensor.as_slice(), t)?;
    Ok((ProbVec::new(probs)?, post.estimator))
}

/// Applies `A^{⊗t}` to a flat tensor over `K^t` via `t` mode products,
/// never materializing the `V^t x K^t` Kronecker factor.
///
/// Each round views the flat data as a `(rest, K)` matrix whose columns are
/// the not-yet-contracted last axis, multiplies by `Aᵀ`, and transposes.
/// The transpose rotates the freshly produced `V`-sized axis to the front
/// and exposes the next `K`-sized axis as the fastest one, so after `t`
/// rounds the axes read `(y₁, …, y_t)` in the original order.
pub(crate) fn kron_apply(a: &Matrix, flat: &[f64], t: usize) -> Result<Vec<f64>, OracleError> {
    let k = a.cols();
    if k.checked_pow(t as u32) != Some(flat.len()) || t == 0 {
        return Err(param_err(format!(
            "flat tensor has {} entries, expected K^t with K={k}, t={t}",
            flat.len()
        )));
    }
    let mut data = flat.to_vec();
    for _ in 0..t {
        let rows = data.len() / k;
        let m = Matrix::new(rows, k, data)?;
        let contracted = m.matmul_nt(a)?; // (rest, V)
        data = contracted.transpose().into_vec(); // axis rotation
    }
    Ok(data)
}

/// The population-optimal contrastive score against a landmark tuple:
/// `g*(x, l) = P(l | x) / P(l) = 𝒜[l]ᵀ vec(W_post) / 𝒜[l]ᵀ vec(M_prior)`.
///
/// Both the posterior and prior moments are estimated under `cfg` (sharing
/// its seed), so an uninformative document yields exactly `g = 1`.
pub fn ideal_contrastive_g(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    landmark: &[u32],
    cfg: &OracleConfig,
) -> Result<f64, OracleError> {
    let t = landmark.len();
    let row = atilde_row(a, landmark)?;
    let post = posterior_moment_tensor(a, prior, x, t, cfg)?;
    let prior_m = prior_moment_tensor(prior, a.num_topics(), t, cfg)?;
    let denom = dot(&row, prior_m.tensor.as_slice());
    if !(denom > 0.0) {
        return Err(OracleError::DegenerateLandmark {
            context: format!("landmark {landmark:?} has marginal probability {denom:.3e}"),
        });
    }
    Ok(dot(&row, post.tensor.as_slice()) / denom)
}

/// Deterministic posterior moments by simplex-grid quadrature, for `K ≤ 3`
/// LDA models (and trivially the pure prior via enumeration elsewhere).
///
/// The simplex is triangulated at resolution `step` and the integrand is
/// evaluated at cell centroids, which stay strictly inside the simplex, so
/// Dirichlet densities with concentration below one are never evaluated at
/// their boundary singularity. This oracle contains no randomness; it
/// exists to validate the SNIS estimator on small problems.
pub fn grid_posterior_moment(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    x: &Document,
    t: usize,
    step: f64,
) -> Result<MomentTensor, OracleError> {
    let k = a.num_topics();
    if k > 3 {
        return Err(OracleError::Unsupported {
            context: format!("grid quadrature supports K <= 3, got K={k}"),
        });
    }
    if !(step > 0.0 && step < 1.0) {
        return Err(param_err(format!("step must lie in (0, 1), got {step}")));
    }
    let alpha = match prior {
        PriorSpec::Lda { alpha_doc } => alpha_doc / k as f64,
        other => {
            return Err(OracleError::Unsupported {
                context: format!(
                    "grid quadrature implements the Dirichlet density only, got prior '{}'",
                    other.tag()
                ),
            })
        }
    };
    let sparse = x.counts_sparse();
    let terms: Vec<(Vec<f64>, f64)> = sparse
        .iter()
        .map(|&(word, count)| (a.matrix().row(word as usize).to_vec(), f64::from(count)))
        .collect();

    let n = (1.0 / step).round() as usize;
    let h = 1.0 / n as f64;
    let mut points: Vec<Vec<f64>> = Vec::new();
    match k {
        1 => points.push(vec![1.0]),
        2 => {
            for i in 0..n {
                let u = (i as f64 + 0.5) * h;
                points.push(vec![u, 1.0 - u]);
            }
        }
        3 => {
            for i in 0..n {
                for j in 0..n - i {
                    let (u, v) = ((i as f64 + 1.0 / 3.0) * h, (j as f64 + 1.0 / 3.0) * h);
                    points.push(vec![u, v, 1.0 - u - v]);
                    if i + j + 2 <= n {
                        let (u, v) = ((i as f64 + 2.0 / 3.0) * h, (j as f64 + 2.0 / 3.0) * h);
                        points.push(vec![u, v, 1.0 - u - v]);
                    }
                }
            }
        }
        _ => unreachable!("guarded above"),
    }

    let mut log_weights = Vec::with_capacity(points.len());
    for w in &points {
        let mut lw = 0.0;
        for &wi in w {
            lw += (alpha - 1.0) * wi.ln();
        }
        for (row, c) in &terms {
            lw += c * dot(row, w).ln();
        }
        log_weights.push(lw);
    }
    let max_lw = log_weights.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    if !max_lw.is_finite() {
        return Err(OracleError::DegenerateLikelihood {
            context: "grid quadrature weights all vanished".into(),
        });
    }
    let tensor_len = k.pow(t as u32);
    let mut tensor = vec![0.0; tensor_len];
    let mut total = 0.0;
    for (w, &lw) in points.iter().zip(&log_weights) {
        let u = (lw - max_lw).exp();
        if u == 0.0 {
            continue;
        }
        total += u;
        accumulate_outer_power(&mut tensor, w, t, u);
    }
    for v in &mut tensor {
        *v /= total;
    }
    Ok(MomentTensor::from_vec(t, k, tensor)?)
}
