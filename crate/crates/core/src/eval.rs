//! Posterior recovery from predictor outputs and everything needed to score
//! it: total-variation metrics with the benchmark's confidence-interval
//! convention, major-topic accuracy, the robustness bound audit, the
//! generalized-Pinsker check, and misspecified-inference comparisons.
//!
//! The central identity is that an optimal reconstruction predictor outputs
//! `f*(x) = (A ⊗ … ⊗ A) vec(E[w^{⊗t} | x])`, so applying the Kronecker
//! pseudo-inverse recovers the posterior moment tensor exactly
//! ([`recover_posterior`]); trained predictors recover it approximately,
//! with the excess-risk bound
//! `E_x[(E[P(w)|x] − θᵀf(x))²] ≤ 2‖β‖² κ(A†)^{2t} ε` quantifying how the
//! training gap `ε` propagates ([`robustness_audit`]). Because recovery
//! never consults the prior, it can be compared against posterior inference
//! under deliberately wrong priors ([`misspecification_benchmark`]), which
//! is the benchmark's headline table.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::generative::{Document, GenError, PriorSpec, TopicWordMatrix};
use crate::linalg::{
    l1_cond_number, pinv_left, solve_spd, tv_from_slices, LinalgError, Matrix, MomentTensor,
    ProbVec, DEFAULT_RANK_TOL,
};
use crate::oracle::{
    ideal_reconstruct_predictor, kron_apply, posterior_moment_tensor, OracleConfig, OracleError,
};
use crate::reconstruct::{MlpModel, ReconstructError};
use crate::rng::{derive_seed, derive_seed_indexed, stream_rng};
use crate::util::{dot, mean_ci95};

use rand::Rng;

/// Errors from recovery and evaluation.
#[derive(Debug, Error)]
pub enum EvalError {
    /// Bad configuration or argument combination.
    #[error("invalid evaluation request: {context}")]
    InvalidConfig { context: String },
    /// Mismatched dimensions between predictors, documents, and matrices.
    #[error("shape mismatch: {context}")]
    ShapeMismatch { context: String },
    /// A recovery lost all its probability mass to clipping.
    #[error("degenerate recovery: {context}")]
    DegenerateRecovery { context: String },
    /// Normal equations singular at `ridge = 0`.
    #[error("probe normal equations are singular: {context}; try a positive ridge")]
    Conditioning { context: String },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Gen(#[from] GenError),
    #[error(transparent)]
    Reconstruct(#[from] ReconstructError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn config_err(context: impl Into<String>) -> EvalError {
    EvalError::InvalidConfig { context: context.into() }
}

fn shape_err(context: impl Into<String>) -> EvalError {
    EvalError::ShapeMismatch { context: context.into() }
}

/// Anything that maps a document to a distribution over `V^t` word tuples.
///
/// Implemented by trained reconstruction models, by the exact posterior
/// predictive ([`IdealPredictor`]), and by the uniform baseline
/// ([`UniformPredictor`]); recovery and evaluation are written against this
/// trait so every predictor goes through one code path.
pub trait Predictor: Sync {
    /// Predicted `t`-word tuple distribution (length `V^t`, last word
    /// fastest).
    fn predict(&self, doc: &Document) -> Result<ProbVec, EvalError>;
    /// Tuple order `t`.
    fn t(&self) -> usize;
    fn vocab_size(&self) -> usize;
}

impl Predictor for MlpModel {
    fn predict(&self, doc: &Document) -> Result<ProbVec, EvalError> {
        Ok(self.forward(&doc.counts_dense())?)
    }

    fn t(&self) -> usize {
        MlpModel::t(self)
    }

    fn vocab_size(&self) -> usize {
        MlpModel::vocab_size(self)
    }
}

/// The population-optimal predictor `f*(x) = 𝒜 vec(E[w^{⊗t}|x])`, evaluated
/// through the posterior oracle. Exact for the pure prior; Monte-Carlo
/// otherwise, with the per-document seed derived from the document content
/// so repeated calls agree.
#[derive(Debug, Clone)]
pub struct IdealPredictor {
    a: TopicWordMatrix,
    prior: PriorSpec,
    t: usize,
    cfg: OracleConfig,
}

impl IdealPredictor {
    pub fn new(a: TopicWordMatrix, prior: PriorSpec, t: usize, cfg: OracleConfig) -> Self {
        Self { a, prior, t, cfg }
    }
}

fn document_stream(words: &[u32]) -> u64 {
    // FNV-1a over the word id bytes: a stable per-document stream index.
    let mut h: u64 = 0xcbf29ce484222325;
    for &w in words {
        for b in w.to_le_bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x100000001b3);
        }
    }
    h
}

impl Predictor for IdealPredictor {
    fn predict(&self, doc: &Document) -> Result<ProbVec, EvalError> {
        let cfg = OracleConfig {
            seed: derive_seed_indexed(self.cfg.seed, "ideal-doc", document_stream(doc.words())),
            ..self.cfg
        };
        let (f, _) = ideal_reconstruct_predictor(&self.a, &self.prior, doc, self.t, &cfg)?;
        Ok(f)
    }

    fn t(&self) -> usize {
        self.t
    }

    fn vocab_size(&self) -> usize {
        self.a.vocab_size()
    }
}

/// The uniform distribution over `V^t` tuples, ignoring the document.
#[derive(Debug, Clone)]
pub struct UniformPredictor {
    vocab: usize,
    t: usize,
}

impl UniformPredictor {
    pub fn new(vocab: usize, t: usize) -> Result<Self, EvalError> {
        if vocab == 0 || t == 0 {
            return Err(config_err("uniform predictor needs V >= 1 and t >= 1"));
        }
        vocab
            .checked_pow(t as u32)
            .ok_or_else(|| config_err("output dimension V^t overflows"))?;
        Ok(Self { vocab, t })
    }
}

impl Predictor for UniformPredictor {
    fn predict(&self, _doc: &Document) -> Result<ProbVec, EvalError> {
        let n = self.vocab.pow(self.t as u32);
        Ok(ProbVec::from_normalizing(vec![1.0; n])?)
    }

    fn t(&self) -> usize {
        self.t
    }

    fn vocab_size(&self) -> usize {
        self.vocab
    }
}

/// A recovered posterior moment tensor, in two readings: the raw linear
/// recovery (what the theorems speak about) and a clipped-and-renormalized
/// copy for probability-space metrics. Estimation noise can push raw
/// entries slightly outside `[0, 1]`; metrics need a simplex point, the
/// robustness audit needs the untouched linear algebra, so both are kept.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorRecovery {
    raw: MomentTensor,
    normalized: MomentTensor,
}

impl PosteriorRecovery {
    /// `𝒜† f`, symmetrized for `t ≥ 2`, no clipping.
    pub fn raw(&self) -> &MomentTensor {
        &self.raw
    }

    /// Entries clipped to `[0, 1]` and rescaled to total mass 1.
    pub fn normalized(&self) -> &MomentTensor {
        &self.normalized
    }

    /// The normalized tensor as a probability vector over `K^t` (for
    /// `t = 1` this is the recovered posterior mean itself).
    pub fn normalized_probs(&self) -> Result<ProbVec, EvalError> {
        Ok(ProbVec::from_normalizing(self.normalized.as_slice().to_vec())?)
    }
}

/// Recovers the posterior moment tensor from a predictor output:
/// `vec(W_post) = (A†)^{⊗t} f`, which equals `(A^{⊗t})† f` because the
/// pseudo-inverse of a Kronecker product factorizes. For `t = 1` this is
/// the familiar `A† f(x)`; `t ≥ 2` results are symmetrized.
///
/// Fails with the underlying rank error when `A` is not full column rank.
pub fn recover_posterior(
    a: &TopicWordMatrix,
    f_out: &ProbVec,
    t: usize,
) -> Result<PosteriorRecovery, EvalError> {
    let pinv = pinv_left(a.matrix(), DEFAULT_RANK_TOL)?;
    recover_with_pinv(&pinv, a.num_topics(), f_out, t)
}

/// [`recover_posterior`] with a pre-factorized `A†`, for callers scoring
/// many documents against one matrix.
pub fn recover_with_pinv(
    pinv: &Matrix,
    k: usize,
    f_out: &ProbVec,
    t: usize,
) -> Result<PosteriorRecovery, EvalError> {
    if t == 0 {
        return Err(config_err("tensor order t must be at least 1"));
    }
    let v = pinv.cols();
    let expected = v
        .checked_pow(t as u32)
        .ok_or_else(|| config_err("predictor dimension V^t overflows"))?;
    if f_out.len() != expected {
        return Err(shape_err(format!(
            "predictor output has {} entries, expected V^t = {expected}",
            f_out.len()
        )));
    }
    let flat = kron_apply(pinv, f_out.as_slice(), t)?;
    let tensor = MomentTensor::from_vec(t, k, flat)?;
    let raw = if t >= 2 { tensor.symmetrize() } else { tensor };
    let mut clipped = raw.clone();
    for x in clipped.as_mut_slice() {
        *x = x.clamp(0.0, 1.0);
    }
    let mass: f64 = clipped.as_slice().iter().sum();
    if !(mass > 0.0) {
        return Err(EvalError::DegenerateRecovery {
            context: "all recovered mass clipped away".into(),
        });
    }
    for x in clipped.as_mut_slice() {
        *x /= mass;
    }
    Ok(PosteriorRecovery { raw, normalized: clipped })
}

/// Indices of the `top_k` largest entries, ties broken toward the lower
/// index (sort by descending value, then ascending index).
pub fn top_k_indices(p: &[f64], top_k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&i, &j| p[j].partial_cmp(&p[i]).unwrap_or(std::cmp::Ordering::Equal).then(i.cmp(&j)));
    idx.truncate(top_k);
    idx
}

/// Per-document top-`k` overlap fractions `|top_k(recovered) ∩ top_k(truth)| / k`.
pub fn major_topic_overlaps(
    recovered: &[ProbVec],
    truth: &[ProbVec],
    top_k: usize,
) -> Result<Vec<f64>, EvalError> {
    if recovered.len() != truth.len() {
        return Err(shape_err(format!(
            "{} recovered documents vs {} ground-truth documents",
            recovered.len(),
            truth.len()
        )));
    }
    if top_k == 0 {
        return Err(config_err("top_k must be at least 1"));
    }
    let mut overlaps = Vec::with_capacity(recovered.len());
    for (r, g) in recovered.iter().zip(truth) {
        if r.len() != g.len() {
            return Err(shape_err(format!(
                "recovered dimension {} vs ground-truth dimension {}",
                r.len(),
                g.len()
            )));
        }
        if top_k > r.len() {
            return Err(config_err(format!(
                "top_k = {top_k} exceeds the topic count {}",
                r.len()
            )));
        }
        let a = top_k_indices(r.as_slice(), top_k);
        let b = top_k_indices(g.as_slice(), top_k);
        let hits = a.iter().filter(|i| b.contains(i)).count();
        overlaps.push(hits as f64 / top_k as f64);
    }
    Ok(overlaps)
}

/// Mean top-`k` overlap across documents.
pub fn major_topic_accuracy(
    recovered: &[ProbVec],
    truth: &[ProbVec],
    top_k: usize,
) -> Result<f64, EvalError> {
    let overlaps = major_topic_overlaps(recovered, truth, top_k)?;
    if overlaps.is_empty() {
        return Err(config_err("accuracy over an empty document list"));
    }
    Ok(overlaps.iter().sum::<f64>() / overlaps.len() as f64)
}

/// A degree-`≤ t` polynomial target `P(w)`, stored as coefficients `β` over
/// all `K^t` multi-indices so that `E[P(w) | x] = ⟨β, vec(W_post)⟩` and the
/// linear readout from predictor space is `θ = (𝒜†)ᵀ β`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolynomialTarget {
    k: usize,
    t: usize,
    beta: Vec<f64>,
}

impl PolynomialTarget {
    /// Arbitrary coefficients over `K^t` multi-indices (last index fastest).
    pub fn from_beta(k: usize, t: usize, beta: Vec<f64>) -> Result<Self, EvalError> {
        if k == 0 || t == 0 {
            return Err(config_err("polynomial target needs K >= 1 and t >= 1"));
        }
        let expected = k
            .checked_pow(t as u32)
            .ok_or_else(|| config_err("coefficient dimension K^t overflows"))?;
        if beta.len() != expected {
            return Err(shape_err(format!(
                "beta has {} coefficients, expected K^t = {expected}",
                beta.len()
            )));
        }
        if beta.iter().any(|b| !b.is_finite()) {
            return Err(config_err("beta must be finite"));
        }
        Ok(Self { k, t, beta })
    }

    /// The degree-1 target `P(w) = Σ c_z w_z`, lifted to order `t` via
    /// `P(w) = (Σ c_z w_z)(Σ_j w_j)^{t−1}` — exact on the simplex, where
    /// `Σ_j w_j = 1` — so `β[z₁…z_t] = c[z₁]`.
    pub fn linear(k: usize, t: usize, c: &[f64]) -> Result<Self, EvalError> {
        if c.len() != k {
            return Err(shape_err(format!("{} coefficients for K = {k}", c.len())));
        }
        let expected = k
            .checked_pow(t as u32)
            .ok_or_else(|| config_err("coefficient dimension K^t overflows"))?;
        let block = expected / k;
        let mut beta = Vec::with_capacity(expected);
        for &ci in c {
            beta.extend(std::iter::repeat(ci).take(block));
        }
        Self::from_beta(k, t, beta)
    }

    /// The coordinate target `P(w) = w_z`, lifted to order `t`.
    pub fn coordinate(k: usize, t: usize, z: usize) -> Result<Self, EvalError> {
        if z >= k {
            return Err(config_err(format!("coordinate {z} out of range for K = {k}")));
        }
        let mut c = vec![0.0; k];
        c[z] = 1.0;
        Self::linear(k, t, &c)
    }

    /// The monomial `P(w) = ∏_i w_{z_i}` with `|z| = t`.
    pub fn monomial(k: usize, t: usize, indices: &[usize]) -> Result<Self, EvalError> {
        if indices.len() != t {
            return Err(shape_err(format!(
                "monomial has {} indices, expected t = {t}",
                indices.len()
            )));
        }
        if indices.iter().any(|&z| z >= k) {
            return Err(config_err(format!("monomial indices {indices:?} out of range")));
        }
        let expected = k
            .checked_pow(t as u32)
            .ok_or_else(|| config_err("coefficient dimension K^t overflows"))?;
        let flat = indices.iter().fold(0usize, |acc, &z| acc * k + z);
        let mut beta = vec![0.0; expected];
        beta[flat] = 1.0;
        Self::from_beta(k, t, beta)
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn beta(&self) -> &[f64] {
        &self.beta
    }

    /// `‖β‖₂`, the norm entering the robustness bound.
    pub fn beta_norm(&self) -> f64 {
        dot(&self.beta, &self.beta).sqrt()
    }

    /// Evaluates `P(w) = Σ_multi β_multi ∏_i w_{multi_i}` at a point.
    pub fn value(&self, w: &[f64]) -> Result<f64, EvalError> {
        if w.len() != self.k {
            return Err(shape_err(format!("point has {} entries for K = {}", w.len(), self.k)));
        }
        let mut total = 0.0;
        let mut multi = vec![0usize; self.t];
        for (flat, &b) in self.beta.iter().enumerate() {
            if b != 0.0 {
                let mut rem = flat;
                for slot in (0..self.t).rev() {
                    multi[slot] = rem % self.k;
                    rem /= self.k;
                }
                total += b * multi.iter().map(|&z| w[z]).product::<f64>();
            }
        }
        Ok(total)
    }

    /// `E[P(w) | x]` read off a posterior moment tensor.
    pub fn expectation(&self, w_post: &MomentTensor) -> Result<f64, EvalError> {
        if w_post.order() != self.t || w_post.side() != self.k {
            return Err(shape_err(format!(
                "tensor of order {} side {} for a target of order {} over K = {}",
                w_post.order(),
                w_post.side(),
                self.t,
                self.k
            )));
        }
        Ok(dot(&self.beta, w_post.as_slice()))
    }

    /// The predictor-space readout `θ = (𝒜†)ᵀ β = (A†ᵀ)^{⊗t} β`, a vector
    /// over `V^t` with `θᵀ f(x) ≈ E[P(w) | x]`.
    pub fn theta(&self, a: &TopicWordMatrix) -> Result<Vec<f64>, EvalError> {
        if a.num_topics() != self.k {
            return Err(shape_err(format!(
                "matrix has K = {} topics, target is over K = {}",
                a.num_topics(),
                self.k
            )));
        }
        let pinv_t = pinv_left(a.matrix(), DEFAULT_RANK_TOL)?.transpose();
        Ok(kron_apply(&pinv_t, &self.beta, self.t)?)
    }
}

/// Fit of a linear readout on representation rows.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeFit {
    pub theta: Vec<f64>,
    /// Root-mean-square residual on the fitting rows.
    pub train_rms: f64,
    /// Root-mean-square residual on the held-out rows (`None` when the
    /// dataset was too small to hold anything out).
    pub holdout_rms: Option<f64>,
}

/// Least-squares fit `θ = argmin ‖Xθ − y‖² + ridge·‖θ‖²` with diagnostics.
///
/// The last 20% of the rows (at least one, when there are at least five)
/// are held out and scored but not fitted; shuffle beforehand if the rows
/// are ordered. `ridge = 0` needs full-rank normal equations and at least
/// `dim(θ)` fitting rows, otherwise a conditioning error points at the
/// ridge.
pub fn linear_probe_fit(
    representations: &Matrix,
    targets: &[f64],
    ridge: f64,
) -> Result<ProbeFit, EvalError> {
    let n = representations.rows();
    let d = representations.cols();
    if targets.len() != n {
        return Err(shape_err(format!("{} targets for {n} representation rows", targets.len())));
    }
    if n == 0 {
        return Err(config_err("probe fit needs at least one row"));
    }
    if !(ridge.is_finite() && ridge >= 0.0) {
        return Err(config_err("ridge must be finite and nonnegative"));
    }
    let holdout = n / 5;
    let fit_rows = n - holdout;
    // Normal equations on the fitting rows only.
    let x_fit = Matrix::new(fit_rows, d, representations.as_slice()[..fit_rows * d].to_vec())?;
    let mut normal = x_fit.matmul_tn(&x_fit)?;
    for i in 0..d {
        let v = normal.get(i, i) + ridge;
        normal.set(i, i, v);
    }
    let rhs = x_fit.matvec_t(&targets[..fit_rows])?;
    let theta = solve_spd(&normal, &rhs).map_err(|e| {
        if ridge == 0.0 {
            EvalError::Conditioning { context: e.to_string() }
        } else {
            EvalError::Linalg(e)
        }
    })?;
    let rms = |rows: std::ops::Range<usize>| -> f64 {
        let count = rows.len();
        let mut acc = 0.0;
        for i in rows {
            let pred = dot(representations.row(i), &theta);
            let r = pred - targets[i];
            acc += r * r;
        }
        (acc / count as f64).sqrt()
    };
    let train_rms = rms(0..fit_rows);
    let holdout_rms = (holdout > 0).then(|| rms(fit_rows..n));
    Ok(ProbeFit { theta, train_rms, holdout_rms })
}

/// Outcome of one generalized-Pinsker comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct PinskerCheck {
    /// `‖Bp − Bp*‖₁`.
    pub lhs: f64,
    /// `κ(B) · √(2 · KL(p ‖ p*))` (infinite when the KL diverges).
    pub rhs: f64,
    /// `lhs ≤ rhs + 1e-12`.
    pub holds: bool,
    /// The KL divergence was infinite, making the inequality vacuous.
    pub vacuous: bool,
}

/// Checks `‖Bp − Bp*‖₁ ≤ κ(B) √(2 KL(p ‖ p*))` for one pair and matrix.
///
/// The divergence direction is `KL(p ‖ p*)`; the inequality also holds
/// with the arguments swapped (Pinsker is symmetric in that both
/// directions dominate total variation), so callers probing the other
/// direction can simply swap `p` and `p*` — only the `Bp − Bp*` sign
/// flips, which the ℓ1 norm ignores.
pub fn pinsker_check(p: &ProbVec, p_star: &ProbVec, b: &Matrix) -> Result<PinskerCheck, EvalError> {
    if p.len() != p_star.len() {
        return Err(shape_err(format!(
            "distributions of lengths {} and {}",
            p.len(),
            p_star.len()
        )));
    }
    if b.cols() != p.len() {
        return Err(shape_err(format!(
            "matrix with {} columns against distributions of length {}",
            b.cols(),
            p.len()
        )));
    }
    let bp = b.matvec(p.as_slice())?;
    let bq = b.matvec(p_star.as_slice())?;
    let lhs: f64 = bp.iter().zip(&bq).map(|(x, y)| (x - y).abs()).sum();
    let kl = kl_divergence(p.as_slice(), p_star.as_slice());
    if !kl.is_finite() {
        return Ok(PinskerCheck { lhs, rhs: f64::INFINITY, holds: true, vacuous: true });
    }
    let rhs = l1_cond_number(b) * (2.0 * kl).sqrt();
    Ok(PinskerCheck { lhs, rhs, holds: lhs <= rhs + 1e-12, vacuous: false })
}

/// `KL(p ‖ q) = Σ p ln(p/q)`, with `0 ln(0/q) = 0` and `p > 0, q = 0`
/// yielding `+∞`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    debug_assert_eq!(p.len(), q.len());
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            if qi <= 0.0 {
                return f64::INFINITY;
            }
            acc += pi * (pi / qi).ln();
        }
    }
    acc.max(0.0)
}

/// The excess-risk audit: how close `θᵀf(x)` comes to the true conditional
/// expectation, against the bound `2‖β‖² κ(A†)^{2t} ε`.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustnessReport {
    /// Excess risk estimate `L(f) − L(f*)`: mean per-document
    /// `KL(f*(x) ‖ f(x))`, the exact excess cross-entropy.
    pub epsilon: f64,
    /// `‖β‖₂` of the polynomial target.
    pub beta_norm: f64,
    /// `κ(A†)`, the ℓ1 condition number of the pseudo-inverse.
    pub kappa: f64,
    pub t: usize,
    /// `2‖β‖² κ(A†)^{2t} ε`.
    pub bound: f64,
    /// `E_x[(E[P(w)|x] − θᵀf(x))²]` over the test documents.
    pub lhs: f64,
    /// `lhs ≤ bound + 1e-12` on the full test set.
    pub holds: bool,
    /// Fraction of bootstrap resamples on which the inequality held.
    pub holds_fraction: f64,
    pub n_docs: usize,
    /// Set when a (numerically) negative ε estimate was clipped to zero.
    pub epsilon_clipped: bool,
}

/// Audits the robustness bound on a test set.
///
/// Per document, the oracle supplies the posterior tensor (hence the true
/// `E[P(w)|x] = ⟨β, vec(W_post)⟩`) and the ideal predictive `f*`; the
/// predictor supplies `f`. The readout `θᵀf` is evaluated as
/// `⟨β, 𝒜†f⟩` — the same number as materializing `θ = (𝒜†)ᵀβ`, without the
/// `V^t`-dimensional intermediate. `bootstrap` resamples of the document
/// set (seeded from `cfg.seed`) gauge how stable the verdict is.
pub fn robustness_audit(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    predictor: &dyn Predictor,
    polynomial: &PolynomialTarget,
    test_docs: &[Document],
    cfg: &OracleConfig,
    bootstrap: usize,
) -> Result<RobustnessReport, EvalError> {
    if test_docs.is_empty() {
        return Err(config_err("robustness audit needs at least one test document"));
    }
    let t = predictor.t();
    if polynomial.t() != t || polynomial.k() != a.num_topics() {
        return Err(shape_err(format!(
            "target over K = {} order {} vs matrix K = {} and predictor t = {t}",
            polynomial.k(),
            polynomial.t(),
            a.num_topics()
        )));
    }
    let pinv = pinv_left(a.matrix(), DEFAULT_RANK_TOL)?;
    let kappa = l1_cond_number(&pinv);
    let per_doc: Vec<(f64, f64)> = test_docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| -> Result<(f64, f64), EvalError> {
            let doc_cfg = OracleConfig {
                seed: derive_seed_indexed(cfg.seed, "audit-doc", i as u64),
                ..*cfg
            };
            let (f_star, _) = ideal_reconstruct_predictor(a, prior, doc, t, &doc_cfg)?;
            let w_post = posterior_moment_tensor(a, prior, doc, t, &doc_cfg)?.tensor;
            let f = predictor.predict(doc)?;
            if f.len() != f_star.len() {
                return Err(shape_err(format!(
                    "predictor output length {} vs V^t = {}",
                    f.len(),
                    f_star.len()
                )));
            }
            let excess = kl_divergence(f_star.as_slice(), f.as_slice());
            let truth = polynomial.expectation(&w_post)?;
            let recovered = recover_with_pinv(&pinv, a.num_topics(), &f, t)?;
            let readout = polynomial.expectation(recovered.raw())?;
            let gap = truth - readout;
            Ok((excess, gap * gap))
        })
        .collect::<Result<Vec<_>, _>>()?;

    let n = per_doc.len() as f64;
    let eps_raw: f64 = per_doc.iter().map(|&(e, _)| e).sum::<f64>() / n;
    let epsilon_clipped = eps_raw < 0.0;
    let epsilon = eps_raw.max(0.0);
    let lhs: f64 = per_doc.iter().map(|&(_, g)| g).sum::<f64>() / n;
    let beta_norm = polynomial.beta_norm();
    let factor = 2.0 * beta_norm * beta_norm * kappa.powi(2 * t as i32);
    let bound = factor * epsilon;
    let holds = lhs <= bound + 1e-12;

    let mut held = 0usize;
    if bootstrap > 0 {
        let mut rng = stream_rng(derive_seed(cfg.seed, "bootstrap"), 0);
        for _ in 0..bootstrap {
            let mut eps_b = 0.0;
            let mut lhs_b = 0.0;
            for _ in 0..per_doc.len() {
                let (e, g) = per_doc[rng.gen_range(0..per_doc.len())];
                eps_b += e;
                lhs_b += g;
            }
            eps_b = (eps_b / n).max(0.0);
            lhs_b /= n;
            if lhs_b <= factor * eps_b + 1e-12 {
                held += 1;
            }
        }
    }
    let holds_fraction = if bootstrap > 0 { held as f64 / bootstrap as f64 } else { 1.0 };

    Ok(RobustnessReport {
        epsilon,
        beta_norm,
        kappa,
        t,
        bound,
        lhs,
        holds,
        holds_fraction,
        n_docs: per_doc.len(),
        epsilon_clipped,
    })
}

/// Writes the robustness CSV: `epsilon,beta_norm,kappa,t,bound,lhs,holds`.
pub fn write_robustness_csv(w: &mut impl Write, report: &RobustnessReport) -> std::io::Result<()> {
    writeln!(w, "epsilon,beta_norm,kappa,t,bound,lhs,holds")?;
    writeln!(
        w,
        "{},{},{},{},{},{},{}",
        report.epsilon, report.beta_norm, report.kappa, report.t, report.bound, report.lhs,
        report.holds
    )
}

/// One row of an evaluation table: a method scored against the ground-truth
/// posterior means on a shared document set.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    /// `"ssl"` for predictor recovery, `"oracle"` for assumed-prior
    /// inference, `"ideal"` for the oracle-backed predictor.
    pub method: String,
    /// Tag of the prior the documents were generated from.
    pub prior_true: String,
    /// Tag of the prior the method assumed (`"none"` for prior-free SSL
    /// recovery).
    pub prior_assumed: String,
    /// Benchmark α (topic-word concentration), carried as metadata.
    pub alpha: f64,
    pub n_docs: usize,
    pub tv_mean: f64,
    /// Half-width `1.96 · s / √N` of the 95% confidence interval.
    pub tv_ci95: f64,
    pub topk: usize,
    pub acc_mean: f64,
    pub acc_ci95: f64,
    pub seed: u64,
    /// Per-document TV distances backing the summary (not serialized).
    pub per_doc_tv: Vec<f64>,
}

/// Metadata and knobs shared by all rows of one benchmark table.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    /// Top-`k` size for major-topic accuracy.
    pub top_k: usize,
    /// α recorded in the report rows.
    pub alpha: f64,
    /// Seed recorded in the report rows and deriving the per-document
    /// oracle seeds.
    pub seed: u64,
    /// Oracle sampling configuration.
    pub oracle: OracleConfig,
}

fn assemble_report(
    method: &str,
    prior_true: &str,
    prior_assumed: &str,
    cfg: &BenchmarkConfig,
    per_doc_tv: Vec<f64>,
    overlaps: &[f64],
) -> EvalReport {
    let (tv_mean, tv_ci95) = mean_ci95(&per_doc_tv);
    let (acc_mean, acc_ci95) = mean_ci95(overlaps);
    EvalReport {
        method: method.to_string(),
        prior_true: prior_true.to_string(),
        prior_assumed: prior_assumed.to_string(),
        alpha: cfg.alpha,
        n_docs: per_doc_tv.len(),
        tv_mean,
        tv_ci95,
        topk: cfg.top_k,
        acc_mean,
        acc_ci95,
        seed: cfg.seed,
        per_doc_tv,
    }
}

/// Ground-truth posterior means under `prior` for every document, each on
/// its own derived oracle seed.
pub fn oracle_posterior_means(
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    docs: &[Document],
    cfg: &BenchmarkConfig,
    label: &str,
) -> Result<Vec<ProbVec>, EvalError> {
    docs.par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let doc_cfg = OracleConfig {
                seed: derive_seed_indexed(derive_seed(cfg.seed, label), "doc", i as u64),
                ..cfg.oracle
            };
            let tensor = posterior_moment_tensor(a, prior, doc, 1, &doc_cfg)?.tensor;
            Ok(ProbVec::from_normalizing(tensor.as_slice().to_vec())?)
        })
        .collect()
}

/// Prior-free recovered posterior means `A† f(x)` for every document.
pub fn recovered_posterior_means(
    a: &TopicWordMatrix,
    predictor: &dyn Predictor,
    docs: &[Document],
) -> Result<Vec<ProbVec>, EvalError> {
    if predictor.t() != 1 {
        return Err(config_err(
            "posterior-mean recovery needs a t = 1 predictor (order-1 moments)",
        ));
    }
    let pinv = pinv_left(a.matrix(), DEFAULT_RANK_TOL)?;
    docs.par_iter()
        .map(|doc| {
            let f = predictor.predict(doc)?;
            recover_with_pinv(&pinv, a.num_topics(), &f, 1)?.normalized_probs()
        })
        .collect()
}

/// The misspecification table: SSL recovery from the predictor, plus exact
/// posterior inference under each assumed prior, all scored by TV distance
/// and top-`k` overlap against the true-prior oracle on the same documents.
///
/// Row order: `ssl` first, then one `oracle` row per assumed prior in the
/// given order — stable for golden-file comparisons.
pub fn misspecification_benchmark(
    a: &TopicWordMatrix,
    true_prior: &PriorSpec,
    assumed_priors: &[PriorSpec],
    predictor: &dyn Predictor,
    test_docs: &[Document],
    cfg: &BenchmarkConfig,
) -> Result<Vec<EvalReport>, EvalError> {
    if test_docs.is_empty() {
        return Err(config_err("misspecification benchmark needs test documents"));
    }
    let truth = oracle_posterior_means(a, true_prior, test_docs, cfg, "truth")?;
    let mut reports = Vec::with_capacity(1 + assumed_priors.len());

    let ssl_means = recovered_posterior_means(a, predictor, test_docs)?;
    let ssl_tv: Vec<f64> = ssl_means
        .iter()
        .zip(&truth)
        .map(|(r, g)| tv_from_slices(r.as_slice(), g.as_slice()))
        .collect();
    let ssl_overlaps = major_topic_overlaps(&ssl_means, &truth, cfg.top_k)?;
    reports.push(assemble_report("ssl", true_prior.tag(), "none", cfg, ssl_tv, &ssl_overlaps));

    for assumed in assumed_priors {
        let means = oracle_posterior_means(a, assumed, test_docs, cfg, assumed.tag())?;
        let tv: Vec<f64> = means
            .iter()
            .zip(&truth)
            .map(|(r, g)| tv_from_slices(r.as_slice(), g.as_slice()))
            .collect();
        let overlaps = major_topic_overlaps(&means, &truth, cfg.top_k)?;
        reports.push(assemble_report("oracle", true_prior.tag(), assumed.tag(), cfg, tv, &overlaps));
    }
    Ok(reports)
}

/// Writes evaluation rows as CSV with the stable column set
/// `method,prior_true,prior_assumed,alpha,n_docs,tv_mean,tv_ci95,topk,acc_mean,acc_ci95,seed`.
pub fn write_eval_reports_csv(w: &mut impl Write, reports: &[EvalReport]) -> std::io::Result<()> {
    writeln!(
        w,
        "method,prior_true,prior_assumed,alpha,n_docs,tv_mean,tv_ci95,topk,acc_mean,acc_ci95,seed"
    )?;
    for r in reports {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{}",
            r.method,
            r.prior_true,
            r.prior_assumed,
            r.alpha,
            r.n_docs,
            r.tv_mean,
            r.tv_ci95,
            r.topk,
            r.acc_mean,
            r.acc_ci95,
            r.seed
        )?;
    }
    Ok(())
}
