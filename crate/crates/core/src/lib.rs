//! Self-supervised posterior recovery for general topic models.
//!
//! This crate implements an end-to-end benchmark for recovering topic
//! posteriors from self-supervised predictors, without ever running a
//! posterior sampler at training time:
//!
//! 1. [`generative`] synthesizes corpora from a general topic model: a
//!    column-stochastic topic-word matrix `A` (V words by K topics) and a
//!    prior over topic proportions `w` (pure / LDA / correlated topic model /
//!    Pachinko allocation). Words are drawn i.i.d. from `A w`.
//! 2. [`reconstruct`] trains a residual MLP to predict `t` masked words from
//!    the rest of the document (cross-entropy); [`contrastive`] trains a
//!    pair classifier to tell real continuations from resampled ones
//!    (squared loss).
//! 3. The population-optimal reconstruction predictor equals
//!    `(A ⊗ … ⊗ A) vec(W_post)` where `W_post = E[w^{⊗t} | x]` is the
//!    posterior moment tensor, so `vec(W_post)` is recovered by applying the
//!    Kronecker pseudo-inverse `A† ⊗ … ⊗ A†` to the predictor output
//!    ([`eval::recover_posterior`]). The optimal contrastive pair score,
//!    after an odds transform, evaluates the same tensor against landmark
//!    word tuples ([`contrastive::recover_from_landmarks`]).
//! 4. [`oracle`] provides ground truth to score against: exact enumeration
//!    for the pure prior, self-normalized importance sampling for the rest,
//!    and a deterministic simplex-grid quadrature for small K used to
//!    validate the sampler.
//! 5. [`eval`] computes total-variation error against the oracle, major-topic
//!    accuracy, linear probes on landmark representations, and audits the
//!    robustness bound `E[(E[P(w)|x] − θᵀ f(x))²] ≤ 2 ‖β‖² κ(A†)^{2t} ε`
//!    relating downstream error to the excess pretraining risk `ε`.
//!
//! All randomness flows from explicit `u64` seeds through counter-based
//! streams ([`rng`]), so every corpus, training run, and oracle evaluation is
//! reproducible bit for bit, including under `--threads > 1`.
//!
//! The building blocks live in [`linalg`]: a small dense row-major matrix
//! type with a one-sided Jacobi SVD, left pseudo-inverses, Kronecker
//! products, and the ℓ1 condition number `κ(B) = max_j ‖B e_j‖₁` that
//! controls error amplification through the recovery map.

pub mod contrastive;
pub mod eval;
pub mod generative;
pub mod linalg;
pub mod oracle;
pub mod reconstruct;
pub mod rng;

mod nn;
mod util;

pub use contrastive::{ContrastivePair, LandmarkRepresentation, LandmarkSet, PairClassifier};
pub use eval::{EvalReport, PolynomialTarget, Predictor, RobustnessReport};
pub use generative::{Document, GenConfig, PriorSpec, TopicProportions, TopicWordMatrix};
pub use linalg::{Matrix, MomentTensor, ProbVec};
pub use oracle::{Estimator, OracleConfig, PosteriorTensor};
pub use reconstruct::{MaskedSample, MlpModel, TrainConfig};
