//! Experiment configuration: one TOML file describes the whole pipeline —
//! generation, training, oracle, and evaluation — plus the master seed every
//! stage splits from.
//!
//! The file is the experiment's provenance record, so parsing is strict
//! (unknown keys are rejected) and the round trip
//! `parse(serialize(config)) == config` holds exactly. Optional keys fall
//! back to the library defaults, and serialization materializes them so a
//! re-serialized config is self-contained.

use std::fmt;
use std::path::{Path, PathBuf};

use anyhow::{ensure, Context, Result};
use serde::{Deserialize, Serialize};
use topicssl::generative::{ctm_covariance, GenConfig, PriorSpec, TopicMatrixKind};
use topicssl::oracle::OracleConfig;
use topicssl::reconstruct::TrainConfig;
use topicssl::rng::{derive_seed, derive_seed_indexed};

/// Top-level experiment description, deserialized from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Root seed; every stage derives its own seed from it (see
    /// [`stage_seed`]), so stages can be re-run independently.
    pub master_seed: u64,
    /// Output directory; overridden by `--out`.
    #[serde(default = "default_out_dir")]
    pub out_dir: PathBuf,
    pub generation: GenerationSection,
    pub training: TrainingSection,
    #[serde(default)]
    pub oracle: OracleSection,
    pub evaluation: EvaluationSection,
}

fn default_out_dir() -> PathBuf {
    PathBuf::from("out")
}

/// `[generation]`: the synthetic corpus family. One corpus ("cell") is
/// generated per entry of `alpha_grid`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationSection {
    /// Number of topics K.
    pub k: usize,
    /// Vocabulary size V.
    pub v: usize,
    /// Poisson mean document length λ.
    pub lambda: f64,
    /// Topic-word matrix construction.
    #[serde(default)]
    pub matrix: MatrixKind,
    /// Word-Dirichlet concentrations α to sweep; each value is one cell.
    pub alpha_grid: Vec<f64>,
    /// Documents per training corpus resample.
    pub corpus_size: usize,
    /// Minimum document length; defaults to `evaluation.t + 1` so every
    /// document supports a masked sample.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_length: Option<usize>,
    /// Prior over topic proportions.
    pub prior: PriorSection,
}

/// Topic-word matrix construction, mirroring the library's two generators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MatrixKind {
    /// Independent Dirichlet columns.
    #[default]
    Independent,
    /// Shared base column permuted within groups (correlated topics).
    Grouped,
}

impl MatrixKind {
    pub fn to_core(self) -> TopicMatrixKind {
        match self {
            MatrixKind::Independent => TopicMatrixKind::Independent,
            MatrixKind::Grouped => TopicMatrixKind::Grouped,
        }
    }
}

impl fmt::Display for MatrixKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MatrixKind::Independent => "independent",
            MatrixKind::Grouped => "grouped",
        })
    }
}

/// A prior over topic proportions, as written in config files. The CTM
/// logits have zero mean and the benchmark covariance: `diag` on the
/// diagonal, `rho · diag` between the paired topics of each group of four.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum PriorSection {
    Pure,
    Lda { alpha_doc: f64 },
    Ctm { diag: f64, rho: f64 },
    Pam { super_topics: usize, alpha_super: f64, alpha_sub: f64 },
}

impl PriorSection {
    /// Instantiates the library prior for `k` topics.
    pub fn to_prior(&self, k: usize) -> Result<PriorSpec> {
        let prior = match *self {
            PriorSection::Pure => PriorSpec::Pure,
            PriorSection::Lda { alpha_doc } => PriorSpec::Lda { alpha_doc },
            PriorSection::Ctm { diag, rho } => PriorSpec::Ctm {
                mu: vec![0.0; k],
                sigma: ctm_covariance(k, diag, rho)
                    .with_context(|| format!("ctm covariance for k = {k}"))?,
            },
            PriorSection::Pam { super_topics, alpha_super, alpha_sub } => {
                PriorSpec::Pam { super_topics, alpha_super, alpha_sub }
            }
        };
        prior.validate(k).with_context(|| format!("prior {} with k = {k}", self.tag()))?;
        Ok(prior)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            PriorSection::Pure => "pure",
            PriorSection::Lda { .. } => "lda",
            PriorSection::Ctm { .. } => "ctm",
            PriorSection::Pam { .. } => "pam",
        }
    }
}

/// `[training]`: objective, architecture, and optimization schedule. The
/// optimizer keys mirror the library's `TrainConfig`; the seed is derived
/// from the master seed and is not a config key.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingSection {
    #[serde(default)]
    pub objective: Objective,
    #[serde(default = "default_width")]
    pub width: usize,
    #[serde(default = "default_n_blocks")]
    pub n_blocks: usize,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_learning_rate")]
    pub learning_rate: f64,
    #[serde(default = "default_lr_halve_patience")]
    pub lr_halve_patience: usize,
    #[serde(default = "default_resample_every")]
    pub resample_every: usize,
    #[serde(default = "default_targets_per_doc")]
    pub targets_per_doc: usize,
    #[serde(default)]
    pub weight_decay: f64,
    /// Contrastive pairs drawn per corpus resample (contrastive only).
    #[serde(default = "default_pairs_per_round")]
    pub pairs_per_round: usize,
    /// Landmark count m for contrastive recovery; defaults to K^t.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub landmarks: Option<usize>,
}

fn default_width() -> usize {
    256
}
fn default_n_blocks() -> usize {
    3
}
fn default_batch_size() -> usize {
    128
}
fn default_learning_rate() -> f64 {
    2e-4
}
fn default_lr_halve_patience() -> usize {
    10
}
fn default_resample_every() -> usize {
    2
}
fn default_targets_per_doc() -> usize {
    6
}
fn default_pairs_per_round() -> usize {
    20_000
}

/// Which self-supervised objective to train and evaluate.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize, clap::ValueEnum,
)]
#[serde(rename_all = "lowercase")]
pub enum Objective {
    #[default]
    Reconstruct,
    Contrastive,
}

impl fmt::Display for Objective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Objective::Reconstruct => "reconstruct",
            Objective::Contrastive => "contrastive",
        })
    }
}

/// `[oracle]`: Monte-Carlo posterior settings (exact priors ignore them).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    #[serde(default = "default_n_samples")]
    pub n_samples: usize,
    #[serde(default = "default_resample_threshold")]
    pub resample_threshold: f64,
}

fn default_n_samples() -> usize {
    200_000
}
fn default_resample_threshold() -> f64 {
    0.1
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { n_samples: default_n_samples(), resample_threshold: default_resample_threshold() }
    }
}

/// `[evaluation]`: held-out scoring. `t` is the moment-tensor order used by
/// the predictor, the recovery, and the oracle dumps.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationSection {
    pub n_test_docs: usize,
    /// Top-k sizes for major-topic accuracy; one report row per value.
    #[serde(default = "default_top_k")]
    pub top_k: Vec<usize>,
    #[serde(default = "default_t")]
    pub t: usize,
    /// Misspecified priors to score as oracle baselines.
    #[serde(default)]
    pub assumed_priors: Vec<PriorSection>,
    /// Bootstrap resamples for the robustness audit's holds-fraction.
    #[serde(default = "default_bootstrap")]
    pub bootstrap: usize,
}

fn default_top_k() -> Vec<usize> {
    vec![1]
}
fn default_t() -> usize {
    1
}
fn default_bootstrap() -> usize {
    1000
}

impl ExperimentConfig {
    /// Parses and validates a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Self = toml::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        cfg.validate().with_context(|| format!("validating config {}", path.display()))?;
        Ok(cfg)
    }

    /// Serializes back to TOML with every default materialized.
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).context("serializing config")
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.generation;
        ensure!(g.k >= 1, "generation.k must be at least 1");
        ensure!(g.v >= g.k, "generation.v must be at least k (got v={}, k={})", g.v, g.k);
        ensure!(
            g.lambda.is_finite() && g.lambda > 0.0,
            "generation.lambda must be positive, got {}",
            g.lambda
        );
        if g.matrix == MatrixKind::Grouped {
            ensure!(
                g.k % 4 == 0 && g.v >= 8,
                "grouped matrices need k divisible by 4 and v >= 8 (got k={}, v={})",
                g.k,
                g.v
            );
        }
        ensure!(!g.alpha_grid.is_empty(), "generation.alpha_grid must be nonempty");
        for &alpha in &g.alpha_grid {
            ensure!(
                alpha.is_finite() && alpha > 0.0,
                "alpha grid entries must be positive, got {alpha}"
            );
        }
        ensure!(g.corpus_size >= 1, "generation.corpus_size must be at least 1");
        g.prior.to_prior(g.k).context("generation.prior")?;

        let t = self.evaluation.t;
        ensure!(t == 1 || t == 2, "evaluation.t must be 1 or 2, got {t}");
        if t == 2 {
            ensure!(
                g.v <= 500,
                "t = 2 caps the vocabulary at 500 (the predictor head holds V² logits), got v={}",
                g.v
            );
        }
        let min_length = self.min_length();
        ensure!(
            min_length >= t + 1,
            "generation.min_length must be at least t + 1 = {} (got {min_length})",
            t + 1
        );

        let tr = &self.training;
        ensure!(tr.epochs >= 1, "training.epochs must be at least 1");
        ensure!(tr.width >= 1, "training.width must be at least 1");
        ensure!(tr.batch_size >= 1, "training.batch_size must be at least 1");
        ensure!(
            tr.learning_rate.is_finite() && tr.learning_rate > 0.0,
            "training.learning_rate must be positive"
        );
        ensure!(tr.lr_halve_patience >= 1, "training.lr_halve_patience must be at least 1");
        ensure!(tr.resample_every >= 1, "training.resample_every must be at least 1");
        ensure!(tr.targets_per_doc >= 1, "training.targets_per_doc must be at least 1");
        ensure!(
            tr.weight_decay.is_finite() && tr.weight_decay >= 0.0,
            "training.weight_decay must be nonnegative"
        );
        ensure!(tr.pairs_per_round >= 1, "training.pairs_per_round must be at least 1");
        let kt = (g.k as u128).pow(t as u32);
        if let Some(m) = tr.landmarks {
            ensure!(
                m as u128 >= kt,
                "training.landmarks must be at least K^t = {kt} for recovery, got {m}"
            );
        }

        let o = &self.oracle;
        ensure!(o.n_samples >= 1000, "oracle.n_samples must be at least 1000");
        ensure!(
            o.resample_threshold.is_finite()
                && o.resample_threshold > 0.0
                && o.resample_threshold < 1.0,
            "oracle.resample_threshold must lie in (0, 1)"
        );

        let e = &self.evaluation;
        ensure!(e.n_test_docs >= 1, "evaluation.n_test_docs must be at least 1");
        ensure!(!e.top_k.is_empty(), "evaluation.top_k must be nonempty");
        for &k in &e.top_k {
            ensure!(
                k >= 1 && k <= g.k,
                "evaluation.top_k entries must lie in 1..=k, got {k} with k={}",
                g.k
            );
        }
        for p in &e.assumed_priors {
            p.to_prior(g.k).context("evaluation.assumed_priors")?;
        }
        Ok(())
    }

    /// Effective minimum document length.
    pub fn min_length(&self) -> usize {
        self.generation.min_length.unwrap_or(self.evaluation.t + 1)
    }

    /// `(index, alpha)` pairs of the sweep, in file order.
    pub fn cells(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        self.generation.alpha_grid.iter().copied().enumerate()
    }

    /// Generation config for `corpus_size` documents from the given stream.
    pub fn gen_config(&self, seed: u64, corpus_size: usize) -> GenConfig {
        GenConfig {
            lambda: self.generation.lambda,
            seed,
            corpus_size,
            min_length: self.min_length(),
        }
    }

    /// Library training config for one cell's run.
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let tr = &self.training;
        TrainConfig {
            epochs: tr.epochs,
            batch_size: tr.batch_size,
            learning_rate: tr.learning_rate,
            lr_halve_patience: tr.lr_halve_patience,
            resample_every: tr.resample_every,
            targets_per_doc: tr.targets_per_doc,
            weight_decay: tr.weight_decay,
            seed,
            ..TrainConfig::default()
        }
    }

    /// Oracle config with the given stream seed.
    pub fn oracle_config(&self, seed: u64) -> OracleConfig {
        OracleConfig {
            n_samples: self.oracle.n_samples,
            resample_threshold: self.oracle.resample_threshold,
            seed,
        }
    }

    /// Landmark count for contrastive recovery (defaults to K^t).
    pub fn landmark_count(&self) -> usize {
        self.training
            .landmarks
            .unwrap_or_else(|| self.generation.k.pow(self.evaluation.t as u32))
    }
}

/// Derives the seed for one pipeline stage in one alpha-grid cell.
///
/// Stages are labeled `"matrix"`, `"corpus"`, `"train"`, `"test-docs"`,
/// `"oracle"`, `"ideal"`, `"landmarks"`, and `"audit"`; the split is
/// counter-based, so re-running a single stage reproduces its stream without
/// touching the others.
pub fn stage_seed(master_seed: u64, stage: &str, cell: usize) -> u64 {
    derive_seed_indexed(derive_seed(master_seed, stage), "cell", cell as u64)
}

/// Filesystem layout of one alpha-grid cell under the output directory.
#[derive(Debug, Clone)]
pub struct CellPaths {
    pub dir: PathBuf,
}

impl CellPaths {
    pub fn new(out: &Path, alpha: f64) -> Self {
        Self { dir: out.join(format!("alpha-{alpha}")) }
    }

    pub fn corpus(&self) -> PathBuf {
        self.dir.join("corpus.txt")
    }

    pub fn metadata(&self) -> PathBuf {
        self.dir.join("metadata.toml")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("checkpoint.ckpt")
    }

    pub fn loss(&self) -> PathBuf {
        self.dir.join("loss.csv")
    }

    pub fn eval(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn robustness(&self) -> PathBuf {
        self.dir.join("robustness.csv")
    }

    pub fn oracle(&self) -> PathBuf {
        self.dir.join("oracle.csv")
    }

    pub fn landmarks(&self) -> PathBuf {
        self.dir.join("landmarks.csv")
    }
}
