//! `train`: run the configured objective for each cell, checkpointing the
//! model together with the optimizer state so an interrupted run resumes bit
//! for bit. Divergence aborts with exit code 3 after flushing the loss
//! history.

use std::path::Path;

use anyhow::{bail, Context, Result};
use topicssl::contrastive::{
    load_classifier_checkpoint, ContrastiveError, ContrastiveTrainer, PairClassifier,
};
use topicssl::reconstruct::{
    load_checkpoint, write_checkpoint_to, write_history_csv, EpochStats, MlpModel,
    ReconstructError, Trainer,
};
use topicssl::rng::derive_seed;

use crate::config::{stage_seed, CellPaths, ExperimentConfig, Objective};
use crate::io::{atomic_write_with, read_csv_rows};

/// Exit code reported when training diverges.
pub const DIVERGED_EXIT: u8 = 3;

const LOSS_HEADER: &str = "epoch,train_loss,val_loss,lr";

fn history_rows(history: &[EpochStats]) -> Result<Vec<String>> {
    let mut buf = Vec::new();
    write_history_csv(&mut buf, history).context("formatting history rows")?;
    let text = String::from_utf8(buf).expect("history CSV is ASCII");
    Ok(text.lines().skip(1).map(str::to_owned).collect())
}

fn write_loss_csv(path: &Path, old_rows: &[String], new_rows: &[String]) -> Result<()> {
    atomic_write_with(path, |buf| {
        use std::io::Write;
        writeln!(buf, "{LOSS_HEADER}")?;
        for row in old_rows.iter().chain(new_rows) {
            writeln!(buf, "{row}")?;
        }
        Ok(())
    })
}

/// Trains every cell; returns the process exit code (0, or
/// [`DIVERGED_EXIT`] if any cell diverged).
pub fn run(cfg: &ExperimentConfig, out: &Path, objective: Objective) -> Result<u8> {
    let prior = cfg.generation.prior.to_prior(cfg.generation.k)?;
    for (cell, alpha) in cfg.cells() {
        let paths = CellPaths::new(out, alpha);
        let a = super::generate::cell_matrix(cfg, cell, alpha)?;
        let train_seed = stage_seed(cfg.master_seed, "train", cell);
        let train_cfg = cfg.train_config(train_seed);
        let gen_cfg = cfg.gen_config(train_seed, cfg.generation.corpus_size);
        let old_rows = read_csv_rows(&paths.loss())?;
        let code = match objective {
            Objective::Reconstruct => {
                train_reconstruct(cfg, &paths, &a, &prior, gen_cfg, train_cfg, old_rows, alpha)?
            }
            Objective::Contrastive => {
                train_contrastive(cfg, &paths, &a, &prior, gen_cfg, train_cfg, old_rows, alpha)?
            }
        };
        if code != 0 {
            return Ok(code);
        }
    }
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn train_reconstruct(
    cfg: &ExperimentConfig,
    paths: &CellPaths,
    a: &topicssl::generative::TopicWordMatrix,
    prior: &topicssl::generative::PriorSpec,
    gen_cfg: topicssl::generative::GenConfig,
    train_cfg: topicssl::reconstruct::TrainConfig,
    old_rows: Vec<String>,
    alpha: f64,
) -> Result<u8> {
    let t = cfg.evaluation.t;
    let ckpt = paths.checkpoint();
    let mut trainer = if ckpt.exists() {
        let (model, k, state) =
            load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
        if k != cfg.generation.k || model.vocab_size() != cfg.generation.v || model.t() != t {
            bail!(
                "checkpoint {} was trained with K={k}, V={}, t={}; the config says K={}, V={}, t={t}",
                ckpt.display(),
                model.vocab_size(),
                model.t(),
                cfg.generation.k,
                cfg.generation.v,
            );
        }
        let state = state
            .with_context(|| format!("checkpoint {} has no trainer state", ckpt.display()))?;
        Trainer::restore(model, state, a, prior, &gen_cfg, train_cfg)?
    } else {
        let model = MlpModel::new(
            cfg.generation.v,
            t,
            cfg.training.width,
            cfg.training.n_blocks,
            derive_seed(train_cfg.seed, "init"),
        )?;
        Trainer::new(model, a, prior, &gen_cfg, train_cfg)?
    };

    let target = cfg.training.epochs;
    if trainer.epochs_done() >= target {
        println!(
            "train alpha={alpha}: checkpoint already at epoch {} >= {target}, nothing to do",
            trainer.epochs_done()
        );
        return Ok(0);
    }
    println!(
        "train alpha={alpha}: reconstruct, epochs {}..{target}",
        trainer.epochs_done() + 1
    );
    while trainer.epochs_done() < target {
        match trainer.run_epoch() {
            Ok(stats) => {
                println!(
                    "  epoch {:>4}/{target}  train={:.4}  val={:.4}  lr={:.2e}",
                    stats.epoch, stats.train_loss, stats.val_loss, stats.lr
                );
            }
            Err(ReconstructError::Diverged { epoch, loss, initial, history }) => {
                write_loss_csv(&paths.loss(), &old_rows, &history_rows(&history)?)?;
                eprintln!(
                    "train alpha={alpha}: diverged at epoch {epoch} \
                     (loss {loss:.4} vs initial {initial:.4}); history in {}",
                    paths.loss().display()
                );
                return Ok(DIVERGED_EXIT);
            }
            Err(e) => return Err(e.into()),
        }
    }

    atomic_write_with(&ckpt, |buf| {
        write_checkpoint_to(buf, trainer.model(), cfg.generation.k, Some(&trainer.state()))
            .context("serializing the checkpoint")
    })?;
    write_loss_csv(&paths.loss(), &old_rows, &history_rows(trainer.history())?)?;
    let last = trainer.history().last().expect("at least one epoch ran");
    println!(
        "train alpha={alpha}: done, val={:.4} -> {}",
        last.val_loss,
        ckpt.display()
    );
    Ok(0)
}

#[allow(clippy::too_many_arguments)]
fn train_contrastive(
    cfg: &ExperimentConfig,
    paths: &CellPaths,
    a: &topicssl::generative::TopicWordMatrix,
    prior: &topicssl::generative::PriorSpec,
    gen_cfg: topicssl::generative::GenConfig,
    train_cfg: topicssl::reconstruct::TrainConfig,
    old_rows: Vec<String>,
    alpha: f64,
) -> Result<u8> {
    let t = cfg.evaluation.t;
    let ckpt = paths.checkpoint();
    let (clf, resume_state) = if ckpt.exists() {
        let (clf, k, state) = load_classifier_checkpoint(&ckpt)
            .with_context(|| format!("loading {}", ckpt.display()))?;
        if k != cfg.generation.k || clf.vocab_size() != cfg.generation.v || clf.t() != t {
            bail!(
                "checkpoint {} was trained with K={k}, V={}, t={}; the config says K={}, V={}, t={t}",
                ckpt.display(),
                clf.vocab_size(),
                clf.t(),
                cfg.generation.k,
                cfg.generation.v,
            );
        }
        let state = state
            .with_context(|| format!("checkpoint {} has no trainer state", ckpt.display()))?;
        (clf, Some(state))
    } else {
        let clf = PairClassifier::new(
            cfg.generation.v,
            t,
            cfg.training.width,
            cfg.training.n_blocks,
            derive_seed(train_cfg.seed, "init"),
        )?;
        (clf, None)
    };
    let mut trainer = ContrastiveTrainer::resampled(
        clf,
        a,
        prior,
        &gen_cfg,
        cfg.training.pairs_per_round,
        train_cfg,
    )?;
    if let Some(state) = resume_state {
        trainer = trainer.with_state(state)?;
    }

    let target = cfg.training.epochs;
    if trainer.epochs_done() >= target {
        println!(
            "train alpha={alpha}: checkpoint already at epoch {} >= {target}, nothing to do",
            trainer.epochs_done()
        );
        return Ok(0);
    }
    println!(
        "train alpha={alpha}: contrastive, epochs {}..{target}",
        trainer.epochs_done() + 1
    );
    while trainer.epochs_done() < target {
        match trainer.run_epoch() {
            Ok(stats) => {
                println!(
                    "  epoch {:>4}/{target}  train={:.4}  val={:.4}  lr={:.2e}",
                    stats.epoch, stats.train_loss, stats.val_loss, stats.lr
                );
            }
            Err(ContrastiveError::Diverged { epoch, loss, initial, history }) => {
                write_loss_csv(&paths.loss(), &old_rows, &history_rows(&history)?)?;
                eprintln!(
                    "train alpha={alpha}: diverged at epoch {epoch} \
                     (loss {loss:.4} vs initial {initial:.4}); history in {}",
                    paths.loss().display()
                );
                return Ok(DIVERGED_EXIT);
            }
            Err(e) => return Err(e.into()),
        }
    }

    atomic_write_with(&ckpt, |buf| {
        topicssl::contrastive::write_classifier_checkpoint_to(
            buf,
            trainer.classifier(),
            cfg.generation.k,
            Some(&trainer.state()),
        )
        .context("serializing the checkpoint")
    })?;
    write_loss_csv(&paths.loss(), &old_rows, &history_rows(trainer.history())?)?;
    let last = trainer.history().last().expect("at least one epoch ran");
    println!(
        "train alpha={alpha}: done, val={:.4} -> {}",
        last.val_loss,
        ckpt.display()
    );
    Ok(0)
}

