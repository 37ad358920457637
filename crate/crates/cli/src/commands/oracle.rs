//! `oracle`: per-document posterior moment tensors for a corpus file, with
//! the estimator and its ESS diagnostics in every row. Pure priors are
//! enumerated exactly; everything else is self-normalized importance
//! sampling whose low-ESS rows are flagged rather than hidden.

use std::io::Write;
use std::path::Path;

use anyhow::{ensure, Context, Result};
use rayon::prelude::*;
use topicssl::generative::read_corpus;
use topicssl::oracle::{posterior_moment_tensor, Estimator, OracleConfig, PosteriorTensor};
use topicssl::rng::derive_seed_indexed;

use crate::config::{stage_seed, CellPaths, ExperimentConfig};
use crate::io::atomic_write_with;

pub fn run(cfg: &ExperimentConfig, out: &Path, docs_path: &Path) -> Result<()> {
    let (docs, header) =
        read_corpus(docs_path).with_context(|| format!("reading {}", docs_path.display()))?;
    ensure!(!docs.is_empty(), "corpus {} is empty", docs_path.display());
    ensure!(
        header.vocab_size as usize == cfg.generation.v
            && header.num_topics as usize == cfg.generation.k,
        "corpus {} has V={}, K={}; the config says V={}, K={}",
        docs_path.display(),
        header.vocab_size,
        header.num_topics,
        cfg.generation.v,
        cfg.generation.k,
    );
    let prior = cfg.generation.prior.to_prior(cfg.generation.k)?;
    if header.prior_tag != prior.tag() {
        eprintln!(
            "warning: corpus was generated under the {} prior; evaluating the posterior \
             under the configured {} prior (an assumed-prior oracle)",
            header.prior_tag,
            prior.tag()
        );
    }

    // Recover which alpha-grid cell wrote this corpus from its header seed;
    // foreign corpora fall back to the first cell's matrix.
    let cell = cfg
        .cells()
        .find(|&(cell, _)| stage_seed(cfg.master_seed, "corpus", cell) == header.seed)
        .map(|(cell, _)| cell)
        .unwrap_or_else(|| {
            eprintln!(
                "warning: corpus seed {} does not match any alpha-grid cell of this config; \
                 using the first cell's topic-word matrix",
                header.seed
            );
            0
        });
    let alpha = cfg.generation.alpha_grid[cell];
    let a = super::generate::cell_matrix(cfg, cell, alpha)?;

    let t = cfg.evaluation.t;
    let oracle_seed = stage_seed(cfg.master_seed, "oracle", cell);
    let tensors: Vec<PosteriorTensor> = docs
        .par_iter()
        .enumerate()
        .map(|(i, doc)| {
            let doc_cfg = OracleConfig {
                seed: derive_seed_indexed(oracle_seed, "doc", i as u64),
                ..cfg.oracle_config(oracle_seed)
            };
            posterior_moment_tensor(&a, &prior, doc, t, &doc_cfg)
        })
        .collect::<Result<_, _>>()?;

    let paths = CellPaths::new(out, alpha);
    let m = cfg.generation.k.pow(t as u32);
    atomic_write_with(&paths.oracle(), |buf| {
        write!(buf, "doc_id,estimator,n_samples,ess,low_ess")?;
        for j in 0..m {
            write!(buf, ",m{j}")?;
        }
        writeln!(buf)?;
        for (i, pt) in tensors.iter().enumerate() {
            match pt.estimator {
                Estimator::Exact => write!(buf, "{i},exact,0,0,false")?,
                Estimator::Snis { n_samples, ess, low_ess } => {
                    write!(buf, "{i},snis,{n_samples},{ess},{low_ess}")?
                }
            }
            for v in pt.tensor.as_slice() {
                write!(buf, ",{v}")?;
            }
            writeln!(buf)?;
        }
        Ok(())
    })?;

    let exact = tensors.iter().filter(|t| t.estimator.is_exact()).count();
    let low = tensors
        .iter()
        .filter(|t| matches!(t.estimator, Estimator::Snis { low_ess: true, .. }))
        .count();
    let min_ess = tensors
        .iter()
        .filter_map(|t| t.estimator.ess())
        .fold(f64::INFINITY, f64::min);
    print!(
        "oracle alpha={alpha}: {} docs, t={t}, {exact} exact",
        tensors.len()
    );
    if exact < tensors.len() {
        print!(", min ESS {min_ess:.0}, {low} low-ESS rows");
    }
    println!(" -> {}", paths.oracle().display());
    Ok(())
}
