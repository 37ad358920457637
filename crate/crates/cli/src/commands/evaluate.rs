//! `evaluate`: score a trained checkpoint (or the ideal predictor, with
//! `--ideal`) on fresh held-out documents against the true-prior posterior
//! oracle, alongside oracle baselines that assume possibly wrong priors.
//! Emits `eval.csv` (one row per method × top-k) and `robustness.csv` (the
//! excess-risk bound audit for the reconstruction readout).

use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use topicssl::contrastive::{
    build_landmarks, landmark_representation, load_classifier_checkpoint, recover_from_landmarks,
    write_landmarks_csv, DEFAULT_G_CLAMP,
};
use topicssl::eval::{
    misspecification_benchmark, oracle_posterior_means, robustness_audit, write_eval_reports_csv,
    write_robustness_csv, BenchmarkConfig, EvalReport, IdealPredictor, PolynomialTarget,
    Predictor,
};
use topicssl::generative::{make_corpus, Document, PriorSpec, TopicWordMatrix};
use topicssl::linalg::{tv_distance, ProbVec};
use topicssl::reconstruct::load_checkpoint;

use crate::config::{stage_seed, CellPaths, ExperimentConfig, Objective};
use crate::io::atomic_write_with;

/// Which predictor backs the `ssl` rows.
enum Method {
    Ideal,
    Reconstruct,
    Contrastive,
}

pub fn run(cfg: &ExperimentConfig, out: &Path, ideal: bool, objective: Objective) -> Result<()> {
    let method = if ideal {
        Method::Ideal
    } else {
        match objective {
            Objective::Reconstruct => Method::Reconstruct,
            Objective::Contrastive => Method::Contrastive,
        }
    };
    let prior = cfg.generation.prior.to_prior(cfg.generation.k)?;
    let assumed: Vec<PriorSpec> = cfg
        .evaluation
        .assumed_priors
        .iter()
        .map(|p| p.to_prior(cfg.generation.k))
        .collect::<Result<_>>()?;

    for (cell, alpha) in cfg.cells() {
        let paths = CellPaths::new(out, alpha);
        let a = super::generate::cell_matrix(cfg, cell, alpha)?;
        let docs = make_corpus(
            &a,
            &prior,
            &cfg.gen_config(stage_seed(cfg.master_seed, "test-docs", cell), cfg.evaluation.n_test_docs),
        )?;
        let bench_seed = stage_seed(cfg.master_seed, "oracle", cell);
        let bench = BenchmarkConfig {
            top_k: cfg.evaluation.top_k[0],
            alpha,
            seed: bench_seed,
            oracle: cfg.oracle_config(bench_seed),
        };

        let mut rows: Vec<EvalReport> = Vec::new();
        match method {
            Method::Ideal | Method::Reconstruct => {
                let predictor: Box<dyn Predictor> = match method {
                    Method::Ideal => Box::new(IdealPredictor::new(
                        a.clone(),
                        prior.clone(),
                        cfg.evaluation.t,
                        cfg.oracle_config(stage_seed(cfg.master_seed, "ideal", cell)),
                    )),
                    _ => Box::new(load_reconstruct_model(cfg, &paths)?),
                };
                for &top_k in &cfg.evaluation.top_k {
                    let mut batch = misspecification_benchmark(
                        &a,
                        &prior,
                        &assumed,
                        predictor.as_ref(),
                        &docs,
                        &BenchmarkConfig { top_k, ..bench.clone() },
                    )?;
                    if matches!(method, Method::Ideal) {
                        for row in batch.iter_mut().filter(|r| r.method == "ssl") {
                            row.method = "ideal".to_owned();
                        }
                    }
                    rows.extend(batch);
                }
                audit(cfg, &paths, cell, alpha, &a, &prior, predictor.as_ref(), &docs)?;
            }
            Method::Contrastive => {
                let means = contrastive_means(cfg, &paths, cell, &a, &prior, &docs)?;
                for &top_k in &cfg.evaluation.top_k {
                    let cell_bench = BenchmarkConfig { top_k, ..bench.clone() };
                    let truth = oracle_posterior_means(&a, &prior, &docs, &cell_bench, "truth")?;
                    rows.push(score_means("ssl", "none", &prior, &means, &truth, &cell_bench)?);
                    for p in &assumed {
                        let est = oracle_posterior_means(&a, p, &docs, &cell_bench, p.tag())?;
                        rows.push(score_means("oracle", p.tag(), &prior, &est, &truth, &cell_bench)?);
                    }
                }
                println!(
                    "evaluate alpha={alpha}: robustness audit skipped \
                     (it applies to the reconstruction readout)"
                );
            }
        }

        atomic_write_with(&paths.eval(), |buf| {
            write_eval_reports_csv(buf, &rows).context("serializing eval rows")
        })?;
        for row in &rows {
            println!(
                "evaluate alpha={alpha}: {} (assumed={}) top{}  tv={:.4}±{:.4}  acc={:.4}±{:.4}",
                row.method, row.prior_assumed, row.topk, row.tv_mean, row.tv_ci95, row.acc_mean,
                row.acc_ci95
            );
        }
        println!("evaluate alpha={alpha}: wrote {}", paths.eval().display());
    }
    Ok(())
}

fn load_reconstruct_model(
    cfg: &ExperimentConfig,
    paths: &CellPaths,
) -> Result<topicssl::reconstruct::MlpModel> {
    let ckpt = paths.checkpoint();
    let (model, k, _) =
        load_checkpoint(&ckpt).with_context(|| format!("loading {}", ckpt.display()))?;
    ensure!(
        k == cfg.generation.k
            && model.vocab_size() == cfg.generation.v
            && model.t() == cfg.evaluation.t,
        "checkpoint {} was trained with K={k}, V={}, t={}; the config says K={}, V={}, t={}",
        ckpt.display(),
        model.vocab_size(),
        model.t(),
        cfg.generation.k,
        cfg.generation.v,
        cfg.evaluation.t,
    );
    Ok(model)
}

/// Recovered posterior means from a contrastive checkpoint: landmark odds →
/// `Ã† D g` → clip to `[0, 1]` and renormalize (the same treatment the
/// reconstruction path applies before computing metrics).
fn contrastive_means(
    cfg: &ExperimentConfig,
    paths: &CellPaths,
    cell: usize,
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    docs: &[Document],
) -> Result<Vec<ProbVec>> {
    let t = cfg.evaluation.t;
    if t != 1 {
        bail!("contrastive evaluation reports posterior means and needs evaluation.t = 1");
    }
    let ckpt = paths.checkpoint();
    let (clf, k, _) = load_classifier_checkpoint(&ckpt)
        .with_context(|| format!("loading {}", ckpt.display()))?;
    ensure!(
        k == cfg.generation.k && clf.vocab_size() == cfg.generation.v && clf.t() == t,
        "checkpoint {} was trained with K={k}, V={}, t={}; the config says K={}, V={}, t={t}",
        ckpt.display(),
        clf.vocab_size(),
        clf.t(),
        cfg.generation.k,
        cfg.generation.v,
    );
    let lm_seed = stage_seed(cfg.master_seed, "landmarks", cell);
    let lm = build_landmarks(a, prior, t, cfg.landmark_count(), &cfg.oracle_config(lm_seed), lm_seed)?;
    atomic_write_with(&paths.landmarks(), |buf| {
        write_landmarks_csv(buf, &lm).context("serializing landmarks")
    })?;
    docs.iter()
        .map(|doc| {
            let rep = landmark_representation(&clf, &lm, &doc.counts_dense(), DEFAULT_G_CLAMP)?;
            let tensor = recover_from_landmarks(&lm, &rep, a)?;
            let clipped: Vec<f64> =
                tensor.as_slice().iter().map(|&x| x.clamp(0.0, 1.0)).collect();
            ensure!(
                clipped.iter().sum::<f64>() > 0.0,
                "recovered posterior collapsed to zero mass after clipping"
            );
            Ok(ProbVec::from_normalizing(clipped)?)
        })
        .collect()
}

/// Assembles one report row from precomputed means, with the same TV,
/// overlap, and confidence-interval conventions as the library benchmark.
fn score_means(
    method: &str,
    prior_assumed: &str,
    prior_true: &PriorSpec,
    means: &[ProbVec],
    truth: &[ProbVec],
    bench: &BenchmarkConfig,
) -> Result<EvalReport> {
    let per_doc_tv: Vec<f64> = means
        .iter()
        .zip(truth)
        .map(|(m, g)| tv_distance(m, g))
        .collect::<Result<_, _>>()?;
    let overlaps = topicssl::eval::major_topic_overlaps(means, truth, bench.top_k)?;
    let (tv_mean, tv_ci95) = mean_ci95(&per_doc_tv);
    let (acc_mean, acc_ci95) = mean_ci95(&overlaps);
    Ok(EvalReport {
        method: method.to_owned(),
        prior_true: prior_true.tag().to_owned(),
        prior_assumed: prior_assumed.to_owned(),
        alpha: bench.alpha,
        n_docs: per_doc_tv.len(),
        tv_mean,
        tv_ci95,
        topk: bench.top_k,
        acc_mean,
        acc_ci95,
        seed: bench.seed,
        per_doc_tv,
    })
}

/// 95% interval half-width `1.96 · s / √n` (sample standard deviation),
/// matching the library's report rows.
fn mean_ci95(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = xs.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, 1.96 * (var / n as f64).sqrt())
}

/// Robustness audit of the linear readout for `P(w) = w_0` on the same test
/// documents, written to `robustness.csv`.
#[allow(clippy::too_many_arguments)]
fn audit(
    cfg: &ExperimentConfig,
    paths: &CellPaths,
    cell: usize,
    alpha: f64,
    a: &TopicWordMatrix,
    prior: &PriorSpec,
    predictor: &dyn Predictor,
    docs: &[Document],
) -> Result<()> {
    let polynomial = PolynomialTarget::coordinate(cfg.generation.k, cfg.evaluation.t, 0)?;
    let report = robustness_audit(
        a,
        prior,
        predictor,
        &polynomial,
        docs,
        &cfg.oracle_config(stage_seed(cfg.master_seed, "audit", cell)),
        cfg.evaluation.bootstrap,
    )?;
    atomic_write_with(&paths.robustness(), |buf| {
        write_robustness_csv(buf, &report).context("serializing the robustness report")
    })?;
    println!(
        "evaluate alpha={alpha}: robustness lhs={:.3e} <= bound={:.3e} ({}), \
         holds in {:.1}% of bootstrap resamples",
        report.lhs,
        report.bound,
        if report.holds { "holds" } else { "VIOLATED" },
        100.0 * report.holds_fraction
    );
    Ok(())
}
