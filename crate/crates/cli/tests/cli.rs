//! End-to-end tests of the `topicssl` binary: determinism of every artifact,
//! golden-file guards for the oracle-exact paths, bit-exact training resume,
//! and the divergence exit code.
//!
//! The oracle golden pins exact bytes: downstream of the seeded,
//! version-pinned samplers its path reduces to IEEE-exact arithmetic, so any
//! byte change means the math changed. The eval and robustness goldens also
//! contain noise-magnitude statistics of an exact recovery (TV and squared
//! residuals around 1e-17); those fields are compared with a small relative
//! tolerance because their last ulps track GEMM kernel selection and build
//! flavor rather than behavior.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_topicssl"))
}

fn preset(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets").join(name)
}

fn run_ok(cmd: &mut Command) -> Output {
    let out = cmd.output().expect("spawning topicssl");
    assert!(
        out.status.success(),
        "command {:?} failed with {:?}\nstdout:\n{}\nstderr:\n{}",
        cmd,
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr),
    );
    out
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Compares a produced CSV against a golden file field by field. Fields
/// containing a decimal point or exponent are parsed as floats and must
/// agree to 1e-9 relative precision; all other fields (headers, labels,
/// integers, and u64 seeds too wide for f64) must match byte for byte.
/// Any real regression moves the float fields by far more than 1e-9.
fn assert_matches_golden(actual: &str, golden_path: &Path) {
    let golden = read(golden_path);
    let (a_lines, g_lines): (Vec<&str>, Vec<&str>) =
        (actual.lines().collect(), golden.lines().collect());
    assert_eq!(
        a_lines.len(),
        g_lines.len(),
        "row count differs from {}:\n{actual}",
        golden_path.display()
    );
    for (row, (a_line, g_line)) in a_lines.iter().zip(&g_lines).enumerate() {
        let (a_fields, g_fields): (Vec<&str>, Vec<&str>) =
            (a_line.split(',').collect(), g_line.split(',').collect());
        assert_eq!(a_fields.len(), g_fields.len(), "field count differs on row {row}: {a_line}");
        for (col, (a, g)) in a_fields.iter().zip(&g_fields).enumerate() {
            let decimal = |s: &str| s.contains(['.', 'e', 'E']);
            let close = if a == g {
                true
            } else if decimal(a) || decimal(g) {
                match (a.parse::<f64>(), g.parse::<f64>()) {
                    (Ok(x), Ok(y)) => (x - y).abs() <= 1e-9 * x.abs().max(y.abs()).max(1.0),
                    _ => false,
                }
            } else {
                false
            };
            assert!(
                close,
                "row {row} col {col} differs from {}: got {a:?}, golden {g:?}",
                golden_path.display()
            );
        }
    }
}

#[test]
fn generate_is_deterministic_and_records_diagnostics() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        run_ok(bin()
            .arg("generate")
            .arg("--config")
            .arg(preset("sanity-pure-small.toml"))
            .arg("--out")
            .arg(out));
    }
    assert_eq!(
        read(&a.join("alpha-1/corpus.txt")),
        read(&b.join("alpha-1/corpus.txt")),
        "same config and seed must generate byte-identical corpora"
    );
    assert_eq!(read(&a.join("alpha-1/metadata.toml")), read(&b.join("alpha-1/metadata.toml")));

    let metadata: toml::Value = toml::from_str(&read(&a.join("alpha-1/metadata.toml"))).unwrap();
    let kappa = metadata["kappa_pinv"].as_float().expect("kappa_pinv is recorded");
    assert!(kappa.is_finite() && kappa >= 1.0, "implausible kappa(A^+): {kappa}");
    assert_eq!(metadata["rank_ok"].as_bool(), Some(true));
    assert_eq!(metadata["rank"].as_integer(), Some(3));
    // The resolved config is snapshotted next to the artifacts.
    assert!(a.join("config.toml").exists());
}

#[test]
fn ideal_evaluation_matches_the_golden_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = preset("sanity-pure-small.toml");
    run_ok(bin().arg("generate").arg("--config").arg(&config).arg("--out").arg(&out));
    run_ok(bin()
        .arg("evaluate")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--ideal"));

    let eval = read(&out.join("alpha-1/eval.csv"));
    assert_matches_golden(&eval, &preset("golden/sanity-pure-eval-ideal.csv"));
    assert_matches_golden(
        &read(&out.join("alpha-1/robustness.csv")),
        &preset("golden/sanity-pure-robustness-ideal.csv"),
    );

    // The ideal predictor on pure documents recovers the posterior exactly.
    let ideal_row = eval.lines().nth(1).expect("an ideal row");
    let fields: Vec<&str> = ideal_row.split(',').collect();
    assert_eq!(fields[0], "ideal");
    assert_eq!(fields[2], "none");
    let tv_mean: f64 = fields[5].parse().unwrap();
    assert!(tv_mean <= 1e-8, "ideal TV should vanish, got {tv_mean}");
}

#[test]
fn oracle_dump_is_exact_and_reruns_are_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = preset("sanity-pure-small.toml");
    run_ok(bin().arg("generate").arg("--config").arg(&config).arg("--out").arg(&out));
    let docs = out.join("alpha-1/corpus.txt");
    run_ok(bin()
        .arg("oracle")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--docs")
        .arg(&docs));
    let first = read(&out.join("alpha-1/oracle.csv"));
    run_ok(bin()
        .arg("oracle")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .arg("--docs")
        .arg(&docs));
    assert_eq!(first, read(&out.join("alpha-1/oracle.csv")), "oracle reruns must be identical");
    assert_eq!(first, read(&preset("golden/sanity-pure-oracle.csv")));

    let mut rows = 0;
    for line in first.lines().skip(1) {
        assert_eq!(line.split(',').nth(1), Some("exact"), "pure rows carry estimator=exact");
        rows += 1;
    }
    assert_eq!(rows, 400);
}

/// A small config whose training length and learning rate the tests vary.
fn pure_train_config(epochs: usize, learning_rate: f64) -> String {
    format!(
        r#"
master_seed = 42

[generation]
k = 3
v = 8
lambda = 12.0
alpha_grid = [1.0]
corpus_size = 400

[generation.prior]
kind = "pure"

[training]
width = 64
n_blocks = 2
epochs = {epochs}
batch_size = 64
learning_rate = {learning_rate}
targets_per_doc = 4

[oracle]
n_samples = 2000

[evaluation]
n_test_docs = 10
"#
    )
}

#[test]
fn training_resumes_bit_for_bit() {
    let tmp = tempfile::tempdir().unwrap();
    let short = tmp.path().join("short.toml");
    let full = tmp.path().join("full.toml");
    std::fs::write(&short, pure_train_config(4, 1e-3)).unwrap();
    std::fs::write(&full, pure_train_config(8, 1e-3)).unwrap();

    // 4 epochs, then resume to 8 in the same directory.
    let resumed = tmp.path().join("resumed");
    run_ok(bin().arg("train").arg("--config").arg(&short).arg("--out").arg(&resumed));
    run_ok(bin().arg("train").arg("--config").arg(&full).arg("--out").arg(&resumed));

    // 8 epochs in one shot.
    let fresh = tmp.path().join("fresh");
    run_ok(bin().arg("train").arg("--config").arg(&full).arg("--out").arg(&fresh));

    let resumed_loss = read(&resumed.join("alpha-1/loss.csv"));
    assert_eq!(
        resumed_loss,
        read(&fresh.join("alpha-1/loss.csv")),
        "a resumed run must reproduce the uninterrupted loss history"
    );
    assert_eq!(resumed_loss.lines().count(), 1 + 8, "header plus one row per epoch");
    assert_eq!(
        std::fs::read(resumed.join("alpha-1/checkpoint.ckpt")).unwrap(),
        std::fs::read(fresh.join("alpha-1/checkpoint.ckpt")).unwrap(),
        "resumed and uninterrupted checkpoints must match bit for bit"
    );
}

#[test]
fn diverged_training_exits_with_code_3_and_flushes_history() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("diverge.toml");
    std::fs::write(&config, pure_train_config(40, 50.0)).unwrap();
    let out = tmp.path().join("out");
    let result = bin()
        .arg("train")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(3), "divergence is exit code 3");
    assert!(String::from_utf8_lossy(&result.stderr).contains("diverged"));
    let history = read(&out.join("alpha-1/loss.csv"));
    assert!(history.lines().count() > 1, "the partial loss history is flushed");
}

#[test]
fn bench_merges_cells_into_a_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let config = tmp.path().join("sweep.toml");
    std::fs::write(
        &config,
        r#"
master_seed = 9

[generation]
k = 3
v = 8
lambda = 10.0
alpha_grid = [1.0, 3.0]
corpus_size = 200

[generation.prior]
kind = "pure"

[training]
width = 32
n_blocks = 2
epochs = 2
learning_rate = 1e-3

[oracle]
n_samples = 2000

[evaluation]
n_test_docs = 15
assumed_priors = [{ kind = "lda", alpha_doc = 1.0 }]
bootstrap = 50
"#,
    )
    .unwrap();
    let out = tmp.path().join("out");
    run_ok(bin().arg("bench").arg("--config").arg(&config).arg("--out").arg(&out));

    let summary = read(&out.join("summary.csv"));
    let lines: Vec<&str> = summary.lines().collect();
    assert_eq!(
        lines[0],
        "method,prior_true,prior_assumed,alpha,n_docs,tv_mean,tv_ci95,topk,acc_mean,acc_ci95,seed"
    );
    // Two cells x (one ssl row + one assumed-prior row).
    assert_eq!(lines.len(), 1 + 4);
    for alpha in ["1", "3"] {
        let cell = out.join(format!("alpha-{alpha}"));
        for artifact in ["corpus.txt", "metadata.toml", "checkpoint.ckpt", "loss.csv", "eval.csv"]
        {
            assert!(cell.join(artifact).exists(), "missing alpha-{alpha}/{artifact}");
        }
        assert!(summary.contains(&format!("ssl,pure,none,{alpha}")));
        assert!(summary.contains(&format!("oracle,pure,lda,{alpha}")));
    }
}

#[test]
fn contrastive_pipeline_trains_and_evaluates_via_landmarks() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let config = preset("sanity-contrastive-small.toml");
    run_ok(bin().arg("train").arg("--config").arg(&config).arg("--out").arg(&out));
    run_ok(bin().arg("evaluate").arg("--config").arg(&config).arg("--out").arg(&out));

    let eval = read(&out.join("alpha-1/eval.csv"));
    let lines: Vec<&str> = eval.lines().collect();
    assert_eq!(lines.len(), 1 + 2, "ssl row plus the assumed-prior row");
    assert!(lines[1].starts_with("ssl,pure,none,"));
    assert!(lines[2].starts_with("oracle,pure,lda,"));

    // Landmarks are dumped for inspection: header plus m = K^t = 3 rows.
    let landmarks = read(&out.join("alpha-1/landmarks.csv"));
    assert_eq!(landmarks.lines().count(), 1 + 3);
    assert_eq!(landmarks.lines().next(), Some("landmark_id,w0,marginal"));
    // The audit is reconstruction-specific, so no robustness.csv here.
    assert!(!out.join("alpha-1/robustness.csv").exists());
}

#[test]
fn evaluating_a_missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let result = bin()
        .arg("evaluate")
        .arg("--config")
        .arg(preset("sanity-pure-small.toml"))
        .arg("--out")
        .arg(&out)
        .output()
        .unwrap();
    assert_eq!(result.status.code(), Some(1));
    assert!(
        String::from_utf8_lossy(&result.stderr).contains("checkpoint.ckpt"),
        "the error should name the missing checkpoint"
    );
}

#[test]
fn seed_override_changes_the_generated_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let config = preset("sanity-pure-small.toml");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run_ok(bin().arg("generate").arg("--config").arg(&config).arg("--out").arg(&a));
    run_ok(bin()
        .arg("generate")
        .arg("--config")
        .arg(&config)
        .arg("--out")
        .arg(&b)
        .arg("--seed")
        .arg("7"));
    assert_ne!(
        read(&a.join("alpha-1/corpus.txt")),
        read(&b.join("alpha-1/corpus.txt")),
        "--seed must reseed the whole pipeline"
    );
}
