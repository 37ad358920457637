//! `bench`: the full sweep. Runs generate → train → evaluate for every
//! alpha-grid cell and merges the per-cell evaluation tables into one
//! `summary.csv`, preserving row order (cells in grid order, method rows in
//! benchmark order).

use std::io::Write;
use std::path::Path;

use anyhow::{Context, Result};

use crate::config::{CellPaths, ExperimentConfig, Objective};
use crate::io::atomic_write_with;

pub fn run(cfg: &ExperimentConfig, out: &Path, objective: Objective) -> Result<u8> {
    super::generate::run(cfg, out)?;
    let code = super::train::run(cfg, out, objective)?;
    if code != 0 {
        return Ok(code);
    }
    super::evaluate::run(cfg, out, false, objective)?;

    let mut header: Option<String> = None;
    let mut rows = Vec::new();
    for (_, alpha) in cfg.cells() {
        let path = CellPaths::new(out, alpha).eval();
        let text = std::fs::read_to_string(&path)
            .with_context(|| format!("reading {}", path.display()))?;
        let mut lines = text.lines();
        let head = lines.next().with_context(|| format!("{} is empty", path.display()))?;
        match &header {
            None => header = Some(head.to_owned()),
            Some(h) => anyhow::ensure!(
                h == head,
                "inconsistent eval.csv headers between cells ({} vs {})",
                h,
                head
            ),
        }
        rows.extend(lines.map(str::to_owned));
    }
    let summary = out.join("summary.csv");
    atomic_write_with(&summary, |buf| {
        writeln!(buf, "{}", header.expect("alpha grid is nonempty"))?;
        for row in &rows {
            writeln!(buf, "{row}")?;
        }
        Ok(())
    })?;
    println!("bench: merged {} rows -> {}", rows.len(), summary.display());
    Ok(0)
}
