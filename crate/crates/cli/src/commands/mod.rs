//! Subcommand implementations. Each command loops over the alpha-grid cells
//! of the experiment config and writes its artifacts under
//! `out/alpha-<α>/`; `bench` chains generate → train → evaluate and merges
//! the per-cell evaluation tables into one summary.

pub mod bench;
pub mod evaluate;
pub mod generate;
pub mod oracle;
pub mod train;
