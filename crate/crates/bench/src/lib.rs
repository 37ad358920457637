//! Benchmark-only crate; see `benches/pipeline.rs`. The hot paths measured
//! there are the ones that dominate end-to-end experiment time: SVD-backed
//! pseudo-inversion, Kronecker-lifted recovery, predictor forward passes,
//! the SNIS posterior oracle, and corpus sampling.
