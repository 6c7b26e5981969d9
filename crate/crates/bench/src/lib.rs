//! Criterion benchmarks for the numeric kernels, losses, a training step and
//! retrieval evaluation. Run with `cargo bench -p dcd-bench`.
