//! Criterion benchmarks for the detector hot paths; run with `cargo bench -p oodguard-bench`.
