//! Criterion benchmarks for the ternvit kernels live under `benches/`.
