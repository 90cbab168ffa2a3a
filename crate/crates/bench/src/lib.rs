//! Criterion benchmarks for the loopsim kernels live under `benches/`.
