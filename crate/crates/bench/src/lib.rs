//! Criterion benchmarks for the hot kernels and the detector; see `benches/`.
