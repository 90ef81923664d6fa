//! Criterion benchmarks for the estimation chain; see `benches/`.
