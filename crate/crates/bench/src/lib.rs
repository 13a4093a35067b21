//! Criterion benchmarks for the evaluation engine live under `benches/`.
