//! Criterion benchmarks for the hygeia workspace live in `benches/`.
