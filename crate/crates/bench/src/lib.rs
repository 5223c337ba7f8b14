//! Criterion benchmarks for vanishnet live in `benches/`.
