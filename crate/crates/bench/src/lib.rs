//! Criterion benchmarks for retrieval and evaluation; see `benches/`.
