//! Criterion benchmarks for `kcad-core`; see `benches/`.
