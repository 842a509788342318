//! Criterion benchmarks for the planning stack; see `benches/`.
