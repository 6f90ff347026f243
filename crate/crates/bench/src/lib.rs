//! Criterion benchmarks for the link model, GP, networks and environment; see `benches/`.
