//! Criterion benchmarks for the solver and the material network; see `benches/`.
