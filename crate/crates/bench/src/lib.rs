//! Criterion benchmarks for `longfactor`; see `benches/estimation.rs`.
