//! Benchmarks only; see `benches/rules.rs`.
