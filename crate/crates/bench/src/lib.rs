//! Criterion benchmarks live in benches/pipeline.rs; this crate has no
//! library code of its own.
