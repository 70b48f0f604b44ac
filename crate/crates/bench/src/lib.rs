//! Benchmark-only crate; see `benches/hotpaths.rs`.
