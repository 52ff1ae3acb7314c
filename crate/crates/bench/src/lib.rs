//! Criterion benchmarks for the simulator; see `benches/sim.rs`.
