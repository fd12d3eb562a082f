//! Criterion benchmarks for the numerical kernels, the simulator and the
//! estimand engines. Run with `cargo bench -p truncdeath-bench`.
