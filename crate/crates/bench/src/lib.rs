//! Criterion benchmarks for the nowcasting kernels live under `benches/`.
