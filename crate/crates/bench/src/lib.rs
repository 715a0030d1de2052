//! Criterion benchmarks for the hot kernels: Hessian-vector products,
//! Lanczos spectra and PGD. Run with `cargo bench -p effdim-bench`.
