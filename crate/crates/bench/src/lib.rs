//! Criterion benchmarks for the bound kernels, the noise-family primitives,
//! and end-to-end training iterations. Nothing here is part of the public
//! API; see the `benches/` directory.
