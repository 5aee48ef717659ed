//! File formats, dataset generation, the training loop, benchmarks and
//! visualization export around `memattn-core`.

pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod train;
pub mod viz;
