//! Graph-transformer laboratory built around generalized PageRank attention:
//! exact and linear-time factorized attention kernels, auxiliary
//! message-passing fusion, full-batch training, and an over-smoothing /
//! spectral diagnostics suite.

pub mod attention;
pub mod dataset;
pub mod diagnostics;
pub mod error;
pub mod graph;
pub mod linalg;
pub mod model;
pub mod report;
pub mod synthetic;
pub mod tape;
pub mod train;

pub use error::{Error, Result};
pub use linalg::Mat;
