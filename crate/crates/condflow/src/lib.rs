//! Heterogeneous-supervision depth estimation: a shared convolutional trunk
//! with depth-classification and semantic-segmentation branches trained by
//! conditional gradient flow over two disjoint datasets, followed by a
//! regression refinement phase, plus the data tooling and metrics around it.

#![forbid(unsafe_code)]

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod net;
pub mod network;
pub mod ops;
pub mod params;
pub mod predict;
pub mod tensor;
pub mod train;
