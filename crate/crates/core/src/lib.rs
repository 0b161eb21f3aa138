//! Stacked spectral-clustering feature networks for unsupervised image
//! clustering.

pub mod affinity;
pub mod cli;
pub mod clustering;
pub mod config;
pub mod dataset;
pub mod eigen;
pub mod laplacian;
pub mod layers;
pub mod metrics;
pub mod patch;
pub mod pipeline;
pub mod points;
pub mod rng;
pub mod sparse;
pub mod synthetic;
