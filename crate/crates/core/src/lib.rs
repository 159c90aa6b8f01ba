//! Selective p-values for salient subgraphs extracted from piecewise-linear
//! GNN saliency maps, plus synthetic generators and a Monte Carlo harness
//! for checking error-rate calibration.

pub mod codec;
pub mod error;
pub mod experiments;
pub mod gnn;
pub mod graph;
pub mod inference;
pub mod model_io;
pub mod noise;
pub mod normal;
pub mod saliency;
pub mod synthgen;

pub use error::{Error, Result};
